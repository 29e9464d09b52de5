//! End-to-end data checks that need both the corpus generator and the
//! trainer: class separability and the clean-vs-reverberant accuracy gap.

use lrf_core::architectures::build_standard;
use lrf_core::corpus::{
    features_for, generate_corpus, load_split, reverberate_utterance, CorpusConfig, Split,
};
use lrf_core::trainer::{evaluate, train, FeatUtt, TrainConfig};

fn temp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("lrf_sep_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn featurize(utts: &[lrf_core::corpus::Utterance]) -> Vec<FeatUtt> {
    utts.iter().map(|u| features_for(u).unwrap()).collect()
}

/// A frame-wise linear classifier (width-1 conv straight to the softmax)
/// beats chance on clean dev data, and a fixed trained model loses accuracy
/// when the dev data is reverberated at t60 >= 0.3 s.
#[test]
fn linear_baseline_beats_chance_and_reverb_hurts() {
    let dir = temp_dir("baseline");
    let config = CorpusConfig {
        num_classes: 4,
        train_utts: 24,
        dev_utts: 8,
        eval_utts: 0,
        frames_per_utt: 120,
        seed: 17,
    };
    let manifest = generate_corpus(&config, &dir).unwrap();
    let train_utts = load_split(&dir, &manifest, Split::Train).unwrap();
    let dev_utts = load_split(&dir, &manifest, Split::Dev).unwrap();
    let train_data = featurize(&train_utts);
    let dev_data = featurize(&dev_utts);

    // Linear model: one width-1 hidden-free conv into the softmax.
    let spec = build_standard(1, 1, 16, 4).unwrap();
    let outcome = train(
        &spec,
        &train_data,
        &dev_data,
        &TrainConfig {
            epochs: 10,
            batch_size: 4,
            crop_frames: 120,
            seed: 5,
            ..TrainConfig::default()
        },
    )
    .unwrap();

    let chance = 1.0 / 4.0;
    assert!(
        outcome.best_dev_accuracy > chance + 0.15,
        "linear dev accuracy {} vs chance {chance}",
        outcome.best_dev_accuracy
    );

    // Same checkpoint, reverberated dev data: accuracy must drop.
    let wet_dev: Vec<FeatUtt> = dev_utts
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let wet = reverberate_utterance(u, 0.3, 1000 + i as u64).unwrap();
            features_for(&wet).unwrap()
        })
        .collect();
    let clean_record = evaluate(&outcome.network, &dev_data, Split::Dev).unwrap();
    let wet_record = evaluate(&outcome.network, &wet_dev, Split::Dev).unwrap();
    assert!(
        clean_record.frame_accuracy >= wet_record.frame_accuracy,
        "clean {} vs reverberant {}",
        clean_record.frame_accuracy,
        wet_record.frame_accuracy
    );

    std::fs::remove_dir_all(&dir).unwrap();
}
