//! Mini-batch Adam training, evaluation, and finite-difference gradient
//! checking.
//!
//! Training draws one seeded fixed-length crop per utterance per epoch,
//! clips gradients by global norm, applies bias-corrected Adam, and tracks
//! the best checkpoint by dev frame accuracy (earlier epoch wins ties).
//! Everything is bit-reproducible given the seed: shuffling and crop starts
//! come from per-epoch derived streams and execution is single-threaded.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::acoustics::FeatureSequence;
use crate::corpus::Split;
use crate::layers::softmax_xent;
use crate::netgraph::{hidden_width, with_hidden_width, NetworkSpec, NodeRef, SpecError};
use crate::network::{NetError, Network, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub type FeatUtt = (FeatureSequence, Vec<u32>);

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("non-finite gradient in `{key}` at optimizer step {step}")]
    NonFiniteGradient { key: String, step: u64 },
    #[error("training diverged at step {step}: CE {ce:.4} exceeds 10x the initial {initial:.4}")]
    Diverged { step: u64, ce: f64, initial: f64 },
    #[error("utterance of {frames} frames is shorter than the network granularity {granularity}")]
    UtteranceTooShort { frames: usize, granularity: u64 },
    #[error("empty data set for {0}")]
    EmptyData(&'static str),
    #[error("gradient check could not steer clear of relu kinks / pool ties after {0} reseeds")]
    KinkAvoidance(u32),
}

// ---------------------------------------------------------------------------
// Config and metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    /// Global-norm clip; <= 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 4,
            crop_frames: 256,
            grad_clip: 5.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub cross_entropy: f64,
    pub frame_accuracy: f64,
    pub wall_seconds: f64,
}

/// CSV with the fixed header `epoch,split,ce,acc,seconds`. Wall seconds are
/// zeroed unless `with_wall` is set, so identical runs remain byte-identical.
pub fn metrics_to_csv(history: &[MetricsRecord], with_wall: bool) -> String {
    let mut out = String::from("epoch,split,ce,acc,seconds\n");
    for r in history {
        let wall = if with_wall { r.wall_seconds } else { 0.0 };
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.3}\n",
            r.epoch,
            r.split.name(),
            r.cross_entropy,
            r.frame_accuracy,
            wall
        ));
    }
    out
}

pub fn metrics_to_jsonl(history: &[MetricsRecord], with_wall: bool) -> String {
    let mut out = String::new();
    for r in history {
        let mut r = r.clone();
        if !with_wall {
            r.wall_seconds = 0.0;
        }
        out.push_str(&serde_json::to_string(&r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second-moment accumulators aligned with the store's flattened
/// parameter slices.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let moments = store
            .entries()
            .iter()
            .flat_map(|e| e.value.flat())
            .map(|s| (vec![0.0; s.len()], vec![0.0; s.len()]))
            .collect();
        AdamState { step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Global-norm clipping followed by the standard bias-corrected update.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    // Finiteness and global norm over every accumulator.
    let mut sq_norm = 0.0;
    for entry in store.entries() {
        for slice in entry.grad.flat() {
            for &g in slice {
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGradient {
                        key: entry.key.clone(),
                        step: state.step + 1,
                    });
                }
                sq_norm += g * g;
            }
        }
    }
    let norm = sq_norm.sqrt();
    let scale = if config.grad_clip > 0.0 && norm > config.grad_clip {
        config.grad_clip / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);

    let mut slot = 0usize;
    for entry in store.entries_mut() {
        let grads: Vec<Vec<f64>> = entry.grad.flat().iter().map(|s| s.to_vec()).collect();
        for (params, grad) in entry.value.flat_mut().into_iter().zip(grads) {
            let (m, v) = &mut state.moments[slot];
            slot += 1;
            for ((p, &g_raw), (mi, vi)) in params
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g_raw * scale;
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= config.alpha * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    /// Network holding the best-dev parameters.
    pub network: Network,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub history: Vec<MetricsRecord>,
}

fn batch_to_tensor(crops: &[(&FeatUtt, usize)], frames: usize) -> (Tensor, Vec<u32>) {
    let dims = crops[0].0 .0.dims();
    let mut data = Vec::with_capacity(crops.len() * frames * dims);
    let mut labels = Vec::with_capacity(crops.len() * frames);
    for ((feats, utt_labels), start) in crops {
        for f in *start..*start + frames {
            data.extend_from_slice(feats.frame(f));
        }
        labels.extend_from_slice(&utt_labels[*start..*start + frames]);
    }
    (
        Tensor::from_vec(crops.len(), frames, dims, data),
        labels,
    )
}

/// Trains `spec` from scratch; returns the best-dev checkpoint and the full
/// metrics history (an epoch-0 dev row precedes training).
pub fn train(
    spec: &NetworkSpec,
    train_data: &[FeatUtt],
    dev_data: &[FeatUtt],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if train_data.is_empty() {
        return Err(TrainError::EmptyData("train"));
    }
    if dev_data.is_empty() {
        return Err(TrainError::EmptyData("dev"));
    }
    let mut net = Network::new(spec.clone())?;
    net.init_params(config.seed);
    let granularity = net.granularity() as usize;

    // One shared crop length: the configured crop, shrunk to the shortest
    // utterance and rounded down to the pooling granularity.
    let shortest = train_data.iter().map(|(f, _)| f.frames()).min().unwrap();
    let crop = (config.crop_frames.min(shortest) / granularity) * granularity;
    if crop == 0 {
        return Err(TrainError::UtteranceTooShort {
            frames: shortest,
            granularity: granularity as u64,
        });
    }

    let start_time = Instant::now();
    let mut history = Vec::new();
    let epoch0 = evaluate_at(&net, dev_data, Split::Dev, 0, start_time)?;
    let initial_ce = epoch0.cross_entropy;
    history.push(epoch0);

    let mut best_epoch = 0usize;
    let mut best_acc = history[0].frame_accuracy;
    let mut best_params: ParamStore = net.params.clone();
    let mut adam = AdamState::new(&net.params);

    for epoch in 1..=config.epochs {
        let mut rng = Rng::new(derive_seed(config.seed, 0x10_0000 + epoch as u64));
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        rng.shuffle(&mut order);

        let mut ce_sum = 0.0;
        let mut correct = 0usize;
        let mut frames = 0usize;
        for batch_ix in order.chunks(config.batch_size.max(1)) {
            let crops: Vec<(&FeatUtt, usize)> = batch_ix
                .iter()
                .map(|&i| {
                    let utt = &train_data[i];
                    let span = utt.0.frames() - crop;
                    let start = if span == 0 {
                        0
                    } else {
                        rng.below(span as u64 + 1) as usize
                    };
                    (utt, start)
                })
                .collect();
            let (x, labels) = batch_to_tensor(&crops, crop);
            let fwd = net.forward(&x)?;
            let stats = net.backward(&x, &fwd, &labels)?;
            adam_step(&mut net.params, &mut adam, config)?;

            ce_sum += stats.mean_ce * stats.total_frames as f64;
            correct += stats.correct_frames;
            frames += stats.total_frames;
            if stats.mean_ce > 10.0 * initial_ce {
                return Err(TrainError::Diverged {
                    step: adam.step_count(),
                    ce: stats.mean_ce,
                    initial: initial_ce,
                });
            }
        }
        history.push(MetricsRecord {
            epoch,
            split: Split::Train,
            cross_entropy: ce_sum / frames as f64,
            frame_accuracy: correct as f64 / frames as f64,
            wall_seconds: start_time.elapsed().as_secs_f64(),
        });

        let dev = evaluate_at(&net, dev_data, Split::Dev, epoch, start_time)?;
        if dev.frame_accuracy > best_acc {
            best_acc = dev.frame_accuracy;
            best_epoch = epoch;
            best_params = net.params.clone();
        }
        history.push(dev);
    }

    net.params = best_params;
    Ok(TrainOutcome {
        network: net,
        best_epoch,
        best_dev_accuracy: best_acc,
        history,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Full-utterance evaluation: features are zero-padded up to the pooling
/// granularity, posteriors trimmed back, accuracy counted by argmax with the
/// first index winning ties.
pub fn evaluate(net: &Network, data: &[FeatUtt], split: Split) -> Result<MetricsRecord, TrainError> {
    evaluate_at(net, data, split, 0, Instant::now())
}

fn evaluate_at(
    net: &Network,
    data: &[FeatUtt],
    split: Split,
    epoch: usize,
    start_time: Instant,
) -> Result<MetricsRecord, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData("eval"));
    }
    let granularity = net.granularity() as usize;
    let mut ce_sum = 0.0;
    let mut correct = 0usize;
    let mut frames = 0usize;
    for (feats, labels) in data {
        let n = feats.frames();
        let padded = n.div_ceil(granularity) * granularity;
        let dims = feats.dims();
        let mut data_vec = Vec::with_capacity(padded * dims);
        data_vec.extend_from_slice(feats.data());
        data_vec.resize(padded * dims, 0.0);
        let x = Tensor::from_vec(1, padded, dims, data_vec);
        let fwd = net.forward(&x)?;

        // Trim the logits back to the true frame count before scoring.
        let sink_pred = net.graph().preds[net.graph().sink][0];
        let logits_full = match sink_pred {
            NodeRef::Layer(j) => &fwd.outputs[j],
            NodeRef::Input => &x,
        };
        let k = logits_full.channels();
        let mut logits = Vec::with_capacity(n * k);
        for t in 0..n {
            logits.extend_from_slice(logits_full.row(0, t));
        }
        let logits = Tensor::from_vec(1, n, k, logits);
        let scored = softmax_xent(&logits, labels).map_err(|e| {
            TrainError::Net(NetError::Layer {
                layer: "softmax output".into(),
                source: e,
            })
        })?;
        ce_sum += scored.mean_ce * n as f64;
        correct += scored.correct;
        frames += n;
    }
    Ok(MetricsRecord {
        epoch,
        split,
        cross_entropy: ce_sum / frames as f64,
        frame_accuracy: correct as f64 / frames as f64,
        wall_seconds: start_time.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckParam {
    pub key: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub family: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub worst_param: String,
    pub per_param: Vec<GradCheckParam>,
    pub reseeds: u32,
}

pub const GRAD_CHECK_H: f64 = 1e-5;
const GRAD_CHECK_TIME: usize = 32;
const GRAD_CHECK_MAX_CHANNELS: usize = 8;
const KINK_MARGIN: f64 = 1e-4;
const MAX_RESEEDS: u32 = 8;

/// Central finite differences (h = 1e-5) over every parameter of a
/// down-scaled instance (hidden width <= 8, 32 frames). Inputs are nudged
/// away from zero and the instance is re-seeded while any pre-relu
/// activation or pool-window tie sits too close to a kink.
pub fn grad_check(spec: &NetworkSpec, tolerance: f64) -> Result<GradCheckReport, TrainError> {
    grad_check_with_fault(spec, tolerance, None)
}

/// Like [`grad_check`], but optionally corrupts the analytic gradient of one
/// parameter entry to demonstrate that broken adjoints are caught and named.
pub fn grad_check_with_fault(
    spec: &NetworkSpec,
    tolerance: f64,
    fault: Option<&str>,
) -> Result<GradCheckReport, TrainError> {
    let small = match hidden_width(spec) {
        Ok(width) if width > GRAD_CHECK_MAX_CHANNELS => {
            with_hidden_width(spec, GRAD_CHECK_MAX_CHANNELS)?
        }
        _ => spec.clone(),
    };
    let mut net = Network::new(small.clone())?;
    let granularity = net.granularity() as usize;
    let time = GRAD_CHECK_TIME.div_ceil(granularity) * granularity;
    let k = small.num_classes;

    // Find a seed whose forward pass stays clear of relu kinks and pool ties.
    let mut reseeds = 0u32;
    let (x, labels) = loop {
        let seed = derive_seed(0xFDC4EC ^ small.family as u64, reseeds as u64);
        let mut rng = Rng::new(seed);
        net.init_params_dense(seed);
        let mut data: Vec<f64> = (0..time * small.input_dim)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        // Documented nudge: push inputs at least 1e-2 from zero.
        for v in &mut data {
            if v.abs() < 1e-2 {
                *v += if *v < 0.0 { -1e-2 } else { 1e-2 };
            }
        }
        let x = Tensor::from_vec(1, time, small.input_dim, data);
        let labels: Vec<u32> = (0..time).map(|_| rng.below(k as u64) as u32).collect();
        if forward_is_kink_free(&net, &x)? {
            break (x, labels);
        }
        reseeds += 1;
        if reseeds > MAX_RESEEDS {
            return Err(TrainError::KinkAvoidance(reseeds));
        }
    };

    // Analytic gradients.
    let fwd = net.forward(&x)?;
    net.backward(&x, &fwd, &labels)?;
    let mut analytic: Vec<(String, Vec<f64>)> = net
        .params
        .entries()
        .iter()
        .map(|e| (e.key.clone(), e.grad.flat().concat()))
        .collect();
    if let Some(bad_key) = fault {
        for (key, grads) in &mut analytic {
            if key == bad_key {
                grads.iter_mut().for_each(|g| *g += 0.5);
            }
        }
    }

    // Central differences on the same loss.
    let mut per_param = Vec::with_capacity(analytic.len());
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for entry_ix in 0..net.params.entries().len() {
        let (key, grads) = analytic[entry_ix].clone();
        let count = net.params.entries()[entry_ix].value.len();
        let mut entry_max = 0.0f64;
        for p in 0..count {
            let up = loss_with_delta(&mut net, entry_ix, p, GRAD_CHECK_H, &x, &labels)?;
            let down = loss_with_delta(&mut net, entry_ix, p, -2.0 * GRAD_CHECK_H, &x, &labels)?;
            loss_with_delta(&mut net, entry_ix, p, GRAD_CHECK_H, &x, &labels)?; // restore
            let numeric = (up - down) / (2.0 * GRAD_CHECK_H);
            let a = grads[p];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            entry_max = entry_max.max(rel);
        }
        if entry_max > max_rel {
            max_rel = entry_max;
            worst = key.clone();
        }
        per_param.push(GradCheckParam {
            key,
            max_rel_err: entry_max,
        });
    }

    Ok(GradCheckReport {
        family: small.family.name().to_string(),
        tolerance,
        max_rel_err: max_rel,
        pass: max_rel < tolerance,
        worst_param: worst,
        per_param,
        reseeds,
    })
}

/// True when every pre-relu activation is at least KINK_MARGIN from zero and
/// every pool window's best value leads its runner-up by the same margin.
fn forward_is_kink_free(net: &Network, x: &Tensor) -> Result<bool, TrainError> {
    use crate::netgraph::LayerKind;
    let fwd = net.forward(x)?;
    let spec = net.spec();
    let graph = net.graph();
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Relu => {
                let input = match graph.preds[i][0] {
                    NodeRef::Input => x,
                    NodeRef::Layer(j) => &fwd.outputs[j],
                };
                if input.data().iter().any(|v| v.abs() < KINK_MARGIN) {
                    return Ok(false);
                }
            }
            LayerKind::MaxPool { window } => {
                let input = match graph.preds[i][0] {
                    NodeRef::Input => x,
                    NodeRef::Layer(j) => &fwd.outputs[j],
                };
                let (batch, time, ch) = input.shape();
                for b in 0..batch {
                    for ot in 0..time / window {
                        for c in 0..ch {
                            let mut best = f64::NEG_INFINITY;
                            let mut second = f64::NEG_INFINITY;
                            for t in ot * window..(ot + 1) * window {
                                let v = input.at(b, t, c);
                                if v > best {
                                    second = best;
                                    best = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                            // An all-zero window is a stable tie of clamped
                            // relu outputs (their pre-activations already
                            // cleared the kink margin); positive ties can
                            // flip the argmax under perturbation.
                            if best == 0.0 && second == 0.0 {
                                continue;
                            }
                            if best - second < KINK_MARGIN {
                                return Ok(false);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(true)
}

fn loss_with_delta(
    net: &mut Network,
    entry_ix: usize,
    flat_param: usize,
    delta: f64,
    x: &Tensor,
    labels: &[u32],
) -> Result<f64, TrainError> {
    {
        let value = &mut net.params.entries_mut()[entry_ix].value;
        let mut offset = 0usize;
        for slice in value.flat_mut() {
            if flat_param < offset + slice.len() {
                slice[flat_param - offset] += delta;
                break;
            }
            offset += slice.len();
        }
    }
    let fwd = net.forward(x)?;
    let sink_pred = net.graph().preds[net.graph().sink][0];
    let logits = match sink_pred {
        NodeRef::Layer(j) => &fwd.outputs[j],
        NodeRef::Input => x,
    };
    let scored = softmax_xent(logits, labels).map_err(|e| {
        TrainError::Net(NetError::Layer {
            layer: "softmax output".into(),
            source: e,
        })
    })?;
    Ok(scored.mean_ce)
}
