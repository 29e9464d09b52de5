//! Builders for the five network families.
//!
//! Every builder emits a uniform hidden width (so budget matching applies),
//! chains Conv+ReLU blocks per family, projects to the class count with a
//! width-1 conv head, and ends in the softmax sink. Outputs are validated
//! before they are returned.

use std::collections::BTreeMap;

use crate::netgraph::{Family, Layer, LayerKind, NetworkSpec, SpecError, TapSet, INPUT_ID};

pub const DEFAULT_INPUT_DIM: usize = crate::netgraph::DEFAULT_INPUT_DIM;

struct SpecBuilder {
    layers: Vec<Layer>,
    edges: Vec<(String, String)>,
    /// Id of the node new layers chain from.
    tail: String,
}

impl SpecBuilder {
    fn new() -> Self {
        SpecBuilder {
            layers: Vec::new(),
            edges: Vec::new(),
            tail: INPUT_ID.to_string(),
        }
    }

    fn push(&mut self, id: impl Into<String>, kind: LayerKind) -> String {
        let id = id.into();
        self.layers.push(Layer {
            id: id.clone(),
            kind,
        });
        self.edges.push((self.tail.clone(), id.clone()));
        self.tail = id.clone();
        id
    }

    /// Adds a merge layer whose inputs are `sources` (not the running tail).
    fn push_merge(&mut self, id: impl Into<String>, kind: LayerKind, sources: &[String]) -> String {
        let id = id.into();
        self.layers.push(Layer {
            id: id.clone(),
            kind,
        });
        for s in sources {
            self.edges.push((s.clone(), id.clone()));
        }
        self.tail = id.clone();
        id
    }

    fn conv(
        &mut self,
        id: impl Into<String>,
        taps: TapSet,
        in_ch: usize,
        out_ch: usize,
        share_group: Option<String>,
    ) -> String {
        self.push(
            id,
            LayerKind::Conv {
                taps,
                in_channels: in_ch,
                out_channels: out_ch,
                share_group,
            },
        )
    }

    fn conv_relu(
        &mut self,
        stem: &str,
        taps: TapSet,
        in_ch: usize,
        out_ch: usize,
        share_group: Option<String>,
    ) -> String {
        self.conv(format!("{stem}_conv"), taps, in_ch, out_ch, share_group);
        self.push(format!("{stem}_relu"), LayerKind::Relu)
    }

    fn finish(
        mut self,
        family: Family,
        hidden: usize,
        num_classes: usize,
        meta: BTreeMap<String, String>,
    ) -> Result<NetworkSpec, SpecError> {
        self.conv("head", TapSet::new(vec![0])?, hidden, num_classes, None);
        self.push("out", LayerKind::SoftmaxOutput { num_classes });
        let mut spec = NetworkSpec {
            family,
            input_dim: DEFAULT_INPUT_DIM,
            num_classes,
            layers: self.layers,
            edges: self.edges,
            meta,
        };
        spec.normalize();
        spec.validate()?;
        Ok(spec)
    }
}

fn meta_of(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

/// Three standard width-3 Conv+ReLU layers consuming the input features.
fn preprocessing_subnet(b: &mut SpecBuilder, channels: usize) -> Result<(), SpecError> {
    for i in 0..3 {
        let in_ch = if i == 0 { DEFAULT_INPUT_DIM } else { channels };
        b.conv_relu(
            &format!("pre{i}"),
            TapSet::contiguous(3)?,
            in_ch,
            channels,
            None,
        );
    }
    Ok(())
}

/// `depth` width-`width` Conv+ReLU layers, then the softmax head.
pub fn build_standard(
    width: usize,
    depth: usize,
    channels: usize,
    num_classes: usize,
) -> Result<NetworkSpec, SpecError> {
    if depth == 0 {
        return Err(SpecError::Schema("standard CNN needs at least one layer".into()));
    }
    let mut b = SpecBuilder::new();
    for i in 0..depth {
        let in_ch = if i == 0 { DEFAULT_INPUT_DIM } else { channels };
        b.conv_relu(
            &format!("conv{i}"),
            TapSet::contiguous(width)?,
            in_ch,
            channels,
            None,
        );
    }
    b.finish(
        Family::Standard,
        channels,
        num_classes,
        meta_of(&[("W", width.to_string()), ("L", depth.to_string())]),
    )
}

/// Preprocessing subnet followed by one dilated Conv+ReLU per dilation
/// factor.
pub fn build_dilnet(
    width: usize,
    dilations: &[usize],
    channels: usize,
    num_classes: usize,
) -> Result<NetworkSpec, SpecError> {
    if dilations.is_empty() {
        return Err(SpecError::Schema("dilnet needs at least one dilation".into()));
    }
    let mut b = SpecBuilder::new();
    preprocessing_subnet(&mut b, channels)?;
    for (i, &d) in dilations.iter().enumerate() {
        b.conv_relu(
            &format!("dil{i}"),
            TapSet::dilated(width, d)?,
            channels,
            channels,
            None,
        );
    }
    let dil_str = dilations
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    b.finish(
        Family::DilNet,
        channels,
        num_classes,
        meta_of(&[
            ("W", width.to_string()),
            ("dilations", dil_str),
            ("L", (3 + dilations.len()).to_string()),
        ]),
    )
}

/// One `{-d1, 0, +d2}` Conv+ReLU per context pair. Layers with both contexts
/// zero degenerate to width-1 convolutions; an all-degenerate net is allowed
/// but flagged in `meta`.
pub fn build_tdnn(
    contexts: &[(u64, u64)],
    channels: usize,
    num_classes: usize,
) -> Result<NetworkSpec, SpecError> {
    if contexts.is_empty() {
        return Err(SpecError::Schema("tdnn needs at least one context pair".into()));
    }
    let mut b = SpecBuilder::new();
    for (i, &(left, right)) in contexts.iter().enumerate() {
        let in_ch = if i == 0 { DEFAULT_INPUT_DIM } else { channels };
        b.conv_relu(
            &format!("tdnn{i}"),
            TapSet::tdnn(left, right),
            in_ch,
            channels,
            None,
        );
    }
    let ctx_str = contexts
        .iter()
        .map(|(l, r)| format!("{l}:{r}"))
        .collect::<Vec<_>>()
        .join(",");
    let mut meta = meta_of(&[("contexts", ctx_str)]);
    if contexts.iter().all(|&(l, r)| l == 0 && r == 0) {
        meta.insert("degenerate".into(), "true".into());
    }
    b.finish(Family::Tdnn, channels, num_classes, meta)
}

/// Preprocessing subnet, then `subnets` recursive blocks. Each block applies
/// one shared Conv+ReLU `recursions` times and merges all application outputs
/// with a learnable weighted sum initialized to the plain average.
pub fn build_recnet(
    recursions: usize,
    subnets: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
) -> Result<NetworkSpec, SpecError> {
    if recursions == 0 || subnets == 0 {
        return Err(SpecError::Schema(
            "recnet needs at least one recursion and one subnet".into(),
        ));
    }
    let mut b = SpecBuilder::new();
    preprocessing_subnet(&mut b, channels)?;
    for j in 0..subnets {
        let group = format!("rec{j}");
        let mut taps_outputs = Vec::with_capacity(recursions);
        for r in 0..recursions {
            let out = b.conv_relu(
                &format!("rec{j}_app{r}"),
                TapSet::contiguous(width)?,
                channels,
                channels,
                Some(group.clone()),
            );
            taps_outputs.push(out);
        }
        b.push_merge(
            format!("rec{j}_mix"),
            LayerKind::WeightedSum {
                sources: taps_outputs.clone(),
                weights: vec![1.0 / recursions as f64; recursions],
            },
            &taps_outputs,
        );
    }
    b.finish(
        Family::RecNet,
        channels,
        num_classes,
        meta_of(&[
            ("R", recursions.to_string()),
            ("N", subnets.to_string()),
            ("W", width.to_string()),
        ]),
    )
}

/// `stacks` hourglass units in series. Each unit: `levels` of
/// [Conv+ReLU -> MaxPool(2)] down, a bottleneck Conv+ReLU, then `levels` of
/// [Upsample(2) -> Conv+ReLU -> Add skip] up, where each skip joins the
/// pre-pool activation with the same-resolution post-upsample activation.
/// Inputs must have time length divisible by 2^levels.
pub fn build_hgnet(
    stacks: usize,
    width: usize,
    levels: usize,
    channels: usize,
    num_classes: usize,
) -> Result<NetworkSpec, SpecError> {
    if stacks == 0 || levels == 0 {
        return Err(SpecError::Schema(
            "hgnet needs at least one stack and one level".into(),
        ));
    }
    let mut b = SpecBuilder::new();
    for s in 0..stacks {
        let mut skips: Vec<String> = Vec::with_capacity(levels);
        for l in 0..levels {
            let in_ch = if s == 0 && l == 0 {
                DEFAULT_INPUT_DIM
            } else {
                channels
            };
            let skip = b.conv_relu(
                &format!("u{s}_down{l}"),
                TapSet::contiguous(width)?,
                in_ch,
                channels,
                None,
            );
            skips.push(skip);
            b.push(format!("u{s}_pool{l}"), LayerKind::MaxPool { window: 2 });
        }
        b.conv_relu(
            &format!("u{s}_bottleneck"),
            TapSet::contiguous(width)?,
            channels,
            channels,
            None,
        );
        for l in (0..levels).rev() {
            b.push(format!("u{s}_up{l}"), LayerKind::Upsample { factor: 2 });
            let up_out = b.conv_relu(
                &format!("u{s}_upconv{l}"),
                TapSet::contiguous(width)?,
                channels,
                channels,
                None,
            );
            let sources = vec![skips[l].clone(), up_out];
            b.push_merge(
                format!("u{s}_skip{l}"),
                LayerKind::Add {
                    sources: sources.clone(),
                },
                &sources,
            );
        }
    }
    b.finish(
        Family::HgNet,
        channels,
        num_classes,
        meta_of(&[
            ("S", stacks.to_string()),
            ("W", width.to_string()),
            ("L", levels.to_string()),
        ]),
    )
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Builds a family at its best reported configuration with the given hidden
/// width (the convention is 512 kernels; budget matching rescales).
pub fn preset(
    family: Family,
    channels: usize,
    num_classes: usize,
) -> Result<NetworkSpec, SpecError> {
    match family {
        Family::Standard => build_standard(5, 10, channels, num_classes),
        Family::DilNet => build_dilnet(5, &[2, 4, 8], channels, num_classes),
        Family::Tdnn => build_tdnn(&[(1, 1), (2, 2), (4, 4)], channels, num_classes),
        Family::RecNet => build_recnet(5, 5, 3, channels, num_classes),
        Family::HgNet => build_hgnet(5, 5, 3, channels, num_classes),
    }
}

/// Structurally reduced instances used for gradient checking and fast tests.
pub fn small_preset(family: Family, channels: usize, num_classes: usize) -> Result<NetworkSpec, SpecError> {
    match family {
        Family::Standard => build_standard(3, 3, channels, num_classes),
        Family::DilNet => build_dilnet(3, &[2, 4], channels, num_classes),
        Family::Tdnn => build_tdnn(&[(1, 1), (2, 2)], channels, num_classes),
        Family::RecNet => build_recnet(2, 2, 3, channels, num_classes),
        Family::HgNet => build_hgnet(1, 3, 2, channels, num_classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{count_params, hidden_width};

    #[test]
    fn standard_preset_shape() {
        let spec = build_standard(5, 10, 64, 8).unwrap();
        let convs = spec
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .count();
        assert_eq!(convs, 11); // 10 body + head
        assert_eq!(hidden_width(&spec).unwrap(), 64);
    }

    #[test]
    fn standard_param_count_hand_audit() {
        // L=3, W=3, 40-d input, 8 classes, width 10:
        //   conv0: 3*40*10 + 10 = 1210
        //   conv1: 3*10*10 + 10 = 310
        //   conv2: 310
        //   head:  1*10*8 + 8 = 88
        let spec = build_standard(3, 3, 10, 8).unwrap();
        assert_eq!(count_params(&spec), 1210 + 310 + 310 + 88);
    }

    #[test]
    fn even_width_is_rejected() {
        assert!(build_standard(4, 2, 8, 4).is_err());
    }

    #[test]
    fn dilnet_has_preprocessing_plus_dilated_layers() {
        let spec = build_dilnet(5, &[2, 4, 8], 16, 8).unwrap();
        let conv_ids: Vec<&str> = spec
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.id.as_str())
            .collect();
        assert_eq!(
            conv_ids,
            [
                "pre0_conv", "pre1_conv", "pre2_conv", "dil0_conv", "dil1_conv", "dil2_conv",
                "head"
            ]
        );
        // Dilated taps spread by their factor.
        let Some(Layer {
            kind: LayerKind::Conv { taps, .. },
            ..
        }) = spec.layers.iter().find(|l| l.id == "dil2_conv")
        else {
            panic!()
        };
        assert_eq!(taps.offsets(), &[-16, -8, 0, 8, 16]);
    }

    #[test]
    fn dilation_one_is_a_standard_layer() {
        let spec = build_dilnet(5, &[1], 16, 8).unwrap();
        let Some(Layer {
            kind: LayerKind::Conv { taps, .. },
            ..
        }) = spec.layers.iter().find(|l| l.id == "dil0_conv")
        else {
            panic!()
        };
        assert_eq!(taps, &TapSet::contiguous(5).unwrap());
    }

    #[test]
    fn tdnn_taps_and_degenerate_flag() {
        let spec = build_tdnn(&[(2, 0), (0, 3)], 16, 8).unwrap();
        let taps: Vec<Vec<i64>> = spec
            .layers
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Conv { taps, .. } if l.id.starts_with("tdnn") => {
                    Some(taps.offsets().to_vec())
                }
                _ => None,
            })
            .collect();
        assert_eq!(taps, vec![vec![-2, 0], vec![0, 3]]);
        assert!(!spec.meta.contains_key("degenerate"));

        let degenerate = build_tdnn(&[(0, 0), (0, 0)], 16, 8).unwrap();
        assert_eq!(degenerate.meta.get("degenerate").map(String::as_str), Some("true"));
    }

    #[test]
    fn recnet_count_is_independent_of_recursions() {
        let r1 = build_recnet(1, 5, 3, 16, 8).unwrap();
        let r5 = build_recnet(5, 5, 3, 16, 8).unwrap();
        // Weight sharing: only the weighted-sum scalars differ (R per subnet).
        assert_eq!(count_params(&r5), count_params(&r1) + 5 * (5 - 1));
    }

    #[test]
    fn recnet_r1_mix_is_identity_scaling() {
        let spec = build_recnet(1, 2, 3, 16, 8).unwrap();
        let Some(Layer {
            kind: LayerKind::WeightedSum { weights, .. },
            ..
        }) = spec.layers.iter().find(|l| l.id == "rec0_mix")
        else {
            panic!()
        };
        assert_eq!(weights, &[1.0]);
    }

    #[test]
    fn hgnet_unit_structure() {
        let spec = build_hgnet(1, 3, 1, 16, 8).unwrap();
        let kinds: Vec<&str> = spec.layers.iter().map(|l| l.kind.name()).collect();
        assert_eq!(
            kinds,
            [
                "conv", "relu", // down0
                "max_pool", "conv", "relu", // pool + bottleneck
                "upsample", "conv", "relu", // up0
                "add", "conv", "softmax_output", // skip, head, sink
            ]
        );
        let graph = spec.validate().unwrap();
        assert_eq!(graph.granularity, 2);
    }

    #[test]
    fn hgnet_best_reported_config_validates() {
        let spec = build_hgnet(5, 5, 3, 16, 8).unwrap();
        let graph = spec.validate().unwrap();
        assert_eq!(graph.granularity, 8); // 2^3
    }

    /// Symmetric unit contexts per layer give the width-3 standard chain's
    /// field, 2L+1.
    #[test]
    fn symmetric_tdnn_matches_standard_field() {
        for depth in 1..5 {
            let contexts = vec![(1u64, 1u64); depth];
            let tdnn = build_tdnn(&contexts, 8, 4).unwrap();
            let standard = build_standard(3, depth, 8, 4).unwrap();
            let rf_tdnn = crate::rf::rf_general(&tdnn).unwrap().rf;
            let rf_std = crate::rf::rf_general(&standard).unwrap().rf;
            assert_eq!(rf_tdnn, rf_std);
            assert_eq!(rf_tdnn, 2 * depth as u64 + 1);
        }
    }

    /// One hourglass unit restores the input time length end to end.
    #[test]
    fn hgnet_preserves_time_length() {
        use crate::network::Network;
        use crate::tensor::Tensor;
        let spec = build_hgnet(1, 3, 1, 6, 4).unwrap();
        let mut net = Network::new(spec).unwrap();
        net.init_params_dense(3);
        let x = Tensor::from_vec(1, 8, 40, (0..8 * 40).map(|i| (i % 7) as f64 * 0.1).collect());
        let fwd = net.forward(&x).unwrap();
        assert_eq!(fwd.posteriors().shape(), (1, 8, 4));
        // Non-divisible time lengths are the caller's problem: error.
        let bad = Tensor::zeros(1, 9, 40);
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn all_presets_validate() {
        for family in Family::ALL {
            preset(family, 24, 8).unwrap();
            small_preset(family, 6, 4).unwrap();
        }
    }

    #[test]
    fn builders_round_trip_through_the_document_format() {
        use crate::netgraph::{parse_spec, serialize_spec};
        let spec = build_dilnet(5, &[2, 4, 8], 32, 8).unwrap();
        let doc = serialize_spec(&spec);
        let parsed = parse_spec(&doc).unwrap();
        assert_eq!(spec, parsed);
        assert_eq!(doc, serialize_spec(&parsed));
    }
}
