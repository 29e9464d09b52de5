//! Declarative network specifications.
//!
//! A [`NetworkSpec`] is a directed acyclic graph of [`Layer`]s fed by the
//! reserved `"input"` node and terminating in a single `SoftmaxOutput` sink.
//! This module owns the JSON document format (strict: unknown fields are
//! errors), validation, parameter accounting, and budget matching. Numeric
//! execution lives in `layers`/`network`; receptive-field analysis in `rf`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde_json::Value;
use thiserror::Error;

/// Reserved id of the graph source in `edges` and merge `sources`.
pub const INPUT_ID: &str = "input";

/// Feature dimension used when a document omits `input_dim`.
pub const DEFAULT_INPUT_DIM: usize = 40;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("spec document: {0}")]
    Schema(String),
    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },
    #[error("cycle detected involving layer `{layer}`")]
    Cycle { layer: String },
    #[error(
        "merge shape mismatch at `{layer}`: source `{first}` yields {first_shape}, \
         source `{second}` yields {second_shape}"
    )]
    MergeMismatch {
        layer: String,
        first: String,
        first_shape: String,
        second: String,
        second_shape: String,
    },
    #[error("invalid tap set: {0}")]
    Taps(String),
    #[error("budget {budget} infeasible: width 1 already needs {min_count} parameters")]
    InfeasibleBudget { budget: u64, min_count: u64 },
    #[error(
        "no hidden width matches budget {budget} within {tolerance}: \
         nearest below is width {width} with {count} parameters"
    )]
    BudgetNotMatchable {
        budget: u64,
        tolerance: f64,
        width: usize,
        count: u64,
    },
    #[error("spec has no uniform hidden width: {0}")]
    NonUniformWidth(String),
}

// ---------------------------------------------------------------------------
// Tap sets
// ---------------------------------------------------------------------------

/// Ordered frame offsets of a 1-D convolution, relative to the output frame.
///
/// A standard width-W kernel (odd W) is the contiguous set
/// `{-(W-1)/2, ..., +(W-1)/2}`; a dilation-d kernel has consecutive-offset
/// gaps of exactly d; a TDNN layer uses `{-d1, 0, +d2}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TapSet {
    offsets: Vec<i64>,
}

impl TapSet {
    /// Strictly increasing, non-empty offsets.
    pub fn new(offsets: Vec<i64>) -> Result<Self, SpecError> {
        if offsets.is_empty() {
            return Err(SpecError::Taps("tap set must be non-empty".into()));
        }
        if !offsets.windows(2).all(|w| w[0] < w[1]) {
            return Err(SpecError::Taps(format!(
                "offsets must be strictly increasing, got {offsets:?}"
            )));
        }
        Ok(TapSet { offsets })
    }

    /// Contiguous symmetric kernel of odd width.
    pub fn contiguous(width: usize) -> Result<Self, SpecError> {
        Self::dilated(width, 1)
    }

    /// Symmetric kernel of odd `width` with gaps of exactly `dilation`.
    pub fn dilated(width: usize, dilation: usize) -> Result<Self, SpecError> {
        if width == 0 || width % 2 == 0 {
            return Err(SpecError::Taps(format!(
                "kernel width must be odd and positive, got {width}"
            )));
        }
        if dilation == 0 {
            return Err(SpecError::Taps("dilation must be >= 1".into()));
        }
        let half = (width as i64 - 1) / 2;
        let d = dilation as i64;
        Ok(TapSet {
            offsets: (-half..=half).map(|k| k * d).collect(),
        })
    }

    /// TDNN context taps `{-left, 0, +right}` (deduplicated when a side is 0).
    pub fn tdnn(left: u64, right: u64) -> Self {
        let mut offsets = vec![-(left as i64), 0, right as i64];
        offsets.sort_unstable();
        offsets.dedup();
        TapSet { offsets }
    }

    #[inline]
    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn min(&self) -> i64 {
        self.offsets[0]
    }

    #[inline]
    pub fn max(&self) -> i64 {
        *self.offsets.last().unwrap()
    }

    /// max(taps) - min(taps): the extent the kernel adds to a receptive field.
    #[inline]
    pub fn span(&self) -> u64 {
        (self.max() - self.min()) as u64
    }
}

// ---------------------------------------------------------------------------
// Layers and the spec graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        taps: TapSet,
        in_channels: usize,
        out_channels: usize,
        share_group: Option<String>,
    },
    /// Max pooling with stride equal to the window.
    MaxPool { window: usize },
    /// Nearest-neighbor repeat by `factor`.
    Upsample { factor: usize },
    Relu,
    Identity,
    Add { sources: Vec<String> },
    WeightedSum {
        sources: Vec<String>,
        /// Initial values of the learnable per-source scalars.
        weights: Vec<f64>,
    },
    SoftmaxOutput { num_classes: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Relu => "relu",
            LayerKind::Identity => "identity",
            LayerKind::Add { .. } => "add",
            LayerKind::WeightedSum { .. } => "weighted_sum",
            LayerKind::SoftmaxOutput { .. } => "softmax_output",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Standard,
    DilNet,
    Tdnn,
    RecNet,
    HgNet,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Standard => "standard",
            Family::DilNet => "dilnet",
            Family::Tdnn => "tdnn",
            Family::RecNet => "recnet",
            Family::HgNet => "hgnet",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Some(match s {
            "standard" => Family::Standard,
            "dilnet" => Family::DilNet,
            "tdnn" => Family::Tdnn,
            "recnet" => Family::RecNet,
            "hgnet" => Family::HgNet,
            _ => return None,
        })
    }

    pub const ALL: [Family; 5] = [
        Family::Standard,
        Family::DilNet,
        Family::Tdnn,
        Family::RecNet,
        Family::HgNet,
    ];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub family: Family,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Declaration order is meaningful: it fixes parameter/checkpoint order.
    pub layers: Vec<Layer>,
    pub edges: Vec<(String, String)>,
    pub meta: BTreeMap<String, String>,
}

/// Upstream reference: the reserved input node or a layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Input,
    Layer(usize),
}

/// Pre-computed evaluation structure of a validated spec.
#[derive(Debug, Clone)]
pub struct Graph {
    /// Layer indices in deterministic topological order.
    pub topo: Vec<usize>,
    /// Ordered upstream nodes per layer (merge layers keep declared source order).
    pub preds: Vec<Vec<NodeRef>>,
    /// Output channel count per layer.
    pub channels: Vec<usize>,
    /// Cumulative time subsampling per layer output (1 = input resolution).
    pub stride: Vec<u64>,
    /// Index of the SoftmaxOutput sink.
    pub sink: usize,
    /// Input time length must be divisible by this (LCM of all strides).
    pub granularity: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

impl NetworkSpec {
    /// Canonical in-memory form: edges sorted (they are a set; merge input
    /// order comes from the declared `sources`, never from edge order).
    pub fn normalize(&mut self) {
        self.edges.sort();
    }

    pub fn layer_index(&self) -> HashMap<&str, usize> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect()
    }

    /// Checks every structural invariant and returns the evaluation graph.
    pub fn validate(&self) -> Result<Graph, SpecError> {
        if self.input_dim == 0 {
            return Err(SpecError::Schema("input_dim must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(SpecError::Schema("num_classes must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(SpecError::Schema("spec has no layers".into()));
        }

        // Unique, non-empty, non-reserved ids.
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.id.is_empty() {
                return Err(SpecError::Schema(format!("layer {i} has an empty id")));
            }
            if layer.id == INPUT_ID {
                return Err(SpecError::Schema(format!(
                    "layer id `{INPUT_ID}` is reserved for the graph source"
                )));
            }
            if index.insert(layer.id.as_str(), i).is_some() {
                return Err(SpecError::Schema(format!("duplicate layer id `{}`", layer.id)));
            }
        }

        // Local layer invariants.
        for layer in &self.layers {
            let err = |detail: String| SpecError::Layer {
                layer: layer.id.clone(),
                detail,
            };
            match &layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    if *in_channels == 0 || *out_channels == 0 {
                        return Err(err("conv channel counts must be >= 1".into()));
                    }
                }
                LayerKind::MaxPool { window } => {
                    if *window < 2 {
                        return Err(err(format!("max_pool window must be >= 2, got {window}")));
                    }
                }
                LayerKind::Upsample { factor } => {
                    if *factor < 2 {
                        return Err(err(format!("upsample factor must be >= 2, got {factor}")));
                    }
                }
                LayerKind::Add { sources } => {
                    if sources.is_empty() {
                        return Err(err("add requires at least one source".into()));
                    }
                }
                LayerKind::WeightedSum { sources, weights } => {
                    if sources.is_empty() {
                        return Err(err("weighted_sum requires at least one source".into()));
                    }
                    if sources.len() != weights.len() {
                        return Err(err(format!(
                            "weighted_sum has {} sources but {} weights",
                            sources.len(),
                            weights.len()
                        )));
                    }
                    if weights.iter().any(|w| !w.is_finite()) {
                        return Err(err("weighted_sum weights must be finite".into()));
                    }
                }
                LayerKind::SoftmaxOutput { num_classes } => {
                    if *num_classes != self.num_classes {
                        return Err(err(format!(
                            "softmax_output num_classes {} disagrees with spec num_classes {}",
                            num_classes, self.num_classes
                        )));
                    }
                }
                LayerKind::Relu | LayerKind::Identity => {}
            }
        }

        let resolve = |id: &str, at: &Layer| -> Result<NodeRef, SpecError> {
            if id == INPUT_ID {
                Ok(NodeRef::Input)
            } else {
                index
                    .get(id)
                    .map(|&i| NodeRef::Layer(i))
                    .ok_or_else(|| SpecError::Layer {
                        layer: at.id.clone(),
                        detail: format!("references unknown node `{id}`"),
                    })
            }
        };

        // Edge endpoints; in-edge lists and out-degrees.
        let mut in_edges: Vec<Vec<NodeRef>> = vec![Vec::new(); self.layers.len()];
        let mut out_degree: Vec<usize> = vec![0; self.layers.len()];
        for (from, to) in &self.edges {
            if to == INPUT_ID {
                return Err(SpecError::Schema(format!(
                    "edge into `{INPUT_ID}`: the input node cannot be a destination"
                )));
            }
            let Some(&to_ix) = index.get(to.as_str()) else {
                return Err(SpecError::Schema(format!("edge to unknown layer `{to}`")));
            };
            let from_ref = if from == INPUT_ID {
                NodeRef::Input
            } else {
                let Some(&ix) = index.get(from.as_str()) else {
                    return Err(SpecError::Schema(format!("edge from unknown node `{from}`")));
                };
                out_degree[ix] += 1;
                NodeRef::Layer(ix)
            };
            in_edges[to_ix].push(from_ref);
        }

        // Per-layer predecessor resolution.
        let mut preds: Vec<Vec<NodeRef>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Add { sources } | LayerKind::WeightedSum { sources, .. } => {
                    let declared: Vec<NodeRef> = sources
                        .iter()
                        .map(|s| resolve(s, layer))
                        .collect::<Result<_, _>>()?;
                    let mut want: Vec<NodeRef> = declared.clone();
                    let mut have: Vec<NodeRef> = in_edges[i].clone();
                    let key = |n: &NodeRef| match n {
                        NodeRef::Input => usize::MAX,
                        NodeRef::Layer(ix) => *ix,
                    };
                    want.sort_by_key(key);
                    have.sort_by_key(key);
                    if want != have {
                        return Err(SpecError::Layer {
                            layer: layer.id.clone(),
                            detail: format!(
                                "declared sources {:?} do not match incoming edges",
                                sources
                            ),
                        });
                    }
                    preds.push(declared);
                }
                _ => {
                    if in_edges[i].len() != 1 {
                        return Err(SpecError::Layer {
                            layer: layer.id.clone(),
                            detail: format!(
                                "expects exactly one incoming edge, found {}",
                                in_edges[i].len()
                            ),
                        });
                    }
                    preds.push(in_edges[i].clone());
                }
            }
        }

        // Single SoftmaxOutput sink.
        let sinks: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::SoftmaxOutput { .. }))
            .map(|(i, _)| i)
            .collect();
        if sinks.len() != 1 {
            return Err(SpecError::Schema(format!(
                "spec must contain exactly one softmax_output layer, found {}",
                sinks.len()
            )));
        }
        let sink = sinks[0];
        if out_degree[sink] != 0 {
            return Err(SpecError::Layer {
                layer: self.layers[sink].id.clone(),
                detail: "softmax_output must be the graph sink (no outgoing edges)".into(),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if i != sink && out_degree[i] == 0 {
                return Err(SpecError::Layer {
                    layer: layer.id.clone(),
                    detail: "dead end: layer output never reaches the softmax sink".into(),
                });
            }
        }

        // Deterministic Kahn topological order (lowest index first).
        let mut remaining: Vec<usize> = (0..self.layers.len()).collect();
        let mut done = vec![false; self.layers.len()];
        let mut topo = Vec::with_capacity(self.layers.len());
        while !remaining.is_empty() {
            let ready = remaining.iter().copied().find(|&i| {
                preds[i].iter().all(|p| match p {
                    NodeRef::Input => true,
                    NodeRef::Layer(j) => done[*j],
                })
            });
            match ready {
                Some(i) => {
                    done[i] = true;
                    topo.push(i);
                    remaining.retain(|&r| r != i);
                }
                None => {
                    let stuck = remaining[0];
                    return Err(SpecError::Cycle {
                        layer: self.layers[stuck].id.clone(),
                    });
                }
            }
        }

        // Shape propagation: channels and cumulative time stride.
        let mut channels = vec![0usize; self.layers.len()];
        let mut stride = vec![0u64; self.layers.len()];
        let shape_of = |n: &NodeRef, channels: &[usize], stride: &[u64]| match n {
            NodeRef::Input => (self.input_dim, 1u64),
            NodeRef::Layer(j) => (channels[*j], stride[*j]),
        };
        let name_of = |n: &NodeRef| -> String {
            match n {
                NodeRef::Input => INPUT_ID.to_string(),
                NodeRef::Layer(j) => self.layers[*j].id.clone(),
            }
        };
        for &i in &topo {
            let layer = &self.layers[i];
            let first = shape_of(&preds[i][0], &channels, &stride);
            // Merge inputs must agree in both channels and time resolution.
            if preds[i].len() > 1 {
                for p in &preds[i][1..] {
                    let other = shape_of(p, &channels, &stride);
                    if other != first {
                        return Err(SpecError::MergeMismatch {
                            layer: layer.id.clone(),
                            first: name_of(&preds[i][0]),
                            first_shape: format!("{} channels at stride {}", first.0, first.1),
                            second: name_of(p),
                            second_shape: format!("{} channels at stride {}", other.0, other.1),
                        });
                    }
                }
            }
            let (in_ch, in_stride) = first;
            let (out_ch, out_stride) = match &layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    if *in_channels != in_ch {
                        return Err(SpecError::Layer {
                            layer: layer.id.clone(),
                            detail: format!(
                                "declares in_channels {} but upstream provides {}",
                                in_channels, in_ch
                            ),
                        });
                    }
                    (*out_channels, in_stride)
                }
                LayerKind::MaxPool { window } => (in_ch, in_stride * *window as u64),
                LayerKind::Upsample { factor } => {
                    let f = *factor as u64;
                    if in_stride % f != 0 {
                        return Err(SpecError::Layer {
                            layer: layer.id.clone(),
                            detail: format!(
                                "upsample factor {factor} does not divide cumulative stride {in_stride}"
                            ),
                        });
                    }
                    (in_ch, in_stride / f)
                }
                LayerKind::SoftmaxOutput { num_classes } => {
                    if in_ch != *num_classes {
                        return Err(SpecError::Layer {
                            layer: layer.id.clone(),
                            detail: format!(
                                "softmax expects {num_classes} input channels (one per class), got {in_ch}"
                            ),
                        });
                    }
                    (in_ch, in_stride)
                }
                LayerKind::Relu
                | LayerKind::Identity
                | LayerKind::Add { .. }
                | LayerKind::WeightedSum { .. } => (in_ch, in_stride),
            };
            channels[i] = out_ch;
            stride[i] = out_stride;
        }

        if stride[sink] != 1 {
            return Err(SpecError::Layer {
                layer: self.layers[sink].id.clone(),
                detail: format!(
                    "end-to-end time resolution not preserved: sink stride is {}",
                    stride[sink]
                ),
            });
        }

        // Share groups: identical taps and channel shapes.
        let mut groups: HashMap<&str, (&TapSet, usize, usize, &str)> = HashMap::new();
        for layer in &self.layers {
            if let LayerKind::Conv {
                taps,
                in_channels,
                out_channels,
                share_group: Some(group),
            } = &layer.kind
            {
                match groups.get(group.as_str()) {
                    None => {
                        groups.insert(group, (taps, *in_channels, *out_channels, &layer.id));
                    }
                    Some((t0, i0, o0, first_id)) => {
                        if *t0 != taps || *i0 != *in_channels || *o0 != *out_channels {
                            return Err(SpecError::Layer {
                                layer: layer.id.clone(),
                                detail: format!(
                                    "share group `{group}` shape differs from first member `{first_id}`"
                                ),
                            });
                        }
                    }
                }
            }
        }

        let granularity = stride.iter().fold(1u64, |acc, &s| lcm(acc, s));

        Ok(Graph {
            topo,
            preds,
            channels,
            stride,
            sink,
            granularity,
        })
    }
}

// ---------------------------------------------------------------------------
// Parameter accounting and budget matching
// ---------------------------------------------------------------------------

/// Trainable parameter count: per Conv (each share group counted once)
/// `|taps| * in * out` weights plus `out` biases; one scalar per
/// WeightedSum source.
pub fn count_params(spec: &NetworkSpec) -> u64 {
    let mut seen_groups: Vec<&str> = Vec::new();
    let mut total = 0u64;
    for layer in &spec.layers {
        match &layer.kind {
            LayerKind::Conv {
                taps,
                in_channels,
                out_channels,
                share_group,
            } => {
                if let Some(group) = share_group {
                    if seen_groups.contains(&group.as_str()) {
                        continue;
                    }
                    seen_groups.push(group);
                }
                total += taps.len() as u64 * *in_channels as u64 * *out_channels as u64
                    + *out_channels as u64;
            }
            LayerKind::WeightedSum { sources, .. } => {
                total += sources.len() as u64;
            }
            _ => {}
        }
    }
    total
}

/// The uniform hidden channel width of a spec, if it has one.
///
/// Hidden width is the single conv output count that is neither the class
/// count nor ambiguous with it; every conv must consume either the input
/// features or hidden activations.
pub fn hidden_width(spec: &NetworkSpec) -> Result<usize, SpecError> {
    let mut hidden: Option<usize> = None;
    let mut saw_conv = false;
    for layer in &spec.layers {
        if let LayerKind::Conv {
            in_channels,
            out_channels,
            ..
        } = &layer.kind
        {
            saw_conv = true;
            if *out_channels != spec.num_classes {
                match hidden {
                    None => hidden = Some(*out_channels),
                    Some(c) if c == *out_channels => {}
                    Some(c) => {
                        return Err(SpecError::NonUniformWidth(format!(
                            "conv `{}` outputs {} channels, another conv outputs {}",
                            layer.id, out_channels, c
                        )));
                    }
                }
            }
            let _ = in_channels;
        }
    }
    if !saw_conv {
        return Err(SpecError::NonUniformWidth("spec has no conv layers".into()));
    }
    let Some(c) = hidden else {
        return Err(SpecError::NonUniformWidth(
            "all conv outputs equal num_classes; nothing to scale".into(),
        ));
    };
    if c == spec.num_classes || c == spec.input_dim {
        return Err(SpecError::NonUniformWidth(format!(
            "hidden width {c} collides with num_classes or input_dim; scaling is ambiguous"
        )));
    }
    // Every conv must fit the (input_dim|c) -> (c|num_classes) pattern.
    for layer in &spec.layers {
        if let LayerKind::Conv {
            in_channels,
            out_channels,
            ..
        } = &layer.kind
        {
            let in_ok = *in_channels == spec.input_dim || *in_channels == c;
            let out_ok = *out_channels == c || *out_channels == spec.num_classes;
            if !in_ok || !out_ok {
                return Err(SpecError::NonUniformWidth(format!(
                    "conv `{}` ({} -> {}) does not follow the uniform-width pattern",
                    layer.id, in_channels, out_channels
                )));
            }
        }
    }
    Ok(c)
}

/// Returns a copy of the spec with its uniform hidden width replaced.
pub fn with_hidden_width(spec: &NetworkSpec, width: usize) -> Result<NetworkSpec, SpecError> {
    if width == 0 {
        return Err(SpecError::Schema("hidden width must be >= 1".into()));
    }
    let old = hidden_width(spec)?;
    let mut out = spec.clone();
    for layer in &mut out.layers {
        if let LayerKind::Conv {
            in_channels,
            out_channels,
            ..
        } = &mut layer.kind
        {
            if *in_channels == old {
                *in_channels = width;
            }
            if *out_channels == old {
                *out_channels = width;
            }
        }
    }
    out.meta
        .insert("channels".into(), width.to_string());
    out.validate()?;
    Ok(out)
}

/// Scales the hidden width so the parameter count lands within
/// `tolerance * budget` of `budget`.
///
/// Deterministic: returns the smallest width inside the tolerance window.
/// If no integer width lands inside the window the call fails rather than
/// silently exceeding the tolerance; the error reports the nearest width
/// from below. A budget too small for even width 1 is infeasible.
pub fn match_budget(
    spec: &NetworkSpec,
    budget: u64,
    tolerance: f64,
) -> Result<NetworkSpec, SpecError> {
    if budget == 0 {
        return Err(SpecError::InfeasibleBudget {
            budget,
            min_count: count_params(&with_hidden_width(spec, 1)?),
        });
    }
    let allowed = (tolerance * budget as f64).floor() as u64;
    let upper = budget + allowed;
    let lower = budget.saturating_sub(allowed);

    let mut nearest_below: Option<(usize, u64)> = None;
    let mut width = 1usize;
    loop {
        let candidate = with_hidden_width(spec, width)?;
        let count = count_params(&candidate);
        if count >= lower && count <= upper {
            return Ok(candidate);
        }
        if count < lower {
            nearest_below = Some((width, count));
        }
        if count > upper {
            return match nearest_below {
                None => Err(SpecError::InfeasibleBudget {
                    budget,
                    min_count: count,
                }),
                Some((w, c)) => Err(SpecError::BudgetNotMatchable {
                    budget,
                    tolerance,
                    width: w,
                    count: c,
                }),
            };
        }
        width += 1;
    }
}

// ---------------------------------------------------------------------------
// JSON document format
// ---------------------------------------------------------------------------

/// Parses a spec document. The schema is strict: unknown or missing fields
/// are errors, and the resulting spec is fully validated.
pub fn parse_spec(text: &str) -> Result<NetworkSpec, SpecError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| SpecError::Schema(format!("invalid JSON: {e}")))?;
    let root = as_object(&value, "document root")?;
    check_fields(
        root,
        &["family", "input_dim", "num_classes", "layers", "edges", "meta"],
        &["family", "num_classes", "layers", "edges"],
        "document root",
    )?;

    let family_str = as_str(&root["family"], "family")?;
    let family = Family::parse(family_str)
        .ok_or_else(|| SpecError::Schema(format!("unknown family `{family_str}`")))?;
    let input_dim = match root.get("input_dim") {
        Some(v) => as_usize(v, "input_dim")?,
        None => DEFAULT_INPUT_DIM,
    };
    let num_classes = as_usize(&root["num_classes"], "num_classes")?;

    let layers_val = root["layers"]
        .as_array()
        .ok_or_else(|| SpecError::Schema("`layers` must be an array".into()))?;
    let mut layers = Vec::with_capacity(layers_val.len());
    for (i, lv) in layers_val.iter().enumerate() {
        layers.push(parse_layer(lv, i)?);
    }

    let edges_val = root["edges"]
        .as_array()
        .ok_or_else(|| SpecError::Schema("`edges` must be an array".into()))?;
    let mut edges = Vec::with_capacity(edges_val.len());
    for ev in edges_val {
        let pair = ev
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| SpecError::Schema("each edge must be a [from, to] pair".into()))?;
        edges.push((
            as_str(&pair[0], "edge from")?.to_string(),
            as_str(&pair[1], "edge to")?.to_string(),
        ));
    }

    let mut meta = BTreeMap::new();
    if let Some(mv) = root.get("meta") {
        let mo = as_object(mv, "meta")?;
        for (k, v) in mo {
            meta.insert(k.clone(), as_str(v, &format!("meta.{k}"))?.to_string());
        }
    }

    let mut spec = NetworkSpec {
        family,
        input_dim,
        num_classes,
        layers,
        edges,
        meta,
    };
    spec.normalize();
    spec.validate()?;
    Ok(spec)
}

fn parse_layer(value: &Value, position: usize) -> Result<Layer, SpecError> {
    let obj = as_object(value, &format!("layers[{position}]"))?;
    let id = match obj.get("id").and_then(|v| v.as_str()) {
        Some(s) => s.to_string(),
        None => {
            return Err(SpecError::Schema(format!(
                "layers[{position}] is missing a string `id`"
            )))
        }
    };
    let layer_err = |detail: String| SpecError::Layer {
        layer: id.clone(),
        detail,
    };
    let kind_str = obj
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| layer_err("missing string `kind`".into()))?;

    let fields_for = |required: &'static [&'static str],
                      optional: &'static [&'static str]|
     -> Result<(), SpecError> {
        let mut allowed = vec!["id", "kind"];
        allowed.extend_from_slice(required);
        allowed.extend_from_slice(optional);
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(layer_err(format!("unknown field `{key}`")));
            }
        }
        for req in required {
            if !obj.contains_key(*req) {
                return Err(layer_err(format!("missing field `{req}`")));
            }
        }
        Ok(())
    };

    let kind = match kind_str {
        "conv" => {
            fields_for(&["taps", "in_channels", "out_channels"], &["share_group"])?;
            let taps_raw = obj["taps"]
                .as_array()
                .ok_or_else(|| layer_err("`taps` must be an array of integers".into()))?;
            let mut offsets = Vec::with_capacity(taps_raw.len());
            for t in taps_raw {
                offsets.push(
                    t.as_i64()
                        .ok_or_else(|| layer_err(format!("tap `{t}` is not an integer")))?,
                );
            }
            let taps = TapSet::new(offsets).map_err(|e| layer_err(e.to_string()))?;
            let share_group = match obj.get("share_group") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(other) => {
                    return Err(layer_err(format!(
                        "`share_group` must be a string, got {other}"
                    )))
                }
            };
            LayerKind::Conv {
                taps,
                in_channels: as_usize(&obj["in_channels"], "in_channels")
                    .map_err(|e| layer_err(e.to_string()))?,
                out_channels: as_usize(&obj["out_channels"], "out_channels")
                    .map_err(|e| layer_err(e.to_string()))?,
                share_group,
            }
        }
        "max_pool" => {
            fields_for(&["window"], &[])?;
            LayerKind::MaxPool {
                window: as_usize(&obj["window"], "window").map_err(|e| layer_err(e.to_string()))?,
            }
        }
        "upsample" => {
            fields_for(&["factor"], &[])?;
            LayerKind::Upsample {
                factor: as_usize(&obj["factor"], "factor").map_err(|e| layer_err(e.to_string()))?,
            }
        }
        "relu" => {
            fields_for(&[], &[])?;
            LayerKind::Relu
        }
        "identity" => {
            fields_for(&[], &[])?;
            LayerKind::Identity
        }
        "add" => {
            fields_for(&["sources"], &[])?;
            LayerKind::Add {
                sources: parse_string_list(&obj["sources"]).map_err(|e| layer_err(e))?,
            }
        }
        "weighted_sum" => {
            fields_for(&["sources", "weights"], &[])?;
            let weights_raw = obj["weights"]
                .as_array()
                .ok_or_else(|| layer_err("`weights` must be an array of numbers".into()))?;
            let mut weights = Vec::with_capacity(weights_raw.len());
            for w in weights_raw {
                weights.push(
                    w.as_f64()
                        .ok_or_else(|| layer_err(format!("weight `{w}` is not a number")))?,
                );
            }
            LayerKind::WeightedSum {
                sources: parse_string_list(&obj["sources"]).map_err(|e| layer_err(e))?,
                weights,
            }
        }
        "softmax_output" => {
            fields_for(&["num_classes"], &[])?;
            LayerKind::SoftmaxOutput {
                num_classes: as_usize(&obj["num_classes"], "num_classes")
                    .map_err(|e| layer_err(e.to_string()))?,
            }
        }
        other => return Err(layer_err(format!("unknown layer kind `{other}`"))),
    };

    Ok(Layer { id, kind })
}

fn parse_string_list(value: &Value) -> Result<Vec<String>, String> {
    let arr = value
        .as_array()
        .ok_or_else(|| "`sources` must be an array of ids".to_string())?;
    arr.iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| format!("source `{v}` is not a string"))
        })
        .collect()
}

fn as_object<'v>(
    value: &'v Value,
    what: &str,
) -> Result<&'v serde_json::Map<String, Value>, SpecError> {
    value
        .as_object()
        .ok_or_else(|| SpecError::Schema(format!("{what} must be a JSON object")))
}

fn as_str<'v>(value: &'v Value, what: &str) -> Result<&'v str, SpecError> {
    value
        .as_str()
        .ok_or_else(|| SpecError::Schema(format!("`{what}` must be a string")))
}

fn as_usize(value: &Value, what: &str) -> Result<usize, SpecError> {
    value
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| SpecError::Schema(format!("`{what}` must be a non-negative integer")))
}

fn check_fields(
    obj: &serde_json::Map<String, Value>,
    allowed: &[&str],
    required: &[&str],
    what: &str,
) -> Result<(), SpecError> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(SpecError::Schema(format!("{what}: unknown field `{key}`")));
        }
    }
    for req in required {
        if !obj.contains_key(*req) {
            return Err(SpecError::Schema(format!("{what}: missing field `{req}`")));
        }
    }
    Ok(())
}

/// Emits the canonical document: fixed field order, edges sorted, meta
/// sorted, floats in shortest round-trip form. `parse_spec` followed by
/// `serialize_spec` is idempotent on canonical documents.
pub fn serialize_spec(spec: &NetworkSpec) -> String {
    let mut out = String::with_capacity(256 + spec.layers.len() * 96);
    out.push_str("{\"family\":");
    push_json_str(&mut out, spec.family.name());
    out.push_str(&format!(",\"input_dim\":{}", spec.input_dim));
    out.push_str(&format!(",\"num_classes\":{}", spec.num_classes));
    out.push_str(",\"layers\":[");
    for (i, layer) in spec.layers.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_layer(&mut out, layer);
    }
    out.push_str("],\"edges\":[");
    let mut edges = spec.edges.clone();
    edges.sort();
    for (i, (from, to)) in edges.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        push_json_str(&mut out, from);
        out.push(',');
        push_json_str(&mut out, to);
        out.push(']');
    }
    out.push_str("],\"meta\":{");
    for (i, (k, v)) in spec.meta.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_json_str(&mut out, k);
        out.push(':');
        push_json_str(&mut out, v);
    }
    out.push_str("}}");
    out
}

fn write_layer(out: &mut String, layer: &Layer) {
    out.push_str("{\"id\":");
    push_json_str(out, &layer.id);
    out.push_str(",\"kind\":");
    push_json_str(out, layer.kind.name());
    match &layer.kind {
        LayerKind::Conv {
            taps,
            in_channels,
            out_channels,
            share_group,
        } => {
            out.push_str(",\"taps\":[");
            for (i, t) in taps.offsets().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&t.to_string());
            }
            out.push_str(&format!(
                "],\"in_channels\":{in_channels},\"out_channels\":{out_channels}"
            ));
            if let Some(group) = share_group {
                out.push_str(",\"share_group\":");
                push_json_str(out, group);
            }
        }
        LayerKind::MaxPool { window } => out.push_str(&format!(",\"window\":{window}")),
        LayerKind::Upsample { factor } => out.push_str(&format!(",\"factor\":{factor}")),
        LayerKind::Relu | LayerKind::Identity => {}
        LayerKind::Add { sources } => {
            out.push_str(",\"sources\":");
            write_str_array(out, sources);
        }
        LayerKind::WeightedSum { sources, weights } => {
            out.push_str(",\"sources\":");
            write_str_array(out, sources);
            out.push_str(",\"weights\":[");
            for (i, w) in weights.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                push_json_f64(out, *w);
            }
            out.push(']');
        }
        LayerKind::SoftmaxOutput { num_classes } => {
            out.push_str(&format!(",\"num_classes\":{num_classes}"))
        }
    }
    out.push('}');
}

fn write_str_array(out: &mut String, items: &[String]) {
    out.push('[');
    for (i, s) in items.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_json_str(out, s);
    }
    out.push(']');
}

fn push_json_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization cannot fail"));
}

fn push_json_f64(out: &mut String, v: f64) {
    // Shortest round-trip form via serde_json so reparsing is bit-exact.
    let n = serde_json::Number::from_f64(v).expect("spec weights are validated finite");
    out.push_str(&n.to_string());
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            family: Family::Standard,
            input_dim: 4,
            num_classes: 3,
            layers: vec![
                Layer {
                    id: "c0".into(),
                    kind: LayerKind::Conv {
                        taps: TapSet::contiguous(3).unwrap(),
                        in_channels: 4,
                        out_channels: 5,
                        share_group: None,
                    },
                },
                Layer {
                    id: "r0".into(),
                    kind: LayerKind::Relu,
                },
                Layer {
                    id: "head".into(),
                    kind: LayerKind::Conv {
                        taps: TapSet::new(vec![0]).unwrap(),
                        in_channels: 5,
                        out_channels: 3,
                        share_group: None,
                    },
                },
                Layer {
                    id: "out".into(),
                    kind: LayerKind::SoftmaxOutput { num_classes: 3 },
                },
            ],
            edges: vec![
                ("input".into(), "c0".into()),
                ("c0".into(), "r0".into()),
                ("r0".into(), "head".into()),
                ("head".into(), "out".into()),
            ],
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn tapset_constructors() {
        assert_eq!(TapSet::contiguous(5).unwrap().offsets(), &[-2, -1, 0, 1, 2]);
        assert_eq!(TapSet::dilated(3, 2).unwrap().offsets(), &[-2, 0, 2]);
        assert_eq!(TapSet::tdnn(1, 1).offsets(), &[-1, 0, 1]);
        assert_eq!(TapSet::tdnn(2, 0).offsets(), &[-2, 0]);
        assert_eq!(TapSet::tdnn(0, 0).offsets(), &[0]);
        assert!(TapSet::contiguous(4).is_err());
        assert!(TapSet::new(vec![]).is_err());
        assert!(TapSet::new(vec![1, 1]).is_err());
        assert_eq!(TapSet::dilated(5, 3).unwrap().span(), 12);
    }

    #[test]
    fn minimal_spec_validates() {
        let spec = tiny_spec();
        let graph = spec.validate().unwrap();
        assert_eq!(graph.topo, vec![0, 1, 2, 3]);
        assert_eq!(graph.channels, vec![5, 5, 3, 3]);
        assert_eq!(graph.stride, vec![1, 1, 1, 1]);
        assert_eq!(graph.granularity, 1);
        assert_eq!(graph.sink, 3);
    }

    #[test]
    fn minimal_document_round_trips() {
        let text = r#"{"family":"standard","num_classes":3,
            "layers":[
              {"id":"c0","kind":"conv","taps":[0],"in_channels":40,"out_channels":3},
              {"id":"out","kind":"softmax_output","num_classes":3}],
            "edges":[["input","c0"],["c0","out"]]}"#;
        let spec = parse_spec(text).unwrap();
        assert_eq!(spec.input_dim, DEFAULT_INPUT_DIM);
        assert_eq!(spec.layers.len(), 2);
        let canonical = serialize_spec(&spec);
        let again = parse_spec(&canonical).unwrap();
        assert_eq!(spec, again);
        assert_eq!(canonical, serialize_spec(&again));
    }

    #[test]
    fn unknown_field_is_an_error() {
        let text = r#"{"family":"standard","num_classes":3,"bogus":1,
            "layers":[{"id":"c0","kind":"conv","taps":[0],"in_channels":40,"out_channels":3},
                      {"id":"out","kind":"softmax_output","num_classes":3}],
            "edges":[["input","c0"],["c0","out"]]}"#;
        let err = parse_spec(text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn unknown_layer_field_names_the_layer() {
        let text = r#"{"family":"standard","num_classes":3,
            "layers":[{"id":"c0","kind":"conv","taps":[0],"in_channels":40,"out_channels":3,"pad":1},
                      {"id":"out","kind":"softmax_output","num_classes":3}],
            "edges":[["input","c0"],["c0","out"]]}"#;
        let err = parse_spec(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("c0") && msg.contains("pad"), "{msg}");
    }

    #[test]
    fn cycle_is_detected() {
        let mut spec = tiny_spec();
        spec.edges = vec![
            ("input".into(), "c0".into()),
            ("r0".into(), "c0".into()), // back edge: c0 <- r0 while r0 <- c0
            ("c0".into(), "r0".into()),
            ("r0".into(), "head".into()),
            ("head".into(), "out".into()),
        ];
        // c0 now has two in-edges: make it a merge to reach the cycle check.
        spec.layers[0].kind = LayerKind::Add {
            sources: vec!["input".into(), "r0".into()],
        };
        // Fix up downstream shapes: add outputs 4 channels, head consumes 4.
        spec.layers[2].kind = LayerKind::Conv {
            taps: TapSet::new(vec![0]).unwrap(),
            in_channels: 4,
            out_channels: 3,
            share_group: None,
        };
        match spec.validate() {
            Err(SpecError::Cycle { .. }) => {}
            other => panic!("expected cycle error, got {other:?}"),
        }
    }

    #[test]
    fn merge_channel_mismatch_names_both_layers() {
        let spec = NetworkSpec {
            family: Family::Standard,
            input_dim: 4,
            num_classes: 3,
            layers: vec![
                Layer {
                    id: "a".into(),
                    kind: LayerKind::Conv {
                        taps: TapSet::new(vec![0]).unwrap(),
                        in_channels: 4,
                        out_channels: 5,
                        share_group: None,
                    },
                },
                Layer {
                    id: "b".into(),
                    kind: LayerKind::Conv {
                        taps: TapSet::new(vec![0]).unwrap(),
                        in_channels: 4,
                        out_channels: 6,
                        share_group: None,
                    },
                },
                Layer {
                    id: "merge".into(),
                    kind: LayerKind::Add {
                        sources: vec!["a".into(), "b".into()],
                    },
                },
                Layer {
                    id: "head".into(),
                    kind: LayerKind::Conv {
                        taps: TapSet::new(vec![0]).unwrap(),
                        in_channels: 5,
                        out_channels: 3,
                        share_group: None,
                    },
                },
                Layer {
                    id: "out".into(),
                    kind: LayerKind::SoftmaxOutput { num_classes: 3 },
                },
            ],
            edges: vec![
                ("input".into(), "a".into()),
                ("input".into(), "b".into()),
                ("a".into(), "merge".into()),
                ("b".into(), "merge".into()),
                ("merge".into(), "head".into()),
                ("head".into(), "out".into()),
            ],
            meta: BTreeMap::new(),
        };
        match spec.validate() {
            Err(SpecError::MergeMismatch {
                layer,
                first,
                second,
                ..
            }) => {
                assert_eq!(layer, "merge");
                assert_eq!(first, "a");
                assert_eq!(second, "b");
            }
            other => panic!("expected merge mismatch, got {other:?}"),
        }
    }

    #[test]
    fn single_conv_count_matches_arithmetic() {
        // 5 taps, 40 -> 512 channels: 5*40*512 + 512.
        let spec = NetworkSpec {
            family: Family::Standard,
            input_dim: 40,
            num_classes: 512,
            layers: vec![
                Layer {
                    id: "c0".into(),
                    kind: LayerKind::Conv {
                        taps: TapSet::contiguous(5).unwrap(),
                        in_channels: 40,
                        out_channels: 512,
                        share_group: None,
                    },
                },
                Layer {
                    id: "out".into(),
                    kind: LayerKind::SoftmaxOutput { num_classes: 512 },
                },
            ],
            edges: vec![
                ("input".into(), "c0".into()),
                ("c0".into(), "out".into()),
            ],
            meta: BTreeMap::new(),
        };
        spec.validate().unwrap();
        assert_eq!(count_params(&spec), 102_912);
    }

    #[test]
    fn shared_group_counted_once() {
        let make = |applications: usize| {
            let mut layers = vec![];
            let mut edges = vec![("input".to_string(), "a0".to_string())];
            for i in 0..applications {
                layers.push(Layer {
                    id: format!("a{i}"),
                    kind: LayerKind::Conv {
                        taps: TapSet::contiguous(3).unwrap(),
                        in_channels: 4,
                        out_channels: 4,
                        share_group: Some("g".into()),
                    },
                });
                if i + 1 < applications {
                    edges.push((format!("a{i}"), format!("a{}", i + 1)));
                }
            }
            layers.push(Layer {
                id: "head".into(),
                kind: LayerKind::Conv {
                    taps: TapSet::new(vec![0]).unwrap(),
                    in_channels: 4,
                    out_channels: 3,
                    share_group: None,
                },
            });
            layers.push(Layer {
                id: "out".into(),
                kind: LayerKind::SoftmaxOutput { num_classes: 3 },
            });
            edges.push((format!("a{}", applications - 1), "head".into()));
            edges.push(("head".into(), "out".into()));
            NetworkSpec {
                family: Family::RecNet,
                input_dim: 4,
                num_classes: 3,
                layers,
                edges,
                meta: BTreeMap::new(),
            }
        };
        let once = make(1);
        let five = make(5);
        once.validate().unwrap();
        five.validate().unwrap();
        assert_eq!(count_params(&once), count_params(&five));
    }

    #[test]
    fn budget_window_and_errors() {
        // standard-like chain: f(c) = 3*40*c + c + 2*(3c^2 + c) + (c*3 + 3)
        let spec = crate::architectures::build_standard(3, 3, 8, 3).unwrap();
        let matched = match_budget(&spec, 25_600, 0.05).unwrap();
        let count = count_params(&matched);
        assert!((24_320..=26_880).contains(&count), "count {count}");

        // Exhaustive oracle: the returned width is the smallest in-window one.
        let mut smallest = None;
        for width in 1..4096 {
            let c = count_params(&with_hidden_width(&spec, width).unwrap());
            if c >= 24_320 && c <= 26_880 {
                smallest = Some(width);
                break;
            }
        }
        assert_eq!(Some(hidden_width(&matched).unwrap()), smallest);

        // Budget below the width-1 count is infeasible.
        let min_count = count_params(&with_hidden_width(&spec, 1).unwrap());
        match match_budget(&spec, min_count / 2, 0.01) {
            Err(SpecError::InfeasibleBudget { .. }) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn exact_budget_is_a_fixed_point() {
        // Single hidden conv: f(c) = 3*40*c + c + (c*3 + 3) = 124c + 3.
        let spec = crate::architectures::build_standard(3, 1, 10, 3).unwrap();
        let exact = count_params(&spec);
        let matched = match_budget(&spec, exact, 0.01).unwrap();
        assert_eq!(hidden_width(&matched).unwrap(), 10);
        assert_eq!(count_params(&matched), exact);
    }
}
