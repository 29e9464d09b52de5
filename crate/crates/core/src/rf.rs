//! Receptive-field calculus.
//!
//! Three independent routes measure how many input frames influence one
//! output frame:
//!
//! 1. [`rf_general`]: exact (rf, jump) composition along the graph — Conv
//!    grows rf by `span * jump`, MaxPool by `(P-1) * jump` then multiplies
//!    the jump, Upsample divides the jump, merges take the max.
//! 2. [`structural_probe`]: forward interval arithmetic over input indices.
//! 3. [`gradient_probe`]: backpropagation through the real layer adjoints on
//!    a linearized positive-weight instance; the span of nonzero input
//!    gradient is the field. Max pooling is replaced by sum pooling for the
//!    probe (argmax routing would otherwise under-report the field) and
//!    activations by identity, so positivity rules out cancellation.
//!
//! The published closed forms are kept verbatim as recorded claims;
//! [`discrepancy_report`] documents where they diverge from the exact values.

use serde::Serialize;
use thiserror::Error;

use crate::layers::{conv1d_backward, conv1d_forward, upsample_backward, upsample_forward};
use crate::netgraph::{count_params, Family, LayerKind, NetworkSpec, NodeRef, SpecError, TapSet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RfError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("probe input too short: the central output frame's field touches the boundary")]
    InputTooShort,
    #[error("gradient probe saw an all-zero input gradient: a backward pass is broken")]
    ZeroGradient,
    #[error("probe execution: {0}")]
    Probe(String),
}

// ---------------------------------------------------------------------------
// Exact composition over the spec graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LayerRf {
    pub id: String,
    pub rf: u64,
    pub jump: u64,
}

#[derive(Debug, Clone)]
pub struct RfCalc {
    pub rf: u64,
    /// Per-layer (rf, jump) profile in spec declaration order.
    pub per_layer: Vec<LayerRf>,
}

/// Per-layer influence pattern, folded over one period of the phase lattice.
///
/// For a layer at cumulative stride `stride`, output index u with phase
/// `u mod phases.len()` sees the input interval
/// `[u*stride + lo, u*stride + hi]` at interior positions. Nearest-neighbor
/// upsampling repeats coarse values, so the interval genuinely depends on the
/// output phase; tracking one full period keeps the composition exact where
/// the plain (rf, jump) arithmetic over-counts convolutions that follow an
/// upsample. For graphs without upsampling every phase carries the same
/// width and the composition reduces to the familiar
/// `conv: rf += span*jump; pool: rf += (P-1)*jump, jump *= P` rule.
#[derive(Debug, Clone)]
struct PhasePattern {
    stride: u64,
    /// (lo, hi) offsets per output phase, in input-frame units.
    phases: Vec<(i64, i64)>,
}

impl PhasePattern {
    /// Field width at phase-aligned output positions (u = multiple of the
    /// period), where all three measurement routes are anchored.
    fn aligned_width(&self) -> u64 {
        let (lo, hi) = self.phases[0];
        (hi - lo + 1) as u64
    }
}

/// Propagates per-phase (interval, jump) patterns through the validated
/// graph. The reported rf is the field width at phase-aligned output frames,
/// matching where the structural and gradient probes measure.
pub fn rf_general(spec: &NetworkSpec) -> Result<RfCalc, RfError> {
    let graph = spec.validate()?;
    let period = graph.granularity;
    let mut patterns: Vec<Option<PhasePattern>> = vec![None; spec.layers.len()];
    let input_pattern = PhasePattern {
        stride: 1,
        phases: vec![(0, 0); period as usize],
    };

    for &i in &graph.topo {
        let of = |r: &NodeRef, patterns: &[Option<PhasePattern>]| -> PhasePattern {
            match r {
                NodeRef::Input => input_pattern.clone(),
                NodeRef::Layer(j) => patterns[*j].clone().expect("topo order"),
            }
        };
        let mut p = of(&graph.preds[i][0], &patterns);
        // Merges take the true per-phase union (inputs share stride/phase).
        for pred in &graph.preds[i][1..] {
            let o = of(pred, &patterns);
            debug_assert_eq!(p.stride, o.stride, "merge inputs share a time resolution");
            for (a, b) in p.phases.iter_mut().zip(&o.phases) {
                a.0 = a.0.min(b.0);
                a.1 = a.1.max(b.1);
            }
        }
        let out = match &spec.layers[i].kind {
            LayerKind::Conv { taps, .. } => {
                let n = p.phases.len() as i64;
                let stride = p.stride as i64;
                let phases = (0..n)
                    .map(|r| {
                        let mut acc: Option<(i64, i64)> = None;
                        for &tap in taps.offsets() {
                            let (lo, hi) = p.phases[(r + tap).rem_euclid(n) as usize];
                            let cand = (tap * stride + lo, tap * stride + hi);
                            acc = Some(match acc {
                                None => cand,
                                Some((alo, ahi)) => (alo.min(cand.0), ahi.max(cand.1)),
                            });
                        }
                        acc.unwrap()
                    })
                    .collect();
                PhasePattern {
                    stride: p.stride,
                    phases,
                }
            }
            LayerKind::MaxPool { window } => {
                let w = *window as i64;
                let n = p.phases.len() as i64;
                let stride = p.stride as i64;
                let out_n = (n / w).max(1);
                let phases = (0..out_n)
                    .map(|r| {
                        let mut acc: Option<(i64, i64)> = None;
                        for i in 0..w {
                            let (lo, hi) = p.phases[((w * r + i) % n) as usize];
                            let cand = (i * stride + lo, i * stride + hi);
                            acc = Some(match acc {
                                None => cand,
                                Some((alo, ahi)) => (alo.min(cand.0), ahi.max(cand.1)),
                            });
                        }
                        acc.unwrap()
                    })
                    .collect();
                PhasePattern {
                    stride: p.stride * *window as u64,
                    phases,
                }
            }
            LayerKind::Upsample { factor } => {
                let f = *factor as i64;
                let n = p.phases.len() as i64;
                let out_stride = p.stride / *factor as u64;
                let out_n = n * f;
                let phases = (0..out_n)
                    .map(|r| {
                        let coarse = r / f;
                        let (lo, hi) = p.phases[(coarse % n) as usize];
                        // Anchor shift: out index r sits (r - f*coarse) fine
                        // steps past the coarse sample it repeats.
                        let shift = (f * coarse - r) * out_stride as i64;
                        (shift + lo, shift + hi)
                    })
                    .collect();
                PhasePattern {
                    stride: out_stride,
                    phases,
                }
            }
            _ => p,
        };
        patterns[i] = Some(out);
    }

    let per_layer = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let p = patterns[i].as_ref().unwrap();
            LayerRf {
                id: l.id.clone(),
                rf: p.aligned_width(),
                jump: p.stride,
            }
        })
        .collect();
    Ok(RfCalc {
        rf: patterns[graph.sink].as_ref().unwrap().aligned_width(),
        per_layer,
    })
}

// ---------------------------------------------------------------------------
// Published closed forms (verbatim)
// ---------------------------------------------------------------------------

/// L (W - 1) + 1. Exact for standard chains.
pub fn rf_standard_paper(width: u64, layers: u64) -> u64 {
    layers * (width - 1) + 1
}

/// (L + 2^(L-1) - 1) (W - 1) + 1.
pub fn rf_dilated_paper(width: u64, layers: u64) -> u64 {
    assert!(layers >= 1 && layers < 63);
    (layers + (1u64 << (layers - 1)) - 1) * (width - 1) + 1
}

/// 1 + sum_l (d_l1 + d_l2). Exact for TDNN chains.
pub fn rf_tdnn_paper(contexts: &[(u64, u64)]) -> u64 {
    1 + contexts.iter().map(|(l, r)| l + r).sum::<u64>()
}

/// (rf_down, rf_stacked): L_d (W_d + P_d - 1) - 1 and S * rf_down * 2^L.
pub fn rf_hg_paper(w_d: u64, p_d: u64, l_d: u64, stacks: u64, levels: u64) -> (u64, u64) {
    let rf_down = l_d * (w_d + p_d - 1) - 1;
    (rf_down, stacks * rf_down * (1u64 << levels))
}

// ---------------------------------------------------------------------------
// Chain calculus (encoder characterization and hand-checkable oracles)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ChainOp {
    Conv(TapSet),
    Pool(u64),
    Upsample(u64),
}

/// (rf, jump) composition over a plain layer chain.
pub fn chain_rf(ops: &[ChainOp]) -> u64 {
    let (mut rf, mut jump) = (1u64, 1u64);
    for op in ops {
        match op {
            ChainOp::Conv(taps) => rf += taps.span() * jump,
            ChainOp::Pool(p) => {
                rf += (p - 1) * jump;
                jump *= p;
            }
            ChainOp::Upsample(f) => jump /= f,
        }
    }
    rf
}

/// Interval-arithmetic probe over a plain chain; independent of [`chain_rf`].
pub fn chain_structural(ops: &[ChainOp]) -> Result<u64, RfError> {
    // Grow the input until the measured field is interior.
    let mut time = 64usize;
    loop {
        if let Some(width) = chain_structural_at(ops, time) {
            return Ok(width);
        }
        time *= 2;
        if time > 1 << 24 {
            return Err(RfError::InputTooShort);
        }
    }
}

fn chain_structural_at(ops: &[ChainOp], time: usize) -> Option<u64> {
    let mut intervals: Vec<Option<(usize, usize)>> = (0..time).map(|t| Some((t, t))).collect();
    for op in ops {
        intervals = match op {
            ChainOp::Conv(taps) => conv_intervals(&intervals, taps),
            ChainOp::Pool(p) => pool_intervals(&intervals, *p as usize),
            ChainOp::Upsample(f) => upsample_intervals(&intervals, *f as usize),
        };
        if intervals.is_empty() {
            return None;
        }
    }
    let center = intervals.len() / 2;
    match intervals[center] {
        Some((lo, hi)) if lo > 0 && hi + 1 < time => Some((hi - lo + 1) as u64),
        _ => None,
    }
}

fn union(a: Option<(usize, usize)>, b: Option<(usize, usize)>) -> Option<(usize, usize)> {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some((alo, ahi)), Some((blo, bhi))) => Some((alo.min(blo), ahi.max(bhi))),
    }
}

fn conv_intervals(input: &[Option<(usize, usize)>], taps: &TapSet) -> Vec<Option<(usize, usize)>> {
    let time = input.len() as i64;
    (0..time)
        .map(|t| {
            let mut acc = None;
            for &tap in taps.offsets() {
                let s = t + tap;
                if s >= 0 && s < time {
                    acc = union(acc, input[s as usize]);
                }
            }
            acc
        })
        .collect()
}

fn pool_intervals(input: &[Option<(usize, usize)>], window: usize) -> Vec<Option<(usize, usize)>> {
    input
        .chunks(window)
        .map(|chunk| chunk.iter().fold(None, |acc, &iv| union(acc, iv)))
        .collect()
}

fn upsample_intervals(
    input: &[Option<(usize, usize)>],
    factor: usize,
) -> Vec<Option<(usize, usize)>> {
    let mut out = Vec::with_capacity(input.len() * factor);
    for iv in input {
        for _ in 0..factor {
            out.push(*iv);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Structural probe over the spec graph
// ---------------------------------------------------------------------------

/// Interval width of the input frames influencing the central output frame,
/// measured on an input of length >= 4x the analytic receptive field (and a
/// multiple of the pooling granularity). Errors if the field is not interior.
pub fn structural_probe(spec: &NetworkSpec) -> Result<u64, RfError> {
    let graph = spec.validate()?;
    let rf = rf_general(spec)?.rf;
    let time = probe_length(rf, graph.granularity);

    let mut per_layer: Vec<Vec<Option<(usize, usize)>>> = vec![Vec::new(); spec.layers.len()];
    let input: Vec<Option<(usize, usize)>> = (0..time).map(|t| Some((t, t))).collect();

    for &i in &graph.topo {
        let fetch = |r: &NodeRef, per_layer: &[Vec<Option<(usize, usize)>>]| match r {
            NodeRef::Input => input.clone(),
            NodeRef::Layer(j) => per_layer[*j].clone(),
        };
        let first = fetch(&graph.preds[i][0], &per_layer);
        let out = match &spec.layers[i].kind {
            LayerKind::Conv { taps, .. } => conv_intervals(&first, taps),
            LayerKind::MaxPool { window } => pool_intervals(&first, *window),
            LayerKind::Upsample { factor } => upsample_intervals(&first, *factor),
            LayerKind::Add { .. } | LayerKind::WeightedSum { .. } => {
                let mut acc = first;
                for p in &graph.preds[i][1..] {
                    let other = fetch(p, &per_layer);
                    acc = acc
                        .iter()
                        .zip(&other)
                        .map(|(a, b)| union(*a, *b))
                        .collect();
                }
                acc
            }
            _ => first,
        };
        per_layer[i] = out;
    }

    let sink = &per_layer[graph.sink];
    let center = aligned_center(sink.len(), graph.granularity);
    match sink[center] {
        Some((lo, hi)) if lo > 0 && hi + 1 < time => Ok((hi - lo + 1) as u64),
        _ => Err(RfError::InputTooShort),
    }
}

fn probe_length(rf: u64, granularity: u64) -> usize {
    let want = (4 * rf).max(4 * granularity).max(16);
    (want.div_ceil(granularity) * granularity) as usize
}

/// The measurement frame: central, rounded down to a granularity multiple so
/// nets with upsampling are probed at the phase the calculus reports.
fn aligned_center(len: usize, granularity: u64) -> usize {
    let g = granularity as usize;
    len / 2 / g * g
}

// ---------------------------------------------------------------------------
// Gradient probe
// ---------------------------------------------------------------------------

/// Backpropagates from one central output unit of a linearized instance
/// (identity activations, sum pooling, positive weights) and returns the span
/// of input frames with nonzero gradient. Exercises the real convolution,
/// upsample, and merge adjoints.
pub fn gradient_probe(spec: &NetworkSpec) -> Result<u64, RfError> {
    let graph = spec.validate()?;
    let rf = rf_general(spec)?.rf;
    let time = probe_length(rf, graph.granularity);
    let n = spec.layers.len();

    // One positive-channel mirror of every conv: w = 1/|taps|, bias 0.
    let probe_weights: Vec<Option<Tensor>> = spec
        .layers
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv { taps, .. } => {
                let mut w = Tensor::zeros(taps.len(), 1, 1);
                w.fill(1.0 / taps.len() as f64);
                Some(w)
            }
            _ => None,
        })
        .collect();

    let mut x = Tensor::zeros(1, time, 1);
    x.fill(1.0);

    // Forward with the substitutions (relu/softmax -> identity, max -> sum).
    let mut outputs: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    for &i in &graph.topo {
        let fetch = |r: &NodeRef| -> &Tensor {
            match r {
                NodeRef::Input => &x,
                NodeRef::Layer(j) => outputs[*j].as_ref().expect("topo order"),
            }
        };
        let out = match &spec.layers[i].kind {
            LayerKind::Conv { taps, .. } => {
                let w = probe_weights[i].as_ref().unwrap();
                conv1d_forward(fetch(&graph.preds[i][0]), taps, w, &[0.0])
                    .map_err(|e| RfError::Probe(e.to_string()))?
            }
            LayerKind::MaxPool { window } => sumpool_forward(fetch(&graph.preds[i][0]), *window),
            LayerKind::Upsample { factor } => upsample_forward(fetch(&graph.preds[i][0]), *factor)
                .map_err(|e| RfError::Probe(e.to_string()))?,
            LayerKind::Add { .. } | LayerKind::WeightedSum { .. } => {
                // All merge weights pinned to +1 for the probe.
                let mut acc = fetch(&graph.preds[i][0]).clone();
                for p in &graph.preds[i][1..] {
                    let other = fetch(p);
                    for (a, v) in acc.data_mut().iter_mut().zip(other.data()) {
                        *a += v;
                    }
                }
                acc
            }
            _ => fetch(&graph.preds[i][0]).clone(),
        };
        outputs[i] = Some(out);
    }
    let outputs: Vec<Tensor> = outputs.into_iter().map(Option::unwrap).collect();

    // Seed one central unit at the softmax input and run the adjoints.
    let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    let mut grad_input: Option<Tensor> = None;
    {
        let mut seed = Tensor::zeros(1, time, 1);
        seed.set(0, aligned_center(time, graph.granularity), 0, 1.0);
        match &graph.preds[graph.sink][0] {
            NodeRef::Input => grad_input = Some(seed),
            NodeRef::Layer(j) => grads[*j] = Some(seed),
        }
    }
    let accumulate = |slot: &NodeRef,
                      g: Tensor,
                      grads: &mut Vec<Option<Tensor>>,
                      grad_input: &mut Option<Tensor>| {
        let target = match slot {
            NodeRef::Input => grad_input,
            NodeRef::Layer(j) => &mut grads[*j],
        };
        match target {
            None => *target = Some(g),
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
    };
    for &i in graph.topo.iter().rev() {
        if i == graph.sink {
            continue;
        }
        let Some(g_out) = grads[i].take() else {
            continue;
        };
        let fetch = |r: &NodeRef| -> &Tensor {
            match r {
                NodeRef::Input => &x,
                NodeRef::Layer(j) => &outputs[*j],
            }
        };
        match &spec.layers[i].kind {
            LayerKind::Conv { taps, .. } => {
                let w = probe_weights[i].as_ref().unwrap();
                let out = conv1d_backward(fetch(&graph.preds[i][0]), taps, w, &g_out)
                    .map_err(|e| RfError::Probe(e.to_string()))?;
                accumulate(&graph.preds[i][0], out.grad_x, &mut grads, &mut grad_input);
            }
            LayerKind::MaxPool { window } => {
                let input_time = fetch(&graph.preds[i][0]).time();
                let gx = sumpool_backward(&g_out, *window, input_time);
                accumulate(&graph.preds[i][0], gx, &mut grads, &mut grad_input);
            }
            LayerKind::Upsample { factor } => {
                let gx = upsample_backward(&g_out, *factor)
                    .map_err(|e| RfError::Probe(e.to_string()))?;
                accumulate(&graph.preds[i][0], gx, &mut grads, &mut grad_input);
            }
            LayerKind::Add { .. } | LayerKind::WeightedSum { .. } => {
                for p in graph.preds[i].clone() {
                    accumulate(&p, g_out.clone(), &mut grads, &mut grad_input);
                }
            }
            _ => accumulate(&graph.preds[i][0], g_out, &mut grads, &mut grad_input),
        }
    }

    let g = grad_input.ok_or(RfError::ZeroGradient)?;
    let nonzero: Vec<usize> = (0..time).filter(|&t| g.at(0, t, 0) != 0.0).collect();
    let (Some(&lo), Some(&hi)) = (nonzero.first(), nonzero.last()) else {
        return Err(RfError::ZeroGradient);
    };
    if lo == 0 || hi + 1 == time {
        return Err(RfError::InputTooShort);
    }
    Ok((hi - lo + 1) as u64)
}

fn sumpool_forward(x: &Tensor, window: usize) -> Tensor {
    let (batch, time, ch) = x.shape();
    let out_time = time / window;
    let mut y = Tensor::zeros(batch, out_time, ch);
    for b in 0..batch {
        for ot in 0..out_time {
            let y_row = y.row_mut(b, ot);
            for t in ot * window..(ot + 1) * window {
                for (yo, v) in y_row.iter_mut().zip(x.row(b, t)) {
                    *yo += v;
                }
            }
        }
    }
    y
}

fn sumpool_backward(grad_out: &Tensor, window: usize, input_time: usize) -> Tensor {
    let (batch, out_time, ch) = grad_out.shape();
    let mut gx = Tensor::zeros(batch, input_time, ch);
    for b in 0..batch {
        for ot in 0..out_time {
            let g_row = grad_out.row(b, ot);
            for t in ot * window..((ot + 1) * window).min(input_time) {
                gx.row_mut(b, t).copy_from_slice(g_row);
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EncoderRf {
    pub exact: u64,
    pub paper: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RfReport {
    pub family: String,
    pub rf_general: u64,
    pub rf_paper: Option<u64>,
    pub structural: u64,
    pub gradient_probe: u64,
    pub params: u64,
    pub per_layer: Vec<LayerRf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderRf>,
}

impl RfReport {
    pub fn probes_agree(&self) -> bool {
        self.rf_general == self.structural && self.rf_general == self.gradient_probe
    }
}

/// Runs all three routes plus the family's closed form (when its meta carries
/// the hyperparameters). Asserts nothing: callers compare the routes.
pub fn analyze(spec: &NetworkSpec) -> Result<RfReport, RfError> {
    let calc = rf_general(spec)?;
    let structural = structural_probe(spec)?;
    let gradient = gradient_probe(spec)?;
    let rf_paper = closed_form_from_meta(spec);
    let encoder = if spec.family == Family::HgNet {
        encoder_rf_from_meta(spec)
    } else {
        None
    };
    Ok(RfReport {
        family: spec.family.name().to_string(),
        rf_general: calc.rf,
        rf_paper,
        structural,
        gradient_probe: gradient,
        params: count_params(spec),
        per_layer: calc.per_layer,
        encoder,
    })
}

fn meta_u64(spec: &NetworkSpec, key: &str) -> Option<u64> {
    spec.meta.get(key)?.parse().ok()
}

fn closed_form_from_meta(spec: &NetworkSpec) -> Option<u64> {
    match spec.family {
        Family::Standard => Some(rf_standard_paper(
            meta_u64(spec, "W")?,
            meta_u64(spec, "L")?,
        )),
        Family::DilNet => Some(rf_dilated_paper(
            meta_u64(spec, "W")?,
            meta_u64(spec, "L")?,
        )),
        Family::Tdnn => {
            let contexts = parse_contexts(spec.meta.get("contexts")?)?;
            Some(rf_tdnn_paper(&contexts))
        }
        Family::RecNet => None,
        Family::HgNet => {
            let (w, l, s) = (
                meta_u64(spec, "W")?,
                meta_u64(spec, "L")?,
                meta_u64(spec, "S")?,
            );
            Some(rf_hg_paper(w, 2, l, s, l).1)
        }
    }
}

fn encoder_rf_from_meta(spec: &NetworkSpec) -> Option<EncoderRf> {
    let (w, l) = (meta_u64(spec, "W")?, meta_u64(spec, "L")?);
    let mut ops = Vec::new();
    for _ in 0..l {
        ops.push(ChainOp::Conv(TapSet::contiguous(w as usize).ok()?));
        ops.push(ChainOp::Pool(2));
    }
    Some(EncoderRf {
        exact: chain_rf(&ops),
        paper: rf_hg_paper(w, 2, l, 1, l).0,
    })
}

pub fn parse_contexts(s: &str) -> Option<Vec<(u64, u64)>> {
    s.split(',')
        .map(|pair| {
            let (l, r) = pair.split_once(':')?;
            Some((l.trim().parse().ok()?, r.trim().parse().ok()?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Discrepancy report for Eqs. (2), (4), (5)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FormulaCheck {
    pub config: String,
    pub paper: u64,
    pub exact: u64,
}

/// Characterization of where the published closed forms diverge from the
/// exact calculus, evaluated at the reported best configurations.
#[derive(Debug, Clone, Serialize)]
pub struct DiscrepancyReport {
    /// Dilated-net closed form vs the exact field of the W=5, d=(2,4,8) net
    /// with its 3-layer preprocessing subnet (7 conv layers total).
    pub dilated: FormulaCheck,
    /// Down-sampling (encoder) closed form vs the exact chain value at
    /// W=5, P=2, L=3.
    pub encoder: FormulaCheck,
    /// Stacked-hourglass closed form vs the exact field of the
    /// S=5, W=5, L=3 net.
    pub stacked: FormulaCheck,
}

pub fn discrepancy_report() -> Result<DiscrepancyReport, RfError> {
    let dilnet = crate::architectures::build_dilnet(5, &[2, 4, 8], 8, 4)?;
    let dilated = FormulaCheck {
        config: "W=5 d=(2,4,8), 3 preprocessing + 3 dilated layers (L=7 in the closed form)".into(),
        paper: rf_dilated_paper(5, 7),
        exact: rf_general(&dilnet)?.rf,
    };

    let mut encoder_ops = Vec::new();
    for _ in 0..3 {
        encoder_ops.push(ChainOp::Conv(TapSet::contiguous(5)?));
        encoder_ops.push(ChainOp::Pool(2));
    }
    let encoder = FormulaCheck {
        config: "encoder W_d=5, P_d=2, L_d=3".into(),
        paper: rf_hg_paper(5, 2, 3, 1, 3).0,
        exact: chain_structural(&encoder_ops)?,
    };

    let hgnet = crate::architectures::build_hgnet(5, 5, 3, 8, 4)?;
    let stacked = FormulaCheck {
        config: "S=5, W=5, L=3".into(),
        paper: rf_hg_paper(5, 2, 3, 5, 3).1,
        exact: rf_general(&hgnet)?.rf,
    };

    Ok(DiscrepancyReport {
        dilated,
        encoder,
        stacked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{
        build_dilnet, build_hgnet, build_recnet, build_standard, build_tdnn,
    };

    #[test]
    fn standard_closed_form_examples() {
        assert_eq!(rf_standard_paper(5, 10), 41);
        assert_eq!(rf_standard_paper(3, 1), 3);
    }

    #[test]
    fn standard_chain_matches_closed_form() {
        let spec = build_standard(5, 10, 8, 4).unwrap();
        assert_eq!(rf_general(&spec).unwrap().rf, 41);
        let one = build_standard(7, 1, 8, 4).unwrap();
        assert_eq!(rf_general(&one).unwrap().rf, 7);
    }

    #[test]
    fn dilated_closed_form_examples() {
        assert_eq!(rf_dilated_paper(5, 7), 281);
        assert_eq!(rf_dilated_paper(5, 1), 5);
        assert_eq!(rf_dilated_paper(3, 2), 7);
    }

    /// The dilated formula agrees with the calculus for the 2-layer (1,2)
    /// schedule but diverges from depth 3 on.
    #[test]
    fn dilated_formula_agrees_only_for_shallow_schedules() {
        let ops = [
            ChainOp::Conv(TapSet::dilated(3, 1).unwrap()),
            ChainOp::Conv(TapSet::dilated(3, 2).unwrap()),
        ];
        assert_eq!(chain_rf(&ops), 7);
        assert_eq!(rf_dilated_paper(3, 2), 7);

        let ops3 = [
            ChainOp::Conv(TapSet::dilated(3, 1).unwrap()),
            ChainOp::Conv(TapSet::dilated(3, 2).unwrap()),
            ChainOp::Conv(TapSet::dilated(3, 4).unwrap()),
        ];
        assert_eq!(chain_rf(&ops3), 15);
        assert_ne!(rf_dilated_paper(3, 3), 15);
    }

    #[test]
    fn tdnn_closed_form_examples() {
        assert_eq!(rf_tdnn_paper(&[(1, 1), (2, 2)]), 7);
        assert_eq!(rf_tdnn_paper(&[]), 1);
        assert_eq!(rf_tdnn_paper(&[(2, 0), (0, 3)]), 6);
    }

    #[test]
    fn tdnn_chain_matches_closed_form() {
        let spec = build_tdnn(&[(1, 1), (2, 2)], 8, 4).unwrap();
        assert_eq!(rf_general(&spec).unwrap().rf, 7);
        let asym = build_tdnn(&[(2, 0), (0, 3)], 8, 4).unwrap();
        assert_eq!(rf_general(&asym).unwrap().rf, 6);
        assert_eq!(structural_probe(&asym).unwrap(), 6);
    }

    #[test]
    fn hg_closed_form_examples() {
        let (down, stacked) = rf_hg_paper(5, 2, 3, 5, 3);
        assert_eq!(down, 17);
        assert_eq!(stacked, 680);
    }

    #[test]
    fn encoder_chain_exact_value() {
        let mut ops = Vec::new();
        for _ in 0..3 {
            ops.push(ChainOp::Conv(TapSet::contiguous(5).unwrap()));
            ops.push(ChainOp::Pool(2));
        }
        assert_eq!(chain_rf(&ops), 36);
        assert_eq!(chain_structural(&ops).unwrap(), 36);
    }

    /// pool(2) then conv(3): hand-traced input interval of width 6.
    #[test]
    fn pool_conv_chain_hand_trace() {
        let ops = [
            ChainOp::Pool(2),
            ChainOp::Conv(TapSet::contiguous(3).unwrap()),
        ];
        assert_eq!(chain_rf(&ops), 6);
        assert_eq!(chain_structural(&ops).unwrap(), 6);
    }

    #[test]
    fn single_conv_probes() {
        let spec = build_standard(5, 1, 4, 4).unwrap();
        assert_eq!(structural_probe(&spec).unwrap(), 5);
        assert_eq!(gradient_probe(&spec).unwrap(), 5);
    }

    #[test]
    fn probes_agree_on_all_small_presets() {
        for family in Family::ALL {
            let spec = crate::architectures::small_preset(family, 4, 4).unwrap();
            let rf = rf_general(&spec).unwrap().rf;
            assert_eq!(structural_probe(&spec).unwrap(), rf, "{family} structural");
            assert_eq!(gradient_probe(&spec).unwrap(), rf, "{family} gradient");
        }
    }

    /// Frozen from the interval trace: at phase-aligned frames the repeated
    /// samples after each upsample make two of the decoder taps land in
    /// already-covered coarse cells, so the field is 22, not the 24 a plain
    /// `span * jump` count would suggest.
    #[test]
    fn hgnet_probes_agree() {
        let spec = build_hgnet(1, 3, 2, 4, 4).unwrap();
        let rf = rf_general(&spec).unwrap().rf;
        assert_eq!(rf, 22);
        assert_eq!(structural_probe(&spec).unwrap(), rf);
        assert_eq!(gradient_probe(&spec).unwrap(), rf);
    }

    #[test]
    fn recnet_rf_grows_linearly_in_recursions() {
        // Probe span grows by (W-1) per extra application of the shared conv.
        let widths: Vec<u64> = (1..=5)
            .map(|r| {
                let spec = build_recnet(r, 1, 3, 4, 4).unwrap();
                gradient_probe(&spec).unwrap()
            })
            .collect();
        for pair in widths.windows(2) {
            assert_eq!(pair[1] - pair[0], 2);
        }
        // Parameter count stays fixed apart from the mixing scalars.
        let p1 = count_params(&build_recnet(1, 1, 3, 4, 4).unwrap());
        let p5 = count_params(&build_recnet(5, 1, 3, 4, 4).unwrap());
        assert_eq!(p5, p1 + 4);
    }

    #[test]
    fn conv_layer_monotonicity() {
        // Appending a conv layer never decreases the field.
        for depth in 1..6 {
            let a = rf_general(&build_standard(3, depth, 4, 4).unwrap())
                .unwrap()
                .rf;
            let b = rf_general(&build_standard(3, depth + 1, 4, 4).unwrap())
                .unwrap()
                .rf;
            assert!(b >= a);
        }
    }

    #[test]
    fn report_carries_paper_values() {
        let spec = build_standard(5, 10, 4, 4).unwrap();
        let report = analyze(&spec).unwrap();
        assert_eq!(report.rf_general, 41);
        assert_eq!(report.rf_paper, Some(41));
        assert!(report.probes_agree());

        let hg = build_hgnet(5, 5, 3, 4, 4).unwrap();
        let report = analyze(&hg).unwrap();
        let encoder = report.encoder.unwrap();
        assert_eq!(encoder.exact, 36);
        assert_eq!(encoder.paper, 17);
        assert_eq!(report.rf_paper, Some(680));
    }

    #[test]
    fn discrepancy_characterization_values() {
        let report = discrepancy_report().unwrap();
        assert_eq!(report.dilated.paper, 281);
        assert_eq!(report.dilated.exact, 63);
        assert_eq!(report.encoder.paper, 17);
        assert_eq!(report.encoder.exact, 36);
        assert_eq!(report.stacked.paper, 680);
        assert_eq!(report.stacked.exact, 476);
    }

    #[test]
    fn dilnet_structural_probe_matches_general() {
        let spec = build_dilnet(5, &[2, 4, 8], 4, 4).unwrap();
        let rf = rf_general(&spec).unwrap().rf;
        assert_eq!(rf, 63);
        assert_eq!(structural_probe(&spec).unwrap(), rf);
        assert_eq!(gradient_probe(&spec).unwrap(), rf);
    }
}
