//! Graph execution: parameter storage, topological forward/backward passes,
//! and the checkpoint file format.
//!
//! Parameters live in a [`ParamStore`] keyed by layer id (or share-group tag:
//! shared convolutions own exactly one weight tensor, and gradients from all
//! applications sum into its single accumulator). Evaluation follows the
//! deterministic topological order computed by spec validation, so gradient
//! accumulation order is fixed and runs are bit-reproducible.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::layers::{
    add_forward, conv1d_backward, conv1d_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, softmax, softmax_xent, upsample_backward, upsample_forward,
    weighted_sum_backward, weighted_sum_forward, LayerError,
};
use crate::netgraph::{
    count_params, parse_spec, serialize_spec, Graph, LayerKind, NetworkSpec, NodeRef, SpecError,
};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LRF1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("layer `{layer}`: {source}")]
    Layer { layer: String, source: LayerError },
    #[error("input has {got} channels, spec expects {want}")]
    InputDim { got: usize, want: usize },
    #[error("input time length {time} is not divisible by the network granularity {granularity}")]
    TimeGranularity { time: usize, granularity: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    /// Convolution weights (taps, in, out) and bias (out).
    Conv { w: Tensor, b: Vec<f64> },
    /// Learnable per-source scalars of a weighted sum.
    Mix { alpha: Vec<f64> },
}

impl ParamValue {
    fn zeros_like(&self) -> ParamValue {
        match self {
            ParamValue::Conv { w, b } => {
                let (t, i, o) = w.shape();
                ParamValue::Conv {
                    w: Tensor::zeros(t, i, o),
                    b: vec![0.0; b.len()],
                }
            }
            ParamValue::Mix { alpha } => ParamValue::Mix {
                alpha: vec![0.0; alpha.len()],
            },
        }
    }

    fn zero(&mut self) {
        match self {
            ParamValue::Conv { w, b } => {
                w.fill(0.0);
                b.iter_mut().for_each(|x| *x = 0.0);
            }
            ParamValue::Mix { alpha } => alpha.iter_mut().for_each(|x| *x = 0.0),
        }
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        match self {
            ParamValue::Conv { w, b } => vec![w.data(), b.as_slice()],
            ParamValue::Mix { alpha } => vec![alpha.as_slice()],
        }
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ParamValue::Conv { w, b } => vec![w.data_mut(), b.as_mut_slice()],
            ParamValue::Mix { alpha } => vec![alpha.as_mut_slice()],
        }
    }

    pub fn len(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    /// Layer id, or the share-group tag for shared convolutions.
    pub key: String,
    pub value: ParamValue,
    pub grad: ParamValue,
}

/// Parameters and gradient accumulators in spec declaration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn from_spec(spec: &NetworkSpec) -> ParamStore {
        let mut entries: Vec<ParamEntry> = Vec::new();
        let mut index = HashMap::new();
        for layer in &spec.layers {
            match &layer.kind {
                LayerKind::Conv {
                    taps,
                    in_channels,
                    out_channels,
                    share_group,
                } => {
                    let key = share_group.clone().unwrap_or_else(|| layer.id.clone());
                    if index.contains_key(&key) {
                        continue; // later application of a shared kernel
                    }
                    let value = ParamValue::Conv {
                        w: Tensor::zeros(taps.len(), *in_channels, *out_channels),
                        b: vec![0.0; *out_channels],
                    };
                    let grad = value.zeros_like();
                    index.insert(key.clone(), entries.len());
                    entries.push(ParamEntry { key, value, grad });
                }
                LayerKind::WeightedSum { weights, .. } => {
                    let value = ParamValue::Mix {
                        alpha: weights.clone(),
                    };
                    let grad = value.zeros_like();
                    index.insert(layer.id.clone(), entries.len());
                    entries.push(ParamEntry {
                        key: layer.id.clone(),
                        value,
                        grad,
                    });
                }
                _ => {}
            }
        }
        ParamStore { entries, index }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, key: &str) -> Option<&ParamEntry> {
        self.index.get(key).map(|&i| &self.entries[i])
    }

    fn entry_ix(&self, key: &str) -> usize {
        self.index[key]
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.zero();
        }
    }

    pub fn num_params(&self) -> u64 {
        self.entries.iter().map(|e| e.value.len() as u64).sum()
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// A validated spec bound to its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    graph: Graph,
    pub params: ParamStore,
}

/// Cached activations of one forward pass.
pub struct ForwardPass {
    /// Per-layer outputs (indexed by layer position in the spec).
    pub outputs: Vec<Tensor>,
    /// Max-pool argmax indices where applicable.
    argmax: Vec<Option<Vec<usize>>>,
    sink: usize,
}

impl ForwardPass {
    /// Posterior tensor (batch, time, num_classes) of the softmax sink.
    pub fn posteriors(&self) -> &Tensor {
        &self.outputs[self.sink]
    }
}

/// Loss statistics produced by a backward pass.
pub struct BackwardStats {
    pub mean_ce: f64,
    pub correct_frames: usize,
    pub total_frames: usize,
    /// Gradient with respect to the network input.
    pub grad_input: Tensor,
}

impl Network {
    pub fn new(mut spec: NetworkSpec) -> Result<Network, NetError> {
        spec.normalize();
        let graph = spec.validate()?;
        let params = ParamStore::from_spec(&spec);
        Ok(Network {
            spec,
            graph,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Input time lengths must be divisible by this.
    pub fn granularity(&self) -> u64 {
        self.graph.granularity
    }

    pub fn num_params(&self) -> u64 {
        self.params.num_params()
    }

    /// Training init: Glorot-uniform weights (bias 0) for every hidden conv,
    /// zeros for the conv feeding the softmax sink. The zeroed head makes
    /// initial posteriors exactly uniform (CE = ln K) regardless of how much
    /// skip connections and pooling inflate hidden activation scales.
    /// Weighted-sum scalars keep their declared initial values.
    pub fn init_params(&mut self, seed: u64) {
        self.init_params_dense(seed);
        if let NodeRef::Layer(head_ix) = self.graph.preds[self.graph.sink][0] {
            if let LayerKind::Conv { share_group, .. } = &self.spec.layers[head_ix].kind {
                let key = share_group
                    .as_deref()
                    .unwrap_or(&self.spec.layers[head_ix].id)
                    .to_string();
                let ix = self.params.entry_ix(&key);
                if let ParamValue::Conv { w, b } = &mut self.params.entries[ix].value {
                    w.fill(0.0);
                    b.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
    }

    /// Glorot-uniform init for every conv including the head; used by
    /// finite-difference checks so no gradient path starts out dead. Each
    /// parameter tensor draws from its own derived stream, so init does not
    /// depend on evaluation order.
    pub fn init_params_dense(&mut self, seed: u64) {
        for (i, entry) in self.params.entries.iter_mut().enumerate() {
            if let ParamValue::Conv { w, b } = &mut entry.value {
                let (taps, fan_in, fan_out) = w.shape();
                let bound = (6.0 / ((taps * fan_in + taps * fan_out) as f64)).sqrt();
                let mut rng = Rng::new(derive_seed(seed, i as u64));
                for v in w.data_mut() {
                    *v = rng.uniform(-bound, bound);
                }
                b.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn layer_err(&self, ix: usize, source: LayerError) -> NetError {
        NetError::Layer {
            layer: self.spec.layers[ix].id.clone(),
            source,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NetError> {
        if x.channels() != self.spec.input_dim {
            return Err(NetError::InputDim {
                got: x.channels(),
                want: self.spec.input_dim,
            });
        }
        if x.time() as u64 % self.graph.granularity != 0 {
            return Err(NetError::TimeGranularity {
                time: x.time(),
                granularity: self.graph.granularity,
            });
        }
        Ok(())
    }

    /// Topological-order evaluation; the sink output holds per-frame
    /// posteriors with the same time length as the input.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass, NetError> {
        self.check_input(x)?;
        let n = self.spec.layers.len();
        let mut outputs: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut argmax: Vec<Option<Vec<usize>>> = (0..n).map(|_| None).collect();

        for &i in &self.graph.topo {
            let fetch = |r: &NodeRef| -> &Tensor {
                match r {
                    NodeRef::Input => x,
                    NodeRef::Layer(j) => outputs[*j].as_ref().expect("topological order"),
                }
            };
            let inputs: Vec<&Tensor> = self.graph.preds[i].iter().map(&fetch).collect();
            let out = match &self.spec.layers[i].kind {
                LayerKind::Conv { taps, .. } => {
                    let entry = self.conv_entry(i);
                    let ParamValue::Conv { w, b } = &entry.value else {
                        unreachable!()
                    };
                    conv1d_forward(inputs[0], taps, w, b).map_err(|e| self.layer_err(i, e))?
                }
                LayerKind::MaxPool { window } => {
                    let (y, idx) =
                        maxpool_forward(inputs[0], *window).map_err(|e| self.layer_err(i, e))?;
                    argmax[i] = Some(idx);
                    y
                }
                LayerKind::Upsample { factor } => {
                    upsample_forward(inputs[0], *factor).map_err(|e| self.layer_err(i, e))?
                }
                LayerKind::Relu => relu_forward(inputs[0]),
                LayerKind::Identity => inputs[0].clone(),
                LayerKind::Add { .. } => {
                    add_forward(&inputs).map_err(|e| self.layer_err(i, e))?
                }
                LayerKind::WeightedSum { .. } => {
                    let ParamValue::Mix { alpha } = &self.params.entries
                        [self.params.entry_ix(&self.spec.layers[i].id)]
                    .value
                    else {
                        unreachable!()
                    };
                    weighted_sum_forward(&inputs, alpha).map_err(|e| self.layer_err(i, e))?
                }
                LayerKind::SoftmaxOutput { .. } => softmax(inputs[0]),
            };
            outputs[i] = Some(out);
        }

        Ok(ForwardPass {
            outputs: outputs.into_iter().map(Option::unwrap).collect(),
            argmax,
            sink: self.graph.sink,
        })
    }

    fn conv_entry(&self, layer_ix: usize) -> &ParamEntry {
        let LayerKind::Conv { share_group, .. } = &self.spec.layers[layer_ix].kind else {
            unreachable!()
        };
        let key = share_group
            .as_deref()
            .unwrap_or(&self.spec.layers[layer_ix].id);
        &self.params.entries[self.params.entry_ix(key)]
    }

    /// Cross-entropy backward pass: zeroes all accumulators, then fills each
    /// exactly once (shared kernels accumulate over their applications).
    /// Labels are per frame, batch-major, aligned to the input time grid.
    pub fn backward(
        &mut self,
        x: &Tensor,
        fwd: &ForwardPass,
        labels: &[u32],
    ) -> Result<BackwardStats, NetError> {
        let sink = self.graph.sink;
        let logits_ref = &self.graph.preds[sink][0];
        let logits = match logits_ref {
            NodeRef::Input => x,
            NodeRef::Layer(j) => &fwd.outputs[*j],
        };
        let fused = softmax_xent(logits, labels).map_err(|e| self.layer_err(sink, e))?;

        self.params.zero_grads();
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut grad_input: Option<Tensor> = None;

        // Seed the gradient at the softmax input; the sink itself is skipped.
        match logits_ref {
            NodeRef::Input => grad_input = Some(fused.grad_logits.clone()),
            NodeRef::Layer(j) => grads[*j] = Some(fused.grad_logits.clone()),
        }

        let accumulate =
            |slot: &NodeRef, g: Tensor, grads: &mut Vec<Option<Tensor>>, grad_input: &mut Option<Tensor>| {
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

        for &i in self.graph.topo.iter().rev() {
            if i == sink {
                continue;
            }
            let Some(g_out) = grads[i].take() else {
                continue; // no downstream gradient (cannot happen in a validated graph)
            };
            let fetch = |r: &NodeRef| -> &Tensor {
                match r {
                    NodeRef::Input => x,
                    NodeRef::Layer(j) => &fwd.outputs[*j],
                }
            };
            match &self.spec.layers[i].kind {
                LayerKind::Conv {
                    taps, share_group, ..
                } => {
                    let input = fetch(&self.graph.preds[i][0]);
                    let key = share_group
                        .as_deref()
                        .unwrap_or(&self.spec.layers[i].id)
                        .to_string();
                    let entry_ix = self.params.entry_ix(&key);
                    let ParamValue::Conv { w, .. } = &self.params.entries[entry_ix].value else {
                        unreachable!()
                    };
                    let out = conv1d_backward(input, taps, w, &g_out)
                        .map_err(|e| self.layer_err(i, e))?;
                    let ParamValue::Conv { w: gw, b: gb } =
                        &mut self.params.entries[entry_ix].grad
                    else {
                        unreachable!()
                    };
                    for (a, v) in gw.data_mut().iter_mut().zip(out.grad_w.data()) {
                        *a += v;
                    }
                    for (a, v) in gb.iter_mut().zip(&out.grad_b) {
                        *a += v;
                    }
                    accumulate(&self.graph.preds[i][0], out.grad_x, &mut grads, &mut grad_input);
                }
                LayerKind::MaxPool { .. } => {
                    let input = fetch(&self.graph.preds[i][0]);
                    let idx = fwd.argmax[i].as_ref().expect("argmax recorded in forward");
                    let gx = maxpool_backward(idx, &g_out, input.time())
                        .map_err(|e| self.layer_err(i, e))?;
                    accumulate(&self.graph.preds[i][0], gx, &mut grads, &mut grad_input);
                }
                LayerKind::Upsample { factor } => {
                    let gx =
                        upsample_backward(&g_out, *factor).map_err(|e| self.layer_err(i, e))?;
                    accumulate(&self.graph.preds[i][0], gx, &mut grads, &mut grad_input);
                }
                LayerKind::Relu => {
                    let input = fetch(&self.graph.preds[i][0]);
                    let gx = relu_backward(input, &g_out).map_err(|e| self.layer_err(i, e))?;
                    accumulate(&self.graph.preds[i][0], gx, &mut grads, &mut grad_input);
                }
                LayerKind::Identity => {
                    accumulate(&self.graph.preds[i][0], g_out, &mut grads, &mut grad_input);
                }
                LayerKind::Add { .. } => {
                    for p in self.graph.preds[i].clone() {
                        accumulate(&p, g_out.clone(), &mut grads, &mut grad_input);
                    }
                }
                LayerKind::WeightedSum { .. } => {
                    let sources: Vec<&Tensor> = self.graph.preds[i].iter().map(&fetch).collect();
                    let entry_ix = self.params.entry_ix(&self.spec.layers[i].id);
                    let ParamValue::Mix { alpha } = &self.params.entries[entry_ix].value else {
                        unreachable!()
                    };
                    let (gsrc, galpha) = weighted_sum_backward(&sources, alpha, &g_out)
                        .map_err(|e| self.layer_err(i, e))?;
                    let ParamValue::Mix { alpha: ga } = &mut self.params.entries[entry_ix].grad
                    else {
                        unreachable!()
                    };
                    for (a, v) in ga.iter_mut().zip(&galpha) {
                        *a += v;
                    }
                    for (p, g) in self.graph.preds[i].clone().iter().zip(gsrc) {
                        accumulate(p, g, &mut grads, &mut grad_input);
                    }
                }
                LayerKind::SoftmaxOutput { .. } => unreachable!("sink skipped above"),
            }
        }

        Ok(BackwardStats {
            mean_ce: fused.mean_ce,
            correct_frames: fused.correct,
            total_frames: labels.len(),
            grad_input: grad_input
                .unwrap_or_else(|| Tensor::zeros(x.batch(), x.time(), x.channels())),
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "LRF1", canonical spec document (u64 length +
// bytes), then per-parameter tensors in spec order as little-endian float64
// with shape headers (u32 rank, u64 dims each).
// ---------------------------------------------------------------------------

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<(), NetError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let doc = serialize_spec(net.spec());
    out.extend_from_slice(&(doc.len() as u64).to_le_bytes());
    out.extend_from_slice(doc.as_bytes());
    for entry in net.params.entries() {
        match &entry.value {
            ParamValue::Conv { w, b } => {
                let (t, i, o) = w.shape();
                write_tensor(&mut out, &[t as u64, i as u64, o as u64], w.data());
                write_tensor(&mut out, &[b.len() as u64], b);
            }
            ParamValue::Mix { alpha } => {
                write_tensor(&mut out, &[alpha.len() as u64], alpha);
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn write_tensor(out: &mut Vec<u8>, dims: &[u64], data: &[f64]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Network, NetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;

    let magic = take(&bytes, &mut cursor, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let doc_len = read_u64(&bytes, &mut cursor)? as usize;
    let doc_bytes = take(&bytes, &mut cursor, doc_len)?;
    let doc = std::str::from_utf8(doc_bytes)
        .map_err(|e| NetError::Checkpoint(format!("spec document is not UTF-8: {e}")))?;
    let spec = parse_spec(doc)?;
    let mut net = Network::new(spec)?;

    for entry in net.params.entries_mut() {
        match &mut entry.value {
            ParamValue::Conv { w, b } => {
                let (t, i, o) = w.shape();
                read_tensor_into(
                    &bytes,
                    &mut cursor,
                    &[t as u64, i as u64, o as u64],
                    w.data_mut(),
                    &entry.key,
                )?;
                let want = [b.len() as u64];
                read_tensor_into(&bytes, &mut cursor, &want, b, &entry.key)?;
            }
            ParamValue::Mix { alpha } => {
                let want = [alpha.len() as u64];
                read_tensor_into(&bytes, &mut cursor, &want, alpha, &entry.key)?;
            }
        }
    }
    if cursor != bytes.len() {
        return Err(NetError::Checkpoint(format!(
            "{} trailing bytes after parameters",
            bytes.len() - cursor
        )));
    }
    Ok(net)
}

fn take<'a>(bytes: &'a [u8], cursor: &mut usize, n: usize) -> Result<&'a [u8], NetError> {
    if *cursor + n > bytes.len() {
        return Err(NetError::Checkpoint("unexpected end of file".into()));
    }
    let s = &bytes[*cursor..*cursor + n];
    *cursor += n;
    Ok(s)
}

fn read_u64(bytes: &[u8], cursor: &mut usize) -> Result<u64, NetError> {
    let s = take(bytes, cursor, 8)?;
    Ok(u64::from_le_bytes(s.try_into().unwrap()))
}

fn read_tensor_into(
    bytes: &[u8],
    cursor: &mut usize,
    want_dims: &[u64],
    out: &mut [f64],
    key: &str,
) -> Result<(), NetError> {
    let rank = u32::from_le_bytes(take(bytes, cursor, 4)?.try_into().unwrap()) as usize;
    if rank != want_dims.len() {
        return Err(NetError::Checkpoint(format!(
            "parameter `{key}`: rank {rank}, expected {}",
            want_dims.len()
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u64(bytes, cursor)?);
    }
    if dims != want_dims {
        return Err(NetError::Checkpoint(format!(
            "parameter `{key}`: shape {dims:?}, expected {want_dims:?}"
        )));
    }
    for slot in out.iter_mut() {
        let s = take(bytes, cursor, 8)?;
        *slot = f64::from_le_bytes(s.try_into().unwrap());
    }
    Ok(())
}

/// Sanity check: the store's size matches the declarative count.
pub fn store_matches_declared_count(net: &Network) -> bool {
    net.num_params() == count_params(net.spec())
}
