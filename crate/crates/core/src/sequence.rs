//! Feature-sequence construction from FCN score maps and the stacked
//! bidirectional LSTM with identification/localization heads.
//!
//! Sequence steps are the non-background grid cells of a scan, ordered by
//! longitudinal grid coordinate (ties broken by the in-plane grid index).
//! Each bidirectional layer runs one LSTM cell per direction and feeds the
//! pair of hidden streams to the next layer; the heads read the top layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpineError};
use crate::losses::{BACKGROUND, NUM_CLASSES};
use crate::net::{LayerParams, ScoreMaps, LOC_DIMS};
use crate::ops::{argmax, softmax};
use crate::tensor::Tensor;

/// One sequence step: the feature vector of a positive grid cell plus where
/// it came from.
#[derive(Debug, Clone)]
pub struct SequenceStep {
    pub feature: Vec<f64>,
    pub grid_index: [usize; 3],
    pub origin_voxel: [usize; 3],
}

/// Training target for one step: a non-background label and the centroid
/// offset within the step's window.
#[derive(Debug, Clone)]
pub struct StepTarget {
    pub label: usize,
    pub offset: [f64; 3],
}

/// A spatially ordered sample-feature sequence, optionally with per-step
/// training targets.
#[derive(Debug, Clone, Default)]
pub struct FeatureSequence {
    pub steps: Vec<SequenceStep>,
    pub targets: Option<Vec<StepTarget>>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Keeps exactly the grid cells whose softmax argmax is not background, in
/// (longitudinal, frontal, sagittal) grid order, with their feature vectors.
pub fn build_feature_sequence(maps: &ScoreMaps) -> FeatureSequence {
    let mut steps = Vec::new();
    // Linear cell order is row-major over (d, h, w), which is exactly the
    // required ordering: monotone in the longitudinal grid coordinate with
    // ties broken by (h, w).
    for cell in 0..maps.num_cells() {
        let probs = softmax(&maps.id_at(cell));
        if argmax(&probs) == BACKGROUND {
            continue;
        }
        let g = maps.grid_index(cell);
        steps.push(SequenceStep {
            feature: maps.feature_at(cell),
            grid_index: g,
            origin_voxel: [g[0] * 16, g[1] * 16, g[2] * 16],
        });
    }
    FeatureSequence { steps, targets: None }
}

/// Splits a sequence longer than `cap` into overlapping chunks (step
/// `cap - overlap`), carrying targets along. Shorter sequences pass through.
pub fn chunk_sequence(seq: &FeatureSequence, cap: usize, overlap: usize) -> Vec<FeatureSequence> {
    assert!(cap > 0 && overlap < cap, "chunk cap must exceed overlap");
    let t = seq.len();
    if t <= cap {
        return vec![seq.clone()];
    }
    let stride = cap - overlap;
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + cap).min(t);
        let begin = end.saturating_sub(cap);
        chunks.push(FeatureSequence {
            steps: seq.steps[begin..end].to_vec(),
            targets: seq.targets.as_ref().map(|ts| ts[begin..end].to_vec()),
        });
        if end == t {
            break;
        }
        start += stride;
    }
    chunks
}

/// Groups sequence indices into batches, bucketing by length so batch mates
/// have similar cost. Deterministic.
pub fn make_batches(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Hidden and cell state of one LSTM direction.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_units: usize) -> LstmState {
        LstmState {
            hidden: vec![0.0; hidden_units],
            cell: vec![0.0; hidden_units],
        }
    }
}

/// One LSTM cell: gate order i, f, g, o along the 4H rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// [4H, input_width]
    pub w_input: Tensor,
    /// [4H, H]
    pub w_hidden: Tensor,
    /// [4H]
    pub bias: Tensor,
}

impl LstmCellParams {
    pub fn hidden_units(&self) -> usize {
        self.w_hidden.shape()[1]
    }

    pub fn input_width(&self) -> usize {
        self.w_input.shape()[1]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activated gates plus states cached for one step.
#[derive(Debug, Clone)]
struct StepCache {
    gates: Vec<f64>,   // [4H] activated: i, f, g, o
    c_prev: Vec<f64>,
    h_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Pre-activations: bias + (sum of per-part input dots) + hidden dot. The
/// input may arrive in parts (the two direction streams of the layer below);
/// each part is reduced separately so the sum over parts commutes exactly.
fn gate_preactivations(cell: &LstmCellParams, x_parts: &[&[f64]], h: &[f64]) -> Result<Vec<f64>> {
    let total: usize = x_parts.iter().map(|p| p.len()).sum();
    if total != cell.input_width() {
        return Err(SpineError::shape(
            "lstm_step input",
            format!("{} values", cell.input_width()),
            format!("{total}"),
        ));
    }
    let hu = cell.hidden_units();
    let rows = 4 * hu;
    let mut pre = vec![0.0; rows];
    let wx = cell.w_input.data();
    let wh = cell.w_hidden.data();
    let b = cell.bias.data();
    let in_w = cell.input_width();
    for r in 0..rows {
        let wx_row = &wx[r * in_w..(r + 1) * in_w];
        let mut x_dot = 0.0;
        let mut off = 0usize;
        for part in x_parts {
            x_dot += crate::ops::kernels::dot(&wx_row[off..off + part.len()], part);
            off += part.len();
        }
        let h_dot = crate::ops::kernels::dot(&wh[r * hu..(r + 1) * hu], h);
        pre[r] = b[r] + x_dot + h_dot;
    }
    Ok(pre)
}

fn step_with_cache(
    cell: &LstmCellParams,
    x_parts: &[&[f64]],
    state: &LstmState,
) -> Result<(LstmState, StepCache)> {
    let hu = cell.hidden_units();
    let pre = gate_preactivations(cell, x_parts, &state.hidden)?;
    let mut gates = vec![0.0; 4 * hu];
    for k in 0..hu {
        gates[k] = sigmoid(pre[k]); // input gate
        gates[hu + k] = sigmoid(pre[hu + k]); // forget gate
        gates[2 * hu + k] = pre[2 * hu + k].tanh(); // candidate
        gates[3 * hu + k] = sigmoid(pre[3 * hu + k]); // output gate
    }
    let mut c = vec![0.0; hu];
    let mut tanh_c = vec![0.0; hu];
    let mut h = vec![0.0; hu];
    for k in 0..hu {
        c[k] = gates[hu + k] * state.cell[k] + gates[k] * gates[2 * hu + k];
        tanh_c[k] = c[k].tanh();
        h[k] = gates[3 * hu + k] * tanh_c[k];
    }
    let cache = StepCache {
        gates,
        c_prev: state.cell.clone(),
        h_prev: state.hidden.clone(),
        tanh_c,
    };
    Ok((LstmState { hidden: h, cell: c }, cache))
}

/// One LSTM step: standard gates (input, forget, candidate, output) with
/// sigmoid/tanh activations. Returns the hidden output and the new state.
pub fn lstm_step(
    cell: &LstmCellParams,
    input: &[f64],
    state: &LstmState,
) -> Result<(Vec<f64>, LstmState)> {
    let (new_state, _) = step_with_cache(cell, &[input], state)?;
    Ok((new_state.hidden.clone(), new_state))
}

/// Architecture of the stacked bidirectional LSTM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiRnnArch {
    /// Width of the per-step input feature vector.
    pub input_width: usize,
    /// Hidden units per LSTM cell.
    pub hidden_units: usize,
    /// Number of stacked bidirectional layers.
    pub num_layers: usize,
}

impl BiRnnArch {
    /// Reference configuration: 1024-dim features, 256 hidden units, 3 layers.
    pub fn reference() -> BiRnnArch {
        BiRnnArch {
            input_width: 1024,
            hidden_units: 256,
            num_layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.hidden_units == 0 || self.num_layers == 0 {
            return Err(SpineError::BadConfig(
                "rnn arch widths and layer count must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of a bidirectional layer's output (both directions concatenated).
    pub fn layer_output_width(&self) -> usize {
        2 * self.hidden_units
    }
}

/// One bidirectional layer: a forward and a backward cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmLayer {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

/// The complete Bi-RNN parameter set: stacked bidirectional layers and the
/// two per-step prediction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct BiRnnParams {
    pub arch: BiRnnArch,
    pub layers: Vec<BiLstmLayer>,
    pub head_id: LayerParams,
    pub head_loc: LayerParams,
}

impl BiRnnParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in &self.layers {
            for cell in [&l.forward, &l.backward] {
                v.push(&cell.w_input);
                v.push(&cell.w_hidden);
                v.push(&cell.bias);
            }
        }
        for h in [&self.head_id, &self.head_loc] {
            v.push(&h.weights);
            v.push(&h.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            for cell in [&mut l.forward, &mut l.backward] {
                v.push(&mut cell.w_input);
                v.push(&mut cell.w_hidden);
                v.push(&mut cell.bias);
            }
        }
        for h in [&mut self.head_id, &mut self.head_loc] {
            v.push(&mut h.weights);
            v.push(&mut h.bias);
        }
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn init_cell(input_width: usize, hidden: usize, rng: &mut impl rand::Rng) -> LstmCellParams {
    let bound_x = (3.0 / input_width as f64).sqrt();
    let bound_h = (3.0 / hidden as f64).sqrt();
    let wx: Vec<f64> = (0..4 * hidden * input_width)
        .map(|_| rng.random_range(-bound_x..bound_x))
        .collect();
    let wh: Vec<f64> = (0..4 * hidden * hidden)
        .map(|_| rng.random_range(-bound_h..bound_h))
        .collect();
    let mut bias = vec![0.0; 4 * hidden];
    // Forget-gate bias +1 for early-training stability.
    for b in bias[hidden..2 * hidden].iter_mut() {
        *b = 1.0;
    }
    LstmCellParams {
        w_input: Tensor::from_vec(&[4 * hidden, input_width], wx).unwrap(),
        w_hidden: Tensor::from_vec(&[4 * hidden, hidden], wh).unwrap(),
        bias: Tensor::from_vec(&[4 * hidden], bias).unwrap(),
    }
}

/// Builds Bi-RNN parameters with scaled-uniform initialization, forget-gate
/// bias +1, zero other biases. Deterministic for a given seed.
pub fn build_birnn(arch: &BiRnnArch, seed: u64) -> Result<BiRnnParams> {
    arch.validate()?;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = arch.hidden_units;
    let mut layers = Vec::with_capacity(arch.num_layers);
    let mut in_w = arch.input_width;
    for _ in 0..arch.num_layers {
        layers.push(BiLstmLayer {
            forward: init_cell(in_w, h, &mut rng),
            backward: init_cell(in_w, h, &mut rng),
        });
        in_w = 2 * h;
    }
    let out_w = 2 * h;
    let bound = (3.0 / out_w as f64).sqrt();
    let mk_head = |rows: usize, rng: &mut rand_chacha::ChaCha8Rng| LayerParams {
        weights: Tensor::from_vec(
            &[rows, out_w],
            (0..rows * out_w).map(|_| rng.random_range(-bound..bound)).collect(),
        )
        .unwrap(),
        bias: Tensor::zeros(&[rows]),
    };
    let head_id = mk_head(NUM_CLASSES, &mut rng);
    let head_loc = mk_head(LOC_DIMS, &mut rng);
    Ok(BiRnnParams {
        arch: arch.clone(),
        layers,
        head_id,
        head_loc,
    })
}

/// Per-step head outputs.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub offset: [f64; 3],
}

/// Head evaluation on the two top-layer streams: bias + (dot over the forward
/// half + dot over the backward half) per row.
fn head_forward(head: &LayerParams, fwd: &[f64], bwd: &[f64]) -> Vec<f64> {
    let h = fwd.len();
    let rows = head.bias.len();
    let w = head.weights.data();
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * 2 * h..(r + 1) * 2 * h];
        let d1 = crate::ops::kernels::dot(&row[..h], fwd);
        let d2 = crate::ops::kernels::dot(&row[h..], bwd);
        out[r] = head.bias.data()[r] + (d1 + d2);
    }
    out
}

/// Full forward cache: per layer and direction, the per-step caches and
/// hidden streams, in sequence order.
struct RnnCache {
    // [layer][t]
    fwd_caches: Vec<Vec<StepCache>>,
    bwd_caches: Vec<Vec<StepCache>>,
    // [layer][t][H], hidden outputs in sequence order
    fwd_h: Vec<Vec<Vec<f64>>>,
    bwd_h: Vec<Vec<Vec<f64>>>,
    outputs: Vec<StepOutput>,
}

fn rnn_forward_impl(params: &BiRnnParams, seq: &FeatureSequence, cache: bool) -> Result<RnnCache> {
    if seq.is_empty() {
        return Err(SpineError::InvalidArgument(
            "birnn_forward requires a non-empty sequence".into(),
        ));
    }
    let t_len = seq.len();
    let h = params.arch.hidden_units;
    for (t, s) in seq.steps.iter().enumerate() {
        if s.feature.len() != params.arch.input_width {
            return Err(SpineError::shape(
                format!("sequence step {t}"),
                format!("{} features", params.arch.input_width),
                format!("{}", s.feature.len()),
            ));
        }
    }

    let mut fwd_caches = Vec::new();
    let mut bwd_caches = Vec::new();
    let mut fwd_h: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut bwd_h: Vec<Vec<Vec<f64>>> = Vec::new();

    for (li, layer) in params.layers.iter().enumerate() {
        let mut f_caches = Vec::with_capacity(t_len);
        let mut f_stream: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut state = LstmState::zeros(h);
        for t in 0..t_len {
            let (new_state, c) = if li == 0 {
                step_with_cache(&layer.forward, &[&seq.steps[t].feature], &state)?
            } else {
                step_with_cache(
                    &layer.forward,
                    &[&fwd_h[li - 1][t], &bwd_h[li - 1][t]],
                    &state,
                )?
            };
            f_stream.push(new_state.hidden.clone());
            f_caches.push(c);
            state = new_state;
        }

        let mut b_caches: Vec<StepCache> = Vec::with_capacity(t_len);
        let mut b_stream: Vec<Vec<f64>> = vec![Vec::new(); t_len];
        let mut b_cache_slots: Vec<Option<StepCache>> = (0..t_len).map(|_| None).collect();
        let mut state = LstmState::zeros(h);
        for t in (0..t_len).rev() {
            let (new_state, c) = if li == 0 {
                step_with_cache(&layer.backward, &[&seq.steps[t].feature], &state)?
            } else {
                step_with_cache(
                    &layer.backward,
                    &[&fwd_h[li - 1][t], &bwd_h[li - 1][t]],
                    &state,
                )?
            };
            b_stream[t] = new_state.hidden.clone();
            b_cache_slots[t] = Some(c);
            state = new_state;
        }
        for slot in b_cache_slots {
            b_caches.push(slot.unwrap());
        }

        fwd_h.push(f_stream);
        bwd_h.push(b_stream);
        if cache {
            fwd_caches.push(f_caches);
            bwd_caches.push(b_caches);
        }
    }

    let top = params.layers.len() - 1;
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let logits = head_forward(&params.head_id, &fwd_h[top][t], &bwd_h[top][t]);
        let off = head_forward(&params.head_loc, &fwd_h[top][t], &bwd_h[top][t]);
        outputs.push(StepOutput {
            logits,
            offset: [off[0], off[1], off[2]],
        });
    }

    Ok(RnnCache {
        fwd_caches,
        bwd_caches,
        fwd_h: if cache { fwd_h } else { Vec::new() },
        bwd_h: if cache { bwd_h } else { Vec::new() },
        outputs,
    })
}

/// Runs the stacked Bi-RNN over a sequence: per step, class logits and a
/// centroid offset. Initial states are zero.
pub fn birnn_forward(params: &BiRnnParams, seq: &FeatureSequence) -> Result<Vec<StepOutput>> {
    Ok(rnn_forward_impl(params, seq, false)?.outputs)
}

/// Per-step upstream gradients for [`birnn_grad`].
#[derive(Debug, Clone)]
pub struct StepUpstream {
    pub d_logits: Vec<f64>,
    pub d_offset: [f64; 3],
}

fn backward_cell_step(
    cell: &LstmCellParams,
    c: &StepCache,
    x_parts: &[&[f64]],
    dh: &[f64],
    dc_carry: &mut Vec<f64>,
    dh_carry_out: &mut Vec<f64>,
    dx_parts: &mut [&mut [f64]],
    g_wx: &mut Tensor,
    g_wh: &mut Tensor,
    g_b: &mut Tensor,
) {
    let hu = cell.hidden_units();
    let (i_g, rest) = c.gates.split_at(hu);
    let (f_g, rest) = rest.split_at(hu);
    let (g_g, o_g) = rest.split_at(hu);

    let mut dpre = vec![0.0; 4 * hu];
    for k in 0..hu {
        let do_ = dh[k] * c.tanh_c[k];
        let dc = dc_carry[k] + dh[k] * o_g[k] * (1.0 - c.tanh_c[k] * c.tanh_c[k]);
        let di = dc * g_g[k];
        let dg = dc * i_g[k];
        let df = dc * c.c_prev[k];
        dc_carry[k] = dc * f_g[k];
        dpre[k] = di * i_g[k] * (1.0 - i_g[k]);
        dpre[hu + k] = df * f_g[k] * (1.0 - f_g[k]);
        dpre[2 * hu + k] = dg * (1.0 - g_g[k] * g_g[k]);
        dpre[3 * hu + k] = do_ * o_g[k] * (1.0 - o_g[k]);
    }

    let in_w = cell.input_width();
    let wx = cell.w_input.data();
    let wh = cell.w_hidden.data();
    let gwx = g_wx.data_mut();
    let gwh = g_wh.data_mut();
    let gb = g_b.data_mut();
    for r in 0..4 * hu {
        let d = dpre[r];
        if d == 0.0 {
            continue;
        }
        gb[r] += d;
        let mut off = 0usize;
        for (part, dpart) in x_parts.iter().zip(dx_parts.iter_mut()) {
            let w_row = &wx[r * in_w + off..r * in_w + off + part.len()];
            let gw_row = &mut gwx[r * in_w + off..r * in_w + off + part.len()];
            crate::ops::kernels::axpy(gw_row, part, d);
            crate::ops::kernels::axpy(dpart, w_row, d);
            off += part.len();
        }
        let wh_row = &wh[r * hu..(r + 1) * hu];
        let gwh_row = &mut gwh[r * hu..(r + 1) * hu];
        crate::ops::kernels::axpy(gwh_row, &c.h_prev, d);
        crate::ops::kernels::axpy(dh_carry_out, wh_row, d);
    }
}

/// Full backpropagation through time over all layers and both directions.
/// Returns gradients in [`BiRnnParams::tensors`] order.
pub fn birnn_grad(
    params: &BiRnnParams,
    seq: &FeatureSequence,
    upstream: &[StepUpstream],
) -> Result<Vec<Tensor>> {
    let cache = rnn_forward_impl(params, seq, true)?;
    birnn_grad_from_cache(params, seq, &cache, upstream)
}

fn birnn_grad_from_cache(
    params: &BiRnnParams,
    seq: &FeatureSequence,
    cache: &RnnCache,
    upstream: &[StepUpstream],
) -> Result<Vec<Tensor>> {
    let t_len = seq.len();
    if upstream.len() != t_len {
        return Err(SpineError::shape(
            "birnn_grad upstream",
            format!("{t_len} steps"),
            format!("{}", upstream.len()),
        ));
    }
    let h = params.arch.hidden_units;
    let top = params.layers.len() - 1;

    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let n_layer_tensors = 6; // per layer: fwd (wx, wh, b), bwd (wx, wh, b)
    let head_id_w_idx = params.layers.len() * n_layer_tensors;

    // Head gradients and the upstream into the top-layer streams.
    let mut d_fwd: Vec<Vec<f64>> = vec![vec![0.0; h]; t_len];
    let mut d_bwd: Vec<Vec<f64>> = vec![vec![0.0; h]; t_len];
    for t in 0..t_len {
        for (head, du, w_idx) in [
            (&params.head_id, &upstream[t].d_logits[..], head_id_w_idx),
            (&params.head_loc, &upstream[t].d_offset[..], head_id_w_idx + 2),
        ] {
            let rows = head.bias.len();
            if du.len() != rows {
                return Err(SpineError::shape(
                    format!("birnn_grad upstream step {t}"),
                    format!("{rows} values"),
                    format!("{}", du.len()),
                ));
            }
            let w = head.weights.data();
            let (gw_t, gb_t) = {
                let (a, b) = grads.split_at_mut(w_idx + 1);
                (&mut a[w_idx], &mut b[0])
            };
            let gw = gw_t.data_mut();
            let gb = gb_t.data_mut();
            for r in 0..rows {
                let d = du[r];
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                let row = &w[r * 2 * h..(r + 1) * 2 * h];
                let grow = &mut gw[r * 2 * h..(r + 1) * 2 * h];
                for k in 0..h {
                    grow[k] += d * cache.fwd_h[top][t][k];
                    grow[h + k] += d * cache.bwd_h[top][t][k];
                    d_fwd[t][k] += d * row[k];
                    d_bwd[t][k] += d * row[h + k];
                }
            }
        }
    }

    // Walk layers top-down; d_fwd/d_bwd hold the upstreams into the current
    // layer's two hidden streams.
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let in_parts = |t: usize| -> Vec<&[f64]> {
            if li == 0 {
                vec![&seq.steps[t].feature[..]]
            } else {
                vec![&cache.fwd_h[li - 1][t][..], &cache.bwd_h[li - 1][t][..]]
            }
        };
        let in_widths: Vec<usize> = if li == 0 {
            vec![params.arch.input_width]
        } else {
            vec![h, h]
        };
        let mut d_in: Vec<Vec<Vec<f64>>> = (0..t_len)
            .map(|_| in_widths.iter().map(|&w| vec![0.0; w]).collect())
            .collect();

        let base = li * n_layer_tensors;
        // Forward direction: BPTT runs t = T-1 .. 0.
        {
            let (gwx, rest) = grads[base..].split_at_mut(1);
            let (gwh, rest) = rest.split_at_mut(1);
            let gb = &mut rest[0];
            let mut dc = vec![0.0; h];
            let mut dh_carry = vec![0.0; h];
            for t in (0..t_len).rev() {
                let mut dh = d_fwd[t].clone();
                for (a, b) in dh.iter_mut().zip(&dh_carry) {
                    *a += b;
                }
                dh_carry = vec![0.0; h];
                let parts = in_parts(t);
                let mut dparts: Vec<&mut [f64]> =
                    d_in[t].iter_mut().map(|v| v.as_mut_slice()).collect();
                backward_cell_step(
                    &layer.forward,
                    &cache.fwd_caches[li][t],
                    &parts,
                    &dh,
                    &mut dc,
                    &mut dh_carry,
                    &mut dparts,
                    &mut gwx[0],
                    &mut gwh[0],
                    gb,
                );
            }
        }
        // Backward direction consumes t = T-1 .. 0, so BPTT runs t = 0 .. T-1.
        {
            let (gwx, rest) = grads[base + 3..].split_at_mut(1);
            let (gwh, rest) = rest.split_at_mut(1);
            let gb = &mut rest[0];
            let mut dc = vec![0.0; h];
            let mut dh_carry = vec![0.0; h];
            for t in 0..t_len {
                let mut dh = d_bwd[t].clone();
                for (a, b) in dh.iter_mut().zip(&dh_carry) {
                    *a += b;
                }
                dh_carry = vec![0.0; h];
                let parts = in_parts(t);
                let mut dparts: Vec<&mut [f64]> =
                    d_in[t].iter_mut().map(|v| v.as_mut_slice()).collect();
                backward_cell_step(
                    &layer.backward,
                    &cache.bwd_caches[li][t],
                    &parts,
                    &dh,
                    &mut dc,
                    &mut dh_carry,
                    &mut dparts,
                    &mut gwx[0],
                    &mut gwh[0],
                    gb,
                );
            }
        }

        if li > 0 {
            for t in 0..t_len {
                d_fwd[t] = std::mem::take(&mut d_in[t][0]);
                d_bwd[t] = std::mem::take(&mut d_in[t][1]);
            }
        }
    }

    Ok(grads)
}

/// Training hyperparameters for the Bi-RNN.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RnnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lambda: f64,
    /// Learning-rate decay factor, applied every `lr_decay_every_iters`.
    pub lr_decay_factor: f64,
    /// 0 disables decay.
    pub lr_decay_every_iters: usize,
    /// Sequences longer than this are split into overlapping chunks.
    pub sequence_cap: usize,
    pub chunk_overlap: usize,
    pub seed: u64,
}

impl Default for RnnTrainConfig {
    fn default() -> RnnTrainConfig {
        RnnTrainConfig {
            epochs: 12,
            batch_size: 256,
            learning_rate: 1e-6,
            weight_decay: 1e-4,
            momentum: 0.9,
            lambda: 0.10,
            lr_decay_factor: 1.0,
            lr_decay_every_iters: 0,
            sequence_cap: 320,
            chunk_overlap: 64,
            seed: 0,
        }
    }
}

impl RnnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SpineError::BadConfig("rnn epochs and batch size must be positive".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(SpineError::BadConfig("rnn learning rate must be non-negative".into()));
        }
        if self.lambda < 0.0 {
            return Err(SpineError::BadConfig("lambda must be non-negative".into()));
        }
        if self.chunk_overlap >= self.sequence_cap {
            return Err(SpineError::BadConfig("chunk overlap must be below the sequence cap".into()));
        }
        Ok(())
    }
}

/// Eq.-style per-sequence loss and upstream gradients: summed over steps, the
/// identification term plus lambda times the localization term.
fn sequence_loss_and_upstream(
    outputs: &[StepOutput],
    targets: &[StepTarget],
    lambda: f64,
) -> (f64, f64, Vec<StepUpstream>) {
    let mut id_sum = 0.0;
    let mut loc_sum = 0.0;
    let mut ups = Vec::with_capacity(outputs.len());
    for (o, t) in outputs.iter().zip(targets) {
        let (id_loss, d_logits) = crate::losses::id_loss_grad_wrt_logits(&o.logits, t.label);
        let (loc_loss, d_off_raw) = crate::losses::loc_loss_grad(&o.offset, &t.offset);
        id_sum += id_loss;
        loc_sum += loc_loss;
        ups.push(StepUpstream {
            d_logits,
            d_offset: [
                lambda * d_off_raw[0],
                lambda * d_off_raw[1],
                lambda * d_off_raw[2],
            ],
        });
    }
    (id_sum, loc_sum, ups)
}

/// Identification and localization loss sums of one sequence under the
/// current parameters (Eq.-style: summed over steps, before the lambda mix).
pub fn evaluate_sequence_loss(
    params: &BiRnnParams,
    seq: &FeatureSequence,
    lambda: f64,
) -> Result<(f64, f64)> {
    let targets = seq.targets.as_ref().ok_or_else(|| {
        SpineError::InvalidArgument("evaluate_sequence_loss requires targets".into())
    })?;
    let outputs = birnn_forward(params, seq)?;
    let (id, loc, _) = sequence_loss_and_upstream(&outputs, targets, lambda);
    Ok((id, loc))
}

/// Per-epoch training record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RnnEpochReport {
    pub epoch: usize,
    pub id_loss: f64,
    pub loc_loss: f64,
    pub total: f64,
}

/// Trains the Bi-RNN on pre-extracted feature sequences with SGD + momentum.
/// Sequences must carry targets. Deterministic for a given config seed.
pub fn train_birnn(
    sequences: &[FeatureSequence],
    arch: &BiRnnArch,
    cfg: &RnnTrainConfig,
) -> Result<(BiRnnParams, Vec<RnnEpochReport>)> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(SpineError::InvalidArgument("train_birnn requires sequences".into()));
    }
    let mut chunks: Vec<FeatureSequence> = Vec::new();
    for s in sequences {
        if s.targets.is_none() {
            return Err(SpineError::InvalidArgument(
                "train_birnn requires per-step targets".into(),
            ));
        }
        if s.is_empty() {
            continue;
        }
        chunks.extend(chunk_sequence(s, cfg.sequence_cap, cfg.chunk_overlap));
    }
    if chunks.is_empty() {
        return Err(SpineError::InvalidArgument("all training sequences are empty".into()));
    }

    let mut params = build_birnn(arch, cfg.seed)?;
    let lengths: Vec<usize> = chunks.iter().map(|c| c.len()).collect();
    let batches = make_batches(&lengths, cfg.batch_size);

    let mut state = {
        let tensors = params.tensors();
        crate::optim::OptimState::new(&tensors, cfg.learning_rate.max(f64::MIN_POSITIVE), cfg.momentum, cfg.weight_decay)?
    };
    state.learning_rate = cfg.learning_rate;

    use rand::SeedableRng;
    // Distinct stream from the init seed so shuffling never aliases weights.
    let mut order_rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x524e_4e5f_5345_51);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut iter_count = 0usize;

    for epoch in 0..cfg.epochs {
        let mut batch_order: Vec<usize> = (0..batches.len()).collect();
        shuffle(&mut batch_order, &mut order_rng);

        let mut id_acc = 0.0;
        let mut loc_acc = 0.0;
        let mut seq_count = 0usize;
        for &bi in &batch_order {
            let batch = &batches[bi];
            let results: Vec<Result<(f64, f64, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&si| {
                    let seq = &chunks[si];
                    let cache = rnn_forward_impl(&params, seq, true)?;
                    let (id, loc, ups) = sequence_loss_and_upstream(
                        &cache.outputs,
                        seq.targets.as_ref().unwrap(),
                        cfg.lambda,
                    );
                    let grads = birnn_grad_from_cache(&params, seq, &cache, &ups)?;
                    Ok((id, loc, grads))
                })
                .collect();

            let mut batch_grads: Option<Vec<Tensor>> = None;
            let mut batch_id = 0.0;
            let mut batch_loc = 0.0;
            for r in results {
                let (id, loc, grads) = r?;
                let total = crate::losses::total_loss(id, loc, cfg.lambda);
                if !total.is_finite() {
                    return Err(SpineError::NonFinite(format!(
                        "sequence loss at epoch {epoch} (id {id}, loc {loc})"
                    )));
                }
                batch_id += id;
                batch_loc += loc;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.axpy(1.0, g)?;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = batch_grads.unwrap();
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if cfg.learning_rate > 0.0 {
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                let mut tensors = params.tensors_mut();
                crate::optim::sgd_step(&mut tensors, &grad_refs, &mut state)?;
            }
            iter_count += 1;
            if cfg.lr_decay_every_iters > 0 && iter_count % cfg.lr_decay_every_iters == 0 {
                state.learning_rate *= cfg.lr_decay_factor;
            }
            id_acc += batch_id;
            loc_acc += batch_loc;
            seq_count += batch.len();
        }
        let report = RnnEpochReport {
            epoch,
            id_loss: id_acc / seq_count as f64,
            loc_loss: loc_acc / seq_count as f64,
            total: (id_acc + cfg.lambda * loc_acc) / seq_count as f64,
        };
        log::info!(
            "rnn epoch {}: id {:.6} loc {:.6} total {:.6}",
            report.epoch,
            report.id_loss,
            report.loc_loss,
            report.total
        );
        curve.push(report);
    }
    Ok((params, curve))
}

fn shuffle(v: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::GRID_STRIDE;
    use crate::test_util::{rel_close, seeded_tensor, RelTol};

    fn zero_cell(input_width: usize, hidden: usize) -> LstmCellParams {
        LstmCellParams {
            w_input: Tensor::zeros(&[4 * hidden, input_width]),
            w_hidden: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    #[test]
    fn lstm_zero_weights_zero_state_gives_zero_output() {
        let cell = zero_cell(3, 4);
        let state = LstmState::zeros(4);
        let (out, new_state) = lstm_step(&cell, &[1.0, -2.0, 0.5], &state).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(new_state.cell.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_open_input_closed_keeps_cell_state() {
        let hidden = 3;
        let mut cell = zero_cell(2, hidden);
        // Gate rows: i, f, g, o. Saturate forget to 1 and input to 0.
        for k in 0..hidden {
            cell.bias.data_mut()[k] = -50.0; // input gate -> 0
            cell.bias.data_mut()[hidden + k] = 50.0; // forget gate -> 1
        }
        let mut state = LstmState {
            hidden: vec![0.0; hidden],
            cell: vec![0.7, -1.2, 0.4],
        };
        let c0 = state.cell.clone();
        for step_inputs in [[1.0, 2.0], [-3.0, 0.5], [10.0, -10.0]] {
            let (_, new_state) = lstm_step(&cell, &step_inputs, &state).unwrap();
            state = new_state;
            assert_eq!(state.cell, c0);
        }
    }

    #[test]
    fn lstm_matches_hand_unrolled_gate_arithmetic() {
        // Independent scalar unrolling of the gate equations.
        let hidden = 4;
        let input_w = 2;
        let cell = LstmCellParams {
            w_input: seeded_tensor(&[4 * hidden, input_w], 1001),
            w_hidden: seeded_tensor(&[4 * hidden, hidden], 1002),
            bias: seeded_tensor(&[4 * hidden], 1003),
        };
        let x0 = [0.3, -0.8];
        let x1 = [-0.1, 0.9];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());

        let mut h_ref = vec![0.0; hidden];
        let mut c_ref = vec![0.0; hidden];
        let mut state = LstmState::zeros(hidden);
        for x in [x0, x1] {
            let mut pre = vec![0.0; 4 * hidden];
            for r in 0..4 * hidden {
                let mut acc = cell.bias.data()[r];
                for (j, xv) in x.iter().enumerate() {
                    acc += cell.w_input.data()[r * input_w + j] * xv;
                }
                for (j, hv) in h_ref.iter().enumerate() {
                    acc += cell.w_hidden.data()[r * hidden + j] * hv;
                }
                pre[r] = acc;
            }
            let mut h_new = vec![0.0; hidden];
            let mut c_new = vec![0.0; hidden];
            for k in 0..hidden {
                let i = sig(pre[k]);
                let f = sig(pre[hidden + k]);
                let g = pre[2 * hidden + k].tanh();
                let o = sig(pre[3 * hidden + k]);
                c_new[k] = f * c_ref[k] + i * g;
                h_new[k] = o * c_new[k].tanh();
            }
            h_ref = h_new;
            c_ref = c_new;

            let (out, new_state) = lstm_step(&cell, &x, &state).unwrap();
            state = new_state;
            for (a, b) in out.iter().zip(&h_ref) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
            for (a, b) in state.cell.iter().zip(&c_ref) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lstm_rejects_width_mismatch() {
        let cell = zero_cell(3, 2);
        let state = LstmState::zeros(2);
        assert!(lstm_step(&cell, &[1.0, 2.0], &state).is_err());
    }

    fn toy_sequence(t_len: usize, width: usize, seed: u64) -> FeatureSequence {
        let feats = seeded_tensor(&[t_len, width], seed);
        let steps = (0..t_len)
            .map(|t| SequenceStep {
                feature: feats.data()[t * width..(t + 1) * width].to_vec(),
                grid_index: [t, 0, 0],
                origin_voxel: [t * GRID_STRIDE, 0, 0],
            })
            .collect();
        FeatureSequence { steps, targets: None }
    }

    fn toy_arch(width: usize) -> BiRnnArch {
        BiRnnArch {
            input_width: width,
            hidden_units: 4,
            num_layers: 2,
        }
    }

    #[test]
    fn birnn_rejects_empty_sequence() {
        let params = build_birnn(&toy_arch(5), 1).unwrap();
        let empty = FeatureSequence::default();
        assert!(birnn_forward(&params, &empty).is_err());
    }

    #[test]
    fn birnn_single_step_is_deterministic() {
        let params = build_birnn(&toy_arch(5), 2).unwrap();
        let seq = toy_sequence(1, 5, 3);
        let a = birnn_forward(&params, &seq).unwrap();
        let b = birnn_forward(&params, &seq).unwrap();
        assert_eq!(a[0].logits, b[0].logits);
        assert_eq!(a[0].offset, b[0].offset);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].logits.len(), NUM_CLASSES);
    }

    /// The full direction-symmetry transform: swap forward/backward cells in
    /// every layer, swap the input-weight column halves of layers above the
    /// first, and swap the head weight column halves.
    fn swap_directions(params: &BiRnnParams) -> BiRnnParams {
        let h = params.arch.hidden_units;
        let swap_cols = |t: &Tensor| {
            let rows = t.shape()[0];
            let cols = t.shape()[1];
            assert_eq!(cols, 2 * h);
            let mut out = t.clone();
            for r in 0..rows {
                for k in 0..h {
                    out.data_mut()[r * cols + k] = t.data()[r * cols + h + k];
                    out.data_mut()[r * cols + h + k] = t.data()[r * cols + k];
                }
            }
            out
        };
        let mut out = params.clone();
        for (li, layer) in out.layers.iter_mut().enumerate() {
            std::mem::swap(&mut layer.forward, &mut layer.backward);
            if li > 0 {
                layer.forward.w_input = swap_cols(&layer.forward.w_input);
                layer.backward.w_input = swap_cols(&layer.backward.w_input);
            }
        }
        out.head_id.weights = swap_cols(&out.head_id.weights);
        out.head_loc.weights = swap_cols(&out.head_loc.weights);
        out
    }

    #[test]
    fn direction_symmetry_is_exact() {
        let params = build_birnn(&toy_arch(6), 7).unwrap();
        let seq = toy_sequence(5, 6, 8);
        let forward = birnn_forward(&params, &seq).unwrap();

        let mut reversed = seq.clone();
        reversed.steps.reverse();
        let swapped = swap_directions(&params);
        let backward = birnn_forward(&swapped, &reversed).unwrap();

        for t in 0..seq.len() {
            let a = &forward[t];
            let b = &backward[seq.len() - 1 - t];
            assert_eq!(a.logits, b.logits, "step {t}");
            assert_eq!(a.offset, b.offset, "step {t}");
        }
    }

    #[test]
    fn forward_stream_is_causal_within_a_layer() {
        // A single layer's forward cell must ignore inputs at later steps.
        let arch = BiRnnArch {
            input_width: 4,
            hidden_units: 3,
            num_layers: 1,
        };
        let params = build_birnn(&arch, 11).unwrap();
        let seq = toy_sequence(6, 4, 12);
        let mut perturbed = seq.clone();
        for v in &mut perturbed.steps[4].feature {
            *v += 3.0;
        }

        let run = |s: &FeatureSequence| {
            let mut state = LstmState::zeros(3);
            let mut outs = Vec::new();
            for step in &s.steps {
                let (o, ns) = lstm_step(&params.layers[0].forward, &step.feature, &state).unwrap();
                outs.push(o);
                state = ns;
            }
            outs
        };
        let a = run(&seq);
        let b = run(&perturbed);
        for t in 0..4 {
            assert_eq!(a[t], b[t], "prefix step {t} changed");
        }
        assert_ne!(a[4], b[4]);
    }

    #[test]
    fn birnn_matches_independently_unrolled_reference() {
        // Reference: re-derive the whole stack with plain loops and explicit
        // concatenated inputs.
        let arch = toy_arch(5);
        let params = build_birnn(&arch, 21).unwrap();
        let seq = toy_sequence(3, 5, 22);
        let h = arch.hidden_units;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());

        let cell_step = |cell: &LstmCellParams, x: &[f64], hs: &[f64], cs: &[f64]| {
            let mut pre = vec![0.0; 4 * h];
            for r in 0..4 * h {
                let mut acc = cell.bias.data()[r];
                for (j, xv) in x.iter().enumerate() {
                    acc += cell.w_input.data()[r * x.len() + j] * xv;
                }
                for (j, hv) in hs.iter().enumerate() {
                    acc += cell.w_hidden.data()[r * h + j] * hv;
                }
                pre[r] = acc;
            }
            let mut hn = vec![0.0; h];
            let mut cn = vec![0.0; h];
            for k in 0..h {
                let i = sig(pre[k]);
                let f = sig(pre[h + k]);
                let g = pre[2 * h + k].tanh();
                let o = sig(pre[3 * h + k]);
                cn[k] = f * cs[k] + i * g;
                hn[k] = o * cn[k].tanh();
            }
            (hn, cn)
        };

        let t_len = seq.len();
        let mut layer_in: Vec<Vec<f64>> = seq.steps.iter().map(|s| s.feature.clone()).collect();
        for layer in &params.layers {
            let mut f_out = Vec::new();
            let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
            for t in 0..t_len {
                let (hn, cn) = cell_step(&layer.forward, &layer_in[t], &hs, &cs);
                f_out.push(hn.clone());
                hs = hn;
                cs = cn;
            }
            let mut b_out = vec![Vec::new(); t_len];
            let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
            for t in (0..t_len).rev() {
                let (hn, cn) = cell_step(&layer.backward, &layer_in[t], &hs, &cs);
                b_out[t] = hn.clone();
                hs = hn;
                cs = cn;
            }
            layer_in = (0..t_len)
                .map(|t| {
                    let mut v = f_out[t].clone();
                    v.extend_from_slice(&b_out[t]);
                    v
                })
                .collect();
        }
        let head = |head: &LayerParams, x: &[f64]| -> Vec<f64> {
            let rows = head.bias.len();
            (0..rows)
                .map(|r| {
                    let mut acc = head.bias.data()[r];
                    for (j, xv) in x.iter().enumerate() {
                        acc += head.weights.data()[r * x.len() + j] * xv;
                    }
                    acc
                })
                .collect()
        };

        let outputs = birnn_forward(&params, &seq).unwrap();
        for t in 0..t_len {
            let ref_logits = head(&params.head_id, &layer_in[t]);
            let ref_off = head(&params.head_loc, &layer_in[t]);
            for (a, b) in outputs[t].logits.iter().zip(&ref_logits) {
                assert!((a - b).abs() <= 1e-12, "step {t}: {a} vs {b}");
            }
            for (a, b) in outputs[t].offset.iter().zip(&ref_off) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let params = build_birnn(&toy_arch(5), 31).unwrap();
        let seq = toy_sequence(3, 5, 32);
        let ups = vec![
            StepUpstream {
                d_logits: vec![0.0; NUM_CLASSES],
                d_offset: [0.0; 3],
            };
            3
        ];
        let grads = birnn_grad(&params, &seq, &ups).unwrap();
        for g in grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    fn fd_loss(params: &BiRnnParams, seq: &FeatureSequence, ups: &[StepUpstream]) -> f64 {
        let outs = birnn_forward(params, seq).unwrap();
        let mut acc = 0.0;
        for (o, u) in outs.iter().zip(ups) {
            for (a, b) in o.logits.iter().zip(&u.d_logits) {
                acc += a * b;
            }
            for (a, b) in o.offset.iter().zip(&u.d_offset) {
                acc += a * b;
            }
        }
        acc
    }

    fn random_upstream(t_len: usize, seed: u64) -> Vec<StepUpstream> {
        let data = seeded_tensor(&[t_len, NUM_CLASSES + 3], seed);
        (0..t_len)
            .map(|t| {
                let row = &data.data()[t * (NUM_CLASSES + 3)..];
                StepUpstream {
                    d_logits: row[..NUM_CLASSES].to_vec(),
                    d_offset: [row[NUM_CLASSES], row[NUM_CLASSES + 1], row[NUM_CLASSES + 2]],
                }
            })
            .collect()
    }

    fn check_birnn_fd(t_len: usize, seed: u64) -> usize {
        let arch = toy_arch(5);
        let params = build_birnn(&arch, seed).unwrap();
        let seq = toy_sequence(t_len, 5, seed + 1);
        let ups = random_upstream(t_len, seed + 2);
        let analytic = birnn_grad(&params, &seq, &ups).unwrap();

        let h = 1e-5;
        let mut probes = 0usize;
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            let n = params.tensors()[ti].len();
            for k in 0..n {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[k] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[k] -= h;
                let numeric = (fd_loss(&plus, &seq, &ups) - fd_loss(&minus, &seq, &ups)) / (2.0 * h);
                let a = analytic[ti].data()[k];
                assert!(
                    rel_close(a, numeric, RelTol(1e-4)),
                    "tensor {ti} entry {k}: analytic {a}, numeric {numeric}"
                );
                probes += 1;
            }
        }
        probes
    }

    #[test]
    fn single_step_grad_reduces_to_feedforward_backprop() {
        let probes = check_birnn_fd(1, 41);
        assert!(probes >= 100);
    }

    #[test]
    fn bptt_matches_finite_differences_at_t3() {
        let probes = check_birnn_fd(3, 47);
        assert!(probes >= 100);
    }

    fn maps_with_labels(grid: [usize; 3], labels: &[usize]) -> ScoreMaps {
        let cells = grid[0] * grid[1] * grid[2];
        assert_eq!(cells, labels.len());
        let mut id = Tensor::zeros(&[NUM_CLASSES, grid[0], grid[1], grid[2]]);
        for (cell, &l) in labels.iter().enumerate() {
            id.data_mut()[l * cells + cell] = 9.0;
        }
        let mut features = Tensor::zeros(&[3, grid[0], grid[1], grid[2]]);
        for (cell, _) in labels.iter().enumerate() {
            features.data_mut()[cell] = cell as f64;
        }
        ScoreMaps {
            id_scores: id,
            loc_scores: Tensor::zeros(&[3, grid[0], grid[1], grid[2]]),
            features,
        }
    }

    #[test]
    fn all_background_maps_give_empty_sequence() {
        let maps = maps_with_labels([2, 1, 1], &[BACKGROUND, BACKGROUND]);
        assert!(build_feature_sequence(&maps).is_empty());
    }

    #[test]
    fn sequence_is_sorted_by_longitudinal_grid_index() {
        // Positive cells at longitudinal indices 3 and 1; expect order 1, 3.
        let labels = [
            BACKGROUND, BACKGROUND, 4, BACKGROUND, BACKGROUND, BACKGROUND, 7, BACKGROUND,
        ];
        let maps = maps_with_labels([4, 2, 1], &labels);
        let seq = build_feature_sequence(&maps);
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.steps[0].grid_index, [1, 0, 0]);
        assert_eq!(seq.steps[1].grid_index, [3, 0, 0]);
        assert_eq!(seq.steps[0].origin_voxel, [16, 0, 0]);
    }

    #[test]
    fn sequence_length_matches_brute_force_count() {
        let maps = {
            let grid = [3, 2, 2];
            let cells = 12;
            let mut id = seeded_tensor(&[NUM_CLASSES, grid[0], grid[1], grid[2]], 55);
            // Push some cells firmly to background.
            for cell in [1usize, 4, 9] {
                id.data_mut()[BACKGROUND * cells + cell] = 50.0;
            }
            ScoreMaps {
                id_scores: id,
                loc_scores: Tensor::zeros(&[3, grid[0], grid[1], grid[2]]),
                features: Tensor::zeros(&[2, grid[0], grid[1], grid[2]]),
            }
        };
        let mut count = 0;
        for cell in 0..maps.num_cells() {
            let scores = maps.id_at(cell);
            let am = (0..NUM_CLASSES).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            if am != BACKGROUND {
                count += 1;
            }
        }
        assert_eq!(build_feature_sequence(&maps).len(), count);
    }

    #[test]
    fn chunking_respects_cap_and_overlap() {
        let mut seq = toy_sequence(20, 3, 60);
        seq.targets = Some(
            (0..20)
                .map(|t| StepTarget {
                    label: t % 26,
                    offset: [t as f64, 0.0, 0.0],
                })
                .collect(),
        );
        let chunks = chunk_sequence(&seq, 8, 2);
        assert!(chunks.iter().all(|c| c.len() <= 8));
        // Consecutive chunks overlap by 2 steps.
        assert_eq!(chunks[0].steps[6].grid_index, chunks[1].steps[0].grid_index);
        // Every step is covered.
        let covered: std::collections::BTreeSet<usize> =
            chunks.iter().flat_map(|c| c.steps.iter().map(|s| s.grid_index[0])).collect();
        assert_eq!(covered.len(), 20);
        // Targets travel with their steps.
        assert_eq!(chunks[1].targets.as_ref().unwrap()[0].offset[0], 6.0);
        // Short sequences pass through untouched.
        assert_eq!(chunk_sequence(&seq, 32, 4).len(), 1);
    }

    fn labeled_toy_sequences(n: usize, t_len: usize, width: usize, seed: u64) -> Vec<FeatureSequence> {
        (0..n)
            .map(|i| {
                let mut s = toy_sequence(t_len, width, seed + i as u64);
                s.targets = Some(
                    (0..t_len)
                        .map(|t| StepTarget {
                            label: (i + t) % 26,
                            offset: [1.0, 2.0, 3.0],
                        })
                        .collect(),
                );
                s
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_at_init() {
        let arch = toy_arch(4);
        let seqs = labeled_toy_sequences(3, 4, 4, 70);
        let cfg = RnnTrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 0.0,
            weight_decay: 0.0,
            seed: 5,
            ..RnnTrainConfig::default()
        };
        let (params, _) = train_birnn(&seqs, &arch, &cfg).unwrap();
        let init = build_birnn(&arch, cfg.seed).unwrap();
        assert_eq!(params, init);
    }

    #[test]
    fn loss_decreases_on_a_fixed_toy_set() {
        let arch = toy_arch(4);
        let seqs = labeled_toy_sequences(6, 5, 4, 80);
        let cfg = RnnTrainConfig {
            epochs: 5,
            batch_size: 3,
            learning_rate: 0.05,
            weight_decay: 0.0,
            momentum: 0.9,
            lambda: 0.1,
            seed: 6,
            ..RnnTrainConfig::default()
        };
        let (_, curve) = train_birnn(&seqs, &arch, &cfg).unwrap();
        assert_eq!(curve.len(), 5);
        assert!(
            curve[4].total < curve[0].total,
            "loss did not decrease: {} -> {}",
            curve[0].total,
            curve[4].total
        );
    }

    #[test]
    fn identical_sequences_have_identical_losses() {
        let arch = toy_arch(4);
        let seqs = labeled_toy_sequences(1, 4, 4, 90);
        let params = build_birnn(&arch, 13).unwrap();
        let (id_a, loc_a) = evaluate_sequence_loss(&params, &seqs[0], 0.1).unwrap();
        let dup = seqs[0].clone();
        let (id_b, loc_b) = evaluate_sequence_loss(&params, &dup, 0.1).unwrap();
        assert_eq!(id_a.to_bits(), id_b.to_bits());
        assert_eq!(loc_a.to_bits(), loc_b.to_bits());
    }

    #[test]
    fn training_rejects_missing_targets() {
        let arch = toy_arch(4);
        let seqs = vec![toy_sequence(3, 4, 95)];
        assert!(train_birnn(&seqs, &arch, &RnnTrainConfig::default()).is_err());
    }
}
