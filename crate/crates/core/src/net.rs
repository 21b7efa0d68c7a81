//! The multi-task 3D CNN, its fully convolutional form, dense scanning of
//! whole volumes, and the score-map coordinate mapping.
//!
//! The CNN takes a fixed-size sample and predicts class logits (26 vertebra
//! types plus background), a centroid offset within the sample, and exposes
//! the penultimate feature vector. Converting the fully connected layers to
//! convolutions yields an FCN whose grid cells correspond to sliding windows
//! spaced 16 voxels apart (four 2x pools).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpineError};
use crate::losses::{BACKGROUND, NUM_CLASSES};
use crate::ops::{
    argmax, conv3d, conv3d_grad_impl, dense, dense_grad, maxpool3d_with_argmax,
    pool_relu_grad_from_argmax, relu_in_place, relu_grad, softmax, Padding,
};
use crate::tensor::Tensor;

/// Effective sliding-window stride: four pooling layers of stride 2.
pub const GRID_STRIDE: usize = 16;
/// Number of conv+pool blocks; fixed so the grid stride stays 16.
pub const NUM_BLOCKS: usize = 4;
/// Centroid offsets are 3-dimensional.
pub const LOC_DIMS: usize = 3;

/// Architecture of the multi-task 3D CNN.
///
/// Four conv blocks (same padding, stride 1, ReLU, then 2x2x2/2 max pool)
/// followed by a fully connected feature layer and two prediction heads of
/// widths 27 and 3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnArch {
    /// Input sample dims [D, H, W]; each a multiple of 16.
    pub sample_dims: [usize; 3],
    /// Output channels of the four conv blocks.
    pub channels: [usize; NUM_BLOCKS],
    /// Conv kernel extents (odd so same padding is symmetric-ish).
    pub kernel: [usize; 3],
    /// Width of the fully connected feature layer.
    pub fc_width: usize,
}

impl CnnArch {
    /// The reference configuration: 32x112x96 samples, channels
    /// 32/64/128/256, 3x3x3 kernels, 1024-wide feature layer.
    pub fn reference() -> CnnArch {
        CnnArch {
            sample_dims: [32, 112, 96],
            channels: [32, 64, 128, 256],
            kernel: [3, 3, 3],
            fc_width: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &d) in self.sample_dims.iter().enumerate() {
            if d == 0 || d % GRID_STRIDE != 0 {
                return Err(SpineError::BadConfig(format!(
                    "sample dim {i} must be a positive multiple of {GRID_STRIDE}, got {d}"
                )));
            }
        }
        for &k in &self.kernel {
            if k % 2 == 0 || k == 0 {
                return Err(SpineError::BadConfig(format!(
                    "conv kernel extents must be odd, got {:?}",
                    self.kernel
                )));
            }
        }
        if self.channels.iter().any(|&c| c == 0) || self.fc_width == 0 {
            return Err(SpineError::BadConfig("channel and feature widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial dims after the four pools.
    pub fn pooled_dims(&self) -> [usize; 3] {
        [
            self.sample_dims[0] / GRID_STRIDE,
            self.sample_dims[1] / GRID_STRIDE,
            self.sample_dims[2] / GRID_STRIDE,
        ]
    }

    /// Flattened width of the last pooled feature map.
    pub fn flat_features(&self) -> usize {
        let [pd, ph, pw] = self.pooled_dims();
        self.channels[NUM_BLOCKS - 1] * pd * ph * pw
    }
}

/// One weight/bias pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// The complete ordered parameter set of the CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub arch: CnnArch,
    pub convs: Vec<LayerParams>,
    pub fc5: LayerParams,
    pub head_id: LayerParams,
    pub head_loc: LayerParams,
}

impl CnnParams {
    /// Parameter tensors in declared layer order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(&c.weights);
            v.push(&c.bias);
        }
        for l in [&self.fc5, &self.head_id, &self.head_loc] {
            v.push(&l.weights);
            v.push(&l.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weights);
            v.push(&mut c.bias);
        }
        for l in [&mut self.fc5, &mut self.head_id, &mut self.head_loc] {
            v.push(&mut l.weights);
            v.push(&mut l.bias);
        }
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Builds CNN parameters with scaled-uniform fan-in initialization and zero
/// biases. Deterministic for a given seed.
pub fn build_cnn(arch: &CnnArch, seed: u64) -> Result<CnnParams> {
    arch.validate()?;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let [kd, kh, kw] = arch.kernel;
    let mut convs = Vec::with_capacity(NUM_BLOCKS);
    let mut c_in = 1usize;
    for &c_out in &arch.channels {
        let fan_in = c_in * kd * kh * kw;
        convs.push(LayerParams {
            weights: uniform_fan_in(&[c_out, c_in, kd, kh, kw], fan_in, &mut rng),
            bias: Tensor::zeros(&[c_out]),
        });
        c_in = c_out;
    }
    let flat = arch.flat_features();
    let fc5 = LayerParams {
        weights: uniform_fan_in(&[arch.fc_width, flat], flat, &mut rng),
        bias: Tensor::zeros(&[arch.fc_width]),
    };
    let head_id = LayerParams {
        weights: uniform_fan_in(&[NUM_CLASSES, arch.fc_width], arch.fc_width, &mut rng),
        bias: Tensor::zeros(&[NUM_CLASSES]),
    };
    let head_loc = LayerParams {
        weights: uniform_fan_in(&[LOC_DIMS, arch.fc_width], arch.fc_width, &mut rng),
        bias: Tensor::zeros(&[LOC_DIMS]),
    };
    Ok(CnnParams {
        arch: arch.clone(),
        convs,
        fc5,
        head_id,
        head_loc,
    })
}

/// Outputs of one CNN evaluation: pre-softmax logits, centroid offset, and
/// the feature-layer activations.
#[derive(Debug, Clone)]
pub struct CnnOutput {
    pub logits: Vec<f64>,
    pub offset: [f64; 3],
    pub feature: Vec<f64>,
}

/// Intermediates cached during a forward pass, consumed by [`cnn_backward`].
pub struct CnnCache {
    conv_inputs: Vec<Tensor>,
    conv_acts: Vec<Tensor>,
    pool_argmaxes: Vec<Vec<u32>>,
    flat: Tensor,
    feature: Tensor,
    pub output: CnnOutput,
}

fn check_sample_shape(arch: &CnnArch, sample: &Tensor) -> Result<()> {
    let [d, h, w] = arch.sample_dims;
    if sample.shape() != [1, d, h, w] {
        return Err(SpineError::shape(
            "cnn_forward sample",
            format!("[1, {d}, {h}, {w}]"),
            format!("{:?}", sample.shape()),
        ));
    }
    Ok(())
}

fn forward_impl(params: &CnnParams, sample: &Tensor, cache: bool) -> Result<CnnCache> {
    check_sample_shape(&params.arch, sample)?;
    let mut conv_inputs = Vec::new();
    let mut conv_acts = Vec::new();
    let mut pool_argmaxes = Vec::new();
    let mut x = sample.clone();
    for conv in &params.convs {
        let mut act = conv3d(&x, &conv.weights, &conv.bias, 1, Padding::Same)?;
        relu_in_place(&mut act);
        let (pooled, am) = maxpool3d_with_argmax(&act)?;
        if cache {
            conv_inputs.push(x);
            conv_acts.push(act);
            pool_argmaxes.push(am);
        }
        x = pooled;
    }
    let flat = x.reshaped(&[x.len()])?;
    let mut feature = dense(&flat, &params.fc5.weights, &params.fc5.bias)?;
    relu_in_place(&mut feature);
    let logits = dense(&feature, &params.head_id.weights, &params.head_id.bias)?;
    let offset_t = dense(&feature, &params.head_loc.weights, &params.head_loc.bias)?;
    let offset = [offset_t.data()[0], offset_t.data()[1], offset_t.data()[2]];
    Ok(CnnCache {
        conv_inputs,
        conv_acts,
        pool_argmaxes,
        flat,
        feature: feature.clone(),
        output: CnnOutput {
            logits: logits.into_data(),
            offset,
            feature: feature.into_data(),
        },
    })
}

/// Forward pass on one canonical-size sample.
pub fn cnn_forward(params: &CnnParams, sample: &Tensor) -> Result<CnnOutput> {
    Ok(forward_impl(params, sample, false)?.output)
}

/// Forward pass keeping the intermediates needed for backpropagation.
pub fn cnn_forward_cached(params: &CnnParams, sample: &Tensor) -> Result<CnnCache> {
    forward_impl(params, sample, true)
}

/// Gradients for every CNN parameter tensor, in [`CnnParams::tensors`] order.
pub fn cnn_backward(
    params: &CnnParams,
    cache: &CnnCache,
    d_logits: &[f64],
    d_offset: &[f64; 3],
) -> Result<Vec<Tensor>> {
    let d_logits_t = Tensor::from_vec(&[NUM_CLASSES], d_logits.to_vec())?;
    let d_offset_t = Tensor::from_vec(&[LOC_DIMS], d_offset.to_vec())?;

    let g_id = dense_grad(&cache.feature, &params.head_id.weights, &d_logits_t)?;
    let g_loc = dense_grad(&cache.feature, &params.head_loc.weights, &d_offset_t)?;
    let mut d_feature = g_id.wrt_input;
    d_feature.axpy(1.0, &g_loc.wrt_input)?;

    let d_fc5_pre = relu_grad(&cache.feature, &d_feature);
    let g_fc5 = dense_grad(&cache.flat, &params.fc5.weights, &d_fc5_pre)?;

    let mut conv_w_grads = vec![Tensor::zeros(&[1]); NUM_BLOCKS];
    let mut conv_b_grads = vec![Tensor::zeros(&[1]); NUM_BLOCKS];
    let mut upstream = {
        let last_act = &cache.conv_acts[NUM_BLOCKS - 1];
        let pooled_shape: Vec<usize> = std::iter::once(last_act.shape()[0])
            .chain(last_act.shape()[1..].iter().map(|d| d / 2))
            .collect();
        g_fc5.wrt_input.reshaped(&pooled_shape)?
    };
    for i in (0..NUM_BLOCKS).rev() {
        let d_pre = pool_relu_grad_from_argmax(
            &cache.conv_acts[i],
            &cache.pool_argmaxes[i],
            &upstream,
        );
        let conv = &params.convs[i];
        let g = conv3d_grad_impl(
            &cache.conv_inputs[i],
            &conv.weights,
            &conv.bias,
            1,
            Padding::Same,
            &d_pre,
            i > 0,
        )?;
        conv_w_grads[i] = g.wrt_weights;
        conv_b_grads[i] = g.wrt_bias;
        upstream = g.wrt_input;
    }

    let mut grads = Vec::with_capacity(NUM_BLOCKS * 2 + 6);
    for i in 0..NUM_BLOCKS {
        grads.push(std::mem::replace(&mut conv_w_grads[i], Tensor::zeros(&[1])));
        grads.push(std::mem::replace(&mut conv_b_grads[i], Tensor::zeros(&[1])));
    }
    grads.push(g_fc5.wrt_weights);
    grads.push(g_fc5.wrt_bias);
    grads.push(g_id.wrt_weights);
    grads.push(g_id.wrt_bias);
    grads.push(g_loc.wrt_weights);
    grads.push(g_loc.wrt_bias);
    Ok(grads)
}

/// The CNN with its fully connected layers re-laid-out as convolutions: the
/// feature layer becomes a conv with kernel equal to the pooled dims, the
/// heads become 1x1x1 convs. No weight value changes.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel {
    pub arch: CnnArch,
    pub convs: Vec<LayerParams>,
    pub fc5_conv: LayerParams,
    pub head_id_conv: LayerParams,
    pub head_loc_conv: LayerParams,
}

impl FcnModel {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(&c.weights);
            v.push(&c.bias);
        }
        for l in [&self.fc5_conv, &self.head_id_conv, &self.head_loc_conv] {
            v.push(&l.weights);
            v.push(&l.bias);
        }
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Re-lays-out the fully connected layers as convolution kernels, preserving
/// the exact weight-to-input-position correspondence.
pub fn convert_to_fcn(params: &CnnParams) -> Result<FcnModel> {
    params.arch.validate()?;
    let [pd, ph, pw] = params.arch.pooled_dims();
    let c4 = params.arch.channels[NUM_BLOCKS - 1];
    let fc = params.arch.fc_width;
    let expect = [fc, c4 * pd * ph * pw];
    if params.fc5.weights.shape() != expect {
        return Err(SpineError::shape(
            "convert_to_fcn fc5",
            format!("{expect:?}"),
            format!("{:?}", params.fc5.weights.shape()),
        ));
    }
    // Row-major [fc, flat] with flat indexed (ci, z, y, x) is exactly the
    // conv kernel layout [fc, ci, z, y, x]; pure reshape.
    let fc5_conv = LayerParams {
        weights: params.fc5.weights.reshaped(&[fc, c4, pd, ph, pw])?,
        bias: params.fc5.bias.clone(),
    };
    let head_id_conv = LayerParams {
        weights: params.head_id.weights.reshaped(&[NUM_CLASSES, fc, 1, 1, 1])?,
        bias: params.head_id.bias.clone(),
    };
    let head_loc_conv = LayerParams {
        weights: params.head_loc.weights.reshaped(&[LOC_DIMS, fc, 1, 1, 1])?,
        bias: params.head_loc.bias.clone(),
    };
    Ok(FcnModel {
        arch: params.arch.clone(),
        convs: params.convs.clone(),
        fc5_conv,
        head_id_conv,
        head_loc_conv,
    })
}

/// Dense outputs of one FCN scan: one classification vector, one offset
/// vector and one feature vector per grid cell.
#[derive(Debug, Clone)]
pub struct ScoreMaps {
    /// [27, gd, gh, gw]
    pub id_scores: Tensor,
    /// [3, gd, gh, gw]
    pub loc_scores: Tensor,
    /// [fc_width, gd, gh, gw]
    pub features: Tensor,
}

impl ScoreMaps {
    pub fn grid_dims(&self) -> [usize; 3] {
        let s = self.id_scores.shape();
        [s[1], s[2], s[3]]
    }

    pub fn num_cells(&self) -> usize {
        let [d, h, w] = self.grid_dims();
        d * h * w
    }

    fn gather(t: &Tensor, cell: usize) -> Vec<f64> {
        let vol = t.len() / t.shape()[0];
        (0..t.shape()[0]).map(|c| t.data()[c * vol + cell]).collect()
    }

    /// The 27 classification scores of one grid cell.
    pub fn id_at(&self, cell: usize) -> Vec<f64> {
        Self::gather(&self.id_scores, cell)
    }

    /// The 3 offset predictions of one grid cell.
    pub fn loc_at(&self, cell: usize) -> [f64; 3] {
        let v = Self::gather(&self.loc_scores, cell);
        [v[0], v[1], v[2]]
    }

    /// The feature vector of one grid cell.
    pub fn feature_at(&self, cell: usize) -> Vec<f64> {
        Self::gather(&self.features, cell)
    }

    /// Grid index of a linear cell id, row-major (d, h, w).
    pub fn grid_index(&self, cell: usize) -> [usize; 3] {
        let [_, gh, gw] = self.grid_dims();
        [cell / (gh * gw), (cell / gw) % gh, cell % gw]
    }
}

/// Grid dims of an FCN scan over a volume: (dim - sample)/16 + 1 per axis.
pub fn fcn_grid_dims(arch: &CnnArch, volume_dims: [usize; 3]) -> Result<[usize; 3]> {
    let mut grid = [0usize; 3];
    for i in 0..3 {
        let (v, s) = (volume_dims[i], arch.sample_dims[i]);
        if v < s || v % GRID_STRIDE != 0 {
            return Err(SpineError::shape(
                "fcn_forward volume",
                format!(
                    "dims >= {:?} and multiples of {GRID_STRIDE}",
                    arch.sample_dims
                ),
                format!("{volume_dims:?}"),
            ));
        }
        grid[i] = (v - s) / GRID_STRIDE + 1;
    }
    Ok(grid)
}

/// Scans a whole volume: every grid cell holds the outputs of the network on
/// the 32x112x96-style window whose origin is 16 times the grid index. Each
/// window is evaluated with its own zero padding, so a cell equals the CNN
/// applied to the explicitly cropped window.
pub fn fcn_forward(fcn: &FcnModel, volume: &Tensor) -> Result<ScoreMaps> {
    let vs = volume.shape();
    if vs.len() != 4 || vs[0] != 1 {
        return Err(SpineError::shape("fcn_forward volume", "[1, D, H, W]", format!("{vs:?}")));
    }
    let vol_dims = [vs[1], vs[2], vs[3]];
    let grid = fcn_grid_dims(&fcn.arch, vol_dims)?;
    let [gd, gh, gw] = grid;
    let cells = gd * gh * gw;
    let fc = fcn.arch.fc_width;

    struct CellOut {
        id: Vec<f64>,
        loc: Vec<f64>,
        feat: Vec<f64>,
    }

    let outs: Vec<Result<CellOut>> = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let g = [cell / (gh * gw), (cell / gw) % gh, cell % gw];
            let origin = [g[0] * GRID_STRIDE, g[1] * GRID_STRIDE, g[2] * GRID_STRIDE];
            let window = volume.crop3d(origin, fcn.arch.sample_dims)?;
            let mut x = window;
            for conv in &fcn.convs {
                let mut act = conv3d(&x, &conv.weights, &conv.bias, 1, Padding::Same)?;
                relu_in_place(&mut act);
                x = crate::ops::maxpool3d(&act)?;
            }
            let mut feat = conv3d(&x, &fcn.fc5_conv.weights, &fcn.fc5_conv.bias, 1, Padding::Valid)?;
            relu_in_place(&mut feat);
            let id = conv3d(&feat, &fcn.head_id_conv.weights, &fcn.head_id_conv.bias, 1, Padding::Valid)?;
            let loc = conv3d(&feat, &fcn.head_loc_conv.weights, &fcn.head_loc_conv.bias, 1, Padding::Valid)?;
            Ok(CellOut {
                id: id.into_data(),
                loc: loc.into_data(),
                feat: feat.into_data(),
            })
        })
        .collect();

    let mut id_scores = Tensor::zeros(&[NUM_CLASSES, gd, gh, gw]);
    let mut loc_scores = Tensor::zeros(&[LOC_DIMS, gd, gh, gw]);
    let mut features = Tensor::zeros(&[fc, gd, gh, gw]);
    for (cell, out) in outs.into_iter().enumerate() {
        let out = out?;
        for (c, v) in out.id.iter().enumerate() {
            id_scores.data_mut()[c * cells + cell] = *v;
        }
        for (c, v) in out.loc.iter().enumerate() {
            loc_scores.data_mut()[c * cells + cell] = *v;
        }
        for (c, v) in out.feat.iter().enumerate() {
            features.data_mut()[c * cells + cell] = *v;
        }
    }
    Ok(ScoreMaps {
        id_scores,
        loc_scores,
        features,
    })
}

/// Maps a grid index plus an in-sample offset to input-image voxel
/// coordinates: (16x + a, 16y + b, 16z + c).
pub fn map_to_image(grid_index: [usize; 3], offset: [f64; 3]) -> [f64; 3] {
    [
        (GRID_STRIDE * grid_index[0]) as f64 + offset[0],
        (GRID_STRIDE * grid_index[1]) as f64 + offset[1],
        (GRID_STRIDE * grid_index[2]) as f64 + offset[2],
    ]
}

/// One densely predicted centroid: a non-background grid cell with its label,
/// mapped voxel coordinates and softmax confidence.
#[derive(Debug, Clone)]
pub struct DensePrediction {
    pub label: usize,
    pub centroid_voxel: [f64; 3],
    pub confidence: f64,
    pub grid_index: [usize; 3],
}

/// Emits one prediction per grid cell whose argmax class is not background.
pub fn dense_predict(maps: &ScoreMaps) -> Vec<DensePrediction> {
    let mut out = Vec::new();
    for cell in 0..maps.num_cells() {
        let probs = softmax(&maps.id_at(cell));
        let label = argmax(&probs);
        if label == BACKGROUND {
            continue;
        }
        let g = maps.grid_index(cell);
        out.push(DensePrediction {
            label,
            centroid_voxel: map_to_image(g, maps.loc_at(cell)),
            confidence: probs[label],
            grid_index: g,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::seeded_tensor;
    use proptest::prelude::*;

    fn tiny_arch() -> CnnArch {
        CnnArch {
            sample_dims: [32, 112, 96],
            channels: [2, 3, 4, 5],
            kernel: [3, 3, 3],
            fc_width: 8,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let arch = tiny_arch();
        let a = build_cnn(&arch, 77).unwrap();
        let b = build_cnn(&arch, 77).unwrap();
        assert_eq!(a, b);
        let c = build_cnn(&arch, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn canonical_pooled_dims_are_2x7x6() {
        assert_eq!(CnnArch::reference().pooled_dims(), [2, 7, 6]);
        assert_eq!(tiny_arch().pooled_dims(), [2, 7, 6]);
    }

    #[test]
    fn fc5_weight_count_follows_shape_arithmetic() {
        let arch = CnnArch::reference();
        let params = build_cnn(&arch, 1).unwrap();
        let c4 = arch.channels[3];
        assert_eq!(params.fc5.weights.len(), 1024 * (c4 * 2 * 7 * 6));
    }

    #[test]
    fn zero_weights_give_equal_logits_and_zero_offset() {
        let arch = tiny_arch();
        let mut params = build_cnn(&arch, 5).unwrap();
        for t in params.tensors_mut() {
            t.fill(0.0);
        }
        let sample = seeded_tensor(&[1, 32, 112, 96], 6);
        let out = cnn_forward(&params, &sample).unwrap();
        assert!(out.logits.iter().all(|&v| v == out.logits[0]));
        assert_eq!(out.offset, [0.0; 3]);
    }

    #[test]
    fn forward_output_shapes() {
        let arch = tiny_arch();
        let params = build_cnn(&arch, 9).unwrap();
        let sample = seeded_tensor(&[1, 32, 112, 96], 10);
        let out = cnn_forward(&params, &sample).unwrap();
        assert_eq!(out.logits.len(), 27);
        assert_eq!(out.offset.len(), 3);
        assert_eq!(out.feature.len(), arch.fc_width);
        assert!(cnn_forward(&params, &seeded_tensor(&[1, 16, 112, 96], 1)).is_err());
    }

    #[test]
    fn conversion_preserves_weights_and_kernel_dims() {
        let params = build_cnn(&tiny_arch(), 20).unwrap();
        let fcn = convert_to_fcn(&params).unwrap();
        assert_eq!(fcn.fc5_conv.weights.shape(), &[8, 5, 2, 7, 6]);
        assert_eq!(fcn.fc5_conv.weights.data(), params.fc5.weights.data());
        assert_eq!(fcn.head_id_conv.weights.shape(), &[27, 8, 1, 1, 1]);
        assert_eq!(fcn.num_parameters(), params.num_parameters());
    }

    #[test]
    fn fcn_equals_cnn_on_canonical_input() {
        let params = build_cnn(&tiny_arch(), 30).unwrap();
        let fcn = convert_to_fcn(&params).unwrap();
        let sample = seeded_tensor(&[1, 32, 112, 96], 31);
        let cnn_out = cnn_forward(&params, &sample).unwrap();
        let maps = fcn_forward(&fcn, &sample).unwrap();
        assert_eq!(maps.grid_dims(), [1, 1, 1]);
        // Same arithmetic order end to end: bitwise equality.
        assert_eq!(maps.id_at(0), cnn_out.logits);
        assert_eq!(maps.loc_at(0), cnn_out.offset);
        assert_eq!(maps.feature_at(0), cnn_out.feature);
    }

    #[test]
    fn fcn_grid_dims_examples() {
        let arch = tiny_arch();
        assert_eq!(fcn_grid_dims(&arch, [32, 112, 96]).unwrap(), [1, 1, 1]);
        assert_eq!(fcn_grid_dims(&arch, [48, 128, 112]).unwrap(), [2, 2, 2]);
        assert!(fcn_grid_dims(&arch, [16, 112, 96]).is_err());
        assert!(fcn_grid_dims(&arch, [40, 112, 96]).is_err());
    }

    #[test]
    fn every_grid_cell_matches_explicit_crop() {
        let params = build_cnn(&tiny_arch(), 40).unwrap();
        let fcn = convert_to_fcn(&params).unwrap();
        let volume = seeded_tensor(&[1, 48, 128, 112], 41);
        let maps = fcn_forward(&fcn, &volume).unwrap();
        assert_eq!(maps.grid_dims(), [2, 2, 2]);
        for cell in 0..maps.num_cells() {
            let g = maps.grid_index(cell);
            let crop = volume
                .crop3d([g[0] * 16, g[1] * 16, g[2] * 16], [32, 112, 96])
                .unwrap();
            let out = cnn_forward(&params, &crop).unwrap();
            for (a, b) in maps.id_at(cell).iter().zip(&out.logits) {
                assert!((a - b).abs() <= 1e-10);
            }
            for (a, b) in maps.loc_at(cell).iter().zip(&out.offset) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn map_to_image_examples() {
        assert_eq!(map_to_image([0, 0, 0], [0.0; 3]), [0.0, 0.0, 0.0]);
        assert_eq!(map_to_image([2, 3, 1], [4.0, 10.0, 7.0]), [36.0, 58.0, 23.0]);
        assert_eq!(map_to_image([1, 1, 1], [0.0; 3]), [16.0, 16.0, 16.0]);
    }

    proptest! {
        #[test]
        fn map_to_image_is_injective_for_offsets_under_16(
            g1 in proptest::array::uniform3(0usize..6),
            g2 in proptest::array::uniform3(0usize..6),
            o1 in proptest::array::uniform3(0.0f64..16.0),
            o2 in proptest::array::uniform3(0.0f64..16.0),
        ) {
            let p1 = map_to_image(g1, o1);
            let p2 = map_to_image(g2, o2);
            if (g1, o1) != (g2, o2) {
                prop_assert_ne!(p1, p2);
            }
        }
    }

    fn maps_from_logits(grid: [usize; 3], logits_per_cell: &[Vec<f64>]) -> ScoreMaps {
        let cells = grid[0] * grid[1] * grid[2];
        assert_eq!(cells, logits_per_cell.len());
        let mut id = Tensor::zeros(&[NUM_CLASSES, grid[0], grid[1], grid[2]]);
        for (cell, l) in logits_per_cell.iter().enumerate() {
            for c in 0..NUM_CLASSES {
                id.data_mut()[c * cells + cell] = l[c];
            }
        }
        ScoreMaps {
            id_scores: id,
            loc_scores: Tensor::zeros(&[LOC_DIMS, grid[0], grid[1], grid[2]]),
            features: Tensor::zeros(&[4, grid[0], grid[1], grid[2]]),
        }
    }

    #[test]
    fn dense_predict_skips_background_cells() {
        let mut bg = vec![0.0; NUM_CLASSES];
        bg[BACKGROUND] = 5.0;
        let maps = maps_from_logits([1, 1, 2], &[bg.clone(), bg]);
        assert!(dense_predict(&maps).is_empty());
    }

    #[test]
    fn dense_predict_emits_expected_cells() {
        let mut bg = vec![0.0; NUM_CLASSES];
        bg[BACKGROUND] = 5.0;
        let mut pos = vec![0.0; NUM_CLASSES];
        pos[7] = 4.0;
        let mut maps = maps_from_logits([2, 1, 1], &[bg, pos]);
        // offset (1, 2, 3) at the second cell (grid index [1,0,0])
        let cells = 2;
        maps.loc_scores.data_mut()[cells + 1] = 2.0;
        maps.loc_scores.data_mut()[1] = 1.0;
        maps.loc_scores.data_mut()[2 * cells + 1] = 3.0;
        let preds = dense_predict(&maps);
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].label, 7);
        assert_eq!(preds[0].grid_index, [1, 0, 0]);
        assert_eq!(preds[0].centroid_voxel, [17.0, 2.0, 3.0]);
        assert!(preds[0].confidence > 0.5);
    }
}
