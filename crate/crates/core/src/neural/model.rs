//! The grasp network: a 3-level strided encoder, a mirrored decoder with
//! trilinear upsampling, and a fused 6-channel prediction head producing
//! quality logit, raw quaternion, and normalized width per voxel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::Conv3d;
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::upsample::{upsample2x, upsample2x_backward};
use crate::error::{Error, Result};
use crate::geometry::Quaternion;

pub const HEAD_CHANNELS: usize = 6;

#[derive(Debug, Clone)]
pub struct VgnModel<S> {
    pub enc1: Conv3d<S>,
    pub enc2: Conv3d<S>,
    pub enc3: Conv3d<S>,
    pub dec1: Conv3d<S>,
    pub dec2: Conv3d<S>,
    pub dec3: Conv3d<S>,
    pub heads: Conv3d<S>,
}

/// Activations kept from a trunk pass so the backward pass can replay it.
pub struct TrunkCache<S> {
    pub input: Tensor<S>,
    e1: Tensor<S>,
    e2: Tensor<S>,
    e3: Tensor<S>,
    d1: Tensor<S>,
    u1: Tensor<S>,
    d2: Tensor<S>,
    u2: Tensor<S>,
    d3: Tensor<S>,
    /// Decoder output at input resolution, 16 channels.
    pub features: Tensor<S>,
}

/// Dense per-voxel predictions over an N³ grid, linearized x-fastest to
/// match `TsdfVolume` indexing.
#[derive(Debug, Clone)]
pub struct GraspMap {
    pub n: usize,
    pub quality: Vec<f64>,
    pub rotation: Vec<Quaternion>,
    pub width: Vec<f64>,
}

impl GraspMap {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n + j) * self.n + i
    }
}

fn relu_inplace<S: Scalar>(t: &mut Tensor<S>) {
    for v in &mut t.data {
        *v = v.maxs(S::ZERO);
    }
}

/// Zero gradient entries where the stored post-activation output is zero.
fn relu_backward_inplace<S: Scalar>(grad: &mut Tensor<S>, out: &Tensor<S>) {
    for (g, o) in grad.data.iter_mut().zip(&out.data) {
        if *o <= S::ZERO {
            *g = S::ZERO;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<S: Scalar> VgnModel<S> {
    pub fn new() -> VgnModel<S> {
        VgnModel {
            enc1: Conv3d::new(1, 16, 5, 2, 2),
            enc2: Conv3d::new(16, 32, 3, 2, 1),
            enc3: Conv3d::new(32, 64, 3, 2, 1),
            dec1: Conv3d::new(64, 64, 3, 1, 1),
            dec2: Conv3d::new(64, 32, 3, 1, 1),
            dec3: Conv3d::new(32, 16, 3, 1, 1),
            heads: Conv3d::new(16, HEAD_CHANNELS, 5, 1, 2),
        }
    }

    pub fn init(seed: u64) -> VgnModel<S> {
        let mut model = VgnModel::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, layer) in model.layers_mut() {
            layer.init_he(&mut rng);
        }
        model
    }

    /// Stable layer order used by the optimizer and checkpoint format.
    pub fn layers(&self) -> [(&'static str, &Conv3d<S>); 7] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("enc3", &self.enc3),
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
            ("dec3", &self.dec3),
            ("heads", &self.heads),
        ]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, &mut Conv3d<S>); 7] {
        [
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("enc3", &mut self.enc3),
            ("dec1", &mut self.dec1),
            ("dec2", &mut self.dec2),
            ("dec3", &mut self.dec3),
            ("heads", &mut self.heads),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, l)| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, layer) in self.layers_mut() {
            layer.zero_grad();
        }
    }

    pub fn check_grid(n: usize) -> Result<()> {
        if n == 0 || n % 8 != 0 {
            return Err(Error::invalid(format!(
                "grid size {n} not divisible by 8 (three stride-2 stages)"
            )));
        }
        Ok(())
    }

    pub fn trunk_forward(&self, input: Tensor<S>) -> Result<TrunkCache<S>> {
        if input.shape.len() != 4 || input.shape[0] != 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![1, 0, 0, 0],
                got: input.shape.clone(),
            });
        }
        Self::check_grid(input.shape[1])?;
        let mut e1 = self.enc1.forward(&input)?;
        relu_inplace(&mut e1);
        let mut e2 = self.enc2.forward(&e1)?;
        relu_inplace(&mut e2);
        let mut e3 = self.enc3.forward(&e2)?;
        relu_inplace(&mut e3);
        let mut d1 = self.dec1.forward(&e3)?;
        relu_inplace(&mut d1);
        let u1 = upsample2x(&d1)?;
        let mut d2 = self.dec2.forward(&u1)?;
        relu_inplace(&mut d2);
        let u2 = upsample2x(&d2)?;
        let mut d3 = self.dec3.forward(&u2)?;
        relu_inplace(&mut d3);
        let features = upsample2x(&d3)?;
        Ok(TrunkCache {
            input,
            e1,
            e2,
            e3,
            d1,
            u1,
            d2,
            u2,
            d3,
            features,
        })
    }

    /// Backpropagate a gradient on the trunk features, accumulating into
    /// every layer's gradient buffers. The input gradient is discarded.
    pub fn trunk_backward(&mut self, cache: &TrunkCache<S>, grad_features: &Tensor<S>) -> Result<()> {
        let mut g = upsample2x_backward(grad_features, &cache.d3.shape)?;
        relu_backward_inplace(&mut g, &cache.d3);
        let g = self.dec3.backward(&cache.u2, &g)?;
        let mut g = upsample2x_backward(&g, &cache.d2.shape)?;
        relu_backward_inplace(&mut g, &cache.d2);
        let g = self.dec2.backward(&cache.u1, &g)?;
        let mut g = upsample2x_backward(&g, &cache.d1.shape)?;
        relu_backward_inplace(&mut g, &cache.d1);
        let mut g = self.dec1.backward(&cache.e3, &g)?;
        relu_backward_inplace(&mut g, &cache.e3);
        let mut g = self.enc3.backward(&cache.e2, &g)?;
        relu_backward_inplace(&mut g, &cache.e2);
        let mut g = self.enc2.backward(&cache.e1, &g)?;
        relu_backward_inplace(&mut g, &cache.e1);
        let _ = self.enc1.backward(&cache.input, &g)?;
        Ok(())
    }

    /// Dense head pass: raw 6-channel output, no activations applied.
    pub fn heads_forward(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        self.heads.forward(features)
    }

    /// Evaluate the head at a single voxel by gathering its 5³ feature
    /// patch. Matches the dense convolution output exactly.
    pub fn head_at(&self, features: &Tensor<S>, voxel: (usize, usize, usize)) -> [S; 6] {
        let (i, j, k) = voxel;
        let n = features.shape[1];
        let kk = self.heads.k;
        let pad = self.heads.pad as isize;
        let mut out = [S::ZERO; 6];
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = self.heads.bias[c];
            let w_base = c * self.heads.in_c * kk * kk * kk;
            for cin in 0..self.heads.in_c {
                for kz in 0..kk {
                    let z = k as isize + kz as isize - pad;
                    if !(0..n as isize).contains(&z) {
                        continue;
                    }
                    for ky in 0..kk {
                        let y = j as isize + ky as isize - pad;
                        if !(0..n as isize).contains(&y) {
                            continue;
                        }
                        for kx in 0..kk {
                            let x = i as isize + kx as isize - pad;
                            if !(0..n as isize).contains(&x) {
                                continue;
                            }
                            let w = self.heads.weight
                                [w_base + ((cin * kk + kz) * kk + ky) * kk + kx];
                            acc += w * features.data[features.idx4(cin, z as usize, y as usize, x as usize)];
                        }
                    }
                }
            }
            *o = acc;
        }
        out
    }

    /// Adjoint of `head_at`: accumulate head weight/bias gradients and
    /// scatter the feature gradient for one voxel.
    pub fn head_backward_at(
        &mut self,
        features: &Tensor<S>,
        voxel: (usize, usize, usize),
        grad: &[S; 6],
        grad_features: &mut Tensor<S>,
    ) {
        let (i, j, k) = voxel;
        let n = features.shape[1];
        let kk = self.heads.k;
        let pad = self.heads.pad as isize;
        for (c, gc) in grad.iter().enumerate() {
            self.heads.grad_bias[c] += *gc;
            let w_base = c * self.heads.in_c * kk * kk * kk;
            for cin in 0..self.heads.in_c {
                for kz in 0..kk {
                    let z = k as isize + kz as isize - pad;
                    if !(0..n as isize).contains(&z) {
                        continue;
                    }
                    for ky in 0..kk {
                        let y = j as isize + ky as isize - pad;
                        if !(0..n as isize).contains(&y) {
                            continue;
                        }
                        for kx in 0..kk {
                            let x = i as isize + kx as isize - pad;
                            if !(0..n as isize).contains(&x) {
                                continue;
                            }
                            let widx = w_base + ((cin * kk + kz) * kk + ky) * kk + kx;
                            let fidx =
                                features.idx4(cin, z as usize, y as usize, x as usize);
                            self.heads.grad_weight[widx] += *gc * features.data[fidx];
                            grad_features.data[fidx] += *gc * self.heads.weight[widx];
                        }
                    }
                }
            }
        }
    }

    /// Full inference: TSDF values (x-fastest, length n³) to a dense grasp
    /// map with sigmoid quality, unit quaternions, and clamped width.
    pub fn predict(&self, values: &[f64], n: usize) -> Result<GraspMap> {
        Self::check_grid(n)?;
        if values.len() != n * n * n {
            return Err(Error::ShapeMismatch {
                expected: vec![n * n * n],
                got: vec![values.len()],
            });
        }
        let input = Tensor::from_vec(
            &[1, n, n, n],
            values.iter().map(|v| S::from_f64(*v)).collect(),
        )?;
        let cache = self.trunk_forward(input)?;
        let raw = self.heads_forward(&cache.features)?;
        let voxels = n * n * n;
        let mut map = GraspMap {
            n,
            quality: vec![0.0; voxels],
            rotation: vec![Quaternion::IDENTITY; voxels],
            width: vec![0.0; voxels],
        };
        for idx in 0..voxels {
            map.quality[idx] = sigmoid(raw.data[idx].to_f64());
            let r = [
                raw.data[voxels + idx].to_f64(),
                raw.data[2 * voxels + idx].to_f64(),
                raw.data[3 * voxels + idx].to_f64(),
                raw.data[4 * voxels + idx].to_f64(),
            ];
            let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
            if norm > 1e-6 {
                map.rotation[idx] = Quaternion::new(
                    r[0] / norm,
                    r[1] / norm,
                    r[2] / norm,
                    r[3] / norm,
                );
            }
            map.width[idx] = raw.data[5 * voxels + idx].to_f64().clamp(0.0, 1.0);
        }
        Ok(map)
    }
}

impl<S: Scalar> Default for VgnModel<S> {
    fn default() -> Self {
        VgnModel::new()
    }
}

impl VgnModel<f32> {
    /// Widen every parameter for the f64 reference gradient mode.
    pub fn to_f64(&self) -> VgnModel<f64> {
        let mut wide = VgnModel::<f64>::new();
        let src = self.layers();
        for (dst, (_, s)) in wide.layers_mut().into_iter().zip(src.iter()) {
            dst.1.weight = s.weight.iter().map(|v| *v as f64).collect();
            dst.1.bias = s.bias.iter().map(|v| *v as f64).collect();
        }
        wide
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parameter_count_is_stable() {
        let model: VgnModel<f32> = VgnModel::new();
        assert_eq!(model.param_count(), 263_062);
    }

    #[test]
    fn encoder_reaches_64_by_5_cubed_and_heads_return_to_input_size() {
        let model: VgnModel<f32> = VgnModel::init(11);
        let n = 40;
        let input = Tensor::from_vec(&[1, n, n, n], vec![0.5f32; n * n * n]).unwrap();
        let e1 = model.enc1.forward(&input).unwrap();
        let e2 = model.enc2.forward(&e1).unwrap();
        let e3 = model.enc3.forward(&e2).unwrap();
        assert_eq!(e3.shape, vec![64, 5, 5, 5]);
        let cache = model.trunk_forward(input).unwrap();
        assert_eq!(cache.features.shape, vec![16, 40, 40, 40]);
        let raw = model.heads_forward(&cache.features).unwrap();
        assert_eq!(raw.shape, vec![6, 40, 40, 40]);
    }

    #[test]
    fn toy_grid_sixteen_works_and_twelve_is_rejected() {
        let model: VgnModel<f32> = VgnModel::init(3);
        let map = model.predict(&vec![0.25; 16 * 16 * 16], 16).unwrap();
        assert_eq!(map.quality.len(), 4096);
        assert!(model.predict(&vec![0.25; 12 * 12 * 12], 12).is_err());
    }

    #[test]
    fn predicted_rotations_are_unit_and_outputs_bounded() {
        let model: VgnModel<f32> = VgnModel::init(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..16 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = model.predict(&values, 16).unwrap();
        for idx in 0..map.quality.len() {
            assert!(map.quality[idx] > 0.0 && map.quality[idx] < 1.0);
            assert!((map.rotation[idx].norm() - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&map.width[idx]));
        }
    }

    #[test]
    fn sparse_head_matches_dense_convolution() {
        let model: VgnModel<f32> = VgnModel::init(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 16;
        let values: Vec<f64> = (0..n * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(
            &[1, n, n, n],
            values.iter().map(|v| *v as f32).collect(),
        )
        .unwrap();
        let cache = model.trunk_forward(input).unwrap();
        let dense = model.heads_forward(&cache.features).unwrap();
        for &(i, j, k) in &[(0, 0, 0), (1, 7, 3), (15, 15, 15), (8, 0, 14), (5, 9, 2)] {
            let sparse = model.head_at(&cache.features, (i, j, k));
            for (c, s) in sparse.iter().enumerate() {
                let d = dense.data[dense.idx4(c, k, j, i)];
                assert!(
                    (d - s).abs() <= 1e-5 * (1.0 + d.abs()),
                    "voxel ({i},{j},{k}) channel {c}: dense {d} vs sparse {s}"
                );
            }
        }
    }

    #[test]
    fn sparse_head_backward_matches_dense_gradients() {
        let mut dense_model: VgnModel<f64> = VgnModel::init(9);
        let mut sparse_model = dense_model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8;
        let feats = Tensor::from_vec(
            &[16, n, n, n],
            (0..16 * n * n * n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        // Dense path: gradient is zero everywhere except two voxels.
        let mut grad_out = Tensor::<f64>::zeros(&[6, n, n, n]);
        let probes = [((2usize, 3usize, 4usize), [0.3, -0.7, 1.1, 0.2, -0.4, 0.9]),
            ((7, 0, 5), [-1.0, 0.5, 0.25, -0.75, 0.6, -0.2])];
        for ((i, j, k), g) in &probes {
            for (c, gv) in g.iter().enumerate() {
                let idx = grad_out.idx4(c, *k, *j, *i);
                grad_out.data[idx] = *gv;
            }
        }
        let dense_gx = dense_model.heads.backward(&feats, &grad_out).unwrap();
        let mut sparse_gx = Tensor::<f64>::zeros(&[16, n, n, n]);
        for ((i, j, k), g) in &probes {
            sparse_model.head_backward_at(&feats, (*i, *j, *k), g, &mut sparse_gx);
        }
        for (a, b) in dense_gx.data.iter().zip(&sparse_gx.data) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in dense_model
            .heads
            .grad_weight
            .iter()
            .zip(&sparse_model.heads.grad_weight)
        {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in dense_model.heads.grad_bias.iter().zip(&sparse_model.heads.grad_bias) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a: VgnModel<f32> = VgnModel::init(123);
        let b: VgnModel<f32> = VgnModel::init(123);
        for ((_, la), (_, lb)) in a.layers().iter().zip(b.layers().iter()) {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.bias, lb.bias);
        }
    }
}
