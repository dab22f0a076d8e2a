//! Grasp loss: binary cross-entropy on quality plus, for positive records
//! only, a two-sided quaternion distance and a squared width error.

use crate::dataset::GraspRecord;
use crate::error::{Error, Result};
use crate::geometry::Quaternion;

/// One record resolved against the voxel grid: the head output at `voxel`
/// is compared to these targets.
#[derive(Debug, Clone)]
pub struct RecordTarget {
    pub voxel: (usize, usize, usize),
    pub quality: f64,
    /// Unit target quaternion, wxyz.
    pub rotation: [f64; 4],
    /// The same grasp with jaws swapped; either counts as correct.
    pub partner: [f64; 4],
    /// Width in units of the maximum opening, in [0, 1].
    pub width_norm: f64,
}

impl RecordTarget {
    pub fn from_record(record: &GraspRecord, n: usize, max_width_voxels: f64) -> Result<RecordTarget> {
        let mut voxel = [0usize; 3];
        for (axis, v) in record.position.iter().enumerate() {
            let f = (*v as f64).floor();
            if f < 0.0 || f >= n as f64 {
                return Err(Error::invalid(format!(
                    "record position {v} outside the {n}-cell grid"
                )));
            }
            voxel[axis] = f as usize;
        }
        let q = record.quaternion().normalized();
        let p = q.symmetry_partner();
        Ok(RecordTarget {
            voxel: (voxel[0], voxel[1], voxel[2]),
            quality: record.label as f64,
            rotation: [q.w, q.x, q.y, q.z],
            partner: [p.w, p.x, p.y, p.z],
            width_norm: record.width as f64 / max_width_voxels,
        })
    }

    pub fn from_pose(
        voxel: (usize, usize, usize),
        quality: f64,
        rotation: Quaternion,
        width_norm: f64,
    ) -> RecordTarget {
        let q = rotation.normalized();
        let p = q.symmetry_partner();
        RecordTarget {
            voxel,
            quality,
            rotation: [q.w, q.x, q.y, q.z],
            partner: [p.w, p.x, p.y, p.z],
            width_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub bce: f64,
    pub rotation: f64,
    pub width: f64,
}

impl LossTerms {
    fn add(&mut self, other: &LossTerms) {
        self.total += other.total;
        self.bce += other.bce;
        self.rotation += other.rotation;
        self.width += other.width;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.bce *= s;
        self.rotation *= s;
        self.width *= s;
    }
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// sign with sign(0) = +1 so the subgradient at a right angle is fixed.
fn sgn(x: f64) -> f64 {
    if x < 0.0 { -1.0 } else { 1.0 }
}

/// Loss and gradient for one record. `out` is the raw 6-channel head
/// output: [quality logit, quaternion wxyz, width]. Negative records
/// contribute only the classification term; their rotation and width
/// gradients are exactly zero.
pub fn record_loss(out: &[f64; 6], target: &RecordTarget) -> (LossTerms, [f64; 6]) {
    let mut grad = [0.0f64; 6];
    let z = out[0];
    let q = target.quality;
    // Stable BCE with logits: max(z,0) - z q + ln(1 + exp(-|z|)).
    let bce = z.max(0.0) - z * q + (-z.abs()).exp().ln_1p();
    let sigma = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    grad[0] = sigma - q;

    let mut terms = LossTerms {
        total: bce,
        bce,
        rotation: 0.0,
        width: 0.0,
    };
    if q == 0.0 {
        return (terms, grad);
    }

    let raw = [out[1], out[2], out[3], out[4]];
    let norm = dot4(&raw, &raw).sqrt().max(1e-12);
    let r_hat = [raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm];
    let d_main = dot4(&r_hat, &target.rotation);
    let d_partner = dot4(&r_hat, &target.partner);
    let loss_main = 1.0 - d_main.abs();
    let loss_partner = 1.0 - d_partner.abs();
    let (rot_loss, d, tgt) = if loss_main <= loss_partner {
        (loss_main, d_main, &target.rotation)
    } else {
        (loss_partner, d_partner, &target.partner)
    };
    // d(1 - |r_hat . t|)/dr_hat = -sign(d) t, then through normalization:
    // (I - r_hat r_hat^T) / ||raw||.
    let s = -sgn(d);
    let proj = dot4(&r_hat, tgt) * s;
    for i in 0..4 {
        grad[1 + i] = (s * tgt[i] - proj * r_hat[i]) / norm;
    }

    let w_err = out[5] - target.width_norm;
    let width_loss = w_err * w_err;
    grad[5] = 2.0 * w_err;

    terms.rotation = rot_loss;
    terms.width = width_loss;
    terms.total += rot_loss + width_loss;
    (terms, grad)
}

/// Mean loss over a batch; gradients are emitted per record already scaled
/// by 1/batch.
pub fn batch_loss(
    outs: &[[f64; 6]],
    targets: &[RecordTarget],
) -> Result<(LossTerms, Vec<[f64; 6]>)> {
    if outs.is_empty() || outs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "batch of {} outputs against {} targets",
            outs.len(),
            targets.len()
        )));
    }
    let inv = 1.0 / outs.len() as f64;
    let mut total = LossTerms::default();
    let mut grads = Vec::with_capacity(outs.len());
    for (out, target) in outs.iter().zip(targets) {
        let (terms, mut grad) = record_loss(out, target);
        total.add(&terms);
        for g in &mut grad {
            *g *= inv;
        }
        grads.push(grad);
    }
    total.scale(inv);
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_target(rng: &mut ChaCha8Rng) -> Quaternion {
        Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalized()
    }

    #[test]
    fn bce_at_even_odds_is_ln_two() {
        let target = RecordTarget::from_pose((0, 0, 0), 1.0, Quaternion::IDENTITY, 0.5);
        let out = [0.0, 1.0, 0.0, 0.0, 0.0, 0.5];
        let (terms, _) = record_loss(&out, &target);
        assert!((terms.bce - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(terms.rotation.abs() < 1e-12);
        assert!(terms.width.abs() < 1e-12);
    }

    #[test]
    fn rotation_loss_vanishes_on_the_swapped_jaw_partner() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let r = unit_target(&mut rng);
            let target = RecordTarget::from_pose((0, 0, 0), 1.0, r, 0.3);
            let p = target.partner;
            let out = [2.0, p[0], p[1], p[2], p[3], 0.3];
            let (terms, _) = record_loss(&out, &target);
            assert!(terms.rotation.abs() < 1e-12, "partner loss {}", terms.rotation);
        }
    }

    #[test]
    fn negative_records_mask_rotation_and_width_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = RecordTarget::from_pose((0, 0, 0), 0.0, unit_target(&mut rng), 0.0);
        let base = [0.7, 0.1, -0.4, 0.8, 0.2, 0.9];
        let (l0, g0) = record_loss(&base, &target);
        for ch in 1..6 {
            let mut perturbed = base;
            perturbed[ch] += rng.random_range(-2.0..2.0);
            let (l1, g1) = record_loss(&perturbed, &target);
            assert_eq!(l0.total, l1.total);
            assert_eq!(g1[ch], 0.0);
            assert_eq!(g0[0], g1[0]);
        }
    }

    #[test]
    fn swapping_target_and_partner_leaves_the_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = unit_target(&mut rng);
            let t1 = RecordTarget::from_pose((0, 0, 0), 1.0, r, 0.4);
            let t2 = RecordTarget {
                rotation: t1.partner,
                partner: t1.rotation,
                ..t1.clone()
            };
            let out = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.0),
            ];
            let (a, _) = record_loss(&out, &t1);
            let (b, _) = record_loss(&out, &t2);
            assert_eq!(a.total, b.total);
            assert_eq!(a.rotation, b.rotation);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 40 {
            let target = RecordTarget::from_pose(
                (0, 0, 0),
                if rng.random_bool(0.5) { 1.0 } else { 0.0 },
                unit_target(&mut rng),
                rng.random_range(0.0..1.0),
            );
            let out: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
            // Skip configurations near the min-branch tie or a zero dot
            // product, where the loss is non-differentiable.
            let raw = [out[1], out[2], out[3], out[4]];
            let norm = dot4(&raw, &raw).sqrt();
            if norm < 0.3 {
                continue;
            }
            let r_hat = [raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm];
            let dm = dot4(&r_hat, &target.rotation).abs();
            let dp = dot4(&r_hat, &target.partner).abs();
            if (dm - dp).abs() < 1e-3 || dm < 1e-3 || dp < 1e-3 {
                continue;
            }
            checked += 1;
            let (_, grad) = record_loss(&out, &target);
            for ch in 0..6 {
                let mut up = out;
                up[ch] += h;
                let mut dn = out;
                dn[ch] -= h;
                let numeric =
                    (record_loss(&up, &target).0.total - record_loss(&dn, &target).0.total)
                        / (2.0 * h);
                assert!(
                    (numeric - grad[ch]).abs() <= 1e-5 * (1.0 + numeric.abs()),
                    "channel {ch}: numeric {numeric} vs analytic {}",
                    grad[ch]
                );
            }
        }
    }

    #[test]
    fn batch_loss_is_the_mean_of_record_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t1 = RecordTarget::from_pose((0, 0, 0), 1.0, unit_target(&mut rng), 0.2);
        let t2 = RecordTarget::from_pose((1, 1, 1), 0.0, unit_target(&mut rng), 0.0);
        let o1 = [0.3, 0.5, -0.5, 0.5, 0.5, 0.1];
        let o2 = [-1.2, 0.0, 1.0, 0.0, 0.0, 0.7];
        let (l1, g1) = record_loss(&o1, &t1);
        let (l2, _) = record_loss(&o2, &t2);
        let (batch, grads) = batch_loss(&[o1, o2], &[t1, t2]).unwrap();
        assert!((batch.total - 0.5 * (l1.total + l2.total)).abs() < 1e-12);
        assert!((grads[0][0] - 0.5 * g1[0]).abs() < 1e-12);
        assert!(batch_loss(&[], &[]).is_err());
    }

    #[test]
    fn record_targets_floor_positions_and_normalize_widths() {
        use crate::dataset::GraspRecord;
        let record = GraspRecord {
            scene_id: 3,
            position: [12.9, 0.0, 39.2],
            rotation: [2.0, 0.0, 0.0, 0.0],
            width: 5.0,
            label: 1,
        };
        let t = RecordTarget::from_record(&record, 40, 10.0).unwrap();
        assert_eq!(t.voxel, (12, 0, 39));
        assert!((t.width_norm - 0.5).abs() < 1e-12);
        assert!((dot4(&t.rotation, &t.rotation) - 1.0).abs() < 1e-12);
        let bad = GraspRecord {
            position: [40.0, 0.0, 0.0],
            ..record
        };
        assert!(RecordTarget::from_record(&bad, 40, 10.0).is_err());
    }
}
