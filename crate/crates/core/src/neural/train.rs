//! Training loop: scene-grouped mini-batches, per-chunk augmentation, sparse
//! head evaluation at labeled voxels, and Adam updates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamParams, AdamState};
use super::loss::{record_loss, LossTerms, RecordTarget};
use super::model::VgnModel;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::dataset::{augment_record, augment_volume, draw_augmentation, Augmentation, Dataset};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::GripperModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            epochs: 10,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }

    fn adam_params(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub loss: f64,
    pub bce: f64,
    pub rotation: f64,
    pub width: f64,
}

/// Forward one scene's volume, evaluate the head at each target voxel, and
/// (optionally) accumulate gradients scaled by `inv_batch` into the model.
/// Returns the summed per-record loss terms.
pub fn run_chunk<S: Scalar>(
    model: &mut VgnModel<S>,
    values: &[f32],
    n: usize,
    targets: &[RecordTarget],
    inv_batch: Option<f64>,
) -> Result<LossTerms> {
    let input = Tensor::from_vec(
        &[1, n, n, n],
        values.iter().map(|v| S::from_f64(*v as f64)).collect(),
    )?;
    let cache = model.trunk_forward(input)?;
    let mut sums = LossTerms::default();
    let mut grads = Vec::with_capacity(targets.len());
    for target in targets {
        let out = model.head_at(&cache.features, target.voxel);
        let out64 = [
            out[0].to_f64(),
            out[1].to_f64(),
            out[2].to_f64(),
            out[3].to_f64(),
            out[4].to_f64(),
            out[5].to_f64(),
        ];
        let (terms, grad) = record_loss(&out64, target);
        sums.total += terms.total;
        sums.bce += terms.bce;
        sums.rotation += terms.rotation;
        sums.width += terms.width;
        grads.push(grad);
    }
    if let Some(inv) = inv_batch {
        let mut grad_features = Tensor::zeros(&cache.features.shape);
        for (target, grad) in targets.iter().zip(&grads) {
            let g: [S; 6] = std::array::from_fn(|i| S::from_f64(grad[i] * inv));
            model.head_backward_at(&cache.features, target.voxel, &g, &mut grad_features);
        }
        model.trunk_backward(&cache, &grad_features)?;
    }
    Ok(sums)
}

pub struct Trainer {
    pub model: VgnModel<f32>,
    pub adam: AdamState<f32>,
    pub epochs_done: u32,
    pub grid_n: usize,
}

/// One scene's worth of records destined for the same trunk pass.
struct Chunk {
    scene: usize,
    records: Vec<usize>,
}

impl Trainer {
    pub fn new(seed: u64, grid_n: usize) -> Result<Trainer> {
        VgnModel::<f32>::check_grid(grid_n)?;
        let model: VgnModel<f32> = VgnModel::init(seed);
        let adam = AdamState::new(model.param_count());
        Ok(Trainer {
            model,
            adam,
            epochs_done: 0,
            grid_n,
        })
    }

    pub fn from_parts(
        model: VgnModel<f32>,
        adam: AdamState<f32>,
        epochs_done: u32,
        grid_n: usize,
    ) -> Result<Trainer> {
        VgnModel::<f32>::check_grid(grid_n)?;
        if adam.m.len() != model.param_count() {
            return Err(Error::ShapeMismatch {
                expected: vec![model.param_count()],
                got: vec![adam.m.len()],
            });
        }
        Ok(Trainer {
            model,
            adam,
            epochs_done,
            grid_n,
        })
    }

    fn check_dataset(&self, dataset: &Dataset, gripper: &GripperModel) -> Result<f64> {
        if dataset.records.is_empty() {
            return Err(Error::Empty("dataset records"));
        }
        if dataset.manifest.grid_n != self.grid_n {
            return Err(Error::invalid(format!(
                "dataset grid {} does not match the model grid {}",
                dataset.manifest.grid_n, self.grid_n
            )));
        }
        let hash = crate::dataset::gripper_hash(gripper);
        if hash != dataset.manifest.gripper_hash {
            return Err(Error::invalid(
                "gripper configuration does not match the dataset manifest",
            ));
        }
        for r in &dataset.records {
            if r.scene_id as usize >= dataset.volumes.len() {
                return Err(Error::format(
                    "dataset",
                    format!("record references scene {} of {}", r.scene_id, dataset.volumes.len()),
                ));
            }
        }
        let voxel = dataset.manifest.workspace_side / self.grid_n as f64;
        Ok(gripper.max_width / voxel)
    }

    /// Group record indices by scene, in scene order.
    fn scene_groups(dataset: &Dataset) -> Vec<Chunk> {
        let mut groups: Vec<Chunk> = Vec::new();
        for scene in 0..dataset.volumes.len() {
            groups.push(Chunk {
                scene,
                records: Vec::new(),
            });
        }
        for (i, r) in dataset.records.iter().enumerate() {
            groups[r.scene_id as usize].records.push(i);
        }
        groups.retain(|g| !g.records.is_empty());
        groups
    }

    pub fn run(
        &mut self,
        dataset: &Dataset,
        gripper: &GripperModel,
        cfg: &TrainConfig,
    ) -> Result<Vec<EpochStats>> {
        cfg.validate()?;
        let max_width_voxels = self.check_dataset(dataset, gripper)?;
        let adam_params = cfg.adam_params();
        let mut stats = Vec::with_capacity(cfg.epochs as usize);
        for _ in 0..cfg.epochs {
            let epoch = self.epochs_done + 1;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch as u64);
            let mut groups = Self::scene_groups(dataset);
            groups.shuffle(&mut rng);
            for g in &mut groups {
                g.records.shuffle(&mut rng);
            }
            let sequence: Vec<(usize, usize)> = groups
                .iter()
                .flat_map(|g| g.records.iter().map(|r| (g.scene, *r)))
                .collect();
            let mut epoch_sums = LossTerms::default();
            for batch in sequence.chunks(cfg.batch_size) {
                let terms = self.train_batch(dataset, batch, max_width_voxels, cfg, &mut rng)?;
                let step = self.adam.step as usize + 1;
                if !terms.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        diagnostics: self.diagnostics(),
                    });
                }
                self.adam.step(&mut self.model, &adam_params)?;
                epoch_sums.total += terms.total;
                epoch_sums.bce += terms.bce;
                epoch_sums.rotation += terms.rotation;
                epoch_sums.width += terms.width;
            }
            let inv = 1.0 / dataset.records.len() as f64;
            stats.push(EpochStats {
                epoch,
                loss: epoch_sums.total * inv,
                bce: epoch_sums.bce * inv,
                rotation: epoch_sums.rotation * inv,
                width: epoch_sums.width * inv,
            });
            self.epochs_done = epoch;
        }
        Ok(stats)
    }

    /// Accumulate gradients for one batch and return summed record losses.
    fn train_batch(
        &mut self,
        dataset: &Dataset,
        batch: &[(usize, usize)],
        max_width_voxels: f64,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossTerms> {
        let n = self.grid_n;
        let inv_batch = 1.0 / batch.len() as f64;
        self.model.zero_grads();
        let mut sums = LossTerms::default();
        let mut start = 0usize;
        while start < batch.len() {
            let scene = batch[start].0;
            let mut end = start + 1;
            while end < batch.len() && batch[end].0 == scene {
                end += 1;
            }
            let records: Vec<_> = batch[start..end]
                .iter()
                .map(|(_, r)| dataset.records[*r].clone())
                .collect();
            let aug = if cfg.augment {
                draw_augmentation(rng, n, &records)
            } else {
                Augmentation::IDENTITY
            };
            let volume = &dataset.volumes[scene];
            let targets: Vec<RecordTarget> = records
                .iter()
                .map(|r| RecordTarget::from_record(&augment_record(r, n, aug), n, max_width_voxels))
                .collect::<Result<_>>()?;
            let terms = if aug.yaw_quarter_turns == 0 && aug.z_shift == 0 {
                run_chunk(&mut self.model, &volume.values, n, &targets, Some(inv_batch))?
            } else {
                let augmented = augment_volume(volume, aug);
                run_chunk(&mut self.model, &augmented.values, n, &targets, Some(inv_batch))?
            };
            sums.total += terms.total;
            sums.bce += terms.bce;
            sums.rotation += terms.rotation;
            sums.width += terms.width;
            start = end;
        }
        sums.total *= inv_batch;
        sums.bce *= inv_batch;
        sums.rotation *= inv_batch;
        sums.width *= inv_batch;
        Ok(sums)
    }

    /// Mean loss over the dataset without augmentation or updates.
    pub fn evaluate(&mut self, dataset: &Dataset, gripper: &GripperModel) -> Result<LossTerms> {
        let max_width_voxels = self.check_dataset(dataset, gripper)?;
        let n = self.grid_n;
        let mut sums = LossTerms::default();
        for group in Self::scene_groups(dataset) {
            let targets: Vec<RecordTarget> = group
                .records
                .iter()
                .map(|r| RecordTarget::from_record(&dataset.records[*r], n, max_width_voxels))
                .collect::<Result<_>>()?;
            let terms = run_chunk(
                &mut self.model,
                &dataset.volumes[group.scene].values,
                n,
                &targets,
                None,
            )?;
            sums.total += terms.total;
            sums.bce += terms.bce;
            sums.rotation += terms.rotation;
            sums.width += terms.width;
        }
        let inv = 1.0 / dataset.records.len() as f64;
        sums.total *= inv;
        sums.bce *= inv;
        sums.rotation *= inv;
        sums.width *= inv;
        Ok(sums)
    }

    /// Fraction of records whose predicted quality class matches the label.
    pub fn quality_accuracy(&mut self, dataset: &Dataset, gripper: &GripperModel) -> Result<f64> {
        let max_width_voxels = self.check_dataset(dataset, gripper)?;
        let n = self.grid_n;
        let mut correct = 0usize;
        for group in Self::scene_groups(dataset) {
            let input = Tensor::from_vec(
                &[1, n, n, n],
                dataset.volumes[group.scene].values.clone(),
            )?;
            let cache = self.model.trunk_forward(input)?;
            for r in &group.records {
                let record = &dataset.records[*r];
                let target = RecordTarget::from_record(record, n, max_width_voxels)?;
                let out = self.model.head_at(&cache.features, target.voxel);
                let predicted_positive = out[0] >= 0.0;
                if predicted_positive == record.is_positive() {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / dataset.records.len() as f64)
    }

    /// Parameter norms per layer, for the non-finite-loss abort message.
    fn diagnostics(&self) -> String {
        let mut parts = Vec::new();
        for (name, layer) in self.model.layers() {
            let wn: f64 = layer.weight.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
            let gn: f64 = layer
                .grad_weight
                .iter()
                .map(|v| (*v as f64) * (*v as f64))
                .sum::<f64>()
                .sqrt();
            parts.push(format!("{name} |w|={wn:.3e} |gw|={gn:.3e}"));
        }
        parts.join(", ")
    }
}

pub fn write_loss_csv(path: &Path, stats: &[EpochStats]) -> Result<()> {
    fsutil::atomic_write(path, |w| {
        use std::io::Write;
        writeln!(w, "epoch,split,loss,bce,rotation,width")?;
        for s in stats {
            writeln!(
                w,
                "{},train,{},{},{},{}",
                s.epoch, s.loss, s.bce, s.rotation, s.width
            )?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gripper_hash, DatasetManifest, GraspRecord, VolumeGrid};
    use crate::geometry::Quaternion;

    /// A synthetic two-scene dataset: a buried slab of negative TSDF with
    /// records on its boundary band, so quality correlates with position
    /// relative to local structure.
    fn toy_dataset(n: usize, records_per_scene: usize, seed: u64) -> (Dataset, GripperModel) {
        let gripper = GripperModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut volumes = Vec::new();
        let mut records = Vec::new();
        let scenes = 2usize;
        for scene in 0..scenes {
            let mut values = vec![1.0f32; n * n * n];
            let weights = vec![1.0f32; n * n * n];
            let cz = 3 + scene * 2;
            for k in 0..n {
                for j in 0..n {
                    for i in 0..n {
                        let d = k as f64 - cz as f64;
                        values[(k * n + j) * n + i] = (d / 4.0).clamp(-1.0, 1.0) as f32;
                    }
                }
            }
            volumes.push(VolumeGrid {
                n,
                l: 0.30,
                values,
                weights,
            });
            for r in 0..records_per_scene {
                let label = (r % 2) as u8;
                // Positives sit just above the slab surface, negatives high
                // in free space, so the classes are separable from local
                // TSDF context.
                let z = if label == 1 {
                    cz as f32 + rng.random_range(0.2..1.5)
                } else {
                    cz as f32 + rng.random_range(5.0..8.0)
                };
                let q = Quaternion::from_axis_angle(
                    crate::geometry::Vec3::new(0.0, 0.0, 1.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
                records.push(GraspRecord {
                    scene_id: scene as u64,
                    position: [
                        rng.random_range(4.0..(n as f32 - 4.0)),
                        rng.random_range(4.0..(n as f32 - 4.0)),
                        z,
                    ],
                    rotation: [q.w as f32, q.x as f32, q.y as f32, q.z as f32],
                    width: if label == 1 { 5.0 } else { 0.0 },
                    label,
                });
            }
        }
        let manifest = DatasetManifest {
            record_count: records.len() as u64,
            positives: records.iter().filter(|r| r.label == 1).count() as u64,
            negatives: records.iter().filter(|r| r.label == 0).count() as u64,
            grid_n: n,
            workspace_side: 0.30,
            gripper_hash: gripper_hash(&gripper),
            seed,
        };
        (
            Dataset {
                scenes: Vec::new(),
                volumes,
                records,
                manifest,
                skipped_scenes: 0,
            },
            gripper,
        )
    }

    #[test]
    fn one_epoch_reduces_the_loss_on_average() {
        let mut improvements = 0;
        for seed in 0..3u64 {
            let (dataset, gripper) = toy_dataset(16, 8, 100 + seed);
            let mut trainer = Trainer::new(seed, 16).unwrap();
            let before = trainer.evaluate(&dataset, &gripper).unwrap();
            let cfg = TrainConfig {
                epochs: 1,
                augment: false,
                seed,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            };
            trainer.run(&dataset, &gripper, &cfg).unwrap();
            let after = trainer.evaluate(&dataset, &gripper).unwrap();
            if after.total < before.total {
                improvements += 1;
            }
        }
        assert!(improvements >= 2, "loss decreased in only {improvements}/3 runs");
    }

    #[test]
    fn identical_seeds_train_identical_weights() {
        let (dataset, gripper) = toy_dataset(16, 6, 5);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut a = Trainer::new(3, 16).unwrap();
        let mut b = Trainer::new(3, 16).unwrap();
        let stats_a = a.run(&dataset, &gripper, &cfg).unwrap();
        let stats_b = b.run(&dataset, &gripper, &cfg).unwrap();
        assert_eq!(stats_a.len(), 2);
        for (x, y) in stats_a.iter().zip(&stats_b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        for ((_, la), (_, lb)) in a.model.layers().iter().zip(b.model.layers().iter()) {
            for (w1, w2) in la.weight.iter().zip(&lb.weight) {
                assert_eq!(w1.to_bits(), w2.to_bits());
            }
        }
    }

    #[test]
    fn toy_records_overfit_to_high_accuracy() {
        let (dataset, gripper) = toy_dataset(16, 10, 77);
        let mut trainer = Trainer::new(1, 16).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 2e-3,
            augment: false,
            seed: 4,
            ..TrainConfig::default()
        };
        trainer.run(&dataset, &gripper, &cfg).unwrap();
        let acc = trainer.quality_accuracy(&dataset, &gripper).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    #[test]
    fn augmented_training_still_descends() {
        let (dataset, gripper) = toy_dataset(16, 8, 11);
        let mut trainer = Trainer::new(2, 16).unwrap();
        let before = trainer.evaluate(&dataset, &gripper).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-3,
            augment: true,
            seed: 8,
            ..TrainConfig::default()
        };
        let stats = trainer.run(&dataset, &gripper, &cfg).unwrap();
        assert!(stats.iter().all(|s| s.loss.is_finite()));
        let after = trainer.evaluate(&dataset, &gripper).unwrap();
        assert!(after.total < before.total);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (dataset, gripper) = toy_dataset(16, 4, 13);
        let mut trainer = Trainer::new(1, 16).unwrap();
        // The head has no activation after it, so the poison reaches the
        // loss directly (ReLU would swallow a NaN in the trunk).
        trainer.model.heads.bias[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            augment: false,
            ..TrainConfig::default()
        };
        let err = trainer.run(&dataset, &gripper, &cfg).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, diagnostics } => {
                assert_eq!(step, 1);
                assert!(diagnostics.contains("enc1"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn resumed_training_matches_an_uninterrupted_run() {
        use super::super::checkpoint::{load_checkpoint, save_checkpoint};
        let (dataset, gripper) = toy_dataset(16, 6, 21);
        let cfg = TrainConfig {
            epochs: 1,
            seed: 30,
            ..TrainConfig::default()
        };
        let mut straight = Trainer::new(6, 16).unwrap();
        straight.run(&dataset, &gripper, &cfg).unwrap();
        straight.run(&dataset, &gripper, &cfg).unwrap();

        let mut first = Trainer::new(6, 16).unwrap();
        first.run(&dataset, &gripper, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&path, &first.model, &first.adam, first.epochs_done, 16, "t").unwrap();
        let (model, adam, manifest) = load_checkpoint(&path).unwrap();
        let mut resumed = Trainer::from_parts(model, adam, manifest.epochs_done, 16).unwrap();
        resumed.run(&dataset, &gripper, &cfg).unwrap();

        assert_eq!(resumed.epochs_done, straight.epochs_done);
        for ((_, la), (_, lb)) in resumed.model.layers().iter().zip(straight.model.layers().iter()) {
            for (w1, w2) in la.weight.iter().zip(&lb.weight) {
                assert_eq!(w1.to_bits(), w2.to_bits());
            }
        }
    }

    #[test]
    fn mismatched_gripper_is_rejected() {
        let (dataset, _) = toy_dataset(16, 4, 2);
        let mut trainer = Trainer::new(1, 16).unwrap();
        let other = GripperModel {
            max_width: 0.09,
            ..GripperModel::default()
        };
        assert!(trainer
            .run(&dataset, &other, &TrainConfig::default())
            .is_err());
    }

    #[test]
    fn loss_csv_has_the_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(
            &path,
            &[EpochStats {
                epoch: 1,
                loss: 0.5,
                bce: 0.3,
                rotation: 0.15,
                width: 0.05,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,split,loss,bce,rotation,width\n"));
        assert!(text.contains("1,train,0.5,0.3,0.15,0.05"));
    }
}
