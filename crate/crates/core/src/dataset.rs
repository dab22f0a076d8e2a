//! Dataset construction: scenes are generated, observed from random
//! viewpoints, fused into TSDF grids, and covered with oracle-labeled grasp
//! candidates. Records store grasps in continuous voxel coordinates so the
//! training pipeline never touches metric units.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{GripperModel, Quaternion, Vec3};
use crate::oracle::{evaluate_candidates, sample_candidates, OracleParams};
use crate::scene::{
    generate_packed, generate_pile, render_depth, ObjectPool, PoolKinds, SceneDescription,
    SceneGenParams, ViewpointSample,
};
use crate::volume::{CameraIntrinsics, TsdfVolume};

pub const RECORD_MAGIC: &[u8; 8] = b"VGNREC01";
pub const RECORD_SIZE: usize = 44;

/// One labeled grasp in volume coordinates: position in continuous voxel
/// units, rotation in the volume frame, width in voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspRecord {
    pub scene_id: u64,
    pub position: [f32; 3],
    pub rotation: [f32; 4],
    pub width: f32,
    pub label: u8,
}

impl GraspRecord {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    pub fn quaternion(&self) -> Quaternion {
        Quaternion::new(
            self.rotation[0] as f64,
            self.rotation[1] as f64,
            self.rotation[2] as f64,
            self.rotation[3] as f64,
        )
    }

    fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(&self.scene_id.to_le_bytes())?;
        for v in self.position {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.rotation {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.width.to_le_bytes())?;
        out.write_all(&[self.label, 0, 0, 0])?;
        Ok(())
    }

    fn read_from(buf: &[u8; RECORD_SIZE]) -> Result<GraspRecord> {
        let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let rec = GraspRecord {
            scene_id: u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            position: [f32_at(8), f32_at(12), f32_at(16)],
            rotation: [f32_at(20), f32_at(24), f32_at(28), f32_at(32)],
            width: f32_at(36),
            label: buf[40],
        };
        if rec.label > 1 {
            return Err(Error::format("grasp record", format!("label byte {}", rec.label)));
        }
        let finite = rec.position.iter().chain(&rec.rotation).all(|v| v.is_finite())
            && rec.width.is_finite();
        if !finite {
            return Err(Error::format("grasp record", "non-finite field"));
        }
        Ok(rec)
    }
}

pub fn write_records(path: &Path, records: &[GraspRecord]) -> Result<()> {
    crate::fsutil::atomic_write(path, |w| {
        w.write_all(RECORD_MAGIC)?;
        w.write_all(&(records.len() as u64).to_le_bytes())?;
        for r in records {
            r.write_to(w)?;
        }
        Ok(())
    })
}

pub fn read_records(path: &Path) -> Result<Vec<GraspRecord>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != RECORD_MAGIC {
        return Err(Error::format("records file", "bad magic"));
    }
    let mut count_buf = [0u8; 8];
    r.read_exact(&mut count_buf)?;
    let count = u64::from_le_bytes(count_buf) as usize;
    let mut records = Vec::with_capacity(count);
    let mut buf = [0u8; RECORD_SIZE];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        records.push(GraspRecord::read_from(&buf)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("records file", "trailing bytes after records"));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub record_count: u64,
    pub positives: u64,
    pub negatives: u64,
    pub grid_n: usize,
    pub workspace_side: f64,
    pub gripper_hash: String,
    pub seed: u64,
}

/// Hash of the gripper configuration, so training and detection can verify
/// they agree with the data they consume.
pub fn gripper_hash(gripper: &GripperModel) -> String {
    let json = serde_json::to_vec(gripper).expect("gripper serializes");
    let mut h = Sha256::new();
    h.update(&json);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A fused volume in network precision plus its observation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub n: usize,
    pub l: f64,
    pub values: Vec<f32>,
    pub weights: Vec<f32>,
}

impl VolumeGrid {
    pub fn from_volume(v: &TsdfVolume) -> VolumeGrid {
        VolumeGrid {
            n: v.n(),
            l: v.side(),
            values: v.values().iter().map(|x| *x as f32).collect(),
            weights: v.weights().iter().map(|x| *x as f32).collect(),
        }
    }

    /// Widen back to a full volume; exact because grids hold f32 data.
    pub fn to_volume(&self) -> Result<TsdfVolume> {
        TsdfVolume::from_grids(
            self.n,
            self.l,
            self.values.iter().map(|x| *x as f64).collect(),
            self.weights.iter().map(|x| *x as f64).collect(),
        )
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n + j) * self.n + i
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub seed: u64,
    pub scene_count: usize,
    /// Surface samples per scene; each yields `orientations` candidates.
    pub surface_points: usize,
    pub orientations: usize,
    pub pool_seed: u64,
    pub pool_size: usize,
    pub pool_kinds: PoolKinds,
    pub grid_n: usize,
    pub scene_params: SceneGenParams,
    pub oracle: OracleParams,
    pub intrinsics: CameraIntrinsics,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            seed: 1,
            scene_count: 2000,
            surface_points: 120,
            orientations: 6,
            pool_seed: 7,
            pool_size: 100,
            pool_kinds: PoolKinds::All,
            grid_n: 40,
            scene_params: SceneGenParams::default(),
            oracle: OracleParams::default(),
            intrinsics: CameraIntrinsics::default(),
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.scene_count == 0 {
            return Err(Error::invalid("scene_count must be at least 1"));
        }
        if self.surface_points == 0 {
            return Err(Error::invalid("surface_points must be at least 1"));
        }
        if self.orientations == 0 {
            return Err(Error::invalid("orientations must be at least 1"));
        }
        if self.pool_size == 0 {
            return Err(Error::invalid("pool_size must be at least 1"));
        }
        self.oracle.validate()?;
        self.intrinsics.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SceneDescription>,
    pub volumes: Vec<VolumeGrid>,
    pub records: Vec<GraspRecord>,
    pub manifest: DatasetManifest,
    /// Scenes dropped for lack of surface geometry or candidates.
    pub skipped_scenes: usize,
}

struct ScenePartial {
    scene: SceneDescription,
    volume: TsdfVolume,
    records: Vec<GraspRecord>,
}

fn build_scene(index: u64, pool: &ObjectPool, params: &DatasetParams) -> Result<Option<ScenePartial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ index);
    let scene_seed: u64 = rng.random();
    let packed_possible = !pool.upright_tall().is_empty();
    let use_pile = !packed_possible || rng.random_bool(0.5);
    let scene = if use_pile {
        generate_pile(scene_seed, pool, &params.scene_params)?
    } else {
        generate_packed(scene_seed, pool, &params.scene_params)?
    };
    if scene.objects.is_empty() {
        return Ok(None);
    }
    let meshes = scene.meshes()?;
    let mut volume = TsdfVolume::new(params.grid_n, params.scene_params.workspace_side)?;
    let n_views = rng.random_range(1..=6usize);
    for _ in 0..n_views {
        let view = ViewpointSample::sample(&mut rng, params.scene_params.workspace_side);
        let image = render_depth(&meshes, &view.camera_pose()?, &params.intrinsics)?;
        volume.integrate(&image)?;
    }
    let points = match volume.extract_surface_points(params.surface_points, &mut rng) {
        Ok(p) => p,
        Err(Error::NoSurface) => return Ok(None),
        Err(e) => return Err(e),
    };
    let candidates = sample_candidates(&points, &params.oracle.gripper, params.orientations, &mut rng);
    if candidates.is_empty() {
        return Ok(None);
    }
    let outcomes = evaluate_candidates(&meshes, &candidates, &params.oracle)?;
    let mut records = Vec::with_capacity(candidates.len());
    for ((pose, _), outcome) in candidates.iter().zip(&outcomes) {
        // Candidates backed off past the workspace edge cannot be expressed
        // in voxel coordinates; drop them.
        let Ok((t, r, w)) =
            volume.world_to_voxel(pose.translation, pose.rotation, outcome.width_at_contact)
        else {
            continue;
        };
        records.push(GraspRecord {
            scene_id: index, // reassigned after the skipped scenes are known
            position: [t.x as f32, t.y as f32, t.z as f32],
            rotation: [r.w as f32, r.x as f32, r.y as f32, r.z as f32],
            width: w as f32,
            label: outcome.label.is_success() as u8,
        });
    }
    if records.is_empty() {
        return Ok(None);
    }
    Ok(Some(ScenePartial { scene, volume, records }))
}

/// Generate, observe, and label `scene_count` scenes, then balance labels
/// by discarding random records of the majority class.
pub fn build_dataset(params: &DatasetParams) -> Result<Dataset> {
    if params.scene_count == 0 {
        return Err(Error::invalid("scene_count must be at least 1"));
    }
    params.oracle.validate()?;
    let pool = ObjectPool::generate(params.pool_seed, params.pool_size, params.pool_kinds)?;

    let partials: Vec<Option<ScenePartial>> = (0..params.scene_count as u64)
        .into_par_iter()
        .map(|i| build_scene(i, &pool, params))
        .collect::<Result<_>>()?;

    let mut scenes = Vec::new();
    let mut volumes = Vec::new();
    let mut records = Vec::new();
    let mut skipped_scenes = 0usize;
    for partial in partials.into_iter() {
        match partial {
            Some(mut p) => {
                let id = scenes.len() as u64;
                for r in &mut p.records {
                    r.scene_id = id;
                }
                scenes.push(p.scene);
                volumes.push(VolumeGrid::from_volume(&p.volume));
                records.append(&mut p.records);
            }
            None => skipped_scenes += 1,
        }
    }

    let records = balance_records(records, params.seed);
    if records.is_empty() {
        return Err(Error::Empty("balanced dataset"));
    }
    let positives = records.iter().filter(|r| r.is_positive()).count() as u64;
    let manifest = DatasetManifest {
        record_count: records.len() as u64,
        positives,
        negatives: records.len() as u64 - positives,
        grid_n: params.grid_n,
        workspace_side: params.scene_params.workspace_side,
        gripper_hash: gripper_hash(&params.oracle.gripper),
        seed: params.seed,
    };
    Ok(Dataset { scenes, volumes, records, manifest, skipped_scenes })
}

/// Discard random majority-class records until labels are balanced.
/// Order of the kept records is preserved.
fn balance_records(records: Vec<GraspRecord>, seed: u64) -> Vec<GraspRecord> {
    let positives = records.iter().filter(|r| r.is_positive()).count();
    let negatives = records.len() - positives;
    if positives == negatives {
        return records;
    }
    let (majority_label, excess) = if negatives > positives {
        (0u8, negatives - positives)
    } else {
        (1u8, positives - negatives)
    };
    let mut majority_idx: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == majority_label)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x42414c414e4345); // "BALANCE"
    majority_idx.shuffle(&mut rng);
    let mut drop: Vec<bool> = vec![false; records.len()];
    for &i in majority_idx.iter().take(excess) {
        drop[i] = true;
    }
    records
        .into_iter()
        .zip(drop)
        .filter(|(_, d)| !*d)
        .map(|(r, _)| r)
        .collect()
}

const MANIFEST_FILE: &str = "manifest.json";
const RECORDS_FILE: &str = "records.bin";

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::create_dir_all(dir.join("volumes"))?;
    fs::create_dir_all(dir.join("scenes"))?;
    crate::fsutil::atomic_write(&dir.join(MANIFEST_FILE), |w| {
        serde_json::to_writer_pretty(w, &dataset.manifest)?;
        Ok(())
    })?;
    write_records(&dir.join(RECORDS_FILE), &dataset.records)?;
    for (i, grid) in dataset.volumes.iter().enumerate() {
        grid.to_volume()?.save(&dir.join(format!("volumes/{i:05}.tsdf")))?;
    }
    for (i, scene) in dataset.scenes.iter().enumerate() {
        scene.save(&dir.join(format!("scenes/{i:05}.scene.json")))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?))?;
    let records = read_records(&dir.join(RECORDS_FILE))?;
    if records.len() as u64 != manifest.record_count {
        return Err(Error::format(
            "dataset",
            format!("manifest says {} records, file has {}", manifest.record_count, records.len()),
        ));
    }
    let scene_count = records.iter().map(|r| r.scene_id + 1).max().unwrap_or(0) as usize;
    let mut volumes = Vec::with_capacity(scene_count);
    for i in 0..scene_count {
        let v = TsdfVolume::load(&dir.join(format!("volumes/{i:05}.tsdf")))?;
        volumes.push(VolumeGrid::from_volume(&v));
    }
    let mut scenes = Vec::new();
    for i in 0..scene_count {
        let path = dir.join(format!("scenes/{i:05}.scene.json"));
        if !path.exists() {
            break;
        }
        scenes.push(SceneDescription::load(&path)?);
    }
    Ok(Dataset { scenes, volumes, records, manifest, skipped_scenes: 0 })
}

/// One training-time transform: a quarter-turn count about the vertical
/// grid axis and an integer voxel shift along z.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub yaw_quarter_turns: u8,
    pub z_shift: i32,
}

pub const MAX_Z_SHIFT: i32 = 4;

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { yaw_quarter_turns: 0, z_shift: 0 };
}

/// Draw an augmentation that keeps every record of the batch inside the
/// grid (the yaw is always safe; the shift is resampled until it fits).
pub fn draw_augmentation(
    rng: &mut impl Rng,
    grid_n: usize,
    records: &[GraspRecord],
) -> Augmentation {
    let yaw_quarter_turns = rng.random_range(0..4u8);
    let n = grid_n as f64;
    let mut z_shift;
    loop {
        z_shift = rng.random_range(-MAX_Z_SHIFT..=MAX_Z_SHIFT);
        let fits = records.iter().all(|r| {
            let z = r.position[2] as f64 + z_shift as f64;
            (0.0..n).contains(&z)
        });
        if fits {
            break;
        }
    }
    Augmentation { yaw_quarter_turns, z_shift }
}

/// Rotate grid indices a quarter turn about the array center. The center
/// column sits at (N-1)/2, so the map stays within bounds for any N.
#[inline]
fn rotate_index(i: usize, j: usize, n: usize, turns: u8) -> (usize, usize) {
    match turns & 3 {
        0 => (i, j),
        1 => (n - 1 - j, i),
        2 => (n - 1 - i, n - 1 - j),
        _ => (j, n - 1 - i),
    }
}

/// Apply the transform to a fused grid: the yaw permutes columns losslessly
/// and the shift moves data along z, leaving vacated voxels unobserved.
pub fn augment_volume(grid: &VolumeGrid, aug: Augmentation) -> VolumeGrid {
    let n = grid.n;
    let mut values = vec![0.0f32; grid.values.len()];
    let mut weights = vec![0.0f32; grid.weights.len()];
    for k in 0..n {
        let k_src = k as i64 - aug.z_shift as i64;
        if !(0..n as i64).contains(&k_src) {
            continue;
        }
        let k_src = k_src as usize;
        for j in 0..n {
            for i in 0..n {
                let (id, jd) = rotate_index(i, j, n, aug.yaw_quarter_turns);
                let dst = grid.index(id, jd, k);
                let src = grid.index(i, j, k_src);
                values[dst] = grid.values[src];
                weights[dst] = grid.weights[src];
            }
        }
    }
    VolumeGrid { n, l: grid.l, values, weights, }
}

/// Apply the transform to a record. Coordinate math runs in f64 so that
/// composing a transform with its inverse returns the original f32 bits.
pub fn augment_record(record: &GraspRecord, grid_n: usize, aug: Augmentation) -> GraspRecord {
    let c = (grid_n - 1) as f64;
    let x = record.position[0] as f64;
    let y = record.position[1] as f64;
    let z = record.position[2] as f64 + aug.z_shift as f64;
    let (xr, yr) = match aug.yaw_quarter_turns & 3 {
        0 => (x, y),
        1 => (c - y, x),
        2 => (c - x, c - y),
        _ => (y, c - x),
    };
    let yaw = Quaternion::from_axis_angle(
        Vec3::new(0.0, 0.0, 1.0),
        std::f64::consts::FRAC_PI_2 * (aug.yaw_quarter_turns & 3) as f64,
    );
    let r = yaw * record.quaternion();
    GraspRecord {
        scene_id: record.scene_id,
        position: [xr as f32, yr as f32, z as f32],
        rotation: [r.w as f32, r.x as f32, r.y as f32, r.z as f32],
        width: record.width,
        label: record.label,
    }
}

/// Convenience form drawing a fresh transform for a single record/volume
/// pair.
pub fn augment(
    record: &GraspRecord,
    volume: &VolumeGrid,
    rng: &mut impl Rng,
) -> (GraspRecord, VolumeGrid) {
    let aug = draw_augmentation(rng, volume.n, std::slice::from_ref(record));
    (
        augment_record(record, volume.n, aug),
        augment_volume(volume, aug),
    )
}

pub const HISTOGRAM_BINS: usize = 18;

/// Histogram of angles between gravity and the approach axis of positive
/// grasps, in ten-degree bins over [0, 180].
pub fn grasp_angle_histogram(records: &[GraspRecord]) -> Result<[u64; HISTOGRAM_BINS]> {
    let mut bins = [0u64; HISTOGRAM_BINS];
    let mut any = false;
    let gravity = Vec3::new(0.0, 0.0, -1.0);
    for r in records.iter().filter(|r| r.is_positive()) {
        any = true;
        let approach = r.quaternion().normalized().rotate(Vec3::new(0.0, 0.0, 1.0));
        let angle = approach.dot(gravity).clamp(-1.0, 1.0).acos().to_degrees();
        let bin = ((angle / 10.0) as usize).min(HISTOGRAM_BINS - 1);
        bins[bin] += 1;
    }
    if !any {
        return Err(Error::Empty("positive grasp records"));
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::evaluate_grasp;
    use approx::assert_abs_diff_eq;

    fn small_params() -> DatasetParams {
        DatasetParams {
            seed: 11,
            scene_count: 4,
            surface_points: 60,
            orientations: 6,
            pool_seed: 42,
            pool_size: 12,
            intrinsics: CameraIntrinsics {
                width: 80,
                height: 60,
                fx: 69.28,
                fy: 69.28,
                cx: 40.0,
                cy: 30.0,
            },
            ..DatasetParams::default()
        }
    }

    fn sample_record() -> GraspRecord {
        GraspRecord {
            scene_id: 3,
            position: [12.25, 30.5, 4.75],
            rotation: [0.7071, 0.0, 0.7071, 0.0],
            width: 5.25,
            label: 1,
        }
    }

    #[test]
    fn records_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.bin");
        let records = vec![
            sample_record(),
            GraspRecord {
                scene_id: u64::MAX,
                position: [0.0, 39.999, 1.5e-7],
                rotation: [-0.5, 0.5, -0.5, 0.5],
                width: 0.0,
                label: 0,
            },
        ];
        write_records(&path, &records).unwrap();
        let loaded = read_records(&path).unwrap();
        assert_eq!(loaded, records);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + RECORD_SIZE * records.len());
        write_records(&path, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn corrupt_record_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.bin");
        write_records(&path, &[sample_record()]).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(read_records(&path).is_err(), "bad magic accepted");

        write_records(&path, &[sample_record()]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[16 + 40] = 7; // label byte
        fs::write(&path, &bytes).unwrap();
        assert!(read_records(&path).is_err(), "bad label accepted");

        write_records(&path, &[sample_record()]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_records(&path).is_err(), "truncated file accepted");

        let mut bytes_long = bytes.clone();
        bytes_long.push(0);
        fs::write(&path, &bytes_long).unwrap();
        assert!(read_records(&path).is_err(), "trailing bytes accepted");
    }

    #[test]
    fn dataset_build_is_deterministic_and_balanced() {
        let params = small_params();
        let a = build_dataset(&params).unwrap();
        let b = build_dataset(&params).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.volumes.len(), b.volumes.len());
        for (va, vb) in a.volumes.iter().zip(&b.volumes) {
            assert_eq!(va.values, vb.values);
            assert_eq!(va.weights, vb.weights);
        }
        let diff = a.manifest.positives.abs_diff(a.manifest.negatives);
        assert!(diff <= a.manifest.record_count / 100 + 1, "unbalanced: {:?}", a.manifest);
        assert!(a.manifest.positives > 0, "no positives in {:?}", a.manifest);
        assert_eq!(
            a.manifest.positives + a.manifest.negatives,
            a.manifest.record_count
        );
    }

    #[test]
    fn stored_positions_return_to_the_workspace() {
        let dataset = build_dataset(&small_params()).unwrap();
        let volume = TsdfVolume::new(40, 0.30).unwrap();
        for r in &dataset.records {
            let t = Vec3::new(
                r.position[0] as f64,
                r.position[1] as f64,
                r.position[2] as f64,
            );
            assert!(t.x >= 0.0 && t.x < 40.0, "t̃ out of range: {t:?}");
            assert!(t.y >= 0.0 && t.y < 40.0);
            assert!(t.z >= 0.0 && t.z < 40.0);
            let (world, _, _) = volume.voxel_to_world(t, r.quaternion(), r.width as f64);
            let (back, _, _) = volume
                .world_to_voxel(world, r.quaternion(), r.width as f64 * volume.voxel_size())
                .unwrap();
            assert_abs_diff_eq!(back.x, t.x, epsilon = 1e-9);
            assert_abs_diff_eq!(back.y, t.y, epsilon = 1e-9);
            assert_abs_diff_eq!(back.z, t.z, epsilon = 1e-9);
        }
    }

    #[test]
    fn dataset_save_load_round_trips() {
        let dataset = build_dataset(&small_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &dataset).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.records, dataset.records);
        assert_eq!(loaded.manifest, dataset.manifest);
        assert_eq!(loaded.volumes.len(), dataset.volumes.len());
        for (a, b) in dataset.volumes.iter().zip(&loaded.volumes) {
            assert_eq!(a.values, b.values);
            assert_eq!(a.weights, b.weights);
        }
        assert_eq!(loaded.scenes.len(), dataset.scenes.len());
    }

    #[test]
    fn identity_augmentation_changes_nothing() {
        let rec = sample_record();
        let grid = VolumeGrid { n: 8, l: 0.30, values: (0..512).map(|i| i as f32).collect(), weights: vec![1.0; 512] };
        let r2 = augment_record(&rec, 8, Augmentation::IDENTITY);
        assert_eq!(r2, rec);
        let g2 = augment_volume(&grid, Augmentation::IDENTITY);
        assert_eq!(g2.values, grid.values);
    }

    #[test]
    fn half_turn_augmentation_is_an_involution() {
        let rec = sample_record();
        let aug = Augmentation { yaw_quarter_turns: 2, z_shift: 0 };
        let once = augment_record(&rec, 40, aug);
        assert_abs_diff_eq!(once.position[0] as f64, 39.0 - 12.25, epsilon = 1e-9);
        assert_abs_diff_eq!(once.position[1] as f64, 39.0 - 30.5, epsilon = 1e-9);
        let twice = augment_record(&once, 40, aug);
        assert_eq!(twice.position, rec.position);
        let q = twice.quaternion().normalized();
        let q0 = rec.quaternion().normalized();
        assert!(q.dot(q0).abs() > 1.0 - 1e-9, "rotation not restored");

        let grid = VolumeGrid {
            n: 6,
            l: 0.30,
            values: (0..216).map(|i| (i * 7 % 23) as f32).collect(),
            weights: (0..216).map(|i| (i % 3) as f32).collect(),
        };
        let back = augment_volume(&augment_volume(&grid, aug), aug);
        assert_eq!(back.values, grid.values);
        assert_eq!(back.weights, grid.weights);
    }

    #[test]
    fn quarter_turn_composes_to_half_turn() {
        let grid = VolumeGrid {
            n: 5,
            l: 0.30,
            values: (0..125).map(|i| i as f32).collect(),
            weights: vec![1.0; 125],
        };
        let one = Augmentation { yaw_quarter_turns: 1, z_shift: 0 };
        let two = Augmentation { yaw_quarter_turns: 2, z_shift: 0 };
        let a = augment_volume(&augment_volume(&grid, one), one);
        let b = augment_volume(&grid, two);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn z_shift_vacates_unobserved_voxels() {
        let n = 4;
        let grid = VolumeGrid {
            n,
            l: 0.30,
            values: vec![0.5; 64],
            weights: vec![2.0; 64],
        };
        let up = augment_volume(&grid, Augmentation { yaw_quarter_turns: 0, z_shift: 2 });
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let idx = grid.index(i, j, k);
                    if k < 2 {
                        assert_eq!(up.weights[idx], 0.0);
                        assert_eq!(up.values[idx], 0.0);
                    } else {
                        assert_eq!(up.weights[idx], 2.0);
                    }
                }
            }
        }
    }

    #[test]
    fn drawn_augmentations_keep_records_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let records = vec![
            GraspRecord { position: [1.0, 5.0, 38.5], ..sample_record() },
            GraspRecord { position: [1.0, 5.0, 0.5], ..sample_record() },
        ];
        for _ in 0..200 {
            let aug = draw_augmentation(&mut rng, 40, &records);
            for r in &records {
                let z = r.position[2] as f64 + aug.z_shift as f64;
                assert!((0.0..40.0).contains(&z));
            }
        }
    }

    #[test]
    fn augmented_grasps_keep_their_oracle_labels() {
        // Rotating the stored grasp and the scene by the same quarter turn
        // about the grid axis must reproduce the stored label.
        let params = small_params();
        let dataset = build_dataset(&params).unwrap();
        let volume = TsdfVolume::new(params.grid_n, params.scene_params.workspace_side).unwrap();
        let v = volume.voxel_size();
        let c = (params.grid_n - 1) as f64 * v / 2.0;
        let pivot = Vec3::new(
            c - params.scene_params.workspace_side / 2.0,
            c - params.scene_params.workspace_side / 2.0,
            0.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0usize;
        let mut agree = 0usize;
        'outer: for turns in 1..4u8 {
            let aug = Augmentation { yaw_quarter_turns: turns, z_shift: 0 };
            let yaw = Quaternion::from_axis_angle(
                Vec3::new(0.0, 0.0, 1.0),
                std::f64::consts::FRAC_PI_2 * turns as f64,
            );
            let world_rot = Pose::new(yaw, pivot - yaw.rotate(pivot));
            for _ in 0..34 {
                let rec = dataset.records[rng.random_range(0..dataset.records.len())];
                let scene = &dataset.scenes[rec.scene_id as usize];
                let rotated: Vec<_> = scene
                    .meshes()
                    .unwrap()
                    .iter()
                    .map(|m| m.transformed(&world_rot))
                    .collect();
                let aug_rec = augment_record(&rec, params.grid_n, aug);
                let t = Vec3::new(
                    aug_rec.position[0] as f64,
                    aug_rec.position[1] as f64,
                    aug_rec.position[2] as f64,
                );
                let (world, rot, _) =
                    volume.voxel_to_world(t, aug_rec.quaternion().normalized(), 0.0);
                let outcome = evaluate_grasp(
                    &rotated,
                    &Pose::new(rot, world),
                    params.oracle.gripper.max_width,
                    &params.oracle,
                )
                .unwrap();
                checked += 1;
                if (outcome.label.is_success() as u8) == rec.label {
                    agree += 1;
                }
                if checked >= 100 {
                    break 'outer;
                }
            }
        }
        assert_eq!(agree, checked, "augmented labels diverged: {agree}/{checked}");
    }

    #[test]
    fn histogram_separates_top_down_from_side_grasps() {
        let top = GraspRecord {
            rotation: [0.0, 1.0, 0.0, 0.0], // 180 deg about x: z -> -z
            ..sample_record()
        };
        let side = GraspRecord {
            rotation: [0.7071068, 0.0, 0.7071068, 0.0], // 90 deg about y
            ..sample_record()
        };
        let bins = grasp_angle_histogram(&[top, top, side]).unwrap();
        assert_eq!(bins[0], 2);
        assert_eq!(bins[9], 1);
        assert_eq!(bins.iter().sum::<u64>(), 3);

        let negative = GraspRecord { label: 0, ..sample_record() };
        assert!(grasp_angle_histogram(&[negative]).is_err());
    }

    #[test]
    fn generated_positives_cover_top_down_and_side_approaches() {
        let params = DatasetParams { scene_count: 6, ..small_params() };
        let dataset = build_dataset(&params).unwrap();
        let bins = grasp_angle_histogram(&dataset.records).unwrap();
        let below_30: u64 = bins[0..3].iter().sum();
        let side: u64 = bins[6..12].iter().sum();
        assert!(below_30 > 0, "no top-down grasps: {bins:?}");
        assert!(side > 0, "no side grasps: {bins:?}");
    }
}
