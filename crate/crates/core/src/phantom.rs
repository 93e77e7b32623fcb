//! Synthetic CT studies: ellipsoid organs in a body cross-section, optional
//! lesions with an intensity offset, exact voxel masks and patient labels.
//!
//! Group `g` of the label schema describes organ `g`, so `organ_count` must
//! equal the schema's group count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::io;
use crate::schema::LabelSchema;
use crate::volume::{CtVolume, Mask3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub volume_depth: usize,
    pub volume_height: usize,
    pub volume_width: usize,
    pub organ_count: usize,
    pub injury_probability: f64,
    pub noise_sigma: f64,
    pub lesion_contrast: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            volume_depth: 40,
            volume_height: 48,
            volume_width: 48,
            organ_count: 4,
            injury_probability: 0.4,
            noise_sigma: 0.02,
            lesion_contrast: 0.35,
        }
    }
}

impl PhantomConfig {
    pub fn dims(&self) -> [usize; 3] {
        [self.volume_depth, self.volume_height, self.volume_width]
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        ensure!(
            self.dims().iter().all(|&d| d >= 8),
            Config,
            "phantom dimensions must be >= 8, got {:?}",
            self.dims()
        );
        ensure!(self.organ_count >= 1, Config, "organ_count must be >= 1");
        ensure!(
            (0.0..=1.0).contains(&self.injury_probability),
            Config,
            "injury_probability {} outside [0,1]",
            self.injury_probability
        );
        ensure!(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            Config,
            "noise_sigma must be finite and >= 0"
        );
        ensure!(
            self.lesion_contrast.is_finite(),
            Config,
            "lesion_contrast must be finite"
        );
        schema.validate()?;
        ensure!(
            schema.group_count() == self.organ_count,
            Config,
            "organ_count {} must equal the schema group count {}",
            self.organ_count,
            schema.group_count()
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomStudy {
    pub study_id: String,
    pub volume: CtVolume,
    /// One mask per organ, in schema group order. Pairwise disjoint.
    pub organ_masks: Vec<Mask3>,
    /// Lesion voxels (any organ).
    pub lesion_mask: Mask3,
    /// True state index per label group.
    pub patient_labels: Vec<usize>,
    pub seed: u64,
}

impl PhantomStudy {
    pub fn dims(&self) -> [usize; 3] {
        self.volume.dims()
    }
}

const BACKGROUND: f64 = 0.0;
const BODY: f64 = 0.12;

fn organ_intensity(k: usize, n: usize) -> f64 {
    if n == 1 {
        0.45
    } else {
        0.3 + 0.3 * k as f64 / (n - 1) as f64
    }
}

/// In-plane lesion radius in voxels for a non-healthy state of the given
/// severity rank (1 = mildest). The depth semi-axis is twice this.
fn lesion_radius(severity: usize) -> f64 {
    2.5 + 1.5 * (severity as f64 - 1.0)
}

const LESION_DEPTH_STRETCH: f64 = 2.0;

/// Generate one study. A deterministic function of `(seed, config, schema)`.
pub fn generate_study(seed: u64, config: &PhantomConfig, schema: &LabelSchema) -> Result<PhantomStudy> {
    config.validate(schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = config.dims();
    let [d, h, w] = dims;
    let n = config.organ_count;
    let (df, hf, wf) = (d as f64, h as f64, w as f64);

    // Body cross-section: an elliptic cylinder spanning the depth axis.
    let body_ry = 0.46 * hf;
    let body_rx = 0.46 * wf;
    let cy = (hf - 1.0) / 2.0;
    let cx = (wf - 1.0) / 2.0;

    let mut label_map = vec![0u8; d * h * w];
    let ring = 0.24 * hf.min(wf);
    // Organs keep a fixed angular slot on the ring (a stereotyped layout, as in
    // real anatomy) with per-study jitter of position and shape.
    for k in 0..n {
        let angle = std::f64::consts::TAU * k as f64 / n as f64 + rng.random_range(-0.15..0.15);
        let oc = [
            (df - 1.0) / 2.0 + rng.random_range(-0.1..0.1) * df,
            cy + ring * angle.sin(),
            cx + ring * angle.cos(),
        ];
        let spacing = if n == 1 { 0.3 } else { (std::f64::consts::PI / n as f64).sin().min(0.5) * 0.9 };
        let r_plane = (ring * spacing).max(2.0);
        let radii = [
            rng.random_range(0.25..0.38) * df,
            r_plane * rng.random_range(0.75..1.0),
            r_plane * rng.random_range(0.75..1.0),
        ];
        for z in 0..d {
            let dz = (z as f64 - oc[0]) / radii[0];
            for y in 0..h {
                let dy = (y as f64 - oc[1]) / radii[1];
                for x in 0..w {
                    let dx = (x as f64 - oc[2]) / radii[2];
                    let i = (z * h + y) * w + x;
                    if label_map[i] == 0 && dz * dz + dy * dy + dx * dx <= 1.0 {
                        label_map[i] = k as u8 + 1;
                    }
                }
            }
        }
    }

    let organ_masks: Vec<Mask3> = (0..n)
        .map(|k| Mask3::from_vec(dims, label_map.iter().map(|&l| u8::from(l as usize == k + 1)).collect()))
        .collect::<Result<_>>()?;

    // Injuries: one lesion per injured organ, an ellipsoid stretched along depth
    // around a random organ voxel, intersected with the organ (convex, hence
    // contiguous).
    let mut lesion = vec![0u8; d * h * w];
    let mut patient_labels = Vec::with_capacity(n);
    for (k, group) in schema.groups.iter().enumerate() {
        let organ_voxels: Vec<usize> = organ_masks[k]
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0).then_some(i))
            .collect();
        let injured = rng.random_bool(config.injury_probability);
        let sick: Vec<usize> = (0..group.state_count()).filter(|&s| s != group.healthy).collect();
        let pick = rng.random_range(0..sick.len());
        let center_pick: f64 = rng.random();
        if !injured || organ_voxels.is_empty() {
            patient_labels.push(group.healthy);
            continue;
        }
        let state = sick[pick];
        let radius = lesion_radius(pick + 1);
        let c = organ_voxels[((center_pick * organ_voxels.len() as f64) as usize).min(organ_voxels.len() - 1)];
        let (cz, cyv, cxv) = (c / (h * w), (c / w) % h, c % w);
        for &i in &organ_voxels {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let dz = (z as f64 - cz as f64) / LESION_DEPTH_STRETCH;
            let dy = y as f64 - cyv as f64;
            let dx = x as f64 - cxv as f64;
            if dz * dz + dy * dy + dx * dx <= radius * radius {
                lesion[i] = 1;
            }
        }
        patient_labels.push(state);
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut volume = CtVolume::filled(dims, 0.0);
    for z in 0..d {
        for y in 0..h {
            let ey = (y as f64 - cy) / body_ry;
            for x in 0..w {
                let ex = (x as f64 - cx) / body_rx;
                let i = (z * h + y) * w + x;
                let mut v = if ey * ey + ex * ex <= 1.0 { BODY } else { BACKGROUND };
                let l = label_map[i] as usize;
                if l > 0 {
                    v = organ_intensity(l - 1, n);
                }
                if lesion[i] != 0 {
                    v += config.lesion_contrast;
                }
                let eps: f64 = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                volume.data_mut()[i] = (v + eps).clamp(0.0, 1.0) as f32;
            }
        }
    }

    Ok(PhantomStudy {
        study_id: format!("phantom-{seed:016x}"),
        volume,
        organ_masks,
        lesion_mask: Mask3::from_vec(dims, lesion)?,
        patient_labels,
        seed,
    })
}

/// Per-study seed: SplitMix64 finalizer applied to
/// `root_seed ^ splitmix64(index + 0x9E3779B97F4A7C15)`.
pub fn study_seed(root_seed: u64, index: u64) -> u64 {
    splitmix64(root_seed ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn study_id(index: usize) -> String {
    format!("s{index:04}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyEntry {
    pub id: String,
    pub seed: u64,
    pub shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root_seed: u64,
    pub config: PhantomConfig,
    pub schema: LabelSchema,
    pub studies: Vec<StudyEntry>,
}

/// Generate `count` studies in memory, ids `s0000..`.
pub fn generate_studies(
    root_seed: u64,
    count: usize,
    config: &PhantomConfig,
    schema: &LabelSchema,
) -> Result<Vec<PhantomStudy>> {
    ensure!(count >= 1, Contract, "dataset count must be >= 1");
    config.validate(schema)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut s = generate_study(study_seed(root_seed, i as u64), config, schema)?;
            s.study_id = study_id(i);
            Ok(s)
        })
        .collect()
}

/// Generate and write a dataset under `out`:
/// `manifest.json` plus one directory per study holding `volume.raw`
/// (f32 LE), `mask_<group>.raw` and `lesion.raw` (u8) and `labels.json`.
pub fn generate_dataset(
    root_seed: u64,
    count: usize,
    config: &PhantomConfig,
    schema: &LabelSchema,
    out: &Path,
) -> Result<DatasetManifest> {
    let studies = generate_studies(root_seed, count, config, schema)?;
    io::create_dir_all(out)?;
    studies
        .par_iter()
        .try_for_each(|s| write_study(out, s, schema))?;
    let manifest = DatasetManifest {
        root_seed,
        config: config.clone(),
        schema: schema.clone(),
        studies: studies
            .iter()
            .map(|s| StudyEntry {
                id: s.study_id.clone(),
                seed: s.seed,
                shape: s.dims(),
            })
            .collect(),
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_study(root: &Path, study: &PhantomStudy, schema: &LabelSchema) -> Result<()> {
    let dir = root.join(&study.study_id);
    io::create_dir_all(&dir)?;
    io::write_f32_le(&dir.join("volume.raw"), study.volume.data())?;
    for (g, m) in schema.groups.iter().zip(&study.organ_masks) {
        io::write_u8(&dir.join(format!("mask_{}.raw", g.name)), m.data())?;
    }
    io::write_u8(&dir.join("lesion.raw"), study.lesion_mask.data())?;
    io::write_json(&dir.join("labels.json"), &labels_map(schema, &study.patient_labels))?;
    Ok(())
}

/// `labels.json` content: group name → true state index.
pub fn labels_map(schema: &LabelSchema, states: &[usize]) -> BTreeMap<String, usize> {
    schema
        .groups
        .iter()
        .zip(states)
        .map(|(g, &s)| (g.name.clone(), s))
        .collect()
}

pub fn labels_from_map(schema: &LabelSchema, map: &BTreeMap<String, usize>, path: &Path) -> Result<Vec<usize>> {
    let states = schema
        .groups
        .iter()
        .map(|g| {
            map.get(&g.name)
                .copied()
                .ok_or_else(|| Error::format(path, format!("missing label group {}", g.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    schema.check_states(&states)?;
    Ok(states)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    io::read_json(&root.join("manifest.json"))
}

pub fn read_study(root: &Path, entry: &StudyEntry, schema: &LabelSchema) -> Result<PhantomStudy> {
    let dir: PathBuf = root.join(&entry.id);
    let n: usize = entry.shape.iter().product();
    let volume = CtVolume::from_vec(entry.shape, io::read_f32_le(&dir.join("volume.raw"), n)?)?;
    let organ_masks = schema
        .groups
        .iter()
        .map(|g| Mask3::from_vec(entry.shape, io::read_u8(&dir.join(format!("mask_{}.raw", g.name)), n)?))
        .collect::<Result<Vec<_>>>()?;
    let lesion_mask = Mask3::from_vec(entry.shape, io::read_u8(&dir.join("lesion.raw"), n)?)?;
    let labels_path = dir.join("labels.json");
    let map: BTreeMap<String, usize> = io::read_json(&labels_path)?;
    Ok(PhantomStudy {
        study_id: entry.id.clone(),
        volume,
        organ_masks,
        lesion_mask,
        patient_labels: labels_from_map(schema, &map, &labels_path)?,
        seed: entry.seed,
    })
}

/// Load every study listed in the manifest.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<PhantomStudy>)> {
    let manifest = read_manifest(root)?;
    let studies = manifest
        .studies
        .par_iter()
        .map(|e| read_study(root, e, &manifest.schema))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, studies))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            volume_depth: 16,
            volume_height: 24,
            volume_width: 24,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let s = LabelSchema::default();
        let a = generate_study(7, &small(), &s).unwrap();
        let b = generate_study(7, &small(), &s).unwrap();
        assert_eq!(a, b);
        let c = generate_study(8, &small(), &s).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn no_injury_means_all_healthy() {
        let s = LabelSchema::default();
        let cfg = PhantomConfig { injury_probability: 0.0, ..small() };
        for seed in 0..10 {
            let st = generate_study(seed, &cfg, &s).unwrap();
            assert_eq!(st.patient_labels, vec![0; 4]);
            assert_eq!(st.lesion_mask.count_positive(), 0);
        }
    }

    #[test]
    fn two_organs_are_disjoint() {
        let schema = LabelSchema {
            groups: LabelSchema::default().groups[..2].to_vec(),
        };
        let cfg = PhantomConfig { organ_count: 2, ..small() };
        let st = generate_study(7, &cfg, &schema).unwrap();
        let overlap = st.organ_masks[0]
            .data()
            .iter()
            .zip(st.organ_masks[1].data())
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count();
        assert_eq!(overlap, 0);
        assert!(st.organ_masks.iter().all(|m| m.count_positive() > 0));
    }

    #[test]
    fn invalid_config_rejected() {
        let s = LabelSchema::default();
        let cfg = PhantomConfig { volume_depth: 7, ..small() };
        assert!(matches!(generate_study(1, &cfg, &s), Err(Error::Config(_))));
        let cfg = PhantomConfig { injury_probability: 1.5, ..small() };
        assert!(generate_study(1, &cfg, &s).is_err());
        let cfg = PhantomConfig { organ_count: 3, ..small() };
        assert!(generate_study(1, &cfg, &s).is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| study_seed(5, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(study_seed(5, 0), study_seed(6, 0));
    }
}
