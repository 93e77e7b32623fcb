//! Stage orchestration and on-disk artifacts shared by the command line and
//! the tests: configuration, segmentation output, prepared sequences,
//! checkpoints, prediction files, ensembling, evaluation and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{final_ensemble, make_folds, patient_aggregate, slice_ensemble, FoldSpec, PatientProbs, PatientSet, SliceProbs};
use crate::error::{ensure, Error, Result};
use crate::io;
use crate::metric::{evaluate, GroundTruth, MetricOptions, MetricReport};
use crate::nn::checkpoint::{load_params, restore_into, save_params};
use crate::phantom::{self, DatasetManifest, PhantomConfig, PhantomStudy};
use crate::schema::LabelSchema;
use crate::segmenter::{self, mask_to_crops, SegConfig, SegModel, SegRecord, SegTrainReport};
use crate::traumanet::{self, EpochRecord, TrainConfig, TraumaNet, TraumaNetConfig};
use crate::volume::{Box3, Mask3};
use crate::volumeprep::{prepare_study, PrepParams, PreparedStudy, TripletSequence};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where organ masks come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMode {
    /// Ground-truth phantom masks.
    #[default]
    Oracle,
    /// Masks predicted by a segmenter trained on the dataset's masks.
    Trained,
}

/// `"full"` or a fold count `k >= 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FoldMode {
    Full,
    K(usize),
}

impl Default for FoldMode {
    fn default() -> Self {
        FoldMode::K(4)
    }
}

impl FromStr for FoldMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "full" {
            return Ok(FoldMode::Full);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 2 => Ok(FoldMode::K(k)),
            _ => Err(format!("folds must be \"full\" or an integer >= 2, got {s:?}")),
        }
    }
}

impl TryFrom<String> for FoldMode {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<FoldMode> for String {
    fn from(m: FoldMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for FoldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldMode::Full => f.write_str("full"),
            FoldMode::K(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub phantom: PhantomConfig,
    pub schema: LabelSchema,
    pub prep: PrepParams,
    pub seg_mode: SegMode,
    pub segmenter: SegConfig,
    pub model: TraumaNetConfig,
    pub train: TrainConfig,
    pub folds: FoldMode,
    pub fold_seed: u64,
    pub metric: MetricOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let schema = LabelSchema::default();
        Self {
            phantom: PhantomConfig::default(),
            prep: PrepParams::default(),
            seg_mode: SegMode::default(),
            segmenter: SegConfig {
                organs: schema.group_count(),
                ..SegConfig::default()
            },
            model: TraumaNetConfig::for_schema(&schema),
            train: TrainConfig::default(),
            folds: FoldMode::default(),
            fold_seed: 0,
            metric: MetricOptions::default(),
            schema,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate every sub-config and their cross-references.
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        self.phantom.validate(&self.schema)?;
        self.prep.validate()?;
        self.segmenter.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let g = self.schema.group_count();
        ensure!(self.segmenter.organs == g, Config, "segmenter.organs is {}, schema has {g} groups", self.segmenter.organs);
        ensure!(
            self.model.n_classes == self.schema.total_states(),
            Config,
            "model.n_classes is {}, schema has {} states",
            self.model.n_classes,
            self.schema.total_states()
        );
        ensure!(self.model.aux_channels == g, Config, "model.aux_channels is {}, schema has {g} groups", self.model.aux_channels);
        ensure!(
            self.model.seq_len == self.prep.seq_len,
            Config,
            "model.seq_len {} differs from prep.seq_len {}",
            self.model.seq_len,
            self.prep.seq_len
        );
        ensure!(
            self.model.height == self.prep.height && self.model.width == self.prep.width,
            Config,
            "model input {}x{} differs from prep output {}x{}",
            self.model.height,
            self.model.width,
            self.prep.height,
            self.prep.width
        );
        Ok(())
    }
}

/// Name of the first field where two schemas differ, if any.
pub fn schema_mismatch(a: &LabelSchema, b: &LabelSchema) -> Option<String> {
    if a.groups.len() != b.groups.len() {
        return Some(format!("groups (count {} vs {})", a.groups.len(), b.groups.len()));
    }
    for (i, (x, y)) in a.groups.iter().zip(&b.groups).enumerate() {
        let field = if x.name != y.name {
            "name"
        } else if x.states != y.states {
            "states"
        } else if x.healthy != y.healthy {
            "healthy"
        } else if x.weights != y.weights {
            "weights"
        } else {
            continue;
        };
        return Some(format!("groups[{i}].{field} ({})", x.name));
    }
    None
}

fn check_schema(expected: &LabelSchema, found: &LabelSchema, what: &str) -> Result<()> {
    match schema_mismatch(expected, found) {
        None => Ok(()),
        Some(field) => Err(Error::Contract(format!("schema mismatch in {what}: field {field}"))),
    }
}

// ---------------------------------------------------------------------------
// Run manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Provenance of one command: config, seeds, output hashes and timings.
/// Wall times live only here, so every other artifact is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the output directory) → SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub stages: Vec<StageTime>,
}

pub struct RunRecorder {
    manifest: RunManifest,
    out: PathBuf,
    started: Option<(String, Instant)>,
}

impl RunRecorder {
    pub fn new(command: &str, config: &PipelineConfig, out: &Path) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: VERSION.to_string(),
                config: config.clone(),
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                stages: Vec::new(),
            },
            out: out.to_path_buf(),
            started: None,
        }
    }

    pub fn seed(&mut self, name: &str, v: u64) {
        self.manifest.seeds.insert(name.to_string(), v);
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        self.started = Some((name.to_string(), Instant::now()));
        let r = f();
        if let Some((stage, t0)) = self.started.take() {
            self.manifest.stages.push(StageTime {
                stage,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
        r
    }

    /// Hash every regular file under the output directory (except run manifests)
    /// and write `run_<command>.json`.
    pub fn finish(mut self) -> Result<RunManifest> {
        let mut files = Vec::new();
        collect_files(&self.out, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(&self.out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            if rel.starts_with("run_") && rel.ends_with(".json") {
                continue;
            }
            self.manifest.artifacts.insert(rel, sha256_file(&f)?);
        }
        io::write_json(&self.out.join(format!("run_{}.json", self.manifest.command)), &self.manifest)?;
        Ok(self.manifest)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::storage(dir, e))?;
    for e in entries {
        let p = e.map_err(|e| Error::storage(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    out.sort();
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

// ---------------------------------------------------------------------------
// gen / folds

/// Write a dataset plus a standalone `schema.json`.
pub fn gen(cfg: &PipelineConfig, seed: u64, count: usize, out: &Path) -> Result<DatasetManifest> {
    let m = phantom::generate_dataset(seed, count, &cfg.phantom, &cfg.schema, out)?;
    io::write_json(&out.join("schema.json"), &cfg.schema)?;
    Ok(m)
}

pub fn load_schema(path: &Path) -> Result<LabelSchema> {
    let s: LabelSchema = io::read_json(path)?;
    s.validate()?;
    Ok(s)
}

pub fn fold_spec(mode: FoldMode, ids: &[String], seed: u64) -> Result<FoldSpec> {
    match mode {
        FoldMode::Full => Ok(FoldSpec::full(seed)),
        FoldMode::K(k) => make_folds(ids, k, seed),
    }
}

// ---------------------------------------------------------------------------
// segment

pub struct Segmentation {
    pub masks: Vec<Vec<Mask3>>,
    pub records: Vec<SegRecord>,
    pub model: Option<(SegModel, SegTrainReport)>,
}

/// Organ masks for every study, from ground truth or a segmenter trained on
/// the given studies.
pub fn segment_studies(cfg: &PipelineConfig, studies: &[PhantomStudy]) -> Result<Segmentation> {
    let model = match cfg.seg_mode {
        SegMode::Oracle => None,
        SegMode::Trained => {
            let refs: Vec<&PhantomStudy> = studies.iter().collect();
            Some(segmenter::train_segmenter(&refs, &cfg.segmenter)?)
        }
    };
    segment_with(cfg, studies, model)
}

pub fn segment_with(
    cfg: &PipelineConfig,
    studies: &[PhantomStudy],
    model: Option<(SegModel, SegTrainReport)>,
) -> Result<Segmentation> {
    let names: Vec<String> = cfg.schema.groups.iter().map(|g| g.name.clone()).collect();
    let (mode, masks): (&str, Vec<Vec<Mask3>>) = match &model {
        None => ("oracle", studies.iter().map(segmenter::oracle_masks).collect()),
        Some((m, _)) => (
            "trained",
            studies
                .par_iter()
                .map(|s| segmenter::predict_mask(m, &s.volume, cfg.segmenter.threshold))
                .collect::<Result<_>>()?,
        ),
    };
    let records = studies
        .iter()
        .zip(&masks)
        .map(|(s, m)| Ok(SegRecord::new(&s.study_id, mode, &mask_to_crops(m, &names, &s.volume, cfg.segmenter.margin)?)))
        .collect::<Result<_>>()?;
    Ok(Segmentation { masks, records, model })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegCheckpointManifest {
    pub config: SegConfig,
    pub report: SegTrainReport,
}

pub fn save_segmenter(dir: &Path, model: &SegModel, report: &SegTrainReport) -> Result<()> {
    io::create_dir_all(dir)?;
    save_params(&dir.join("params.bin"), &model.params)?;
    io::write_json(
        &dir.join("manifest.json"),
        &SegCheckpointManifest {
            config: model.config.clone(),
            report: report.clone(),
        },
    )
}

pub fn load_segmenter(dir: &Path) -> Result<(SegModel, SegTrainReport)> {
    let m: SegCheckpointManifest = io::read_json(&dir.join("manifest.json"))?;
    let mut model = SegModel::new(m.config)?;
    restore_into(&mut model.params, &load_params(&dir.join("params.bin"))?)?;
    Ok((model, m.report))
}

/// Write `seg_<study>.json` and `segmask_<study>_<organ>.raw` files.
pub fn write_segmentation(out: &Path, schema: &LabelSchema, seg: &Segmentation) -> Result<()> {
    io::create_dir_all(out)?;
    for (rec, masks) in seg.records.iter().zip(&seg.masks) {
        io::write_json(&out.join(format!("seg_{}.json", rec.study_id)), rec)?;
        for (g, m) in schema.groups.iter().zip(masks) {
            io::write_u8(&out.join(format!("segmask_{}_{}.raw", rec.study_id, g.name)), m.data())?;
        }
    }
    if let Some((m, r)) = &seg.model {
        save_segmenter(&out.join("segmenter"), m, r)?;
    }
    Ok(())
}

/// Read masks written by [`write_segmentation`].
pub fn read_segmentation(dir: &Path, studies: &[PhantomStudy], schema: &LabelSchema) -> Result<Vec<Vec<Mask3>>> {
    studies
        .iter()
        .map(|s| {
            let dims = s.dims();
            let n = dims.iter().product();
            schema
                .groups
                .iter()
                .map(|g| Mask3::from_vec(dims, io::read_u8(&dir.join(format!("segmask_{}_{}.raw", s.study_id, g.name)), n)?))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// prep

pub fn prepare_all(cfg: &PipelineConfig, studies: &[PhantomStudy], masks: &[Vec<Mask3>]) -> Result<Vec<PreparedStudy>> {
    ensure!(studies.len() == masks.len(), Contract, "{} mask sets for {} studies", masks.len(), studies.len());
    studies
        .par_iter()
        .zip(masks)
        .map(|(s, m)| prepare_study(s, m, &cfg.schema, &cfg.prep))
        .collect()
}

/// `prep_<study>.json`; the tensor itself is `prep_<study>.raw` (f32 LE,
/// T×3×H×W) and the centre-slice organ masks `prepmask_<study>.raw` (u8,
/// T×G×H×W).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepRecord {
    pub study_id: String,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    pub groups: Vec<String>,
    pub center_indices: Vec<usize>,
    pub slice_labels: Vec<Vec<f64>>,
    pub patient_states: Vec<usize>,
    pub crop_box: Box3,
    pub degenerate: bool,
}

pub fn write_prepared(out: &Path, schema: &LabelSchema, studies: &[PreparedStudy]) -> Result<()> {
    io::create_dir_all(out)?;
    studies.par_iter().try_for_each(|p| {
        let q = &p.sequence;
        io::write_f32_le(&out.join(format!("prep_{}.raw", p.study_id)), &q.data)?;
        io::write_u8(&out.join(format!("prepmask_{}.raw", p.study_id)), &p.center_masks)?;
        io::write_json(
            &out.join(format!("prep_{}.json", p.study_id)),
            &PrepRecord {
                study_id: p.study_id.clone(),
                seq_len: q.len(),
                height: q.height,
                width: q.width,
                groups: schema.groups.iter().map(|g| g.name.clone()).collect(),
                center_indices: q.center_indices.clone(),
                slice_labels: q.slice_labels.clone(),
                patient_states: p.patient_states.clone(),
                crop_box: p.crop_box,
                degenerate: p.degenerate,
            },
        )
    })
}

pub fn read_prepared(dir: &Path, ids: &[String], schema: &LabelSchema) -> Result<Vec<PreparedStudy>> {
    ids.par_iter()
        .map(|id| {
            let path = dir.join(format!("prep_{id}.json"));
            let r: PrepRecord = io::read_json(&path)?;
            let names: Vec<&str> = schema.groups.iter().map(|g| g.name.as_str()).collect();
            if r.groups != names {
                return Err(Error::format(&path, "label groups differ from the schema"));
            }
            let (t, h, w) = (r.seq_len, r.height, r.width);
            let data = io::read_f32_le(&dir.join(format!("prep_{id}.raw")), t * 3 * h * w)?;
            let center_masks = io::read_u8(&dir.join(format!("prepmask_{id}.raw")), t * names.len() * h * w)?;
            Ok(PreparedStudy {
                study_id: r.study_id,
                sequence: TripletSequence {
                    height: h,
                    width: w,
                    data,
                    center_indices: r.center_indices,
                    slice_labels: r.slice_labels,
                },
                center_masks,
                patient_states: r.patient_states,
                crop_box: r.crop_box,
                degenerate: r.degenerate,
            })
        })
        .collect()
}

/// Prepared studies listed in a prep directory, in id order.
pub fn list_prepared(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::storage(dir, e))? {
        let name = e.map_err(|e| Error::storage(dir, e))?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("prep_").and_then(|n| n.strip_suffix(".json")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ensure!(!ids.is_empty(), Contract, "no prepared studies in {}", dir.display());
    Ok(ids)
}

// ---------------------------------------------------------------------------
// train

/// `manifest.json` next to each model's `params.bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub name: String,
    pub version: String,
    pub model: TraumaNetConfig,
    pub train: TrainConfig,
    pub schema: LabelSchema,
    pub prep: PrepParams,
    pub seg_mode: SegMode,
    pub fold: usize,
    pub fold_mode: FoldMode,
    /// Seed of the initial weights and batch order.
    pub seed: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

pub fn model_name(fold: usize) -> String {
    format!("model_{fold}")
}

pub fn train_models(cfg: &PipelineConfig, prepared: &[PreparedStudy], folds: &FoldSpec) -> Result<Vec<(TraumaNet, CheckpointManifest)>> {
    let trained = traumanet::train(prepared, folds, &cfg.model, &cfg.train, &cfg.schema)?;
    Ok(trained
        .into_iter()
        .map(|t| {
            let m = CheckpointManifest {
                name: model_name(t.fold),
                version: VERSION.to_string(),
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                schema: cfg.schema.clone(),
                prep: cfg.prep.clone(),
                seg_mode: cfg.seg_mode,
                fold: t.fold,
                fold_mode: match folds.k {
                    Some(k) => FoldMode::K(k),
                    None => FoldMode::Full,
                },
                seed: t.seed,
                epoch: cfg.train.epochs,
                history: t.history,
                train_ids: t.train_ids,
                val_ids: t.val_ids,
            };
            (t.model, m)
        })
        .collect())
}

pub fn save_model(dir: &Path, model: &TraumaNet, manifest: &CheckpointManifest) -> Result<()> {
    io::create_dir_all(dir)?;
    save_params(&dir.join("params.bin"), &model.params)?;
    io::write_json(&dir.join("manifest.json"), manifest)
}

pub fn load_model(dir: &Path) -> Result<(TraumaNet, CheckpointManifest)> {
    let m: CheckpointManifest = io::read_json(&dir.join("manifest.json"))?;
    let mut model = TraumaNet::new(m.model.clone(), m.seed)?;
    restore_into(&mut model.params, &load_params(&dir.join("params.bin"))?)?;
    Ok((model, m))
}

// ---------------------------------------------------------------------------
// predictions

/// `preds_<model>.json`: study → group → state → probability, plus optional
/// per-slice rows in schema state order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub model: String,
    pub schema: LabelSchema,
    pub studies: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slices: Option<BTreeMap<String, Vec<Vec<f64>>>>,
}

impl PredictionFile {
    pub fn new(model: &str, schema: &LabelSchema, patients: &PatientSet, slices: Option<BTreeMap<String, SliceProbs>>) -> Self {
        let studies = patients
            .iter()
            .map(|(id, p)| (id.clone(), nest(schema, &p.values)))
            .collect();
        Self {
            model: model.to_string(),
            schema: schema.clone(),
            studies,
            slices: slices.map(|m| m.into_iter().map(|(id, s)| (id, s.slices)).collect()),
        }
    }

    pub fn patients(&self) -> Result<PatientSet> {
        self.studies
            .iter()
            .map(|(id, groups)| Ok((id.clone(), PatientProbs { values: flatten(&self.schema, groups, id)? })))
            .collect()
    }

    pub fn slice_probs(&self) -> Option<BTreeMap<String, SliceProbs>> {
        self.slices
            .as_ref()
            .map(|m| m.iter().map(|(id, s)| (id.clone(), SliceProbs { slices: s.clone() })).collect())
    }
}

fn nest(schema: &LabelSchema, values: &[f64]) -> BTreeMap<String, BTreeMap<String, f64>> {
    schema
        .groups
        .iter()
        .zip(schema.offsets())
        .map(|(g, o)| {
            let states = g.states.iter().enumerate().map(|(k, s)| (s.clone(), values[o + k])).collect();
            (g.name.clone(), states)
        })
        .collect()
}

fn flatten(schema: &LabelSchema, groups: &BTreeMap<String, BTreeMap<String, f64>>, id: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(schema.total_states());
    for g in &schema.groups {
        let states = groups
            .get(&g.name)
            .ok_or_else(|| Error::Contract(format!("study {id}: missing group {}", g.name)))?;
        for s in &g.states {
            let v = states
                .get(s)
                .ok_or_else(|| Error::Contract(format!("study {id}: missing state {}.{s}", g.name)))?;
            out.push(*v);
        }
    }
    Ok(out)
}

/// Per-slice and patient-level predictions of one model.
pub fn predict_studies(model: &TraumaNet, studies: &[&PreparedStudy], schema: &LabelSchema) -> Result<(PatientSet, BTreeMap<String, SliceProbs>)> {
    let rows = studies
        .par_iter()
        .map(|s| {
            let sp = model.predict_study(s, schema)?;
            let pp = patient_aggregate(&sp, schema)?;
            Ok((s.study_id.clone(), sp, pp))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut patients = PatientSet::new();
    let mut slices = BTreeMap::new();
    for (id, sp, pp) in rows {
        patients.insert(id.clone(), pp);
        slices.insert(id, sp);
    }
    Ok((patients, slices))
}

/// How `ensemble` combines prediction files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Mean of patient-level probabilities across files.
    #[default]
    Patient,
    /// Mean of per-slice probabilities across files, then max aggregation
    /// per patient. Needs per-slice rows in every file.
    Slice,
}

impl FromStr for EnsembleMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "patient" => Ok(EnsembleMode::Patient),
            "slice" => Ok(EnsembleMode::Slice),
            _ => Err(format!("ensemble mode must be \"patient\" or \"slice\", got {s:?}")),
        }
    }
}

pub fn ensemble_files(files: &[PredictionFile], mode: EnsembleMode, name: &str) -> Result<PredictionFile> {
    ensure!(!files.is_empty(), Contract, "no prediction files to ensemble");
    let schema = &files[0].schema;
    for f in &files[1..] {
        check_schema(schema, &f.schema, &format!("predictions of {}", f.model))?;
    }
    let patients = match mode {
        EnsembleMode::Patient => {
            let sets = files.iter().map(|f| f.patients()).collect::<Result<Vec<_>>>()?;
            final_ensemble(&sets)?
        }
        EnsembleMode::Slice => {
            let per_file = files
                .iter()
                .map(|f| {
                    f.slice_probs()
                        .ok_or_else(|| Error::Contract(format!("predictions of {} have no per-slice rows", f.model)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut out = PatientSet::new();
            for id in per_file[0].keys() {
                let stack = per_file
                    .iter()
                    .zip(files)
                    .map(|(m, f)| {
                        m.get(id)
                            .cloned()
                            .ok_or_else(|| Error::Contract(format!("predictions of {} lack study {id}", f.model)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.insert(id.clone(), patient_aggregate(&slice_ensemble(&stack)?, schema)?);
            }
            for (m, f) in per_file.iter().zip(files) {
                ensure!(m.len() == out.len(), Contract, "predictions of {} cover a different study set", f.model);
            }
            out
        }
    };
    Ok(PredictionFile::new(name, schema, &patients, None))
}

/// Slice-level mean over the models of one architecture with max aggregation
/// per patient, then a patient-level mean across architectures (groups of
/// models).
pub fn ensemble_models(groups: &[Vec<&TraumaNet>], studies: &[&PreparedStudy], schema: &LabelSchema) -> Result<PatientSet> {
    let sets = groups
        .iter()
        .map(|models| {
            studies
                .par_iter()
                .map(|s| {
                    let per_model = models.iter().map(|m| m.predict_study(s, schema)).collect::<Result<Vec<_>>>()?;
                    Ok((s.study_id.clone(), patient_aggregate(&slice_ensemble(&per_model)?, schema)?))
                })
                .collect::<Result<PatientSet>>()
        })
        .collect::<Result<Vec<_>>>()?;
    final_ensemble(&sets)
}

// ---------------------------------------------------------------------------
// eval

pub fn ground_truth(studies: &[&PreparedStudy]) -> GroundTruth {
    studies.iter().map(|s| (s.study_id.clone(), s.patient_states.clone())).collect()
}

/// Truth from a dataset directory's `labels.json` files, restricted to `ids`.
pub fn read_truth(data: &Path, schema: &LabelSchema, ids: &[String]) -> Result<GroundTruth> {
    ids.iter()
        .map(|id| {
            let path = data.join(id).join("labels.json");
            let map: BTreeMap<String, usize> = io::read_json(&path)?;
            Ok((id.clone(), phantom::labels_from_map(schema, &map, &path)?))
        })
        .collect()
}

pub fn evaluate_file(preds: &PredictionFile, truth: &GroundTruth, schema: &LabelSchema, opts: &MetricOptions) -> Result<MetricReport> {
    check_schema(schema, &preds.schema, &format!("predictions of {}", preds.model))?;
    evaluate(&preds.patients()?, truth, schema, opts)
}

/// Constant class-prior predictions: each group's state frequencies over
/// `train`, applied to every study in `targets`.
pub fn prior_baseline(train: &[&PreparedStudy], targets: &[&PreparedStudy], schema: &LabelSchema) -> Result<PatientSet> {
    ensure!(!train.is_empty(), Contract, "prior baseline needs training studies");
    let mut prior = vec![0.0; schema.total_states()];
    for s in train {
        for (o, &st) in schema.offsets().iter().zip(&s.patient_states) {
            prior[o + st] += 1.0;
        }
    }
    for v in &mut prior {
        *v /= train.len() as f64;
    }
    Ok(targets
        .iter()
        .map(|s| (s.study_id.clone(), PatientProbs { values: prior.clone() }))
        .collect())
}

/// Studies by id from a prepared collection, in the order of `ids`.
pub fn select<'a>(all: &'a [PreparedStudy], ids: &[String]) -> Result<Vec<&'a PreparedStudy>> {
    let by_id: BTreeMap<&str, &PreparedStudy> = all.iter().map(|s| (s.study_id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Contract(format!("unknown study {id}")))
        })
        .collect()
}
