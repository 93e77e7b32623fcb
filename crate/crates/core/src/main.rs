use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use traumakit::ensemble::FoldSpec;
use traumakit::io;
use traumakit::phantom::{self, PhantomStudy};
use traumakit::pipeline::{self as pl, EnsembleMode, FoldMode, PipelineConfig, PredictionFile, RunRecorder, SegMode};
use traumakit::volumeprep::PreparedStudy;
use traumakit::{Error, Result};

/// Abdominal trauma detection pipeline on synthetic CT phantoms.
#[derive(Parser)]
#[command(name = "traumakit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Produce organ masks and crops for every study.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_seg_mode)]
        mode: Option<SegMode>,
    },
    /// Preprocess studies into model-ready triplet sequences.
    Prep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Masks from `segment`; ground truth or a fresh segmenter otherwise.
        #[arg(long)]
        seg: Option<PathBuf>,
    },
    /// Train one model per fold (or one on everything).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "prep")]
        data: Option<PathBuf>,
        /// Prepared sequences from `prep`, instead of preparing `--data`.
        #[arg(long)]
        prep: Option<PathBuf>,
        /// "full" or a fold count.
        #[arg(long)]
        folds: Option<FoldMode>,
        /// Explicit fold assignment written by `folds`.
        #[arg(long, conflicts_with = "folds")]
        folds_file: Option<PathBuf>,
        #[arg(long, value_parser = parse_seg_mode)]
        seg_mode: Option<SegMode>,
    },
    /// Write per-study probabilities of one trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required_unless_present = "prep")]
        data: Option<PathBuf>,
        #[arg(long)]
        prep: Option<PathBuf>,
        /// Only the model's validation studies (out-of-fold predictions).
        #[arg(long)]
        val_only: bool,
        /// Leave out the per-slice rows.
        #[arg(long)]
        no_slices: bool,
    },
    /// Merge prediction files.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        preds: Vec<PathBuf>,
        #[arg(long, default_value = "patient")]
        mode: EnsembleMode,
        #[arg(long, default_value = "ensemble")]
        name: String,
    },
    /// Score predictions against dataset labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<data>/schema.json`.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Write a fold assignment for a dataset.
    Folds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<FoldMode>,
    },
}

fn parse_seg_mode(s: &str) -> std::result::Result<SegMode, String> {
    match s {
        "oracle" => Ok(SegMode::Oracle),
        "trained" => Ok(SegMode::Trained),
        _ => Err(format!("expected \"oracle\" or \"trained\", got {s:?}")),
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
        cfg.fold_seed = s;
        cfg.segmenter.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset_for(cfg: &PipelineConfig, data: &Path) -> Result<Vec<PhantomStudy>> {
    let (manifest, studies) = phantom::load_dataset(data)?;
    if let Some(field) = pl::schema_mismatch(&cfg.schema, &manifest.schema) {
        return Err(Error::Contract(format!("schema mismatch between config and dataset: field {field}")));
    }
    Ok(studies)
}

/// Masks per study: from a `segment` directory, or by the configured mode.
fn masks_for(cfg: &PipelineConfig, studies: &[PhantomStudy], seg: Option<&Path>, rec: &mut RunRecorder) -> Result<pl::Segmentation> {
    match seg {
        Some(dir) => {
            rec.input("seg", dir);
            let masks = pl::read_segmentation(dir, studies, &cfg.schema)?;
            Ok(pl::Segmentation {
                masks,
                records: Vec::new(),
                model: None,
            })
        }
        None => rec.stage("segment", || pl::segment_studies(cfg, studies)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, count } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(0);
            let mut rec = RunRecorder::new("gen", &cfg, &common.out);
            rec.seed("root_seed", seed);
            rec.stage("gen", || pl::gen(&cfg, seed, count, &common.out))?;
            rec.finish()?;
        }
        Command::Segment { common, data, mode } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.seg_mode = m;
            }
            let mut rec = RunRecorder::new("segment", &cfg, &common.out);
            rec.input("data", &data);
            rec.seed("segmenter", cfg.segmenter.seed);
            let studies = load_dataset_for(&cfg, &data)?;
            let seg = rec.stage("segment", || pl::segment_studies(&cfg, &studies))?;
            pl::write_segmentation(&common.out, &cfg.schema, &seg)?;
            rec.finish()?;
        }
        Command::Prep { common, data, seg } => {
            let cfg = load_config(&common)?;
            let mut rec = RunRecorder::new("prep", &cfg, &common.out);
            rec.input("data", &data);
            let studies = load_dataset_for(&cfg, &data)?;
            let seg = masks_for(&cfg, &studies, seg.as_deref(), &mut rec)?;
            let prepared = rec.stage("prep", || pl::prepare_all(&cfg, &studies, &seg.masks))?;
            pl::write_prepared(&common.out, &cfg.schema, &prepared)?;
            rec.finish()?;
        }
        Command::Train {
            common,
            data,
            prep,
            folds,
            folds_file,
            seg_mode,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(f) = folds {
                cfg.folds = f;
            }
            if let Some(m) = seg_mode {
                cfg.seg_mode = m;
            }
            let mut rec = RunRecorder::new("train", &cfg, &common.out);
            rec.seed("train", cfg.train.seed);
            rec.seed("folds", cfg.fold_seed);
            io::create_dir_all(&common.out)?;
            let prepared: Vec<PreparedStudy> = match (&prep, &data) {
                (Some(dir), _) => {
                    rec.input("prep", dir);
                    let ids = pl::list_prepared(dir)?;
                    pl::read_prepared(dir, &ids, &cfg.schema)?
                }
                (None, Some(dir)) => {
                    rec.input("data", dir);
                    let studies = load_dataset_for(&cfg, dir)?;
                    let seg = masks_for(&cfg, &studies, None, &mut rec)?;
                    if let Some((m, r)) = &seg.model {
                        pl::save_segmenter(&common.out.join("segmenter"), m, r)?;
                    }
                    rec.stage("prep", || pl::prepare_all(&cfg, &studies, &seg.masks))?
                }
                (None, None) => unreachable!("clap requires --data or --prep"),
            };
            let ids: Vec<String> = prepared.iter().map(|s| s.study_id.clone()).collect();
            let spec: FoldSpec = match &folds_file {
                Some(p) => {
                    rec.input("folds", p);
                    io::read_json(p)?
                }
                None => pl::fold_spec(cfg.folds, &ids, cfg.fold_seed)?,
            };
            io::write_json(&common.out.join("folds.json"), &spec)?;
            let models = rec.stage("train", || pl::train_models(&cfg, &prepared, &spec))?;
            for (m, man) in &models {
                pl::save_model(&common.out.join(&man.name), m, man)?;
            }
            rec.finish()?;
        }
        Command::Predict {
            common,
            model,
            data,
            prep,
            val_only,
            no_slices,
        } => {
            let (net, man) = pl::load_model(&model)?;
            let mut cfg = load_config(&common)?;
            cfg.schema = man.schema.clone();
            cfg.prep = man.prep.clone();
            cfg.model = man.model.clone();
            cfg.seg_mode = man.seg_mode;
            cfg.segmenter.organs = cfg.schema.group_count();
            let mut rec = RunRecorder::new("predict", &cfg, &common.out);
            rec.input("model", &model);
            let prepared = match (&prep, &data) {
                (Some(dir), _) => {
                    rec.input("prep", dir);
                    let ids = pl::list_prepared(dir)?;
                    pl::read_prepared(dir, &ids, &cfg.schema)?
                }
                (None, Some(dir)) => {
                    rec.input("data", dir);
                    let studies = load_dataset_for(&cfg, dir)?;
                    let masks = match cfg.seg_mode {
                        SegMode::Oracle => pl::segment_with(&cfg, &studies, None)?.masks,
                        SegMode::Trained => {
                            let seg_dir = model.parent().unwrap_or(Path::new(".")).join("segmenter");
                            let segm = pl::load_segmenter(&seg_dir)?;
                            rec.stage("segment", || pl::segment_with(&cfg, &studies, Some(segm)))?.masks
                        }
                    };
                    rec.stage("prep", || pl::prepare_all(&cfg, &studies, &masks))?
                }
                (None, None) => unreachable!("clap requires --data or --prep"),
            };
            let targets: Vec<&PreparedStudy> = if val_only {
                pl::select(&prepared, &man.val_ids)?
            } else {
                prepared.iter().collect()
            };
            let (patients, slices) = rec.stage("predict", || pl::predict_studies(&net, &targets, &cfg.schema))?;
            let file = PredictionFile::new(&man.name, &cfg.schema, &patients, (!no_slices).then_some(slices));
            io::create_dir_all(&common.out)?;
            io::write_json(&common.out.join(format!("preds_{}.json", man.name)), &file)?;
            rec.finish()?;
        }
        Command::Ensemble {
            common,
            preds,
            mode,
            name,
        } => {
            let cfg = load_config(&common)?;
            let mut rec = RunRecorder::new("ensemble", &cfg, &common.out);
            let files = preds
                .iter()
                .map(|p| {
                    rec.input(&p.display().to_string(), p);
                    io::read_json::<PredictionFile>(p)
                })
                .collect::<Result<Vec<_>>>()?;
            let merged = pl::ensemble_files(&files, mode, &name)?;
            io::create_dir_all(&common.out)?;
            io::write_json(&common.out.join(format!("preds_{name}.json")), &merged)?;
            rec.finish()?;
        }
        Command::Eval {
            common,
            preds,
            data,
            schema,
        } => {
            let cfg = load_config(&common)?;
            let mut rec = RunRecorder::new("eval", &cfg, &common.out);
            rec.input("preds", &preds);
            rec.input("data", &data);
            let schema = pl::load_schema(&schema.unwrap_or_else(|| data.join("schema.json")))?;
            let file: PredictionFile = io::read_json(&preds)?;
            let ids: Vec<String> = file.studies.keys().cloned().collect();
            let truth = pl::read_truth(&data, &schema, &ids)?;
            let report = pl::evaluate_file(&file, &truth, &schema, &cfg.metric)?;
            io::create_dir_all(&common.out)?;
            io::write_json(&common.out.join("report.json"), &report)?;
            println!("final score {:.6}", report.final_score);
            rec.finish()?;
        }
        Command::Folds { common, data, k } => {
            let cfg = load_config(&common)?;
            let mut rec = RunRecorder::new("folds", &cfg, &common.out);
            rec.input("data", &data);
            rec.seed("folds", cfg.fold_seed);
            let manifest = phantom::read_manifest(&data)?;
            let ids: Vec<String> = manifest.studies.iter().map(|s| s.id.clone()).collect();
            let spec = pl::fold_spec(k.unwrap_or(cfg.folds), &ids, cfg.fold_seed)?;
            io::create_dir_all(&common.out)?;
            io::write_json(&common.out.join("folds.json"), &spec)?;
            rec.finish()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
