//! File-to-file drivers behind the command-line tool.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    check_pair_id, load_checkpoint, read_annotations, save_checkpoint, tensor_shape, write_annotations, write_tensor,
    PairEntry,
};
use crate::metrics::{pck_table, write_pck_csv, EvalRecord, NormalizerKind, PckMode, PckRow};
use crate::model::{match_pair, predict_keypoints, ModelConfig, TrainableBundle, IDENTITY_GAIN};
use crate::ssm::ScanMode;
use crate::synth::{generate, SynthConfig};
use crate::train::{dataset_loss, train_loop, TrainConfig, TrainState, TrainingSample};
use crate::transfer::{DEFAULT_SIGMA, TAU_EVAL};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const KEYPOINTS_FILE: &str = "keypoints.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REFINED_DIR: &str = "refined";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmt";
pub const LOSS_FILE: &str = "loss.csv";

/// Writes a synthetic dataset as `.mmt` features plus an annotation file.
pub fn gen_synth(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let pairs = generate::<f32>(cfg)?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let id = &p.annotation.pair_id;
        let src = PathBuf::from("features").join(format!("{id}_src.mmt"));
        let tgt = PathBuf::from("features").join(format!("{id}_tgt.mmt"));
        write_tensor(&out_dir.join(&src), &p.source)?;
        write_tensor(&out_dir.join(&tgt), &p.target)?;
        entries.push(PairEntry::from_annotation(&p.annotation, src, tgt));
    }
    let path = out_dir.join(ANNOTATIONS_FILE);
    write_annotations(&path, &entries)?;
    Ok(path)
}

/// Where the model comes from when matching or training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelSource {
    Checkpoint { path: PathBuf },
    /// Pass-through aggregation and scan, one-hot projection on the last level.
    Identity { gain: f64 },
    Random { seed: u64 },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Identity { gain: IDENTITY_GAIN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub annotations: PathBuf,
    pub output: PathBuf,
    pub model: ModelSource,
    pub tau: f64,
    pub sigma: f64,
    pub alphas: Vec<f64>,
    pub modes: Vec<PckMode>,
    pub normalizer: NormalizerKind,
    pub scan_mode: ScanMode,
    /// Blocks for a fresh (non-checkpoint) model.
    pub blocks: usize,
    pub write_refined: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            annotations: PathBuf::from(ANNOTATIONS_FILE),
            output: PathBuf::from("out"),
            model: ModelSource::default(),
            tau: TAU_EVAL,
            sigma: DEFAULT_SIGMA,
            alphas: vec![0.05, 0.1, 0.15],
            modes: vec![PckMode::PerImage, PckMode::PerPoint],
            normalizer: NormalizerKind::Bbox,
            scan_mode: ScanMode::default(),
            blocks: 1,
            write_refined: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSummary {
    pub pairs: usize,
    pub keypoints: usize,
    pub rows: Vec<PckRow>,
}

/// One line of `keypoints.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointRow {
    pub pair_id: String,
    pub category: String,
    pub index: usize,
    pub src_x: f64,
    pub src_y: f64,
    pub pred_x: f64,
    pub pred_y: f64,
    pub gt_x: f64,
    pub gt_y: f64,
    pub error_px: f64,
    pub bbox_norm_px: f64,
    pub image_norm_px: f64,
}

fn resolve_model(source: &ModelSource, levels: usize, channels: usize, blocks: usize) -> Result<(ModelConfig, TrainableBundle<f32>)> {
    let fresh = ModelConfig {
        levels,
        channels,
        blocks,
        ..ModelConfig::default()
    };
    match source {
        ModelSource::Checkpoint { path } => {
            let (cfg, state) = load_checkpoint(path)?;
            Ok((cfg, state.bundle))
        }
        ModelSource::Identity { gain } => Ok((fresh.clone(), TrainableBundle::identity(&fresh, *gain)?)),
        ModelSource::Random { seed } => Ok((fresh.clone(), TrainableBundle::init(&fresh, *seed)?)),
    }
}

/// Checks every pair before anything is written: ids, keypoints, file
/// headers and feature shapes. Returns entries sorted by pair id and the
/// common `[levels, C, H, W]`.
fn preflight(annotations: &Path) -> Result<(Vec<PairEntry>, Vec<usize>)> {
    let mut entries = read_annotations(annotations)?;
    if entries.is_empty() {
        return Err(Error::Empty(format!("{} lists no pairs", annotations.display())));
    }
    entries.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let mut common: Option<Vec<usize>> = None;
    for e in &entries {
        let check = || -> Result<Vec<usize>> {
            check_pair_id(&e.pair_id)?;
            let s = tensor_shape(&e.source_features)?;
            let t = tensor_shape(&e.target_features)?;
            if s.len() != 4 || s != t {
                return Err(Error::shape(format!("feature shapes {s:?} and {t:?}, expected equal [levels, C, H, W]")));
            }
            Ok(s)
        };
        let shape = check().map_err(|err| err.in_pair(&e.pair_id))?;
        match &common {
            None => common = Some(shape),
            Some(c) if c[..2] != shape[..2] => {
                return Err(Error::shape(format!("levels/channels {:?} differ from {:?}", &shape[..2], &c[..2])).in_pair(&e.pair_id));
            }
            Some(_) => {}
        }
    }
    Ok((entries, common.expect("non-empty")))
}

/// Matches every annotated pair and writes refined maps, transferred
/// keypoints and a PCK table under `cfg.output`.
pub fn run_match(cfg: &MatchConfig) -> Result<MatchSummary> {
    if cfg.alphas.is_empty() || cfg.modes.is_empty() {
        return Err(Error::invalid("at least one alpha and one PCK mode are required"));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {}", cfg.tau)));
    }
    let (entries, shape) = preflight(&cfg.annotations)?;
    let (mut model, bundle) = resolve_model(&cfg.model, shape[0], shape[1], cfg.blocks)?;
    model.sigma = cfg.sigma;
    model.scan_mode = cfg.scan_mode;
    model.validate()?;
    bundle.check(&model)?;
    if model.levels != shape[0] || model.channels != shape[1] {
        return Err(Error::shape(format!(
            "model expects {} levels of {} channels, features have {} of {}",
            model.levels, model.channels, shape[0], shape[1]
        )));
    }

    let refined_dir = cfg.output.join(REFINED_DIR);
    fs::create_dir_all(if cfg.write_refined { &refined_dir } else { &cfg.output })?;
    let mut kp_out = csv::Writer::from_writer(BufWriter::new(File::create(cfg.output.join(KEYPOINTS_FILE))?));
    let mut records = Vec::with_capacity(entries.len());
    let mut keypoints = 0;
    for e in &entries {
        let sample = e.load()?;
        let mut step = || -> Result<EvalRecord> {
            let pred = match_pair(&bundle, &model, &sample.source, &sample.target)?;
            let kps = predict_keypoints(&pred, &sample.annotation.source, cfg.tau)?;
            if cfg.write_refined {
                write_tensor(&refined_dir.join(format!("{}.mmt", e.pair_id)), &pred.refined.levels)?;
            }
            let ann = &sample.annotation;
            let bbox = EvalRecord::from_prediction(ann, &kps, NormalizerKind::Bbox)?;
            let image = EvalRecord::from_prediction(ann, &kps, NormalizerKind::Image)?;
            for (i, (((s, t), p), ((err, bn), (_, inn)))) in ann
                .source
                .iter()
                .zip(&ann.target)
                .zip(&kps)
                .zip(bbox.keypoints.iter().zip(&image.keypoints))
                .enumerate()
            {
                kp_out.serialize(KeypointRow {
                    pair_id: e.pair_id.clone(),
                    category: ann.category.clone(),
                    index: i,
                    src_x: s.x,
                    src_y: s.y,
                    pred_x: p.x,
                    pred_y: p.y,
                    gt_x: t.x,
                    gt_y: t.y,
                    error_px: *err,
                    bbox_norm_px: *bn,
                    image_norm_px: *inn,
                })?;
            }
            Ok(match cfg.normalizer {
                NormalizerKind::Bbox => bbox,
                NormalizerKind::Image => image,
            })
        };
        let record = step().map_err(|err| err.in_pair(&e.pair_id))?;
        keypoints += record.keypoints.len();
        records.push(record);
    }
    kp_out.flush()?;
    let rows = pck_table(&records, &cfg.alphas, &cfg.modes, cfg.normalizer)?;
    write_pck_csv(File::create(cfg.output.join(METRICS_FILE))?, &rows)?;
    Ok(MatchSummary {
        pairs: records.len(),
        keypoints,
        rows,
    })
}

/// Recomputes a PCK table from a `keypoints.csv` written by [`run_match`].
pub fn run_eval(
    keypoints_csv: &Path,
    alphas: &[f64],
    modes: &[PckMode],
    normalizer: NormalizerKind,
) -> Result<Vec<PckRow>> {
    let mut reader = csv::Reader::from_path(keypoints_csv)?;
    let mut by_pair: BTreeMap<String, EvalRecord> = BTreeMap::new();
    for row in reader.deserialize() {
        let r: KeypointRow = row?;
        let norm = match normalizer {
            NormalizerKind::Bbox => r.bbox_norm_px,
            NormalizerKind::Image => r.image_norm_px,
        };
        by_pair
            .entry(r.pair_id.clone())
            .or_insert_with(|| EvalRecord {
                pair_id: r.pair_id,
                category: r.category,
                keypoints: Vec::new(),
            })
            .keypoints
            .push((r.error_px, norm));
    }
    let records: Vec<EvalRecord> = by_pair.into_values().collect();
    for r in &records {
        r.validate()?;
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("{} holds no keypoints", keypoints_csv.display())));
    }
    pck_table(&records, alphas, modes, normalizer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub annotations: PathBuf,
    pub output: PathBuf,
    /// Continue from this checkpoint instead of a fresh init.
    pub resume: Option<PathBuf>,
    pub init_seed: u64,
    pub blocks: usize,
    pub sigma: f64,
    pub scan_mode: ScanMode,
    pub loss: crate::transfer::LossForm,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            annotations: PathBuf::from(ANNOTATIONS_FILE),
            output: PathBuf::from("train-out"),
            resume: None,
            init_seed: 0,
            blocks: model.blocks,
            sigma: model.sigma,
            scan_mode: model.scan_mode,
            loss: model.loss,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<f64>,
}

/// Trains on an annotation file and writes `checkpoint.mmt` (+ manifest) and
/// `loss.csv` under `cfg.output`. Initial and final losses are dataset means
/// at the training radius.
pub fn run_train(cfg: &TrainRunConfig) -> Result<TrainSummary> {
    let (entries, shape) = preflight(&cfg.annotations)?;
    let dataset: Vec<TrainingSample<f32>> = entries.iter().map(PairEntry::load).collect::<Result<_>>()?;
    let (model, mut state) = match &cfg.resume {
        Some(path) => load_checkpoint(path)?,
        None => {
            let model = ModelConfig {
                levels: shape[0],
                channels: shape[1],
                blocks: cfg.blocks,
                sigma: cfg.sigma,
                scan_mode: cfg.scan_mode,
                loss: cfg.loss,
                ..ModelConfig::default()
            };
            let bundle = TrainableBundle::init(&model, cfg.init_seed)?;
            (model, TrainState::new(bundle))
        }
    };
    model.validate()?;
    let initial_loss = dataset_loss(&state.bundle, &model, &dataset, cfg.train.tau)?;
    let history = train_loop(&dataset, &mut state, &model, &cfg.train)?;
    let final_loss = dataset_loss(&state.bundle, &model, &dataset, cfg.train.tau)?;

    fs::create_dir_all(&cfg.output)?;
    save_checkpoint(&cfg.output.join(CHECKPOINT_FILE), &model, &state)?;
    let mut out = csv::Writer::from_writer(BufWriter::new(File::create(cfg.output.join(LOSS_FILE))?));
    out.write_record(["step", "loss"])?;
    let first = state.step - history.len() as u64;
    for (i, l) in history.iter().enumerate() {
        out.write_record([(first + i as u64).to_string(), format!("{l:e}")])?;
    }
    out.flush()?;
    Ok(TrainSummary {
        steps: state.step,
        initial_loss,
        final_loss,
        history,
    })
}
