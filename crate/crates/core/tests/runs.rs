use std::fs;
use std::path::Path;

use mamba_matcher::io::{load_checkpoint, read_tensor, tensor_shape};
use mamba_matcher::metrics::{NormalizerKind, PckMode};
use mamba_matcher::runs::{
    gen_synth, run_eval, run_match, run_train, MatchConfig, ModelSource, TrainRunConfig, CHECKPOINT_FILE,
    KEYPOINTS_FILE, LOSS_FILE, METRICS_FILE, REFINED_DIR,
};
use mamba_matcher::ssm::ScanMode;
use mamba_matcher::synth::SynthConfig;
use mamba_matcher::train::TrainConfig;
use mamba_matcher::Error;

fn synth(shift: Option<(i64, i64)>) -> SynthConfig {
    SynthConfig {
        height: 8,
        width: 8,
        channels: 16,
        levels: 4,
        pairs: 4,
        keypoints: 6,
        max_shift: 1,
        shift,
        ..SynthConfig::default()
    }
}

fn match_cfg(annotations: &Path, output: &Path) -> MatchConfig {
    MatchConfig {
        annotations: annotations.to_path_buf(),
        output: output.to_path_buf(),
        alphas: vec![0.1],
        modes: vec![PckMode::PerImage, PckMode::PerPoint],
        normalizer: NormalizerKind::Image,
        ..MatchConfig::default()
    }
}

#[test]
fn identity_model_is_perfect_on_zero_translation() {
    let dir = tempfile::tempdir().unwrap();
    let ann = gen_synth(&synth(Some((0, 0))), &dir.path().join("ds")).unwrap();
    let out = dir.path().join("out");
    let summary = run_match(&match_cfg(&ann, &out)).unwrap();
    assert_eq!(summary.pairs, 4);
    assert_eq!(summary.keypoints, 24);
    for row in &summary.rows {
        assert_eq!(row.pck, 1.0, "{row:?}");
    }
    for id in ["synth0000", "synth0003"] {
        let refined = read_tensor(&out.join(REFINED_DIR).join(format!("{id}.mmt"))).unwrap();
        assert_eq!(refined.shape(), [8, 8, 8, 8]);
    }
    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert!(metrics.starts_with("alpha,mode,normalizer,pck\n"));
    assert!(metrics.contains("0.1,per-image,image,1.0"));
}

#[test]
fn identity_model_follows_translations() {
    let dir = tempfile::tempdir().unwrap();
    let ann = gen_synth(&synth(None), &dir.path().join("ds")).unwrap();
    let summary = run_match(&match_cfg(&ann, &dir.path().join("out"))).unwrap();
    assert_eq!(summary.rows[0].pck, 1.0);
}

#[test]
fn full_size_grid_gives_full_size_refined_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        height: 30,
        width: 30,
        channels: 4,
        levels: 16,
        pairs: 1,
        keypoints: 3,
        shift: Some((0, 0)),
        ..SynthConfig::default()
    };
    let ann = gen_synth(&cfg, &dir.path().join("ds")).unwrap();
    let out = dir.path().join("out");
    run_match(&match_cfg(&ann, &out)).unwrap();
    let refined = out.join(REFINED_DIR).join("synth0000.mmt");
    assert_eq!(tensor_shape(&refined).unwrap(), vec![30, 30, 30, 30]);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ann = gen_synth(&synth(None), &dir.path().join("ds")).unwrap();
    let mut cfg = match_cfg(&ann, &dir.path().join("a"));
    cfg.model = ModelSource::Random { seed: 4 };
    run_match(&cfg).unwrap();
    cfg.output = dir.path().join("b");
    run_match(&cfg).unwrap();
    for f in [KEYPOINTS_FILE, METRICS_FILE, "refined/synth0002.mmt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn empty_annotation_list_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("empty.json");
    fs::write(&ann, "[]").unwrap();
    let out = dir.path().join("out");
    let err = run_match(&match_cfg(&ann, &out)).unwrap_err();
    assert!(matches!(err, Error::Empty(_)), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_feature_file_fails_before_output() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let ann = gen_synth(&synth(None), &ds).unwrap();
    fs::remove_file(ds.join("features/synth0002_src.mmt")).unwrap();
    let out = dir.path().join("out");
    let err = run_match(&match_cfg(&ann, &out)).unwrap_err();
    assert!(err.to_string().contains("synth0002"), "{err}");
    assert!(!out.exists());
}

#[test]
fn shape_mismatch_reports_pair_id() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_synth(&synth(None), &dir.path().join("a")).unwrap();
    let b = gen_synth(&SynthConfig { channels: 8, ..synth(None) }, &dir.path().join("b")).unwrap();
    // swap one target file for a narrower one
    fs::copy(
        dir.path().join("b/features/synth0001_tgt.mmt"),
        dir.path().join("a/features/synth0001_tgt.mmt"),
    )
    .unwrap();
    let _ = b;
    let err = run_match(&match_cfg(&a, &dir.path().join("out"))).unwrap_err();
    assert_eq!(err.class(), "shape");
    assert!(err.to_string().contains("synth0001"), "{err}");
}

#[test]
fn eval_reproduces_match_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ann = gen_synth(&synth(None), &dir.path().join("ds")).unwrap();
    let out = dir.path().join("out");
    let mut cfg = match_cfg(&ann, &out);
    cfg.model = ModelSource::Random { seed: 1 };
    cfg.alphas = vec![0.05, 0.1, 0.2];
    for normalizer in [NormalizerKind::Bbox, NormalizerKind::Image] {
        cfg.normalizer = normalizer;
        let summary = run_match(&cfg).unwrap();
        let rows = run_eval(&out.join(KEYPOINTS_FILE), &cfg.alphas, &cfg.modes, normalizer).unwrap();
        assert_eq!(rows, summary.rows);
    }
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ann = gen_synth(
        &SynthConfig { height: 5, width: 5, channels: 4, levels: 2, pairs: 2, keypoints: 3, ..synth(None) },
        &dir.path().join("ds"),
    )
    .unwrap();
    let cfg = TrainRunConfig {
        annotations: ann.clone(),
        output: dir.path().join("t1"),
        scan_mode: ScanMode::Sequential,
        train: TrainConfig { steps: 4, ..TrainConfig::default() },
        ..TrainRunConfig::default()
    };
    let s = run_train(&cfg).unwrap();
    assert_eq!(s.steps, 4);
    assert_eq!(s.history.len(), 4);
    let ck = cfg.output.join(CHECKPOINT_FILE);
    let (model, state) = load_checkpoint(&ck).unwrap();
    assert_eq!((model.levels, model.channels), (2, 4));
    assert_eq!(state.step, 4);
    let loss = fs::read_to_string(cfg.output.join(LOSS_FILE)).unwrap();
    assert_eq!(loss.lines().count(), 5);
    assert!(loss.starts_with("step,loss\n0,"));

    // resuming continues the step count and the loss log
    let resumed = TrainRunConfig {
        resume: Some(ck.clone()),
        output: dir.path().join("t2"),
        ..cfg.clone()
    };
    let s2 = run_train(&resumed).unwrap();
    assert_eq!(s2.steps, 8);
    let loss2 = fs::read_to_string(resumed.output.join(LOSS_FILE)).unwrap();
    assert!(loss2.lines().nth(1).unwrap().starts_with("4,"));

    // and the trained checkpoint drives `match`
    let mut m = match_cfg(&ann, &dir.path().join("m"));
    m.model = ModelSource::Checkpoint { path: ck };
    m.scan_mode = ScanMode::Sequential;
    assert_eq!(run_match(&m).unwrap().pairs, 2);
}
