//! Differentiable forward pass, finite-difference gradient check, and the
//! Adam training loop. Input features are never modified.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{check_features, match_pair, predict_keypoints, ModelConfig, TrainableBundle};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::pipeline::{scan_order, FeatureMeta, FeatureSet};
use crate::synth::{generate, SynthConfig};
use crate::tensor::{Permutation, Real, Tensor};
use crate::transfer::{argmax_rows, keypoint_loss, KeypointAnnotation, SamplerWeights, TAU_TRAIN};

/// Pass threshold on the per-group relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-3;
/// Denominator floor of the relative errors.
pub const GRAD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample<R = f32> {
    pub source: FeatureSet<R>,
    pub target: FeatureSet<R>,
    pub annotation: KeypointAnnotation,
}

impl<R: Real> TrainingSample<R> {
    pub fn cast<S: Real>(&self) -> TrainingSample<S> {
        let cast = |f: &FeatureSet<R>| FeatureSet {
            levels: f.levels.cast(),
            meta: f.meta.clone(),
        };
        TrainingSample {
            source: cast(&self.source),
            target: cast(&self.target),
            annotation: self.annotation.clone(),
        }
    }
}

/// Synthetic samples built in memory.
pub fn synthetic_dataset<R: Real>(cfg: &SynthConfig) -> Result<Vec<TrainingSample<R>>> {
    Ok(generate::<R>(cfg)?
        .into_iter()
        .map(|p| {
            let meta = |side: &str| FeatureMeta {
                image_id: format!("{}-{side}", p.annotation.pair_id),
                provenance: "synthetic".into(),
            };
            TrainingSample {
                source: FeatureSet { levels: p.source, meta: meta("src") },
                target: FeatureSet { levels: p.target, meta: meta("tgt") },
                annotation: p.annotation,
            }
        })
        .collect())
}

/// The piecewise-constant choices of one forward pass: sort order, kernel
/// peaks, and ReLU activation patterns.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenChoices {
    pub permutation: Permutation,
    pub peaks: Vec<usize>,
    pub relu_masks: Vec<Vec<bool>>,
}

/// A recorded forward pass.
pub struct TapedPass<R: Real> {
    pub tape: Tape<R>,
    /// Parameter leaves in [`TrainableBundle::named`] order.
    pub params: Vec<Var>,
    pub loss: Var,
    pub choices: FrozenChoices,
}

impl<R: Real> TapedPass<R> {
    pub fn loss_value(&self) -> R {
        self.tape.value(self.loss).data()[0]
    }

    /// Gradients in [`TrainableBundle::named`] order, zeros where none arrived.
    pub fn gradients(&self) -> Result<Vec<Tensor<R>>> {
        let grads = self.tape.backward(self.loss)?;
        Ok(self
            .params
            .iter()
            .map(|&v| grads.get_or_zeros(v, self.tape.value(v)))
            .collect())
    }
}

/// Records loss of one sample on a fresh tape. With `frozen`, the sort
/// order, argmax peaks and ReLU patterns are taken from it instead of
/// being recomputed.
pub fn record_pass<R: Real>(
    bundle: &TrainableBundle<R>,
    cfg: &ModelConfig,
    sample: &TrainingSample<R>,
    tau: f64,
    frozen: Option<&FrozenChoices>,
) -> Result<TapedPass<R>> {
    check_features(cfg, &sample.source, &sample.target)?;
    sample.annotation.validate()?;
    let (h, w) = sample.source.grid();
    let hw = h * w;
    let mut tape = Tape::new();
    let params: Vec<Var> = bundle.named().into_iter().map(|(_, t)| tape.param(t.clone())).collect();
    let [w1, b1, w2, b2] = [params[0], params[1], params[2], params[3]];

    let mut masks = Vec::with_capacity(4);
    let mut aggregate = |tape: &mut Tape<R>, f: &FeatureSet<R>| -> Result<Var> {
        let x = tape.constant(f.levels.clone());
        let mut act = x;
        for (wv, bv) in [(w1, b1), (w2, b2)] {
            let pre = tape.conv2d(act, wv, bv)?;
            let pinned = frozen.map(|c| c.relu_masks[masks.len()].as_slice());
            let (out, mask) = tape.relu(pre, pinned)?;
            masks.push(mask);
            act = out;
        }
        Ok(act)
    };
    let fs = aggregate(&mut tape, &sample.source)?;
    let ft = aggregate(&mut tape, &sample.target)?;
    let corr = tape.cosine_levels(fs, ft)?;
    let seq = tape.transpose(corr)?;

    let permutation = match frozen {
        Some(c) => c.permutation.clone(),
        None => scan_order(tape.value(seq), cfg.order)?,
    };
    let mut x = tape.gather_rows(seq, &permutation)?;
    for (b, block) in bundle.blocks.iter().enumerate() {
        let v = &params[4 + 8 * b..4 + 8 * (b + 1)];
        x = block_pass(&mut tape, x, v, block.config().d_inner, block.config().d_state)?;
    }
    let x = tape.gather_rows(x, &permutation.inverse())?;
    let (proj_w, proj_b) = (params[params.len() - 2], params[params.len() - 1]);
    let refined = tape.linear(x, proj_w, Some(proj_b))?;
    let refined = tape.reshape(refined, &[hw, hw])?;

    let peaks = match frozen {
        Some(c) => c.peaks.clone(),
        None => argmax_rows(tape.value(refined).data(), hw),
    };
    let norm = tape.kernel_softmax(refined, peaks.clone(), h, w, cfg.sigma)?;
    let coords = Tensor::from_fn(&[hw, 2], |i| R::of(if i % 2 == 0 { (i / 2) / w } else { (i / 2) % w } as f64));
    let flow = tape.matmul_const(norm, coords, None)?;
    // (row, col) cells to normalized (x, y)
    let to_xy = Tensor::new(vec![2, 2], vec![R::zero(), R::of(1.0 / h as f64), R::of(1.0 / w as f64), R::zero()])?;
    let flow = tape.matmul_const(flow, to_xy, Some(vec![R::of(0.5 / w as f64), R::of(0.5 / h as f64)]))?;

    let ann = &sample.annotation;
    let mix = ann
        .source
        .iter()
        .map(|kp| {
            let sw = SamplerWeights::new(kp, h, w, tau)?;
            Ok(sw.entries.into_iter().map(|(cell, wt)| (cell, R::of(wt))).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted = tape.mix_rows(flow, mix)?;
    let truth = Tensor::from_fn(&[ann.target.len(), 2], |i| {
        let k = &ann.target[i / 2];
        R::of(if i % 2 == 0 { k.x } else { k.y })
    });
    let loss = tape.keypoint_loss(predicted, truth, cfg.loss)?;
    Ok(TapedPass {
        tape,
        params,
        loss,
        choices: FrozenChoices {
            permutation,
            peaks,
            relu_masks: masks,
        },
    })
}

/// One scan block on the tape; `v` holds its eight parameters in
/// [`crate::ssm::SsmParams::tensors`] order.
fn block_pass<R: Real>(tape: &mut Tape<R>, input: Var, v: &[Var], di: usize, ds: usize) -> Result<Var> {
    let [a_log, w_in, conv_k, conv_b, w_x, delta_bias, d_skip, w_out] = [v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]];
    let xz = tape.linear(input, w_in, None)?;
    let stream = tape.slice_cols(xz, 0..di)?;
    let gate = tape.slice_cols(xz, di..2 * di)?;
    let conv = tape.causal_conv1d(stream, conv_k, conv_b)?;
    let xc = tape.silu(conv);
    let proj = tape.linear(xc, w_x, None)?;
    let b = tape.slice_cols(proj, 0..ds)?;
    let c = tape.slice_cols(proj, ds..2 * ds)?;
    let pre = tape.slice_cols(proj, 2 * ds..2 * ds + 1)?;
    let pre = tape.outer_add(pre, delta_bias)?;
    let delta = tape.softplus(pre);
    let y = tape.selective_scan(xc, delta, a_log, b, c, d_skip)?;
    let g = tape.silu(gate);
    let gated = tape.mul(y, g)?;
    let out = tape.linear(gated, w_out, None)?;
    tape.add(out, input)
}

/// Loss and gradients of one sample.
pub fn loss_and_gradients<R: Real>(
    bundle: &TrainableBundle<R>,
    cfg: &ModelConfig,
    sample: &TrainingSample<R>,
    tau: f64,
) -> Result<(R, Vec<Tensor<R>>)> {
    let pass = record_pass(bundle, cfg, sample, tau, None)?;
    Ok((pass.loss_value(), pass.gradients()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    /// `max|a - n| / max(max|a|, max|n|)` over the group; this is what passes or fails.
    pub max_rel_error: f64,
    /// Worst single-entry relative error, informational: entries whose
    /// gradient is far below the group scale are dominated by truncation.
    pub max_entry_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude in the group.
    pub max_grad: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`, also used with group maxima.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares every analytic gradient entry with a central difference of the
/// loss at `±step`. The sort order, kernel peaks and ReLU patterns are
/// pinned to those of the unperturbed pass, so the differenced function is
/// smooth and has the same gradient at the base point.
pub fn grad_check(
    bundle: &TrainableBundle<f64>,
    cfg: &ModelConfig,
    sample: &TrainingSample<f64>,
    tau: f64,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("difference step must be positive, got {step}")));
    }
    let base = record_pass(bundle, cfg, sample, tau, None)?;
    let analytic = base.gradients()?;
    let frozen = base.choices.clone();
    let loss = base.loss_value();
    drop(base);
    let eval = |b: &TrainableBundle<f64>| -> Result<f64> { Ok(record_pass(b, cfg, sample, tau, Some(&frozen))?.loss_value()) };

    let names: Vec<String> = bundle.named().into_iter().map(|(n, _)| n).collect();
    let mut groups = Vec::with_capacity(names.len());
    let mut probe = bundle.clone();
    for (g, name) in names.iter().enumerate() {
        let count = analytic[g].numel();
        let (mut max_entry, mut max_abs, mut max_grad, mut max_numeric) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..count {
            let orig = probe.named()[g].1.data()[i];
            set_entry(&mut probe, g, i, orig + step);
            let plus = eval(&probe)?;
            set_entry(&mut probe, g, i, orig - step);
            let minus = eval(&probe)?;
            set_entry(&mut probe, g, i, orig);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[g].data()[i];
            max_entry = max_entry.max(relative_error(a, numeric, GRAD_FLOOR));
            max_abs = max_abs.max((a - numeric).abs());
            max_grad = max_grad.max(a.abs());
            max_numeric = max_numeric.max(numeric.abs());
        }
        let max_rel = max_abs / max_grad.max(max_numeric).max(GRAD_FLOOR);
        groups.push(GroupReport {
            name: name.clone(),
            count,
            max_rel_error: max_rel,
            max_entry_rel_error: max_entry,
            max_abs_error: max_abs,
            max_grad,
            passed: max_rel <= GRAD_TOLERANCE,
        });
    }
    Ok(GradCheckReport {
        step,
        tolerance: GRAD_TOLERANCE,
        loss,
        groups,
    })
}

fn set_entry(bundle: &mut TrainableBundle<f64>, group: usize, index: usize, value: f64) {
    bundle.named_mut().swap_remove(group).1.data_mut()[index] = value;
}

/// The small instance gradient checks run on: a 6×6 grid, 4 levels,
/// 8 channels, one translated synthetic pair.
pub fn toy_instance(seed: u64) -> Result<(TrainableBundle<f64>, ModelConfig, TrainingSample<f64>)> {
    let synth = SynthConfig {
        seed,
        height: 6,
        width: 6,
        channels: 8,
        levels: 4,
        pairs: 1,
        keypoints: 5,
        max_shift: 1,
        shift: None,
    };
    let cfg = ModelConfig {
        levels: 4,
        channels: 8,
        ..ModelConfig::default()
    };
    let sample = synthetic_dataset::<f64>(&synth)?.remove(0);
    Ok((TrainableBundle::init(&cfg, seed)?, cfg, sample))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Soft-sampler radius during training.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            seed: 0,
            tau: TAU_TRAIN,
        }
    }
}

/// Parameters plus one Adam state per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bundle: TrainableBundle<f32>,
    pub optimizer: Vec<AdamState<f32>>,
    pub step: u64,
}

impl TrainState {
    pub fn new(bundle: TrainableBundle<f32>) -> Self {
        let optimizer = bundle.named().iter().map(|(_, t)| AdamState::new(t.shape())).collect();
        Self {
            bundle,
            optimizer,
            step: 0,
        }
    }
}

/// Sample index for global step `step`: each pass over the data is a fresh
/// seeded shuffle, so a resumed run continues the same schedule.
fn sample_index(seed: u64, step: u64, n: usize) -> usize {
    let epoch = step / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    order[(step % n as u64) as usize]
}

/// Runs `cfg.steps` single-pair Adam steps, returning the loss of each step
/// before its update.
pub fn train_loop(
    dataset: &[TrainingSample<f32>],
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if !(cfg.lr >= 0.0) || !(cfg.tau > 0.0) {
        return Err(Error::invalid(format!("lr {} / tau {}", cfg.lr, cfg.tau)));
    }
    state.bundle.check(model)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let sample = &dataset[sample_index(cfg.seed, state.step, dataset.len())];
        let (loss, grads) = loss_and_gradients(&state.bundle, model, sample, cfg.tau)
            .map_err(|e| e.in_pair(&sample.annotation.pair_id))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        history.push(loss as f64);
        for (((_, p), g), st) in state.bundle.named_mut().into_iter().zip(&grads).zip(&mut state.optimizer) {
            adam_step(p, g, st, &adam)?;
        }
        state.step += 1;
    }
    Ok(history)
}

/// Mean keypoint loss over a dataset through the inference path.
pub fn dataset_loss(bundle: &TrainableBundle<f32>, model: &ModelConfig, dataset: &[TrainingSample<f32>], tau: f64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let mut total = 0.0;
    for s in dataset {
        let pred = match_pair(bundle, model, &s.source, &s.target).map_err(|e| e.in_pair(&s.annotation.pair_id))?;
        let kps = predict_keypoints(&pred, &s.annotation.source, tau)?;
        total += keypoint_loss(&kps, &s.annotation.target, model.loss)?;
    }
    Ok(total / dataset.len() as f64)
}
