//! The trainable parameter bundle and the inference-time matching pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    build_multilevel, feature_aggregate, refine_project, scan_sorted_sequence, AggregationParams, CorrelationMap,
    FeatureSet, SortOrder,
};
use crate::ssm::{uniform_tensor, ScanMode, SsmConfig, SsmParams};
use crate::tensor::{Permutation, Real, Tensor};
use crate::transfer::{dense_flow, normalize_with_kernel, soft_sample_keypoints, FlowField, Keypoint, LossForm, DEFAULT_SIGMA};

/// Gain of the one-hot refining projection used by [`TrainableBundle::identity`].
pub const IDENTITY_GAIN: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature levels (`2L`), also the scan block width.
    pub levels: usize,
    /// Feature channels `C`.
    pub channels: usize,
    /// Stacked scan blocks, sorted once per pass.
    pub blocks: usize,
    pub sigma: f64,
    pub order: SortOrder,
    pub scan_mode: ScanMode,
    pub loss: LossForm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            channels: 768,
            blocks: 1,
            sigma: DEFAULT_SIGMA,
            order: SortOrder::Descending,
            scan_mode: ScanMode::default(),
            loss: LossForm::Squared,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels == 0 {
            return Err(Error::invalid("levels and channels must be positive"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("kernel sigma must be positive, got {}", self.sigma)));
        }
        if let ScanMode::Parallel { chunk: 0 } = self.scan_mode {
            return Err(Error::invalid("scan chunk must be positive"));
        }
        Ok(())
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig::for_model(self.levels)
    }
}

/// Everything that trains: aggregation convs, scan blocks, refining projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableBundle<R = f32> {
    pub aggregation: AggregationParams<R>,
    pub blocks: Vec<SsmParams<R>>,
    /// `[1, levels]`
    pub proj_w: Tensor<R>,
    /// `[1]`
    pub proj_b: Tensor<R>,
}

impl<R: Real> TrainableBundle<R> {
    /// Seeded fan-in uniform init.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aggregation = AggregationParams::init(cfg.channels, &mut rng);
        let blocks = (0..cfg.blocks).map(|_| SsmParams::init(cfg.ssm(), &mut rng)).collect();
        let bound = 1.0 / (cfg.levels as f64).sqrt();
        Ok(Self {
            aggregation,
            blocks,
            proj_w: uniform_tensor(&mut rng, &[1, cfg.levels], bound),
            proj_b: uniform_tensor(&mut rng, &[1], bound),
        })
    }

    /// Pass-through bundle: ReLU-only aggregation, residual-only blocks, and
    /// a projection reading the last level scaled by `gain`.
    pub fn identity(cfg: &ModelConfig, gain: f64) -> Result<Self> {
        let mut bundle = Self::init(cfg, 0)?;
        bundle.aggregation = AggregationParams::identity(cfg.channels);
        for b in &mut bundle.blocks {
            b.w_out = Tensor::zeros(b.w_out.shape());
        }
        bundle.proj_w = Tensor::zeros(&[1, cfg.levels]);
        bundle.proj_w.data_mut()[cfg.levels - 1] = R::of(gain);
        bundle.proj_b = Tensor::zeros(&[1]);
        Ok(bundle)
    }

    /// Parameters in a fixed order with dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out: Vec<(String, &Tensor<R>)> = self
            .aggregation
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("aggregation.{n}"), t))
            .collect();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("proj.w".into(), &self.proj_w));
        out.push(("proj.b".into(), &self.proj_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<R>)> {
        let mut out: Vec<(String, &mut Tensor<R>)> = self
            .aggregation
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("aggregation.{n}"), t))
            .collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("proj.w".into(), &mut self.proj_w));
        out.push(("proj.b".into(), &mut self.proj_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<S: Real>(&self) -> TrainableBundle<S> {
        TrainableBundle {
            aggregation: self.aggregation.cast(),
            blocks: self.blocks.iter().map(SsmParams::cast).collect(),
            proj_w: self.proj_w.cast(),
            proj_b: self.proj_b.cast(),
        }
    }

    /// Checks every shape against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let fresh = TrainableBundle::<R>::init(cfg, 0)?;
        if fresh.blocks.len() != self.blocks.len() {
            return Err(Error::shape(format!(
                "bundle has {} scan blocks, config asks for {}",
                self.blocks.len(),
                fresh.blocks.len()
            )));
        }
        for ((name, a), (_, b)) in self.named().iter().zip(fresh.named()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!("{name}: {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

/// Everything the matching pass produces for one pair.
#[derive(Clone, Debug)]
pub struct PairPrediction<R = f32> {
    pub refined: CorrelationMap<R>,
    pub flow: FlowField<R>,
    pub permutation: Permutation,
}

/// Aggregation → multi-level correlation → sorted scan → projection →
/// kernel soft-argmax → dense flow.
pub fn match_pair<R: Real>(
    bundle: &TrainableBundle<R>,
    cfg: &ModelConfig,
    source: &FeatureSet<R>,
    target: &FeatureSet<R>,
) -> Result<PairPrediction<R>> {
    check_features(cfg, source, target)?;
    let agg_s = feature_aggregate(source, &bundle.aggregation)?;
    let agg_t = feature_aggregate(target, &bundle.aggregation)?;
    let corr = build_multilevel(&agg_s, &agg_t)?;
    drop((agg_s, agg_t));
    let (h, w) = corr.grid();
    let seq = corr.to_sequence();
    drop(corr);
    let (out, permutation) = scan_sorted_sequence(&seq, &bundle.blocks, cfg.scan_mode, cfg.order)?;
    drop(seq);
    let refined = refine_project(&out, &bundle.proj_w, &bundle.proj_b, h, w)?;
    let norm = normalize_with_kernel(&refined.levels, cfg.sigma)?;
    let flow = dense_flow(&norm)?;
    Ok(PairPrediction {
        refined,
        flow,
        permutation,
    })
}

/// Predicted target keypoints for a pair.
pub fn predict_keypoints<R: Real>(prediction: &PairPrediction<R>, source: &[Keypoint], tau: f64) -> Result<Vec<Keypoint>> {
    soft_sample_keypoints(&prediction.flow, source, tau)
}

pub(crate) fn check_features<R: Real>(cfg: &ModelConfig, source: &FeatureSet<R>, target: &FeatureSet<R>) -> Result<()> {
    for f in [source, target] {
        if f.n_levels() != cfg.levels || f.channels() != cfg.channels {
            return Err(Error::shape(format!(
                "features are {:?}, model expects {} levels of {} channels",
                f.levels.shape(),
                cfg.levels,
                cfg.channels
            )));
        }
    }
    if source.levels.shape() != target.levels.shape() {
        return Err(Error::shape(format!(
            "source features {:?} vs target {:?}",
            source.levels.shape(),
            target.levels.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::FeatureMeta;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            levels: 4,
            channels: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let b = TrainableBundle::<f32>::init(&cfg(), 1).unwrap();
        let names: Vec<String> = b.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "aggregation.w1");
        assert_eq!(names.last().unwrap(), "proj.b");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        b.check(&cfg()).unwrap();
        let wide = ModelConfig { levels: 5, ..cfg() };
        assert!(b.check(&wide).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = TrainableBundle::<f32>::init(&cfg(), 7).unwrap();
        assert_eq!(a, TrainableBundle::init(&cfg(), 7).unwrap());
        assert_ne!(a, TrainableBundle::init(&cfg(), 8).unwrap());
    }

    #[test]
    fn identity_bundle_matches_self_pair() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FeatureSet::new(
            Tensor::<f32>::from_fn(&[4, 16, 5, 5], |_| rng.gen_range(-1.0..1.0)),
            FeatureMeta::default(),
        )
        .unwrap();
        let b = TrainableBundle::identity(&c, IDENTITY_GAIN).unwrap();
        let pred = match_pair(&b, &c, &f, &f).unwrap();
        for (s, p) in pred.flow.transferred.data().chunks(2).enumerate() {
            // relu can zero a whole cell; skip those
            assert!((p[0] - (s / 5) as f32).abs() < 1e-3, "cell {s}: {p:?}");
            assert!((p[1] - (s % 5) as f32).abs() < 1e-3, "cell {s}: {p:?}");
        }
    }

    #[test]
    fn rejects_wrong_feature_shape() {
        let c = cfg();
        let b = TrainableBundle::<f32>::init(&c, 0).unwrap();
        let f = FeatureSet::new(Tensor::zeros(&[4, 2, 3, 3]), FeatureMeta::default()).unwrap();
        assert!(match_pair(&b, &c, &f, &f).is_err());
    }
}
