//! Correlation pathway: feature aggregation, multi-level cosine correlation,
//! the similarity-aware selective scan, and the refining projection.
//!
//! The correlation sequence is the raster flattening of `(i, j, k, l)` with
//! `l` fastest, so position `(i·W + j)·H·W + k·W + l` pairs source cell
//! `(i, j)` with target cell `(k, l)`. Sorting keys on the last level's raw
//! score; ties keep raster order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argsort_desc_stable, conv2d_batch, l2_normalize_in_place, linear, relu};
use crate::ssm::{mamba_block_forward, uniform_tensor, ScanMode, SsmParams};
use crate::tensor::{Permutation, Real, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureMeta {
    pub image_id: String,
    /// Which layers/facets the levels came from.
    pub provenance: String,
}

/// Per-image stack of feature maps, `[levels, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet<R = f32> {
    pub levels: Tensor<R>,
    pub meta: FeatureMeta,
}

impl<R: Real> FeatureSet<R> {
    pub fn new(levels: Tensor<R>, meta: FeatureMeta) -> Result<Self> {
        levels.dims4()?;
        if !levels.all_finite() {
            return Err(Error::NonFinite("feature maps"));
        }
        Ok(Self { levels, meta })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.levels.dim(1)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.levels.dim(2), self.levels.dim(3))
    }
}

/// Two same-padded 3×3 convolutions with ReLU, shared by every level.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationParams<R = f32> {
    /// `[hidden, C, 3, 3]`
    pub w1: Tensor<R>,
    pub b1: Tensor<R>,
    /// `[C_out, hidden, 3, 3]`
    pub w2: Tensor<R>,
    pub b2: Tensor<R>,
}

impl<R: Real> AggregationParams<R> {
    /// Fan-in uniform init with `C → 4C → C` channels, scaled so ReLU
    /// layers keep activation variance (`±√(6 / fan_in)`).
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = 4 * channels;
        let b1 = (6.0 / (channels * 9) as f64).sqrt();
        let b2 = (6.0 / (hidden * 9) as f64).sqrt();
        Self {
            w1: uniform_tensor(rng, &[hidden, channels, 3, 3], b1),
            b1: uniform_tensor(rng, &[hidden], b1),
            w2: uniform_tensor(rng, &[channels, hidden, 3, 3], b2),
            b2: uniform_tensor(rng, &[channels], b2),
        }
    }

    /// Centre-tap weights computing `relu(relu(F) - relu(-F)) = relu(F)`.
    pub fn identity(channels: usize) -> Self {
        let hidden = 4 * channels;
        let mut w1 = Tensor::zeros(&[hidden, channels, 3, 3]);
        let mut w2 = Tensor::zeros(&[channels, hidden, 3, 3]);
        for c in 0..channels {
            w1.data_mut()[(c * channels + c) * 9 + 4] = R::one();
            w1.data_mut()[((channels + c) * channels + c) * 9 + 4] = -R::one();
            w2.data_mut()[(c * hidden + c) * 9 + 4] = R::one();
            w2.data_mut()[(c * hidden + channels + c) * 9 + 4] = -R::one();
        }
        Self {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[channels]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<R>); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<R>); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn cast<S: Real>(&self) -> AggregationParams<S> {
        AggregationParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

/// `F' = relu(W2 * relu(W1 * F))` on every level.
pub fn feature_aggregate<R: Real>(features: &FeatureSet<R>, params: &AggregationParams<R>) -> Result<FeatureSet<R>> {
    let hidden = relu(&conv2d_batch(&features.levels, &params.w1, &params.b1, 1)?);
    let out = relu(&conv2d_batch(&hidden, &params.w2, &params.b2, 1)?);
    Ok(FeatureSet {
        levels: out,
        meta: features.meta.clone(),
    })
}

/// Unit feature vectors per position, `[H·W, C]`.
fn unit_rows<R: Real>(data: &[R], c: usize, hw: usize) -> Vec<R> {
    let mut rows = vec![R::zero(); hw * c];
    for ch in 0..c {
        for p in 0..hw {
            rows[p * c + ch] = data[ch * hw + p];
        }
    }
    for row in rows.chunks_mut(c) {
        l2_normalize_in_place(row);
    }
    rows
}

fn correlate_into<R: Real>(src: &[R], tgt: &[R], c: usize, hw: usize, out: &mut [R]) {
    let us = unit_rows(src, c, hw);
    let ut = unit_rows(tgt, c, hw);
    out.par_chunks_mut(hw).zip(us.par_chunks(c)).for_each(|(dst, u)| {
        for (q, slot) in dst.iter_mut().enumerate() {
            let v = &ut[q * c..(q + 1) * c];
            *slot = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
        }
    });
}

/// Cosine similarity between every source and every target position.
pub fn correlation_map<R: Real>(f_s: &Tensor<R>, f_t: &Tensor<R>) -> Result<Tensor<R>> {
    let (c, h, w) = f_s.dims3()?;
    f_s.same_shape(f_t, "correlation features")?;
    let hw = h * w;
    let mut out = vec![R::zero(); hw * hw];
    correlate_into(f_s.data(), f_t.data(), c, hw, &mut out);
    Tensor::new(vec![h, w, h, w], out)
}

/// A stack of 4D correlation levels `[levels, H, W, H, W]`, or a single
/// refined `[H, W, H, W]` map.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap<R = f32> {
    pub levels: Tensor<R>,
}

impl<R: Real> CorrelationMap<R> {
    pub fn new(levels: Tensor<R>) -> Result<Self> {
        match levels.shape() {
            [_, h, w, h2, w2] | [h, w, h2, w2] if h == h2 && w == w2 => Ok(Self { levels }),
            s => Err(Error::shape(format!("not a correlation volume: {s:?}"))),
        }
    }

    pub fn is_multilevel(&self) -> bool {
        self.levels.rank() == 5
    }

    pub fn n_levels(&self) -> usize {
        if self.is_multilevel() {
            self.levels.dim(0)
        } else {
            1
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.levels.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }

    pub fn sequence_len(&self) -> usize {
        let (h, w) = self.grid();
        h * w * h * w
    }

    /// Correlation sequence `[H·W·H·W, levels]` in raster order.
    pub fn to_sequence(&self) -> Tensor<R> {
        let (n, l) = (self.sequence_len(), self.n_levels());
        let src = self.levels.data();
        let mut out = vec![R::zero(); n * l];
        for lv in 0..l {
            for (i, &v) in src[lv * n..(lv + 1) * n].iter().enumerate() {
                out[i * l + lv] = v;
            }
        }
        Tensor::new(vec![n, l], out).expect("non-empty")
    }
}

/// Level-wise correlation of two feature stacks.
pub fn build_multilevel<R: Real>(f_s: &FeatureSet<R>, f_t: &FeatureSet<R>) -> Result<CorrelationMap<R>> {
    if f_s.levels.shape() != f_t.levels.shape() {
        return Err(Error::shape(format!(
            "source features {:?} vs target {:?}",
            f_s.levels.shape(),
            f_t.levels.shape()
        )));
    }
    let (l, c, h, w) = f_s.levels.dims4()?;
    let hw = h * w;
    let per_level = c * hw;
    let mut out = vec![R::zero(); l * hw * hw];
    for (lv, dst) in out.chunks_mut(hw * hw).enumerate() {
        let range = lv * per_level..(lv + 1) * per_level;
        correlate_into(&f_s.levels.data()[range.clone()], &f_t.levels.data()[range], c, hw, dst);
    }
    CorrelationMap::new(Tensor::new(vec![l, h, w, h, w], out)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SortOrder {
    #[default]
    Descending,
    Ascending,
}

/// Scan order for a `[n, levels]` sequence keyed on its last channel.
pub fn scan_order<R: Real>(seq: &Tensor<R>, order: SortOrder) -> Result<Permutation> {
    let (n, l) = seq.dims2()?;
    let key: Vec<R> = (0..n)
        .map(|i| {
            let v = seq.data()[i * l + l - 1];
            match order {
                SortOrder::Descending => v,
                SortOrder::Ascending => -v,
            }
        })
        .collect();
    argsort_desc_stable(&key)
}

/// Sorts the sequence, runs the scan blocks in that order, and restores
/// raster order. Returns the sort permutation alongside the output.
pub fn scan_sorted_sequence<R: Real>(
    seq: &Tensor<R>,
    blocks: &[SsmParams<R>],
    mode: ScanMode,
    order: SortOrder,
) -> Result<(Tensor<R>, Permutation)> {
    let (_, l) = seq.dims2()?;
    for b in blocks {
        let cfg = b.validate()?;
        if cfg.d_model != l {
            return Err(Error::shape(format!(
                "scan block expects {} channels, correlation has {l} levels",
                cfg.d_model
            )));
        }
    }
    let perm = scan_order(seq, order)?;
    let mut x = perm.apply_rows(seq)?;
    for b in blocks {
        x = mamba_block_forward(&x, b, mode)?;
    }
    Ok((perm.inverse().apply_rows(&x)?, perm))
}

/// Similarity-aware selective scan over a multi-level correlation map.
pub fn similarity_aware_scan<R: Real>(
    corr: &CorrelationMap<R>,
    blocks: &[SsmParams<R>],
    mode: ScanMode,
    order: SortOrder,
) -> Result<Tensor<R>> {
    if !corr.is_multilevel() {
        return Err(Error::shape("similarity-aware scan needs a multi-level map"));
    }
    Ok(scan_sorted_sequence(&corr.to_sequence(), blocks, mode, order)?.0)
}

/// Per-position `levels → 1` projection reshaped into an `[H, W, H, W]` map.
pub fn refine_project<R: Real>(
    seq: &Tensor<R>,
    w_proj: &Tensor<R>,
    b_proj: &Tensor<R>,
    h: usize,
    w: usize,
) -> Result<CorrelationMap<R>> {
    let (n, _) = seq.dims2()?;
    if n != h * w * h * w {
        return Err(Error::shape(format!("sequence length {n} is not ({h}·{w})²")));
    }
    let out = linear(seq, w_proj, Some(b_proj))?;
    CorrelationMap::new(out.reshape(vec![h, w, h, w])?)
}
