//! Correlation-to-flow conversion and keypoint transfer.
//!
//! Grid coordinates are `(row, col)` in cell units. Keypoints are `(x, y)` in
//! normalized `[0, 1]` image coordinates; cell `(i, j)` has its centre at
//! `((j + 0.5) / W, (i + 0.5) / H)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default Gaussian std of the kernel soft-argmax, in grid cells.
pub const DEFAULT_SIGMA: f64 = 5.0;
pub const TAU_TRAIN: f64 = 0.1;
pub const TAU_EVAL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn cell_center(row: usize, col: usize, h: usize, w: usize) -> Self {
        Self {
            x: (col as f64 + 0.5) / w as f64,
            y: (row as f64 + 0.5) / h as f64,
        }
    }

    /// Converts a `(row, col)` grid position to normalized coordinates.
    pub fn from_grid(row: f64, col: f64, h: usize, w: usize) -> Self {
        Self {
            x: (col + 0.5) / w as f64,
            y: (row + 0.5) / h as f64,
        }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Nearest cell `(row, col)`, clamped to the grid.
    pub fn nearest_cell(&self, h: usize, w: usize) -> (usize, usize) {
        let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (clamp(self.y * h as f64, h), clamp(self.x * w as f64, w))
    }
}

/// Matched keypoints of one image pair plus the extents PCK is normalized by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub pair_id: String,
    pub source: Vec<Keypoint>,
    pub target: Vec<Keypoint>,
    /// Target bounding-box `(w, h)` in pixels.
    pub bbox_extent: (f64, f64),
    /// Target image `(w, h)` in pixels.
    pub image_extent: (f64, f64),
    #[serde(default)]
    pub category: String,
}

impl KeypointAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::Empty(format!("pair {} has no keypoints", self.pair_id)));
        }
        if self.source.len() != self.target.len() {
            return Err(Error::shape(format!(
                "pair {}: {} source vs {} target keypoints",
                self.pair_id,
                self.source.len(),
                self.target.len()
            )));
        }
        let in_unit = |k: &Keypoint| (0.0..=1.0).contains(&k.x) && (0.0..=1.0).contains(&k.y);
        if !self.source.iter().chain(&self.target).all(in_unit) {
            return Err(Error::invalid(format!(
                "pair {}: keypoints must lie in [0, 1]",
                self.pair_id
            )));
        }
        let positive = |(w, h): (f64, f64)| w > 0.0 && h > 0.0;
        if !positive(self.bbox_extent) || !positive(self.image_extent) {
            return Err(Error::invalid(format!("pair {}: extents must be positive", self.pair_id)));
        }
        Ok(())
    }
}

/// Dense correspondence field: `grid` holds each source cell's own
/// `(row, col)`, `transferred` its expected target position.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<R = f32> {
    pub grid: Tensor<R>,
    pub transferred: Tensor<R>,
}

impl<R: Real> FlowField<R> {
    pub fn extents(&self) -> (usize, usize) {
        (self.grid.dim(0), self.grid.dim(1))
    }

    /// Transferred position of source cell `(row, col)` in normalized coordinates.
    pub fn target_of(&self, row: usize, col: usize) -> Keypoint {
        let (h, w) = self.extents();
        let at = (row * w + col) * 2;
        let p = &self.transferred.data()[at..at + 2];
        Keypoint::from_grid(p[0].f64(), p[1].f64(), h, w)
    }
}

fn refined_extents<R: Real>(corr: &Tensor<R>) -> Result<(usize, usize)> {
    match corr.shape() {
        &[h, w, h2, w2] if h == h2 && w == w2 => Ok((h, w)),
        s => Err(Error::shape(format!("expected [H, W, H, W], got {s:?}"))),
    }
}

/// First maximum of every row of a `[rows, cols]` buffer.
pub fn argmax_rows<R: Real>(data: &[R], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Gaussian weights over the `h × w` target grid centred on cell `peak`.
pub(crate) fn gaussian_row<R: Real>(peak: usize, h: usize, w: usize, sigma: f64) -> Vec<R> {
    let (pk, pl) = ((peak / w) as f64, (peak % w) as f64);
    let denom = 2.0 * sigma * sigma;
    (0..h * w)
        .map(|q| {
            let (k, l) = ((q / w) as f64, (q % w) as f64);
            R::of((-((k - pk).powi(2) + (l - pl).powi(2)) / denom).exp())
        })
        .collect()
}

/// Row-wise `softmax(G^p ⊙ logits)` for `[rows, h·w]` logits with given peaks.
pub(crate) fn kernel_softmax_rows<R: Real>(logits: &[R], peaks: &[usize], h: usize, w: usize, sigma: f64) -> Vec<R> {
    let t = h * w;
    let mut out = vec![R::zero(); logits.len()];
    for ((row, dst), &p) in logits.chunks(t).zip(out.chunks_mut(t)).zip(peaks) {
        let g = gaussian_row::<R>(p, h, w, sigma);
        let mut max = R::neg_infinity();
        for (q, slot) in dst.iter_mut().enumerate() {
            *slot = g[q] * row[q];
            max = max.max(*slot);
        }
        let mut total = R::zero();
        for slot in dst.iter_mut() {
            *slot = (*slot - max).exp();
            total = total + *slot;
        }
        for slot in dst.iter_mut() {
            *slot = *slot / total;
        }
    }
    out
}

/// Kernel soft-argmax normalization of a refined `[H, W, H, W]` map: for each
/// source cell, logits are weighted by a Gaussian (std `sigma` cells) centred
/// on their argmax (lowest raster index on ties), then softmaxed over targets.
pub fn normalize_with_kernel<R: Real>(corr: &Tensor<R>, sigma: f64) -> Result<Tensor<R>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("kernel sigma must be positive, got {sigma}")));
    }
    let (h, w) = refined_extents(corr)?;
    if !corr.all_finite() {
        return Err(Error::NonFinite("refined correlation"));
    }
    let peaks = argmax_rows(corr.data(), h * w);
    let out = kernel_softmax_rows(corr.data(), &peaks, h, w, sigma);
    Tensor::new(corr.shape().to_vec(), out)
}

/// Expected `(row, col)` target position per source cell.
pub fn dense_flow<R: Real>(norm_corr: &Tensor<R>) -> Result<FlowField<R>> {
    let (h, w) = refined_extents(norm_corr)?;
    let t = h * w;
    let mut transferred = Vec::with_capacity(t * 2);
    for (s, row) in norm_corr.data().chunks(t).enumerate() {
        let total: R = row.iter().copied().sum();
        if (total.f64() - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!(
                "row {s} of the normalized correlation sums to {total}"
            )));
        }
        let (mut r, mut c) = (R::zero(), R::zero());
        for (q, &p) in row.iter().enumerate() {
            r = r + p * R::of((q / w) as f64);
            c = c + p * R::of((q % w) as f64);
        }
        transferred.push(r);
        transferred.push(c);
    }
    let grid = Tensor::from_fn(&[h, w, 2], |i| {
        let cell = i / 2;
        R::of(if i % 2 == 0 { cell / w } else { cell % w } as f64)
    });
    Ok(FlowField {
        grid,
        transferred: Tensor::new(vec![h, w, 2], transferred)?,
    })
}

/// Soft-sampler weights of one keypoint: `max(0, τ - dist)` to every cell
/// centre, normalized to sum to one. A keypoint farther than `τ` from every
/// centre falls back to its nearest cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerWeights {
    /// `(cell index, weight)` pairs in raster order.
    pub entries: Vec<(usize, f64)>,
    pub fallback: bool,
}

impl SamplerWeights {
    pub fn new(kp: &Keypoint, h: usize, w: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("sampler radius must be positive, got {tau}")));
        }
        let mut entries = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let d = kp.distance(&Keypoint::cell_center(i, j, h, w));
                if d < tau {
                    entries.push((i * w + j, tau - d));
                }
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if entries.is_empty() || total <= 0.0 {
            let (i, j) = kp.nearest_cell(h, w);
            return Ok(Self {
                entries: vec![(i * w + j, 1.0)],
                fallback: true,
            });
        }
        for e in entries.iter_mut() {
            e.1 /= total;
        }
        Ok(Self {
            entries,
            fallback: false,
        })
    }
}

/// Interpolates the flow at each source keypoint with the soft sampler.
pub fn soft_sample_keypoints<R: Real>(flow: &FlowField<R>, keypoints: &[Keypoint], tau: f64) -> Result<Vec<Keypoint>> {
    if keypoints.is_empty() {
        return Err(Error::Empty("no keypoints to transfer".into()));
    }
    let (h, w) = flow.extents();
    keypoints
        .iter()
        .map(|kp| {
            let weights = SamplerWeights::new(kp, h, w, tau)?;
            let (mut x, mut y) = (0.0, 0.0);
            for &(cell, wt) in &weights.entries {
                let t = flow.target_of(cell / w, cell % w);
                x += wt * t.x;
                y += wt * t.y;
            }
            Ok(Keypoint::new(x, y))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    /// Mean of squared distances.
    #[default]
    Squared,
    /// Mean of plain distances.
    Euclidean,
}

pub fn keypoint_loss(predicted: &[Keypoint], ground_truth: &[Keypoint], form: LossForm) -> Result<f64> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} ground-truth keypoints",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Empty("no keypoints in loss".into()));
    }
    let total: f64 = predicted
        .iter()
        .zip(ground_truth)
        .map(|(p, g)| {
            let sq = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
            match form {
                LossForm::Squared => sq,
                LossForm::Euclidean => sq.sqrt(),
            }
        })
        .sum();
    Ok(total / predicted.len() as f64)
}
