//! Synthetic pairs with exact ground truth: both images are windows of one
//! random latent feature map, offset by an integer translation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::transfer::{Keypoint, KeypointAnnotation};

/// Pixels per grid cell of the (notional) images.
pub const PATCH: f64 = 14.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: usize,
    pub pairs: usize,
    pub keypoints: usize,
    /// Translations are drawn from `[-max_shift, max_shift]²` cells.
    pub max_shift: usize,
    /// Overrides the random draw with one `(dx, dy)` for every pair.
    pub shift: Option<(i64, i64)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 16,
            width: 16,
            channels: 8,
            levels: 4,
            pairs: 20,
            keypoints: 8,
            max_shift: 2,
            shift: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair<R = f32> {
    /// `[levels, C, H, W]`
    pub source: Tensor<R>,
    pub target: Tensor<R>,
    pub annotation: KeypointAnnotation,
    /// `(dx, dy)` in cells: source cell `(row, col)` appears at `(row + dy, col + dx)`.
    pub shift: (i64, i64),
}

impl SynthConfig {
    fn reach(&self) -> usize {
        match self.shift {
            Some((dx, dy)) => dx.unsigned_abs().max(dy.unsigned_abs()) as usize,
            None => self.max_shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [self.height, self.width, self.channels, self.levels, self.pairs, self.keypoints];
        if extents.contains(&0) {
            return Err(Error::invalid(format!("synthetic extents must be positive: {self:?}")));
        }
        let s = self.reach();
        if 2 * s >= self.height.min(self.width) {
            return Err(Error::invalid(format!(
                "a {}x{} grid is too small for shifts of {s} cells",
                self.height, self.width
            )));
        }
        if self.keypoints > (self.height - s) * (self.width - s) {
            return Err(Error::invalid(format!(
                "{} keypoints do not fit in the overlap of a {}x{} grid shifted by {s}",
                self.keypoints, self.height, self.width
            )));
        }
        Ok(())
    }
}

pub fn generate<R: Real>(cfg: &SynthConfig) -> Result<Vec<SynthPair<R>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.pairs).map(|p| generate_pair(cfg, p, &mut rng)).collect()
}

fn generate_pair<R: Real>(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<SynthPair<R>> {
    let (h, w) = (cfg.height, cfg.width);
    let s = cfg.reach();
    let (dx, dy) = match cfg.shift {
        Some(shift) => shift,
        None => {
            let r = s as i64;
            (rng.gen_range(-r..=r), rng.gen_range(-r..=r))
        }
    };
    let (lh, lw) = (h + 2 * s, w + 2 * s);
    let planes = cfg.levels * cfg.channels;
    let latent: Vec<f64> = (0..planes * lh * lw).map(|_| rng.sample(StandardNormal)).collect();
    let window = |top: usize, left: usize| {
        Tensor::from_fn(&[cfg.levels, cfg.channels, h, w], |i| {
            let (plane, r, c) = (i / (h * w), (i / w) % h, i % w);
            R::of(latent[(plane * lh + top + r) * lw + left + c])
        })
    };
    let off = s as i64;
    let source = window(s, s);
    let target = window((off - dy) as usize, (off - dx) as usize);

    // source cells whose shifted position stays on the grid
    let valid: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| {
            let (ti, tj) = (i as i64 + dy, j as i64 + dx);
            (0..h as i64).contains(&ti) && (0..w as i64).contains(&tj)
        })
        .collect();
    let mut picks = sample(rng, valid.len(), cfg.keypoints).into_vec();
    picks.sort_unstable();
    let (mut src_kp, mut tgt_kp) = (Vec::new(), Vec::new());
    for k in picks {
        let (i, j) = valid[k];
        src_kp.push(Keypoint::cell_center(i, j, h, w));
        tgt_kp.push(Keypoint::cell_center((i as i64 + dy) as usize, (j as i64 + dx) as usize, h, w));
    }
    let extent = (PATCH * w as f64, PATCH * h as f64);
    Ok(SynthPair {
        source,
        target,
        annotation: KeypointAnnotation {
            pair_id: format!("synth{index:04}"),
            source: src_kp,
            target: tgt_kp,
            bbox_extent: extent,
            image_extent: extent,
            category: "synthetic".into(),
        },
        shift: (dx, dy),
    })
}
