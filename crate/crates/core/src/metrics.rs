//! Percentage of correct keypoints.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transfer::{Keypoint, KeypointAnnotation};

/// Per-pair keypoint errors and their PCK normalizers, both in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    #[serde(default)]
    pub category: String,
    /// `(error, max(w, h))` per keypoint.
    pub keypoints: Vec<(f64, f64)>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        for &(err, norm) in &self.keypoints {
            if !(err >= 0.0) || !(norm > 0.0) {
                return Err(Error::invalid(format!(
                    "pair {}: error {err} / normalizer {norm}",
                    self.pair_id
                )));
            }
        }
        Ok(())
    }

    /// Pixel errors of `predicted` against the annotation's target keypoints.
    pub fn from_prediction(ann: &KeypointAnnotation, predicted: &[Keypoint], kind: NormalizerKind) -> Result<Self> {
        if predicted.len() != ann.target.len() {
            return Err(Error::shape(format!(
                "pair {}: {} predictions for {} keypoints",
                ann.pair_id,
                predicted.len(),
                ann.target.len()
            )));
        }
        let (w, h) = match kind {
            NormalizerKind::Bbox => ann.bbox_extent,
            NormalizerKind::Image => ann.image_extent,
        };
        let (iw, ih) = ann.image_extent;
        let norm = w.max(h);
        Ok(Self {
            pair_id: ann.pair_id.clone(),
            category: ann.category.clone(),
            keypoints: predicted
                .iter()
                .zip(&ann.target)
                .map(|(p, t)| (((p.x - t.x) * iw).hypot((p.y - t.y) * ih), norm))
                .collect(),
        })
    }

    fn correct(&self, alpha: f64) -> usize {
        self.keypoints
            .iter()
            .filter(|&&(err, norm)| err <= alpha * norm)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PckMode {
    /// Mean over pairs of the per-pair fraction.
    PerImage,
    /// Correct keypoints over all keypoints.
    PerPoint,
}

impl PckMode {
    pub fn name(self) -> &'static str {
        match self {
            PckMode::PerImage => "per-image",
            PckMode::PerPoint => "per-point",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizerKind {
    Bbox,
    Image,
}

impl NormalizerKind {
    pub fn name(self) -> &'static str {
        match self {
            NormalizerKind::Bbox => "bbox",
            NormalizerKind::Image => "image",
        }
    }
}

pub fn pck(records: &[EvalRecord], alpha: f64, mode: PckMode) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no evaluation records".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    for r in records {
        r.validate()?;
    }
    match mode {
        PckMode::PerImage => {
            let scored: Vec<f64> = records
                .iter()
                .filter(|r| !r.keypoints.is_empty())
                .map(|r| r.correct(alpha) as f64 / r.keypoints.len() as f64)
                .collect();
            if scored.is_empty() {
                return Err(Error::Empty("records carry no keypoints".into()));
            }
            Ok(scored.iter().sum::<f64>() / scored.len() as f64)
        }
        PckMode::PerPoint => {
            let total: usize = records.iter().map(|r| r.keypoints.len()).sum();
            if total == 0 {
                return Err(Error::Empty("records carry no keypoints".into()));
            }
            let correct: usize = records.iter().map(|r| r.correct(alpha)).sum();
            Ok(correct as f64 / total as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckRow {
    pub alpha: f64,
    pub mode: String,
    pub normalizer: String,
    pub pck: f64,
}

pub fn pck_table(records: &[EvalRecord], alphas: &[f64], modes: &[PckMode], kind: NormalizerKind) -> Result<Vec<PckRow>> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &mode in modes {
            rows.push(PckRow {
                alpha,
                mode: mode.name().into(),
                normalizer: kind.name().into(),
                pck: pck(records, alpha, mode)?,
            });
        }
    }
    Ok(rows)
}

/// Writes `alpha,mode,normalizer,pck` with a header.
pub fn write_pck_csv<W: Write>(out: W, rows: &[PckRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, kps: &[(f64, f64)]) -> EvalRecord {
        EvalRecord {
            pair_id: id.into(),
            category: String::new(),
            keypoints: kps.to_vec(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let rs = vec![rec("a", &[(0.0, 10.0), (0.0, 3.0)]), rec("b", &[(0.0, 1.0)])];
        assert_eq!(pck(&rs, 0.1, PckMode::PerImage).unwrap(), 1.0);
        assert_eq!(pck(&rs, 0.1, PckMode::PerPoint).unwrap(), 1.0);
    }

    #[test]
    fn single_image_threshold() {
        let rs = vec![rec("a", &[(5.0, 100.0), (15.0, 100.0)])];
        assert_eq!(pck(&rs, 0.1, PckMode::PerImage).unwrap(), 0.5);
        // inclusive at the threshold
        let edge = vec![rec("a", &[(10.0, 100.0)])];
        assert_eq!(pck(&edge, 0.1, PckMode::PerPoint).unwrap(), 1.0);
    }

    #[test]
    fn conventions_differ() {
        let rs = vec![
            rec("a", &[(1.0, 100.0)]),
            rec("b", &[(1.0, 100.0), (50.0, 100.0), (60.0, 100.0)]),
        ];
        let per_image = pck(&rs, 0.1, PckMode::PerImage).unwrap();
        assert!((per_image - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(pck(&rs, 0.1, PckMode::PerPoint).unwrap(), 0.5);
    }

    #[test]
    fn errors() {
        assert!(pck(&[], 0.1, PckMode::PerImage).is_err());
        let rs = vec![rec("a", &[(1.0, 0.0)])];
        assert!(pck(&rs, 0.1, PckMode::PerImage).is_err());
        let rs = vec![rec("a", &[(1.0, 2.0)])];
        assert!(pck(&rs, 0.0, PckMode::PerImage).is_err());
    }

    #[test]
    fn pixel_errors() {
        let ann = KeypointAnnotation {
            pair_id: "p".into(),
            source: vec![Keypoint::new(0.5, 0.5)],
            target: vec![Keypoint::new(0.5, 0.5)],
            bbox_extent: (50.0, 80.0),
            image_extent: (200.0, 100.0),
            category: "c".into(),
        };
        let r = EvalRecord::from_prediction(&ann, &[Keypoint::new(0.53, 0.54)], NormalizerKind::Bbox).unwrap();
        assert!((r.keypoints[0].0 - 6.0f64.hypot(4.0)).abs() < 1e-9);
        assert_eq!(r.keypoints[0].1, 80.0);
        let r = EvalRecord::from_prediction(&ann, &[Keypoint::new(0.5, 0.5)], NormalizerKind::Image).unwrap();
        assert_eq!(r.keypoints[0], (0.0, 200.0));
        assert!(EvalRecord::from_prediction(&ann, &[], NormalizerKind::Image).is_err());
    }

    #[test]
    fn csv_layout() {
        let rs = vec![rec("a", &[(1.0, 100.0)])];
        let rows = pck_table(&rs, &[0.05, 0.1], &[PckMode::PerImage], NormalizerKind::Bbox).unwrap();
        let mut buf = Vec::new();
        write_pck_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "alpha,mode,normalizer,pck\n0.05,per-image,bbox,1.0\n0.1,per-image,bbox,1.0\n");
    }
}
