//! On-disk formats: the `.mmt` tensor container, annotation JSON, and
//! training checkpoints.
//!
//! `.mmt` layout, all little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `MMTN` |
//! | 1 | version, `1` |
//! | 1 | dtype, `1` = f32 |
//! | 1 | rank |
//! | 1 | reserved, `0` |
//! | 8 × rank | extents as u64 |
//! | 4 × numel | row-major payload |

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainableBundle};
use crate::pipeline::{FeatureMeta, FeatureSet};
use crate::tensor::Tensor;
use crate::train::{TrainState, TrainingSample};
use crate::transfer::{Keypoint, KeypointAnnotation};

pub const MAGIC: [u8; 4] = *b"MMTN";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn write_tensor_to<W: Write>(mut out: W, t: &Tensor<f32>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank {} does not fit the header", t.rank())))?;
    out.write_all(&MAGIC)?;
    out.write_all(&[VERSION, DTYPE_F32, rank, 0])?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensor_from<Rd: Read>(mut input: Rd) -> Result<Tensor<f32>> {
    let shape = read_header(&mut input)?;
    let numel = payload_len(&shape)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() as u64 != 4 * numel {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * numel
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

/// Parses the fixed header and extents, leaving `input` at the payload.
fn read_header<Rd: Read>(input: &mut Rd) -> Result<Vec<usize>> {
    let mut header = [0u8; 8];
    read_exact(input, &mut header, "header")?;
    if header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&header[..4]))));
    }
    let [version, dtype, rank, reserved] = [header[4], header[5], header[6], header[7]];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    if reserved != 0 {
        return Err(Error::Format(format!("reserved byte is {reserved}, expected 0")));
    }
    if rank == 0 {
        return Err(Error::Format("rank 0".into()));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(input, &mut b, "extents")?;
        let d = usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Corruption("extent overflows usize".into()))?;
        if d == 0 {
            return Err(Error::Format("zero extent".into()));
        }
        shape.push(d);
    }
    Ok(shape)
}

/// Element count of `shape`, rejecting byte sizes that overflow.
fn payload_len(shape: &[usize]) -> Result<u64> {
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|n| n.checked_mul(4).is_some_and(|b| usize::try_from(b).is_ok()))
        .ok_or_else(|| Error::Corruption(format!("extents {shape:?} overflow")))
}

fn read_exact<Rd: Read>(input: &mut Rd, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corruption(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_tensor_to(BufWriter::new(File::create(path)?), t)
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    read_tensor_from(BufReader::new(open(path)?))
}

/// Shape of a `.mmt` file from its header, checked against the file size
/// without reading the payload.
pub fn tensor_shape(path: &Path) -> Result<Vec<usize>> {
    let mut file = open(path)?;
    let len = file.metadata()?.len();
    let shape = read_header(&mut file)?;
    let expected = 8 + 8 * shape.len() as u64 + 4 * payload_len(&shape)?;
    if len != expected {
        return Err(Error::Corruption(format!(
            "{}: {len} bytes, shape {shape:?} needs {expected}",
            path.display()
        )));
    }
    Ok(shape)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Keypoints as parallel normalized coordinate arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointArrays {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl KeypointArrays {
    pub fn from_keypoints(kps: &[Keypoint]) -> Self {
        Self {
            x: kps.iter().map(|k| k.x).collect(),
            y: kps.iter().map(|k| k.y).collect(),
        }
    }

    pub fn keypoints(&self) -> Result<Vec<Keypoint>> {
        if self.x.len() != self.y.len() {
            return Err(Error::shape(format!("{} x vs {} y coordinates", self.x.len(), self.y.len())));
        }
        Ok(self.x.iter().zip(&self.y).map(|(&x, &y)| Keypoint::new(x, y)).collect())
    }
}

/// One entry of an annotation file. Feature paths are relative to the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub pair_id: String,
    pub source_features: PathBuf,
    pub target_features: PathBuf,
    pub source_keypoints: KeypointArrays,
    pub target_keypoints: KeypointArrays,
    /// `[w, h]` in pixels.
    pub bbox_extent: [f64; 2],
    pub image_extent: [f64; 2],
    #[serde(default)]
    pub category: String,
}

impl PairEntry {
    pub fn from_annotation(ann: &KeypointAnnotation, source_features: PathBuf, target_features: PathBuf) -> Self {
        Self {
            pair_id: ann.pair_id.clone(),
            source_features,
            target_features,
            source_keypoints: KeypointArrays::from_keypoints(&ann.source),
            target_keypoints: KeypointArrays::from_keypoints(&ann.target),
            bbox_extent: ann.bbox_extent.into(),
            image_extent: ann.image_extent.into(),
            category: ann.category.clone(),
        }
    }

    pub fn annotation(&self) -> Result<KeypointAnnotation> {
        let ann = KeypointAnnotation {
            pair_id: self.pair_id.clone(),
            source: self.source_keypoints.keypoints()?,
            target: self.target_keypoints.keypoints()?,
            bbox_extent: self.bbox_extent.into(),
            image_extent: self.image_extent.into(),
            category: self.category.clone(),
        };
        ann.validate()?;
        Ok(ann)
    }

    /// Reads both feature files.
    pub fn load(&self) -> Result<TrainingSample<f32>> {
        let load = || -> Result<TrainingSample<f32>> {
            let annotation = self.annotation()?;
            let features = |path: &Path, side: &str| -> Result<FeatureSet<f32>> {
                let meta = FeatureMeta {
                    image_id: format!("{}-{side}", self.pair_id),
                    provenance: path.display().to_string(),
                };
                FeatureSet::new(read_tensor(path)?, meta)
            };
            let source = features(&self.source_features, "src")?;
            let target = features(&self.target_features, "tgt")?;
            if source.levels.shape() != target.levels.shape() {
                return Err(Error::shape(format!(
                    "source features {:?} vs target {:?}",
                    source.levels.shape(),
                    target.levels.shape()
                )));
            }
            Ok(TrainingSample {
                source,
                target,
                annotation,
            })
        };
        load().map_err(|e| e.in_pair(&self.pair_id))
    }
}

/// Parses an annotation file, resolving feature paths against its directory
/// and checking every entry's keypoints. Pair ids must be unique.
pub fn read_annotations(path: &Path) -> Result<Vec<PairEntry>> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    let mut entries: Vec<PairEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = std::collections::HashSet::new();
    for e in &mut entries {
        e.annotation().map_err(|err| err.in_pair(&e.pair_id))?;
        if !seen.insert(e.pair_id.clone()) {
            return Err(Error::invalid(format!("duplicate pair id `{}`", e.pair_id)));
        }
        e.source_features = base.join(&e.source_features);
        e.target_features = base.join(&e.target_features);
    }
    Ok(entries)
}

pub fn write_annotations(path: &Path, entries: &[PairEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads every pair an annotation file names.
pub fn load_dataset(path: &Path) -> Result<Vec<TrainingSample<f32>>> {
    read_annotations(path)?.iter().map(PairEntry::load).collect()
}

/// Rejects ids that would escape an output directory when used as a file stem.
pub fn check_pair_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\', '\0']);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("pair id `{id}` is not usable as a file name")))
    }
}

pub const CHECKPOINT_FORMAT: &str = "mamba-matcher-checkpoint";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: SlotKind,
    pub shape: Vec<usize>,
    /// Offset in elements into the flat payload.
    pub offset: usize,
}

/// Sidecar of a checkpoint: the flat `.mmt` payload is every parameter,
/// then every first moment, then every second moment, in bundle order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_checkpoint(path: &Path, model: &ModelConfig, state: &TrainState) -> Result<()> {
    state.bundle.check(model)?;
    let named = state.bundle.named();
    if state.optimizer.len() != named.len() {
        return Err(Error::shape(format!(
            "{} optimizer slots for {} parameters",
            state.optimizer.len(),
            named.len()
        )));
    }
    let mut flat = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: &str, kind: SlotKind, t: &Tensor<f32>| {
        entries.push(ManifestEntry {
            name: name.to_owned(),
            kind,
            shape: t.shape().to_vec(),
            offset: flat.len(),
        });
        flat.extend_from_slice(t.data());
    };
    for (name, t) in &named {
        push(name, SlotKind::Param, t);
    }
    for ((name, _), s) in named.iter().zip(&state.optimizer) {
        push(name, SlotKind::AdamM, &s.m);
    }
    for ((name, _), s) in named.iter().zip(&state.optimizer) {
        push(name, SlotKind::AdamV, &s.v);
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        model: model.clone(),
        step: state.step,
        entries,
    };
    write_tensor(path, &Tensor::from_vec(flat))?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path(path), text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, TrainState)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!(
            "not a version 1 checkpoint manifest: {} v{}",
            manifest.format, manifest.version
        )));
    }
    let flat = read_tensor(path)?;
    if flat.rank() != 1 {
        return Err(Error::Corruption(format!("checkpoint payload has shape {:?}", flat.shape())));
    }
    let data = flat.data();
    let mut state = TrainState::new(TrainableBundle::init(&manifest.model, 0)?);
    state.step = manifest.step;
    let names: Vec<String> = state.bundle.named().into_iter().map(|(n, _)| n).collect();
    let expected = 3 * names.len();
    if manifest.entries.len() != expected {
        return Err(Error::Corruption(format!(
            "manifest lists {} slots, the model has {expected}",
            manifest.entries.len()
        )));
    }
    let mut params: Vec<&mut Tensor<f32>> = state.bundle.named_mut().into_iter().map(|(_, t)| t).collect();
    let mut covered = 0;
    for (i, e) in manifest.entries.iter().enumerate() {
        let slot = i % names.len();
        let kind = [SlotKind::Param, SlotKind::AdamM, SlotKind::AdamV][i / names.len()].clone();
        if e.name != names[slot] || e.kind != kind {
            return Err(Error::Corruption(format!(
                "slot {i} is {} ({:?}), expected {} ({kind:?})",
                e.name, e.kind, names[slot]
            )));
        }
        let n: usize = e.shape.iter().product();
        if e.offset != covered || e.offset + n > data.len() {
            return Err(Error::Corruption(format!("slot {} at offset {} is out of place", e.name, e.offset)));
        }
        covered += n;
        let t = Tensor::new(e.shape.clone(), data[e.offset..e.offset + n].to_vec())?;
        let dest = match e.kind {
            SlotKind::Param => &mut *params[slot],
            SlotKind::AdamM => &mut state.optimizer[slot].m,
            SlotKind::AdamV => &mut state.optimizer[slot].v,
        };
        if dest.shape() != t.shape() {
            return Err(Error::shape(format!("{}: {:?}, expected {:?}", e.name, t.shape(), dest.shape())));
        }
        *dest = t;
    }
    drop(params);
    if covered != data.len() {
        return Err(Error::Corruption(format!("{} trailing payload values", data.len() - covered)));
    }
    for s in &mut state.optimizer {
        s.step = manifest.step;
    }
    Ok((manifest.model, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap()).unwrap();
        assert_eq!(&buf[..8], b"MMTN\x01\x01\x02\x00");
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(buf.len(), 8 + 16 + 24);
    }

    #[test]
    fn reserved_byte_checked() {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &Tensor::from_vec(vec![1.0])).unwrap();
        buf[7] = 1;
        assert!(matches!(read_tensor_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn pair_ids() {
        assert!(check_pair_id("synth0001").is_ok());
        for bad in ["", "..", "a/b", "a\\b"] {
            assert!(check_pair_id(bad).is_err(), "{bad}");
        }
    }
}
