//! OCCK container, detection JSONL and run configuration.
//!
//! Every OCCK file starts with the same 56-byte little-endian header:
//!
//! | bytes  | field                                                     |
//! |--------|-----------------------------------------------------------|
//! | 0..4   | magic `OCCK`                                              |
//! | 4      | version (1)                                               |
//! | 5      | payload kind (see [`PayloadKind`])                        |
//! | 6..8   | reserved, zero                                            |
//! | 8..24  | four `u32` slots: `nx, ny, nz, num_classes` for grids     |
//! | 24..56 | four `f64` slots: `voxel_size, x0, y0, z0` for grids      |
//!
//! Grid payloads follow in canonical voxel order (labels `u8`, probs `f64`
//! voxel-major then class, mask `u8` 0/1). The image-set payload uses the
//! `u32` slots for `n, h, w, ch` and stores raw bytes; the parameter
//! archive uses the first `u32` slot for the tensor count and stores
//! `[u16 name_len][name][u32 rank][u32 dims...][f64 data...]` per tensor.
//! Unused slots are zero.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::ImageSet;
use crate::det2occ::{ConversionConfig, DetectionBox, DEFAULT_SPACING, DEFAULT_THRESHOLD};
use crate::ensemble::Strategy;
use crate::error::{OccError, Result};
use crate::grid::{ClassTable, GridSpec, LabelGrid, ProbGrid, VoxelMask};
use crate::head::{HeadParams, LossWeights, NamedTensor};

pub const MAGIC: &[u8; 4] = b"OCCK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 56;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Labels = 1,
    Probs = 2,
    Mask = 3,
    Params = 4,
    Images = 5,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => PayloadKind::Labels,
            2 => PayloadKind::Probs,
            3 => PayloadKind::Mask,
            4 => PayloadKind::Params,
            5 => PayloadKind::Images,
            _ => return None,
        })
    }
}

/// A decoded grid file.
#[derive(Debug, Clone, PartialEq)]
pub enum GridPayload {
    Labels(LabelGrid),
    Probs(ProbGrid),
    Mask(VoxelMask),
}

impl GridPayload {
    pub fn spec(&self) -> &GridSpec {
        match self {
            GridPayload::Labels(g) => g.spec(),
            GridPayload::Probs(g) => g.spec(),
            GridPayload::Mask(g) => g.spec(),
        }
    }

    pub fn kind(&self) -> PayloadKind {
        match self {
            GridPayload::Labels(_) => PayloadKind::Labels,
            GridPayload::Probs(_) => PayloadKind::Probs,
            GridPayload::Mask(_) => PayloadKind::Mask,
        }
    }
}

/// Borrowed grid for writing.
#[derive(Debug, Clone, Copy)]
pub enum GridRef<'a> {
    Labels(&'a LabelGrid),
    Probs(&'a ProbGrid),
    Mask(&'a VoxelMask),
}

impl<'a> From<&'a LabelGrid> for GridRef<'a> {
    fn from(g: &'a LabelGrid) -> Self {
        GridRef::Labels(g)
    }
}

impl<'a> From<&'a ProbGrid> for GridRef<'a> {
    fn from(g: &'a ProbGrid) -> Self {
        GridRef::Probs(g)
    }
}

impl<'a> From<&'a VoxelMask> for GridRef<'a> {
    fn from(g: &'a VoxelMask) -> Self {
        GridRef::Mask(g)
    }
}

impl<'a> From<&'a GridPayload> for GridRef<'a> {
    fn from(g: &'a GridPayload) -> Self {
        match g {
            GridPayload::Labels(g) => GridRef::Labels(g),
            GridPayload::Probs(g) => GridRef::Probs(g),
            GridPayload::Mask(g) => GridRef::Mask(g),
        }
    }
}

fn header(kind: PayloadKind, slots: [u32; 4], geometry: [f64; 4]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, kind as u8, 0, 0]);
    for s in slots {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for g in geometry {
        out.extend_from_slice(&g.to_le_bytes());
    }
    out
}

fn spec_header(kind: PayloadKind, spec: &GridSpec) -> Vec<u8> {
    let [nx, ny, nz] = spec.dims();
    let o = spec.origin();
    header(
        kind,
        [nx as u32, ny as u32, nz as u32, spec.num_classes() as u32],
        [spec.voxel_size(), o[0], o[1], o[2]],
    )
}

/// Serialized bytes of a grid.
pub fn encode_grid<'a>(grid: impl Into<GridRef<'a>>) -> Vec<u8> {
    match grid.into() {
        GridRef::Labels(g) => {
            let mut out = spec_header(PayloadKind::Labels, g.spec());
            out.extend_from_slice(g.labels());
            out
        }
        GridRef::Probs(g) => {
            let mut out = spec_header(PayloadKind::Probs, g.spec());
            out.reserve(g.probs().len() * 8);
            for p in g.probs() {
                out.extend_from_slice(&p.to_le_bytes());
            }
            out
        }
        GridRef::Mask(g) => {
            let mut out = spec_header(PayloadKind::Mask, g.spec());
            out.extend(g.bits().iter().map(|&b| b as u8));
            out
        }
    }
}

struct Header {
    kind: PayloadKind,
    slots: [u32; 4],
    geometry: [f64; 4],
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(OccError::Format {
            offset: 0,
            reason: "bad magic, expected \"OCCK\"".into(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(OccError::Length {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes[4] != VERSION {
        return Err(OccError::Format {
            offset: 4,
            reason: format!("unsupported version {}", bytes[4]),
        });
    }
    let kind = PayloadKind::from_byte(bytes[5]).ok_or_else(|| OccError::Format {
        offset: 5,
        reason: format!("unknown payload kind {}", bytes[5]),
    })?;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(OccError::Format {
            offset: 6,
            reason: "reserved bytes are not zero".into(),
        });
    }
    let slots = std::array::from_fn(|i| LittleEndian::read_u32(&bytes[8 + 4 * i..]));
    let geometry = std::array::from_fn(|i| LittleEndian::read_f64(&bytes[24 + 8 * i..]));
    Ok(Header {
        kind,
        slots,
        geometry,
    })
}

fn header_spec(h: &Header) -> Result<GridSpec> {
    let [nx, ny, nz, k] = h.slots.map(|s| s as usize);
    let [size, x0, y0, z0] = h.geometry;
    GridSpec::new([nx, ny, nz], size, [x0, y0, z0], k).map_err(|e| OccError::Format {
        offset: 8,
        reason: e.to_string(),
    })
}

fn payload(bytes: &[u8], expected: usize) -> Result<&[u8]> {
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(OccError::Length {
            expected: (HEADER_LEN + expected) as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(body)
}

/// Decodes and validates a grid file held in memory.
pub fn decode_grid(bytes: &[u8]) -> Result<GridPayload> {
    let h = parse_header(bytes)?;
    if !matches!(
        h.kind,
        PayloadKind::Labels | PayloadKind::Probs | PayloadKind::Mask
    ) {
        return Err(OccError::Format {
            offset: 5,
            reason: format!("payload kind {:?} is not a grid", h.kind),
        });
    }
    let spec = header_spec(&h)?;
    let n = spec.num_voxels();
    Ok(match h.kind {
        PayloadKind::Labels => GridPayload::Labels(LabelGrid::new(spec, payload(bytes, n)?.to_vec())?),
        PayloadKind::Probs => {
            let body = payload(bytes, n * spec.num_classes() * 8)?;
            let probs = body.chunks_exact(8).map(LittleEndian::read_f64).collect();
            GridPayload::Probs(ProbGrid::new(spec, probs)?)
        }
        PayloadKind::Mask => {
            let body = payload(bytes, n)?;
            if let Some(v) = body.iter().position(|&b| b > 1) {
                return Err(OccError::Validation {
                    voxel: v,
                    reason: format!("mask byte {} is not 0 or 1", body[v]),
                });
            }
            GridPayload::Mask(VoxelMask::new(spec, body.iter().map(|&b| b == 1).collect())?)
        }
        PayloadKind::Params | PayloadKind::Images => unreachable!("rejected above"),
    })
}

/// Writes to a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    // same mode as a plain create, so the umask applies instead of 0600
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o666));
    let tmp = builder.tempfile_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(bytes)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| OccError::Io(e.error))?;
    Ok(())
}

pub fn write_grid<'a>(path: impl AsRef<Path>, grid: impl Into<GridRef<'a>>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_grid(grid))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<GridPayload> {
    decode_grid(&fs::read(path)?)
}

fn wrong_kind(expected: PayloadKind, found: PayloadKind) -> OccError {
    OccError::Format {
        offset: 5,
        reason: format!("expected {expected:?} payload, found {found:?}"),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelGrid> {
    match read_grid(path)? {
        GridPayload::Labels(g) => Ok(g),
        other => Err(wrong_kind(PayloadKind::Labels, other.kind())),
    }
}

pub fn read_probs(path: impl AsRef<Path>) -> Result<ProbGrid> {
    match read_grid(path)? {
        GridPayload::Probs(g) => Ok(g),
        other => Err(wrong_kind(PayloadKind::Probs, other.kind())),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<VoxelMask> {
    match read_grid(path)? {
        GridPayload::Mask(g) => Ok(g),
        other => Err(wrong_kind(PayloadKind::Mask, other.kind())),
    }
}

pub fn encode_images(imgs: &ImageSet) -> Vec<u8> {
    let (n, h, w, ch) = imgs.dims();
    let mut out = header(
        PayloadKind::Images,
        [n as u32, h as u32, w as u32, ch as u32],
        [0.0; 4],
    );
    out.extend_from_slice(imgs.data());
    out
}

pub fn decode_images(bytes: &[u8]) -> Result<ImageSet> {
    let h = parse_header(bytes)?;
    if h.kind != PayloadKind::Images {
        return Err(wrong_kind(PayloadKind::Images, h.kind));
    }
    let [n, rows, cols, ch] = h.slots.map(|s| s as usize);
    let body = payload(bytes, n * rows * cols * ch)?;
    ImageSet::new(n, rows, cols, ch, body.to_vec())
}

pub fn write_images(path: impl AsRef<Path>, imgs: &ImageSet) -> Result<()> {
    write_atomic(path.as_ref(), &encode_images(imgs))
}

pub fn read_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    decode_images(&fs::read(path)?)
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = header(PayloadKind::Params, [tensors.len() as u32, 0, 0, 0], [0.0; 4]);
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| OccError::invalid("tensor name", format!("{} too long", t.name)))?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(OccError::Shape(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        out.write_u16::<LittleEndian>(len)?;
        out.extend_from_slice(name);
        out.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &d in &t.shape {
            out.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in &t.data {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(out)
}

/// Bounds-checked cursor over a byte slice that reports absolute offsets.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(OccError::Length {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let h = parse_header(bytes)?;
    if h.kind != PayloadKind::Params {
        return Err(wrong_kind(PayloadKind::Params, h.kind));
    }
    let mut cur = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    let mut tensors = Vec::with_capacity(h.slots[0] as usize);
    for _ in 0..h.slots[0] {
        let at = cur.pos as u64;
        let len = LittleEndian::read_u16(cur.take(2)?) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| OccError::Format {
                offset: at + 2,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = LittleEndian::read_u32(cur.take(4)?) as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| Ok(LittleEndian::read_u32(cur.take(4)?) as usize))
            .collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let data = cur
            .take(count.checked_mul(8).ok_or_else(|| OccError::Format {
                offset: at,
                reason: format!("tensor {name} shape {shape:?} overflows"),
            })?)?
            .chunks_exact(8)
            .map(LittleEndian::read_f64)
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(OccError::Length {
            expected: cur.pos as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(tensors)
}

pub fn write_params(path: impl AsRef<Path>, params: &HeadParams) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensors(&params.to_named_tensors())?)
}

pub fn read_params(path: impl AsRef<Path>) -> Result<HeadParams> {
    HeadParams::from_named_tensors(&decode_tensors(&fs::read(path)?)?)
}

/// One box per non-empty line; class ids are checked against `num_classes`.
pub fn parse_boxes(text: &str, num_classes: usize) -> Result<Vec<DetectionBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |reason: String| OccError::Line { line: i + 1, reason };
        let b: DetectionBox = serde_json::from_str(line).map_err(|e| line_err(e.to_string()))?;
        b.validate(num_classes).map_err(|e| line_err(e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn read_boxes(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<DetectionBox>> {
    parse_boxes(&fs::read_to_string(path)?, num_classes)
}

pub fn format_boxes(boxes: &[DetectionBox]) -> Result<String> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&serde_json::to_string(b)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[DetectionBox]) -> Result<()> {
    write_atomic(path.as_ref(), format_boxes(boxes)?.as_bytes())
}

/// Per-class thresholds from JSON: a single number for every class, an
/// array with one entry per semantic class, or an object mapping class
/// names to thresholds (unnamed classes keep the default).
pub fn parse_thresholds(value: &Value, spec: &GridSpec, classes: &ClassTable) -> Result<Vec<f64>> {
    let semantic = spec.num_semantic();
    let bad = |reason: String| OccError::invalid("thresholds", reason);
    let thresholds = match value {
        Value::Number(n) => vec![n.as_f64().ok_or_else(|| bad(format!("{n}")))?; semantic],
        Value::Array(items) => {
            if items.len() != semantic {
                return Err(bad(format!("{} values for {semantic} classes", items.len())));
            }
            items
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| bad(format!("{v} is not a number"))))
                .collect::<Result<_>>()?
        }
        Value::Object(map) => {
            let mut t = vec![DEFAULT_THRESHOLD; semantic];
            for (name, v) in map {
                let id = classes
                    .id_of(name)
                    .filter(|&id| id < semantic)
                    .ok_or_else(|| bad(format!("unknown semantic class {name:?}")))?;
                t[id] = v.as_f64().ok_or_else(|| bad(format!("{v} is not a number")))?;
            }
            t
        }
        other => return Err(bad(format!("unsupported JSON value {other}"))),
    };
    ConversionConfig::new(thresholds.clone(), DEFAULT_SPACING)?;
    Ok(thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// One per input model, plus one for detections when boxes are fused.
    /// Uniform when absent.
    pub weights: Option<Vec<f64>>,
    pub strategy: Strategy,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            weights: None,
            strategy: Strategy::Weighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Det2OccSection {
    /// Per semantic class; all [`DEFAULT_THRESHOLD`] when absent.
    pub thresholds: Option<Vec<f64>>,
    pub spacing_t: f64,
}

impl Default for Det2OccSection {
    fn default() -> Self {
        Det2OccSection {
            thresholds: None,
            spacing_t: DEFAULT_SPACING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutoutSection {
    pub num_holes: usize,
    /// Hole side as a fraction of the image side.
    pub size: f64,
    pub fill: u8,
    pub seed: u64,
}

impl Default for CutoutSection {
    fn default() -> Self {
        CutoutSection {
            num_holes: 1,
            size: 0.25,
            fill: 0,
            seed: 0,
        }
    }
}

/// Pipeline configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub spec: GridSpec,
    pub ensemble: EnsembleSection,
    pub det2occ: Det2OccSection,
    pub cutout: CutoutSection,
    pub loss: LossWeights,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = &self.ensemble.weights {
            crate::ensemble::EnsembleWeights::new(w.clone())?;
        }
        self.conversion_config()?;
        if self.cutout.num_holes > 0 && !(self.cutout.size > 0.0 && self.cutout.size <= 1.0) {
            return Err(OccError::invalid(
                "run config",
                format!("cutout size {} outside (0, 1]", self.cutout.size),
            ));
        }
        LossWeights::new(self.loss.ce, self.loss.dice)?;
        Ok(())
    }

    pub fn conversion_config(&self) -> Result<ConversionConfig> {
        let cfg = match &self.det2occ.thresholds {
            Some(t) => ConversionConfig::new(t.clone(), self.det2occ.spacing_t)?,
            None => ConversionConfig::uniform(&self.spec, DEFAULT_THRESHOLD, self.det2occ.spacing_t)?,
        };
        cfg.check_against(&self.spec)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_spec(k: usize) -> GridSpec {
        GridSpec::new([1, 1, 1], 0.4, [-40.0, -40.0, -1.0], k).unwrap()
    }

    #[test]
    fn hand_assembled_label_file() {
        let mut bytes = b"OCCK".to_vec();
        bytes.extend_from_slice(&[1, 1, 0, 0]);
        for v in [1u32, 1, 1, 18] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [0.4f64, -40.0, -40.0, -1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(3);
        match decode_grid(&bytes).unwrap() {
            GridPayload::Labels(g) => {
                assert_eq!(g.labels(), &[3]);
                assert_eq!(g.spec(), &unit_spec(18));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(encode_grid(&LabelGrid::new(unit_spec(18), vec![3]).unwrap()), bytes);
    }

    #[test]
    fn single_voxel_mask_length() {
        let mask = VoxelMask::full(unit_spec(18));
        let bytes = encode_grid(&mask);
        assert_eq!(bytes.len(), 8 + 16 + 32 + 1);
        assert_eq!(bytes[HEADER_LEN], 1);
    }

    #[test]
    fn header_errors_report_offsets() {
        let good = encode_grid(&VoxelMask::full(unit_spec(3)));
        assert!(matches!(decode_grid(b"OCCX"), Err(OccError::Format { offset: 0, .. })));
        assert!(matches!(decode_grid(b"OCC"), Err(OccError::Format { offset: 0, .. })));
        assert!(matches!(decode_grid(&good[..20]), Err(OccError::Length { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_grid(&bad), Err(OccError::Format { offset: 4, .. })));
        let mut bad = good.clone();
        bad[5] = 9;
        assert!(matches!(decode_grid(&bad), Err(OccError::Format { offset: 5, .. })));
        let mut bad = good.clone();
        bad[7] = 1;
        assert!(matches!(decode_grid(&bad), Err(OccError::Format { offset: 6, .. })));
        let mut bad = good.clone();
        bad[8] = 0; // nx = 0
        assert!(matches!(decode_grid(&bad), Err(OccError::Format { offset: 8, .. })));
    }

    #[test]
    fn payload_length_and_content_validation() {
        let good = encode_grid(&VoxelMask::full(unit_spec(3)));
        assert!(matches!(
            decode_grid(&good[..HEADER_LEN]),
            Err(OccError::Length { expected: 57, found: 56 })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_grid(&long), Err(OccError::Length { .. })));
        let mut bad = good.clone();
        bad[HEADER_LEN] = 2;
        assert!(matches!(decode_grid(&bad), Err(OccError::Validation { voxel: 0, .. })));

        let s = GridSpec::new([2, 1, 1], 1.0, [0.0; 3], 2).unwrap();
        let mut probs = encode_grid(&ProbGrid::uniform(s));
        probs[HEADER_LEN + 16..].copy_from_slice(&[0.9f64.to_le_bytes(), 0.3f64.to_le_bytes()].concat());
        assert!(matches!(decode_grid(&probs), Err(OccError::Validation { voxel: 1, .. })));

        let labels = encode_grid(&LabelGrid::new(unit_spec(3), vec![3 - 1]).unwrap());
        let mut bad = labels.clone();
        bad[HEADER_LEN] = 3;
        assert!(matches!(decode_grid(&bad), Err(OccError::Validation { voxel: 0, .. })));
    }

    #[test]
    fn slightly_unnormalized_probs_are_renormalized() {
        let s = GridSpec::new([1, 1, 1], 1.0, [0.0; 3], 2).unwrap();
        let mut bytes = encode_grid(&ProbGrid::uniform(s));
        bytes[HEADER_LEN..].copy_from_slice(&[0.5f64.to_le_bytes(), (0.5f64 + 4e-7).to_le_bytes()].concat());
        let GridPayload::Probs(g) = decode_grid(&bytes).unwrap() else { panic!() };
        assert!((g.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn non_grid_kinds_are_not_grids() {
        let imgs = ImageSet::new(1, 1, 2, 1, vec![4, 5]).unwrap();
        let bytes = encode_images(&imgs);
        assert!(matches!(decode_grid(&bytes), Err(OccError::Format { offset: 5, .. })));
        assert_eq!(decode_images(&bytes).unwrap(), imgs);
        let grid = encode_grid(&VoxelMask::full(unit_spec(3)));
        assert!(decode_images(&grid).is_err());
        assert!(decode_tensors(&grid).is_err());
    }

    #[test]
    fn tensor_archive_layout() {
        let t = NamedTensor {
            name: "ab".into(),
            shape: vec![2],
            data: vec![1.5, -2.0],
        };
        let bytes = encode_tensors(std::slice::from_ref(&t)).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 2 + 2 + 4 + 4 + 16);
        assert_eq!(bytes[5], 4);
        assert_eq!(&bytes[HEADER_LEN..HEADER_LEN + 4], &[2, 0, b'a', b'b']);
        assert_eq!(decode_tensors(&bytes).unwrap(), vec![t]);
        assert!(matches!(
            decode_tensors(&bytes[..bytes.len() - 1]),
            Err(OccError::Length { .. })
        ));
    }

    #[test]
    fn boxes_parse_and_report_lines() {
        assert!(parse_boxes("", 18).unwrap().is_empty());
        let line = r#"{"center":[1,2,0.5],"size":[4,2,1.5],"yaw":0.3,"class_id":4,"score":0.9}"#;
        let boxes = parse_boxes(&format!("\n{line}\n\n"), 18).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].center, [1.0, 2.0, 0.5]);
        assert_eq!(boxes[0].class_id, 4);

        let bad_score = line.replace("0.9", "1.5");
        match parse_boxes(&bad_score, 18) {
            Err(OccError::Line { line: 1, .. }) => {}
            other => panic!("expected line error, got {other:?}"),
        }
        match parse_boxes(&format!("{line}\n{{not json"), 18) {
            Err(OccError::Line { line: 2, .. }) => {}
            other => panic!("expected line error, got {other:?}"),
        }
        let free_class = line.replace("\"class_id\":4", "\"class_id\":17");
        assert!(parse_boxes(&free_class, 18).is_err());
    }

    #[test]
    fn thresholds_from_json() {
        let spec = GridSpec::challenge();
        let classes = ClassTable::challenge();
        let t = parse_thresholds(&serde_json::json!(0.5), &spec, &classes).unwrap();
        assert_eq!(t, vec![0.5; 17]);
        let t = parse_thresholds(&serde_json::json!({"car": 0.6}), &spec, &classes).unwrap();
        assert_eq!(t[4], 0.6);
        assert_eq!(t[3], DEFAULT_THRESHOLD);
        assert!(parse_thresholds(&serde_json::json!({"free": 0.6}), &spec, &classes).is_err());
        assert!(parse_thresholds(&serde_json::json!([0.1, 0.2]), &spec, &classes).is_err());
        assert!(parse_thresholds(&serde_json::json!(1.5), &spec, &classes).is_err());
    }

    #[test]
    fn run_config_defaults_and_validation() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.spec, GridSpec::challenge());
        assert_eq!(cfg.det2occ.spacing_t, 0.2);
        assert_eq!(cfg.conversion_config().unwrap().thresholds, vec![0.3; 17]);
        assert_eq!(cfg.loss, LossWeights { ce: 1.0, dice: 1.0 });

        let cfg = RunConfig::from_json(
            r#"{"ensemble":{"weights":[2,1],"strategy":"vote"},"loss":{"ce":2.0,"dice":0.5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.ensemble.strategy, Strategy::Vote);
        assert_eq!(cfg.loss.ce, 2.0);

        assert!(RunConfig::from_json(r#"{"ensemble":{"weights":[0]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"det2occ":{"thresholds":[0.1]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss":{"ce":0,"dice":0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus":1}"#).is_err());
    }
}
