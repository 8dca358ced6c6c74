//! On-disk formats.
//!
//! **Cube files.** A raw little-endian payload, band-interleaved by pixel,
//! plus a JSON sidecar at `<payload>.json`:
//!
//! ```text
//! { "magic": "LADCUBE", "version": 1, "dims": [rows, cols] | [depth, rows, cols],
//!   "m": bands, "dtype": "f64" | "f32" | "u16", "layout": "bip",
//!   "byte_order": "little", "band_labels": [..] | null, "provenance": {..} }
//! ```
//!
//! Score maps are one-band `f64` cubes.
//!
//! **Masks** are binary PGM (`P5`, maxval 255, values 0/255) with a
//! `# lad-mask dims=a,b[,c]` comment line. Volumes stack their slices
//! vertically, so the image is `cols` wide and `depth * rows` tall.
//!
//! **Model bundles** hold a [`GraphModel`] or [`BackgroundStats`]:
//!
//! ```text
//! bytes 0..8     b"LADMODL1"
//! bytes 8..16    header length H, u64 little-endian
//! bytes 16..16+H UTF-8 JSON header; "arrays" lists name and shape in order
//! remainder      the listed arrays, f64 little-endian, column-major
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cube::{Dims, ImageCube, Mask};
use crate::error::{Error, Result};
use crate::graph::{Eigensystem, GraphModel, LaplacianVariant, Topology, WeightMatrix};
use crate::stats::{BackgroundStats, ConditioningReport};

pub const CUBE_MAGIC: &str = "LADCUBE";
pub const MODEL_MAGIC: &[u8; 8] = b"LADMODL1";
const MASK_COMMENT: &str = "# lad-mask dims=";

/// AVIRIS water-absorption bands, 1-based.
pub const AVIRIS_WATER_BANDS: [usize; 20] = [
    108, 109, 110, 111, 112, 154, 155, 156, 157, 158, 159, 160, 161, 162, 163, 164, 165, 166, 167, 224,
];

/// Writes `bytes` through a temporary file in the destination directory
/// and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    U16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub magic: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub m: usize,
    pub dtype: Dtype,
    pub layout: String,
    pub byte_order: String,
    #[serde(default)]
    pub band_labels: Option<Vec<String>>,
    #[serde(default)]
    pub provenance: Value,
}

pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_cube(path: &Path) -> Result<ImageCube> {
    read_cube_with_header(path).map(|(cube, _)| cube)
}

pub fn read_cube_with_header(path: &Path) -> Result<(ImageCube, CubeHeader)> {
    let hpath = header_path(path);
    let header: CubeHeader = serde_json::from_slice(&read_bytes(&hpath)?)
        .map_err(|e| format_err(&hpath, e.to_string()))?;
    if header.magic != CUBE_MAGIC {
        return Err(format_err(&hpath, format!("bad magic {:?}", header.magic)));
    }
    if header.version != 1 {
        return Err(format_err(&hpath, format!("unsupported version {}", header.version)));
    }
    if header.layout != "bip" || header.byte_order != "little" {
        return Err(format_err(&hpath, "only little-endian bip payloads are supported"));
    }
    let dims = Dims::new(header.dims.clone())?;
    let count = dims.num_pixels() * header.m;
    let bytes = read_bytes(path)?;
    let expected = (count * header.dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = decode(&bytes, header.dtype);
    let mut cube = ImageCube::new(dims, header.m, data)?;
    if let Some(labels) = &header.band_labels {
        cube = cube.with_band_labels(labels.clone())?;
    }
    Ok((cube, header))
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::U16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    }
}

pub fn write_cube(cube: &ImageCube, path: &Path, dtype: Dtype, provenance: Value) -> Result<()> {
    let mut payload = Vec::with_capacity(cube.data().len() * dtype.size());
    for (i, &v) in cube.data().iter().enumerate() {
        match dtype {
            Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::U16 => {
                if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                    return Err(Error::param(
                        "dtype",
                        format!("value {v} at sample {i} is not representable as u16"),
                    ));
                }
                payload.extend_from_slice(&(v as u16).to_le_bytes());
            }
        }
    }
    let header = CubeHeader {
        magic: CUBE_MAGIC.into(),
        version: 1,
        dims: cube.dims().extents().to_vec(),
        m: cube.bands(),
        dtype,
        layout: "bip".into(),
        byte_order: "little".into(),
        band_labels: cube.band_labels().map(<[String]>::to_vec),
        provenance,
    };
    let mut text = serde_json::to_vec_pretty(&header).expect("header serializes");
    text.push(b'\n');
    write_atomic(path, &payload)?;
    write_atomic(&header_path(path), &text)
}

/// Drops 1-based band indices, keeping the remaining bands in order.
pub fn discard_bands(cube: &ImageCube, bands: &[usize]) -> Result<ImageCube> {
    let m = cube.bands();
    let mut drop = vec![false; m];
    for &b in bands {
        if b == 0 || b > m {
            return Err(Error::param("bands", format!("band {b} outside 1..={m}")));
        }
        if drop[b - 1] {
            return Err(Error::param("bands", format!("band {b} listed twice")));
        }
        drop[b - 1] = true;
    }
    let keep: Vec<usize> = (0..m).filter(|&k| !drop[k]).collect();
    if keep.is_empty() {
        return Err(Error::param("bands", "cannot discard every band"));
    }
    let data = cube
        .pixels()
        .flat_map(|px| keep.iter().map(move |&k| px[k]))
        .collect();
    let labels: Vec<String> = match cube.band_labels() {
        Some(l) => keep.iter().map(|&k| l[k].clone()).collect(),
        None => keep.iter().map(|&k| (k + 1).to_string()).collect(),
    };
    ImageCube::new(cube.dims().clone(), keep.len(), data)?.with_band_labels(labels)
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let ext = mask.dims().extents();
    let cols = ext[ext.len() - 1];
    let height = mask.dims().num_pixels() / cols;
    let dims_text: Vec<String> = ext.iter().map(usize::to_string).collect();
    let mut out = format!("P5\n{MASK_COMMENT}{}\n{cols} {height}\n255\n", dims_text.join(",")).into_bytes();
    out.extend(mask.values().iter().map(|&v| if v { 255u8 } else { 0 }));
    write_atomic(path, &out)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    let mut dims_comment = None;
    // Header: magic, width, height, maxval, with comment lines anywhere.
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(format_err(path, "truncated PGM header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            let line = String::from_utf8_lossy(&bytes[pos..end]).into_owned();
            if let Some(rest) = line.strip_prefix(MASK_COMMENT) {
                dims_comment = Some(rest.trim().to_string());
            }
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, found {:?}", tokens[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad number {s:?}")));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, "only 8-bit PGM masks are supported"));
    }
    let expected = (width * height) as u64;
    let actual = bytes.len().saturating_sub(pos) as u64;
    if actual != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    let dims = match dims_comment {
        Some(text) => {
            let ext = text
                .split(',')
                .map(|s| parse(s.trim()))
                .collect::<Result<Vec<_>>>()?;
            Dims::new(ext)?
        }
        None => Dims::d2(height, width)?,
    };
    if dims.num_pixels() as u64 != expected {
        return Err(format_err(path, "dims comment disagrees with image size"));
    }
    Mask::new(dims, bytes[pos..].iter().map(|&b| b != 0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum BundleHeader {
    Graph {
        order: usize,
        bands: usize,
        variant: LaplacianVariant,
        topology: Topology,
        clamped: usize,
        provenance: Value,
        arrays: Vec<ArraySpec>,
    },
    Stats {
        bands: usize,
        conditioning: Option<ConditioningReport>,
        provenance: Value,
        arrays: Vec<ArraySpec>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBundle {
    Graph(GraphModel),
    Stats(BackgroundStats),
}

struct PayloadWriter {
    arrays: Vec<ArraySpec>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter {
            arrays: Vec::new(),
            bytes: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) {
        self.arrays.push(ArraySpec {
            name: name.into(),
            shape,
        });
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn write_bundle(bundle: &ModelBundle, path: &Path, provenance: Value) -> Result<()> {
    let mut w = PayloadWriter::new();
    let header = match bundle {
        ModelBundle::Graph(model) => {
            let n = model.order();
            let m = model.bands();
            w.push("mean", vec![m], model.mean.as_slice());
            w.push("weights", vec![n, n], model.weights.matrix().as_slice());
            w.push("degree", vec![n], model.degree.as_slice());
            w.push("laplacian", vec![n, n], model.laplacian.as_slice());
            if let Some(eig) = &model.eigensystem {
                w.push("eigenvalues", vec![n], eig.values.as_slice());
                w.push("eigenvectors", vec![n, n], eig.vectors.as_slice());
            }
            BundleHeader::Graph {
                order: n,
                bands: m,
                variant: model.variant,
                topology: model.topology(),
                clamped: model.weights.clamped(),
                provenance,
                arrays: std::mem::take(&mut w.arrays),
            }
        }
        ModelBundle::Stats(stats) => {
            let m = stats.bands();
            w.push("mean", vec![m], stats.mean.as_slice());
            w.push("covariance", vec![m, m], stats.covariance.as_slice());
            if let Some(q) = &stats.precision {
                w.push("precision", vec![m, m], q.as_slice());
            }
            BundleHeader::Stats {
                bands: m,
                conditioning: stats.conditioning,
                provenance,
                arrays: std::mem::take(&mut w.arrays),
            }
        }
    };
    let json = serde_json::to_vec(&header).expect("bundle header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + w.bytes.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.bytes);
    write_atomic(path, &out)
}

pub fn read_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
        return Err(format_err(path, "missing LADMODL1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(path, "header length exceeds file"))?;
    let header: BundleHeader =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| format_err(path, e.to_string()))?;
    let arrays = match &header {
        BundleHeader::Graph { arrays, .. } | BundleHeader::Stats { arrays, .. } => arrays,
    };
    let expected: usize = arrays.iter().map(|a| a.shape.iter().product::<usize>() * 8).sum();
    let payload = &bytes[body..];
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: payload.len() as u64,
        });
    }
    let values = decode(payload, Dtype::F64);
    let mut offset = 0;
    let mut table = std::collections::HashMap::new();
    for a in arrays {
        let len: usize = a.shape.iter().product();
        table.insert(a.name.as_str(), (&a.shape, &values[offset..offset + len]));
        offset += len;
    }
    let vector = |name: &str| -> Result<DVector<f64>> {
        let (_, v) = table.get(name).ok_or_else(|| format_err(path, format!("missing array {name}")))?;
        Ok(DVector::from_column_slice(v))
    };
    let matrix = |name: &str| -> Result<DMatrix<f64>> {
        let (shape, v) = table.get(name).ok_or_else(|| format_err(path, format!("missing array {name}")))?;
        if shape.len() != 2 {
            return Err(format_err(path, format!("array {name} is not 2D")));
        }
        Ok(DMatrix::from_column_slice(shape[0], shape[1], v))
    };
    match &header {
        BundleHeader::Graph {
            variant,
            topology,
            clamped,
            ..
        } => {
            let weights = WeightMatrix::new(matrix("weights")?, *topology)?.with_clamped(*clamped);
            let eigensystem = if table.contains_key("eigenvalues") {
                Some(Eigensystem {
                    values: vector("eigenvalues")?,
                    vectors: matrix("eigenvectors")?,
                })
            } else {
                None
            };
            Ok(ModelBundle::Graph(GraphModel {
                weights,
                degree: vector("degree")?,
                laplacian: matrix("laplacian")?,
                variant: *variant,
                eigensystem,
                mean: vector("mean")?,
            }))
        }
        BundleHeader::Stats { conditioning, .. } => Ok(ModelBundle::Stats(BackgroundStats {
            mean: vector("mean")?,
            covariance: matrix("covariance")?,
            precision: if table.contains_key("precision") {
                Some(matrix("precision")?)
            } else {
                None
            },
            conditioning: *conditioning,
        })),
    }
}

/// Reads an ENVI-style raster described by a `.hdr` file. The payload is
/// looked up next to the header with the extension stripped, or with
/// `.img`, `.raw`, `.dat` or `.bsq`/`.bil`/`.bip`.
pub fn read_envi(hdr: &Path) -> Result<ImageCube> {
    let text = fs::read_to_string(hdr).map_err(|e| Error::io(hdr, e))?;
    let fields = parse_envi_header(&text);
    let get = |key: &str| fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let num = |key: &str| -> Result<usize> {
        get(key)
            .ok_or_else(|| format_err(hdr, format!("missing `{key}`")))?
            .trim()
            .parse()
            .map_err(|_| format_err(hdr, format!("bad `{key}`")))
    };
    let samples = num("samples")?;
    let lines = num("lines")?;
    let bands = num("bands")?;
    let data_type = num("data type")?;
    let offset = get("header offset").map_or(Ok(0), |_| num("header offset"))?;
    let big_endian = get("byte order").map(str::trim) == Some("1");
    let interleave = get("interleave").unwrap_or("bsq").trim().to_ascii_lowercase();
    let size = match data_type {
        1 => 1,
        2 | 12 => 2,
        3 | 4 => 4,
        5 => 8,
        other => return Err(format_err(hdr, format!("unsupported ENVI data type {other}"))),
    };

    let stem = hdr.with_extension("");
    let payload_path = ["", "img", "raw", "dat", &interleave]
        .iter()
        .map(|ext| if ext.is_empty() { stem.clone() } else { stem.with_extension(ext) })
        .find(|p| p.is_file())
        .ok_or_else(|| format_err(hdr, "no payload file found next to header"))?;
    let bytes = read_bytes(&payload_path)?;
    let count = samples * lines * bands;
    let expected = (offset + count * size) as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::PayloadLength {
            path: payload_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let raw = &bytes[offset..offset + count * size];
    let value = |i: usize| -> f64 {
        let mut b = [0u8; 8];
        b[..size].copy_from_slice(&raw[i * size..(i + 1) * size]);
        if big_endian {
            b[..size].reverse();
        }
        match data_type {
            1 => b[0] as f64,
            2 => i16::from_le_bytes([b[0], b[1]]) as f64,
            12 => u16::from_le_bytes([b[0], b[1]]) as f64,
            3 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            4 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            _ => f64::from_le_bytes(b),
        }
    };
    let mut data = vec![0.0; count];
    for line in 0..lines {
        for sample in 0..samples {
            for band in 0..bands {
                let src = match interleave.as_str() {
                    "bip" => (line * samples + sample) * bands + band,
                    "bil" => (line * bands + band) * samples + sample,
                    _ => (band * lines + line) * samples + sample,
                };
                data[(line * samples + sample) * bands + band] = value(src);
            }
        }
    }
    let cube = ImageCube::new(Dims::d2(lines, samples)?, bands, data)?;
    match get("band names") {
        Some(names) => {
            let labels: Vec<String> = names
                .trim_matches(|c| c == '{' || c == '}')
                .split(',')
                .map(|s| s.trim().to_string())
                .collect();
            if labels.len() == bands {
                cube.with_band_labels(labels)
            } else {
                Ok(cube)
            }
        }
        None => Ok(cube),
    }
}

fn parse_envi_header(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let mut value = value.trim().to_string();
        if value.starts_with('{') {
            while !value.contains('}') {
                match lines.next() {
                    Some(more) => {
                        value.push(' ');
                        value.push_str(more.trim());
                    }
                    None => break,
                }
            }
        }
        out.push((key.trim().to_ascii_lowercase(), value));
    }
    out
}
