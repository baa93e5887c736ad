//! Volume files and dataset manifests.
//!
//! Two on-disk volume formats are supported:
//! - single-file NIfTI-1 (`.nii` or gzip-compressed `.nii.gz`);
//! - a plain pair: `<name>.json` header (dims, spacing, origin, dtype) next to
//!   `<name>.raw` holding little-endian scalars in `z, y, x` order (x fastest).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TagsError};
use crate::volume::{MaskVolume, Volume};

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::I32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn nifti_code(self) -> i16 {
        match self {
            DType::U8 => 2,
            DType::I16 => 4,
            DType::I32 => 8,
            DType::F32 => 16,
            DType::F64 => 64,
        }
    }

    fn from_nifti_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DType::U8,
            4 => DType::I16,
            8 => DType::I32,
            16 => DType::F32,
            64 => DType::F64,
            other => return Err(TagsError::Format(format!("unsupported NIfTI datatype {other}"))),
        })
    }
}

fn decode_scalars(bytes: &[u8], dtype: DType, big_endian: bool, n: usize) -> Result<Vec<f64>> {
    let need = n * dtype.size();
    if bytes.len() < need {
        return Err(TagsError::Format(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for chunk in bytes[..need].chunks_exact(dtype.size()) {
        macro_rules! read {
            ($t:ty) => {{
                let arr = chunk.try_into().expect("chunk size");
                if big_endian {
                    <$t>::from_be_bytes(arr) as f64
                } else {
                    <$t>::from_le_bytes(arr) as f64
                }
            }};
        }
        out.push(match dtype {
            DType::U8 => chunk[0] as f64,
            DType::I16 => read!(i16),
            DType::I32 => read!(i32),
            DType::F32 => read!(f32),
            DType::F64 => read!(f64),
        });
    }
    Ok(out)
}

fn encode_scalars(data: impl Iterator<Item = f64>, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    for v in data {
        match dtype {
            DType::U8 => out.push(v as u8),
            DType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            DType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Raw decoded raster with geometry, before it is typed as image or mask.
#[derive(Debug, Clone)]
pub struct RawVolume {
    pub data: Array3<f64>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl RawVolume {
    pub fn into_volume(self) -> Result<Volume> {
        Volume::with_origin(self.data, self.spacing, self.origin)
    }

    pub fn into_mask(self) -> Result<MaskVolume> {
        MaskVolume::from_nonzero(&self.data, self.spacing, self.origin)
    }
}

fn gunzip_if_needed(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| TagsError::Format(format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

/// Parses a NIfTI-1 single file, gzip-compressed or not.
pub fn parse_nifti(bytes: &[u8]) -> Result<RawVolume> {
    let buf = gunzip_if_needed(bytes)?;
    if buf.len() < NIFTI_HEADER_LEN {
        return Err(TagsError::Format("NIfTI header truncated".into()));
    }
    let le = i32::from_le_bytes(buf[0..4].try_into().unwrap()) == 348;
    let be = i32::from_be_bytes(buf[0..4].try_into().unwrap()) == 348;
    if !le && !be {
        return Err(TagsError::Format("not a NIfTI-1 file (sizeof_hdr != 348)".into()));
    }
    if &buf[344..347] != b"n+1" {
        return Err(TagsError::Format("only single-file NIfTI (magic n+1) is supported".into()));
    }
    let i16_at = |o: usize| {
        let b = buf[o..o + 2].try_into().unwrap();
        if be { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    };
    let f32_at = |o: usize| {
        let b = buf[o..o + 4].try_into().unwrap();
        if be { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    };
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(TagsError::Format(format!("bad dim[0] = {ndim}")));
    }
    let dim = |i: usize| if (i as i16) <= ndim { i16_at(40 + 2 * i).max(1) as usize } else { 1 };
    let (nx, ny, nz) = (dim(1), dim(2), dim(3));
    if (4..=7).any(|i| dim(i) != 1) {
        return Err(TagsError::Format("only 3D volumes are supported".into()));
    }
    let dtype = DType::from_nifti_code(i16_at(70))?;
    let pix = |i: usize| {
        let v = f32_at(76 + 4 * i).abs() as f64;
        if v > 0.0 { v } else { 1.0 }
    };
    let spacing = [pix(3), pix(2), pix(1)];
    let vox_offset = f32_at(108) as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let origin = if i16_at(252) > 0 {
        [f32_at(276) as f64, f32_at(272) as f64, f32_at(268) as f64]
    } else {
        [0.0; 3]
    };
    let n = nx * ny * nz;
    let offset = vox_offset.max(NIFTI_HEADER_LEN);
    if buf.len() < offset {
        return Err(TagsError::Format("NIfTI raster offset past end of file".into()));
    }
    let mut values = decode_scalars(&buf[offset..], dtype, be, n)?;
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        for v in values.iter_mut() {
            *v = *v * slope + inter;
        }
    }
    let data = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|e| TagsError::Format(e.to_string()))?;
    Ok(RawVolume { data, spacing, origin })
}

/// Serializes to a NIfTI-1 single file (little-endian, identity orientation).
pub fn encode_nifti(data: &Array3<f64>, spacing: [f64; 3], origin: [f64; 3], dtype: DType, gzip: bool) -> Vec<u8> {
    let (nz, ny, nx) = data.dim();
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (i, v) in [3, nx, ny, nz, 1, 1, 1, 1].iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *v as i16);
    }
    put_i16(&mut h, 70, dtype.nifti_code());
    put_i16(&mut h, 72, (dtype.size() * 8) as i16);
    for (i, v) in [1.0, spacing[2], spacing[1], spacing[0], 1.0, 0.0, 0.0, 0.0].iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *v as f32);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 10; // xyzt_units: mm, s
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 268, origin[2] as f32);
    put_f32(&mut h, 272, origin[1] as f32);
    put_f32(&mut h, 276, origin[0] as f32);
    let srow = [
        [spacing[2], 0.0, 0.0, origin[2]],
        [0.0, spacing[1], 0.0, origin[1]],
        [0.0, 0.0, spacing[0], origin[0]],
    ];
    for (r, row) in srow.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * c, *v as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend(encode_scalars(data.iter().copied(), dtype));
    if gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&h).expect("in-memory write");
        enc.finish().expect("in-memory write")
    } else {
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    pub dtype: DType,
}

pub fn parse_plain(header: &PlainHeader, raw: &[u8]) -> Result<RawVolume> {
    let n = header.dims.iter().product();
    if raw.len() != n * header.dtype.size() {
        return Err(TagsError::Format(format!(
            "raw payload has {} bytes, header implies {}",
            raw.len(),
            n * header.dtype.size()
        )));
    }
    let values = decode_scalars(raw, header.dtype, false, n)?;
    let data = Array3::from_shape_vec(header.dims, values).map_err(|e| TagsError::Format(e.to_string()))?;
    Ok(RawVolume {
        data,
        spacing: header.spacing,
        origin: header.origin,
    })
}

fn raw_path_for(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

pub fn read_raw(path: &Path) -> Result<RawVolume> {
    if is_nifti(path) {
        let bytes = fs::read(path).map_err(|e| TagsError::io(path, e))?;
        parse_nifti(&bytes)
    } else if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| TagsError::io(path, e))?;
        let header: PlainHeader = serde_json::from_str(&text)?;
        let raw_path = raw_path_for(path);
        let raw = fs::read(&raw_path).map_err(|e| TagsError::io(&raw_path, e))?;
        parse_plain(&header, &raw)
    } else {
        Err(TagsError::Format(format!(
            "{}: expected .nii, .nii.gz or a .json plain header",
            path.display()
        )))
    }
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    read_raw(path)?.into_volume()
}

pub fn load_mask(path: &Path) -> Result<MaskVolume> {
    read_raw(path)?.into_mask()
}

fn write_raw(path: &Path, data: &Array3<f64>, spacing: [f64; 3], origin: [f64; 3], dtype: DType) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| TagsError::io(dir, e))?;
        }
    }
    if is_nifti(path) {
        let gz = path.to_string_lossy().to_ascii_lowercase().ends_with(".gz");
        fs::write(path, encode_nifti(data, spacing, origin, dtype, gz)).map_err(|e| TagsError::io(path, e))
    } else if path.extension().is_some_and(|e| e == "json") {
        let (d, h, w) = data.dim();
        let header = PlainHeader {
            dims: [d, h, w],
            spacing,
            origin,
            dtype,
        };
        fs::write(path, serde_json::to_string_pretty(&header)?).map_err(|e| TagsError::io(path, e))?;
        let raw_path = raw_path_for(path);
        fs::write(&raw_path, encode_scalars(data.iter().copied(), dtype)).map_err(|e| TagsError::io(&raw_path, e))
    } else {
        Err(TagsError::Format(format!("{}: unknown volume extension", path.display())))
    }
}

/// Images are stored as `f32`.
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    write_raw(path, &v.data, v.spacing, v.origin, DType::F32)
}

pub fn save_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    write_raw(path, &m.as_f64(), m.spacing(), m.origin(), DType::U8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub image: PathBuf,
    pub organ: PathBuf,
    pub tumor: PathBuf,
    pub organ_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseRecord>,
    /// Directory that relative case paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Loads a manifest. Relative paths resolve against `data_root` when given,
    /// else against the manifest's own directory.
    pub fn load(path: &Path, data_root: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TagsError::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = match data_root {
            Some(r) => r.to_path_buf(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| TagsError::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_case(&self, case: &CaseRecord) -> Result<LoadedCase> {
        let image = load_volume(&self.resolve(&case.image))?;
        let organ = load_mask(&self.resolve(&case.organ))?;
        let tumor = load_mask(&self.resolve(&case.tumor))?;
        if image.shape() != organ.shape() || image.shape() != tumor.shape() {
            return Err(TagsError::ShapeMismatch(format!(
                "case {}: image {:?}, organ {:?}, tumor {:?}",
                case.id,
                image.shape(),
                organ.shape(),
                tumor.shape()
            )));
        }
        Ok(LoadedCase {
            id: case.id.clone(),
            organ_name: case.organ_name.clone(),
            image,
            organ,
            tumor,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub id: String,
    pub organ_name: String,
    pub image: Volume,
    pub organ: MaskVolume,
    pub tumor: MaskVolume,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        Volume::with_origin(
            Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 20 + y * 5 + x) as f64 - 7.5),
            [2.5, 0.8, 0.8],
            [-10.0, 4.0, 3.5],
        )
        .unwrap()
    }

    #[test]
    fn nifti_round_trip_gz_and_plain() {
        let v = sample();
        for gz in [false, true] {
            let bytes = encode_nifti(&v.data, v.spacing, v.origin, DType::F32, gz);
            let back = parse_nifti(&bytes).unwrap();
            assert_eq!(back.data, v.data);
            assert_eq!(back.spacing.map(|s| s as f32), v.spacing.map(|s| s as f32));
            assert_eq!(back.origin, v.origin);
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        for name in ["a.nii.gz", "b.nii", "c.json"] {
            let p = dir.path().join(name);
            save_volume(&p, &v).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.data, v.data, "{name}");
        }
        let m = MaskVolume::from_nonzero(&v.data.mapv(|x| f64::from(x > 3.0)), v.spacing, v.origin).unwrap();
        let p = dir.path().join("m.nii.gz");
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap().data, m.data);
    }

    #[test]
    fn truncated_nifti_is_rejected() {
        let v = sample();
        let bytes = encode_nifti(&v.data, v.spacing, v.origin, DType::F32, false);
        assert!(parse_nifti(&bytes[..bytes.len() - 3]).is_err());
        assert!(parse_nifti(&bytes[..100]).is_err());
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            cases: vec![CaseRecord {
                id: "c0".into(),
                image: "img.nii.gz".into(),
                organ: "organ.nii.gz".into(),
                tumor: "tumor.nii.gz".into(),
                organ_name: "kidney".into(),
            }],
            root: PathBuf::new(),
        };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path, None).unwrap();
        assert_eq!(loaded.resolve(Path::new("img.nii.gz")), dir.path().join("img.nii.gz"));
        let rooted = DatasetManifest::load(&path, Some(Path::new("/data"))).unwrap();
        assert_eq!(rooted.resolve(Path::new("x.nii")), PathBuf::from("/data/x.nii"));
    }
}
