//! Import-only reader for single-file, uncompressed NIfTI-1 (`.nii`).
//!
//! Supported datatypes are uint8, int16 and float32. Orientation matrices
//! are ignored; voxels are returned in file order (`x` fastest), which is
//! the crate's volume layout.

use std::path::{Path, PathBuf};

use super::{Case, Dims, Grade, LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};
use crate::fsutil;

pub const HEADER_SIZE: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Raw voxel payload, before intensity scaling.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl NiftiData {
    fn code(&self) -> (i16, i16) {
        match self {
            NiftiData::U8(_) => (DT_UINT8, 8),
            NiftiData::I16(_) => (DT_INT16, 16),
            NiftiData::F32(_) => (DT_FLOAT32, 32),
        }
    }

    fn len(&self) -> usize {
        match self {
            NiftiData::U8(v) => v.len(),
            NiftiData::I16(v) => v.len(),
            NiftiData::F32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub dims: Dims,
    pub pixdim: [f32; 3],
    /// Scaled intensities (`slope · raw + inter` when a slope is set).
    pub data: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, at: usize) -> i32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().expect("4 bytes");
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }
}

/// Parses an in-memory `.nii` file.
pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::Unsupported("compressed NIfTI (.nii.gz)".into()));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format("NIfTI", "file shorter than the 348-byte header"));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) == 348 => true,
        _ => return Err(Error::format("NIfTI", format!("sizeof_hdr is {le}, expected 348"))),
    };
    let r = Reader { bytes, big_endian };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::Unsupported("two-file NIfTI (.hdr/.img)".into())),
        other => return Err(Error::format("NIfTI", format!("bad magic {other:?}"))),
    }
    let ndim = r.i16(40);
    let extents: Vec<i16> = (1..=7).map(|i| r.i16(40 + 2 * i)).collect();
    if !(3..=7).contains(&ndim) {
        return Err(Error::Unsupported(format!("{ndim}-dimensional NIfTI image")));
    }
    if extents[3..ndim as usize].iter().any(|&e| e != 1) {
        return Err(Error::Unsupported("NIfTI time series or vector images".into()));
    }
    if extents[..3].iter().any(|&e| e < 1) {
        return Err(Error::format(
            "NIfTI",
            format!("non-positive extent in {:?}", &extents[..3]),
        ));
    }
    let dims = [extents[0] as usize, extents[1] as usize, extents[2] as usize];
    let n: usize = dims.iter().product();
    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
    };
    let pixdim = [r.f32(80), r.f32(84), r.f32(88)];
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::format("NIfTI", format!("invalid vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let end = start + n * width;
    if bytes.len() < end {
        return Err(Error::format(
            "NIfTI",
            format!("need {end} bytes, file has {}", bytes.len()),
        ));
    }
    let raw = &bytes[start..end];
    let values: Vec<f32> = match datatype {
        DT_UINT8 => raw.iter().map(|&v| f32::from(v)).collect(),
        DT_INT16 => (0..n).map(|i| f32::from(r.i16(start + 2 * i))).collect(),
        _ => (0..n).map(|i| r.f32(start + 4 * i)).collect(),
    };
    let slope = r.f32(112);
    let inter = r.f32(116);
    let data = if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        values.into_iter().map(|v| slope * v + inter).collect()
    } else {
        values
    };
    Ok(NiftiImage { dims, pixdim, data })
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    parse_nifti(&fsutil::read(path)?).map_err(|e| match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

/// Encodes a little-endian single-file NIfTI-1 image. Intended for test
/// fixtures and examples; the crate does not export NIfTI otherwise.
pub fn encode_nifti(dims: Dims, data: &NiftiData, scale: Option<(f32, f32)>) -> Result<Vec<u8>> {
    if data.len() != dims.iter().product::<usize>() || dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!(
            "{} values do not fit dims {dims:?}",
            data.len()
        )));
    }
    let mut h = vec![0u8; HEADER_SIZE + 4];
    let put16 = |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put32 = |h: &mut Vec<u8>, at: usize, v: [u8; 4]| h[at..at + 4].copy_from_slice(&v);
    put32(&mut h, 0, 348i32.to_le_bytes());
    put16(&mut h, 40, 3);
    for (i, &d) in dims.iter().enumerate() {
        put16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in 3..7 {
        put16(&mut h, 42 + 2 * i, 1);
    }
    let (code, bitpix) = data.code();
    put16(&mut h, 70, code);
    put16(&mut h, 72, bitpix);
    for i in 0..4 {
        put32(&mut h, 76 + 4 * i, 1.0f32.to_le_bytes());
    }
    put32(&mut h, 108, 352.0f32.to_le_bytes());
    let (slope, inter) = scale.unwrap_or((0.0, 0.0));
    put32(&mut h, 112, slope.to_le_bytes());
    put32(&mut h, 116, inter.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    match data {
        NiftiData::U8(v) => h.extend_from_slice(v),
        NiftiData::I16(v) => v.iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
        NiftiData::F32(v) => v.iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(h)
}

/// File suffixes of a BRATS case directory, in modality order.
pub const BRATS_SUFFIXES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

fn brats_file(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}_{suffix}.nii"))
}

/// Loads a BRATS-style case directory `<id>/<id>_{t1,t1ce,t2,flair,seg}.nii`.
/// The segmentation is optional. `grade` defaults to the parent directory
/// name when it is `HGG` or `LGG`.
pub fn load_brats_case(dir: &Path, grade: Option<Grade>) -> Result<(MultiModalVolume, Option<LabelVolume>, Grade)> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no directory name", dir.display())))?;
    let grade = grade
        .or_else(|| match dir.parent()?.file_name()?.to_str()? {
            "HGG" => Some(Grade::Hgg),
            "LGG" => Some(Grade::Lgg),
            _ => None,
        })
        .ok_or_else(|| Error::InvalidArgument(format!("grade of {id} is unknown; pass it explicitly")))?;
    let mut dims = None;
    let mut modalities = Vec::with_capacity(4);
    for suffix in BRATS_SUFFIXES {
        let img = read_nifti(&brats_file(dir, &id, suffix))?;
        if *dims.get_or_insert(img.dims) != img.dims {
            return Err(Error::shape("BRATS modalities", &dims.unwrap_or(img.dims), &img.dims));
        }
        modalities.push(img.data);
    }
    let dims = dims.expect("four modalities read");
    let modalities: [Vec<f32>; 4] = modalities.try_into().expect("four modalities");
    let volume = MultiModalVolume::from_modalities(id.clone(), dims, modalities)?;
    let seg_path = brats_file(dir, &id, "seg");
    let labels = if seg_path.is_file() {
        let seg = read_nifti(&seg_path)?;
        if seg.dims != dims {
            return Err(Error::shape("BRATS segmentation", &dims, &seg.dims));
        }
        let mut values = Vec::with_capacity(seg.data.len());
        for v in seg.data {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::format("NIfTI", format!("{id}: non-integer label {v}")));
            }
            values.push(v as u8);
        }
        Some(LabelVolume::new(dims, values)?)
    } else {
        None
    };
    Ok((volume, labels, grade))
}

/// Loads every labelled BRATS case under `root/HGG` and `root/LGG`.
pub fn load_brats_dataset(root: &Path) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for grade_dir in ["HGG", "LGG"] {
        let dir = root.join(grade_dir);
        if !dir.is_dir() {
            continue;
        }
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            let (volume, labels, grade) = load_brats_case(&sub, None)?;
            let labels =
                labels.ok_or_else(|| Error::format("NIfTI", format!("{} has no segmentation", sub.display())))?;
            cases.push(Case { volume, labels, grade });
        }
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_datatype() {
        let dims = [3, 2, 2];
        let u8s: Vec<u8> = (0..12).collect();
        let img = parse_nifti(&encode_nifti(dims, &NiftiData::U8(u8s), None).unwrap()).unwrap();
        assert_eq!(img.dims, dims);
        assert_eq!(img.data[11], 11.0);
        let i16s: Vec<i16> = (0..12).map(|v| v * 100 - 300).collect();
        let img = parse_nifti(&encode_nifti(dims, &NiftiData::I16(i16s), None).unwrap()).unwrap();
        assert_eq!(img.data[0], -300.0);
        let f32s: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect();
        let img = parse_nifti(&encode_nifti(dims, &NiftiData::F32(f32s.clone()), None).unwrap()).unwrap();
        assert_eq!(img.data, f32s);
    }

    #[test]
    fn applies_scale_slope_and_intercept() {
        let bytes = encode_nifti([2, 1, 1], &NiftiData::I16(vec![1, 3]), Some((2.0, -1.0))).unwrap();
        assert_eq!(parse_nifti(&bytes).unwrap().data, vec![1.0, 5.0]);
    }

    #[test]
    fn reads_big_endian_headers() {
        // Hand-built big-endian file: 2×1×1 int16 values 7 and -2.
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        h[40..42].copy_from_slice(&3i16.to_be_bytes());
        for (i, d) in [2i16, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        h[108..112].copy_from_slice(&352.0f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&7i16.to_be_bytes());
        h.extend_from_slice(&(-2i16).to_be_bytes());
        let img = parse_nifti(&h).unwrap();
        assert_eq!(img.dims, [2, 1, 1]);
        assert_eq!(img.data, vec![7.0, -2.0]);
    }

    #[test]
    fn honours_vox_offset() {
        let mut bytes = encode_nifti([2, 1, 1], &NiftiData::U8(vec![9, 8]), None).unwrap();
        bytes.splice(352..352, [0u8; 8]);
        bytes[108..112].copy_from_slice(&360.0f32.to_le_bytes());
        assert_eq!(parse_nifti(&bytes).unwrap().data, vec![9.0, 8.0]);
    }

    #[test]
    fn unsupported_features_are_explicit() {
        let gz = [0x1f, 0x8b, 8, 0];
        assert!(matches!(parse_nifti(&gz), Err(Error::Unsupported(_))));
        let mut pair = encode_nifti([1, 1, 1], &NiftiData::U8(vec![0]), None).unwrap();
        pair[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(parse_nifti(&pair), Err(Error::Unsupported(_))));
        let mut f64_img = encode_nifti([1, 1, 1], &NiftiData::U8(vec![0]), None).unwrap();
        f64_img[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(parse_nifti(&f64_img), Err(Error::Unsupported(_))));
        let mut series = encode_nifti([1, 1, 1], &NiftiData::U8(vec![0]), None).unwrap();
        series[40..42].copy_from_slice(&4i16.to_le_bytes());
        series[48..50].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(parse_nifti(&series), Err(Error::Unsupported(_))));
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(parse_nifti(&[0u8; 10]).is_err());
        let bytes = encode_nifti([2, 2, 2], &NiftiData::U8(vec![0; 8]), None).unwrap();
        assert!(parse_nifti(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(parse_nifti(&bad).is_err());
    }

    #[test]
    fn loads_brats_layout() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("LGG").join("Brats18_X_1");
        std::fs::create_dir_all(&dir).unwrap();
        let dims = [2, 2, 1];
        for (m, suffix) in BRATS_SUFFIXES.iter().enumerate() {
            let data = NiftiData::I16(vec![m as i16; 4]);
            std::fs::write(
                brats_file(&dir, "Brats18_X_1", suffix),
                encode_nifti(dims, &data, None).unwrap(),
            )
            .unwrap();
        }
        let seg = NiftiData::U8(vec![0, 1, 2, 4]);
        std::fs::write(
            brats_file(&dir, "Brats18_X_1", "seg"),
            encode_nifti(dims, &seg, None).unwrap(),
        )
        .unwrap();
        let cases = load_brats_dataset(root.path()).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].grade, Grade::Lgg);
        assert_eq!(cases[0].volume.modality(3), &[3.0; 4]);
        assert_eq!(cases[0].labels.labels(), &[0, 1, 2, 4]);
    }
}
