//! MVOL case directories and phantom/real datasets on disk.
//!
//! A case directory holds `manifest.json` plus one TNSR blob per channel:
//! `t1.tnsr`, `t1c.tnsr`, `t2.tnsr`, `flair.tnsr` (f32) and optionally
//! `labels.tnsr` (u8). Blobs are rank 3 with shape `[nz, ny, nx]`, so the
//! row-major payload matches the in-memory `x`-fastest layout.
//!
//! A dataset directory holds `dataset.json` and one case directory per
//! case. Cases are discovered by scanning for `*/manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Case, Dims, Grade, LabelVolume, MultiModalVolume, MODALITIES};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::serialize::{Blob, BlobData};

pub const CASE_MANIFEST: &str = "manifest.json";
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const LABELS_FILE: &str = "labels.tnsr";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub format: String,
    pub version: u32,
    pub case_id: String,
    /// `[nx, ny, nz]`.
    pub dims: Dims,
    pub dtype: String,
    pub modalities: Vec<String>,
    pub labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<Grade>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub case_id: String,
    pub grade: Grade,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub cases: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn hgg_count(&self) -> usize {
        self.cases.iter().filter(|c| c.grade == Grade::Hgg).count()
    }
}

/// Contents of one case directory; either part may be absent
/// (prediction directories store labels only).
#[derive(Clone, Debug)]
pub struct StoredCase {
    pub manifest: CaseManifest,
    pub volume: Option<MultiModalVolume>,
    pub labels: Option<LabelVolume>,
}

fn blob_shape(dims: Dims) -> Vec<usize> {
    vec![dims[2], dims[1], dims[0]]
}

fn check_case_id(id: &str) -> Result<()> {
    let ok =
        !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "case id {id:?} is not a safe directory name"
        )))
    }
}

/// Writes a case directory. Blobs go first and the manifest last, so a
/// directory with a manifest is always complete.
pub fn write_case(
    dir: &Path,
    case_id: &str,
    volume: Option<&MultiModalVolume>,
    labels: Option<&LabelVolume>,
    grade: Option<Grade>,
) -> Result<()> {
    check_case_id(case_id)?;
    let dims = match (volume, labels) {
        (Some(v), Some(l)) if v.dims() != l.dims() => return Err(Error::shape("write_case", &v.dims(), &l.dims())),
        (Some(v), _) => v.dims(),
        (None, Some(l)) => l.dims(),
        (None, None) => return Err(Error::InvalidArgument("case has neither volume nor labels".into())),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(v) = volume {
        for (m, name) in MODALITIES.iter().enumerate() {
            let blob = Blob::new(blob_shape(dims), BlobData::F32(v.modality(m).to_vec()))?;
            fsutil::write_atomic(&dir.join(format!("{name}.tnsr")), &blob.encode())?;
        }
    }
    if let Some(l) = labels {
        let blob = Blob::new(blob_shape(dims), BlobData::U8(l.labels().to_vec()))?;
        fsutil::write_atomic(&dir.join(LABELS_FILE), &blob.encode())?;
    }
    let manifest = CaseManifest {
        format: "mvol".into(),
        version: FORMAT_VERSION,
        case_id: case_id.into(),
        dims,
        dtype: "f32".into(),
        modalities: if volume.is_some() {
            MODALITIES.iter().map(|s| s.to_string()).collect()
        } else {
            Vec::new()
        },
        labels: labels.is_some(),
        grade,
    };
    fsutil::write_json(&dir.join(CASE_MANIFEST), &manifest)
}

fn read_blob(path: &Path, dims: Dims) -> Result<BlobData> {
    let bytes = fsutil::read(path)?;
    let (blob, used) = Blob::decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::format("MVOL", format!("{}: trailing bytes", path.display())));
    }
    if blob.shape != blob_shape(dims) {
        return Err(Error::format(
            "MVOL",
            format!(
                "{}: shape {:?} does not match dims {dims:?}",
                path.display(),
                blob.shape
            ),
        ));
    }
    Ok(blob.data)
}

pub fn read_manifest(dir: &Path) -> Result<CaseManifest> {
    let m: CaseManifest = fsutil::read_json(&dir.join(CASE_MANIFEST))?;
    if m.format != "mvol" {
        return Err(Error::format("MVOL", format!("unexpected format tag {:?}", m.format)));
    }
    if m.version != FORMAT_VERSION {
        return Err(Error::Unsupported(format!("MVOL version {}", m.version)));
    }
    Ok(m)
}

pub fn read_case(dir: &Path) -> Result<StoredCase> {
    let manifest = read_manifest(dir)?;
    let dims = manifest.dims;
    let volume = if manifest.modalities.is_empty() {
        None
    } else {
        if manifest.modalities != MODALITIES {
            return Err(Error::format(
                "MVOL",
                format!("expected modalities {MODALITIES:?}, got {:?}", manifest.modalities),
            ));
        }
        let mut voxels = Vec::with_capacity(4 * dims.iter().product::<usize>());
        for name in MODALITIES {
            match read_blob(&dir.join(format!("{name}.tnsr")), dims)? {
                BlobData::F32(v) => voxels.extend(v),
                _ => return Err(Error::format("MVOL", format!("{name}: expected f32 data"))),
            }
        }
        Some(MultiModalVolume::new(manifest.case_id.clone(), dims, voxels)?)
    };
    let labels = if manifest.labels {
        match read_blob(&dir.join(LABELS_FILE), dims)? {
            BlobData::U8(v) => Some(LabelVolume::new(dims, v)?),
            _ => return Err(Error::format("MVOL", "labels: expected u8 data")),
        }
    } else {
        None
    };
    Ok(StoredCase {
        manifest,
        volume,
        labels,
    })
}

/// Case directories under `root` (those holding a manifest), sorted by name.
pub fn discover_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(CASE_MANIFEST).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Writes `cases` as a dataset. A non-empty `root` is rejected unless
/// `force` is set, in which case previous case directories are replaced.
pub fn write_dataset(root: &Path, cases: &[Case], force: bool) -> Result<DatasetManifest> {
    if fsutil::is_nonempty_dir(root)? {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        for dir in discover_cases(root)? {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for case in cases {
        write_case(
            &root.join(case.id()),
            case.id(),
            Some(&case.volume),
            Some(&case.labels),
            Some(case.grade),
        )?;
    }
    let manifest = DatasetManifest {
        format: "mvol-dataset".into(),
        version: FORMAT_VERSION,
        cases: cases
            .iter()
            .map(|c| DatasetEntry {
                case_id: c.id().to_string(),
                grade: c.grade,
            })
            .collect(),
    };
    fsutil::write_json(&root.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset_manifest(root: &Path) -> Result<DatasetManifest> {
    fsutil::read_json(&root.join(DATASET_MANIFEST))
}

/// Loads every labelled case under `root`. Grades come from the case
/// manifest, falling back to `dataset.json`.
pub fn load_dataset(root: &Path) -> Result<Vec<Case>> {
    let listed = read_dataset_manifest(root).ok();
    let mut cases = Vec::new();
    for dir in discover_cases(root)? {
        let stored = read_case(&dir)?;
        let id = stored.manifest.case_id.clone();
        let grade = stored
            .manifest
            .grade
            .or_else(|| {
                listed
                    .as_ref()
                    .and_then(|d| d.cases.iter().find(|c| c.case_id == id).map(|c| c.grade))
            })
            .ok_or_else(|| Error::format("MVOL", format!("case {id} has no grade")))?;
        let (Some(volume), Some(labels)) = (stored.volume, stored.labels) else {
            return Err(Error::format("MVOL", format!("case {id} lacks images or labels")));
        };
        cases.push(Case { volume, labels, grade });
    }
    if cases.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no cases found under {}",
            root.display()
        )));
    }
    Ok(cases)
}

/// Reads every case's label volume under `root`, keyed by case id.
pub fn load_label_dir(root: &Path) -> Result<std::collections::BTreeMap<String, LabelVolume>> {
    let mut out = std::collections::BTreeMap::new();
    for dir in discover_cases(root)? {
        let stored = read_case(&dir)?;
        let id = stored.manifest.case_id.clone();
        let labels = stored
            .labels
            .ok_or_else(|| Error::format("MVOL", format!("case {id} has no labels")))?;
        if out.insert(id.clone(), labels).is_some() {
            return Err(Error::format("MVOL", format!("duplicate case id {id}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::generate_phantom;

    fn case(seed: u64) -> Case {
        let (volume, labels) = generate_phantom(seed, [32, 33, 34], Grade::Hgg).unwrap();
        Case {
            volume,
            labels,
            grade: Grade::Hgg,
        }
    }

    #[test]
    fn case_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = case(1);
        write_case(dir.path(), c.id(), Some(&c.volume), Some(&c.labels), Some(c.grade)).unwrap();
        let back = read_case(dir.path()).unwrap();
        assert_eq!(back.volume.unwrap(), c.volume);
        assert_eq!(back.labels.unwrap(), c.labels);
        assert_eq!(back.manifest.grade, Some(Grade::Hgg));
    }

    #[test]
    fn blob_shape_is_z_major() {
        let dir = tempfile::tempdir().unwrap();
        let c = case(2);
        write_case(dir.path(), c.id(), Some(&c.volume), None, None).unwrap();
        let bytes = fs::read(dir.path().join("flair.tnsr")).unwrap();
        let (blob, _) = Blob::decode(&bytes).unwrap();
        assert_eq!(blob.shape, vec![34, 33, 32]);
    }

    #[test]
    fn dataset_roundtrip_and_force() {
        let dir = tempfile::tempdir().unwrap();
        let cases = vec![case(1), case(2)];
        let m = write_dataset(dir.path(), &cases, false).unwrap();
        assert_eq!(m.cases.len(), 2);
        assert!(write_dataset(dir.path(), &cases, false).is_err());
        write_dataset(dir.path(), &cases[..1], true).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].labels, cases[0].labels);
    }

    #[test]
    fn labels_only_case() {
        let dir = tempfile::tempdir().unwrap();
        let c = case(3);
        write_case(dir.path(), "pred", None, Some(&c.labels), None).unwrap();
        let back = read_case(dir.path()).unwrap();
        assert!(back.volume.is_none());
        assert_eq!(back.labels.unwrap(), c.labels);
    }

    #[test]
    fn corrupted_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = case(4);
        write_case(dir.path(), c.id(), Some(&c.volume), Some(&c.labels), None).unwrap();
        let path = dir.path().join(LABELS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_case(dir.path()).is_err());
    }

    #[test]
    fn unsafe_case_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = case(5);
        assert!(write_case(dir.path(), "../x", None, Some(&c.labels), None).is_err());
    }
}
