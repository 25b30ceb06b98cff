//! On-disk formats: the phantom container, NIfTI-1 volumes with a sidecar
//! label table, and the dataset manifest.
//!
//! Phantom container layout (all little-endian):
//!
//! ```text
//! b"DSMT" | version: u32 | side: u32 | age: f64 | sex: u8 | side^3 x f32
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{preprocess, DatasetSplit, PreprocessConfig, Sex, Volume, VolumeSample};
use crate::error::{Error, Result};

pub const PHANTOM_MAGIC: &[u8; 4] = b"DSMT";
pub const PHANTOM_VERSION: u32 = 1;
const PHANTOM_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 1;

pub fn write_phantom(path: &Path, sample: &VolumeSample) -> Result<()> {
    let d = sample.voxels.dims();
    if d[0] != d[1] || d[1] != d[2] {
        return Err(Error::Shape(format!("phantom container holds cubes only, got {d:?}")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PHANTOM_MAGIC)?;
    w.write_all(&PHANTOM_VERSION.to_le_bytes())?;
    w.write_all(&(d[0] as u32).to_le_bytes())?;
    w.write_all(&sample.age.to_le_bytes())?;
    w.write_all(&[sample.sex.code()])?;
    for v in sample.voxels.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_phantom(path: &Path) -> Result<VolumeSample> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < PHANTOM_HEADER_LEN {
        return Err(Error::format(path, "file shorter than the phantom header"));
    }
    if &bytes[..4] != PHANTOM_MAGIC {
        return Err(Error::format(path, "missing DSMT magic bytes"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != PHANTOM_VERSION {
        return Err(Error::format(path, format!("unsupported phantom version {version}")));
    }
    let side = u32_at(8) as usize;
    let age = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let sex = Sex::from_code(bytes[20])?;
    let body = &bytes[PHANTOM_HEADER_LEN..];
    let n = side.pow(3);
    if body.len() != n * 4 {
        return Err(Error::format(path, format!("expected {} voxel bytes, found {}", n * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let sample = VolumeSample {
        voxels: Volume::new([side; 3], data)?,
        age,
        sex,
        subject_id: subject_id_from_path(path),
        site_id: Some("phantom".into()),
    };
    sample.validate_labels()?;
    Ok(sample)
}

/// File name with `.nii.gz`, `.nii` or `.dsmt` stripped.
pub fn subject_id_from_path(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".dsmt"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

/// One row of the sidecar label table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub subject_id: String,
    pub age: f64,
    pub sex: String,
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct LabelTable {
    rows: HashMap<String, LabelRow>,
}

impl LabelTable {
    pub fn get(&self, subject_id: &str) -> Option<&LabelRow> {
        self.rows.get(subject_id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn read_label_table(path: &Path) -> Result<LabelTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut rows = HashMap::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        row.sex.parse::<Sex>()?;
        rows.insert(row.subject_id.clone(), row);
    }
    Ok(LabelTable { rows })
}

pub fn write_label_table(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a raw (unpreprocessed) volume. Phantom containers carry their own
/// labels; NIfTI files need a row in `labels` keyed by subject id.
pub fn load_volume(path: &Path, labels: Option<&LabelTable>) -> Result<VolumeSample> {
    let name = path.to_string_lossy();
    if name.ends_with(".dsmt") {
        return read_phantom(path);
    }
    if !(name.ends_with(".nii") || name.ends_with(".nii.gz")) {
        return Err(Error::format(path, "unsupported volume format"));
    }
    let subject_id = subject_id_from_path(path);
    let row = labels
        .and_then(|t| t.get(&subject_id))
        .ok_or_else(|| Error::Metadata(format!("no label row for subject {subject_id}")))?;
    let voxels = read_nifti(path)?;
    let sample = VolumeSample {
        voxels,
        age: row.age,
        sex: row.sex.parse()?,
        subject_id,
        site_id: row.site.clone(),
    };
    sample.validate_labels()?;
    Ok(sample)
}

fn read_nifti(path: &Path) -> Result<Volume> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::format(path, e.to_string()))?;
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(|e| Error::format(path, e.to_string()))?;
    let shape = arr.shape().to_vec();
    let spatial: Vec<usize> = match shape.as_slice() {
        [a, b, c] => vec![*a, *b, *c],
        [a, b, c, rest @ ..] if rest.iter().all(|&r| r == 1) => vec![*a, *b, *c],
        other => return Err(Error::format(path, format!("expected a 3D volume, got shape {other:?}"))),
    };
    let dims = [spatial[0], spatial[1], spatial[2]];
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format(path, "empty voxel grid"));
    }
    let rank = shape.len();
    Ok(Volume::from_fn(dims, |i, j, k| {
        let mut idx = vec![0; rank];
        idx[..3].copy_from_slice(&[i, j, k]);
        arr[ndarray::IxDyn(&idx)]
    }))
}

/// One manifest row. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub subject_id: String,
    #[serde(default)]
    pub split: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let entries = rdr.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads and preprocesses every manifest entry. When every entry names a
/// split (`train` or `val`) that split is returned as well.
pub fn load_dataset(
    manifest: &Path,
    labels: Option<&Path>,
    cfg: &PreprocessConfig,
) -> Result<(Vec<VolumeSample>, Option<DatasetSplit>)> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Parameter(format!("manifest {} lists no samples", manifest.display())));
    }
    let labels = labels.map(read_label_table).transpose()?;
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut s = load_volume(&root.join(&e.path), labels.as_ref())?;
        s.subject_id = e.subject_id.clone();
        s.voxels = preprocess(&s.voxels, cfg)?;
        samples.push(s);
    }
    let split = if entries.iter().all(|e| matches!(e.split.as_deref(), Some("train" | "val"))) {
        let (val, train): (Vec<_>, Vec<_>) = entries.iter().partition(|e| e.split.as_deref() == Some("val"));
        Some(DatasetSplit {
            train_ids: train.into_iter().map(|e| e.subject_id.clone()).collect(),
            val_ids: val.into_iter().map(|e| e.subject_id.clone()).collect(),
            age_bins: Vec::new(),
        })
    } else {
        None
    };
    Ok((samples, split))
}
