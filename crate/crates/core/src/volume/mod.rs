//! Volumes with subject labels: loading, preprocessing, augmentation,
//! synthetic phantoms and stratified splits.

mod augment;
mod io;
mod phantom;
mod preprocess;
mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_traced, erase_cube, flip, rotate_zoom, AugmentTrace, AugmentationConfig};
pub use io::{
    load_dataset, load_volume, read_label_table, read_manifest, read_phantom, subject_id_from_path, write_label_table,
    write_manifest, write_phantom, LabelRow, LabelTable, ManifestEntry, PHANTOM_MAGIC, PHANTOM_VERSION,
};
pub use phantom::{generate_phantom, synthesize_dataset, PhantomConfig};
pub use preprocess::{crop_to_content, normalize, preprocess, resample_to_cube, CropResult, PreprocessConfig};
pub use split::{age_bin, make_split, DatasetSplit};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Dense 3D scalar grid indexed `(i0 * n1 + i1) * n2 + i2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{dims:?} volume needs {} voxels, got {}", dims.iter().product::<usize>(), data.len())));
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn cube(side: usize, value: f32) -> Self {
        Volume { dims: [side; 3], data: vec![value; side.pow(3)] }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear sample at fractional coordinates; `None` outside the grid.
    pub fn sample(&self, p: [f64; 3]) -> Option<f64> {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let max = (n - 1) as f64;
            if !(p[a] >= -1e-9 && p[a] <= max + 1e-9) {
                return None;
            }
            let c = p[a].clamp(0.0, max);
            let f = c.floor();
            base[a] = (f as usize).min(n.saturating_sub(2));
            frac[a] = c - base[a] as f64;
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
            }
        }
        let next = |a: usize| if self.dims[a] > 1 { 1 } else { 0 };
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[0] } else { frac[0] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[2] } else { frac[2] };
                    if wx == 0.0 {
                        continue;
                    }
                    let v = self.get(base[0] + dz * next(0), base[1] + dy * next(1), base[2] + dx * next(2));
                    acc += wz * wy * wx * v as f64;
                }
            }
        }
        Some(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female = 0,
    Male = 1,
}

impl Sex {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Sex::Female),
            1 => Ok(Sex::Male),
            other => Err(Error::Metadata(format!("sex code must be 0 or 1, got {other}"))),
        }
    }

    pub fn as_target(self) -> f64 {
        self.code() as f64
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Female => "female",
            Sex::Male => "male",
        })
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0" | "f" | "female" => Ok(Sex::Female),
            "1" | "m" | "male" => Ok(Sex::Male),
            other => Err(Error::Metadata(format!("unrecognised sex label {other:?}"))),
        }
    }
}

/// One scan plus subject labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub voxels: Volume,
    pub age: f64,
    pub sex: Sex,
    pub subject_id: String,
    pub site_id: Option<String>,
}

impl VolumeSample {
    pub fn validate_labels(&self) -> Result<()> {
        if !(self.age.is_finite() && self.age > 0.0) {
            return Err(Error::Metadata(format!("subject {}: age must be positive, got {}", self.subject_id, self.age)));
        }
        Ok(())
    }
}

/// Stacks cubic samples into a `[B, 1, S, S, S]` model input.
pub fn batch_tensor(samples: &[&VolumeSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let dims = first.voxels.dims();
    let mut data = Vec::with_capacity(samples.len() * first.voxels.len());
    for s in samples {
        if s.voxels.dims() != dims {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?} volumes", dims, s.voxels.dims())));
        }
        data.extend(s.voxels.data().iter().map(|&v| v as f64));
    }
    Ok(Tensor::from_vec(&[samples.len(), 1, dims[0], dims[1], dims[2]], data))
}
