use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

/// Output of [`crop_to_content`].
#[derive(Debug, Clone, PartialEq)]
pub struct CropResult {
    pub volume: Volume,
    /// Half-open `[lo, hi)` box per axis in the input's coordinates.
    pub bbox: [(usize, usize); 3],
    /// Set when no voxel exceeded the threshold; the input is returned as is.
    pub all_background: bool,
}

/// Tight box around strictly positive voxels, grown by `margin` and clamped
/// to the volume.
pub fn crop_to_content(v: &Volume, margin: usize) -> CropResult {
    let d = v.dims();
    let mut lo = d;
    let mut hi = [0usize; 3];
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                if v.get(i, j, k) > 0.0 {
                    for (a, idx) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(idx);
                        hi[a] = hi[a].max(idx + 1);
                    }
                }
            }
        }
    }
    if hi[0] == 0 {
        log::warn!("crop_to_content: volume has no foreground, returning it uncropped");
        return CropResult { volume: v.clone(), bbox: [(0, d[0]), (0, d[1]), (0, d[2])], all_background: true };
    }
    let bbox: [(usize, usize); 3] = std::array::from_fn(|a| (lo[a].saturating_sub(margin), (hi[a] + margin).min(d[a])));
    let dims = bbox.map(|(l, h)| h - l);
    let volume = Volume::from_fn(dims, |i, j, k| v.get(i + bbox[0].0, j + bbox[1].0, k + bbox[2].0));
    CropResult { volume, bbox, all_background: false }
}

/// Trilinear resampling to `side^3` with corner-aligned grids, so endpoint
/// voxels map onto each other and affine intensity ramps are reproduced.
pub fn resample_to_cube(v: &Volume, side: usize) -> Result<Volume> {
    if side < 2 {
        return Err(Error::Parameter(format!("resample side must be at least 2, got {side}")));
    }
    if v.is_empty() {
        return Err(Error::Parameter("cannot resample an empty volume".into()));
    }
    let d = v.dims();
    if d == [side; 3] {
        return Ok(v.clone());
    }
    let scale: [f64; 3] = std::array::from_fn(|a| (d[a] - 1) as f64 / (side - 1) as f64);
    Ok(Volume::from_fn([side; 3], |i, j, k| {
        let p = [i as f64 * scale[0], j as f64 * scale[1], k as f64 * scale[2]];
        v.sample(p).expect("resample coordinates stay inside the source grid") as f32
    }))
}

/// Per-volume min-max scaling to `[0, 1]`; constant volumes become zeros.
pub fn normalize(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi as f64 - lo as f64;
    let mut out = v.clone();
    if !(range > 0.0) {
        out.data_mut().fill(0.0);
        return out;
    }
    out.data_mut()
        .iter_mut()
        .for_each(|x| *x = (((*x as f64) - lo as f64) / range).clamp(0.0, 1.0) as f32);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Crop to the foreground box before resampling. Phantoms are
    /// generated directly at model resolution and skip this step.
    pub crop: bool,
    pub margin: usize,
    pub side: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { crop: true, margin: 2, side: 96 }
    }
}

/// crop -> resample -> normalize
pub fn preprocess(raw: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    if raw.is_empty() {
        return Err(Error::Parameter("empty volume".into()));
    }
    let cropped = if cfg.crop { crop_to_content(raw, cfg.margin).volume } else { raw.clone() };
    let resampled = resample_to_cube(&cropped, cfg.side)?;
    Ok(normalize(&resampled))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force reference: scan every voxel for min/max nonzero index.
    fn brute_bbox(v: &Volume, margin: usize) -> [(usize, usize); 3] {
        let d = v.dims();
        let mut out = [(usize::MAX, 0usize); 3];
        for (idx, &x) in v.data().iter().enumerate() {
            if x > 0.0 {
                let c = [idx / (d[1] * d[2]), (idx / d[2]) % d[1], idx % d[2]];
                for a in 0..3 {
                    out[a].0 = out[a].0.min(c[a]);
                    out[a].1 = out[a].1.max(c[a]);
                }
            }
        }
        std::array::from_fn(|a| (out[a].0.saturating_sub(margin), (out[a].1 + 1 + margin).min(d[a])))
    }

    #[test]
    fn crop_box_of_inner_cube_with_margin() {
        let v = Volume::from_fn([64; 3], |i, j, k| {
            if (10..20).contains(&i) && (10..20).contains(&j) && (10..20).contains(&k) {
                1.0
            } else {
                0.0
            }
        });
        let c = crop_to_content(&v, 2);
        assert_eq!(c.bbox, brute_bbox(&v, 2));
        assert_eq!(c.bbox, [(8, 22); 3]);
        assert_eq!(c.volume.dims(), [14; 3]);
        assert!(!c.all_background);
    }

    #[test]
    fn crop_of_tight_volume_is_identity() {
        let v = Volume::from_fn([5, 6, 7], |i, j, k| (1 + i + j + k) as f32);
        let c = crop_to_content(&v, 0);
        assert_eq!(c.volume, v);
    }

    #[test]
    fn crop_of_empty_volume_flags_and_returns_input() {
        let v = Volume::zeros([8; 3]);
        let c = crop_to_content(&v, 2);
        assert!(c.all_background);
        assert_eq!(c.volume, v);
    }

    #[test]
    fn crop_clamps_margin_at_borders() {
        let v = Volume::from_fn([10; 3], |i, _, _| if i == 0 || i == 9 { 1.0 } else { 0.0 });
        let c = crop_to_content(&v, 3);
        assert_eq!(c.bbox[0], (0, 10));
    }

    #[test]
    fn resample_constant_volume_stays_constant() {
        let v = Volume::cube(32, 0.37);
        let r = resample_to_cube(&v, 96).unwrap();
        assert_eq!(r.dims(), [96; 3]);
        assert!(r.data().iter().all(|&x| (x - 0.37).abs() < 1e-6));
    }

    #[test]
    fn resample_same_side_is_identity() {
        let v = Volume::from_fn([96; 3], |i, j, k| ((i * 7 + j * 3 + k) % 11) as f32 / 11.0);
        let r = resample_to_cube(&v, 96).unwrap();
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn resample_preserves_linear_ramp() {
        let n = 33;
        let v = Volume::from_fn([n; 3], |_, _, k| k as f32 / (n - 1) as f32);
        let m = 17;
        let r = resample_to_cube(&v, m).unwrap();
        // closed form: output index k sits at source coordinate k*(n-1)/(m-1)
        for i in [0, 5, 16] {
            for k in 0..m {
                let expected = (k as f64 * (n - 1) as f64 / (m - 1) as f64) / (n - 1) as f64;
                assert!((r.get(i, 3, k) as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resample_rejects_degenerate_side() {
        assert!(matches!(resample_to_cube(&Volume::cube(4, 1.0), 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn normalize_halves_zero_to_two() {
        let v = Volume::new([1, 1, 4], vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        assert_eq!(normalize(&v).data(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn normalize_unit_range_is_identity_and_constant_is_zero() {
        let v = Volume::new([1, 1, 3], vec![0.0, 0.3, 1.0]).unwrap();
        assert_eq!(normalize(&v), v);
        assert!(normalize(&Volume::cube(3, 4.0)).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn preprocess_pipeline_produces_unit_cube() {
        let v = Volume::from_fn([40, 30, 50], |i, j, k| if i > 5 && j > 3 && k > 8 { (i + j + k) as f32 } else { 0.0 });
        let out = preprocess(&v, &PreprocessConfig { crop: true, margin: 2, side: 16 }).unwrap();
        assert_eq!(out.dims(), [16; 3]);
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
