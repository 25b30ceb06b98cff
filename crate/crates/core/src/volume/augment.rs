use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Volume, VolumeSample};
use crate::error::{Error, Result};

/// Random spatial augmentation. Transforms run in the fixed order
/// flip -> rotate -> zoom -> erase, each gated by its own probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub flip_prob_per_axis: [f64; 3],
    pub rotation_range_deg: [f64; 2],
    pub rotation_prob: f64,
    pub zoom_range: [f64; 2],
    pub zoom_prob: f64,
    pub erase_enabled: bool,
    pub erase_prob: f64,
    pub erase_side_fraction_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_prob_per_axis: [0.5; 3],
            rotation_range_deg: [-20.0, 20.0],
            rotation_prob: 0.5,
            zoom_range: [0.9, 1.1],
            zoom_prob: 0.5,
            erase_enabled: true,
            erase_prob: 0.5,
            erase_side_fraction_range: [0.1, 0.3],
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Configuration under which `augment` is the identity.
    pub fn identity() -> Self {
        AugmentationConfig {
            flip_prob_per_axis: [0.0; 3],
            rotation_range_deg: [0.0, 0.0],
            zoom_range: [1.0, 1.0],
            erase_enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let interval = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !self.flip_prob_per_axis.iter().all(|&p| prob(p))
            || !prob(self.rotation_prob)
            || !prob(self.zoom_prob)
            || !prob(self.erase_prob)
        {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !interval(self.rotation_range_deg) || !interval(self.zoom_range) || !interval(self.erase_side_fraction_range) {
            return Err(Error::Config("augmentation ranges must be finite closed intervals".into()));
        }
        if self.zoom_range[0] <= 0.0 {
            return Err(Error::Config("zoom factors must be positive".into()));
        }
        let [lo, hi] = self.erase_side_fraction_range;
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Config("erase side fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// What a single `augment` call did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentTrace {
    pub flips: [bool; 3],
    /// `(axis, degrees)`
    pub rotation: Option<(usize, f64)>,
    pub zoom: Option<f64>,
    /// `(origin, side)` of the zeroed cube
    pub erase: Option<([usize; 3], usize)>,
}

fn draw<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

pub fn augment<R: Rng + ?Sized>(s: &VolumeSample, cfg: &AugmentationConfig, rng: &mut R) -> VolumeSample {
    augment_traced(s, cfg, rng).0
}

pub fn augment_traced<R: Rng + ?Sized>(s: &VolumeSample, cfg: &AugmentationConfig, rng: &mut R) -> (VolumeSample, AugmentTrace) {
    let mut trace = AugmentTrace::default();
    let mut v = s.voxels.clone();

    for axis in 0..3 {
        if rng.random::<f64>() < cfg.flip_prob_per_axis[axis] {
            v = flip(&v, axis);
            trace.flips[axis] = true;
        }
    }

    if rng.random::<f64>() < cfg.rotation_prob {
        let axis = rng.random_range(0..3usize);
        let deg = draw(rng, cfg.rotation_range_deg);
        trace.rotation = Some((axis, deg));
    }
    if rng.random::<f64>() < cfg.zoom_prob {
        trace.zoom = Some(draw(rng, cfg.zoom_range));
    }
    let (axis, deg) = trace.rotation.unwrap_or((0, 0.0));
    let zoom = trace.zoom.unwrap_or(1.0);
    if deg != 0.0 || zoom != 1.0 {
        v = rotate_zoom(&v, axis, deg, zoom);
    }

    if cfg.erase_enabled && rng.random::<f64>() < cfg.erase_prob {
        let frac = draw(rng, cfg.erase_side_fraction_range);
        let d = v.dims();
        let side = ((frac * d.iter().copied().min().unwrap_or(0) as f64).round() as usize).min(d[0]).min(d[1]).min(d[2]);
        if side > 0 {
            let origin: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=d[a] - side));
            erase_cube(&mut v, origin, side);
            trace.erase = Some((origin, side));
        }
    }

    v.data_mut().iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    (VolumeSample { voxels: v, ..s.clone() }, trace)
}

pub fn flip(v: &Volume, axis: usize) -> Volume {
    let d = v.dims();
    Volume::from_fn(d, |i, j, k| {
        let mut c = [i, j, k];
        c[axis] = d[axis] - 1 - c[axis];
        v.get(c[0], c[1], c[2])
    })
}

/// Rotation by `deg` about `axis` through the volume centre, then isotropic
/// zoom by `factor`; samples falling outside the source are zero.
pub fn rotate_zoom(v: &Volume, axis: usize, deg: f64, factor: f64) -> Volume {
    let d = v.dims();
    let c: [f64; 3] = std::array::from_fn(|a| (d[a] as f64 - 1.0) / 2.0);
    let (sin, cos) = deg.to_radians().sin_cos();
    let (u, w) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    Volume::from_fn(d, |i, j, k| {
        let q = [i as f64, j as f64, k as f64];
        // inverse map: undo zoom, then undo rotation
        let r: [f64; 3] = std::array::from_fn(|a| (q[a] - c[a]) / factor);
        let mut src = r;
        src[u] = cos * r[u] + sin * r[w];
        src[w] = -sin * r[u] + cos * r[w];
        let p: [f64; 3] = std::array::from_fn(|a| src[a] + c[a]);
        v.sample(p).unwrap_or(0.0) as f32
    })
}

pub fn erase_cube(v: &mut Volume, origin: [usize; 3], side: usize) {
    for i in origin[0]..origin[0] + side {
        for j in origin[1]..origin[1] + side {
            for k in origin[2]..origin[2] + side {
                let idx = v.index(i, j, k);
                v.data_mut()[idx] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::volume::Sex;

    fn sample(side: usize) -> VolumeSample {
        VolumeSample {
            voxels: Volume::from_fn([side; 3], |i, j, k| 0.05 + 0.9 * ((i * 31 + j * 17 + k * 7) % 97) as f32 / 97.0),
            age: 42.0,
            sex: Sex::Male,
            subject_id: "s".into(),
            site_id: None,
        }
    }

    #[test]
    fn identity_configuration_returns_input() {
        let s = sample(12);
        let out = augment(&s, &AugmentationConfig::identity(), &mut rng::seeded(1));
        assert_eq!(out, s);
    }

    #[test]
    fn double_flip_is_involution() {
        let s = sample(9);
        let cfg = AugmentationConfig { flip_prob_per_axis: [1.0, 0.0, 0.0], ..AugmentationConfig::identity() };
        let once = augment(&s, &cfg, &mut rng::seeded(3));
        assert_ne!(once.voxels, s.voxels);
        let twice = augment(&once, &cfg, &mut rng::seeded(3));
        assert_eq!(twice.voxels, s.voxels);
    }

    #[test]
    fn erase_quarter_side_zeroes_one_24_cube() {
        let s = sample(96);
        assert!(s.voxels.data().iter().all(|&x| x > 0.0));
        let cfg = AugmentationConfig {
            erase_enabled: true,
            erase_prob: 1.0,
            erase_side_fraction_range: [0.25, 0.25],
            ..AugmentationConfig::identity()
        };
        let (out, trace) = augment_traced(&s, &cfg, &mut rng::seeded(5));
        let zeros = out.voxels.data().iter().filter(|&&x| x == 0.0).count();
        assert_eq!(zeros, 24 * 24 * 24);
        let (origin, side) = trace.erase.unwrap();
        assert_eq!(side, 24);
        assert!(origin.iter().all(|&o| o + side <= 96));
        for i in origin[0]..origin[0] + 24 {
            assert_eq!(out.voxels.get(i, origin[1], origin[2] + 23), 0.0);
        }
    }

    #[test]
    fn rotation_and_zoom_stay_inside_ranges() {
        let s = sample(10);
        let cfg = AugmentationConfig { rotation_prob: 1.0, zoom_prob: 1.0, ..Default::default() };
        let mut r = rng::seeded(9);
        for _ in 0..50 {
            let (out, t) = augment_traced(&s, &cfg, &mut r);
            let (_, deg) = t.rotation.unwrap();
            assert!((-20.0..=20.0).contains(&deg));
            assert!((0.9..=1.1).contains(&t.zoom.unwrap()));
            assert_eq!(out.age, s.age);
            assert_eq!(out.sex, s.sex);
            assert!(out.voxels.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn quarter_turn_permutes_axes() {
        let n = 5;
        let v = Volume::from_fn([n; 3], |i, j, k| (i * 25 + j * 5 + k) as f32);
        let r = rotate_zoom(&v, 0, 90.0, 1.0);
        // about axis 0: (j, k) sampled from (k', -j') around the centre
        for j in 0..n {
            for k in 0..n {
                let expect = v.get(2, k, n - 1 - j);
                assert!((r.get(2, j, k) - expect).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn rejects_inverted_interval() {
        let cfg = AugmentationConfig { zoom_range: [1.1, 0.9], ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
