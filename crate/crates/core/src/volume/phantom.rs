use rand::Rng;
use rayon::prelude::*;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Sex, Volume, VolumeSample};
use crate::error::{Error, Result};

/// Parametric head phantom whose morphology tracks age and sex.
///
/// The head is an ellipsoid whose semi-axes are `head_axes * side`, scaled
/// by `1 + sex_scale_delta` for males. Inside it sit a cortical shell whose
/// thickness shrinks linearly with age and a central ventricle ellipsoid
/// whose radius grows linearly with age. Shell thickness and ventricle
/// radius do not follow the sex scale, so they stay distinguishable from
/// it. All lengths are voxels on a 32-voxel grid and scale with `side`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub side: usize,
    pub age_range: [f64; 2],
    /// Ventricle radius at `age_range[0]`, voxels.
    pub ventricle_radius_base: f64,
    pub ventricle_growth_rate: f64,
    /// Shell thickness at `age_range[0]`, voxels.
    pub cortex_thickness_base: f64,
    pub cortex_thinning_rate: f64,
    pub sex_scale_delta: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
    /// Head semi-axes as fractions of the side length.
    pub head_axes: [f64; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            side: 32,
            age_range: [20.0, 80.0],
            ventricle_radius_base: 1.5,
            ventricle_growth_rate: 0.06,
            cortex_thickness_base: 3.5,
            cortex_thinning_rate: 0.03,
            sex_scale_delta: 0.08,
            noise_sigma: 0.02,
            rng_seed: 0,
            head_axes: [0.40, 0.34, 0.37],
        }
    }
}

const WHITE: f64 = 1.0;
const GREY: f64 = 0.6;
const CSF: f64 = 0.15;
const FLOOR: f64 = 0.02;
const EDGE: f64 = 0.35;
const REFERENCE_SIDE: f64 = 32.0;
const TAG_DATASET: u64 = 0xDA7A;
const VENTRICLE_SHAPE: [f64; 3] = [1.0, 0.7, 0.8];

impl PhantomConfig {
    /// Factor converting the reference-grid lengths to this grid.
    pub fn length_scale(&self) -> f64 {
        self.side as f64 / REFERENCE_SIDE
    }

    /// Ventricle radius in voxels of this grid.
    pub fn ventricle_radius(&self, age: f64) -> f64 {
        (self.ventricle_radius_base + self.ventricle_growth_rate * (age - self.age_range[0])) * self.length_scale()
    }

    /// Cortical shell thickness in voxels of this grid.
    pub fn shell_thickness(&self, age: f64) -> f64 {
        (self.cortex_thickness_base - self.cortex_thinning_rate * (age - self.age_range[0])) * self.length_scale()
    }

    pub fn head_semi_axes(&self, sex: Sex) -> [f64; 3] {
        let scale = 1.0 + self.sex_scale_delta * sex.as_target();
        self.head_axes.map(|a| a * self.side as f64 * scale)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.age_range;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Config(format!("phantom age range {lo}..{hi} must be positive and non-empty")));
        }
        if self.side < 8 {
            return Err(Error::Config("phantom side must be at least 8".into()));
        }
        if self.ventricle_growth_rate <= 0.0 || self.cortex_thinning_rate <= 0.0 {
            return Err(Error::Config("phantom growth and thinning rates must be positive".into()));
        }
        if self.shell_thickness(hi) <= 0.0 || self.ventricle_radius(lo) <= 0.0 {
            return Err(Error::Config("phantom shell thickness and ventricle radius must stay positive".into()));
        }
        if self.sex_scale_delta <= -1.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("invalid phantom sex scale or noise".into()));
        }
        let axes = self.head_semi_axes(Sex::Male);
        if axes.iter().any(|&a| a > (self.side as f64 - 1.0) / 2.0) {
            return Err(Error::Config("phantom head does not fit inside the volume".into()));
        }
        let inner = self.head_semi_axes(Sex::Female).iter().copied().fold(f64::INFINITY, f64::min) - self.shell_thickness(lo);
        if self.ventricle_radius(hi) >= inner {
            return Err(Error::Config("phantom ventricles outgrow the white matter".into()));
        }
        Ok(())
    }
}

fn smooth_step(x: f64) -> f64 {
    // logistic edge with width EDGE voxels
    1.0 / (1.0 + (-x / EDGE).exp())
}

/// Deterministic in `(age, sex, rng)`. Background voxels are exactly zero
/// and every voxel inside the head is at least `0.02`.
pub fn generate_phantom<R: Rng + ?Sized>(age: f64, sex: Sex, cfg: &PhantomConfig, rng: &mut R) -> Result<VolumeSample> {
    let [lo, hi] = cfg.age_range;
    if !(age >= lo && age <= hi) {
        return Err(Error::Parameter(format!("phantom age {age} outside {lo}..{hi}")));
    }
    cfg.validate()?;
    let n = cfg.side;
    let center = (n as f64 - 1.0) / 2.0;
    let axes = cfg.head_semi_axes(sex);
    let mean_axis = axes.iter().sum::<f64>() / 3.0;
    let thickness = cfg.shell_thickness(age);
    let v_radius = cfg.ventricle_radius(age);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let mut data = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = [i as f64 - center, j as f64 - center, k as f64 - center];
                let q = (0..3).map(|a| (p[a] / axes[a]).powi(2)).sum::<f64>().sqrt();
                if q > 1.0 {
                    data.push(0.0);
                    continue;
                }
                // approximate inward distance from the head surface
                let depth = (1.0 - q) * mean_axis;
                let cortex = smooth_step(thickness - depth);
                let rv = (0..3).map(|a| (p[a] / VENTRICLE_SHAPE[a]).powi(2)).sum::<f64>().sqrt();
                let ventricle = smooth_step(v_radius - rv);
                let tissue = WHITE + (GREY - WHITE) * cortex;
                let mut value = tissue * (1.0 - ventricle) + CSF * ventricle;
                if cfg.noise_sigma > 0.0 {
                    value += noise.sample(rng);
                }
                data.push(value.clamp(FLOOR, 1.0) as f32);
            }
        }
    }
    Ok(VolumeSample {
        voxels: Volume::new([n; 3], data)?,
        age,
        sex,
        subject_id: String::new(),
        site_id: Some("phantom".into()),
    })
}

/// `n` phantoms named `sub-0000`, `sub-0001`, ... with ages uniform over
/// `cfg.age_range` and sexes drawn with equal odds. Sample `i` depends only
/// on `(seed, cfg, i)`.
pub fn synthesize_dataset(n: usize, cfg: &PhantomConfig, seed: u64) -> Result<Vec<VolumeSample>> {
    if n == 0 {
        return Err(Error::Parameter("phantom count must be at least 1".into()));
    }
    cfg.validate()?;
    let [lo, hi] = cfg.age_range;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::derived(seed ^ cfg.rng_seed, TAG_DATASET, i as u64);
            let age = lo + (hi - lo) * rng.random::<f64>();
            let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
            let mut s = generate_phantom(age, sex, cfg, &mut rng)?;
            s.subject_id = format!("sub-{i:04}");
            Ok(s)
        })
        .collect()
}
