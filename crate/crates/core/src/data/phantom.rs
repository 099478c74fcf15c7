//! Nested-ellipsoid tumour phantoms.
//!
//! A lesion is an axis-aligned ellipsoid split into three shells by the
//! normalized radius `rho`: necrotic core (label 1) for `rho <= core`,
//! enhancing rim (label 4) for `rho <= rim`, edema (label 2) for `rho <= 1`,
//! background (label 0) elsewhere. Because the shells share one ellipsoid,
//! core ⊂ rim ⊂ edema holds by construction.
//!
//! Labels are hard, but intensities blend the class profiles across each
//! shell surface over about [`PARTIAL_VOLUME_WIDTH`] voxels, like partial-volume
//! voxels in a real scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMap, Volume, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean intensity per internal class index (rows) and channel (T1, T1Gd, T2, FLAIR).
const CLASS_PROFILES: [[f64; NUM_CHANNELS]; 4] = [
    [0.55, 0.50, 0.40, 0.40], // background tissue
    [0.40, 0.40, 0.65, 0.50], // necrotic / non-enhancing core
    [0.50, 0.48, 0.55, 0.58], // edema
    [0.48, 0.90, 0.50, 0.52], // enhancing rim
];

/// Noise standard deviation as a fraction of each channel's class contrast.
pub const NOISE_FRACTION: f64 = 0.05;
pub const MIN_EXTENT: usize = 16;
/// Logistic width, in voxels, of the intensity transition across a shell surface.
pub const PARTIAL_VOLUME_WIDTH: f64 = 4.0;

/// Geometry drawn for one phantom, exposed for containment checks.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub rim_scale: f64,
    pub core_scale: f64,
}

impl PhantomParams {
    fn draw(rng: &mut ChaCha8Rng, extent: usize) -> Self {
        let e = extent as f64;
        let center = std::array::from_fn(|_| e * (0.5 + rng.random_range(-0.08..0.08)));
        let radii = std::array::from_fn(|_| e * rng.random_range(0.28..0.34));
        let rim_scale = rng.random_range(0.60..0.70);
        let core_scale = rim_scale * rng.random_range(0.50..0.60);
        Self {
            center,
            radii,
            rim_scale,
            core_scale,
        }
    }

    /// Normalized ellipsoid radius at the centre of voxel `(z, y, x)`.
    pub fn rho(&self, z: usize, y: usize, x: usize) -> f64 {
        [z, y, x]
            .iter()
            .zip(self.center.iter().zip(&self.radii))
            .map(|(&p, (&c, &r))| ((p as f64 + 0.5 - c) / r).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Mixing weights of the four class profiles at a voxel, in internal order.
    pub fn class_weights(&self, z: usize, y: usize, x: usize) -> [f64; 4] {
        let rho = self.rho(z, y, x);
        let scale = self.radii.iter().product::<f64>().cbrt() / PARTIAL_VOLUME_WIDTH;
        let inside = |t: f64| 1.0 / (1.0 + (-(t - rho) * scale).exp());
        let (core, rim, lesion) = (inside(self.core_scale), inside(self.rim_scale), inside(1.0));
        [1.0 - lesion, core, lesion - rim, rim - core]
    }

    /// Internal class index at a voxel.
    pub fn class_at(&self, z: usize, y: usize, x: usize) -> usize {
        let rho = self.rho(z, y, x);
        if rho <= self.core_scale {
            1
        } else if rho <= self.rim_scale {
            3
        } else if rho <= 1.0 {
            2
        } else {
            0
        }
    }
}

/// Deterministic phantom for `(seed, extent)`: raw (unstandardized) intensities
/// and external-code labels.
pub fn generate_phantom(seed: u64, extent: usize) -> Result<(Volume, LabelMap)> {
    if extent < MIN_EXTENT {
        return Err(Error::InvalidArgument(format!(
            "extent {extent} is below the minimum {MIN_EXTENT} needed for a three-shell lesion"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = PhantomParams::draw(&mut rng, extent);

    let gain: [f64; NUM_CHANNELS] = std::array::from_fn(|_| rng.random_range(0.9..1.1));
    let field_phase: [f64; NUM_CHANNELS] =
        std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let field_amp = 0.04;

    let n = extent * extent * extent;
    let mut indices = Vec::with_capacity(n);
    for z in 0..extent {
        for y in 0..extent {
            for x in 0..extent {
                indices.push(geom.class_at(z, y, x));
            }
        }
    }
    let labels = LabelMap::from_indices([extent; 3], &indices)?;
    let hist = labels.histogram();
    if hist.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "extent {extent} too small: class histogram {hist:?} misses a lesion shell"
        )));
    }

    let mut data = vec![0.0; NUM_CHANNELS * n];
    let freq = std::f64::consts::TAU / extent as f64;
    for ch in 0..NUM_CHANNELS {
        let (lo, hi) = CLASS_PROFILES
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[ch]), hi.max(p[ch]))
            });
        let noise = Normal::new(0.0, NOISE_FRACTION * (hi - lo)).expect("positive sigma");
        let out = &mut data[ch * n..(ch + 1) * n];
        let mut v = 0;
        for z in 0..extent {
            for y in 0..extent {
                for x in 0..extent {
                    let w = geom.class_weights(z, y, x);
                    let profile: f64 = (0..4).map(|c| w[c] * CLASS_PROFILES[c][ch]).sum();
                    let phase = freq * (0.7 * z as f64 + 0.5 * y as f64 + 0.3 * x as f64);
                    let value = gain[ch] * profile + w[0] * field_amp * (phase + field_phase[ch]).sin();
                    out[v] = value + noise.sample(&mut rng);
                    v += 1;
                }
            }
        }
    }
    let volume = Volume::new(
        format!("phantom_{seed}"),
        Tensor::new(vec![NUM_CHANNELS, extent, extent, extent], data)?,
    )?;
    Ok((volume, labels))
}
