//! Interpolation-free geometric augmentation and uniform input noise.

use rand::Rng;

use super::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Composition of axial quarter-turns, an axial transpose and per-axis flips.
/// Quarter-turns and the transpose act on the (H, W) plane and are skipped for
/// non-square slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GeometricTransform {
    pub quarter_turns: u8,
    pub transpose: bool,
    pub flip: [bool; 3],
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            quarter_turns: rng.random_range(0..4),
            transpose: rng.random(),
            flip: [rng.random(), rng.random(), rng.random()],
        }
    }

    /// Source voxel `(z, y, x)` for destination voxel `(z, y, x)`.
    fn source(&self, [d, h, w]: [usize; 3], z: usize, y: usize, x: usize) -> (usize, usize, usize) {
        let (mut sy, mut sx) = (y, x);
        if h == w {
            for _ in 0..self.quarter_turns % 4 {
                (sy, sx) = (sx, h - 1 - sy);
            }
            if self.transpose {
                (sy, sx) = (sx, sy);
            }
        }
        let sz = if self.flip[0] { d - 1 - z } else { z };
        let sy = if self.flip[1] { h - 1 - sy } else { sy };
        let sx = if self.flip[2] { w - 1 - sx } else { sx };
        (sz, sy, sx)
    }

    fn gather(&self, extents: [usize; 3]) -> Vec<usize> {
        let [d, h, w] = extents;
        let mut idx = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (sz, sy, sx) = self.source(extents, z, y, x);
                    idx.push((sz * h + sy) * w + sx);
                }
            }
        }
        idx
    }

    /// Apply to every channel of a `[C, D, H, W]` tensor.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        if t.rank() != 4 {
            return Err(Error::shape("GeometricTransform::apply", format!("{:?}", t.shape())));
        }
        if *self == Self::identity() {
            return Ok(t.clone());
        }
        let s = t.shape();
        let idx = self.gather([s[1], s[2], s[3]]);
        let inner = t.inner_len();
        let mut out = Vec::with_capacity(t.len());
        for c in 0..s[0] {
            let ch = &t.data()[c * inner..(c + 1) * inner];
            out.extend(idx.iter().map(|&i| ch[i]));
        }
        Tensor::new(s.to_vec(), out)
    }

    pub fn apply_labels(&self, labels: &LabelMap) -> Result<LabelMap> {
        if *self == Self::identity() {
            return Ok(labels.clone());
        }
        let idx = self.gather(labels.extents());
        let codes = labels.codes();
        LabelMap::new(labels.extents(), idx.iter().map(|&i| codes[i]).collect())
    }
}

/// `x + u` with `u ~ Uniform[-radius, radius]` drawn independently per voxel.
pub fn uniform_perturbation(t: &Tensor, radius: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation radius {radius} must be >= 0")));
    }
    if radius == 0.0 {
        return Ok(t.clone());
    }
    let data = t.data().iter().map(|v| v + rng.random_range(-radius..=radius)).collect();
    Tensor::new(t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transforms_are_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f64);
        for _ in 0..32 {
            let g = GeometricTransform::random(&mut rng);
            let out = g.apply(&t).unwrap();
            for c in 0..2 {
                let mut a = t.channel(c).to_vec();
                let mut b = out.channel(c).to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let t = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        let g = GeometricTransform {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut out = t.clone();
        for _ in 0..4 {
            out = g.apply(&out).unwrap();
        }
        assert_eq!(out, t);
        assert_ne!(g.apply(&t).unwrap(), t);
    }

    #[test]
    fn labels_follow_intensities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes: Vec<u8> = (0..27).map(|i| [0u8, 1, 2, 4][i % 4]).collect();
        let labels = LabelMap::new([3, 3, 3], codes.clone()).unwrap();
        let t = Tensor::from_fn(&[1, 3, 3, 3], |i| codes[i] as f64);
        for _ in 0..16 {
            let g = GeometricTransform::random(&mut rng);
            let lt = g.apply_labels(&labels).unwrap();
            let tt = g.apply(&t).unwrap();
            for (c, v) in lt.codes().iter().zip(tt.data()) {
                assert_eq!(*c as f64, *v);
            }
        }
    }

    #[test]
    fn uniform_noise_respects_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::from_fn(&[4, 4, 4, 4], |i| (i as f64).sin());
        let p = uniform_perturbation(&t, 0.01, &mut rng).unwrap();
        assert!(p.max_abs_diff(&t).unwrap() <= 0.01);
        assert!(p.max_abs_diff(&t).unwrap() > 0.0);
        assert_eq!(uniform_perturbation(&t, 0.0, &mut rng).unwrap(), t);
    }
}
