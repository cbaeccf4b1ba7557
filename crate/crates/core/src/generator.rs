//! The frozen generator `G` and its latent space `W`.
//!
//! [`OracleGenerator`] defines `W` as the image of the factor prior under a
//! fixed orthogonal mixing: `w = A * psi(f)`, where `psi` maps every factor
//! range affinely onto `[-1, 1]`. Images are produced by undoing the mixing
//! and rendering. The clamped inverse, [`Generator::unmix`], exists for
//! evaluation only; the image path uses its own unclamped decode so that
//! training never depends on ground-truth factor recovery.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Dual;
use crate::toyfaces::{
    self, render_dual, render_with, FactorVector, RenderJacobian, RenderSettings, ToyImage, FACTOR_RANGES, N_FACTORS,
};

pub const W_DIM: usize = N_FACTORS;

/// A point in the generator's latent space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleLatent(pub [f64; W_DIM]);

impl StyleLatent {
    pub fn zero() -> Self {
        StyleLatent([0.0; W_DIM])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `(1 - t) a + t b`, exact at both endpoints.
    pub fn lerp(&self, other: &StyleLatent, t: f64) -> StyleLatent {
        StyleLatent(std::array::from_fn(|i| (1.0 - t) * self.0[i] + t * other.0[i]))
    }
}

/// Everything the training and evaluation code needs from a frozen
/// generator. A learned backend can slot in behind this trait.
pub trait Generator: Send + Sync {
    fn settings(&self) -> RenderSettings;

    /// Draw `n` latents from the generator's own `W` distribution.
    fn sample_w(&self, seed: u64, n: usize) -> Result<Vec<StyleLatent>>;

    fn generate(&self, w: &StyleLatent) -> Result<ToyImage>;

    /// Image plus `d image / d w`.
    fn generate_differentiable(&self, w: &StyleLatent) -> Result<(ToyImage, RenderJacobian<W_DIM>)>;

    /// Ground-truth factor recovery. Evaluation only.
    fn unmix(&self, w: &StyleLatent) -> FactorVector;

    fn mixing_seed(&self) -> u64;

    /// Digest of every parameter that defines the generator.
    fn param_hash(&self) -> String;
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleGenerator {
    mixing_seed: u64,
    /// Row-major orthogonal `W_DIM x W_DIM` matrix.
    mixing: [[f64; W_DIM]; W_DIM],
    settings: RenderSettings,
}

impl OracleGenerator {
    pub fn new(mixing_seed: u64) -> Self {
        Self::with_settings(mixing_seed, RenderSettings::default())
    }

    pub fn with_settings(mixing_seed: u64, settings: RenderSettings) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mixing_seed);
        let g = DMatrix::<f64>::from_fn(W_DIM, W_DIM, |_, _| StandardNormal.sample(&mut rng));
        let qr = g.qr();
        let (q, r) = (qr.q(), qr.r());
        let mut mixing = [[0.0; W_DIM]; W_DIM];
        for j in 0..W_DIM {
            // sign convention makes the factorization unique
            let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..W_DIM {
                mixing[i][j] = s * q[(i, j)];
            }
        }
        OracleGenerator { mixing_seed, mixing, settings }
    }

    pub fn mixing(&self) -> &[[f64; W_DIM]; W_DIM] {
        &self.mixing
    }

    /// `max |A^T A - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..W_DIM {
            for j in 0..W_DIM {
                let dot: f64 = (0..W_DIM).map(|k| self.mixing[k][i] * self.mixing[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn mix(&self, f: &FactorVector) -> StyleLatent {
        let psi = normalize(f);
        StyleLatent(std::array::from_fn(|i| (0..W_DIM).map(|k| self.mixing[i][k] * psi[k]).sum()))
    }

    /// `A^T w`, the normalized factors before any clamping.
    fn demix(&self, w: &StyleLatent) -> [f64; W_DIM] {
        std::array::from_fn(|i| (0..W_DIM).map(|k| self.mixing[k][i] * w.0[k]).sum())
    }

    fn decode(&self, w: &StyleLatent) -> FactorVector {
        FactorVector::from_array(denormalize(&self.demix(w)))
    }
}

/// Affine map of each factor range onto `[-1, 1]`.
pub fn normalize(f: &FactorVector) -> [f64; N_FACTORS] {
    let a = f.to_array();
    std::array::from_fn(|i| {
        let (lo, hi) = FACTOR_RANGES[i];
        2.0 * (a[i] - lo) / (hi - lo) - 1.0
    })
}

pub fn denormalize(s: &[f64; N_FACTORS]) -> [f64; N_FACTORS] {
    std::array::from_fn(|i| {
        let (lo, hi) = FACTOR_RANGES[i];
        lo + 0.5 * (s[i] + 1.0) * (hi - lo)
    })
}

impl Generator for OracleGenerator {
    fn settings(&self) -> RenderSettings {
        self.settings
    }

    fn sample_w(&self, seed: u64, n: usize) -> Result<Vec<StyleLatent>> {
        Ok(toyfaces::sample_factors(seed, n)?.iter().map(|f| self.mix(f)).collect())
    }

    fn generate(&self, w: &StyleLatent) -> Result<ToyImage> {
        if !w.is_finite() {
            return Err(Error::invalid("non-finite latent"));
        }
        render_with(&self.decode(w), self.settings)
    }

    fn generate_differentiable(&self, w: &StyleLatent) -> Result<(ToyImage, RenderJacobian<W_DIM>)> {
        if !w.is_finite() {
            return Err(Error::invalid("non-finite latent"));
        }
        let f = self.decode(w).to_array();
        // d f_i / d w_k = (hi_i - lo_i) / 2 * A[k][i]
        let factors: [Dual<W_DIM>; N_FACTORS] = std::array::from_fn(|i| {
            let (lo, hi) = FACTOR_RANGES[i];
            let half = 0.5 * (hi - lo);
            Dual { v: f[i], d: std::array::from_fn(|k| half * self.mixing[k][i]) }
        });
        render_dual(&factors, self.settings)
    }

    fn unmix(&self, w: &StyleLatent) -> FactorVector {
        let mut a = denormalize(&self.demix(w));
        for (x, (lo, hi)) in a.iter_mut().zip(FACTOR_RANGES) {
            *x = x.clamp(lo, hi);
        }
        FactorVector::from_array(a)
    }

    fn mixing_seed(&self) -> u64 {
        self.mixing_seed
    }

    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.mixing_seed.to_le_bytes());
        for row in &self.mixing {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        h.update((self.settings.size as u64).to_le_bytes());
        h.update(self.settings.sharpness.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::{render, sample_factors, DEFAULT_SHARPNESS};

    #[test]
    fn mixing_is_orthogonal_and_seeded() {
        let g = OracleGenerator::new(3);
        assert!(g.orthogonality_error() < 1e-10);
        assert_eq!(g, OracleGenerator::new(3));
        assert_ne!(g.mixing(), OracleGenerator::new(4).mixing());
        // not axis-aligned: every row mixes several factors
        for row in g.mixing() {
            let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 0.95);
        }
    }

    #[test]
    fn unmix_inverts_mix() {
        let g = OracleGenerator::new(1);
        for f in sample_factors(2, 1000).unwrap() {
            let back = g.unmix(&g.mix(&f)).to_array();
            for (a, b) in back.iter().zip(f.to_array()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn midpoint_maps_to_origin_and_norm_is_preserved() {
        let g = OracleGenerator::new(1);
        let w = g.mix(&FactorVector::midpoint());
        assert!(w.norm() < 1e-12);
        let mid = g.unmix(&StyleLatent::zero()).to_array();
        for (a, b) in mid.iter().zip(FactorVector::midpoint().to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
        for f in sample_factors(5, 50).unwrap() {
            let psi = normalize(&f);
            let n = psi.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((g.mix(&f).norm() - n).abs() < 1e-12);
        }
    }

    #[test]
    fn far_latents_clamp_to_range_ends() {
        let g = OracleGenerator::new(1);
        let w = StyleLatent(std::array::from_fn(|i| if i % 2 == 0 { 1e3 } else { -1e3 }));
        for (x, (lo, hi)) in g.unmix(&w).to_array().iter().zip(FACTOR_RANGES) {
            assert!(*x == lo || *x == hi);
        }
    }

    #[test]
    fn sample_w_is_deterministic_centred_and_in_range() {
        let g = OracleGenerator::new(1);
        assert_eq!(g.sample_w(9, 5).unwrap(), g.sample_w(9, 5).unwrap());
        let ws = g.sample_w(9, 10_000).unwrap();
        for k in 0..W_DIM {
            let mean = ws.iter().map(|w| w.0[k]).sum::<f64>() / ws.len() as f64;
            assert!(mean.abs() < 0.05, "coordinate {k}: {mean}");
        }
        for w in &ws[..500] {
            let f = denormalize(&g.demix(w));
            let f = FactorVector::from_array(f);
            for (x, (lo, hi)) in f.to_array().iter().zip(FACTOR_RANGES) {
                assert!(*x >= lo - 1e-9 && *x <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn w_distribution_is_platykurtic() {
        let g = OracleGenerator::new(1);
        let ws = g.sample_w(4, 10_000).unwrap();
        for k in 0..W_DIM {
            let xs: Vec<f64> = ws.iter().map(|w| w.0[k]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
            assert!(m4 / (m2 * m2) < 3.0);
        }
    }

    #[test]
    fn generate_composes_mix_and_render() {
        let g = OracleGenerator::new(1);
        for f in sample_factors(8, 5).unwrap() {
            let a = g.generate(&g.mix(&f)).unwrap();
            let b = render(&f, DEFAULT_SHARPNESS).unwrap();
            let worst = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-12, "{worst}");
        }
        let w = g.mix(&sample_factors(8, 1).unwrap()[0]);
        assert_eq!(g.generate(&w).unwrap(), g.generate(&w).unwrap());
        // a bitwise different latent with the same factors
        let w2 = g.mix(&g.unmix(&w));
        let worst = g
            .generate(&w)
            .unwrap()
            .pixels
            .iter()
            .zip(&g.generate(&w2).unwrap().pixels)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn non_finite_latent_is_rejected() {
        let g = OracleGenerator::new(1);
        let mut w = StyleLatent::zero();
        w.0[3] = f64::INFINITY;
        assert!(g.generate(&w).is_err());
        assert!(g.generate_differentiable(&w).is_err());
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let g = OracleGenerator::new(2);
        for w in g.sample_w(3, 10).unwrap() {
            let (img, jac) = g.generate_differentiable(&w).unwrap();
            let seed: Vec<f64> = vec![1.0 / img.len() as f64; img.len()];
            let auto = jac.pullback(&seed);
            for k in 0..W_DIM {
                let h = 1e-4;
                let (mut p, mut m) = (w, w);
                p.0[k] += h;
                m.0[k] -= h;
                let fd = (g.generate(&p).unwrap().mean() - g.generate(&m).unwrap().mean()) / (2.0 * h);
                let scale = fd.abs().max(auto[k].abs()).max(1e-6);
                assert!((auto[k] - fd).abs() / scale < 1e-3, "w{k}: {} vs {fd}", auto[k]);
            }
        }
    }

    #[test]
    fn param_hash_is_stable() {
        assert_eq!(OracleGenerator::new(5).param_hash(), OracleGenerator::new(5).param_hash());
        assert_ne!(OracleGenerator::new(5).param_hash(), OracleGenerator::new(6).param_hash());
    }
}
