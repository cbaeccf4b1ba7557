//! Quantitative protocol: identity, expression and pose metrics, FID over
//! frozen embedder features, the W-space PCA study, latent interpolation
//! and identity coherence along an attribute trajectory.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::disentangle::{encode, map_to_w, ms_ssim, LatentZ, Model};
use crate::error::{Error, Result};
use crate::generator::{Generator, StyleLatent, W_DIM};
use crate::perception::{cosine, EvalNets, IdentityEmbedder, POSE_TRANSLATION_SCALE};
use crate::toyfaces::{render_with, FactorVector, ToyImage};
use crate::training::derive_seed;

/// Minimum samples per space for [`pca_w_analysis`].
pub const PCA_MIN_SAMPLES: usize = 10_000;
const EIGEN_FLOOR: f64 = 1e-8;

/// Cosine of the evaluation embeddings of the two images.
pub fn metric_identity(nets: &EvalNets, i_id: &ToyImage, i_out: &ToyImage) -> f64 {
    cosine(&nets.embedder.embed(i_id), &nets.embedder.embed(i_out))
}

/// Mean keypoint displacement divided by the image side.
pub fn metric_expression(nets: &EvalNets, i_attr: &ToyImage, i_out: &ToyImage) -> f64 {
    let side = i_attr.size as f64;
    nets.keypoints.predict(i_attr).mean_distance(&nets.keypoints.predict(i_out)) / side
}

/// Euclidean distance over `(theta, tx, ty)` estimates, translation rescaled
/// to degree-comparable units.
pub fn metric_pose(nets: &EvalNets, i_attr: &ToyImage, i_out: &ToyImage) -> f64 {
    pose_distance(&nets.pose.predict(i_attr), &nets.pose.predict(i_out))
}

fn pose_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], (a[1] - b[1]) * POSE_TRANSLATION_SCALE, (a[2] - b[2]) * POSE_TRANSLATION_SCALE];
    d.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean absolute pixel difference.
pub fn mean_l1(a: &ToyImage, b: &ToyImage) -> f64 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Sample mean and covariance of a set of equal-length rows.
fn moments(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let centred = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mean, cov)
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
///
/// `Tr((Σa Σb)^(1/2))` is taken as the trace of the square root of the
/// symmetric product `Σa^(1/2) Σb Σa^(1/2)`, which has the same spectrum.
pub fn gaussian_frechet(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let root_a = symmetric_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 =
        SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() }).sum();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    value.max(0.0)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn compute_fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let dim = features_a.first().or(features_b.first()).map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::EmptyRequest("compute_fid needs non-empty feature vectors"));
    }
    let needed = 2 * dim;
    for set in [features_a, features_b] {
        if set.len() < needed {
            return Err(Error::InsufficientSamples { needed, got: set.len() });
        }
        if set.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("feature rows must be finite {dim}-vectors")));
        }
    }
    let (mu_a, cov_a) = moments(features_a);
    let (mu_b, cov_b) = moments(features_b);
    Ok(gaussian_frechet(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Running mean and population standard deviation from accumulated sums.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub n: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let mut m = MeanStd::default();
        for &v in values {
            m.push(v);
        }
        m
    }

    pub fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(&mut self, other: &MeanStd) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.sum / self.n as f64
    }

    pub fn std(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let m = self.mean();
        (self.sum_sq / self.n as f64 - m * m).max(0.0).sqrt()
    }

    fn cell(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean(), self.std())
    }
}

/// Aggregated metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub fid: f64,
    pub identity: MeanStd,
    pub expression: MeanStd,
    pub pose: MeanStd,
    pub recon_ms_ssim: MeanStd,
    pub recon_l1: MeanStd,
    pub n_pairs: usize,
    pub config_hash: String,
}

impl MetricsReport {
    /// Two-row `|`-separated table: a header and one row of values.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| FID ↓ | Identity ↑ | Expression ↓ | Pose ↓ | Recon MS-SSIM ↑ | Recon L1 ↓ | n_pairs | config |"
        );
        let _ = writeln!(
            s,
            "| {:.4} | {} | {} | {} | {} | {} | {} | {} |",
            self.fid,
            self.identity.cell(),
            self.expression.cell(),
            self.pose.cell(),
            self.recon_ms_ssim.cell(),
            self.recon_l1.cell(),
            self.n_pairs,
            self.config_hash
        );
        s
    }
}

/// Held-out evaluation inputs: `(I_id, I_attr)` pairs plus a separate set of
/// real images for the FID reference.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOut {
    pub pairs: Vec<(ToyImage, ToyImage)>,
    pub real: Vec<ToyImage>,
}

impl HeldOut {
    pub fn sample(generator: &dyn Generator, n_pairs: usize, seed: u64) -> Result<Self> {
        if n_pairs == 0 {
            return Err(Error::EmptyRequest("evaluation needs n_pairs >= 1"));
        }
        let render = |stream: &str| -> Result<Vec<ToyImage>> {
            generator.sample_w(derive_seed(seed, stream), n_pairs)?.iter().map(|w| generator.generate(w)).collect()
        };
        let ids = render("eval-identity")?;
        let attrs = render("eval-attribute")?;
        let real = render("eval-real")?;
        Ok(HeldOut { pairs: ids.into_iter().zip(attrs).collect(), real })
    }
}

/// Score an arbitrary `(I_id, I_attr) -> I_out` pipeline on held-out inputs.
///
/// Self-reconstruction runs the pipeline with `I_id = I_attr` on every
/// attribute image.
pub fn evaluate_pipeline(
    pipeline: &dyn Fn(&ToyImage, &ToyImage) -> Result<ToyImage>,
    nets: &EvalNets,
    held_out: &HeldOut,
    config_hash: &str,
) -> Result<MetricsReport> {
    let mut identity = MeanStd::default();
    let mut expression = MeanStd::default();
    let mut pose = MeanStd::default();
    let mut recon_ms_ssim = MeanStd::default();
    let mut recon_l1 = MeanStd::default();
    let mut fake_features = Vec::with_capacity(held_out.pairs.len());
    for (i_id, i_attr) in &held_out.pairs {
        let out = pipeline(i_id, i_attr)?;
        let (embed_out, features) = nets.embedder.embed_and_features(&out);
        identity.push(cosine(&nets.embedder.embed(i_id), &embed_out));
        expression.push(metric_expression(nets, i_attr, &out));
        pose.push(metric_pose(nets, i_attr, &out));
        fake_features.push(features);

        let rec = pipeline(i_attr, i_attr)?;
        recon_ms_ssim.push(ms_ssim(i_attr, &rec)?);
        recon_l1.push(mean_l1(i_attr, &rec));
    }
    let real_features: Vec<Vec<f64>> = held_out.real.iter().map(|img| nets.embedder.features(img)).collect();
    let fid = compute_fid(&real_features, &fake_features)?;
    let report = MetricsReport {
        fid,
        identity,
        expression,
        pose,
        recon_ms_ssim,
        recon_l1,
        n_pairs: held_out.pairs.len(),
        config_hash: config_hash.to_string(),
    };
    let values = [fid, identity.sum, expression.sum, pose.sum, recon_ms_ssim.sum, recon_l1.sum];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("evaluation produced a non-finite metric"));
    }
    Ok(report)
}

/// The trained transfer pipeline `G(M(E_id(I_id), E_attr(I_attr)))`.
pub fn transfer(model: &Model, e_id: &IdentityEmbedder, generator: &dyn Generator, i_id: &ToyImage, i_attr: &ToyImage) -> Result<ToyImage> {
    generator.generate(&model.infer_w(e_id, i_id, i_attr)?)
}

/// Evaluate a trained model on `n_pairs` held-out pairs drawn from `seed`.
pub fn evaluate(
    model: &Model,
    e_id: &IdentityEmbedder,
    generator: &dyn Generator,
    nets: &EvalNets,
    n_pairs: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    let held_out = HeldOut::sample(generator, n_pairs, seed)?;
    evaluate_pipeline(&|i_id, i_attr| transfer(model, e_id, generator, i_id, i_attr), nets, &held_out, config_hash)
}

/// Predicted latents for `n` random held-out `(I_id, I_attr)` pairs.
pub fn predicted_w(model: &Model, e_id: &IdentityEmbedder, generator: &dyn Generator, n: usize, seed: u64) -> Result<Vec<StyleLatent>> {
    let ids = generator.sample_w(derive_seed(seed, "pca-identity"), n)?;
    let attrs = generator.sample_w(derive_seed(seed, "pca-attribute"), n)?;
    ids.iter()
        .zip(&attrs)
        .map(|(wi, wa)| model.infer_w(e_id, &generator.generate(wi)?, &generator.generate(wa)?))
        .collect()
}

/// Names of the three spaces compared by [`pca_w_analysis`], in order.
pub const PCA_SPACES: [&str; 3] = ["generator", "ours", "baseline"];

/// Two-component PCA of three latent sets fitted on their union.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaSummary {
    pub mean: [f64; W_DIM],
    pub components: [[f64; W_DIM]; 2],
    pub explained: [f64; 2],
    /// Projections per space, in [`PCA_SPACES`] order.
    pub projections: [Vec<[f64; 2]>; 3],
    /// 2D Fréchet distances: generator-ours, generator-baseline, ours-baseline.
    pub frechet: [f64; 3],
}

impl PcaSummary {
    pub fn frechet_generator_ours(&self) -> f64 {
        self.frechet[0]
    }

    pub fn frechet_generator_baseline(&self) -> f64 {
        self.frechet[1]
    }

    /// `space,pc1,pc2` rows for every projected sample.
    pub fn to_points_csv(&self) -> String {
        let mut s = String::from("space,pc1,pc2\n");
        for (name, points) in PCA_SPACES.iter().zip(&self.projections) {
            for p in points {
                let _ = writeln!(s, "{name},{:?},{:?}", p[0], p[1]);
            }
        }
        s
    }

    pub fn summary_line(&self) -> String {
        format!(
            "explained={:.6},{:.6} frechet_generator_ours={:.6} frechet_generator_baseline={:.6} frechet_ours_baseline={:.6}",
            self.explained[0], self.explained[1], self.frechet[0], self.frechet[1], self.frechet[2]
        )
    }
}

pub fn pca_w_analysis(generator_w: &[StyleLatent], ours_w: &[StyleLatent], baseline_w: &[StyleLatent]) -> Result<PcaSummary> {
    let sets = [generator_w, ours_w, baseline_w];
    for set in sets {
        if set.len() < PCA_MIN_SAMPLES {
            return Err(Error::InsufficientSamples { needed: PCA_MIN_SAMPLES, got: set.len() });
        }
        if set.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite latent in PCA input"));
        }
    }
    let union: Vec<Vec<f64>> = sets.iter().flat_map(|s| s.iter().map(|w| w.0.to_vec())).collect();
    let (mean, cov) = moments(&union);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..W_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let component = |k: usize| -> [f64; W_DIM] {
        let col = eig.eigenvectors.column(order[k]);
        let pivot = (0..W_DIM).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        std::array::from_fn(|i| sign * col[i])
    };
    let components = [component(0), component(1)];
    let explained = [eig.eigenvalues[order[0]].max(0.0) / total, eig.eigenvalues[order[1]].max(0.0) / total];
    let mean: [f64; W_DIM] = std::array::from_fn(|i| mean[i]);
    let project = |w: &StyleLatent| -> [f64; 2] {
        std::array::from_fn(|k| (0..W_DIM).map(|i| (w.0[i] - mean[i]) * components[k][i]).sum())
    };
    let projections = sets.map(|s| s.iter().map(project).collect::<Vec<_>>());
    let fit: Vec<(DVector<f64>, DMatrix<f64>)> =
        projections.iter().map(|p| moments(&p.iter().map(|x| x.to_vec()).collect::<Vec<_>>())).collect();
    let pair = |a: usize, b: usize| gaussian_frechet(&fit[a].0, &fit[a].1, &fit[b].0, &fit[b].1);
    let frechet = [pair(0, 1), pair(0, 2), pair(1, 2)];
    Ok(PcaSummary { mean, components, explained, projections, frechet })
}

fn interpolation_times(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    Ok((0..steps).map(|k| k as f64 / (steps - 1) as f64).collect())
}

/// Frames along the straight line in W between the inferred latents of two
/// `(I_id, I_attr)` endpoints.
pub fn interpolate_w(
    model: &Model,
    e_id: &IdentityEmbedder,
    generator: &dyn Generator,
    endpoint_a: (&ToyImage, &ToyImage),
    endpoint_b: (&ToyImage, &ToyImage),
    steps: usize,
) -> Result<Vec<ToyImage>> {
    let times = interpolation_times(steps)?;
    let wa = model.infer_w(e_id, endpoint_a.0, endpoint_a.1)?;
    let wb = model.infer_w(e_id, endpoint_b.0, endpoint_b.1)?;
    times.iter().map(|&t| generator.generate(&wa.lerp(&wb, t))).collect()
}

/// Which block of `z` stays constant during [`interpolate_z`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedBlock {
    Identity,
    Attribute,
}

impl FixedBlock {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(FixedBlock::Identity),
            "attribute" => Ok(FixedBlock::Attribute),
            _ => Err(Error::invalid(format!("unknown block {s:?}, expected identity or attribute"))),
        }
    }
}

/// Interpolate one block of `z` while holding the other.
///
/// With `FixedBlock::Identity`, `held` is the identity image and the
/// attribute code moves from `E_attr(from)` to `E_attr(to)`; with
/// `FixedBlock::Attribute`, `held` is the attribute image and the identity
/// code moves from `E_id(from)` to `E_id(to)`. Each interpolant goes through
/// `M` and `G`.
pub fn interpolate_z(
    model: &Model,
    e_id: &IdentityEmbedder,
    generator: &dyn Generator,
    fixed: FixedBlock,
    held: &ToyImage,
    from: &ToyImage,
    to: &ToyImage,
    steps: usize,
) -> Result<Vec<ToyImage>> {
    let times = interpolation_times(steps)?;
    let (za, zb) = match fixed {
        FixedBlock::Identity => (encode(e_id, &model.attr, held, from)?, encode(e_id, &model.attr, held, to)?),
        FixedBlock::Attribute => (encode(e_id, &model.attr, from, held)?, encode(e_id, &model.attr, to, held)?),
    };
    times
        .iter()
        .map(|&t| {
            let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect() };
            let z = match fixed {
                FixedBlock::Identity => LatentZ::from_parts(za.identity(), &lerp(za.attribute(), zb.attribute()))?,
                FixedBlock::Attribute => LatentZ::from_parts(&lerp(za.identity(), zb.identity()), za.attribute())?,
            };
            generator.generate(&map_to_w(&model.mapper, &z))
        })
        .collect()
}

/// Per-frame results of driving one identity with an attribute trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Coherence {
    pub frames: Vec<ToyImage>,
    pub identity: Vec<f64>,
    pub identity_std: f64,
    pub expression: Vec<f64>,
}

/// Generate every frame of `trajectory` independently with the identity of
/// `identity_img` and score identity similarity and expression transfer.
pub fn sequence_coherence(
    model: &Model,
    e_id: &IdentityEmbedder,
    generator: &dyn Generator,
    nets: &EvalNets,
    identity_img: &ToyImage,
    trajectory: &[FactorVector],
) -> Result<Coherence> {
    if trajectory.is_empty() {
        return Err(Error::EmptyRequest("sequence_coherence needs at least one frame"));
    }
    let settings = generator.settings();
    let target = nets.embedder.embed(identity_img);
    let mut frames = Vec::with_capacity(trajectory.len());
    let mut identity = Vec::with_capacity(trajectory.len());
    let mut expression = Vec::with_capacity(trajectory.len());
    for f in trajectory {
        let attr = render_with(f, settings)?;
        let out = transfer(model, e_id, generator, identity_img, &attr)?;
        identity.push(cosine(&target, &nets.embedder.embed(&out)));
        expression.push(metric_expression(nets, &attr, &out));
        frames.push(out);
    }
    let identity_std = MeanStd::of(&identity).std();
    Ok(Coherence { frames, identity, identity_std, expression })
}

/// A smooth head-turn-and-talk trajectory around `base`: one full yaw cycle
/// of ±20° with the mouth opening and closing twice.
pub fn pose_sweep(base: &FactorVector, frames: usize) -> Vec<FactorVector> {
    (0..frames)
        .map(|k| {
            let phase = TAU * k as f64 / frames.max(1) as f64;
            FactorVector {
                pose_theta: 20.0 * phase.sin(),
                pose_tx: 3.0 * phase.sin(),
                expr_open: 0.5 + 0.4 * (2.0 * phase).sin(),
                ..*base
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
