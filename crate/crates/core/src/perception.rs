//! Frozen auxiliary networks: the identity embedder used by the identity
//! cycle loss, the keypoint regressor used by the landmark loss, and the
//! architecturally independent evaluation networks (embedder and pose
//! regressor) that only the metrics touch.
//!
//! No identity classes exist in the toy domain (every sample has a fresh
//! identity), so the embedders are supervised by regression: the 32-d
//! embedding is fit to a fixed, seeded linear lift of the normalized
//! identity factors, and the lift's pseudo-inverse serves as the factor
//! read-out head.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Adam, LayerSpec, Network, Shape, Trace};
use crate::toyfaces::{
    keypoints_of, render, sample_factors, FactorVector, Keypoints, ToyImage, DEFAULT_SHARPNESS, IMAGE_SIZE,
    N_IDENTITY, N_KEYPOINTS,
};

pub const EMBED_DIM: usize = 32;
pub const MIN_CORPUS: usize = 2000;
pub const IDENTITY_RMSE_THRESHOLD: f64 = 0.05;
pub const KEYPOINT_ERROR_THRESHOLD: f64 = 1.0;
/// Pose read-out RMSE in degree-equivalent units (theta in degrees,
/// translations scaled by [`POSE_TRANSLATION_SCALE`]).
pub const POSE_RMSE_THRESHOLD: f64 = 2.5;
pub const POSE_TRANSLATION_SCALE: f64 = 30.0 / 8.0;

const KEYPOINT_CENTER: f64 = 32.0;
const KEYPOINT_SCALE: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerceptionKind {
    Identity,
    Keypoints,
    EvalEmbedder,
    Pose,
}

impl PerceptionKind {
    pub const ALL: [PerceptionKind; 4] =
        [PerceptionKind::Identity, PerceptionKind::Keypoints, PerceptionKind::EvalEmbedder, PerceptionKind::Pose];

    pub fn name(self) -> &'static str {
        match self {
            PerceptionKind::Identity => "identity",
            PerceptionKind::Keypoints => "keypoints",
            PerceptionKind::EvalEmbedder => "eval-embedder",
            PerceptionKind::Pose => "pose",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown network kind {s:?}")))
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        Self::ALL.get(t as usize).copied().ok_or_else(|| Error::Format(format!("network kind tag {t}")))
    }

    fn metric_name(self) -> &'static str {
        match self {
            PerceptionKind::Identity | PerceptionKind::EvalEmbedder => "identity RMSE",
            PerceptionKind::Keypoints => "mean keypoint error (px)",
            PerceptionKind::Pose => "pose RMSE",
        }
    }

    fn threshold(self) -> f64 {
        match self {
            PerceptionKind::Identity | PerceptionKind::EvalEmbedder => IDENTITY_RMSE_THRESHOLD,
            PerceptionKind::Keypoints => KEYPOINT_ERROR_THRESHOLD,
            PerceptionKind::Pose => POSE_RMSE_THRESHOLD,
        }
    }

    /// Layer stack for each network. The evaluation networks use a
    /// different layout from the training-time ones.
    pub fn layers(self) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let conv = |out_ch, kernel, stride, pad| Conv { out_ch, kernel, stride, pad };
        match self {
            PerceptionKind::Identity => vec![
                conv(12, 4, 2, 1),
                LeakyRelu,
                conv(24, 4, 2, 1),
                LeakyRelu,
                conv(32, 4, 2, 1),
                LeakyRelu,
                conv(32, 4, 2, 1),
                LeakyRelu,
                Dense { outputs: 64 },
                LeakyRelu,
                Dense { outputs: EMBED_DIM },
            ],
            PerceptionKind::Keypoints => vec![
                conv(12, 4, 2, 1),
                LeakyRelu,
                conv(24, 4, 2, 1),
                LeakyRelu,
                conv(32, 4, 2, 1),
                LeakyRelu,
                conv(32, 4, 2, 1),
                LeakyRelu,
                Dense { outputs: 64 },
                LeakyRelu,
                Dense { outputs: 2 * N_KEYPOINTS },
            ],
            PerceptionKind::EvalEmbedder => vec![
                conv(16, 5, 2, 2),
                LeakyRelu,
                conv(24, 3, 2, 1),
                LeakyRelu,
                conv(32, 3, 1, 1),
                LeakyRelu,
                AvgPool2,
                conv(32, 3, 2, 1),
                LeakyRelu,
                Dense { outputs: EMBED_DIM },
                LeakyRelu,
                Dense { outputs: EMBED_DIM },
            ],
            PerceptionKind::Pose => vec![
                conv(12, 4, 2, 1),
                LeakyRelu,
                conv(24, 4, 2, 1),
                LeakyRelu,
                conv(32, 4, 2, 1),
                LeakyRelu,
                conv(32, 4, 2, 1),
                LeakyRelu,
                Dense { outputs: 64 },
                LeakyRelu,
                Dense { outputs: 3 },
            ],
        }
    }
}

/// Hyperparameters for supervised pre-training of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of the corpus held out for the acceptance measurement.
    pub holdout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { seed: 1, epochs: 12, batch: 16, lr: 2e-3, holdout: 0.1 }
    }
}

/// Rendered images paired with their generating factors.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub images: Vec<ToyImage>,
    pub factors: Vec<FactorVector>,
}

impl Corpus {
    pub fn render(seed: u64, n: usize) -> Result<Self> {
        let factors = sample_factors(seed, n)?;
        let images = factors.iter().map(|f| render(f, DEFAULT_SHARPNESS)).collect::<Result<Vec<_>>>()?;
        Ok(Corpus { images, factors })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A pre-trained, frozen network with its read-out.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNet {
    pub kind: PerceptionKind,
    pub seed: u64,
    /// Held-out value of the kind's acceptance metric.
    pub achieved: f64,
    pub net: Network,
    /// Embedders: row-major `EMBED_DIM x N_IDENTITY` lift from centred
    /// identity factors to the embedding target. Empty otherwise.
    pub lift: Vec<f64>,
}

fn input_shape() -> Shape {
    Shape::image(3, IMAGE_SIZE, IMAGE_SIZE)
}

/// Seeded lift with orthonormal columns; the evaluation embedder also
/// rescales each identity direction so its Gram structure differs.
fn identity_lift(kind: PerceptionKind, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_11f7);
    let g = DMatrix::<f64>::from_fn(EMBED_DIM, N_IDENTITY, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let scales: [f64; N_IDENTITY] = match kind {
        PerceptionKind::EvalEmbedder => [0.7, 1.0, 1.4, 1.15],
        _ => [1.0; N_IDENTITY],
    };
    let mut lift = vec![0.0; EMBED_DIM * N_IDENTITY];
    for i in 0..EMBED_DIM {
        for j in 0..N_IDENTITY {
            lift[i * N_IDENTITY + j] = q[(i, j)] * scales[j];
        }
    }
    lift
}

fn centred_identity(f: &FactorVector) -> [f64; N_IDENTITY] {
    f.normalized_identity().map(|x| 2.0 * x - 1.0)
}

fn targets_for(kind: PerceptionKind, lift: &[f64], f: &FactorVector) -> Result<Vec<f64>> {
    Ok(match kind {
        PerceptionKind::Identity | PerceptionKind::EvalEmbedder => {
            let y = centred_identity(f);
            (0..EMBED_DIM)
                .map(|i| (0..N_IDENTITY).map(|j| lift[i * N_IDENTITY + j] * y[j]).sum())
                .collect()
        }
        PerceptionKind::Keypoints => keypoints_of(f)?
            .to_flat()
            .iter()
            .map(|v| (v - KEYPOINT_CENTER) / KEYPOINT_SCALE)
            .collect(),
        PerceptionKind::Pose => vec![f.pose_theta / 30.0, f.pose_tx / 8.0, f.pose_ty / 8.0],
    })
}

impl FrozenNet {
    /// Freshly initialized network of a kind, skipping pre-training. Its
    /// `achieved` metric is NaN; useful for plumbing tests and benchmarks.
    pub fn untrained(kind: PerceptionKind, seed: u64) -> Result<Self> {
        let lift = match kind {
            PerceptionKind::Identity | PerceptionKind::EvalEmbedder => identity_lift(kind, seed),
            _ => Vec::new(),
        };
        Ok(FrozenNet { kind, seed, achieved: f64::NAN, net: Network::new(input_shape(), &kind.layers(), seed)?, lift })
    }

    pub fn architecture_hash(&self) -> String {
        self.net.architecture_hash()
    }

    pub fn param_hash(&self) -> String {
        self.net.param_hash()
    }

    pub fn output(&self, img: &ToyImage) -> Vec<f64> {
        self.net.forward(&img.pixels)
    }

    pub fn traced(&self, img: &ToyImage) -> Trace {
        self.net.forward_trace(&img.pixels)
    }

    /// Gradient with respect to the input image of `<grad_out, output>`.
    pub fn input_gradient(&self, trace: &Trace, grad_out: &[f64]) -> Vec<f64> {
        self.net.backward(trace, grad_out, None, true).expect("input gradient requested")
    }

    /// Identity factors in `[0, 1]` recovered from an embedding.
    pub fn identity_from_embedding(&self, e: &[f64]) -> [f64; N_IDENTITY] {
        // lift columns are orthogonal with squared norms s_j^2
        std::array::from_fn(|j| {
            let col_sq: f64 = (0..EMBED_DIM).map(|i| self.lift[i * N_IDENTITY + j].powi(2)).sum();
            let y: f64 = (0..EMBED_DIM).map(|i| self.lift[i * N_IDENTITY + j] * e[i]).sum::<f64>() / col_sq;
            0.5 * (y + 1.0)
        })
    }

    fn check_kind(&self, want: &[PerceptionKind]) {
        assert!(want.contains(&self.kind), "{:?} used as {want:?}", self.kind);
    }

    fn measure(&self, corpus: &Corpus, idx: &[usize]) -> Result<f64> {
        let mut acc = 0.0;
        for &i in idx {
            let out = self.output(&corpus.images[i]);
            let f = &corpus.factors[i];
            acc += match self.kind {
                PerceptionKind::Identity | PerceptionKind::EvalEmbedder => {
                    let pred = self.identity_from_embedding(&out);
                    let truth = f.normalized_identity();
                    pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / N_IDENTITY as f64
                }
                PerceptionKind::Keypoints => decode_keypoints(&out).mean_distance(&keypoints_of(f)?),
                PerceptionKind::Pose => {
                    let p = decode_pose(&out);
                    let d = [
                        p[0] - f.pose_theta,
                        (p[1] - f.pose_tx) * POSE_TRANSLATION_SCALE,
                        (p[2] - f.pose_ty) * POSE_TRANSLATION_SCALE,
                    ];
                    d.iter().map(|x| x * x).sum::<f64>()
                }
            };
        }
        let mean = acc / idx.len() as f64;
        Ok(match self.kind {
            PerceptionKind::Keypoints => mean,
            _ => mean.sqrt(),
        })
    }
}

fn decode_keypoints(out: &[f64]) -> Keypoints {
    let flat: Vec<f64> = out.iter().map(|v| v * KEYPOINT_SCALE + KEYPOINT_CENTER).collect();
    Keypoints::from_flat(&flat)
}

fn decode_pose(out: &[f64]) -> [f64; 3] {
    [out[0] * 30.0, out[1] * 8.0, out[2] * 8.0]
}

/// Supervised pre-training shared by all four networks: mean-squared error
/// against the kind's targets, Adam with cosine learning-rate decay, and a
/// held-out acceptance check at the end.
pub fn pretrain(kind: PerceptionKind, corpus: &Corpus, config: &PretrainConfig) -> Result<FrozenNet> {
    if corpus.len() < MIN_CORPUS {
        return Err(Error::InsufficientSamples { needed: MIN_CORPUS, got: corpus.len() });
    }
    if config.epochs == 0 || config.batch == 0 || !(config.lr > 0.0) {
        return Err(Error::invalid("pre-training needs epochs, batch and lr > 0"));
    }
    let n_hold = ((corpus.len() as f64 * config.holdout).round() as usize).clamp(1, corpus.len() - 1);
    let n_train = corpus.len() - n_hold;
    let lift = match kind {
        PerceptionKind::Identity | PerceptionKind::EvalEmbedder => identity_lift(kind, config.seed),
        _ => Vec::new(),
    };
    let targets = corpus.factors.iter().map(|f| targets_for(kind, &lift, f)).collect::<Result<Vec<_>>>()?;

    let mut net = Network::new(input_shape(), &kind.layers(), config.seed)?;
    let mut adam = Adam::new(net.n_params(), config.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let mut order: Vec<usize> = (0..n_train).collect();
    let steps_per_epoch = n_train.div_ceil(config.batch);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    let mut step = 0usize;
    let mut grad = vec![0.0; net.n_params()];

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            grad.fill(0.0);
            for &i in chunk {
                let trace = net.forward_trace(&corpus.images[i].pixels);
                let g: Vec<f64> = trace
                    .output()
                    .iter()
                    .zip(&targets[i])
                    .map(|(o, t)| 2.0 * (o - t) / chunk.len() as f64)
                    .collect();
                net.backward(&trace, &g, Some(&mut grad), false);
            }
            let progress = step as f64 / total_steps;
            adam.lr = config.lr * (0.02 + 0.98 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.step(&mut net.params, &grad);
            step += 1;
        }
    }

    let mut frozen = FrozenNet { kind, seed: config.seed, achieved: f64::NAN, net, lift };
    let hold: Vec<usize> = (n_train..corpus.len()).collect();
    frozen.achieved = frozen.measure(corpus, &hold)?;
    if !(frozen.achieved <= kind.threshold()) {
        return Err(Error::PretrainingFailed {
            network: kind.name(),
            metric: kind.metric_name(),
            achieved: frozen.achieved,
            threshold: kind.threshold(),
        });
    }
    Ok(frozen)
}

pub fn pretrain_identity_embedder(corpus: &Corpus, config: &PretrainConfig) -> Result<IdentityEmbedder> {
    pretrain(PerceptionKind::Identity, corpus, config).map(IdentityEmbedder)
}

pub fn pretrain_keypoint_regressor(corpus: &Corpus, config: &PretrainConfig) -> Result<KeypointRegressor> {
    pretrain(PerceptionKind::Keypoints, corpus, config).map(KeypointRegressor)
}

pub fn pretrain_eval_embedder(corpus: &Corpus, config: &PretrainConfig) -> Result<EvalEmbedder> {
    pretrain(PerceptionKind::EvalEmbedder, corpus, config).map(EvalEmbedder)
}

pub fn pretrain_pose_regressor(corpus: &Corpus, config: &PretrainConfig) -> Result<PoseRegressor> {
    pretrain(PerceptionKind::Pose, corpus, config).map(PoseRegressor)
}

/// `E_id`: frozen identity embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedder(pub FrozenNet);

impl IdentityEmbedder {
    pub fn new(net: FrozenNet) -> Self {
        net.check_kind(&[PerceptionKind::Identity]);
        IdentityEmbedder(net)
    }

    /// Raw (unnormalized) 32-d embedding.
    pub fn embed(&self, img: &ToyImage) -> Vec<f64> {
        self.0.output(img)
    }

    pub fn embed_batch(&self, imgs: &[ToyImage]) -> Vec<Vec<f64>> {
        imgs.iter().map(|i| self.embed(i)).collect()
    }

    pub fn identity_factors(&self, img: &ToyImage) -> [f64; N_IDENTITY] {
        self.0.identity_from_embedding(&self.embed(img))
    }
}

/// `E_lnd`: frozen keypoint regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointRegressor(pub FrozenNet);

impl KeypointRegressor {
    pub fn new(net: FrozenNet) -> Self {
        net.check_kind(&[PerceptionKind::Keypoints]);
        KeypointRegressor(net)
    }

    pub fn predict(&self, img: &ToyImage) -> Keypoints {
        decode_keypoints(&self.0.output(img))
    }

    /// Keypoints in canvas pixels, flattened `[x0, y0, x1, ...]`, plus the
    /// trace needed for input gradients.
    pub fn predict_traced(&self, img: &ToyImage) -> (Vec<f64>, Trace) {
        let trace = self.0.traced(img);
        let flat = trace.output().iter().map(|v| v * KEYPOINT_SCALE + KEYPOINT_CENTER).collect();
        (flat, trace)
    }

    /// Input gradient given the gradient with respect to pixel-unit
    /// keypoint coordinates.
    pub fn input_gradient(&self, trace: &Trace, grad_points: &[f64]) -> Vec<f64> {
        let g: Vec<f64> = grad_points.iter().map(|v| v * KEYPOINT_SCALE).collect();
        self.0.input_gradient(trace, &g)
    }
}

/// Independent identity embedder used only for evaluation; its penultimate
/// layer doubles as the feature space for FID.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEmbedder(pub FrozenNet);

impl EvalEmbedder {
    pub fn new(net: FrozenNet) -> Self {
        net.check_kind(&[PerceptionKind::EvalEmbedder]);
        EvalEmbedder(net)
    }

    pub fn embed(&self, img: &ToyImage) -> Vec<f64> {
        self.0.output(img)
    }

    /// Activations of the layer feeding the embedding.
    pub fn features(&self, img: &ToyImage) -> Vec<f64> {
        let trace = self.0.traced(img);
        let n = trace.activations.len();
        trace.activations[n - 2].clone()
    }

    /// Embedding and features from one pass.
    pub fn embed_and_features(&self, img: &ToyImage) -> (Vec<f64>, Vec<f64>) {
        let mut trace = self.0.traced(img);
        let e = trace.activations.pop().unwrap();
        let f = trace.activations.pop().unwrap();
        (e, f)
    }
}

/// Pose read-out `(theta degrees, tx px, ty px)` for the pose metric.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRegressor(pub FrozenNet);

impl PoseRegressor {
    pub fn new(net: FrozenNet) -> Self {
        net.check_kind(&[PerceptionKind::Pose]);
        PoseRegressor(net)
    }

    pub fn predict(&self, img: &ToyImage) -> [f64; 3] {
        decode_pose(&self.0.output(img))
    }
}

/// The two frozen networks used during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingNets {
    pub identity: IdentityEmbedder,
    pub keypoints: KeypointRegressor,
}

/// The two frozen networks used by the metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalNets {
    pub embedder: EvalEmbedder,
    pub pose: PoseRegressor,
    pub keypoints: KeypointRegressor,
}

const NET_MAGIC: &[u8; 4] = b"LBNT";
const NET_VERSION: u32 = 1;

impl FrozenNet {
    /// Layout: magic `LBNT`, u32 version, u8 kind, u64 seed, f64 achieved,
    /// u32 architecture-string length + bytes, u64 lift length + f64s,
    /// u64 parameter count + f64s. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NET_MAGIC);
        let arch = self.net.architecture();
        out.write_u32::<LittleEndian>(NET_VERSION).unwrap();
        out.write_u8(self.kind.tag()).unwrap();
        out.write_u64::<LittleEndian>(self.seed).unwrap();
        out.write_f64::<LittleEndian>(self.achieved).unwrap();
        out.write_u32::<LittleEndian>(arch.len() as u32).unwrap();
        out.extend_from_slice(arch.as_bytes());
        write_f64s(&mut out, &self.lift);
        write_f64s(&mut out, &self.net.params);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(Error::Format("not a network file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != NET_VERSION {
            return Err(Error::Format(format!("network file version {version}")));
        }
        let kind = PerceptionKind::from_tag(r.read_u8()?)?;
        let seed = r.read_u64::<LittleEndian>()?;
        let achieved = r.read_f64::<LittleEndian>()?;
        let arch_len = r.read_u32::<LittleEndian>()? as usize;
        let mut arch = vec![0u8; arch_len];
        r.read_exact(&mut arch)?;
        let lift = read_f64s(&mut r)?;
        let params = read_f64s(&mut r)?;
        let mut net = Network::new(input_shape(), &kind.layers(), 0)?;
        if net.architecture().as_bytes() != arch.as_slice() || net.n_params() != params.len() {
            return Err(Error::Format(format!("{} network layout does not match this build", kind.name())));
        }
        net.params = params;
        Ok(FrozenNet { kind, seed, achieved, net, lift })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.write_u64::<LittleEndian>(v.len() as u64).unwrap();
    for x in v {
        out.write_f64::<LittleEndian>(*x).unwrap();
    }
}

pub(crate) fn read_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n > 1 << 28 {
        return Err(Error::Format(format!("implausible blob length {n}")));
    }
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

/// Mean cosine similarity of two embedding sets, pairwise by index.
pub fn mean_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| cosine(x, y)).sum::<f64>() / a.len() as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Linear centred kernel alignment between two representations of the
/// same samples; 1 means identical Gram structure up to rotation and scale.
pub fn linear_cka(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let center = |x: &[Vec<f64>]| {
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j])
    };
    let (xa, xb) = (center(a), center(b));
    let cross = (xa.transpose() * &xb).norm_squared();
    let sa = (xa.transpose() * &xa).norm();
    let sb = (xb.transpose() * &xb).norm();
    cross / (sa * sb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_below_minimum_is_rejected() {
        let corpus = Corpus::render(1, 10).unwrap();
        let err = pretrain(PerceptionKind::Identity, &corpus, &PretrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { needed: MIN_CORPUS, got: 10 }));
    }

    #[test]
    fn kinds_round_trip_through_names() {
        for k in PerceptionKind::ALL {
            assert_eq!(PerceptionKind::parse(k.name()).unwrap(), k);
        }
        assert!(PerceptionKind::parse("arcface").is_err());
    }

    #[test]
    fn eval_and_training_layouts_differ() {
        let a = Network::new(input_shape(), &PerceptionKind::Identity.layers(), 1).unwrap();
        let b = Network::new(input_shape(), &PerceptionKind::EvalEmbedder.layers(), 1).unwrap();
        assert_ne!(a.architecture_hash(), b.architecture_hash());
        assert_eq!(a.output_len(), EMBED_DIM);
        assert_eq!(b.output_len(), EMBED_DIM);
    }

    #[test]
    fn lift_read_out_inverts_the_target() {
        for kind in [PerceptionKind::Identity, PerceptionKind::EvalEmbedder] {
            let lift = identity_lift(kind, 3);
            let net = Network::new(input_shape(), &kind.layers(), 1).unwrap();
            let frozen = FrozenNet { kind, seed: 3, achieved: 0.0, net, lift };
            for f in sample_factors(4, 20).unwrap() {
                let t = targets_for(kind, &frozen.lift, &f).unwrap();
                let back = frozen.identity_from_embedding(&t);
                for (a, b) in back.iter().zip(f.normalized_identity()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cka_is_one_for_rotations_and_lower_for_rescaled_axes() {
        let fs = sample_factors(5, 400).unwrap();
        let lift_a = identity_lift(PerceptionKind::Identity, 1);
        let lift_b = identity_lift(PerceptionKind::Identity, 2);
        let lift_e = identity_lift(PerceptionKind::EvalEmbedder, 2);
        let emb = |lift: &[f64]| -> Vec<Vec<f64>> {
            fs.iter().map(|f| targets_for(PerceptionKind::Identity, lift, f).unwrap()).collect()
        };
        assert!((linear_cka(&emb(&lift_a), &emb(&lift_b)) - 1.0).abs() < 1e-9);
        assert!(linear_cka(&emb(&lift_a), &emb(&lift_e)) < 0.95);
    }

    #[test]
    fn network_file_round_trip() {
        let kind = PerceptionKind::Pose;
        let net = Network::new(input_shape(), &kind.layers(), 9).unwrap();
        let frozen = FrozenNet { kind, seed: 9, achieved: 0.7, net, lift: vec![] };
        let back = FrozenNet::from_bytes(&frozen.to_bytes()).unwrap();
        assert_eq!(back, frozen);
        let mut bad = frozen.to_bytes();
        bad[0] = b'X';
        assert!(FrozenNet::from_bytes(&bad).is_err());
    }

    #[test]
    fn cosine_edge_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
