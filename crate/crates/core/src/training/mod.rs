//! Dataset construction from the frozen generator, the reconstruct /
//! disentangle schedule, the three-step optimizer loop, and checkpoints.
//!
//! Every iteration draws its batch from a generator seeded by
//! `(master seed, iteration)`, so the data stream is a pure function of the
//! iteration counter and a resumed run needs no sampler state.

mod checkpoint;
mod config;

pub use checkpoint::Checkpoint;
pub use config::{derive_seed, sha256_hex, TrainingConfig};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::disentangle::{
    loss_adv_d_with_grad, loss_adv_g_with_grad, nonadv_with_grad, LatentZ, Model, NonAdvTargets, ATTR_DIM,
};
use crate::error::{Error, Result};
use crate::generator::{Generator, StyleLatent, W_DIM};
use crate::nn::{Adam, Trace};
use crate::perception::{
    pretrain, Corpus, EvalEmbedder, EvalNets, FrozenNet, IdentityEmbedder, KeypointRegressor, PerceptionKind, PoseRegressor,
    TrainingNets, EMBED_DIM,
};
use crate::toyfaces::ToyImage;

/// Real latents recorded from the frozen generator. Images are regenerated
/// on demand from the stored latents (a 20K-image bundle would need ~2 GB
/// held as 64-bit floats); `image(i)` is `generate(real_w[i])` by
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub seed: u64,
    pub real_w: Vec<StyleLatent>,
}

pub fn build_dataset(generator: &dyn Generator, n: usize, seed: u64) -> Result<DatasetBundle> {
    if n == 0 {
        return Err(Error::EmptyRequest("dataset size must be at least 1"));
    }
    Ok(DatasetBundle { seed, real_w: generator.sample_w(seed, n)? })
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.real_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real_w.is_empty()
    }

    pub fn image(&self, generator: &dyn Generator, i: usize) -> Result<ToyImage> {
        let w = self.real_w.get(i).ok_or_else(|| Error::invalid(format!("dataset index {i} out of range")))?;
        generator.generate(w)
    }

    /// Seed followed by every latent, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * W_DIM * 8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for w in &self.real_w {
            for v in w.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `I_id = I_attr`; the reconstruction loss is active.
    Reconstruct,
    /// `I_id` and `I_attr` drawn independently.
    Disentangle,
}

/// Disentangle on every `period`-th iteration (0-indexed: when
/// `iteration % period == period - 1`), reconstruct otherwise.
pub fn next_mode(iteration: u64, period: u64) -> Mode {
    assert!(period >= 1, "schedule period must be >= 1");
    if iteration % period == period - 1 {
        Mode::Disentangle
    } else {
        Mode::Reconstruct
    }
}

/// Dataset indices of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(identity source, attribute source)` per sample.
    pub pairs: Vec<(usize, usize)>,
    /// Real latents for the discriminator.
    pub real: Vec<usize>,
}

pub fn sample_batch(seed: u64, iteration: u64, mode: Mode, batch: usize, n: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batch") ^ iteration.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let pairs = (0..batch)
        .map(|_| {
            let a = rng.random_range(0..n);
            match mode {
                Mode::Reconstruct => (a, a),
                Mode::Disentangle => (rng.random_range(0..n), a),
            }
        })
        .collect();
    let real = (0..batch).map(|_| rng.random_range(0..n)).collect();
    Batch { pairs, real }
}

/// Mutable training state: parameters and the three optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub model: Model,
    /// Discriminator step.
    pub opt_d: Adam,
    /// Non-adversarial generator-side step over `[E_attr, M]`.
    pub opt_nonadv: Adam,
    /// Adversarial generator-side step over `[E_attr, M]`.
    pub opt_adv_g: Adam,
}

impl TrainState {
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        let model = Model::new(derive_seed(config.seed, "model"))?;
        let n_g = model.attr.net.n_params() + model.mapper.net.n_params();
        Ok(TrainState {
            iteration: 0,
            opt_d: Adam::new(model.discriminator.net.n_params(), config.lr_d, config.beta1, config.beta2),
            opt_nonadv: Adam::new(n_g, config.lr_nonadv, config.beta1, config.beta2),
            opt_adv_g: Adam::new(n_g, config.lr_g_adv, config.beta1, config.beta2),
            model,
        })
    }

    fn generator_params(&self) -> Vec<f64> {
        let mut p = self.model.attr.net.params.clone();
        p.extend_from_slice(&self.model.mapper.net.params);
        p
    }

    fn set_generator_params(&mut self, p: &[f64]) {
        let n = self.model.attr.net.n_params();
        self.model.attr.net.params.copy_from_slice(&p[..n]);
        self.model.mapper.net.params.copy_from_slice(&p[n..]);
    }
}

/// Losses observed during one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub mode: Mode,
    /// Discriminator loss including R1; zero when `D_W` is disabled.
    pub loss_d: f64,
    pub r1: f64,
    pub loss_id: f64,
    pub loss_lnd: f64,
    pub loss_rec: f64,
    pub loss_nonadv: f64,
    /// Generator adversarial loss measured before its step.
    pub loss_adv_g: f64,
}

struct Forward {
    attr_trace: Trace,
    mapper_trace: Trace,
    w: StyleLatent,
}

/// Frozen context of a run plus memoized frozen-network responses to
/// dataset images.
pub struct Trainer<'a> {
    pub config: TrainingConfig,
    pub generator: &'a dyn Generator,
    pub nets: &'a TrainingNets,
    pub dataset: DatasetBundle,
    id_cache: Vec<Option<Vec<f64>>>,
    lnd_cache: Vec<Option<Vec<f64>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainingConfig, generator: &'a dyn Generator, nets: &'a TrainingNets) -> Result<Self> {
        config.validate()?;
        let dataset = build_dataset(generator, config.n_dataset, derive_seed(config.seed, "dataset"))?;
        let n = dataset.len();
        Ok(Trainer { config, generator, nets, dataset, id_cache: vec![None; n], lnd_cache: vec![None; n] })
    }

    fn identity_target(&mut self, i: usize, img: Option<&ToyImage>) -> Result<Vec<f64>> {
        if let Some(e) = &self.id_cache[i] {
            return Ok(e.clone());
        }
        let e = match img {
            Some(img) => self.nets.identity.embed(img),
            None => self.nets.identity.embed(&self.dataset.image(self.generator, i)?),
        };
        self.id_cache[i] = Some(e.clone());
        Ok(e)
    }

    fn keypoint_target(&mut self, i: usize, img: &ToyImage) -> Vec<f64> {
        if let Some(k) = &self.lnd_cache[i] {
            return k.clone();
        }
        let k = self.nets.keypoints.predict_traced(img).0;
        self.lnd_cache[i] = Some(k.clone());
        k
    }

    fn forward(&self, model: &Model, identity: &[f64], attr_img: &ToyImage) -> Result<Forward> {
        let attr_trace = model.attr.traced(attr_img)?;
        let z = LatentZ::from_parts(identity, attr_trace.output())?;
        let mapper_trace = model.mapper.traced(&z);
        let out = mapper_trace.output();
        let w = StyleLatent(std::array::from_fn(|i| out[i]));
        Ok(Forward { attr_trace, mapper_trace, w })
    }

    /// Backpropagate per-sample `dL/dw` into a `[E_attr, M]` gradient.
    fn backprop_generator_side(&self, model: &Model, fwd: &Forward, dw: &[f64; W_DIM], grad: &mut [f64]) {
        let n_attr = model.attr.net.n_params();
        let (g_attr, g_map) = grad.split_at_mut(n_attr);
        let dz = model.mapper.net.backward(&fwd.mapper_trace, dw, Some(g_map), true).expect("input gradient");
        debug_assert_eq!(dz.len(), EMBED_DIM + ATTR_DIM);
        model.attr.net.backward(&fwd.attr_trace, &dz[EMBED_DIM..], Some(g_attr), false);
    }

    /// The batch for the state's current iteration.
    pub fn batch_for(&self, iteration: u64) -> (Batch, Mode) {
        let mode = next_mode(iteration, self.config.schedule_period);
        (sample_batch(self.config.seed, iteration, mode, self.config.batch, self.dataset.len()), mode)
    }

    /// One iteration: (1) discriminator step, (2) non-adversarial step on
    /// `E_attr` and `M`, (3) adversarial step on `E_attr` and `M` with its
    /// own optimizer and learning rate. Steps (1) and (3) are skipped when
    /// the discriminator is disabled. On a non-finite loss nothing is
    /// updated and a snapshot of the iteration's losses is returned.
    pub fn train_step(&mut self, state: &mut TrainState, batch: &Batch, mode: Mode) -> Result<StepReport> {
        if batch.pairs.is_empty() || batch.real.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let cfg = self.config.clone();
        let use_d = !cfg.disable_w_discriminator;
        let same = mode == Mode::Reconstruct;
        if same && batch.pairs.iter().any(|(a, b)| a != b) {
            return Err(Error::invalid("reconstruct batches must pair each image with itself"));
        }
        let bsz = batch.pairs.len() as f64;
        let mut report = StepReport {
            iteration: state.iteration,
            mode,
            loss_d: 0.0,
            r1: 0.0,
            loss_id: 0.0,
            loss_lnd: 0.0,
            loss_rec: 0.0,
            loss_nonadv: 0.0,
            loss_adv_g: 0.0,
        };
        let snapshot = |r: &StepReport, stage: &str| Error::NonFiniteLoss {
            iteration: r.iteration,
            snapshot: format!(
                "{stage}: loss_d={} r1={} id={} lnd={} rec={} nonadv={} adv_g={}",
                r.loss_d, r.r1, r.loss_id, r.loss_lnd, r.loss_rec, r.loss_nonadv, r.loss_adv_g
            ),
        };

        // inputs and frozen-network targets
        let mut attr_imgs = Vec::with_capacity(batch.pairs.len());
        let mut targets = Vec::with_capacity(batch.pairs.len());
        for &(id_idx, attr_idx) in &batch.pairs {
            let attr_img = self.dataset.image(self.generator, attr_idx)?;
            let identity = if id_idx == attr_idx {
                self.identity_target(id_idx, Some(&attr_img))?
            } else {
                self.identity_target(id_idx, None)?
            };
            let keypoints = self.keypoint_target(attr_idx, &attr_img);
            attr_imgs.push(attr_img);
            targets.push(NonAdvTargets { identity, keypoints });
        }
        let real: Vec<StyleLatent> = batch.real.iter().map(|&i| self.dataset.real_w[i]).collect();

        // (1) discriminator step on detached fakes
        if use_d {
            let fake = (0..batch.pairs.len())
                .map(|k| Ok(self.forward(&state.model, &targets[k].identity, &attr_imgs[k])?.w))
                .collect::<Result<Vec<_>>>()?;
            let d = loss_adv_d_with_grad(&state.model.discriminator, &real, &fake, cfg.gamma)?;
            report.loss_d = d.value;
            report.r1 = d.r1;
            if !d.value.is_finite() || d.grad.iter().any(|g| !g.is_finite()) {
                return Err(snapshot(&report, "discriminator step"));
            }
            state.opt_d.step(&mut state.model.discriminator.net.params, &d.grad);
        }

        // (2) non-adversarial generator-side step
        let weights = cfg.loss_weights();
        let mut grad = vec![0.0; state.opt_nonadv.m.len()];
        let mut forwards = Vec::with_capacity(batch.pairs.len());
        let mut dws = Vec::with_capacity(batch.pairs.len());
        for k in 0..batch.pairs.len() {
            let fwd = self.forward(&state.model, &targets[k].identity, &attr_imgs[k])?;
            let (out, jac) = self.generator.generate_differentiable(&fwd.w)?;
            let terms = nonadv_with_grad(
                &self.nets.identity,
                &self.nets.keypoints,
                &targets[k],
                &attr_imgs[k],
                &out,
                same,
                &weights,
            )?;
            report.loss_id += terms.id / bsz;
            report.loss_lnd += terms.lnd / bsz;
            report.loss_rec += terms.rec / bsz;
            report.loss_nonadv += terms.total / bsz;
            let dw = jac.pullback(&terms.grad).map(|g| g / bsz);
            dws.push(dw);
            forwards.push(fwd);
        }
        if use_d && cfg.use_lambda4_on_adv_g {
            let ws: Vec<StyleLatent> = forwards.iter().map(|f| f.w).collect();
            let (_, adv) = loss_adv_g_with_grad(&state.model.discriminator, &ws)?;
            for (dw, a) in dws.iter_mut().zip(&adv) {
                for i in 0..W_DIM {
                    dw[i] += cfg.lambda4 * a[i];
                }
            }
        }
        for (fwd, dw) in forwards.iter().zip(&dws) {
            self.backprop_generator_side(&state.model, fwd, dw, &mut grad);
        }
        if !report.loss_nonadv.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(snapshot(&report, "non-adversarial step"));
        }
        let mut params = state.generator_params();
        state.opt_nonadv.step(&mut params, &grad);
        state.set_generator_params(&params);

        // (3) adversarial generator-side step, recomputed at the new parameters
        if use_d {
            let forwards = (0..batch.pairs.len())
                .map(|k| self.forward(&state.model, &targets[k].identity, &attr_imgs[k]))
                .collect::<Result<Vec<_>>>()?;
            let ws: Vec<StyleLatent> = forwards.iter().map(|f| f.w).collect();
            let (value, adv) = loss_adv_g_with_grad(&state.model.discriminator, &ws)?;
            report.loss_adv_g = value;
            let mut grad = vec![0.0; state.opt_adv_g.m.len()];
            for (fwd, dw) in forwards.iter().zip(&adv) {
                self.backprop_generator_side(&state.model, fwd, dw, &mut grad);
            }
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(snapshot(&report, "adversarial generator step"));
            }
            let mut params = state.generator_params();
            state.opt_adv_g.step(&mut params, &grad);
            state.set_generator_params(&params);
        }

        state.iteration += 1;
        Ok(report)
    }

    /// Run from the state's iteration up to `until` (exclusive), reporting
    /// each step to `on_step`.
    pub fn run(
        &mut self,
        state: &mut TrainState,
        until: u64,
        mut on_step: impl FnMut(&StepReport, &TrainState) -> Result<()>,
    ) -> Result<()> {
        while state.iteration < until {
            let (batch, mode) = self.batch_for(state.iteration);
            let report = self.train_step(state, &batch, mode)?;
            on_step(&report, state)?;
        }
        Ok(())
    }
}

/// Progress notifications from [`train`].
#[derive(Clone, Debug)]
pub enum TrainEvent<'s> {
    /// Mean losses over the last `eval_every` iterations.
    Snapshot { iteration: u64, window: &'s [StepReport] },
    /// A checkpoint was written.
    Saved { iteration: u64, path: &'s Path },
}

/// Train to `config.total_iters`, resuming from `resume` when given.
/// Writes `checkpoint-<iter>.lbck` every `checkpoint_every` iterations and
/// `final.lbck` at the end into `config.out_dir`.
pub fn train(
    config: &TrainingConfig,
    generator: &dyn Generator,
    nets: &TrainingNets,
    resume: Option<Checkpoint>,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<Checkpoint> {
    config.validate()?;
    let mut state = match resume {
        Some(ck) => {
            ck.check_compatible(config, generator, nets)?;
            ck.state
        }
        None => TrainState::new(config)?,
    };
    let mut trainer = Trainer::new(config.clone(), generator, nets)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let mut window: Vec<StepReport> = Vec::new();
    trainer.run(&mut state, config.total_iters, |report, st| {
        window.push(report.clone());
        let done = st.iteration;
        if done % config.eval_every == 0 {
            on_event(TrainEvent::Snapshot { iteration: done, window: &window });
            window.clear();
        }
        if done % config.checkpoint_every == 0 && done < config.total_iters {
            let path = config.out_dir.join(format!("checkpoint-{done:06}.lbck"));
            Checkpoint::capture(config, generator, nets, st).save(&path)?;
            on_event(TrainEvent::Saved { iteration: done, path: &path });
        }
        Ok(())
    })?;
    let ck = Checkpoint::capture(config, generator, nets, &state);
    let path = config.out_dir.join("final.lbck");
    ck.save(&path)?;
    on_event(TrainEvent::Saved { iteration: state.iteration, path: &path });
    Ok(ck)
}

/// Load a frozen network from `path`, or pre-train it on a fresh corpus and
/// save it there when the file does not exist yet.
pub fn load_or_pretrain(kind: PerceptionKind, path: &Path, config: &TrainingConfig) -> Result<FrozenNet> {
    if path.exists() {
        let net = FrozenNet::load(path)?;
        if net.kind != kind {
            return Err(Error::Format(format!("{} holds a {} network, expected {}", path.display(), net.kind.name(), kind.name())));
        }
        return Ok(net);
    }
    let net = pretrain_kind(kind, config)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    net.save(path)?;
    Ok(net)
}

/// Pre-train one frozen network with the config's corpus settings.
pub fn pretrain_kind(kind: PerceptionKind, config: &TrainingConfig) -> Result<FrozenNet> {
    let corpus = Corpus::render(derive_seed(config.seed, &format!("corpus-{}", kind.name())), config.pretrain_corpus)?;
    pretrain(kind, &corpus, &config.pretrain_config(&format!("init-{}", kind.name())))
}

pub fn load_training_nets(config: &TrainingConfig) -> Result<TrainingNets> {
    Ok(TrainingNets {
        identity: IdentityEmbedder::new(load_or_pretrain(PerceptionKind::Identity, &config.identity_net, config)?),
        keypoints: KeypointRegressor::new(load_or_pretrain(PerceptionKind::Keypoints, &config.keypoint_net, config)?),
    })
}

pub fn load_eval_nets(config: &TrainingConfig) -> Result<EvalNets> {
    Ok(EvalNets {
        embedder: EvalEmbedder::new(load_or_pretrain(PerceptionKind::EvalEmbedder, &config.eval_net, config)?),
        pose: PoseRegressor::new(load_or_pretrain(PerceptionKind::Pose, &config.pose_net, config)?),
        keypoints: KeypointRegressor::new(load_or_pretrain(PerceptionKind::Keypoints, &config.keypoint_net, config)?),
    })
}

#[cfg(test)]
mod tests;
