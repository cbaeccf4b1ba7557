use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use latent_bridge::evaluation::{
    evaluate, interpolate_w, interpolate_z, pca_w_analysis, pose_sweep, predicted_w, sequence_coherence, transfer,
    FixedBlock,
};
use latent_bridge::generator::{Generator, OracleGenerator};
use latent_bridge::imageio::write_ppm;
use latent_bridge::perception::{PerceptionKind, TrainingNets};
use latent_bridge::toyfaces::{sample_factors, ToyImage};
use latent_bridge::training::{
    derive_seed, load_eval_nets, load_training_nets, pretrain_kind, train, Checkpoint, TrainEvent, TrainingConfig,
};

use crate::manifest::RunManifest;
use crate::{Block, Command, Figure, FigureCommon, NetKind};

/// A problem with the invocation itself rather than with the computation.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Read a config file and apply the `LB_SEED` override.
fn load_config(path: &Path) -> Result<TrainingConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = TrainingConfig::from_text(&text)?;
    if let Ok(v) = std::env::var("LB_SEED") {
        config.seed = v.trim().parse().map_err(|_| Usage(format!("LB_SEED must be an unsigned integer, got {v:?}")))?;
    }
    Ok(config)
}

/// One command in flight: the effective config with paths resolved against
/// the config file's directory, and the manifest being assembled.
struct Session {
    config: TrainingConfig,
    manifest: RunManifest,
    start: Instant,
}

impl Session {
    fn new(command: String, config_path: &Path, mut config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let manifest = RunManifest::new(command, config_path, config.hash(), config.seed);
        let base = config_path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.identity_net,
            &mut config.keypoint_net,
            &mut config.eval_net,
            &mut config.pose_net,
            &mut config.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(Session { config, manifest, start: Instant::now() })
    }

    fn generator(&self) -> OracleGenerator {
        OracleGenerator::new(self.config.mixing_seed)
    }

    fn training_nets(&mut self) -> Result<TrainingNets> {
        let nets = load_training_nets(&self.config)?;
        self.manifest.artifact("identity_net", &self.config.identity_net)?;
        self.manifest.artifact("keypoint_net", &self.config.keypoint_net)?;
        Ok(nets)
    }

    fn checkpoint(
        &mut self,
        label: &str,
        path: &Path,
        generator: &dyn Generator,
        nets: &TrainingNets,
    ) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        ck.check_inputs(generator, nets)?;
        self.manifest.artifact(label, path)?;
        Ok(ck)
    }

    fn finish(mut self, dir: &Path, name: &str) -> Result<()> {
        self.manifest.wall_time = self.start.elapsed();
        self.manifest.write(&dir.join(format!("{name}.manifest")))
    }
}

fn perception_kind(kind: NetKind) -> PerceptionKind {
    match kind {
        NetKind::Identity => PerceptionKind::Identity,
        NetKind::Keypoints => PerceptionKind::Keypoints,
        NetKind::EvalEmbedder => PerceptionKind::EvalEmbedder,
        NetKind::Pose => PerceptionKind::Pose,
    }
}

fn net_path(config: &TrainingConfig, kind: PerceptionKind) -> &Path {
    match kind {
        PerceptionKind::Identity => &config.identity_net,
        PerceptionKind::Keypoints => &config.keypoint_net,
        PerceptionKind::EvalEmbedder => &config.eval_net,
        PerceptionKind::Pose => &config.pose_net,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { kind, common } => cmd_pretrain(perception_kind(kind), &common.config),
        Command::Train { common, disable_w_discriminator, disable_landmark_loss, resume, iters } => {
            cmd_train(&common.config, disable_w_discriminator, disable_landmark_loss, resume, iters)
        }
        Command::Evaluate { common, checkpoint, baseline, pairs, seed, out } => {
            cmd_evaluate(&common.config, checkpoint, baseline, pairs, seed, out)
        }
        Command::Figures { kind } => cmd_figures(kind),
    }
}

fn cmd_pretrain(kind: PerceptionKind, config_path: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let mut session = Session::new(format!("pretrain {}", kind.name()), config_path, config)?;
    let net = pretrain_kind(kind, &session.config)?;
    let path = net_path(&session.config, kind).to_path_buf();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    net.save(&path)?;
    println!("{}: held-out error {:.4}, saved to {}", kind.name(), net.achieved, path.display());
    session.manifest.artifact(kind.name(), &path)?;
    let out_dir = session.config.out_dir.clone();
    session.finish(&out_dir, &format!("pretrain-{}", kind.name()))
}

fn cmd_train(
    config_path: &Path,
    disable_w_discriminator: bool,
    disable_landmark_loss: bool,
    resume: Option<PathBuf>,
    iters: Option<u64>,
) -> Result<()> {
    let mut config = load_config(config_path)?;
    let mut command = String::from("train");
    if disable_w_discriminator {
        config.disable_w_discriminator = true;
        command.push_str(" --disable-w-discriminator");
    }
    if disable_landmark_loss {
        config.disable_landmark_loss = true;
        command.push_str(" --disable-landmark-loss");
    }
    if let Some(n) = iters {
        config.total_iters = n;
        let _ = write!(command, " --iters {n}");
    }
    if let Some(p) = &resume {
        let _ = write!(command, " --resume {}", p.display());
    }
    let mut session = Session::new(command, config_path, config)?;
    let generator = session.generator();
    let nets = session.training_nets()?;
    let resume = match resume {
        Some(p) => Some(session.checkpoint("resume", &p, &generator, &nets)?),
        None => None,
    };
    let config = session.config.clone();
    let ck = train(&config, &generator, &nets, resume, |event| match event {
        TrainEvent::Snapshot { iteration, window } => {
            let n = window.len().max(1) as f64;
            let mean = |f: fn(&latent_bridge::training::StepReport) -> f64| window.iter().map(f).sum::<f64>() / n;
            eprintln!(
                "iter {iteration:>7}  nonadv {:.4}  id {:.4}  lnd {:.4}  rec {:.4}  d {:.4}  adv_g {:.4}",
                mean(|r| r.loss_nonadv),
                mean(|r| r.loss_id),
                mean(|r| r.loss_lnd),
                mean(|r| r.loss_rec),
                mean(|r| r.loss_d),
                mean(|r| r.loss_adv_g),
            );
        }
        TrainEvent::Saved { iteration, path } => eprintln!("iter {iteration:>7}  saved {}", path.display()),
    })?;
    let final_path = config.out_dir.join("final.lbck");
    session.manifest.artifact("checkpoint", &final_path)?;
    println!("trained to iteration {}, checkpoint {}", ck.state.iteration, final_path.display());
    session.finish(&config.out_dir, "train")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_evaluate(
    config_path: &Path,
    checkpoint: Option<PathBuf>,
    baseline: Option<PathBuf>,
    pairs: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(config_path)?;
    let mut session = Session::new("evaluate".into(), config_path, config)?;
    let config = session.config.clone();
    let seed = seed.unwrap_or(config.seed);
    let pairs = pairs.unwrap_or(config.eval_pairs);
    let out = out.unwrap_or_else(|| config.out_dir.clone());
    session.manifest.command = format!("evaluate --pairs {pairs} --seed {seed}");

    let generator = session.generator();
    let nets = session.training_nets()?;
    let eval_nets = load_eval_nets(&config)?;
    session.manifest.artifact("eval_net", &config.eval_net)?;
    session.manifest.artifact("pose_net", &config.pose_net)?;
    let ck_path = checkpoint.unwrap_or_else(|| config.out_dir.join("final.lbck"));
    let ck = session.checkpoint("checkpoint", &ck_path, &generator, &nets)?;

    let report = evaluate(&ck.state.model, &nets.identity, &generator, &eval_nets, pairs, seed, &ck.config.hash())?;
    let table = report.to_table();
    print!("{table}");
    let report_path = out.join("report.txt");
    write_text(&report_path, &table)?;
    session.manifest.artifact("report", &report_path)?;

    if let Some(baseline_path) = baseline {
        let base = session.checkpoint("baseline", &baseline_path, &generator, &nets)?;
        let written = write_pca(&generator, &nets, &ck, &base, config.pca_samples, seed, &out)?;
        for (label, path) in written {
            session.manifest.artifact(label, &path)?;
        }
    }
    session.finish(&out, "evaluate")
}

fn write_pca(
    generator: &dyn Generator,
    nets: &TrainingNets,
    ours: &Checkpoint,
    baseline: &Checkpoint,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<(&'static str, PathBuf)>> {
    let generator_w = generator.sample_w(derive_seed(seed, "pca-generator"), samples)?;
    let ours_w = predicted_w(&ours.state.model, &nets.identity, generator, samples, seed)?;
    let baseline_w = predicted_w(&baseline.state.model, &nets.identity, generator, samples, seed)?;
    let summary = pca_w_analysis(&generator_w, &ours_w, &baseline_w)?;
    let points = out.join("pca-points.csv");
    let line = out.join("pca-summary.txt");
    write_text(&points, &summary.to_points_csv())?;
    write_text(&line, &format!("{}\n", summary.summary_line()))?;
    println!("{}", summary.summary_line());
    Ok(vec![("pca_points", points), ("pca_summary", line)])
}

fn held_out_images(generator: &dyn Generator, seed: u64, stream: &str, n: usize) -> Result<Vec<ToyImage>> {
    generator
        .sample_w(derive_seed(seed, stream), n)?
        .iter()
        .map(|w| Ok(generator.generate(w)?))
        .collect()
}

fn write_frames(dir: &Path, frames: &[ToyImage], manifest: &mut RunManifest) -> Result<()> {
    for (k, frame) in frames.iter().enumerate() {
        let path = dir.join(format!("frame-{k:03}.ppm"));
        write_ppm(&path, frame)?;
        manifest.artifact(format!("frame-{k:03}"), &path)?;
    }
    Ok(())
}

fn cmd_figures(kind: Figure) -> Result<()> {
    let (name, fig) = match &kind {
        Figure::Grid { fig, .. } => ("grid", fig),
        Figure::InterpW { fig, .. } => ("interp-w", fig),
        Figure::InterpZ { fig, .. } => ("interp-z", fig),
        Figure::Pca { fig, .. } => ("pca", fig),
        Figure::Sequence { fig, .. } => ("sequence", fig),
    };
    let FigureCommon { common, checkpoint, out, seed } = fig;
    let config = load_config(&common.config)?;
    let mut session = Session::new(format!("figures {name}"), &common.config, config)?;
    let config = session.config.clone();
    let seed = seed.unwrap_or(config.seed);
    let out = out.clone().unwrap_or_else(|| config.out_dir.join("figures").join(name));
    fs::create_dir_all(&out)?;
    let generator = session.generator();
    let nets = session.training_nets()?;
    let ck_path = checkpoint.clone().unwrap_or_else(|| config.out_dir.join("final.lbck"));
    let ck = session.checkpoint("checkpoint", &ck_path, &generator, &nets)?;
    let model = &ck.state.model;
    let e_id = &nets.identity;

    match kind {
        Figure::Grid { ids, attrs, .. } => {
            session.manifest.command = format!("figures grid --ids {ids} --attrs {attrs} --seed {seed}");
            let id_imgs = held_out_images(&generator, seed, "figure-grid-identity", ids)?;
            let attr_imgs = held_out_images(&generator, seed, "figure-grid-attribute", attrs)?;
            for (i, img) in id_imgs.iter().enumerate() {
                let path = out.join(format!("id-{i}.ppm"));
                write_ppm(&path, img)?;
                session.manifest.artifact(format!("id-{i}"), &path)?;
            }
            for (j, img) in attr_imgs.iter().enumerate() {
                let path = out.join(format!("attr-{j}.ppm"));
                write_ppm(&path, img)?;
                session.manifest.artifact(format!("attr-{j}"), &path)?;
            }
            for (i, id_img) in id_imgs.iter().enumerate() {
                for (j, attr_img) in attr_imgs.iter().enumerate() {
                    let path = out.join(format!("out-{i}-{j}.ppm"));
                    write_ppm(&path, &transfer(model, e_id, &generator, id_img, attr_img)?)?;
                    session.manifest.artifact(format!("out-{i}-{j}"), &path)?;
                }
            }
        }
        Figure::InterpW { steps, .. } => {
            session.manifest.command = format!("figures interp-w --steps {steps} --seed {seed}");
            let imgs = held_out_images(&generator, seed, "figure-interp-w", 4)?;
            let frames = interpolate_w(model, e_id, &generator, (&imgs[0], &imgs[1]), (&imgs[2], &imgs[3]), steps)?;
            write_frames(&out, &frames, &mut session.manifest)?;
        }
        Figure::InterpZ { block, steps, .. } => {
            let (fixed, label) = match block {
                Block::Identity => (FixedBlock::Identity, "identity"),
                Block::Attribute => (FixedBlock::Attribute, "attribute"),
            };
            session.manifest.command = format!("figures interp-z --block {label} --steps {steps} --seed {seed}");
            let imgs = held_out_images(&generator, seed, "figure-interp-z", 3)?;
            let frames = interpolate_z(model, e_id, &generator, fixed, &imgs[0], &imgs[1], &imgs[2], steps)?;
            write_frames(&out, &frames, &mut session.manifest)?;
        }
        Figure::Pca { baseline, samples, .. } => {
            let samples = samples.unwrap_or(config.pca_samples);
            session.manifest.command = format!("figures pca --samples {samples} --seed {seed}");
            let base = session.checkpoint("baseline", &baseline, &generator, &nets)?;
            for (label, path) in write_pca(&generator, &nets, &ck, &base, samples, seed, &out)? {
                session.manifest.artifact(label, &path)?;
            }
        }
        Figure::Sequence { frames, .. } => {
            session.manifest.command = format!("figures sequence --frames {frames} --seed {seed}");
            let eval_nets = load_eval_nets(&config)?;
            session.manifest.artifact("eval_net", &config.eval_net)?;
            let identity_img = held_out_images(&generator, seed, "figure-sequence-identity", 1)?.remove(0);
            let base = sample_factors(derive_seed(seed, "figure-sequence-attribute"), 1)?[0];
            let trajectory = pose_sweep(&base, frames);
            let c = sequence_coherence(model, e_id, &generator, &eval_nets, &identity_img, &trajectory)?;
            write_ppm(&out.join("identity.ppm"), &identity_img)?;
            write_frames(&out, &c.frames, &mut session.manifest)?;
            let mut csv = String::from("frame,identity,expression\n");
            for (k, (id, ex)) in c.identity.iter().zip(&c.expression).enumerate() {
                let _ = writeln!(csv, "{k},{id:?},{ex:?}");
            }
            let csv_path = out.join("coherence.csv");
            write_text(&csv_path, &csv)?;
            session.manifest.artifact("coherence", &csv_path)?;
            println!("identity similarity std over {} frames: {:.4}", c.frames.len(), c.identity_std);
        }
    }
    session.finish(&out, &format!("figures-{name}"))
}
