use super::*;
use crate::generator::OracleGenerator;
use crate::perception::FrozenNet;
use crate::toyfaces::{FactorVector, RenderJacobian, RenderSettings};

fn nets() -> TrainingNets {
    TrainingNets {
        identity: IdentityEmbedder::new(FrozenNet::untrained(PerceptionKind::Identity, 11).unwrap()),
        keypoints: KeypointRegressor::new(FrozenNet::untrained(PerceptionKind::Keypoints, 12).unwrap()),
    }
}

fn small_config() -> TrainingConfig {
    TrainingConfig { n_dataset: 40, batch: 3, ..Default::default() }
}

#[test]
fn schedule_marks_every_third_iteration() {
    use Mode::*;
    let modes: Vec<Mode> = (0..6).map(|i| next_mode(i, 3)).collect();
    assert_eq!(modes, [Reconstruct, Reconstruct, Disentangle, Reconstruct, Reconstruct, Disentangle]);
    assert!((0..10).all(|i| next_mode(i, 1) == Disentangle));
    assert_eq!(next_mode(302, 3), Disentangle);
}

#[test]
fn dataset_is_deterministic_and_regenerates_its_images() {
    let g = OracleGenerator::new(7);
    let a = build_dataset(&g, 30, 5).unwrap();
    let b = build_dataset(&g, 30, 5).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), build_dataset(&g, 30, 6).unwrap().to_bytes());
    for i in [0, 7, 29] {
        let direct = g.generate(&a.real_w[i]).unwrap();
        assert_eq!(a.image(&g, i).unwrap(), direct);
    }
    assert!(build_dataset(&g, 0, 5).is_err());
    assert!(a.image(&g, 30).is_err());
}

#[test]
fn batches_follow_the_mode() {
    let r = sample_batch(1, 4, Mode::Reconstruct, 6, 100);
    assert!(r.pairs.iter().all(|(a, b)| a == b));
    assert_eq!(r.real.len(), 6);
    let d = sample_batch(1, 5, Mode::Disentangle, 6, 100);
    assert!(d.pairs.iter().any(|(a, b)| a != b));
    assert_eq!(d, sample_batch(1, 5, Mode::Disentangle, 6, 100));
}

fn hashes(state: &TrainState) -> [String; 3] {
    let m = &state.model;
    [m.attr.net.param_hash(), m.mapper.net.param_hash(), m.discriminator.net.param_hash()]
}

#[test]
fn frozen_networks_and_generator_are_untouched() {
    let g = OracleGenerator::new(7);
    let nets = nets();
    let before = (nets.identity.0.param_hash(), nets.keypoints.0.param_hash(), g.param_hash());
    let cfg = small_config();
    let mut trainer = Trainer::new(cfg.clone(), &g, &nets).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    for _ in 0..3 {
        let (batch, mode) = trainer.batch_for(state.iteration);
        trainer.train_step(&mut state, &batch, mode).unwrap();
    }
    assert_eq!(state.iteration, 3);
    assert_eq!(before, (nets.identity.0.param_hash(), nets.keypoints.0.param_hash(), g.param_hash()));
}

#[test]
fn each_step_moves_only_its_own_parameters() {
    let g = OracleGenerator::new(7);
    let nets = nets();
    let cfg = small_config();
    let mut trainer = Trainer::new(cfg.clone(), &g, &nets).unwrap();
    let (batch, mode) = trainer.batch_for(2);

    // discriminator step alone
    let mut state = TrainState::new(&cfg).unwrap();
    state.opt_nonadv.lr = 0.0;
    state.opt_adv_g.lr = 0.0;
    let h0 = hashes(&state);
    trainer.train_step(&mut state, &batch, mode).unwrap();
    let h1 = hashes(&state);
    assert_eq!(h0[..2], h1[..2]);
    assert_ne!(h0[2], h1[2]);

    // non-adversarial step alone
    let mut state = TrainState::new(&cfg).unwrap();
    state.opt_d.lr = 0.0;
    state.opt_adv_g.lr = 0.0;
    trainer.train_step(&mut state, &batch, mode).unwrap();
    let h2 = hashes(&state);
    assert_ne!(h0[0], h2[0]);
    assert_ne!(h0[1], h2[1]);
    assert_eq!(h0[2], h2[2]);

    // adversarial generator step alone
    let mut state = TrainState::new(&cfg).unwrap();
    state.opt_d.lr = 0.0;
    state.opt_nonadv.lr = 0.0;
    trainer.train_step(&mut state, &batch, mode).unwrap();
    let h3 = hashes(&state);
    assert_ne!(h0[0], h3[0]);
    assert_ne!(h0[1], h3[1]);
    assert_eq!(h0[2], h3[2]);
}

#[test]
fn disabling_the_discriminator_freezes_it() {
    let g = OracleGenerator::new(7);
    let nets = nets();
    let cfg = TrainingConfig { disable_w_discriminator: true, ..small_config() };
    let mut trainer = Trainer::new(cfg.clone(), &g, &nets).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let d0 = state.model.discriminator.net.param_hash();
    let (batch, mode) = trainer.batch_for(0);
    let report = trainer.train_step(&mut state, &batch, mode).unwrap();
    assert_eq!(d0, state.model.discriminator.net.param_hash());
    assert_eq!((report.loss_d, report.loss_adv_g), (0.0, 0.0));
    assert_eq!(state.opt_adv_g.t, 0);
}

/// Delegates to the oracle but panics on `unmix`.
struct PoisonedOracle(OracleGenerator);

impl Generator for PoisonedOracle {
    fn settings(&self) -> RenderSettings {
        self.0.settings()
    }
    fn sample_w(&self, seed: u64, n: usize) -> Result<Vec<StyleLatent>> {
        self.0.sample_w(seed, n)
    }
    fn generate(&self, w: &StyleLatent) -> Result<ToyImage> {
        self.0.generate(w)
    }
    fn generate_differentiable(&self, w: &StyleLatent) -> Result<(ToyImage, RenderJacobian<W_DIM>)> {
        self.0.generate_differentiable(w)
    }
    fn unmix(&self, _w: &StyleLatent) -> FactorVector {
        panic!("unmix reached from the training path")
    }
    fn mixing_seed(&self) -> u64 {
        self.0.mixing_seed()
    }
    fn param_hash(&self) -> String {
        self.0.param_hash()
    }
}

#[test]
fn training_never_calls_unmix() {
    let g = PoisonedOracle(OracleGenerator::new(7));
    let nets = nets();
    let cfg = TrainingConfig { use_lambda4_on_adv_g: true, ..small_config() };
    let mut trainer = Trainer::new(cfg.clone(), &g, &nets).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    trainer.run(&mut state, 3, |_, _| Ok(())).unwrap();
    assert_eq!(state.iteration, 3);
}

#[test]
fn non_finite_loss_aborts_without_updating() {
    let g = OracleGenerator::new(7);
    let nets = nets();
    let cfg = small_config();
    let mut trainer = Trainer::new(cfg.clone(), &g, &nets).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    state.model.discriminator.net.params[0] = f64::NAN;
    let before = state.clone();
    let (batch, mode) = trainer.batch_for(0);
    match trainer.train_step(&mut state, &batch, mode) {
        Err(Error::NonFiniteLoss { iteration: 0, snapshot }) => assert!(snapshot.contains("discriminator")),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
    assert_eq!(state.iteration, before.iteration);
    assert_eq!(state.model.mapper, before.model.mapper);
}

#[test]
fn checkpoint_round_trip_and_bit_exact_resume() {
    let g = OracleGenerator::new(7);
    let nets = nets();
    let cfg = small_config();
    let mut trainer = Trainer::new(cfg.clone(), &g, &nets).unwrap();

    let mut straight = TrainState::new(&cfg).unwrap();
    trainer.run(&mut straight, 4, |_, _| Ok(())).unwrap();
    let ck = Checkpoint::capture(&cfg, &g, &nets, &straight);
    let bytes = ck.to_bytes();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.to_bytes(), bytes);
    loaded.check_compatible(&cfg, &g, &nets).unwrap();

    trainer.run(&mut straight, 14, |_, _| Ok(())).unwrap();
    // a fresh trainer has empty caches; results must not depend on them
    let mut fresh = Trainer::new(cfg.clone(), &g, &nets).unwrap();
    let mut resumed = loaded.state;
    fresh.run(&mut resumed, 14, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, straight);

    let other = TrainingConfig { lambda3: 0.5, ..cfg.clone() };
    assert!(ck.check_compatible(&other, &g, &nets).is_err());
    assert!(ck.check_compatible(&cfg, &OracleGenerator::new(8), &nets).is_err());
    let longer = TrainingConfig { total_iters: 99, ..cfg };
    assert!(ck.check_compatible(&longer, &g, &nets).is_ok());

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(Checkpoint::from_bytes(&corrupt).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
