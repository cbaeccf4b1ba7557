//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::disentangle::LossWeights;
use crate::error::{Error, Result};
use crate::perception::PretrainConfig;

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    /// Master seed; every other stream is derived from it.
    pub seed: u64,
    /// Seed of the frozen generator's mixing matrix.
    pub mixing_seed: u64,
    pub n_dataset: usize,
    pub batch: usize,
    pub lr_nonadv: f64,
    pub lr_g_adv: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub schedule_period: u64,
    pub total_iters: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub use_lambda4_on_adv_g: bool,
    pub disable_w_discriminator: bool,
    pub disable_landmark_loss: bool,
    pub pretrain_corpus: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub eval_pairs: usize,
    pub pca_samples: usize,
    pub identity_net: PathBuf,
    pub keypoint_net: PathBuf,
    pub eval_net: PathBuf,
    pub pose_net: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainingConfig {
    /// The published hyperparameters with every learning rate raised
    /// tenfold, a reconstruction weight of 10 and an R1 weight of 0.1.
    fn default() -> Self {
        TrainingConfig { lr_nonadv: 5e-4, lr_g_adv: 5e-5, lr_d: 2e-4, lambda3: 10.0, gamma: 0.1, ..Self::published() }
    }
}

impl TrainingConfig {
    /// The published hyperparameters, with dataset size and iteration count
    /// at desk scale.
    pub fn published() -> Self {
        TrainingConfig {
            seed: 1,
            mixing_seed: 7,
            n_dataset: 20_000,
            batch: 6,
            lr_nonadv: 5e-5,
            lr_g_adv: 5e-6,
            lr_d: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            gamma: 10.0,
            alpha: 0.84,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.001,
            lambda4: 0.02,
            schedule_period: 3,
            total_iters: 15_000,
            eval_every: 1_000,
            checkpoint_every: 5_000,
            use_lambda4_on_adv_g: false,
            disable_w_discriminator: false,
            disable_landmark_loss: false,
            pretrain_corpus: 6_000,
            pretrain_epochs: 20,
            pretrain_batch: 16,
            pretrain_lr: 2e-3,
            eval_pairs: 1_000,
            pca_samples: 10_000,
            identity_net: PathBuf::from("nets/identity.lbn"),
            keypoint_net: PathBuf::from("nets/keypoints.lbn"),
            eval_net: PathBuf::from("nets/eval-embedder.lbn"),
            pose_net: PathBuf::from("nets/pose.lbn"),
            out_dir: PathBuf::from("run"),
        }
    }
}

macro_rules! fields {
    ($m:ident) => {
        $m!(seed, u64);
        $m!(mixing_seed, u64);
        $m!(n_dataset, usize);
        $m!(batch, usize);
        $m!(lr_nonadv, f64);
        $m!(lr_g_adv, f64);
        $m!(lr_d, f64);
        $m!(beta1, f64);
        $m!(beta2, f64);
        $m!(gamma, f64);
        $m!(alpha, f64);
        $m!(lambda1, f64);
        $m!(lambda2, f64);
        $m!(lambda3, f64);
        $m!(lambda4, f64);
        $m!(schedule_period, u64);
        $m!(total_iters, u64);
        $m!(eval_every, u64);
        $m!(checkpoint_every, u64);
        $m!(use_lambda4_on_adv_g, bool);
        $m!(disable_w_discriminator, bool);
        $m!(disable_landmark_loss, bool);
        $m!(pretrain_corpus, usize);
        $m!(pretrain_epochs, usize);
        $m!(pretrain_batch, usize);
        $m!(pretrain_lr, f64);
        $m!(eval_pairs, usize);
        $m!(pca_samples, usize);
        $m!(identity_net, PathBuf);
        $m!(keypoint_net, PathBuf);
        $m!(eval_net, PathBuf);
        $m!(pose_net, PathBuf);
        $m!(out_dir, PathBuf);
    };
}

trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
}

impl ConfigValue for u64 {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
}

impl ConfigValue for usize {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
}

impl ConfigValue for f64 {
    fn render(&self) -> String {
        // Debug formatting is the shortest string that round-trips exactly
        format!("{self:?}")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
}

impl ConfigValue for bool {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected true or false, got {s:?}"))
    }
}

impl ConfigValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
}

impl TrainingConfig {
    /// All keys in file order.
    pub fn keys() -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! key {
            ($name:ident, $ty:ty) => {
                out.push(stringify!($name));
            };
        }
        fields!(key);
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! line {
            ($name:ident, $ty:ty) => {
                writeln!(s, "{} = {}", stringify!($name), ConfigValue::render(&self.$name)).unwrap();
            };
        }
        fields!(line);
        s
    }

    /// Parse a config file. Missing keys keep their defaults; unknown or
    /// repeated keys, malformed lines and invalid values are errors. Blank
    /// lines and lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            let mut matched = false;
            macro_rules! assign {
                ($name:ident, $ty:ty) => {
                    if key == stringify!($name) {
                        cfg.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("line {}: {key}: {e}", lineno + 1)))?;
                        matched = true;
                    }
                };
            }
            fields!(assign);
            if !matched {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [("lr_nonadv", self.lr_nonadv), ("lr_g_adv", self.lr_g_adv), ("lr_d", self.lr_d)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return bad(format!("pretrain_lr must be > 0, got {}", self.pretrain_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.schedule_period < 1 {
            return bad("schedule_period must be >= 1".into());
        }
        if self.n_dataset < 1 || self.batch < 1 {
            return bad("n_dataset and batch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.eval_every < 1 || self.checkpoint_every < 1 {
            return bad("eval_every and checkpoint_every must be >= 1".into());
        }
        if self.pretrain_epochs < 1 || self.pretrain_batch < 1 {
            return bad("pretrain_epochs and pretrain_batch must be >= 1".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Weights of the non-adversarial objective, with the landmark term
    /// removed for the landmark ablation.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: if self.disable_landmark_loss { 0.0 } else { self.lambda2 },
            lambda3: self.lambda3,
            alpha: self.alpha,
        }
    }

    pub fn pretrain_config(&self, stream: &str) -> PretrainConfig {
        PretrainConfig {
            seed: derive_seed(self.seed, stream),
            epochs: self.pretrain_epochs,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            holdout: 0.1,
        }
    }
}

/// Independent sub-seed for a named stream of the master seed.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest holds 8 bytes"))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_hyperparameters() {
        let c = TrainingConfig::published();
        assert_eq!((c.batch, c.schedule_period), (6, 3));
        assert_eq!((c.lr_nonadv, c.lr_g_adv, c.lr_d), (5e-5, 5e-6, 2e-5));
        assert_eq!((c.beta1, c.beta2, c.gamma, c.alpha), (0.9, 0.999, 10.0, 0.84));
        assert_eq!((c.lambda1, c.lambda2, c.lambda3, c.lambda4), (1.0, 1.0, 0.001, 0.02));
        assert_eq!(c.n_dataset, 20_000);
        assert!(!c.use_lambda4_on_adv_g);
    }

    #[test]
    fn defaults_rescale_learning_rates_and_loss_weights() {
        let (d, p) = (TrainingConfig::default(), TrainingConfig::published());
        for (a, b) in [(d.lr_nonadv, p.lr_nonadv), (d.lr_g_adv, p.lr_g_adv), (d.lr_d, p.lr_d)] {
            assert!((a - 10.0 * b).abs() < 1e-15);
        }
        assert_eq!((d.lambda3, d.gamma), (10.0, 0.1));
        let restored =
            TrainingConfig { lr_nonadv: p.lr_nonadv, lr_g_adv: p.lr_g_adv, lr_d: p.lr_d, lambda3: p.lambda3, gamma: p.gamma, ..d };
        assert_eq!(restored, p);
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let mut c = TrainingConfig { lr_nonadv: 0.1 + 0.2, seed: u64::MAX, disable_landmark_loss: true, ..Default::default() };
        c.out_dir = PathBuf::from("some dir/out");
        let back = TrainingConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(TrainingConfig::keys().len(), c.to_text().lines().count());
    }

    #[test]
    fn unknown_duplicate_and_invalid_keys_are_rejected() {
        assert!(TrainingConfig::from_text("bogus = 1").is_err());
        assert!(TrainingConfig::from_text("seed = 1\nseed = 2").is_err());
        assert!(TrainingConfig::from_text("seed").is_err());
        assert!(TrainingConfig::from_text("lr_d = 0").is_err());
        assert!(TrainingConfig::from_text("schedule_period = 0").is_err());
        assert!(TrainingConfig::from_text("batch = six").is_err());
        let c = TrainingConfig::from_text("# comment\n\nseed = 5\n").unwrap();
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(3, "x"), derive_seed(3, "x"));
    }

    #[test]
    fn landmark_ablation_zeroes_its_weight() {
        let c = TrainingConfig { disable_landmark_loss: true, ..Default::default() };
        assert_eq!(c.loss_weights().lambda2, 0.0);
        assert_eq!(TrainingConfig::default().loss_weights().lambda2, 1.0);
    }
}
