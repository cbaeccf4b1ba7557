//! Single-file training checkpoints.
//!
//! Byte layout, little-endian throughout:
//!
//! ```text
//! magic "LBCK" | u32 version
//! u64 mixing_seed | u32 w_dim | u32 z_dim | u32 attr_dim | u32 image_side
//! u64 iteration
//! str config text | str generator hash
//! u32 frozen-net count, then per net: str name | str parameter hash
//! 3 x network (attr encoder, mapper, discriminator):
//!     str architecture hash | u64 n + n f64 parameters
//! 3 x Adam (discriminator, non-adversarial, adversarial):
//!     f64 lr | f64 beta1 | f64 beta2 | f64 eps | u64 t | u64 n + m | u64 n + v
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{TrainState, TrainingConfig};
use crate::disentangle::{Model, ATTR_DIM, Z_DIM};
use crate::error::{Error, Result};
use crate::generator::{Generator, W_DIM};
use crate::nn::{Adam, Network};
use crate::perception::{read_f64s, write_f64s, TrainingNets};
use crate::toyfaces::IMAGE_SIZE;

const MAGIC: &[u8; 4] = b"LBCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub mixing_seed: u64,
    pub generator_hash: String,
    /// `(name, parameter hash)` of each frozen network used in training.
    pub frozen: Vec<(String, String)>,
    pub state: TrainState,
}

fn frozen_hashes(nets: &TrainingNets) -> Vec<(String, String)> {
    vec![
        ("identity".to_string(), nets.identity.0.param_hash()),
        ("keypoints".to_string(), nets.keypoints.0.param_hash()),
    ]
}

/// Config keys that only steer bookkeeping; a resumed run may change them.
const BOOKKEEPING_KEYS: [&str; 10] = [
    "total_iters",
    "eval_every",
    "checkpoint_every",
    "out_dir",
    "eval_pairs",
    "pca_samples",
    "identity_net",
    "keypoint_net",
    "eval_net",
    "pose_net",
];

fn dynamics_text(c: &TrainingConfig) -> String {
    c.to_text()
        .lines()
        .filter(|l| !BOOKKEEPING_KEYS.contains(&l.split(" =").next().unwrap_or("")))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Checkpoint {
    pub fn capture(config: &TrainingConfig, generator: &dyn Generator, nets: &TrainingNets, state: &TrainState) -> Self {
        Checkpoint {
            config: config.clone(),
            mixing_seed: generator.mixing_seed(),
            generator_hash: generator.param_hash(),
            frozen: frozen_hashes(nets),
            state: state.clone(),
        }
    }

    /// A checkpoint may continue under `config` if everything that affects
    /// the training dynamics is unchanged.
    pub fn check_compatible(&self, config: &TrainingConfig, generator: &dyn Generator, nets: &TrainingNets) -> Result<()> {
        if dynamics_text(&self.config) != dynamics_text(config) {
            return Err(Error::Config("checkpoint was trained under a different configuration".into()));
        }
        self.check_inputs(generator, nets)
    }

    /// Check only the frozen generator and networks, as needed for inference.
    pub fn check_inputs(&self, generator: &dyn Generator, nets: &TrainingNets) -> Result<()> {
        if self.generator_hash != generator.param_hash() {
            return Err(Error::Config("checkpoint was trained against a different generator".into()));
        }
        if self.frozen != frozen_hashes(nets) {
            return Err(Error::Config("checkpoint was trained with different frozen networks".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.mixing_seed).unwrap();
        for d in [W_DIM, Z_DIM, ATTR_DIM, IMAGE_SIZE] {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        out.write_u64::<LittleEndian>(self.state.iteration).unwrap();
        write_str(&mut out, &self.config.to_text());
        write_str(&mut out, &self.generator_hash);
        out.write_u32::<LittleEndian>(self.frozen.len() as u32).unwrap();
        for (name, hash) in &self.frozen {
            write_str(&mut out, name);
            write_str(&mut out, hash);
        }
        let m = &self.state.model;
        for net in [&m.attr.net, &m.mapper.net, &m.discriminator.net] {
            write_str(&mut out, &net.architecture_hash());
            write_f64s(&mut out, &net.params);
        }
        for adam in [&self.state.opt_d, &self.state.opt_nonadv, &self.state.opt_adv_g] {
            for v in [adam.lr, adam.beta1, adam.beta2, adam.eps] {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
            out.write_u64::<LittleEndian>(adam.t).unwrap();
            write_f64s(&mut out, &adam.m);
            write_f64s(&mut out, &adam.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let mixing_seed = r.read_u64::<LittleEndian>()?;
        for (name, want) in [("w", W_DIM), ("z", Z_DIM), ("attribute", ATTR_DIM), ("image", IMAGE_SIZE)] {
            let got = r.read_u32::<LittleEndian>()? as usize;
            if got != want {
                return Err(Error::Format(format!("checkpoint {name} dimension {got}, this build uses {want}")));
            }
        }
        let iteration = r.read_u64::<LittleEndian>()?;
        let config = TrainingConfig::from_text(&read_str(&mut r)?)?;
        let generator_hash = read_str(&mut r)?;
        let n_frozen = r.read_u32::<LittleEndian>()? as usize;
        if n_frozen > 16 {
            return Err(Error::Format(format!("implausible frozen-network count {n_frozen}")));
        }
        let frozen = (0..n_frozen).map(|_| Ok((read_str(&mut r)?, read_str(&mut r)?))).collect::<Result<Vec<_>>>()?;

        let mut model = Model::new(0)?;
        for (label, net) in [
            ("attribute encoder", &mut model.attr.net),
            ("mapper", &mut model.mapper.net),
            ("discriminator", &mut model.discriminator.net),
        ] {
            read_network(&mut r, label, net)?;
        }
        let mut adams = Vec::with_capacity(3);
        for n in [
            model.discriminator.net.n_params(),
            model.attr.net.n_params() + model.mapper.net.n_params(),
            model.attr.net.n_params() + model.mapper.net.n_params(),
        ] {
            let lr = r.read_f64::<LittleEndian>()?;
            let beta1 = r.read_f64::<LittleEndian>()?;
            let beta2 = r.read_f64::<LittleEndian>()?;
            let eps = r.read_f64::<LittleEndian>()?;
            let t = r.read_u64::<LittleEndian>()?;
            let m = read_f64s(&mut r)?;
            let v = read_f64s(&mut r)?;
            if m.len() != n || v.len() != n {
                return Err(Error::Format("optimizer state does not match the model size".into()));
            }
            adams.push(Adam { lr, beta1, beta2, eps, m, v, t });
        }
        if r.position() as usize != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let opt_adv_g = adams.pop().unwrap();
        let opt_nonadv = adams.pop().unwrap();
        let opt_d = adams.pop().unwrap();
        Ok(Checkpoint {
            config,
            mixing_seed,
            generator_hash,
            frozen,
            state: TrainState { iteration, model, opt_d, opt_nonadv, opt_adv_g },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_network(r: &mut Cursor<&[u8]>, label: &str, net: &mut Network) -> Result<()> {
    let arch = read_str(r)?;
    let params = read_f64s(r)?;
    if arch != net.architecture_hash() || params.len() != net.n_params() {
        return Err(Error::Format(format!("{label} layout does not match this build")));
    }
    net.params = params;
    Ok(())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 1 << 20 {
        return Err(Error::Format(format!("implausible string length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}
