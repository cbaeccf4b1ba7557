//! The trainable part of the model: the attribute encoder, the combined
//! code `z = [E_id(I_id), E_attr(I_attr)]`, the mapper `M: z -> w`, the
//! W-space discriminator, and every training loss.

mod adversarial;
mod losses;
pub mod msssim;

pub use adversarial::{loss_adv_d, loss_adv_d_with_grad, loss_adv_g, loss_adv_g_with_grad, AdvDLoss};
pub use losses::{
    keypoint_target, loss_id, loss_id_with_grad, loss_lnd, loss_lnd_with_grad, loss_mix, loss_mix_with_grad,
    loss_nonadv_total, loss_rec, nonadv_with_grad, LossWeights, NonAdvTerms, NonAdvTargets,
};
pub use msssim::{ms_ssim, ms_ssim_with_grad};

use crate::error::{Error, Result};
use crate::generator::{StyleLatent, W_DIM};
use crate::nn::{LayerSpec, Network, Shape, Trace};
use crate::perception::{IdentityEmbedder, EMBED_DIM};
use crate::toyfaces::{ToyImage, IMAGE_SIZE};

pub const ATTR_DIM: usize = 16;
pub const Z_DIM: usize = EMBED_DIM + ATTR_DIM;
pub const MAPPER_HIDDEN: usize = 128;
pub const DISCRIMINATOR_HIDDEN: usize = 64;

/// `z`: identity embedding followed by the attribute code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentZ(pub [f64; Z_DIM]);

impl LatentZ {
    pub fn from_parts(identity: &[f64], attribute: &[f64]) -> Result<Self> {
        if identity.len() != EMBED_DIM || attribute.len() != ATTR_DIM {
            return Err(Error::invalid(format!(
                "z blocks must be {EMBED_DIM} + {ATTR_DIM}, got {} + {}",
                identity.len(),
                attribute.len()
            )));
        }
        let mut z = [0.0; Z_DIM];
        z[..EMBED_DIM].copy_from_slice(identity);
        z[EMBED_DIM..].copy_from_slice(attribute);
        Ok(LatentZ(z))
    }

    pub fn identity(&self) -> &[f64] {
        &self.0[..EMBED_DIM]
    }

    pub fn attribute(&self) -> &[f64] {
        &self.0[EMBED_DIM..]
    }

    /// `(1 - t) a + t b`, exact at both endpoints.
    pub fn lerp(&self, other: &LatentZ, t: f64) -> LatentZ {
        LatentZ(std::array::from_fn(|i| (1.0 - t) * self.0[i] + t * other.0[i]))
    }
}

fn check_image(img: &ToyImage) -> Result<()> {
    if img.size != IMAGE_SIZE || img.len() != 3 * IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::invalid(format!("expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got side {}", img.size)));
    }
    Ok(())
}

/// `E_attr`: trainable convolutional attribute encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrEncoder {
    pub net: Network,
}

impl AttrEncoder {
    pub fn layers() -> Vec<LayerSpec> {
        use LayerSpec::*;
        let conv = |out_ch| Conv { out_ch, kernel: 4, stride: 2, pad: 1 };
        vec![
            conv(16),
            LeakyRelu,
            conv(24),
            LeakyRelu,
            conv(32),
            LeakyRelu,
            conv(32),
            LeakyRelu,
            Dense { outputs: 64 },
            LeakyRelu,
            Dense { outputs: ATTR_DIM },
        ]
    }

    pub fn new(seed: u64) -> Result<Self> {
        Ok(AttrEncoder { net: Network::new(Shape::image(3, IMAGE_SIZE, IMAGE_SIZE), &Self::layers(), seed)? })
    }

    pub fn encode(&self, img: &ToyImage) -> Result<Vec<f64>> {
        check_image(img)?;
        Ok(self.net.forward(&img.pixels))
    }

    pub fn traced(&self, img: &ToyImage) -> Result<Trace> {
        check_image(img)?;
        Ok(self.net.forward_trace(&img.pixels))
    }
}

/// `M`: four fully connected layers with leaky ReLUs between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mapper {
    pub net: Network,
}

impl Mapper {
    pub fn layers() -> Vec<LayerSpec> {
        use LayerSpec::*;
        vec![
            Dense { outputs: MAPPER_HIDDEN },
            LeakyRelu,
            Dense { outputs: MAPPER_HIDDEN },
            LeakyRelu,
            Dense { outputs: MAPPER_HIDDEN },
            LeakyRelu,
            Dense { outputs: W_DIM },
        ]
    }

    pub fn new(seed: u64) -> Result<Self> {
        Ok(Mapper { net: Network::new(Shape::flat(Z_DIM), &Self::layers(), seed)? })
    }

    pub fn traced(&self, z: &LatentZ) -> Trace {
        self.net.forward_trace(&z.0)
    }
}

/// `D_W`: MLP from a latent to one raw logit.
#[derive(Clone, Debug, PartialEq)]
pub struct WDiscriminator {
    pub net: Network,
}

impl WDiscriminator {
    pub fn layers() -> Vec<LayerSpec> {
        use LayerSpec::*;
        vec![
            Dense { outputs: DISCRIMINATOR_HIDDEN },
            LeakyRelu,
            Dense { outputs: DISCRIMINATOR_HIDDEN },
            LeakyRelu,
            Dense { outputs: 1 },
        ]
    }

    pub fn new(seed: u64) -> Result<Self> {
        Self::from_network(Network::new(Shape::flat(W_DIM), &Self::layers(), seed)?)
    }

    /// Wrap any dense/leaky-ReLU network with an `W_DIM -> 1` signature.
    pub fn from_network(net: Network) -> Result<Self> {
        if net.input_shape().len() != W_DIM || net.output_len() != 1 || net.mlp_layers().is_none() {
            return Err(Error::invalid("discriminator must be a dense MLP from W to one logit"));
        }
        Ok(WDiscriminator { net })
    }

    pub fn logit(&self, w: &StyleLatent) -> f64 {
        self.net.forward(&w.0)[0]
    }
}

/// The trainable parameter sets of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub attr: AttrEncoder,
    pub mapper: Mapper,
    pub discriminator: WDiscriminator,
}

impl Model {
    pub fn new(seed: u64) -> Result<Self> {
        Ok(Model {
            attr: AttrEncoder::new(seed ^ 0xa77e)?,
            mapper: Mapper::new(seed ^ 0x3a99)?,
            discriminator: WDiscriminator::new(seed ^ 0xd15c)?,
        })
    }

    /// `map_to_w(encode(I_id, I_attr))`.
    pub fn infer_w(&self, e_id: &IdentityEmbedder, i_id: &ToyImage, i_attr: &ToyImage) -> Result<StyleLatent> {
        Ok(map_to_w(&self.mapper, &encode(e_id, &self.attr, i_id, i_attr)?))
    }
}

pub fn encode(e_id: &IdentityEmbedder, attr: &AttrEncoder, i_id: &ToyImage, i_attr: &ToyImage) -> Result<LatentZ> {
    check_image(i_id)?;
    check_image(i_attr)?;
    LatentZ::from_parts(&e_id.embed(i_id), &attr.encode(i_attr)?)
}

pub fn map_to_w(mapper: &Mapper, z: &LatentZ) -> StyleLatent {
    let out = mapper.net.forward(&z.0);
    StyleLatent(std::array::from_fn(|i| out[i]))
}
