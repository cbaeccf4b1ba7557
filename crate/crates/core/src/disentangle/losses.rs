//! Non-adversarial losses. Every gradient is taken with respect to the
//! output image only; the reference image's network response is a
//! constant.

use super::msssim::{ms_ssim, ms_ssim_with_grad};
use crate::error::{Error, Result};
use crate::perception::{IdentityEmbedder, KeypointRegressor};
use crate::toyfaces::ToyImage;

/// Loss weights of the non-adversarial objective and the MS-SSIM share of
/// the mixed reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 0.001, alpha: 0.84 }
    }
}

fn same_shape(a: &ToyImage, b: &ToyImage) -> Result<()> {
    if a.size != b.size || a.len() != b.len() {
        return Err(Error::invalid(format!("image sides differ: {} vs {}", a.size, b.size)));
    }
    Ok(())
}

pub fn loss_id(e_id: &IdentityEmbedder, i_id: &ToyImage, i_out: &ToyImage) -> Result<f64> {
    same_shape(i_id, i_out)?;
    let (a, b) = (e_id.embed(i_id), e_id.embed(i_out));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum())
}

/// `||target - E_id(I_out)||_1` and its gradient with respect to `I_out`.
pub fn loss_id_with_grad(e_id: &IdentityEmbedder, target: &[f64], i_out: &ToyImage) -> Result<(f64, Vec<f64>)> {
    let trace = e_id.0.traced(i_out);
    let out = trace.output();
    if out.len() != target.len() {
        return Err(Error::invalid("identity target has the wrong dimension"));
    }
    let value = out.iter().zip(target).map(|(o, t)| (o - t).abs()).sum();
    let g: Vec<f64> = out.iter().zip(target).map(|(o, t)| sign(o - t)).collect();
    Ok((value, e_id.0.input_gradient(&trace, &g)))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Keypoints of a reference image in pixel units, flattened.
pub fn keypoint_target(e_lnd: &KeypointRegressor, img: &ToyImage) -> Vec<f64> {
    e_lnd.predict_traced(img).0
}

pub fn loss_lnd(e_lnd: &KeypointRegressor, i_attr: &ToyImage, i_out: &ToyImage) -> Result<f64> {
    same_shape(i_attr, i_out)?;
    let (a, b) = (keypoint_target(e_lnd, i_attr), keypoint_target(e_lnd, i_out));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// `||target - E_lnd(I_out)||_2` and its gradient with respect to `I_out`.
pub fn loss_lnd_with_grad(e_lnd: &KeypointRegressor, target: &[f64], i_out: &ToyImage) -> Result<(f64, Vec<f64>)> {
    let (pts, trace) = e_lnd.predict_traced(i_out);
    if pts.len() != target.len() {
        return Err(Error::invalid("keypoint target has the wrong dimension"));
    }
    let diff: Vec<f64> = pts.iter().zip(target).map(|(p, t)| p - t).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if value == 0.0 {
        return Ok((0.0, vec![0.0; i_out.len()]));
    }
    let g: Vec<f64> = diff.iter().map(|d| d / value).collect();
    Ok((value, e_lnd.input_gradient(&trace, &g)))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

pub fn loss_mix(i_attr: &ToyImage, i_out: &ToyImage, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    same_shape(i_attr, i_out)?;
    let l1 = mean_abs_diff(i_attr, i_out);
    if alpha == 0.0 {
        return Ok(l1);
    }
    Ok(alpha * (1.0 - ms_ssim(i_attr, i_out)?) + (1.0 - alpha) * l1)
}

fn mean_abs_diff(a: &ToyImage, b: &ToyImage) -> f64 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn loss_mix_with_grad(i_attr: &ToyImage, i_out: &ToyImage, alpha: f64) -> Result<(f64, Vec<f64>)> {
    check_alpha(alpha)?;
    same_shape(i_attr, i_out)?;
    let n = i_out.len() as f64;
    let l1 = mean_abs_diff(i_attr, i_out);
    let mut grad: Vec<f64> =
        i_out.pixels.iter().zip(&i_attr.pixels).map(|(o, a)| (1.0 - alpha) * sign(o - a) / n).collect();
    if alpha == 0.0 {
        return Ok((l1, grad));
    }
    let (s, gs) = ms_ssim_with_grad(i_attr, i_out)?;
    for (g, d) in grad.iter_mut().zip(&gs) {
        *g -= alpha * d;
    }
    Ok((alpha * (1.0 - s) + (1.0 - alpha) * l1, grad))
}

/// Reconstruction loss, active only on steps the schedule marks as
/// `I_id = I_attr`.
pub fn loss_rec(_i_id: &ToyImage, i_attr: &ToyImage, i_out: &ToyImage, same: bool, alpha: f64) -> Result<f64> {
    if !same {
        check_alpha(alpha)?;
        same_shape(i_attr, i_out)?;
        return Ok(0.0);
    }
    loss_mix(i_attr, i_out, alpha)
}

pub fn loss_nonadv_total(
    e_id: &IdentityEmbedder,
    e_lnd: &KeypointRegressor,
    i_id: &ToyImage,
    i_attr: &ToyImage,
    i_out: &ToyImage,
    same: bool,
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    if weights.lambda1 != 0.0 {
        total += weights.lambda1 * loss_id(e_id, i_id, i_out)?;
    }
    if weights.lambda2 != 0.0 {
        total += weights.lambda2 * loss_lnd(e_lnd, i_attr, i_out)?;
    }
    if weights.lambda3 != 0.0 {
        total += weights.lambda3 * loss_rec(i_id, i_attr, i_out, same, weights.alpha)?;
    }
    Ok(total)
}

/// Precomputed responses of the frozen networks to the reference images.
#[derive(Clone, Debug, PartialEq)]
pub struct NonAdvTargets {
    pub identity: Vec<f64>,
    pub keypoints: Vec<f64>,
}

/// Per-term values of the non-adversarial objective and the gradient of
/// the weighted total with respect to `I_out`.
#[derive(Clone, Debug)]
pub struct NonAdvTerms {
    pub id: f64,
    pub lnd: f64,
    pub rec: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub fn nonadv_with_grad(
    e_id: &IdentityEmbedder,
    e_lnd: &KeypointRegressor,
    targets: &NonAdvTargets,
    i_attr: &ToyImage,
    i_out: &ToyImage,
    same: bool,
    weights: &LossWeights,
) -> Result<NonAdvTerms> {
    same_shape(i_attr, i_out)?;
    let mut grad = vec![0.0; i_out.len()];
    let mut add = |w: f64, g: &[f64]| {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += w * b;
        }
    };
    let (mut id, mut lnd, mut rec) = (0.0, 0.0, 0.0);
    if weights.lambda1 != 0.0 {
        let (v, g) = loss_id_with_grad(e_id, &targets.identity, i_out)?;
        id = v;
        add(weights.lambda1, &g);
    }
    if weights.lambda2 != 0.0 {
        let (v, g) = loss_lnd_with_grad(e_lnd, &targets.keypoints, i_out)?;
        lnd = v;
        add(weights.lambda2, &g);
    }
    if weights.lambda3 != 0.0 && same {
        let (v, g) = loss_mix_with_grad(i_attr, i_out, weights.alpha)?;
        rec = v;
        add(weights.lambda3, &g);
    }
    let total = weights.lambda1 * id + weights.lambda2 * lnd + weights.lambda3 * rec;
    Ok(NonAdvTerms { id, lnd, rec, total, grad })
}
