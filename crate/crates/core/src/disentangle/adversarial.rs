//! Non-saturating adversarial losses on W with the R1 penalty.
//!
//! The discriminator emits raw logits; `-log sigmoid(x)` is evaluated as
//! `softplus(-x)` so neither loss overflows. The R1 gradient with respect
//! to the discriminator weights is derived by hand: for a leaky-ReLU MLP
//! the input gradient is `W1^T S1 W2^T S2 ... WL^T` with piecewise-constant
//! slope masks `S`, so the penalty is a polynomial in the weights and has
//! no bias dependence.

use super::WDiscriminator;
use crate::error::{Error, Result};
use crate::generator::{StyleLatent, W_DIM};
use crate::nn::{dot, LRELU_SLOPE};
use crate::scalar::Scalar;

fn sigmoid(x: f64) -> f64 {
    Scalar::sigmoid(x)
}

fn softplus(x: f64) -> f64 {
    Scalar::softplus(x)
}

/// Discriminator loss broken into its parts, with the parameter gradient.
#[derive(Clone, Debug)]
pub struct AdvDLoss {
    pub value: f64,
    pub real_term: f64,
    pub fake_term: f64,
    pub r1: f64,
    pub grad: Vec<f64>,
}

fn non_empty(batch: &[StyleLatent], what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid(format!("{what} batch is empty")));
    }
    if batch.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid(format!("{what} batch holds a non-finite latent")));
    }
    Ok(())
}

pub fn loss_adv_d(d: &WDiscriminator, real: &[StyleLatent], fake: &[StyleLatent], gamma: f64) -> Result<f64> {
    Ok(loss_adv_d_with_grad(d, real, fake, gamma)?.value)
}

pub fn loss_adv_d_with_grad(
    d: &WDiscriminator,
    real: &[StyleLatent],
    fake: &[StyleLatent],
    gamma: f64,
) -> Result<AdvDLoss> {
    non_empty(real, "real")?;
    non_empty(fake, "fake")?;
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    let net = &d.net;
    let mut grad = vec![0.0; net.n_params()];
    let (nr, nf) = (real.len() as f64, fake.len() as f64);

    let mut real_term = 0.0;
    for w in real {
        let trace = net.forward_trace(&w.0);
        let x = trace.output()[0];
        real_term += softplus(-x) / nr;
        net.backward(&trace, &[-sigmoid(-x) / nr], Some(&mut grad), false);
    }
    let mut fake_term = 0.0;
    for w in fake {
        let trace = net.forward_trace(&w.0);
        let x = trace.output()[0];
        fake_term += softplus(x) / nf;
        net.backward(&trace, &[sigmoid(x) / nf], Some(&mut grad), false);
    }

    let mut r1 = 0.0;
    if gamma > 0.0 {
        for w in real {
            r1 += r1_accumulate(d, w, 0.5 * gamma / nr, &mut grad);
        }
        r1 *= 0.5 * gamma / nr;
    }
    Ok(AdvDLoss { value: real_term + fake_term + r1, real_term, fake_term, r1, grad })
}

/// Adds `scale * d||grad_w D(w)||^2 / d(params)` into `grad` and returns
/// `||grad_w D(w)||^2`.
fn r1_accumulate(d: &WDiscriminator, w: &StyleLatent, scale: f64, grad: &mut [f64]) -> f64 {
    let layers = d.net.mlp_layers().expect("discriminator is an MLP");
    // forward pass recording slope masks
    let mut h = w.0.to_vec();
    let mut masks: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (li, l) in layers.iter().enumerate() {
        let bias = &d.net.params[l.offset + l.n_in * l.n_out..l.offset + l.n_in * l.n_out + l.n_out];
        let pre: Vec<f64> = (0..l.n_out).map(|o| bias[o] + dot(&l.weights[o * l.n_in..(o + 1) * l.n_in], &h)).collect();
        let mask: Vec<f64> = if l.activated {
            pre.iter().map(|&a| if a > 0.0 { 1.0 } else { LRELU_SLOPE }).collect()
        } else {
            vec![1.0; l.n_out]
        };
        h = pre.iter().zip(&mask).map(|(a, m)| a * m).collect();
        masks.push(mask);
        debug_assert!(li + 1 < layers.len() || l.n_out == 1);
    }
    // backward chain: u_{l-1} = W_l^T (S_l u_l), keeping v_l = S_l u_l
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    let mut u = vec![1.0];
    for (li, l) in layers.iter().enumerate().rev() {
        let vl: Vec<f64> = u.iter().zip(&masks[li]).map(|(a, m)| a * m).collect();
        let mut next = vec![0.0; l.n_in];
        for (o, &c) in vl.iter().enumerate() {
            if c != 0.0 {
                for (n, wv) in next.iter_mut().zip(&l.weights[o * l.n_in..(o + 1) * l.n_in]) {
                    *n += c * wv;
                }
            }
        }
        v[li] = vl;
        u = next;
    }
    let g = u;
    debug_assert_eq!(g.len(), W_DIM);
    let norm_sq: f64 = g.iter().map(|x| x * x).sum();
    // forward chain of q = dR/du: q_0 = 2g, q_l = S_l W_l q_{l-1};
    // dR/dW_l[o, i] = v_l[o] * q_{l-1}[i]
    let mut q: Vec<f64> = g.iter().map(|x| 2.0 * x).collect();
    for (li, l) in layers.iter().enumerate() {
        let vl = &v[li];
        let gw = &mut grad[l.offset..l.offset + l.n_in * l.n_out];
        for o in 0..l.n_out {
            let c = scale * vl[o];
            if c != 0.0 {
                for (gi, qi) in gw[o * l.n_in..(o + 1) * l.n_in].iter_mut().zip(&q) {
                    *gi += c * qi;
                }
            }
        }
        if li + 1 < layers.len() {
            q = (0..l.n_out)
                .map(|o| masks[li][o] * dot(&l.weights[o * l.n_in..(o + 1) * l.n_in], &q))
                .collect();
        }
    }
    norm_sq
}

pub fn loss_adv_g(d: &WDiscriminator, fake: &[StyleLatent]) -> Result<f64> {
    non_empty(fake, "fake")?;
    Ok(fake.iter().map(|w| softplus(-d.logit(w))).sum::<f64>() / fake.len() as f64)
}

/// Generator-side loss and its gradient with respect to each fake latent.
/// The discriminator is read, never differentiated.
pub fn loss_adv_g_with_grad(d: &WDiscriminator, fake: &[StyleLatent]) -> Result<(f64, Vec<[f64; W_DIM]>)> {
    non_empty(fake, "fake")?;
    let n = fake.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(fake.len());
    for w in fake {
        let trace = d.net.forward_trace(&w.0);
        let x = trace.output()[0];
        value += softplus(-x) / n;
        let gi = d.net.backward(&trace, &[-sigmoid(-x) / n], None, true).expect("input gradient");
        grads.push(std::array::from_fn(|i| gi[i]));
    }
    Ok((value, grads))
}
