//! Three-scale MS-SSIM with an analytic gradient.
//!
//! Each scale filters with an 11-tap Gaussian (sigma 1.5, "valid" support)
//! and the pyramid halves the resolution with 2x2 average pooling, so a
//! 64x64 input is scored at 64, 32 and 16 pixels. Contrast-structure terms
//! enter at every scale, the luminance term at the coarsest only, and the
//! per-scale exponents are the first three canonical weights renormalized
//! to sum to one.

use crate::error::{Error, Result};
use crate::toyfaces::ToyImage;

pub const SCALES: usize = 3;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const CANONICAL_WEIGHTS: [f64; SCALES] = [0.0448, 0.2856, 0.3001];
/// Floor applied to each per-scale term before exponentiation.
const FLOOR: f64 = 1e-6;

pub fn scale_weights() -> [f64; SCALES] {
    let total: f64 = CANONICAL_WEIGHTS.iter().sum();
    CANONICAL_WEIGHTS.map(|w| w / total)
}

fn gaussian_window() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of one `n x n` plane.
fn filter(x: &[f64], n: usize, win: &[f64; WINDOW]) -> Vec<f64> {
    let m = n + 1 - WINDOW;
    let mut rows = vec![0.0; n * m];
    for y in 0..n {
        for ox in 0..m {
            rows[y * m + ox] = (0..WINDOW).map(|k| win[k] * x[y * n + ox + k]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for oy in 0..m {
        for ox in 0..m {
            out[oy * m + ox] = (0..WINDOW).map(|k| win[k] * rows[(oy + k) * m + ox]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`]: scatters an `m x m` map back onto `n x n`.
fn filter_adjoint(g: &[f64], n: usize, win: &[f64; WINDOW]) -> Vec<f64> {
    let m = n + 1 - WINDOW;
    let mut rows = vec![0.0; n * m];
    for oy in 0..m {
        for ox in 0..m {
            let v = g[oy * m + ox];
            for k in 0..WINDOW {
                rows[(oy + k) * m + ox] += win[k] * v;
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for ox in 0..m {
            let v = rows[y * m + ox];
            for k in 0..WINDOW {
                out[y * n + ox + k] += win[k] * v;
            }
        }
    }
    out
}

fn downsample(x: &[f64], n: usize) -> Vec<f64> {
    let h = n / 2;
    let mut out = vec![0.0; h * h];
    for y in 0..h {
        for xx in 0..h {
            out[y * h + xx] = 0.25
                * (x[2 * y * n + 2 * xx] + x[2 * y * n + 2 * xx + 1] + x[(2 * y + 1) * n + 2 * xx] + x[(2 * y + 1) * n + 2 * xx + 1]);
        }
    }
    out
}

fn downsample_adjoint(g: &[f64], n: usize) -> Vec<f64> {
    let h = n / 2;
    let mut out = vec![0.0; n * n];
    for y in 0..h {
        for xx in 0..h {
            let v = 0.25 * g[y * h + xx];
            out[2 * y * n + 2 * xx] = v;
            out[2 * y * n + 2 * xx + 1] = v;
            out[(2 * y + 1) * n + 2 * xx] = v;
            out[(2 * y + 1) * n + 2 * xx + 1] = v;
        }
    }
    out
}

fn check(a: &ToyImage, b: &ToyImage) -> Result<()> {
    if a.size != b.size || a.pixels.len() != b.pixels.len() {
        return Err(Error::invalid(format!("MS-SSIM shape mismatch: {} vs {}", a.size, b.size)));
    }
    let min = WINDOW << (SCALES - 1);
    if a.size < min || a.size % (1 << (SCALES - 1)) != 0 {
        return Err(Error::invalid(format!("MS-SSIM needs a side of at least {min} divisible by 4")));
    }
    Ok(())
}

pub fn ms_ssim(a: &ToyImage, b: &ToyImage) -> Result<f64> {
    Ok(evaluate(a, b, false)?.0)
}

/// MS-SSIM and its gradient with respect to `b`.
pub fn ms_ssim_with_grad(a: &ToyImage, b: &ToyImage) -> Result<(f64, Vec<f64>)> {
    let (v, g) = evaluate(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn evaluate(a: &ToyImage, b: &ToyImage, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check(a, b)?;
    let win = gaussian_window();
    let weights = scale_weights();
    let n0 = a.size;
    let plane = n0 * n0;

    // pyramids per channel: pyr[s][c]
    let mut pa: Vec<Vec<Vec<f64>>> = vec![(0..3).map(|c| a.pixels[c * plane..(c + 1) * plane].to_vec()).collect()];
    let mut pb: Vec<Vec<Vec<f64>>> = vec![(0..3).map(|c| b.pixels[c * plane..(c + 1) * plane].to_vec()).collect()];
    for s in 1..SCALES {
        let n = n0 >> (s - 1);
        pa.push(pa[s - 1].iter().map(|x| downsample(x, n)).collect());
        pb.push(pb[s - 1].iter().map(|x| downsample(x, n)).collect());
    }

    let mut values = [0.0; SCALES];
    // per-scale, per-channel partials of the mean map w.r.t. (mu_b, E[b^2], E[ab])
    let mut partials: Vec<Vec<[Vec<f64>; 3]>> = Vec::new();
    for s in 0..SCALES {
        let n = n0 >> s;
        let m = n + 1 - WINDOW;
        let count = (3 * m * m) as f64;
        let coarsest = s == SCALES - 1;
        let mut total = 0.0;
        let mut per_channel = Vec::new();
        for c in 0..3 {
            let (x, y) = (&pa[s][c], &pb[s][c]);
            let mu_a = filter(x, n, &win);
            let mu_b = filter(y, n, &win);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
            let e_aa = filter(&xx, n, &win);
            let e_bb = filter(&yy, n, &win);
            let e_ab = filter(&xy, n, &win);
            let mut g_mu = vec![0.0; m * m];
            let mut g_bb = vec![0.0; m * m];
            let mut g_ab = vec![0.0; m * m];
            for p in 0..m * m {
                let (ma, mb) = (mu_a[p], mu_b[p]);
                let var_a = e_aa[p] - ma * ma;
                let var_b = e_bb[p] - mb * mb;
                let cov = e_ab[p] - ma * mb;
                let cs_num = 2.0 * cov + C2;
                let cs_den = var_a + var_b + C2;
                let cs = cs_num / cs_den;
                let d_cs_ab = 2.0 / cs_den;
                let d_cs_bb = -cs / cs_den;
                let d_cs_mu = (-2.0 * ma + 2.0 * mb * cs) / cs_den;
                if coarsest {
                    let l_den = ma * ma + mb * mb + C1;
                    let l = (2.0 * ma * mb + C1) / l_den;
                    let d_l_mu = (2.0 * ma - 2.0 * mb * l) / l_den;
                    total += l * cs;
                    g_mu[p] = l * d_cs_mu + cs * d_l_mu;
                    g_bb[p] = l * d_cs_bb;
                    g_ab[p] = l * d_cs_ab;
                } else {
                    total += cs;
                    g_mu[p] = d_cs_mu;
                    g_bb[p] = d_cs_bb;
                    g_ab[p] = d_cs_ab;
                }
            }
            per_channel.push([g_mu, g_bb, g_ab]);
        }
        values[s] = total / count;
        partials.push(per_channel);
    }

    let clamped: Vec<f64> = values.iter().map(|v| v.max(FLOOR)).collect();
    let score: f64 = clamped.iter().zip(weights).map(|(v, w)| v.powf(w)).product();
    if !want_grad {
        return Ok((score, None));
    }

    let mut grad = vec![0.0; 3 * plane];
    for c in 0..3 {
        // accumulate from the coarsest scale down so each level is pulled
        // back through its pooling exactly once
        let mut carry: Option<Vec<f64>> = None;
        for s in (0..SCALES).rev() {
            let n = n0 >> s;
            let m = n + 1 - WINDOW;
            let count = (3 * m * m) as f64;
            let outer = if values[s] > FLOOR { score * weights[s] / values[s] / count } else { 0.0 };
            let [g_mu, g_bb, g_ab] = &partials[s][c];
            let scale = |g: &Vec<f64>| -> Vec<f64> { g.iter().map(|v| v * outer).collect() };
            let t_mu = filter_adjoint(&scale(g_mu), n, &win);
            let t_bb = filter_adjoint(&scale(g_bb), n, &win);
            let t_ab = filter_adjoint(&scale(g_ab), n, &win);
            let (x, y) = (&pa[s][c], &pb[s][c]);
            let mut level: Vec<f64> = (0..n * n).map(|q| t_mu[q] + 2.0 * y[q] * t_bb[q] + x[q] * t_ab[q]).collect();
            if let Some(from_coarser) = carry.take() {
                for (l, v) in level.iter_mut().zip(downsample_adjoint(&from_coarser, n)) {
                    *l += v;
                }
            }
            carry = Some(level);
        }
        grad[c * plane..(c + 1) * plane].copy_from_slice(&carry.unwrap());
    }
    Ok((score, Some(grad)))
}
