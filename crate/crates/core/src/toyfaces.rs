//! Procedural face-like image domain with known generative factors.
//!
//! Every image is a smooth function of an 11-component [`FactorVector`]:
//! four identity factors (head shape, skin hue, eye spacing, hair extent)
//! and seven attribute factors (in-plane pose, expression, illumination).
//! Shapes are rasterized with sigmoid edges so the image is differentiable
//! with respect to every factor, and [`keypoints_of`] gives the matching
//! landmark positions in closed form.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{Dual, Scalar};

pub const N_FACTORS: usize = 11;
pub const N_IDENTITY: usize = 4;
pub const N_ATTRIBUTE: usize = 7;
pub const N_KEYPOINTS: usize = 8;
pub const IMAGE_SIZE: usize = 64;
pub const DEFAULT_SHARPNESS: f64 = 8.0;

/// Geometry is laid out on a 64-unit canvas regardless of the raster size.
const CANVAS: f64 = 64.0;
const CENTER: f64 = CANVAS / 2.0;
const PHI: usize = 9;

/// `[lo, hi]` per field, in [`FactorVector::to_array`] order.
pub const FACTOR_RANGES: [(f64, f64); N_FACTORS] = [
    (-1.0, 1.0),  // id_shape
    (0.0, 1.0),   // id_hue
    (-1.0, 1.0),  // id_eyespan
    (0.0, 1.0),   // id_hair
    (-30.0, 30.0), // pose_theta (degrees)
    (-8.0, 8.0),  // pose_tx (pixels)
    (-8.0, 8.0),  // pose_ty (pixels)
    (-1.0, 1.0),  // expr_curve
    (0.0, 1.0),   // expr_open
    (0.0, TAU),   // illum_phi (radians, half-open)
    (0.6, 1.4),   // illum_gain
];

pub const FACTOR_NAMES: [&str; N_FACTORS] = [
    "id_shape",
    "id_hue",
    "id_eyespan",
    "id_hair",
    "pose_theta",
    "pose_tx",
    "pose_ty",
    "expr_curve",
    "expr_open",
    "illum_phi",
    "illum_gain",
];

/// Ground-truth generative factors of one toy face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorVector {
    pub id_shape: f64,
    pub id_hue: f64,
    pub id_eyespan: f64,
    pub id_hair: f64,
    pub pose_theta: f64,
    pub pose_tx: f64,
    pub pose_ty: f64,
    pub expr_curve: f64,
    pub expr_open: f64,
    pub illum_phi: f64,
    pub illum_gain: f64,
}

impl FactorVector {
    pub fn from_array(a: [f64; N_FACTORS]) -> Self {
        FactorVector {
            id_shape: a[0],
            id_hue: a[1],
            id_eyespan: a[2],
            id_hair: a[3],
            pose_theta: a[4],
            pose_tx: a[5],
            pose_ty: a[6],
            expr_curve: a[7],
            expr_open: a[8],
            illum_phi: a[9],
            illum_gain: a[10],
        }
    }

    pub fn to_array(&self) -> [f64; N_FACTORS] {
        [
            self.id_shape,
            self.id_hue,
            self.id_eyespan,
            self.id_hair,
            self.pose_theta,
            self.pose_tx,
            self.pose_ty,
            self.expr_curve,
            self.expr_open,
            self.illum_phi,
            self.illum_gain,
        ]
    }

    /// All fields at their range midpoints.
    pub fn midpoint() -> Self {
        let mut a = [0.0; N_FACTORS];
        for (x, (lo, hi)) in a.iter_mut().zip(FACTOR_RANGES) {
            *x = 0.5 * (lo + hi);
        }
        Self::from_array(a)
    }

    pub fn identity_block(&self) -> [f64; N_IDENTITY] {
        let a = self.to_array();
        [a[0], a[1], a[2], a[3]]
    }

    pub fn attribute_block(&self) -> [f64; N_ATTRIBUTE] {
        let a = self.to_array();
        [a[4], a[5], a[6], a[7], a[8], a[9], a[10]]
    }

    /// Identity factors from `self`, attribute factors from `attr`.
    pub fn with_attributes_of(&self, attr: &FactorVector) -> Self {
        let mut a = attr.to_array();
        a[..N_IDENTITY].copy_from_slice(&self.identity_block());
        Self::from_array(a)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn in_range(&self) -> bool {
        self.to_array()
            .iter()
            .zip(FACTOR_RANGES)
            .all(|(&x, (lo, hi))| x >= lo && x <= hi)
    }

    /// Identity factors mapped to `[0, 1]`.
    pub fn normalized_identity(&self) -> [f64; N_IDENTITY] {
        let a = self.to_array();
        let mut out = [0.0; N_IDENTITY];
        for i in 0..N_IDENTITY {
            let (lo, hi) = FACTOR_RANGES[i];
            out[i] = (a[i] - lo) / (hi - lo);
        }
        out
    }
}

/// RGB image stored channel-planar (`c * H * W + y * W + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl ToyImage {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != 3 * size * size {
            return Err(Error::invalid(format!(
                "{} pixel values for a {size}x{size}x3 image",
                pixels.len()
            )));
        }
        Ok(ToyImage { size, pixels })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        ToyImage { size, pixels: vec![value; 3 * size * size] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.size + y) * self.size + x]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Integer translation; vacated pixels take `fill`.
    pub fn shifted(&self, dx: isize, dy: isize, fill: f64) -> ToyImage {
        let n = self.size as isize;
        let mut out = ToyImage::filled(self.size, fill);
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let (sx, sy) = (x - dx, y - dy);
                    if sx >= 0 && sx < n && sy >= 0 && sy < n {
                        out.pixels[(c * self.size + y as usize) * self.size + x as usize] =
                            self.at(c, sy as usize, sx as usize);
                    }
                }
            }
        }
        out
    }
}

/// Eight landmarks in 64-pixel canvas coordinates: left eye, right eye,
/// four points along the mouth centre line (left to right), left and right
/// head-contour extrema.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoints {
    pub points: [[f64; 2]; N_KEYPOINTS],
}

impl Keypoints {
    pub fn from_flat(v: &[f64]) -> Self {
        let mut points = [[0.0; 2]; N_KEYPOINTS];
        for (k, p) in points.iter_mut().enumerate() {
            *p = [v[2 * k], v[2 * k + 1]];
        }
        Keypoints { points }
    }

    pub fn to_flat(&self) -> [f64; 2 * N_KEYPOINTS] {
        let mut out = [0.0; 2 * N_KEYPOINTS];
        for (k, p) in self.points.iter().enumerate() {
            out[2 * k] = p[0];
            out[2 * k + 1] = p[1];
        }
        out
    }

    /// Mean Euclidean distance between corresponding points.
    pub fn mean_distance(&self, other: &Keypoints) -> f64 {
        self.points
            .iter()
            .zip(other.points.iter())
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / N_KEYPOINTS as f64
    }
}

pub fn sample_factors(seed: u64, n: usize) -> Result<Vec<FactorVector>> {
    if n == 0 {
        return Err(Error::EmptyRequest("sample_factors needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sample_one(&mut rng)).collect())
}

pub(crate) fn sample_one(rng: &mut impl Rng) -> FactorVector {
    let mut a = [0.0; N_FACTORS];
    for (x, &(lo, hi)) in a.iter_mut().zip(FACTOR_RANGES.iter()) {
        *x = rng.random_range(lo..hi);
    }
    FactorVector::from_array(a)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub size: usize,
    pub sharpness: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { size: IMAGE_SIZE, sharpness: DEFAULT_SHARPNESS }
    }
}

/// Render at the default 64x64 resolution.
pub fn render(f: &FactorVector, sharpness: f64) -> Result<ToyImage> {
    render_with(f, RenderSettings { size: IMAGE_SIZE, sharpness })
}

pub fn render_with(f: &FactorVector, settings: RenderSettings) -> Result<ToyImage> {
    validate(f, settings)?;
    let factors = f.to_array();
    let size = settings.size;
    let mut pixels = vec![0.0; 3 * size * size];
    rasterize(&factors, settings, |idx, rgb: [f64; 3]| {
        for c in 0..3 {
            pixels[c * size * size + idx] = rgb[c];
        }
    });
    Ok(ToyImage { size, pixels })
}

/// Image together with `d pixel / d input` for `N` seeded inputs.
#[derive(Clone, Debug)]
pub struct RenderJacobian<const N: usize> {
    /// Row per pixel value, in image storage order.
    pub rows: Vec<[f64; N]>,
}

impl<const N: usize> RenderJacobian<N> {
    /// Vector-Jacobian product: gradient of a scalar loss with respect to
    /// the seeded inputs given its gradient with respect to the pixels.
    pub fn pullback(&self, grad_pixels: &[f64]) -> [f64; N] {
        let mut out = [0.0; N];
        for (row, &g) in self.rows.iter().zip(grad_pixels) {
            if g != 0.0 {
                for i in 0..N {
                    out[i] += g * row[i];
                }
            }
        }
        out
    }
}

/// Render from factors carrying tangents; returns the image and the
/// per-pixel tangents.
pub fn render_dual<const N: usize>(
    factors: &[Dual<N>; N_FACTORS],
    settings: RenderSettings,
) -> Result<(ToyImage, RenderJacobian<N>)> {
    if factors.iter().any(|x| !x.v.is_finite()) || !(settings.sharpness > 0.0) {
        return Err(Error::invalid("non-finite factor or non-positive sharpness"));
    }
    let size = settings.size;
    let hw = size * size;
    let mut pixels = vec![0.0; 3 * hw];
    let mut rows = vec![[0.0; N]; 3 * hw];
    rasterize(factors, settings, |idx, rgb: [Dual<N>; 3]| {
        for c in 0..3 {
            pixels[c * hw + idx] = rgb[c].v;
            rows[c * hw + idx] = rgb[c].d;
        }
    });
    Ok((ToyImage { size, pixels }, RenderJacobian { rows }))
}

/// Render and differentiate with respect to all eleven factors.
pub fn render_with_factor_jacobian(
    f: &FactorVector,
    settings: RenderSettings,
) -> Result<(ToyImage, RenderJacobian<N_FACTORS>)> {
    validate(f, settings)?;
    let a = f.to_array();
    let factors: [Dual<N_FACTORS>; N_FACTORS] = std::array::from_fn(|i| Dual::variable(a[i], i));
    render_dual(&factors, settings)
}

fn validate(f: &FactorVector, settings: RenderSettings) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::invalid("non-finite factor"));
    }
    if !(settings.sharpness > 0.0) || settings.size == 0 {
        return Err(Error::invalid("sharpness must be positive and size non-zero"));
    }
    Ok(())
}

const BACKGROUND: [f64; 3] = [0.10, 0.11, 0.13];
const HAIR: [f64; 3] = [0.45, 0.27, 0.12];
const EYE: [f64; 3] = [0.06, 0.06, 0.09];
const MOUTH: [f64; 3] = [0.55, 0.12, 0.14];
const LIGHT_TILT: f64 = 0.75;
const HAIR_SCALE: f64 = 1.25;
const EYE_RADIUS: f64 = 2.6;
const EYE_Y: f64 = -5.0;
const MOUTH_Y: f64 = 9.0;

/// Head semi-axes (horizontal, vertical).
fn head_axes<S: Scalar>(shape: S) -> (S, S) {
    (-(shape * 0.12) * 17.0 + 17.0, (shape * 0.10) * 21.0 + 21.0)
}

fn eye_offset<S: Scalar>(eyespan: S) -> S {
    eyespan * 2.0 + 7.0
}

fn mouth_half_width<S: Scalar>(open: S) -> S {
    -(open * 2.5) + 8.0
}

fn mouth_line<S: Scalar>(x: S, half_width: S, curve: S) -> S {
    let t = x / half_width;
    curve * 3.0 * (-(t * t) + 1.0) + MOUTH_Y
}

fn skin<S: Scalar>(hue: S) -> [S; 3] {
    [
        -(hue * 0.40) + 0.80,
        (hue * PI).sin() * 0.15 + 0.50,
        hue * 0.45 + 0.30,
    ]
}

/// Smooth map of the real line into (0, 1), close to identity inside.
fn soft_clamp<S: Scalar>(x: S) -> S {
    const K: f64 = 20.0;
    (((x * K).softplus() - ((x - 1.0) * K).softplus()) / K).clamp_value(0.0, 1.0)
}

fn rasterize<S: Scalar>(f: &[S; N_FACTORS], settings: RenderSettings, mut emit: impl FnMut(usize, [S; 3])) {
    let [shape, hue, eyespan, hair, theta_deg, tx, ty, curve, open, phi, gain] = *f;
    let size = settings.size;
    let px_scale = CANVAS / size as f64;
    // sharpness 8 gives an edge about two canvas pixels wide
    let k = settings.sharpness / 4.0;

    let theta = theta_deg * (PI / 180.0);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let (ax, ay) = head_axes(shape);
    let r_mean = (ax * ay).sqrt();
    let face = skin(hue);
    let eye_dx = eye_offset(eyespan);
    let mouth_hw = mouth_half_width(open);
    let mouth_th = open * 2.6 + 0.9;
    let hair_edge = ((hair * 0.75 + 0.15) * PI).cos();
    let light = [phi.cos() * LIGHT_TILT, phi.sin() * LIGHT_TILT];
    let light_z = (1.0 - LIGHT_TILT * LIGHT_TILT).sqrt();
    let hair_shade = gain * 0.9;

    for i in 0..size {
        let py = (i as f64 + 0.5) * px_scale;
        for j in 0..size {
            let px = (j as f64 + 0.5) * px_scale;
            let qx = -tx + (px - CENTER);
            let qy = -ty + (py - CENTER);
            // canonical (unrotated, centred) coordinates
            let x = cos_t * qx + sin_t * qy;
            let y = cos_t * qy - sin_t * qx;

            let u = x / ax;
            let v = y / ay;
            let rho = (u * u + v * v + 1e-12).sqrt();
            let head = ((-rho + 1.0) * r_mean * k).sigmoid();

            let n_norm = (u * u + v * v + 1.0).sqrt();
            let nx = cos_t * u - sin_t * v;
            let ny = sin_t * u + cos_t * v;
            let ndotl = (light[0] * nx + light[1] * ny + light_z) / n_norm;
            let shade = gain * (ndotl * 0.7 + 0.3);

            let outer = ((-rho / HAIR_SCALE + 1.0) * r_mean * (HAIR_SCALE * k)).sigmoid();
            let rxy = (x * x + y * y + 1e-9).sqrt();
            let up = -y / rxy;
            let hair_mask = outer * (-head + 1.0) * ((up - hair_edge) * 8.0).sigmoid();

            let dl = ((x + eye_dx).square() + (y - EYE_Y).square() + 1e-12).sqrt();
            let dr = ((x - eye_dx).square() + (y - EYE_Y).square() + 1e-12).sqrt();
            let eyes = ((-dl + EYE_RADIUS) * k).sigmoid() + ((-dr + EYE_RADIUS) * k).sigmoid();

            let m = mouth_line(x, mouth_hw, curve);
            let mouth = ((x + mouth_hw) * k).sigmoid()
                * ((mouth_hw - x) * k).sigmoid()
                * ((y - m + mouth_th) * k).sigmoid()
                * ((m + mouth_th - y) * k).sigmoid();

            let rgb: [S; 3] = std::array::from_fn(|c| {
                let mut col = S::cst(BACKGROUND[c]);
                col = col.lerp(hair_shade * HAIR[c], hair_mask);
                col = col.lerp(face[c] * shade, head);
                col = col.lerp(shade * EYE[c], eyes);
                col = col.lerp(shade * MOUTH[c], mouth);
                soft_clamp(col)
            });
            emit(i * size + j, rgb);
        }
    }
}

pub fn keypoints_of(f: &FactorVector) -> Result<Keypoints> {
    if !f.is_finite() {
        return Err(Error::invalid("non-finite factor"));
    }
    let (ax, _) = head_axes(f.id_shape);
    let ex = eye_offset(f.id_eyespan);
    let hw = mouth_half_width(f.expr_open);
    let mouth = |x: f64| [x, mouth_line(x, hw, f.expr_curve)];
    let canonical = [
        [-ex, EYE_Y],
        [ex, EYE_Y],
        mouth(-hw),
        mouth(-hw / 3.0),
        mouth(hw / 3.0),
        mouth(hw),
        [-ax, 0.0],
        [ax, 0.0],
    ];
    let theta = f.pose_theta.to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    let mut points = [[0.0; 2]; N_KEYPOINTS];
    for (p, q) in points.iter_mut().zip(canonical) {
        *p = [
            c * q[0] - s * q[1] + CENTER + f.pose_tx,
            s * q[0] + c * q[1] + CENTER + f.pose_ty,
        ];
    }
    Ok(Keypoints { points })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorBlock {
    Identity,
    Attribute,
}

/// Euclidean distance over one block with every field normalized by its
/// range; the light angle is compared on the circle.
pub fn factor_distance(a: &FactorVector, b: &FactorVector, block: FactorBlock) -> f64 {
    let (xa, xb) = (a.to_array(), b.to_array());
    let fields = match block {
        FactorBlock::Identity => 0..N_IDENTITY,
        FactorBlock::Attribute => N_IDENTITY..N_FACTORS,
    };
    fields
        .map(|i| {
            let (lo, hi) = FACTOR_RANGES[i];
            let mut d = (xa[i] - xb[i]).abs();
            if i == PHI {
                d = d.rem_euclid(TAU);
                d = d.min(TAU - d);
            }
            (d / (hi - lo)).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}
