//! Scalar position arithmetic shared by the location-family mechanisms.

use crate::error::{Error, Result};

/// Softstair temperature.
pub const TAU: f64 = 20.0;
/// Negative slope of the focus clamp.
pub const CLAMP_SLOPE: f64 = 0.01;
/// Gate sharpness for content mixing and direction interpolation.
pub const BETA: f64 = 5.0;
/// Lower bound on the spread before division by the sequence length.
pub const MIN_SIGMA: f64 = 0.25;
/// Slope of the value pre-transform.
pub const LEAKY_SLOPE: f64 = 0.01;

/// `(i - 1) / max(1, s - 1)` for a 1-based position.
pub fn norm_position(i: usize, s: usize) -> Result<f64> {
    if i == 0 || i > s {
        return Err(Error::contract(format!("position {i} outside 1..={s}")));
    }
    Ok((i - 1) as f64 / (s.saturating_sub(1).max(1)) as f64)
}

/// Distance between adjacent normalized positions.
pub fn stepsize(s: usize) -> f64 {
    1.0 / s.saturating_sub(1).max(1) as f64
}

pub fn clamp_mu(mu: f64) -> f64 {
    let lo = CLAMP_SLOPE * mu;
    lo.max((1.0 + lo).min(mu))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softstair(x: f64) -> f64 {
    let fl = x.floor();
    fl + sigmoid(TAU * (x - fl - 0.5))
}

/// Normalized Gaussian over the `s` normalized positions.
pub fn location_weights(mu: f64, sigma: f64, s: usize) -> Result<Vec<f64>> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    if s == 0 {
        return Err(Error::contract("location weights over an empty sequence"));
    }
    let logits: Vec<f64> = (1..=s)
        .map(|i| {
            let z = norm_position(i, s).expect("in range") - mu;
            -z * z / (2.0 * sigma * sigma)
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Sinusoidal embedding of a signed distance: sin at even, cos at odd indices.
pub fn sinusoid(distance: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let j = (k / 2) as f64;
            let angle = distance / 10000f64.powf(2.0 * j / d as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Rotary frequency of coordinate pair `j`.
pub fn rope_theta(j: usize, d: usize) -> f64 {
    10000f64.powf(-2.0 * j as f64 / d as f64)
}

/// Rotates each coordinate pair `(2j, 2j+1)` of `v` by `rope_theta(j)·pos`.
pub fn rope_rotate(v: &[f64], pos: f64) -> Result<Vec<f64>> {
    let d = v.len();
    if !d.is_multiple_of(2) {
        return Err(Error::contract(format!("rotary embedding needs an even width, got {d}")));
    }
    let mut out = vec![0.0; d];
    for j in 0..d / 2 {
        let (s, c) = (rope_theta(j, d) * pos).sin_cos();
        let (x0, x1) = (v[2 * j], v[2 * j + 1]);
        out[2 * j] = x0 * c - x1 * s;
        out[2 * j + 1] = x0 * s + x1 * c;
    }
    Ok(out)
}
