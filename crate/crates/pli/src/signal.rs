//! Sinusoidal profile analysis: harmonic fitting of rotation-angle intensity
//! profiles, the transmittance-weighted inclination model, and fiber
//! orientation map (FOM) coloring.
//!
//! A measured profile follows `I(rho) = (I_T/2) * (1 + r * sin(2*(rho - phi)))`
//! where `I_T` is transmittance, `r` retardation and `phi` the in-plane
//! direction. The discrete second-harmonic sums recover all three exactly on
//! noise-free profiles sampled at three or more distinct angles.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// Channel order of a `[4, H, W]` parameter-map tensor.
pub const CH_TRANSMITTANCE: usize = 0;
pub const CH_DIRECTION: usize = 1;
pub const CH_RETARDATION: usize = 2;
pub const CH_INCLINATION: usize = 3;

/// Retardations below this are treated as degenerate: the direction is
/// unobservable and reported as 0.
pub const DEGENERATE_RETARDATION: f64 = 1e-9;

/// Result of fitting one intensity profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileFit {
    /// Transmittance `I_T` (twice the profile mean).
    pub transmittance: f64,
    /// In-plane direction in degrees, wrapped to `[0, 180)`.
    pub direction_deg: f64,
    /// Retardation `r`, clamped to `[0, 1]`.
    pub retardation: f64,
    /// True when the profile is flat and the direction is meaningless.
    pub degenerate: bool,
}

/// Evaluate the forward profile model at one rotation angle (degrees).
#[must_use]
pub fn profile_intensity(transmittance: f64, direction_deg: f64, retardation: f64, rho_deg: f64) -> f64 {
    let arg = 2.0 * (rho_deg - direction_deg).to_radians();
    0.5 * transmittance * (1.0 + retardation * arg.sin())
}

/// Default rotation angles: `n` equally spaced steps covering `[0, 180)` degrees.
#[must_use]
pub fn default_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| 180.0 * i as f64 / n as f64).collect()
}

/// Fit transmittance, direction and retardation to one intensity profile.
///
/// Needs at least three samples and a positive mean intensity.
pub fn fit_profile(intensities: &[f64], angles_deg: &[f64]) -> Result<ProfileFit> {
    if intensities.len() != angles_deg.len() {
        return Err(Error::invalid(format!(
            "profile has {} intensities but {} angles",
            intensities.len(),
            angles_deg.len()
        )));
    }
    let n = intensities.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "profile needs at least 3 samples, got {n}"
        )));
    }
    let mut mean = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for (&i, &rho) in intensities.iter().zip(angles_deg) {
        let two_rho = 2.0 * rho.to_radians();
        mean += i;
        b += i * two_rho.sin();
        c += i * two_rho.cos();
    }
    mean /= n as f64;
    b *= 2.0 / n as f64;
    c *= 2.0 / n as f64;
    if mean <= 0.0 {
        return Err(Error::invalid("profile mean intensity is not positive"));
    }
    let raw_retardation = (b * b + c * c).sqrt() / mean;
    let degenerate = raw_retardation < DEGENERATE_RETARDATION;
    let direction_deg = if degenerate {
        0.0
    } else {
        let mut phi = 0.5 * (-c).atan2(b).to_degrees();
        if phi < 0.0 {
            phi += 180.0;
        }
        // atan2 can land exactly on the branch point; 180 is the same axis as 0.
        if phi >= 180.0 {
            phi -= 180.0;
        }
        phi
    };
    Ok(ProfileFit {
        transmittance: 2.0 * mean,
        direction_deg,
        retardation: raw_retardation.clamp(0.0, 1.0),
        degenerate,
    })
}

/// Transmittance-weighted inclination model.
///
/// The effective phase is `delta0 * w(I_T) * cos^2(alpha)` with the weight
/// `w(I_T) = clamp((i_ref - I_T) / (i_ref - i_min), 0, 1)`, so retardation is
/// invertible to an out-of-plane inclination wherever `w > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InclinationModel {
    /// Maximum phase at flat inclination and full weight (radians).
    pub delta0: f64,
    /// Transmittance at and above which the weight vanishes.
    pub i_ref: f64,
    /// Transmittance at and below which the weight saturates at one.
    pub i_min: f64,
}

impl Default for InclinationModel {
    fn default() -> Self {
        InclinationModel {
            delta0: std::f64::consts::FRAC_PI_2,
            i_ref: 100.0,
            i_min: 20.0,
        }
    }
}

impl InclinationModel {
    pub fn new(delta0: f64, i_ref: f64, i_min: f64) -> Result<Self> {
        if !(delta0 > 0.0) || !delta0.is_finite() {
            return Err(Error::invalid("delta0 must be positive and finite"));
        }
        if !(i_ref > i_min) {
            return Err(Error::invalid("i_ref must exceed i_min"));
        }
        Ok(InclinationModel { delta0, i_ref, i_min })
    }

    /// Transmittance weight `w(I_T)` in `[0, 1]`.
    #[must_use]
    pub fn weight(&self, transmittance: f64) -> f64 {
        ((self.i_ref - transmittance) / (self.i_ref - self.i_min)).clamp(0.0, 1.0)
    }

    /// Forward model: retardation produced by a fiber at `alpha_deg` inclination.
    #[must_use]
    pub fn retardation(&self, alpha_deg: f64, transmittance: f64) -> f64 {
        let cos_a = alpha_deg.to_radians().cos();
        (self.delta0 * self.weight(transmittance) * cos_a * cos_a).sin()
    }

    /// Invert a fitted retardation to an inclination in degrees.
    ///
    /// Flat weight or a degenerate retardation means the fiber is treated as
    /// fully out-of-plane (90 degrees).
    #[must_use]
    pub fn inclination(&self, retardation: f64, transmittance: f64) -> f64 {
        let w = self.weight(transmittance);
        if w <= 0.0 || retardation < DEGENERATE_RETARDATION {
            return 90.0;
        }
        let q = (retardation.clamp(0.0, 1.0).asin() / (self.delta0 * w)).clamp(0.0, 1.0);
        q.sqrt().acos().to_degrees()
    }
}

/// Map direction and inclination to the standard FOM color.
///
/// Hue encodes twice the direction; saturation and value both fall linearly
/// with inclination so steep fibers darken to black.
#[must_use]
pub fn fom_color(direction_deg: f64, inclination_deg: f64) -> [u8; 3] {
    let hue = (2.0 * direction_deg).rem_euclid(360.0);
    let sv = (1.0 - inclination_deg / 90.0).clamp(0.0, 1.0);
    hsv_to_rgb(hue, sv, sv)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to_u8 = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_u8(r1), to_u8(g1), to_u8(b1)]
}

/// Render the FOM image for one `[4, H, W]` parameter-map tensor.
pub fn render_fom(maps: &ArrayView3<f32>) -> Result<ndarray::Array3<u8>> {
    let (ch, h, w) = maps.dim();
    if ch != 4 {
        return Err(Error::invalid(format!("expected 4 map channels, got {ch}")));
    }
    let mut out = ndarray::Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let rgb = fom_color(
                f64::from(maps[[CH_DIRECTION, y, x]]),
                f64::from(maps[[CH_INCLINATION, y, x]]),
            );
            for c in 0..3 {
                out[[y, x, c]] = rgb[c];
            }
        }
    }
    Ok(out)
}

/// Fit every pixel of an `[N_angles, H, W]` stack into a `[4, H, W]` map tensor.
///
/// Channels are transmittance, direction (deg), retardation, inclination (deg).
/// Rows are processed in parallel; results do not depend on the worker count.
pub fn derive_maps(
    stack: &ArrayView3<f32>,
    angles_deg: &[f64],
    model: &InclinationModel,
) -> Result<Array3<f32>> {
    use rayon::prelude::*;

    let (n_angles, h, w) = stack.dim();
    if n_angles != angles_deg.len() {
        return Err(Error::invalid(format!(
            "stack has {n_angles} angle planes but {} angles were given",
            angles_deg.len()
        )));
    }
    if n_angles < 3 {
        return Err(Error::invalid("stack needs at least 3 angle planes"));
    }
    let rows: Vec<Result<Vec<[f32; 4]>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            let mut profile = vec![0.0f64; n_angles];
            for x in 0..w {
                for a in 0..n_angles {
                    profile[a] = f64::from(stack[[a, y, x]]);
                }
                let fit = fit_profile(&profile, angles_deg)?;
                row.push([
                    fit.transmittance as f32,
                    fit.direction_deg as f32,
                    fit.retardation as f32,
                    model.inclination(fit.retardation, fit.transmittance) as f32,
                ]);
            }
            Ok(row)
        })
        .collect();
    let mut maps = Array3::<f32>::zeros((4, h, w));
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row?.into_iter().enumerate() {
            for ch in 0..4 {
                maps[[ch, y, x]] = px[ch];
            }
        }
    }
    Ok(maps)
}
