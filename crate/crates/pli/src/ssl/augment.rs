//! Patch augmentations: rotation with direction-channel correction, Gaussian
//! blur, and transmittance contrast jitter.
//!
//! Rotation resamples bilinearly straight into a central crop sized so every
//! sample lands inside the source patch for any angle, and compensates the
//! (sin 2φ, cos 2φ) channels for the coordinate change.

use ndarray::{Array3, ArrayView3};
use rand::Rng;

use super::sample::ModalitySet;
use crate::error::{Error, Result};

/// Largest even crop that stays inside a rotated `patch_px` square.
#[must_use]
pub fn crop_for(patch_px: usize) -> usize {
    let c = ((patch_px as f64 - 1.0) / std::f64::consts::SQRT_2 + 1.0).floor() as usize;
    let c = c.min(patch_px);
    if c % 2 == 1 {
        c - 1
    } else {
        c
    }
}

/// Deterministic center crop matching the augmentation's zero-rotation frame.
pub fn center_crop(patch: &ArrayView3<'_, f32>, crop_px: usize) -> Result<Array3<f32>> {
    let (c, h, w) = patch.dim();
    if crop_px > h || crop_px > w {
        return Err(Error::invalid("crop larger than the patch"));
    }
    let y0 = (h - crop_px) / 2;
    let x0 = (w - crop_px) / 2;
    let mut out = Array3::<f32>::zeros((c, crop_px, crop_px));
    for ch in 0..c {
        for yy in 0..crop_px {
            for xx in 0..crop_px {
                out[[ch, yy, xx]] = patch[[ch, y0 + yy, x0 + xx]];
            }
        }
    }
    Ok(out)
}

/// Apply the augmentation chain with explicit knob values.
///
/// `theta_deg` rotates the content counterclockwise in the (col, row) plane,
/// `blur_sigma` is the Gaussian blur width in pixels, and `contrast` scales
/// the transmittance channel. Exposed so tests can pin the draws.
pub fn augment_with(
    patch: &ArrayView3<'_, f32>,
    modality: ModalitySet,
    theta_deg: f64,
    blur_sigma: f64,
    contrast: f64,
) -> Result<Array3<f32>> {
    let (c, h, w) = patch.dim();
    if c != modality.n_channels() {
        return Err(Error::invalid(format!(
            "patch has {c} channels but modality {} expects {}",
            modality.name(),
            modality.n_channels()
        )));
    }
    if h != w || h < 4 {
        return Err(Error::invalid("augmentation expects square patches of at least 4 px"));
    }
    let crop = crop_for(h);
    let mut out = Array3::<f32>::zeros((c, crop, crop));

    // Rotate: output offset o maps to source offset R(-theta) o, so the
    // content (and with it the fiber directions) turns by +theta.
    let t = theta_deg.to_radians();
    let (st, ct) = t.sin_cos();
    let src_center = (h as f64 - 1.0) / 2.0;
    let out_center = (crop as f64 - 1.0) / 2.0;
    for ch in 0..c {
        for yy in 0..crop {
            let dy = yy as f64 - out_center;
            for xx in 0..crop {
                let dx = xx as f64 - out_center;
                let sx = src_center + dx * ct + dy * st;
                let sy = src_center - dx * st + dy * ct;
                out[[ch, yy, xx]] = bilinear(patch, ch, sy, sx);
            }
        }
    }
    if let Some((si, ci)) = modality.direction_channels() {
        let (s2, c2) = (2.0 * t).sin_cos();
        let (s2, c2) = (s2 as f32, c2 as f32);
        for yy in 0..crop {
            for xx in 0..crop {
                let s = out[[si, yy, xx]];
                let co = out[[ci, yy, xx]];
                out[[si, yy, xx]] = s * c2 + co * s2;
                out[[ci, yy, xx]] = co * c2 - s * s2;
            }
        }
    }

    if blur_sigma > 1e-3 {
        blur_in_place(&mut out, blur_sigma);
    }

    if let Some(it) = modality.it_channel() {
        let f = contrast as f32;
        for v in out.index_axis_mut(ndarray::Axis(0), it).iter_mut() {
            *v *= f;
        }
    }
    Ok(out)
}

/// Random augmentation: rotation U[0, 360), blur sigma U[0, 1) px, and
/// contrast factor U[0.8, 1.25) on the transmittance channel.
pub fn augment<R: Rng>(
    patch: &ArrayView3<'_, f32>,
    modality: ModalitySet,
    rng: &mut R,
) -> Result<Array3<f32>> {
    let theta = rng.gen::<f64>() * 360.0;
    let sigma = rng.gen::<f64>();
    let contrast = 0.8 + rng.gen::<f64>() * 0.45;
    augment_with(patch, modality, theta, sigma, contrast)
}

fn bilinear(patch: &ArrayView3<'_, f32>, ch: usize, y: f64, x: f64) -> f32 {
    let (_, h, w) = patch.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let yi = (y0 as isize).clamp(0, h as isize - 1) as usize;
    let xi = (x0 as isize).clamp(0, w as isize - 1) as usize;
    let y1 = (yi + 1).min(h - 1);
    let x1 = (xi + 1).min(w - 1);
    let v00 = patch[[ch, yi, xi]];
    let v01 = patch[[ch, yi, x1]];
    let v10 = patch[[ch, y1, xi]];
    let v11 = patch[[ch, y1, x1]];
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// Separable Gaussian blur with edge replication.
fn blur_in_place(x: &mut Array3<f32>, sigma: f64) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / sum) as f32).collect();
    let (c, h, w) = x.dim();
    let mut tmp = vec![0.0f32; h * w];
    for ch in 0..c {
        // Horizontal pass into tmp.
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f32;
                for (ki, &k) in kernel.iter().enumerate() {
                    let sx = (xx as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * x[[ch, yy, sx]];
                }
                tmp[yy * w + xx] = acc;
            }
        }
        // Vertical pass back.
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f32;
                for (ki, &k) in kernel.iter().enumerate() {
                    let sy = (yy as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[sy * w + xx];
                }
                x[[ch, yy, xx]] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth_patch(size: usize) -> Array3<f32> {
        // Gently varying direction field plus smooth transmittance texture.
        let mut p = Array3::<f32>::zeros((4, size, size));
        for yy in 0..size {
            for xx in 0..size {
                let phi = 10.0 + 0.4 * yy as f64 + 0.25 * xx as f64;
                let two_phi = (2.0 * phi).to_radians();
                p[[0, yy, xx]] = 0.3 + 0.01 * (yy as f32) + 0.005 * (xx as f32);
                p[[1, yy, xx]] = 0.5 + 0.002 * (xx as f32);
                p[[2, yy, xx]] = two_phi.sin() as f32;
                p[[3, yy, xx]] = two_phi.cos() as f32;
            }
        }
        p
    }

    #[test]
    fn crop_sizes_leave_room_for_any_rotation() {
        assert_eq!(crop_for(32), 22);
        assert_eq!(crop_for(128), 90);
        for s in [8usize, 16, 32, 64, 128] {
            let c = crop_for(s);
            assert_eq!(c % 2, 0);
            let corner = (c as f64 - 1.0) / 2.0 * std::f64::consts::SQRT_2;
            assert!(corner <= (s as f64 - 1.0) / 2.0);
        }
    }

    #[test]
    fn neutral_knobs_reduce_to_center_crop() {
        let p = smooth_patch(32);
        let a = augment_with(&p.view(), ModalitySet::Full, 0.0, 0.0, 1.0).unwrap();
        let c = center_crop(&p.view(), 22).unwrap();
        assert_eq!(a.dim(), (4, 22, 22));
        for (x, y) in a.iter().zip(c.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn quarter_turn_shifts_a_uniform_direction_field() {
        // Uniform 10-degree direction: after a 90-degree turn the channels
        // must encode 100 degrees.
        let mut p = Array3::<f32>::zeros((4, 32, 32));
        let two_phi = 20f64.to_radians();
        for yy in 0..32 {
            for xx in 0..32 {
                p[[0, yy, xx]] = 0.5;
                p[[1, yy, xx]] = 0.5;
                p[[2, yy, xx]] = two_phi.sin() as f32;
                p[[3, yy, xx]] = two_phi.cos() as f32;
            }
        }
        let a = augment_with(&p.view(), ModalitySet::Full, 90.0, 0.0, 1.0).unwrap();
        let want = 200f64.to_radians();
        for yy in 0..22 {
            for xx in 0..22 {
                assert_relative_eq!(a[[2, yy, xx]], want.sin() as f32, epsilon = 1e-5);
                assert_relative_eq!(a[[3, yy, xx]], want.cos() as f32, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn rotation_turns_the_image_content() {
        // A bright horizontal stripe through the center becomes vertical
        // after a quarter turn.
        let mut p = Array3::<f32>::zeros((1, 32, 32));
        for xx in 0..32 {
            p[[0, 15, xx]] = 1.0;
            p[[0, 16, xx]] = 1.0;
        }
        let a = augment_with(&p.view(), ModalitySet::ItOnly, 90.0, 0.0, 1.0).unwrap();
        let mid = 22 / 2;
        assert!(a[[0, 3, mid - 1]] + a[[0, 3, mid]] > 0.9);
        assert!(a[[0, mid, 3]] < 0.1);
    }

    #[test]
    fn blur_keeps_constants_and_smooths_contrast() {
        let mut p = Array3::<f32>::from_elem((1, 32, 32), 0.7);
        let a = augment_with(&p.view(), ModalitySet::ItOnly, 0.0, 0.9, 1.0).unwrap();
        for &v in a.iter() {
            assert_relative_eq!(v, 0.7, epsilon = 1e-5);
        }
        // A checkerboard loses amplitude under blur.
        for yy in 0..32 {
            for xx in 0..32 {
                p[[0, yy, xx]] = if (yy + xx) % 2 == 0 { 1.0 } else { 0.0 };
            }
        }
        let sharp = augment_with(&p.view(), ModalitySet::ItOnly, 0.0, 0.0, 1.0).unwrap();
        let soft = augment_with(&p.view(), ModalitySet::ItOnly, 0.0, 0.9, 1.0).unwrap();
        let var = |m: &Array3<f32>| {
            let mean = m.mean().unwrap();
            m.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / m.len() as f32
        };
        assert!(var(&soft) < var(&sharp) * 0.2);
    }

    #[test]
    fn contrast_scales_transmittance_only() {
        let p = smooth_patch(32);
        let a = augment_with(&p.view(), ModalitySet::Full, 0.0, 0.0, 1.25).unwrap();
        let base = augment_with(&p.view(), ModalitySet::Full, 0.0, 0.0, 1.0).unwrap();
        for yy in 0..22 {
            for xx in 0..22 {
                assert_relative_eq!(a[[0, yy, xx]], 1.25 * base[[0, yy, xx]], epsilon = 1e-6);
                assert_relative_eq!(a[[1, yy, xx]], base[[1, yy, xx]], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn direction_identity_survives_rotation_within_tolerance() {
        let p = smooth_patch(32);
        for theta in [17.0, 45.0, 133.0, 301.0] {
            let a = augment_with(&p.view(), ModalitySet::Full, theta, 0.0, 1.0).unwrap();
            for yy in 0..22 {
                for xx in 0..22 {
                    let n = a[[2, yy, xx]].powi(2) + a[[3, yy, xx]].powi(2);
                    assert!((n - 1.0).abs() < 1e-2, "norm {n} at theta {theta}");
                }
            }
        }
    }

    #[test]
    fn random_draws_are_reproducible_and_in_range() {
        let p = smooth_patch(32);
        let a = augment(&p.view(), ModalitySet::Full, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&p.view(), ModalitySet::Full, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let c = augment(&p.view(), ModalitySet::Full, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.dim(), (4, 22, 22));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let p = smooth_patch(32);
        assert!(augment_with(&p.view(), ModalitySet::ItOnly, 0.0, 0.0, 1.0).is_err());
    }
}
