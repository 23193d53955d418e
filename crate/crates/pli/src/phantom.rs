//! Synthetic rolled-sheet phantom with ground truth.
//!
//! The phantom is a spiral sheet (a rolled cortical layer) extruded along the
//! section axis, divided into proximal-distal bands that differ in fiber
//! orientation statistics and transmittance texture. Generation is driven by a
//! counter-based RNG keyed on `(seed, stream, voxel index)` so any evaluation
//! order — including parallel generation — produces identical volumes.

use ndarray::{Array3, Array4, ArrayView2, ArrayView3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, splitmix};
use crate::mesh::{grid_faces, SurfacePair};
use crate::signal::{profile_intensity, InclinationModel};

/// Label value for voxels outside the sheet.
pub const BACKGROUND_LABEL: u8 = 255;

/// Appearance of one proximal-distal band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandAppearance {
    /// In-plane fiber rotation relative to the sheet tangent, degrees.
    pub direction_offset_deg: f64,
    /// Mean out-of-plane inclination, degrees.
    pub inclination_deg: f64,
    /// Concentration of the inclination dispersion; `INFINITY` is a delta.
    pub dispersion_kappa: f64,
    /// Mean transmittance level.
    pub transmittance: f64,
    /// Transmittance noise amplitude.
    pub noise_sigma: f64,
    /// Correlation length of the transmittance noise in pixels; `<= 1` is white.
    pub noise_grain_px: f64,
}

/// Full description of a phantom volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Grid extents `[nx, n_sections, nz]`.
    pub grid: [usize; 3],
    /// In-plane pixel size in micrometers.
    pub pixel_size_um: f64,
    /// Distance between neighboring sections in micrometers.
    pub section_thickness_um: f64,
    /// Spiral start radius in pixels.
    pub spiral_r0_px: f64,
    /// Spiral end radius in pixels.
    pub spiral_r1_px: f64,
    /// Number of spiral turns.
    pub spiral_turns: f64,
    /// Amplitude of the sinusoidal center drift along the section axis, pixels.
    pub drift_px: f64,
    /// Sheet thickness in micrometers.
    pub layer_thickness_um: f64,
    /// Per-band appearance, proximal to distal.
    pub bands: Vec<BandAppearance>,
    /// Transmittance level outside the sheet.
    pub background_transmittance: f64,
    /// Transmittance noise amplitude outside the sheet.
    pub background_noise_sigma: f64,
    /// Amplitude of the shared laminar texture that follows the sheet.
    pub laminar_sigma: f64,
    /// Laminar correlation length along the sheet, pixels.
    pub laminar_grain_along_px: f64,
    /// Laminar correlation length across the sheet, pixels.
    pub laminar_grain_across_px: f64,
    /// Inclination draws are clamped to this range (degrees) to keep the
    /// retardation model well away from its non-invertible corners.
    pub inclination_clamp_deg: [f64; 2],
    /// Arc-direction vertex count of the emitted surfaces.
    pub surface_n_v: usize,
    /// Retardation model tying transmittance and inclination together.
    pub model: InclinationModel,
    /// Master seed for all generated randomness.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let tight = 130.0;
        let loose = 13.0;
        let fine = 1.0;
        let coarse = 4.0;
        PhantomSpec {
            grid: [192, 64, 192],
            pixel_size_um: 1.3,
            section_thickness_um: 60.0,
            spiral_r0_px: 18.0,
            spiral_r1_px: 66.0,
            spiral_turns: 2.0,
            drift_px: 6.0,
            layer_thickness_um: 15.6,
            bands: vec![
                band(0.0, 20.0, tight, 30.0, 3.5, fine),
                band(60.0, 20.0, tight, 48.0, 3.5, fine),
                band(120.0, 20.0, tight, 78.0, 3.5, fine),
                band(0.0, 20.0, tight, 30.0, 6.0, coarse),
                band(60.0, 20.0, tight, 48.0, 6.0, coarse),
                band(120.0, 20.0, loose, 78.0, 3.5, fine),
            ],
            background_transmittance: 92.0,
            background_noise_sigma: 2.0,
            laminar_sigma: 4.0,
            laminar_grain_along_px: 16.0,
            laminar_grain_across_px: 2.5,
            inclination_clamp_deg: [8.0, 80.0],
            surface_n_v: 144,
            model: InclinationModel::default(),
            seed: 7,
        }
    }
}

fn band(
    direction_offset_deg: f64,
    inclination_deg: f64,
    dispersion_kappa: f64,
    transmittance: f64,
    noise_sigma: f64,
    noise_grain_px: f64,
) -> BandAppearance {
    BandAppearance {
        direction_offset_deg,
        inclination_deg,
        dispersion_kappa,
        transmittance,
        noise_sigma,
        noise_grain_px,
    }
}

impl PhantomSpec {
    /// Sheet thickness in pixels.
    #[must_use]
    pub fn layer_thickness_px(&self) -> f64 {
        self.layer_thickness_um / self.pixel_size_um
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.grid;
        if nx < 8 || ny < 2 || nz < 8 {
            return Err(Error::invalid("phantom grid is too small"));
        }
        if !(self.pixel_size_um > 0.0) || !(self.section_thickness_um > 0.0) {
            return Err(Error::invalid("pixel size and section thickness must be positive"));
        }
        if !(self.spiral_r1_px > self.spiral_r0_px) || !(self.spiral_r0_px > 0.0) {
            return Err(Error::invalid("spiral radii must satisfy 0 < r0 < r1"));
        }
        if !(self.spiral_turns > 0.25) {
            return Err(Error::invalid("spiral needs at least a quarter turn"));
        }
        if self.bands.is_empty() {
            return Err(Error::invalid("phantom needs at least one band"));
        }
        if self.surface_n_v < 2 {
            return Err(Error::invalid("surfaces need at least 2 arc vertices"));
        }
        let half = 0.5 * self.layer_thickness_px();
        if !(half > 0.0) {
            return Err(Error::invalid("layer thickness must be positive"));
        }
        let reach = self.spiral_r1_px + half + self.drift_px.abs();
        let margin_x = 0.5 * nx as f64 - 1.0;
        let margin_z = 0.5 * nz as f64 - 1.0;
        if reach > margin_x.min(margin_z) {
            return Err(Error::invalid(format!(
                "layer does not fit grid: outer reach {reach:.1} px exceeds margin {:.1} px",
                margin_x.min(margin_z)
            )));
        }
        let pitch = (self.spiral_r1_px - self.spiral_r0_px) / self.spiral_turns;
        if pitch <= self.layer_thickness_px() {
            return Err(Error::invalid(format!(
                "layer does not fit grid: winding pitch {pitch:.1} px does not clear layer thickness {:.1} px",
                self.layer_thickness_px()
            )));
        }
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.transmittance > 0.0 && b.transmittance < self.model.i_ref) {
                return Err(Error::invalid(format!(
                    "band {i} transmittance must lie in (0, i_ref)"
                )));
            }
            if !(b.dispersion_kappa > 0.0) {
                return Err(Error::invalid(format!("band {i} dispersion must be positive")));
            }
        }
        let [lo, hi] = self.inclination_clamp_deg;
        if !(0.0 <= lo && lo < hi && hi <= 90.0) {
            return Err(Error::invalid("inclination clamp must be an ordered range in [0, 90]"));
        }
        Ok(())
    }

    fn center(&self, section: usize) -> [f64; 2] {
        let [nx, ny, nz] = self.grid;
        let phase = 2.0 * std::f64::consts::PI * section as f64 / ny as f64;
        [
            0.5 * (nx as f64 - 1.0) + self.drift_px * phase.sin(),
            0.5 * (nz as f64 - 1.0),
        ]
    }
}

/// Ground-truth output of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    /// Parameter maps `[n_sections, 4, H, W]` in standard channel order.
    pub maps: Array4<f32>,
    /// Band label per voxel, `[n_sections, H, W]`; background is 255.
    pub labels: Array3<u8>,
    /// Inner/outer sheet surfaces with flat-map coordinates and band labels.
    pub surfaces: SurfacePair,
}

// ---------------------------------------------------------------------------
// Counter-based RNG
// ---------------------------------------------------------------------------

pub(crate) const STREAM_WHITE: u64 = 1;
pub(crate) const STREAM_INCLINATION: u64 = 2;
pub(crate) const STREAM_LAMINAR: u64 = 3;
pub(crate) const STREAM_BLOTCH: u64 = 4;
pub(crate) const STREAM_STACK: u64 = 5;

fn keyed_normal(seed: u64, stream: u64, index: u64) -> f64 {
    keyed_rng(seed, stream, index).sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// Spiral geometry
// ---------------------------------------------------------------------------

/// Archimedean spiral with arc-length lookup, in center-relative coordinates.
pub(crate) struct Spiral {
    r0: f64,
    dr: f64,
    omega: f64,
    /// Cumulative arc length on a dense uniform `t` grid.
    cum_len: Vec<f64>,
}

/// Nearest-point query result.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SpiralHit {
    /// Arc-length fraction in `[0, 1]`.
    pub v: f64,
    /// Signed distance to the mid-line, pixels (positive on the outward side).
    pub d: f64,
    /// Tangent direction at the foot point, degrees in `[0, 180)`.
    pub tangent_deg: f64,
    /// True when the nearest point is a spiral end (cap region).
    pub cap: bool,
}

const DENSE: usize = 4096;

impl Spiral {
    pub fn new(r0: f64, r1: f64, turns: f64) -> Spiral {
        let omega = 2.0 * std::f64::consts::PI * turns;
        let dr = r1 - r0;
        let mut cum_len = Vec::with_capacity(DENSE + 1);
        cum_len.push(0.0);
        let mut prev = [r0, 0.0];
        let mut acc = 0.0;
        for i in 1..=DENSE {
            let t = i as f64 / DENSE as f64;
            let p = Self::point_raw(r0, dr, omega, t);
            acc += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
            cum_len.push(acc);
            prev = p;
        }
        Spiral { r0, dr, omega, cum_len }
    }

    fn point_raw(r0: f64, dr: f64, omega: f64, t: f64) -> [f64; 2] {
        let rho = r0 + dr * t;
        let psi = omega * t;
        [rho * psi.cos(), rho * psi.sin()]
    }

    pub fn total_len(&self) -> f64 {
        *self.cum_len.last().unwrap()
    }

    fn arc_fraction(&self, t: f64) -> f64 {
        let x = t.clamp(0.0, 1.0) * DENSE as f64;
        let i = (x as usize).min(DENSE - 1);
        let frac = x - i as f64;
        let s = self.cum_len[i] + frac * (self.cum_len[i + 1] - self.cum_len[i]);
        s / self.total_len()
    }

    /// Invert the arc-length fraction to the parameter `t`.
    pub fn t_at_fraction(&self, v: f64) -> f64 {
        let target = v.clamp(0.0, 1.0) * self.total_len();
        let idx = self.cum_len.partition_point(|&s| s < target);
        if idx == 0 {
            return 0.0;
        }
        let i = idx.min(DENSE);
        let lo = self.cum_len[i - 1];
        let hi = self.cum_len[i];
        let frac = if hi > lo { (target - lo) / (hi - lo) } else { 0.0 };
        ((i - 1) as f64 + frac) / DENSE as f64
    }

    pub fn point(&self, t: f64) -> [f64; 2] {
        Self::point_raw(self.r0, self.dr, self.omega, t)
    }

    fn velocity(&self, t: f64) -> [f64; 2] {
        let rho = self.r0 + self.dr * t;
        let psi = self.omega * t;
        let (s, c) = psi.sin_cos();
        [
            self.dr * c - rho * self.omega * s,
            self.dr * s + rho * self.omega * c,
        ]
    }

    fn acceleration(&self, t: f64) -> [f64; 2] {
        let rho = self.r0 + self.dr * t;
        let psi = self.omega * t;
        let (s, c) = psi.sin_cos();
        [
            -2.0 * self.dr * self.omega * s - rho * self.omega * self.omega * c,
            2.0 * self.dr * self.omega * c - rho * self.omega * self.omega * s,
        ]
    }

    /// Tangent direction at `t`, degrees wrapped to `[0, 180)`.
    pub fn tangent_deg(&self, t: f64) -> f64 {
        let vel = self.velocity(t);
        let mut a = vel[1].atan2(vel[0]).to_degrees().rem_euclid(180.0);
        if a >= 180.0 {
            a -= 180.0;
        }
        a
    }

    /// Outward in-plane unit normal at `t`.
    pub fn outward_normal(&self, t: f64) -> [f64; 2] {
        let vel = self.velocity(t);
        let len = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        let mut n = [-vel[1] / len, vel[0] / len];
        let p = self.point(t);
        if n[0] * p[0] + n[1] * p[1] < 0.0 {
            n = [-n[0], -n[1]];
        }
        n
    }

    fn dist2(&self, t: f64, p: [f64; 2]) -> f64 {
        let q = self.point(t);
        (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
    }

    /// Newton refinement of the perpendicular-foot equation from `t0`.
    fn refine(&self, mut t: f64, p: [f64; 2], lo: f64, hi: f64) -> f64 {
        for _ in 0..12 {
            let q = self.point(t);
            let vel = self.velocity(t);
            let acc = self.acceleration(t);
            let e = [q[0] - p[0], q[1] - p[1]];
            let f = e[0] * vel[0] + e[1] * vel[1];
            let fp = vel[0] * vel[0] + vel[1] * vel[1] + e[0] * acc[0] + e[1] * acc[1];
            if fp.abs() < 1e-12 {
                break;
            }
            let next = (t - f / fp).clamp(lo, hi);
            if (next - t).abs() < 1e-12 {
                t = next;
                break;
            }
            t = next;
        }
        t
    }

    /// Globally nearest point for a center-relative position.
    pub fn nearest(&self, p: [f64; 2]) -> SpiralHit {
        let theta = p[1].atan2(p[0]).rem_euclid(2.0 * std::f64::consts::PI);
        let turns = self.omega / (2.0 * std::f64::consts::PI);
        let mut best_t = 0.0;
        let mut best_d2 = self.dist2(0.0, p);
        let end_d2 = self.dist2(1.0, p);
        if end_d2 < best_d2 {
            best_t = 1.0;
            best_d2 = end_d2;
        }
        let mut k = 0.0;
        loop {
            let t0 = (theta / (2.0 * std::f64::consts::PI) + k) / turns;
            if t0 > 1.0 + 0.5 / turns {
                break;
            }
            let lo = (t0 - 0.45 / turns).max(0.0);
            let hi = (t0 + 0.45 / turns).min(1.0);
            if lo < hi {
                let t = self.refine(t0.clamp(lo, hi), p, lo, hi);
                let d2 = self.dist2(t, p);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best_t = t;
                }
            }
            k += 1.0;
        }
        let cap = best_t <= 1e-9 || best_t >= 1.0 - 1e-9;
        let q = self.point(best_t);
        let n = self.outward_normal(best_t);
        let d = (p[0] - q[0]) * n[0] + (p[1] - q[1]) * n[1];
        SpiralHit {
            v: self.arc_fraction(best_t),
            d,
            tangent_deg: self.tangent_deg(best_t),
            cap,
        }
    }
}

// ---------------------------------------------------------------------------
// Noise fields
// ---------------------------------------------------------------------------

/// Per-section 2D value noise over sheet coordinates `(s, d)`.
struct LaminarField {
    grain_s: f64,
    grain_d: f64,
    n_s: usize,
    n_d: usize,
    /// One lattice per section, row-major `[n_d][n_s]`.
    lattices: Vec<Vec<f64>>,
}

impl LaminarField {
    fn new(spec: &PhantomSpec, total_arc: f64) -> LaminarField {
        let grain_s = spec.laminar_grain_along_px.max(1.0);
        let grain_d = spec.laminar_grain_across_px.max(0.5);
        let half = 0.5 * spec.layer_thickness_px();
        let n_s = (total_arc / grain_s).ceil() as usize + 2;
        let n_d = (2.0 * half / grain_d).ceil() as usize + 2;
        let lattices = (0..spec.grid[1])
            .map(|section| {
                (0..n_s * n_d)
                    .map(|node| {
                        keyed_normal(
                            spec.seed,
                            STREAM_LAMINAR,
                            (section * n_s * n_d + node) as u64,
                        )
                    })
                    .collect()
            })
            .collect();
        LaminarField { grain_s, grain_d, n_s, n_d, lattices }
    }

    /// Bilinear value noise, normalized to unit variance everywhere.
    fn value(&self, section: usize, s_px: f64, d_px: f64, half_thickness: f64) -> f64 {
        let gs = (s_px / self.grain_s).clamp(0.0, (self.n_s - 2) as f64);
        let gd = ((d_px + half_thickness) / self.grain_d).clamp(0.0, (self.n_d - 2) as f64);
        let i = gs as usize;
        let j = gd as usize;
        let fs = gs - i as f64;
        let fd = gd - j as f64;
        let lat = &self.lattices[section];
        let at = |jj: usize, ii: usize| lat[jj * self.n_s + ii];
        let w00 = (1.0 - fs) * (1.0 - fd);
        let w10 = fs * (1.0 - fd);
        let w01 = (1.0 - fs) * fd;
        let w11 = fs * fd;
        let raw = w00 * at(j, i) + w10 * at(j, i + 1) + w01 * at(j + 1, i) + w11 * at(j + 1, i + 1);
        let norm = (w00 * w00 + w10 * w10 + w01 * w01 + w11 * w11).sqrt();
        raw / norm
    }
}

/// 3D value noise with per-section independence, for band blotch textures.
struct BlotchField {
    grain: f64,
    n_x: usize,
    n_z: usize,
    lattices: Vec<Vec<f64>>,
}

impl BlotchField {
    fn new(spec: &PhantomSpec, grain: f64) -> BlotchField {
        let [nx, ny, nz] = spec.grid;
        let n_x = (nx as f64 / grain).ceil() as usize + 2;
        let n_z = (nz as f64 / grain).ceil() as usize + 2;
        let grain_key = grain.to_bits();
        let lattices = (0..ny)
            .map(|section| {
                (0..n_x * n_z)
                    .map(|node| {
                        keyed_normal(
                            spec.seed,
                            STREAM_BLOTCH,
                            splitmix(grain_key ^ (section * n_x * n_z + node) as u64),
                        )
                    })
                    .collect()
            })
            .collect();
        BlotchField { grain, n_x, n_z, lattices }
    }

    fn value(&self, section: usize, x: f64, z: f64) -> f64 {
        let gx = (x / self.grain).clamp(0.0, (self.n_x - 2) as f64);
        let gz = (z / self.grain).clamp(0.0, (self.n_z - 2) as f64);
        let i = gx as usize;
        let j = gz as usize;
        let fx = gx - i as f64;
        let fz = gz - j as f64;
        let lat = &self.lattices[section];
        let at = |jj: usize, ii: usize| lat[jj * self.n_x + ii];
        let w00 = (1.0 - fx) * (1.0 - fz);
        let w10 = fx * (1.0 - fz);
        let w01 = (1.0 - fx) * fz;
        let w11 = fx * fz;
        let raw = w00 * at(j, i) + w10 * at(j, i + 1) + w01 * at(j + 1, i) + w11 * at(j + 1, i + 1);
        let norm = (w00 * w00 + w10 * w10 + w01 * w01 + w11 * w11).sqrt();
        raw / norm
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Generate the full phantom truth for `spec`.
///
/// The same spec always produces the identical volume, independent of the
/// number of worker threads.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomTruth> {
    spec.validate()?;
    let [nx, ny, nz] = spec.grid;
    let spiral = Spiral::new(spec.spiral_r0_px, spec.spiral_r1_px, spec.spiral_turns);
    let total_arc = spiral.total_len();
    let laminar = LaminarField::new(spec, total_arc);
    let mut blotch_grains: Vec<f64> = spec
        .bands
        .iter()
        .filter(|b| b.noise_grain_px > 1.0)
        .map(|b| b.noise_grain_px)
        .collect();
    blotch_grains.sort_by(f64::total_cmp);
    blotch_grains.dedup();
    let blotches: Vec<BlotchField> = blotch_grains
        .iter()
        .map(|&g| BlotchField::new(spec, g))
        .collect();
    let blotch_for = |grain: f64| -> Option<&BlotchField> {
        blotch_grains
            .iter()
            .position(|&g| g == grain)
            .map(|i| &blotches[i])
    };

    let half = 0.5 * spec.layer_thickness_px();
    let n_bands = spec.bands.len();
    let [clamp_lo, clamp_hi] = spec.inclination_clamp_deg;

    let sections: Vec<(Vec<f32>, Vec<u8>)> = (0..ny)
        .into_par_iter()
        .map(|y| {
            let center = spec.center(y);
            let mut maps = vec![0.0f32; 4 * nz * nx];
            let mut labels = vec![BACKGROUND_LABEL; nz * nx];
            for z in 0..nz {
                for x in 0..nx {
                    let p = [x as f64 - center[0], z as f64 - center[1]];
                    let hit = spiral.nearest(p);
                    let idx = z * nx + x;
                    let voxel = ((y * nz + z) * nx + x) as u64;
                    let in_layer = !hit.cap && hit.d.abs() <= half;
                    let (it, phi, alpha) = if in_layer {
                        let b = ((hit.v * n_bands as f64) as usize).min(n_bands - 1);
                        let app = &spec.bands[b];
                        let noise = if app.noise_grain_px > 1.0 {
                            blotch_for(app.noise_grain_px)
                                .expect("grain registered")
                                .value(y, x as f64, z as f64)
                        } else {
                            keyed_normal(spec.seed, STREAM_WHITE, voxel)
                        };
                        let lam = laminar.value(y, hit.v * total_arc, hit.d, half);
                        let it = (app.transmittance
                            + app.noise_sigma * noise
                            + spec.laminar_sigma * lam)
                            .clamp(5.0, spec.model.i_ref - 2.0);
                        let sigma_deg = if app.dispersion_kappa.is_finite() {
                            app.dispersion_kappa.powf(-0.5).to_degrees()
                        } else {
                            0.0
                        };
                        let draw = if sigma_deg > 0.0 {
                            keyed_normal(spec.seed, STREAM_INCLINATION, voxel)
                        } else {
                            0.0
                        };
                        let alpha =
                            (app.inclination_deg + sigma_deg * draw).clamp(clamp_lo, clamp_hi);
                        let phi = (hit.tangent_deg + app.direction_offset_deg).rem_euclid(180.0);
                        labels[idx] = b as u8;
                        (it, phi, alpha)
                    } else {
                        let noise = keyed_normal(spec.seed, STREAM_WHITE, voxel);
                        let it = (spec.background_transmittance
                            + spec.background_noise_sigma * noise)
                            .clamp(5.0, spec.model.i_ref + 20.0);
                        (it, 0.0, 90.0)
                    };
                    // Round appearance to storage precision first so the
                    // stored retardation is the exact forward image of the
                    // stored transmittance and inclination.
                    let it32 = it as f32;
                    let phi32 = phi as f32;
                    let alpha32 = alpha as f32;
                    let r32 = if alpha32 >= 90.0 {
                        0.0f32
                    } else {
                        spec.model.retardation(f64::from(alpha32), f64::from(it32)) as f32
                    };
                    maps[idx] = it32;
                    maps[nz * nx + idx] = phi32;
                    maps[2 * nz * nx + idx] = r32;
                    maps[3 * nz * nx + idx] = alpha32;
                }
            }
            (maps, labels)
        })
        .collect();

    let mut maps = Array4::<f32>::zeros((ny, 4, nz, nx));
    let mut labels = Array3::<u8>::zeros((ny, nz, nx));
    for (y, (m, l)) in sections.into_iter().enumerate() {
        maps.index_axis_mut(ndarray::Axis(0), y)
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&m);
        labels
            .index_axis_mut(ndarray::Axis(0), y)
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&l);
    }

    let surfaces = build_surfaces(spec, &spiral)?;
    Ok(PhantomTruth { maps, labels, surfaces })
}

fn build_surfaces(spec: &PhantomSpec, spiral: &Spiral) -> Result<SurfacePair> {
    let [_, ny, _] = spec.grid;
    let n_u = ny;
    let n_v = spec.surface_n_v;
    let half = 0.5 * spec.layer_thickness_px();
    let n_bands = spec.bands.len();
    let mut inner = Vec::with_capacity(n_u * n_v);
    let mut outer = Vec::with_capacity(n_u * n_v);
    let mut uv = Vec::with_capacity(n_u * n_v);
    let mut labels = Vec::with_capacity(n_u * n_v);
    for iu in 0..n_u {
        let center = spec.center(iu);
        let u = iu as f64 / (n_u - 1) as f64;
        for iv in 0..n_v {
            let v = iv as f64 / (n_v - 1) as f64;
            let t = spiral.t_at_fraction(v);
            let p = spiral.point(t);
            let n = spiral.outward_normal(t);
            let mid = [center[0] + p[0], center[1] + p[1]];
            inner.push([mid[0] - half * n[0], iu as f64, mid[1] - half * n[1]]);
            outer.push([mid[0] + half * n[0], iu as f64, mid[1] + half * n[1]]);
            uv.push([u, v]);
            labels.push(((v * n_bands as f64) as usize).min(n_bands - 1) as u8);
        }
    }
    let pair = SurfacePair {
        inner,
        outer,
        uv,
        labels,
        faces: grid_faces(n_u, n_v),
    };
    pair.validate()?;
    Ok(pair)
}

// ---------------------------------------------------------------------------
// Stack rendering
// ---------------------------------------------------------------------------

/// Render the measurement stack `[n_angles, H, W]` for one section.
///
/// Evaluates the forward profile model per pixel, adds i.i.d. Gaussian noise
/// of standard deviation `sigma`, and clamps at zero. Noise draws are keyed on
/// `(seed, section, angle, pixel)` so rendering order does not matter.
pub fn render_stack(
    section_maps: &ArrayView3<f32>,
    section: usize,
    angles_deg: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<Array3<f32>> {
    let (ch, h, w) = section_maps.dim();
    if ch != 4 {
        return Err(Error::invalid(format!("expected 4 map channels, got {ch}")));
    }
    if angles_deg.len() < 3 {
        return Err(Error::invalid("need at least 3 rotation angles"));
    }
    if sigma < 0.0 {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    let n_angles = angles_deg.len();
    let mut stack = Array3::<f32>::zeros((n_angles, h, w));
    let planes: Vec<Vec<f32>> = (0..n_angles)
        .into_par_iter()
        .map(|a| {
            let rho = angles_deg[a];
            let mut plane = vec![0.0f32; h * w];
            for zz in 0..h {
                for xx in 0..w {
                    let it = f64::from(section_maps[[0, zz, xx]]);
                    let phi = f64::from(section_maps[[1, zz, xx]]);
                    let r = f64::from(section_maps[[2, zz, xx]]);
                    let mut i = profile_intensity(it, phi, r, rho);
                    if sigma > 0.0 {
                        let key = (((section * n_angles + a) * h + zz) * w + xx) as u64;
                        i += sigma * keyed_normal(seed, STREAM_STACK, key);
                    }
                    plane[zz * w + xx] = i.max(0.0) as f32;
                }
            }
            plane
        })
        .collect();
    for (a, plane) in planes.into_iter().enumerate() {
        stack
            .index_axis_mut(ndarray::Axis(0), a)
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&plane);
    }
    Ok(stack)
}

/// Views of one section's `[4, H, W]` truth maps.
#[must_use]
pub fn section_maps(truth: &PhantomTruth, section: usize) -> ArrayView3<'_, f32> {
    truth.maps.index_axis(ndarray::Axis(0), section)
}

/// View of one section's labels.
#[must_use]
pub fn section_labels(truth: &PhantomTruth, section: usize) -> ArrayView2<'_, u8> {
    truth.labels.index_axis(ndarray::Axis(0), section)
}
