//! Pipeline configuration: one flat UTF-8 file of dotted `key = value` lines
//! covering every stage, strictly validated.
//!
//! Unknown and duplicate keys are rejected so a typo cannot silently fall
//! back to a default, and `parse(serialize(c)) == c` holds for any config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::ssl::{Activation, EncoderConfig, ModalitySet, SamplerMode, TrainConfig};

/// Every knob of the pipeline, stage by stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Directory all stage artifacts are written under.
    pub out_dir: PathBuf,
    /// Master seed for evaluation-side randomness (clustering protocol).
    pub seed: u64,
    /// Phantom description; band structure stays at its built-in default.
    pub phantom: PhantomSpec,
    /// Polarizer rotation angle count for the measurement simulation.
    pub angles: usize,
    /// Measurement noise standard deviation, intensity units.
    pub noise_sigma: f64,
    /// Positive-pair geometry: in-plane or cross-section.
    pub sampler_mode: SamplerMode,
    /// Positive-pair distance in micrometers.
    pub sampler_radius_um: f64,
    /// Contrastive patch side length in pixels.
    pub patch_px: usize,
    /// Which map channels the encoder sees.
    pub modality: ModalitySet,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Window overlap for sliding-window inference.
    pub featmap_overlap: f64,
    /// Window size of the orientation-scatter baseline features.
    pub baseline_patch_px: usize,
    pub baseline_stride_px: usize,
    /// Depth levels sampled between the surfaces, inclusive.
    pub depths: usize,
    pub smooth_iters: usize,
    pub smooth_include_self: bool,
    /// Explained-variance threshold selecting the PCA component count.
    pub pca_threshold: f64,
    pub cluster_k: usize,
    pub cluster_runs: usize,
    pub cluster_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("pli-out"),
            seed: 7,
            phantom: PhantomSpec::default(),
            angles: 18,
            noise_sigma: 0.5,
            sampler_mode: SamplerMode::Cl3d,
            sampler_radius_um: 118.0,
            patch_px: 32,
            modality: ModalitySet::Full,
            encoder: EncoderConfig::desk(),
            train: TrainConfig::desk(),
            featmap_overlap: 0.5,
            baseline_patch_px: 16,
            baseline_stride_px: 16,
            depths: 17,
            smooth_iters: 3,
            smooth_include_self: true,
            pca_threshold: 0.8,
            cluster_k: 6,
            cluster_runs: 25,
            cluster_fraction: 0.5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("{key}: `{value}` is not {what}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: `{value}` is not `true` or `false`"
        ))),
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse_num::<usize>(key, p.trim(), "an unsigned integer"))
        .collect()
}

fn parse_grid(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::config(format!(
            "{key}: `{value}` is not of the form HxSxW"
        )));
    }
    Ok([
        parse_num(key, parts[0].trim(), "an unsigned integer")?,
        parse_num(key, parts[1].trim(), "an unsigned integer")?,
        parse_num(key, parts[2].trim(), "an unsigned integer")?,
    ])
}

fn parse_pair_f64(key: &str, value: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::config(format!(
            "{key}: `{value}` is not a `low,high` pair"
        )));
    }
    Ok([
        parse_num(key, parts[0].trim(), "a number")?,
        parse_num(key, parts[1].trim(), "a number")?,
    ])
}

fn join_list(values: &[usize]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl PipelineConfig {
    /// Apply one `key = value` assignment.
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value, "an unsigned integer")?,

            "phantom.grid" => self.phantom.grid = parse_grid(key, value)?,
            "phantom.pixel_size_um" => self.phantom.pixel_size_um = parse_num(key, value, "a number")?,
            "phantom.section_thickness_um" => {
                self.phantom.section_thickness_um = parse_num(key, value, "a number")?;
            }
            "phantom.spiral_r0_px" => self.phantom.spiral_r0_px = parse_num(key, value, "a number")?,
            "phantom.spiral_r1_px" => self.phantom.spiral_r1_px = parse_num(key, value, "a number")?,
            "phantom.spiral_turns" => self.phantom.spiral_turns = parse_num(key, value, "a number")?,
            "phantom.drift_px" => self.phantom.drift_px = parse_num(key, value, "a number")?,
            "phantom.layer_thickness_um" => {
                self.phantom.layer_thickness_um = parse_num(key, value, "a number")?;
            }
            "phantom.background_transmittance" => {
                self.phantom.background_transmittance = parse_num(key, value, "a number")?;
            }
            "phantom.background_noise_sigma" => {
                self.phantom.background_noise_sigma = parse_num(key, value, "a number")?;
            }
            "phantom.laminar_sigma" => self.phantom.laminar_sigma = parse_num(key, value, "a number")?,
            "phantom.laminar_grain_along_px" => {
                self.phantom.laminar_grain_along_px = parse_num(key, value, "a number")?;
            }
            "phantom.laminar_grain_across_px" => {
                self.phantom.laminar_grain_across_px = parse_num(key, value, "a number")?;
            }
            "phantom.inclination_clamp_deg" => {
                self.phantom.inclination_clamp_deg = parse_pair_f64(key, value)?;
            }
            "phantom.surface_n_v" => {
                self.phantom.surface_n_v = parse_num(key, value, "an unsigned integer")?;
            }
            "phantom.seed" => self.phantom.seed = parse_num(key, value, "an unsigned integer")?,

            "model.delta0" => self.phantom.model.delta0 = parse_num(key, value, "a number")?,
            "model.i_ref" => self.phantom.model.i_ref = parse_num(key, value, "a number")?,
            "model.i_min" => self.phantom.model.i_min = parse_num(key, value, "a number")?,

            "signal.angles" => self.angles = parse_num(key, value, "an unsigned integer")?,
            "signal.noise_sigma" => self.noise_sigma = parse_num(key, value, "a number")?,

            "sampler.mode" => {
                self.sampler_mode = match value {
                    "cl2d" => SamplerMode::Cl2d,
                    "cl3d" => SamplerMode::Cl3d,
                    _ => return Err(Error::config(format!("{key}: `{value}` is not cl2d|cl3d"))),
                };
            }
            "sampler.radius_um" => self.sampler_radius_um = parse_num(key, value, "a number")?,
            "sampler.patch_px" => self.patch_px = parse_num(key, value, "an unsigned integer")?,

            "modality" => {
                self.modality = match value {
                    "full" => ModalitySet::Full,
                    "it_only" => ModalitySet::ItOnly,
                    "phir_only" => ModalitySet::PhiROnly,
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: `{value}` is not full|it_only|phir_only"
                        )))
                    }
                };
            }

            "encoder.channels" => {
                self.encoder.channels = parse_usize_list(key, value)?;
                self.encoder.stages = self.encoder.channels.len();
            }
            "encoder.blocks" => self.encoder.blocks = parse_usize_list(key, value)?,
            "encoder.feature_dim" => {
                self.encoder.feature_dim = parse_num(key, value, "an unsigned integer")?;
            }
            "encoder.projection_dim" => {
                self.encoder.projection_dim = parse_num(key, value, "an unsigned integer")?;
            }
            "encoder.norm_groups" => {
                self.encoder.norm_groups = parse_num(key, value, "an unsigned integer")?;
            }
            "encoder.activation" => {
                self.encoder.activation = match value {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: `{value}` is not relu|identity"
                        )))
                    }
                };
            }

            "train.batch_pairs" => self.train.batch_pairs = parse_num(key, value, "an unsigned integer")?,
            "train.val_pairs" => self.train.val_pairs = parse_num(key, value, "an unsigned integer")?,
            "train.val_sections" => {
                self.train.val_sections = parse_num(key, value, "an unsigned integer")?;
            }
            "train.max_steps" => self.train.max_steps = parse_num(key, value, "an unsigned integer")?,
            "train.eval_every" => self.train.eval_every = parse_num(key, value, "an unsigned integer")?,
            "train.patience" => self.train.patience = parse_num(key, value, "an unsigned integer")?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, value, "a number")?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, value, "a number")?,
            "train.beta1" => self.train.beta1 = parse_num(key, value, "a number")?,
            "train.beta2" => self.train.beta2 = parse_num(key, value, "a number")?,
            "train.epsilon" => self.train.epsilon = parse_num(key, value, "a number")?,
            "train.temperature" => self.train.temperature = parse_num(key, value, "a number")?,
            "train.seed" => self.train.seed = parse_num(key, value, "an unsigned integer")?,

            "featmap.overlap" => self.featmap_overlap = parse_num(key, value, "a number")?,

            "baseline.patch_px" => self.baseline_patch_px = parse_num(key, value, "an unsigned integer")?,
            "baseline.stride_px" => self.baseline_stride_px = parse_num(key, value, "an unsigned integer")?,

            "surface.depths" => self.depths = parse_num(key, value, "an unsigned integer")?,
            "surface.smooth_iters" => self.smooth_iters = parse_num(key, value, "an unsigned integer")?,
            "surface.smooth_include_self" => self.smooth_include_self = parse_bool(key, value)?,

            "reduce.pca_threshold" => self.pca_threshold = parse_num(key, value, "a number")?,

            "cluster.k" => self.cluster_k = parse_num(key, value, "an unsigned integer")?,
            "cluster.runs" => self.cluster_runs = parse_num(key, value, "an unsigned integer")?,
            "cluster.fraction" => self.cluster_fraction = parse_num(key, value, "a number")?,

            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a config text; keys may appear at most once and must be known.
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: `{line}` is not a key = value assignment",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("duplicate key `{key}`")));
            }
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        PipelineConfig::parse(&text)
    }

    /// Drive every source of randomness from one seed: the phantom, the
    /// encoder training and the clustering protocol. One master seed defines
    /// one complete replicate of the experiment.
    pub fn set_master_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.train.seed = seed;
    }

    /// Emit the full key set; `parse` of the result reproduces `self`.
    #[must_use]
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(w, "seed = {}", self.seed);
        let p = &self.phantom;
        let _ = writeln!(w, "phantom.grid = {}x{}x{}", p.grid[0], p.grid[1], p.grid[2]);
        let _ = writeln!(w, "phantom.pixel_size_um = {}", p.pixel_size_um);
        let _ = writeln!(w, "phantom.section_thickness_um = {}", p.section_thickness_um);
        let _ = writeln!(w, "phantom.spiral_r0_px = {}", p.spiral_r0_px);
        let _ = writeln!(w, "phantom.spiral_r1_px = {}", p.spiral_r1_px);
        let _ = writeln!(w, "phantom.spiral_turns = {}", p.spiral_turns);
        let _ = writeln!(w, "phantom.drift_px = {}", p.drift_px);
        let _ = writeln!(w, "phantom.layer_thickness_um = {}", p.layer_thickness_um);
        let _ = writeln!(w, "phantom.background_transmittance = {}", p.background_transmittance);
        let _ = writeln!(w, "phantom.background_noise_sigma = {}", p.background_noise_sigma);
        let _ = writeln!(w, "phantom.laminar_sigma = {}", p.laminar_sigma);
        let _ = writeln!(w, "phantom.laminar_grain_along_px = {}", p.laminar_grain_along_px);
        let _ = writeln!(w, "phantom.laminar_grain_across_px = {}", p.laminar_grain_across_px);
        let _ = writeln!(
            w,
            "phantom.inclination_clamp_deg = {},{}",
            p.inclination_clamp_deg[0], p.inclination_clamp_deg[1]
        );
        let _ = writeln!(w, "phantom.surface_n_v = {}", p.surface_n_v);
        let _ = writeln!(w, "phantom.seed = {}", p.seed);
        let _ = writeln!(w, "model.delta0 = {}", p.model.delta0);
        let _ = writeln!(w, "model.i_ref = {}", p.model.i_ref);
        let _ = writeln!(w, "model.i_min = {}", p.model.i_min);
        let _ = writeln!(w, "signal.angles = {}", self.angles);
        let _ = writeln!(w, "signal.noise_sigma = {}", self.noise_sigma);
        let mode = match self.sampler_mode {
            SamplerMode::Cl2d => "cl2d",
            SamplerMode::Cl3d => "cl3d",
        };
        let _ = writeln!(w, "sampler.mode = {mode}");
        let _ = writeln!(w, "sampler.radius_um = {}", self.sampler_radius_um);
        let _ = writeln!(w, "sampler.patch_px = {}", self.patch_px);
        let _ = writeln!(w, "modality = {}", self.modality.name());
        let e = &self.encoder;
        let _ = writeln!(w, "encoder.channels = {}", join_list(&e.channels));
        let _ = writeln!(w, "encoder.blocks = {}", join_list(&e.blocks));
        let _ = writeln!(w, "encoder.feature_dim = {}", e.feature_dim);
        let _ = writeln!(w, "encoder.projection_dim = {}", e.projection_dim);
        let _ = writeln!(w, "encoder.norm_groups = {}", e.norm_groups);
        let act = match e.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        let _ = writeln!(w, "encoder.activation = {act}");
        let t = &self.train;
        let _ = writeln!(w, "train.batch_pairs = {}", t.batch_pairs);
        let _ = writeln!(w, "train.val_pairs = {}", t.val_pairs);
        let _ = writeln!(w, "train.val_sections = {}", t.val_sections);
        let _ = writeln!(w, "train.max_steps = {}", t.max_steps);
        let _ = writeln!(w, "train.eval_every = {}", t.eval_every);
        let _ = writeln!(w, "train.patience = {}", t.patience);
        let _ = writeln!(w, "train.learning_rate = {}", t.learning_rate);
        let _ = writeln!(w, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(w, "train.beta1 = {}", t.beta1);
        let _ = writeln!(w, "train.beta2 = {}", t.beta2);
        let _ = writeln!(w, "train.epsilon = {}", t.epsilon);
        let _ = writeln!(w, "train.temperature = {}", t.temperature);
        let _ = writeln!(w, "train.seed = {}", t.seed);
        let _ = writeln!(w, "featmap.overlap = {}", self.featmap_overlap);
        let _ = writeln!(w, "baseline.patch_px = {}", self.baseline_patch_px);
        let _ = writeln!(w, "baseline.stride_px = {}", self.baseline_stride_px);
        let _ = writeln!(w, "surface.depths = {}", self.depths);
        let _ = writeln!(w, "surface.smooth_iters = {}", self.smooth_iters);
        let _ = writeln!(w, "surface.smooth_include_self = {}", self.smooth_include_self);
        let _ = writeln!(w, "reduce.pca_threshold = {}", self.pca_threshold);
        let _ = writeln!(w, "cluster.k = {}", self.cluster_k);
        let _ = writeln!(w, "cluster.runs = {}", self.cluster_runs);
        let _ = writeln!(w, "cluster.fraction = {}", self.cluster_fraction);
        s
    }

    /// Write the serialized config to a file.
    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, self.serialize())?;
        Ok(())
    }

    /// Validate every stage's parameters up front.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate().map_err(reclass_config)?;
        self.encoder.validate().map_err(reclass_config)?;
        self.train.validate().map_err(reclass_config)?;
        if self.angles < 3 {
            return Err(Error::config("signal.angles must be at least 3"));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::config("signal.noise_sigma must be finite and >= 0"));
        }
        if self.sampler_radius_um <= 0.0 {
            return Err(Error::config("sampler.radius_um must be positive"));
        }
        if self.patch_px < 4 {
            return Err(Error::config("sampler.patch_px must be at least 4"));
        }
        if !(0.0..1.0).contains(&self.featmap_overlap) {
            return Err(Error::config("featmap.overlap must lie in [0, 1)"));
        }
        if self.baseline_patch_px < 2 || self.baseline_stride_px == 0 {
            return Err(Error::config(
                "baseline windows need patch_px >= 2 and stride_px >= 1",
            ));
        }
        if self.depths < 2 {
            return Err(Error::config("surface.depths must be at least 2"));
        }
        if !(self.pca_threshold > 0.0 && self.pca_threshold <= 1.0) {
            return Err(Error::config("reduce.pca_threshold must lie in (0, 1]"));
        }
        if self.cluster_k < 2 {
            return Err(Error::config("cluster.k must be at least 2"));
        }
        if self.cluster_runs == 0 {
            return Err(Error::config("cluster.runs must be at least 1"));
        }
        if !(self.cluster_fraction > 0.0 && self.cluster_fraction <= 1.0) {
            return Err(Error::config("cluster.fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Lift validation failures of embedded configs into the config error class
/// so the command line maps them to the config exit code.
fn reclass_config(e: Error) -> Error {
    match e {
        Error::InvalidInput(msg) => Error::Config(msg),
        other => other,
    }
}
