//! Self-supervised contrastive texture learning on parameter maps.
//!
//! Positive pairs are drawn at a fixed physical distance inside one section
//! (CL-2D) or across neighboring sections (CL-3D), augmented, pushed through
//! a small residual encoder with a projection head, and scored with an
//! InfoNCE loss; everything — network, gradients, Adam — is written by hand
//! and checked against finite differences. Training holds out the leading
//! sections for validation and returns the parameters with the best
//! validation loss.

pub mod augment;
pub mod loss;
pub mod net;
pub mod sample;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor_io::{read_tensor, write_tensor};

pub use augment::{augment, augment_with, center_crop, crop_for};
pub use loss::{info_nce, info_nce_with_grad, partner, Real, NORM_TOLERANCE};
pub use net::{Activation, AdamParams, EncoderConfig, EncoderNet, ParamStore, Tape};
pub use sample::{
    extract_patch, sample_pair, sample_pair_in, transmittance_range, Loc, ModalitySet,
    PairSamplerConfig, SamplerMode,
};

const STREAM_TRAIN_PAIRS: u64 = 31;
const STREAM_TRAIN_AUG: u64 = 32;
const STREAM_VAL_PAIRS: u64 = 33;
const STREAM_VAL_AUG: u64 = 34;
const STREAM_PROBE: u64 = 35;

/// Rows per forward/backward chunk; fixed so results do not depend on the
/// worker count.
const CHUNK_ROWS: usize = 32;

/// Optimization schedule and loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Positive pairs per batch (the batch holds twice as many patches).
    pub batch_pairs: usize,
    /// Pairs in the frozen validation batch.
    pub val_pairs: usize,
    /// Leading (most anterior) sections held out for validation.
    pub val_sections: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: usize,
    /// Validation cadence, in steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_pairs: 512,
            val_pairs: 64,
            val_sections: 10,
            max_steps: 2000,
            eval_every: 10,
            patience: 5,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            temperature: 0.5,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Schedule sized for the desk-scale pipeline.
    #[must_use]
    pub fn desk() -> Self {
        TrainConfig {
            batch_pairs: 128,
            val_sections: 4,
            max_steps: 240,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs < 2 || self.val_pairs < 2 {
            return Err(Error::config(
                "contrastive batches need at least two pairs",
            ));
        }
        if self.val_sections == 0 {
            return Err(Error::config("at least one validation section is required"));
        }
        if self.max_steps == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::config(
                "steps, evaluation cadence, and patience must be positive",
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("learning rate and weight decay cannot be negative"));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("Adam epsilon must be positive"));
        }
        Ok(())
    }

    #[must_use]
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One line of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    /// Present on evaluation steps.
    pub val_loss: Option<f64>,
}

/// Write the training curve as `step,train_loss,val_loss` CSV.
pub fn write_training_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut text = String::from("step,train_loss,val_loss\n");
    for r in rows {
        match r.val_loss {
            Some(v) => text.push_str(&format!("{},{},{}\n", r.step, r.train_loss, v)),
            None => text.push_str(&format!("{},{},\n", r.step, r.train_loss)),
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// A trained (or freshly initialized) encoder together with everything needed
/// to reproduce its inputs: modality, patch geometry, and the transmittance
/// normalization range.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub encoder: EncoderConfig,
    pub modality: ModalitySet,
    /// Side length of sampled patches before the rotation-safe crop.
    pub patch_px: usize,
    /// Side length of network inputs.
    pub crop_px: usize,
    /// Transmittance `[min, max]` from the training split.
    pub transmittance_range: [f32; 2],
    store: ParamStore<f32>,
    net: EncoderNet,
}

impl EncoderParams {
    /// Freshly initialized parameters for the given architecture.
    pub fn init(
        encoder: &EncoderConfig,
        modality: ModalitySet,
        patch_px: usize,
        transmittance_range: [f32; 2],
        seed: u64,
    ) -> Result<EncoderParams> {
        encoder.validate()?;
        if patch_px < 4 || patch_px % 2 != 0 {
            return Err(Error::invalid("patch size must be even and at least 4"));
        }
        if !(transmittance_range[1] > transmittance_range[0]) {
            return Err(Error::invalid("degenerate transmittance range"));
        }
        let mut store = ParamStore::new();
        let net = EncoderNet::build(encoder, modality.n_channels(), &mut store, seed)?;
        Ok(EncoderParams {
            encoder: encoder.clone(),
            modality,
            patch_px,
            crop_px: crop_for(patch_px),
            transmittance_range,
            store,
            net,
        })
    }

    /// Total scalar parameter count.
    #[must_use]
    pub fn n_params(&self) -> usize {
        self.store.n_scalars()
    }

    /// Length of the pooled feature vectors.
    #[must_use]
    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim
    }

    /// SHA-256 over parameter names and little-endian values, in registration
    /// order. Two runs agree exactly iff their checksums do.
    #[must_use]
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.store.iter() {
            hasher.update(name.as_bytes());
            for &v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Cut and normalize the network input centered at `center`, matching the
    /// geometry used during training.
    pub fn inference_input(
        &self,
        section_maps: &ArrayView3<'_, f32>,
        center: Loc,
    ) -> Result<Array3<f32>> {
        let patch = extract_patch(
            section_maps,
            center,
            self.patch_px,
            self.modality,
            self.transmittance_range,
        )?;
        center_crop(&patch.view(), self.crop_px)
    }

    /// Encode a batch of crop-sized inputs to pooled feature vectors.
    pub fn encode_batch(&self, patches: &Array4<f32>) -> Result<Array2<f32>> {
        let (n, c, h, w) = patches.dim();
        if n == 0 {
            return Err(Error::invalid("cannot encode an empty batch"));
        }
        if c != self.modality.n_channels() || h != self.crop_px || w != self.crop_px {
            return Err(Error::invalid(format!(
                "encoder expects [{}, {}, {}] inputs, got [{c}, {h}, {w}]",
                self.modality.n_channels(),
                self.crop_px,
                self.crop_px
            )));
        }
        let chunks = split_rows(patches, CHUNK_ROWS);
        let parts = chunks
            .into_par_iter()
            .map(|chunk| self.net.forward_pooled(&self.store, &chunk))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::<f32>::zeros((n, self.encoder.feature_dim));
        let mut row = 0;
        for p in parts {
            let k = p.nrows();
            out.slice_mut(s![row..row + k, ..]).assign(&p);
            row += k;
        }
        Ok(out)
    }

    /// Encode a single crop-sized input.
    pub fn encode(&self, patch: &ArrayView3<'_, f32>) -> Result<Array1<f32>> {
        let (c, h, w) = patch.dim();
        let mut batch = Array4::<f32>::zeros((1, c, h, w));
        batch.slice_mut(s![0, .., .., ..]).assign(patch);
        let out = self.encode_batch(&batch)?;
        Ok(out.row(0).to_owned())
    }

    /// Projection-head output (before unit normalization). Downstream feature
    /// maps use the pooled vectors instead; this exists for inspection.
    pub fn project(&self, features: &ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        self.net.project(&self.store, features)
    }

    /// Write a checkpoint directory: a text manifest plus one tensor file per
    /// parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("pli-encoder-v1\n");
        manifest.push_str(&format!("modality {}\n", self.modality.name()));
        manifest.push_str(&format!("patch_px {}\n", self.patch_px));
        manifest.push_str(&format!("crop_px {}\n", self.crop_px));
        manifest.push_str(&format!("it_min {}\n", self.transmittance_range[0]));
        manifest.push_str(&format!("it_max {}\n", self.transmittance_range[1]));
        manifest.push_str(&format!("stages {}\n", self.encoder.stages));
        manifest.push_str(&format!("channels {}\n", join_usize(&self.encoder.channels)));
        manifest.push_str(&format!("blocks {}\n", join_usize(&self.encoder.blocks)));
        manifest.push_str(&format!("feature_dim {}\n", self.encoder.feature_dim));
        manifest.push_str(&format!("projection_dim {}\n", self.encoder.projection_dim));
        manifest.push_str(&format!("norm_groups {}\n", self.encoder.norm_groups));
        let act = match self.encoder.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        manifest.push_str(&format!("activation {act}\n"));
        for (id, (name, value)) in self.store.iter().enumerate() {
            let file = format!("param_{id:03}.plt");
            write_tensor(&dir.join(&file), value)?;
            let shape = value
                .shape()
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!("tensor {name} {file} {shape}\n"));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Read a checkpoint directory written by [`EncoderParams::save`].
    pub fn load(dir: &Path) -> Result<EncoderParams> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("pli-encoder-v1") {
            return Err(Error::format("unrecognized checkpoint manifest"));
        }
        let mut kv: HashMap<&str, &str> = HashMap::new();
        let mut tensors: HashMap<&str, (&str, Vec<usize>)> = HashMap::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            if key == "tensor" {
                let (name, file, shape) = match (parts.next(), parts.next(), parts.next()) {
                    (Some(n), Some(f), Some(s)) => (n, f, s),
                    _ => return Err(Error::format("malformed tensor line in checkpoint manifest")),
                };
                let dims = shape
                    .split('x')
                    .map(|d| {
                        d.parse::<usize>()
                            .map_err(|_| Error::format("bad tensor shape in checkpoint manifest"))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                tensors.insert(name, (file, dims));
            } else {
                let value = parts.next().ok_or_else(|| {
                    Error::format(format!("checkpoint manifest key `{key}` has no value"))
                })?;
                kv.insert(key, value);
            }
        }
        let get = |key: &str| -> Result<&str> {
            kv.get(key)
                .copied()
                .ok_or_else(|| Error::format(format!("checkpoint manifest lacks `{key}`")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse::<usize>()
                .map_err(|_| Error::format(format!("checkpoint manifest `{key}` is not an integer")))
        };
        let parse_f32 = |key: &str| -> Result<f32> {
            get(key)?
                .parse::<f32>()
                .map_err(|_| Error::format(format!("checkpoint manifest `{key}` is not a number")))
        };
        let parse_list = |key: &str| -> Result<Vec<usize>> {
            get(key)?
                .split(',')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::format(format!("checkpoint manifest `{key}` is not a list")))
                })
                .collect()
        };
        let activation = match get("activation")? {
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            other => {
                return Err(Error::format(format!("unknown activation `{other}` in checkpoint")))
            }
        };
        let encoder = EncoderConfig {
            stages: parse_usize("stages")?,
            channels: parse_list("channels")?,
            blocks: parse_list("blocks")?,
            feature_dim: parse_usize("feature_dim")?,
            projection_dim: parse_usize("projection_dim")?,
            norm_groups: parse_usize("norm_groups")?,
            activation,
        };
        let modality = ModalitySet::parse(get("modality")?)?;
        let patch_px = parse_usize("patch_px")?;
        let it_range = [parse_f32("it_min")?, parse_f32("it_max")?];
        let mut out = EncoderParams::init(&encoder, modality, patch_px, it_range, 0)?;
        if out.crop_px != parse_usize("crop_px")? {
            return Err(Error::format("checkpoint crop size disagrees with its patch size"));
        }
        for id in 0..out.store.len() {
            let name = out.store.name(id).to_string();
            let (file, dims) = tensors
                .get(name.as_str())
                .ok_or_else(|| Error::format(format!("checkpoint lacks parameter `{name}`")))?;
            let tensor = read_tensor::<f32>(&dir.join(file))?;
            if tensor.shape() != dims.as_slice() || tensor.shape() != out.store.value(id).shape() {
                return Err(Error::format(format!(
                    "checkpoint parameter `{name}` has the wrong shape"
                )));
            }
            *out.store.value_mut(id) = tensor;
        }
        Ok(out)
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// True when a forward pass produced embeddings the loss cannot accept:
/// non-finite values, or a row whose norm collapsed away from one. A blown-up
/// net can gate every activation to zero, which floors the unit-normalize and
/// leaves a zero row; both cases mean the optimizer state is lost.
fn embeddings_degenerate(z: &Array2<f32>) -> bool {
    let tol = NORM_TOLERANCE as f32;
    z.outer_iter().any(|row| {
        let norm = row.dot(&row).sqrt();
        !norm.is_finite() || (norm - 1.0).abs() > tol
    })
}

fn split_rows(x: &Array4<f32>, chunk: usize) -> Vec<Array4<f32>> {
    let n = x.dim().0;
    let mut out = Vec::with_capacity(n.div_ceil(chunk));
    let mut i = 0;
    while i < n {
        let j = (i + chunk).min(n);
        out.push(x.slice(s![i..j, .., .., ..]).to_owned());
        i = j;
    }
    out
}

fn forward_chunks(
    net: &EncoderNet,
    store: &ParamStore<f32>,
    chunks: Vec<Array4<f32>>,
) -> Result<(Array2<f32>, Vec<Tape<f32>>)> {
    let parts = chunks
        .into_par_iter()
        .map(|c| net.forward_full(store, c))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = parts.iter().map(|(z, _)| z.nrows()).sum();
    let mut z = Array2::<f32>::zeros((total, net.cfg.projection_dim));
    let mut tapes = Vec::with_capacity(parts.len());
    let mut row = 0;
    for (zc, tape) in parts {
        let k = zc.nrows();
        z.slice_mut(s![row..row + k, ..]).assign(&zc);
        row += k;
        tapes.push(tape);
    }
    Ok((z, tapes))
}

fn backward_chunks(
    net: &EncoderNet,
    store: &mut ParamStore<f32>,
    tapes: &[Tape<f32>],
    dz: &Array2<f32>,
) {
    let snapshot = store.clone();
    let mut jobs = Vec::with_capacity(tapes.len());
    let mut row = 0;
    for tape in tapes {
        let k = tape.pooled().nrows();
        jobs.push((tape, dz.slice(s![row..row + k, ..]).to_owned()));
        row += k;
    }
    // Each chunk backpropagates into its own scratch store; merging in chunk
    // order keeps the floating-point reduction independent of thread count.
    let scratches: Vec<ParamStore<f32>> = jobs
        .into_par_iter()
        .map(|(tape, dzc)| {
            let mut scratch = snapshot.clone();
            scratch.zero_grads();
            net.backward(&mut scratch, tape, &dzc);
            scratch
        })
        .collect();
    for scratch in &scratches {
        store.merge_grads(scratch);
    }
}

fn assemble_batch<R: Rng>(
    maps: &Array4<f32>,
    modality: ModalitySet,
    scfg: &PairSamplerConfig,
    it_range: [f32; 2],
    lo: usize,
    hi: usize,
    n_pairs: usize,
    rng_pairs: &mut R,
    rng_aug: &mut R,
) -> Result<Array4<f32>> {
    let crop = crop_for(scfg.patch_px);
    let c = modality.n_channels();
    let mut out = Array4::<f32>::zeros((2 * n_pairs, c, crop, crop));
    for p in 0..n_pairs {
        let (anchor, positive) = sample_pair_in(scfg, rng_pairs, lo, hi)?;
        for (slot, loc) in [(2 * p, anchor), (2 * p + 1, positive)] {
            let section = maps.index_axis(Axis(0), loc.section);
            let patch = extract_patch(&section, loc, scfg.patch_px, modality, it_range)?;
            let augmented = augment(&patch.view(), modality, rng_aug)?;
            out.slice_mut(s![slot, .., .., ..]).assign(&augmented);
        }
    }
    Ok(out)
}

/// Train an encoder on a `[sections, 4, H, W]` map stack.
///
/// The leading `val_sections` sections are held out; a frozen batch drawn
/// from them is evaluated every `eval_every` steps and the returned
/// parameters are the ones with the best validation loss. The training curve
/// comes back alongside.
pub fn train(
    maps: &Array4<f32>,
    modality: ModalitySet,
    tcfg: &TrainConfig,
    scfg: &PairSamplerConfig,
    ecfg: &EncoderConfig,
) -> Result<(EncoderParams, Vec<TrainLogRow>)> {
    tcfg.validate()?;
    scfg.validate()?;
    ecfg.validate()?;
    let (n_sections, n_ch, h, w) = maps.dim();
    if n_ch != 4 {
        return Err(Error::invalid(format!("expected 4 map channels, got {n_ch}")));
    }
    if scfg.volume_dims != [n_sections, h, w] {
        return Err(Error::invalid("sampler volume dims do not match the map stack"));
    }
    if tcfg.val_sections >= n_sections {
        return Err(Error::invalid("validation hold-out leaves no training sections"));
    }
    let train_lo = tcfg.val_sections;
    if scfg.mode == SamplerMode::Cl3d {
        if n_sections - train_lo < 2 {
            return Err(Error::invalid(
                "CL-3D training needs at least two sections after the hold-out",
            ));
        }
        if tcfg.val_sections < 2 {
            return Err(Error::invalid(
                "CL-3D validation needs at least two held-out sections",
            ));
        }
    }
    let it_range = transmittance_range(maps, train_lo, n_sections)?;
    let mut params = EncoderParams::init(ecfg, modality, scfg.patch_px, it_range, tcfg.seed)?;

    let val_batch = assemble_batch(
        maps,
        modality,
        scfg,
        it_range,
        0,
        tcfg.val_sections,
        tcfg.val_pairs,
        &mut keyed_rng(tcfg.seed, STREAM_VAL_PAIRS, 0),
        &mut keyed_rng(tcfg.seed, STREAM_VAL_AUG, 0),
    )?;
    let val_chunks = split_rows(&val_batch, CHUNK_ROWS);

    let adam = tcfg.adam();
    let tau = tcfg.temperature as f32;
    let mut log = Vec::with_capacity(tcfg.max_steps);
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut evals_since_best = 0usize;

    for step in 0..tcfg.max_steps {
        let batch = assemble_batch(
            maps,
            modality,
            scfg,
            it_range,
            train_lo,
            n_sections,
            tcfg.batch_pairs,
            &mut keyed_rng(tcfg.seed, STREAM_TRAIN_PAIRS, step as u64),
            &mut keyed_rng(tcfg.seed, STREAM_TRAIN_AUG, step as u64),
        )?;
        let chunks = split_rows(&batch, CHUNK_ROWS);
        let (z, tapes) = forward_chunks(&params.net, &params.store, chunks)?;
        if embeddings_degenerate(&z) {
            return Err(Error::Diverged { step });
        }
        let (loss, dz) = info_nce_with_grad(&z.view(), tau)?;
        let train_loss = f64::from(loss);
        if !train_loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        params.store.zero_grads();
        backward_chunks(&params.net, &mut params.store, &tapes, &dz);
        params.store.adam_step(&adam);

        let mut row = TrainLogRow { step, train_loss, val_loss: None };
        if (step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.max_steps {
            let (vz, _) = forward_chunks(&params.net, &params.store, val_chunks.clone())?;
            if embeddings_degenerate(&vz) {
                return Err(Error::Diverged { step });
            }
            let val_loss = f64::from(info_nce(&vz.view(), tau)?);
            row.val_loss = Some(val_loss);
            log.push(row);
            let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, params.store.clone()));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= tcfg.patience {
                    break;
                }
            }
        } else {
            log.push(row);
        }
    }
    if let Some((_, store)) = best {
        params.store = store;
    }
    Ok((params, log))
}

fn loss_at(net: &EncoderNet, store: &ParamStore<f64>, batch: &Array4<f64>, tau: f64) -> Result<f64> {
    let (z, _) = net.forward_full(store, batch.clone())?;
    info_nce(&z.view(), tau)
}

/// Compare analytic gradients of the InfoNCE objective against central
/// finite differences (step `h`) for every scalar parameter in `store`.
/// Returns the worst relative error, normalized by `max(1, |a|, |n|)`.
pub fn gradient_check_on(
    net: &EncoderNet,
    store: &mut ParamStore<f64>,
    batch: &Array4<f64>,
    tau: f64,
    h: f64,
) -> Result<f64> {
    let (z, tape) = net.forward_full(store, batch.clone())?;
    let (_, dz) = info_nce_with_grad(&z.view(), tau)?;
    store.zero_grads();
    net.backward(store, &tape, &dz);
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|id| store.grad(id).iter().copied().collect())
        .collect();
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        for k in 0..analytic[id].len() {
            let orig = store.value(id).as_slice().expect("standard layout")[k];
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig + h;
            let plus = loss_at(net, store, batch, tau)?;
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig - h;
            let minus = loss_at(net, store, batch, tau)?;
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Gradient check on a freshly initialized network.
pub fn check_gradients(
    cfg: &EncoderConfig,
    in_channels: usize,
    batch: &Array4<f64>,
    tau: f64,
    seed: u64,
) -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let net = EncoderNet::build(cfg, in_channels, &mut store, seed)?;
    gradient_check_on(&net, &mut store, batch, tau, 1e-4)
}

/// Gradient check of a random linear functional of the raw projections.
///
/// With the identity activation the raw projection is affine in each single
/// parameter, so the central difference is exact up to round-off; this pins
/// the backward pass of every layer except the nonlinearity and the loss.
pub fn linear_probe_check(
    cfg: &EncoderConfig,
    in_channels: usize,
    batch: &Array4<f64>,
    seed: u64,
) -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let net = EncoderNet::build(cfg, in_channels, &mut store, seed)?;
    let n = batch.dim().0;
    let mut crng = keyed_rng(seed, STREAM_PROBE, 0);
    let probe = Array2::<f64>::from_shape_fn((n, cfg.projection_dim), |_| {
        crng.sample::<f64, _>(StandardNormal)
    });
    let (_, tape) = net.forward_full(&store, batch.clone())?;
    store.zero_grads();
    net.backward_raw(&mut store, &tape, &probe);
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|id| store.grad(id).iter().copied().collect())
        .collect();
    let probe_loss = |store: &ParamStore<f64>| -> Result<f64> {
        let (_, tape) = net.forward_full(store, batch.clone())?;
        Ok((&probe * tape.raw_projections()).sum())
    };
    let h = 1e-2;
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        for k in 0..analytic[id].len() {
            let orig = store.value(id).as_slice().expect("standard layout")[k];
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig + h;
            let plus = probe_loss(&store)?;
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig - h;
            let minus = probe_loss(&store)?;
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, ArrayD};
    use tempfile::tempdir;

    fn random_batch(n: usize, c: usize, s: usize, seed: u64) -> Array4<f64> {
        let mut rng = keyed_rng(seed, 91, 0);
        Array4::from_shape_fn((n, c, s, s), |_| {
            0.5 * rng.sample::<f64, _>(StandardNormal)
        })
    }

    fn toy_maps(sections: usize, h: usize, w: usize) -> Array4<f32> {
        // Smooth, band-ish synthetic maps: enough texture to learn from.
        let mut m = Array4::<f32>::zeros((sections, 4, h, w));
        for sec in 0..sections {
            for y in 0..h {
                for x in 0..w {
                    let u = y as f32 / h as f32;
                    let v = x as f32 / w as f32;
                    m[[sec, 0, y, x]] = 30.0 + 50.0 * u + 5.0 * (6.0 * v).sin() + sec as f32;
                    m[[sec, 1, y, x]] = (160.0 * v + 10.0 * sec as f32) % 180.0;
                    m[[sec, 2, y, x]] = 0.2 + 0.6 * u * v;
                    m[[sec, 3, y, x]] = 15.0 + 40.0 * u;
                }
            }
        }
        m
    }

    fn toy_sampler(sections: usize, h: usize, w: usize) -> PairSamplerConfig {
        PairSamplerConfig {
            mode: SamplerMode::Cl2d,
            radius_um: 118.0,
            pixel_size_um: 10.0,
            section_thickness_um: 60.0,
            volume_dims: [sections, h, w],
            patch_px: 16,
        }
    }

    fn toy_train_config() -> TrainConfig {
        TrainConfig {
            batch_pairs: 4,
            val_pairs: 2,
            val_sections: 2,
            max_steps: 3,
            eval_every: 2,
            patience: 5,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = EncoderConfig::tiny();
        let batch = random_batch(4, 2, 6, 3);
        let err = check_gradients(&cfg, 2, &batch, 0.5, 3).unwrap();
        assert!(err < 1e-4, "gradient error {err}");
    }

    #[test]
    fn optimizer_descends_when_pairs_are_informative() {
        // Paired rows are near-duplicates, so the contrastive objective has a
        // clean minimum far below the uniform plateau ln(2N - 1); a correct
        // gradient/optimizer path must find its way well under it.
        let cfg = EncoderConfig {
            channels: vec![4, 8],
            blocks: vec![1, 0],
            stages: 2,
            feature_dim: 8,
            projection_dim: 4,
            norm_groups: 2,
            activation: Activation::Relu,
        };
        let mut store = ParamStore::<f32>::new();
        let net = EncoderNet::build(&cfg, 4, &mut store, 17).unwrap();
        let pairs = 8;
        let mut rng = keyed_rng(17, 93, 0);
        let mut batch = Array4::<f32>::zeros((2 * pairs, 4, 12, 12));
        for p in 0..pairs {
            let base = Array4::from_shape_fn((1, 4, 12, 12), |_| {
                rng.sample::<f64, _>(StandardNormal) as f32
            });
            let jitter = Array4::from_shape_fn((1, 4, 12, 12), |_| {
                0.01 * rng.sample::<f64, _>(StandardNormal) as f32
            });
            batch.slice_mut(s![2 * p..2 * p + 1, .., .., ..]).assign(&base);
            batch
                .slice_mut(s![2 * p + 1..2 * p + 2, .., .., ..])
                .assign(&(&base + &jitter));
        }
        let adam = AdamParams { learning_rate: 1e-2, ..TrainConfig::default().adam() };
        let plateau = ((2 * pairs - 1) as f64).ln();
        let mut first = None;
        let mut last = f64::INFINITY;
        for _ in 0..60 {
            let (z, tape) = net.forward_full(&store, batch.clone()).unwrap();
            let (loss, dz) = info_nce_with_grad(&z.view(), 0.5).unwrap();
            last = f64::from(loss);
            first.get_or_insert(last);
            store.zero_grads();
            net.backward(&mut store, &tape, &dz);
            store.adam_step(&adam);
        }
        let first = first.unwrap();
        assert!(
            last < plateau - 1.0,
            "loss should fall well below the plateau: start {first}, end {last}, plateau {plateau}"
        );
    }

    #[test]
    fn zeroed_network_gradients_stay_consistent() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let net = EncoderNet::build(&cfg, 2, &mut store, 0).unwrap();
        for id in 0..store.len() {
            let zeros = ArrayD::zeros(store.value(id).raw_dim());
            *store.value_mut(id) = zeros;
        }
        let bias_id = (0..store.len())
            .find(|&id| store.name(id) == "proj.fc2.b")
            .unwrap();
        for (k, v) in [0.3, -0.2, 0.5].into_iter().enumerate() {
            store.value_mut(bias_id).as_slice_mut().unwrap()[k] = v;
        }
        let batch = random_batch(4, 2, 6, 4);
        let err = gradient_check_on(&net, &mut store, &batch, 0.5, 1e-4).unwrap();
        assert!(err < 1e-6, "gradient error {err}");
    }

    #[test]
    fn linear_network_gradients_are_exact() {
        let cfg = EncoderConfig {
            activation: Activation::Identity,
            norm_groups: 0,
            ..EncoderConfig::tiny()
        };
        let batch = random_batch(2, 2, 6, 5);
        let err = linear_probe_check(&cfg, 2, &batch, 9).unwrap();
        assert!(err < 1e-8, "gradient error {err}");
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let maps = toy_maps(6, 40, 40);
        let scfg = toy_sampler(6, 40, 40);
        let ecfg = EncoderConfig {
            channels: vec![4],
            blocks: vec![0],
            stages: 1,
            feature_dim: 4,
            projection_dim: 3,
            norm_groups: 2,
            activation: Activation::Relu,
        };
        let tcfg = toy_train_config();
        let (a, log_a) = train(&maps, ModalitySet::Full, &tcfg, &scfg, &ecfg).unwrap();
        let (b, log_b) = train(&maps, ModalitySet::Full, &tcfg, &scfg, &ecfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(log_a, log_b);
        let other = TrainConfig { seed: 12, ..tcfg };
        let (c, _) = train(&maps, ModalitySet::Full, &other, &scfg, &ecfg).unwrap();
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(log_a.len(), 3);
        assert!(log_a[1].val_loss.is_some());
        assert!(log_a[0].val_loss.is_none());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let maps = toy_maps(6, 40, 40);
        let scfg = toy_sampler(6, 40, 40);
        let ecfg = EncoderConfig {
            channels: vec![4],
            blocks: vec![0],
            stages: 1,
            feature_dim: 4,
            projection_dim: 3,
            norm_groups: 2,
            activation: Activation::Relu,
        };
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            ..toy_train_config()
        };
        let (trained, _) = train(&maps, ModalitySet::Full, &tcfg, &scfg, &ecfg).unwrap();
        let it_range = transmittance_range(&maps, tcfg.val_sections, 6).unwrap();
        let fresh =
            EncoderParams::init(&ecfg, ModalitySet::Full, scfg.patch_px, it_range, tcfg.seed)
                .unwrap();
        assert_eq!(trained.checksum(), fresh.checksum());
    }

    #[test]
    fn divergence_is_reported_with_its_step() {
        let maps = toy_maps(6, 40, 40);
        let scfg = toy_sampler(6, 40, 40);
        let ecfg = EncoderConfig {
            channels: vec![4],
            blocks: vec![1],
            stages: 1,
            feature_dim: 4,
            projection_dim: 3,
            norm_groups: 2,
            activation: Activation::Relu,
        };
        let tcfg = TrainConfig {
            learning_rate: 1e10,
            max_steps: 20,
            ..toy_train_config()
        };
        match train(&maps, ModalitySet::Full, &tcfg, &scfg, &ecfg) {
            Err(Error::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoints_roundtrip_bitwise() {
        let maps = toy_maps(6, 40, 40);
        let scfg = toy_sampler(6, 40, 40);
        let ecfg = EncoderConfig {
            channels: vec![4],
            blocks: vec![1],
            stages: 1,
            feature_dim: 4,
            projection_dim: 3,
            norm_groups: 2,
            activation: Activation::Relu,
        };
        let tcfg = toy_train_config();
        let (trained, _) = train(&maps, ModalitySet::Full, &tcfg, &scfg, &ecfg).unwrap();
        let dir = tempdir().unwrap();
        trained.save(dir.path()).unwrap();
        let loaded = EncoderParams::load(dir.path()).unwrap();
        assert_eq!(trained.checksum(), loaded.checksum());
        assert_eq!(trained.modality, loaded.modality);
        assert_eq!(trained.patch_px, loaded.patch_px);
        assert_eq!(trained.crop_px, loaded.crop_px);
        assert_eq!(trained.transmittance_range, loaded.transmittance_range);
        assert_eq!(trained.encoder, loaded.encoder);

        let crop = trained.crop_px;
        let mut batch = Array4::<f32>::zeros((3, 4, crop, crop));
        let mut rng = keyed_rng(2, 92, 0);
        for v in batch.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) as f32;
        }
        let ha = trained.encode_batch(&batch).unwrap();
        let hb = loaded.encode_batch(&batch).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn identical_patches_encode_identically() {
        let it_range = [10.0, 90.0];
        let params =
            EncoderParams::init(&EncoderConfig::tiny(), ModalitySet::ItOnly, 16, it_range, 5)
                .unwrap();
        let crop = params.crop_px;
        let mut batch = Array4::<f32>::zeros((2, 1, crop, crop));
        for y in 0..crop {
            for x in 0..crop {
                let v = (y * crop + x) as f32 / (crop * crop) as f32;
                batch[[0, 0, y, x]] = v;
                batch[[1, 0, y, x]] = v;
            }
        }
        let h = params.encode_batch(&batch).unwrap();
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(h.ncols(), params.feature_dim());
    }

    #[test]
    fn encode_batch_rejects_wrong_geometry() {
        let params =
            EncoderParams::init(&EncoderConfig::tiny(), ModalitySet::Full, 16, [0.0, 1.0], 5)
                .unwrap();
        let batch = Array4::<f32>::zeros((2, 4, 7, 7));
        assert!(params.encode_batch(&batch).is_err());
        let empty = Array4::<f32>::zeros((0, 4, params.crop_px, params.crop_px));
        assert!(params.encode_batch(&empty).is_err());
    }

    #[test]
    fn training_log_rows_serialize_to_csv() {
        let rows = vec![
            TrainLogRow { step: 0, train_loss: 1.5, val_loss: None },
            TrainLogRow { step: 1, train_loss: 1.25, val_loss: Some(1.375) },
        ];
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_training_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,train_loss,val_loss\n0,1.5,\n1,1.25,1.375\n");
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut t = TrainConfig::default();
        t.temperature = 0.0;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::default();
        t.batch_pairs = 1;
        assert!(t.validate().is_err());
        assert!(TrainConfig::desk().validate().is_ok());
        assert_eq!(TrainConfig::desk().batch_pairs, 128);
        assert_eq!(TrainConfig::default().batch_pairs, 512);
    }
}
