//! Stage-oriented experiment driver. Each command reads its prerequisites
//! from the output directory, computes one stage, and writes artifacts plus a
//! manifest of content hashes, so a finished directory is its own
//! reproducibility receipt.
//!
//! The stages chain as `phantom → signal → train → featmap → surface →
//! reduce → cluster`, with `baseline` branching off `signal` and `table1`
//! re-running the back half once per method/channel combination.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array4, Axis};
use sha2::{Digest, Sha256};

use crate::baseline::baseline_feature_maps;
use crate::cluster::{
    evaluate_protocol, kmeans, metrics_csv_header, ClusterAssignment, MetricsReport,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::featmap::{
    feature_maps, read_feature_volume, stack_volume, stride_for, write_feature_volume,
    FeatureVolume,
};
use crate::mesh::SurfacePair;
use crate::phantom::{generate_phantom, render_stack};
use crate::reduce::{reduce_features, write_pca_model, PcaSelection};
use crate::signal::{default_angles, derive_maps, render_fom};
use crate::ssl::{
    train, write_training_log, EncoderParams, ModalitySet, PairSamplerConfig, SamplerMode,
    TrainLogRow,
};
use crate::surface::{
    concat_depths, cutting_angle_confound, graph_smooth, interpolate_depths, rasterize_unfolded,
    sample_at_vertices, write_vertex_metadata,
};
use crate::tensor_io::{read_tensor, write_image_rgb, write_tensor};

/// Unfolded raster width: the flat-map u axis, following the sections.
pub const RASTER_W: usize = 48;

/// Unfolded raster height: the flat-map v axis, following the sheet arc.
/// Bands are constant in u, so they appear as stripes of rows.
pub const RASTER_H: usize = 72;

/// Fill for raster cells no vertex lands in.
pub const BACKGROUND_COLOR: [u8; 3] = [0, 0, 0];

/// Fill for vertices without valid features.
pub const MISSING_COLOR: [u8; 3] = [128, 128, 128];

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [245, 130, 48],
    [70, 240, 240],
    [240, 50, 230],
];

/// Display color for a cluster id or band label.
#[must_use]
pub fn palette_color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

/// Iteration cap and tolerance of the reference k-means fit behind the maps.
const KMEANS_MAX_ITERS: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

/// Locations of every stage artifact under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    #[must_use]
    pub fn new(root: &Path) -> Layout {
        Layout {
            root: root.to_path_buf(),
        }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    #[must_use]
    pub fn phantom_dir(&self) -> PathBuf {
        self.at("phantom")
    }
    #[must_use]
    pub fn phantom_maps(&self) -> PathBuf {
        self.at("phantom/maps.plt")
    }
    #[must_use]
    pub fn phantom_labels(&self) -> PathBuf {
        self.at("phantom/labels.plt")
    }
    #[must_use]
    pub fn surfaces(&self) -> PathBuf {
        self.at("phantom/surfaces.plisurf")
    }

    #[must_use]
    pub fn signal_dir(&self) -> PathBuf {
        self.at("signal")
    }
    #[must_use]
    pub fn signal_maps(&self) -> PathBuf {
        self.at("signal/maps.plt")
    }
    #[must_use]
    pub fn signal_fom(&self) -> PathBuf {
        self.at("signal/fom.ppm")
    }

    #[must_use]
    pub fn train_dir(&self) -> PathBuf {
        self.at("train")
    }
    #[must_use]
    pub fn encoder_dir(&self) -> PathBuf {
        self.at("train/encoder")
    }
    #[must_use]
    pub fn train_log(&self) -> PathBuf {
        self.at("train/log.csv")
    }

    #[must_use]
    pub fn featmap_dir(&self) -> PathBuf {
        self.at("featmap")
    }
    #[must_use]
    pub fn contrastive_features(&self) -> PathBuf {
        self.at("featmap/features.plt")
    }

    #[must_use]
    pub fn baseline_dir(&self) -> PathBuf {
        self.at("baseline")
    }
    #[must_use]
    pub fn baseline_features(&self) -> PathBuf {
        self.at("baseline/features.plt")
    }

    #[must_use]
    pub fn surface_dir(&self) -> PathBuf {
        self.at("surface")
    }
    #[must_use]
    pub fn vertex_features(&self) -> PathBuf {
        self.at("surface/features.plt")
    }
    #[must_use]
    pub fn vertex_missing(&self) -> PathBuf {
        self.at("surface/missing.plt")
    }
    #[must_use]
    pub fn vertex_confound(&self) -> PathBuf {
        self.at("surface/confound.plt")
    }
    #[must_use]
    pub fn vertex_metadata(&self) -> PathBuf {
        self.at("surface/vertices.csv")
    }

    #[must_use]
    pub fn reduce_dir(&self) -> PathBuf {
        self.at("reduce")
    }
    #[must_use]
    pub fn pca_dir(&self) -> PathBuf {
        self.at("reduce/pca")
    }
    #[must_use]
    pub fn scores(&self) -> PathBuf {
        self.at("reduce/scores.plt")
    }
    #[must_use]
    pub fn present(&self) -> PathBuf {
        self.at("reduce/present.plt")
    }
    #[must_use]
    pub fn reduce_summary(&self) -> PathBuf {
        self.at("reduce/summary.txt")
    }

    #[must_use]
    pub fn cluster_dir(&self) -> PathBuf {
        self.at("cluster")
    }
    #[must_use]
    pub fn metrics_csv(&self) -> PathBuf {
        self.at("cluster/metrics.csv")
    }
    #[must_use]
    pub fn assignments(&self) -> PathBuf {
        self.at("cluster/assignments.plt")
    }
    #[must_use]
    pub fn cluster_map(&self) -> PathBuf {
        self.at("cluster/cluster_map.ppm")
    }
    #[must_use]
    pub fn label_map(&self) -> PathBuf {
        self.at("cluster/label_map.ppm")
    }

    #[must_use]
    pub fn table1_dir(&self) -> PathBuf {
        self.at("table1")
    }
    #[must_use]
    pub fn table1_csv(&self) -> PathBuf {
        self.at("table1/table1.csv")
    }
    #[must_use]
    pub fn table1_runs(&self) -> PathBuf {
        self.at("table1/per_run.csv")
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of the configuration with the output location factored out: two runs
/// with the same identity compute the same artifacts wherever they land.
fn config_identity(cfg: &PipelineConfig) -> String {
    let mut filtered = String::new();
    for line in cfg.serialize().lines() {
        if !line.starts_with("out_dir") {
            filtered.push_str(line);
            filtered.push('\n');
        }
    }
    sha256_hex(filtered.as_bytes())
}

fn dir_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reproducibility receipt for one stage: the configuration identity, the
/// seed, and a content hash per input and output artifact.
struct Manifest {
    root: PathBuf,
    stage: &'static str,
    config_sha: String,
    seed: u64,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

impl Manifest {
    fn new(stage: &'static str, cfg: &PipelineConfig) -> Manifest {
        Manifest {
            root: cfg.out_dir.clone(),
            stage,
            config_sha: config_identity(cfg),
            seed: cfg.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let entry = (self.rel(path), file_sha256(path)?);
        self.inputs.push(entry);
        Ok(())
    }

    fn input_dir(&mut self, dir: &Path) -> Result<()> {
        for f in dir_files(dir)? {
            self.input(&f)?;
        }
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let entry = (self.rel(path), file_sha256(path)?);
        self.outputs.push(entry);
        Ok(())
    }

    fn output_dir(&mut self, dir: &Path) -> Result<()> {
        for f in dir_files(dir)? {
            self.output(&f)?;
        }
        Ok(())
    }

    fn write(mut self, dir: &Path) -> Result<()> {
        self.inputs.sort();
        self.outputs.sort();
        let mut text = format!(
            "pli-stage {}\nconfig {}\nseed {}\n",
            self.stage, self.config_sha, self.seed
        );
        for (name, sha) in &self.inputs {
            let _ = writeln!(text, "input {name} {sha}");
        }
        for (name, sha) in &self.outputs {
            let _ = writeln!(text, "output {name} {sha}");
        }
        fs::write(dir.join("manifest.txt"), text)?;
        Ok(())
    }
}

fn require(path: &Path, what: &str, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::missing(format!(
            "{what} (run the {stage} stage first)"
        )))
    }
}

// ---------------------------------------------------------------------------
// Tensor readers with fixed dimensionality
// ---------------------------------------------------------------------------

fn read_maps4(path: &Path) -> Result<Array4<f32>> {
    read_tensor::<f32>(path)?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::format("map stack is not 4-dimensional"))
}

fn read_matrix_f32(path: &Path) -> Result<Array2<f32>> {
    read_tensor::<f32>(path)?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::format("expected a 2-dimensional tensor"))
}

fn read_matrix_f64(path: &Path) -> Result<Array2<f64>> {
    read_tensor::<f64>(path)?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::format("expected a 2-dimensional tensor"))
}

fn read_vec_u8(path: &Path) -> Result<Vec<u8>> {
    Ok(read_tensor::<u8>(path)?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::format("expected a 1-dimensional tensor"))?
        .to_vec())
}

fn read_vec_u32(path: &Path) -> Result<Vec<u32>> {
    Ok(read_tensor::<u32>(path)?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::format("expected a 1-dimensional tensor"))?
        .to_vec())
}

fn read_vec_f64(path: &Path) -> Result<Vec<f64>> {
    Ok(read_tensor::<f64>(path)?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::format("expected a 1-dimensional tensor"))?
        .to_vec())
}

// ---------------------------------------------------------------------------
// In-memory stage cores
// ---------------------------------------------------------------------------

/// Simulate the polarimetric measurement for every section and fit the
/// parameter maps back.
pub fn simulate_and_fit(cfg: &PipelineConfig, truth_maps: &Array4<f32>) -> Result<Array4<f32>> {
    let (n, c, h, w) = truth_maps.dim();
    if c != 4 {
        return Err(Error::invalid(format!("expected 4 map channels, got {c}")));
    }
    let angles = default_angles(cfg.angles);
    let mut out = Array4::<f32>::zeros((n, 4, h, w));
    for s in 0..n {
        let maps = truth_maps.index_axis(Axis(0), s);
        let stack = render_stack(&maps, s, &angles, cfg.noise_sigma, cfg.phantom.seed)?;
        let fitted = derive_maps(&stack.view(), &angles, &cfg.phantom.model)?;
        out.index_axis_mut(Axis(0), s).assign(&fitted);
    }
    Ok(out)
}

/// Train the configured encoder on in-memory maps with the given pair
/// geometry and channel set.
pub fn train_encoder(
    cfg: &PipelineConfig,
    maps: &Array4<f32>,
    mode: SamplerMode,
    modality: ModalitySet,
) -> Result<(EncoderParams, Vec<TrainLogRow>)> {
    let (n, _, h, w) = maps.dim();
    let scfg = PairSamplerConfig {
        mode,
        radius_um: cfg.sampler_radius_um,
        pixel_size_um: cfg.phantom.pixel_size_um,
        section_thickness_um: cfg.phantom.section_thickness_um,
        volume_dims: [n, h, w],
        patch_px: cfg.patch_px,
    };
    train(maps, modality, &cfg.train, &scfg, &cfg.encoder)
}

/// Sliding-window encoder features for every section, stacked into a volume.
pub fn contrastive_volume(
    cfg: &PipelineConfig,
    params: &EncoderParams,
    maps: &Array4<f32>,
) -> Result<FeatureVolume> {
    let stride = stride_for(params.patch_px, cfg.featmap_overlap)?;
    let n = maps.dim().0;
    let mut sections = Vec::with_capacity(n);
    for s in 0..n {
        let f = feature_maps(params, &maps.index_axis(Axis(0), s), cfg.featmap_overlap)?;
        sections.push((s, f));
    }
    stack_volume(&sections, params.patch_px, stride, cfg.phantom.pixel_size_um)
}

/// Anisotropy/transmittance baseline features for every section, stacked.
pub fn baseline_volume(cfg: &PipelineConfig, maps: &Array4<f32>) -> Result<FeatureVolume> {
    let n = maps.dim().0;
    let mut sections = Vec::with_capacity(n);
    for s in 0..n {
        let f = baseline_feature_maps(
            &maps.index_axis(Axis(0), s),
            cfg.baseline_patch_px,
            cfg.baseline_stride_px,
        )?;
        let f = f.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
        sections.push((s, f));
    }
    stack_volume(
        &sections,
        cfg.baseline_patch_px,
        cfg.baseline_stride_px,
        cfg.phantom.pixel_size_um,
    )
}

/// Depth-sample a feature volume at the surface vertices and smooth along the
/// mesh. Returns `[n_vertices, depths·C]` features plus missing flags.
pub fn vertex_features(
    cfg: &PipelineConfig,
    pair: &SurfacePair,
    vol: &FeatureVolume,
) -> Result<(Array2<f32>, Vec<bool>)> {
    let levels = interpolate_depths(pair, cfg.depths)?;
    let per_depth: Vec<(Array2<f32>, Vec<bool>)> = levels
        .iter()
        .map(|level| sample_at_vertices(vol, level))
        .collect();
    let (features, missing) = concat_depths(&per_depth)?;
    let smoothed = graph_smooth(
        &features,
        &missing,
        &pair.adjacency(),
        cfg.smooth_iters,
        cfg.smooth_include_self,
    );
    Ok((smoothed, missing))
}

/// Rows whose vertices were sampled successfully, as f64, with the matching
/// confound values and original vertex indices.
fn present_rows(
    features: &Array2<f32>,
    missing: &[bool],
    confound: &[f64],
) -> Result<(Vec<usize>, Array2<f64>, Vec<f64>)> {
    let (n, c) = features.dim();
    if missing.len() != n || confound.len() != n {
        return Err(Error::invalid(
            "features, missing flags and confound disagree in length",
        ));
    }
    let present: Vec<usize> = (0..n).filter(|&v| !missing[v]).collect();
    if present.is_empty() {
        return Err(Error::invalid("no vertex was sampled successfully"));
    }
    let mut x = Array2::<f64>::zeros((present.len(), c));
    let mut conf = Vec::with_capacity(present.len());
    for (row, &v) in present.iter().enumerate() {
        for ch in 0..c {
            x[[row, ch]] = f64::from(features[[v, ch]]);
        }
        conf.push(confound[v]);
    }
    Ok((present, x, conf))
}

/// Reference partition for map rendering: one k-means fit on every present
/// vertex's scores.
pub fn reference_partition(cfg: &PipelineConfig, scores: &Array2<f64>) -> Result<ClusterAssignment> {
    kmeans(scores, cfg.cluster_k, cfg.seed, KMEANS_MAX_ITERS, KMEANS_TOL)
}

/// Method column value for a pair-sampling mode.
#[must_use]
pub fn method_name(mode: SamplerMode) -> &'static str {
    match mode {
        SamplerMode::Cl3d => "cl3d",
        SamplerMode::Cl2d => "cl2d",
    }
}

// ---------------------------------------------------------------------------
// Comparison arms
// ---------------------------------------------------------------------------

/// Channel subsets of the baseline features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineChannels {
    /// Anisotropy and mean transmittance together.
    FaIt,
    /// Mean transmittance alone.
    It,
    /// Anisotropy alone.
    Fa,
}

impl BaselineChannels {
    #[must_use]
    pub fn input_name(self) -> &'static str {
        match self {
            BaselineChannels::FaIt => "fa_it",
            BaselineChannels::It => "it",
            BaselineChannels::Fa => "fa",
        }
    }
}

/// One method/channel combination of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Encoder trained with the given pair geometry on the given channels.
    Contrastive(SamplerMode, ModalitySet),
    /// Classical features restricted to the given channels.
    Baseline(BaselineChannels),
}

impl Arm {
    #[must_use]
    pub fn method(&self) -> &'static str {
        match self {
            Arm::Contrastive(mode, _) => method_name(*mode),
            Arm::Baseline(_) => "baseline",
        }
    }

    #[must_use]
    pub fn input(&self) -> &'static str {
        match self {
            Arm::Contrastive(_, modality) => modality.name(),
            Arm::Baseline(ch) => ch.input_name(),
        }
    }

    /// The nine table rows in method-major order.
    #[must_use]
    pub fn all() -> Vec<Arm> {
        let mut arms = Vec::new();
        for mode in [SamplerMode::Cl3d, SamplerMode::Cl2d] {
            for modality in [ModalitySet::Full, ModalitySet::ItOnly, ModalitySet::PhiROnly] {
                arms.push(Arm::Contrastive(mode, modality));
            }
        }
        arms.push(Arm::Baseline(BaselineChannels::FaIt));
        arms.push(Arm::Baseline(BaselineChannels::It));
        arms.push(Arm::Baseline(BaselineChannels::Fa));
        arms
    }
}

fn restrict_channels(vol: FeatureVolume, ch: BaselineChannels) -> FeatureVolume {
    let keep = match ch {
        BaselineChannels::FaIt => return vol,
        BaselineChannels::Fa => 0usize,
        BaselineChannels::It => 1usize,
    };
    FeatureVolume {
        values: vol.values.slice(s![.., .., .., keep..keep + 1]).to_owned(),
        patch_px: vol.patch_px,
        stride_px: vol.stride_px,
        pixel_size_um: vol.pixel_size_um,
    }
}

/// Feature volume for one arm, training the encoder when contrastive.
pub fn arm_feature_volume(
    cfg: &PipelineConfig,
    maps: &Array4<f32>,
    arm: Arm,
) -> Result<FeatureVolume> {
    match arm {
        Arm::Contrastive(mode, modality) => {
            let (params, _) = train_encoder(cfg, maps, mode, modality)?;
            contrastive_volume(cfg, &params, maps)
        }
        Arm::Baseline(ch) => Ok(restrict_channels(baseline_volume(cfg, maps)?, ch)),
    }
}

/// Back half shared by every arm: vertex features, reduction, and the
/// clustering protocol against the band labels.
pub fn arm_metrics(
    cfg: &PipelineConfig,
    pair: &SurfacePair,
    vol: &FeatureVolume,
) -> Result<MetricsReport> {
    let (features, missing) = vertex_features(cfg, pair, vol)?;
    let confound = cutting_angle_confound(
        pair,
        cfg.phantom.pixel_size_um,
        cfg.phantom.section_thickness_um,
    );
    let (present, x, conf) = present_rows(&features, &missing, &confound)?;
    let (_, _, scores) =
        reduce_features(&x, &conf, PcaSelection::VarianceThreshold(cfg.pca_threshold))?;
    let labels: Vec<usize> = present.iter().map(|&v| pair.labels[v] as usize).collect();
    evaluate_protocol(
        &scores,
        &labels,
        cfg.cluster_runs,
        cfg.cluster_fraction,
        cfg.cluster_k,
        cfg.seed,
    )
}

/// Evaluate one arm end to end on in-memory maps and surfaces.
pub fn run_arm(
    cfg: &PipelineConfig,
    maps: &Array4<f32>,
    pair: &SurfacePair,
    arm: Arm,
) -> Result<MetricsReport> {
    let vol = arm_feature_volume(cfg, maps, arm)?;
    arm_metrics(cfg, pair, &vol)
}

// ---------------------------------------------------------------------------
// Stage commands
// ---------------------------------------------------------------------------

/// Generate the phantom and write its truth maps, labels and surfaces.
pub fn cmd_phantom(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    let truth = generate_phantom(&cfg.phantom)?;
    fs::create_dir_all(lay.phantom_dir())?;
    write_tensor(&lay.phantom_maps(), &truth.maps)?;
    write_tensor(&lay.phantom_labels(), &truth.labels)?;
    truth.surfaces.write(&lay.surfaces())?;
    let mut man = Manifest::new("phantom", cfg);
    man.output(&lay.phantom_maps())?;
    man.output(&lay.phantom_labels())?;
    man.output(&lay.surfaces())?;
    man.write(&lay.phantom_dir())
}

/// Render measurement stacks from the phantom maps, refit the parameter
/// maps, and write them with a first-section orientation color image.
pub fn cmd_signal(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    require(&lay.phantom_maps(), "phantom parameter maps", "phantom")?;
    let truth_maps = read_maps4(&lay.phantom_maps())?;
    let fitted = simulate_and_fit(cfg, &truth_maps)?;
    fs::create_dir_all(lay.signal_dir())?;
    write_tensor(&lay.signal_maps(), &fitted)?;
    let fom = render_fom(&fitted.index_axis(Axis(0), 0))?;
    write_image_rgb(&lay.signal_fom(), &fom)?;
    let mut man = Manifest::new("signal", cfg);
    man.input(&lay.phantom_maps())?;
    man.output(&lay.signal_maps())?;
    man.output(&lay.signal_fom())?;
    man.write(&lay.signal_dir())
}

/// Contrastive training on the fitted maps; writes the encoder checkpoint
/// and the training curve.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    require(&lay.signal_maps(), "fitted parameter maps", "signal")?;
    let maps = read_maps4(&lay.signal_maps())?;
    let (params, log) = train_encoder(cfg, &maps, cfg.sampler_mode, cfg.modality)?;
    params.save(&lay.encoder_dir())?;
    write_training_log(&lay.train_log(), &log)?;
    let mut man = Manifest::new("train", cfg);
    man.input(&lay.signal_maps())?;
    man.output_dir(&lay.encoder_dir())?;
    man.output(&lay.train_log())?;
    man.write(&lay.train_dir())
}

/// Sliding-window inference with the trained encoder over all sections.
pub fn cmd_featmap(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    require(&lay.signal_maps(), "fitted parameter maps", "signal")?;
    require(
        &lay.encoder_dir().join("manifest.txt"),
        "trained encoder",
        "train",
    )?;
    let maps = read_maps4(&lay.signal_maps())?;
    let params = EncoderParams::load(&lay.encoder_dir())?;
    let vol = contrastive_volume(cfg, &params, &maps)?;
    fs::create_dir_all(lay.featmap_dir())?;
    write_feature_volume(&lay.contrastive_features(), &vol)?;
    let mut man = Manifest::new("featmap", cfg);
    man.input(&lay.signal_maps())?;
    man.input_dir(&lay.encoder_dir())?;
    man.output(&lay.contrastive_features())?;
    man.output(&lay.contrastive_features().with_extension("plt.meta"))?;
    man.write(&lay.featmap_dir())
}

/// Classical anisotropy/transmittance features over all sections.
pub fn cmd_baseline(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    require(&lay.signal_maps(), "fitted parameter maps", "signal")?;
    let maps = read_maps4(&lay.signal_maps())?;
    let vol = baseline_volume(cfg, &maps)?;
    fs::create_dir_all(lay.baseline_dir())?;
    write_feature_volume(&lay.baseline_features(), &vol)?;
    let mut man = Manifest::new("baseline", cfg);
    man.input(&lay.signal_maps())?;
    man.output(&lay.baseline_features())?;
    man.output(&lay.baseline_features().with_extension("plt.meta"))?;
    man.write(&lay.baseline_dir())
}

/// Depth-sample the contrastive feature volume over the surfaces and write
/// per-vertex features, flags, the cutting-angle confound and metadata.
pub fn cmd_surface(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    require(&lay.surfaces(), "phantom surfaces", "phantom")?;
    require(
        &lay.contrastive_features(),
        "contrastive feature volume",
        "featmap",
    )?;
    let pair = SurfacePair::read(&lay.surfaces())?;
    let vol = read_feature_volume(&lay.contrastive_features())?;
    let (features, missing) = vertex_features(cfg, &pair, &vol)?;
    let confound = cutting_angle_confound(
        &pair,
        cfg.phantom.pixel_size_um,
        cfg.phantom.section_thickness_um,
    );
    fs::create_dir_all(lay.surface_dir())?;
    write_tensor(&lay.vertex_features(), &features)?;
    let missing_u8 = Array1::from_iter(missing.iter().map(|&m| u8::from(m)));
    write_tensor(&lay.vertex_missing(), &missing_u8)?;
    write_tensor(&lay.vertex_confound(), &Array1::from_vec(confound.clone()))?;
    write_vertex_metadata(&lay.vertex_metadata(), &pair, &confound, &missing)?;
    let mut man = Manifest::new("surface", cfg);
    man.input(&lay.surfaces())?;
    man.input(&lay.contrastive_features())?;
    man.output(&lay.vertex_features())?;
    man.output(&lay.vertex_missing())?;
    man.output(&lay.vertex_confound())?;
    man.output(&lay.vertex_metadata())?;
    man.write(&lay.surface_dir())
}

/// Regress out the cutting-angle confound and project the vertex features
/// onto the principal components meeting the variance threshold.
pub fn cmd_reduce(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    require(&lay.vertex_features(), "vertex features", "surface")?;
    let features = read_matrix_f32(&lay.vertex_features())?;
    let missing: Vec<bool> = read_vec_u8(&lay.vertex_missing())?
        .iter()
        .map(|&b| b != 0)
        .collect();
    let confound = read_vec_f64(&lay.vertex_confound())?;
    let (present, x, conf) = present_rows(&features, &missing, &confound)?;
    let (regression, model, scores) =
        reduce_features(&x, &conf, PcaSelection::VarianceThreshold(cfg.pca_threshold))?;
    fs::create_dir_all(lay.reduce_dir())?;
    write_pca_model(&lay.pca_dir(), &model)?;
    write_tensor(&lay.scores(), &scores)?;
    let present_u32 = Array1::from_iter(present.iter().map(|&v| v as u32));
    write_tensor(&lay.present(), &present_u32)?;
    let mut summary = String::new();
    let _ = writeln!(summary, "components {}", model.n_components());
    let _ = writeln!(summary, "dims {}", model.dims());
    let _ = writeln!(summary, "explained {}", model.explained_kept());
    let _ = writeln!(summary, "rank_deficient {}", regression.rank_deficient);
    let _ = writeln!(summary, "vertices {}", present.len());
    fs::write(lay.reduce_summary(), summary)?;
    let mut man = Manifest::new("reduce", cfg);
    man.input(&lay.vertex_features())?;
    man.input(&lay.vertex_missing())?;
    man.input(&lay.vertex_confound())?;
    man.output_dir(&lay.pca_dir())?;
    man.output(&lay.scores())?;
    man.output(&lay.present())?;
    man.output(&lay.reduce_summary())?;
    man.write(&lay.reduce_dir())
}

/// Score the reduced features with the subset-clustering protocol and render
/// unfolded cluster and band-label maps.
pub fn cmd_cluster(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    require(&lay.scores(), "pca scores", "reduce")?;
    require(&lay.present(), "present-vertex indices", "reduce")?;
    require(&lay.surfaces(), "phantom surfaces", "phantom")?;
    let scores = read_matrix_f64(&lay.scores())?;
    let present = read_vec_u32(&lay.present())?;
    let pair = SurfacePair::read(&lay.surfaces())?;
    let n = pair.n_vertices();
    if present.iter().any(|&v| v as usize >= n) {
        return Err(Error::format("present-vertex index out of range"));
    }
    if present.len() != scores.dim().0 {
        return Err(Error::format(
            "score rows disagree with the present-vertex count",
        ));
    }
    let labels: Vec<usize> = present.iter().map(|&v| pair.labels[v as usize] as usize).collect();
    let report = evaluate_protocol(
        &scores,
        &labels,
        cfg.cluster_runs,
        cfg.cluster_fraction,
        cfg.cluster_k,
        cfg.seed,
    )?;
    let reference = reference_partition(cfg, &scores)?;
    fs::create_dir_all(lay.cluster_dir())?;
    let mut csv = String::from(metrics_csv_header());
    csv.push('\n');
    csv.push_str(&report.csv_rows(method_name(cfg.sampler_mode), cfg.modality.name()));
    fs::write(lay.metrics_csv(), csv)?;
    let assign_u32 = Array1::from_iter(reference.assignments.iter().map(|&a| a as u32));
    write_tensor(&lay.assignments(), &assign_u32)?;
    let mut missing_all = vec![true; n];
    let mut cluster_colors = vec![MISSING_COLOR; n];
    for (row, &v) in present.iter().enumerate() {
        missing_all[v as usize] = false;
        cluster_colors[v as usize] = palette_color(reference.assignments[row]);
    }
    let cluster_map = rasterize_unfolded(
        &pair.uv,
        &cluster_colors,
        &missing_all,
        RASTER_W,
        RASTER_H,
        BACKGROUND_COLOR,
        MISSING_COLOR,
    );
    write_image_rgb(&lay.cluster_map(), &cluster_map)?;
    let label_colors: Vec<[u8; 3]> = pair
        .labels
        .iter()
        .map(|&l| palette_color(l as usize))
        .collect();
    let label_map = rasterize_unfolded(
        &pair.uv,
        &label_colors,
        &vec![false; n],
        RASTER_W,
        RASTER_H,
        BACKGROUND_COLOR,
        MISSING_COLOR,
    );
    write_image_rgb(&lay.label_map(), &label_map)?;
    let mut man = Manifest::new("cluster", cfg);
    man.input(&lay.scores())?;
    man.input(&lay.present())?;
    man.input(&lay.surfaces())?;
    man.output(&lay.metrics_csv())?;
    man.output(&lay.assignments())?;
    man.output(&lay.cluster_map())?;
    man.output(&lay.label_map())?;
    man.write(&lay.cluster_dir())
}

/// Run every arm of the method comparison and write the summary table plus
/// per-run metrics.
pub fn cmd_table1(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let lay = Layout::new(&cfg.out_dir);
    require(&lay.signal_maps(), "fitted parameter maps", "signal")?;
    require(&lay.surfaces(), "phantom surfaces", "phantom")?;
    let maps = read_maps4(&lay.signal_maps())?;
    let pair = SurfacePair::read(&lay.surfaces())?;
    let mut table = String::from("method,input_modalities,purity,ari,mi\n");
    let mut per_run = String::from(metrics_csv_header());
    per_run.push('\n');
    for arm in Arm::all() {
        let report = run_arm(cfg, &maps, &pair, arm)?;
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            arm.method(),
            arm.input(),
            report.mean_purity(),
            report.mean_ari(),
            report.mean_mi(),
        );
        per_run.push_str(&report.csv_rows(arm.method(), arm.input()));
    }
    fs::create_dir_all(lay.table1_dir())?;
    fs::write(lay.table1_csv(), table)?;
    fs::write(lay.table1_runs(), per_run)?;
    let mut man = Manifest::new("table1", cfg);
    man.input(&lay.signal_maps())?;
    man.input(&lay.surfaces())?;
    man.output(&lay.table1_csv())?;
    man.output(&lay.table1_runs())?;
    man.write(&lay.table1_dir())
}

/// Run the stage chain `phantom → … → cluster` in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    cmd_phantom(cfg)?;
    cmd_signal(cfg)?;
    cmd_train(cfg)?;
    cmd_featmap(cfg)?;
    cmd_baseline(cfg)?;
    cmd_surface(cfg)?;
    cmd_reduce(cfg)?;
    cmd_cluster(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::ssl::{EncoderConfig, TrainConfig};

    fn small_config(out_dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.out_dir = out_dir.to_path_buf();
        cfg.phantom.grid = [96, 6, 96];
        cfg.phantom.spiral_r0_px = 8.0;
        cfg.phantom.spiral_r1_px = 38.0;
        cfg.phantom.spiral_turns = 1.5;
        cfg.phantom.drift_px = 2.0;
        cfg.phantom.layer_thickness_um = 10.4;
        cfg.phantom.surface_n_v = 72;
        cfg.angles = 6;
        cfg.noise_sigma = 0.2;
        cfg.sampler_radius_um = 70.0;
        cfg.patch_px = 16;
        cfg.encoder = EncoderConfig::tiny();
        cfg.train = TrainConfig {
            batch_pairs: 8,
            val_pairs: 4,
            val_sections: 2,
            max_steps: 6,
            eval_every: 2,
            patience: 2,
            ..TrainConfig::desk()
        };
        cfg.baseline_patch_px = 8;
        cfg.baseline_stride_px = 8;
        cfg.depths = 3;
        cfg.smooth_iters = 1;
        cfg.cluster_runs = 2;
        cfg.set_master_seed(5);
        cfg.validate().expect("small config is valid");
        cfg
    }

    #[test]
    fn arm_table_has_nine_method_major_rows() {
        let arms = Arm::all();
        assert_eq!(arms.len(), 9);
        let names: Vec<(&str, &str)> = arms.iter().map(|a| (a.method(), a.input())).collect();
        assert_eq!(names[0], ("cl3d", "full"));
        assert_eq!(names[2], ("cl3d", "phir_only"));
        assert_eq!(names[3], ("cl2d", "full"));
        assert_eq!(names[6], ("baseline", "fa_it"));
        assert_eq!(names[8], ("baseline", "fa"));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 9);
    }

    #[test]
    fn channel_restriction_keeps_the_selected_plane() {
        let values = Array4::from_shape_fn((2, 1, 3, 2), |(a, _, b, c)| (a * 10 + b * 2 + c) as f32);
        let vol = FeatureVolume {
            values,
            patch_px: 8,
            stride_px: 8,
            pixel_size_um: 1.0,
        };
        let both = restrict_channels(vol.clone(), BaselineChannels::FaIt);
        assert_eq!(both.n_channels(), 2);
        let it = restrict_channels(vol.clone(), BaselineChannels::It);
        assert_eq!(it.n_channels(), 1);
        assert_eq!(it.values[[1, 0, 2, 0]], vol.values[[1, 0, 2, 1]]);
        let fa = restrict_channels(vol.clone(), BaselineChannels::Fa);
        assert_eq!(fa.values[[1, 0, 2, 0]], vol.values[[1, 0, 2, 0]]);
        assert_eq!(fa.patch_px, 8);
    }

    #[test]
    fn config_identity_ignores_the_output_directory() {
        let mut a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        a.out_dir = PathBuf::from("left");
        b.out_dir = PathBuf::from("right");
        assert_eq!(config_identity(&a), config_identity(&b));
        b.seed = 8;
        assert_ne!(config_identity(&a), config_identity(&b));
    }

    #[test]
    fn manifests_list_sorted_hashed_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        fs::write(dir.path().join("b.txt"), b"bb").unwrap();
        fs::write(dir.path().join("a.txt"), b"aa").unwrap();
        let mut man = Manifest::new("demo", &cfg);
        man.output(&dir.path().join("b.txt")).unwrap();
        man.output(&dir.path().join("a.txt")).unwrap();
        man.write(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "pli-stage demo");
        assert!(lines[1].starts_with("config "));
        assert_eq!(lines[2], "seed 7");
        assert!(lines[3].starts_with("output a.txt "));
        assert!(lines[4].starts_with("output b.txt "));
        assert_eq!(lines[4].split(' ').nth(2).unwrap(), sha256_hex(b"bb"));
    }

    #[test]
    fn cluster_before_reduce_names_the_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let err = cmd_cluster(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("missing prerequisite: pca scores"), "{msg}");
        assert!(msg.contains("reduce"), "{msg}");
    }

    #[test]
    fn baseline_arm_produces_bounded_metrics() {
        let cfg = small_config(Path::new("unused"));
        let truth = generate_phantom(&cfg.phantom).unwrap();
        let maps = simulate_and_fit(&cfg, &truth.maps).unwrap();
        let report = run_arm(
            &cfg,
            &maps,
            &truth.surfaces,
            Arm::Baseline(BaselineChannels::FaIt),
        )
        .unwrap();
        assert_eq!(report.per_run.len(), cfg.cluster_runs);
        for r in &report.per_run {
            assert!(r.purity > 0.0 && r.purity <= 1.0, "purity {}", r.purity);
            assert!(r.ari <= 1.0 + 1e-12, "ari {}", r.ari);
            assert!(r.mi >= 0.0, "mi {}", r.mi);
        }
    }

    #[test]
    fn stage_chain_runs_and_manifests_are_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_all(&small_config(dir_a.path())).unwrap();
        run_all(&small_config(dir_b.path())).unwrap();
        for stage in [
            "phantom", "signal", "train", "featmap", "baseline", "surface", "reduce", "cluster",
        ] {
            let a = fs::read_to_string(dir_a.path().join(stage).join("manifest.txt")).unwrap();
            let b = fs::read_to_string(dir_b.path().join(stage).join("manifest.txt")).unwrap();
            assert_eq!(a, b, "stage {stage} changed between identical runs");
        }
        let metrics =
            fs::read_to_string(dir_a.path().join("cluster").join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("method,input_modalities,run,purity,ari,mi\n"));
        assert_eq!(metrics.lines().count(), 3, "{metrics}");
        assert!(metrics.lines().nth(1).unwrap().starts_with("cl3d,full,0,"));
    }
}
