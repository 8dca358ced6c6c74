//! The `lad` command-line tool.
//!
//! Every subcommand reads and writes the formats in [`crate::io`]. Failures
//! are reported on stderr as one JSON object
//! `{"error": {"code", "message", "context"}}` with a nonzero exit status.
//! `LAD_LOG` sets log verbosity (`error`, `warn`, `info`, `debug`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cube::{Dims, ImageCube, Mask, ScoreMap};
use crate::detect::{
    apply_threshold, energy_profile, gft_coefficients, klt_coefficients, lad_p_score, lad_s_score, lad_score,
    rxd_p_score, rxd_score, CovarianceBasis, TruncationPolicy, DEFAULT_PSI,
};
use crate::error::{Error, Result};
use crate::eval::{confusion, evaluate, roc_curve, soi, RocPoint};
use crate::graph::{
    build_laplacian, cauchy_weights, eigendecompose, partial_correlation_weights, spatial_spectral_weights, Alpha,
    Connectivity, GraphModel, LaplacianVariant,
};
use crate::instrument;
use crate::io::{
    discard_bands, read_bundle, read_cube, read_envi, read_mask, write_atomic, write_bundle, write_cube, write_mask,
    Dtype, ModelBundle, AVIRIS_WATER_BANDS,
};
use crate::stats::{estimate_background_stats, estimate_mean, BackgroundStats};
use crate::synth::{ar1_precision, implant, sample_gmrf_scene, square_line_mask, Anomaly, GmrfFactor, ImplantSpec, SquareLineParams};

#[derive(Debug, Parser)]
#[command(name = "lad", version, about = "Graph-Laplacian and RX anomaly detection for multi-band images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a graph model or background statistics and save them as a bundle.
    Model(ModelArgs),
    /// Score every pixel of a cube.
    Detect(DetectArgs),
    /// Threshold a score map at t * max(score).
    Threshold(ThresholdArgs),
    /// Compare a mask or a score map with a ground-truth mask.
    Eval(EvalArgs),
    /// Write the ROC table of a score map against a truth mask.
    Roc(RocArgs),
    /// Implant class pixels from a labeled scene into a target cube.
    Implant(ImplantArgs),
    /// Sample a synthetic GMRF scene with optional mean-shift anomalies.
    Gmrf(GmrfArgs),
    /// Cumulative energy and eigenvalue table of the KLT or GFT basis.
    Energy(EnergyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Rxd,
    RxdP,
    Lad,
    LadP,
    LadS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsKind {
    PartialCorrelation,
    Cauchy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaplacianArg {
    Sym,
    Comb,
}

impl From<LaplacianArg> for LaplacianVariant {
    fn from(v: LaplacianArg) -> Self {
        match v {
            LaplacianArg::Sym => LaplacianVariant::SymmetricNormalized,
            LaplacianArg::Comb => LaplacianVariant::Combinatorial,
        }
    }
}

/// Input cube plus the band-discard option shared by several subcommands.
#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Cube payload (header at `<path>.json`) or an ENVI `.hdr` file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// 1-based bands to drop, comma separated, or `aviris` for the 20
    /// water-absorption bands.
    #[arg(long)]
    pub discard_bands: Option<String>,
}

/// Model-building parameters. Unset values fall back to the config file,
/// then to defaults.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ModelParams {
    #[arg(long, value_enum)]
    pub weights: Option<WeightsKind>,
    #[arg(long, value_enum)]
    pub laplacian: Option<LaplacianArg>,
    /// Cauchy scale: a positive number or `auto` (mean of band means).
    #[arg(long)]
    pub alpha: Option<String>,
    /// Ridge added to the covariance before inversion.
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Weight of the same-band links between a pixel and its neighbors.
    #[arg(long)]
    pub spatial_weight: Option<f64>,
    /// 4 (2D) or 6 (3D); defaults to the cube's dimensionality.
    #[arg(long)]
    pub connectivity: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BundleKind {
    Graph,
    Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TopologyArg {
    Spectral,
    Spatial,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "graph")]
    pub kind: BundleKind,
    #[arg(long, value_enum, default_value = "spectral")]
    pub topology: TopologyArg,
    #[command(flatten)]
    pub params: ModelParams,
    /// Attach the Laplacian eigensystem (needed by lad-p).
    #[arg(long)]
    pub eigen: bool,
    /// Also invert the covariance (stats bundles; needed by rxd).
    #[arg(long)]
    pub precision: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prebuilt model bundle from `lad model`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub detector: Option<DetectorKind>,
    #[command(flatten)]
    pub params: ModelParams,
    /// Retained-energy fraction for rxd-p / lad-p.
    #[arg(long)]
    pub psi: Option<f64>,
    /// Fixed component count for rxd-p / lad-p (overrides psi).
    #[arg(long)]
    pub p: Option<usize>,
    /// Score cube output path.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Run report (JSON) output path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Detection settings as read from a TOML config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub detector: Option<DetectorKind>,
    pub weights: Option<WeightsKind>,
    pub laplacian: Option<LaplacianArg>,
    pub alpha: Option<String>,
    pub ridge: Option<f64>,
    pub spatial_weight: Option<f64>,
    pub connectivity: Option<u32>,
    pub psi: Option<f64>,
    pub p: Option<usize>,
    pub t: Option<f64>,
    pub seed: Option<u64>,
    pub discard_bands: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Every problem with the parameter ranges, reported together.
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if self.input.is_none() {
            issues.push("input: required".to_string());
        }
        if self.output.is_none() {
            issues.push("output: required".to_string());
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                issues.push(format!("ridge: must be finite and >= 0, got {r}"));
            }
        }
        if let Some(w) = self.spatial_weight {
            if !(w >= 0.0 && w.is_finite()) {
                issues.push(format!("spatial_weight: must be finite and >= 0, got {w}"));
            }
        }
        if let Some(c) = self.connectivity {
            if c != 4 && c != 6 {
                issues.push(format!("connectivity: must be 4 or 6, got {c}"));
            }
        }
        if let Some(psi) = self.psi {
            if !(psi > 0.0 && psi <= 1.0) {
                issues.push(format!("psi: must lie in (0, 1], got {psi}"));
            }
        }
        if self.p == Some(0) {
            issues.push("p: must be >= 1".to_string());
        }
        if let Some(t) = self.t {
            if !(0.0..=1.0).contains(&t) {
                issues.push(format!("t: must lie in [0, 1], got {t}"));
            }
        }
        if let Some(a) = &self.alpha {
            if let Err(e) = parse_alpha(a) {
                issues.push(format!("alpha: {e}"));
            }
        }
        if let Some(b) = &self.discard_bands {
            if let Err(e) = parse_band_list(b) {
                issues.push(format!("discard_bands: {e}"));
            }
        }
        issues
    }

    fn model_params(&self) -> ModelParams {
        ModelParams {
            weights: self.weights,
            laplacian: self.laplacian,
            alpha: self.alpha.clone(),
            ridge: self.ridge,
            spatial_weight: self.spatial_weight,
            connectivity: self.connectivity,
        }
    }
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Fraction of the maximum score, in [0, 1].
    #[arg(long)]
    pub t: f64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub truth: PathBuf,
    /// Predicted mask; compared directly.
    #[arg(long, conflicts_with = "scores")]
    pub pred: Option<PathBuf>,
    /// Score cube; swept over the threshold grid.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Grid resolution: thresholds k / steps for k = 0..=steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// JSON summary output path.
    #[arg(long)]
    pub output: PathBuf,
    /// Optional ROC CSV output path (score sweeps only).
    #[arg(long)]
    pub roc: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RocArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct LayoutArgs {
    #[arg(long, default_value_t = 6)]
    pub max_side: usize,
    #[arg(long, default_value_t = 2)]
    pub spacing: usize,
    #[arg(long, default_value_t = 3)]
    pub line_gap: usize,
    /// Rotation in radians.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_6)]
    pub rotation: f64,
    /// Use a single line of squares instead of two mirrored lines.
    #[arg(long)]
    pub single_line: bool,
}

impl LayoutArgs {
    fn params(&self) -> SquareLineParams {
        SquareLineParams {
            max_side: self.max_side,
            spacing: self.spacing,
            line_gap: self.line_gap,
            mirrored: !self.single_line,
            rotation: self.rotation,
        }
    }
}

#[derive(Debug, Args)]
pub struct ImplantArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// One-band cube of integer class labels aligned with the source.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub class: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use this mask instead of the square-line layout.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShiftPattern {
    /// Same sign on every band.
    Uniform,
    /// Signs alternate +, -, +, ... across bands.
    Alternating,
}

#[derive(Debug, Args)]
pub struct GmrfArgs {
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    /// Makes the scene a volume of this many slices.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub bands: usize,
    /// Lag-one band correlation of the AR(1) precision.
    #[arg(long, default_value_t = 0.6)]
    pub rho: f64,
    /// JSON file holding the precision as an array of rows (overrides rho).
    #[arg(long)]
    pub precision: Option<PathBuf>,
    /// Mean shift in units of each band's standard deviation; 0 disables
    /// the anomaly.
    #[arg(long, default_value_t = 6.0)]
    pub shift_sigma: f64,
    #[arg(long, value_enum, default_value = "alternating")]
    pub shift_pattern: ShiftPattern,
    /// Constant added to every sample.
    #[arg(long, default_value_t = 0.0)]
    pub offset: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Klt,
    Gft,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "klt")]
    pub basis: BasisArg,
    #[command(flatten)]
    pub params: ModelParams,
    #[arg(long)]
    pub output: PathBuf,
}

/// Parses `argv` (program name first), runs, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAD_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let body = json!({"error": {"code": "usage", "message": e.to_string().trim(), "context": {}}});
            eprintln!("{body}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let context = match &e {
                Error::Config(list) => json!({ "issues": list }),
                Error::Io { path, .. } | Error::Format { path, .. } | Error::PayloadLength { path, .. } => {
                    json!({ "path": path })
                }
                _ => json!({}),
            };
            let body = json!({"error": {"code": e.code(), "message": e.to_string(), "context": context}});
            eprintln!("{body}");
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Model(a) => cmd_model(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Threshold(a) => cmd_threshold(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Roc(a) => cmd_roc(a),
        Command::Implant(a) => cmd_implant(a),
        Command::Gmrf(a) => cmd_gmrf(a),
        Command::Energy(a) => cmd_energy(a),
    }
}

pub fn parse_alpha(text: &str) -> Result<Alpha> {
    if text.eq_ignore_ascii_case("auto") {
        return Ok(Alpha::Auto);
    }
    match text.parse::<f64>() {
        Ok(a) if a > 0.0 && a.is_finite() => Ok(Alpha::Fixed(a)),
        _ => Err(Error::param("alpha", format!("expected `auto` or a positive number, got {text:?}"))),
    }
}

/// `aviris`, an empty string, or comma-separated 1-based indices and
/// inclusive ranges (`108-112,224`).
pub fn parse_band_list(text: &str) -> Result<Vec<usize>> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("aviris") {
        return Ok(AVIRIS_WATER_BANDS.to_vec());
    }
    let bad = |s: &str| Error::param("discard_bands", format!("bad band item {s:?}"));
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad(item))?;
                let b: usize = b.trim().parse().map_err(|_| bad(item))?;
                if a > b {
                    return Err(bad(item));
                }
                out.extend(a..=b);
            }
            None => out.push(item.parse().map_err(|_| bad(item))?),
        }
    }
    Ok(out)
}

fn load_input(path: &Path, discard: Option<&str>) -> Result<ImageCube> {
    let cube = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("hdr")) {
        read_envi(path)?
    } else {
        read_cube(path)?
    };
    match discard {
        Some(list) => discard_bands(&cube, &parse_band_list(list)?),
        None => Ok(cube),
    }
}

fn required_input(input: &InputArgs) -> Result<ImageCube> {
    let path = input
        .input
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["input: required".into()]))?;
    load_input(path, input.discard_bands.as_deref())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).expect("report serializes");
    text.push(b'\n');
    write_atomic(path, &text)
}

/// Resolved model-building settings.
#[derive(Debug, Clone, Copy, Serialize)]
struct ModelPlan {
    weights: WeightsKind,
    laplacian: LaplacianArg,
    #[serde(skip)]
    alpha: Alpha,
    ridge: f64,
    spatial_weight: f64,
    connectivity: Option<u32>,
}

impl ModelPlan {
    fn resolve(params: &ModelParams) -> Result<Self> {
        Ok(ModelPlan {
            weights: params.weights.unwrap_or(WeightsKind::PartialCorrelation),
            laplacian: params.laplacian.unwrap_or(LaplacianArg::Sym),
            alpha: params.alpha.as_deref().map_or(Ok(Alpha::Auto), parse_alpha)?,
            ridge: params.ridge.unwrap_or(0.0),
            spatial_weight: params.spatial_weight.unwrap_or(1.0),
            connectivity: params.connectivity,
        })
    }

    fn connectivity_for(&self, cube: &ImageCube) -> Result<Connectivity> {
        let c = match self.connectivity {
            Some(n) => Connectivity::from_count(n)?,
            None => Connectivity::for_ndim(cube.dims().ndim())?,
        };
        if c.ndim() != cube.dims().ndim() {
            return Err(Error::Topology(format!(
                "{}-connectivity on a {}D cube",
                c.count(),
                cube.dims().ndim()
            )));
        }
        Ok(c)
    }

    fn stats(&self, cube: &ImageCube, precision: bool) -> Result<BackgroundStats> {
        estimate_background_stats(cube, precision, self.ridge)
    }

    /// Builds the graph model. The Cauchy route only estimates the band
    /// mean: no covariance, no inversion.
    fn graph(&self, cube: &ImageCube, spatial: bool, eigen: bool) -> Result<GraphModel> {
        let (weights, mean) = match self.weights {
            WeightsKind::Cauchy => {
                let mean = estimate_mean(cube)?;
                (cauchy_weights(mean.as_slice(), self.alpha)?, mean)
            }
            WeightsKind::PartialCorrelation => {
                let stats = self.stats(cube, true)?;
                (partial_correlation_weights(&stats)?, stats.mean)
            }
        };
        let weights = if spatial {
            spatial_spectral_weights(&weights, self.spatial_weight, self.connectivity_for(cube)?)?
        } else {
            weights
        };
        let model = build_laplacian(weights, self.laplacian.into(), mean)?;
        if eigen {
            eigendecompose(model)
        } else {
            Ok(model)
        }
    }
}

fn model_provenance(plan: &ModelPlan, cube: &ImageCube) -> Value {
    json!({
        "weights": plan.weights,
        "laplacian": plan.laplacian,
        "alpha": match plan.alpha { Alpha::Auto => json!("auto"), Alpha::Fixed(a) => json!(a) },
        "ridge": plan.ridge,
        "spatial_weight": plan.spatial_weight,
        "dims": cube.dims().extents(),
        "bands": cube.bands(),
    })
}

fn cmd_model(args: ModelArgs) -> Result<()> {
    let cube = required_input(&args.input)?;
    let plan = ModelPlan::resolve(&args.params)?;
    let bundle = match args.kind {
        BundleKind::Stats => ModelBundle::Stats(plan.stats(&cube, args.precision)?),
        BundleKind::Graph => ModelBundle::Graph(plan.graph(&cube, args.topology == TopologyArg::Spatial, args.eigen)?),
    };
    write_bundle(&bundle, &args.output, model_provenance(&plan, &cube))
}

#[derive(Debug, Serialize)]
struct DetectReport {
    detector: DetectorKind,
    dims: Vec<usize>,
    bands: usize,
    model: Value,
    retained_p: Option<usize>,
    max_score: f64,
    instrumentation: instrument::Counters,
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_toml(&text, path)?
        }
        None => RunConfig::default(),
    };
    macro_rules! overlay {
        ($($field:ident = $value:expr),* $(,)?) => {
            $( if let Some(v) = $value { cfg.$field = Some(v); } )*
        };
    }
    overlay!(
        input = args.input.input.clone(),
        discard_bands = args.input.discard_bands.clone(),
        output = args.output.clone(),
        report = args.report.clone(),
        model = args.model.clone(),
        detector = args.detector,
        weights = args.params.weights,
        laplacian = args.params.laplacian,
        alpha = args.params.alpha.clone(),
        ridge = args.params.ridge,
        spatial_weight = args.params.spatial_weight,
        connectivity = args.params.connectivity,
        psi = args.psi,
        p = args.p,
    );
    let issues = cfg.validate();
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }

    let cube = load_input(cfg.input.as_ref().expect("validated"), cfg.discard_bands.as_deref())?;
    let plan = ModelPlan::resolve(&cfg.model_params())?;
    let detector = cfg.detector.unwrap_or(DetectorKind::Lad);
    let policy = match (cfg.p, cfg.psi) {
        (Some(p), _) => TruncationPolicy::fixed(p),
        (None, psi) => TruncationPolicy::energy(psi.unwrap_or(DEFAULT_PSI)),
    };
    let bundle = cfg.model.as_deref().map(read_bundle).transpose()?;

    let before = instrument::snapshot();
    let (scores, retained_p, model_info) = match detector {
        DetectorKind::Rxd | DetectorKind::RxdP => {
            let stats = match bundle {
                Some(ModelBundle::Stats(s)) => s,
                Some(ModelBundle::Graph(_)) => {
                    return Err(Error::Topology("rx detectors need a stats bundle, got a graph model".into()))
                }
                None => plan.stats(&cube, detector == DetectorKind::Rxd)?,
            };
            let info = json!({ "kind": "stats", "ridge": plan.ridge });
            if detector == DetectorKind::Rxd {
                (rxd_score(&cube, &stats)?, None, info)
            } else {
                let basis = CovarianceBasis::new(&stats)?;
                let out = rxd_p_score(&cube, &stats, &basis, &policy)?;
                (out.scores, out.policy.retained_p, info)
            }
        }
        DetectorKind::Lad | DetectorKind::LadP | DetectorKind::LadS => {
            let spatial = detector == DetectorKind::LadS;
            let eigen = detector == DetectorKind::LadP;
            let (model, info) = match bundle {
                Some(ModelBundle::Graph(g)) => {
                    let g = if eigen && g.eigensystem.is_none() { eigendecompose(g)? } else { g };
                    let info = json!({ "kind": "graph", "source": "bundle", "variant": g.variant });
                    (g, info)
                }
                Some(ModelBundle::Stats(_)) => {
                    return Err(Error::Topology("lad detectors need a graph bundle, got stats".into()))
                }
                None => {
                    let g = plan.graph(&cube, spatial, eigen)?;
                    let info = json!({ "kind": "graph", "source": "built", "plan": plan });
                    (g, info)
                }
            };
            match detector {
                DetectorKind::Lad => (lad_score(&cube, &model)?, None, info),
                DetectorKind::LadS => (lad_s_score(&cube, &model)?, None, info),
                _ => {
                    let out = lad_p_score(&cube, &model, &policy)?;
                    (out.scores, out.policy.retained_p, info)
                }
            }
        }
    };
    let counters = instrument::snapshot().since(&before);

    let report = DetectReport {
        detector,
        dims: cube.dims().extents().to_vec(),
        bands: cube.bands(),
        model: model_info,
        retained_p,
        max_score: scores.max(),
        instrumentation: counters,
    };
    let provenance = json!({ "detector": detector, "retained_p": retained_p });
    write_cube(&scores.to_cube(), cfg.output.as_ref().expect("validated"), Dtype::F64, provenance)?;
    if let Some(path) = &cfg.report {
        write_json(path, &report)?;
    }
    log::info!(
        "{detector:?}: {} pixels scored, {} inversions, {} eigendecompositions",
        cube.num_pixels(),
        counters.covariance_inversions,
        counters.eigendecompositions
    );
    Ok(())
}

fn read_scores(path: &Path) -> Result<ScoreMap> {
    ScoreMap::from_cube(&read_cube(path)?)
}

fn cmd_threshold(args: ThresholdArgs) -> Result<()> {
    let scores = read_scores(&args.scores)?;
    write_mask(&apply_threshold(&scores, args.t)?, &args.output)
}

fn grid(steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::param("steps", "must be >= 1"));
    }
    Ok((0..=steps).map(|k| k as f64 / steps as f64).collect())
}

fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,t\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.t));
    }
    out
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let truth = read_mask(&args.truth)?;
    let summary = match (&args.pred, &args.scores) {
        (Some(pred), _) => {
            let pred = read_mask(pred)?;
            json!({
                "confusion": confusion(&pred, &truth)?,
                "soi": soi(&pred, &truth)?,
            })
        }
        (None, Some(scores)) => {
            let report = evaluate(&read_scores(scores)?, &truth, &grid(args.steps)?)?;
            if let Some(path) = &args.roc {
                write_atomic(path, roc_csv(&report.roc).as_bytes())?;
            }
            json!({
                "confusion": report.confusion,
                "soi": report.soi,
                "best": report.best,
            })
        }
        (None, None) => return Err(Error::Config(vec!["eval: one of --pred or --scores is required".into()])),
    };
    write_json(&args.output, &summary)
}

fn cmd_roc(args: RocArgs) -> Result<()> {
    let points = roc_curve(&read_scores(&args.scores)?, &read_mask(&args.truth)?, &grid(args.steps)?)?;
    write_atomic(&args.output, roc_csv(&points).as_bytes())
}

fn labels_from_cube(cube: &ImageCube) -> Result<Vec<u32>> {
    if cube.bands() != 1 {
        return Err(Error::DimensionMismatch {
            what: "label cube band count",
            expected: 1,
            actual: cube.bands(),
        });
    }
    cube.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
                Ok(v as u32)
            } else {
                Err(Error::param("labels", format!("label {v} at pixel {i} is not a class index")))
            }
        })
        .collect()
}

fn cmd_implant(args: ImplantArgs) -> Result<()> {
    let target = read_cube(&args.target)?;
    let source = read_cube(&args.source)?;
    let labels = read_cube(&args.labels)?;
    if labels.dims() != source.dims() {
        return Err(Error::Shape("label cube dims differ from source".into()));
    }
    let mask = match &args.mask {
        Some(path) => read_mask(path)?,
        None => square_line_mask(target.dims(), &args.layout.params())?,
    };
    let spec = ImplantSpec {
        mask,
        source_labels: labels_from_cube(&labels)?,
        class: args.class,
        seed: args.seed,
    };
    let out = implant(&target, &spec, &source)?;
    let provenance = json!({
        "implant": { "class": args.class, "seed": args.seed, "layout": args.layout.params(),
                     "mask": if args.mask.is_some() { "file" } else { "square-line" } },
    });
    write_cube(&out, &args.output, Dtype::F64, provenance)?;
    write_mask(&spec.mask, &args.truth)
}

fn cmd_gmrf(args: GmrfArgs) -> Result<()> {
    let dims = match args.depth {
        Some(d) => Dims::d3(d, args.rows, args.cols)?,
        None => Dims::d2(args.rows, args.cols)?,
    };
    let precision = match &args.precision {
        Some(path) => {
            let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let rows: Vec<Vec<f64>> = serde_json::from_slice(&text).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: "precision must be square".into(),
                });
            }
            nalgebra::DMatrix::from_fn(n, n, |a, b| rows[a][b])
        }
        None => ar1_precision(args.bands, args.rho)?,
    };
    let anomaly = if args.shift_sigma != 0.0 {
        let mask = match dims.ndim() {
            2 => square_line_mask(&dims, &args.layout.params())?,
            _ => {
                // Volumes get the 2D layout on their middle slice.
                let ext = dims.extents();
                let slice = square_line_mask(&Dims::d2(ext[1], ext[2])?, &args.layout.params())?;
                let mut mask = Mask::empty(dims.clone());
                let base = (ext[0] / 2) * ext[1] * ext[2];
                for (i, &v) in slice.values().iter().enumerate() {
                    mask.set(base + i, v);
                }
                mask
            }
        };
        Some(Anomaly {
            mask,
            shift: sigma_shift(&GmrfFactor::new(&precision)?.sigmas(), args.shift_sigma, args.shift_pattern),
        })
    } else {
        None
    };
    let (cube, truth) = sample_gmrf_scene(&dims, args.bands, &precision, anomaly.as_ref(), args.seed)?;
    let cube = if args.offset != 0.0 {
        let data = cube.data().iter().map(|v| v + args.offset).collect();
        ImageCube::new(dims.clone(), args.bands, data)?
    } else {
        cube
    };
    let provenance = json!({
        "gmrf": { "rho": args.rho, "precision_file": args.precision.is_some(), "shift_sigma": args.shift_sigma,
                  "shift_pattern": format!("{:?}", args.shift_pattern).to_lowercase(), "offset": args.offset,
                  "seed": args.seed, "layout": args.layout.params() },
    });
    write_cube(&cube, &args.output, Dtype::F64, provenance)?;
    write_mask(&truth, &args.truth)
}

/// `k` standard deviations per band, with the requested sign pattern.
pub fn sigma_shift(sigmas: &[f64], k: f64, pattern: ShiftPattern) -> Vec<f64> {
    sigmas
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let sign = match pattern {
                ShiftPattern::Uniform => 1.0,
                ShiftPattern::Alternating if b % 2 == 1 => -1.0,
                ShiftPattern::Alternating => 1.0,
            };
            sign * k * s
        })
        .collect()
}

fn cmd_energy(args: EnergyArgs) -> Result<()> {
    let cube = required_input(&args.input)?;
    let plan = ModelPlan::resolve(&args.params)?;
    // Columns: component index, cumulative energy, energy ratio, basis
    // eigenvalue, and the factor that component carries in the score.
    let (energies, eigenvalues, weights, label) = match args.basis {
        BasisArg::Klt => {
            let stats = plan.stats(&cube, false)?;
            let basis = CovarianceBasis::new(&stats)?;
            let m = basis.order();
            let coeffs = klt_coefficients(&cube, &stats, &basis)?;
            let kappa: Vec<f64> = basis.values.iter().copied().collect();
            let inv = kappa.iter().map(|k| if *k > 0.0 { 1.0 / k } else { f64::INFINITY }).collect();
            (energy_profile(coeffs.chunks_exact(m), m), kappa, inv, "kappa_inverse")
        }
        BasisArg::Gft => {
            let model = plan.graph(&cube, false, true)?;
            let n = model.order();
            let coeffs = gft_coefficients(&cube, &model)?;
            let lambda: Vec<f64> = model.eigensystem()?.values.iter().copied().collect();
            (energy_profile(coeffs.chunks_exact(n), n), lambda.clone(), lambda, "lambda")
        }
    };
    let total = *energies.last().expect("at least one band");
    let mut out = format!("p,energy,ratio,eigenvalue,{label}\n");
    for (j, e) in energies.iter().enumerate() {
        let ratio = if total > 0.0 { e / total } else { 0.0 };
        out.push_str(&format!("{},{},{},{},{}\n", j + 1, e, ratio, eigenvalues[j], weights[j]));
    }
    write_atomic(&args.output, out.as_bytes())
}
