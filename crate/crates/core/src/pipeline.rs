//! End-to-end runs: corridor and model files in, spline and trajectory
//! artifacts out.
//!
//! Every artifact written by a run echoes the [`RunManifest`] that produced
//! it, and nothing time- or machine-dependent is recorded, so identical
//! manifests give byte-identical output directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::{Corridor, CorridorError};
use crate::models::{DynamicsModel, ModelConfig, ModelError};
use crate::nlp::SolveReport;
use crate::ocp::{self, OcpError, SpatialTrajectory, TranscriptionConfig};
use crate::spline::{self, Criterion, PHSpline, SplineConfig, SplineError, SplineReport};

pub const SPLINE_FILE: &str = "spline.json";
pub const SPLINE_REPORT_FILE: &str = "spline_report.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SIDECAR_FILE: &str = "trajectory.json";
pub const PLOT_FILE: &str = "plot.json";

/// Saturation tolerance used in summaries.
pub const ACTIVE_TOL: f64 = 1e-4;

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub corridor: PathBuf,
    /// Model config; only stage 2 needs it.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default)]
    pub spline: SplineConfig,
    #[serde(default)]
    pub transcription: TranscriptionConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Seeds the stage-1 initial-guess jitter.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plot_data: bool,
}

fn default_criterion() -> Criterion {
    Criterion::Energy
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunManifest {
    pub fn new(corridor: impl Into<PathBuf>, model: Option<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            corridor: corridor.into(),
            model,
            criterion: default_criterion(),
            spline: SplineConfig::default(),
            transcription: TranscriptionConfig::default(),
            out: out.into(),
            seed: 0,
            plot_data: false,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Input(format!("cannot parse manifest: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Stage-1 options with the manifest seed applied.
    pub fn spline_config(&self) -> SplineConfig {
        SplineConfig { seed: self.seed, ..self.spline.clone() }
    }

    pub fn model_config(&self) -> Result<ModelConfig, PipelineError> {
        let path = self.model.as_ref().ok_or_else(|| PipelineError::Input("no model config given".into()))?;
        Ok(ModelConfig::load(path)?)
    }

    /// Copy of the manifest for one criterion writing below `out/<criterion>`.
    pub fn for_criterion(&self, criterion: Criterion) -> Self {
        Self { criterion, out: self.out.join(criterion.as_str()), ..self.clone() }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Corridor(#[from] CorridorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stage1(#[from] SplineError),
    #[error(transparent)]
    Stage2(#[from] OcpError),
    #[error("verification failed:\n  {}", .0.join("\n  "))]
    Verification(Vec<String>),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl PipelineError {
    /// 1 input, 2 stage 1, 3 stage 2, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Input(_) | PipelineError::Model(_) | PipelineError::Output { .. } => 1,
            PipelineError::Corridor(CorridorError::Disjoint { .. }) => 2,
            PipelineError::Corridor(_) => 1,
            PipelineError::Stage1(SplineError::Io(_) | SplineError::Parse(_)) => 1,
            PipelineError::Stage1(_) => 2,
            PipelineError::Stage2(OcpError::Setup(_)) => 1,
            PipelineError::Stage2(OcpError::Verification { .. }) => 4,
            PipelineError::Stage2(_) => 3,
            PipelineError::Verification(_) => 4,
        }
    }

    /// Solver report attached to the failure, if any.
    pub fn report(&self) -> Option<&SolveReport> {
        match self {
            PipelineError::Stage1(SplineError::Infeasible { report, .. } | SplineError::NotConverged { report, .. }) => {
                Some(report)
            }
            PipelineError::Stage2(OcpError::NotConverged { report, .. } | OcpError::ForwardProgress { report, .. }) => {
                Some(report)
            }
            PipelineError::Stage2(OcpError::Verification { trajectory, .. }) => Some(&trajectory.report),
            _ => None,
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Output { path: dir.to_path_buf(), message: e.to_string() })?;
    }
    fs::write(path, text).map_err(|e| PipelineError::Output { path: path.to_path_buf(), message: e.to_string() })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serialises");
    s.push('\n');
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplineArtifact {
    pub manifest: RunManifest,
    pub report: SplineReport,
}

/// Stage 1: optimise the spline and write `spline.json` and
/// `spline_report.json` to the output directory.
pub fn run_spline(manifest: &RunManifest) -> Result<(PHSpline, SplineReport), PipelineError> {
    let corridor = Corridor::load(&manifest.corridor)?;
    let (spline, _, report) = spline::optimize_spline(&corridor, manifest.criterion, &manifest.spline_config())?;
    write(&manifest.out.join(SPLINE_FILE), &spline.to_json())?;
    let artifact = SplineArtifact { manifest: manifest.clone(), report: report.clone() };
    write(&manifest.out.join(SPLINE_REPORT_FILE), &to_json(&artifact))?;
    Ok((spline, report))
}

/// Per-input and per-path-constraint counts of intervals at a bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveSummary {
    pub intervals: usize,
    /// `(name, intervals at lower, intervals at upper)`.
    pub inputs: Vec<(String, usize, usize)>,
    pub path: Vec<(usize, usize, usize)>,
    /// Fraction of intervals with any active input or path bound.
    pub saturated_fraction: f64,
}

impl ActiveSummary {
    pub fn new<M: DynamicsModel>(model: &M, traj: &SpatialTrajectory, tol: f64) -> Self {
        let (ulo, uhi) = model.input_bounds();
        let (plo, phi) = model.path_bounds();
        let names = model.input_names();
        let mut inputs: Vec<(String, usize, usize)> = names.iter().map(|n| (n.to_string(), 0, 0)).collect();
        let mut path: Vec<(usize, usize, usize)> = (0..model.num_path_constraints()).map(|j| (j, 0, 0)).collect();
        let mut c = vec![0.0; model.num_path_constraints()];
        for (k, u) in traj.inputs.iter().enumerate() {
            for i in 0..u.len() {
                inputs[i].1 += usize::from((u[i] - ulo[i]).abs() <= tol);
                inputs[i].2 += usize::from((u[i] - uhi[i]).abs() <= tol);
            }
            model.path_constraints(&traj.states[k], u, &mut c);
            for j in 0..c.len() {
                path[j].1 += usize::from((c[j] - plo[j]).abs() <= tol);
                path[j].2 += usize::from((c[j] - phi[j]).abs() <= tol);
            }
        }
        Self { intervals: traj.inputs.len(), inputs, path, saturated_fraction: traj.saturation(model, tol) }
    }
}

/// JSON sidecar of `trajectory.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub manifest: RunManifest,
    pub model: String,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub nodes_per_segment: usize,
    pub total_time: f64,
    pub roundtrip_deviation: f64,
    pub active: ActiveSummary,
    pub report: SolveReport,
}

/// Per-node series for external plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub xi: Vec<f64>,
    pub t: Vec<f64>,
    pub position: Vec<[f64; 3]>,
    pub speed: Vec<f64>,
    pub xidot: Vec<f64>,
    pub input_names: Vec<String>,
    /// Inputs per node, the last interval's repeated on the closing node.
    pub inputs: Vec<Vec<f64>>,
    /// Spline samples between nodes.
    pub reference: Vec<[f64; 3]>,
}

impl PlotData {
    pub fn new<M: DynamicsModel>(model: &M, spline: &PHSpline, traj: &SpatialTrajectory) -> Self {
        let last = traj.inputs.len().saturating_sub(1);
        let samples = 4 * traj.xi_grid.len().saturating_sub(1).max(1);
        let m = spline.num_segments() as f64;
        Self {
            xi: traj.xi_grid.clone(),
            t: traj.times.clone(),
            position: traj.states.iter().map(|x| model.output(x)).collect(),
            speed: traj.states.iter().map(|x| crate::geom::norm(model.velocity(x))).collect(),
            xidot: traj.xidot.clone(),
            input_names: traj.input_names.clone(),
            inputs: (0..traj.states.len()).map(|k| traj.inputs[k.min(last)].clone()).collect(),
            reference: (0..=samples)
                .map(|i| spline.position(m * i as f64 / samples as f64).expect("sample inside the spline domain"))
                .collect(),
        }
    }
}

/// Result of a stage-2 run.
#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub trajectory: SpatialTrajectory,
    pub active: ActiveSummary,
}

/// Stage 2 on a given spline: writes `trajectory.csv`, its sidecar and,
/// if requested, `plot.json`.
pub fn run_plan(manifest: &RunManifest, spline: &PHSpline) -> Result<PlanOutcome, PipelineError> {
    let corridor = Corridor::load(&manifest.corridor)?;
    let config = manifest.model_config()?;
    let cfg = &manifest.transcription;
    let traj = ocp::solve_min_time(&config.model, spline, &corridor, &config.x0, config.terminal_mask.as_deref(), cfg)?;
    let active = ActiveSummary::new(&config.model, &traj, ACTIVE_TOL);
    let sidecar = Sidecar {
        manifest: manifest.clone(),
        model: traj.model.clone(),
        state_names: traj.state_names.clone(),
        input_names: traj.input_names.clone(),
        nodes_per_segment: traj.nodes_per_segment,
        total_time: traj.total_time,
        roundtrip_deviation: traj.roundtrip(&config.model, cfg),
        active: active.clone(),
        report: traj.report.clone(),
    };
    write(&manifest.out.join(TRAJECTORY_FILE), &traj.to_csv())?;
    write(&manifest.out.join(SIDECAR_FILE), &to_json(&sidecar))?;
    if manifest.plot_data {
        write(&manifest.out.join(PLOT_FILE), &to_json(&PlotData::new(&config.model, spline, &traj)))?;
    }
    Ok(PlanOutcome { trajectory: traj, active })
}

/// Stage 2 using the spline previously written to the output directory.
pub fn run_plan_from_artifact(manifest: &RunManifest) -> Result<PlanOutcome, PipelineError> {
    let spline = PHSpline::load(manifest.out.join(SPLINE_FILE))?;
    run_plan(manifest, &spline)
}

/// Both stages.
pub fn run_full(manifest: &RunManifest) -> Result<(SplineReport, PlanOutcome), PipelineError> {
    let (spline, report) = run_spline(manifest)?;
    let plan = run_plan(manifest, &spline)?;
    Ok((report, plan))
}

/// Independent full runs, one thread per criterion, each writing below
/// `out/<criterion>`. Results keep the order of `criteria`.
pub fn run_criteria(
    manifest: &RunManifest,
    criteria: &[Criterion],
) -> Vec<(Criterion, Result<(SplineReport, PlanOutcome), PipelineError>)> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&c| {
                let m = manifest.for_criterion(c);
                (c, scope.spawn(move || run_full(&m)))
            })
            .collect();
        handles.into_iter().map(|(c, h)| (c, h.join().expect("criterion run panicked"))).collect()
    })
}

/// Re-checks a written trajectory against the manifest's corridor and
/// model. `trajectory` defaults to `out/trajectory.csv` and `spline` to
/// `out/spline.json`; the sidecar is expected next to the trajectory.
pub fn run_verify(
    manifest: &RunManifest,
    trajectory: Option<&Path>,
    spline: Option<&Path>,
) -> Result<SpatialTrajectory, PipelineError> {
    let corridor = Corridor::load(&manifest.corridor)?;
    let config = manifest.model_config()?;
    let csv_path = trajectory.map(Path::to_path_buf).unwrap_or_else(|| manifest.out.join(TRAJECTORY_FILE));
    let spline_path = spline.map(Path::to_path_buf).unwrap_or_else(|| manifest.out.join(SPLINE_FILE));
    let spline = PHSpline::load(&spline_path)?;
    let sidecar_path = csv_path.with_file_name(SIDECAR_FILE);
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())));
    let sidecar: Sidecar = serde_json::from_str(&read(&sidecar_path)?)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", sidecar_path.display())))?;
    if sidecar.model != config.model.name() {
        return Err(PipelineError::Verification(vec![format!(
            "trajectory was planned for {}, manifest model is {}",
            sidecar.model,
            config.model.name()
        )]));
    }
    let template = SpatialTrajectory {
        model: sidecar.model,
        state_names: sidecar.state_names,
        input_names: sidecar.input_names,
        nodes_per_segment: sidecar.nodes_per_segment,
        xi_grid: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        times: Vec::new(),
        total_time: 0.0,
        xidot: Vec::new(),
        report: sidecar.report,
    };
    let traj = template
        .with_csv(&read(&csv_path)?)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", csv_path.display())))?;
    let mut failures = traj.verify(&config.model, &spline, &corridor, &manifest.transcription);
    if failures.is_empty() && (traj.total_time - sidecar.total_time).abs() > 1e-12 * sidecar.total_time.abs().max(1.0) {
        failures.push(format!("total_time {} differs from the sidecar's {}", traj.total_time, sidecar.total_time));
    }
    if failures.is_empty() {
        Ok(traj)
    } else {
        Err(PipelineError::Verification(failures))
    }
}
