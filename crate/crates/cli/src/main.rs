use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sctomp::pipeline::{self, PipelineError, PlanOutcome, RunManifest};
use sctomp::spline::{Criterion, SplineReport};

#[derive(Parser)]
#[command(name = "sctomp", version, about = "Time-optimal motion planning through convex corridors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise the reference spline (stage 1).
    Spline(Common),
    /// Minimise time along a spline (stage 2).
    Plan {
        #[command(flatten)]
        common: Common,
        /// Run stage 1 first instead of reading `<out>/spline.json`.
        #[arg(long)]
        full: bool,
    },
    /// Re-check a written trajectory.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV (default `<out>/trajectory.csv`).
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Spline JSON (default `<out>/spline.json`).
        #[arg(long)]
        spline: Option<PathBuf>,
    },
    /// Both stages.
    Full {
        #[command(flatten)]
        common: Common,
        /// Independent runs per criterion, written to `<out>/<criterion>`.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<Criterion>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON manifest; its corridor and model paths resolve against its directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    corridor: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// arc_length, energy or twist.
    #[arg(long)]
    criterion: Option<Criterion>,
    /// Intervals per spline segment.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-node series to `<out>/plot.json`.
    #[arg(long)]
    plot_data: bool,
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Common {
    fn manifest(&self) -> Result<RunManifest, PipelineError> {
        let mut m = match &self.manifest {
            Some(path) => {
                let mut m = RunManifest::load(path)?;
                let base = path.parent().unwrap_or(Path::new(""));
                m.corridor = resolve(base, &m.corridor);
                m.model = m.model.map(|p| resolve(base, &p));
                m
            }
            None => {
                let corridor = self
                    .corridor
                    .clone()
                    .ok_or_else(|| PipelineError::Input("either --manifest or --corridor is required".into()))?;
                RunManifest::new(corridor, None, "out")
            }
        };
        if let Some(c) = &self.corridor {
            m.corridor = c.clone();
        }
        if let Some(p) = &self.model {
            m.model = Some(p.clone());
        }
        if let Some(c) = self.criterion {
            m.criterion = c;
        }
        if let Some(n) = self.nodes {
            m.transcription.nodes_per_segment = n;
        }
        if let Some(o) = &self.out {
            m.out = o.clone();
        }
        if let Some(s) = self.seed {
            m.seed = s;
        }
        m.plot_data |= self.plot_data;
        m.transcription.check()?;
        Ok(m)
    }
}

fn print_spline(report: &SplineReport) {
    let f = &report.functionals;
    println!("criterion        {}", report.criterion);
    println!("status           {:?}", report.solver.status);
    println!("arc length L     {:.6}", f.arc_length);
    println!("energy E         {:.6}", f.energy);
    println!("twist E_chi1     {:.6}", f.twist);
    println!("free coefficients {}", report.free_coefficients);
    println!("degrees of freedom {}", report.degrees_of_freedom);
}

fn print_plan(plan: &PlanOutcome) {
    let t = &plan.trajectory;
    println!("total_time       {:.6}", t.total_time);
    println!("status           {:?} ({} outer / {} inner iterations)", t.report.status, t.report.iterations, t.report.inner_iterations);
    println!("active bounds    {:.0}% of {} intervals", 100.0 * plan.active.saturated_fraction, plan.active.intervals);
    for (name, lo, hi) in &plan.active.inputs {
        println!("  {name:<8} lower {lo:>4}  upper {hi:>4}");
    }
    for (j, lo, hi) in &plan.active.path {
        println!("  path {j:<3} lower {lo:>4}  upper {hi:>4}");
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Spline(common) => {
            let m = common.manifest()?;
            let (_, report) = pipeline::run_spline(&m)?;
            print_spline(&report);
        }
        Command::Plan { common, full } => {
            let m = common.manifest()?;
            if full {
                let (report, plan) = pipeline::run_full(&m)?;
                print_spline(&report);
                print_plan(&plan);
            } else {
                print_plan(&pipeline::run_plan_from_artifact(&m)?);
            }
        }
        Command::Verify { common, trajectory, spline } => {
            let m = common.manifest()?;
            let t = pipeline::run_verify(&m, trajectory.as_deref(), spline.as_deref())?;
            println!("ok: {} nodes, total_time {:.6}", t.states.len(), t.total_time);
        }
        Command::Full { common, criteria } => {
            let m = common.manifest()?;
            if criteria.is_empty() {
                let (report, plan) = pipeline::run_full(&m)?;
                print_spline(&report);
                print_plan(&plan);
            } else {
                // report every run, fail with the first error
                let mut first_error = None;
                for (c, result) in pipeline::run_criteria(&m, &criteria) {
                    println!("== {c}");
                    match result {
                        Ok((report, plan)) => {
                            print_spline(&report);
                            print_plan(&plan);
                        }
                        Err(e) => {
                            println!("error: {e}");
                            first_error.get_or_insert(e);
                        }
                    }
                }
                if let Some(e) = first_error {
                    return Err(e);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(report) = e.report() {
                eprintln!("{}", serde_json::to_string_pretty(report).expect("report serialises"));
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
