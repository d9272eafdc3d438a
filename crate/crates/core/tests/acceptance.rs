//! Acceptance criteria, one pass/fail line each.
//!
//! Run with `cargo test --release -p sctomp --test acceptance -- --nocapture`
//! to see the report.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sctomp::bernstein::de_casteljau;
use sctomp::corridor::{box_split, ConvexRegion, Corridor};
use sctomp::models::{AnyModel, ModelConfig};
use sctomp::nlp::{self, check_derivatives, NlpOptions, NlpProblem};
use sctomp::ocp::{solve_min_time, SpatialTrajectory, Transcription, TranscriptionConfig};
use sctomp::ph::{hodograph, parametric_speed, QuaternionPolynomial};
use sctomp::pipeline::{self, RunManifest};
use sctomp::spline::{optimize_spline, Criterion, PHSpline, SplineConfig};

type Verdict = Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn qmul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn random_tuples(rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    (0..5)
        .map(|_| [rng.gen_range(0.5..1.5), rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)])
        .collect()
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut hod_worst: f64 = 0.0;
    for _ in 0..200 {
        let tuples = random_tuples(&mut rng);
        let z = QuaternionPolynomial::new(tuples.clone()).unwrap();
        let s2 = parametric_speed(&z).square();
        let h = hodograph(&z);
        let norm2 = h[0].square().add(&h[1].square()).add(&h[2].square());
        let gap = s2.sub(&norm2);
        let scale = s2.coeffs().iter().fold(0.0f64, |m, c| m.max(c.abs()));
        worst = worst.max(gap.coeffs().iter().fold(0.0f64, |m, c| m.max(c.abs())) / scale);
        // independent hodograph: Z(ξ) i Z*(ξ) from a direct quaternion product
        for i in 0..=16 {
            let xi = i as f64 / 16.0;
            let zq: [f64; 4] = std::array::from_fn(|c| de_casteljau(&tuples.iter().map(|t| t[c]).collect::<Vec<_>>(), xi));
            let conj = [zq[0], -zq[1], -zq[2], -zq[3]];
            let w = qmul(qmul(zq, [0.0, 1.0, 0.0, 0.0]), conj);
            for k in 0..3 {
                hod_worst = hod_worst.max((h[k].at(xi) - w[k + 1]).abs());
            }
        }
    }
    let dt = t0.elapsed();
    check(
        worst <= 1e-10 && hod_worst <= 1e-12 && dt < Duration::from_secs(5),
        format!("max relative coefficient of σ² − ‖γ′‖² {worst:.1e}, hodograph vs Z i Z* {hod_worst:.1e}, {dt:.2?}"),
    )
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut ortho, mut tangent, mut chi_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let h = 1e-5;
    for _ in 0..20 {
        let m = rng.gen_range(1..=4);
        // resample until every σ coefficient is positive
        let spline = loop {
            let tuples: Vec<Vec<[f64; 4]>> = (0..m).map(|_| random_tuples(&mut rng)).collect();
            if let Ok(s) = PHSpline::from_tuples([0.0; 3], tuples) {
                break s;
            }
        };
        for i in 0..100 {
            let xi = m as f64 * (i as f64 + 0.5) / 100.0;
            let f = spline.frame(xi).unwrap();
            let e = [f.e1(), f.e2(), f.e3()];
            for a in 0..3 {
                for b in 0..3 {
                    let want = if a == b { 1.0 } else { 0.0 };
                    ortho = ortho.max((dot(e[a], e[b]) - want).abs());
                }
            }
            // tangent against a central difference of the position
            let (p1, p0) = (spline.position(xi + h).unwrap(), spline.position(xi - h).unwrap());
            let d: [f64; 3] = std::array::from_fn(|k| (p1[k] - p0[k]) / (2.0 * h));
            let dn = dot(d, d).sqrt();
            tangent = tangent.max((0..3).fold(0.0f64, |mx, k| mx.max((d[k] / dn - e[0][k]).abs())));
            // χ from frame derivatives, per unit of the global parameter
            let (fp, fm) = (spline.frame(xi + h).unwrap(), spline.frame(xi - h).unwrap());
            let de = |a: [f64; 3], b: [f64; 3]| -> [f64; 3] { std::array::from_fn(|k| (a[k] - b[k]) / (2.0 * h)) };
            let (d1, d2, d3) = (de(fp.e1(), fm.e1()), de(fp.e2(), fm.e2()), de(fp.e3(), fm.e3()));
            let chi_fd = [dot(d2, e[2]), dot(d3, e[0]), dot(d1, e[1])];
            for k in 0..3 {
                chi_err = chi_err.max((f.chi[k] - chi_fd[k]).abs() / (1.0 + f.chi[k].abs()));
            }
        }
    }
    let dt = t0.elapsed();
    check(
        ortho <= 1e-5 && tangent <= 1e-5 && chi_err <= 1e-5 && dt < Duration::from_secs(10),
        format!("orthonormality {ortho:.1e}, tangency {tangent:.1e}, χ vs finite differences {chi_err:.1e}, {dt:.2?}"),
    )
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn l_corridor() -> Corridor {
    Corridor::load(fixture("l_corridor.json")).unwrap()
}

fn criterion_3() -> Verdict {
    let corridor = l_corridor();
    let mut worst: f64 = 0.0;
    let mut direct: f64 = 0.0;
    for c in Criterion::ALL {
        let (spline, _, _) = optimize_spline(&corridor, c, &SplineConfig::default()).map_err(|e| format!("{c}: {e}"))?;
        worst = worst.max(spline.join_report().max_frame_mismatch());
        // values straight from the two segments
        let segs = spline.segments();
        for k in 1..segs.len() {
            let (a, b) = (segs[k - 1].frame(1.0).unwrap(), segs[k].frame(0.0).unwrap());
            direct = direct.max((a.sigma - b.sigma).abs());
            for i in 0..3 {
                direct = direct.max((a.chi[i] - b.chi[i]).abs());
                for j in 0..3 {
                    direct = direct.max((a.rotation[i][j] - b.rotation[i][j]).abs());
                }
            }
        }
    }
    check(worst <= 1e-6 && direct <= 1e-6, format!("join mismatch {worst:.1e} (values recomputed per segment {direct:.1e})"))
}

fn criterion_4() -> Verdict {
    let cases = [
        ("l_corridor.json", SplineConfig::default()),
        ("two_box_corridor.json", SplineConfig::default()),
        ("straight_corridor.json", SplineConfig { start_scale: 0.2, goal_scale: 0.2, ..SplineConfig::default() }),
    ];
    let (mut hull, mut sampled): (f64, f64) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (file, config) in &cases {
        let corridor = Corridor::load(fixture(file)).unwrap();
        for c in Criterion::ALL {
            let (spline, _, _) = optimize_spline(&corridor, c, config).map_err(|e| format!("{file} {c}: {e}"))?;
            // independent containment check against the raw halfspaces
            for (k, pts) in spline.control_points().iter().enumerate() {
                let region = corridor.region(k);
                for p in pts.iter() {
                    for hs in region.halfspaces() {
                        hull = hull.max(dot(hs.a, *p) - hs.b);
                    }
                }
                for i in 0..1000 {
                    let p = spline.segments()[k].position(i as f64 / 999.0).unwrap();
                    for hs in region.halfspaces() {
                        sampled = sampled.max(dot(hs.a, p) - hs.b);
                    }
                }
            }
        }
    }
    check(hull <= 1e-6 && sampled <= 1e-9, format!("control-point excess {hull:.1e}, sampled-curve excess {sampled:.1e}"))
}

fn criterion_5() -> Verdict {
    let mut got = Vec::new();
    for m in 1..=6 {
        let base = ConvexRegion::from_box([0.0, 0.0, 0.0], [m as f64, 1.0, 1.0]);
        let regions = box_split(&base, m - 1).unwrap();
        // both end frames fixed, aligned with the corridor axis
        let identity = Some([1.0, 0.0, 0.0, 0.0]);
        let corridor = Corridor::new(regions, [0.2, 0.5, 0.5], [m as f64 - 0.2, 0.5, 0.5], identity, identity).unwrap();
        let (_, _, report) = optimize_spline(&corridor, Criterion::Energy, &SplineConfig::default()).map_err(|e| format!("m = {m}: {e}"))?;
        got.push((m, report.degrees_of_freedom));
    }
    let ok = got.iter().all(|&(m, dof)| dof as i64 == 4 * m as i64 + 5);
    check(ok, format!("degrees of freedom for m = 1..6: {:?}", got.iter().map(|g| g.1).collect::<Vec<_>>()))
}

struct DiRun {
    a_max: f64,
    traj: SpatialTrajectory,
    elapsed: Duration,
}

fn run_double_integrator(model_file: &str) -> Result<(ModelConfig, DiRun), String> {
    let manifest = RunManifest::load(fixture("double_integrator_manifest.json")).unwrap();
    let corridor = Corridor::load(fixture("straight_corridor.json")).unwrap();
    let config = ModelConfig::load(fixture(model_file)).unwrap();
    let t0 = Instant::now();
    let (spline, _, _) = optimize_spline(&corridor, manifest.criterion, &manifest.spline).map_err(|e| e.to_string())?;
    let traj = solve_min_time(&config.model, &spline, &corridor, &config.x0, config.terminal_mask.as_deref(), &manifest.transcription)
        .map_err(|e| format!("{model_file}: {e}"))?;
    let a_max = match &config.model {
        AnyModel::DoubleIntegrator(di) => di.a_max,
        _ => unreachable!("double integrator fixture"),
    };
    Ok((config, DiRun { a_max, traj, elapsed: t0.elapsed() }))
}

fn switches(traj: &SpatialTrajectory) -> usize {
    traj.inputs.windows(2).filter(|w| w[0][0].signum() != w[1][0].signum()).count()
}

fn criterion_6(runs: &[(ModelConfig, DiRun)]) -> Verdict {
    let mut ok = runs.len() == 2;
    let mut parts = Vec::new();
    for (config, run) in runs {
        let want = 2.0 / run.a_max.sqrt();
        let t = run.traj.total_time;
        let rel = (t - want).abs() / want;
        let sat = run.traj.saturation(&config.model, 1e-4);
        let sw = switches(&run.traj);
        ok &= rel <= 0.02 && sat >= 0.95 && sw == 1 && run.elapsed < Duration::from_secs(60) && run.traj.nodes_per_segment == 50;
        parts.push(format!(
            "|a| ≤ {}: T = {t:.5} s vs {want} s ({:.2}%), saturated {:.0}%, {sw} switch, {:.2?}",
            run.a_max,
            100.0 * rel,
            100.0 * sat,
            run.elapsed
        ));
    }
    check(ok, parts.join("; "))
}

fn run_quadrotor() -> Result<Vec<(Criterion, SpatialTrajectory)>, String> {
    let corridor = Corridor::load(fixture("two_box_corridor.json")).unwrap();
    let config = ModelConfig::load(fixture("quadrotor.json")).unwrap();
    Criterion::ALL
        .iter()
        .map(|&c| {
            let (spline, _, _) = optimize_spline(&corridor, c, &SplineConfig::default()).map_err(|e| format!("{c}: {e}"))?;
            let traj = solve_min_time(&config.model, &spline, &corridor, &config.x0, None, &TranscriptionConfig::default())
                .map_err(|e| format!("{c}: {e}"))?;
            Ok((c, traj))
        })
        .collect()
}

fn criterion_7(runs: &Result<Vec<(Criterion, SpatialTrajectory)>, String>) -> Verdict {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let time = |c: Criterion| runs.iter().find(|r| r.0 == c).map(|r| r.1.total_time).unwrap();
    let (ta, te, tt) = (time(Criterion::ArcLength), time(Criterion::Energy), time(Criterion::Twist));
    let rel = |a: f64, b: f64| (a - b).abs() / a.min(b);
    let (ae, twist) = (rel(ta, te), rel(tt, ta).max(rel(tt, te)));
    check(
        ae <= 0.02 && twist <= 0.03,
        format!(
            "T arc length {ta:.4} s, energy {te:.4} s, twist {tt:.4} s; arc vs energy {:.2}%, twist vs others {:.2}%",
            100.0 * ae,
            100.0 * twist
        ),
    )
}

fn criterion_8(di: &[(ModelConfig, DiRun)], quad: &Result<Vec<(Criterion, SpatialTrajectory)>, String>) -> Verdict {
    let mut devs = Vec::new();
    for (config, run) in di {
        devs.push((format!("double integrator |a| ≤ {}", run.a_max), run.traj.roundtrip(&config.model, &TranscriptionConfig::default())));
    }
    let config = ModelConfig::load(fixture("quadrotor.json")).unwrap();
    for (c, traj) in quad.as_ref().map_err(Clone::clone)? {
        devs.push((format!("quadrotor {c}"), traj.roundtrip(&config.model, &TranscriptionConfig::default())));
    }
    let worst = devs.iter().fold(0.0f64, |m, d| m.max(d.1));
    let ok = devs.len() == 5 && worst <= 1e-3;
    let list: Vec<String> = devs.iter().map(|(n, d)| format!("{n} {d:.1e}")).collect();
    check(ok, format!("re-simulation deviation: {}", list.join(", ")))
}

struct Dense<F, G, C, J> {
    n: usize,
    neq: usize,
    nin: usize,
    f: F,
    g: G,
    c: C,
    j: J,
}

impl<F, G, C, J> NlpProblem for Dense<F, G, C, J>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64], &mut [f64]),
    C: Fn(&[f64], &mut [f64]),
    J: Fn(&[f64], &mut [f64]),
{
    fn num_variables(&self) -> usize {
        self.n
    }
    fn num_equalities(&self) -> usize {
        self.neq
    }
    fn num_inequalities(&self) -> usize {
        self.nin
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![f64::NEG_INFINITY; self.n], vec![f64::INFINITY; self.n])
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        (self.g)(x, g)
    }
    fn constraints(&self, x: &[f64], out: &mut [f64]) {
        (self.c)(x, out)
    }
    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        let m = self.neq + self.nin;
        (0..m).flat_map(|r| (0..self.n).map(move |c| (r, c))).collect()
    }
    fn jacobian(&self, x: &[f64], v: &mut [f64]) {
        (self.j)(x, v)
    }
}

fn criterion_9() -> Verdict {
    let opts = NlpOptions::default();
    let square = Dense {
        n: 1,
        neq: 0,
        nin: 1,
        f: |x: &[f64]| x[0] * x[0],
        g: |x: &[f64], g: &mut [f64]| g[0] = 2.0 * x[0],
        c: |x: &[f64], c: &mut [f64]| c[0] = 1.0 - x[0],
        j: |_: &[f64], v: &mut [f64]| v[0] = -1.0,
    };
    let (x1, r1) = nlp::minimize(&square, &[3.0], &opts).map_err(|e| e.to_string())?;
    let e1 = (x1[0] - 1.0).abs();
    let line = Dense {
        n: 2,
        neq: 1,
        nin: 0,
        f: |x: &[f64]| (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2),
        g: |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 2.0);
            g[1] = 2.0 * (x[1] - 1.0);
        },
        c: |x: &[f64], c: &mut [f64]| c[0] = x[0] + x[1] - 1.0,
        j: |_: &[f64], v: &mut [f64]| v.copy_from_slice(&[1.0, 1.0]),
    };
    let (x2, r2) = nlp::minimize(&line, &[0.0, 0.0], &opts).map_err(|e| e.to_string())?;
    let e2 = (x2[0] - 1.0).abs().max(x2[1].abs());
    let rosenbrock = Dense {
        n: 2,
        neq: 0,
        nin: 0,
        f: |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2),
        g: |x: &[f64], g: &mut [f64]| {
            g[0] = -400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0]);
            g[1] = 200.0 * (x[1] - x[0] * x[0]);
        },
        c: |_: &[f64], _: &mut [f64]| {},
        j: |_: &[f64], _: &mut [f64]| {},
    };
    let (x3, r3) = nlp::minimize(&rosenbrock, &[-1.2, 1.0], &opts).map_err(|e| e.to_string())?;
    let e3 = (x3[0] - 1.0).abs().max((x3[1] - 1.0).abs());

    // stage-2 transcription at its initial guess, for both shipped models
    let mut deriv: f64 = 0.0;
    for (corridor_file, model_file, scale) in
        [("straight_corridor.json", "double_integrator.json", 0.2), ("two_box_corridor.json", "quadrotor.json", 1.0)]
    {
        let corridor = Corridor::load(fixture(corridor_file)).unwrap();
        let config = ModelConfig::load(fixture(model_file)).unwrap();
        let sc = SplineConfig { start_scale: scale, goal_scale: scale, ..SplineConfig::default() };
        let (spline, _, _) = optimize_spline(&corridor, Criterion::Energy, &sc).map_err(|e| e.to_string())?;
        let tc = TranscriptionConfig { nodes_per_segment: 10, ..TranscriptionConfig::default() };
        let problem = Transcription::new(&config.model, &spline, &corridor, &config.x0, config.terminal_mask.as_deref(), &tc)
            .map_err(|e| e.to_string())?;
        let z = problem.initial_guess(&spline);
        deriv = deriv.max(check_derivatives(&problem, &z, 1e-6));
    }
    let ok = r1.converged()
        && r2.converged()
        && r3.converged()
        && e1 <= 1e-6
        && e2 <= 1e-5
        && e3 <= 1e-4
        && deriv <= 1e-5;
    check(
        ok,
        format!("x² s.t. x ≥ 1 err {e1:.1e}; projection onto x + y = 1 err {e2:.1e}; Rosenbrock err {e3:.1e}; stage-2 derivative check {deriv:.1e}"),
    )
}

fn criterion_10() -> Verdict {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let mut m = RunManifest::load(fixture("double_integrator_manifest.json")).unwrap();
    m.corridor = fixture("straight_corridor.json");
    m.model = Some(fixture("double_integrator.json"));
    m.plot_data = true;
    m.out = dir.path().join("out");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        pipeline::run_full(&m).map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&m.out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    let names: Vec<&str> = outputs[0].iter().map(|f| f.0.as_str()).collect();
    let same = outputs[0] == outputs[1];
    check(same && names.len() >= 5, format!("two full runs, {} files compared: {}", names.len(), names.join(", ")))
}

#[test]
fn acceptance() {
    let t0 = Instant::now();
    // sequential, so the timed criteria measure a single solve
    let mut results: Vec<(usize, Verdict)> = vec![(1, criterion_1()), (2, criterion_2()), (3, criterion_3()), (4, criterion_4()), (5, criterion_5())];
    let di: Result<Vec<_>, String> = ["double_integrator.json", "double_integrator_a4.json"].into_iter().map(run_double_integrator).collect();
    let quad = run_quadrotor();
    match &di {
        Ok(runs) => {
            results.push((6, criterion_6(runs)));
            results.push((7, criterion_7(&quad)));
            results.push((8, criterion_8(runs, &quad)));
        }
        Err(e) => {
            results.push((6, Err(e.clone())));
            results.push((7, criterion_7(&quad)));
            results.push((8, Err(e.clone())));
        }
    }
    results.push((9, criterion_9()));
    results.push((10, criterion_10()));
    let titles = [
        "PH polynomial identity",
        "frame validity",
        "join smoothness",
        "convex-hull containment",
        "coefficient ledger",
        "analytic minimum time",
        "spline invariance",
        "round-trip dynamical feasibility",
        "NLP backend",
        "determinism",
    ];
    let mut failed = Vec::new();
    for (k, verdict) in &results {
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(*k);
                ("FAIL", d)
            }
        };
        println!("criterion {k:>2} {tag}  {}: {detail}", titles[k - 1]);
    }
    println!("acceptance finished in {:.1?}", t0.elapsed());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
