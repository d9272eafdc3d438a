use std::path::PathBuf;

use sctomp::corridor::Corridor;
use sctomp::ph::PHSegment;
use sctomp::spline::{optimize_spline, Criterion, SplineConfig};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// σ, σ′, σ″, the frame columns, χ and a one-sided χ′ at local parameter
/// `end` (0 or 1) of `seg`.
fn join_values(seg: &PHSegment, end: f64) -> Vec<f64> {
    let s1 = seg.sigma().derivative();
    let s2 = s1.derivative();
    let mut v = vec![seg.sigma().at(end), s1.at(end), s2.at(end)];
    let f = seg.frame(end).unwrap();
    v.extend(f.e1().into_iter().chain(f.e2()).chain(f.e3()));
    v.extend(f.chi);
    // second-order one-sided difference pointing into the segment
    let h = if end == 0.0 { 1e-5 } else { -1e-5 };
    let (c1, c2) = (seg.frame(end + h).unwrap().chi, seg.frame(end + 2.0 * h).unwrap().chi);
    for k in 0..3 {
        v.push((-3.0 * f.chi[k] + 4.0 * c1[k] - c2[k]) / (2.0 * h));
    }
    v
}

fn check_corridor(name: &str) {
    let corridor = Corridor::load(fixture(name)).unwrap();
    let mut lengths = Vec::new();
    for c in Criterion::ALL {
        let (spline, _, rep) = optimize_spline(&corridor, c, &SplineConfig::default()).unwrap();
        lengths.push((c, rep.functionals.arc_length));
        // only a feasible start bounds the optimum
        assert!(
            rep.initial_violation > 1e-6 || rep.objective <= rep.initial_objective + 1e-9 * rep.initial_objective.abs().max(1.0),
            "{name} {c}: objective {} worse than initial {}",
            rep.objective,
            rep.initial_objective
        );
        let segs = spline.segments();
        for k in 1..segs.len() {
            let (a, b) = (join_values(&segs[k - 1], 1.0), join_values(&segs[k], 0.0));
            for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                // the difference quotients carry about 1e-10 truncation error
                let tol = if i >= 15 { 1e-6 * x.abs().max(1.0) } else { 1e-6 };
                assert!((x - y).abs() <= tol, "{name} {c}: join {k} quantity {i}: {x} vs {y}");
            }
        }
        let excess = spline.sampled_excess(&corridor, 1000);
        assert!(excess <= 1e-9, "{name} {c}: sampled excess {excess:e}");
    }
    // the other optima are feasible points of the arc-length problem
    let shortest = lengths.iter().find(|l| l.0 == Criterion::ArcLength).unwrap().1;
    for (c, l) in &lengths {
        assert!(shortest <= l * (1.0 + 1e-6), "{name}: {c} spline is shorter ({l}) than the arc-length optimum ({shortest})");
    }
}

#[test]
fn l_corridor_splines() {
    check_corridor("l_corridor.json");
}

#[test]
fn two_box_splines() {
    check_corridor("two_box_corridor.json");
}

#[test]
fn planar_l_splines() {
    check_corridor("planar_l_corridor.json");
}

#[test]
fn straight_splines() {
    check_corridor("straight_corridor.json");
}
