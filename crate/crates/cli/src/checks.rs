//! Oracle suites for the solver, the autodiff tape and the gap identity.

use std::time::Instant;

use dpot::batch::ParticleBatch;
use dpot::loss::{dpot_loss, gap_decomposition_points};
use dpot::nn::{ArchSpec, MapNetwork};
use dpot::ot::{solve_exact, solve_oracle, CostMatrix};
use dpot::tensor::{max_rel_error, numeric_gradient, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random::<f64>() + shift).collect()).expect("cloud shape")
}

/// Exact solver against permutation enumeration: 200 random 6×6 and
/// 100 random 8×8 cost matrices, costs equal to 1e-9.
pub fn assignment_check(seed: u64) -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failures) = (0.0f64, Vec::new());
    for (n, count) in [(6usize, 200usize), (8, 100)] {
        for case in 0..count {
            let cost = CostMatrix::from_raw(n, (0..n * n).map(|_| rng.random::<f64>()).collect()).expect("square");
            let diff = match (solve_exact(&cost), solve_oracle(&cost)) {
                (Ok(a), Ok(b)) => (a.cost() - b.cost()).abs(),
                _ => f64::INFINITY,
            };
            worst = worst.max(diff);
            if !(diff <= 1e-9) {
                failures.push(format!("{n}x{n}#{case}"));
            }
        }
    }
    CheckResult {
        name: "assignment solver vs enumeration oracle",
        passed: failures.is_empty(),
        detail: format!("300 matrices, max |cost diff| {worst:.2e}, failures {failures:?}"),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Full DPOT-loss gradient against 4th-order central differences on a
/// 16-point batch, for each architecture with two hidden layers.
pub fn gradient_check(seed: u64) -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = ParticleBatch::source(cloud(&mut rng, 16, 2, 0.0)).expect("batch");
    let y = ParticleBatch::target(cloud(&mut rng, 16, 2, 0.5)).expect("batch");
    let mut parts = Vec::new();
    let mut passed = true;
    for spec in [
        ArchSpec::mlp(2, 2, 8, 2),
        ArchSpec::modified_mlp(2, 2, 8, 2),
        ArchSpec::resnet(2, 2, 8, 2, 1),
    ] {
        let net = MapNetwork::new(spec, &mut rng).expect("network");
        let tx = net.forward(x.points()).expect("forward");
        let plan = solve_exact(&CostMatrix::between(&tx, y.points()).expect("cost")).expect("plan");
        let analytic = dpot_loss(&net, &x, &y, &plan, 0.3).expect("loss");
        let numeric = numeric_gradient(
            |p| {
                let n = MapNetwork::from_params(spec, p.to_vec()).expect("params");
                dpot_loss(&n, &x, &y, &plan, 0.3).map(|l| l.value).unwrap_or(f64::NAN)
            },
            net.params(),
            1e-6,
        );
        let err = max_rel_error(&analytic.grad, &numeric, 1e-5);
        passed &= err < 1e-4;
        parts.push(format!("{} {err:.1e}", spec.kind.name()));
    }
    CheckResult {
        name: "DPOT loss gradient vs finite differences",
        passed,
        detail: format!("max rel error: {}", parts.join(", ")),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Gap decomposition on 50 random triples, plus maps tabulated from the
/// exact assignment (all three terms vanish).
pub fn gap_check(seed: u64) -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut min_eps, mut max_identity, mut max_tab) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(5..=14);
        let x = cloud(&mut rng, n, 2, 0.0);
        let (sy, stx) = (rng.random_range(0.0..1.0), rng.random_range(-0.5..1.0));
        let y = cloud(&mut rng, n, 2, sy);
        let tx = cloud(&mut rng, n, 2, stx);
        let lambda = rng.random_range(0.05..0.95);
        match gap_decomposition_points(&tx, &x, &y, lambda) {
            Ok(g) => {
                let bound = g.loss - lambda * g.w2_xy;
                min_eps = min_eps.min(g.eps1).min(g.eps2).min(g.eps3);
                max_identity = max_identity.max((g.sum() - g.total).abs()).max((g.total - bound).abs());
            }
            Err(_) => max_identity = f64::INFINITY,
        }
    }
    for _ in 0..10 {
        let x = cloud(&mut rng, 12, 2, 0.0);
        let y = cloud(&mut rng, 12, 2, 0.6);
        let worst = solve_exact(&CostMatrix::between(&x, &y).expect("cost"))
            .ok()
            .and_then(|plan| gap_decomposition_points(&y.gather_rows(plan.permutation()), &x, &y, 0.3).ok())
            .map_or(f64::INFINITY, |g| g.eps1.abs().max(g.eps2.abs()).max(g.eps3.abs()));
        max_tab = max_tab.max(worst);
    }
    let passed = min_eps >= -1e-12 && max_identity <= 1e-10 && max_tab < 1e-9;
    CheckResult {
        name: "gap identity and non-negativity",
        passed,
        detail: format!(
            "min eps {min_eps:.2e}, identity error {max_identity:.2e}, tabulated-map max eps {max_tab:.2e}"
        ),
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn all(seed: u64) -> Vec<CheckResult> {
    vec![assignment_check(seed), gradient_check(seed), gap_check(seed)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for r in all(7) {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn line_format() {
        let r = CheckResult {
            name: "x",
            passed: false,
            detail: "d".into(),
            seconds: 0.5,
        };
        assert_eq!(r.line(), "FAIL x: d (0.50 s)");
    }
}
