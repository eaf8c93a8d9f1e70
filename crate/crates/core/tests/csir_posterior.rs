//! Accept-reject posterior for one compartment checked against a direct
//! quadrature of `exp(−Φ)` on a fine grid.

use dpot::csir::{posterior_accept_reject, potential, ArOptions, CsirParams, Observations, DEFAULT_DT};
use dpot::stats::histogram;

const NOISE_SEED: u64 = 8;
const BETA: (f64, f64) = (0.04, 0.22);
const ZETA: (f64, f64) = (0.5, 1.5);

/// Grid marginal of β (unnormalised) at `n × n` cell centres.
fn grid_beta_marginal(obs: &Observations, n: usize) -> (Vec<f64>, Vec<f64>) {
    let centre = |(lo, hi): (f64, f64), k: usize| lo + (hi - lo) * (k as f64 + 0.5) / n as f64;
    let m: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let p = CsirParams::new(vec![centre(BETA, i), centre(ZETA, j)]).unwrap();
                    (-potential(&p, obs).unwrap()).exp()
                })
                .sum()
        })
        .collect();
    ((0..n).map(|i| centre(BETA, i)).collect(), m)
}

fn local_max_in(h: &[f64], lo: f64, width: f64, range: (f64, f64)) -> bool {
    (1..h.len() - 1).any(|k| {
        let c = lo + width * (k as f64 + 0.5);
        c >= range.0 && c <= range.1 && h[k] > h[k - 1] && h[k] >= h[k + 1]
    })
}

#[test]
fn beta_marginal_is_bimodal_and_matches_quadrature() {
    let obs = Observations::synthetic(&CsirParams::truth(1), NOISE_SEED, DEFAULT_DT).unwrap();

    let (beta, mass) = grid_beta_marginal(&obs, 180);
    let z: f64 = mass.iter().sum();
    let mean = beta.iter().zip(&mass).map(|(b, m)| b * m).sum::<f64>() / z;
    let var = beta.iter().zip(&mass).map(|(b, m)| (b - mean).powi(2) * m).sum::<f64>() / z;

    let n = 400;
    let ar = posterior_accept_reject(&obs, n, 17, ArOptions::default()).unwrap();
    let betas: Vec<f64> = (0..n).map(|k| ar.samples.row(k)[0]).collect();

    let ar_mean = betas.iter().sum::<f64>() / n as f64;
    assert!(
        (ar_mean - mean).abs() < 4.0 * (var / n as f64).sqrt(),
        "AR mean {ar_mean} vs {mean}"
    );

    let (lo, hi, bins) = (0.06, 0.20, 14);
    let h = histogram(&betas, lo, hi, bins);
    let width = (hi - lo) / bins as f64;
    let floor = 0.1 * h.iter().cloned().fold(0.0, f64::max);
    let modes = dpot::stats::count_modes(&h, floor);
    assert!(modes >= 2, "histogram {h:?}");
    assert!(local_max_in(&h, lo, width, (0.08, 0.105)), "no low-β mode in {h:?}");
    assert!(local_max_in(&h, lo, width, (0.125, 0.16)), "no high-β mode in {h:?}");
}
