//! Compartmental SIR model on a ring: simulation, synthetic observations,
//! likelihood and accept-reject posterior sampling.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

/// Observation times `t_j = 5j/6`, `j = 1..6`.
pub const OBS_TIMES: [f64; 6] = [5.0 / 6.0, 10.0 / 6.0, 15.0 / 6.0, 20.0 / 6.0, 25.0 / 6.0, 5.0];

pub const DEFAULT_DT: f64 = 0.01;

/// Upper edge of the uniform prior box `[0, 2]^{2d}`.
pub const PRIOR_MAX: f64 = 2.0;

/// Proposals after which a low acceptance rate counts as starvation.
pub const STARVATION_PROPOSALS: u64 = 10_000_000;
pub const STARVATION_RATE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CsirError {
    #[error("state became non-finite at t = {t}")]
    Blowup { t: f64 },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("accept-reject starved: {accepted} accepted out of {proposals} proposals")]
    Starvation { accepted: u64, proposals: u64 },
}

type Result<T> = std::result::Result<T, CsirError>;

/// Rates `(β₁, ζ₁, …, β_d, ζ_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsirParams {
    rates: Vec<f64>,
}

impl CsirParams {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() || !rates.len().is_multiple_of(2) {
            return Err(CsirError::Input(format!("{} rates; need 2d with d ≥ 1", rates.len())));
        }
        if rates.iter().any(|r| !r.is_finite()) {
            return Err(CsirError::Input("non-finite rate".into()));
        }
        Ok(Self { rates })
    }

    /// The reference parameters `(0.1, 1, …, 0.1, 1)`.
    pub fn truth(d: usize) -> Self {
        Self {
            rates: [0.1, 1.0].repeat(d),
        }
    }

    pub fn d(&self) -> usize {
        self.rates.len() / 2
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.rates[2 * i]
    }

    pub fn zeta(&self, i: usize) -> f64 {
        self.rates[2 * i + 1]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn in_prior_box(&self) -> bool {
        self.rates.iter().all(|r| (0.0..=PRIOR_MAX).contains(r))
    }
}

/// Compartment populations at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsirState {
    pub s: Vec<f64>,
    pub i: Vec<f64>,
    pub r: Vec<f64>,
    pub t: f64,
}

impl CsirState {
    /// `S_i(0) = 99 − d + i`, `I_i(0) = d + 1 − i`, `R_i(0) = 0` (1-based `i`).
    pub fn initial(d: usize) -> Self {
        let s = (1..=d).map(|i| (99 + i - d) as f64).collect();
        let i = (1..=d).map(|i| (d + 1 - i) as f64).collect();
        Self {
            s,
            i,
            r: vec![0.0; d],
            t: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.s.iter().chain(&self.i).chain(&self.r).sum()
    }

    /// `[S; I; R]` as one vector.
    pub fn flatten(&self) -> Vec<f64> {
        [self.s.as_slice(), &self.i, &self.r].concat()
    }
}

/// Largest supported compartment count.
pub const MAX_D: usize = 4;

/// Rows `S`, `I`, `R`.
type Packed<const D: usize> = [[f64; D]; 3];

/// Time derivative of `[S; I; R]`. Neighbours wrap cyclically, so for
/// `d = 1` the diffusion terms vanish.
#[inline(always)]
fn rhs_fixed<const D: usize>(y: &Packed<D>, rates: &[f64]) -> Packed<D> {
    let mut out = [[0.0; D]; 3];
    for k in 0..D {
        let prev = if k == 0 { D - 1 } else { k - 1 };
        let next = if k + 1 == D { 0 } else { k + 1 };
        let lap = |z: &[f64; D]| 0.5 * ((z[prev] - z[k]) + (z[next] - z[k]));
        let infect = rates[2 * k] * y[0][k] * y[1][k];
        let recover = rates[2 * k + 1] * y[1][k];
        out[0][k] = -infect + lap(&y[0]);
        out[1][k] = infect - recover + lap(&y[1]);
        out[2][k] = recover + lap(&y[2]);
    }
    out
}

#[inline(always)]
fn axpy<const D: usize>(y: &Packed<D>, a: f64, k: &Packed<D>) -> Packed<D> {
    let mut out = *y;
    for c in 0..3 {
        for j in 0..D {
            out[c][j] += a * k[c][j];
        }
    }
    out
}

fn packed_from<const D: usize>(st: &CsirState) -> Packed<D> {
    let mut y = [[0.0; D]; 3];
    y[0].copy_from_slice(&st.s);
    y[1].copy_from_slice(&st.i);
    y[2].copy_from_slice(&st.r);
    y
}

fn state_from<const D: usize>(y: &Packed<D>, t: f64) -> CsirState {
    CsirState {
        s: y[0].to_vec(),
        i: y[1].to_vec(),
        r: y[2].to_vec(),
        t,
    }
}

fn unsupported(d: usize) -> CsirError {
    CsirError::Input(format!("{d} compartments; 1 to {MAX_D} supported"))
}

/// Runs `$body` with `$D` bound to the compile-time compartment count.
macro_rules! with_d {
    ($d:expr, $D:ident => $body:expr) => {
        match $d {
            1 => {
                const $D: usize = 1;
                $body
            }
            2 => {
                const $D: usize = 2;
                $body
            }
            3 => {
                const $D: usize = 3;
                $body
            }
            4 => {
                const $D: usize = 4;
                $body
            }
            d => Err(unsupported(d)),
        }
    };
}

/// `(dS, dI, dR)` at `state`.
pub fn csir_rhs(state: &CsirState, params: &CsirParams) -> Result<CsirState> {
    if state.s.len() != params.d() || state.i.len() != params.d() || state.r.len() != params.d() {
        return Err(CsirError::Input("state and parameter dimensions differ".into()));
    }
    with_d!(params.d(), D => {
        Ok(state_from::<D>(&rhs_fixed(&packed_from::<D>(state), params.rates()), state.t))
    })
}

/// Fixed-step RK4 integrator with cubic Hermite dense output.
struct Integrator<'a, const D: usize> {
    rates: &'a [f64],
    dt: f64,
    y: Packed<D>,
    f: Packed<D>,
    t: f64,
    step: u64,
    prev_y: Packed<D>,
    prev_f: Packed<D>,
}

impl<'a, const D: usize> Integrator<'a, D> {
    fn new(p: &'a CsirParams, dt: f64) -> Self {
        let rates = p.rates();
        let y = packed_from::<D>(&CsirState::initial(D));
        let f = rhs_fixed(&y, rates);
        Self {
            rates,
            dt,
            y,
            f,
            t: 0.0,
            step: 0,
            prev_y: y,
            prev_f: f,
        }
    }

    #[inline]
    fn advance(&mut self) -> Result<()> {
        let h = self.dt;
        self.prev_y = self.y;
        self.prev_f = self.f;
        let k1 = self.f;
        let k2 = rhs_fixed(&axpy(&self.y, 0.5 * h, &k1), self.rates);
        let k3 = rhs_fixed(&axpy(&self.y, 0.5 * h, &k2), self.rates);
        let k4 = rhs_fixed(&axpy(&self.y, h, &k3), self.rates);
        let mut finite = true;
        for c in 0..3 {
            for j in 0..D {
                self.y[c][j] += h / 6.0 * (k1[c][j] + 2.0 * k2[c][j] + 2.0 * k3[c][j] + k4[c][j]);
                finite &= self.y[c][j].is_finite();
            }
        }
        self.step += 1;
        // Integer step count keeps the clock free of accumulated rounding.
        self.t = self.step as f64 * h;
        if !finite {
            return Err(CsirError::Blowup { t: self.t });
        }
        self.f = rhs_fixed(&self.y, self.rates);
        Ok(())
    }

    /// State at `t`, stepping forward as needed; `t` must not precede the
    /// previous step.
    fn state_at(&mut self, t: f64) -> Result<Packed<D>> {
        while self.t < t - 1e-12 {
            self.advance()?;
        }
        if (self.t - t).abs() <= 1e-12 || self.step == 0 {
            return Ok(self.y);
        }
        let h = self.dt;
        let s = (t - (self.t - h)) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let mut out = [[0.0; D]; 3];
        for c in 0..3 {
            for j in 0..D {
                out[c][j] =
                    h00 * self.prev_y[c][j] + h10 * h * self.prev_f[c][j] + h01 * self.y[c][j] + h11 * h * self.f[c][j];
            }
        }
        Ok(out)
    }
}

/// States at each of `times` (ascending, non-negative).
pub fn rk4_simulate(params: &CsirParams, times: &[f64], dt: f64) -> Result<Vec<CsirState>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CsirError::Input(format!("step {dt} must be positive")));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(CsirError::Input("times must be ascending and non-negative".into()));
    }
    with_d!(params.d(), D => {
        let mut integ = Integrator::<D>::new(params, dt);
        times.iter().map(|&t| Ok(state_from(&integ.state_at(t)?, t))).collect()
    })
}

/// Noisy infected counts `y_{i,j} = I_i(t_j) + α_{i,j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    d: usize,
    /// Row `i` holds compartment `i` at the six observation times.
    values: Vec<[f64; 6]>,
    noise: Vec<[f64; 6]>,
    dt: f64,
}

impl Observations {
    /// Simulates at `truth` and adds standard normal noise from `noise_seed`.
    pub fn synthetic(truth: &CsirParams, noise_seed: u64, dt: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let d = truth.d();
        let noise: Vec<[f64; 6]> = (0..d)
            .map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng)))
            .collect();
        Self::with_noise(truth, noise, dt)
    }

    pub fn with_noise(truth: &CsirParams, noise: Vec<[f64; 6]>, dt: f64) -> Result<Self> {
        let d = truth.d();
        if noise.len() != d {
            return Err(CsirError::Input("one noise row per compartment".into()));
        }
        let states = rk4_simulate(truth, &OBS_TIMES, dt)?;
        let values = (0..d)
            .map(|i| std::array::from_fn(|j| states[j].i[i] + noise[i][j]))
            .collect();
        Ok(Self { d, values, noise, dt })
    }

    pub fn from_values(values: Vec<[f64; 6]>, dt: f64) -> Self {
        let d = values.len();
        Self {
            d,
            noise: vec![[0.0; 6]; d],
            values,
            dt,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[[f64; 6]] {
        &self.values
    }

    pub fn noise(&self) -> &[[f64; 6]] {
        &self.noise
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// `Φ = ½ Σᵢ Σⱼ (I_i(t_j) − y_{i,j})²`, accumulated over the observation
/// times in order. Returns `None` as soon as the partial sum reaches `stop`.
fn potential_until(params: &CsirParams, obs: &Observations, stop: f64) -> Result<Option<f64>> {
    if params.d() != obs.d {
        return Err(CsirError::Input(format!(
            "{} compartments vs {} observed",
            params.d(),
            obs.d
        )));
    }
    with_d!(obs.d, D => {
        let mut integ = Integrator::<D>::new(params, obs.dt);
        let mut phi = 0.0;
        for (j, &t) in OBS_TIMES.iter().enumerate() {
            let y = integ.state_at(t)?;
            for i in 0..D {
                let r = y[1][i] - obs.values[i][j];
                phi += 0.5 * r * r;
            }
            if phi >= stop {
                return Ok(None);
            }
        }
        Ok(Some(phi))
    })
}

/// The potential `Φ^y(x)`.
pub fn potential(params: &CsirParams, obs: &Observations) -> Result<f64> {
    Ok(potential_until(params, obs, f64::INFINITY)?.expect("no early stop"))
}

/// `log L = −Φ`.
pub fn log_likelihood(params: &CsirParams, obs: &Observations) -> Result<f64> {
    Ok(-potential(params, obs)?)
}

/// Accept-reject output with timing.
#[derive(Debug, Clone)]
pub struct ArReport {
    pub samples: Tensor,
    pub proposals: u64,
    pub seconds: f64,
}

impl ArReport {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.rows() as f64 / self.proposals as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ArOptions {
    pub threads: usize,
    /// Proposals per worker per round.
    pub chunk: u64,
    /// Hard cap on proposals; `None` relies on the starvation rule alone.
    pub max_proposals: Option<u64>,
}

impl Default for ArOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            chunk: 4096,
            max_proposals: None,
        }
    }
}

/// The proposal with index `k`: its own ChaCha stream, so results do not
/// depend on how proposals are spread across workers.
fn proposal<F>(seed: u64, k: u64, dim: usize, accept: &F) -> Result<Option<Vec<f64>>>
where
    F: Fn(&[f64], f64) -> Result<bool>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let u: f64 = rng.random();
    let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..PRIOR_MAX)).collect();
    Ok(accept(&x, u)?.then_some(x))
}

/// A proposal index and its accepted parameters.
type Accepted = (u64, Vec<f64>);

/// Generic accept-reject over the prior box with per-proposal streams.
/// `accept(x, u)` decides acceptance given the proposal's uniform `u`.
pub fn accept_reject_prior<F>(dim: usize, n: usize, seed: u64, opts: ArOptions, accept: F) -> Result<ArReport>
where
    F: Fn(&[f64], f64) -> Result<bool> + Sync,
{
    if n == 0 {
        return Err(CsirError::Input("need at least one sample".into()));
    }
    let start = Instant::now();
    let threads = opts.threads.max(1) as u64;
    let mut accepted: Vec<Accepted> = Vec::new();
    let mut next = 0u64;
    while accepted.len() < n {
        let round = threads * opts.chunk;
        let results: Vec<Result<Vec<Accepted>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let lo = next + w * opts.chunk;
                    let accept = &accept;
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for k in lo..lo + opts.chunk {
                            if let Some(x) = proposal(seed, k, dim, accept)? {
                                out.push((k, x));
                            }
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        for r in results {
            accepted.extend(r?);
        }
        next += round;
        let got = accepted.len() as u64;
        if next >= STARVATION_PROPOSALS && (got as f64) < STARVATION_RATE * next as f64 {
            return Err(CsirError::Starvation {
                accepted: got,
                proposals: next,
            });
        }
        if let Some(cap) = opts.max_proposals {
            if next >= cap && accepted.len() < n {
                return Err(CsirError::Starvation {
                    accepted: got,
                    proposals: next,
                });
            }
        }
    }
    accepted.truncate(n);
    let proposals = accepted.last().map(|(k, _)| k + 1).unwrap_or(0);
    let data = accepted.into_iter().flat_map(|(_, x)| x).collect();
    Ok(ArReport {
        samples: Tensor::matrix(n, dim, data).expect("sample shape"),
        proposals,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Posterior samples by accept-reject from the uniform prior, accepting
/// with probability `exp(−Φ)`. Simulation stops early once the partial
/// potential already rules out acceptance.
pub fn posterior_accept_reject(obs: &Observations, n: usize, seed: u64, opts: ArOptions) -> Result<ArReport> {
    let d = obs.d();
    accept_reject_prior(2 * d, n, seed, opts, |x, u| {
        let p = CsirParams { rates: x.to_vec() };
        Ok(potential_until(&p, obs, -u.ln())?.is_some())
    })
}

/// Uniform prior samples on `[0, 2]^{2d}`.
pub fn sample_prior<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Tensor {
    let data = (0..n * 2 * d).map(|_| rng.random_range(0.0..PRIOR_MAX)).collect();
    Tensor::matrix(n, 2 * d, data).expect("sample shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_compartment_is_classic_sir() {
        let st = CsirState {
            s: vec![90.0],
            i: vec![5.0],
            r: vec![5.0],
            t: 0.0,
        };
        let p = CsirParams::new(vec![0.1, 1.0]).unwrap();
        let d = csir_rhs(&st, &p).unwrap();
        assert_eq!(d.s, vec![-45.0]);
        assert_eq!(d.i, vec![40.0]);
        assert_eq!(d.r, vec![5.0]);
    }

    #[test]
    fn equal_states_without_reactions_are_stationary() {
        let st = CsirState {
            s: vec![3.0; 3],
            i: vec![2.0; 3],
            r: vec![1.0; 3],
            t: 0.0,
        };
        let p = CsirParams::new(vec![0.0; 6]).unwrap();
        let d = csir_rhs(&st, &p).unwrap();
        assert!(d.s.iter().chain(&d.i).chain(&d.r).all(|&v| v == 0.0));
    }

    #[test]
    fn rhs_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in 1..=4 {
            for _ in 0..20 {
                let st = CsirState {
                    s: (0..d).map(|_| rng.random_range(0.0..100.0)).collect(),
                    i: (0..d).map(|_| rng.random_range(0.0..100.0)).collect(),
                    r: (0..d).map(|_| rng.random_range(0.0..100.0)).collect(),
                    t: 0.0,
                };
                let p = CsirParams::new(sample_prior(d, 1, &mut rng).into_data()).unwrap();
                let dx = csir_rhs(&st, &p).unwrap();
                assert!(dx.total().abs() < 1e-12 * 1e4, "{}", dx.total());
            }
        }
    }

    #[test]
    fn initial_condition_totals_100_per_compartment() {
        for d in 1..=4 {
            assert_eq!(CsirState::initial(d).total(), 100.0 * d as f64);
        }
        let s = CsirState::initial(3);
        assert_eq!(s.s, vec![97.0, 98.0, 99.0]);
        assert_eq!(s.i, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn frozen_dynamics_stay_constant() {
        let p = CsirParams::new(vec![0.0, 0.0]).unwrap();
        let out = rk4_simulate(&p, &OBS_TIMES, DEFAULT_DT).unwrap();
        for st in out {
            assert_eq!((st.s[0], st.i[0], st.r[0]), (99.0, 1.0, 0.0));
        }
    }

    #[test]
    fn hermite_output_matches_grid_states() {
        // With dt = 1/60 every observation time is a grid point; with
        // dt = 0.01 they are interpolated. Both should agree closely.
        let p = CsirParams::truth(2);
        let a = rk4_simulate(&p, &OBS_TIMES, 1.0 / 600.0).unwrap();
        let b = rk4_simulate(&p, &OBS_TIMES, DEFAULT_DT).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..2 {
                assert!((x.i[k] - y.i[k]).abs() < 1e-5, "{} vs {}", x.i[k], y.i[k]);
            }
        }
    }

    #[test]
    fn epidemic_has_single_peak() {
        let p = CsirParams::truth(1);
        let times: Vec<f64> = (1..=500).map(|k| k as f64 * 0.01).collect();
        let traj = rk4_simulate(&p, &times, DEFAULT_DT).unwrap();
        let di: Vec<f64> = traj.windows(2).map(|w| w[1].i[0] - w[0].i[0]).collect();
        let changes = di.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count();
        assert_eq!(changes, 1);
    }

    #[test]
    fn noiseless_observations_have_zero_potential() {
        let p = CsirParams::truth(2);
        let obs = Observations::with_noise(&p, vec![[0.0; 6]; 2], DEFAULT_DT).unwrap();
        assert_eq!(potential(&p, &obs).unwrap(), 0.0);
        let alpha = vec![[0.5, -1.0, 0.25, 0.0, 2.0, -0.3], [1.0, 0.0, 0.0, -0.7, 0.1, 0.2]];
        let sq: f64 = alpha.iter().flatten().map(|a| a * a).sum();
        let noisy = Observations::with_noise(&p, alpha, DEFAULT_DT).unwrap();
        assert!((potential(&p, &noisy).unwrap() - 0.5 * sq).abs() < 1e-12);
        assert_eq!(log_likelihood(&p, &noisy).unwrap(), -potential(&p, &noisy).unwrap());
    }

    #[test]
    fn early_stop_agrees_with_full_potential() {
        let obs = Observations::synthetic(&CsirParams::truth(1), 3, DEFAULT_DT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = CsirParams::new(sample_prior(1, 1, &mut rng).into_data()).unwrap();
            let full = potential(&p, &obs).unwrap();
            let thr = rng.random_range(0.0..5.0);
            match potential_until(&p, &obs, thr).unwrap() {
                Some(v) => assert!(v == full && v < thr),
                None => assert!(full >= thr),
            }
        }
    }

    #[test]
    fn zero_potential_stub_accepts_everything() {
        let r = accept_reject_prior(
            2,
            100,
            1,
            ArOptions {
                chunk: 64,
                ..Default::default()
            },
            |_, _| Ok(true),
        )
        .unwrap();
        assert_eq!(r.proposals, 100);
        assert_eq!(r.acceptance_rate(), 1.0);
    }

    #[test]
    fn sampling_is_independent_of_thread_count() {
        let accept = |x: &[f64], u: f64| Ok(u < (-(x[0] - 1.0).powi(2) * 4.0).exp());
        let one = accept_reject_prior(
            2,
            300,
            9,
            ArOptions {
                threads: 1,
                chunk: 100,
                max_proposals: None,
            },
            accept,
        )
        .unwrap();
        let four = accept_reject_prior(
            2,
            300,
            9,
            ArOptions {
                threads: 4,
                chunk: 37,
                max_proposals: None,
            },
            accept,
        )
        .unwrap();
        assert_eq!(one.samples, four.samples);
        assert_eq!(one.proposals, four.proposals);
    }

    #[test]
    fn starvation_is_reported() {
        let opts = ArOptions {
            threads: 1,
            chunk: 1000,
            max_proposals: Some(5000),
        };
        let r = accept_reject_prior(2, 1, 0, opts, |_, _| Ok(false));
        assert!(matches!(r, Err(CsirError::Starvation { accepted: 0, .. })));
    }

    #[test]
    fn population_is_conserved() {
        for d in 1..=4 {
            let p = CsirParams::truth(d);
            let times: Vec<f64> = (0..=50).map(|k| k as f64 * 0.1).collect();
            for st in rk4_simulate(&p, &times, DEFAULT_DT).unwrap() {
                assert!((st.total() - 100.0 * d as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn step_halving_is_fourth_order() {
        let p = CsirParams::truth(1);
        let at = |dt: f64| rk4_simulate(&p, &[5.0], dt).unwrap().pop().unwrap();
        let dist = |a: &CsirState, b: &CsirState| {
            let da = a.flatten();
            let db = b.flatten();
            da.iter().zip(&db).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let (a, b, c) = (at(DEFAULT_DT), at(DEFAULT_DT / 2.0), at(DEFAULT_DT / 4.0));
        let ratio = dist(&a, &b) / dist(&b, &c);
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn compartments_stay_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let times: Vec<f64> = (1..=50).map(|k| k as f64 * 0.1).collect();
        for _ in 0..100 {
            let p = CsirParams::new(sample_prior(1, 1, &mut rng).into_data()).unwrap();
            for st in rk4_simulate(&p, &times, DEFAULT_DT).unwrap() {
                assert!(st.s.iter().chain(&st.i).chain(&st.r).all(|&v| v >= -1e-6));
            }
        }
    }

    #[test]
    fn potential_is_continuous_in_beta() {
        let obs = Observations::synthetic(&CsirParams::truth(1), 0, DEFAULT_DT).unwrap();
        let n = 400;
        let db = PRIOR_MAX / (n - 1) as f64;
        let phi: Vec<f64> = (0..n)
            .map(|k| potential(&CsirParams::new(vec![k as f64 * db, 1.0]).unwrap(), &obs).unwrap())
            .collect();
        for k in 1..n - 1 {
            let jump = (phi[k + 1] - phi[k]).abs();
            let slope = (phi[k + 1] - phi[k - 1]).abs() / (2.0 * db);
            let neighbour = (phi[k] - phi[k - 1]).abs();
            assert!(jump <= 10.0 * db * slope.max(neighbour / db) + 1e-9, "jump at {k}");
        }
    }

    #[test]
    fn potential_is_deterministic() {
        let obs = Observations::synthetic(&CsirParams::truth(2), 5, DEFAULT_DT).unwrap();
        let p = CsirParams::new(vec![0.3, 0.7, 1.2, 0.05]).unwrap();
        assert_eq!(
            potential(&p, &obs).unwrap().to_bits(),
            potential(&p, &obs).unwrap().to_bits()
        );
    }

    #[test]
    fn independent_seeds_agree_on_acceptance_rate() {
        // A smooth stand-in likelihood keeps this fast; the binomial argument
        // is the same as for the epidemic potential.
        let accept = |x: &[f64], u: f64| Ok(u < (-2.0 * ((x[0] - 0.5).powi(2) + (x[1] - 1.5).powi(2))).exp());
        let opts = ArOptions {
            chunk: 512,
            ..Default::default()
        };
        let a = accept_reject_prior(2, 2000, 1, opts, accept).unwrap();
        let b = accept_reject_prior(2, 2000, 2, opts, accept).unwrap();
        let (pa, pb) = (a.acceptance_rate(), b.acceptance_rate());
        let p = 0.5 * (pa + pb);
        let sigma = (p * (1.0 - p) * (1.0 / a.proposals as f64 + 1.0 / b.proposals as f64)).sqrt();
        assert!((pa - pb).abs() < 3.0 * sigma, "{pa} vs {pb}");
    }
}
