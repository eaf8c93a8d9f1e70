//! Mini-batch training: per-condition pools, plan refresh every `n_γ`
//! steps, Adam updates, diagnostics and metrics.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::batch::ParticleBatch;
use crate::loss::{
    conditional_dpot_loss, cycle_forward_loss, cycle_inverse_loss, cycle_losses, dpot_value, gap_decomposition_points,
    CyclePair, DpotConfig, GapReport, LossError, PlannedBatch, LOWER_BOUND_TOL,
};
use crate::nn::{AdamState, ArchSpec, MapNetwork, NnError};
use crate::ot::{solve_exact, CostMatrix, OtError, TransportPlan};
use crate::stats::spearman;
use crate::tensor::Tensor;

/// Diagnostic periods between on-disk checkpoints.
pub const CHECKPOINT_PERIODS: usize = 10;

pub const METRICS_HEADER: [&str; 8] = ["step", "loss", "eps1", "eps2", "eps3", "eps_total", "rel_l2", "seconds"];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at step {step} ({detail}) after learning-rate recovery")]
    NonFinite {
        step: usize,
        detail: String,
        /// Parameters at the last refresh before the failure.
        last_good: Box<MapNetwork>,
    },
    #[error("lower bound violated at step {step}: loss {loss} < λ·Ŵ2 = {bound}")]
    LowerBound { step: usize, loss: f64, bound: f64 },
    #[error("stale plan beat the optimal plan at step {step}: {stale} < {fresh}")]
    StalePlan { step: usize, stale: f64, fresh: f64 },
    #[error("relative error undefined: reference map has zero norm")]
    UndefinedMetric,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error("metrics file: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Reference map `T̄(x | κ)`.
pub type ExactMap<'a> = &'a (dyn Fn(&[f64], Option<&[f64]>) -> Vec<f64> + Sync);

/// Source and target samples for one condition value.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub source: Tensor,
    pub target: Tensor,
    pub condition: Option<Vec<f64>>,
}

/// The `n_κ` pools of a run; conditions are fixed when the dataset is built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pools: Vec<Pool>,
}

impl Dataset {
    pub fn new(pools: Vec<Pool>) -> Result<Self> {
        let first = pools
            .first()
            .ok_or_else(|| TrainError::Config("dataset has no pools".into()))?;
        let (d, c) = (first.source.cols(), first.condition.as_ref().map_or(0, Vec::len));
        for p in &pools {
            if p.source.cols() != d || p.target.cols() != d {
                return Err(TrainError::Config("pools disagree on point dimension".into()));
            }
            if p.condition.as_ref().map_or(0, Vec::len) != c {
                return Err(TrainError::Config("pools disagree on condition length".into()));
            }
        }
        Ok(Self { pools })
    }

    /// Builds `n_kappa` pools with `make(r, rng)`.
    pub fn generate<R, F>(n_kappa: usize, rng: &mut R, mut make: F) -> Result<Self>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, &mut R) -> Result<Pool>,
    {
        let pools = (0..n_kappa).map(|r| make(r, rng)).collect::<Result<Vec<_>>>()?;
        Self::new(pools)
    }

    pub fn pools(&self) -> &[Pool] {
        &self.pools
    }

    pub fn dim(&self) -> usize {
        self.pools[0].source.cols()
    }

    pub fn condition_dim(&self) -> usize {
        self.pools[0].condition.as_ref().map_or(0, Vec::len)
    }

    fn min_pool(&self) -> usize {
        self.pools
            .iter()
            .map(|p| p.source.rows().min(p.target.rows()))
            .min()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub experiment: String,
    pub loss: DpotConfig,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub arch: ArchSpec,
    /// Steps between diagnostics; a multiple of `n_γ`.
    pub diag_every: usize,
    /// Source points per pool used for the relative error.
    pub eval_size: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub threads: usize,
    /// Start from zero output weights instead of Xavier ones.
    pub zero_head: bool,
}

impl TrainConfig {
    pub fn new(experiment: &str, loss: DpotConfig, arch: ArchSpec, steps: usize) -> Self {
        Self {
            experiment: experiment.to_string(),
            loss,
            steps,
            seed: 0,
            lr: 1e-3,
            arch,
            diag_every: loss.n_gamma,
            eval_size: 4000,
            checkpoint_dir: None,
            threads: 1,
            zero_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.arch.validate()?;
        let n_gamma = self.loss.n_gamma;
        if self.steps > 0 && self.steps < n_gamma {
            return Err(TrainConfig::err(format!("steps {} < n_gamma {n_gamma}", self.steps)));
        }
        if self.diag_every == 0 || !self.diag_every.is_multiple_of(n_gamma) {
            return Err(TrainConfig::err(format!(
                "diagnostic period {} is not a multiple of n_gamma {n_gamma}",
                self.diag_every
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainConfig::err(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    fn err(msg: String) -> TrainError {
        TrainError::Config(msg)
    }

    fn check_dataset(&self, data: &Dataset, d_out: usize) -> Result<()> {
        if data.pools().len() != self.loss.n_kappa {
            return Err(TrainConfig::err(format!(
                "{} pools for n_kappa = {}",
                data.pools().len(),
                self.loss.n_kappa
            )));
        }
        if self.loss.batch_size > data.min_pool() {
            return Err(TrainConfig::err(format!(
                "batch size {} exceeds the smallest pool ({})",
                self.loss.batch_size,
                data.min_pool()
            )));
        }
        let d_in = data.dim() + data.condition_dim();
        if self.arch.d_in != d_in || self.arch.d_out != d_out {
            return Err(TrainConfig::err(format!(
                "network maps {} → {} but data needs {d_in} → {d_out}",
                self.arch.d_in, self.arch.d_out
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log. Gap fields are present only on diagnostic
/// rows; `rel_l2` only when a reference map exists.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    /// `[ε₁, ε₂, ε₃, ε_total]`.
    pub eps: Option<[f64; 4]>,
    pub rel_l2: Option<f64>,
    pub seconds: f64,
}

/// Full diagnostic record at a refresh step.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub step: usize,
    /// Fieldwise mean of the per-pool reports.
    pub gap: GapReport,
    /// Mean loss with the plans in use before the refresh.
    pub stale_loss: f64,
    pub rel_l2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: MapNetwork,
    pub metrics: Vec<MetricsRow>,
    pub diagnostics: Vec<Diagnostic>,
    pub lr_halvings: usize,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

impl TrainOutput {
    pub fn final_diagnostic(&self) -> Option<&Diagnostic> {
        self.diagnostics.last()
    }
}

/// Runs `f` over `items` on up to `threads` scoped workers, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// `(Σ‖T − T̄‖², Σ‖T̄‖²)` over a batch.
fn l2_parts(net: &MapNetwork, truth: ExactMap, x: &ParticleBatch) -> Result<(f64, f64)> {
    let pred = net.forward(&x.network_input())?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..x.len() {
        let t = truth(x.points().row(i), x.condition());
        for (p, q) in pred.row(i).iter().zip(&t) {
            num += (p - q).powi(2);
            den += q * q;
        }
    }
    Ok((num, den))
}

/// `‖T − T̄‖ / ‖T̄‖` in the empirical `L²` norm of `x`.
pub fn relative_l2_error(net: &MapNetwork, truth: ExactMap, x: &ParticleBatch) -> Result<f64> {
    let (num, den) = l2_parts(net, truth, x)?;
    if den == 0.0 {
        return Err(TrainError::UndefinedMetric);
    }
    Ok((num / den).sqrt())
}

fn pooled_relative_error(net: &MapNetwork, truth: ExactMap, evals: &[ParticleBatch]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for e in evals {
        let (a, b) = l2_parts(net, truth, e)?;
        num += a;
        den += b;
    }
    if den == 0.0 {
        return Err(TrainError::UndefinedMetric);
    }
    Ok((num / den).sqrt())
}

fn eval_sets(data: &Dataset, size: usize) -> Vec<ParticleBatch> {
    data.pools()
        .iter()
        .map(|p| {
            let n = size.min(p.source.rows());
            ParticleBatch::source(p.source.slice_rows(0, n))
                .expect("pool points")
                .with_condition(p.condition.clone())
        })
        .collect()
}

/// Independent size-`n` subsets of source and target for every pool.
fn draw_batches(data: &Dataset, n: usize, rng: &mut ChaCha8Rng) -> Vec<(ParticleBatch, ParticleBatch)> {
    data.pools()
        .iter()
        .map(|p| {
            let xi = sample(rng, p.source.rows(), n).into_vec();
            let yi = sample(rng, p.target.rows(), n).into_vec();
            let x = ParticleBatch::source(p.source.gather_rows(&xi)).expect("pool points");
            let y = ParticleBatch::target(p.target.gather_rows(&yi)).expect("pool points");
            (
                x.with_condition(p.condition.clone()),
                y.with_condition(p.condition.clone()),
            )
        })
        .collect()
}

/// Optimal assignment of `net(from)` to `to` for every pair.
fn solve_plans(
    net: &MapNetwork,
    pairs: &[(&ParticleBatch, &ParticleBatch)],
    threads: usize,
) -> Result<Vec<TransportPlan>> {
    par_map(pairs, threads, |(from, to)| -> Result<TransportPlan> {
        let mapped = net.forward(&from.network_input())?;
        Ok(solve_exact(&CostMatrix::between(&mapped, to.points())?)?)
    })
    .into_iter()
    .collect()
}

/// Gap report and stale-plan loss of `net` on each batch.
fn diagnose(
    net: &MapNetwork,
    batches: &[(ParticleBatch, ParticleBatch)],
    plans: &[TransportPlan],
    lambda: f64,
    step: usize,
    threads: usize,
) -> Result<(GapReport, f64)> {
    let idx: Vec<usize> = (0..batches.len()).collect();
    let per = par_map(&idx, threads, |&r| -> Result<(GapReport, f64)> {
        let (x, y) = &batches[r];
        let tx = net.forward(&x.network_input())?;
        let gap = gap_decomposition_points(&tx, x.points(), y.points(), lambda)?;
        let stale = dpot_value(&tx, x.points(), y.points(), &plans[r], lambda)?;
        Ok((gap, stale))
    });
    let mut gaps = Vec::with_capacity(per.len());
    let mut stale_sum = 0.0;
    for p in per {
        let (gap, stale) = p?;
        if !gap.satisfies_lower_bound() {
            return Err(TrainError::LowerBound {
                step,
                loss: gap.loss,
                bound: gap.lambda * gap.w2_xy,
            });
        }
        if stale < gap.loss - LOWER_BOUND_TOL {
            return Err(TrainError::StalePlan {
                step,
                stale,
                fresh: gap.loss,
            });
        }
        stale_sum += stale;
        gaps.push(gap);
    }
    let stale = stale_sum / gaps.len() as f64;
    Ok((GapReport::mean(&gaps).expect("at least one pool"), stale))
}

fn write_checkpoint(dir: &std::path::Path, name: &str, net: &MapNetwork) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    net.write_checkpoint(f)?;
    Ok(path)
}

/// Whether `e` reports overflow or NaN rather than a logic error.
fn is_numeric(e: &TrainError) -> bool {
    use crate::tensor::TensorError::NonFinite;
    matches!(
        e,
        TrainError::Nn(NnError::Tensor(NonFinite { .. }) | NnError::NonFiniteGradient { .. })
            | TrainError::Loss(
                LossError::Nn(NnError::Tensor(NonFinite { .. }))
                    | LossError::Tensor(NonFinite { .. })
                    | LossError::Ot(OtError::InvalidCost { .. })
            )
            | TrainError::Ot(OtError::InvalidCost { .. })
    )
}

/// Splits `r` into success, a numeric failure (as text) or a fatal error.
fn classify<T>(r: Result<T>) -> Result<std::result::Result<T, String>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e) if is_numeric(&e) => Ok(Err(e.to_string())),
        Err(e) => Err(e),
    }
}

/// Single recovery budget shared by a run: the first numeric failure
/// restores the last refresh snapshot and halves the learning rate; the
/// second aborts.
struct Recovery {
    used: bool,
}

impl Recovery {
    fn handle(&mut self, step: usize, detail: String, snapshot: &MapNetwork) -> Result<()> {
        if self.used {
            return Err(TrainError::NonFinite {
                step,
                detail,
                last_good: Box::new(snapshot.clone()),
            });
        }
        self.used = true;
        Ok(())
    }
}

fn check_finite(value: f64, grad: &[f64], net: &MapNetwork) -> std::result::Result<(), String> {
    if !value.is_finite() {
        return Err(format!("loss = {value}"));
    }
    match grad.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(format!("gradient in {}", net.layer_of(i))),
        None => Ok(()),
    }
}

fn diag_row(step: usize, loss: f64, d: &Diagnostic, seconds: f64) -> MetricsRow {
    let g = &d.gap;
    MetricsRow {
        step,
        loss,
        eps: Some([g.eps1, g.eps2, g.eps3, g.total]),
        rel_l2: d.rel_l2,
        seconds,
    }
}

/// Trains a single map on `data`.
pub fn train(cfg: &TrainConfig, data: &Dataset, truth: Option<ExactMap>) -> Result<TrainOutput> {
    cfg.validate()?;
    cfg.check_dataset(data, data.dim())?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = MapNetwork::new(cfg.arch, &mut rng)?;
    if cfg.zero_head {
        net.zero_output_weights();
    }
    let mut adam = AdamState::with_lr(net.num_params(), cfg.lr);
    let mut out = TrainOutput {
        net: net.clone(),
        metrics: Vec::new(),
        diagnostics: Vec::new(),
        lr_halvings: 0,
        checkpoints: Vec::new(),
        seconds: 0.0,
    };
    if cfg.steps == 0 {
        return Ok(out);
    }
    let (lambda, n_gamma, n) = (cfg.loss.lambda, cfg.loss.n_gamma, cfg.loss.batch_size);
    let evals = eval_sets(data, cfg.eval_size);
    let rel = |net: &MapNetwork| truth.map(|t| pooled_relative_error(net, t, &evals)).transpose();

    let mut batches: Vec<(ParticleBatch, ParticleBatch)> = Vec::new();
    let mut plans: Vec<TransportPlan> = Vec::new();
    let mut snapshot = (net.clone(), adam.clone());
    let mut recovery = Recovery { used: false };
    let mut diag_count = 0usize;

    for step in 0..cfg.steps {
        let mut pending: Option<Diagnostic> = None;
        if step % n_gamma == 0 {
            let diag_now = step % cfg.diag_every == 0;
            let outgoing = std::mem::take(&mut batches);
            batches = draw_batches(data, n, &mut rng);
            let attempt = classify((|| {
                let mut d = None;
                // Diagnose the outgoing batches so the stale plan can be
                // compared with a fresh one at the same parameters.
                if diag_now && step > 0 {
                    let (gap, stale_loss) = diagnose(&net, &outgoing, &plans, lambda, step, cfg.threads)?;
                    d = Some(Diagnostic {
                        step,
                        gap,
                        stale_loss,
                        rel_l2: rel(&net)?,
                    });
                }
                let pairs: Vec<_> = batches.iter().map(|(x, y)| (x, y)).collect();
                let fresh = solve_plans(&net, &pairs, cfg.threads)?;
                if diag_now && step == 0 {
                    let (gap, stale_loss) = diagnose(&net, &batches, &fresh, lambda, step, cfg.threads)?;
                    d = Some(Diagnostic {
                        step,
                        gap,
                        stale_loss,
                        rel_l2: rel(&net)?,
                    });
                }
                Ok((fresh, d))
            })())?;
            match attempt {
                Ok((fresh, d)) => {
                    plans = fresh;
                    pending = d;
                    snapshot = (net.clone(), adam.clone());
                }
                Err(detail) => {
                    recovery.handle(step, detail, &snapshot.0)?;
                    (net, adam) = snapshot.clone();
                    adam.lr *= 0.5;
                    out.lr_halvings += 1;
                    let pairs: Vec<_> = batches.iter().map(|(x, y)| (x, y)).collect();
                    plans = solve_plans(&net, &pairs, cfg.threads)?;
                }
            }
            if diag_now {
                diag_count += 1;
                if let Some(dir) = &cfg.checkpoint_dir {
                    if diag_count.is_multiple_of(CHECKPOINT_PERIODS) {
                        out.checkpoints
                            .push(write_checkpoint(dir, &format!("step{step:06}.ckpt"), &net)?);
                    }
                }
            }
        }

        let planned: Vec<PlannedBatch> = batches
            .iter()
            .zip(&plans)
            .map(|((x, y), plan)| PlannedBatch { x, y, plan })
            .collect();
        let attempt = classify(conditional_dpot_loss(&net, &planned, lambda).map_err(TrainError::from))?
            .and_then(|e| check_finite(e.value, &e.grad, &net).map(|_| e));
        let eval = match attempt {
            Ok(e) => e,
            Err(detail) => {
                recovery.handle(step, detail, &snapshot.0)?;
                (net, adam) = snapshot.clone();
                adam.lr *= 0.5;
                out.lr_halvings += 1;
                let pairs: Vec<_> = batches.iter().map(|(x, y)| (x, y)).collect();
                plans = solve_plans(&net, &pairs, cfg.threads)?;
                continue;
            }
        };
        net.adam_step(&mut adam, &eval.grad)?;

        let seconds = start.elapsed().as_secs_f64();
        match pending {
            Some(d) => {
                out.metrics.push(diag_row(step, eval.value, &d, seconds));
                out.diagnostics.push(d);
            }
            None => out.metrics.push(MetricsRow {
                step,
                loss: eval.value,
                eps: None,
                rel_l2: None,
                seconds,
            }),
        }
    }

    let (gap, stale_loss) = diagnose(&net, &batches, &plans, lambda, cfg.steps, cfg.threads)?;
    let d = Diagnostic {
        step: cfg.steps,
        gap,
        stale_loss,
        rel_l2: rel(&net)?,
    };
    out.metrics
        .push(diag_row(cfg.steps, stale_loss, &d, start.elapsed().as_secs_f64()));
    out.diagnostics.push(d);
    if let Some(dir) = &cfg.checkpoint_dir {
        out.checkpoints.push(write_checkpoint(dir, "final.ckpt", &net)?);
    }
    out.net = net;
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Cycle residuals and losses at one step of an inverse run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleRow {
    pub step: usize,
    pub loss_fwd: f64,
    pub loss_inv: f64,
    pub res_fwd: f64,
    pub res_inv: f64,
}

#[derive(Debug, Clone)]
pub struct InverseOutput {
    pub fwd: MapNetwork,
    pub inv: MapNetwork,
    /// `loss` is `L_fwd + L_inv`; gap fields describe the forward map.
    pub metrics: Vec<MetricsRow>,
    pub cycles: Vec<CycleRow>,
    /// Residuals `(fwd, inv)` of the final networks on the last batches.
    pub final_residuals: (f64, f64),
    pub lr_halvings: usize,
    pub seconds: f64,
}

/// Jointly trains a forward map and its inverse, alternating one Adam step
/// on each per iteration. Each step differentiates only its own network.
pub fn train_inverse(cfg: &TrainConfig, data: &Dataset) -> Result<InverseOutput> {
    cfg.validate()?;
    cfg.check_dataset(data, data.dim())?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fwd = MapNetwork::new(cfg.arch, &mut rng)?;
    let mut inv = MapNetwork::new(cfg.arch, &mut rng)?;
    if cfg.zero_head {
        fwd.zero_output_weights();
        inv.zero_output_weights();
    }
    let mut adam_f = AdamState::with_lr(fwd.num_params(), cfg.lr);
    let mut adam_i = AdamState::with_lr(inv.num_params(), cfg.lr);
    let mut out = InverseOutput {
        fwd: fwd.clone(),
        inv: inv.clone(),
        metrics: Vec::new(),
        cycles: Vec::new(),
        final_residuals: (f64::NAN, f64::NAN),
        lr_halvings: 0,
        seconds: 0.0,
    };
    if cfg.steps == 0 {
        return Ok(out);
    }
    let (lambda, n_gamma, n) = (cfg.loss.lambda, cfg.loss.n_gamma, cfg.loss.batch_size);
    let mut batches: Vec<(ParticleBatch, ParticleBatch)> = Vec::new();
    let mut plans_f: Vec<TransportPlan> = Vec::new();
    let mut plans_i: Vec<TransportPlan> = Vec::new();
    let mut snapshot = (fwd.clone(), inv.clone(), adam_f.clone(), adam_i.clone());
    let mut recovery = Recovery { used: false };

    let refresh = |fwd: &MapNetwork, inv: &MapNetwork, batches: &[(ParticleBatch, ParticleBatch)]| -> Result<_> {
        let f_pairs: Vec<_> = batches.iter().map(|(x, y)| (x, y)).collect();
        let i_pairs: Vec<_> = batches.iter().map(|(x, y)| (y, x)).collect();
        Ok((
            solve_plans(fwd, &f_pairs, cfg.threads)?,
            solve_plans(inv, &i_pairs, cfg.threads)?,
        ))
    };

    for step in 0..cfg.steps {
        let mut pending: Option<Diagnostic> = None;
        if step % n_gamma == 0 {
            let diag_now = step % cfg.diag_every == 0;
            let outgoing = std::mem::take(&mut batches);
            batches = draw_batches(data, n, &mut rng);
            let attempt = classify((|| {
                let mut d = None;
                if diag_now && step > 0 {
                    let (gap, stale_loss) = diagnose(&fwd, &outgoing, &plans_f, lambda, step, cfg.threads)?;
                    d = Some(Diagnostic {
                        step,
                        gap,
                        stale_loss,
                        rel_l2: None,
                    });
                }
                let fresh = refresh(&fwd, &inv, &batches)?;
                if diag_now && step == 0 {
                    let (gap, stale_loss) = diagnose(&fwd, &batches, &fresh.0, lambda, step, cfg.threads)?;
                    d = Some(Diagnostic {
                        step,
                        gap,
                        stale_loss,
                        rel_l2: None,
                    });
                }
                Ok((fresh, d))
            })())?;
            match attempt {
                Ok((fresh, d)) => {
                    (plans_f, plans_i) = fresh;
                    pending = d;
                    snapshot = (fwd.clone(), inv.clone(), adam_f.clone(), adam_i.clone());
                }
                Err(detail) => {
                    recovery.handle(step, detail, &snapshot.0)?;
                    (fwd, inv, adam_f, adam_i) = snapshot.clone();
                    adam_f.lr *= 0.5;
                    adam_i.lr *= 0.5;
                    out.lr_halvings += 1;
                    (plans_f, plans_i) = refresh(&fwd, &inv, &batches)?;
                }
            }
        }

        let pairs: Vec<CyclePair> = batches
            .iter()
            .zip(plans_f.iter().zip(&plans_i))
            .map(|((x, y), (pf, pi))| CyclePair {
                x,
                y,
                plan_fwd: pf,
                plan_inv: pi,
            })
            .collect();
        // Forward step, then the inverse step against the updated forward map.
        let attempt = classify((|| {
            let ef = cycle_forward_loss(&fwd, &inv, &pairs, lambda)?;
            if let Err(detail) = check_finite(ef.loss.value, &ef.loss.grad, &fwd) {
                return Ok(Err(detail));
            }
            let mut next_fwd = fwd.clone();
            let mut next_adam = adam_f.clone();
            next_fwd.adam_step(&mut next_adam, &ef.loss.grad)?;
            let ei = cycle_inverse_loss(&next_fwd, &inv, &pairs, lambda)?;
            if let Err(detail) = check_finite(ei.loss.value, &ei.loss.grad, &inv) {
                return Ok(Err(detail));
            }
            Ok(Ok((ef, ei, next_fwd, next_adam)))
        })())?
        .and_then(|r| r);
        let (ef, ei) = match attempt {
            Ok((ef, ei, next_fwd, next_adam)) => {
                fwd = next_fwd;
                adam_f = next_adam;
                inv.adam_step(&mut adam_i, &ei.loss.grad)?;
                (ef, ei)
            }
            Err(detail) => {
                recovery.handle(step, detail, &snapshot.0)?;
                (fwd, inv, adam_f, adam_i) = snapshot.clone();
                adam_f.lr *= 0.5;
                adam_i.lr *= 0.5;
                out.lr_halvings += 1;
                (plans_f, plans_i) = refresh(&fwd, &inv, &batches)?;
                continue;
            }
        };

        let loss = ef.loss.value + ei.loss.value;
        out.cycles.push(CycleRow {
            step,
            loss_fwd: ef.loss.value,
            loss_inv: ei.loss.value,
            res_fwd: ef.residual,
            res_inv: ei.residual,
        });
        let seconds = start.elapsed().as_secs_f64();
        out.metrics.push(match pending {
            Some(d) => diag_row(step, loss, &d, seconds),
            None => MetricsRow {
                step,
                loss,
                eps: None,
                rel_l2: None,
                seconds,
            },
        });
    }

    let pairs: Vec<CyclePair> = batches
        .iter()
        .zip(plans_f.iter().zip(&plans_i))
        .map(|((x, y), (pf, pi))| CyclePair {
            x,
            y,
            plan_fwd: pf,
            plan_inv: pi,
        })
        .collect();
    let (ef, ei) = cycle_losses(&fwd, &inv, &pairs, lambda)?;
    out.final_residuals = (ef.residual, ei.residual);
    let (gap, stale_loss) = diagnose(&fwd, &batches, &plans_f, lambda, cfg.steps, cfg.threads)?;
    let d = Diagnostic {
        step: cfg.steps,
        gap,
        stale_loss,
        rel_l2: None,
    };
    out.metrics.push(diag_row(
        cfg.steps,
        ef.loss.value + ei.loss.value,
        &d,
        start.elapsed().as_secs_f64(),
    ));
    out.fwd = fwd;
    out.inv = inv;
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Spearman correlation between `ε_total` and the relative error over the
/// diagnostic rows that carry both.
pub fn gap_error_correlation(rows: &[MetricsRow]) -> Option<f64> {
    let (eps, err): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| Some((r.eps?[3], r.rel_l2?))).unzip();
    spearman(&eps, &err)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        let e = |k: usize| opt(r.eps.map(|e| e[k]));
        out.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            e(0),
            e(1),
            e(2),
            e(3),
            opt(r.rel_l2),
            r.seconds.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(TrainError::Config(format!("unexpected metrics header {header:?}")));
    }
    let bad = |field: &str| TrainError::Config(format!("bad metrics field {field:?}"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(s));
    let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    rd.records()
        .map(|rec| {
            let rec = rec?;
            let f = |k: usize| rec.get(k).unwrap_or("");
            let eps = match (maybe(f(2))?, maybe(f(3))?, maybe(f(4))?, maybe(f(5))?) {
                (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
                _ => None,
            };
            Ok(MetricsRow {
                step: f(0).parse().map_err(|_| bad(f(0)))?,
                loss: num(f(1))?,
                eps,
                rel_l2: maybe(f(6))?,
                seconds: num(f(7))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;

    fn blob(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Tensor {
        Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-0.5..0.5) + shift).collect()).unwrap()
    }

    fn shift_data(n_kappa: usize, pool: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::generate(n_kappa, &mut rng, |_, r| {
            Ok(Pool {
                source: blob(r, pool, 0.0),
                target: blob(r, pool, 1.0),
                condition: None,
            })
        })
        .unwrap()
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        let loss = DpotConfig {
            lambda: 0.3,
            n_gamma: 5,
            n_kappa: 1,
            batch_size: 32,
            ablation: false,
        };
        let mut cfg = TrainConfig::new("unit", loss, ArchSpec::mlp(2, 2, 16, 2), steps);
        cfg.lr = 1e-2;
        cfg
    }

    fn shift_map(x: &[f64], _: Option<&[f64]>) -> Vec<f64> {
        x.iter().map(|v| v + 1.0).collect()
    }

    #[test]
    fn zero_steps_returns_initial_network() {
        let data = shift_data(1, 64, 0);
        let cfg = small_cfg(0);
        let out = train(&cfg, &data, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = MapNetwork::new(cfg.arch, &mut rng).unwrap();
        init.zero_output_weights();
        assert_eq!(out.net.params(), init.params());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(3);
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        cfg.steps = 10;
        cfg.diag_every = 7;
        assert!(cfg.validate().is_err());
        cfg.diag_every = 10;
        assert!(cfg.validate().is_ok());
        let data = shift_data(1, 20, 0);
        assert!(train(&cfg, &data, None).is_err(), "batch larger than pool");
    }

    #[test]
    fn learns_a_translation_and_logs_diagnostics() {
        let data = shift_data(1, 256, 1);
        let mut cfg = small_cfg(300);
        cfg.diag_every = 50;
        let out = train(&cfg, &data, Some(&shift_map)).unwrap();
        assert_eq!(out.metrics.len(), 301);
        let diag: Vec<_> = out.metrics.iter().filter(|r| r.eps.is_some()).collect();
        assert_eq!(diag.len(), 300 / 50 + 1);
        assert!(out
            .metrics
            .iter()
            .filter(|r| r.eps.is_none())
            .all(|r| r.rel_l2.is_none()));
        let first = diag.first().unwrap().rel_l2.unwrap();
        let last = diag.last().unwrap().rel_l2.unwrap();
        assert!(last < 0.5 * first, "{first} → {last}");
        for d in &out.diagnostics {
            assert!(d.gap.eps1 >= -1e-12 && d.gap.eps2 >= -1e-12 && d.gap.eps3 >= -1e-12);
            assert!(d.stale_loss >= d.gap.loss - LOWER_BOUND_TOL);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let data = shift_data(2, 64, 2);
        let mut cfg = small_cfg(20);
        cfg.loss.n_kappa = 2;
        let a = train(&cfg, &data, Some(&shift_map)).unwrap();
        let b = train(&cfg, &data, Some(&shift_map)).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        let strip = |rows: &[MetricsRow]| {
            rows.iter()
                .map(|r| (r.step, r.loss, r.eps, r.rel_l2))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        let mut threaded = cfg.clone();
        threaded.threads = 2;
        let c = train(&threaded, &data, Some(&shift_map)).unwrap();
        assert_eq!(a.net.params(), c.net.params());
    }

    #[test]
    fn relative_error_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ParticleBatch::source(blob(&mut rng, 50, 0.3)).unwrap();
        // A two-layer ReLU network reproduces the identity exactly.
        let mut id = MapNetwork::new(ArchSpec::mlp(2, 2, 4, 1), &mut rng).unwrap();
        let theta = [
            1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0, // hidden weight 2×4
            0.0, 0.0, 0.0, 0.0, // hidden bias
            1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, // output weight 4×2
            0.0, 0.0,
        ];
        id.params_mut().copy_from_slice(&theta);
        let same = |p: &[f64], _: Option<&[f64]>| p.to_vec();
        let half = |p: &[f64], _: Option<&[f64]>| p.iter().map(|v| 0.5 * v).collect::<Vec<_>>();
        assert!(relative_l2_error(&id, &same, &x).unwrap() < 1e-15);
        assert!((relative_l2_error(&id, &half, &x).unwrap() - 1.0).abs() < 1e-12);
        let zero = |p: &[f64], _: Option<&[f64]>| vec![0.0; p.len()];
        assert!(matches!(
            relative_l2_error(&id, &zero, &x),
            Err(TrainError::UndefinedMetric)
        ));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricsRow {
                step: 0,
                loss: 1.5,
                eps: Some([0.1, 0.2, 0.3, 0.6]),
                rel_l2: Some(0.25),
                seconds: 0.01,
            },
            MetricsRow {
                step: 1,
                loss: 1.25,
                eps: None,
                rel_l2: None,
                seconds: 0.02,
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,loss,eps1,eps2,eps3,eps_total,rel_l2,seconds\n"));
        assert!(text.contains("\n1,1.25,,,,,,0.02\n"));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn inverse_step_moves_both_networks() {
        let data = shift_data(1, 64, 4);
        let cfg = small_cfg(5);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut f0 = MapNetwork::new(cfg.arch, &mut rng).unwrap();
        let mut i0 = MapNetwork::new(cfg.arch, &mut rng).unwrap();
        f0.zero_output_weights();
        i0.zero_output_weights();
        let mut one = cfg.clone();
        one.loss.n_gamma = 1;
        one.diag_every = 1;
        one.steps = 1;
        let out = train_inverse(&one, &data).unwrap();
        assert_ne!(out.fwd.params(), f0.params());
        assert_ne!(out.inv.params(), i0.params());
        assert_eq!(out.cycles.len(), 1);
    }

    #[test]
    fn inverse_training_reduces_residuals() {
        let data = shift_data(1, 128, 5);
        let mut cfg = small_cfg(200);
        cfg.diag_every = 50;
        let out = train_inverse(&cfg, &data).unwrap();
        let first = out.cycles[0];
        assert!(
            out.final_residuals.0 < 0.5 * first.res_fwd,
            "{:?} vs {first:?}",
            out.final_residuals
        );
        assert!(out.final_residuals.1 < 0.5 * first.res_inv);
    }

    #[test]
    fn divergence_recovers_once_then_aborts() {
        let data = shift_data(1, 64, 6);
        let mut cfg = small_cfg(40);
        cfg.lr = 1e300;
        match train(&cfg, &data, None) {
            Err(TrainError::NonFinite { last_good, .. }) => {
                assert!(last_good.params().iter().all(|p| p.is_finite()));
            }
            other => panic!("expected abort, got {:?}", other.map(|o| o.lr_halvings)),
        }
    }
}
