//! The DPOT objective, its conditional and cycle variants, and the
//! optimality-gap decomposition.
//!
//! For a map `T`, sources `X`, targets `Y` and a frozen assignment `σ`:
//!
//! ```text
//! P̂(T) = λ·√((1/2N) Σᵢ ‖T(xᵢ) − xᵢ‖²) + √((1/2N) Σᵢ ‖T(xᵢ) − y_σ(i)‖²)
//! ```
//!
//! With the optimal `σ`, `P̂(T) ≥ λ·Ŵ2(X, Y)`; the excess splits into three
//! non-negative terms reported by [`gap_decomposition`].

use thiserror::Error;

use crate::batch::{append_condition, ParticleBatch};
use crate::nn::{MapNetwork, NnError};
use crate::ot::{solve_exact, w2_points, CostMatrix, OtError, TransportPlan};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Slack allowed on the lower bound `P̂ ≥ λ·Ŵ2(X, Y)`.
pub const LOWER_BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("plan covers {plan} points but the batch has {batch}")]
    PlanSize { plan: usize, batch: usize },
    #[error("batch shapes disagree: {0}")]
    Shape(String),
    #[error("no batches supplied")]
    Empty,
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ot(#[from] OtError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Hyperparameters of the mini-batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpotConfig {
    pub lambda: f64,
    /// Optimizer steps between plan refreshes.
    pub n_gamma: usize,
    /// Condition values (batches) averaged per step.
    pub n_kappa: usize,
    pub batch_size: usize,
    /// Allows `λ ∈ {0, 1}` for ablation runs.
    pub ablation: bool,
}

impl Default for DpotConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            n_gamma: 10,
            n_kappa: 1,
            batch_size: 1000,
            ablation: false,
        }
    }
}

impl DpotConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo_ok, hi_ok) = if self.ablation {
            (self.lambda >= 0.0, self.lambda <= 1.0)
        } else {
            (self.lambda > 0.0, self.lambda < 1.0)
        };
        if !(lo_ok && hi_ok) {
            return Err(LossError::Config(format!(
                "lambda {} outside {}",
                self.lambda,
                if self.ablation { "[0, 1]" } else { "(0, 1)" }
            )));
        }
        if self.n_gamma == 0 {
            return Err(LossError::Config("n_gamma must be at least 1".into()));
        }
        if self.n_kappa == 0 {
            return Err(LossError::Config("n_kappa must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(LossError::Config("batch size must be at least 2".into()));
        }
        Ok(())
    }
}

/// A loss value with its gradient in the trained network's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// One κ-batch with its frozen plan.
#[derive(Debug, Clone, Copy)]
pub struct PlannedBatch<'a> {
    pub x: &'a ParticleBatch,
    pub y: &'a ParticleBatch,
    pub plan: &'a TransportPlan,
}

fn check_pair(tx: &Tensor, x: &Tensor, y: &Tensor) -> Result<()> {
    if tx.rows() != x.rows() || y.rows() != x.rows() {
        return Err(LossError::Shape(format!(
            "{} mapped, {} source and {} target points",
            tx.rows(),
            x.rows(),
            y.rows()
        )));
    }
    if tx.cols() != x.cols() || y.cols() != x.cols() {
        return Err(LossError::Shape(format!(
            "dimensions {} / {} / {}",
            tx.cols(),
            x.cols(),
            y.cols()
        )));
    }
    Ok(())
}

fn check_plan(plan: &TransportPlan, n: usize) -> Result<()> {
    if plan.len() != n {
        return Err(LossError::PlanSize {
            plan: plan.len(),
            batch: n,
        });
    }
    Ok(())
}

/// `(1/2N) Σᵢ ‖a_i − b_i‖²` on the tape, with `b` fixed.
fn half_mean_sq_on(tape: &mut Tape, a: Var, b: &Tensor) -> Result<Var> {
    let n = b.rows() as f64;
    let bv = tape.constant(b.clone());
    let d = tape.sub(a, bv)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 0.5 / n)?)
}

/// Transport cost `(1/2N) Σᵢ ‖T(xᵢ) − xᵢ‖²` of mapped points `tx`.
pub fn transport_cost_on(tape: &mut Tape, tx: Var, x: &Tensor) -> Result<Var> {
    half_mean_sq_on(tape, tx, x)
}

/// The DPOT loss of mapped points `tx` under the frozen plan.
pub fn dpot_loss_on(
    tape: &mut Tape,
    tx: Var,
    x: &Tensor,
    y: &Tensor,
    plan: &TransportPlan,
    lambda: f64,
) -> Result<Var> {
    check_pair(tape.value(tx), x, y)?;
    check_plan(plan, x.rows())?;
    let tc = transport_cost_on(tape, tx, x)?;
    let self_term = tape.sqrt_guarded(tc)?;
    let matched = y.gather_rows(plan.permutation());
    let mc = half_mean_sq_on(tape, tx, &matched)?;
    let match_term = tape.sqrt_guarded(mc)?;
    let scaled = tape.scale(self_term, lambda)?;
    Ok(tape.add(scaled, match_term)?)
}

fn half_mean_sq(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    0.5 * s / a.rows() as f64
}

/// Value of the transport cost without recording a tape.
pub fn transport_cost_value(tx: &Tensor, x: &Tensor) -> Result<f64> {
    check_pair(tx, x, x)?;
    Ok(half_mean_sq(tx, x))
}

/// Value of the DPOT loss without recording a tape.
pub fn dpot_value(tx: &Tensor, x: &Tensor, y: &Tensor, plan: &TransportPlan, lambda: f64) -> Result<f64> {
    check_pair(tx, x, y)?;
    check_plan(plan, x.rows())?;
    let matched = y.gather_rows(plan.permutation());
    Ok(lambda * half_mean_sq(tx, x).sqrt() + half_mean_sq(tx, &matched).sqrt())
}

/// Transport cost of `net` on `x`, with its gradient.
pub fn transport_cost(net: &MapNetwork, x: &ParticleBatch) -> Result<LossEval> {
    let mut tape = Tape::new();
    let theta = net.param_var(&mut tape);
    let input = tape.constant(x.network_input());
    let tx = net.forward_on(&mut tape, theta, input)?;
    let tc = transport_cost_on(&mut tape, tx, x.points())?;
    finish(tape, theta, tc)
}

fn finish(tape: Tape, theta: Var, loss: Var) -> Result<LossEval> {
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let grad = grads.take(theta).expect("theta is a parameter").into_data();
    Ok(LossEval { value, grad })
}

/// DPOT loss of `net` on one batch, with its gradient.
pub fn dpot_loss(
    net: &MapNetwork,
    x: &ParticleBatch,
    y: &ParticleBatch,
    plan: &TransportPlan,
    lambda: f64,
) -> Result<LossEval> {
    conditional_dpot_loss(net, &[PlannedBatch { x, y, plan }], lambda)
}

/// Mean of the per-batch DPOT losses, with its gradient.
pub fn conditional_dpot_loss(net: &MapNetwork, batches: &[PlannedBatch], lambda: f64) -> Result<LossEval> {
    if batches.is_empty() {
        return Err(LossError::Empty);
    }
    let mut tape = Tape::new();
    let theta = net.param_var(&mut tape);
    let mut total: Option<Var> = None;
    for b in batches {
        let input = tape.constant(b.x.network_input());
        let tx = net.forward_on(&mut tape, theta, input)?;
        let l = dpot_loss_on(&mut tape, tx, b.x.points(), b.y.points(), b.plan, lambda)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let mean = tape.scale(total.expect("non-empty"), 1.0 / batches.len() as f64)?;
    finish(tape, theta, mean)
}

/// The optimality-gap decomposition on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// `(1−λ)·Ŵ2(T(X), Y)`: pushforward mismatch.
    pub eps1: f64,
    /// `λ·(√cost(T) − Ŵ2(T(X), X))`: suboptimality of `T` as a transport.
    pub eps2: f64,
    /// `λ·(Ŵ2(T(X), X) + Ŵ2(T(X), Y) − Ŵ2(X, Y))`: triangle defect.
    pub eps3: f64,
    /// `P̂(T) − λ·Ŵ2(X, Y)` with a fresh optimal plan.
    pub total: f64,
    /// `P̂(T)` with a fresh optimal plan.
    pub loss: f64,
    pub w2_xy: f64,
    pub w2_tx_y: f64,
    pub w2_tx_x: f64,
    pub transport_cost: f64,
    pub lambda: f64,
}

impl GapReport {
    pub fn sum(&self) -> f64 {
        self.eps1 + self.eps2 + self.eps3
    }

    /// `√cost(T) − Ŵ2(T(X), X)`, not scaled by λ.
    pub fn self_suboptimality(&self) -> f64 {
        self.transport_cost.sqrt() - self.w2_tx_x
    }

    pub fn satisfies_lower_bound(&self) -> bool {
        self.loss >= self.lambda * self.w2_xy - LOWER_BOUND_TOL
    }

    /// Fieldwise mean over κ-batches.
    pub fn mean(reports: &[GapReport]) -> Option<GapReport> {
        let n = reports.len() as f64;
        let first = reports.first()?;
        let avg = |f: fn(&GapReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(GapReport {
            eps1: avg(|r| r.eps1),
            eps2: avg(|r| r.eps2),
            eps3: avg(|r| r.eps3),
            total: avg(|r| r.total),
            loss: avg(|r| r.loss),
            w2_xy: avg(|r| r.w2_xy),
            w2_tx_y: avg(|r| r.w2_tx_y),
            w2_tx_x: avg(|r| r.w2_tx_x),
            transport_cost: avg(|r| r.transport_cost),
            lambda: first.lambda,
        })
    }
}

/// Gap decomposition of mapped points `tx`, using three fresh exact solves.
pub fn gap_decomposition_points(tx: &Tensor, x: &Tensor, y: &Tensor, lambda: f64) -> Result<GapReport> {
    check_pair(tx, x, y)?;
    let w2_xy = w2_points(x, y)?;
    let w2_tx_x = w2_points(tx, x)?;
    let fresh = solve_exact(&CostMatrix::between(tx, y)?)?;
    let w2_tx_y = fresh.cost().sqrt();
    let transport_cost = half_mean_sq(tx, x);
    let loss = dpot_value(tx, x, y, &fresh, lambda)?;
    Ok(GapReport {
        eps1: (1.0 - lambda) * w2_tx_y,
        eps2: lambda * (transport_cost.sqrt() - w2_tx_x),
        eps3: lambda * (w2_tx_x + w2_tx_y - w2_xy),
        total: loss - lambda * w2_xy,
        loss,
        w2_xy,
        w2_tx_y,
        w2_tx_x,
        transport_cost,
        lambda,
    })
}

/// Gap decomposition of `net` on one batch.
pub fn gap_decomposition(net: &MapNetwork, x: &ParticleBatch, y: &ParticleBatch, lambda: f64) -> Result<GapReport> {
    let tx = net.forward(&x.network_input())?;
    gap_decomposition_points(&tx, x.points(), y.points(), lambda)
}

/// A source/target batch pair with plans for both directions.
#[derive(Debug, Clone, Copy)]
pub struct CyclePair<'a> {
    pub x: &'a ParticleBatch,
    pub y: &'a ParticleBatch,
    /// Assignment of `T_fwd(X)` to `Y`.
    pub plan_fwd: &'a TransportPlan,
    /// Assignment of `T_inv(Y)` to `X`.
    pub plan_inv: &'a TransportPlan,
}

/// One direction of the cycle objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleEval {
    /// DPOT term plus residual, with the gradient of the trained network.
    pub loss: LossEval,
    pub dpot: f64,
    /// Mean squared round-trip error `(1/N) Σ ‖T_back(T(p)) − p‖²`.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

fn cycle_direction(
    fwd: &MapNetwork,
    inv: &MapNetwork,
    pairs: &[CyclePair],
    lambda: f64,
    dir: Direction,
) -> Result<CycleEval> {
    if pairs.is_empty() {
        return Err(LossError::Empty);
    }
    let (trained, other) = match dir {
        Direction::Forward => (fwd, inv),
        Direction::Inverse => (inv, fwd),
    };
    let mut tape = Tape::new();
    let theta = trained.param_var(&mut tape);
    let frozen = other.const_var(&mut tape);
    let mut dpot_total: Option<Var> = None;
    let mut res_total: Option<Var> = None;
    for p in pairs {
        let (from, to, plan) = match dir {
            Direction::Forward => (p.x, p.y, p.plan_fwd),
            Direction::Inverse => (p.y, p.x, p.plan_inv),
        };
        let input = tape.constant(from.network_input());
        let mapped = trained.forward_on(&mut tape, theta, input)?;
        let d = dpot_loss_on(&mut tape, mapped, from.points(), to.points(), plan, lambda)?;
        let back_in = match from.condition() {
            None | Some([]) => mapped,
            Some(c) => {
                let tail = append_condition(&Tensor::zeros(&[from.len(), 0]), Some(c));
                let tail = tape.constant(tail);
                tape.concat_cols(mapped, tail)?
            }
        };
        let back = other.forward_on(&mut tape, frozen, back_in)?;
        // (1/N)Σ‖·‖² is twice the half-mean helper.
        let r = half_mean_sq_on(&mut tape, back, from.points())?;
        let r = tape.scale(r, 2.0)?;
        dpot_total = Some(match dpot_total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
        res_total = Some(match res_total {
            None => r,
            Some(t) => tape.add(t, r)?,
        });
    }
    let inv_n = 1.0 / pairs.len() as f64;
    let dpot = tape.scale(dpot_total.expect("non-empty"), inv_n)?;
    let res = tape.scale(res_total.expect("non-empty"), inv_n)?;
    let loss = tape.add(dpot, res)?;
    let (dpot_v, res_v) = (tape.value(dpot).item(), tape.value(res).item());
    Ok(CycleEval {
        loss: finish(tape, theta, loss)?,
        dpot: dpot_v,
        residual: res_v,
    })
}

/// `L_fwd = P̂(T_fwd; X→Y) + (1/N)Σ‖T_inv(T_fwd(x)) − x‖²`, differentiated in
/// the forward network only.
pub fn cycle_forward_loss(fwd: &MapNetwork, inv: &MapNetwork, pairs: &[CyclePair], lambda: f64) -> Result<CycleEval> {
    cycle_direction(fwd, inv, pairs, lambda, Direction::Forward)
}

/// `L_inv = P̂(T_inv; Y→X) + (1/N)Σ‖T_fwd(T_inv(y)) − y‖²`, differentiated in
/// the inverse network only.
pub fn cycle_inverse_loss(fwd: &MapNetwork, inv: &MapNetwork, pairs: &[CyclePair], lambda: f64) -> Result<CycleEval> {
    cycle_direction(fwd, inv, pairs, lambda, Direction::Inverse)
}

/// Both cycle objectives at the same parameters.
pub fn cycle_losses(
    fwd: &MapNetwork,
    inv: &MapNetwork,
    pairs: &[CyclePair],
    lambda: f64,
) -> Result<(CycleEval, CycleEval)> {
    Ok((
        cycle_forward_loss(fwd, inv, pairs, lambda)?,
        cycle_inverse_loss(fwd, inv, pairs, lambda)?,
    ))
}
