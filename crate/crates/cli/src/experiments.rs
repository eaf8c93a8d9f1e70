//! One runner per experiment id. Each writes its artifacts and returns the
//! manifest with a summary of headline numbers.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use dpot::batch::{append_condition, ParticleBatch};
use dpot::bench::{
    ellipse_exact_map, mixture_bounds, sample_ellipse_source, sample_ellipse_target, sample_half_circle_target,
    sample_half_circles, sample_mixture_source, sample_mixture_target, sample_square_source, sample_square_target,
    square_bound, square_exact_map,
};
use dpot::csir::{posterior_accept_reject, sample_prior, ArOptions, CsirParams, Observations};
use dpot::loss::gap_decomposition_points;
use dpot::nn::MapNetwork;
use dpot::stats::{histogram, wasserstein1_sorted};
use dpot::tensor::Tensor;
use dpot::trainer::{
    gap_error_correlation, relative_l2_error, train, train_inverse, Dataset, ExactMap, Pool, TrainOutput,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{input_hash, mesh_nodes, mesh_tsv, Artifacts, RunManifest};
use crate::config::Config;
use crate::CliError;

/// Default ellipse condition for unconditioned runs.
pub const ELLIPSE_KAPPA: f64 = 0.2;
/// Default half-disk separation for unconditioned runs.
pub const DISJOINT_KAPPA: f64 = 0.5;
/// Unseen conditions evaluated after a conditioned run.
pub const HELD_OUT_CONDITIONS: usize = 4;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub threads: usize,
}

/// Headline numbers and wall times collected while running.
#[derive(Debug, Default)]
struct Record {
    summary: BTreeMap<String, f64>,
    timing: BTreeMap<String, f64>,
}

impl Record {
    fn put(&mut self, k: &str, v: f64) {
        self.summary.insert(k.to_string(), v);
    }
    fn time(&mut self, k: &str, v: f64) {
        self.timing.insert(k.to_string(), v);
    }
}

/// Validates, runs the configured experiment and writes `manifest.toml`.
pub fn run(cfg: &Config, opts: &RunOptions) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut art = Artifacts::create(&opts.out)?;
    let text = cfg.to_toml();
    art.write("config.toml", text.as_bytes())?;
    let mut inputs = Vec::new();
    if let Some(c) = &cfg.color {
        inputs.extend(c.source.iter().chain(&c.target).cloned());
    }
    let hash = input_hash(&text, &inputs)?;
    let mut rec = Record::default();
    match cfg.experiment.as_str() {
        "square" => square(cfg, opts, &mut art, &mut rec)?,
        "ellipse" => ellipse(cfg, opts, &mut art, &mut rec)?,
        "disjoint" => disjoint(cfg, opts, &mut art, &mut rec)?,
        "inverse" => inverse(cfg, opts, &mut art, &mut rec)?,
        "csir" => csir(cfg, opts, &mut art, &mut rec)?,
        "color-transfer" => {
            let (summary, timing) = crate::color::run(cfg, opts.threads, &mut art)?;
            rec.summary.extend(summary);
            rec.timing.extend(timing);
        }
        other => return Err(CliError::Usage(format!("unknown experiment `{other}`"))),
    }
    rec.time("total_seconds", start.elapsed().as_secs_f64());
    RunManifest::finish(&art, cfg, opts.threads, hash, rec.timing, rec.summary)
}

/// Independent stream for data generation, so pools do not shift when the
/// trainer consumes randomness differently.
fn data_rng(cfg: &Config) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    rng
}

fn trainer_config(cfg: &Config, opts: &RunOptions, art: &Artifacts) -> dpot::trainer::TrainConfig {
    let mut t = cfg.train_config();
    t.threads = opts.threads.max(1);
    if cfg.train.checkpoints {
        t.checkpoint_dir = Some(art.path("checkpoints"));
    }
    t
}

/// Trains, then writes metrics, plot data and checkpoints.
fn train_and_log(
    cfg: &Config,
    opts: &RunOptions,
    art: &mut Artifacts,
    rec: &mut Record,
    data: &Dataset,
    truth: Option<ExactMap>,
) -> Result<TrainOutput, CliError> {
    let tc = trainer_config(cfg, opts, art);
    let out = train(&tc, data, truth)?;
    art.metrics(&out.metrics)?;
    for p in &out.checkpoints {
        art.register(p)?;
    }
    if !cfg.train.checkpoints {
        art.checkpoint("final.ckpt", &out.net)?;
    }
    rec.time("train_seconds", out.seconds);
    rec.put("lr_halvings", out.lr_halvings as f64);
    if let Some(d) = out.final_diagnostic() {
        rec.put("final_eps_total", d.gap.total);
        rec.put("final_eps1", d.gap.eps1);
        rec.put("final_eps2", d.gap.eps2);
        rec.put("final_eps3", d.gap.eps3);
        rec.put("final_loss", d.gap.loss);
        rec.put("final_self_suboptimality", d.gap.self_suboptimality());
        rec.put("final_w2_tx_y", d.gap.w2_tx_y);
        rec.put("final_w2_tx_x", d.gap.w2_tx_x);
        rec.put("final_w2_x_y", d.gap.w2_xy);
        if let Some(r) = d.rel_l2 {
            rec.put("final_rel_l2", r);
        }
    }
    if let Some(c) = gap_error_correlation(&out.metrics) {
        rec.put("eps_error_spearman", c);
    }
    Ok(out)
}

/// Mapped points for a fixed condition.
fn push(net: &MapNetwork, points: &Tensor, condition: Option<&[f64]>) -> Result<Tensor, CliError> {
    Ok(net.forward(&append_condition(points, condition))?)
}

/// Relative error on fresh samples plus the gap of the pushed cloud.
fn held_out(
    net: &MapNetwork,
    truth: ExactMap,
    x: &Tensor,
    y: &Tensor,
    condition: Option<Vec<f64>>,
    lambda: f64,
) -> Result<(f64, Tensor, f64), CliError> {
    let batch = ParticleBatch::source(x.clone())?.with_condition(condition.clone());
    let rel = relative_l2_error(net, truth, &batch)?;
    let tx = push(net, x, condition.as_deref())?;
    let n = x.rows().min(y.rows()).min(2000);
    let idx: Vec<usize> = (0..n).collect();
    let gap = gap_decomposition_points(
        &tx.gather_rows(&idx),
        &x.gather_rows(&idx),
        &y.gather_rows(&idx),
        lambda,
    )?;
    Ok((rel, tx, gap.w2_tx_y))
}

fn square(cfg: &Config, opts: &RunOptions, art: &mut Artifacts, rec: &mut Record) -> Result<(), CliError> {
    let mut rng = data_rng(cfg);
    let bound = square_bound();
    let mut pools = Vec::new();
    for _ in 0..cfg.data.n_kappa {
        let source = sample_square_source(cfg.data.n0, bound, &mut rng)?.points;
        pools.push(Pool {
            source,
            target: sample_square_target(cfg.data.n0, &mut rng),
            condition: None,
        });
    }
    let data = Dataset::new(pools)?;
    let truth = |x: &[f64], _: Option<&[f64]>| square_exact_map(x).to_vec();
    let out = train_and_log(cfg, opts, art, rec, &data, Some(&truth))?;

    let x = sample_square_source(cfg.data.eval_size, bound, &mut rng)?.points;
    let y = sample_square_target(cfg.data.eval_size, &mut rng);
    let (rel, tx, w2) = held_out(&out.net, &truth, &x, &y, None, cfg.loss.lambda)?;
    rec.put("heldout_rel_l2", rel);
    rec.put("heldout_w2_tx_y", w2);
    art.points("source", &x)?;
    art.points("target", &y)?;
    art.points("pushed", &tx)?;

    let nodes = mesh_nodes();
    let pred = out.net.forward(&nodes)?;
    let exact: Vec<f64> = (0..nodes.rows()).flat_map(|i| square_exact_map(nodes.row(i))).collect();
    let exact = Tensor::matrix(nodes.rows(), 2, exact)?;
    art.write("mesh_pred.tsv", mesh_tsv(&nodes, &pred).as_bytes())?;
    art.write("mesh_truth.tsv", mesh_tsv(&nodes, &exact).as_bytes())
}

fn ellipse_truth(x: &[f64], c: Option<&[f64]>) -> Vec<f64> {
    let k = c.map_or(ELLIPSE_KAPPA, |c| c[0]);
    ellipse_exact_map(x, k)
        .map(|v| v.to_vec())
        .unwrap_or_else(|_| vec![f64::NAN; 2])
}

fn ellipse(cfg: &Config, opts: &RunOptions, art: &mut Artifacts, rec: &mut Record) -> Result<(), CliError> {
    let mut rng = data_rng(cfg);
    let fixed = cfg.data.kappa.unwrap_or(ELLIPSE_KAPPA);
    let draw = |rng: &mut ChaCha8Rng| cfg.data.kappa_range.map(|[lo, hi]| rng.random_range(lo..=hi));
    let mut pools = Vec::new();
    for _ in 0..cfg.data.n_kappa {
        let k = draw(&mut rng);
        let kappa = k.unwrap_or(fixed);
        let source = sample_ellipse_source(cfg.data.n0, &mut rng);
        let target = sample_ellipse_target(kappa, cfg.data.n0, &mut rng);
        pools.push(Pool {
            source,
            target,
            condition: k.map(|k| vec![k]),
        });
    }
    let data = Dataset::new(pools)?;
    let truth = move |x: &[f64], c: Option<&[f64]>| ellipse_truth(x, Some(c.unwrap_or(&[fixed])));
    let out = train_and_log(cfg, opts, art, rec, &data, Some(&truth))?;

    if cfg.conditioned() {
        let mut rels = Vec::new();
        for i in 0..HELD_OUT_CONDITIONS {
            let k = draw(&mut rng).expect("conditioned");
            let x = sample_ellipse_source(cfg.data.eval_size, &mut rng);
            let y = sample_ellipse_target(k, cfg.data.eval_size, &mut rng);
            let (rel, tx, _) = held_out(&out.net, &truth, &x, &y, Some(vec![k]), cfg.loss.lambda)?;
            rec.put(&format!("heldout_kappa_{i}"), k);
            rec.put(&format!("heldout_rel_l2_{i}"), rel);
            rels.push(rel);
            art.points(&format!("pushed_k{i}"), &tx)?;
            art.points(&format!("target_k{i}"), &y)?;
        }
        rec.put("heldout_rel_l2", rels.iter().sum::<f64>() / rels.len() as f64);
    } else {
        let x = sample_ellipse_source(cfg.data.eval_size, &mut rng);
        let y = sample_ellipse_target(fixed, cfg.data.eval_size, &mut rng);
        let (rel, tx, w2) = held_out(&out.net, &truth, &x, &y, None, cfg.loss.lambda)?;
        rec.put("heldout_rel_l2", rel);
        rec.put("heldout_w2_tx_y", w2);
        art.points("source", &x)?;
        art.points("target", &y)?;
        art.points("pushed", &tx)?;
    }
    Ok(())
}

fn disjoint(cfg: &Config, opts: &RunOptions, art: &mut Artifacts, rec: &mut Record) -> Result<(), CliError> {
    let mut rng = data_rng(cfg);
    let fixed = cfg.data.kappa.unwrap_or(DISJOINT_KAPPA);
    let draw = |rng: &mut ChaCha8Rng| cfg.data.kappa_range.map(|[lo, hi]| rng.random_range(lo..=hi));
    let mut pools = Vec::new();
    for _ in 0..cfg.data.n_kappa {
        let k = draw(&mut rng);
        let source = sample_half_circles(k.unwrap_or(fixed), cfg.data.n0, &mut rng)?;
        let target = sample_half_circle_target(cfg.data.n0, &mut rng);
        pools.push(Pool {
            source,
            target,
            condition: k.map(|k| vec![k]),
        });
    }
    let data = Dataset::new(pools)?;
    let out = train_and_log(cfg, opts, art, rec, &data, None)?;
    let ks: Vec<f64> = if cfg.conditioned() {
        (0..HELD_OUT_CONDITIONS)
            .map(|_| draw(&mut rng).expect("conditioned"))
            .collect()
    } else {
        vec![fixed]
    };
    for (i, &k) in ks.iter().enumerate() {
        let x = sample_half_circles(k, cfg.data.eval_size, &mut rng)?;
        let y = sample_half_circle_target(cfg.data.eval_size, &mut rng);
        let c = cfg.conditioned().then(|| vec![k]);
        let tx = push(&out.net, &x, c.as_deref())?;
        let n = x.rows().min(2000);
        let idx: Vec<usize> = (0..n).collect();
        let gap = gap_decomposition_points(
            &tx.gather_rows(&idx),
            &x.gather_rows(&idx),
            &y.gather_rows(&idx),
            cfg.loss.lambda,
        )?;
        let stem = if cfg.conditioned() {
            format!("_k{i}")
        } else {
            String::new()
        };
        rec.put(&format!("heldout_w2_tx_y{stem}"), gap.w2_tx_y);
        art.points(&format!("source{stem}"), &x)?;
        art.points(&format!("pushed{stem}"), &tx)?;
        if i == 0 {
            art.points("target", &y)?;
        }
    }
    Ok(())
}

/// Mean `‖b(a(x)) − x‖²` over the rows of `x`.
fn round_trip_residual(a: &MapNetwork, b: &MapNetwork, x: &Tensor) -> Result<f64, CliError> {
    let back = b.forward(&a.forward(x)?)?;
    let mut s = 0.0;
    for i in 0..x.rows() {
        s += back
            .row(i)
            .iter()
            .zip(x.row(i))
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>();
    }
    Ok(s / x.rows() as f64)
}

fn inverse(cfg: &Config, opts: &RunOptions, art: &mut Artifacts, rec: &mut Record) -> Result<(), CliError> {
    let mut rng = data_rng(cfg);
    let (bx, by) = mixture_bounds();
    let mut pools = Vec::new();
    for _ in 0..cfg.data.n_kappa {
        let source = sample_mixture_source(cfg.data.n0, bx, &mut rng)?.points;
        let target = sample_mixture_target(cfg.data.n0, by, &mut rng)?.points;
        pools.push(Pool {
            source,
            target,
            condition: None,
        });
    }
    let data = Dataset::new(pools)?;
    let tc = trainer_config(cfg, opts, art);
    let out = train_inverse(&tc, &data)?;
    art.metrics(&out.metrics)?;
    let mut cyc = String::from("# step\tloss_fwd\tloss_inv\tres_fwd\tres_inv\n");
    for c in &out.cycles {
        cyc.push_str(&format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\n",
            c.step, c.loss_fwd, c.loss_inv, c.res_fwd, c.res_inv
        ));
    }
    art.write("cycles.tsv", cyc.as_bytes())?;
    art.checkpoint("forward.ckpt", &out.fwd)?;
    art.checkpoint("inverse.ckpt", &out.inv)?;
    rec.time("train_seconds", out.seconds);
    rec.put("lr_halvings", out.lr_halvings as f64);
    rec.put("final_res_fwd", out.final_residuals.0);
    rec.put("final_res_inv", out.final_residuals.1);

    let x = sample_mixture_source(cfg.data.eval_size, bx, &mut rng)?.points;
    let y = sample_mixture_target(cfg.data.eval_size, by, &mut rng)?.points;
    rec.put("heldout_res_fwd", round_trip_residual(&out.fwd, &out.inv, &x)?);
    rec.put("heldout_res_inv", round_trip_residual(&out.inv, &out.fwd, &y)?);
    let (tx, ty) = (out.fwd.forward(&x)?, out.inv.forward(&y)?);
    let n = x.rows().min(2000);
    let idx: Vec<usize> = (0..n).collect();
    let (xs, ys) = (x.gather_rows(&idx), y.gather_rows(&idx));
    let g = gap_decomposition_points(&tx.gather_rows(&idx), &xs, &ys, cfg.loss.lambda)?;
    let h = gap_decomposition_points(&ty.gather_rows(&idx), &ys, &xs, cfg.loss.lambda)?;
    rec.put("heldout_w2_tx_y", g.w2_tx_y);
    rec.put("heldout_w2_inv_y_x", h.w2_tx_y);
    rec.put("heldout_w2_x_y", g.w2_xy);
    art.points("source", &x)?;
    art.points("target", &y)?;
    art.points("pushed_forward", &tx)?;
    art.points("pushed_inverse", &ty)
}

const MARGINAL_BINS: usize = 40;

fn csir(cfg: &Config, opts: &RunOptions, art: &mut Artifacts, rec: &mut Record) -> Result<(), CliError> {
    let c = cfg.csir.as_ref().expect("validated");
    let obs = Observations::synthetic(&CsirParams::truth(c.d), c.noise_seed, c.dt)?;
    let mut rng = data_rng(cfg);
    let ar = ArOptions {
        threads: opts.threads.max(1),
        max_proposals: c.max_proposals,
        ..ArOptions::default()
    };

    // Posterior pools for training.
    let pool_total = cfg.data.n0 * cfg.data.n_kappa;
    let train_ar = posterior_accept_reject(&obs, pool_total, cfg.seed.wrapping_mul(2).wrapping_add(1), ar)?;
    rec.time("ar_training_pool_seconds", train_ar.seconds);
    rec.put("ar_acceptance_rate", train_ar.acceptance_rate());
    let mut pools = Vec::new();
    for r in 0..cfg.data.n_kappa {
        let idx: Vec<usize> = (r * cfg.data.n0..(r + 1) * cfg.data.n0).collect();
        let source = sample_prior(c.d, cfg.data.n0, &mut rng);
        pools.push(Pool {
            source,
            target: train_ar.samples.gather_rows(&idx),
            condition: None,
        });
    }
    let data = Dataset::new(pools)?;
    let out = train_and_log(cfg, opts, art, rec, &data, None)?;

    // Independent reference, doubling as the accept-reject timing baseline.
    let reference = posterior_accept_reject(&obs, c.reference_samples, cfg.seed.wrapping_mul(2).wrapping_add(2), ar)?;
    rec.time("ar_reference_seconds", reference.seconds);
    rec.put("ar_reference_samples", c.reference_samples as f64);

    let prior = sample_prior(c.d, c.inference_samples, &mut rng);
    let t = Instant::now();
    let pushed = out.net.forward(&prior)?;
    let inference = t.elapsed().as_secs_f64();
    rec.time("inference_seconds", inference);
    rec.put("inference_samples", c.inference_samples as f64);
    rec.put("speedup", reference.seconds / inference.max(1e-12));

    let m = c.reference_samples.min(pushed.rows());
    let idx: Vec<usize> = (0..m).collect();
    let (pm, rm) = (pushed.gather_rows(&idx), reference.samples.gather_rows(&idx));
    let mut worst = 0.0f64;
    let mut hist = String::from("# dim\tbin_center\treference\tpushed\n");
    for k in 0..2 * c.d {
        let col = |t: &Tensor| (0..t.rows()).map(|i| t.row(i)[k]).collect::<Vec<f64>>();
        let (p, r) = (col(&pm), col(&rm));
        let w = wasserstein1_sorted(&p, &r);
        let name = if k % 2 == 0 { "beta" } else { "zeta" };
        rec.put(&format!("w1_{name}_{}", k / 2 + 1), w);
        worst = worst.max(w);
        let (hr, hp) = (
            histogram(&r, 0.0, 2.0, MARGINAL_BINS),
            histogram(&col(&pushed), 0.0, 2.0, MARGINAL_BINS),
        );
        let width = 2.0 / MARGINAL_BINS as f64;
        for b in 0..MARGINAL_BINS {
            hist.push_str(&format!(
                "{k}\t{:e}\t{:e}\t{:e}\n",
                (b as f64 + 0.5) * width,
                hr[b],
                hp[b]
            ));
        }
    }
    rec.put("w1_max", worst);
    art.write("marginals.tsv", hist.as_bytes())?;
    art.points("posterior_reference", &reference.samples)?;
    art.points("pushed", &pushed)
}
