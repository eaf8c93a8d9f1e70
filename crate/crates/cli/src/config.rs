//! Experiment configuration files (TOML, one section per module).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dpot::loss::DpotConfig;
use dpot::nn::{ArchKind, ArchSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Experiment ids accepted in the `experiment` key.
pub const EXPERIMENTS: [&str; 6] = ["square", "ellipse", "disjoint", "inverse", "csir", "color-transfer"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub network: NetworkSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csir: Option<CsirSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<ColorSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Samples per pool and side.
    pub n0: usize,
    #[serde(default = "one")]
    pub n_kappa: usize,
    /// Fixed condition for unconditioned runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Admissible set for conditioned runs; each pool draws κ uniformly from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_range: Option<[f64; 2]>,
    /// Source points per pool used for relative-error evaluation.
    #[serde(default = "eval_size")]
    pub eval_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
    pub n_gamma: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub ablation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    #[serde(default = "lr")]
    pub lr: f64,
    /// Defaults to `n_gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_every: Option<usize>,
    #[serde(default = "yes")]
    pub zero_head: bool,
    #[serde(default = "yes")]
    pub checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// `mlp`, `modified-mlp` or `resnet`.
    pub arch: String,
    pub width: usize,
    /// Hidden layers (MLP variants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// Residual blocks and dense layers per block (ResNet).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_layers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsirSection {
    pub d: usize,
    pub noise_seed: u64,
    #[serde(default = "dt")]
    pub dt: f64,
    /// Accept-reject reference samples used for evaluation and timing.
    pub reference_samples: usize,
    /// Prior samples pushed through the trained map for the timing comparison.
    pub inference_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_proposals: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorSection {
    /// PNG or JPEG; a procedural image is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Longest side after downsampling for training.
    #[serde(default = "max_side")]
    pub max_side: u32,
    #[serde(default = "frames")]
    pub frames: Vec<f64>,
}

fn one() -> usize {
    1
}
fn eval_size() -> usize {
    4000
}
fn lr() -> f64 {
    1e-3
}
fn yes() -> bool {
    true
}
fn dt() -> f64 {
    dpot::csir::DEFAULT_DT
}
fn max_side() -> u32 {
    128
}
fn frames() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}

impl Config {
    /// Parses and validates; errors name the offending field path.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Usage(format!("config field `{path}`: {}", e.into_inner().message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| Err(CliError::Usage(format!("config field `{field}`: {msg}")));
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return bad(
                "experiment",
                &format!(
                    "unknown experiment `{}` (expected one of {})",
                    self.experiment,
                    EXPERIMENTS.join(", ")
                ),
            );
        }
        if self.data.n0 < self.loss.batch_size {
            return bad("data.n0", "must be at least loss.batch_size");
        }
        if self.data.n_kappa == 0 {
            return bad("data.n_kappa", "must be at least 1");
        }
        if let Some([lo, hi]) = self.data.kappa_range {
            if !(lo < hi) {
                return bad("data.kappa_range", "needs lo < hi");
            }
            if self.data.kappa.is_some() {
                return bad("data.kappa", "conflicts with data.kappa_range");
            }
        }
        if let Some(k) = self.data.kappa {
            match self.experiment.as_str() {
                "ellipse" if !(-0.5..=0.5).contains(&k) => return bad("data.kappa", "must lie in [-0.5, 0.5]"),
                "disjoint" if k < 0.0 => return bad("data.kappa", "must be non-negative"),
                _ => {}
            }
        }
        if let Err(e) = self.dpot().validate() {
            return bad("loss", &e.to_string());
        }
        if ArchKind::parse(&self.network.arch).is_none() {
            return bad("network.arch", "expected mlp, modified-mlp or resnet");
        }
        if let Err(e) = self.arch().validate() {
            return bad("network", &e.to_string());
        }
        if let Err(e) = self.train_config().validate() {
            return bad("train", &e.to_string());
        }
        match self.experiment.as_str() {
            "csir" => match &self.csir {
                None => return bad("csir", "section required for the csir experiment"),
                Some(c) if !(1..=dpot::csir::MAX_D).contains(&c.d) => return bad("csir.d", "must be 1 to 4"),
                Some(c) if c.reference_samples == 0 => return bad("csir.reference_samples", "must be positive"),
                Some(c) if !(c.dt > 0.0) => return bad("csir.dt", "must be positive"),
                _ => {}
            },
            "color-transfer" => match &self.color {
                None => return bad("color", "section required for color transfer"),
                Some(c) if c.max_side < 2 => return bad("color.max_side", "must be at least 2"),
                Some(c) if c.frames.iter().any(|t| !(0.0..=1.0).contains(t)) => {
                    return bad("color.frames", "values must lie in [0, 1]")
                }
                _ => {}
            },
            _ => {}
        }
        Ok(())
    }

    pub fn conditioned(&self) -> bool {
        self.data.kappa_range.is_some()
    }

    /// Point dimension of the transported samples.
    pub fn point_dim(&self) -> usize {
        match self.experiment.as_str() {
            "csir" => 2 * self.csir.as_ref().map_or(1, |c| c.d),
            "color-transfer" => 3,
            _ => 2,
        }
    }

    pub fn arch(&self) -> ArchSpec {
        let n = &self.network;
        let d = self.point_dim();
        let d_in = d + usize::from(self.conditioned());
        match ArchKind::parse(&n.arch) {
            Some(ArchKind::Mlp) => ArchSpec::mlp(d_in, d, n.width, n.depth.unwrap_or(3)),
            Some(ArchKind::ModifiedMlp) => ArchSpec::modified_mlp(d_in, d, n.width, n.depth.unwrap_or(3)),
            _ => ArchSpec::resnet(d_in, d, n.width, n.blocks.unwrap_or(3), n.block_layers.unwrap_or(1)),
        }
    }

    pub fn dpot(&self) -> DpotConfig {
        DpotConfig {
            lambda: self.loss.lambda,
            n_gamma: self.loss.n_gamma,
            n_kappa: self.data.n_kappa,
            batch_size: self.loss.batch_size,
            ablation: self.loss.ablation,
        }
    }

    /// Trainer settings; checkpoint directory and thread count are set by the caller.
    pub fn train_config(&self) -> dpot::trainer::TrainConfig {
        let mut t = dpot::trainer::TrainConfig::new(&self.experiment, self.dpot(), self.arch(), self.train.steps);
        t.seed = self.seed;
        t.lr = self.train.lr;
        t.diag_every = self.train.diag_every.unwrap_or(self.loss.n_gamma);
        t.eval_size = self.data.eval_size;
        t.zero_head = self.train.zero_head;
        t
    }

    /// Resolved parameters as aligned `key  value` lines.
    pub fn parameter_table(&self) -> String {
        let a = self.arch();
        let l = self.dpot();
        let t = self.train_config();
        let mut rows: Vec<(String, String)> = vec![
            ("experiment".into(), self.experiment.clone()),
            ("seed".into(), self.seed.to_string()),
            ("data.n0".into(), self.data.n0.to_string()),
            ("data.n_kappa".into(), l.n_kappa.to_string()),
        ];
        if let Some(k) = self.data.kappa {
            rows.push(("data.kappa".into(), k.to_string()));
        }
        if let Some([lo, hi]) = self.data.kappa_range {
            rows.push(("data.kappa_range".into(), format!("[{lo}, {hi}]")));
        }
        rows.extend([
            ("loss.lambda".into(), l.lambda.to_string()),
            ("loss.n_gamma".into(), l.n_gamma.to_string()),
            ("loss.batch_size".into(), l.batch_size.to_string()),
            ("loss.ablation".into(), l.ablation.to_string()),
            ("train.steps".into(), t.steps.to_string()),
            ("train.lr".into(), t.lr.to_string()),
            ("train.diag_every".into(), t.diag_every.to_string()),
            ("train.zero_head".into(), t.zero_head.to_string()),
            ("network.arch".into(), a.kind.name().to_string()),
            ("network.d_in".into(), a.d_in.to_string()),
            ("network.d_out".into(), a.d_out.to_string()),
            ("network.width".into(), a.width.to_string()),
            ("network.parameters".into(), a.param_count().to_string()),
        ]);
        if let Some(c) = &self.csir {
            rows.extend([
                ("csir.d".into(), c.d.to_string()),
                ("csir.noise_seed".into(), c.noise_seed.to_string()),
                ("csir.dt".into(), c.dt.to_string()),
                ("csir.reference_samples".into(), c.reference_samples.to_string()),
                ("csir.inference_samples".into(), c.inference_samples.to_string()),
            ]);
        }
        if let Some(c) = &self.color {
            let show = |p: &Option<PathBuf>| {
                p.as_ref()
                    .map_or("(procedural)".to_string(), |p| p.display().to_string())
            };
            rows.extend([
                ("color.source".into(), show(&c.source)),
                ("color.target".into(), show(&c.target)),
                ("color.max_side".into(), c.max_side.to_string()),
                ("color.frames".into(), format!("{:?}", c.frames)),
            ]);
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v}");
        }
        out
    }
}
