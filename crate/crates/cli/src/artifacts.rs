//! Output directory bookkeeping, plot-data files and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dpot::bench::{write_points_binary, write_points_text, SQUARE_HALF};
use dpot::nn::MapNetwork;
use dpot::tensor::Tensor;
use dpot::trainer::{write_metrics_csv, MetricsRow};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Side of the Cartesian mesh pushed through the map.
pub const MESH_SIDE: usize = 15;

/// Files written under one run directory, in creation order.
#[derive(Debug)]
pub struct Artifacts {
    root: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Records a file written by someone else; it must exist.
    pub fn register(&mut self, path: &Path) -> Result<(), CliError> {
        let rel = path
            .strip_prefix(&self.root)
            .map_err(|_| CliError::Io(format!("{} is outside the run directory", path.display())))?;
        if !path.is_file() {
            return Err(CliError::Io(format!("{} was not written", path.display())));
        }
        let rel = rel.to_string_lossy().replace('\\', "/");
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        self.register(&p)
    }

    /// `stem.bin` and `stem.tsv`.
    pub fn points(&mut self, stem: &str, points: &Tensor) -> Result<(), CliError> {
        let mut bin = Vec::new();
        write_points_binary(points, &mut bin)?;
        self.write(&format!("{stem}.bin"), &bin)?;
        let mut txt = Vec::new();
        write_points_text(points, &mut txt)?;
        self.write(&format!("{stem}.tsv"), &txt)
    }

    pub fn metrics(&mut self, rows: &[MetricsRow]) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write_metrics_csv(rows, &mut buf)?;
        self.write("metrics.csv", &buf)?;
        for (name, text) in emit_plot_data(rows) {
            self.write(name, text.as_bytes())?;
        }
        Ok(())
    }

    pub fn checkpoint(&mut self, rel: &str, net: &MapNetwork) -> Result<(), CliError> {
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf)?;
        self.write(rel, &buf)
    }
}

/// `eps.tsv` (one row per diagnostic step) and `rel_error.tsv`.
pub fn emit_plot_data(rows: &[MetricsRow]) -> Vec<(&'static str, String)> {
    let mut eps = String::from("# step\teps1\teps2\teps3\teps_total\n");
    let mut rel = String::from("# step\trel_l2\n");
    for r in rows {
        if let Some([a, b, c, t]) = r.eps {
            let _ = writeln!(eps, "{}\t{a:e}\t{b:e}\t{c:e}\t{t:e}", r.step);
        }
        if let Some(v) = r.rel_l2 {
            let _ = writeln!(rel, "{}\t{v:e}", r.step);
        }
    }
    vec![("eps.tsv", eps), ("rel_error.tsv", rel)]
}

/// Nodes of the `15 × 15` Cartesian mesh on the closed square domain.
pub fn mesh_nodes() -> Tensor {
    let step = 2.0 * SQUARE_HALF / (MESH_SIDE - 1) as f64;
    let mut data = Vec::with_capacity(2 * MESH_SIDE * MESH_SIDE);
    for i in 0..MESH_SIDE {
        for j in 0..MESH_SIDE {
            data.push(-SQUARE_HALF + step * i as f64);
            data.push(-SQUARE_HALF + step * j as f64);
        }
    }
    Tensor::matrix(MESH_SIDE * MESH_SIDE, 2, data).expect("mesh shape")
}

/// Rows `x1 x2 y1 y2` pairing mesh nodes with their images.
pub fn mesh_tsv(nodes: &Tensor, images: &Tensor) -> String {
    let mut s = String::from("# x1\tx2\ty1\ty2\n");
    for i in 0..nodes.rows() {
        let (x, y) = (nodes.row(i), images.row(i));
        let _ = writeln!(s, "{:e}\t{:e}\t{:e}\t{:e}", x[0], x[1], y[0], y[1]);
    }
    s
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of the resolved configuration and the bytes of any input files.
pub fn input_hash(config_toml: &str, inputs: &[PathBuf]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(config_toml.as_bytes());
    for p in inputs {
        let bytes = std::fs::read(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Written last, as `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub seed: u64,
    pub threads: usize,
    pub input_hash: String,
    pub output_dir: String,
    pub timing: BTreeMap<String, f64>,
    pub summary: BTreeMap<String, f64>,
    pub config: toml::Value,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    /// Hashes every registered file and writes the manifest next to them.
    pub fn finish(
        art: &Artifacts,
        config: &crate::config::Config,
        threads: usize,
        input_hash: String,
        timing: BTreeMap<String, f64>,
        summary: BTreeMap<String, f64>,
    ) -> Result<Self, CliError> {
        let mut files = Vec::new();
        for rel in art.files() {
            let p = art.path(rel);
            let bytes = std::fs::read(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            files.push(FileEntry {
                path: rel.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        let m = RunManifest {
            experiment: config.experiment.clone(),
            seed: config.seed,
            threads,
            input_hash,
            output_dir: art.root().display().to_string(),
            timing,
            // TOML has no NaN-free guarantee; drop non-finite summary values.
            summary: summary.into_iter().filter(|(_, v)| v.is_finite()).collect(),
            config: toml::Value::try_from(config).map_err(|e| CliError::Io(e.to_string()))?,
            files,
        };
        let text = toml::to_string(&m).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(art.path("manifest.toml"), text)?;
        Ok(m)
    }
}
