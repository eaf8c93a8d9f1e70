//! Benchmark distributions with known optimal maps, plus accept-reject
//! sampling and point-cloud dumps.

use std::f64::consts::PI;
use std::io::{BufRead, Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("point {point:?} lies outside the domain")]
    Domain { point: Vec<f64> },
    #[error("density {value} exceeds the bound {bound} at {point:?}")]
    BoundViolation { point: Vec<f64>, value: f64, bound: f64 },
    #[error("invalid sampler input: {0}")]
    Input(String),
    #[error("singular matrix for kappa = {0}")]
    Singular(f64),
    #[error("point cloud file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, BenchError>;

/// Half-width of the square domain `(−¼, ¼)²`.
pub const SQUARE_HALF: f64 = 0.25;

/// Radius of the target disk in the half-circle benchmark.
pub const DISK_RADIUS: f64 = 0.85;

/// Safety factor applied to grid-scanned density maxima.
pub const BOUND_SAFETY: f64 = 1.05;

/// `q(z)` and its first two derivatives.
///
/// `q(z) = A(z)·cos(8πz) + B·z·sin(8πz)` with
/// `A(z) = −z²/(8π) + 1/(256π³) + 1/(32π)` and `B = 1/(32π²)`.
pub fn q_eval(z: f64) -> (f64, f64, f64) {
    let w = 8.0 * PI;
    let a = -z * z / (8.0 * PI) + 1.0 / (256.0 * PI.powi(3)) + 1.0 / (32.0 * PI);
    let da = -z / (4.0 * PI);
    let dda = -1.0 / (4.0 * PI);
    let b = 1.0 / (32.0 * PI * PI);
    let (s, c) = (w * z).sin_cos();
    let q = a * c + b * z * s;
    let dq = (da + w * b * z) * c + (b - w * a) * s;
    let ddq = (dda - w * w * a + 2.0 * w * b) * c + (-2.0 * w * da - w * w * b * z) * s;
    (q, dq, ddq)
}

fn in_square(x: &[f64]) -> bool {
    x.len() == 2 && x.iter().all(|v| v.abs() <= SQUARE_HALF)
}

/// Source density of the square benchmark. Defined on the closed square.
pub fn square_density(x: &[f64]) -> Result<f64> {
    if !in_square(x) {
        return Err(BenchError::Domain { point: x.to_vec() });
    }
    let (q1, d1, dd1) = q_eval(x[0]);
    let (q2, d2, dd2) = q_eval(x[1]);
    Ok(1.0 + 4.0 * (dd1 * q2 + q1 * dd2) + 16.0 * (q1 * q2 * dd1 * dd2 - d1 * d1 * d2 * d2))
}

/// Optimal map of the square benchmark.
pub fn square_exact_map(x: &[f64]) -> [f64; 2] {
    let (q1, d1, _) = q_eval(x[0]);
    let (q2, d2, _) = q_eval(x[1]);
    [x[0] + 4.0 * d1 * q2, x[1] + 4.0 * q1 * d2]
}

/// Maximum of `f` over an `n × n` grid spanning `[lo, hi]²`, endpoints included.
pub fn grid_max(f: impl Fn(&[f64]) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let step = (hi - lo) / (n - 1) as f64;
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            best = best.max(f(&[lo + i as f64 * step, lo + j as f64 * step]));
        }
    }
    best
}

/// Accept-reject bound for [`square_density`].
pub fn square_bound() -> f64 {
    grid_max(
        |x| square_density(x).expect("grid inside square"),
        -SQUARE_HALF,
        SQUARE_HALF,
        401,
    ) * BOUND_SAFETY
}

/// Accept-reject output.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub points: Tensor,
    pub proposals: u64,
}

impl Sampled {
    pub fn acceptance_rate(&self) -> f64 {
        self.points.rows() as f64 / self.proposals as f64
    }
}

/// Draws `n` points with density proportional to `density` on the box
/// `[lo, hi]`, proposing uniformly and accepting with probability
/// `density / bound`.
pub fn accept_reject<R: Rng + ?Sized>(
    density: impl Fn(&[f64]) -> f64,
    lo: &[f64],
    hi: &[f64],
    bound: f64,
    n: usize,
    rng: &mut R,
) -> Result<Sampled> {
    if lo.len() != hi.len() || lo.is_empty() {
        return Err(BenchError::Input("box corners must have equal, positive length".into()));
    }
    if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(BenchError::Input("empty proposal box".into()));
    }
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(BenchError::Input(format!("bound {bound} must be positive")));
    }
    let d = lo.len();
    let mut data = Vec::with_capacity(n * d);
    let mut p = vec![0.0; d];
    let mut proposals = 0u64;
    while data.len() < n * d {
        for k in 0..d {
            p[k] = rng.random_range(lo[k]..hi[k]);
        }
        let u: f64 = rng.random();
        proposals += 1;
        let v = density(&p);
        if v > bound {
            return Err(BenchError::BoundViolation {
                point: p,
                value: v,
                bound,
            });
        }
        if u * bound < v {
            data.extend_from_slice(&p);
        }
    }
    Ok(Sampled {
        points: Tensor::matrix(n, d, data).expect("sample shape"),
        proposals,
    })
}

pub fn sample_square_source<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Result<Sampled> {
    accept_reject(
        |x| square_density(x).expect("proposal inside square"),
        &[-SQUARE_HALF; 2],
        &[SQUARE_HALF; 2],
        bound,
        n,
        rng,
    )
}

pub fn sample_uniform_box<R: Rng + ?Sized>(lo: &[f64], hi: &[f64], n: usize, rng: &mut R) -> Tensor {
    let d = lo.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for k in 0..d {
            data.push(rng.random_range(lo[k]..hi[k]));
        }
    }
    Tensor::matrix(n, d, data).expect("sample shape")
}

pub fn sample_square_target<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    sample_uniform_box(&[-SQUARE_HALF; 2], &[SQUARE_HALF; 2], n, rng)
}

/// Uniform samples on the disk of the given radius, by `r = R·√U`.
pub fn sample_disk<R: Rng + ?Sized>(radius: f64, n: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let r = radius * rng.random::<f64>().sqrt();
        let (s, c) = (2.0 * PI * rng.random::<f64>()).sin_cos();
        data.push(r * c);
        data.push(r * s);
    }
    Tensor::matrix(n, 2, data).expect("sample shape")
}

pub type Mat2 = [[f64; 2]; 2];

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn mat_inv(a: &Mat2) -> Option<Mat2> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 1e-12 {
        return None;
    }
    Some([[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]])
}

fn mat_vec(a: &Mat2, x: &[f64]) -> [f64; 2] {
    [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
}

fn rotation(a: f64) -> Mat2 {
    let (s, c) = a.sin_cos();
    [[c, -s], [s, c]]
}

/// Source shape matrix of the ellipse benchmark.
pub const ELLIPSE_MX: Mat2 = [[0.8, 0.0], [0.0, 0.4]];

/// Target shape matrix `M_y(κ)`.
pub fn ellipse_my(kappa: f64) -> Mat2 {
    [[0.6, kappa], [kappa, 0.8]]
}

/// Rotation angle `a` with `tan a = Tr(M_x⁻¹M_y⁻¹J) / Tr(M_x⁻¹M_y⁻¹)`,
/// shifted by π when needed so the resulting map is positive definite.
pub fn ellipse_angle(kappa: f64) -> Result<f64> {
    let mx_inv = mat_inv(&ELLIPSE_MX).expect("M_x invertible");
    let my_inv = mat_inv(&ellipse_my(kappa)).ok_or(BenchError::Singular(kappa))?;
    let p = mat_mul(&mx_inv, &my_inv);
    let pj = mat_mul(&p, &[[0.0, -1.0], [1.0, 0.0]]);
    let a = (pj[0][0] + pj[1][1]).atan2(p[0][0] + p[1][1]);
    let m = map_from_angle(kappa, a);
    let tr = m[0][0] + m[1][1];
    Ok(if tr > 0.0 { a } else { a + PI })
}

fn map_from_angle(kappa: f64, a: f64) -> Mat2 {
    let mx_inv = mat_inv(&ELLIPSE_MX).expect("M_x invertible");
    mat_mul(&mat_mul(&ellipse_my(kappa), &rotation(a)), &mx_inv)
}

/// The optimal linear map `M_y(κ)·R_a·M_x⁻¹`.
pub fn ellipse_map_matrix(kappa: f64) -> Result<Mat2> {
    Ok(map_from_angle(kappa, ellipse_angle(kappa)?))
}

pub fn ellipse_exact_map(x: &[f64], kappa: f64) -> Result<[f64; 2]> {
    Ok(mat_vec(&ellipse_map_matrix(kappa)?, x))
}

fn transform_disk(m: &Mat2, disk: Tensor) -> Tensor {
    let n = disk.rows();
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        data.extend(mat_vec(m, disk.row(i)));
    }
    Tensor::matrix(n, 2, data).expect("sample shape")
}

pub fn sample_ellipse_source<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    transform_disk(&ELLIPSE_MX, sample_disk(1.0, n, rng))
}

pub fn sample_ellipse_target<R: Rng + ?Sized>(kappa: f64, n: usize, rng: &mut R) -> Tensor {
    transform_disk(&ellipse_my(kappa), sample_disk(1.0, n, rng))
}

/// Uniform disk of radius [`DISK_RADIUS`] split at `x₁ = 0`, halves moved
/// apart by `κ/2` each.
pub fn sample_half_circles<R: Rng + ?Sized>(kappa: f64, n: usize, rng: &mut R) -> Result<Tensor> {
    if !(kappa >= 0.0) {
        return Err(BenchError::Input(format!("kappa {kappa} must be non-negative")));
    }
    let mut t = sample_disk(DISK_RADIUS, n, rng);
    for row in t.data_mut().chunks_mut(2) {
        row[0] += if row[0] < 0.0 { -kappa / 2.0 } else { kappa / 2.0 };
    }
    Ok(t)
}

pub fn sample_half_circle_target<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    sample_disk(DISK_RADIUS, n, rng)
}

/// Whether `p` lies in one of the two shifted half-disks.
pub fn in_shifted_half_disks(p: &[f64], kappa: f64) -> bool {
    let h = kappa / 2.0;
    let r2 = DISK_RADIUS * DISK_RADIUS;
    let left = p[0] < -h && (p[0] + h).powi(2) + p[1] * p[1] <= r2;
    let right = p[0] >= h && (p[0] - h).powi(2) + p[1] * p[1] <= r2;
    left || right
}

const BUMP_VAR: f64 = 0.04;

fn bump(dx: f64, dy: f64) -> f64 {
    (-0.5 * (dx * dx + dy * dy) / BUMP_VAR).exp() / BUMP_VAR
}

/// Unnormalised source density of the mixture benchmark on `[−1, 1]²`:
/// offset 2 plus a bump at each corner.
pub fn mixture_source_density(x: &[f64]) -> f64 {
    // Folding onto the first quadrant makes the reflection symmetry exact.
    let (a, b) = (x[0].abs(), x[1].abs());
    2.0 + bump(a - 1.0, b - 1.0) + bump(a + 1.0, b - 1.0) + bump(a - 1.0, b + 1.0) + bump(a + 1.0, b + 1.0)
}

/// Unnormalised target density of the mixture benchmark: offset 2 plus one
/// centred bump.
pub fn mixture_target_density(y: &[f64]) -> f64 {
    2.0 + bump(y[0], y[1])
}

pub fn mixture_bounds() -> (f64, f64) {
    (
        grid_max(mixture_source_density, -1.0, 1.0, 201) * BOUND_SAFETY,
        grid_max(mixture_target_density, -1.0, 1.0, 201) * BOUND_SAFETY,
    )
}

pub fn sample_mixture_source<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Result<Sampled> {
    accept_reject(mixture_source_density, &[-1.0; 2], &[1.0; 2], bound, n, rng)
}

pub fn sample_mixture_target<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Result<Sampled> {
    accept_reject(mixture_target_density, &[-1.0; 2], &[1.0; 2], bound, n, rng)
}

/// Binary point cloud: `count` and `dim` as little-endian `u64`, then the
/// row-major coordinates as little-endian `f64`.
pub fn write_points_binary<W: Write>(points: &Tensor, mut w: W) -> Result<()> {
    w.write_all(&(points.rows() as u64).to_le_bytes())?;
    w.write_all(&(points.cols() as u64).to_le_bytes())?;
    for v in points.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_binary<R: Read>(mut r: R) -> Result<Tensor> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let n = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let d = u64::from_le_bytes(word) as usize;
    let len = n
        .checked_mul(d)
        .ok_or_else(|| BenchError::Format("header overflow".into()))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Tensor::matrix(n, d, data).map_err(|e| BenchError::Format(e.to_string()))
}

/// Tab-separated text, one point per line.
pub fn write_points_text<W: Write>(points: &Tensor, mut w: W) -> Result<()> {
    for i in 0..points.rows() {
        let line: Vec<String> = points.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join("\t"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_text<R: BufRead>(r: R) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split('\t')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| BenchError::Format(format!("line {}: {e}", rows + 1)))?;
        match dim {
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(BenchError::Format(format!(
                    "line {} has {} columns, expected {d}",
                    rows + 1,
                    vals.len()
                )))
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::matrix(rows, dim.unwrap_or(0), data).map_err(|e| BenchError::Format(e.to_string()))
}
