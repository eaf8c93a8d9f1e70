//! Color transfer between two images, treating pixels as RGB point clouds.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use dpot::nn::MapNetwork;
use dpot::tensor::Tensor;
use dpot::trainer::{train_inverse, Dataset, Pool};
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::Artifacts;
use crate::config::Config;
use crate::CliError;

/// Round-trip tolerance in RGB units.
pub const ROUND_TRIP_TOL: f64 = 0.1;
/// Pixels sampled for the round-trip statistic.
pub const ROUND_TRIP_SAMPLES: usize = 5000;
/// Clamp fraction above which a warning is printed.
pub const CLAMP_WARN: f64 = 0.01;

/// RGB image with channels in `[0, 1]`, row-major, 3 values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, CliError> {
        if width == 0 || height == 0 {
            return Err(CliError::Input("image has zero size".into()));
        }
        if data.len() != 3 * width as usize * height as usize {
            return Err(CliError::Input(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CliError::Input("channel values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self {
            width: img.width(),
            height: img.height(),
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let img = image::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width, self.height, raw).expect("buffer matches dimensions")
    }

    pub fn png_bytes(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, ImageFormat::Png)
            .expect("PNG encoding to memory");
        buf.into_inner()
    }

    /// Downsamples so the longer side is at most `max_side`; never upsamples.
    pub fn downsample(&self, max_side: u32) -> Self {
        let long = self.width.max(self.height);
        if long <= max_side {
            return self.clone();
        }
        let scale = f64::from(max_side) / f64::from(long);
        let w = ((f64::from(self.width) * scale).round() as u32).max(1);
        let h = ((f64::from(self.height) * scale).round() as u32).max(1);
        Self::from_rgb8(&image::imageops::resize(&self.to_rgb8(), w, h, FilterType::Triangle))
    }

    /// Pixels as an `n × 3` point cloud.
    pub fn pixels(&self) -> Tensor {
        Tensor::matrix(self.pixel_count(), 3, self.data.clone()).expect("pixel shape")
    }

    /// Image from mapped pixels, clamped to `[0, 1]`, with the number of
    /// pixels that needed clamping.
    pub fn from_pixels(width: u32, height: u32, pixels: &Tensor) -> Result<(Self, usize), CliError> {
        if pixels.rows() != width as usize * height as usize || pixels.cols() != 3 {
            return Err(CliError::Input("pixel cloud does not match the image size".into()));
        }
        let mut clamped = 0;
        let mut data = Vec::with_capacity(3 * pixels.rows());
        for i in 0..pixels.rows() {
            let p = pixels.row(i);
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                clamped += 1;
            }
            data.extend(p.iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
        }
        Ok((Self { width, height, data }, clamped))
    }
}

/// Procedural test images: a warm sunset gradient and a cool striped scene.
pub fn synthesize(kind: &str, width: u32, height: u32) -> ImageTensor {
    let mut data = Vec::with_capacity(3 * width as usize * height as usize);
    for j in 0..height {
        for i in 0..width {
            let u = f64::from(i) / f64::from(width.max(2) - 1);
            let v = f64::from(j) / f64::from(height.max(2) - 1);
            let rgb = if kind == "target" {
                let stripe = 0.5 + 0.5 * (12.0 * u + 3.0 * v).sin();
                [
                    0.1 + 0.3 * v * stripe,
                    0.35 + 0.35 * u,
                    0.45 + 0.45 * (1.0 - v) * (0.6 + 0.4 * stripe),
                ]
            } else {
                let sun = (-((u - 0.7).powi(2) + (v - 0.35).powi(2)) / 0.02).exp();
                [
                    0.55 + 0.4 * (1.0 - v) + 0.05 * sun,
                    0.25 + 0.3 * u * (1.0 - v) + 0.4 * sun,
                    0.15 + 0.35 * v * v,
                ]
            };
            data.extend(rgb.iter().map(|c| c.clamp(0.0, 1.0)));
        }
    }
    ImageTensor { width, height, data }
}

/// `(1 − t)·x + t·T(x)`, unclamped.
pub fn interpolate(x: &Tensor, tx: &Tensor, t: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(tx.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::matrix(x.rows(), x.cols(), data).expect("same shape")
}

/// Fraction of rows with `‖b(a(p)) − p‖ < tol`.
pub fn round_trip_fraction(a: &MapNetwork, b: &MapNetwork, p: &Tensor, tol: f64) -> Result<f64, CliError> {
    let back = b.forward(&a.forward(p)?)?;
    let ok = (0..p.rows())
        .filter(|&i| {
            back.row(i)
                .iter()
                .zip(p.row(i))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
                < tol
        })
        .count();
    Ok(ok as f64 / p.rows() as f64)
}

fn mean_displacement(x: &Tensor, tx: &Tensor) -> f64 {
    let s: f64 = (0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(tx.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    s / x.rows() as f64
}

fn subset(t: &Tensor, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    if t.rows() <= n {
        return t.clone();
    }
    let mut idx = sample(rng, t.rows(), n).into_vec();
    idx.sort_unstable();
    t.gather_rows(&idx)
}

type Maps = (BTreeMap<String, f64>, BTreeMap<String, f64>);

/// Trains forward and inverse maps on downsampled pixels, applies them at
/// full resolution and writes transfers, frames and diagnostics.
pub fn run(cfg: &Config, threads: usize, art: &mut Artifacts) -> Result<Maps, CliError> {
    let c = cfg.color.as_ref().expect("validated");
    let load = |p: &Option<std::path::PathBuf>, kind: &str, w: u32, h: u32| match p {
        Some(p) => ImageTensor::load(p),
        None => Ok(synthesize(kind, w, h)),
    };
    let src = load(&c.source, "source", 192, 192)?;
    let tgt = load(&c.target, "target", 160, 160)?;
    let (src_small, tgt_small) = (src.downsample(c.max_side), tgt.downsample(c.max_side));
    let (mut summary, mut timing) = (BTreeMap::new(), BTreeMap::new());
    summary.insert("train_pixels_source".into(), src_small.pixel_count() as f64);
    summary.insert("train_pixels_target".into(), tgt_small.pixel_count() as f64);

    let pools = (0..cfg.data.n_kappa).map(|_| Pool {
        source: src_small.pixels(),
        target: tgt_small.pixels(),
        condition: None,
    });
    let data = Dataset::new(pools.collect())?;
    let mut tc = cfg.train_config();
    tc.threads = threads.max(1);
    let out = train_inverse(&tc, &data)?;
    timing.insert("train_seconds".into(), out.seconds);
    summary.insert("final_res_fwd".into(), out.final_residuals.0);
    summary.insert("final_res_inv".into(), out.final_residuals.1);
    art.metrics(&out.metrics)?;
    art.checkpoint("forward.ckpt", &out.fwd)?;
    art.checkpoint("inverse.ckpt", &out.inv)?;

    let (x, y) = (src.pixels(), tgt.pixels());
    let tx = out.fwd.forward(&x)?;
    let ty = out.inv.forward(&y)?;
    let (fwd_img, fwd_clamped) = ImageTensor::from_pixels(src.width, src.height, &tx)?;
    let (inv_img, inv_clamped) = ImageTensor::from_pixels(tgt.width, tgt.height, &ty)?;
    let clamp_rate = fwd_clamped as f64 / src.pixel_count() as f64;
    let clamp_rate_inv = inv_clamped as f64 / tgt.pixel_count() as f64;
    for (name, rate) in [("forward", clamp_rate), ("inverse", clamp_rate_inv)] {
        if rate > CLAMP_WARN {
            eprintln!(
                "warning: {name} transfer clamped {:.2}% of pixels to [0, 1]",
                100.0 * rate
            );
        }
    }
    summary.insert("clamp_rate".into(), clamp_rate);
    summary.insert("clamp_rate_inverse".into(), clamp_rate_inv);
    summary.insert("mean_displacement".into(), mean_displacement(&x, &tx));
    art.write("source.png", &src.png_bytes())?;
    art.write("target.png", &tgt.png_bytes())?;
    let fwd_png = fwd_img.png_bytes();
    art.write("source_with_target_palette.png", &fwd_png)?;
    art.write("target_with_source_palette.png", &inv_img.png_bytes())?;

    let mut ts = vec![0.0];
    ts.extend(c.frames.iter().copied().filter(|&t| t != 0.0));
    for &t in &ts {
        let f = interpolate(&x, &tx, t);
        let (img, _) = ImageTensor::from_pixels(src.width, src.height, &f)?;
        let png = img.png_bytes();
        if t == 0.0 {
            summary.insert("frame_t0_exact".into(), f64::from(u8::from(f.data() == x.data())));
        }
        if t == 1.0 {
            let exact = f.data() == tx.data() && png == fwd_png;
            summary.insert("frame_t1_exact".into(), f64::from(u8::from(exact)));
        }
        art.write(&format!("frames/frame_t{t:.2}.png"), &png)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let ps = subset(&src_small.pixels(), ROUND_TRIP_SAMPLES, &mut rng);
    let qs = subset(&tgt_small.pixels(), ROUND_TRIP_SAMPLES, &mut rng);
    summary.insert(
        "round_trip_fraction".into(),
        round_trip_fraction(&out.fwd, &out.inv, &ps, ROUND_TRIP_TOL)?,
    );
    summary.insert(
        "round_trip_fraction_inverse".into(),
        round_trip_fraction(&out.inv, &out.fwd, &qs, ROUND_TRIP_TOL)?,
    );
    art.points("rgb_source", &ps)?;
    art.points("rgb_target", &qs)?;
    art.points("rgb_pushed", &out.fwd.forward(&ps)?)?;
    Ok((summary, timing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_tensor_invariants() {
        assert!(ImageTensor::new(0, 2, vec![]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn rgb8_round_trip_and_png() {
        let img = synthesize("source", 20, 10);
        let back = ImageTensor::from_rgb8(&img.to_rgb8());
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        let png = img.png_bytes();
        let decoded = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(decoded, img.to_rgb8());
    }

    #[test]
    fn downsample_caps_the_long_side() {
        let img = synthesize("target", 300, 150);
        let s = img.downsample(128);
        assert_eq!((s.width(), s.height()), (128, 64));
        assert_eq!(synthesize("target", 50, 40).downsample(128).width(), 50);
    }

    #[test]
    fn clamping_is_counted() {
        let p = Tensor::matrix(2, 3, vec![0.5, 0.5, 0.5, 1.2, -0.1, 0.3]).unwrap();
        let (img, n) = ImageTensor::from_pixels(2, 1, &p).unwrap();
        assert_eq!(n, 1);
        assert_eq!(img.pixels().row(1), &[1.0, 0.0, 0.3]);
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let x = synthesize("source", 8, 8).pixels();
        let tx = Tensor::matrix(64, 3, x.data().iter().map(|v| 1.3 * v - 0.2).collect()).unwrap();
        assert_eq!(interpolate(&x, &tx, 0.0), x);
        assert_eq!(interpolate(&x, &tx, 1.0), tx);
    }

    #[test]
    fn undecodable_image_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(ImageTensor::load(&p), Err(CliError::Input(_))));
    }
}
