//! Synthetic datasets, standardized per coordinate.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::DataBatch;
use crate::error::{Error, Result};
use crate::harness::config::{DatasetKind, DatasetSpec};
use crate::rng::StreamRng;

/// Mode centres of the ring mixture.
pub fn ring_centers(modes: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..modes)
        .map(|m| {
            let a = 2.0 * PI * m as f64 / modes as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Raw ring-mixture samples and the mode each came from.
pub fn gauss_mix<R: Rng + ?Sized>(
    n: usize,
    modes: usize,
    radius: f64,
    std: f64,
    rng: &mut R,
) -> (Array2<f64>, Vec<usize>) {
    let centers = ring_centers(modes, radius);
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let m = rng.random_range(0..modes);
        for j in 0..2 {
            let z: f64 = StandardNormal.sample(rng);
            x[[i, j]] = centers[m][j] + std * z;
        }
        labels.push(m);
    }
    (x, labels)
}

fn swiss_roll<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Array2<f64> {
    let mut x = Array2::zeros((n, 2));
    for i in 0..n {
        let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
        let (z0, z1): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        x[[i, 0]] = t * t.cos() + noise * z0;
        x[[i, 1]] = t * t.sin() + noise * z1;
    }
    x
}

/// Uniform on the dark squares of a 4×4 board over [−2, 2)².
fn checkerboard<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut x = Array2::zeros((n, 2));
    for i in 0..n {
        let x1 = rng.random::<f64>() * 4.0 - 2.0;
        let x2 = rng.random::<f64>() - rng.random_range(0..2) as f64 * 2.0;
        x[[i, 0]] = x1;
        x[[i, 1]] = x2 + x1.floor().rem_euclid(2.0);
    }
    x
}

/// Square images of one bright bar (a random row or column) on a dark
/// background, with pixel noise.
fn tiny_images<R: Rng + ?Sized>(n: usize, side: usize, noise: f64, rng: &mut R) -> Array2<f64> {
    let mut x = Array2::zeros((n, side * side));
    for i in 0..n {
        let horizontal = rng.random::<bool>();
        let line = rng.random_range(0..side);
        for r in 0..side {
            for c in 0..side {
                let on = if horizontal { r == line } else { c == line };
                let z: f64 = StandardNormal.sample(rng);
                x[[i, r * side + c]] = if on { 1.0 } else { 0.0 } + noise * z;
            }
        }
    }
    x
}

/// Unstandardized samples of the configured kind.
pub fn raw_samples(spec: &DatasetSpec, n: usize, rng: &mut StreamRng) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    Ok(match spec.kind {
        DatasetKind::GaussMix => gauss_mix(n, spec.modes, spec.radius, spec.std, rng).0,
        DatasetKind::SwissRoll => swiss_roll(n, spec.std, rng),
        DatasetKind::Checkerboard => checkerboard(n, rng),
        DatasetKind::TinyImages => tiny_images(n, spec.image_side, spec.std, rng),
    })
}

/// Per-coordinate affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on `x`; constant coordinates keep scale 1.
    pub fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty data").to_vec();
        let std = x
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 0.0 && s.is_finite() { s } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, mut x: Array2<f64>) -> Array2<f64> {
        for mut row in x.outer_iter_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        x
    }
}

/// `n` standardized samples from a deterministic stream.
pub fn make_dataset(spec: &DatasetSpec, n: usize, seed: u64) -> Result<DataBatch> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Dataset);
    let raw = raw_samples(spec, n, &mut rng)?;
    let st = Standardizer::fit(&raw);
    DataBatch::new(st.apply(raw))
}

/// Training set plus a held-out set mapped with the training statistics.
pub fn make_split(
    spec: &DatasetSpec,
    n_train: usize,
    n_held: usize,
    seed: u64,
) -> Result<(DataBatch, Option<DataBatch>)> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Dataset);
    let raw = raw_samples(spec, n_train, &mut rng)?;
    let st = Standardizer::fit(&raw);
    let train = DataBatch::new(st.apply(raw))?;
    let held = if n_held == 0 {
        None
    } else {
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::HeldOut);
        Some(DataBatch::new(
            st.apply(raw_samples(spec, n_held, &mut rng)?),
        )?)
    };
    Ok((train, held))
}

/// Writes one sample per row under a header `x0,x1,…`.
pub fn write_samples_csv(path: &std::path::Path, x: ArrayView2<'_, f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..x.ncols()).map(|j| format!("x{j}")))?;
    for row in x.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
