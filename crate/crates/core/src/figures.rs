//! Figure data: sample scatters and image grids, per-step x̂0 strips, and
//! the MSE-midpoint demonstration. Every file carries the run's config hash
//! in a header comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use difflab_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::encode_pgm_with_comment;
use crate::error::{LabError, Result};
use crate::models::{Conditioning, Denoiser};
use crate::oracles::{mse_midpoint, FiniteDataset};
use crate::sampler::{sample, SampleTrajectory, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Timesteps shown in the x̂0 strip, followed by the final sample.
pub const STRIP_STEPS: usize = 10;

fn write(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn is_image(shape: &[usize]) -> bool {
    shape.len() == 3 && shape[0] == 1
}

/// Tiles `[N, 1, H, W]` images into a `rows × cols` grid with 1-pixel gaps.
pub fn tile_images(images: &[&[f32]], h: usize, w: usize, cols: usize) -> (usize, usize, Vec<f32>) {
    let rows = images.len().div_ceil(cols.max(1));
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut grid = vec![-1.0f32; gw * gh];
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            let dst = (r * (h + 1) + y) * gw + c * (w + 1);
            grid[dst..dst + w].copy_from_slice(&img[y * w..(y + 1) * w]);
        }
    }
    (gw, gh, grid)
}

/// Scatter of generated points over data points as a small SVG.
pub fn scatter_svg(data: &[f32], generated: &[f32], hash: &str) -> String {
    let extent = data.iter().chain(generated).fold(1.0f32, |m, v| m.max(v.abs())) * 1.1;
    let map = |v: f32| (v / extent + 1.0) * 200.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\">\n<!-- config {hash} -->\n<rect width=\"400\" height=\"400\" fill=\"white\"/>\n"
    );
    for (pts, colour) in [(data, "#999999"), (generated, "#d62728")] {
        for p in pts.chunks(2) {
            let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"1.2\" fill=\"{colour}\"/>", map(p[0]), 400.0 - map(p[1]));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Samples, data overlay, and the per-step x̂0 strip for one model.
pub fn emit_model_figures<D: Denoiser + ?Sized>(
    dir: &Path,
    name: &str,
    model: &D,
    reference: &FiniteDataset,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
    hash: &str,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let shape = reference.sample_shape().to_vec();
    let n_show = if is_image(&shape) { 16.min(reference.len()) } else { reference.len().min(1024) };
    let labels: Vec<Conditioning> = (0..n_show).map(|i| reference.label(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = sample(model, &labels, sampler, schedule, &mut rng)?.sample;

    let strip_cfg = SamplerConfig { steps: STRIP_STEPS, record_trajectory: true, ..sampler.clone() };
    let strip_labels: Vec<Conditioning> = labels.iter().take(4).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let strip = sample(model, &strip_labels, &strip_cfg, schedule, &mut rng)?;

    if is_image(&shape) {
        let (h, w) = (shape[1], shape[2]);
        let imgs: Vec<&[f32]> = samples.data().chunks(h * w).collect();
        let (gw, gh, grid) = tile_images(&imgs, h, w, 4);
        files.push(write(&dir.join(format!("{name}_samples.pgm")), &encode_pgm_with_comment(gw, gh, &grid, Some(&format!("config {hash}"))))?);
        files.push(write(&dir.join(format!("{name}_xhat0_strip.pgm")), &strip_pgm(&strip, h, w, hash))?);
    } else {
        let mut csv = format!("# config {hash}\nx,y,label\n");
        for (p, c) in samples.data().chunks(2).zip(&labels) {
            let _ = writeln!(csv, "{},{},{}", p[0], p.get(1).unwrap_or(&0.0), c.class_id().map_or(-1, |k| k as i64));
        }
        files.push(write(&dir.join(format!("{name}_samples.csv")), csv.as_bytes())?);
        let data: Vec<f32> = (0..n_show).flat_map(|i| reference.point(i).to_vec()).collect();
        files.push(write(&dir.join(format!("{name}_scatter.svg")), scatter_svg(&data, samples.data(), hash).as_bytes())?);
    }
    files.push(write(&dir.join(format!("{name}_xhat0_strip.csv")), strip_csv(&strip, hash).as_bytes())?);
    Ok(files)
}

/// `column,t,sample,values…` with one column per recorded step plus `final`.
pub fn strip_csv(traj: &SampleTrajectory, hash: &str) -> String {
    let mut csv = format!("# config {hash}\ncolumn,t,sample,values\n");
    let rows = traj.sample.shape()[0];
    let mut emit = |col: &str, t: usize, x: &Tensor| {
        let d = x.numel() / rows;
        for r in 0..rows {
            let vals: Vec<String> = x.data()[r * d..(r + 1) * d].iter().map(|v| v.to_string()).collect();
            let _ = writeln!(csv, "{col},{t},{r},{}", vals.join(" "));
        }
    };
    for (i, rec) in traj.records.iter().enumerate() {
        emit(&i.to_string(), rec.t, &rec.x0_hat);
    }
    emit("final", 0, &traj.sample);
    csv
}

fn strip_pgm(traj: &SampleTrajectory, h: usize, w: usize, hash: &str) -> Vec<u8> {
    let rows = traj.sample.shape()[0];
    let cols = traj.records.len() + 1;
    let mut imgs: Vec<&[f32]> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for rec in &traj.records {
            imgs.push(&rec.x0_hat.data()[r * h * w..(r + 1) * h * w]);
        }
        imgs.push(&traj.sample.data()[r * h * w..(r + 1) * h * w]);
    }
    let (gw, gh, grid) = tile_images(&imgs, h, w, cols);
    encode_pgm_with_comment(gw, gh, &grid, Some(&format!("config {hash}")))
}

/// Midpoint of the first two points of different classes (or the first two
/// points): CSV of `index,a,b,midpoint` at full precision, plus a PGM triptych
/// for images.
pub fn emit_midpoint(dir: &Path, data: &FiniteDataset, hash: &str) -> Result<Vec<PathBuf>> {
    if data.len() < 2 {
        return Err(LabError::contract("midpoint figure needs two exemplars"));
    }
    let j = (1..data.len()).find(|&j| data.labels()[j] != data.labels()[0]).unwrap_or(1);
    let shape = data.sample_shape().to_vec();
    let a = Tensor::new(shape.clone(), data.point(0).to_vec())?;
    let b = Tensor::new(shape.clone(), data.point(j).to_vec())?;
    let mid = mse_midpoint(&[a.clone(), b.clone()])?;
    let mut csv = format!("# config {hash}\nindex,a,b,midpoint\n");
    for (i, ((x, y), m)) in a.data().iter().zip(b.data()).zip(mid.data()).enumerate() {
        let _ = writeln!(csv, "{i},{x:e},{y:e},{m:e}");
    }
    let mut files = vec![write(&dir.join("midpoint.csv"), csv.as_bytes())?];
    if is_image(&shape) {
        let (gw, gh, grid) = tile_images(&[a.data(), mid.data(), b.data()], shape[1], shape[2], 3);
        files.push(write(&dir.join("midpoint.pgm"), &encode_pgm_with_comment(gw, gh, &grid, Some(&format!("config {hash}"))))?);
    }
    Ok(files)
}
