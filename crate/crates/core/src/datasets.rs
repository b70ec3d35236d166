//! Built-in toy datasets and PGM image ingestion.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LabError, Result};
use crate::oracles::{FiniteDataset, GaussianMixture};

pub const BUILTIN_DATASETS: [&str; 4] = ["gauss_mixture_8", "two_moons", "checkerboard", "shapes16"];

pub const SHAPES16_SIZE: usize = 16;
pub const SHAPES16_CLASSES: [&str; 4] = ["square", "disk", "cross", "triangle"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    pub n: usize,
    /// Circle radius of the mixture means.
    pub radius: f64,
    /// Per-mode std (mixture) or jitter (moons).
    pub noise: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self { n: 4096, radius: 1.0, noise: 0.05 }
    }
}

/// Means, weights and std of the `gauss_mixture_8` distribution.
pub fn gauss_mixture_8_params(params: &DatasetParams) -> GaussianMixture {
    let means = (0..8)
        .map(|k| {
            let a = k as f64 * PI / 4.0;
            vec![params.radius * a.cos(), params.radius * a.sin()]
        })
        .collect();
    GaussianMixture { weights: vec![1.0 / 8.0; 8], means, sigmas: vec![params.noise; 8] }
}

/// Generates a built-in dataset; deterministic given the rng state.
pub fn generate_dataset<R: Rng + ?Sized>(name: &str, params: &DatasetParams, rng: &mut R) -> Result<FiniteDataset> {
    if params.n == 0 {
        return Err(LabError::config("dataset size must be positive"));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(LabError::config(format!("dataset noise {} must be finite and non-negative", params.noise)));
    }
    match name {
        "gauss_mixture_8" => gauss_mixture_8(params, rng),
        "two_moons" => two_moons(params, rng),
        "checkerboard" => checkerboard(params, rng),
        "shapes16" => shapes16(params.n, rng),
        other => Err(LabError::config(format!("unknown dataset `{other}` (expected one of {BUILTIN_DATASETS:?})"))),
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("finite non-negative std")
}

fn gauss_mixture_8<R: Rng + ?Sized>(params: &DatasetParams, rng: &mut R) -> Result<FiniteDataset> {
    let mix = gauss_mixture_8_params(params);
    let noise = normal(params.noise);
    let mut data = Vec::with_capacity(2 * params.n);
    let mut labels = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let k = rng.random_range(0..8);
        data.push((mix.means[k][0] + noise.sample(rng)) as f32);
        data.push((mix.means[k][1] + noise.sample(rng)) as f32);
        labels.push(Some(k));
    }
    FiniteDataset::new(vec![2], data, labels, 8)
}

fn two_moons<R: Rng + ?Sized>(params: &DatasetParams, rng: &mut R) -> Result<FiniteDataset> {
    let noise = normal(params.noise);
    let mut data = Vec::with_capacity(2 * params.n);
    let mut labels = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let k = rng.random_range(0..2);
        let a = rng.random_range(0.0..PI);
        let (x, y) = if k == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
        // Centre and scale to roughly unit spread.
        data.push(((x - 0.5) + noise.sample(rng)) as f32);
        data.push(((y - 0.25) * 1.5 + noise.sample(rng)) as f32);
        labels.push(Some(k));
    }
    FiniteDataset::new(vec![2], data, labels, 2)
}

/// Uniform over the dark cells of a 4×4 board on `[-radius, radius]²`;
/// the label is the cell's row parity.
fn checkerboard<R: Rng + ?Sized>(params: &DatasetParams, rng: &mut R) -> Result<FiniteDataset> {
    let cell = params.radius / 2.0;
    let mut data = Vec::with_capacity(2 * params.n);
    let mut labels = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let row = rng.random_range(0..4usize);
        let col = 2 * rng.random_range(0..2usize) + (row % 2);
        let x = -params.radius + (col as f64 + rng.random::<f64>()) * cell;
        let y = -params.radius + (row as f64 + rng.random::<f64>()) * cell;
        data.push(x as f32);
        data.push(y as f32);
        labels.push(Some(row % 2));
    }
    FiniteDataset::new(vec![2], data, labels, 2)
}

/// Rasterizes one procedural shape: foreground `+intensity`, background −1.
pub fn render_shape<R: Rng + ?Sized>(class: usize, rng: &mut R) -> Vec<f32> {
    let n = SHAPES16_SIZE as f64;
    let size = rng.random_range(5.0..9.0);
    let cx = rng.random_range(size / 2.0 + 1.0..n - size / 2.0 - 1.0);
    let cy = rng.random_range(size / 2.0 + 1.0..n - size / 2.0 - 1.0);
    let intensity = rng.random_range(0.5..1.0);
    let half = size / 2.0;
    let mut img = vec![-1.0f32; SHAPES16_SIZE * SHAPES16_SIZE];
    for py in 0..SHAPES16_SIZE {
        for px in 0..SHAPES16_SIZE {
            let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
            let inside = match class {
                0 => dx.abs() <= half && dy.abs() <= half,
                1 => dx * dx + dy * dy <= half * half,
                2 => (dx.abs() <= half && dy.abs() <= half / 3.0) || (dy.abs() <= half && dx.abs() <= half / 3.0),
                _ => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
            };
            if inside {
                img[py * SHAPES16_SIZE + px] = intensity as f32;
            }
        }
    }
    img
}

fn shapes16<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<FiniteDataset> {
    let mut data = Vec::with_capacity(n * SHAPES16_SIZE * SHAPES16_SIZE);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..SHAPES16_CLASSES.len());
        data.extend(render_shape(k, rng));
        labels.push(Some(k));
    }
    FiniteDataset::new(vec![1, SHAPES16_SIZE, SHAPES16_SIZE], data, labels, SHAPES16_CLASSES.len())
}

/// Returns a copy of `data` with its points in random order.
pub fn shuffled<R: Rng + ?Sized>(data: &FiniteDataset, rng: &mut R) -> Result<FiniteDataset> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let mut raw = Vec::with_capacity(data.raw().len());
    for &i in &idx {
        raw.extend_from_slice(data.point(i));
    }
    FiniteDataset::new(data.sample_shape().to_vec(), raw, idx.iter().map(|&i| data.labels()[i]).collect(), data.num_classes())
}

/// Encodes a greyscale image with values in `[-1, 1]` as binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    encode_pgm_with_comment(width, height, pixels, None)
}

/// [`encode_pgm`] with an optional `# comment` header line.
pub fn encode_pgm_with_comment(width: usize, height: usize, pixels: &[f32], comment: Option<&str>) -> Vec<u8> {
    let comment = comment.map_or(String::new(), |c| format!("# {c}\n"));
    let mut out = format!("P5\n{comment}{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8));
    out
}

/// Decodes a binary PGM (P5) into `(width, height, pixels in [-1, 1])`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width * height;
    if bytes.len() < start + len {
        return Err("truncated raster".into());
    }
    let scale = 2.0 / maxval as f32;
    Ok((width, height, bytes[start..start + len].iter().map(|&b| b as f32 * scale - 1.0).collect()))
}

/// Reads `dir/<class>/*.pgm`; classes are the sorted subdirectory names.
/// All images must share one size.
pub fn ingest_images(dir: &Path) -> Result<(FiniteDataset, Vec<String>)> {
    let read_dir = |p: &Path| std::fs::read_dir(p).map_err(|e| LabError::io(p, e));
    let mut classes: Vec<_> = read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(LabError::config(format!("{} has no class subdirectories", dir.display())));
    }
    let mut size = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = read_dir(&dir.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| LabError::io(&f, e))?;
            let (w, h, px) = decode_pgm(&bytes).map_err(|detail| LabError::Format { path: f.display().to_string(), detail })?;
            if *size.get_or_insert((w, h)) != (w, h) {
                return Err(LabError::Format { path: f.display().to_string(), detail: format!("size {w}x{h} differs from the first image") });
            }
            data.extend(px);
            labels.push(Some(k));
        }
    }
    let (w, h) = size.ok_or_else(|| LabError::config(format!("no .pgm files under {}", dir.display())))?;
    Ok((FiniteDataset::new(vec![1, h, w], data, labels, classes.len())?, classes))
}
