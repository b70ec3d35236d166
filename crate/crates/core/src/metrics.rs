//! Two-sample distances between generated and reference point sets. Rows of
//! the leading dimension are samples; remaining dimensions are flattened.

use difflab_autodiff::{Float, Tensor};

use crate::error::{LabError, Result};

/// Rows of a sample set as f64 vectors.
fn rows<T: Float>(x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let n = *x.shape().first().ok_or_else(|| LabError::contract("sample set needs a leading sample dimension"))?;
    if n == 0 {
        return Err(LabError::contract("empty sample set"));
    }
    let d = x.numel() / n;
    Ok(x.data().chunks(d).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_pair<F: Fn(f64) -> f64>(a: &[Vec<f64>], b: &[Vec<f64>], f: F) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += f(sq_dist(x, y));
        }
    }
    total / (a.len() * b.len()) as f64
}

fn check_dims(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a[0].len() != b[0].len() {
        return Err(LabError::contract(format!("sample dimensions differ ({} vs {})", a[0].len(), b[0].len())));
    }
    Ok(())
}

/// Energy distance `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` with all-pairs averages
/// (V-statistic, so identical sets give exactly zero up to rounding).
pub fn energy_distance<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (ra, rb) = (rows(a)?, rows(b)?);
    check_dims(&ra, &rb)?;
    if ra.len() < 2 || rb.len() < 2 {
        return Err(LabError::contract("energy distance needs at least two samples per set"));
    }
    let ab = mean_pair(&ra, &rb, f64::sqrt);
    let aa = mean_pair(&ra, &ra, f64::sqrt);
    let bb = mean_pair(&rb, &rb, f64::sqrt);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Median pairwise distance over the pooled samples.
pub fn median_bandwidth<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let mut pooled = rows(a)?;
    pooled.extend(rows(b)?);
    let mut d2 = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d2.push(sq_dist(&pooled[i], &pooled[j]));
        }
    }
    if d2.is_empty() {
        return Err(LabError::contract("bandwidth needs at least two samples"));
    }
    let mid = d2.len() / 2;
    let (_, m, _) = d2.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(m.sqrt())
}

/// Squared maximum mean discrepancy (V-statistic) with the Gaussian kernel
/// `exp(−‖x−y‖²/(2h²))`; `h` defaults to the median heuristic.
pub fn mmd_rbf<T: Float>(a: &Tensor<T>, b: &Tensor<T>, bandwidth: Option<f64>) -> Result<f64> {
    let (ra, rb) = (rows(a)?, rows(b)?);
    check_dims(&ra, &rb)?;
    let h = match bandwidth {
        Some(h) => h,
        None => median_bandwidth(a, b)?,
    };
    if !(h > 0.0 && h.is_finite()) {
        // All points coincide: the distributions are identical iff the sets are.
        return Ok(if ra == rb { 0.0 } else { 2.0 });
    }
    let k = |d2: f64| (-d2 / (2.0 * h * h)).exp();
    Ok((mean_pair(&ra, &ra, k) + mean_pair(&rb, &rb, k) - 2.0 * mean_pair(&ra, &rb, k)).max(0.0))
}

/// Fraction of `real` samples that fall inside at least one generated
/// sample's k-nearest-neighbour ball (radius measured within `generated`).
pub fn nearest_neighbor_recall<T: Float>(generated: &Tensor<T>, real: &Tensor<T>, k: usize) -> Result<f64> {
    let (g, r) = (rows(generated)?, rows(real)?);
    check_dims(&g, &r)?;
    if k == 0 || g.len() <= k {
        return Err(LabError::contract(format!("need more than k={k} generated samples")));
    }
    let radii: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut d: Vec<f64> = g.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, y)| sq_dist(x, y)).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect();
    let covered = r.iter().filter(|y| g.iter().zip(&radii).any(|(x, &rad)| sq_dist(x, y) <= rad)).count();
    Ok(covered as f64 / r.len() as f64)
}

pub const RECALL_NEIGHBOURS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub mmd_rbf: f64,
    pub nearest_neighbor_recall: f64,
}

impl MetricReport {
    pub fn compute<T: Float>(generated: &Tensor<T>, reference: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            energy_distance: energy_distance(generated, reference)?,
            mmd_rbf: mmd_rbf(generated, reference, None)?,
            nearest_neighbor_recall: nearest_neighbor_recall(generated, reference, RECALL_NEIGHBOURS)?,
        })
    }

    pub const CSV_HEADER: &'static str = "energy_distance,mmd_rbf,nn_recall";

    pub fn csv_fields(&self) -> String {
        format!("{:.6e},{:.6e},{:.6}", self.energy_distance, self.mmd_rbf, self.nearest_neighbor_recall)
    }
}
