//! Shape-based distance (SBD) and K-shape clustering.
//!
//! Cross-correlation at shift `s` is `cc(s) = sum_t x[t] * y[t - s]` over the
//! zero-padded sequences, so a positive best shift means `y` must be delayed
//! by `s` steps to line up with `x`.

use std::cell::RefCell;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// Vectors at least this long use FFT cross-correlation.
pub const FFT_MIN_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sbd {
    pub distance: f64,
    pub shift: isize,
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Zero-mean, unit population variance; all-zero when `x` is constant.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    crate::dataset::znormalize_in_place(&mut out);
    out
}

/// `y` moved right by `shift` steps (left when negative), zero-filled.
pub fn shift_zero_padded(y: &[f64], shift: isize) -> Vec<f64> {
    let n = y.len() as isize;
    (0..n)
        .map(|t| {
            let src = t - shift;
            if (0..n).contains(&src) { y[src as usize] } else { 0.0 }
        })
        .collect()
}

/// Direct O(n^2) cross-correlation; entry `s + n - 1` holds `cc(s)`.
pub fn cross_correlation_direct(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    (-(n - 1)..n)
        .map(|s| {
            let lo = s.max(0);
            let hi = (n + s).min(n);
            (lo..hi).map(|t| x[t as usize] * y[(t - s) as usize]).sum()
        })
        .collect()
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(len), p.plan_fft_inverse(len))
    })
}

/// FFT cross-correlation with the same layout as [`cross_correlation_direct`].
pub fn cross_correlation_fft(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let size = (2 * n - 1).next_power_of_two();
    let (fwd, inv) = plans(size);
    let mut fx: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fx.resize(size, Complex::new(0.0, 0.0));
    let mut fy: Vec<Complex<f64>> = y.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fy.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut fx);
    fwd.process(&mut fy);
    let mut prod: Vec<Complex<f64>> = fx.iter().zip(&fy).map(|(a, b)| a * b.conj()).collect();
    inv.process(&mut prod);
    let scale = size as f64;
    let n = n as isize;
    (-(n - 1)..n)
        .map(|s| {
            let idx = if s >= 0 { s as usize } else { (size as isize + s) as usize };
            prod[idx].re / scale
        })
        .collect()
}

pub fn cross_correlation(x: &[f64], y: &[f64]) -> Vec<f64> {
    if x.len() >= FFT_MIN_LEN {
        cross_correlation_fft(x, y)
    } else {
        cross_correlation_direct(x, y)
    }
}

/// Largest entry of a correlation sequence; ties prefer the smallest |shift|,
/// then the negative one.
fn best_shift(cc: &[f64]) -> (f64, isize) {
    let n = (cc.len() as isize + 1) / 2;
    let mut best = (cc[(n - 1) as usize], 0isize);
    for mag in 1..n {
        for s in [-mag, mag] {
            let v = cc[(s + n - 1) as usize];
            if v > best.0 {
                best = (v, s);
            }
        }
    }
    best
}

fn sbd_unchecked(x: &[f64], nx: f64, y: &[f64], ny: f64) -> Sbd {
    if nx == 0.0 || ny == 0.0 {
        return Sbd { distance: 1.0, shift: 0 };
    }
    let (cc, shift) = best_shift(&cross_correlation(x, y));
    Sbd {
        distance: (1.0 - cc / (nx * ny)).clamp(0.0, 2.0),
        shift,
    }
}

/// `1 - max_s cc(s) / (|x| |y|)` and the maximizing shift. A zero-norm input
/// is treated as orthogonal to everything: distance 1, shift 0.
pub fn sbd(x: &[f64], y: &[f64]) -> Result<Sbd> {
    if x.len() != y.len() {
        return Err(Error::Length {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Length { expected: 1, found: 0 });
    }
    Ok(sbd_unchecked(x, norm(x), y, norm(y)))
}

const POWER_ITERATIONS: usize = 100;
const POWER_TOLERANCE: f64 = 1e-8;

/// K-shape centroid update.
///
/// Members are aligned to `reference` by their best SBD shift (zero-padded),
/// z-normalized, and the dominant eigenvector of `Q^T S Q` is taken, where `S`
/// is the members' scatter matrix and `Q` the centering matrix. The sign is
/// chosen to correlate non-negatively with `reference` (or with the members
/// when the reference is all zero). Returns all zeros if every aligned member is.
pub fn shape_extraction(members: &[&[f64]], reference: &[f64]) -> Vec<f64> {
    let n = reference.len();
    let ref_norm = norm(reference);
    let aligned: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            if ref_norm == 0.0 {
                zscore(m)
            } else {
                let s = sbd_unchecked(reference, ref_norm, m, norm(m)).shift;
                zscore(&shift_zero_padded(m, s))
            }
        })
        .filter(|a| a.iter().any(|&v| v != 0.0))
        .collect();
    if aligned.is_empty() || n == 0 {
        return vec![0.0; n];
    }

    // S = sum a a^T, then M = Q S Q with Q = I - 11^T / n.
    let mut m = vec![0.0; n * n];
    for a in &aligned {
        for i in 0..n {
            let ai = a[i];
            if ai == 0.0 {
                continue;
            }
            let row = &mut m[i * n..(i + 1) * n];
            for (r, &aj) in row.iter_mut().zip(a) {
                *r += ai * aj;
            }
        }
    }
    let col_mean: Vec<f64> = (0..n).map(|j| (0..n).map(|i| m[i * n + j]).sum::<f64>() / n as f64).collect();
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] -= col_mean[j];
        }
    }
    for i in 0..n {
        let row = &mut m[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }

    let center = |v: &[f64]| -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter().map(|x| x - mean).collect()
    };
    let mut sum = vec![0.0; n];
    for a in &aligned {
        sum.iter_mut().zip(a).for_each(|(s, v)| *s += v);
    }
    let mut v = [center(reference), center(&sum), aligned[0].clone()]
        .into_iter()
        .find(|c| norm(c) > 1e-12)
        .unwrap_or_else(|| aligned[0].clone());
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    for _ in 0..POWER_ITERATIONS {
        let mut w: Vec<f64> = (0..n).map(|i| m[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let nw = norm(&w);
        if nw == 0.0 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let change = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if change < POWER_TOLERANCE {
            break;
        }
    }

    let orient: f64 = if ref_norm > 0.0 {
        v.iter().zip(reference).map(|(a, b)| a * b).sum()
    } else {
        aligned.iter().map(|a| a.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>()).sum()
    };
    if orient < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    zscore(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KShapeConfig {
    pub max_iter: usize,
    pub restarts: usize,
    /// Fit centroids on at most this many vectors (seeded subsample), then
    /// assign every vector. `None` fits on all.
    pub fit_cap: Option<usize>,
    pub seed: u64,
}

impl Default for KShapeConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            restarts: 5,
            fit_cap: None,
            seed: 0,
        }
    }
}

/// Clustering of one layer's vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerClusters {
    pub k: usize,
    pub len: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of SBD from every vector to its centroid.
    pub inertia: f64,
    /// Inertia after each iteration of the selected restart.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl LayerClusters {
    /// Nearest centroid by SBD (ties to the lowest id) and its distance.
    pub fn assign(&self, v: &[f64]) -> Result<(usize, f64)> {
        if v.len() != self.len {
            return Err(Error::Length {
                expected: self.len,
                found: v.len(),
            });
        }
        let z = zscore(v);
        let nz = norm(&z);
        Ok(nearest(&z, nz, &self.centroids, &self.centroids.iter().map(|c| norm(c)).collect::<Vec<_>>()))
    }
}

fn nearest(x: &[f64], nx: f64, centroids: &[Vec<f64>], norms: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, (c, &nc)) in centroids.iter().zip(norms).enumerate() {
        let d = sbd_unchecked(x, nx, c, nc).distance;
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct Run {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    history: Vec<f64>,
    iterations: usize,
}

fn run_once(data: &[Vec<f64>], norms: &[f64], k: usize, max_iter: usize, seed: u64) -> Run {
    let n = data.len();
    let len = data[0].len();
    let mut rng = seed::rng(seed);
    let mut assign: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let mut centroids = vec![vec![0.0; len]; k];
    let mut dist = vec![1.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        let previous = assign.clone();

        // Refinement. After the first pass a new centroid replaces the old one
        // only if it does not raise the cluster's SBD sum, which keeps inertia
        // non-increasing across iterations.
        for j in 0..k {
            let idx: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
            if idx.is_empty() {
                continue;
            }
            let members: Vec<&[f64]> = idx.iter().map(|&i| data[i].as_slice()).collect();
            let candidate = shape_extraction(&members, &centroids[j]);
            let nc = norm(&candidate);
            let new_d: Vec<f64> = idx.iter().map(|&i| sbd_unchecked(&data[i], norms[i], &candidate, nc).distance).collect();
            let old_cost: f64 = idx.iter().map(|&i| dist[i]).sum();
            if iter == 0 || new_d.iter().sum::<f64>() <= old_cost {
                centroids[j] = candidate;
                for (&i, d) in idx.iter().zip(new_d) {
                    dist[i] = d;
                }
            }
        }

        let cnorms: Vec<f64> = centroids.iter().map(|c| norm(c)).collect();
        for i in 0..n {
            let (j, d) = nearest(&data[i], norms[i], &centroids, &cnorms);
            assign[i] = j;
            dist[i] = d;
        }

        // Empty clusters take the vector farthest from its centroid.
        let mut reseeded = false;
        for j in 0..k {
            let mut sizes = vec![0usize; k];
            assign.iter().for_each(|&a| sizes[a] += 1);
            if sizes[j] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| sizes[assign[i]] >= 2)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = donor {
                centroids[j] = zscore(&data[i]);
                assign[i] = j;
                dist[i] = sbd_unchecked(&data[i], norms[i], &centroids[j], norm(&centroids[j])).distance;
                reseeded = true;
            }
        }

        history.push(dist.iter().sum());
        if !reseeded && assign == previous {
            break;
        }
    }
    Run {
        centroids,
        assignments: assign,
        history,
        iterations,
    }
}

/// K-shape over `vectors` (z-normalized internally). Runs `cfg.restarts`
/// random-assignment initializations and keeps the lowest final inertia.
pub fn kshape_cluster(vectors: &[Vec<f64>], k: usize, cfg: &KShapeConfig) -> Result<LayerClusters> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(Error::ClusterCount { k, n });
    }
    let len = vectors[0].len();
    if len == 0 {
        return Err(Error::Length { expected: 1, found: 0 });
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != len) {
        return Err(Error::Length {
            expected: len,
            found: v.len(),
        });
    }
    let data: Vec<Vec<f64>> = vectors.iter().map(|v| zscore(v)).collect();
    let norms: Vec<f64> = data.iter().map(|v| norm(v)).collect();

    let fit_idx: Option<Vec<usize>> = match cfg.fit_cap {
        Some(cap) if cap < n && cap >= k => {
            let mut rng = seed::rng(seed::derive(cfg.seed, "kshape-subsample", 0));
            let mut idx = sample_indices(&mut rng, n, cap).into_vec();
            idx.sort_unstable();
            Some(idx)
        }
        _ => None,
    };
    let (fit_data, fit_norms): (Vec<Vec<f64>>, Vec<f64>) = match &fit_idx {
        Some(idx) => (idx.iter().map(|&i| data[i].clone()).collect(), idx.iter().map(|&i| norms[i]).collect()),
        None => (data.clone(), norms.clone()),
    };

    let mut best: Option<Run> = None;
    for r in 0..cfg.restarts.max(1) {
        let run = run_once(&fit_data, &fit_norms, k, cfg.max_iter.max(1), seed::derive(cfg.seed, "kshape", r as u64));
        let score = *run.history.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| score < *b.history.last().expect("history")) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");

    let (assignments, inertia) = if fit_idx.is_some() {
        let cnorms: Vec<f64> = best.centroids.iter().map(|c| norm(c)).collect();
        let mut total = 0.0;
        let a = data
            .iter()
            .zip(&norms)
            .map(|(x, &nx)| {
                let (j, d) = nearest(x, nx, &best.centroids, &cnorms);
                total += d;
                j
            })
            .collect();
        (a, total)
    } else {
        let inertia = *best.history.last().expect("history");
        (best.assignments, inertia)
    };
    Ok(LayerClusters {
        k,
        len,
        centroids: best.centroids,
        assignments,
        inertia,
        inertia_history: best.history,
        iterations: best.iterations,
    })
}

/// Final inertia for each `k` in `ks`, for picking a cluster count by eye.
pub fn elbow(vectors: &[Vec<f64>], ks: &[usize], cfg: &KShapeConfig) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| Ok((k, kshape_cluster(vectors, k, cfg)?.inertia)))
        .collect()
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Per-layer clusterings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub seed: u64,
    pub layers: Vec<LayerClusters>,
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    k: usize,
    len: usize,
    inertia: f64,
    inertia_history: Vec<f64>,
    iterations: usize,
    assignments: Vec<usize>,
}

impl ClusterModel {
    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.k).collect()
    }

    /// Container with an index document (k, seed, inertia, assignments per
    /// layer) and one `layer{l}.centroids` tensor of shape `k x len`.
    pub fn to_container(&self) -> Container {
        let metas: Vec<LayerMeta> = self
            .layers
            .iter()
            .map(|l| LayerMeta {
                k: l.k,
                len: l.len,
                inertia: l.inertia,
                inertia_history: l.inertia_history.clone(),
                iterations: l.iterations,
                assignments: l.assignments.clone(),
            })
            .collect();
        Container {
            kind: "cluster-model".into(),
            meta: serde_json::json!({ "seed": self.seed, "layers": metas }),
            tensors: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| Tensor::from_f64(&format!("layer{i}.centroids"), vec![l.k, l.len], &l.centroids.concat()))
                .collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "cluster-model" {
            return Err(Error::Artifact(format!("expected a cluster-model, found `{}`", c.kind)));
        }
        let seed: u64 = serde_json::from_value(c.meta.get("seed").cloned().unwrap_or_default())?;
        let metas: Vec<LayerMeta> = serde_json::from_value(c.meta.get("layers").cloned().unwrap_or_default())?;
        let layers = metas
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let t = c.tensor(&format!("layer{i}.centroids"))?;
                if t.shape != [m.k, m.len] {
                    return Err(Error::Artifact(format!("layer {i} centroid shape mismatch")));
                }
                let flat = t.to_f64();
                Ok(LayerClusters {
                    k: m.k,
                    len: m.len,
                    centroids: flat.chunks(m.len.max(1)).map(<[f64]>::to_vec).collect(),
                    assignments: m.assignments,
                    inertia: m.inertia,
                    inertia_history: m.inertia_history,
                    iterations: m.iterations,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_container().to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_container(&Container::from_bytes(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assume, proptest};

    fn pulse(n: usize, at: usize) -> Vec<f64> {
        (0..n).map(|t| (-((t as f64 - at as f64) / 2.0).powi(2)).exp()).collect()
    }

    /// Brute-force max normalized cross-correlation over all shifts.
    fn brute_sbd(x: &[f64], y: &[f64]) -> (f64, isize) {
        let n = x.len() as isize;
        let nx = norm(x);
        let ny = norm(y);
        let mut best = (f64::NEG_INFINITY, 0isize);
        for s in -(n - 1)..n {
            let mut acc = 0.0;
            for t in 0..n {
                let u = t - s;
                if (0..n).contains(&u) {
                    acc += x[t as usize] * y[u as usize];
                }
            }
            if acc / (nx * ny) > best.0 + 1e-15 || (acc / (nx * ny) - best.0).abs() <= 1e-15 && s.abs() < best.1.abs() {
                best = (acc / (nx * ny), s);
            }
        }
        (1.0 - best.0, best.1)
    }

    #[test]
    fn self_distance_is_zero() {
        let x = pulse(30, 12);
        let d = sbd(&x, &x).unwrap();
        assert!(d.distance <= 1e-9);
        assert_eq!(d.shift, 0);
    }

    #[test]
    fn shifted_copy_is_recovered() {
        let x = pulse(40, 15);
        let y = shift_zero_padded(&x, 3);
        let d = sbd(&x, &y).unwrap();
        assert!(d.distance <= 1e-6, "{}", d.distance);
        assert_eq!(d.shift, -3);
        assert_eq!(shift_zero_padded(&y, d.shift)[..30], x[..30]);
    }

    #[test]
    fn negation_matches_brute_force() {
        let x: Vec<f64> = (0..16).map(|t| ((t as f64) * 0.7).sin() + 0.1 * t as f64).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let d = sbd(&x, &neg).unwrap();
        let (bd, _) = brute_sbd(&x, &neg);
        assert!((d.distance - bd).abs() < 1e-12);
        // At zero shift the two are perfectly anti-correlated.
        let cc0 = cross_correlation_direct(&x, &neg)[15];
        assert!((1.0 - cc0 / (norm(&x) * norm(&neg)) - 2.0).abs() < 1e-12);
        // A single point has no other shift to escape to.
        assert!((sbd(&[3.0], &[-3.0]).unwrap().distance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_orthogonal() {
        let d = sbd(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((d.distance, d.shift), (1.0, 0));
        assert!(sbd(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fft_matches_direct() {
        let mut rng = seed::rng(4);
        for n in [1usize, 2, 7, 63, 64, 100, 257, 512] {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = cross_correlation_direct(&x, &y);
            let b = cross_correlation_fft(&x, &y);
            let err = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-8, "n={n}: {err}");
        }
    }

    #[test]
    fn single_member_centroid_is_its_zscore() {
        let m: Vec<f64> = (0..12).map(|t| (t as f64 * 0.5).sin() * 3.0 + 1.0).collect();
        let c = shape_extraction(&[&m], &[0.0; 12]);
        let z = zscore(&m);
        assert!(c.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-6));
        let c2 = shape_extraction(&[&m, &m], &[0.0; 12]);
        assert!(c2.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-6));
        // Sign follows the reference.
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        let c3 = shape_extraction(&[&m], &neg);
        assert!(c3.iter().zip(&neg).map(|(a, b)| a * b).sum::<f64>() >= 0.0);
        assert!(shape_extraction(&[&[0.0; 4][..]], &[0.0; 4]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noisy_triangles_recover_shape() {
        let n = 40;
        let tri: Vec<f64> = (0..n)
            .map(|t| {
                let t = t as f64;
                if (10.0..20.0).contains(&t) { t - 10.0 } else if (20.0..30.0).contains(&t) { 30.0 - t } else { 0.0 }
            })
            .collect();
        let mut rng = seed::rng(9);
        let members: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let s = rng.gen_range(-4isize..=4);
                shift_zero_padded(&tri, s).iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = members.iter().map(Vec::as_slice).collect();
        let c = shape_extraction(&refs, &zscore(&members[0]));
        let d = sbd(&c, &zscore(&tri)).unwrap();
        assert!(d.distance <= 0.05, "{d:?} {c:?}");
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let vectors: Vec<Vec<f64>> = (0..6).map(|i| pulse(20, 3 + i * 2).iter().enumerate().map(|(t, v)| v * (1.0 + (t * i) as f64 * 0.01)).collect()).collect();
        let vectors: Vec<Vec<f64>> = vectors.into_iter().enumerate().map(|(i, mut v)| {
            v[i] += 1.0;
            v
        }).collect();
        let cm = kshape_cluster(&vectors, 6, &KShapeConfig::default()).unwrap();
        assert!(cm.inertia <= 1e-6, "{}", cm.inertia);
        let mut ids = cm.assignments.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn k_one_groups_everything() {
        let vectors: Vec<Vec<f64>> = (0..5).map(|i| pulse(16, 4 + i)).collect();
        let cm = kshape_cluster(&vectors, 1, &KShapeConfig::default()).unwrap();
        assert!(cm.assignments.iter().all(|&a| a == 0));
        let recount: f64 = vectors.iter().map(|v| sbd(&zscore(v), &cm.centroids[0]).unwrap().distance).sum();
        assert!((recount - cm.inertia).abs() < 1e-9);
        assert!(cm.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let v = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(kshape_cluster(&v, 4, &KShapeConfig::default()), Err(Error::ClusterCount { k: 4, n: 3 })));
        assert!(kshape_cluster(&v, 0, &KShapeConfig::default()).is_err());
    }

    #[test]
    fn assign_ties_and_identity() {
        let a = zscore(&pulse(10, 3));
        let b = zscore(&pulse(10, 6));
        let cm = LayerClusters {
            k: 3,
            len: 10,
            centroids: vec![a.clone(), a.clone(), b.clone()],
            assignments: vec![],
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
        };
        assert_eq!(cm.assign(&b).unwrap().0, 2);
        assert_eq!(cm.assign(&a).unwrap().0, 0);
        assert!(cm.assign(&[1.0]).is_err());
    }

    #[test]
    fn ari_basics() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]) - 1.0).abs() < 1e-12);
        let ari = adjusted_rand_index(&[0, 0, 1, 1, 2, 2], &[0, 1, 0, 1, 0, 1]);
        assert!(ari < 0.1);
    }

    #[test]
    fn container_round_trip() {
        let vectors: Vec<Vec<f64>> = (0..8).map(|i| pulse(12, 2 + i)).collect();
        let layer = kshape_cluster(&vectors, 2, &KShapeConfig::default()).unwrap();
        let model = ClusterModel { seed: 3, layers: vec![layer] };
        let back = ClusterModel::from_container(&Container::from_bytes(&model.to_container().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.counts(), vec![2]);
        assert_eq!(back.layers[0].assignments, model.layers[0].assignments);
        for (a, b) in back.layers[0].centroids.iter().flatten().zip(model.layers[0].centroids.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn sbd_symmetric_and_bounded(x in prop::collection::vec(-3.0f64..3.0, 1..40), seed in 0u64..1000) {
            let mut rng = seed::rng(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = sbd(&x, &y).unwrap().distance;
            let b = sbd(&y, &x).unwrap().distance;
            prop_assert!((a - b).abs() <= 1e-9);
            prop_assert!((0.0..=2.0).contains(&a));
            let scaled: Vec<f64> = x.iter().map(|v| v * 2.5).collect();
            if norm(&x) > 1e-6 {
                prop_assert!(sbd(&x, &scaled).unwrap().distance <= 1e-9);
            }
        }

        #[test]
        fn sbd_matches_brute_force(x in prop::collection::vec(-3.0f64..3.0, 2..30), seed in 0u64..1000) {
            let mut rng = seed::rng(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
            prop_assume!(norm(&x) > 1e-6 && norm(&y) > 1e-6);
            let (bd, _) = brute_sbd(&x, &y);
            prop_assert!((sbd(&x, &y).unwrap().distance - bd).abs() <= 1e-9);
        }
    }
}
