//! Generated datasets with known structure, for tests and demos.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{MtsDataset, MtsSample};
use crate::error::Result;
use crate::seed;

pub const MOTIF_LEN: usize = 12;

/// Motif `A` (`which = 0`) or `B` (`which = 1`) as `[channel][t]`.
pub fn motif(which: usize) -> [Vec<f64>; 2] {
    let sign = if which == 0 { 1.0 } else { -1.0 };
    let wave: Vec<f64> = (0..MOTIF_LEN).map(|t| sign * 2.0 * (2.0 * PI * t as f64 / MOTIF_LEN as f64).sin()).collect();
    let ramp: Vec<f64> = (0..MOTIF_LEN).map(|t| sign * 2.0 * (t as f64 / (MOTIF_LEN - 1) as f64 - 0.5) * 2.0).collect();
    [wave, ramp]
}

/// Two-channel series of length `len` (at least 100) with one copy of motif
/// A and one of B under Gaussian noise. Class 0 places A first, class 1
/// places B first. The first motif starts in `[2, 30]`, the second in
/// `[len - 42, len - 14]`, so no window shorter than 16 steps touches both.
/// Classes alternate by sample index.
pub fn order_motif_dataset(n: usize, len: usize, noise: f64, seed_value: u64) -> Result<MtsDataset> {
    assert!(len >= 100, "order motif series need at least 100 steps");
    let mut rng = seed::rng(seed::derive(seed_value, "order-motif", 0));
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let (a, b) = (motif(0), motif(1));
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let first = rng.gen_range(2..=30);
            let second = rng.gen_range(len - 42..=len - 14);
            let (m1, m2) = if label == 0 { (&a, &b) } else { (&b, &a) };
            let rows: Vec<Vec<f64>> = (0..2)
                .map(|c| {
                    let mut row: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
                    for t in 0..MOTIF_LEN {
                        row[first + t] += m1[c][t];
                        row[second + t] += m2[c][t];
                    }
                    row
                })
                .collect();
            MtsSample::from_rows(format!("s{i:04}"), rows, label)
        })
        .collect::<Result<Vec<_>>>()?;
    MtsDataset::new(samples, 2, vec!["ab".into(), "ba".into()])
}

/// Single-channel two-class set where class 1 carries a positive bump and
/// class 0 a negative one, at a random position. Easy for a small CNN.
pub fn bump_sign_dataset(n: usize, len: usize, seed_value: u64) -> Result<MtsDataset> {
    let mut rng = seed::rng(seed::derive(seed_value, "bump-sign", 0));
    let normal = Normal::new(0.0, 0.1).expect("valid");
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let at = rng.gen_range(0..len.saturating_sub(8).max(1));
            let row: Vec<f64> = (0..len)
                .map(|t| {
                    let bump = if (at..at + 8).contains(&t) { sign * (PI * (t - at) as f64 / 7.0).sin() * 2.0 } else { 0.0 };
                    bump + normal.sample(&mut rng)
                })
                .collect();
            MtsSample::from_rows(format!("b{i:04}"), vec![row], label)
        })
        .collect::<Result<Vec<_>>>()?;
    MtsDataset::new(samples, 2, vec!["neg".into(), "pos".into()])
}

/// Three shape families (sine period, square pulse, ramp) with random
/// shift of up to `len / 10`, random amplitude and Gaussian noise. Returns
/// vectors and their family labels.
pub fn shape_families(per_family: usize, len: usize, noise: f64, seed_value: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = seed::rng(seed::derive(seed_value, "shape-families", 0));
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let max_shift = (len / 10) as isize;
    let base = |family: usize, t: f64| -> f64 {
        let u = t / len as f64;
        match family {
            0 => (2.0 * PI * u).sin(),
            1 => {
                if (0.3..0.6).contains(&u) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => u,
        }
    };
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for family in 0..3 {
        for _ in 0..per_family {
            let shift = rng.gen_range(-max_shift..=max_shift) as f64;
            let amp = rng.gen_range(0.5..2.0);
            let v: Vec<f64> = (0..len).map(|t| amp * base(family, t as f64 - shift) + normal.sample(&mut rng)).collect();
            vectors.push(v);
            labels.push(family);
        }
    }
    (vectors, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_dataset_shape() {
        let ds = order_motif_dataset(10, 100, 0.1, 1).unwrap();
        assert_eq!((ds.len(), ds.channels, ds.len, ds.classes), (10, 2, 100, 2));
        assert_eq!(ds.class_counts(), vec![5, 5]);
        assert_eq!(order_motif_dataset(10, 100, 0.1, 1).unwrap(), ds);
    }

    #[test]
    fn families_shape() {
        let (v, l) = shape_families(4, 50, 0.1, 2);
        assert_eq!(v.len(), 12);
        assert_eq!(l.iter().filter(|&&x| x == 2).count(), 4);
    }
}
