//! Activation thresholds, highly activated neurons (HAN) and the input
//! periods they see (MHAP: multivariate highly activated period).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{input_masks, ChannelMask, InputSetPolicy, MtsDataset, MtsSample};
use crate::error::{Error, Result};
use crate::nn::{ActivationTensor, TrainedCnn, Window};

/// Which activations feed the per-(layer, channel) quantile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPool {
    /// Unmasked samples only.
    #[default]
    Unmasked,
    /// Every masked variant of the input set.
    AllVariants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationThresholds {
    pub quantile: f64,
    pub pool: ThresholdPool,
    /// `values[layer][channel]`.
    pub values: Vec<Vec<f64>>,
    /// Pooled activation count per layer (identical across its channels).
    pub pool_sizes: Vec<usize>,
}

impl ActivationThresholds {
    pub fn get(&self, layer: usize, channel: usize) -> f64 {
        self.values[layer][channel]
    }
}

/// 1-based nearest rank `ceil(q * n)`, guarding against `q * n` landing a
/// hair above an integer through rounding.
pub fn nearest_rank_index(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let rank = if (x - x.round()).abs() < 1e-9 * (n as f64).max(1.0) { x.round() } else { x.ceil() };
    (rank as usize).clamp(1, n.max(1))
}

/// Nearest-rank `q`-quantile; reorders `values`.
pub fn nearest_rank_quantile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let r = nearest_rank_index(q, values.len());
    let (_, v, _) = values.select_nth_unstable_by(r - 1, |a, b| a.total_cmp(b));
    Some(*v)
}

/// Thresholds from the unmasked samples of `ds`.
pub fn compute_thresholds(model: &TrainedCnn, ds: &MtsDataset, q: f64) -> Result<ActivationThresholds> {
    compute_thresholds_with(model, ds, q, ThresholdPool::Unmasked, InputSetPolicy::Auto)
}

pub fn compute_thresholds_with(
    model: &TrainedCnn,
    ds: &MtsDataset,
    q: f64,
    pool: ThresholdPool,
    policy: InputSetPolicy,
) -> Result<ActivationThresholds> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("quantile must lie in (0, 1), got {q}")));
    }
    let mut pools: Vec<Vec<Vec<f64>>> = model
        .conv
        .iter()
        .map(|l| vec![Vec::new(); l.filters])
        .collect();
    let masks = match pool {
        ThresholdPool::Unmasked => vec![ChannelMask::full(ds.channels)],
        ThresholdPool::AllVariants => input_masks(ds.channels, policy),
    };
    for s in &ds.samples {
        for m in &masks {
            let variant = if m.is_full() { s.clone() } else { s.masked(m) };
            for act in model.forward_with_activations(&variant)?.activations {
                for (c, p) in pools[act.layer].iter_mut().enumerate() {
                    p.extend_from_slice(act.channel(c));
                }
            }
        }
    }
    let mut values = Vec::with_capacity(pools.len());
    let mut pool_sizes = Vec::with_capacity(pools.len());
    for (l, layer) in pools.iter_mut().enumerate() {
        pool_sizes.push(layer.first().map_or(0, Vec::len));
        let mut row = Vec::with_capacity(layer.len());
        for (c, p) in layer.iter_mut().enumerate() {
            row.push(nearest_rank_quantile(p, q).ok_or(Error::EmptyPool { layer: l, channel: c })?);
        }
        values.push(row);
    }
    Ok(ActivationThresholds {
        quantile: q,
        pool,
        values,
        pool_sizes,
    })
}

/// Highly activated neurons of one layer as `(channel, neuron)` in ascending order.
///
/// A neuron qualifies when its activation reaches the channel threshold and is
/// positive: a zero activation carries no evidence, which matters only for
/// channels silent on most of the pool (threshold 0).
pub fn extract_han(act: &ActivationTensor, thr: &ActivationThresholds) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for c in 0..act.channels {
        let t = thr.get(act.layer, c);
        for (n, &a) in act.channel(c).iter().enumerate() {
            if a >= t && a > 0.0 {
                out.push((c, n));
            }
        }
    }
    out
}

/// Keeps, per maximal run of consecutive neurons in one channel, the neuron
/// with the largest activation (lowest index on ties).
pub fn suppress_runs(act: &ActivationTensor, han: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < han.len() {
        let (c, _) = han[i];
        let mut best = han[i];
        let mut j = i + 1;
        while j < han.len() && han[j].0 == c && han[j].1 == han[j - 1].1 + 1 {
            if act.get(c, han[j].1) > act.get(c, best.1) {
                best = han[j];
            }
            j += 1;
        }
        out.push(best);
        i = j;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mhap {
    pub sample: usize,
    pub mask: ChannelMask,
    pub layer: usize,
    pub channel: usize,
    pub neuron: usize,
    pub window: Window,
    pub peak: f64,
    /// `d x window.len()`, channel-major; inactive channels are zero.
    pub values: Vec<f64>,
}

/// MHAPs grouped by layer. Each layer list is ordered by
/// `(sample, window start, mask, channel)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MhapSet {
    pub channels: usize,
    pub layers: Vec<Vec<Mhap>>,
}

impl MhapSet {
    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Index ranges of each sample's MHAPs per layer (lists are sample-sorted).
    pub fn sample_ranges(&self, layer: usize, samples: usize) -> Vec<std::ops::Range<usize>> {
        let list = &self.layers[layer];
        let mut ranges = Vec::with_capacity(samples);
        let mut i = 0;
        for s in 0..samples {
            let start = i;
            while i < list.len() && list[i].sample == s {
                i += 1;
            }
            ranges.push(start..i);
        }
        ranges
    }
}

fn sort_key(m: &Mhap) -> (usize, usize, &ChannelMask, usize, usize) {
    (m.sample, m.window.start, &m.mask, m.channel, m.neuron)
}

/// MHAPs of one sample (indexed `sample_id`) across its input set, per layer.
pub fn extract_sample_mhaps(
    model: &TrainedCnn,
    sample_id: usize,
    sample: &MtsSample,
    thr: &ActivationThresholds,
    policy: InputSetPolicy,
    nms: bool,
) -> Result<Vec<Vec<Mhap>>> {
    let mut layers: Vec<Vec<Mhap>> = vec![Vec::new(); model.layers()];
    for mask in input_masks(sample.channels, policy) {
        let variant = sample.masked(&mask);
        let fw = model.forward_with_activations(&variant)?;
        for act in &fw.activations {
            let mut han = extract_han(act, thr);
            if nms {
                han = suppress_runs(act, &han);
            }
            for (c, n) in han {
                let window = model.receptive_field(act.layer, n)?;
                let width = window.len();
                let mut values = Vec::with_capacity(variant.channels * width);
                for ch in 0..variant.channels {
                    values.extend_from_slice(&variant.channel(ch)[window.start..=window.end]);
                }
                layers[act.layer].push(Mhap {
                    sample: sample_id,
                    mask: mask.clone(),
                    layer: act.layer,
                    channel: c,
                    neuron: n,
                    window,
                    peak: act.get(c, n),
                    values,
                });
            }
        }
    }
    for list in &mut layers {
        list.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    }
    Ok(layers)
}

/// Runs the input set of every sample of `ds` through `model` and cuts out
/// the receptive field of every (optionally run-suppressed) HAN.
pub fn extract_mhaps(
    model: &TrainedCnn,
    ds: &MtsDataset,
    thr: &ActivationThresholds,
    policy: InputSetPolicy,
    nms: bool,
) -> Result<MhapSet> {
    if thr.values.len() != model.layers()
        || thr.values.iter().zip(&model.conv).any(|(t, l)| t.len() != l.filters)
    {
        return Err(Error::Provenance("thresholds do not match the model architecture".into()));
    }
    let mut set = MhapSet {
        channels: ds.channels,
        layers: vec![Vec::new(); model.layers()],
    };
    for (i, s) in ds.samples.iter().enumerate() {
        for (l, list) in extract_sample_mhaps(model, i, s, thr, policy, nms)?.into_iter().enumerate() {
            set.layers[l].extend(list);
        }
    }
    Ok(set)
}

const DUMP_HEADER: &str = "# mts2graph-mhap v1";
pub const DUMP_COLUMNS: &str = "sample_id\tmask\tlayer\tchannel\tneuron\tstart\tend\tpeak\tvalues";

/// Line-delimited dump: a version line, a `# layers=L channels=d` line, a
/// column line, then one tab-separated record per MHAP with comma-joined
/// channel-major values.
pub fn write_dump(set: &MhapSet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DUMP_HEADER}");
    let _ = writeln!(out, "# layers={} channels={}", set.layers.len(), set.channels);
    let _ = writeln!(out, "# {DUMP_COLUMNS}");
    for m in set.layers.iter().flatten() {
        let values: Vec<String> = m.values.iter().map(f64::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            m.sample,
            m.mask,
            m.layer,
            m.channel,
            m.neuron,
            m.window.start,
            m.window.end,
            m.peak,
            values.join(",")
        );
    }
    out
}

pub fn read_dump(text: &str) -> Result<MhapSet> {
    let bad = |line: usize, msg: &str| Error::Format {
        path: "mhaps.tsv".into(),
        line,
        message: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == DUMP_HEADER => {}
        _ => return Err(bad(1, "missing dump header")),
    }
    let (layers, channels) = match lines.next() {
        Some((_, l)) => {
            let mut layers = None;
            let mut channels = None;
            for kv in l.trim_start_matches('#').split_whitespace() {
                match kv.split_once('=') {
                    Some(("layers", v)) => layers = v.parse::<usize>().ok(),
                    Some(("channels", v)) => channels = v.parse::<usize>().ok(),
                    _ => {}
                }
            }
            layers.zip(channels).ok_or_else(|| bad(2, "missing layers/channels"))?
        }
        None => return Err(bad(2, "truncated dump")),
    };
    let mut set = MhapSet {
        channels,
        layers: vec![Vec::new(); layers],
    };
    for (i, line) in lines {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(bad(i + 1, "expected 9 columns"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
        let layer = num(f[2])?;
        if layer >= layers {
            return Err(bad(i + 1, "layer out of range"));
        }
        let values = f[8]
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad(i + 1, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        let window = Window {
            start: num(f[5])?,
            end: num(f[6])?,
        };
        if window.end < window.start || values.len() != channels * window.len() {
            return Err(bad(i + 1, "window and value count disagree"));
        }
        set.layers[layer].push(Mhap {
            sample: num(f[0])?,
            mask: ChannelMask::parse(f[1])?,
            layer,
            channel: num(f[3])?,
            neuron: num(f[4])?,
            window,
            peak: f[7].parse().map_err(|_| bad(i + 1, "bad peak"))?,
            values,
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{CnnConfig, ConvSpec};
    use crate::seed;
    use rand::Rng;

    fn tensor(layer: usize, rows: Vec<Vec<f64>>) -> ActivationTensor {
        ActivationTensor {
            layer,
            channels: rows.len(),
            neurons: rows[0].len(),
            values: rows.concat(),
        }
    }

    fn thresholds(values: Vec<Vec<f64>>) -> ActivationThresholds {
        ActivationThresholds {
            quantile: 0.95,
            pool: ThresholdPool::Unmasked,
            pool_sizes: vec![0; values.len()],
            values,
        }
    }

    #[test]
    fn nearest_rank_on_one_to_hundred() {
        let mut v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let t = nearest_rank_quantile(&mut v, 0.95).unwrap();
        assert_eq!(t, 95.0);
        assert_eq!(v.iter().filter(|&&x| x > t).count(), 5);
        let mut constant = vec![2.5; 17];
        assert_eq!(nearest_rank_quantile(&mut constant, 0.95), Some(2.5));
        assert_eq!(nearest_rank_quantile(&mut [], 0.5), None);
    }

    #[test]
    fn nearest_rank_matches_sorting_oracle() {
        let mut rng = seed::rng(1);
        for n in 1..200 {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            for q in [0.05, 0.5, 0.9, 0.95, 0.99] {
                let mut sorted = v.clone();
                sorted.sort_by(f64::total_cmp);
                // Smallest value with at least q*n values at or below it.
                let oracle = *sorted
                    .iter()
                    .find(|&&t| sorted.iter().filter(|&&x| x <= t).count() as f64 >= q * n as f64 - 1e-9)
                    .unwrap();
                let mut work = v.clone();
                assert_eq!(nearest_rank_quantile(&mut work, q), Some(oracle), "n={n} q={q}");
            }
        }
    }

    #[test]
    fn han_boundary_is_inclusive() {
        let act = tensor(0, vec![vec![0.1, 0.9, 0.95]]);
        assert_eq!(extract_han(&act, &thresholds(vec![vec![0.9]])), vec![(0, 1), (0, 2)]);
        assert!(extract_han(&act, &thresholds(vec![vec![1.0]])).is_empty());
    }

    #[test]
    fn constant_pool_marks_every_neuron() {
        let act = tensor(0, vec![vec![0.7; 5]]);
        assert_eq!(extract_han(&act, &thresholds(vec![vec![0.7]])).len(), 5);
    }

    #[test]
    fn han_matches_linear_scan() {
        let mut rng = seed::rng(2);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..15).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let thr_row: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..0.9)).collect();
            let act = tensor(0, rows.clone());
            let mut expected = Vec::new();
            for c in 0..3 {
                for n in 0..15 {
                    if rows[c][n] >= thr_row[c] {
                        expected.push((c, n));
                    }
                }
            }
            assert_eq!(extract_han(&act, &thresholds(vec![thr_row])), expected);
        }
    }

    #[test]
    fn run_suppression_keeps_maximum() {
        let act = tensor(0, vec![vec![0.0, 0.0, 0.0, 0.0, 2.0, 3.0, 2.5, 0.0, 3.0, 3.0]]);
        let han = extract_han(&act, &thresholds(vec![vec![2.0]]));
        assert_eq!(han, vec![(0, 4), (0, 5), (0, 6), (0, 8), (0, 9)]);
        assert_eq!(suppress_runs(&act, &han), vec![(0, 5), (0, 8)]);
    }

    fn hand_model() -> TrainedCnn {
        // Layer 0: one filter summing a width-5 window; layer 1: one filter, kernel 3.
        let cfg = CnnConfig {
            conv_layers: vec![ConvSpec { filters: 1, kernel: 5 }, ConvSpec { filters: 1, kernel: 3 }],
            ..CnnConfig::default()
        };
        let mut m = TrainedCnn::init(&cfg, 1, 20, 2, 0).unwrap();
        m.conv[0].weights = vec![1.0; 5];
        m.conv[1].weights = vec![1.0, 0.0, 0.0];
        m
    }

    #[test]
    fn single_han_gives_one_window() {
        let model = hand_model();
        let mut row = vec![0.0; 20];
        for v in &mut row[4..9] {
            *v = 1.0;
        }
        let s = MtsSample::from_rows("x", vec![row.clone()], 0).unwrap();
        let thr = thresholds(vec![vec![5.0], vec![100.0]]);
        let layers = extract_sample_mhaps(&model, 0, &s, &thr, InputSetPolicy::Auto, true).unwrap();
        assert_eq!(layers[0].len(), 1);
        let m = &layers[0][0];
        assert_eq!((m.neuron, m.window), (4, Window { start: 4, end: 8 }));
        assert_eq!(m.values, row[4..=8].to_vec());
        assert!(layers[1].is_empty());
    }

    #[test]
    fn dump_round_trip() {
        let model = hand_model();
        let mut rng = seed::rng(5);
        let samples = (0..3)
            .map(|i| MtsSample::from_rows("x", vec![(0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()], i % 2).unwrap())
            .collect();
        let ds = MtsDataset::new(samples, 2, vec![]).unwrap();
        let thr = compute_thresholds(&model, &ds, 0.8).unwrap();
        let set = extract_mhaps(&model, &ds, &thr, InputSetPolicy::Auto, false).unwrap();
        assert!(set.total() > 0);
        assert_eq!(read_dump(&write_dump(&set)).unwrap(), set);
    }
}
