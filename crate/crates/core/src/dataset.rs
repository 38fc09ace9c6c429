//! Multivariate series containers, loaders, normalization, fold plans and
//! channel-masked input sets.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One labeled multivariate series, stored channel-major (`d` rows of `len`).
#[derive(Debug, Clone, PartialEq)]
pub struct MtsSample {
    pub id: String,
    pub channels: usize,
    pub len: usize,
    pub values: Vec<f64>,
    pub label: usize,
    /// Length before zero padding.
    pub original_len: usize,
}

impl MtsSample {
    pub fn from_rows(id: impl Into<String>, rows: Vec<Vec<f64>>, label: usize) -> Result<Self> {
        let channels = rows.len();
        if channels == 0 {
            return Err(Error::shape("at least one channel", "0 channels"));
        }
        let len = rows[0].len();
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(Error::Ragged { sample: 0 });
        }
        Ok(Self {
            id: id.into(),
            channels,
            len,
            values: rows.concat(),
            label,
            original_len: len,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c * self.len..(c + 1) * self.len]
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.values[c * self.len + t]
    }

    /// Copy with every channel outside `mask` set to zero.
    pub fn masked(&self, mask: &ChannelMask) -> MtsSample {
        let mut out = self.clone();
        for c in 0..self.channels {
            if !mask.is_active(c) {
                out.channel_mut(c).fill(0.0);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtsDataset {
    pub samples: Vec<MtsSample>,
    pub channels: usize,
    pub len: usize,
    pub classes: usize,
    pub class_names: Vec<String>,
}

impl MtsDataset {
    /// Checks shapes, finiteness and label range. Classes may be absent
    /// (subsets of a larger dataset are valid datasets).
    pub fn new(samples: Vec<MtsSample>, classes: usize, class_names: Vec<String>) -> Result<Self> {
        let (channels, len) = match samples.first() {
            Some(s) => (s.channels, s.len),
            None => return Err(Error::shape("at least one sample", "0 samples")),
        };
        for (i, s) in samples.iter().enumerate() {
            if s.channels != channels || s.len != len || s.values.len() != channels * len {
                return Err(Error::shape(
                    format!("{channels}x{len}"),
                    format!("sample {i}: {}x{}", s.channels, s.len),
                ));
            }
            if s.label >= classes {
                return Err(Error::OutOfRange {
                    what: "label",
                    index: s.label,
                    len: classes,
                });
            }
            if let Some(pos) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    sample: i,
                    channel: pos / len,
                    t: pos % len,
                });
            }
        }
        let class_names = if class_names.len() == classes {
            class_names
        } else {
            (0..classes).map(|c| c.to_string()).collect()
        };
        Ok(Self {
            samples,
            channels,
            len,
            classes,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Dataset restricted to `indices`, keeping class metadata.
    pub fn subset(&self, indices: &[usize]) -> MtsDataset {
        MtsDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            channels: self.channels,
            len: self.len,
            classes: self.classes,
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// Directory with `meta.json` and one `<id>_<label>.csv` per sample.
    #[default]
    PerSample,
    /// One CSV, one sample per row: `label, ch0_t0 .. ch0_tT-1, ch1_t0 ..`.
    SingleFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PadPolicy {
    /// Pad short channels with trailing zeros up to the dataset length.
    #[default]
    Zero,
    /// Reject ragged input.
    Error,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Meta {
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default, rename = "T")]
    pub t: Option<usize>,
    #[serde(default, rename = "C")]
    pub c: Option<usize>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

impl Meta {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Meta(format!("{}: {e}", path.display())))
    }
}

struct RawSample {
    id: String,
    label: String,
    rows: Vec<Vec<f64>>,
}

/// Loads and validates a dataset. Labels are remapped to `0..C`.
pub fn load_dataset(path: &Path, format: DatasetFormat, pad: PadPolicy) -> Result<MtsDataset> {
    let (raw, meta) = match format {
        DatasetFormat::PerSample => read_per_sample(path)?,
        DatasetFormat::SingleFile => read_single_file(path)?,
    };
    assemble(raw, &meta, pad)
}

fn read_per_sample(dir: &Path) -> Result<(Vec<RawSample>, Meta)> {
    let meta = Meta::read(&dir.join("meta.json"))?;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let (id, label) = stem.rsplit_once('_').ok_or_else(|| Error::Format {
            path: path.clone(),
            line: 0,
            message: "file name must be <id>_<label>.csv".into(),
        })?;
        files.push((id.to_string(), label.to_string(), path));
    }
    files.sort_by(|a, b| natural_cmp(&a.0, &b.0));

    let mut raw = Vec::with_capacity(files.len());
    for (id, label, path) in files {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut rows = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            rows.push(parse_row(line, &path, line_no + 1)?);
        }
        if let Some(d) = meta.d {
            if rows.len() != d {
                return Err(Error::Format {
                    path,
                    line: 0,
                    message: format!("expected {d} channel rows, found {}", rows.len()),
                });
            }
        }
        raw.push(RawSample { id, label, rows });
    }
    Ok((raw, meta))
}

fn read_single_file(path: &Path) -> Result<(Vec<RawSample>, Meta)> {
    let file = if path.is_dir() { path.join("data.csv") } else { path.to_path_buf() };
    let meta_path = file.parent().unwrap_or(Path::new(".")).join("meta.json");
    let meta = Meta::read(&meta_path)?;
    let d = meta
        .d
        .ok_or_else(|| Error::Meta("single-file format requires `d`".into()))?;
    if d == 0 {
        return Err(Error::Meta("`d` must be positive".into()));
    }
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut raw = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default().trim().to_string();
        if label.is_empty() {
            return Err(Error::Format {
                path: file.clone(),
                line: line_no + 1,
                message: "missing label column".into(),
            });
        }
        let rest = line.split_once(',').map(|(_, r)| r).unwrap_or("");
        let values = parse_row(rest, &file, line_no + 1)?;
        if values.len() % d != 0 {
            return Err(Error::Format {
                path: file.clone(),
                line: line_no + 1,
                message: format!("{} values do not split into {d} channels", values.len()),
            });
        }
        let t = values.len() / d;
        let rows = values.chunks(t.max(1)).map(<[f64]>::to_vec).collect();
        raw.push(RawSample {
            id: raw.len().to_string(),
            label,
            rows,
        });
    }
    Ok((raw, meta))
}

fn parse_row(line: &str, path: &Path, line_no: usize) -> Result<Vec<f64>> {
    line.split(',')
        .enumerate()
        .map(|(column, cell)| {
            let cell = cell.trim();
            cell.parse::<f64>().map_err(|_| Error::NonNumeric {
                path: path.to_path_buf(),
                line: line_no,
                column,
                value: cell.to_string(),
            })
        })
        .collect()
}

/// Numeric comparison when both sides parse as numbers, lexicographic otherwise.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Maps raw label strings to contiguous class indices.
///
/// With `class_names`, a label's index is its position in that list. Without,
/// distinct labels are sorted (numerically when all are numbers) and numbered.
pub fn remap_labels(raw: &[String], class_names: Option<&[String]>) -> Result<(Vec<usize>, Vec<String>)> {
    let names: Vec<String> = match class_names {
        Some(names) => names.to_vec(),
        None => {
            let mut distinct: Vec<String> = raw.to_vec();
            distinct.sort_by(|a, b| natural_cmp(a, b));
            distinct.dedup();
            distinct
        }
    };
    let labels = raw
        .iter()
        .map(|l| {
            names
                .iter()
                .position(|n| n == l)
                .ok_or_else(|| Error::UnknownLabel(l.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, names))
}

fn assemble(raw: Vec<RawSample>, meta: &Meta, pad: PadPolicy) -> Result<MtsDataset> {
    if raw.is_empty() {
        return Err(Error::Meta("dataset contains no samples".into()));
    }
    let d = meta.d.unwrap_or(raw[0].rows.len());
    let observed = raw
        .iter()
        .flat_map(|s| s.rows.iter().map(Vec::len))
        .max()
        .unwrap_or(0);
    let target = meta.t.unwrap_or(observed);
    if observed > target {
        return Err(Error::Meta(format!(
            "series of length {observed} exceeds declared T = {target}"
        )));
    }
    if target == 0 {
        return Err(Error::Meta("series length must be at least 1".into()));
    }

    let labels_raw: Vec<String> = raw.iter().map(|s| s.label.clone()).collect();
    let (labels, names) = remap_labels(&labels_raw, meta.class_names.as_deref())?;
    let classes = names.len();
    if let Some(c) = meta.c {
        if c != classes {
            return Err(Error::Meta(format!("meta declares C = {c}, found {classes} classes")));
        }
    }

    let mut samples = Vec::with_capacity(raw.len());
    for (i, (rs, label)) in raw.into_iter().zip(labels).enumerate() {
        if rs.rows.len() != d {
            return Err(Error::shape(format!("{d} channels"), format!("sample {i}: {}", rs.rows.len())));
        }
        let lens: Vec<usize> = rs.rows.iter().map(Vec::len).collect();
        let original_len = lens.iter().copied().max().unwrap_or(0);
        if pad == PadPolicy::Error && lens.iter().any(|&l| l != target) {
            return Err(Error::Ragged { sample: i });
        }
        let mut values = Vec::with_capacity(d * target);
        for (c, row) in rs.rows.iter().enumerate() {
            if let Some(t) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { sample: i, channel: c, t });
            }
            values.extend_from_slice(row);
            values.resize((c + 1) * target, 0.0);
        }
        samples.push(MtsSample {
            id: rs.id,
            channels: d,
            len: target,
            values,
            label,
            original_len,
        });
    }

    let ds = MtsDataset::new(samples, classes, names)?;
    if let Some(empty) = ds.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::Meta(format!("class {:?} has no samples", ds.class_names[empty])));
    }
    Ok(ds)
}

/// Writes `ds` in the per-sample directory format.
pub fn write_per_sample(ds: &MtsDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        d: Some(ds.channels),
        t: Some(ds.len),
        c: Some(ds.classes),
        class_names: Some(ds.class_names.clone()),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    for (i, s) in ds.samples.iter().enumerate() {
        let mut text = String::new();
        for c in 0..s.channels {
            let row: Vec<String> = s.channel(c).iter().map(|v| v.to_string()).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let path = dir.join(format!("{i}_{}.csv", ds.class_names[s.label]));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Per-(sample, channel) z-normalization with population standard deviation,
/// computed over the unpadded prefix. Constant channels become zeros.
pub fn znormalize(ds: &MtsDataset) -> MtsDataset {
    let mut out = ds.clone();
    for s in &mut out.samples {
        let n = s.original_len.min(s.len);
        for c in 0..s.channels {
            let row = &mut s.channel_mut(c)[..n];
            znormalize_in_place(row);
        }
    }
    out
}

pub(crate) fn znormalize_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        row.fill(0.0);
    } else {
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Stratified k-fold plan. Each class is shuffled and cut into `k` blocks;
/// fold `f` tests on block `f`, validates on block `f + 1 (mod k)` and trains
/// on the rest.
pub fn make_folds(ds: &MtsDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 3 {
        return Err(Error::Config(format!(
            "fold count must be at least 3 for train/val/test splits, got {k}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); k];
    // Remainder blocks rotate across classes so fold sizes stay balanced.
    let mut offset = 0;
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::TooFewSamples {
                class,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut seed::rng(seed::derive(seed, "folds", class as u64)));
        let base = members.len() / k;
        let extra = members.len() % k;
        let mut cursor = 0;
        for b in 0..k {
            let size = base + usize::from((b + k - offset % k) % k < extra);
            blocks[b].extend_from_slice(&members[cursor..cursor + size]);
            cursor += size;
        }
        offset += extra;
    }
    let folds = (0..k)
        .map(|f| {
            let v = (f + 1) % k;
            let mut test = blocks[f].clone();
            let mut val = blocks[v].clone();
            let mut train: Vec<usize> = (0..k)
                .filter(|&b| b != f && b != v)
                .flat_map(|b| blocks[b].iter().copied())
                .collect();
            test.sort_unstable();
            val.sort_unstable();
            train.sort_unstable();
            Fold { train, val, test }
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}

/// Set of active channels. Orders by active count, then by active indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelMask {
    active: Vec<bool>,
}

impl ChannelMask {
    pub fn full(d: usize) -> Self {
        Self { active: vec![true; d] }
    }

    pub fn from_indices(d: usize, indices: &[usize]) -> Result<Self> {
        let mut active = vec![false; d];
        for &i in indices {
            if i >= d {
                return Err(Error::OutOfRange {
                    what: "channel",
                    index: i,
                    len: d,
                });
            }
            active[i] = true;
        }
        Self::from_bools(active)
    }

    pub fn from_bools(active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(Error::Config("channel mask needs at least one active channel".into()));
        }
        Ok(Self { active })
    }

    /// Parses the `1`/`0` bit string produced by `Display`.
    pub fn parse(bits: &str) -> Result<Self> {
        let active = bits
            .chars()
            .map(|ch| match ch {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Config(format!("bad mask bit string {bits:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bools(active)
    }

    pub fn channels(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, c: usize) -> bool {
        self.active.get(c).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&c| self.active[c]).collect()
    }
}

impl Ord for ChannelMask {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count()
            .cmp(&other.count())
            .then_with(|| self.active_indices().cmp(&other.active_indices()))
            .then_with(|| self.active.len().cmp(&other.active.len()))
    }
}

impl PartialOrd for ChannelMask {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ChannelMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &a in &self.active {
            f.write_str(if a { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InputSetPolicy {
    /// Full power set up to 10 channels, capped beyond.
    #[default]
    Auto,
    FullPowerset,
    /// Singletons, pairs and the all-channel mask.
    Capped,
}

const AUTO_POWERSET_LIMIT: usize = 10;

/// Channel masks of the input set in canonical order.
pub fn input_masks(d: usize, policy: InputSetPolicy) -> Vec<ChannelMask> {
    let full = match policy {
        InputSetPolicy::FullPowerset => true,
        InputSetPolicy::Capped => false,
        InputSetPolicy::Auto => d <= AUTO_POWERSET_LIMIT,
    };
    let mut masks: Vec<ChannelMask> = if full {
        assert!(d < 64, "full power set over {d} channels is not representable");
        (1u64..(1u64 << d))
            .map(|bits| ChannelMask {
                active: (0..d).map(|c| bits >> c & 1 == 1).collect(),
            })
            .collect()
    } else {
        let mut v = Vec::new();
        for a in 0..d {
            v.push(vec![a]);
            for b in a + 1..d {
                v.push(vec![a, b]);
            }
        }
        v.push((0..d).collect());
        v.into_iter()
            .map(|idx| ChannelMask::from_indices(d, &idx).expect("indices are in range"))
            .collect()
    };
    masks.sort();
    masks.dedup();
    masks
}

/// Channel-masked variants of `sample`: kept channels untouched, others zero.
pub fn build_input_set(sample: &MtsSample, policy: InputSetPolicy) -> Vec<(ChannelMask, MtsSample)> {
    input_masks(sample.channels, policy)
        .into_iter()
        .map(|m| {
            let s = sample.masked(&m);
            (m, s)
        })
        .collect()
}
