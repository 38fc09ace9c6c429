//! Multiclass gradient-boosted regression trees on the softmax loss.
//!
//! Every round fits one tree per class to the softmax gradients with Newton
//! leaf values `-G / (H + lambda)`, scaled by the learning rate. Splits are
//! exact greedy scans over presorted feature columns, grown level by level.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Recorded for provenance; fitting draws no random numbers.
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            max_depth: 3,
            learning_rate: 0.1,
            min_samples_leaf: 2,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::Config("gbdt.max_depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("gbdt.learning_rate must be positive and gbdt.lambda non-negative".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("gbdt.min_samples_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for n in &mut self.nodes {
            if let TreeNode::Leaf { value } = n {
                *value *= s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub config: GbdtConfig,
    pub classes: usize,
    pub features: usize,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
    /// Mean training loss before boosting and after each round.
    pub loss_history: Vec<f64>,
}

/// Mean softmax cross-entropy of row-major `n x k` scores.
pub fn softmax_loss(scores: &[f64], y: &[usize], k: usize) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for (row, &label) in scores.chunks(k).zip(y) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / n.max(1) as f64
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Per-row gradient `p - onehot(y)` and diagonal Hessian `p (1 - p)` of the
/// summed (not averaged) softmax loss.
pub fn softmax_grad_hess(scores: &[f64], y: &[usize], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut g = Vec::with_capacity(scores.len());
    let mut h = Vec::with_capacity(scores.len());
    for (row, &label) in scores.chunks(k).zip(y) {
        for (c, p) in softmax(row).into_iter().enumerate() {
            g.push(p - if c == label { 1.0 } else { 0.0 });
            h.push((p * (1.0 - p)).max(1e-16));
        }
    }
    (g, h)
}

struct Builder<'a> {
    x: &'a [f64],
    n: usize,
    f: usize,
    sorted: &'a [Vec<usize>],
    cfg: &'a GbdtConfig,
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn build(&self, g: &[f64], h: &[f64]) -> Tree {
        let lambda = self.cfg.lambda;
        let score = |g: f64, h: f64| g * g / (h + lambda);
        let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
        let mut node_of = vec![0usize; self.n];
        let mut frontier = vec![0usize];
        let mut sums: Vec<(f64, f64, usize)> = vec![(g.iter().sum(), h.iter().sum(), self.n)];

        for _depth in 0..self.cfg.max_depth {
            if frontier.is_empty() {
                break;
            }
            // slot[node] = position in frontier.
            let mut slot = vec![usize::MAX; nodes.len()];
            for (i, &nd) in frontier.iter().enumerate() {
                slot[nd] = i;
            }
            let mut best: Vec<Option<Best>> = vec![None; frontier.len()];
            for feat in 0..self.f {
                let mut acc = vec![(0.0f64, 0.0f64, 0usize, f64::NAN); frontier.len()];
                for &row in &self.sorted[feat] {
                    let s = slot[node_of[row]];
                    if s == usize::MAX {
                        continue;
                    }
                    let v = self.x[row * self.f + feat];
                    let (gl, hl, cl, last) = acc[s];
                    let (gt, ht, ct) = sums[s];
                    if cl >= self.cfg.min_samples_leaf && ct - cl >= self.cfg.min_samples_leaf && v > last {
                        let gain = score(gl, hl) + score(gt - gl, ht - hl) - score(gt, ht);
                        if gain > 1e-12 && best[s].is_none_or(|b| gain > b.gain) {
                            let mut thr = last + (v - last) / 2.0;
                            if thr >= v {
                                thr = last;
                            }
                            best[s] = Some(Best {
                                gain,
                                feature: feat,
                                threshold: thr,
                            });
                        }
                    }
                    acc[s] = (gl + g[row], hl + h[row], cl + 1, v);
                }
            }
            let mut next = Vec::new();
            let mut child_of = vec![(0usize, 0usize); frontier.len()];
            let mut split_info = vec![None; frontier.len()];
            for (s, &nd) in frontier.iter().enumerate() {
                if let Some(b) = best[s] {
                    let left = nodes.len();
                    nodes.push(TreeNode::Leaf { value: 0.0 });
                    nodes.push(TreeNode::Leaf { value: 0.0 });
                    nodes[nd] = TreeNode::Split {
                        feature: b.feature,
                        threshold: b.threshold,
                        left,
                        right: left + 1,
                    };
                    child_of[s] = (left, left + 1);
                    split_info[s] = Some(b);
                    next.push(left);
                    next.push(left + 1);
                }
            }
            let mut next_sums = vec![(0.0, 0.0, 0usize); nodes.len()];
            for row in 0..self.n {
                let s = slot.get(node_of[row]).copied().unwrap_or(usize::MAX);
                if s == usize::MAX {
                    continue;
                }
                if let Some(b) = split_info[s] {
                    let child = if self.x[row * self.f + b.feature] <= b.threshold { child_of[s].0 } else { child_of[s].1 };
                    node_of[row] = child;
                    let e = &mut next_sums[child];
                    e.0 += g[row];
                    e.1 += h[row];
                    e.2 += 1;
                }
            }
            // Unsplit frontier nodes become leaves now.
            for (s, &nd) in frontier.iter().enumerate() {
                if split_info[s].is_none() {
                    let (gs, hs, _) = sums[s];
                    nodes[nd] = TreeNode::Leaf {
                        value: -gs / (hs + lambda) * self.cfg.learning_rate,
                    };
                }
            }
            sums = next.iter().map(|&c| next_sums[c]).collect();
            frontier = next;
        }
        for (s, &nd) in frontier.iter().enumerate() {
            let (gs, hs, _) = sums[s];
            nodes[nd] = TreeNode::Leaf {
                value: -gs / (hs + lambda) * self.cfg.learning_rate,
            };
        }
        Tree { nodes }
    }
}

/// Fits `cfg.rounds` boosting rounds. A round whose trees would raise the
/// training loss is scaled down by halves (dropped after 30 halvings), so
/// `loss_history` never increases.
pub fn fit(x: &[f64], features: usize, y: &[usize], classes: usize, cfg: &GbdtConfig) -> Result<GbdtModel> {
    cfg.validate()?;
    let n = y.len();
    if x.len() != n * features {
        return Err(Error::Length {
            expected: n * features,
            found: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFeature {
            row: i / features.max(1),
            column: i % features.max(1),
        });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::OutOfRange {
            what: "class",
            index: bad,
            len: classes,
        });
    }
    let mut present = vec![false; classes];
    y.iter().for_each(|&c| present[c] = true);
    if n < 2 || present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::SingleClass);
    }

    let sorted: Vec<Vec<usize>> = (0..features)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a * features + f].total_cmp(&x[b * features + f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let builder = Builder {
        x,
        n,
        f: features,
        sorted: &sorted,
        cfg,
    };

    let mut scores = vec![0.0; n * classes];
    let mut loss = softmax_loss(&scores, y, classes);
    let mut history = vec![loss];
    let mut trees = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (g, h) = softmax_grad_hess(&scores, y, classes);
        let mut round: Vec<Tree> = (0..classes)
            .map(|c| {
                let gc: Vec<f64> = (0..n).map(|i| g[i * classes + c]).collect();
                let hc: Vec<f64> = (0..n).map(|i| h[i * classes + c]).collect();
                builder.build(&gc, &hc)
            })
            .collect();
        let deltas: Vec<f64> = (0..n)
            .flat_map(|i| round.iter().map(move |t| (i, t)))
            .map(|(i, t)| t.predict(&x[i * features..(i + 1) * features]))
            .collect();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let trial: Vec<f64> = scores.iter().zip(&deltas).map(|(s, d)| s + step * d).collect();
            let l = softmax_loss(&trial, y, classes);
            if l <= loss {
                accepted = Some((trial, l));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, l)) => {
                if step != 1.0 {
                    round.iter_mut().for_each(|t| t.scale(step));
                }
                scores = trial;
                loss = l;
            }
            None => round.iter_mut().for_each(|t| t.scale(0.0)),
        }
        history.push(loss);
        trees.push(round);
    }
    Ok(GbdtModel {
        config: cfg.clone(),
        classes,
        features,
        trees,
        loss_history: history,
    })
}

impl GbdtModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.classes];
        for round in &self.trees {
            for (c, t) in round.iter().enumerate() {
                s[c] += t.predict(x);
            }
        }
        s
    }

    /// Class probabilities (row-major `n x classes`) and argmax labels, ties
    /// to the lowest class.
    pub fn predict(&self, x: &[f64], features: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        if features != self.features || !x.len().is_multiple_of(features.max(1)) {
            return Err(Error::Length {
                expected: self.features,
                found: features,
            });
        }
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for row in x.chunks(features.max(1)) {
            let p = softmax(&self.scores(row));
            labels.push(argmax(&p));
            probs.extend(p);
        }
        Ok((probs, labels))
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::from("mts2graph-gbdt v1\n");
        let _ = writeln!(
            out,
            "classes {} features {} rounds {} learning_rate {} max_depth {} min_samples_leaf {} lambda {} seed {}",
            self.classes,
            self.features,
            self.trees.len(),
            c.learning_rate,
            c.max_depth,
            c.min_samples_leaf,
            c.lambda,
            c.seed
        );
        out.push_str("loss");
        for l in &self.loss_history {
            let _ = write!(out, " {l}");
        }
        out.push('\n');
        for (r, round) in self.trees.iter().enumerate() {
            for (k, t) in round.iter().enumerate() {
                let _ = writeln!(out, "tree {r} {k} {}", t.nodes.len());
                for n in &t.nodes {
                    match n {
                        TreeNode::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => {
                            let _ = writeln!(out, "split {feature} {threshold} {left} {right}");
                        }
                        TreeNode::Leaf { value } => {
                            let _ = writeln!(out, "leaf {value}");
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Format {
            path: "<gbdt>".into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().peekable();
        if lines.next().map(|(_, l)| l.trim()) != Some("mts2graph-gbdt v1") {
            return Err(bad(1, "missing model header".into()));
        }
        let (_, head) = lines.next().ok_or_else(|| bad(2, "missing parameters".into()))?;
        let tok: Vec<&str> = head.split_whitespace().collect();
        let get = |key: &str| -> Result<&str> {
            tok.iter()
                .position(|t| *t == key)
                .and_then(|i| tok.get(i + 1).copied())
                .ok_or_else(|| bad(2, format!("missing {key}")))
        };
        let num = |key: &str| -> Result<f64> { get(key)?.parse::<f64>().map_err(|_| bad(2, format!("bad {key}"))) };
        let classes = num("classes")? as usize;
        let features = num("features")? as usize;
        let rounds = num("rounds")? as usize;
        let config = GbdtConfig {
            rounds,
            max_depth: num("max_depth")? as usize,
            learning_rate: num("learning_rate")?,
            min_samples_leaf: num("min_samples_leaf")? as usize,
            lambda: num("lambda")?,
            seed: get("seed")?.parse().map_err(|_| bad(2, "bad seed".into()))?,
        };
        let (i, loss_line) = lines.next().ok_or_else(|| bad(3, "missing loss history".into()))?;
        let loss_history = loss_line
            .strip_prefix("loss")
            .ok_or_else(|| bad(i + 1, "missing loss history".into()))?
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad(i + 1, format!("bad loss {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut trees = vec![Vec::with_capacity(classes); rounds];
        for r in 0..rounds {
            for k in 0..classes {
                let (i, line) = lines.next().ok_or_else(|| bad(0, "truncated model".into()))?;
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 4 || f[0] != "tree" || f[1] != r.to_string() || f[2] != k.to_string() {
                    return Err(bad(i + 1, format!("expected `tree {r} {k} <nodes>`")));
                }
                let count: usize = f[3].parse().map_err(|_| bad(i + 1, "bad node count".into()))?;
                let mut nodes = Vec::with_capacity(count);
                for _ in 0..count {
                    let (i, line) = lines.next().ok_or_else(|| bad(0, "truncated tree".into()))?;
                    let f: Vec<&str> = line.split_whitespace().collect();
                    let node = match f.as_slice() {
                        ["leaf", v] => TreeNode::Leaf {
                            value: v.parse().map_err(|_| bad(i + 1, "bad leaf".into()))?,
                        },
                        ["split", feat, thr, l, rr] => {
                            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad split".into()));
                            let (feature, left, right) = (parse(feat)?, parse(l)?, parse(rr)?);
                            if feature >= features || left >= count || right >= count {
                                return Err(bad(i + 1, "split refers outside the model".into()));
                            }
                            TreeNode::Split {
                                feature,
                                threshold: thr.parse().map_err(|_| bad(i + 1, "bad threshold".into()))?,
                                left,
                                right,
                            }
                        }
                        _ => return Err(bad(i + 1, format!("bad node line {line:?}"))),
                    };
                    nodes.push(node);
                }
                trees[r].push(Tree { nodes });
            }
        }
        Ok(Self {
            config,
            classes,
            features,
            trees,
            loss_history,
        })
    }
}

/// Fraction of exact label matches.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Length {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    Ok(predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

pub fn evaluate(model: &GbdtModel, x: &[f64], features: usize, y: &[usize]) -> Result<f64> {
    if x.len() != y.len() * features {
        return Err(Error::Length {
            expected: y.len() * features,
            found: x.len(),
        });
    }
    let (_, labels) = model.predict(x, features)?;
    accuracy(&labels, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    pub(crate) fn separable(n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            let label = i % 2;
            let shift = if label == 1 { 0.3 } else { -0.3 };
            x.extend([a + shift, b - shift]);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn separable_fits_exactly() {
        let (x, y) = separable(100, 1);
        let cfg = GbdtConfig {
            rounds: 100,
            ..Default::default()
        };
        let m = fit(&x, 2, &y, 2, &cfg).unwrap();
        assert_eq!(evaluate(&m, &x, 2, &y).unwrap(), 1.0);
        assert!(m.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(fit(&x, 2, &y, 2, &cfg).unwrap(), m);
    }

    #[test]
    fn constant_features_predict_prior() {
        let x = vec![1.0; 10];
        let y = vec![0, 1, 1, 1, 0, 1, 1, 0, 1, 1];
        let m = fit(&x, 1, &y, 2, &GbdtConfig { rounds: 5, ..Default::default() }).unwrap();
        assert!(m.predict(&x, 1).unwrap().1.iter().all(|&l| l == 1));
    }

    #[test]
    fn zero_rounds_is_uniform() {
        let (x, y) = separable(10, 2);
        let m = fit(&x, 2, &y, 2, &GbdtConfig { rounds: 0, ..Default::default() }).unwrap();
        let (p, l) = m.predict(&x, 2).unwrap();
        assert!(p.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(l.iter().all(|&c| c == 0));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (x, y) = separable(40, 3);
        let m = fit(&x, 2, &y, 3, &GbdtConfig { rounds: 10, ..Default::default() }).unwrap();
        for row in m.predict(&x, 2).unwrap().0.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert!(m.predict(&x, 3).is_err());
    }

    #[test]
    fn input_errors() {
        assert!(matches!(fit(&[1.0, 2.0], 1, &[0, 0], 2, &GbdtConfig::default()), Err(Error::SingleClass)));
        assert!(matches!(
            fit(&[1.0, f64::NAN], 1, &[0, 1], 2, &GbdtConfig::default()),
            Err(Error::NonFiniteFeature { row: 1, column: 0 })
        ));
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        let p: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let t: Vec<usize> = (0..10).map(|i| if i < 5 { i % 2 } else { 1 - i % 2 }).collect();
        assert_eq!(accuracy(&p, &t).unwrap(), 0.5);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let k = 3;
        let y = vec![0, 2, 1, 1, 0];
        let scores: Vec<f64> = (0..15).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let (g, _) = softmax_grad_hess(&scores, &y, k);
        let h = 1e-6;
        for i in 0..scores.len() {
            let mut p = scores.clone();
            p[i] += h;
            let mut m = scores.clone();
            m[i] -= h;
            let fd = (softmax_loss(&p, &y, k) - softmax_loss(&m, &y, k)) * y.len() as f64 / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-5, "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn text_round_trip() {
        let (x, y) = separable(30, 4);
        let m = fit(&x, 2, &y, 2, &GbdtConfig { rounds: 7, ..Default::default() }).unwrap();
        assert_eq!(GbdtModel::from_text(&m.to_text()).unwrap(), m);
    }
}
