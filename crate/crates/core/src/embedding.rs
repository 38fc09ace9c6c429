//! Node embeddings from weighted random walks and skip-gram with negative
//! sampling.

use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evograph::MergedGraph;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial rate; decays linearly to 1e-4 of itself over training.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            walks_per_node: 20,
            walk_length: 10,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding.dim must be at least 1".into()));
        }
        if self.walk_length < 2 {
            return Err(Error::Config("embedding.walk_length must be at least 2".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("embedding.window must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("embedding.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// `walks_per_node` walks from every node over out-edges, each step picked
/// with probability proportional to edge weight. A node without out-edges
/// ends its walk. Walks are grouped by start node; node `v` draws from its
/// own generator seeded from `(seed, v)`.
pub fn random_walks(adj: &[Vec<(usize, u64)>], cfg: &EmbeddingConfig) -> Vec<Vec<usize>> {
    let mut corpus = Vec::with_capacity(adj.len() * cfg.walks_per_node);
    for start in 0..adj.len() {
        let mut rng = seed::rng(seed::derive(cfg.seed, "walk", start as u64));
        for _ in 0..cfg.walks_per_node {
            let mut walk = vec![start];
            let mut cur = start;
            while walk.len() < cfg.walk_length {
                let out = &adj[cur];
                let total: u64 = out.iter().map(|&(_, w)| w).sum();
                if total == 0 {
                    break;
                }
                let mut r = rng.gen_range(0..total);
                let mut next = out[out.len() - 1].0;
                for &(d, w) in out {
                    if r < w {
                        next = d;
                        break;
                    }
                    r -= w;
                }
                walk.push(next);
                cur = next;
            }
            corpus.push(walk);
        }
    }
    corpus
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of one negative-sampling term.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub loss: f64,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// `-log s(v . u_o) - sum_n log s(-v . u_n)` and its gradients with respect to
/// the center input vector `v`, the context output vector `u_o` and each
/// negative output vector `u_n`.
pub fn pair_gradient(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> PairGradient {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let s = sigmoid(dot(center, context));
    let mut loss = -s.max(1e-300).ln();
    let mut g_center: Vec<f64> = context.iter().map(|u| (s - 1.0) * u).collect();
    let g_context: Vec<f64> = center.iter().map(|v| (s - 1.0) * v).collect();
    let mut g_neg = Vec::with_capacity(negatives.len());
    for u in negatives {
        let sn = sigmoid(dot(center, u));
        loss -= (1.0 - sn).max(1e-300).ln();
        g_center.iter_mut().zip(u.iter()).for_each(|(g, x)| *g += sn * x);
        g_neg.push(center.iter().map(|v| sn * v).collect());
    }
    PairGradient {
        loss,
        center: g_center,
        context: g_context,
        negatives: g_neg,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub dim: usize,
    pub seed: u64,
    pub vectors: Vec<Vec<f64>>,
}

/// Mean pair loss per epoch, plus the first epoch split into ten equal slices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SkipgramReport {
    pub epoch_losses: Vec<f64>,
    pub first_epoch_slices: Vec<f64>,
}

/// Skip-gram with negative sampling over `corpus` for nodes `0..nodes`.
/// Noise samples follow corpus frequency to the power 0.75; a negative equal
/// to the context node is skipped. Updates are sequential, so the result is a
/// function of `(corpus, cfg)`.
pub fn train_skipgram(corpus: &[Vec<usize>], nodes: usize, cfg: &EmbeddingConfig) -> Result<(NodeEmbeddings, SkipgramReport)> {
    cfg.validate()?;
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyGraph);
    }
    if let Some(&bad) = corpus.iter().flatten().find(|&&v| v >= nodes) {
        return Err(Error::UnknownNode(bad));
    }
    let dim = cfg.dim;
    let mut rng = seed::rng(seed::derive(cfg.seed, "skipgram", 0));
    let mut input: Vec<Vec<f64>> = (0..nodes)
        .map(|_| (0..dim).map(|_| (rng.gen::<f64>() - 0.5) / dim as f64).collect())
        .collect();
    let mut output = vec![vec![0.0; dim]; nodes];

    let mut freq = vec![0.0f64; nodes];
    corpus.iter().flatten().for_each(|&v| freq[v] += 1.0);
    let noise = WeightedIndex::new(freq.iter().map(|f| f.powf(0.75))).expect("corpus is non-empty");

    let pairs_per_epoch: usize = corpus
        .iter()
        .map(|w| (0..w.len()).map(|i| i.min(cfg.window) + (w.len() - 1 - i).min(cfg.window)).sum::<usize>())
        .sum();
    let total = (pairs_per_epoch * cfg.epochs).max(1) as f64;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut report = SkipgramReport::default();
    let mut done = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut slice_loss = [0.0; 10];
        let mut slice_count = vec![0usize; 10];
        let mut seen = 0usize;
        for &w in &order {
            let walk = &corpus[w];
            for i in 0..walk.len() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(walk.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let (c, o) = (walk[i], walk[j]);
                    let lr = cfg.learning_rate * (1.0 - done as f64 / total).max(1e-4);
                    let negs: Vec<usize> = (0..cfg.negatives).map(|_| noise.sample(&mut rng)).filter(|&n| n != o).collect();
                    let neg_vecs: Vec<&[f64]> = negs.iter().map(|&n| output[n].as_slice()).collect();
                    let g = pair_gradient(&input[c], &output[o], &neg_vecs);
                    for (u, d) in output[o].iter_mut().zip(&g.context) {
                        *u -= lr * d;
                    }
                    for (&n, gn) in negs.iter().zip(&g.negatives) {
                        for (u, d) in output[n].iter_mut().zip(gn) {
                            *u -= lr * d;
                        }
                    }
                    for (v, d) in input[c].iter_mut().zip(&g.center) {
                        *v -= lr * d;
                    }
                    epoch_loss += g.loss;
                    if epoch == 0 {
                        let s = (seen * 10 / pairs_per_epoch.max(1)).min(9);
                        slice_loss[s] += g.loss;
                        slice_count[s] += 1;
                    }
                    seen += 1;
                    done += 1;
                }
            }
        }
        report.epoch_losses.push(epoch_loss / seen.max(1) as f64);
        if epoch == 0 {
            report.first_epoch_slices = slice_loss
                .iter()
                .zip(&slice_count)
                .filter(|(_, &n)| n > 0)
                .map(|(l, &n)| l / n as f64)
                .collect();
        }
    }
    if input.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("skip-gram diverged; lower embedding.learning_rate".into()));
    }
    Ok((
        NodeEmbeddings {
            dim,
            seed: cfg.seed,
            vectors: input,
        },
        report,
    ))
}

pub fn embed_graph(g: &MergedGraph, cfg: &EmbeddingConfig) -> Result<(NodeEmbeddings, SkipgramReport)> {
    if g.node_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    let corpus = random_walks(&g.adjacency(), cfg);
    train_skipgram(&corpus, g.node_count(), cfg)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

const EMB_HEADER: &str = "# mts2graph-embeddings v1";

impl NodeEmbeddings {
    pub fn get(&self, node: usize) -> Result<&[f64]> {
        self.vectors.get(node).map(Vec::as_slice).ok_or(Error::UnknownNode(node))
    }

    /// Header with node count, dimension and seed, then `node v_0 .. v_{D-1}`.
    pub fn to_text(&self) -> String {
        let mut out = format!("{EMB_HEADER}\n{} {} {}\n", self.vectors.len(), self.dim, self.seed);
        for (i, v) in self.vectors.iter().enumerate() {
            let _ = write!(out, "{i}");
            for x in v {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Format {
            path: "<embeddings>".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(EMB_HEADER) {
            return Err(bad(1, "missing embeddings header".into()));
        }
        let head: Vec<u64> = lines
            .next()
            .unwrap_or_default()
            .split_whitespace()
            .map(|s| s.parse::<u64>().map_err(|e| bad(2, e.to_string())))
            .collect::<Result<_>>()?;
        let [n, dim, seed] = head[..] else {
            return Err(bad(2, "expected `nodes dim seed`".into()));
        };
        let (n, dim) = (n as usize, dim as usize);
        let mut vectors = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let mut f = line.split_whitespace();
            let id: usize = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(i + 3, "missing node id".into()))?;
            if id != vectors.len() {
                return Err(bad(i + 3, format!("expected node {}, found {id}", vectors.len())));
            }
            let v: Vec<f64> = f
                .map(|s| s.parse::<f64>().map_err(|_| bad(i + 3, format!("bad value {s:?}"))))
                .collect::<Result<_>>()?;
            if v.len() != dim {
                return Err(Error::Length { expected: dim, found: v.len() });
            }
            vectors.push(v);
        }
        if vectors.len() != n {
            return Err(bad(0, format!("expected {n} rows, found {}", vectors.len())));
        }
        Ok(Self { dim, seed, vectors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: usize, seed: u64) -> EmbeddingConfig {
        EmbeddingConfig {
            dim,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn dead_end_walks() {
        let walks = random_walks(&[vec![]], &cfg(4, 0));
        assert_eq!(walks.len(), 20);
        assert!(walks.iter().all(|w| w == &vec![0]));
    }

    #[test]
    fn first_step_follows_weights() {
        let adj = vec![vec![(1, 3), (2, 1)], vec![], vec![]];
        let c = EmbeddingConfig {
            walks_per_node: 10_000,
            ..cfg(4, 7)
        };
        let walks = random_walks(&adj, &c);
        let from0: Vec<_> = walks.iter().filter(|w| w[0] == 0).collect();
        let b = from0.iter().filter(|w| w[1] == 1).count() as f64 / from0.len() as f64;
        assert!((b - 0.75).abs() <= 0.05, "{b}");
        assert_eq!(random_walks(&adj, &c), walks);
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let v = vec![0.3, -0.2, 0.5];
        let u = vec![-0.1, 0.4, 0.2];
        let n1 = vec![0.25, 0.1, -0.3];
        let n2 = vec![-0.4, 0.05, 0.15];
        let loss = |v: &[f64], u: &[f64], a: &[f64], b: &[f64]| pair_gradient(v, u, &[a, b]).loss;
        let g = pair_gradient(&v, &u, &[&n1, &n2]);
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "{analytic} vs {fd}");
        };
        for i in 0..3 {
            let bump = |x: &[f64], s: f64| {
                let mut y = x.to_vec();
                y[i] += s;
                y
            };
            check(g.center[i], loss(&bump(&v, h), &u, &n1, &n2), loss(&bump(&v, -h), &u, &n1, &n2));
            check(g.context[i], loss(&v, &bump(&u, h), &n1, &n2), loss(&v, &bump(&u, -h), &n1, &n2));
            check(g.negatives[0][i], loss(&v, &u, &bump(&n1, h), &n2), loss(&v, &u, &bump(&n1, -h), &n2));
            check(g.negatives[1][i], loss(&v, &u, &n1, &bump(&n2, h)), loss(&v, &u, &n1, &bump(&n2, -h)));
        }
    }

    #[test]
    fn single_node_gets_a_vector() {
        let (e, _) = train_skipgram(&[vec![0]], 1, &cfg(8, 1)).unwrap();
        assert_eq!(e.vectors.len(), 1);
        assert_eq!(e.vectors[0].len(), 8);
        assert!(e.vectors[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn first_epoch_loss_decreases() {
        let adj: Vec<Vec<(usize, u64)>> = (0..6).map(|i| vec![((i + 1) % 6, 1)]).collect();
        let c = EmbeddingConfig {
            walks_per_node: 50,
            ..cfg(16, 3)
        };
        let (_, rep) = train_skipgram(&random_walks(&adj, &c), 6, &c).unwrap();
        assert!(rep.first_epoch_slices.last().unwrap() < rep.first_epoch_slices.first().unwrap());
    }

    #[test]
    fn default_dimension() {
        let g = MergedGraph::new(vec![2]);
        let (e, _) = embed_graph(&g, &EmbeddingConfig::default()).unwrap();
        assert!(e.vectors.iter().all(|v| v.len() == 100));
        assert!(matches!(embed_graph(&MergedGraph::default(), &EmbeddingConfig::default()), Err(Error::EmptyGraph)));
    }

    #[test]
    fn text_round_trip() {
        let (e, _) = train_skipgram(&[vec![0, 1, 2, 1]], 3, &cfg(5, 2)).unwrap();
        assert_eq!(NodeEmbeddings::from_text(&e.to_text()).unwrap(), e);
    }
}
