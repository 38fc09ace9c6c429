//! Evolution graphs: per-layer cluster succession graphs merged across layers
//! through receptive-field containment.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::dataset::ChannelMask;
use crate::error::{Error, Result};
use crate::mhap::MhapSet;

/// Directed graph over the clusters of one layer; `edges[(a, b)]` counts how
/// often an MHAP of cluster `b` directly followed one of cluster `a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGraph {
    pub layer: usize,
    pub k: usize,
    pub edges: BTreeMap<(usize, usize), u64>,
}

impl LayerGraph {
    pub fn total_weight(&self) -> u64 {
        self.edges.values().sum()
    }
}

/// Counts consecutive pairs within each sequence; pairs never span sequences.
pub fn build_layer_graph(layer: usize, sequences: &[Vec<usize>], k: usize) -> Result<LayerGraph> {
    let mut edges = BTreeMap::new();
    for seq in sequences {
        if let Some(&bad) = seq.iter().find(|&&c| c >= k) {
            return Err(Error::OutOfRange {
                what: "cluster",
                index: bad,
                len: k,
            });
        }
        for pair in seq.windows(2) {
            *edges.entry((pair[0], pair[1])).or_insert(0) += 1;
        }
    }
    Ok(LayerGraph { layer, k, edges })
}

/// Per-sample cluster sequences of one layer. MHAP lists are already ordered
/// by (sample, window start, mask, channel), which is the temporal order used.
pub fn layer_sequences(mhaps: &MhapSet, layer: usize, assignments: &[usize], samples: usize) -> Result<Vec<Vec<usize>>> {
    let list = &mhaps.layers[layer];
    if assignments.len() != list.len() {
        return Err(Error::Provenance(format!(
            "layer {layer} has {} MHAPs but {} cluster assignments",
            list.len(),
            assignments.len()
        )));
    }
    let mut seqs = vec![Vec::new(); samples];
    for (m, &a) in list.iter().zip(assignments) {
        if m.sample >= samples {
            return Err(Error::OutOfRange {
                what: "sample",
                index: m.sample,
                len: samples,
            });
        }
        seqs[m.sample].push(a);
    }
    Ok(seqs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Intra,
    Cross,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Intra => "intra",
            EdgeKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub weight: u64,
    pub kind: EdgeKind,
}

/// All layers' clusters as one graph. Node `offsets[l] + c` is cluster `c` of
/// layer `l`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergedGraph {
    pub layer_sizes: Vec<usize>,
    pub edges: BTreeMap<(usize, usize), Edge>,
}

impl MergedGraph {
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        Self {
            layer_sizes,
            edges: BTreeMap::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    pub fn offset(&self, layer: usize) -> usize {
        self.layer_sizes[..layer].iter().sum()
    }

    pub fn node_id(&self, layer: usize, cluster: usize) -> Result<usize> {
        let k = *self.layer_sizes.get(layer).ok_or(Error::OutOfRange {
            what: "layer",
            index: layer,
            len: self.layer_sizes.len(),
        })?;
        if cluster >= k {
            return Err(Error::OutOfRange {
                what: "cluster",
                index: cluster,
                len: k,
            });
        }
        Ok(self.offset(layer) + cluster)
    }

    /// `(layer, cluster)` of a global node id.
    pub fn node(&self, id: usize) -> Result<(usize, usize)> {
        let mut rest = id;
        for (l, &k) in self.layer_sizes.iter().enumerate() {
            if rest < k {
                return Ok((l, rest));
            }
            rest -= k;
        }
        Err(Error::UnknownNode(id))
    }

    pub fn label(&self, id: usize) -> Result<String> {
        let (l, c) = self.node(id)?;
        Ok(format!("L{l}C{c}"))
    }

    fn add(&mut self, src: usize, dst: usize, weight: u64, kind: EdgeKind) {
        self.edges.entry((src, dst)).or_insert(Edge { weight: 0, kind }).weight += weight;
    }

    /// Out-neighbours with weights, per node, in destination order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, u64)>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for (&(s, d), e) in &self.edges {
            adj[s].push((d, e.weight));
        }
        adj
    }
}

/// Copies the layer graphs into one node space and adds lower -> upper edges:
/// an upper MHAP at neuron `n` of layer `l` sees neurons `[n, n + kernels[l] - 1]`
/// of layer `l - 1`, and every lower MHAP of the same sample and mask inside
/// that span adds 1 to the edge between their clusters.
pub fn merge_graphs(layer_graphs: &[LayerGraph], mhaps: &MhapSet, assignments: &[Vec<usize>], kernels: &[usize]) -> Result<MergedGraph> {
    let layers = layer_graphs.len();
    if mhaps.layers.len() != layers || assignments.len() != layers || kernels.len() != layers {
        return Err(Error::Provenance(format!(
            "{} layer graphs, {} MHAP layers, {} assignment layers, {} kernels",
            layers,
            mhaps.layers.len(),
            assignments.len(),
            kernels.len()
        )));
    }
    for (l, g) in layer_graphs.iter().enumerate() {
        if g.layer != l {
            return Err(Error::Provenance(format!("layer graph {l} is labelled layer {}", g.layer)));
        }
        if assignments[l].len() != mhaps.layers[l].len() {
            return Err(Error::Provenance(format!("layer {l} assignments do not match its MHAPs")));
        }
        if let Some(&bad) = assignments[l].iter().find(|&&a| a >= g.k) {
            return Err(Error::Provenance(format!("layer {l} assignment {bad} exceeds k = {}", g.k)));
        }
    }
    let mut merged = MergedGraph::new(layer_graphs.iter().map(|g| g.k).collect());
    for g in layer_graphs {
        let off = merged.offset(g.layer);
        for (&(a, b), &w) in &g.edges {
            merged.add(off + a, off + b, w, EdgeKind::Intra);
        }
    }
    for l in 1..layers {
        let mut lower: HashMap<(usize, &ChannelMask), Vec<(usize, usize)>> = HashMap::new();
        for (m, &a) in mhaps.layers[l - 1].iter().zip(&assignments[l - 1]) {
            lower.entry((m.sample, &m.mask)).or_default().push((m.neuron, a));
        }
        for list in lower.values_mut() {
            list.sort_unstable();
        }
        let (lo_off, hi_off) = (merged.offset(l - 1), merged.offset(l));
        for (m, &a) in mhaps.layers[l].iter().zip(&assignments[l]) {
            let Some(list) = lower.get(&(m.sample, &m.mask)) else { continue };
            let end = m.neuron + kernels[l] - 1;
            let from = list.partition_point(|&(n, _)| n < m.neuron);
            for &(_, b) in list[from..].iter().take_while(|&&(n, _)| n <= end) {
                merged.add(lo_off + b, hi_off + a, 1, EdgeKind::Cross);
            }
        }
    }
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct LayerStats {
    pub nodes: usize,
    pub intra_edges: usize,
    pub intra_weight: u64,
    /// Cross edges ending in this layer.
    pub cross_edges_in: usize,
    pub cross_weight_in: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub total_weight: u64,
    pub per_layer: Vec<LayerStats>,
}

pub fn graph_stats(g: &MergedGraph) -> GraphStats {
    let mut per_layer: Vec<LayerStats> = g
        .layer_sizes
        .iter()
        .map(|&k| LayerStats {
            nodes: k,
            ..Default::default()
        })
        .collect();
    for (&(_, dst), e) in &g.edges {
        let (l, _) = g.node(dst).expect("edge endpoints are graph nodes");
        let s = &mut per_layer[l];
        match e.kind {
            EdgeKind::Intra => {
                s.intra_edges += 1;
                s.intra_weight += e.weight;
            }
            EdgeKind::Cross => {
                s.cross_edges_in += 1;
                s.cross_weight_in += e.weight;
            }
        }
    }
    GraphStats {
        nodes: g.node_count(),
        edges: g.edges.len(),
        total_weight: g.edges.values().map(|e| e.weight).sum(),
        per_layer,
    }
}

/// Graphviz rendering. Nodes in `highlight` are filled and `path_edges` are
/// drawn bold red. `only` restricts output to the given nodes.
pub fn to_dot(g: &MergedGraph, only: Option<&[usize]>, highlight: &[usize], path_edges: &[(usize, usize)]) -> String {
    let keep = |n: usize| only.is_none_or(|o| o.contains(&n));
    let mut out = String::from("digraph evolution {\n  rankdir=LR;\n  node [shape=circle];\n");
    for (l, &k) in g.layer_sizes.iter().enumerate() {
        let off = g.offset(l);
        let _ = writeln!(out, "  subgraph cluster_layer{l} {{\n    label=\"layer {l}\";");
        for c in 0..k {
            let id = off + c;
            if !keep(id) {
                continue;
            }
            let style = if highlight.contains(&id) { ", style=filled, fillcolor=gold" } else { "" };
            let _ = writeln!(out, "    n{id} [label=\"L{l}C{c}\"{style}];");
        }
        out.push_str("  }\n");
    }
    for (&(s, d), e) in &g.edges {
        if !keep(s) || !keep(d) {
            continue;
        }
        let mut attrs = format!("weight={}, label=\"{}\"", e.weight, e.weight);
        if e.kind == EdgeKind::Cross {
            attrs.push_str(", style=dashed");
        }
        if path_edges.contains(&(s, d)) {
            attrs.push_str(", color=red, penwidth=2");
        }
        let _ = writeln!(out, "  n{s} -> n{d} [{attrs}];");
    }
    out.push_str("}\n");
    out
}

const ADJ_HEADER: &str = "# mts2graph-graph v1";

/// Tab-separated `src dst weight kind` rows after a header naming layer sizes.
pub fn write_adjacency(g: &MergedGraph) -> String {
    let sizes: Vec<String> = g.layer_sizes.iter().map(usize::to_string).collect();
    let mut out = format!("{ADJ_HEADER}\n# layers={}\n# src\tdst\tweight\tkind\n", sizes.join(","));
    for (&(s, d), e) in &g.edges {
        let _ = writeln!(out, "{s}\t{d}\t{}\t{}", e.weight, e.kind.as_str());
    }
    out
}

pub fn read_adjacency(text: &str) -> Result<MergedGraph> {
    let bad = |line: usize, message: String| Error::Format {
        path: "<graph>".into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ADJ_HEADER => {}
        _ => return Err(bad(1, "missing graph header".into())),
    }
    let sizes_line = lines.next().map(|(_, l)| l).unwrap_or_default();
    let sizes = sizes_line
        .strip_prefix("# layers=")
        .ok_or_else(|| bad(2, "missing layer sizes".into()))?;
    let layer_sizes = if sizes.is_empty() {
        Vec::new()
    } else {
        sizes
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|e| bad(2, e.to_string())))
            .collect::<Result<Vec<_>>>()?
    };
    let mut g = MergedGraph::new(layer_sizes);
    let n = g.node_count();
    for (i, line) in lines {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let s: usize = f[0].parse().map_err(|_| bad(i + 1, format!("bad source {:?}", f[0])))?;
        let d: usize = f[1].parse().map_err(|_| bad(i + 1, format!("bad target {:?}", f[1])))?;
        let w: u64 = f[2].parse().map_err(|_| bad(i + 1, format!("bad weight {:?}", f[2])))?;
        let kind = match f[3] {
            "intra" => EdgeKind::Intra,
            "cross" => EdgeKind::Cross,
            other => return Err(bad(i + 1, format!("unknown edge kind {other:?}"))),
        };
        if s >= n || d >= n {
            return Err(Error::UnknownNode(s.max(d)));
        }
        if w == 0 {
            return Err(bad(i + 1, "zero edge weight".into()));
        }
        g.add(s, d, w, kind);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mhap::Mhap;
    use crate::nn::Window;
    use proptest::prelude::*;

    fn mhap(sample: usize, mask: &str, layer: usize, neuron: usize) -> Mhap {
        Mhap {
            sample,
            mask: ChannelMask::parse(mask).unwrap(),
            layer,
            channel: 0,
            neuron,
            window: Window { start: neuron, end: neuron },
            peak: 1.0,
            values: vec![],
        }
    }

    #[test]
    fn path_counts() {
        let g = build_layer_graph(0, &[vec![0, 1, 1, 2]], 3).unwrap();
        let expect: BTreeMap<_, _> = [((0, 1), 1), ((1, 1), 1), ((1, 2), 1)].into_iter().collect();
        assert_eq!(g.edges, expect);
        let g = build_layer_graph(0, &[vec![29, 25, 10]], 30).unwrap();
        assert_eq!(g.edges.keys().copied().collect::<Vec<_>>(), vec![(25, 10), (29, 25)]);
        let g = build_layer_graph(0, &[vec![0, 1], vec![0, 1]], 2).unwrap();
        assert_eq!(g.edges[&(0, 1)], 2);
        assert!(build_layer_graph(0, &[vec![0, 5]], 3).is_err());
    }

    #[test]
    fn no_pairs_across_samples() {
        let g = build_layer_graph(0, &[vec![0], vec![1], vec![]], 2).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn kernel_window_cross_edges() {
        // Kernels [5, 3]: the layer-1 MHAP at neuron 4 covers layer-0 neurons 4..=6.
        let set = MhapSet {
            channels: 1,
            layers: vec![
                vec![mhap(0, "1", 0, 4), mhap(0, "1", 0, 6), mhap(0, "1", 0, 7)],
                vec![mhap(0, "1", 1, 4)],
            ],
        };
        let assign = vec![vec![0, 1, 0], vec![0]];
        let graphs = vec![build_layer_graph(0, &[vec![0, 1, 0]], 2).unwrap(), build_layer_graph(1, &[vec![0]], 1).unwrap()];
        let g = merge_graphs(&graphs, &set, &assign, &[5, 3]).unwrap();
        let cross: Vec<_> = g.edges.iter().filter(|(_, e)| e.kind == EdgeKind::Cross).map(|(k, e)| (*k, e.weight)).collect();
        assert_eq!(cross, vec![((0, 2), 1), ((1, 2), 1)]);
    }

    #[test]
    fn disjoint_union_without_overlap() {
        let set = MhapSet {
            channels: 2,
            layers: vec![vec![mhap(0, "10", 0, 0)], vec![mhap(0, "01", 1, 0), mhap(1, "10", 1, 0)]],
        };
        let assign = vec![vec![0], vec![0, 0]];
        let graphs = vec![build_layer_graph(0, &[vec![0], vec![]], 1).unwrap(), build_layer_graph(1, &[vec![0], vec![0]], 1).unwrap()];
        let g = merge_graphs(&graphs, &set, &assign, &[3, 3]).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(g.node_count(), 2);
        let bad = merge_graphs(&graphs, &set, &[vec![0], vec![0, 1]], &[3, 3]);
        assert!(matches!(bad, Err(Error::Provenance(_))));
    }

    #[test]
    fn stats_and_round_trip() {
        assert_eq!(graph_stats(&MergedGraph::default()), GraphStats::default());
        let lg = build_layer_graph(0, &[vec![29, 25, 10, 3]], 30).unwrap();
        let set = MhapSet {
            channels: 1,
            layers: vec![vec![mhap(0, "1", 0, 0); 4]],
        };
        let g = merge_graphs(&[lg], &set, &[vec![29, 25, 10, 3]], &[3]).unwrap();
        let st = graph_stats(&g);
        assert_eq!((st.nodes, st.edges, st.total_weight), (30, 3, 3));
        assert_eq!(read_adjacency(&write_adjacency(&g)).unwrap(), g);
        let dot = to_dot(&g, None, &[29], &[(29, 25)]);
        assert!(dot.contains("L0C29"));
        assert!(dot.contains("n29 -> n25 [weight=1, label=\"1\", color=red"));
        assert_eq!(g.label(25).unwrap(), "L0C25");
        assert!(g.node(30).is_err());
    }

    proptest! {
        #[test]
        fn weight_conservation(seqs in prop::collection::vec(prop::collection::vec(0usize..6, 0..12), 0..10)) {
            let g = build_layer_graph(0, &seqs, 6).unwrap();
            let pairs: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
            prop_assert_eq!(g.total_weight(), pairs as u64);
            let mut reversed = seqs.clone();
            reversed.reverse();
            prop_assert_eq!(build_layer_graph(0, &reversed, 6).unwrap(), g);
        }
    }
}
