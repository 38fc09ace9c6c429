//! Fixed-length sample features: node embeddings summed per time segment and
//! concatenated in segment order.

use std::fmt::Write as _;

use crate::embedding::NodeEmbeddings;
use crate::error::{Error, Result};

/// Segment count `ceil(len / segment_length)`.
pub fn segment_count(len: usize, segment_length: usize) -> usize {
    len.div_ceil(segment_length)
}

/// One MHAP reduced to what the representation needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placed {
    /// First input time step of the MHAP window.
    pub start: usize,
    /// Merged-graph node of its cluster.
    pub node: usize,
}

/// Segment `m` covers `[m s, min((m + 1) s, len) - 1]`; each MHAP adds its node
/// vector to the block of the segment holding its window start.
pub fn represent_sample(mhaps: &[Placed], emb: &NodeEmbeddings, segment_length: usize, len: usize) -> Result<Vec<f64>> {
    if segment_length == 0 {
        return Err(Error::Config("segment_length must be at least 1".into()));
    }
    let d = emb.dim;
    let m = segment_count(len, segment_length);
    let mut out = vec![0.0; m * d];
    for p in mhaps {
        if p.start >= len {
            return Err(Error::OutOfRange {
                what: "window start",
                index: p.start,
                len,
            });
        }
        let seg = p.start / segment_length;
        let v = emb.get(p.node)?;
        out[seg * d..(seg + 1) * d].iter_mut().zip(v).for_each(|(o, x)| *o += x);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub segment_length: usize,
    pub dim: usize,
    /// Row-major.
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Header line, then one `label v_0 .. v_{MD-1}` row per sample.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# mts2graph-features v1 rows={} cols={} segment={} dim={}\n",
            self.rows, self.cols, self.segment_length, self.dim
        );
        for i in 0..self.rows {
            let _ = write!(out, "{}", self.labels[i]);
            for v in self.row(i) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Format {
            path: "<features>".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let rest = header
            .strip_prefix("# mts2graph-features v1 ")
            .ok_or_else(|| bad(1, "missing features header".into()))?;
        let mut fields = [0usize; 4];
        for (slot, (part, key)) in fields.iter_mut().zip(rest.split_whitespace().zip(["rows=", "cols=", "segment=", "dim="])) {
            *slot = part
                .strip_prefix(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(1, format!("expected {key}<n>, found {part:?}")))?;
        }
        let [rows, cols, segment_length, dim] = fields;
        let mut data = Vec::with_capacity(rows * cols);
        let mut labels = Vec::with_capacity(rows);
        for (i, line) in lines.enumerate() {
            let mut f = line.split_whitespace();
            let label = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(i + 2, "missing label".into()))?;
            let before = data.len();
            for s in f {
                data.push(s.parse::<f64>().map_err(|_| bad(i + 2, format!("bad value {s:?}")))?);
            }
            if data.len() - before != cols {
                return Err(Error::Length {
                    expected: cols,
                    found: data.len() - before,
                });
            }
            labels.push(label);
        }
        if labels.len() != rows {
            return Err(bad(0, format!("expected {rows} rows, found {}", labels.len())));
        }
        Ok(Self {
            rows,
            cols,
            segment_length,
            dim,
            data,
            labels,
        })
    }
}

/// Row `i` is [`represent_sample`] of `per_sample[i]`.
pub fn represent_dataset(
    per_sample: &[Vec<Placed>],
    labels: &[usize],
    emb: &NodeEmbeddings,
    segment_length: usize,
    len: usize,
) -> Result<FeatureMatrix> {
    if per_sample.len() != labels.len() {
        return Err(Error::Length {
            expected: per_sample.len(),
            found: labels.len(),
        });
    }
    let cols = segment_count(len, segment_length.max(1)) * emb.dim;
    let mut data = Vec::with_capacity(per_sample.len() * cols);
    for p in per_sample {
        data.extend(represent_sample(p, emb, segment_length, len)?);
    }
    Ok(FeatureMatrix {
        rows: per_sample.len(),
        cols,
        segment_length,
        dim: emb.dim,
        data,
        labels: labels.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(nodes: usize, dim: usize) -> NodeEmbeddings {
        NodeEmbeddings {
            dim,
            seed: 0,
            vectors: (0..nodes).map(|n| (0..dim).map(|j| (n * 31 + j * 7) as f64 * 0.01 - 0.5).collect()).collect(),
        }
    }

    #[test]
    fn lengths() {
        let e = emb(3, 100);
        assert_eq!(represent_sample(&[], &e, 10, 100).unwrap().len(), 1000);
        assert!(represent_sample(&[], &e, 10, 100).unwrap().iter().all(|&v| v == 0.0));
        let e8 = emb(1, 8);
        let fm = represent_dataset(&vec![vec![]; 4], &[0, 1, 0, 1], &e8, 10, 37).unwrap();
        assert_eq!((fm.rows, fm.cols), (4, 32));
    }

    #[test]
    fn segment_three_sum() {
        let e = emb(5, 4);
        let r = represent_sample(&[Placed { start: 30, node: 1 }, Placed { start: 39, node: 4 }], &e, 10, 100).unwrap();
        for (seg, block) in r.chunks(4).enumerate() {
            if seg == 3 {
                let expect: Vec<f64> = (0..4).map(|j| e.vectors[1][j] + e.vectors[4][j]).collect();
                assert_eq!(block, expect.as_slice());
            } else {
                assert!(block.iter().all(|&v| v == 0.0));
            }
        }
        assert!(matches!(represent_sample(&[Placed { start: 0, node: 9 }], &e, 10, 100), Err(Error::UnknownNode(9))));
    }

    #[test]
    fn order_changes_representation_not_global_sum() {
        let e = emb(2, 3);
        let a = [Placed { start: 5, node: 0 }, Placed { start: 55, node: 1 }];
        let b = [Placed { start: 5, node: 1 }, Placed { start: 55, node: 0 }];
        let ra = represent_sample(&a, &e, 10, 100).unwrap();
        let rb = represent_sample(&b, &e, 10, 100).unwrap();
        assert!(ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() > 0.0);
        assert_eq!(represent_sample(&a, &e, 100, 100).unwrap(), represent_sample(&b, &e, 100, 100).unwrap());
    }

    #[test]
    fn text_round_trip() {
        let e = emb(3, 2);
        let fm = represent_dataset(&[vec![Placed { start: 1, node: 2 }], vec![]], &[1, 0], &e, 4, 9).unwrap();
        assert_eq!(FeatureMatrix::from_text(&fm.to_text()).unwrap(), fm);
    }

    proptest! {
        #[test]
        fn additive(starts in prop::collection::vec((0usize..50, 0usize..4), 0..12), s in 1usize..20) {
            let e = emb(4, 3);
            let placed: Vec<Placed> = starts.iter().map(|&(start, node)| Placed { start, node }).collect();
            let whole = represent_sample(&placed, &e, s, 50).unwrap();
            let mut sum = vec![0.0; whole.len()];
            for p in &placed {
                let one = represent_sample(&[*p], &e, s, 50).unwrap();
                sum.iter_mut().zip(one).for_each(|(a, b)| *a += b);
            }
            prop_assert!(whole.iter().zip(&sum).all(|(a, b)| (a - b).abs() < 1e-12));
        }

        #[test]
        fn permuting_samples_permutes_rows(seed in 0u64..100) {
            let e = emb(4, 2);
            let samples: Vec<Vec<Placed>> = (0..5).map(|i| vec![Placed { start: (i * 7 + seed as usize) % 30, node: i % 4 }]).collect();
            let labels = vec![0, 1, 0, 1, 1];
            let fm = represent_dataset(&samples, &labels, &e, 10, 30).unwrap();
            let perm = [3, 0, 4, 1, 2];
            let ps: Vec<_> = perm.iter().map(|&i| samples[i].clone()).collect();
            let pl: Vec<_> = perm.iter().map(|&i| labels[i]).collect();
            let fp = represent_dataset(&ps, &pl, &e, 10, 30).unwrap();
            for (r, &i) in perm.iter().enumerate() {
                prop_assert_eq!(fp.row(r), fm.row(i));
            }
        }
    }
}
