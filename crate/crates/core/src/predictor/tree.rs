//! Least-squares regression trees grown level by level with exact greedy
//! split search over sparse, non-negative feature columns.
//!
//! Each column stores only its non-zero entries, sorted by value. Rows
//! missing from a column hold the value zero and are treated as one group
//! sitting at the bottom of the sort order, so a column is scanned in time
//! proportional to its non-zero count.

use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `value <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// `nodes[0]` is the root; children always have larger indices than
    /// their parent.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, fv: &FeatureVector) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if fv.get(feature as usize) <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    /// Checks that the node graph is a well-formed tree over `dim` features
    /// no deeper than `max_depth`.
    pub fn validate(&self, dim: usize, max_depth: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Model("empty tree".into()));
        }
        let mut parents = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Leaf { value } if !value.is_finite() => {
                    return Err(Error::Model(format!("node {i}: non-finite leaf")));
                }
                Node::Leaf { .. } => {}
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature as usize >= dim || !threshold.is_finite() {
                        return Err(Error::Model(format!("node {i}: bad split")));
                    }
                    for child in [left as usize, right as usize] {
                        if child <= i || child >= self.nodes.len() {
                            return Err(Error::Model(format!("node {i}: bad child index {child}")));
                        }
                        parents[child] += 1;
                    }
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(Error::Model("node graph is not a tree".into()));
        }
        if self.depth() > max_depth {
            return Err(Error::Model(format!("tree deeper than max_depth {max_depth}")));
        }
        Ok(())
    }
}

struct Column {
    rows: Vec<u32>,
    values: Vec<f64>,
}

/// Column-major sparse training matrix with non-negative values.
pub(crate) struct ColumnMatrix {
    n_rows: usize,
    columns: Vec<Column>,
}

impl ColumnMatrix {
    pub(crate) fn from_rows(rows: &[FeatureVector], dim: usize) -> Result<Self> {
        let mut entries: Vec<Vec<(f64, u32)>> = (0..dim).map(|_| Vec::new()).collect();
        for (r, fv) in rows.iter().enumerate() {
            if fv.dim() != dim {
                return Err(Error::invalid(format!(
                    "row {r} has {} features, expected {dim}",
                    fv.dim()
                )));
            }
            for &(i, v) in fv.nonzero() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid(format!("row {r}, feature {i}: value {v} not finite and non-negative")));
                }
                if v != 0.0 {
                    entries[i as usize].push((v, r as u32));
                }
            }
        }
        let columns = entries
            .into_iter()
            .map(|mut col| {
                col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                Column {
                    rows: col.iter().map(|e| e.1).collect(),
                    values: col.iter().map(|e| e.0).collect(),
                }
            })
            .collect();
        Ok(Self {
            n_rows: rows.len(),
            columns,
        })
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub(crate) fn n_features(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    sum: f64,
    sum_sq: f64,
    count: usize,
}

impl Stats {
    fn push(&mut self, r: f64) {
        self.sum += r;
        self.sum_sq += r * r;
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Relative tolerance under which two split gains are considered tied.
const GAIN_TIE_TOL: f64 = 1e-12;

fn gain_tol(stats: &Stats) -> f64 {
    GAIN_TIE_TOL * stats.sum_sq + f64::MIN_POSITIVE
}

/// The split a single node would choose, for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChosenSplit {
    pub feature: usize,
    pub threshold: f64,
}

/// Grows one tree on `targets`. Returns the tree and, for every row, the
/// index of the leaf it lands in.
pub(crate) fn grow(matrix: &ColumnMatrix, targets: &[f64], params: GrowParams) -> (Tree, Vec<u32>) {
    let n = matrix.n_rows();
    debug_assert_eq!(targets.len(), n);
    let msl = params.min_samples_leaf.max(1);

    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stats = vec![Stats::default()];
    for &r in targets {
        stats[0].push(r);
    }
    let mut node_of_row = vec![0u32; n];
    let mut frontier: Vec<usize> = vec![0];

    // per-level scratch, indexed by frontier slot
    let mut slot_of_node: Vec<i32> = vec![-1];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        slot_of_node.resize(nodes.len(), -1);
        slot_of_node.fill(-1);
        for (s, &node) in frontier.iter().enumerate() {
            slot_of_node[node] = s as i32;
        }
        let slots = frontier.len();
        let totals: Vec<Stats> = frontier.iter().map(|&i| stats[i]).collect();
        let tols: Vec<f64> = totals.iter().map(gain_tol).collect();
        let mut best: Vec<Option<Candidate>> = vec![None; slots];

        let mut nz_sum = vec![0.0f64; slots];
        let mut nz_cnt = vec![0usize; slots];
        let mut left_sum = vec![0.0f64; slots];
        let mut left_cnt = vec![0usize; slots];
        let mut last: Vec<Option<f64>> = vec![None; slots];

        for (f, col) in matrix.columns.iter().enumerate() {
            if col.rows.is_empty() {
                // all-zero column: no threshold separates anything
                continue;
            }
            nz_sum.fill(0.0);
            nz_cnt.fill(0);
            for &row in &col.rows {
                let s = slot_of_node[node_of_row[row as usize] as usize];
                if s >= 0 {
                    nz_sum[s as usize] += targets[row as usize];
                    nz_cnt[s as usize] += 1;
                }
            }
            for s in 0..slots {
                let zeros = totals[s].count - nz_cnt[s];
                left_cnt[s] = zeros;
                left_sum[s] = totals[s].sum - nz_sum[s];
                last[s] = (zeros > 0).then_some(0.0);
            }
            for (&row, &v) in col.rows.iter().zip(&col.values) {
                let s = slot_of_node[node_of_row[row as usize] as usize];
                if s < 0 {
                    continue;
                }
                let s = s as usize;
                if let Some(prev) = last[s] {
                    if v > prev {
                        let total = &totals[s];
                        let (lc, rc) = (left_cnt[s], total.count - left_cnt[s]);
                        if lc >= msl && rc >= msl {
                            let ls = left_sum[s];
                            let rs = total.sum - ls;
                            let gain = ls * ls / lc as f64 + rs * rs / rc as f64
                                - total.sum * total.sum / total.count as f64;
                            let better = match best[s] {
                                None => gain > tols[s],
                                Some(b) => gain > b.gain + tols[s],
                            };
                            if better {
                                let mid = 0.5 * (prev + v);
                                let threshold = if mid < v { mid } else { prev };
                                best[s] = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold,
                                });
                            }
                        }
                    }
                }
                left_sum[s] += targets[row as usize];
                left_cnt[s] += 1;
                last[s] = Some(v);
            }
        }

        let mut next = Vec::new();
        let mut split_of_slot: Vec<Option<(usize, usize, Candidate)>> = vec![None; slots];
        for (s, &node) in frontier.iter().enumerate() {
            if let Some(c) = best[s] {
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                stats.push(Stats::default());
                stats.push(Stats::default());
                nodes[node] = Node::Split {
                    feature: c.feature as u32,
                    threshold: c.threshold,
                    left: left as u32,
                    right: right as u32,
                };
                split_of_slot[s] = Some((left, right, c));
                next.push(left);
                next.push(right);
            }
        }
        if next.is_empty() {
            break;
        }

        // route: everything to the left child, then move rows above the
        // threshold to the right by scanning the chosen column
        for node in node_of_row.iter_mut() {
            let s = slot_of_node[*node as usize];
            if s >= 0 {
                if let Some((left, _, _)) = split_of_slot[s as usize] {
                    *node = left as u32;
                }
            }
        }
        for &(left, right, c) in split_of_slot.iter().flatten() {
            let col = &matrix.columns[c.feature];
            for (&row, &v) in col.rows.iter().zip(&col.values) {
                let r = row as usize;
                if node_of_row[r] as usize == left && v > c.threshold {
                    node_of_row[r] = right as u32;
                }
            }
        }
        let first_new = nodes.len() - next.len();
        for (r, &node) in node_of_row.iter().enumerate() {
            if node as usize >= first_new {
                stats[node as usize].push(targets[r]);
            }
        }
        frontier = next;
    }

    for (i, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf { value } = node {
            *value = stats[i].mean();
        }
    }
    (Tree { nodes }, node_of_row)
}

/// Best root split of a single tree, or `None` if no split reduces error.
pub fn best_root_split(rows: &[FeatureVector], targets: &[f64], min_samples_leaf: usize) -> Result<Option<ChosenSplit>> {
    let dim = rows.first().map_or(0, FeatureVector::dim);
    let matrix = ColumnMatrix::from_rows(rows, dim)?;
    let (tree, _) = grow(
        &matrix,
        targets,
        GrowParams {
            max_depth: 1,
            min_samples_leaf,
        },
    );
    Ok(match tree.nodes[0] {
        Node::Split {
            feature, threshold, ..
        } => Some(ChosenSplit {
            feature: feature as usize,
            threshold,
        }),
        Node::Leaf { .. } => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::features::{featurize, FeatureConfig, Variant};

    pub(crate) fn rows_from_dense(data: &[Vec<f64>]) -> Vec<FeatureVector> {
        data.iter().map(|r| FeatureVector::from_dense(r)).collect()
    }

    #[test]
    fn three_point_stump() {
        let rows = rows_from_dense(&[vec![1.0], vec![2.0], vec![3.0]]);
        let base = 10.0 / 3.0;
        let targets: Vec<f64> = [0.0, 0.0, 10.0].iter().map(|y| y - base).collect();
        let m = ColumnMatrix::from_rows(&rows, 1).unwrap();
        let (tree, leaf_of) = grow(&m, &targets, GrowParams { max_depth: 1, min_samples_leaf: 1 });
        match tree.nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 2.5);
            }
            _ => panic!("expected split"),
        }
        let preds: Vec<f64> = rows.iter().map(|r| base + tree.predict(r)).collect();
        for (p, want) in preds.iter().zip([0.0, 0.0, 10.0]) {
            assert!((p - want).abs() < 1e-12);
        }
        assert_eq!(leaf_of[0], leaf_of[1]);
        assert_ne!(leaf_of[0], leaf_of[2]);
    }

    #[test]
    fn zero_group_is_splittable() {
        // feature is zero for the first two rows and positive for the rest
        let rows = rows_from_dense(&[vec![0.0], vec![0.0], vec![4.0], vec![6.0]]);
        let targets = [-1.0, -1.0, 1.0, 1.0];
        let split = best_root_split(&rows, &targets, 1).unwrap().unwrap();
        assert_eq!(split.feature, 0);
        assert_eq!(split.threshold, 2.0);
    }

    #[test]
    fn min_samples_leaf_respected() {
        let rows = rows_from_dense(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let targets = [0.0, 0.0, 0.0, 9.0];
        let split = best_root_split(&rows, &targets, 2).unwrap().unwrap();
        assert_eq!(split.threshold, 2.5);
        assert!(best_root_split(&rows, &targets, 3).unwrap().is_none());
    }

    #[test]
    fn constant_targets_do_not_split() {
        let rows = rows_from_dense(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert!(best_root_split(&rows, &[0.0; 3], 1).unwrap().is_none());
    }

    #[test]
    fn tie_prefers_lowest_feature() {
        let rows = rows_from_dense(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        let split = best_root_split(&rows, &[-1.0, 1.0], 1).unwrap().unwrap();
        assert_eq!(split.feature, 0);
    }

    #[test]
    fn deep_tree_is_valid_and_fits() {
        let cfg = FeatureConfig::new(32);
        let prompts: Vec<String> = (0..64).map(|i| "word ".repeat(i % 16 + 1)).collect();
        let rows: Vec<FeatureVector> = prompts
            .iter()
            .map(|p| featurize(p, Variant::TextOnly, &cfg))
            .collect();
        let targets: Vec<f64> = (0..64).map(|i| (i % 16) as f64).collect();
        let m = ColumnMatrix::from_rows(&rows, cfg.dim(Variant::TextOnly)).unwrap();
        let (tree, leaf_of) = grow(&m, &targets, GrowParams { max_depth: 4, min_samples_leaf: 1 });
        tree.validate(cfg.dim(Variant::TextOnly), 4).unwrap();
        assert_eq!(tree.num_leaves(), 16);
        for (r, row) in rows.iter().enumerate() {
            assert!((tree.predict(row) - targets[r]).abs() < 1e-12);
            assert_eq!(tree.nodes[leaf_of[r] as usize], Node::Leaf { value: targets[r] });
        }
    }

    #[test]
    fn validate_rejects_cycles_and_bad_indices() {
        let t = Tree {
            nodes: vec![Node::Split {
                feature: 0,
                threshold: 0.5,
                left: 0,
                right: 1,
            }],
        };
        assert!(t.validate(1, 3).is_err());
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 5, threshold: 0.5, left: 1, right: 2 },
                Node::Leaf { value: 0.0 },
                Node::Leaf { value: 0.0 },
            ],
        };
        assert!(t.validate(2, 3).is_err());
        assert!(t.validate(6, 3).is_ok());
        assert!(t.validate(6, 0).is_err());
    }

    #[test]
    fn negative_values_rejected() {
        let rows = rows_from_dense(&[vec![-1.0]]);
        assert!(ColumnMatrix::from_rows(&rows, 1).is_err());
    }
}
