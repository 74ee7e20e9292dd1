//! Regression trees grown by exhaustive squared-error splits.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct TreeParams {
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
}

struct Best {
    cost: f64,
    feature: usize,
    threshold: f64,
    split_at: usize,
}

impl Tree {
    /// Grows a tree on the rows `samples` (indices into `x` and `y`, repeats
    /// allowed). Squared-error decrease per feature is added to `importance`.
    pub(crate) fn fit(x: &[&[f64]], y: &[f64], samples: Vec<usize>, params: TreeParams, importance: &mut [f64]) -> Tree {
        let n_features = importance.len();
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let mut stack = vec![(0usize, samples)];
        while let Some((id, idx)) = stack.pop() {
            let n = idx.len();
            let (sum, sumsq) = idx.iter().fold((0.0, 0.0), |(s, q), &i| (s + y[i], q + y[i] * y[i]));
            let first = y[idx[0]];
            let constant = idx.iter().all(|&i| y[i] == first);
            let leaf = Node::Leaf {
                value: if constant { first } else { sum / n as f64 },
            };
            if constant || n < params.min_samples_split || n < 2 * params.min_samples_leaf {
                nodes[id] = leaf;
                continue;
            }
            let sse = (sumsq - sum * sum / n as f64).max(0.0);
            let mut best: Option<Best> = None;
            let mut order = idx.clone();
            for f in 0..n_features {
                order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
                let (mut ls, mut lq) = (0.0, 0.0);
                for k in 0..n - 1 {
                    let v = y[order[k]];
                    ls += v;
                    lq += v * v;
                    let nl = k + 1;
                    let nr = n - nl;
                    if nl < params.min_samples_leaf || nr < params.min_samples_leaf {
                        continue;
                    }
                    let (a, b) = (x[order[k]][f], x[order[k + 1]][f]);
                    if a >= b {
                        continue;
                    }
                    let (rs, rq) = (sum - ls, sumsq - lq);
                    let cost = (lq - ls * ls / nl as f64).max(0.0) + (rq - rs * rs / nr as f64).max(0.0);
                    if best.as_ref().is_none_or(|bst| cost < bst.cost) {
                        let mid = a + (b - a) / 2.0;
                        best = Some(Best {
                            cost,
                            feature: f,
                            threshold: if mid < b { mid } else { a },
                            split_at: nl,
                        });
                    }
                }
            }
            match best {
                Some(b) if b.cost < sse => {
                    importance[b.feature] += sse - b.cost;
                    order.sort_by(|&p, &q| x[p][b.feature].total_cmp(&x[q][b.feature]).then(p.cmp(&q)));
                    let right_idx = order.split_off(b.split_at);
                    let (l, r) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes[id] = Node::Split {
                        feature: b.feature,
                        threshold: b.threshold,
                        left: l,
                        right: r,
                    };
                    stack.push((r, right_idx));
                    stack.push((l, order));
                }
                _ => nodes[id] = leaf,
            }
        }
        Tree { nodes }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}
