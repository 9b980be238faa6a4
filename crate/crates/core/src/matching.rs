//! Bipartite matching between predicted queries and ground-truth pieces, and
//! the set-prediction loss built on it.
//!
//! The matching cost of query `i` against item `j` is
//! `-class_weight * p_i(class_j) + coord_weight * L1(coord_i, coord_j)` with
//! coordinates scaled from the `[0, 7]` grid to `[0, 1]`. There is no box
//! extent anywhere: pieces are points on the board grid.

use serde::{Deserialize, Serialize};

use crate::targets::{softmax, DetectionTargetSet, PredictionSet, EMPTY_CLASS, NUM_CLASSES};

/// Grid coordinates are divided by this before entering costs and losses.
pub const COORD_SCALE: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class_weight: f64,
    pub coord_weight: f64,
    /// Relative weight of unmatched (background) queries in the class term.
    pub background_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { class_weight: 1.0, coord_weight: 5.0, background_weight: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchingError {
    #[error("cost matrix has {rows} rows for {cols} columns; need rows >= cols")]
    TooFewRows { rows: usize, cols: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix data has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
}

/// Rows are predicted queries, columns ground-truth items.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<CostMatrix, MatchingError> {
        if data.len() != rows * cols {
            return Err(MatchingError::Shape { expected: rows * cols, got: data.len() });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> CostMatrix {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        CostMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn scaled(&self, factor: f64) -> CostMatrix {
        CostMatrix { data: self.data.iter().map(|v| v * factor).collect(), ..*self }
    }
}

/// Every column matched to a distinct row.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_for_col[j]` is the query matched to item `j`.
    pub row_for_col: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Inverse view: the item each query is matched to, if any.
    pub fn col_for_row(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for (j, &i) in self.row_for_col.iter().enumerate() {
            out[i] = Some(j);
        }
        out
    }
}

/// Minimum-cost assignment of every column to a distinct row.
///
/// Shortest augmenting paths with vertex potentials (the O(n^2 m) Hungarian
/// method), run with columns as the side being assigned.
pub fn solve_assignment(cost: &CostMatrix) -> Result<Assignment, MatchingError> {
    let (n, m) = (cost.cols, cost.rows);
    if n > m {
        return Err(MatchingError::TooFewRows { rows: m, cols: n });
    }
    if let Some(k) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(MatchingError::NonFinite { row: k / cost.cols, col: k % cost.cols });
    }
    // a(i, j): item i (1-based) against query j (1-based).
    let a = |i: usize, j: usize| cost.get(j - 1, i - 1);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j]: item currently holding query j (0 = free).
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_for_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_for_col[p[j] - 1] = j - 1;
        }
    }
    let total = row_for_col.iter().enumerate().map(|(c, &r)| cost.get(r, c)).sum();
    Ok(Assignment { row_for_col, cost: total })
}

pub fn match_cost(pred: &PredictionSet, target: &DetectionTargetSet, weights: &LossWeights) -> CostMatrix {
    let items = target.items();
    let probs: Vec<Vec<f32>> = pred.queries().iter().map(|q| softmax(&q.class_scores)).collect();
    CostMatrix::from_fn(pred.queries().len(), items.len(), |i, j| {
        let q = &pred.queries()[i];
        let item = &items[j];
        let p = probs[i][item.class_id as usize] as f64;
        let l1 = (q.coord[0] as f64 - item.coord.x as f64).abs() / COORD_SCALE
            + (q.coord[1] as f64 - item.coord.y as f64).abs() / COORD_SCALE;
        -weights.class_weight * p + weights.coord_weight * l1
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class_term: f64,
    pub coord_term: f64,
    pub weights: LossWeights,
    /// Query index matched to each target item.
    pub matched_queries: Vec<usize>,
}

/// Gradient of [`LossBreakdown::total`] with respect to the raw query outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SetLossGradient {
    pub class_scores: Vec<[f64; NUM_CLASSES]>,
    /// With respect to coordinates on the `[0, 7]` scale.
    pub coords: Vec<[f64; 2]>,
}

pub fn set_loss(pred: &PredictionSet, target: &DetectionTargetSet, weights: &LossWeights) -> LossBreakdown {
    set_loss_with_gradient(pred, target, weights).0
}

/// Loss under the optimal matching, with its gradient for that (fixed)
/// matching.
///
/// The class term is a weighted mean of per-query cross-entropies: matched
/// queries against their item's class with weight 1, unmatched queries against
/// the background class with `background_weight`. The coordinate term is the
/// mean normalized L1 distance over matched pairs.
pub fn set_loss_with_gradient(
    pred: &PredictionSet,
    target: &DetectionTargetSet,
    weights: &LossWeights,
) -> (LossBreakdown, SetLossGradient) {
    let queries = pred.queries();
    let items = target.items();
    let cost = match_cost(pred, target, weights);
    let assignment = solve_assignment(&cost).expect("32 queries cover at most 32 items");
    let item_for_query = assignment.col_for_row(queries.len());

    let mut grad = SetLossGradient {
        class_scores: vec![[0.0; NUM_CLASSES]; queries.len()],
        coords: vec![[0.0; 2]; queries.len()],
    };

    let weight_of = |m: Option<usize>| if m.is_some() { 1.0 } else { weights.background_weight };
    let weight_sum: f64 = item_for_query.iter().map(|&m| weight_of(m)).sum();
    let mut class_term = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let label = match item_for_query[i] {
            Some(j) => items[j].class_id,
            None => EMPTY_CLASS,
        } as usize;
        let w = weight_of(item_for_query[i]) / weight_sum;
        let logits: Vec<f64> = q.class_scores.iter().map(|&v| v as f64).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        class_term += w * (log_z - logits[label]);
        for (k, g) in grad.class_scores[i].iter_mut().enumerate() {
            let p = (logits[k] - log_z).exp();
            *g = weights.class_weight * w * (p - if k == label { 1.0 } else { 0.0 });
        }
    }

    let mut coord_term = 0.0;
    if !items.is_empty() {
        let n = items.len() as f64;
        for (j, &i) in assignment.row_for_col.iter().enumerate() {
            let q = queries[i].coord;
            let t = [items[j].coord.x as f64, items[j].coord.y as f64];
            for k in 0..2 {
                let d = q[k] as f64 - t[k];
                coord_term += d.abs() / COORD_SCALE / n;
                grad.coords[i][k] = weights.coord_weight * d.signum() * f64::from(d != 0.0) / COORD_SCALE / n;
            }
        }
    }

    let loss = LossBreakdown {
        total: weights.class_weight * class_term + weights.coord_weight * coord_term,
        class_term,
        coord_term,
        weights: *weights,
        matched_queries: assignment.row_for_col,
    };
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::BoardState;
    use crate::targets::{encode_detection, ClassTable, DetectionItem, QueryPrediction};
    use crate::GridCoord;

    #[test]
    fn two_by_two() {
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        let a = solve_assignment(&c).unwrap();
        assert_eq!(a.row_for_col, vec![0, 1]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn zero_diagonal() {
        let c = CostMatrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 + (i * j) as f64 });
        let a = solve_assignment(&c).unwrap();
        assert_eq!(a.row_for_col, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn rectangular_and_degenerate() {
        let c = CostMatrix::new(3, 1, vec![5.0, -1.0, 2.0]).unwrap();
        assert_eq!(solve_assignment(&c).unwrap().row_for_col, vec![1]);
        let empty = CostMatrix::new(4, 0, vec![]).unwrap();
        assert_eq!(solve_assignment(&empty).unwrap().cost, 0.0);
        let wide = CostMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(solve_assignment(&wide), Err(MatchingError::TooFewRows { .. })));
        let nan = CostMatrix::new(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(solve_assignment(&nan), Err(MatchingError::NonFinite { .. })));
    }

    fn query(class_scores: [f32; NUM_CLASSES], coord: [f32; 2]) -> QueryPrediction {
        QueryPrediction { class_scores, coord }
    }

    #[test]
    fn cost_entries() {
        let w = LossWeights::default();
        let target = DetectionTargetSet::new(vec![DetectionItem { class_id: 3, coord: GridCoord { x: 7, y: 7 } }]).unwrap();
        let mut pred = PredictionSet::perfect(&DetectionTargetSet::default(), 0.0);
        let mut certain = [0.0; NUM_CLASSES];
        certain[3] = 200.0;
        pred.queries_mut()[0] = query(certain, [7.0, 7.0]);
        pred.queries_mut()[1] = query([0.0; NUM_CLASSES], [0.0, 0.0]);
        let c = match_cost(&pred, &target, &w);
        assert!((c.get(0, 0) + w.class_weight).abs() < 1e-12);
        let uniform = 1.0 / NUM_CLASSES as f64;
        let expected = -w.class_weight * uniform + w.coord_weight * 2.0;
        assert!((c.get(1, 0) - expected).abs() < 1e-6);
    }

    #[test]
    fn perfect_predictions_have_vanishing_loss() {
        let table = ClassTable::canonical();
        let target = encode_detection(&BoardState::initial(), &table);
        let loss = set_loss(&PredictionSet::perfect(&target, 60.0), &target, &LossWeights::default());
        assert_eq!(loss.coord_term, 0.0);
        assert!(loss.class_term < 1e-12, "{}", loss.class_term);
        assert!(loss.total < 1e-12);

        let empty = DetectionTargetSet::default();
        let loss = set_loss(&PredictionSet::perfect(&empty, 60.0), &empty, &LossWeights::default());
        assert!(loss.total < 1e-12);
        assert!(loss.matched_queries.is_empty());
    }
}
