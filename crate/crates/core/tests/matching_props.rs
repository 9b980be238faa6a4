//! Assignment exactness against exhaustive search, the set loss against a
//! scalar reference, and gradient checks.

use chessrec_core::matching::{
    match_cost, set_loss, set_loss_with_gradient, solve_assignment, CostMatrix, LossWeights,
};
use chessrec_core::targets::{DetectionItem, DetectionTargetSet, PredictionSet, QueryPrediction, NUM_CLASSES};
use chessrec_core::GridCoord;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Minimum over every injection of columns into rows.
fn brute_force(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if col == c.cols() {
            *best = best.min(acc);
            return;
        }
        for r in 0..c.rows() {
            if !used[r] {
                used[r] = true;
                go(c, col + 1, used, acc + c.get(r, col), best);
                used[r] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.rows()], 0.0, &mut best);
    best
}

#[test]
fn five_hundred_matrices_match_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(0..=rows);
        let data = (0..rows * cols).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let c = CostMatrix::new(rows, cols, data).unwrap();
        let a = solve_assignment(&c).unwrap();
        let mut seen = a.row_for_col.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), cols, "assignment not injective");
        let recomputed: f64 = a.row_for_col.iter().enumerate().map(|(j, &i)| c.get(i, j)).sum();
        assert!((recomputed - a.cost).abs() < 1e-9);
        assert!((a.cost - brute_force(&c)).abs() < 1e-9);
    }
}

#[test]
fn positive_scaling_keeps_the_argmin() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let n = rng.gen_range(1..=7);
        // Ties may pick a different argmin, so compare costs under the original matrix.
        let data = (0..n * n).map(|_| rng.gen_range(0..1000) as f64).collect();
        let c = CostMatrix::new(n, n, data).unwrap();
        let a = solve_assignment(&c).unwrap();
        let b = solve_assignment(&c.scaled(rng.gen_range(0.01..100.0))).unwrap();
        let cost_b: f64 = b.row_for_col.iter().enumerate().map(|(j, &i)| c.get(i, j)).sum();
        assert_eq!(cost_b, a.cost);
    }
}

#[derive(Deserialize)]
struct OQuery {
    scores: Vec<f32>,
    coord: [f32; 2],
}

#[derive(Deserialize)]
struct OItem {
    class: u8,
    x: u8,
    y: u8,
}

#[derive(Deserialize)]
struct CostFixture {
    queries: Vec<OQuery>,
    items: Vec<OItem>,
    matrix: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct Expected {
    matched_queries: Vec<usize>,
    class_term: f64,
    coord_term: f64,
    total: f64,
}

#[derive(Deserialize)]
struct LossFixture {
    queries: Vec<OQuery>,
    items: Vec<OItem>,
    expected: Expected,
}

#[derive(Deserialize)]
struct Oracle {
    cost_3x2: CostFixture,
    loss_2_targets: LossFixture,
}

fn oracle() -> Oracle {
    serde_json::from_str(include_str!("fixtures/matching_oracle.json")).unwrap()
}

fn to_query(q: &OQuery) -> QueryPrediction {
    QueryPrediction { class_scores: q.scores.clone().try_into().unwrap(), coord: q.coord }
}

fn to_target(items: &[OItem]) -> DetectionTargetSet {
    DetectionTargetSet::new(
        items.iter().map(|i| DetectionItem { class_id: i.class, coord: GridCoord { x: i.x, y: i.y } }).collect(),
    )
    .unwrap()
}

/// Column of an oracle item; the set type stores items sorted by cell.
fn column_of(target: &DetectionTargetSet, item: &OItem) -> usize {
    target.items().iter().position(|i| i.coord == GridCoord { x: item.x, y: item.y }).unwrap()
}

/// Pads with certain-background queries far from the board.
fn padded(mut qs: Vec<QueryPrediction>) -> PredictionSet {
    let mut bg = [0.0; NUM_CLASSES];
    bg[12] = 30.0;
    while qs.len() < 32 {
        qs.push(QueryPrediction { class_scores: bg, coord: [3.5, 3.5] });
    }
    PredictionSet::new(qs).unwrap()
}

#[test]
fn three_by_two_cost_matches_reference() {
    let f = oracle().cost_3x2;
    let pred = padded(f.queries.iter().map(to_query).collect());
    let target = to_target(&f.items);
    let c = match_cost(&pred, &target, &LossWeights::default());
    assert_eq!((c.rows(), c.cols()), (32, 2));
    for (i, row) in f.matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let col = column_of(&target, &f.items[j]);
            assert!((c.get(i, col) - v).abs() < 1e-6, "({i},{j}) {} vs {v}", c.get(i, col));
        }
    }
}

#[test]
fn two_target_loss_matches_exhaustive_reference() {
    let f = oracle().loss_2_targets;
    let pred = PredictionSet::new(f.queries.iter().map(to_query).collect()).unwrap();
    let target = to_target(&f.items);
    let loss = set_loss(&pred, &target, &LossWeights::default());
    for (item, &q) in f.items.iter().zip(&f.expected.matched_queries) {
        assert_eq!(loss.matched_queries[column_of(&target, item)], q);
    }
    assert!((loss.class_term - f.expected.class_term).abs() < 1e-9);
    assert!((loss.coord_term - f.expected.coord_term).abs() < 1e-9);
    assert!((loss.total - f.expected.total).abs() < 1e-9);
}

fn random_case(rng: &mut ChaCha8Rng) -> (PredictionSet, DetectionTargetSet) {
    let qs = (0..32)
        .map(|_| {
            let mut s = [0.0; NUM_CLASSES];
            s.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
            QueryPrediction { class_scores: s, coord: [rng.gen_range(0.0..7.0), rng.gen_range(0.0..7.0)] }
        })
        .collect();
    let mut cells: Vec<u8> = (0..64).collect();
    cells.shuffle(rng);
    let n = rng.gen_range(0..=8);
    let items = cells[..n]
        .iter()
        .map(|&c| DetectionItem { class_id: rng.gen_range(0..12), coord: GridCoord::from_flat(c as usize).unwrap() })
        .collect();
    (PredictionSet::new(qs).unwrap(), DetectionTargetSet::new(items).unwrap())
}

#[test]
fn loss_is_nonnegative_and_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = LossWeights::default();
    for _ in 0..200 {
        let (pred, target) = random_case(&mut rng);
        let base = set_loss(&pred, &target, &w);
        assert!(base.total >= 0.0 && base.class_term >= 0.0 && base.coord_term >= 0.0);
        assert!((base.total - (w.class_weight * base.class_term + w.coord_weight * base.coord_term)).abs() < 1e-12);
        let mut qs = pred.queries().to_vec();
        qs.shuffle(&mut rng);
        let shuffled = set_loss(&PredictionSet::new(qs).unwrap(), &target, &w);
        assert!((shuffled.total - base.total).abs() < 1e-9);
        // Target order is canonicalized by the set type, so rebuilding it
        // from a shuffled item list must not change anything either.
        let mut items = target.items().to_vec();
        items.shuffle(&mut rng);
        let again = set_loss(&pred, &DetectionTargetSet::new(items).unwrap(), &w);
        assert!((again.total - base.total).abs() < 1e-12);
    }
}

#[test]
fn coordinate_gradients_match_central_differences() {
    let f = oracle().loss_2_targets;
    let pred = PredictionSet::new(f.queries.iter().map(to_query).collect()).unwrap();
    let target = to_target(&f.items);
    let w = LossWeights::default();
    let (_, grad) = set_loss_with_gradient(&pred, &target, &w);
    let h = 1e-2f32;
    let mut checked = 0;
    for i in 0..32 {
        for k in 0..2 {
            let mut plus = pred.clone();
            plus.queries_mut()[i].coord[k] += h;
            let mut minus = pred.clone();
            minus.queries_mut()[i].coord[k] -= h;
            let step = (plus.queries()[i].coord[k] - minus.queries()[i].coord[k]) as f64;
            let numeric = (set_loss(&plus, &target, &w).total - set_loss(&minus, &target, &w).total) / step;
            let analytic = grad.coords[i][k];
            let scale = analytic.abs().max(numeric.abs()).max(1e-12);
            assert!((numeric - analytic).abs() / scale < 1e-3 || (numeric - analytic).abs() < 1e-9,
                "query {i} axis {k}: analytic {analytic} numeric {numeric}");
            checked += (analytic != 0.0) as usize;
        }
    }
    assert_eq!(checked, 4);
}

#[test]
fn class_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = LossWeights::default();
    let (pred, target) = random_case(&mut rng);
    let (_, grad) = set_loss_with_gradient(&pred, &target, &w);
    let h = 1e-3f32;
    for i in [0, 5, 17, 31] {
        for k in 0..NUM_CLASSES {
            let mut plus = pred.clone();
            plus.queries_mut()[i].class_scores[k] += h;
            let mut minus = pred.clone();
            minus.queries_mut()[i].class_scores[k] -= h;
            let step = (plus.queries()[i].class_scores[k] - minus.queries()[i].class_scores[k]) as f64;
            let lp = set_loss(&plus, &target, &w);
            let lm = set_loss(&minus, &target, &w);
            if lp.matched_queries != lm.matched_queries {
                continue;
            }
            let numeric = (lp.total - lm.total) / step;
            assert!((numeric - grad.class_scores[i][k]).abs() < 1e-4, "{numeric} vs {}", grad.class_scores[i][k]);
        }
    }
}
