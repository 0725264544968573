//! Cluster-to-digit assignment by exact integer programming.
//!
//! Each example of a batch becomes one linear equation over the `k` cluster
//! variables: the coefficient of cluster `c` is the summed positional weight
//! of the example's cells whose image falls in `c`. The batch problem
//!
//! ```text
//! minimize  sum_e | sum_c A[e][c] * v_c - s_e |    subject to  v_c in {0, ..., 9}
//! ```
//!
//! is solved exactly by depth-first branch-and-bound. Candidates from all
//! batches are then scored on the whole corpus and the one that satisfies the
//! most examples wins.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::dataset::{Corpus, Example};
use crate::error::{Error, Result};

pub const MAX_DIGIT: i64 = 9;

/// Exact integer system `A v ~ s` for a batch of examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSystem {
    pub k: usize,
    /// `rows x k`, row-major.
    pub coefficients: Vec<i64>,
    pub targets: Vec<i64>,
}

impl BatchSystem {
    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, e: usize) -> &[i64] {
        &self.coefficients[e * self.k..(e + 1) * self.k]
    }

    pub fn residual(&self, e: usize, digits: &[u8]) -> i64 {
        let lhs: i64 = self.row(e).iter().zip(digits).map(|(a, &v)| a * v as i64).sum();
        lhs - self.targets[e]
    }

    /// Total L1 residual of `digits` over all rows.
    pub fn objective(&self, digits: &[u8]) -> u64 {
        (0..self.rows()).map(|e| self.residual(e, digits).unsigned_abs()).sum()
    }

    pub fn satisfied(&self, digits: &[u8]) -> usize {
        (0..self.rows()).filter(|&e| self.residual(e, digits) == 0).count()
    }
}

/// Aggregates positional weights per cluster for each example.
pub fn build_batch_system(examples: &[Example], model: &ClusterModel) -> Result<BatchSystem> {
    let k = model.k;
    let mut coefficients = vec![0i64; examples.len() * k];
    let mut targets = Vec::with_capacity(examples.len());
    for (e, ex) in examples.iter().enumerate() {
        for (id, weight) in ex.weighted_cells() {
            let c = *model
                .assignment
                .get(id)
                .ok_or_else(|| Error::Consistency(format!("image {id} has no cluster ({} clustered)", model.len())))?;
            coefficients[e * k + c] += weight as i64;
        }
        targets.push(ex.sum as i64);
    }
    Ok(BatchSystem {
        k,
        coefficients,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigitAssignment {
    pub digits: Vec<u8>,
    /// L1 residual on the batch that produced this assignment.
    pub objective: u64,
    /// Examples satisfied exactly. After [`solve_corpus`] this counts the
    /// whole corpus, after [`solve_batch`] only the batch.
    pub satisfied: usize,
    pub batch_index: usize,
}

impl DigitAssignment {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let a: DigitAssignment = serde_json::from_str(&text)?;
        if a.digits.iter().any(|&d| d > 9) {
            return Err(Error::Format("digit outside 0..=9".into()));
        }
        Ok(a)
    }
}

/// Distance from `target` to the interval `[lo, hi]`.
fn interval_gap(target: i64, lo: i64, hi: i64) -> u64 {
    if target < lo {
        (lo - target) as u64
    } else if target > hi {
        (target - hi) as u64
    } else {
        0
    }
}

/// Sum over rows of the distance from the target to the range reachable by
/// completing `partial` (free variables range over `0..=9`). Never exceeds
/// the objective of any completion.
pub fn lower_bound(sys: &BatchSystem, partial: &[Option<u8>]) -> u64 {
    (0..sys.rows())
        .map(|e| {
            let (mut fixed, mut free) = (0i64, 0i64);
            for (&a, p) in sys.row(e).iter().zip(partial) {
                match p {
                    Some(v) => fixed += a * *v as i64,
                    None => free += a,
                }
            }
            interval_gap(sys.targets[e], fixed, fixed + MAX_DIGIT * free)
        })
        .sum()
}

/// Search statistics, mostly for diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub nodes: u64,
    pub pruned: u64,
}

struct Search<'a> {
    sys: &'a BatchSystem,
    order: Vec<usize>,
    /// Per variable: the rows where it has a nonzero coefficient.
    columns: Vec<Vec<(usize, i64)>>,
    fixed_sum: Vec<i64>,
    free_mass: Vec<i64>,
    digits: Vec<u8>,
    is_fixed: Vec<bool>,
    best: Vec<u8>,
    best_obj: u64,
    stats: SearchStats,
}

impl Search<'_> {
    fn row_bound(&self, e: usize) -> u64 {
        interval_gap(
            self.sys.targets[e],
            self.fixed_sum[e],
            self.fixed_sum[e] + MAX_DIGIT * self.free_mass[e],
        )
    }

    /// Whether a completion of the current partial vector can still be
    /// lexicographically smaller than the incumbent.
    fn can_beat_lexicographically(&self) -> bool {
        for c in 0..self.sys.k {
            if !self.is_fixed[c] {
                return true;
            }
            match self.digits[c].cmp(&self.best[c]) {
                std::cmp::Ordering::Less => return true,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Equal => {}
            }
        }
        false
    }

    fn admissible(&self, bound: u64) -> bool {
        bound < self.best_obj || (bound == self.best_obj && self.can_beat_lexicographically())
    }

    fn dfs(&mut self, depth: usize, bound: u64) {
        self.stats.nodes += 1;
        if depth == self.order.len() {
            // All variables fixed: the bound is the exact objective.
            if bound < self.best_obj || (bound == self.best_obj && self.digits < self.best) {
                self.best_obj = bound;
                self.best.clone_from(&self.digits);
            }
            return;
        }
        let var = self.order[depth];

        // Child bounds differ from the parent only on rows touching `var`.
        let mut children = [(0u64, 0u8); 10];
        let base: u64 = self.columns[var].iter().map(|&(e, _)| self.row_bound(e)).sum();
        for v in 0..=9u8 {
            let mut touched = 0u64;
            for &(e, a) in &self.columns[var] {
                let fixed = self.fixed_sum[e] + a * v as i64;
                let free = self.free_mass[e] - a;
                touched += interval_gap(self.sys.targets[e], fixed, fixed + MAX_DIGIT * free);
            }
            children[v as usize] = (bound - base + touched, v);
        }
        children.sort_unstable();

        self.is_fixed[var] = true;
        for &(child_bound, v) in &children {
            self.digits[var] = v;
            if !self.admissible(child_bound) {
                self.stats.pruned += 1;
                continue;
            }
            for &(e, a) in &self.columns[var] {
                self.fixed_sum[e] += a * v as i64;
                self.free_mass[e] -= a;
            }
            self.dfs(depth + 1, child_bound);
            for &(e, a) in &self.columns[var] {
                self.fixed_sum[e] -= a * v as i64;
                self.free_mass[e] += a;
            }
        }
        self.is_fixed[var] = false;
        self.digits[var] = 0;
    }
}

/// Coordinate descent from the all-zero vector; gives the search a finite
/// incumbent before it starts.
fn greedy_incumbent(sys: &BatchSystem) -> Vec<u8> {
    let mut digits = vec![0u8; sys.k];
    let mut current = sys.objective(&digits);
    for _ in 0..20 {
        let mut improved = false;
        for c in 0..sys.k {
            for v in 0..=9u8 {
                let keep = digits[c];
                digits[c] = v;
                let obj = sys.objective(&digits);
                if obj < current {
                    current = obj;
                    improved = true;
                } else {
                    digits[c] = keep;
                }
            }
        }
        if !improved {
            break;
        }
    }
    digits
}

/// Globally optimal digits for `sys`, ties broken toward the lexicographically
/// smallest digit vector.
pub fn solve_batch(sys: &BatchSystem) -> DigitAssignment {
    solve_batch_with_stats(sys).0
}

pub fn solve_batch_with_stats(sys: &BatchSystem) -> (DigitAssignment, SearchStats) {
    let k = sys.k;
    let rows = sys.rows();
    let mut mass = vec![0i64; k];
    let mut columns = vec![Vec::new(); k];
    for e in 0..rows {
        for (c, &a) in sys.row(e).iter().enumerate() {
            if a != 0 {
                mass[c] += a;
                columns[c].push((e, a));
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mass[b].cmp(&mass[a]).then(a.cmp(&b)));

    let incumbent = greedy_incumbent(sys);
    let best_obj = sys.objective(&incumbent);
    let free_mass: Vec<i64> = (0..rows).map(|e| sys.row(e).iter().sum()).collect();
    let mut search = Search {
        sys,
        order,
        columns,
        fixed_sum: vec![0; rows],
        free_mass,
        digits: vec![0; k],
        is_fixed: vec![false; k],
        best: incumbent,
        best_obj,
        stats: SearchStats::default(),
    };
    let root: u64 = (0..rows).map(|e| search.row_bound(e)).sum();
    if search.admissible(root) {
        search.dfs(0, root);
    }
    let digits = search.best;
    let assignment = DigitAssignment {
        satisfied: sys.satisfied(&digits),
        objective: search.best_obj,
        digits,
        batch_index: 0,
    };
    (assignment, search.stats)
}

/// Number of corpus examples whose sum is reproduced exactly.
pub fn count_satisfied(assignment: &DigitAssignment, corpus: &Corpus, model: &ClusterModel) -> Result<usize> {
    let sys = build_batch_system(&corpus.examples, model)?;
    Ok(sys.satisfied(&assignment.digits))
}

/// One batch's solution scored on the whole corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub batch_index: usize,
    pub digits: Vec<u8>,
    pub batch_objective: u64,
    pub corpus_satisfied: usize,
    pub corpus_residual: u64,
}

/// Solves every contiguous batch of `batch_size` examples and scores each
/// solution on the whole corpus.
pub fn solve_batches(corpus: &Corpus, model: &ClusterModel, batch_size: usize) -> Result<Vec<Candidate>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    let whole = build_batch_system(&corpus.examples, model)?;
    let mut scored: HashMap<Vec<u8>, (usize, u64)> = HashMap::new();
    let mut candidates = Vec::new();
    for (b, chunk) in corpus.examples.chunks(batch_size).enumerate() {
        let sys = build_batch_system(chunk, model)?;
        let sol = solve_batch(&sys);
        let (sat, res) = *scored
            .entry(sol.digits.clone())
            .or_insert_with(|| (whole.satisfied(&sol.digits), whole.objective(&sol.digits)));
        candidates.push(Candidate {
            batch_index: b,
            digits: sol.digits,
            batch_objective: sol.objective,
            corpus_satisfied: sat,
            corpus_residual: res,
        });
    }
    Ok(candidates)
}

/// The vote: most corpus examples satisfied, then lowest corpus residual,
/// then lowest batch index.
pub fn pick_winner(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates.iter().min_by(|a, b| {
        b.corpus_satisfied
            .cmp(&a.corpus_satisfied)
            .then(a.corpus_residual.cmp(&b.corpus_residual))
            .then(a.batch_index.cmp(&b.batch_index))
    })
}

pub fn solve_corpus(corpus: &Corpus, model: &ClusterModel, batch_size: usize) -> Result<DigitAssignment> {
    let candidates = solve_batches(corpus, model, batch_size)?;
    let win = pick_winner(&candidates).expect("non-empty corpus yields candidates");
    Ok(DigitAssignment {
        digits: win.digits.clone(),
        objective: win.batch_objective,
        satisfied: win.corpus_satisfied,
        batch_index: win.batch_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model_from(assignment: Vec<usize>, k: usize) -> ClusterModel {
        let n = assignment.len();
        ClusterModel {
            k,
            dim: 1,
            centroids: vec![0.0; k],
            assignment,
            distance: vec![0.0; n],
            inertia_history: vec![],
        }
    }

    /// Exhaustive minimum over all 10^k digit vectors, scanned in
    /// lexicographic order so the first minimum is the lexicographic one.
    fn brute_force(sys: &BatchSystem) -> (u64, Vec<u8>, usize) {
        let k = sys.k;
        let mut digits = vec![0u8; k];
        let mut best = (u64::MAX, vec![], 0usize);
        loop {
            let obj = sys.objective(&digits);
            if obj < best.0 {
                best = (obj, digits.clone(), 1);
            } else if obj == best.0 {
                best.2 += 1;
            }
            let mut pos = k;
            loop {
                if pos == 0 {
                    return best;
                }
                pos -= 1;
                if digits[pos] < 9 {
                    digits[pos] += 1;
                    digits[pos + 1..].iter_mut().for_each(|d| *d = 0);
                    break;
                }
            }
        }
    }

    #[test]
    fn row_coefficients_aggregate_positional_weights() {
        let model = model_from(vec![3, 3], 10);
        let ex = Example::new(2, 1, vec![0, 1], 0).unwrap();
        let sys = build_batch_system(&[ex], &model).unwrap();
        assert_eq!(sys.row(0)[3], 11);
        assert_eq!(sys.row(0).iter().sum::<i64>(), 11);
    }

    #[test]
    fn figure_one_shape_row_mass() {
        let model = model_from((0..6).map(|i| i % 4).collect(), 10);
        let ex = Example::new(2, 3, (0..6).collect(), 93).unwrap();
        let sys = build_batch_system(&[ex], &model).unwrap();
        assert_eq!(sys.row(0).iter().sum::<i64>(), 33);
        assert_eq!(sys.targets[0], 93);
    }

    #[test]
    fn unclustered_image_is_consistency_error() {
        let model = model_from(vec![0], 10);
        let ex = Example::new(1, 2, vec![0, 5], 3).unwrap();
        assert!(matches!(build_batch_system(&[ex], &model), Err(Error::Consistency(_))));
    }

    #[test]
    fn single_forced_variable() {
        let model = model_from(vec![7], 10);
        let ex = Example::new(1, 1, vec![0], 4).unwrap();
        let sys = build_batch_system(&[ex], &model).unwrap();
        let sol = solve_batch(&sys);
        assert_eq!(sol.digits[7], 4);
        assert_eq!(sol.objective, 0);
        // Untouched clusters resolve to the lexicographically smallest value.
        assert!(sol.digits.iter().enumerate().all(|(c, &d)| c == 7 || d == 0));
    }

    #[test]
    fn three_cluster_batch_matches_enumeration() {
        let sys = BatchSystem {
            k: 3,
            coefficients: vec![1, 1, 0, 0, 1, 1, 10, 0, 1, 2, 0, 0],
            targets: vec![9, 4, 57, 13],
        };
        let sol = solve_batch(&sys);
        let (obj, argmin, _) = brute_force(&sys);
        assert_eq!(sol.objective, obj);
        assert_eq!(sol.digits, argmin);
    }

    #[test]
    fn all_zero_digits_miss_positive_sums() {
        let model = model_from(vec![0, 1], 2);
        let corpus = Corpus {
            width: 1,
            height: 2,
            oversample_factor: 1,
            examples: vec![
                Example::new(1, 2, vec![0, 1], 5).unwrap(),
                Example::new(1, 2, vec![0, 1], 0).unwrap(),
            ],
        };
        let zeros = DigitAssignment {
            digits: vec![0, 0],
            objective: 0,
            satisfied: 0,
            batch_index: 0,
        };
        assert_eq!(count_satisfied(&zeros, &corpus, &model).unwrap(), 1);
    }

    #[test]
    fn empty_corpus_and_zero_batch_rejected() {
        let model = model_from(vec![0], 1);
        let empty = Corpus {
            width: 1,
            height: 1,
            oversample_factor: 1,
            examples: vec![],
        };
        assert!(solve_corpus(&empty, &model, 100).is_err());
        let one = Corpus {
            examples: vec![Example::new(1, 1, vec![0], 1).unwrap()],
            ..empty
        };
        assert!(solve_corpus(&one, &model, 0).is_err());
        let sol = solve_corpus(&one, &model, 100).unwrap();
        assert_eq!((sol.digits.clone(), sol.batch_index, sol.satisfied), (vec![1], 0, 1));
    }

    #[test]
    fn assignment_json_shape() {
        let a = DigitAssignment {
            digits: vec![1, 2],
            objective: 3,
            satisfied: 4,
            batch_index: 5,
        };
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"digits":[1,2],"objective":3,"satisfied":4,"batch_index":5})
        );
    }

    fn arb_system() -> impl Strategy<Value = BatchSystem> {
        (1usize..=4, 1usize..=3, 1usize..=2, 1usize..=50).prop_flat_map(|(k, w, h, rows)| {
            let cells = w * h;
            (
                prop::collection::vec(prop::collection::vec(0..k, cells), rows),
                prop::collection::vec(0..=9u8, k),
                prop::collection::vec(prop::bool::weighted(0.3), rows),
                prop::collection::vec(0u64..(h as u64 * 10u64.pow(w as u32)), rows),
            )
                .prop_map(move |(grids, truth, noisy, noise)| {
                    let mut coefficients = vec![0i64; rows * k];
                    let mut targets = Vec::with_capacity(rows);
                    for (e, grid) in grids.iter().enumerate() {
                        let mut s = 0i64;
                        for (idx, &c) in grid.iter().enumerate() {
                            let wgt = 10i64.pow((w - 1 - idx % w) as u32);
                            coefficients[e * k + c] += wgt;
                            s += wgt * truth[c] as i64;
                        }
                        targets.push(if noisy[e] { noise[e] as i64 } else { s });
                    }
                    BatchSystem {
                        k,
                        coefficients,
                        targets,
                    }
                })
        })
    }

    fn two_batch_corpus(poison_second: bool) -> (Corpus, ClusterModel) {
        // Four images per cluster, cluster c holds digit c + 1.
        let k = 3;
        let assignment: Vec<usize> = (0..12).map(|i| i % k).collect();
        let truth: Vec<u8> = assignment.iter().map(|&c| c as u8 + 1).collect();
        let mut examples = Vec::new();
        for (b, pairs) in [[(0, 1), (1, 2), (2, 3)], [(3, 4), (4, 5), (5, 6)]].iter().enumerate() {
            for &(x, y) in pairs {
                let grid = vec![x, y];
                let mut sum = truth[x] as u64 + truth[y] as u64;
                if poison_second && b == 1 {
                    sum += 3;
                }
                examples.push(Example::new(1, 2, grid, sum).unwrap());
            }
        }
        let corpus = Corpus {
            width: 1,
            height: 2,
            oversample_factor: 1,
            examples,
        };
        (corpus, model_from(assignment, k))
    }

    #[test]
    fn clean_batch_wins_vote_over_poisoned_batch() {
        let (corpus, model) = two_batch_corpus(true);
        let candidates = solve_batches(&corpus, &model, 3).unwrap();
        assert_eq!(candidates.len(), 2);
        let win = solve_corpus(&corpus, &model, 3).unwrap();
        assert_eq!(win.digits, vec![1, 2, 3]);
        assert_eq!(win.batch_index, 0);
        assert_eq!(win.satisfied, 3);
        let (clean, model) = two_batch_corpus(false);
        assert_eq!(solve_corpus(&clean, &model, 3).unwrap().satisfied, 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn matches_exhaustive_enumeration(sys in arb_system()) {
            let sol = solve_batch(&sys);
            let (obj, argmin, _) = brute_force(&sys);
            prop_assert_eq!(sol.objective, obj);
            prop_assert_eq!(sol.digits, argmin);
        }

        #[test]
        fn bound_never_exceeds_completions(sys in arb_system(), mask in any::<u16>(), fill in proptest::collection::vec(0u8..=9, 4)) {
            let partial: Vec<Option<u8>> = (0..sys.k).map(|c| (mask >> c & 1 == 1).then_some(fill[c])).collect();
            let bound = lower_bound(&sys, &partial);
            let mut digits = vec![0u8; sys.k];
            // Every completion of the partial vector.
            let free: Vec<usize> = (0..sys.k).filter(|&c| partial[c].is_none()).collect();
            for code in 0..10usize.pow(free.len() as u32) {
                let mut rest = code;
                for c in 0..sys.k {
                    digits[c] = match partial[c] {
                        Some(v) => v,
                        None => {
                            let v = (rest % 10) as u8;
                            rest /= 10;
                            v
                        }
                    };
                }
                prop_assert!(bound <= sys.objective(&digits));
            }
        }

        #[test]
        fn extra_candidates_never_lower_winner_score(
            scores in proptest::collection::vec((0usize..50, 0u64..50), 1..8),
            extra in (0usize..50, 0u64..50),
        ) {
            let make = |i: usize, (sat, res): (usize, u64)| Candidate {
                batch_index: i,
                digits: vec![0],
                batch_objective: 0,
                corpus_satisfied: sat,
                corpus_residual: res,
            };
            let mut cands: Vec<Candidate> = scores.iter().enumerate().map(|(i, &s)| make(i, s)).collect();
            let before = pick_winner(&cands).unwrap().corpus_satisfied;
            cands.push(make(cands.len(), extra));
            prop_assert!(pick_winner(&cands).unwrap().corpus_satisfied >= before);
        }

        #[test]
        fn permuting_rows_keeps_solution(sys in arb_system(), seed in any::<u64>()) {
            let rows = sys.rows();
            let mut perm: Vec<usize> = (0..rows).collect();
            let mut state = seed | 1;
            for i in (1..rows).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                perm.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let permuted = BatchSystem {
                k: sys.k,
                coefficients: perm.iter().flat_map(|&e| sys.row(e).to_vec()).collect(),
                targets: perm.iter().map(|&e| sys.targets[e]).collect(),
            };
            prop_assert_eq!(solve_batch(&permuted), solve_batch(&sys));
        }
    }
}
