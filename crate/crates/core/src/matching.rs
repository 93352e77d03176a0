//! Randomized perfect matching through determinant parity.
//!
//! Edges get independent random weights from `[1, 2k]`; the adjacency
//! matrix becomes a skew integer matrix with `2^w` above the diagonal
//! and `-2^w` below. With probability at least one half the minimum
//! weight perfect matching is unique, and then for every edge the parity
//! of `b_ij * adj(B)_ij / 2^v` (with `2^v` the largest power of two
//! dividing `det B`) reveals whether the edge belongs to it. Everything
//! runs over exact big-integer arithmetic; a returned edge set is always
//! verified to be a perfect matching before it is reported.

use num_bigint::BigInt;
use num_traits::Zero;
use rand::Rng;
use thiserror::Error;

use crate::engine::{
    run_program, DriverProgram, EngineError, ExecMode, Key, MemoryBudget, Pair, PairSet,
    ReducerEmit, Round, RoundStats, WordSized,
};
use crate::linalg::{adjugate_from_char_poly, FieldMatrix, LinalgError};
use crate::scalar::ExactScalar;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("perfect matching requires an even number of vertices, got {0}")]
    OddVertexCount(u32),
    #[error("weighting produced a singular matrix (certain when no perfect matching exists)")]
    SingularWeighting,
    #[error("parity test did not produce a perfect matching; retry with a new seed")]
    NoPerfectMatchingFound,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Simple undirected graph on vertices `0..d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    d: u32,
    edges: Vec<(u32, u32)>,
}

impl Graph {
    pub fn new(d: u32, edges: Vec<(u32, u32)>) -> Self {
        let mut canon: Vec<(u32, u32)> = edges
            .into_iter()
            .map(|(u, v)| (u.min(v), u.max(v)))
            .collect();
        canon.sort_unstable();
        canon.dedup();
        assert!(
            canon.iter().all(|&(u, v)| u < v && v < d),
            "simple graph without self-loops required"
        );
        Graph { d, edges: canon }
    }

    pub fn vertex_count(&self) -> u32 {
        self.d
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// The skew weighted matrix: entries `2^w_ij` at `(i, j)` and `-2^w_ij`
/// at `(j, i)` for every edge `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TutteLikeMatrix {
    pub matrix: FieldMatrix<ExactScalar>,
    /// Weight per edge, aligned with the graph's canonical edge order.
    pub weights: Vec<u64>,
}

#[derive(Clone, Debug)]
enum MtMsg {
    /// Adjacency cell (upper triangle), one word.
    Adj { i: u32, j: u32 },
    /// Weighted entry: cell plus weight exponent.
    Weighted { i: u32, j: u32, w: u64 },
}

impl WordSized for MtMsg {
    fn words(&self) -> usize {
        match self {
            MtMsg::Adj { .. } => 1,
            MtMsg::Weighted { .. } => 2,
        }
    }
}

const TAG_INP: u64 = 80;
const TAG_BLK: u64 = 81;
const TAG_OUT: u64 = 82;

/// Draw edge weights with per-block-pair reducers so both symmetric
/// entries of an edge land in the same reducer, and build the skew
/// matrix. Weights are uniform on `[1, 2k]` and reproducible per seed.
pub fn build_weighted_matrix(
    g: &Graph,
    budget: &MemoryBudget,
    seed: u64,
) -> Result<(TutteLikeMatrix, RoundStats), MatchingError> {
    if g.d % 2 != 0 {
        return Err(MatchingError::OddVertexCount(g.d));
    }
    let k = g.edge_count() as u64;
    let sb = crate::matrix::block_side_for(budget.m).max(1);
    let mut input: PairSet<MtMsg> = PairSet::new();
    for (e, (i, j)) in g.edges.iter().enumerate() {
        input.push(Key::of2(TAG_INP, e as u64), MtMsg::Adj { i: *i, j: *j });
    }
    let weight_cap = (2 * k).max(1);
    let mut prog = DriverProgram::new(move |round, _s: &PairSet<MtMsg>| {
        if round >= 2 {
            return None;
        }
        Some(Round::new(move |key, group: Vec<Pair<MtMsg>>, ctx| {
            if round == 0 {
                // Route the edge to the block pair holding both its cells.
                let mut emit = ReducerEmit::empty();
                for p in group {
                    if let MtMsg::Adj { i, j } = p.value {
                        let (bl, bh) = ((i / sb).min(j / sb), (i / sb).max(j / sb));
                        emit.next.push(Pair::new(
                            Key::of3(TAG_BLK, bl as u64, bh as u64),
                            MtMsg::Adj { i, j },
                        ));
                    }
                }
                return emit;
            }
            if key.tag() != TAG_BLK {
                return ReducerEmit::empty();
            }
            // Each symmetric pair of entries draws one weight.
            let mut edges: Vec<(u32, u32)> = group
                .into_iter()
                .filter_map(|p| match p.value {
                    MtMsg::Adj { i, j } => Some((i, j)),
                    _ => None,
                })
                .collect();
            edges.sort_unstable();
            let mut emit = ReducerEmit::empty();
            for (i, j) in edges {
                let w = ctx.rng().gen_range(1..=weight_cap);
                emit.output.push(Pair::new(
                    Key::of3(TAG_OUT, i as u64, j as u64),
                    MtMsg::Weighted { i, j, w },
                ));
            }
            emit
        }))
    });
    let (out, stats) = run_program(input, &mut prog, budget, seed, ExecMode::Audit)?;

    let mut weights = vec![0u64; g.edge_count()];
    let mut matrix = FieldMatrix::<ExactScalar>::zero(g.d);
    for p in out.pairs {
        if let MtMsg::Weighted { i, j, w } = p.value {
            let e = g
                .edges
                .binary_search(&(i, j))
                .expect("weighted entry corresponds to an edge");
            weights[e] = w;
            let pow = ExactScalar::from_bigint(BigInt::from(2u32).pow(w as u32));
            matrix.set(i, j, pow.clone());
            matrix.set(j, i, pow.neg_scalar());
        }
    }
    Ok((TutteLikeMatrix { matrix, weights }, stats))
}

/// Outcome of one matching trial.
#[derive(Clone, Debug)]
pub struct MatchingResult {
    pub matched: Vec<(u32, u32)>,
    pub det: BigInt,
    /// Largest `v` with `2^v` dividing the determinant.
    pub valuation: u64,
    /// Edge parities in canonical edge order (true = odd = selected).
    pub parities: Vec<bool>,
}

/// Check that an edge set covers every vertex exactly once.
pub fn is_perfect_matching(d: u32, edges: &[(u32, u32)]) -> bool {
    let mut seen = vec![false; d as usize];
    for &(u, v) in edges {
        if u == v || seen[u as usize] || seen[v as usize] {
            return false;
        }
        seen[u as usize] = true;
        seen[v as usize] = true;
    }
    seen.into_iter().all(|s| s)
}

/// One seeded matching trial: weight the edges, take the determinant and
/// adjugate through the characteristic polynomial, and select the edges
/// whose scaled cofactor parity is odd. The returned edge set has been
/// verified to be a perfect matching.
pub fn mvv_matching(
    g: &Graph,
    budget: &MemoryBudget,
    seed: u64,
) -> Result<(MatchingResult, RoundStats), MatchingError> {
    if g.d % 2 != 0 {
        return Err(MatchingError::OddVertexCount(g.d));
    }
    let (weighted, mut stats) = build_weighted_matrix(g, budget, seed)?;
    let b = &weighted.matrix;

    let (adj, cp, st) = match adjugate_from_char_poly(b, budget) {
        Ok(v) => v,
        Err(LinalgError::Engine(e)) => return Err(MatchingError::Engine(e)),
        Err(_) => return Err(MatchingError::SingularWeighting),
    };
    stats.absorb(&st);
    let det = cp
        .det()
        .to_integer()
        .expect("integer matrix has integer determinant");
    if det.is_zero() {
        return Err(MatchingError::SingularWeighting);
    }
    let valuation = two_adic_valuation(&det);

    let mut matched = Vec::new();
    let mut parities = Vec::new();
    for (e, &(i, j)) in g.edges.iter().enumerate() {
        let adj_ij = adj
            .get(i, j)
            .to_integer()
            .expect("adjugate of an integer matrix is integral");
        // b_ij * adj_ij / 2^v is odd exactly when the total two-adic
        // valuation matches v.
        let odd = if adj_ij.is_zero() {
            false
        } else {
            weighted.weights[e] + two_adic_valuation(&adj_ij) == valuation
        };
        parities.push(odd);
        if odd {
            matched.push((i, j));
        }
    }

    if !is_perfect_matching(g.d, &matched) {
        return Err(MatchingError::NoPerfectMatchingFound);
    }
    Ok((
        MatchingResult {
            matched,
            det,
            valuation,
            parities,
        },
        stats,
    ))
}

fn two_adic_valuation(v: &BigInt) -> u64 {
    debug_assert!(!v.is_zero());
    let (_, bytes) = v.to_bytes_le();
    let mut val = 0u64;
    for byte in bytes {
        if byte == 0 {
            val += 8;
        } else {
            val += byte.trailing_zeros() as u64;
            break;
        }
    }
    val
}

impl ExactScalar {
    fn neg_scalar(&self) -> ExactScalar {
        use crate::scalar::FieldScalar;
        self.neg()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exhaustive_perfect_matchings;

    fn budget_for(d: u32) -> MemoryBudget {
        let n = (d as usize).pow(2);
        MemoryBudget::new((n / 2).max(16), 8 * n * (d as usize).max(2))
    }

    #[test]
    fn single_edge_forced_structure() {
        let g = Graph::new(2, vec![(0, 1)]);
        let budget = budget_for(2);
        let (t, _) = build_weighted_matrix(&g, &budget, 3).unwrap();
        assert!(t.weights[0] >= 1 && t.weights[0] <= 2);
        let two_w = BigInt::from(2u32).pow(t.weights[0] as u32);
        assert_eq!(t.matrix.get(0, 1).to_integer().unwrap(), two_w);
        assert_eq!(t.matrix.get(1, 0).to_integer().unwrap(), -two_w);
    }

    #[test]
    fn empty_graph_zero_matrix() {
        let g = Graph::new(2, vec![]);
        let budget = budget_for(2);
        let (t, _) = build_weighted_matrix(&g, &budget, 3).unwrap();
        assert_eq!(t.matrix, FieldMatrix::<ExactScalar>::zero(2));
    }

    #[test]
    fn weights_reproducible_per_seed() {
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0)]);
        let budget = budget_for(4);
        let (t1, _) = build_weighted_matrix(&g, &budget, 11).unwrap();
        let (t2, _) = build_weighted_matrix(&g, &budget, 11).unwrap();
        assert_eq!(t1, t2);
        let (t3, _) = build_weighted_matrix(&g, &budget, 12).unwrap();
        assert!(t1.weights != t3.weights || t1 == t3);
    }

    #[test]
    fn odd_vertex_count_rejected() {
        let g = Graph::new(3, vec![(0, 1), (1, 2), (0, 2)]);
        let budget = budget_for(3);
        assert!(matches!(
            mvv_matching(&g, &budget, 1),
            Err(MatchingError::OddVertexCount(3))
        ));
    }

    #[test]
    fn single_edge_always_matched() {
        let g = Graph::new(2, vec![(0, 1)]);
        let budget = budget_for(2);
        for seed in 0..20 {
            let (res, _) = mvv_matching(&g, &budget, seed).unwrap();
            assert_eq!(res.matched, vec![(0, 1)]);
        }
    }

    #[test]
    fn four_cycle_matches_one_of_two() {
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0)]);
        let budget = budget_for(4);
        let oracle = exhaustive_perfect_matchings(4, g.edges());
        assert_eq!(oracle.len(), 2);
        let mut successes = 0;
        for seed in 0..60 {
            match mvv_matching(&g, &budget, seed) {
                Ok((res, _)) => {
                    assert!(oracle.contains(&res.matched), "{:?}", res.matched);
                    successes += 1;
                }
                Err(MatchingError::NoPerfectMatchingFound)
                | Err(MatchingError::SingularWeighting) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(successes >= 24, "only {successes}/60 trials succeeded");
    }

    #[test]
    fn graph_without_matching_is_always_singular() {
        // A star on four vertices has no perfect matching, so the skew
        // matrix is singular for every weighting.
        let g = Graph::new(4, vec![(0, 1), (0, 2), (0, 3)]);
        let budget = budget_for(4);
        for seed in 0..25 {
            match mvv_matching(&g, &budget, seed) {
                Err(MatchingError::SingularWeighting) => {}
                other => panic!("expected singular weighting, got {other:?}"),
            }
        }
    }

    #[test]
    fn adjugate_identity_holds_on_generated_matrices() {
        use crate::linalg::adjugate_from_char_poly;
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]);
        let budget = budget_for(4);
        for seed in 0..5 {
            let (t, _) = build_weighted_matrix(&g, &budget, seed).unwrap();
            let (adj, cp, _) = adjugate_from_char_poly(&t.matrix, &budget).unwrap();
            let (prod, _) = adj.multiply(&t.matrix, &budget).unwrap();
            let mut expect = FieldMatrix::<ExactScalar>::zero(4);
            for i in 0..4 {
                expect.set(i, i, cp.det());
            }
            assert_eq!(prod, expect, "seed {seed}");
        }
    }

    #[test]
    fn valuation_helper() {
        assert_eq!(two_adic_valuation(&BigInt::from(1)), 0);
        assert_eq!(two_adic_valuation(&BigInt::from(8)), 3);
        assert_eq!(two_adic_valuation(&BigInt::from(-12)), 2);
        assert_eq!(two_adic_valuation(&(BigInt::from(1) << 100)), 100);
    }
}
