//! Independent brute-force reference implementations used by the test
//! suites. These never touch the round engine, so a bug cannot be shared
//! with the programs they check.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::matrix::CooMatrix;
use crate::scalar::FieldScalar;
use crate::semiring::Semiring;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("singular matrix")]
    SingularMatrix,
}

/// Triple-loop product over the semiring; ground truth for all
/// multiplication tests.
pub fn naive_multiply<S: Semiring>(a: &CooMatrix<S>, b: &CooMatrix<S>) -> CooMatrix<S> {
    assert_eq!(a.side(), b.side(), "conformable dims required");
    let n = a.side() as usize;
    let ad = a.to_dense();
    let bd = b.to_dense();
    let mut c = vec![S::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = &ad[i * n + k];
            if S::is_zero(aik) {
                continue;
            }
            for j in 0..n {
                let prod = S::times(aik, &bd[k * n + j]);
                c[i * n + j] = S::plus(&c[i * n + j], &prod);
            }
        }
    }
    CooMatrix::from_dense(a.side(), &c)
}

/// Dense field matrix inverse, determinant and adjugate by Gaussian
/// elimination (exact over rational scalars). The adjugate comes from
/// `det * inverse` when nonsingular and from cofactor expansion for
/// small singular matrices.
pub fn oracle_inverse_det_adjugate<F: FieldScalar>(
    a: &[Vec<F>],
) -> Result<(Vec<Vec<F>>, F, Vec<Vec<F>>), OracleError> {
    let d = a.len();
    assert!(a.iter().all(|row| row.len() == d), "square matrix required");
    let det = oracle_determinant(a);
    if det.is_zero() {
        return Err(OracleError::SingularMatrix);
    }
    let inv = gauss_jordan_inverse(a).ok_or(OracleError::SingularMatrix)?;
    let adj: Vec<Vec<F>> = inv
        .iter()
        .map(|row| row.iter().map(|x| x.mul(&det)).collect())
        .collect();
    Ok((inv, det, adj))
}

/// Determinant by fraction-free style elimination over the field.
pub fn oracle_determinant<F: FieldScalar>(a: &[Vec<F>]) -> F {
    let d = a.len();
    let mut m: Vec<Vec<F>> = a.to_vec();
    let mut det = F::one();
    for col in 0..d {
        let pivot_row = (col..d).find(|&r| !m[r][col].is_zero());
        let pivot_row = match pivot_row {
            Some(r) => r,
            None => return F::zero(),
        };
        if pivot_row != col {
            m.swap(pivot_row, col);
            det = det.neg();
        }
        let pivot = m[col][col].clone();
        det = det.mul(&pivot);
        let pinv = pivot.recip().expect("nonzero pivot");
        for r in col + 1..d {
            let factor = m[r][col].mul(&pinv);
            if factor.is_zero() {
                continue;
            }
            for c in col..d {
                let sub = factor.mul(&m[col][c]);
                m[r][c] = m[r][c].sub(&sub);
            }
        }
    }
    det
}

fn gauss_jordan_inverse<F: FieldScalar>(a: &[Vec<F>]) -> Option<Vec<Vec<F>>> {
    let d = a.len();
    let mut m: Vec<Vec<F>> = a.to_vec();
    let mut inv: Vec<Vec<F>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| if i == j { F::one() } else { F::zero() })
                .collect()
        })
        .collect();
    for col in 0..d {
        let pivot_row = (col..d).find(|&r| !m[r][col].is_zero())?;
        m.swap(pivot_row, col);
        inv.swap(pivot_row, col);
        let pinv = m[col][col].recip()?;
        for c in 0..d {
            m[col][c] = m[col][c].mul(&pinv);
            inv[col][c] = inv[col][c].mul(&pinv);
        }
        for r in 0..d {
            if r == col || m[r][col].is_zero() {
                continue;
            }
            let factor = m[r][col].clone();
            for c in 0..d {
                let s1 = factor.mul(&m[col][c]);
                m[r][c] = m[r][c].sub(&s1);
                let s2 = factor.mul(&inv[col][c]);
                inv[r][c] = inv[r][c].sub(&s2);
            }
        }
    }
    Some(inv)
}

/// Cofactor-expansion adjugate for small matrices, usable also when the
/// matrix is singular.
pub fn oracle_adjugate_cofactor<F: FieldScalar>(a: &[Vec<F>]) -> Vec<Vec<F>> {
    let d = a.len();
    assert!(d <= 8, "cofactor oracle limited to d <= 8");
    if d == 1 {
        return vec![vec![F::one()]];
    }
    let mut adj = vec![vec![F::zero(); d]; d];
    for i in 0..d {
        for j in 0..d {
            let minor: Vec<Vec<F>> = (0..d)
                .filter(|&r| r != i)
                .map(|r| {
                    (0..d)
                        .filter(|&c| c != j)
                        .map(|c| a[r][c].clone())
                        .collect()
                })
                .collect();
            let cof = oracle_determinant(&minor);
            let signed = if (i + j) % 2 == 0 { cof } else { cof.neg() };
            // adj = transpose of the cofactor matrix
            adj[j][i] = signed;
        }
    }
    adj
}

/// All perfect matchings of a small graph by recursion on the lowest
/// uncovered vertex. Vertices are `0..d`; edges are unordered pairs.
pub fn exhaustive_perfect_matchings(d: usize, edges: &[(u32, u32)]) -> Vec<Vec<(u32, u32)>> {
    assert!(d <= 16, "enumeration oracle limited to d <= 16");
    if d % 2 != 0 {
        return Vec::new();
    }
    let mut adj = vec![vec![false; d]; d];
    for &(u, v) in edges {
        adj[u as usize][v as usize] = true;
        adj[v as usize][u as usize] = true;
    }
    let mut covered = vec![false; d];
    let mut current = Vec::new();
    let mut found = Vec::new();
    recurse_matchings(&adj, &mut covered, &mut current, &mut found);
    found
}

fn recurse_matchings(
    adj: &[Vec<bool>],
    covered: &mut [bool],
    current: &mut Vec<(u32, u32)>,
    found: &mut Vec<Vec<(u32, u32)>>,
) {
    let u = match covered.iter().position(|&c| !c) {
        Some(u) => u,
        None => {
            found.push(current.clone());
            return;
        }
    };
    covered[u] = true;
    for v in u + 1..adj.len() {
        if !covered[v] && adj[u][v] {
            covered[v] = true;
            current.push((u as u32, v as u32));
            recurse_matchings(adj, covered, current, found);
            current.pop();
            covered[v] = false;
        }
    }
    covered[u] = false;
}

/// Enumerate the nonzero elementary products of `A * B` and return the
/// number of distinct output cells they touch together with the stream
/// of cell codes `j + i * side`.
pub fn exact_distinct_products<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
) -> (usize, Vec<u64>) {
    assert_eq!(a.side(), b.side());
    let side = a.side() as u64;
    let mut by_col: Vec<Vec<u32>> = vec![Vec::new(); a.side() as usize];
    for (i, j, _) in a.entries() {
        by_col[*j as usize].push(*i);
    }
    let mut stream = Vec::new();
    let mut distinct = BTreeSet::new();
    for (h, j, _) in b.entries() {
        for &i in &by_col[*h as usize] {
            let code = *j as u64 + (i as u64) * side;
            stream.push(code);
            distinct.insert(code);
        }
    }
    (distinct.len(), stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ExactScalar;
    use crate::semiring::{MinPlus, Nat, Trop};

    fn rat(v: i64) -> ExactScalar {
        ExactScalar::from_int(v)
    }

    #[test]
    fn naive_multiply_hand_example() {
        let a = CooMatrix::<Nat>::from_dense(2, &[1, 2, 3, 4]);
        let b = CooMatrix::<Nat>::from_dense(2, &[5, 6, 7, 8]);
        let c = naive_multiply(&a, &b);
        assert_eq!(c.to_dense(), vec![19, 22, 43, 50]);
    }

    #[test]
    fn naive_multiply_identity() {
        let a = CooMatrix::<Nat>::from_dense(3, &[3, 1, 4, 1, 5, 9, 2, 6, 5]);
        let i = CooMatrix::<Nat>::identity(3);
        assert_eq!(naive_multiply(&i, &a), a);
    }

    #[test]
    fn minplus_closure_fixpoint() {
        let a = CooMatrix::<MinPlus>::from_dense(
            2,
            &[Trop::fin(0), Trop::fin(1), Trop::INF, Trop::fin(0)],
        );
        let sq = naive_multiply(&a, &a);
        assert_eq!(sq, a);
    }

    #[test]
    fn inverse_det_adjugate_example() {
        let a = vec![vec![rat(2), rat(0)], vec![rat(0), rat(3)]];
        let (inv, det, adj) = oracle_inverse_det_adjugate(&a).unwrap();
        assert_eq!(det, rat(6));
        assert_eq!(inv[0][0], ExactScalar::ratio(1, 2));
        assert_eq!(inv[1][1], ExactScalar::ratio(1, 3));
        assert_eq!(adj[0][0], rat(3));
        assert_eq!(adj[1][1], rat(2));
    }

    #[test]
    fn identity_inverse() {
        let a = vec![vec![rat(1), rat(0)], vec![rat(0), rat(1)]];
        let (inv, det, adj) = oracle_inverse_det_adjugate(&a).unwrap();
        assert_eq!(det, rat(1));
        assert_eq!(inv, a);
        assert_eq!(adj, a);
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = vec![vec![rat(1), rat(1)], vec![rat(1), rat(1)]];
        assert_eq!(
            oracle_inverse_det_adjugate(&a).unwrap_err(),
            OracleError::SingularMatrix
        );
    }

    #[test]
    fn adjugate_matches_cofactor_route() {
        let a = vec![
            vec![rat(2), rat(1), rat(0)],
            vec![rat(0), rat(3), rat(1)],
            vec![rat(1), rat(0), rat(4)],
        ];
        let (_, _, adj) = oracle_inverse_det_adjugate(&a).unwrap();
        assert_eq!(adj, oracle_adjugate_cofactor(&a));
    }

    #[test]
    fn matchings_of_square() {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 0)];
        let found = exhaustive_perfect_matchings(4, &edges);
        assert_eq!(found.len(), 2);
        let single = exhaustive_perfect_matchings(2, &[(0, 1)]);
        assert_eq!(single, vec![vec![(0, 1)]]);
    }

    #[test]
    fn star_plus_isolated_has_no_matching() {
        // K_{1,3} on {0..3}: vertex 0 matches one leaf, two leaves stay
        // uncovered.
        let found = exhaustive_perfect_matchings(4, &[(0, 1), (0, 2), (0, 3)]);
        assert!(found.is_empty());
    }

    #[test]
    fn distinct_products_examples() {
        let i8m = CooMatrix::<Nat>::identity(8);
        assert_eq!(exact_distinct_products(&i8m, &i8m).0, 8);

        let ones = CooMatrix::<Nat>::from_dense(8, &[1u64; 64]);
        assert_eq!(exact_distinct_products(&ones, &ones).0, 64);

        // A's column support misses B's row support entirely.
        let a = CooMatrix::<Nat>::from_entries(4, vec![(0, 0, 1), (3, 1, 2)]).unwrap();
        let b = CooMatrix::<Nat>::from_entries(4, vec![(2, 0, 1), (3, 3, 2)]).unwrap();
        assert_eq!(exact_distinct_products(&a, &b).0, 0);
    }
}
