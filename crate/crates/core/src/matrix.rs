//! Square matrices over a semiring in coordinate form, block
//! decomposition into `sqrt(m) x sqrt(m)` submatrices, and the group
//! scheme that partitions block products into groups touching every
//! input block exactly once.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::semiring::Semiring;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("entry ({i},{j}) outside a {side}x{side} matrix")]
    OutOfBounds { i: u32, j: u32, side: u32 },
    #[error("duplicate entry at ({i},{j})")]
    Duplicate { i: u32, j: u32 },
    #[error("matrices have different sides: {a} vs {b}")]
    SideMismatch { a: u32, b: u32 },
}

/// Sparse square matrix in canonical coordinate form: entries are
/// nonzero, unique and sorted row-major, so an entry's position in the
/// list is its progressive nonzero index in the row-major scan.
#[derive(Clone, Debug)]
pub struct CooMatrix<S: Semiring> {
    side: u32,
    entries: Vec<(u32, u32, S::Elem)>,
}

impl<S: Semiring> PartialEq for CooMatrix<S> {
    fn eq(&self, other: &Self) -> bool {
        self.side == other.side && self.entries == other.entries
    }
}

impl<S: Semiring> CooMatrix<S> {
    /// Build from an entry list; zeros are dropped, duplicates and
    /// out-of-range coordinates are rejected.
    pub fn from_entries(
        side: u32,
        entries: Vec<(u32, u32, S::Elem)>,
    ) -> Result<Self, MatrixError> {
        let mut kept: Vec<(u32, u32, S::Elem)> = entries
            .into_iter()
            .filter(|(_, _, x)| !S::is_zero(x))
            .collect();
        for &(i, j, _) in &kept {
            if i >= side || j >= side {
                return Err(MatrixError::OutOfBounds { i, j, side });
            }
        }
        kept.sort_by_key(|&(i, j, _)| (i, j));
        for w in kept.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(MatrixError::Duplicate {
                    i: w[0].0,
                    j: w[0].1,
                });
            }
        }
        Ok(CooMatrix {
            side,
            entries: kept,
        })
    }

    pub fn zero(side: u32) -> Self {
        CooMatrix {
            side,
            entries: Vec::new(),
        }
    }

    pub fn identity(side: u32) -> Self {
        CooMatrix {
            side,
            entries: (0..side).map(|i| (i, i, S::one())).collect(),
        }
    }

    pub fn from_dense(side: u32, values: &[S::Elem]) -> Self {
        assert_eq!(values.len(), (side as usize) * (side as usize));
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, x)| !S::is_zero(x))
            .map(|(k, x)| ((k as u32) / side, (k as u32) % side, x.clone()))
            .collect();
        CooMatrix { side, entries }
    }

    pub fn to_dense(&self) -> Vec<S::Elem> {
        let n = self.side as usize;
        let mut out = vec![S::zero(); n * n];
        for (i, j, x) in &self.entries {
            out[(*i as usize) * n + (*j as usize)] = x.clone();
        }
        out
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Entries in row-major order; an entry's index in this slice is its
    /// progressive nonzero key.
    pub fn entries(&self) -> &[(u32, u32, S::Elem)] {
        &self.entries
    }

    pub fn get(&self, i: u32, j: u32) -> S::Elem {
        match self.entries.binary_search_by_key(&(i, j), |&(r, c, _)| (r, c)) {
            Ok(pos) => self.entries[pos].2.clone(),
            Err(_) => S::zero(),
        }
    }

    /// Number of nonzero entries in each column (the `a_i` profile).
    pub fn col_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.side as usize];
        for (_, j, _) in &self.entries {
            counts[*j as usize] += 1;
        }
        counts
    }

    /// Number of nonzero entries in each row (the `b_i` profile).
    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.side as usize];
        for (i, _, _) in &self.entries {
            counts[*i as usize] += 1;
        }
        counts
    }

    /// Dense occupancy: nnz is a constant fraction of side^2.
    pub fn is_dense(&self) -> bool {
        self.nnz() * 4 >= (self.side as usize).pow(2)
    }
}

/// Block decomposition of a matrix into `block_side x block_side`
/// submatrices on a `q x q` grid. Entries keep global coordinates;
/// the original side is padded up with implicit zeros when it is not a
/// multiple of the block side.
#[derive(Clone, Debug)]
pub struct BlockGrid<S: Semiring> {
    /// Original (unpadded) matrix side.
    pub side: u32,
    /// Side of one block: floor(sqrt(m)).
    pub block_side: u32,
    /// Blocks per side after padding.
    pub q: u32,
    blocks: BTreeMap<(u32, u32), Vec<(u32, u32, S::Elem)>>,
}

impl<S: Semiring> BlockGrid<S> {
    pub fn block(&self, bi: u32, bj: u32) -> &[(u32, u32, S::Elem)] {
        self.blocks.get(&(bi, bj)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn nonempty_blocks(&self) -> impl Iterator<Item = (&(u32, u32), &Vec<(u32, u32, S::Elem)>)> {
        self.blocks.iter()
    }

    /// Reassemble the original matrix (padding disappears because padded
    /// cells hold zero).
    pub fn reassemble(&self) -> CooMatrix<S> {
        let mut entries = Vec::new();
        for list in self.blocks.values() {
            entries.extend(list.iter().cloned());
        }
        CooMatrix::from_entries(self.side, entries).expect("blocks came from a valid matrix")
    }
}

/// Side of the square submatrix that fits in `m` words.
pub fn block_side_for(m: usize) -> u32 {
    ((m as f64).sqrt().floor() as u32).max(1)
}

/// Blocks per side for a matrix of side `side` under local budget `m`:
/// the padded side divided by the block side.
pub fn blocks_per_side(side: u32, m: usize) -> u32 {
    let sb = block_side_for(m);
    side.div_ceil(sb).max(1)
}

/// Decompose `x` into `sqrt(m) x sqrt(m)` blocks. Block `(bi, bj)` holds
/// exactly the entries `(r, c)` with `r / sb == bi` and `c / sb == bj`.
pub fn partition_blocks<S: Semiring>(x: &CooMatrix<S>, m: usize) -> BlockGrid<S> {
    let sb = block_side_for(m);
    let q = blocks_per_side(x.side(), m);
    let mut blocks: BTreeMap<(u32, u32), Vec<(u32, u32, S::Elem)>> = BTreeMap::new();
    for (i, j, v) in x.entries() {
        blocks
            .entry((i / sb, j / sb))
            .or_default()
            .push((*i, *j, v.clone()));
    }
    BlockGrid {
        side: x.side(),
        block_side: sb,
        q,
        blocks,
    }
}

/// The group scheme: block product `A[i,h] * B[h,j]` belongs to group
/// `l` exactly when `h = (i + j + l) mod q`. For fixed `l` every block
/// of A and of B occurs in exactly one product of the group.
pub fn group_member(i: u32, j: u32, l: u32, q: u32) -> u32 {
    assert!(i < q && j < q && l < q);
    (i + j + l) % q
}
