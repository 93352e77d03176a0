//! Matrix inversion on the round engine: triangular inversion by block
//! recursion, general inversion through the characteristic polynomial,
//! and an iterative approximate inverse for floating scalars.
//!
//! All three run over [`FieldMatrix`] values; products go through the
//! dense multiplier with a field-as-semiring adapter, elementwise steps
//! and reductions are small dedicated programs, and the statistics of
//! every stage fold into one record.

use thiserror::Error;

use crate::dense::{dd_multiply, dd_multiply_batch, dense_schedule};
use crate::engine::{
    run_program, DriverProgram, EngineError, ExecMode, Key, MemoryBudget, Pair, PairSet,
    ReducerEmit, Round, RoundStats, WordSized,
};
use crate::matrix::{block_side_for, CooMatrix};
use crate::scalar::{FieldScalar, FloatScalar};
use crate::semiring::FieldSemiring;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("singular matrix")]
    Singular,
    #[error("no convergence after {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
}

/// Dense square matrix over a field scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldMatrix<F: FieldScalar> {
    side: u32,
    data: Vec<F>,
}

impl<F: FieldScalar + WordSized> FieldMatrix<F> {
    pub fn new(side: u32, data: Vec<F>) -> Self {
        assert_eq!(data.len(), (side as usize).pow(2));
        FieldMatrix { side, data }
    }

    pub fn zero(side: u32) -> Self {
        FieldMatrix {
            side,
            data: vec![F::zero(); (side as usize).pow(2)],
        }
    }

    pub fn identity(side: u32) -> Self {
        let mut m = Self::zero(side);
        for i in 0..side {
            m.set(i, i, F::one());
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<F>>) -> Self {
        let side = rows.len() as u32;
        let mut data = Vec::with_capacity(rows.len().pow(2));
        for row in rows {
            assert_eq!(row.len(), side as usize);
            data.extend(row);
        }
        FieldMatrix { side, data }
    }

    pub fn from_i64_rows(rows: &[Vec<i64>]) -> Self {
        Self::from_rows(
            rows.iter()
                .map(|r| r.iter().map(|&v| F::from_i64(v)).collect())
                .collect(),
        )
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    pub fn get(&self, i: u32, j: u32) -> &F {
        &self.data[(i * self.side + j) as usize]
    }

    pub fn set(&mut self, i: u32, j: u32, v: F) {
        self.data[(i * self.side + j) as usize] = v;
    }

    pub fn rows(&self) -> Vec<Vec<F>> {
        (0..self.side)
            .map(|i| (0..self.side).map(|j| self.get(i, j).clone()).collect())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zero(self.side);
        for i in 0..self.side {
            for j in 0..self.side {
                out.set(j, i, self.get(i, j).clone());
            }
        }
        out
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.side).all(|i| (i + 1..self.side).all(|j| self.get(i, j).is_zero()))
    }

    pub fn to_coo(&self) -> CooMatrix<FieldSemiring<F>> {
        CooMatrix::from_dense(self.side, &self.data)
    }

    pub fn from_coo(coo: &CooMatrix<FieldSemiring<F>>) -> Self {
        FieldMatrix {
            side: coo.side(),
            data: coo.to_dense(),
        }
    }

    /// Engine-backed product of two field matrices.
    pub fn multiply(
        &self,
        other: &Self,
        budget: &MemoryBudget,
    ) -> Result<(Self, RoundStats), EngineError> {
        let (c, stats) = dd_multiply(&self.to_coo(), &other.to_coo(), budget)?;
        Ok((Self::from_coo(&c), stats))
    }
}

impl FieldMatrix<FloatScalar> {
    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Self {
        Self::from_rows(
            rows.iter()
                .map(|r| r.iter().map(|&v| FloatScalar(v)).collect())
                .collect(),
        )
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.0 * v.0).sum::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------
// Elementwise combination and reduction programs
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
enum LaMsg<F: FieldScalar> {
    EntX { cell: u64, v: F },
    EntY { cell: u64, v: F },
    Val(F),
    Block { data: Vec<F> },
}

impl<F: FieldScalar> WordSized for LaMsg<F> {
    fn words(&self) -> usize {
        match self {
            LaMsg::EntX { .. } | LaMsg::EntY { .. } => 2,
            LaMsg::Val(_) => 1,
            LaMsg::Block { data } => data.len(),
        }
    }
}

const TAG_IN_X: u64 = 70;
const TAG_IN_Y: u64 = 71;
const TAG_CELL: u64 = 72;
const TAG_OUTP: u64 = 73;
const TAG_DIAG: u64 = 74;
const TAG_TOT: u64 = 75;

/// Compute `alpha * X + beta * Y + gamma * I` in two rounds.
fn affine_combine<F: FieldScalar + WordSized>(
    x: &FieldMatrix<F>,
    y: Option<&FieldMatrix<F>>,
    alpha: F,
    beta: F,
    gamma: F,
    budget: &MemoryBudget,
) -> Result<(FieldMatrix<F>, RoundStats), EngineError> {
    let side = x.side();
    let mut input: PairSet<LaMsg<F>> = PairSet::new();
    for (k, (i, j, v)) in x.to_coo().entries().iter().enumerate() {
        input.push(
            Key::of2(TAG_IN_X, k as u64),
            LaMsg::EntX {
                cell: *i as u64 * side as u64 + *j as u64,
                v: v.clone(),
            },
        );
    }
    if let Some(y) = y {
        for (k, (i, j, v)) in y.to_coo().entries().iter().enumerate() {
            input.push(
                Key::of2(TAG_IN_Y, k as u64),
                LaMsg::EntY {
                    cell: *i as u64 * side as u64 + *j as u64,
                    v: v.clone(),
                },
            );
        }
    }
    if !gamma.is_zero() {
        for i in 0..side {
            input.push(Key::of2(TAG_DIAG, i as u64), LaMsg::Val(F::zero()));
        }
    }

    let mut prog = DriverProgram::new(move |round, _s: &PairSet<LaMsg<F>>| {
        if round >= 2 {
            return None;
        }
        let (alpha, beta, gamma) = (alpha.clone(), beta.clone(), gamma.clone());
        Some(Round::new(move |key, group: Vec<Pair<LaMsg<F>>>, _ctx| {
            if round == 0 {
                let mut emit = ReducerEmit::empty();
                for p in group {
                    match p.value {
                        LaMsg::EntX { cell, v } => emit
                            .next
                            .push(Pair::new(Key::of2(TAG_CELL, cell), LaMsg::EntX { cell, v })),
                        LaMsg::EntY { cell, v } => emit
                            .next
                            .push(Pair::new(Key::of2(TAG_CELL, cell), LaMsg::EntY { cell, v })),
                        LaMsg::Val(_) => {
                            let i = key.0[1];
                            let cell = i * side as u64 + i;
                            emit.next
                                .push(Pair::new(Key::of2(TAG_CELL, cell), LaMsg::Val(F::one())));
                        }
                        _ => {}
                    }
                }
                return emit;
            }
            if key.tag() != TAG_CELL {
                return ReducerEmit::empty();
            }
            let cell = key.0[1];
            let mut acc = F::zero();
            for p in group {
                match p.value {
                    LaMsg::EntX { v, .. } => acc = acc.add(&alpha.mul(&v)),
                    LaMsg::EntY { v, .. } => acc = acc.add(&beta.mul(&v)),
                    LaMsg::Val(one) => acc = acc.add(&gamma.mul(&one)),
                    _ => {}
                }
            }
            if acc.is_zero() {
                return ReducerEmit::empty();
            }
            ReducerEmit {
                output: vec![Pair::new(Key::of2(TAG_OUTP, cell), LaMsg::Val(acc))],
                next: vec![],
            }
        }))
    });
    let (out, stats) = run_program(input, &mut prog, budget, 0, ExecMode::Audit)?;
    let mut result = FieldMatrix::zero(side);
    for p in out.pairs {
        if let LaMsg::Val(v) = p.value {
            let cell = p.key.0[1];
            result.set((cell / side as u64) as u32, (cell % side as u64) as u32, v);
        }
    }
    Ok((result, stats))
}

/// Sum the squared entries through a value tree and take the root.
fn frobenius_program(
    x: &FieldMatrix<FloatScalar>,
    budget: &MemoryBudget,
) -> Result<(f64, RoundStats), EngineError> {
    let fan = ((3 * budget.m / 2).max(2)) as u64;
    let mut input: PairSet<LaMsg<FloatScalar>> = PairSet::new();
    let entries: Vec<f64> = x.data.iter().map(|v| v.0).filter(|v| *v != 0.0).collect();
    for (k, v) in entries.iter().enumerate() {
        input.push(
            Key::of2(TAG_TOT, (k as u64) / fan),
            LaMsg::Val(FloatScalar(v * v)),
        );
    }
    let levels = {
        let mut v = (entries.len() as u64).div_ceil(fan).max(1);
        let mut r = 1usize;
        while v > 1 {
            v = v.div_ceil(fan);
            r += 1;
        }
        r
    };
    let mut prog = DriverProgram::new(move |round, _s: &PairSet<LaMsg<FloatScalar>>| {
        if round >= levels {
            return None;
        }
        let last = round + 1 == levels;
        Some(Round::new(
            move |key, group: Vec<Pair<LaMsg<FloatScalar>>>, _ctx| {
                let total: f64 = group
                    .iter()
                    .filter_map(|p| match &p.value {
                        LaMsg::Val(v) => Some(v.0),
                        _ => None,
                    })
                    .sum();
                if last {
                    ReducerEmit {
                        output: vec![Pair::new(
                            Key::of1(TAG_OUTP),
                            LaMsg::Val(FloatScalar(total)),
                        )],
                        next: vec![],
                    }
                } else {
                    ReducerEmit {
                        output: vec![],
                        next: vec![Pair::new(
                            Key::of2(TAG_TOT, key.0[1] / fan),
                            LaMsg::Val(FloatScalar(total)),
                        )],
                    }
                }
            },
        ))
    });
    let (out, stats) = run_program(input, &mut prog, budget, 0, ExecMode::Audit)?;
    let total: f64 = out
        .pairs
        .iter()
        .filter_map(|p| match &p.value {
            LaMsg::Val(v) => Some(v.0),
            _ => None,
        })
        .sum();
    Ok((total.sqrt(), stats))
}

// ---------------------------------------------------------------------
// Triangular inversion
// ---------------------------------------------------------------------

/// Invert a nonsingular lower triangular matrix by block recursion: the
/// base phase inverts all diagonal blocks of side `sqrt(m)` inside
/// single reducers, and phase `r` fills the subdiagonal quadrant of each
/// sibling pair with two batched multiplications
/// `-(inv D2) * S * (inv D1)`.
pub fn invert_lower_triangular<F: FieldScalar + WordSized>(
    a: &FieldMatrix<F>,
    budget: &MemoryBudget,
) -> Result<(FieldMatrix<F>, RoundStats), LinalgError> {
    let d = a.side();
    assert!(a.is_lower_triangular(), "lower triangular input required");
    for i in 0..d {
        if a.get(i, i).is_zero() {
            return Err(LinalgError::Singular);
        }
    }

    // Pad to sb * 2^levels with an identity tail.
    let sb = (block_side_for(budget.m)).min(d.max(1));
    let mut levels = 0u32;
    while sb << levels < d {
        levels += 1;
    }
    let dp = sb << levels;
    let mut ap = FieldMatrix::<F>::identity(dp);
    for i in 0..d {
        for j in 0..=i {
            ap.set(i, j, a.get(i, j).clone());
        }
    }

    let mut stats = RoundStats::new();

    // Base phase: invert the diagonal blocks in parallel reducers.
    let blocks = (dp / sb) as u64;
    let mut input: PairSet<LaMsg<F>> = PairSet::new();
    for w in 0..blocks {
        let mut data = Vec::with_capacity((sb * sb) as usize);
        for r in 0..sb {
            for c in 0..sb {
                data.push(ap.get(w as u32 * sb + r, w as u32 * sb + c).clone());
            }
        }
        input.push(Key::of2(TAG_DIAG, w), LaMsg::Block { data });
    }
    let sbu = sb as usize;
    let mut prog = DriverProgram::new(move |round, _s: &PairSet<LaMsg<F>>| {
        if round >= 1 {
            return None;
        }
        Some(Round::new(move |key, mut group: Vec<Pair<LaMsg<F>>>, ctx| {
            let data = match group.pop().map(|p| p.value) {
                Some(LaMsg::Block { data }) => data,
                _ => return ReducerEmit::empty(),
            };
            ctx.declare_working_words(sbu * sbu);
            let inv = invert_lower_block(&data, sbu);
            ReducerEmit {
                output: vec![Pair::new(
                    Key::of2(TAG_DIAG, key.0[1]),
                    LaMsg::Block { data: inv },
                )],
                next: vec![],
            }
        }))
    });
    let (out, base_stats) =
        run_program(input, &mut prog, budget, 0, ExecMode::Audit).map_err(LinalgError::Engine)?;
    stats.absorb(&base_stats);

    let mut inv = FieldMatrix::<F>::zero(dp);
    for p in out.pairs {
        if let LaMsg::Block { data } = p.value {
            let w = p.key.0[1] as u32;
            for r in 0..sb {
                for c in 0..sb {
                    inv.set(w * sb + r, w * sb + c, data[(r * sb + c) as usize].clone());
                }
            }
        }
    }

    // Phase r: sibling pairs at block size s combine via two batched
    // products sharing rounds across pairs.
    let mut s = sb;
    while s < dp {
        let pairs = (dp / (2 * s)) as usize;
        let m_pair = (budget.big_m / pairs.max(1)).max(2 * (s as usize).pow(2));
        let coos1: Vec<_> = (0..pairs as u32)
            .map(|w| {
                let d2 = extract(&inv, (2 * w + 1) * s, (2 * w + 1) * s, s);
                let sub = extract(&ap, (2 * w + 1) * s, 2 * w * s, s);
                (d2.to_coo(), sub.to_coo())
            })
            .collect();
        let refs1: Vec<_> = coos1.iter().map(|(x, y)| (x, y)).collect();
        let (mid, st1) = dd_multiply_batch(&refs1, budget, m_pair).map_err(LinalgError::Engine)?;
        stats.absorb(&st1);
        let coos2: Vec<_> = (0..pairs)
            .map(|w| {
                let d1 = extract(&inv, (2 * w as u32) * s, (2 * w as u32) * s, s);
                (mid[w].clone(), d1.to_coo())
            })
            .collect();
        let refs2: Vec<_> = coos2.iter().map(|(x, y)| (x, y)).collect();
        let (prods, st2) =
            dd_multiply_batch(&refs2, budget, m_pair).map_err(LinalgError::Engine)?;
        stats.absorb(&st2);
        for (w, prod) in prods.iter().enumerate() {
            let block = FieldMatrix::<F>::from_coo(prod);
            for r in 0..s {
                for c in 0..s {
                    inv.set(
                        (2 * w as u32 + 1) * s + r,
                        (2 * w as u32) * s + c,
                        block.get(r, c).neg(),
                    );
                }
            }
        }
        s *= 2;
    }

    let mut result = FieldMatrix::<F>::zero(d);
    for i in 0..d {
        for j in 0..d {
            result.set(i, j, inv.get(i, j).clone());
        }
    }
    Ok((result, stats))
}

fn extract<F: FieldScalar + WordSized>(
    m: &FieldMatrix<F>,
    row: u32,
    col: u32,
    s: u32,
) -> FieldMatrix<F> {
    let mut out = FieldMatrix::<F>::zero(s);
    for r in 0..s {
        for c in 0..s {
            out.set(r, c, m.get(row + r, col + c).clone());
        }
    }
    out
}

/// In-reducer forward substitution inverse of a lower triangular block.
fn invert_lower_block<F: FieldScalar>(data: &[F], s: usize) -> Vec<F> {
    let mut inv = vec![F::zero(); s * s];
    for col in 0..s {
        let mut x = vec![F::zero(); s];
        for r in col..s {
            let mut rhs = if r == col { F::one() } else { F::zero() };
            for c in col..r {
                rhs = rhs.sub(&data[r * s + c].mul(&x[c]));
            }
            x[r] = rhs.div(&data[r * s + r]).expect("nonsingular diagonal");
        }
        for (r, v) in x.into_iter().enumerate() {
            inv[r * s + col] = v;
        }
    }
    inv
}

/// Closed-form upper bound on the triangular inversion's rounds, built
/// from the same per-phase schedules the implementation executes.
pub fn triangular_round_bound(d: u32, budget: &MemoryBudget) -> usize {
    let sb = (block_side_for(budget.m)).min(d.max(1));
    let mut levels = 0u32;
    while sb << levels < d {
        levels += 1;
    }
    let dp = sb << levels;
    let mut total = 1;
    let mut s = sb;
    while s < dp {
        let pairs = (dp / (2 * s)).max(1) as usize;
        let m_pair = (budget.big_m / pairs).max(2 * (s as usize).pow(2));
        let per = dense_schedule(
            s,
            &MemoryBudget {
                m: budget.m,
                big_m: m_pair,
                c_local: budget.c_local,
                c_agg: budget.c_agg,
            },
        )
        .total_rounds;
        total += 2 * per;
        s *= 2;
    }
    total
}

// ---------------------------------------------------------------------
// Characteristic polynomial and general inversion
// ---------------------------------------------------------------------

/// Coefficients `c_0..c_d` (monic, `c_d = 1`) of `det(lambda I - A)` and
/// the power traces `s_k = tr(A^k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CharPoly<F: FieldScalar> {
    pub coeffs: Vec<F>,
    pub traces: Vec<F>,
}

impl<F: FieldScalar> CharPoly<F> {
    /// Determinant: `det(A) = (-1)^d c_0`.
    pub fn det(&self) -> F {
        let d = self.coeffs.len() - 1;
        if d % 2 == 0 {
            self.coeffs[0].clone()
        } else {
            self.coeffs[0].neg()
        }
    }
}

/// Characteristic polynomial plus the powers `A^1..A^(d-1)` used
/// downstream by general inversion and the adjugate.
pub fn char_poly_full<F: FieldScalar + WordSized>(
    a: &FieldMatrix<F>,
    budget: &MemoryBudget,
) -> Result<(CharPoly<F>, Vec<FieldMatrix<F>>, RoundStats), LinalgError> {
    let d = a.side() as usize;
    let mut stats = RoundStats::new();

    // Powers A^(2^i) by repeated squaring.
    let mut square_powers = vec![a.clone()];
    {
        let mut cur = a.clone();
        let mut e = 2usize;
        while e < d.max(2) {
            let (next, st) = cur.multiply(&cur, budget).map_err(LinalgError::Engine)?;
            stats.absorb(&st);
            square_powers.push(next.clone());
            cur = next;
            e *= 2;
        }
    }

    // Remaining powers by binary expansion, one batched product per bit.
    let mut powers: Vec<Option<FieldMatrix<F>>> = vec![None; d.max(2)];
    powers[1] = Some(a.clone());
    for k in 2..d.max(2) {
        let low = k.trailing_zeros() as usize;
        powers[k] = Some(square_powers[low].clone());
    }
    let maxbit = 64 - (d.max(2) as u64).leading_zeros() as usize;
    for bit in 0..maxbit {
        let mut batch_ids = Vec::new();
        for k in 2..d.max(2) {
            let low = k.trailing_zeros() as usize;
            if bit > low && (k >> bit) & 1 == 1 {
                batch_ids.push(k);
            }
        }
        if batch_ids.is_empty() {
            continue;
        }
        let coos: Vec<_> = batch_ids
            .iter()
            .map(|&k| {
                (
                    powers[k].as_ref().unwrap().to_coo(),
                    square_powers[bit].to_coo(),
                )
            })
            .collect();
        let refs: Vec<_> = coos.iter().map(|(x, y)| (x, y)).collect();
        let m_pair = (budget.big_m / refs.len().max(1)).max(2 * d * d);
        let (prods, st) = dd_multiply_batch(&refs, budget, m_pair).map_err(LinalgError::Engine)?;
        stats.absorb(&st);
        for (idx, &k) in batch_ids.iter().enumerate() {
            powers[k] = Some(FieldMatrix::from_coo(&prods[idx]));
        }
    }

    // Traces s_k = tr(A^k), k = 1..d, via one value tree per k.
    let fan = ((3 * budget.m / 2).max(2)) as u64;
    let mut diag_input: PairSet<LaMsg<F>> = PairSet::new();
    for k in 1..=d {
        let top_power: FieldMatrix<F>;
        let mat = if k < d.max(2) {
            powers[k].as_ref().unwrap()
        } else {
            let (full, st) = powers[d - 1]
                .as_ref()
                .unwrap()
                .multiply(a, budget)
                .map_err(LinalgError::Engine)?;
            stats.absorb(&st);
            top_power = full;
            &top_power
        };
        for i in 0..d as u32 {
            diag_input.push(
                Key::of3(TAG_TOT, k as u64, i as u64 / fan),
                LaMsg::EntX {
                    cell: k as u64,
                    v: mat.get(i, i).clone(),
                },
            );
        }
    }
    let trace_levels = {
        let mut v = (d as u64).div_ceil(fan).max(1);
        let mut r = 1usize;
        while v > 1 {
            v = v.div_ceil(fan);
            r += 1;
        }
        r
    };
    let mut prog = DriverProgram::new(move |round, _s: &PairSet<LaMsg<F>>| {
        if round >= trace_levels {
            return None;
        }
        let last = round + 1 == trace_levels;
        Some(Round::new(move |key, group: Vec<Pair<LaMsg<F>>>, _ctx| {
            let k = key.0[1];
            let mut acc = F::zero();
            for p in group {
                if let LaMsg::EntX { v, .. } = p.value {
                    acc = acc.add(&v);
                }
            }
            if last {
                ReducerEmit {
                    output: vec![Pair::new(
                        Key::of2(TAG_OUTP, k),
                        LaMsg::EntX { cell: k, v: acc },
                    )],
                    next: vec![],
                }
            } else {
                ReducerEmit {
                    output: vec![],
                    next: vec![Pair::new(
                        Key::of3(TAG_TOT, k, key.0[2] / fan),
                        LaMsg::EntX { cell: k, v: acc },
                    )],
                }
            }
        }))
    });
    let (out, trace_stats) = run_program(diag_input, &mut prog, budget, 0, ExecMode::Audit)
        .map_err(LinalgError::Engine)?;
    stats.absorb(&trace_stats);
    let mut traces = vec![F::zero(); d];
    for p in out.pairs {
        if let LaMsg::EntX { cell, v } = p.value {
            traces[cell as usize - 1] = v;
        }
    }

    // Newton-identity system L c = -S with unknowns (c_{d-1} .. c_0).
    let mut lmat = FieldMatrix::<F>::zero(d as u32);
    for i in 0..d {
        for j in 0..d {
            if j < i {
                lmat.set(i as u32, j as u32, traces[i - j - 1].clone());
            } else if j == i {
                lmat.set(i as u32, j as u32, F::from_i64(i as i64 + 1));
            }
        }
    }
    let (linv, st) = invert_lower_triangular(&lmat, budget)?;
    stats.absorb(&st);
    // Right-hand side as column 0 of a matrix, solved by one product.
    let mut rhs = FieldMatrix::<F>::zero(d as u32);
    for i in 0..d {
        rhs.set(i as u32, 0, traces[i].neg());
    }
    let (sol, st) = linv.multiply(&rhs, budget).map_err(LinalgError::Engine)?;
    stats.absorb(&st);
    let mut coeffs = vec![F::zero(); d + 1];
    coeffs[d] = F::one();
    for i in 0..d {
        coeffs[d - 1 - i] = sol.get(i as u32, 0).clone();
    }

    let power_list: Vec<FieldMatrix<F>> =
        (1..d.max(2)).map(|k| powers[k].clone().unwrap()).collect();
    Ok((CharPoly { coeffs, traces }, power_list, stats))
}

/// Characteristic polynomial of `A`.
pub fn char_poly<F: FieldScalar + WordSized>(
    a: &FieldMatrix<F>,
    budget: &MemoryBudget,
) -> Result<(CharPoly<F>, RoundStats), LinalgError> {
    let (cp, _, stats) = char_poly_full(a, budget)?;
    Ok((cp, stats))
}

/// Combine precomputed powers with polynomial coefficients:
/// `scale * sum_(i=1..d) c_i A^(i-1)` through a per-cell value tree.
fn polynomial_combine<F: FieldScalar + WordSized>(
    powers: &[FieldMatrix<F>],
    coeffs: &[F],
    scale: &F,
    side: u32,
    budget: &MemoryBudget,
) -> Result<(FieldMatrix<F>, RoundStats), EngineError> {
    let d = side as usize;
    let fan = ((3 * budget.m / 2).max(2)) as u64;
    let mut input: PairSet<LaMsg<F>> = PairSet::new();
    for i in 0..d {
        let ci = &coeffs[i + 1];
        if ci.is_zero() {
            continue;
        }
        if i == 0 {
            // A^0 = identity.
            for r in 0..side {
                let cell = r as u64 * side as u64 + r as u64;
                input.push(Key::of3(TAG_CELL, cell, 0), LaMsg::Val(ci.clone()));
            }
        } else {
            let mat = &powers[i - 1];
            for r in 0..side {
                for c in 0..side {
                    let v = mat.get(r, c);
                    if v.is_zero() {
                        continue;
                    }
                    let cell = r as u64 * side as u64 + c as u64;
                    input.push(
                        Key::of3(TAG_CELL, cell, (i as u64) / fan),
                        LaMsg::Val(ci.mul(v)),
                    );
                }
            }
        }
    }
    let levels = {
        let mut v = (d as u64).div_ceil(fan).max(1);
        let mut r = 1usize;
        while v > 1 {
            v = v.div_ceil(fan);
            r += 1;
        }
        r
    };
    let scale = scale.clone();
    let mut prog = DriverProgram::new(move |round, _s: &PairSet<LaMsg<F>>| {
        if round >= levels {
            return None;
        }
        let last = round + 1 == levels;
        let scale = scale.clone();
        Some(Round::new(move |key, group: Vec<Pair<LaMsg<F>>>, _ctx| {
            let cell = key.0[1];
            let mut acc = F::zero();
            for p in group {
                if let LaMsg::Val(v) = p.value {
                    acc = acc.add(&v);
                }
            }
            if last {
                let v = scale.mul(&acc);
                if v.is_zero() {
                    return ReducerEmit::empty();
                }
                ReducerEmit {
                    output: vec![Pair::new(Key::of2(TAG_OUTP, cell), LaMsg::Val(v))],
                    next: vec![],
                }
            } else {
                ReducerEmit {
                    output: vec![],
                    next: vec![Pair::new(
                        Key::of3(TAG_CELL, cell, key.0[2] / fan),
                        LaMsg::Val(acc),
                    )],
                }
            }
        }))
    });
    let (out, stats) = run_program(input, &mut prog, budget, 0, ExecMode::Audit)?;
    let mut result = FieldMatrix::zero(side);
    for p in out.pairs {
        if let LaMsg::Val(v) = p.value {
            let cell = p.key.0[1];
            result.set((cell / side as u64) as u32, (cell % side as u64) as u32, v);
        }
    }
    Ok((result, stats))
}

/// Invert a general nonsingular matrix through its characteristic
/// polynomial: `A^{-1} = -(1/c_0) * sum_(i=1..d) c_i A^(i-1)`.
pub fn invert_general<F: FieldScalar + WordSized>(
    a: &FieldMatrix<F>,
    budget: &MemoryBudget,
) -> Result<(FieldMatrix<F>, RoundStats), LinalgError> {
    let (cp, powers, mut stats) = char_poly_full(a, budget)?;
    if cp.coeffs[0].is_zero() {
        return Err(LinalgError::Singular);
    }
    let scale = cp.coeffs[0].neg().recip().expect("nonzero c_0");
    let (inv, st) = polynomial_combine(&powers, &cp.coeffs, &scale, a.side(), budget)
        .map_err(LinalgError::Engine)?;
    stats.absorb(&st);
    Ok((inv, stats))
}

/// Adjugate from the characteristic polynomial (even dimension):
/// `adj(A) = -(c_1 I + c_2 A + ... + c_d A^(d-1))`.
pub fn adjugate_from_char_poly<F: FieldScalar + WordSized>(
    a: &FieldMatrix<F>,
    budget: &MemoryBudget,
) -> Result<(FieldMatrix<F>, CharPoly<F>, RoundStats), LinalgError> {
    assert!(a.side() % 2 == 0, "even dimension required");
    let (cp, powers, mut stats) = char_poly_full(a, budget)?;
    let minus_one = F::one().neg();
    let (adj, st) = polynomial_combine(&powers, &cp.coeffs, &minus_one, a.side(), budget)
        .map_err(LinalgError::Engine)?;
    stats.absorb(&st);
    Ok((adj, cp, stats))
}

// ---------------------------------------------------------------------
// Iterative approximate inverse
// ---------------------------------------------------------------------

/// Progress of the iteration: residual norms per step.
#[derive(Clone, Debug, Default)]
pub struct NewtonState {
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
}

pub fn default_newton_max_iter(side: u32) -> usize {
    40 * ((side.max(2) as f64).log2().ceil() as usize) + 10
}

/// Iterative inverse `B_{k+1} = (I + R_k) B_k` with `R_k = I - B_k A`,
/// started from `B_0 = A^T / (norm1 * norminf)`. The residual contracts
/// quadratically once its norm drops below one.
pub fn newton_inverse(
    a: &FieldMatrix<FloatScalar>,
    budget: &MemoryBudget,
    tol: f64,
    max_iter: usize,
) -> Result<(FieldMatrix<FloatScalar>, NewtonState, RoundStats), LinalgError> {
    let d = a.side();
    let mut stats = RoundStats::new();

    let mut row_sums = vec![0.0f64; d as usize];
    let mut col_sums = vec![0.0f64; d as usize];
    for i in 0..d {
        for j in 0..d {
            let v = a.get(i, j).0.abs();
            row_sums[i as usize] += v;
            col_sums[j as usize] += v;
        }
    }
    let norm_inf = row_sums.iter().cloned().fold(0.0, f64::max);
    let norm_one = col_sums.iter().cloned().fold(0.0, f64::max);
    if norm_inf == 0.0 || norm_one == 0.0 {
        return Err(LinalgError::Singular);
    }
    let alpha = 1.0 / (norm_one * norm_inf);
    let at = a.transpose();
    let (mut b, st) = affine_combine(
        &at,
        None,
        FloatScalar(alpha),
        FloatScalar(0.0),
        FloatScalar(0.0),
        budget,
    )
    .map_err(LinalgError::Engine)?;
    stats.absorb(&st);

    let mut state = NewtonState::default();
    for iter in 0..=max_iter {
        let (ba, st) = b.multiply(a, budget).map_err(LinalgError::Engine)?;
        stats.absorb(&st);
        let (residual, st) = affine_combine(
            &ba,
            None,
            FloatScalar(-1.0),
            FloatScalar(0.0),
            FloatScalar(1.0),
            budget,
        )
        .map_err(LinalgError::Engine)?;
        stats.absorb(&st);
        let (rnorm, st) = frobenius_program(&residual, budget).map_err(LinalgError::Engine)?;
        stats.absorb(&st);
        state.residual_norms.push(rnorm);
        state.iterations = iter;
        if rnorm <= tol {
            return Ok((b, state, stats));
        }
        if iter == max_iter {
            break;
        }
        let (rb, st) = residual.multiply(&b, budget).map_err(LinalgError::Engine)?;
        stats.absorb(&st);
        let (next, st) = affine_combine(
            &b,
            Some(&rb),
            FloatScalar(1.0),
            FloatScalar(1.0),
            FloatScalar(0.0),
            budget,
        )
        .map_err(LinalgError::Engine)?;
        stats.absorb(&st);
        b = next;
    }
    Err(LinalgError::NoConvergence {
        iters: max_iter,
        residual: *state.residual_norms.last().unwrap_or(&f64::INFINITY),
    })
}
