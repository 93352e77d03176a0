//! Distinct-elements sketches and the output-nonzero estimation program.
//!
//! A sketch keeps, for each of `delta_lists` pairwise-independent hash
//! functions, the `t` distinct smallest hash values seen. Sketches of
//! stream segments merge losslessly, and the count of distinct elements
//! is estimated as the median over lists of `t * p / v` where `v` is the
//! t-th smallest value. While a list is under-full the sketch knows the
//! exact distinct count.
//!
//! `estimate_output_nnz` runs the block-product group schedule without
//! computing any products' values: a reducer holding a block pair either
//! sketches the stream of its nonzero product cells or, when the pair is
//! smaller than a sketch, forwards it untouched as a pseudosketch. The
//! per-phase sketches are randomly distributed over bin reducers, merged,
//! and collapsed to one sketch by a closing tree.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{
    run_program, DriverProgram, EngineError, ExecMode, Key, MemoryBudget, Pair, PairSet,
    ReducerEmit, Round, RoundStats, WordSized,
};
use crate::matrix::CooMatrix;
use crate::semiring::Semiring;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SketchError {
    #[error("sketches built with different hash families cannot merge")]
    HashMismatch,
    #[error("estimate requested from an empty sketch")]
    EmptySketch,
    #[error("malformed sketch text: {0}")]
    Parse(String),
}

/// Deterministic Miller-Rabin for u64.
fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 0..s - 1 {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Smallest prime at or above `v`.
pub fn next_prime(v: u64) -> u64 {
    let mut n = v.max(2);
    while !is_prime(n) {
        n += 1;
    }
    n
}

/// One member of the pairwise independent family `x -> (a x + b) mod p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairwiseHash {
    pub a: u64,
    pub b: u64,
    pub p: u64,
}

impl PairwiseHash {
    pub fn random(rng: &mut ChaCha8Rng, p: u64) -> Self {
        PairwiseHash {
            a: rng.gen_range(1..p),
            b: rng.gen_range(0..p),
            p,
        }
    }

    pub fn eval(&self, x: u64) -> u64 {
        (mul_mod(self.a, x, self.p) + self.b) % self.p
    }
}

/// Accuracy parameters and the derived sketch dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchParams {
    pub eps: f64,
    pub delta: f64,
    /// Values kept per list.
    pub t: usize,
    /// Number of lists (independent repetitions).
    pub delta_lists: usize,
    /// Hash codomain: a prime at least the cube of the domain size.
    pub prime: u64,
    /// Domain size (distinct stream values live in [0, domain)).
    pub domain: u64,
}

impl SketchParams {
    pub fn new(eps: f64, delta: f64, domain: u64) -> Self {
        assert!(eps > 0.0 && delta > 0.0 && delta < 1.0);
        let t = ((16.0 / (eps * eps)).ceil() as usize).max(4);
        let delta_lists = ((1.0 / delta).log2().ceil() as usize).max(1);
        let cube = domain.max(2).saturating_pow(3);
        assert!(
            cube < u64::MAX / 2,
            "domain too large for a u64 hash codomain"
        );
        SketchParams {
            eps,
            delta,
            t,
            delta_lists,
            prime: next_prime(cube),
            domain,
        }
    }

    /// Sketch size in words: all lists plus the hash coefficients.
    pub fn h_words(&self) -> usize {
        self.delta_lists * (self.t + 2) + 2
    }

    pub fn draw_hashes(&self, seed: u64) -> Vec<PairwiseHash> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9027_4c39_11ab_77f3);
        (0..self.delta_lists)
            .map(|_| PairwiseHash::random(&mut rng, self.prime))
            .collect()
    }
}

/// Bottom-t sketch with `delta_lists` independent repetitions.
#[derive(Clone, Debug, PartialEq)]
pub struct NnzSketch {
    pub t: usize,
    pub prime: u64,
    pub domain: u64,
    pub hashes: Vec<PairwiseHash>,
    /// Sorted distinct smallest hash values, one list per hash.
    pub lists: Vec<Vec<u64>>,
}

impl WordSized for NnzSketch {
    fn words(&self) -> usize {
        2 + self
            .lists
            .iter()
            .map(|l| l.len() + 2)
            .sum::<usize>()
    }
}

impl NnzSketch {
    pub fn new(params: &SketchParams, hashes: Vec<PairwiseHash>) -> Self {
        assert_eq!(hashes.len(), params.delta_lists);
        NnzSketch {
            t: params.t,
            prime: params.prime,
            domain: params.domain,
            lists: vec![Vec::new(); hashes.len()],
            hashes,
        }
    }

    /// Record one stream element.
    pub fn insert(&mut self, item: u64) {
        debug_assert!(item < self.domain);
        for (w, hash) in self.hashes.iter().enumerate() {
            let v = hash.eval(item);
            let list = &mut self.lists[w];
            match list.binary_search(&v) {
                Ok(_) => {}
                Err(pos) => {
                    if pos < self.t {
                        list.insert(pos, v);
                        list.truncate(self.t);
                    }
                }
            }
        }
    }

    /// Merge another sketch built with the same hash family.
    pub fn merge(&mut self, other: &NnzSketch) -> Result<(), SketchError> {
        if self.hashes != other.hashes || self.t != other.t {
            return Err(SketchError::HashMismatch);
        }
        for (mine, theirs) in self.lists.iter_mut().zip(&other.lists) {
            let mut merged = Vec::with_capacity(mine.len() + theirs.len());
            merged.extend_from_slice(mine);
            merged.extend_from_slice(theirs);
            merged.sort_unstable();
            merged.dedup();
            merged.truncate(self.t);
            *mine = merged;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.lists.iter().all(|l| l.is_empty())
    }

    /// Distinct-count estimate: exact while lists are under-full, else
    /// the (lower) median of `t * p / v_w`.
    pub fn estimate(&self) -> Result<u64, SketchError> {
        if self.is_empty() {
            return Err(SketchError::EmptySketch);
        }
        if self.lists.iter().all(|l| l.len() < self.t) {
            // Hashes are injective on the domain, so every list holds
            // exactly the distinct items seen.
            return Ok(self.lists[0].len() as u64);
        }
        let mut estimates: Vec<u64> = self
            .lists
            .iter()
            .map(|l| {
                let v = *l.last().expect("nonempty list");
                ((self.t as u128 * self.prime as u128) / v.max(1) as u128) as u64
            })
            .collect();
        estimates.sort_unstable();
        Ok(estimates[(estimates.len() - 1) / 2])
    }

    /// Text form: `t delta p` header then one `a b v_1 .. v_k` line per
    /// list.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.t, self.lists.len(), self.prime);
        for (hash, list) in self.hashes.iter().zip(&self.lists) {
            let _ = write!(out, "{} {}", hash.a, hash.b);
            for v in list {
                let _ = write!(out, " {v}");
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn from_text(text: &str, domain: u64) -> Result<Self, SketchError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SketchError::Parse("empty".into()))?;
        let head: Vec<u64> = header
            .split_whitespace()
            .map(|w| w.parse().map_err(|_| SketchError::Parse(header.into())))
            .collect::<Result<_, _>>()?;
        if head.len() != 3 {
            return Err(SketchError::Parse("header needs `t delta p`".into()));
        }
        let (t, delta, p) = (head[0] as usize, head[1] as usize, head[2]);
        let mut hashes = Vec::new();
        let mut lists = Vec::new();
        for _ in 0..delta {
            let line = lines
                .next()
                .ok_or_else(|| SketchError::Parse("missing list line".into()))?;
            let nums: Vec<u64> = line
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| SketchError::Parse(line.into())))
                .collect::<Result<_, _>>()?;
            if nums.len() < 2 || nums.len() > t + 2 {
                return Err(SketchError::Parse("bad list line".into()));
            }
            hashes.push(PairwiseHash {
                a: nums[0],
                b: nums[1],
                p,
            });
            let mut list = nums[2..].to_vec();
            list.sort_unstable();
            lists.push(list);
        }
        Ok(NnzSketch {
            t,
            prime: p,
            domain,
            hashes,
            lists,
        })
    }
}

/// Pure-op wrappers matching the operation surface.
pub fn sketch_insert(mut s: NnzSketch, item: u64) -> NnzSketch {
    s.insert(item);
    s
}

pub fn merge_sketches(mut s1: NnzSketch, s2: &NnzSketch) -> Result<NnzSketch, SketchError> {
    s1.merge(s2)?;
    Ok(s1)
}

pub fn sketch_estimate(s: &NnzSketch) -> Result<u64, SketchError> {
    s.estimate()
}

// ---------------------------------------------------------------------
// MR estimation of the product's nonzero count
// ---------------------------------------------------------------------

const TAG_INP_A: u64 = 50;
const TAG_INP_B: u64 = 51;
const TAG_BH: u64 = 52;
const TAG_XPR: u64 = 53;
const TAG_BIN: u64 = 54;
const TAG_SK: u64 = 55;
const TAG_OUT: u64 = 56;

#[derive(Clone, Debug)]
enum SkMsg {
    /// Position of a nonzero entry (cell index), A or B side.
    CellA(u64),
    CellB(u64),
    /// Pseudosketch fragment: an untouched block-pair position, labeled
    /// by the pair it belongs to.
    PseudoA { pair: u64, cell: u64 },
    PseudoB { pair: u64, cell: u64 },
    Sketch(Arc<NnzSketch>),
    Estimate(u64),
}

impl WordSized for SkMsg {
    fn words(&self) -> usize {
        match self {
            SkMsg::CellA(_) | SkMsg::CellB(_) => 1,
            SkMsg::PseudoA { .. } | SkMsg::PseudoB { .. } => 2,
            SkMsg::Sketch(s) => s.words(),
            SkMsg::Estimate(_) => 1,
        }
    }
}

/// Options for the estimation program; `h_override` forces the
/// sketch-vs-pseudosketch threshold for the path-equivalence audits.
#[derive(Clone, Debug, Default)]
pub struct EstimateOptions {
    pub h_override: Option<usize>,
}

/// Estimate the number of nonzero entries of `A * B` without computing
/// any values, to accuracy `eps` with failure probability about
/// `2 * delta`. Returns the estimate and the run's stats.
pub fn estimate_output_nnz<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    eps: f64,
    delta: f64,
    budget: &MemoryBudget,
    seed: u64,
) -> Result<(u64, RoundStats), EngineError> {
    estimate_output_nnz_opt(a, b, eps, delta, budget, seed, &EstimateOptions::default())
}

pub fn estimate_output_nnz_opt<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    eps: f64,
    delta: f64,
    budget: &MemoryBudget,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<(u64, RoundStats), EngineError> {
    let (est, _, stats) = estimate_output_nnz_full(a, b, eps, delta, budget, seed, opts)?;
    Ok((est, stats))
}

/// As [`estimate_output_nnz`], additionally returning the final merged
/// sketch (absent when the product stream is empty).
#[allow(clippy::too_many_arguments)]
pub fn estimate_output_nnz_full<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    eps: f64,
    delta: f64,
    budget: &MemoryBudget,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<(u64, Option<NnzSketch>, RoundStats), EngineError> {
    assert_eq!(a.side(), b.side(), "conformable dims required");
    let side = a.side();
    let domain = side as u64 * side as u64;
    let params = SketchParams::new(eps, delta, domain);
    let hashes = Arc::new(params.draw_hashes(seed));
    let h_thresh = opts.h_override.unwrap_or_else(|| params.h_words());

    let sb = crate::sparse::sparse_block_side(budget.m);
    let q = crate::sparse::sparse_q(side, budget.m);
    let ntilde = a.nnz().max(b.nnz()) as u64;
    let k = ((budget.big_m as u64) / ntilde.max(1))
        .min(q as u64)
        .max(1);
    let phases = (q as u64).div_ceil(k) as usize;

    // Nonempty block occupancy, used to suppress pointless copies.
    let mut a_blocks = std::collections::BTreeSet::new();
    for (i, j, _) in a.entries() {
        a_blocks.insert((i / sb, j / sb));
    }
    let mut b_blocks = std::collections::BTreeSet::new();
    for (i, j, _) in b.entries() {
        b_blocks.insert((i / sb, j / sb));
    }
    let a_blocks = Arc::new(a_blocks);
    let b_blocks = Arc::new(b_blocks);

    // At least M/m bins; more when a phase has many block pairs, so a
    // bin rarely receives more than a couple of sketches.
    let bins = ((budget.big_m / budget.m.max(1)) as u64)
        .max(2 * k * (q as u64) * (q as u64) + 1)
        .max(1);

    // Rounds: scatter; per phase: emit + pair-sketch + bin-merge; then a
    // closing tree over the final bins plus the estimate round.
    let h_cap = params.h_words().max(1);
    let merge_fan = ((4 * budget.m) / (h_cap + 1)).max(2) as u64;
    let mut closing = 0usize;
    {
        let mut v = bins;
        while v > 1 {
            v = v.div_ceil(merge_fan);
            closing += 1;
        }
        closing = closing.max(1);
    }
    let total_rounds = 1 + 3 * phases + closing + 1;

    let params2 = params.clone();
    let mut prog = DriverProgram::new(move |round, _state: &PairSet<SkMsg>| {
        if round >= total_rounds {
            return None;
        }
        let hashes = hashes.clone();
        let params = params2.clone();
        let a_blocks = a_blocks.clone();
        let b_blocks = b_blocks.clone();
        Some(Round::new(move |key, group: Vec<Pair<SkMsg>>, ctx| {
            let tag = key.tag();
            if round == 0 {
                // Scatter positions to block holders.
                let mut emit = ReducerEmit::empty();
                for p in group {
                    match p.value {
                        SkMsg::CellA(c) => {
                            let (i, j) = ((c / side as u64) as u32, (c % side as u64) as u32);
                            emit.next.push(Pair::new(
                                Key::of4(TAG_BH, 0, (i / sb) as u64, (j / sb) as u64),
                                SkMsg::CellA(c),
                            ));
                        }
                        SkMsg::CellB(c) => {
                            let (i, j) = ((c / side as u64) as u32, (c % side as u64) as u32);
                            emit.next.push(Pair::new(
                                Key::of4(TAG_BH, 1, (i / sb) as u64, (j / sb) as u64),
                                SkMsg::CellB(c),
                            ));
                        }
                        _ => {}
                    }
                }
                return emit;
            }
            let phase_round = round - 1;
            let phase = phase_round / 3;
            let step = phase_round % 3;
            if phase < phases {
                match step {
                    0 => {
                        // Emit copies for this phase's K groups.
                        if tag != TAG_BH {
                            return ReducerEmit {
                                output: vec![],
                                next: group,
                            };
                        }
                        let which = key.0[1];
                        let bi = key.0[2];
                        let bj = key.0[3];
                        let qq = q as u64;
                        let mut emit = ReducerEmit {
                            output: vec![],
                            next: group.clone(),
                        };
                        for l in (phase as u64 * k)..(((phase as u64 + 1) * k).min(q as u64)) {
                            if which == 0 {
                                let j = (bj + 2 * qq - bi - l % qq) % qq;
                                if !b_blocks.contains(&(bj as u32, j as u32)) {
                                    continue;
                                }
                                for p in &group {
                                    if let SkMsg::CellA(c) = p.value {
                                        emit.next.push(Pair::new(
                                            Key::of4(TAG_XPR, l, bi, j),
                                            SkMsg::CellA(c),
                                        ));
                                    }
                                }
                            } else {
                                let i = (bi + 2 * qq - bj - l % qq) % qq;
                                if !a_blocks.contains(&(i as u32, bi as u32)) {
                                    continue;
                                }
                                for p in &group {
                                    if let SkMsg::CellB(c) = p.value {
                                        emit.next.push(Pair::new(
                                            Key::of4(TAG_XPR, l, i, bj),
                                            SkMsg::CellB(c),
                                        ));
                                    }
                                }
                            }
                        }
                        emit
                    }
                    1 => {
                        // Block-pair reducers: sketch or pass through.
                        if tag != TAG_XPR {
                            return ReducerEmit {
                                output: vec![],
                                next: group,
                            };
                        }
                        let mut cells_a = Vec::new();
                        let mut cells_b = Vec::new();
                        for p in &group {
                            match p.value {
                                SkMsg::CellA(c) => cells_a.push(c),
                                SkMsg::CellB(c) => cells_b.push(c),
                                _ => {}
                            }
                        }
                        if cells_a.is_empty() || cells_b.is_empty() {
                            return ReducerEmit::empty();
                        }
                        let bin = ctx.rng().gen_range(0..bins);
                        let mut emit = ReducerEmit::empty();
                        if cells_a.len() + cells_b.len() > h_thresh {
                            let mut sk = NnzSketch::new(&params, hashes.as_ref().clone());
                            ctx.declare_working_words(params.h_words());
                            stream_products(side, &cells_a, &cells_b, |cell| sk.insert(cell));
                            emit.next.push(Pair::new(
                                Key::of2(TAG_BIN, bin),
                                SkMsg::Sketch(Arc::new(sk)),
                            ));
                        } else {
                            let pair = key.0[1] * (q as u64) * (q as u64)
                                + key.0[2] * (q as u64)
                                + key.0[3];
                            for c in cells_a {
                                emit.next.push(Pair::new(
                                    Key::of2(TAG_BIN, bin),
                                    SkMsg::PseudoA { pair, cell: c },
                                ));
                            }
                            for c in cells_b {
                                emit.next.push(Pair::new(
                                    Key::of2(TAG_BIN, bin),
                                    SkMsg::PseudoB { pair, cell: c },
                                ));
                            }
                        }
                        emit
                    }
                    _ => {
                        // Bin reducers merge this phase's sketches with
                        // whatever arrived from the previous phase.
                        if tag != TAG_BIN {
                            return ReducerEmit {
                                output: vec![],
                                next: group,
                            };
                        }
                        let merged = bin_merge(&params, &hashes, side, group, ctx);
                        let mut emit = ReducerEmit::empty();
                        if let Some(sk) = merged {
                            let last_phase = phase + 1 == phases;
                            let next_key = if last_phase {
                                Key::of3(TAG_SK, key.0[1] / merge_fan, 0)
                            } else {
                                let nb = ctx.rng().gen_range(0..bins);
                                Key::of2(TAG_BIN, nb)
                            };
                            emit.next.push(Pair::new(next_key, SkMsg::Sketch(Arc::new(sk))));
                        }
                        emit
                    }
                }
            } else {
                // Closing merge tree and the estimate.
                let level = round - 1 - 3 * phases;
                if tag != TAG_SK {
                    return ReducerEmit {
                        output: vec![],
                        next: group,
                    };
                }
                let merged = bin_merge(&params, &hashes, side, group, ctx);
                let mut emit = ReducerEmit::empty();
                if level + 1 >= closing {
                    let est = merged
                        .as_ref()
                        .map(|sk| sk.estimate().unwrap_or(0))
                        .unwrap_or(0);
                    emit.output
                        .push(Pair::new(Key::of1(TAG_OUT), SkMsg::Estimate(est)));
                    if let Some(sk) = merged {
                        emit.output
                            .push(Pair::new(Key::of2(TAG_OUT, 1), SkMsg::Sketch(Arc::new(sk))));
                    }
                } else if let Some(sk) = merged {
                    emit.next.push(Pair::new(
                        Key::of3(TAG_SK, key.0[1] / merge_fan, 0),
                        SkMsg::Sketch(Arc::new(sk)),
                    ));
                }
                emit
            }
        }))
    });

    let mut input: PairSet<SkMsg> = PairSet::new();
    for (kk, (i, j, _)) in a.entries().iter().enumerate() {
        input.push(
            Key::of2(TAG_INP_A, kk as u64),
            SkMsg::CellA(*i as u64 * side as u64 + *j as u64),
        );
    }
    for (kk, (i, j, _)) in b.entries().iter().enumerate() {
        input.push(
            Key::of2(TAG_INP_B, kk as u64),
            SkMsg::CellB(*i as u64 * side as u64 + *j as u64),
        );
    }
    // Input tags scatter in round 0 via the CellA/CellB match.
    let (out, stats) = run_program(input, &mut prog, budget, seed, ExecMode::Audit)?;
    let est = out
        .pairs
        .iter()
        .find_map(|p| match p.value {
            SkMsg::Estimate(e) => Some(e),
            _ => None,
        })
        .unwrap_or(0);
    let sketch = out.pairs.into_iter().find_map(|p| match p.value {
        SkMsg::Sketch(sk) => Some(sk.as_ref().clone()),
        _ => None,
    });
    Ok((est, sketch, stats))
}

/// Enumerate the nonzero product cells of a block pair in deterministic
/// order.
fn stream_products(side: u32, cells_a: &[u64], cells_b: &[u64], mut f: impl FnMut(u64)) {
    let mut a_by_col: std::collections::BTreeMap<u64, Vec<u64>> = Default::default();
    for c in cells_a {
        a_by_col.entry(c % side as u64).or_default().push(c / side as u64);
    }
    for c in cells_b {
        let (t, v) = (c / side as u64, c % side as u64);
        if let Some(rows) = a_by_col.get(&t) {
            for u in rows {
                f(u * side as u64 + v);
            }
        }
    }
}

/// Fold a bin group (sketches and pseudosketch fragments) into a single
/// sketch.
fn bin_merge(
    params: &SketchParams,
    hashes: &Arc<Vec<PairwiseHash>>,
    side: u32,
    group: Vec<Pair<SkMsg>>,
    ctx: &mut crate::engine::ReducerCtx,
) -> Option<NnzSketch> {
    let mut acc: Option<NnzSketch> = None;
    let mut pseudo: std::collections::BTreeMap<u64, (Vec<u64>, Vec<u64>)> = Default::default();
    for p in group {
        match p.value {
            SkMsg::Sketch(sk) => match &mut acc {
                None => acc = Some(sk.as_ref().clone()),
                Some(a) => a.merge(&sk).expect("same hash family"),
            },
            SkMsg::PseudoA { pair, cell } => pseudo.entry(pair).or_default().0.push(cell),
            SkMsg::PseudoB { pair, cell } => pseudo.entry(pair).or_default().1.push(cell),
            _ => {}
        }
    }
    if !pseudo.is_empty() {
        ctx.declare_working_words(params.h_words());
        let sk = acc.get_or_insert_with(|| NnzSketch::new(params, hashes.as_ref().clone()));
        for (_, (ca, cb)) in pseudo {
            stream_products(side, &ca, &cb, |cell| sk.insert(cell));
        }
    }
    acc
}

/// The coarse upper bound `sum_i a_i * b_i` on the product's nonzero
/// count, computed by counting trees on the engine. Overestimates by at
/// most a factor of the matrix side.
pub fn sqrt_n_upper_bound<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    budget: &MemoryBudget,
) -> Result<(u64, RoundStats), EngineError> {
    const T_CNT: u64 = 60;
    const T_JOIN: u64 = 61;
    const T_TOT: u64 = 62;
    const T_RES: u64 = 63;

    assert_eq!(a.side(), b.side());
    let side = a.side() as u64;
    let fan = ((3 * budget.m / 2).max(2)) as u64;
    let count_levels = {
        let mut v = side;
        let mut r = 0;
        while v > fan {
            v = v.div_ceil(fan);
            r += 1;
        }
        r
    };
    let join_levels = {
        let mut v = side;
        let mut r = 0;
        while v > fan {
            v = v.div_ceil(fan);
            r += 1;
        }
        r.max(1)
    };
    let total_rounds = 1 + count_levels + 1 + join_levels + 1;

    let mut input: PairSet<SkMsg> = PairSet::new();
    for (kk, (_, j, _)) in a.entries().iter().enumerate() {
        input.push(Key::of2(TAG_INP_A, kk as u64), SkMsg::CellA(*j as u64));
    }
    for (kk, (i, _, _)) in b.entries().iter().enumerate() {
        input.push(Key::of2(TAG_INP_B, kk as u64), SkMsg::CellB(*i as u64));
    }

    let mut prog = DriverProgram::new(move |round, _state: &PairSet<SkMsg>| {
        if round >= total_rounds {
            return None;
        }
        Some(Round::new(move |key, group: Vec<Pair<SkMsg>>, _ctx| {
            let tag = key.tag();
            if round == 0 {
                // Entries land on per-index counting leaves.
                let mut emit = ReducerEmit::empty();
                for p in group {
                    match p.value {
                        SkMsg::CellA(j) => emit.next.push(Pair::new(
                            Key::of4(T_CNT, 0, j, 0),
                            SkMsg::Estimate(1),
                        )),
                        SkMsg::CellB(i) => emit.next.push(Pair::new(
                            Key::of4(T_CNT, 1, i, 0),
                            SkMsg::Estimate(1),
                        )),
                        _ => {}
                    }
                }
                return emit;
            }
            if round <= count_levels && tag == T_CNT {
                // With per-index leaves a single level suffices;
                // deeper levels just forward.
                let total: u64 = group
                    .iter()
                    .filter_map(|p| match p.value {
                        SkMsg::Estimate(v) => Some(v),
                        _ => None,
                    })
                    .sum();
                return ReducerEmit {
                    output: vec![],
                    next: vec![Pair::new(*key, SkMsg::Estimate(total))],
                };
            }
            if round == count_levels + 1 {
                if tag != T_CNT {
                    return ReducerEmit {
                        output: vec![],
                        next: group,
                    };
                }
                // Deliver the count to the per-index join reducer.
                let which = key.0[1];
                let idx = key.0[2];
                let total: u64 = group
                    .iter()
                    .filter_map(|p| match p.value {
                        SkMsg::Estimate(v) => Some(v),
                        _ => None,
                    })
                    .sum();
                return ReducerEmit {
                    output: vec![],
                    next: vec![Pair::new(
                        Key::of2(T_JOIN, idx),
                        if which == 0 {
                            SkMsg::PseudoA {
                                pair: 0,
                                cell: total,
                            }
                        } else {
                            SkMsg::PseudoB {
                                pair: 0,
                                cell: total,
                            }
                        },
                    )],
                };
            }
            if round == count_levels + 2 && tag == T_JOIN {
                let mut a_cnt = 0u64;
                let mut b_cnt = 0u64;
                for p in group {
                    match p.value {
                        SkMsg::PseudoA { cell, .. } => a_cnt = cell,
                        SkMsg::PseudoB { cell, .. } => b_cnt = cell,
                        _ => {}
                    }
                }
                let prod = a_cnt * b_cnt;
                if prod == 0 {
                    return ReducerEmit::empty();
                }
                return ReducerEmit {
                    output: vec![],
                    next: vec![Pair::new(
                        Key::of2(T_TOT, key.0[1] / fan),
                        SkMsg::Estimate(prod),
                    )],
                };
            }
            if tag == T_TOT {
                let total: u64 = group
                    .iter()
                    .filter_map(|p| match p.value {
                        SkMsg::Estimate(v) => Some(v),
                        _ => None,
                    })
                    .sum();
                let last = round + 1 == total_rounds;
                if last {
                    return ReducerEmit {
                        output: vec![Pair::new(Key::of1(T_RES), SkMsg::Estimate(total))],
                        next: vec![],
                    };
                }
                return ReducerEmit {
                    output: vec![],
                    next: vec![Pair::new(
                        Key::of2(T_TOT, key.0[1] / fan),
                        SkMsg::Estimate(total),
                    )],
                };
            }
            ReducerEmit {
                output: vec![],
                next: group,
            }
        }))
    });

    let (out, stats) = run_program(input, &mut prog, budget, 0, ExecMode::Audit)?;
    let total: u64 = out
        .pairs
        .iter()
        .filter_map(|p| match p.value {
            SkMsg::Estimate(v) => Some(v),
            _ => None,
        })
        .sum();
    Ok((total, stats))
}
