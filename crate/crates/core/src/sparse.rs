//! Sparse-sparse and sparse-dense multiplication strategies.
//!
//! Three strategies share a common shape: matrix entries are scattered to
//! holder reducers, copies meet in product reducers, and per-cell
//! contributions fold into running output cells through a value tree.
//!
//! * `d1_multiply` works at single-entry granularity: all products
//!   between the nonzeros of column `j` of A and row `j` of B must be
//!   computed, and a phase processes the largest window of consecutive
//!   `j` whose product count fits the aggregate budget; every product
//!   gets its own constant-memory reducer.
//! * `d2_multiply` works at block granularity: before executing a batch
//!   of block-product groups it runs a value-free structural pass that
//!   measures how much memory each group's products will take, then
//!   picks the largest prefix of groups that fits.
//! * `r1_multiply` skips the per-phase measurement: it first estimates
//!   the product's nonzero count with the sketch program and then runs
//!   a fixed window of `K = min(M/(ntilde + 2*est), q)` groups per
//!   product round.
//!
//! `sparse_multiply_auto` compares the strategies' round-bound
//! expressions and dispatches; `sd_multiply` picks between the
//! entry-granular strategy and the dense multiplier for a sparse-dense
//! pair.
//!
//! Replication rounds are sub-batched so a single round never holds more
//! than half the aggregate budget in copies, and sparse programs use
//! blocks of side `floor(sqrt(m/2))` so a reducer holding two blocks
//! plus an occupancy row stays inside the local cap.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::engine::{
    run_program, EngineError, ExecMode, Key, MemoryBudget, Pair, PairSet, Program, ReducerCtx,
    ReducerEmit, Round, RoundStats, WordSized,
};
use crate::matrix::CooMatrix;
use crate::semiring::Semiring;
use crate::sketch::{estimate_output_nnz, sqrt_n_upper_bound, SketchParams};

const TAG_INP_A: u64 = 30;
const TAG_INP_B: u64 = 31;
const TAG_GA: u64 = 32;
const TAG_GB: u64 = 33;
const TAG_PRD: u64 = 34;
const TAG_BH: u64 = 35;
const TAG_XPR: u64 = 36;
const TAG_ACC: u64 = 37;
const TAG_CST: u64 = 38;
const TAG_OUT: u64 = 39;
const TAG_ACCS: u64 = 40;
const TAG_MLR: u64 = 41;

/// Block side for the sparse programs: half the local budget in entries.
pub fn sparse_block_side(m: usize) -> u32 {
    ((((m / 2).max(1)) as f64).sqrt().floor() as u32).max(1)
}

/// Blocks per side for the sparse group schedule.
pub fn sparse_q(side: u32, m: usize) -> u32 {
    side.div_ceil(sparse_block_side(m)).max(1)
}

/// Value-tree fan-in: contributions cost two words each.
fn acc_fan(m: usize) -> u64 {
    ((3 * m / 2).max(2)) as u64
}

/// Tree rounds needed before at most `fan` values remain per cell.
fn acc_levels(span: u64, fan: u64) -> usize {
    let mut v = span;
    let mut rounds = 0;
    while v > fan {
        v = v.div_ceil(fan);
        rounds += 1;
    }
    rounds
}

#[derive(Clone, Debug)]
enum SpMsg<S: Semiring> {
    /// Entry of A (row, col, value): one cell-index word, one value word.
    EntA { i: u32, j: u32, x: S::Elem },
    EntB { i: u32, j: u32, x: S::Elem },
    /// Position-only copy for the structural pass.
    CellA(u64),
    CellB(u64),
    Cnt(u64),
    Contrib(S::Elem),
    Run(S::Elem),
}

impl<S: Semiring> WordSized for SpMsg<S> {
    fn words(&self) -> usize {
        match self {
            SpMsg::EntA { .. } | SpMsg::EntB { .. } => 2,
            SpMsg::CellA(_) | SpMsg::CellB(_) | SpMsg::Cnt(_) => 1,
            SpMsg::Contrib(_) | SpMsg::Run(_) => 1,
        }
    }
}

fn echo_group<S: Semiring>(group: Vec<Pair<SpMsg<S>>>) -> ReducerEmit<SpMsg<S>> {
    ReducerEmit {
        output: vec![],
        next: group,
    }
}

/// Fold arrivals into a cell's running value.
fn cst_fold<S: Semiring>(group: Vec<Pair<SpMsg<S>>>) -> Option<S::Elem> {
    let mut acc: Option<S::Elem> = None;
    for p in group {
        match p.value {
            SpMsg::Contrib(v) | SpMsg::Run(v) => {
                acc = Some(match acc {
                    None => v,
                    Some(a) => S::plus(&a, &v),
                });
            }
            _ => {}
        }
    }
    acc
}

fn cst_tick<S: Semiring>(key: &Key, group: Vec<Pair<SpMsg<S>>>) -> ReducerEmit<SpMsg<S>> {
    match cst_fold::<S>(group) {
        Some(v) => ReducerEmit {
            output: vec![],
            next: vec![Pair::new(Key::of2(TAG_CST, key.0[1]), SpMsg::Run(v))],
        },
        None => ReducerEmit::empty(),
    }
}

fn final_round<S: Semiring>(
    key: &Key,
    group: Vec<Pair<SpMsg<S>>>,
    side: u32,
) -> ReducerEmit<SpMsg<S>> {
    if key.tag() != TAG_CST {
        return ReducerEmit::empty();
    }
    let cell = key.0[1];
    match cst_fold::<S>(group) {
        Some(v) if !S::is_zero(&v) => ReducerEmit {
            output: vec![Pair::new(
                Key::of2(TAG_OUT, cell),
                SpMsg::EntA {
                    i: (cell / side as u64) as u32,
                    j: (cell % side as u64) as u32,
                    x: v,
                },
            )],
            next: vec![],
        },
        _ => ReducerEmit::empty(),
    }
}

/// Route a contribution into the value tree or straight to its cell.
fn push_contrib<S: Semiring>(
    emit: &mut ReducerEmit<SpMsg<S>>,
    cell: u64,
    leaf: u64,
    levels: usize,
    fan: u64,
    val: S::Elem,
) {
    if levels == 0 {
        emit.next
            .push(Pair::new(Key::of2(TAG_CST, cell), SpMsg::Contrib(val)));
    } else {
        emit.next.push(Pair::new(
            Key::of3(TAG_ACC, cell, leaf / fan),
            SpMsg::Contrib(val),
        ));
    }
}

fn acc_round<S: Semiring>(
    key: &Key,
    group: Vec<Pair<SpMsg<S>>>,
    remaining: usize,
    fan: u64,
) -> ReducerEmit<SpMsg<S>> {
    if key.tag() == TAG_CST {
        return cst_tick::<S>(key, group);
    }
    if key.tag() != TAG_ACC {
        return echo_group(group);
    }
    let cell = key.0[1];
    let chunk = key.0[2];
    let mut acc: Option<S::Elem> = None;
    for p in group {
        if let SpMsg::Contrib(v) = p.value {
            acc = Some(match acc {
                None => v,
                Some(a) => S::plus(&a, &v),
            });
        }
    }
    let v = match acc {
        Some(v) => v,
        None => return ReducerEmit::empty(),
    };
    let mut emit = ReducerEmit::empty();
    if remaining == 0 {
        emit.next
            .push(Pair::new(Key::of2(TAG_CST, cell), SpMsg::Contrib(v)));
    } else {
        emit.next.push(Pair::new(
            Key::of3(TAG_ACC, cell, chunk / fan),
            SpMsg::Contrib(v),
        ));
    }
    emit
}

fn collect_output<S: Semiring>(out: PairSet<SpMsg<S>>, side: u32) -> CooMatrix<S> {
    let entries: Vec<(u32, u32, S::Elem)> = out
        .pairs
        .into_iter()
        .filter_map(|p| match p.value {
            SpMsg::EntA { i, j, x } => Some((i, j, x)),
            _ => None,
        })
        .collect();
    CooMatrix::from_entries(side, entries).expect("product entries in range and unique")
}

fn matrix_input<S: Semiring>(a: &CooMatrix<S>, b: &CooMatrix<S>) -> PairSet<SpMsg<S>> {
    let mut input: PairSet<SpMsg<S>> = PairSet::new();
    for (k, (i, j, x)) in a.entries().iter().enumerate() {
        input.push(
            Key::of2(TAG_INP_A, k as u64),
            SpMsg::EntA {
                i: *i,
                j: *j,
                x: x.clone(),
            },
        );
    }
    for (k, (i, j, x)) in b.entries().iter().enumerate() {
        input.push(
            Key::of2(TAG_INP_B, k as u64),
            SpMsg::EntB {
                i: *i,
                j: *j,
                x: x.clone(),
            },
        );
    }
    input
}

// ---------------------------------------------------------------------
// D1: entry-granular strategy
// ---------------------------------------------------------------------

/// Per-index profile of the operands: nonzeros of A's column `i` and of
/// B's row `i`.
pub struct ColRowProfile {
    pub a_cnt: Vec<u64>,
    pub b_cnt: Vec<u64>,
}

impl ColRowProfile {
    pub fn compute<S: Semiring>(a: &CooMatrix<S>, b: &CooMatrix<S>) -> Self {
        ColRowProfile {
            a_cnt: a.col_counts().iter().map(|&c| c as u64).collect(),
            b_cnt: b.row_counts().iter().map(|&c| c as u64).collect(),
        }
    }

    /// The elementary product counts `p_j = a_j * b_j`.
    pub fn products(&self) -> Vec<u64> {
        self.a_cnt
            .iter()
            .zip(&self.b_cnt)
            .map(|(&a, &b)| a * b)
            .collect()
    }
}

/// Maximal windows of consecutive indices whose product counts fit the
/// budget: each window `[r, e)` has `sum p_j <= cap` and extending it by
/// one more index would exceed the cap. A single over-budget index gets
/// a window of its own (its products are split across rounds later).
pub fn d1_windows(pj: &[u64], cap: u64) -> Vec<(usize, usize)> {
    let mut windows = Vec::new();
    let mut r = 0;
    while r < pj.len() {
        let mut sum = pj[r];
        let mut e = r + 1;
        while e < pj.len() && sum + pj[e] <= cap {
            sum += pj[e];
            e += 1;
        }
        windows.push((r, e));
        r = e;
    }
    windows
}

/// One replication batch: product rectangles `[a_lo, a_hi) x [b_lo, b_hi)`
/// per column, totalling at most the batch budget.
#[derive(Clone, Debug)]
struct D1Sub {
    window_start: u32,
    parts: Vec<(u32, u32, u32, u32, u32)>,
}

fn d1_subbatches(window: (usize, usize), a_cnt: &[u64], b_cnt: &[u64], p_max: u64) -> Vec<D1Sub> {
    let mut subs: Vec<D1Sub> = Vec::new();
    let mut parts: Vec<(u32, u32, u32, u32, u32)> = Vec::new();
    let mut used = 0u64;
    macro_rules! flush {
        () => {
            if !parts.is_empty() {
                subs.push(D1Sub {
                    window_start: window.0 as u32,
                    parts: std::mem::take(&mut parts),
                });
                #[allow(unused_assignments)]
                {
                    used = 0;
                }
            }
        };
    }
    for j in window.0..window.1 {
        let (aj, bj) = (a_cnt[j], b_cnt[j]);
        if aj == 0 || bj == 0 {
            continue;
        }
        if bj > p_max {
            // Chunk the columns of the rectangle, one source row at a time.
            flush!();
            for a_lo in 0..aj {
                let mut b_lo = 0u64;
                while b_lo < bj {
                    let b_hi = (b_lo + p_max).min(bj);
                    parts.push((j as u32, a_lo as u32, a_lo as u32 + 1, b_lo as u32, b_hi as u32));
                    flush!();
                    b_lo = b_hi;
                }
            }
            continue;
        }
        let mut a_lo = 0u64;
        while a_lo < aj {
            let room = p_max - used;
            if room < bj {
                flush!();
                continue;
            }
            let rows = (room / bj).min(aj - a_lo);
            parts.push((j as u32, a_lo as u32, (a_lo + rows) as u32, 0, bj as u32));
            used += rows * bj;
            a_lo += rows;
        }
    }
    flush!();
    subs
}

#[derive(Clone, Debug)]
enum D1Round {
    Scatter,
    Emit(usize),
    Product { sub: usize, levels: usize },
    Acc { remaining: usize },
    Final,
}

/// Entry-granular sparse multiplication.
pub fn d1_multiply<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    budget: &MemoryBudget,
) -> Result<(CooMatrix<S>, RoundStats), EngineError> {
    assert_eq!(a.side(), b.side(), "conformable dims required");
    let side = a.side();
    let profile = ColRowProfile::compute(a, b);
    let pj = profile.products();
    let windows = d1_windows(&pj, budget.big_m as u64);
    let p_max = ((budget.big_m as u64) / 2).max(1);
    let fan = acc_fan(budget.m);

    // Holder chunking: a holder keeps entries of one column (of A) or
    // one row (of B) restricted to a range of m/3 indices, so holder
    // groups are bounded by construction. Rank bases let holders address
    // product slots globally.
    let ghk = ((budget.m / 3).max(1)) as u32;
    let mut a_base: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    let mut b_base: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    {
        let mut per_chunk: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for (i, j, _) in a.entries() {
            *per_chunk.entry((*j, i / ghk)).or_default() += 1;
        }
        let mut cums: BTreeMap<u32, u32> = BTreeMap::new();
        for (&(j, c), &cnt) in &per_chunk {
            let cum = cums.entry(j).or_default();
            a_base.insert((j, c), *cum);
            *cum += cnt;
        }
        let mut per_chunk: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for (i, j, _) in b.entries() {
            *per_chunk.entry((*i, j / ghk)).or_default() += 1;
        }
        let mut cums: BTreeMap<u32, u32> = BTreeMap::new();
        for (&(i, c), &cnt) in &per_chunk {
            let cum = cums.entry(i).or_default();
            b_base.insert((i, c), *cum);
            *cum += cnt;
        }
    }

    let mut script = vec![D1Round::Scatter];
    let mut subs: Vec<D1Sub> = Vec::new();
    for w in &windows {
        let span = (w.1 - w.0) as u64;
        let levels = acc_levels(span, fan);
        for sub in d1_subbatches(*w, &profile.a_cnt, &profile.b_cnt, p_max) {
            let idx = subs.len();
            subs.push(sub);
            script.push(D1Round::Emit(idx));
            script.push(D1Round::Product { sub: idx, levels });
            for l in 0..levels {
                script.push(D1Round::Acc {
                    remaining: levels - 1 - l,
                });
            }
        }
    }
    script.push(D1Round::Final);

    let script = Arc::new(script);
    let subs = Arc::new(subs);
    let a_base = Arc::new(a_base);
    let b_base = Arc::new(b_base);
    let total = script.len();

    struct D1Program<S: Semiring> {
        script: Arc<Vec<D1Round>>,
        subs: Arc<Vec<D1Sub>>,
        a_base: Arc<BTreeMap<(u32, u32), u32>>,
        b_base: Arc<BTreeMap<(u32, u32), u32>>,
        total: usize,
        side: u32,
        ghk: u32,
        fan: u64,
        _marker: std::marker::PhantomData<S>,
    }

    impl<S: Semiring> Program<SpMsg<S>> for D1Program<S> {
        fn next_round(&mut self, round: usize, _state: &PairSet<SpMsg<S>>) -> Option<Round<SpMsg<S>>> {
            if round >= self.total {
                return None;
            }
            let spec = self.script[round].clone();
            let subs = self.subs.clone();
            let a_base = self.a_base.clone();
            let b_base = self.b_base.clone();
            let (side, ghk, fan) = (self.side, self.ghk, self.fan);
            Some(Round::new(move |key, group, ctx| {
                d1_round::<S>(&spec, &subs, &a_base, &b_base, side, ghk, fan, key, group, ctx)
            }))
        }
    }

    let mut prog = D1Program::<S> {
        script,
        subs,
        a_base,
        b_base,
        total,
        side,
        ghk,
        fan,
        _marker: std::marker::PhantomData,
    };
    let (out, stats) = run_program(matrix_input(a, b), &mut prog, budget, 0, ExecMode::Audit)?;
    Ok((collect_output::<S>(out, side), stats))
}

#[allow(clippy::too_many_arguments)]
fn d1_round<S: Semiring>(
    spec: &D1Round,
    subs: &[D1Sub],
    a_base: &BTreeMap<(u32, u32), u32>,
    b_base: &BTreeMap<(u32, u32), u32>,
    side: u32,
    ghk: u32,
    fan: u64,
    key: &Key,
    group: Vec<Pair<SpMsg<S>>>,
    ctx: &mut ReducerCtx,
) -> ReducerEmit<SpMsg<S>> {
    let tag = key.tag();
    match spec {
        D1Round::Scatter => {
            let mut emit = ReducerEmit::empty();
            for p in group {
                match p.value {
                    SpMsg::EntA { i, j, x } => emit.next.push(Pair::new(
                        Key::of3(TAG_GA, j as u64, (i / ghk) as u64),
                        SpMsg::EntA { i, j, x },
                    )),
                    SpMsg::EntB { i, j, x } => emit.next.push(Pair::new(
                        Key::of3(TAG_GB, i as u64, (j / ghk) as u64),
                        SpMsg::EntB { i, j, x },
                    )),
                    _ => {}
                }
            }
            emit
        }
        D1Round::Emit(s) => {
            if tag == TAG_CST {
                return cst_tick::<S>(key, group);
            }
            if tag != TAG_GA && tag != TAG_GB {
                return echo_group(group);
            }
            let sub = &subs[*s];
            let index = key.0[1] as u32;
            let chunk = key.0[2] as u32;
            let mut emit = ReducerEmit {
                output: vec![],
                next: group.clone(),
            };
            if tag == TAG_GA {
                let base = *a_base.get(&(index, chunk)).unwrap_or(&0);
                let mut entries: Vec<(u32, &S::Elem)> = group
                    .iter()
                    .filter_map(|p| match &p.value {
                        SpMsg::EntA { i, x, .. } => Some((*i, x)),
                        _ => None,
                    })
                    .collect();
                entries.sort_by_key(|&(i, _)| i);
                for part in sub.parts.iter().filter(|p| p.0 == index) {
                    let (_, a_lo, a_hi, b_lo, b_hi) = *part;
                    for (pos, (i, x)) in entries.iter().enumerate() {
                        let rank = base + pos as u32;
                        if rank < a_lo || rank >= a_hi {
                            continue;
                        }
                        for t in b_lo..b_hi {
                            emit.next.push(Pair::new(
                                Key::of4(TAG_PRD, index as u64, rank as u64, t as u64),
                                SpMsg::EntA {
                                    i: *i,
                                    j: index,
                                    x: (*x).clone(),
                                },
                            ));
                        }
                    }
                }
            } else {
                let base = *b_base.get(&(index, chunk)).unwrap_or(&0);
                let mut entries: Vec<(u32, &S::Elem)> = group
                    .iter()
                    .filter_map(|p| match &p.value {
                        SpMsg::EntB { j, x, .. } => Some((*j, x)),
                        _ => None,
                    })
                    .collect();
                entries.sort_by_key(|&(j, _)| j);
                for part in sub.parts.iter().filter(|p| p.0 == index) {
                    let (_, a_lo, a_hi, b_lo, b_hi) = *part;
                    for (pos, (j, x)) in entries.iter().enumerate() {
                        let rank = base + pos as u32;
                        if rank < b_lo || rank >= b_hi {
                            continue;
                        }
                        for s_row in a_lo..a_hi {
                            emit.next.push(Pair::new(
                                Key::of4(TAG_PRD, index as u64, s_row as u64, rank as u64),
                                SpMsg::EntB {
                                    i: index,
                                    j: *j,
                                    x: (*x).clone(),
                                },
                            ));
                        }
                    }
                }
            }
            emit
        }
        D1Round::Product { sub, levels } => {
            if tag == TAG_CST {
                return cst_tick::<S>(key, group);
            }
            if tag != TAG_PRD {
                return echo_group(group);
            }
            let window_start = subs[*sub].window_start as u64;
            let col = key.0[1];
            let mut ea = None;
            let mut eb = None;
            for p in group {
                match p.value {
                    SpMsg::EntA { i, x, .. } => ea = Some((i, x)),
                    SpMsg::EntB { j, x, .. } => eb = Some((j, x)),
                    _ => {}
                }
            }
            let ((u, x), (v, y)) = match (ea, eb) {
                (Some(a), Some(b)) => (a, b),
                _ => return ReducerEmit::empty(),
            };
            ctx.record_products(1);
            let val = S::times(&x, &y);
            let cell = u as u64 * side as u64 + v as u64;
            let mut emit = ReducerEmit::empty();
            push_contrib(&mut emit, cell, col - window_start, *levels, fan, val);
            emit
        }
        D1Round::Acc { remaining } => acc_round::<S>(key, group, *remaining, fan),
        D1Round::Final => final_round::<S>(key, group, side),
    }
}

// ---------------------------------------------------------------------
// Block-granular execution shared by D2 and R1
// ---------------------------------------------------------------------

struct BlockIndex<S: Semiring> {
    sb: u32,
    q: u32,
    a_blocks: BTreeSet<(u32, u32)>,
    b_blocks: BTreeSet<(u32, u32)>,
    a_nnz: BTreeMap<(u32, u32), u64>,
    b_nnz: BTreeMap<(u32, u32), u64>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Semiring> BlockIndex<S> {
    fn new(a: &CooMatrix<S>, b: &CooMatrix<S>, m: usize) -> Self {
        let sb = sparse_block_side(m);
        let q = sparse_q(a.side(), m);
        let mut a_blocks = BTreeSet::new();
        let mut a_nnz: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (i, j, _) in a.entries() {
            a_blocks.insert((i / sb, j / sb));
            *a_nnz.entry((i / sb, j / sb)).or_default() += 1;
        }
        let mut b_blocks = BTreeSet::new();
        let mut b_nnz: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (i, j, _) in b.entries() {
            b_blocks.insert((i / sb, j / sb));
            *b_nnz.entry((i / sb, j / sb)).or_default() += 1;
        }
        BlockIndex {
            sb,
            q,
            a_blocks,
            b_blocks,
            a_nnz,
            b_nnz,
            _marker: std::marker::PhantomData,
        }
    }

    /// Entry copies (both sides) needed for the products of group `l`
    /// whose block-row index lies in `[i_lo, i_hi)`.
    fn part_copy_cost(&self, l: u32, i_lo: u32, i_hi: u32) -> u64 {
        let q = self.q;
        let mut cost = 0;
        for (&(bi, bh), &nnz) in &self.a_nnz {
            if bi < i_lo || bi >= i_hi {
                continue;
            }
            let j = (bh + 2 * q - bi - l % q) % q;
            if self.b_blocks.contains(&(bh, j)) {
                cost += nnz;
            }
        }
        for (&(bh, bj), &nnz) in &self.b_nnz {
            let i = (bh + 2 * q - bj - l % q) % q;
            if i < i_lo || i >= i_hi {
                continue;
            }
            if self.a_blocks.contains(&(i, bh)) {
                cost += nnz;
            }
        }
        cost
    }

    fn group_copy_cost(&self, l: u32) -> u64 {
        self.part_copy_cost(l, 0, self.q)
    }
}

/// One replication unit: the products of group `l` with block-row index
/// in `[i_lo, i_hi)`.
#[derive(Clone, Debug, PartialEq, Eq)]
struct EmitPart {
    l: u32,
    i_lo: u32,
    i_hi: u32,
}

/// Split groups into consecutive batches whose copy cost in entries
/// stays at or below `cap`. A group that alone exceeds the cap is split
/// by block-row ranges so its products spread over several rounds.
fn batch_groups<S: Semiring>(idx: &BlockIndex<S>, groups: &[u32], cap: u64) -> Vec<Vec<EmitPart>> {
    let q = idx.q;
    let mut batches: Vec<Vec<EmitPart>> = Vec::new();
    let mut cur: Vec<EmitPart> = Vec::new();
    let mut used = 0u64;
    for &l in groups {
        let c = idx.group_copy_cost(l);
        if c <= cap {
            if !cur.is_empty() && used + c > cap {
                batches.push(std::mem::take(&mut cur));
                used = 0;
            }
            cur.push(EmitPart { l, i_lo: 0, i_hi: q });
            used += c;
            continue;
        }
        // Over-budget group: flush, then emit row ranges one batch each.
        if !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        let mut i_lo = 0u32;
        while i_lo < q {
            let mut i_hi = i_lo + 1;
            let mut part_cost = idx.part_copy_cost(l, i_lo, i_hi);
            while i_hi < q {
                let next = idx.part_copy_cost(l, i_hi, i_hi + 1);
                if part_cost + next > cap {
                    break;
                }
                part_cost += next;
                i_hi += 1;
            }
            batches.push(vec![EmitPart { l, i_lo, i_hi }]);
            i_lo = i_hi;
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

#[derive(Clone, Debug)]
enum BlkRound {
    Scatter,
    Emit {
        parts: Arc<Vec<EmitPart>>,
        structural: bool,
    },
    Product {
        window_start: u64,
        span: u64,
        levels: usize,
    },
    StructProduct {
        levels: usize,
    },
    Acc {
        remaining: usize,
    },
    StructAcc {
        remaining: usize,
    },
    Final,
}

#[derive(Clone)]
struct BlockState<S: Semiring> {
    idx: Arc<BlockIndex<S>>,
    fan: u64,
    side: u32,
}

#[allow(clippy::too_many_arguments)]
fn block_round<S: Semiring>(
    st: &BlockState<S>,
    spec: &BlkRound,
    key: &Key,
    group: Vec<Pair<SpMsg<S>>>,
    ctx: &mut ReducerCtx,
) -> ReducerEmit<SpMsg<S>> {
    let tag = key.tag();
    let idx = &st.idx;
    let q = idx.q as u64;
    match spec {
        BlkRound::Scatter => {
            let mut emit = ReducerEmit::empty();
            for p in group {
                match p.value {
                    SpMsg::EntA { i, j, x } => emit.next.push(Pair::new(
                        Key::of4(TAG_BH, 0, (i / idx.sb) as u64, (j / idx.sb) as u64),
                        SpMsg::EntA { i, j, x },
                    )),
                    SpMsg::EntB { i, j, x } => emit.next.push(Pair::new(
                        Key::of4(TAG_BH, 1, (i / idx.sb) as u64, (j / idx.sb) as u64),
                        SpMsg::EntB { i, j, x },
                    )),
                    _ => {}
                }
            }
            emit
        }
        BlkRound::Emit { parts, structural } => {
            if tag == TAG_CST {
                return cst_tick::<S>(key, group);
            }
            if tag != TAG_BH {
                return echo_group(group);
            }
            let which = key.0[1];
            let bi = key.0[2];
            let bj = key.0[3];
            let mut emit = ReducerEmit {
                output: vec![],
                next: group.clone(),
            };
            for part in parts.iter() {
                let l = part.l as u64;
                if which == 0 {
                    if (bi as u32) < part.i_lo || (bi as u32) >= part.i_hi {
                        continue;
                    }
                    let j = (bj + 2 * q - bi - l % q) % q;
                    if !idx.b_blocks.contains(&(bj as u32, j as u32)) {
                        continue;
                    }
                    let k = Key::of4(TAG_XPR, l, bi, j);
                    for p in &group {
                        if let SpMsg::EntA { i, j: jc, x } = &p.value {
                            if *structural {
                                emit.next.push(Pair::new(
                                    k,
                                    SpMsg::CellA(*i as u64 * st.side as u64 + *jc as u64),
                                ));
                            } else {
                                emit.next.push(Pair::new(
                                    k,
                                    SpMsg::EntA {
                                        i: *i,
                                        j: *jc,
                                        x: x.clone(),
                                    },
                                ));
                            }
                        }
                    }
                } else {
                    let i = (bi + 2 * q - bj - l % q) % q;
                    if (i as u32) < part.i_lo || (i as u32) >= part.i_hi {
                        continue;
                    }
                    if !idx.a_blocks.contains(&(i as u32, bi as u32)) {
                        continue;
                    }
                    let k = Key::of4(TAG_XPR, l, i, bj);
                    for p in &group {
                        if let SpMsg::EntB { i: ir, j: jc, x } = &p.value {
                            if *structural {
                                emit.next.push(Pair::new(
                                    k,
                                    SpMsg::CellB(*ir as u64 * st.side as u64 + *jc as u64),
                                ));
                            } else {
                                emit.next.push(Pair::new(
                                    k,
                                    SpMsg::EntB {
                                        i: *ir,
                                        j: *jc,
                                        x: x.clone(),
                                    },
                                ));
                            }
                        }
                    }
                }
            }
            emit
        }
        BlkRound::Product {
            window_start,
            span,
            levels,
        } => {
            if tag == TAG_CST {
                return cst_tick::<S>(key, group);
            }
            if tag != TAG_XPR {
                return echo_group(group);
            }
            let l = key.0[1];
            let mut by_col: BTreeMap<u32, Vec<(u32, S::Elem)>> = BTreeMap::new();
            let mut b_entries = Vec::new();
            for p in group {
                match p.value {
                    SpMsg::EntA { i, j, x } => by_col.entry(j).or_default().push((i, x)),
                    SpMsg::EntB { i, j, x } => b_entries.push((i, j, x)),
                    _ => {}
                }
            }
            let mut contribs: BTreeMap<u64, S::Elem> = BTreeMap::new();
            let mut count = 0u64;
            for (t, v, y) in &b_entries {
                if let Some(col) = by_col.get(t) {
                    for (u, x) in col {
                        count += 1;
                        let val = S::times(x, y);
                        let cell = *u as u64 * st.side as u64 + *v as u64;
                        contribs
                            .entry(cell)
                            .and_modify(|acc| *acc = S::plus(acc, &val))
                            .or_insert(val);
                    }
                }
            }
            ctx.record_products(count);
            let leaf = l - window_start;
            let _ = span;
            let mut emit = ReducerEmit::empty();
            for (cell, val) in contribs {
                if S::is_zero(&val) {
                    continue;
                }
                push_contrib(&mut emit, cell, leaf, *levels, st.fan, val);
            }
            emit
        }
        BlkRound::StructProduct { levels } => {
            if tag == TAG_CST {
                return cst_tick::<S>(key, group);
            }
            if tag != TAG_XPR {
                return echo_group(group);
            }
            let l = key.0[1];
            let bi = key.0[2];
            let bj = key.0[3];
            let mut a_cells = Vec::new();
            let mut b_cells = Vec::new();
            for p in group {
                match p.value {
                    SpMsg::CellA(c) => a_cells.push(c),
                    SpMsg::CellB(c) => b_cells.push(c),
                    _ => {}
                }
            }
            // Distinct product cells, one block row of flags at a time.
            let side = st.side as u64;
            let mut by_col: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            for c in &a_cells {
                by_col.entry(c % side).or_default().push(c / side);
            }
            let mut by_row: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            for c in &b_cells {
                by_row.entry(c / side).or_default().push(c % side);
            }
            let mut rows: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
            for (t, us) in &by_col {
                if let Some(vs) = by_row.get(t) {
                    for u in us {
                        let row = rows.entry(*u).or_default();
                        for v in vs {
                            row.insert(*v);
                        }
                    }
                }
            }
            ctx.declare_working_words(idx.sb as usize);
            let nnz: u64 = rows.values().map(|r| r.len() as u64).sum();
            let leaf = bi * q + bj;
            let mut emit = ReducerEmit::empty();
            if *levels == 0 {
                emit.next
                    .push(Pair::new(Key::of2(TAG_MLR, l), SpMsg::Cnt(nnz)));
            } else {
                emit.next.push(Pair::new(
                    Key::of3(TAG_ACCS, l, leaf / st.fan),
                    SpMsg::Cnt(nnz),
                ));
            }
            emit
        }
        BlkRound::Acc { remaining } => acc_round::<S>(key, group, *remaining, st.fan),
        BlkRound::StructAcc { remaining } => {
            if tag == TAG_CST {
                return cst_tick::<S>(key, group);
            }
            if tag != TAG_ACCS {
                return echo_group(group);
            }
            let l = key.0[1];
            let chunk = key.0[2];
            let total: u64 = group
                .iter()
                .filter_map(|p| match p.value {
                    SpMsg::Cnt(v) => Some(v),
                    _ => None,
                })
                .sum();
            let target = if *remaining == 0 {
                Key::of2(TAG_MLR, l)
            } else {
                Key::of3(TAG_ACCS, l, chunk / st.fan)
            };
            ReducerEmit {
                output: vec![],
                next: vec![Pair::new(target, SpMsg::Cnt(total))],
            }
        }
        BlkRound::Final => final_round::<S>(key, group, st.side),
    }
}

/// Structural memory estimate of one group: `ntilde` plus the structural
/// nonzeros its products contribute.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMemoryEstimate {
    pub group: u32,
    pub words: u64,
}

/// Execution report of the block-granular schedules.
#[derive(Clone, Debug, Default)]
pub struct SparseReport {
    /// Groups executed by each phase.
    pub phases: Vec<Vec<u32>>,
    /// Structural estimates measured before each phase (block strategy
    /// with measurement only).
    pub estimates: Vec<GroupMemoryEstimate>,
    /// Replication bound `K' = min(M/ntilde, q)`.
    pub k_prime: u64,
}

struct D2Program<S: Semiring> {
    st: BlockState<S>,
    script: Vec<BlkRound>,
    cursor: usize,
    next_group: u32,
    pending: Vec<u32>,
    report: SparseReport,
    ntilde: u64,
    big_m: u64,
    k_prime: u64,
    copy_cap: u64,
    struct_levels: usize,
    finished: bool,
}

impl<S: Semiring> Program<SpMsg<S>> for D2Program<S> {
    fn next_round(&mut self, _round: usize, state: &PairSet<SpMsg<S>>) -> Option<Round<SpMsg<S>>> {
        while self.cursor >= self.script.len() {
            if !self.pending.is_empty() {
                // Structural estimates are sitting in the state.
                let mut est: BTreeMap<u32, u64> = BTreeMap::new();
                for p in &state.pairs {
                    if p.key.tag() == TAG_MLR {
                        if let SpMsg::Cnt(v) = p.value {
                            *est.entry(p.key.0[1] as u32).or_default() += v;
                        }
                    }
                }
                let groups = std::mem::take(&mut self.pending);
                for &l in &groups {
                    self.report.estimates.push(GroupMemoryEstimate {
                        group: l,
                        words: self.ntilde + est.get(&l).copied().unwrap_or(0),
                    });
                }
                let mut chosen = Vec::new();
                let mut sum = 0u64;
                for &l in &groups {
                    let ml = self.ntilde + est.get(&l).copied().unwrap_or(0);
                    if !chosen.is_empty() && sum + ml > self.big_m {
                        break;
                    }
                    chosen.push(l);
                    sum += ml;
                }
                self.next_group = chosen.last().copied().unwrap_or(self.next_group) + 1;
                let span = chosen.len() as u64;
                let window_start = chosen.first().copied().unwrap_or(0) as u64;
                let levels = acc_levels(span, self.st.fan);
                for batch in batch_groups(&self.st.idx, &chosen, self.copy_cap) {
                    self.script.push(BlkRound::Emit {
                        parts: Arc::new(batch),
                        structural: false,
                    });
                    self.script.push(BlkRound::Product {
                        window_start,
                        span,
                        levels,
                    });
                    for l in 0..levels {
                        self.script.push(BlkRound::Acc {
                            remaining: levels - 1 - l,
                        });
                    }
                }
                self.report.phases.push(chosen);
            } else if self.next_group < self.st.idx.q {
                let hi = (self.next_group as u64 + self.k_prime).min(self.st.idx.q as u64) as u32;
                let groups: Vec<u32> = (self.next_group..hi).collect();
                self.pending = groups.clone();
                for batch in batch_groups(&self.st.idx, &groups, self.copy_cap) {
                    self.script.push(BlkRound::Emit {
                        parts: Arc::new(batch),
                        structural: true,
                    });
                    self.script.push(BlkRound::StructProduct {
                        levels: self.struct_levels,
                    });
                }
                for l in 0..self.struct_levels {
                    self.script.push(BlkRound::StructAcc {
                        remaining: self.struct_levels - 1 - l,
                    });
                }
            } else if !self.finished {
                self.finished = true;
                self.script.push(BlkRound::Final);
            } else {
                return None;
            }
        }
        let spec = self.script[self.cursor].clone();
        self.cursor += 1;
        let st = self.st.clone();
        Some(Round::new(move |key, group, ctx| {
            block_round::<S>(&st, &spec, key, group, ctx)
        }))
    }
}

/// Block-granular deterministic multiplication: phases measure the next
/// `K'` groups structurally, then execute the largest prefix that fits.
pub fn d2_multiply<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    budget: &MemoryBudget,
) -> Result<(CooMatrix<S>, RoundStats, SparseReport), EngineError> {
    assert_eq!(a.side(), b.side(), "conformable dims required");
    let side = a.side();
    let ntilde = (a.nnz().max(b.nnz()) as u64).max(1);
    let idx = Arc::new(BlockIndex::new(a, b, budget.m));
    let q = idx.q as u64;
    let fan = acc_fan(budget.m);
    let st = BlockState {
        idx: idx.clone(),
        fan,
        side,
    };
    let mut prog = D2Program::<S> {
        st,
        script: vec![BlkRound::Scatter],
        cursor: 0,
        next_group: 0,
        pending: Vec::new(),
        report: SparseReport {
            phases: vec![],
            estimates: vec![],
            k_prime: ((budget.big_m as u64) / ntilde).min(q).max(1),
        },
        ntilde,
        big_m: budget.big_m as u64,
        k_prime: ((budget.big_m as u64) / ntilde).min(q).max(1),
        copy_cap: ((budget.big_m as u64) / 2).max(1),
        struct_levels: acc_levels(q * q, fan),
        finished: false,
    };
    let (out, stats) = run_program(matrix_input(a, b), &mut prog, budget, 0, ExecMode::Audit)?;
    let report = prog.report;
    Ok((collect_output::<S>(out, side), stats, report))
}

/// Fixed-window block-granular multiplication driven by an estimate of
/// the output's nonzero count. The result is always the exact product;
/// only the schedule depends on the seed.
pub fn r1_multiply<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    budget: &MemoryBudget,
    seed: u64,
) -> Result<(CooMatrix<S>, RoundStats), EngineError> {
    assert_eq!(a.side(), b.side(), "conformable dims required");
    let side = a.side();
    let n_elems = (side as u64).pow(2);
    let delta = 1.0 / (2.0 * n_elems as f64);
    // Documented hypothesis: m should be at least 2 * H(1/2, 1/(2n)) so
    // sketch reducers fit the local cap. Below it the run still returns
    // the exact product; the audit trail records the local overshoots.
    let (est, est_stats) = estimate_output_nnz(a, b, 0.5, delta, budget, seed)?;

    let ntilde = (a.nnz().max(b.nnz()) as u64).max(1);
    let idx = Arc::new(BlockIndex::new(a, b, budget.m));
    let q = idx.q as u64;
    let fan = acc_fan(budget.m);
    let k = ((budget.big_m as u64) / (ntilde + 2 * est).max(1))
        .min(q)
        .max(1);
    let copy_cap = ((budget.big_m as u64) / 2).max(1);

    let mut script = vec![BlkRound::Scatter];
    let mut start = 0u64;
    while start < q {
        let hi = (start + k).min(q);
        let groups: Vec<u32> = (start as u32..hi as u32).collect();
        let span = groups.len() as u64;
        let levels = acc_levels(span, fan);
        for batch in batch_groups(&idx, &groups, copy_cap) {
            script.push(BlkRound::Emit {
                parts: Arc::new(batch),
                structural: false,
            });
            script.push(BlkRound::Product {
                window_start: start,
                span,
                levels,
            });
            for l in 0..levels {
                script.push(BlkRound::Acc {
                    remaining: levels - 1 - l,
                });
            }
        }
        start = hi;
    }
    script.push(BlkRound::Final);

    struct ScriptProgram<S: Semiring> {
        st: BlockState<S>,
        script: Arc<Vec<BlkRound>>,
    }
    impl<S: Semiring> Program<SpMsg<S>> for ScriptProgram<S> {
        fn next_round(&mut self, round: usize, _s: &PairSet<SpMsg<S>>) -> Option<Round<SpMsg<S>>> {
            if round >= self.script.len() {
                return None;
            }
            let spec = self.script[round].clone();
            let st = self.st.clone();
            Some(Round::new(move |key, group, ctx| {
                block_round::<S>(&st, &spec, key, group, ctx)
            }))
        }
    }

    let mut prog = ScriptProgram::<S> {
        st: BlockState {
            idx: idx.clone(),
            fan,
            side,
        },
        script: Arc::new(script),
    };
    let (out, exec_stats) =
        run_program(matrix_input(a, b), &mut prog, budget, seed, ExecMode::Audit)?;
    let mut stats = est_stats;
    stats.absorb(&exec_stats);
    Ok((collect_output::<S>(out, side), stats))
}

// ---------------------------------------------------------------------
// Dispatchers
// ---------------------------------------------------------------------

/// Which strategy the dispatcher chose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparseAlgo {
    D1,
    D2,
    R1,
}

impl std::fmt::Display for SparseAlgo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SparseAlgo::D1 => write!(f, "d1"),
            SparseAlgo::D2 => write!(f, "d2"),
            SparseAlgo::R1 => write!(f, "r1"),
        }
    }
}

/// Bound numerators compared by the dispatcher, exposed for tests. The
/// coarse bound overestimates the output count by up to a factor of the
/// side, so the block-strategy term scores with the bracket's lower end.
pub fn sparse_scores(ntilde: u64, o_upper: u64, side: u32, budget: &MemoryBudget) -> (f64, f64) {
    let nt = ntilde as f64;
    let s = side as f64;
    let m = (budget.m as f64).max(2.0);
    let o_est = (o_upper as f64 / s).ceil();
    let d1_num = (nt * nt).min(nt * s);
    let d2_num = (nt + o_est) * (s / m.sqrt()).max(1.0);
    (d1_num, d2_num)
}

/// Dispatch between the sparse strategies by comparing their round-bound
/// expressions, using the coarse upper bound for the output term. The
/// randomized strategy is preferred when its bound (which drops the
/// per-phase log factor) beats the deterministic ones and the local
/// budget satisfies its hypotheses.
pub fn sparse_multiply_auto<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    budget: &MemoryBudget,
    seed: u64,
    allow_random: bool,
) -> Result<(CooMatrix<S>, RoundStats, SparseAlgo), EngineError> {
    let ntilde = (a.nnz().max(b.nnz()) as u64).max(1);
    let (o_upper, mut stats) = sqrt_n_upper_bound(a, b, budget)?;
    let (d1_num, d2_num) = sparse_scores(ntilde, o_upper, a.side(), budget);
    let big_m = budget.big_m as f64;
    let logm_m = (big_m.ln() / (budget.m as f64).max(2.0).ln()).max(1.0);
    let det_rounds = (d1_num.min(d2_num) / big_m).ceil().max(1.0) * logm_m;
    let r1_rounds = (d2_num / big_m).max(1.0) + logm_m;
    let n_elems = (a.side() as u64).pow(2);
    let r1_legal = allow_random && {
        let params = SketchParams::new(0.5, 1.0 / (2.0 * n_elems as f64), n_elems);
        let log2n = (n_elems as f64).log2();
        budget.m >= 2 * params.h_words() && (budget.m as f64) >= log2n * log2n
    };
    let algo = if r1_legal && r1_rounds < det_rounds {
        SparseAlgo::R1
    } else if d1_num <= d2_num {
        SparseAlgo::D1
    } else {
        SparseAlgo::D2
    };
    let (c, run_stats) = match algo {
        SparseAlgo::D1 => d1_multiply(a, b, budget)?,
        SparseAlgo::D2 => {
            let (c, st, _) = d2_multiply(a, b, budget)?;
            (c, st)
        }
        SparseAlgo::R1 => r1_multiply(a, b, budget, seed)?,
    };
    stats.absorb(&run_stats);
    Ok((c, stats, algo))
}

/// Which route the sparse-dense dispatcher took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdAlgo {
    EntryGranular,
    Dense,
}

/// Multiply a sparse matrix by a dense one, picking whichever of the
/// entry-granular strategy and the dense multiplier has the smaller
/// round bound.
pub fn sd_multiply<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    budget: &MemoryBudget,
) -> Result<(CooMatrix<S>, RoundStats, SdAlgo), EngineError> {
    let ntilde = a.nnz().min(b.nnz()).max(1) as f64;
    let s = a.side() as f64;
    let n = s * s;
    let m = (budget.m as f64).max(2.0);
    let big_m = budget.big_m as f64;
    let logm_m = (big_m.ln() / m.ln()).max(1.0);
    let logm_n = (n.ln() / m.ln()).max(1.0);
    let d1_score = (ntilde * s / big_m).ceil().max(1.0) * logm_m;
    let dd_score = n * s / (big_m * m.sqrt()) + logm_n;
    if d1_score <= dd_score {
        let (c, stats) = d1_multiply(a, b, budget)?;
        Ok((c, stats, SdAlgo::EntryGranular))
    } else {
        let (c, stats) = crate::dense::dd_multiply(a, b, budget)?;
        Ok((c, stats, SdAlgo::Dense))
    }
}
