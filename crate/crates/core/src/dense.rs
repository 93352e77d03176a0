//! Dense-dense matrix multiplication on the round engine.
//!
//! Matrices are decomposed into `sqrt(m) x sqrt(m)` blocks and the block
//! products are partitioned into `q` groups so that every input block is
//! used exactly once per group. Each product round executes all products
//! of `K = min(M/n, q)` consecutive groups: every block is replicated
//! once per slot `s < K`, flows from window to window along its unique
//! consumer chain, and each product reducer accumulates a partial sum of
//! the C-block it owns. A closing reduction merges the `K` partial
//! contributions of every output cell through a tree of value reducers.
//!
//! The number of product rounds is exactly `ceil(q / K)`; the closing
//! reduction adds `ceil(log K)` value-merge rounds at fan-in `2m-1`.
//! Inputs with `m >= 2n` fall back to a single sequential reducer.
//!
//! Budget shape: one product round holds at most `3K(n + q^2)` words of
//! block copies and partials, which stays within `4M` for `M >= 2n`.

use std::sync::Arc;

use crate::engine::{
    run_program, DriverProgram, EngineError, ExecMode, Key, MemoryBudget, Pair, PairSet,
    ReducerCtx, ReducerEmit, Round, RoundStats, WordSized,
};
use crate::matrix::{block_side_for, CooMatrix};
use crate::semiring::Semiring;

const TAG_INP_A: u64 = 10;
const TAG_INP_B: u64 = 11;
const TAG_HOLD: u64 = 12;
const TAG_PROD: u64 = 13;
const TAG_MRG: u64 = 14;
const TAG_OUT: u64 = 15;
const TAG_SEQ: u64 = 16;

/// Pack a round tag with a batch-pair id so independent multiplications
/// can share rounds without key collisions.
fn tag(base: u64, pid: usize) -> u64 {
    base | ((pid as u64) << 16)
}

fn untag(t: u64) -> (u64, usize) {
    (t & 0xffff, (t >> 16) as usize)
}

/// Schedule arithmetic for one dense multiplication.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSchedule {
    pub side: u32,
    pub block_side: u32,
    pub q: u32,
    /// Padded element count used in the replication formula.
    pub n_words: usize,
    pub k: u64,
    /// Product rounds: ceil(q / K).
    pub windows: usize,
    pub merge_rounds: usize,
    pub total_rounds: usize,
    pub sequential: bool,
}

/// Merge fan-in: value pairs cost two words, so `2m - 1` of them fit the
/// local cap.
fn merge_fan_in(m: usize) -> u64 {
    ((2 * m).saturating_sub(1)).max(2) as u64
}

fn log_ceil(mut v: u64, base: u64) -> usize {
    let mut rounds = 0;
    while v > 1 {
        v = v.div_ceil(base);
        rounds += 1;
    }
    rounds
}

pub fn dense_schedule(side: u32, budget: &MemoryBudget) -> DenseSchedule {
    let n_elems = (side as usize).pow(2);
    if budget.m >= 2 * n_elems {
        return DenseSchedule {
            side,
            block_side: side.max(1),
            q: 1,
            n_words: n_elems,
            k: 1,
            windows: 1,
            merge_rounds: 0,
            total_rounds: 2,
            sequential: true,
        };
    }
    let sb = block_side_for(budget.m);
    let q = side.div_ceil(sb).max(1);
    let n_words = ((q * sb) as usize).pow(2);
    let k = ((budget.big_m / n_words) as u64).min(q as u64).max(1);
    let windows = (q as u64).div_ceil(k) as usize;
    let merge_rounds = if k == 1 {
        0
    } else {
        log_ceil(k, merge_fan_in(budget.m)).max(1)
    };
    DenseSchedule {
        side,
        block_side: sb,
        q,
        n_words,
        k,
        windows,
        merge_rounds,
        total_rounds: 2 + windows + merge_rounds,
        sequential: false,
    }
}

#[derive(Clone, Debug)]
enum DdMsg<S: Semiring> {
    /// A matrix entry: one word of cell index, one of value.
    Ent { i: u32, j: u32, x: S::Elem },
    BlockA(Arc<Vec<S::Elem>>),
    BlockB(Arc<Vec<S::Elem>>),
    Partial(Vec<S::Elem>),
    Contrib(S::Elem),
}

impl<S: Semiring> WordSized for DdMsg<S> {
    fn words(&self) -> usize {
        match self {
            DdMsg::Ent { .. } => 2,
            DdMsg::BlockA(d) | DdMsg::BlockB(d) => d.len(),
            DdMsg::Partial(d) => d.len(),
            DdMsg::Contrib(_) => 1,
        }
    }
}

/// Multiply two square blocks held as dense row-major arrays, recording
/// one elementary product per nonzero operand pair.
fn block_multiply<S: Semiring>(
    a: &[S::Elem],
    b: &[S::Elem],
    acc: &mut [S::Elem],
    sb: usize,
    ctx: &mut ReducerCtx,
) {
    let mut count = 0u64;
    for r in 0..sb {
        for t in 0..sb {
            let x = &a[r * sb + t];
            if S::is_zero(x) {
                continue;
            }
            for c in 0..sb {
                let y = &b[t * sb + c];
                if S::is_zero(y) {
                    continue;
                }
                count += 1;
                let prod = S::times(x, y);
                acc[r * sb + c] = S::plus(&acc[r * sb + c], &prod);
            }
        }
    }
    ctx.record_products(count);
}

struct PairPlan {
    sched: DenseSchedule,
}

/// Multiply batched pairs of dense-occupancy matrices concurrently in
/// one program, giving each pair `m_per_pair` words of the aggregate
/// budget for its replication factor.
pub fn dd_multiply_batch<S: Semiring>(
    pairs: &[(&CooMatrix<S>, &CooMatrix<S>)],
    budget: &MemoryBudget,
    m_per_pair: usize,
) -> Result<(Vec<CooMatrix<S>>, RoundStats), EngineError> {
    let per_budget = MemoryBudget {
        m: budget.m,
        big_m: m_per_pair.max(1),
        c_local: budget.c_local,
        c_agg: budget.c_agg,
    };
    let plans: Vec<PairPlan> = pairs
        .iter()
        .map(|(a, b)| {
            assert_eq!(a.side(), b.side(), "conformable dims required");
            PairPlan {
                sched: dense_schedule(a.side(), &per_budget),
            }
        })
        .collect();
    let windows_max = plans.iter().map(|p| p.sched.windows).max().unwrap_or(1);
    let merge_max = plans.iter().map(|p| p.sched.merge_rounds).max().unwrap_or(0);
    let any_parallel = plans.iter().any(|p| !p.sched.sequential);
    let total_rounds = if any_parallel {
        2 + windows_max + merge_max
    } else {
        2
    };

    let mut input: PairSet<DdMsg<S>> = PairSet::new();
    for (pid, (a, b)) in pairs.iter().enumerate() {
        for (side_tag, mat) in [(TAG_INP_A, a), (TAG_INP_B, b)] {
            for (k, (i, j, x)) in mat.entries().iter().enumerate() {
                input.push(
                    Key::of2(tag(side_tag, pid), k as u64),
                    DdMsg::Ent {
                        i: *i,
                        j: *j,
                        x: x.clone(),
                    },
                );
            }
        }
    }

    let plans = Arc::new(plans);
    let fan_in = merge_fan_in(budget.m);
    let plans2 = plans.clone();
    let mut prog = DriverProgram::new(move |round, _state: &PairSet<DdMsg<S>>| {
        if round >= total_rounds {
            return None;
        }
        let plans = plans2.clone();
        Some(Round::new(move |key, group, ctx| {
            let (base, pid) = untag(key.tag());
            let plan = &plans[pid].sched;
            match base {
                TAG_INP_A | TAG_INP_B if round == 0 => {
                    scatter_round::<S>(base, pid, plan, group)
                }
                TAG_SEQ if round == 1 => sequential_multiply::<S>(pid, plan, group, ctx),
                TAG_HOLD if round == 1 => assemble_round::<S>(pid, plan, key, group),
                TAG_PROD => product_round::<S>(
                    pid,
                    plan,
                    key,
                    group,
                    round - 2,
                    windows_max,
                    fan_in,
                    ctx,
                ),
                TAG_MRG if round >= 2 + windows_max => merge_round::<S>(
                    pid,
                    plan,
                    key,
                    group,
                    round - 2 - windows_max,
                    merge_max,
                    fan_in,
                ),
                _ => ReducerEmit {
                    output: vec![],
                    next: group,
                },
            }
        }))
    });

    let (out, stats) = run_program(input, &mut prog, budget, 0, ExecMode::Audit)?;
    let mut per_pair_entries: Vec<Vec<(u32, u32, S::Elem)>> = vec![Vec::new(); pairs.len()];
    for p in out.pairs {
        let (_, pid) = untag(p.key.tag());
        if let DdMsg::Ent { i, j, x } = p.value {
            per_pair_entries[pid].push((i, j, x));
        }
    }
    let results = per_pair_entries
        .into_iter()
        .enumerate()
        .map(|(pid, entries)| {
            CooMatrix::from_entries(pairs[pid].0.side(), entries)
                .expect("product entries are in range and unique")
        })
        .collect();
    Ok((results, stats))
}

fn scatter_round<S: Semiring>(
    base: u64,
    pid: usize,
    plan: &DenseSchedule,
    group: Vec<Pair<DdMsg<S>>>,
) -> ReducerEmit<DdMsg<S>> {
    let mut emit = ReducerEmit::empty();
    for p in group {
        if let DdMsg::Ent { i, j, x } = p.value {
            if plan.sequential {
                emit.next.push(Pair::new(
                    Key::of2(tag(TAG_SEQ, pid), 0),
                    DdMsg::Ent {
                        i: if base == TAG_INP_B { i | (1 << 30) } else { i },
                        j,
                        x,
                    },
                ));
            } else {
                let sb = plan.block_side;
                let which = if base == TAG_INP_A { 0 } else { 1 };
                emit.next.push(Pair::new(
                    Key::of4(
                        tag(TAG_HOLD, pid),
                        which,
                        (i / sb) as u64,
                        (j / sb) as u64,
                    ),
                    DdMsg::Ent { i, j, x },
                ));
            }
        }
    }
    emit
}

fn sequential_multiply<S: Semiring>(
    pid: usize,
    plan: &DenseSchedule,
    group: Vec<Pair<DdMsg<S>>>,
    ctx: &mut ReducerCtx,
) -> ReducerEmit<DdMsg<S>> {
    let side = plan.side as usize;
    let mut a = vec![S::zero(); side * side];
    let mut b = vec![S::zero(); side * side];
    for p in group {
        if let DdMsg::Ent { i, j, x } = p.value {
            if i & (1 << 30) != 0 {
                b[((i & !(1 << 30)) as usize) * side + j as usize] = x;
            } else {
                a[(i as usize) * side + j as usize] = x;
            }
        }
    }
    let mut c = vec![S::zero(); side * side];
    block_multiply::<S>(&a, &b, &mut c, side, ctx);
    ctx.declare_working_words(side * side);
    let mut emit = ReducerEmit::empty();
    for (idx, v) in c.into_iter().enumerate() {
        if !S::is_zero(&v) {
            emit.output.push(Pair::new(
                Key::of2(tag(TAG_OUT, pid), idx as u64),
                DdMsg::Ent {
                    i: (idx / side) as u32,
                    j: (idx % side) as u32,
                    x: v,
                },
            ));
        }
    }
    emit
}

fn assemble_round<S: Semiring>(
    pid: usize,
    plan: &DenseSchedule,
    key: &Key,
    group: Vec<Pair<DdMsg<S>>>,
) -> ReducerEmit<DdMsg<S>> {
    let sb = plan.block_side;
    let q = plan.q as u64;
    let which = key.0[1];
    let bi = key.0[2];
    let bj = key.0[3];
    let mut data = vec![S::zero(); (sb * sb) as usize];
    for p in group {
        if let DdMsg::Ent { i, j, x } = p.value {
            let r = (i % sb) as usize;
            let c = (j % sb) as usize;
            data[r * sb as usize + c] = x;
        }
    }
    let data = Arc::new(data);
    let mut emit = ReducerEmit::empty();
    // Window 0 consumers: slot s handles group l = s.
    for s in 0..plan.k {
        if which == 0 {
            // A block (bi, h = bj): product (i=bi, j) with h = (i+j+l) mod q.
            let j = (bj + 2 * q - bi - s % q) % q;
            emit.next.push(Pair::new(
                Key::of4(tag(TAG_PROD, pid), bi, j, s),
                DdMsg::BlockA(data.clone()),
            ));
        } else {
            // B block (h = bi, bj): product (i, j=bj).
            let i = (bi + 2 * q - bj - s % q) % q;
            emit.next.push(Pair::new(
                Key::of4(tag(TAG_PROD, pid), i, bj, s),
                DdMsg::BlockB(data.clone()),
            ));
        }
    }
    emit
}

#[allow(clippy::too_many_arguments)]
fn product_round<S: Semiring>(
    pid: usize,
    plan: &DenseSchedule,
    key: &Key,
    group: Vec<Pair<DdMsg<S>>>,
    w: usize,
    windows_max: usize,
    fan_in: u64,
    ctx: &mut ReducerCtx,
) -> ReducerEmit<DdMsg<S>> {
    let sb = plan.block_side as usize;
    let q = plan.q as u64;
    let i = key.0[1];
    let j = key.0[2];
    let s = key.0[3];
    let mut block_a: Option<Arc<Vec<S::Elem>>> = None;
    let mut block_b: Option<Arc<Vec<S::Elem>>> = None;
    let mut partial: Option<Vec<S::Elem>> = None;
    for p in group {
        match p.value {
            DdMsg::BlockA(d) => block_a = Some(d),
            DdMsg::BlockB(d) => block_b = Some(d),
            DdMsg::Partial(d) => partial = Some(d),
            _ => {}
        }
    }

    let active = w < plan.windows;
    let mut acc = partial.unwrap_or_else(|| vec![S::zero(); sb * sb]);
    if active {
        if let (Some(a), Some(b)) = (&block_a, &block_b) {
            block_multiply::<S>(a, b, &mut acc, sb, ctx);
        }
    }

    let mut emit = ReducerEmit::empty();
    let last_product_round = w + 1 == windows_max;
    if last_product_round {
        // Hand the accumulated C-block to the closing reduction (or
        // straight to the output when there is a single slot).
        for (idx, v) in acc.into_iter().enumerate() {
            if S::is_zero(&v) {
                continue;
            }
            let gi = i as u32 * plan.block_side + (idx / sb) as u32;
            let gj = j as u32 * plan.block_side + (idx % sb) as u32;
            if gi >= plan.side || gj >= plan.side {
                continue;
            }
            let cell = gi as u64 * plan.side as u64 + gj as u64;
            if plan.k == 1 {
                emit.output.push(Pair::new(
                    Key::of2(tag(TAG_OUT, pid), cell),
                    DdMsg::Ent {
                        i: gi,
                        j: gj,
                        x: v,
                    },
                ));
            } else {
                emit.next.push(Pair::new(
                    Key::of3(tag(TAG_MRG, pid), cell, s / fan_in),
                    DdMsg::Contrib(v),
                ));
            }
        }
        return emit;
    }

    emit.next.push(Pair::new(*key, DdMsg::Partial(acc)));
    // Forward blocks to their unique next-window consumers; a slot whose
    // next group index runs past q is done (K need not divide q).
    let l_next = (w as u64 + 1) * plan.k + s;
    if active && w + 1 < plan.windows && l_next < q {
        let l_cur = (w as u64) * plan.k + s;
        let h = (i + j + l_cur) % q;
        if let Some(a) = block_a {
            let j2 = (h + 2 * q - i - l_next % q) % q;
            emit.next.push(Pair::new(
                Key::of4(tag(TAG_PROD, pid), i, j2, s),
                DdMsg::BlockA(a),
            ));
        }
        if let Some(b) = block_b {
            let i2 = (h + 2 * q - j - l_next % q) % q;
            emit.next.push(Pair::new(
                Key::of4(tag(TAG_PROD, pid), i2, j, s),
                DdMsg::BlockB(b),
            ));
        }
    }
    emit
}

fn merge_round<S: Semiring>(
    pid: usize,
    plan: &DenseSchedule,
    key: &Key,
    group: Vec<Pair<DdMsg<S>>>,
    level: usize,
    merge_max: usize,
    fan_in: u64,
) -> ReducerEmit<DdMsg<S>> {
    let cell = key.0[1];
    let chunk = key.0[2];
    let mut acc: Option<S::Elem> = None;
    for p in group {
        if let DdMsg::Contrib(v) = p.value {
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
    if level + 1 == merge_max {
        if !S::is_zero(&v) {
            let gi = (cell / plan.side as u64) as u32;
            let gj = (cell % plan.side as u64) as u32;
            emit.output.push(Pair::new(
                Key::of2(tag(TAG_OUT, pid), cell),
                DdMsg::Ent {
                    i: gi,
                    j: gj,
                    x: v,
                },
            ));
        }
    } else {
        emit.next.push(Pair::new(
            Key::of3(tag(TAG_MRG, pid), cell, chunk / fan_in),
            DdMsg::Contrib(v),
        ));
    }
    emit
}

/// Multiply two dense-occupancy matrices under the given budget.
pub fn dd_multiply<S: Semiring>(
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    budget: &MemoryBudget,
) -> Result<(CooMatrix<S>, RoundStats), EngineError> {
    let (mut results, stats) = dd_multiply_batch(&[(a, b)], budget, budget.big_m)?;
    Ok((results.pop().expect("one result per pair"), stats))
}
