//! Sorting and prefix-sum programs for the round engine.
//!
//! Both primitives chunk their input into groups of at most `2m/3` words
//! worth of items (an item is one word of key, one of index, one of
//! value). The prefix program runs an exact reduction tree: partial sums
//! climb an `f`-ary tree and bases flow back down, costing
//! `2*ceil(log_f p) + 1` rounds for `p` chunks.
//!
//! Sorting dispatches between three schedules and picks whichever needs
//! the fewest rounds among those whose worst-case group sizes fit the
//! local budget:
//!
//! * a single reducer when everything fits in one chunk (1 round);
//! * a splitter-based distribution sort: regular samples are thinned
//!   through one or two selection reducers, the chosen splitters are
//!   broadcast back, items are routed to buckets, and bucket ranks are
//!   assembled from a count prefix (6 rounds with one selection level,
//!   7 with two);
//! * a bitonic merge over sorted chunks as the unconditional fallback:
//!   every compare-exchange of the network becomes a merge-split of two
//!   chunks, correct for any (n, m) but quadratic in the network depth.
//!
//! The dispatch is computed by [`sort_plan`], so tests can assert round
//! counts against the planned schedule, and the planned rounds are
//! nonincreasing in `m` for fixed `n`.

use std::fmt;
use std::sync::Arc;

use crate::engine::{
    run_program, DriverProgram, EngineError, ExecMode, Key, MemoryBudget, Pair, PairSet,
    ReducerEmit, Round, RoundStats, WordSized,
};

/// Values sortable by the distribution programs. One word per value.
pub trait SortValue:
    Ord + Clone + fmt::Debug + Send + Sync + WordSized + 'static
{
}
impl<T: Ord + Clone + fmt::Debug + Send + Sync + WordSized + 'static> SortValue for T {}

/// Values carried by the prefix program.
pub trait PrefixValue: Clone + fmt::Debug + Send + Sync + WordSized + 'static {}
impl<T: Clone + fmt::Debug + Send + Sync + WordSized + 'static> PrefixValue for T {}

// Key tags for the sort/prefix key spaces.
const T_CHUNK: u64 = 1;
const T_SPL1: u64 = 2;
const T_SPL2: u64 = 3;
const T_BUCKET: u64 = 4;
const T_GCNT: u64 = 5;
const T_MERGE: u64 = 6;
const T_LEAF: u64 = 7;
const T_NODE: u64 = 8;
const T_OUT: u64 = 9;

/// Items per chunk: chunks hold at most 2m/3 words, three words per item.
fn chunk_cap(m: usize) -> usize {
    (2 * m / 3).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SortStrategy {
    /// Everything fits one reducer.
    Single,
    /// Sample, select splitters through `levels` selection reducers,
    /// partition into `b` buckets, rank via a count prefix.
    Splitter {
        levels: u8,
        g1: usize,
        g2: usize,
        buckets: u64,
        /// chunks feeding one first-level selection reducer
        spl_group: usize,
    },
    /// Bitonic merge network over sorted chunks.
    Bitonic { padded_chunks: u64 },
}

#[derive(Clone, Debug)]
pub struct SortPlan {
    pub n: usize,
    pub m: usize,
    pub cap: usize,
    pub chunks: usize,
    pub strategy: SortStrategy,
    pub rounds: usize,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Worst-case items per bucket for the splitter strategy: thinning with
/// gap `g` over `units` sorted subsequences admits `g * s + 2g` elements
/// per subsequence for `s` thinned samples in an interval.
fn splitter_bucket_bound(
    _n: usize,
    q2: usize,
    b: usize,
    g_total: usize,
    g1: usize,
    chunks: usize,
    spl_units: usize,
) -> usize {
    g_total * ceil_div(q2.max(1), b) + 2 * g_total * spl_units + 2 * g1 * chunks
}

fn splitter_feasible(n: usize, m: usize, levels: u8) -> Option<SortStrategy> {
    let cap = chunk_cap(m);
    let p = ceil_div(n, cap);
    if p < 2 {
        return None;
    }
    let local_cap = 4 * m;
    // Selection reducers hold 3 words per sample and must fit.
    let q_max = (local_cap / 3).max(1);
    let (g1, g2, q2, units) = if levels == 1 {
        let g1 = ceil_div(n, q_max).max(1);
        (g1, 1, n / g1, p)
    } else {
        let g1 = 2usize;
        let q1 = n / g1;
        // chunks per first-level selection reducer
        let per_chunk = ceil_div(cap, g1);
        let spl_group = (q_max / per_chunk.max(1)).max(1);
        let f = ceil_div(p, spl_group);
        let g2 = ceil_div(q1, q_max).max(1);
        let q2 = q1 / g2;
        if 3 * ceil_div(q1, f.max(1)) > local_cap {
            return None;
        }
        (g1, g2, q2, f)
    };
    if 3 * q2 > local_cap {
        return None;
    }
    let g_total = g1 * g2;
    // Search bucket counts: more buckets shrink each bucket but inflate
    // the splitter broadcast held by every chunk.
    let mut b = p.max(2);
    while b <= 4 * m {
        let bound = splitter_bucket_bound(n, q2, b, g_total, g1, p, units);
        let bucket_ok = 3 * bound + 2 <= local_cap;
        let chunk_ok = 3 * cap + 1 + 2 * b <= local_cap;
        let gcnt_ok = 3 * b < local_cap;
        if bucket_ok && chunk_ok && gcnt_ok {
            let spl_group = if levels == 2 {
                let per_chunk = ceil_div(cap, g1);
                ((local_cap / 3) / per_chunk.max(1)).max(1)
            } else {
                p
            };
            return Some(SortStrategy::Splitter {
                levels,
                g1,
                g2,
                buckets: b as u64,
                spl_group,
            });
        }
        if !chunk_ok || !gcnt_ok {
            break;
        }
        b *= 2;
    }
    None
}

fn bitonic_rounds(p: usize) -> usize {
    let pp = p.next_power_of_two();
    let l = pp.trailing_zeros() as usize;
    1 + l * (l + 1) / 2
}

/// Compute the sorting schedule for `n` items under local budget `m`.
pub fn sort_plan(n: usize, m: usize) -> SortPlan {
    let cap = chunk_cap(m);
    let p = ceil_div(n.max(1), cap);
    if n <= 1 || p <= 1 {
        return SortPlan {
            n,
            m,
            cap,
            chunks: 1,
            strategy: SortStrategy::Single,
            rounds: 1,
        };
    }
    let mut best = (
        bitonic_rounds(p),
        SortStrategy::Bitonic {
            padded_chunks: p.next_power_of_two() as u64,
        },
    );
    if let Some(s) = splitter_feasible(n, m, 1) {
        if 6 < best.0 {
            best = (6, s);
        }
    }
    if let Some(s) = splitter_feasible(n, m, 2) {
        if 7 < best.0 {
            best = (7, s);
        }
    }
    SortPlan {
        n,
        m,
        cap,
        chunks: p,
        strategy: best.1,
        rounds: best.0,
    }
}

/// Rounds of the prefix schedule for `n` items under local budget `m`:
/// returns `(rounds, chunks, fan_in)`. A fan-in of 1 marks the
/// chunk-to-chunk chain used when `m` is too small to hold two partial
/// sums and a base in one reducer.
pub fn prefix_plan(n: usize, m: usize) -> (usize, usize, usize) {
    let cap = chunk_cap(m);
    let p = ceil_div(n.max(1), cap);
    if p <= 1 {
        return (1, 1, cap.max(2));
    }
    if m < 3 {
        return (p, p, 1);
    }
    let f = cap.max(2);
    let mut levels = 0usize;
    let mut nodes = p;
    while nodes > 1 {
        nodes = ceil_div(nodes, f);
        levels += 1;
    }
    (2 * levels + 1, p, f)
}

#[derive(Clone, Debug)]
enum SortMsg<T> {
    Item { idx: u64, val: T },
    Pad,
    Sample { idx: u64, val: T },
    Splitters(Arc<Vec<(T, u64)>>),
    Count { bucket: u64, total: u64 },
    Base { base: u64 },
}

impl<T: WordSized> WordSized for SortMsg<T> {
    fn words(&self) -> usize {
        match self {
            SortMsg::Item { val, .. } | SortMsg::Sample { val, .. } => 1 + val.words(),
            SortMsg::Pad => 2,
            SortMsg::Splitters(v) => 2 * v.len(),
            SortMsg::Count { .. } => 2,
            SortMsg::Base { .. } => 1,
        }
    }
}

fn sorted_items<T: SortValue>(group: Vec<Pair<SortMsg<T>>>) -> Vec<(T, u64)> {
    let mut items: Vec<(T, u64)> = group
        .into_iter()
        .filter_map(|p| match p.value {
            SortMsg::Item { idx, val } => Some((val, idx)),
            _ => None,
        })
        .collect();
    items.sort();
    items
}

fn echo<T>(key: &Key, group: Vec<Pair<SortMsg<T>>>) -> ReducerEmit<SortMsg<T>> {
    let _ = key;
    ReducerEmit {
        output: vec![],
        next: group,
    }
}

/// Sort `(index, value)` items by value (ties by index) and re-key the
/// result by rank. Runs entirely as a program on the round engine.
pub fn mr_sort<T: SortValue>(
    items: &[(u64, T)],
    budget: &MemoryBudget,
    mode: ExecMode,
) -> Result<(Vec<(u64, T)>, RoundStats), EngineError> {
    let plan = sort_plan(items.len(), budget.m);
    let (out, stats) = match &plan.strategy {
        SortStrategy::Single => run_single_sort(items, budget, mode)?,
        SortStrategy::Splitter { .. } => run_splitter_sort(items, &plan, budget, mode)?,
        SortStrategy::Bitonic { .. } => run_bitonic_sort(items, &plan, budget, mode)?,
    };
    let mut ranked: Vec<(u64, T)> = out
        .pairs
        .into_iter()
        .filter_map(|p| match p.value {
            SortMsg::Item { idx, val } => Some((idx, val)),
            _ => None,
        })
        .collect();
    ranked.sort_by_key(|&(r, _)| r);
    Ok((ranked, stats))
}

fn initial_chunks<T: SortValue>(items: &[(u64, T)], cap: usize, tag: u64) -> PairSet<SortMsg<T>> {
    let mut ps = PairSet::new();
    for (pos, (idx, val)) in items.iter().enumerate() {
        ps.push(
            Key::of2(tag, (pos / cap) as u64),
            SortMsg::Item {
                idx: *idx,
                val: val.clone(),
            },
        );
    }
    ps
}

fn run_single_sort<T: SortValue>(
    items: &[(u64, T)],
    budget: &MemoryBudget,
    mode: ExecMode,
) -> Result<(PairSet<SortMsg<T>>, RoundStats), EngineError> {
    let input = initial_chunks(items, usize::MAX, T_CHUNK);
    let mut prog = DriverProgram::new(move |i, _state: &PairSet<SortMsg<T>>| {
        if i == 0 {
            Some(Round::new(|k, g: Vec<Pair<SortMsg<T>>>, c| {
                let _ = (k, c);
                let items = sorted_items(g);
                ReducerEmit {
                    output: items
                        .into_iter()
                        .enumerate()
                        .map(|(r, (val, _))| {
                            Pair::new(
                                Key::of2(T_OUT, r as u64),
                                SortMsg::Item {
                                    idx: r as u64,
                                    val,
                                },
                            )
                        })
                        .collect(),
                    next: vec![],
                }
            }))
        } else {
            None
        }
    });
    run_program(input, &mut prog, budget, 0, mode)
}

fn run_splitter_sort<T: SortValue>(
    items: &[(u64, T)],
    plan: &SortPlan,
    budget: &MemoryBudget,
    mode: ExecMode,
) -> Result<(PairSet<SortMsg<T>>, RoundStats), EngineError> {
    let (levels, g1, g2, buckets, spl_group) = match plan.strategy {
        SortStrategy::Splitter {
            levels,
            g1,
            g2,
            buckets,
            spl_group,
        } => (levels, g1, g2, buckets, spl_group),
        _ => unreachable!(),
    };
    let p = plan.chunks;
    let input = initial_chunks(items, plan.cap, T_CHUNK);
    // Round indices (0-based from the driver's point of view).
    let r_select_final = levels as usize; // round that picks splitters
    let r_partition = r_select_final + 1;
    let r_count = r_partition + 1;
    let r_base = r_count + 1;
    let r_emit = r_base + 1;

    let mut prog = DriverProgram::new(move |i, _state: &PairSet<SortMsg<T>>| {
        if i == 0 {
            // Local sort; every g1-th element goes to the selection level.
            return Some(Round::new(move |k, g: Vec<Pair<SortMsg<T>>>, _c| {
                let chunk = k.0[1];
                let items = sorted_items(g);
                let mut emit = ReducerEmit::empty();
                for (r, (val, idx)) in items.iter().enumerate() {
                    if (r + 1) % g1 == 0 {
                        let sel_key = if levels == 2 {
                            Key::of2(T_SPL1, chunk / spl_group as u64)
                        } else {
                            Key::of2(T_SPL2, 0)
                        };
                        emit.next.push(Pair::new(
                            sel_key,
                            SortMsg::Sample {
                                idx: *idx,
                                val: val.clone(),
                            },
                        ));
                    }
                }
                for (val, idx) in items {
                    emit.next
                        .push(Pair::new(Key::of2(T_CHUNK, chunk), SortMsg::Item { idx, val }));
                }
                emit
            }));
        }
        if levels == 2 && i == 1 {
            // Thin first-level samples toward the final selector.
            return Some(Round::new(move |k, g: Vec<Pair<SortMsg<T>>>, _c| {
                if k.tag() != T_SPL1 {
                    return echo(k, g);
                }
                let mut samples: Vec<(T, u64)> = g
                    .into_iter()
                    .filter_map(|p| match p.value {
                        SortMsg::Sample { idx, val } => Some((val, idx)),
                        _ => None,
                    })
                    .collect();
                samples.sort();
                let mut emit = ReducerEmit::empty();
                for (r, (val, idx)) in samples.into_iter().enumerate() {
                    if (r + 1) % g2 == 0 {
                        emit.next.push(Pair::new(
                            Key::of2(T_SPL2, 0),
                            SortMsg::Sample { idx, val },
                        ));
                    }
                }
                emit
            }));
        }
        if i == r_select_final {
            // Pick b-1 splitters and broadcast them to every chunk.
            return Some(Round::new(move |k, g: Vec<Pair<SortMsg<T>>>, _c| {
                if k.tag() != T_SPL2 {
                    return echo(k, g);
                }
                let mut samples: Vec<(T, u64)> = g
                    .into_iter()
                    .filter_map(|p| match p.value {
                        SortMsg::Sample { idx, val } => Some((val, idx)),
                        _ => None,
                    })
                    .collect();
                samples.sort();
                let q = samples.len();
                let mut splitters = Vec::new();
                for t in 1..buckets {
                    let pos = (t as usize * q) / buckets as usize;
                    if pos >= 1 && pos <= q {
                        splitters.push(samples[pos - 1].clone());
                    }
                }
                splitters.dedup();
                let shared = Arc::new(splitters);
                let mut emit = ReducerEmit::empty();
                for c in 0..p {
                    emit.next.push(Pair::new(
                        Key::of2(T_CHUNK, c as u64),
                        SortMsg::Splitters(shared.clone()),
                    ));
                }
                emit
            }));
        }
        if i == r_partition {
            // Route every item to its bucket.
            return Some(Round::new(move |k, g: Vec<Pair<SortMsg<T>>>, _c| {
                if k.tag() != T_CHUNK {
                    return echo(k, g);
                }
                let mut splitters: Option<Arc<Vec<(T, u64)>>> = None;
                let mut items = Vec::new();
                for p in g {
                    match p.value {
                        SortMsg::Splitters(s) => splitters = Some(s),
                        SortMsg::Item { idx, val } => items.push((val, idx)),
                        _ => {}
                    }
                }
                let splitters = splitters.expect("splitters broadcast");
                let mut emit = ReducerEmit::empty();
                for (val, idx) in items {
                    let probe = (val.clone(), idx);
                    let bucket = splitters.partition_point(|s| *s < probe) as u64;
                    emit.next.push(Pair::new(
                        Key::of2(T_BUCKET, bucket),
                        SortMsg::Item { idx, val },
                    ));
                }
                emit
            }));
        }
        if i == r_count {
            return Some(Round::new(move |k, g: Vec<Pair<SortMsg<T>>>, _c| {
                if k.tag() != T_BUCKET {
                    return echo(k, g);
                }
                let bucket = k.0[1];
                let total = g.len() as u64;
                let mut emit = echo(k, g);
                emit.next.push(Pair::new(
                    Key::of2(T_GCNT, 0),
                    SortMsg::Count { bucket, total },
                ));
                emit
            }));
        }
        if i == r_base {
            return Some(Round::new(move |k, g: Vec<Pair<SortMsg<T>>>, _c| {
                if k.tag() != T_GCNT {
                    return echo(k, g);
                }
                let mut counts: Vec<(u64, u64)> = g
                    .into_iter()
                    .filter_map(|p| match p.value {
                        SortMsg::Count { bucket, total } => Some((bucket, total)),
                        _ => None,
                    })
                    .collect();
                counts.sort();
                let mut emit = ReducerEmit::empty();
                let mut base = 0u64;
                for (bucket, total) in counts {
                    emit.next
                        .push(Pair::new(Key::of2(T_BUCKET, bucket), SortMsg::Base { base }));
                    base += total;
                }
                emit
            }));
        }
        if i == r_emit {
            return Some(Round::new(move |k, g: Vec<Pair<SortMsg<T>>>, _c| {
                if k.tag() != T_BUCKET {
                    return echo(k, g);
                }
                let mut base = 0u64;
                let mut items = Vec::new();
                for p in g {
                    match p.value {
                        SortMsg::Base { base: b } => base = b,
                        SortMsg::Item { idx, val } => items.push((val, idx)),
                        _ => {}
                    }
                }
                items.sort();
                ReducerEmit {
                    output: items
                        .into_iter()
                        .enumerate()
                        .map(|(r, (val, _))| {
                            let rank = base + r as u64;
                            Pair::new(Key::of2(T_OUT, rank), SortMsg::Item { idx: rank, val })
                        })
                        .collect(),
                    next: vec![],
                }
            }));
        }
        None
    });
    run_program(input, &mut prog, budget, 0, mode)
}

fn run_bitonic_sort<T: SortValue>(
    items: &[(u64, T)],
    plan: &SortPlan,
    budget: &MemoryBudget,
    mode: ExecMode,
) -> Result<(PairSet<SortMsg<T>>, RoundStats), EngineError> {
    let pp = match plan.strategy {
        SortStrategy::Bitonic { padded_chunks } => padded_chunks,
        _ => unreachable!(),
    } as usize;
    let cap = plan.cap;
    // Stage schedule: (k, j) pairs of the bitonic network over pp chunks.
    let mut stages = Vec::new();
    let mut k = 2usize;
    while k <= pp {
        let mut j = k / 2;
        while j >= 1 {
            stages.push((k as u64, j as u64));
            j /= 2;
        }
        k *= 2;
    }
    let total_rounds = 1 + stages.len();

    // Materialize padded chunks so every merge group has full data.
    let mut input: PairSet<SortMsg<T>> = PairSet::new();
    for (pos, (idx, val)) in items.iter().enumerate() {
        input.push(
            Key::of2(T_CHUNK, (pos / cap) as u64),
            SortMsg::Item {
                idx: *idx,
                val: val.clone(),
            },
        );
    }
    for c in 0..pp {
        let have = if c * cap < items.len() {
            (items.len() - c * cap).min(cap)
        } else {
            0
        };
        for _ in have..cap {
            input.push(Key::of2(T_CHUNK, c as u64), SortMsg::Pad);
        }
    }

    let stages = Arc::new(stages);
    let mut prog = DriverProgram::new(move |i, _state: &PairSet<SortMsg<T>>| {
        if i >= total_rounds {
            return None;
        }
        let stages = stages.clone();
        if i == 0 {
            // Local sort, then key for the first merge stage.
            let (_, j1) = stages[0];
            return Some(Round::new(move |k, g: Vec<Pair<SortMsg<T>>>, _c| {
                let chunk = k.0[1];
                let group_key = chunk & !j1;
                ReducerEmit {
                    output: vec![],
                    next: g
                        .into_iter()
                        .map(|p| Pair::new(Key::of2(T_MERGE, group_key), p.value))
                        .collect(),
                }
            }));
        }
        let (cur_k, cur_j) = stages[i - 1];
        let next = stages.get(i).copied();
        let last = i == total_rounds - 1;
        Some(Round::new(move |key, g: Vec<Pair<SortMsg<T>>>, _c| {
            let glo = key.0[1];
            let lo = glo;
            let hi = glo | cur_j;
            let asc = (lo & cur_k) == 0;
            // Union of both chunks; Pad sorts after every item.
            let mut all: Vec<(bool, T, u64)> = Vec::with_capacity(g.len());
            let mut pads = 0usize;
            for p in g {
                match p.value {
                    SortMsg::Item { idx, val } => all.push((false, val, idx)),
                    SortMsg::Pad => pads += 1,
                    _ => {}
                }
            }
            all.sort_by(|a, b| (&a.1, a.2).cmp(&(&b.1, b.2)));
            let cap2 = all.len() + pads;
            let cap1 = cap2 / 2;
            let mut emit = ReducerEmit::empty();
            let place = |chunk: u64, slot: usize, msg: SortMsg<T>, emit: &mut ReducerEmit<SortMsg<T>>| {
                if last {
                    if let SortMsg::Item { val, .. } = msg {
                        let rank = chunk * cap as u64 + slot as u64;
                        emit.output.push(Pair::new(
                            Key::of2(T_OUT, rank),
                            SortMsg::Item { idx: rank, val },
                        ));
                    }
                } else {
                    let (_, nj) = next.expect("non-final stage has successor");
                    emit.next
                        .push(Pair::new(Key::of2(T_MERGE, chunk & !nj), msg));
                }
            };
            // Ascending: low half to lo, high half (incl. pads) to hi.
            let (lo_chunk, hi_chunk) = if asc { (lo, hi) } else { (hi, lo) };
            for (slot, entry) in all.into_iter().enumerate() {
                let (chunk, pos) = if slot < cap1 {
                    (lo_chunk, slot)
                } else {
                    (hi_chunk, slot - cap1)
                };
                place(
                    chunk,
                    pos,
                    SortMsg::Item {
                        idx: entry.2,
                        val: entry.1,
                    },
                    &mut emit,
                );
            }
            for t in 0..pads {
                let slot = cap2 - pads + t;
                let (chunk, pos) = if slot < cap1 {
                    (lo_chunk, slot)
                } else {
                    (hi_chunk, slot - cap1)
                };
                place(chunk, pos, SortMsg::Pad, &mut emit);
            }
            emit
        }))
    });
    run_program(input, &mut prog, budget, 0, mode)
}

#[derive(Clone, Debug)]
enum PrefMsg<T> {
    Item { idx: u64, val: T },
    Sum { pos: u64, val: T },
    Base { val: Option<T> },
}

impl<T: WordSized> WordSized for PrefMsg<T> {
    fn words(&self) -> usize {
        match self {
            PrefMsg::Item { val, .. } | PrefMsg::Sum { val, .. } => 1 + val.words(),
            PrefMsg::Base { val, .. } => 1 + val.as_ref().map_or(0, |v| v.words()),
        }
    }
}

/// Prefix combine under an associative operation: output pair `i`
/// carries `a_0 (+) ... (+) a_i`, keyed by index. Indices must be the
/// permutation `0..n-1`.
pub fn mr_prefix<T: PrefixValue>(
    items: &[(u64, T)],
    op: Arc<dyn Fn(&T, &T) -> T + Send + Sync>,
    budget: &MemoryBudget,
    mode: ExecMode,
) -> Result<(Vec<(u64, T)>, RoundStats), EngineError> {
    let n = items.len();
    let (rounds, p, f) = prefix_plan(n, budget.m);
    let cap = chunk_cap(budget.m);

    let mut sorted: Vec<(u64, T)> = items.to_vec();
    sorted.sort_by_key(|&(i, _)| i);
    debug_assert!(sorted.iter().enumerate().all(|(k, &(i, _))| i == k as u64));

    let mut input: PairSet<PrefMsg<T>> = PairSet::new();
    for (pos, (idx, val)) in sorted.iter().enumerate() {
        input.push(
            Key::of3(T_LEAF, 0, (pos / cap) as u64),
            PrefMsg::Item {
                idx: *idx,
                val: val.clone(),
            },
        );
    }

    if f == 1 {
        // Chain schedule: chunk c finishes in round c and hands its
        // running total to chunk c+1.
        let op2 = op.clone();
        let mut prog = DriverProgram::new(move |i, _state: &PairSet<PrefMsg<T>>| {
            if i >= rounds {
                return None;
            }
            let op = op2.clone();
            Some(Round::new(move |key, g: Vec<Pair<PrefMsg<T>>>, _c| {
                let chunk = key.0[2];
                if key.tag() != T_LEAF || chunk != i as u64 {
                    return ReducerEmit {
                        output: vec![],
                        next: g,
                    };
                }
                let mut base: Option<T> = None;
                let mut items: Vec<(u64, T)> = Vec::new();
                for pr in g {
                    match pr.value {
                        PrefMsg::Base { val, .. } => base = val,
                        PrefMsg::Item { idx, val } => items.push((idx, val)),
                        _ => {}
                    }
                }
                items.sort_by_key(|&(i, _)| i);
                let mut acc = base;
                let mut emit = ReducerEmit::empty();
                for (idx, val) in items {
                    let next = match &acc {
                        None => val.clone(),
                        Some(a) => op(a, &val),
                    };
                    emit.output.push(Pair::new(
                        Key::of2(T_OUT, idx),
                        PrefMsg::Item {
                            idx,
                            val: next.clone(),
                        },
                    ));
                    acc = Some(next);
                }
                if (chunk as usize) + 1 < p {
                    emit.next.push(Pair::new(
                        Key::of3(T_LEAF, 0, chunk + 1),
                        PrefMsg::Base { val: acc },
                    ));
                }
                emit
            }))
        });
        let (out, stats) = run_program(input, &mut prog, budget, 0, mode)?;
        let mut result: Vec<(u64, T)> = out
            .pairs
            .into_iter()
            .filter_map(|p| match p.value {
                PrefMsg::Item { idx, val } => Some((idx, val)),
                _ => None,
            })
            .collect();
        result.sort_by_key(|&(i, _)| i);
        return Ok((result, stats));
    }

    // Number of tree levels above the leaves.
    let levels = (rounds - 1) / 2;

    let op2 = op.clone();
    let mut prog = DriverProgram::new(move |i, _state: &PairSet<PrefMsg<T>>| {
        if i >= rounds {
            return None;
        }
        let op = op2.clone();
        let last = i == rounds - 1;
        Some(Round::new(move |key, g: Vec<Pair<PrefMsg<T>>>, _c| {
            let tag = key.tag();
            let level = key.0[1] as usize;
            let node = key.0[2];
            // Up-sweep: level `l` aggregates in round l (0-based round
            // index i == level), emitting to level l+1.
            // Down-sweep: level l receives its base in round
            // (levels) + (levels - l), i.e. i == 2*levels - l.
            let up_round = level;
            let down_round = 2 * levels - level;
            let acting_up = i == up_round && level < levels && !last;
            let acting_down = i == down_round || (p == 1 && last);

            if tag == T_LEAF && level == 0 {
                if p == 1 || (acting_down && last) {
                    // Combine base with the local prefix and emit output.
                    let mut base: Option<T> = None;
                    let mut items: Vec<(u64, T)> = Vec::new();
                    for pr in g {
                        match pr.value {
                            PrefMsg::Base { val, .. } => base = val,
                            PrefMsg::Item { idx, val } => items.push((idx, val)),
                            _ => {}
                        }
                    }
                    items.sort_by_key(|&(i, _)| i);
                    let mut acc = base;
                    let mut out = Vec::new();
                    for (idx, val) in items {
                        let next = match &acc {
                            None => val.clone(),
                            Some(a) => op(a, &val),
                        };
                        out.push(Pair::new(
                            Key::of2(T_OUT, idx),
                            PrefMsg::Item {
                                idx,
                                val: next.clone(),
                            },
                        ));
                        acc = Some(next);
                    }
                    return ReducerEmit {
                        output: out,
                        next: vec![],
                    };
                }
                if acting_up {
                    // Send the chunk total up; keep the items.
                    let mut items: Vec<(u64, T)> = g
                        .iter()
                        .filter_map(|pr| match &pr.value {
                            PrefMsg::Item { idx, val } => Some((*idx, val.clone())),
                            _ => None,
                        })
                        .collect();
                    items.sort_by_key(|&(i, _)| i);
                    let total = items
                        .iter()
                        .skip(1)
                        .fold(items[0].1.clone(), |acc, (_, v)| op(&acc, v));
                    let mut emit = ReducerEmit {
                        output: vec![],
                        next: g,
                    };
                    emit.next.push(Pair::new(
                        Key::of3(T_NODE, 1, node / f as u64),
                        PrefMsg::Sum {
                            pos: node,
                            val: total,
                        },
                    ));
                    return emit;
                }
                return ReducerEmit {
                    output: vec![],
                    next: g,
                };
            }

            if tag == T_NODE {
                if acting_up {
                    let total = {
                        let mut sums: Vec<(u64, T)> = g
                            .iter()
                            .filter_map(|pr| match &pr.value {
                                PrefMsg::Sum { pos, val } => Some((*pos, val.clone())),
                                _ => None,
                            })
                            .collect();
                        sums.sort_by_key(|&(p, _)| p);
                        sums.iter()
                            .skip(1)
                            .fold(sums[0].1.clone(), |acc, (_, v)| op(&acc, v))
                    };
                    let mut emit = ReducerEmit {
                        output: vec![],
                        next: g,
                    };
                    emit.next.push(Pair::new(
                        Key::of3(T_NODE, (level + 1) as u64, node / f as u64),
                        PrefMsg::Sum {
                            pos: node,
                            val: total,
                        },
                    ));
                    return emit;
                }
                if acting_down {
                    // Distribute bases to children from echoed sums.
                    let mut base: Option<T> = None;
                    let mut sums: Vec<(u64, T)> = Vec::new();
                    for pr in g {
                        match pr.value {
                            PrefMsg::Base { val, .. } => base = val,
                            PrefMsg::Sum { pos, val } => sums.push((pos, val)),
                            _ => {}
                        }
                    }
                    sums.sort_by_key(|&(p, _)| p);
                    let mut emit = ReducerEmit::empty();
                    let child_level = level - 1;
                    let child_tag = if child_level == 0 { T_LEAF } else { T_NODE };
                    let mut acc = base;
                    for (pos, val) in sums {
                        emit.next.push(Pair::new(
                            Key::of3(child_tag, child_level as u64, pos),
                            PrefMsg::Base { val: acc.clone() },
                        ));
                        acc = Some(match &acc {
                            None => val,
                            Some(a) => op(a, &val),
                        });
                    }
                    return emit;
                }
                return ReducerEmit {
                    output: vec![],
                    next: g,
                };
            }

            ReducerEmit {
                output: vec![],
                next: g,
            }
        }))
    });

    let (out, stats) = run_program(input, &mut prog, budget, 0, mode)?;
    let mut result: Vec<(u64, T)> = out
        .pairs
        .into_iter()
        .filter_map(|p| match p.value {
            PrefMsg::Item { idx, val } => Some((idx, val)),
            _ => None,
        })
        .collect();
    result.sort_by_key(|&(i, _)| i);
    Ok((result, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn budget_for(n: usize, m: usize) -> MemoryBudget {
        MemoryBudget::new(m, (6 * n + 6 * m).max(m))
    }

    fn check_sort(values: &[u64], m: usize) {
        let items: Vec<(u64, u64)> = values.iter().copied().enumerate().map(|(i, v)| (i as u64, v)).collect();
        let budget = budget_for(values.len(), m);
        let (sorted, stats) = mr_sort(&items, &budget, ExecMode::Strict).unwrap();
        let mut expect = values.to_vec();
        expect.sort();
        let got: Vec<u64> = sorted.iter().map(|&(_, v)| v).collect();
        assert_eq!(got, expect, "m={m} n={}", values.len());
        assert_eq!(
            stats.rounds,
            sort_plan(values.len(), m).rounds,
            "schedule mismatch m={m} n={}",
            values.len()
        );
        for (r, &(rank, _)) in sorted.iter().enumerate() {
            assert_eq!(rank, r as u64);
        }
    }

    #[test]
    fn small_sort_single_round() {
        let items = vec![(0u64, 3u64), (1, 1), (2, 2)];
        let budget = budget_for(3, 16);
        let (sorted, stats) = mr_sort(&items, &budget, ExecMode::Strict).unwrap();
        assert_eq!(stats.rounds, 1);
        assert_eq!(
            sorted,
            vec![(0, 1), (1, 2), (2, 3)]
        );
    }

    #[test]
    fn already_sorted_is_identity() {
        let values: Vec<u64> = (0..60).collect();
        check_sort(&values, 180);
    }

    #[test]
    fn sort_matches_oracle_across_m() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &n in &[1usize, 2, 7, 50, 300, 1000] {
            for &m in &[2usize, 3, 8, 32, 100, 512, 4096] {
                let values: Vec<u64> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
                check_sort(&values, m);
            }
        }
    }

    #[test]
    fn sort_with_duplicates_is_stable_by_index() {
        let values = vec![5u64, 5, 5, 1, 1, 9, 5];
        let items: Vec<(u64, u64)> = values.iter().copied().enumerate().map(|(i, v)| (i as u64, v)).collect();
        let budget = budget_for(values.len(), 4);
        let (sorted, _) = mr_sort(&items, &budget, ExecMode::Strict).unwrap();
        let got: Vec<u64> = sorted.iter().map(|&(_, v)| v).collect();
        assert_eq!(got, vec![1, 1, 5, 5, 5, 5, 9]);
    }

    #[test]
    fn prefix_examples() {
        let budget = budget_for(4, 16);
        let items: Vec<(u64, u64)> = vec![(0, 1), (1, 1), (2, 1), (3, 1)];
        let op: Arc<dyn Fn(&u64, &u64) -> u64 + Send + Sync> = Arc::new(|a, b| a + b);
        let (pref, _) = mr_prefix(&items, op, &budget, ExecMode::Strict).unwrap();
        assert_eq!(pref, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
    }

    #[test]
    fn prefix_singleton_one_round() {
        let budget = budget_for(1, 4);
        let op: Arc<dyn Fn(&u64, &u64) -> u64 + Send + Sync> = Arc::new(|a, b| a + b);
        let (pref, stats) = mr_prefix(&[(0, 42)], op, &budget, ExecMode::Strict).unwrap();
        assert_eq!(pref, vec![(0, 42)]);
        assert_eq!(stats.rounds, 1);
    }

    #[test]
    fn prefix_primes_small_m() {
        let vals = [2u64, 3, 5, 7, 11, 13, 17, 19];
        let items: Vec<(u64, u64)> = vals.iter().copied().enumerate().map(|(i, v)| (i as u64, v)).collect();
        let budget = budget_for(8, 2);
        let op: Arc<dyn Fn(&u64, &u64) -> u64 + Send + Sync> = Arc::new(|a, b| a + b);
        let (pref, stats) = mr_prefix(&items, op, &budget, ExecMode::Strict).unwrap();
        let got: Vec<u64> = pref.iter().map(|&(_, v)| v).collect();
        assert_eq!(got, vec![2, 5, 10, 17, 28, 41, 58, 77]);
        assert_eq!(stats.rounds, prefix_plan(8, 2).0);
    }

    #[test]
    fn prefix_matches_oracle_across_m() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &n in &[1usize, 2, 9, 64, 500] {
            for &m in &[2usize, 4, 17, 128, 2048] {
                let values: Vec<u64> = (0..n).map(|_| rng.gen_range(0..100)).collect();
                let items: Vec<(u64, u64)> =
                    values.iter().copied().enumerate().map(|(i, v)| (i as u64, v)).collect();
                let budget = budget_for(n, m);
                let op: Arc<dyn Fn(&u64, &u64) -> u64 + Send + Sync> = Arc::new(|a, b| a + b);
                let (pref, stats) = mr_prefix(&items, op, &budget, ExecMode::Strict).unwrap();
                let mut acc = 0u64;
                for (i, &(idx, v)) in pref.iter().enumerate() {
                    acc += values[i];
                    assert_eq!(idx, i as u64);
                    assert_eq!(v, acc, "n={n} m={m}");
                }
                assert_eq!(stats.rounds, prefix_plan(n, m).0);
            }
        }
    }

    #[test]
    fn prefix_non_commutative_op() {
        // String-ish concatenation via pairing: (first, last) composition
        // checks child ordering is respected.
        #[derive(Clone, Debug, PartialEq)]
        struct Seq(Vec<u64>);
        impl WordSized for Seq {
            fn words(&self) -> usize {
                self.0.len().max(1)
            }
        }
        let n = 40;
        let items: Vec<(u64, Seq)> = (0..n).map(|i| (i, Seq(vec![i]))).collect();
        let budget = budget_for(n as usize, 16).with_slack(64.0, 64.0);
        let op: Arc<dyn Fn(&Seq, &Seq) -> Seq + Send + Sync> = Arc::new(|a, b| {
            let mut v = a.0.clone();
            v.extend(&b.0);
            Seq(v)
        });
        let (pref, _) = mr_prefix(&items, op, &budget, ExecMode::Audit).unwrap();
        let last = &pref[n as usize - 1].1;
        assert_eq!(last.0, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn sort_ten_thousand_items_small_m() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let n = 10_000usize;
        let values: Vec<u64> = (0..n).map(|_| rng.gen_range(0..u64::MAX)).collect();
        for &m in &[7usize, 211, 6000] {
            check_sort(&values, m);
        }
    }

    #[test]
    fn schedules_nonincreasing_in_m() {
        for &n in &[10usize, 100, 1000, 4096, 10000] {
            let mut prev_sort = usize::MAX;
            let mut prev_pref = usize::MAX;
            let mut m = 2usize;
            while m <= 2 * n {
                let s = sort_plan(n, m).rounds;
                let p = prefix_plan(n, m).0;
                assert!(s <= prev_sort, "sort rounds increased at n={n} m={m}");
                assert!(p <= prev_pref, "prefix rounds increased at n={n} m={m}");
                prev_sort = s;
                prev_pref = p;
                m *= 2;
            }
        }
    }
}
