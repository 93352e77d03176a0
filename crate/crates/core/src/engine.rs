//! Round-based execution engine with (m, M) memory accounting.
//!
//! A program is a sequence of rounds. Each round groups the current
//! key-value multiset by key, applies the round's reducer to every group
//! independently, and collects two multisets: pairs emitted as final
//! output and pairs forwarded to the next round. The engine charges each
//! group `input words + declared working words` of local memory
//! (output is not charged), tracks per-round aggregates and high-water
//! marks, and either aborts on a budget violation (strict mode) or
//! records it and keeps going (audit mode).
//!
//! Reducers are pure functions of `(key, group, per-key seeded RNG)`, so
//! a run is deterministic regardless of the order in which groups would
//! execute on a real cluster. Rounds may be produced adaptively: a
//! program is asked for its next round after seeing the current pair
//! state, which is how data-dependent schedules are built.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Objects that report their size in memory words.
///
/// One word holds one scalar value or one index of magnitude poly(n).
/// Exact big-number scalars also count as a single word: the algorithms
/// in this crate assume a word can store any value occurring in the
/// computation.
pub trait WordSized {
    fn words(&self) -> usize;
}

impl WordSized for u64 {
    fn words(&self) -> usize {
        1
    }
}

impl WordSized for () {
    fn words(&self) -> usize {
        0
    }
}

/// Reducer group key: a small tuple of integer components.
///
/// Component 0 conventionally carries a role tag so that several kinds of
/// reducer can coexist in one round; the remaining components address the
/// individual group. A key costs one memory word regardless of arity.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(pub [u64; 4]);

impl Key {
    pub fn of1(a: u64) -> Self {
        Key([a, 0, 0, 0])
    }
    pub fn of2(a: u64, b: u64) -> Self {
        Key([a, b, 0, 0])
    }
    pub fn of3(a: u64, b: u64, c: u64) -> Self {
        Key([a, b, c, 0])
    }
    pub fn of4(a: u64, b: u64, c: u64, d: u64) -> Self {
        Key([a, b, c, d])
    }
    pub fn tag(&self) -> u64 {
        self.0[0]
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Key({},{},{},{})",
            self.0[0], self.0[1], self.0[2], self.0[3]
        )
    }
}

/// Payload types that can flow through the engine.
pub trait PairValue: Clone + fmt::Debug + WordSized + Send + 'static {}
impl<T: Clone + fmt::Debug + WordSized + Send + 'static> PairValue for T {}

/// One keyed record. Costs `1 + value.words()` words: one word for the
/// key plus the payload tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<V> {
    pub key: Key,
    pub value: V,
}

impl<V: WordSized> Pair<V> {
    pub fn new(key: Key, value: V) -> Self {
        Pair { key, value }
    }

    pub fn words(&self) -> usize {
        1 + self.value.words()
    }
}

/// A multiset of keyed records.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet<V> {
    pub pairs: Vec<Pair<V>>,
}

impl<V: PairValue> PairSet<V> {
    pub fn new() -> Self {
        PairSet { pairs: Vec::new() }
    }

    pub fn from_pairs(pairs: Vec<Pair<V>>) -> Self {
        PairSet { pairs }
    }

    pub fn push(&mut self, key: Key, value: V) {
        self.pairs.push(Pair::new(key, value));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total word size: sum of member word sizes.
    pub fn words(&self) -> usize {
        self.pairs.iter().map(|p| p.words()).sum()
    }
}

impl<V: PairValue> Default for PairSet<V> {
    fn default() -> Self {
        Self::new()
    }
}

/// Local and aggregate memory budgets in words, with the slack constants
/// that turn the model's O(m)/O(M) constraints into hard caps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryBudget {
    /// Local (per-reducer) budget m.
    pub m: usize,
    /// Aggregate (per-round) budget M.
    pub big_m: usize,
    /// Local slack: a group may use up to `c_local * m` words.
    pub c_local: f64,
    /// Aggregate slack: a round may use up to `c_agg * M` words, and the
    /// final output may total up to `c_agg * M` words.
    pub c_agg: f64,
}

impl MemoryBudget {
    /// Budget with the default slack constants (4.0).
    pub fn new(m: usize, big_m: usize) -> Self {
        assert!(m >= 1 && m <= big_m, "budget requires 1 <= m <= M");
        MemoryBudget {
            m,
            big_m,
            c_local: 4.0,
            c_agg: 4.0,
        }
    }

    pub fn with_slack(mut self, c_local: f64, c_agg: f64) -> Self {
        self.c_local = c_local;
        self.c_agg = c_agg;
        self
    }

    pub fn local_cap(&self) -> f64 {
        self.c_local * self.m as f64
    }

    pub fn agg_cap(&self) -> f64 {
        self.c_agg * self.big_m as f64
    }
}

/// What went over budget in a round executed in audit mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// Some group needed more than `c_local * m` words.
    Local,
    /// The round's groups together needed more than `c_agg * M` words.
    Aggregate,
    /// Cumulative final output exceeded `c_agg * M` words.
    Output,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::Local => write!(f, "local"),
            ViolationKind::Aggregate => write!(f, "agg"),
            ViolationKind::Output => write!(f, "output"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub round: usize,
    pub kind: ViolationKind,
    pub words: usize,
    pub cap: usize,
}

/// Per-run execution record: round counter, memory high-water marks and
/// the per-round audit trail.
///
/// When several engine runs are chained into one pipeline, `absorb`
/// concatenates the per-round vectors and takes the maximum of the
/// high-water marks; `output_words` then reports the largest output of
/// any stage, since intermediate stage outputs become the next stage's
/// input rather than final output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundStats {
    pub rounds: usize,
    pub max_local_words: usize,
    pub max_agg_words: usize,
    pub output_words: usize,
    pub elementary_products_per_round: Vec<u64>,
    pub agg_words_per_round: Vec<usize>,
    pub max_local_per_round: Vec<usize>,
    pub violations: Vec<Violation>,
}

impl RoundStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Recorded per-round semiring multiplication counts.
    pub fn elementary_products(&self) -> &[u64] {
        &self.elementary_products_per_round
    }

    /// Rounds in which at least one elementary product was computed.
    pub fn product_rounds(&self) -> usize {
        self.elementary_products_per_round
            .iter()
            .filter(|&&p| p > 0)
            .count()
    }

    pub fn max_products_per_round(&self) -> u64 {
        self.elementary_products_per_round
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
    }

    /// Fold another run's record into this one (pipeline composition).
    pub fn absorb(&mut self, other: &RoundStats) {
        let offset = self.rounds;
        self.rounds += other.rounds;
        self.max_local_words = self.max_local_words.max(other.max_local_words);
        self.max_agg_words = self.max_agg_words.max(other.max_agg_words);
        self.output_words = self.output_words.max(other.output_words);
        self.elementary_products_per_round
            .extend_from_slice(&other.elementary_products_per_round);
        self.agg_words_per_round
            .extend_from_slice(&other.agg_words_per_round);
        self.max_local_per_round
            .extend_from_slice(&other.max_local_per_round);
        self.violations.extend(other.violations.iter().map(|v| Violation {
            round: v.round + offset,
            ..v.clone()
        }));
    }

    /// Audit log line for round `r` (0-based index into the per-round
    /// vectors, printed 1-based).
    pub fn audit_line(&self, r: usize) -> String {
        let viols: Vec<String> = self
            .violations
            .iter()
            .filter(|v| v.round == r + 1)
            .map(|v| v.kind.to_string())
            .collect();
        format!(
            "round={} agg_words={} max_local={} products={} violations=[{}]",
            r + 1,
            self.agg_words_per_round[r],
            self.max_local_per_round[r],
            self.elementary_products_per_round[r],
            viols.join(",")
        )
    }

    pub fn audit_lines(&self) -> Vec<String> {
        (0..self.rounds).map(|r| self.audit_line(r)).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("local budget exceeded at round {round}: group {key:?} needs {words} words > {cap} = c_local*m")]
    LocalBudgetExceeded {
        round: usize,
        key: Key,
        words: usize,
        cap: usize,
    },
    #[error("aggregate budget exceeded at round {round}: {words} words > {cap} = c_agg*M ({what})")]
    AggregateBudgetExceeded {
        round: usize,
        words: usize,
        cap: usize,
        what: &'static str,
    },
}

/// Strict execution aborts on the first budget violation; audit records
/// violations in the stats and keeps going.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Strict,
    Audit,
}

/// Per-reducer execution context: a counter-based RNG seeded from
/// `(run seed, round, key)`, the elementary-product instrumentation hook
/// and the working-space declaration.
pub struct ReducerCtx {
    rng_seed: u64,
    rng: Option<ChaCha8Rng>,
    products: u64,
    working_words: usize,
}

impl ReducerCtx {
    fn new(seed: u64, round: usize, key: &Key) -> Self {
        ReducerCtx {
            rng_seed: mix_seed(seed, round as u64, key),
            rng: None,
            products: 0,
            working_words: 0,
        }
    }

    /// Reproducible per-(seed, round, key) RNG, independent of reducer
    /// execution order.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        let seed = self.rng_seed;
        self.rng.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(seed))
    }

    /// Record `n` semiring multiplications performed by this reducer.
    pub fn record_products(&mut self, n: u64) {
        self.products += n;
    }

    /// Declare scratch space beyond the group's input words. When no
    /// declaration is made the group is charged its input size only.
    pub fn declare_working_words(&mut self, extra: usize) {
        self.working_words = self.working_words.max(extra);
    }
}

/// splitmix64 step; fixed mixer so seeds are stable across platforms.
fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix_seed(seed: u64, round: u64, key: &Key) -> u64 {
    let mut state = seed ^ 0x1234_5678_9abc_def0;
    let mut acc = splitmix64(&mut state);
    state ^= round;
    acc ^= splitmix64(&mut state);
    for &k in &key.0 {
        state ^= k;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// What a reducer returns: pairs added to the final output and pairs
/// forwarded to the next round.
#[derive(Clone, Debug)]
pub struct ReducerEmit<V> {
    pub output: Vec<Pair<V>>,
    pub next: Vec<Pair<V>>,
}

impl<V> ReducerEmit<V> {
    pub fn empty() -> Self {
        ReducerEmit {
            output: Vec::new(),
            next: Vec::new(),
        }
    }
}

impl<V> Default for ReducerEmit<V> {
    fn default() -> Self {
        Self::empty()
    }
}

pub type ReducerFn<V> = Box<dyn Fn(&Key, Vec<Pair<V>>, &mut ReducerCtx) -> ReducerEmit<V>>;

/// One round: a reducer applied to every key group of the current state.
pub struct Round<V> {
    pub reducer: ReducerFn<V>,
}

impl<V> Round<V> {
    pub fn new(
        reducer: impl Fn(&Key, Vec<Pair<V>>, &mut ReducerCtx) -> ReducerEmit<V> + 'static,
    ) -> Self {
        Round {
            reducer: Box::new(reducer),
        }
    }
}

/// A (possibly adaptive) program: asked for its next round after every
/// barrier, seeing the current pair state. Returning `None` ends the run.
pub trait Program<V: PairValue> {
    fn next_round(&mut self, round_index: usize, state: &PairSet<V>) -> Option<Round<V>>;
}

/// Fixed, non-adaptive list of rounds.
pub struct FixedProgram<V> {
    rounds: std::collections::VecDeque<Round<V>>,
}

impl<V> FixedProgram<V> {
    pub fn new(rounds: Vec<Round<V>>) -> Self {
        FixedProgram {
            rounds: rounds.into(),
        }
    }
}

impl<V: PairValue> Program<V> for FixedProgram<V> {
    fn next_round(&mut self, _round_index: usize, _state: &PairSet<V>) -> Option<Round<V>> {
        self.rounds.pop_front()
    }
}

/// Adaptive program driven by a closure over mutable driver state.
pub struct DriverProgram<V, F>
where
    F: FnMut(usize, &PairSet<V>) -> Option<Round<V>>,
{
    f: F,
    _marker: std::marker::PhantomData<V>,
}

impl<V, F> DriverProgram<V, F>
where
    F: FnMut(usize, &PairSet<V>) -> Option<Round<V>>,
{
    pub fn new(f: F) -> Self {
        DriverProgram {
            f,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<V: PairValue, F> Program<V> for DriverProgram<V, F>
where
    F: FnMut(usize, &PairSet<V>) -> Option<Round<V>>,
{
    fn next_round(&mut self, round_index: usize, state: &PairSet<V>) -> Option<Round<V>> {
        (self.f)(round_index, state)
    }
}

/// Run a program to completion.
///
/// Groups are processed in key order, which fixes the sequential
/// semantics the concurrency contract promises: two runs with equal
/// `(input, program, budget, seed)` produce identical output and stats.
pub fn run_program<V: PairValue, P: Program<V>>(
    input: PairSet<V>,
    program: &mut P,
    budget: &MemoryBudget,
    seed: u64,
    mode: ExecMode,
) -> Result<(PairSet<V>, RoundStats), EngineError> {
    let local_cap = budget.local_cap();
    let agg_cap = budget.agg_cap();
    let mut stats = RoundStats::new();
    let mut output: PairSet<V> = PairSet::new();
    let mut output_words: usize = 0;

    if input.words() as f64 > agg_cap {
        return Err(EngineError::AggregateBudgetExceeded {
            round: 0,
            words: input.words(),
            cap: agg_cap as usize,
            what: "input",
        });
    }

    let mut state = input;
    let mut round_index = 0usize;
    while let Some(round) = program.next_round(round_index, &state) {
        round_index += 1;
        // Barrier: group the current multiset by key, keeping arrival
        // order within each group.
        let mut groups: BTreeMap<Key, Vec<Pair<V>>> = BTreeMap::new();
        for pair in std::mem::take(&mut state.pairs) {
            groups.entry(pair.key).or_default().push(pair);
        }

        let mut agg_words = 0usize;
        let mut max_local = 0usize;
        let mut products = 0u64;
        let mut next_state: Vec<Pair<V>> = Vec::new();
        for (key, group) in groups {
            let input_words: usize = group.iter().map(|p| p.words()).sum();
            let mut ctx = ReducerCtx::new(seed, round_index, &key);
            let emit = (round.reducer)(&key, group, &mut ctx);
            let m_rk = input_words + ctx.working_words;
            agg_words += m_rk;
            max_local = max_local.max(m_rk);
            products += ctx.products;
            if m_rk as f64 > local_cap {
                if mode == ExecMode::Strict {
                    return Err(EngineError::LocalBudgetExceeded {
                        round: round_index,
                        key,
                        words: m_rk,
                        cap: local_cap as usize,
                    });
                }
                stats.violations.push(Violation {
                    round: round_index,
                    kind: ViolationKind::Local,
                    words: m_rk,
                    cap: local_cap as usize,
                });
            }
            for p in emit.output {
                output_words += p.words();
                output.pairs.push(p);
            }
            next_state.extend(emit.next);
        }

        if agg_words as f64 > agg_cap {
            if mode == ExecMode::Strict {
                return Err(EngineError::AggregateBudgetExceeded {
                    round: round_index,
                    words: agg_words,
                    cap: agg_cap as usize,
                    what: "round memory",
                });
            }
            stats.violations.push(Violation {
                round: round_index,
                kind: ViolationKind::Aggregate,
                words: agg_words,
                cap: agg_cap as usize,
            });
        }
        if output_words as f64 > agg_cap {
            if mode == ExecMode::Strict {
                return Err(EngineError::AggregateBudgetExceeded {
                    round: round_index,
                    words: output_words,
                    cap: agg_cap as usize,
                    what: "output",
                });
            }
            stats.violations.push(Violation {
                round: round_index,
                kind: ViolationKind::Output,
                words: output_words,
                cap: agg_cap as usize,
            });
        }

        stats.rounds += 1;
        stats.agg_words_per_round.push(agg_words);
        stats.max_local_per_round.push(max_local);
        stats.elementary_products_per_round.push(products);
        stats.max_local_words = stats.max_local_words.max(max_local);
        stats.max_agg_words = stats.max_agg_words.max(agg_words);
        state.pairs = next_state;
    }

    stats.output_words = output_words;
    Ok((output, stats))
}

/// Accessor for the per-round elementary product counts recorded by the
/// instrumentation hook.
pub fn count_elementary_products(stats: &RoundStats) -> &[u64] {
    stats.elementary_products()
}

/// The per-round cap on nonzero elementary products: `2 * M * sqrt(2m)`.
pub fn product_round_cap(budget: &MemoryBudget) -> f64 {
    2.0 * budget.big_m as f64 * (2.0 * budget.m as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_word_pairs(key: Key, n: usize) -> PairSet<u64> {
        // payload () would be 0 words; use a unit-payload struct below
        let mut ps = PairSet::new();
        for i in 0..n {
            ps.push(key, i as u64);
        }
        ps
    }

    #[derive(Clone, Debug, PartialEq)]
    struct Empty;
    impl WordSized for Empty {
        fn words(&self) -> usize {
            0
        }
    }

    #[test]
    fn empty_input_empty_program() {
        let budget = MemoryBudget::new(4, 4);
        let mut prog = FixedProgram::<u64>::new(vec![]);
        let (out, stats) =
            run_program(PairSet::new(), &mut prog, &budget, 0, ExecMode::Strict).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.rounds, 0);
    }

    #[test]
    fn identity_echo_counts_input_words() {
        // 5 one-word pairs (empty payload) under one key: max_local = 5.
        let mut ps: PairSet<Empty> = PairSet::new();
        for _ in 0..5 {
            ps.push(Key::of1(7), Empty);
        }
        let budget = MemoryBudget::new(5, 5);
        let mut prog = FixedProgram::new(vec![Round::new(|_k, group, _ctx| ReducerEmit {
            output: group,
            next: vec![],
        })]);
        let (out, stats) = run_program(ps, &mut prog, &budget, 0, ExecMode::Strict).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(stats.rounds, 1);
        assert_eq!(stats.max_local_words, 5);
    }

    #[test]
    fn local_budget_exceeded_strict() {
        // 6 one-word pairs in one group, m = 4, c_local = 1.
        let mut ps: PairSet<Empty> = PairSet::new();
        for _ in 0..6 {
            ps.push(Key::of1(1), Empty);
        }
        let budget = MemoryBudget::new(4, 64).with_slack(1.0, 4.0);
        let mut prog = FixedProgram::new(vec![Round::new(|_k, group, _ctx| ReducerEmit {
            output: group,
            next: vec![],
        })]);
        let err = run_program(ps, &mut prog, &budget, 0, ExecMode::Strict).unwrap_err();
        match err {
            EngineError::LocalBudgetExceeded { round, words, .. } => {
                assert_eq!(round, 1);
                assert_eq!(words, 6);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn audit_mode_records_violation_and_continues() {
        let mut ps: PairSet<Empty> = PairSet::new();
        for _ in 0..6 {
            ps.push(Key::of1(1), Empty);
        }
        let budget = MemoryBudget::new(4, 64).with_slack(1.0, 4.0);
        let mut prog = FixedProgram::new(vec![Round::new(|_k, group, _ctx| ReducerEmit {
            output: group,
            next: vec![],
        })]);
        let (out, stats) = run_program(ps, &mut prog, &budget, 0, ExecMode::Audit).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(stats.violations.len(), 1);
        assert_eq!(stats.violations[0].kind, ViolationKind::Local);
        assert!(stats.audit_line(0).contains("violations=[local]"));
    }

    #[test]
    fn working_words_declaration_charged() {
        let ps = one_word_pairs(Key::of1(3), 2);
        let budget = MemoryBudget::new(16, 64);
        let mut prog = FixedProgram::new(vec![Round::new(|_k, group, ctx: &mut ReducerCtx| {
            ctx.declare_working_words(10);
            ReducerEmit {
                output: group,
                next: vec![],
            }
        })]);
        let (_, stats) = run_program(ps, &mut prog, &budget, 0, ExecMode::Strict).unwrap();
        // 2 pairs of (key + u64) = 4 words input + 10 working.
        assert_eq!(stats.max_local_words, 14);
    }

    #[test]
    fn rng_is_order_independent_and_seed_keyed() {
        use rand::RngCore;
        let mut ctx_a = ReducerCtx::new(42, 3, &Key::of2(1, 2));
        let mut ctx_b = ReducerCtx::new(42, 3, &Key::of2(1, 2));
        assert_eq!(ctx_a.rng().next_u64(), ctx_b.rng().next_u64());
        let mut ctx_c = ReducerCtx::new(42, 3, &Key::of2(1, 3));
        let mut ctx_a2 = ReducerCtx::new(42, 3, &Key::of2(1, 2));
        assert_ne!(ctx_a2.rng().next_u64(), ctx_c.rng().next_u64());
    }

    #[test]
    fn determinism_across_runs() {
        let mut ps: PairSet<u64> = PairSet::new();
        for i in 0..20 {
            ps.push(Key::of1(i % 4), i);
        }
        let budget = MemoryBudget::new(64, 256);
        let run = |ps: PairSet<u64>| {
            let mut prog = FixedProgram::new(vec![
                Round::new(|k, group, ctx: &mut ReducerCtx| {
                    use rand::RngCore;
                    let r = ctx.rng().next_u64() % 3;
                    ReducerEmit {
                        output: vec![],
                        next: group
                            .into_iter()
                            .map(|p| Pair::new(Key::of1((k.0[1] + r + p.value) % 5), p.value))
                            .collect(),
                    }
                }),
                Round::new(|_k, group, _ctx| ReducerEmit {
                    output: group,
                    next: vec![],
                }),
            ]);
            run_program(ps, &mut prog, &budget, 7, ExecMode::Strict).unwrap()
        };
        let (out1, stats1) = run(ps.clone());
        let (out2, stats2) = run(ps);
        assert_eq!(format!("{out1:?}"), format!("{out2:?}"));
        assert_eq!(stats1, stats2);
    }

    #[test]
    fn absorb_concatenates_and_maxes() {
        let mut a = RoundStats {
            rounds: 2,
            max_local_words: 10,
            max_agg_words: 50,
            output_words: 5,
            elementary_products_per_round: vec![1, 2],
            agg_words_per_round: vec![30, 50],
            max_local_per_round: vec![10, 8],
            violations: vec![],
        };
        let b = RoundStats {
            rounds: 1,
            max_local_words: 20,
            max_agg_words: 40,
            output_words: 9,
            elementary_products_per_round: vec![7],
            agg_words_per_round: vec![40],
            max_local_per_round: vec![20],
            violations: vec![],
        };
        a.absorb(&b);
        assert_eq!(a.rounds, 3);
        assert_eq!(a.max_local_words, 20);
        assert_eq!(a.max_agg_words, 50);
        assert_eq!(a.output_words, 9);
        assert_eq!(a.elementary_products_per_round, vec![1, 2, 7]);
    }
}
