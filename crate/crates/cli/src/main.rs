//! Command-line surface for the simulation framework: run the
//! multiplication strategies, inversion and matching pipelines, sweep
//! (m, M) grids, and collect round/memory reports as CSV.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mrmx_core::engine::{MemoryBudget, RoundStats};
use mrmx_core::io::{format_matrix, parse_graph, parse_matrix};
use mrmx_core::linalg::{
    default_newton_max_iter, invert_general, invert_lower_triangular, newton_inverse, FieldMatrix,
    LinalgError,
};
use mrmx_core::matching::{mvv_matching, MatchingError};
use mrmx_core::matrix::CooMatrix;
use mrmx_core::scalar::{ExactScalar, FloatScalar};
use mrmx_core::semiring::{FieldSemiring, MinPlus, Nat, Semiring};
use mrmx_core::sketch::{estimate_output_nnz_full, EstimateOptions, SketchParams};
use mrmx_core::sparse::{d1_multiply, d2_multiply, r1_multiply, sd_multiply, sparse_multiply_auto};
use mrmx_core::{dd_multiply, exact_distinct_products};

const CSV_HEADER: &str = "algo,n,nnz_a,nnz_b,nnz_c,m,M,seed,rounds,max_local_words,max_agg_words,max_products_per_round,theory_bound";

#[derive(Parser)]
#[command(
    name = "mrmx",
    version,
    about = "round/memory simulation for matrix programs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multiply two matrices from files with a chosen strategy.
    Multiply(MultiplyArgs),
    /// Sweep a grid of cells on generated inputs, one CSV row per cell
    /// and seed.
    Bench(BenchArgs),
    /// Invert a matrix (exact triangular/charpoly or iterative newton).
    Invert(InvertArgs),
    /// Find a perfect matching of a graph by randomized trials.
    Match(MatchArgs),
    /// Estimate the number of nonzeros of a product without computing it.
    Estimate(EstimateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    Dense,
    D1,
    D2,
    R1,
    Auto,
    Sd,
    Sort,
    Prefix,
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Algo::Dense => "dense",
            Algo::D1 => "d1",
            Algo::D2 => "d2",
            Algo::R1 => "r1",
            Algo::Auto => "auto",
            Algo::Sd => "sd",
            Algo::Sort => "sort",
            Algo::Prefix => "prefix",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SemiringKind {
    Nat,
    Minplus,
}

#[derive(Args)]
struct MultiplyArgs {
    #[arg(long, value_enum)]
    algo: Algo,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    m: usize,
    #[arg(long = "M")]
    big_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "nat")]
    semiring: SemiringKind,
    /// Fail (exit 3) if any budget cap was exceeded.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV report file (appended; header written when new).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated cells `side:m:M` (matrix side, local and
    /// aggregate budgets in words); for sort/prefix the first component
    /// is the item count.
    #[arg(long)]
    grid: String,
    #[arg(long, value_enum)]
    algo: Algo,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Nonzeros per generated operand (sparse strategies; 0 = dense).
    #[arg(long, default_value_t = 0)]
    nnz: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InvertMethod {
    Triangular,
    Charpoly,
    Newton,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long, value_enum)]
    method: InvertMethod,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    m: usize,
    #[arg(long = "M")]
    big_m: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    m: usize,
    #[arg(long = "M")]
    big_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trials with consecutive seeds before giving up.
    #[arg(long, default_value_t = 1)]
    retries: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    eps: f64,
    #[arg(long, default_value_t = 0.125)]
    delta: f64,
    #[arg(long)]
    m: usize,
    #[arg(long = "M")]
    big_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the final merged sketch in its text form.
    #[arg(long)]
    sketch_out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Multiply(args) => cmd_multiply(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Invert(args) => cmd_invert(args),
        Command::Match(args) => cmd_match(args),
        Command::Estimate(args) => cmd_estimate(args),
    };
    match result {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn read_file(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, content: &str) -> Result<(), String> {
    fs::write(path, content).map_err(|e| format!("{}: {e}", path.display()))
}

fn append_csv(path: Option<&Path>, row: &str) -> Result<(), String> {
    let Some(path) = path else {
        return Ok(());
    };
    let need_header = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    if need_header {
        writeln!(f, "{CSV_HEADER}").map_err(|e| e.to_string())?;
    }
    writeln!(f, "{row}").map_err(|e| e.to_string())?;
    Ok(())
}

fn dump_audit_log(stats: &RoundStats) {
    if let Ok(path) = std::env::var("MRMX_AUDIT_LOG") {
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(&path) {
            for line in stats.audit_lines() {
                let _ = writeln!(f, "{line}");
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn csv_row(
    algo: &str,
    n: usize,
    nnz_a: usize,
    nnz_b: usize,
    nnz_c: usize,
    budget: &MemoryBudget,
    seed: u64,
    stats: &RoundStats,
    theory: f64,
) -> String {
    format!(
        "{algo},{n},{nnz_a},{nnz_b},{nnz_c},{},{},{seed},{},{},{},{},{:.3}",
        budget.m,
        budget.big_m,
        stats.rounds,
        stats.max_local_words,
        stats.max_agg_words,
        stats.max_products_per_round(),
        theory
    )
}

fn theory_bound(
    algo: Algo,
    side: usize,
    nnz_a: usize,
    nnz_b: usize,
    o_true: usize,
    budget: &MemoryBudget,
) -> f64 {
    let n = (side * side) as f64;
    let s = side as f64;
    let m = (budget.m as f64).max(2.0);
    let big_m = budget.big_m as f64;
    let nt = (nnz_a.max(nnz_b) as f64).max(1.0);
    let logm_m = (big_m.ln() / m.ln()).max(1.0);
    let logm_n = (n.ln() / m.ln()).max(1.0);
    match algo {
        Algo::Dense => n * s / (big_m * m.sqrt()) + logm_n,
        Algo::D1 => ((nt * nt.min(s)) / big_m).ceil().max(1.0) * logm_m,
        Algo::D2 => (((nt + o_true as f64) * s) / (big_m * m.sqrt()))
            .ceil()
            .max(1.0)
            * logm_m,
        Algo::R1 => ((nt + o_true as f64) * s) / (big_m * m.sqrt()) + logm_m,
        Algo::Auto | Algo::Sd => {
            let d1 = ((nt * nt.min(s)) / big_m).ceil().max(1.0) * logm_m;
            let dd = n * s / (big_m * m.sqrt()) + logm_n;
            d1.min(dd)
        }
        // For the primitives `side` carries the item count.
        Algo::Sort | Algo::Prefix => 2.0 * ((side as f64).ln() / m.ln()).ceil() + 3.0,
    }
}

fn run_multiply_generic<S: Semiring>(
    algo: Algo,
    a: &CooMatrix<S>,
    b: &CooMatrix<S>,
    budget: &MemoryBudget,
    seed: u64,
) -> Result<(CooMatrix<S>, RoundStats, String), String> {
    let (c, stats, label) = match algo {
        Algo::Dense => {
            let (c, st) = dd_multiply(a, b, budget).map_err(|e| e.to_string())?;
            (c, st, "dense".to_string())
        }
        Algo::D1 => {
            let (c, st) = d1_multiply(a, b, budget).map_err(|e| e.to_string())?;
            (c, st, "d1".to_string())
        }
        Algo::D2 => {
            let (c, st, _) = d2_multiply(a, b, budget).map_err(|e| e.to_string())?;
            (c, st, "d2".to_string())
        }
        Algo::R1 => {
            let (c, st) = r1_multiply(a, b, budget, seed).map_err(|e| e.to_string())?;
            (c, st, "r1".to_string())
        }
        Algo::Auto => {
            let (c, st, which) =
                sparse_multiply_auto(a, b, budget, seed, true).map_err(|e| e.to_string())?;
            (c, st, which.to_string())
        }
        Algo::Sd => {
            let (c, st, _) = sd_multiply(a, b, budget).map_err(|e| e.to_string())?;
            (c, st, "sd".to_string())
        }
        _ => return Err("sort/prefix are bench-only".to_string()),
    };
    Ok((c, stats, label))
}

fn cmd_multiply(args: MultiplyArgs) -> Result<ExitCode, String> {
    let budget = MemoryBudget::new(args.m, args.big_m);
    let a_text = read_file(&args.a)?;
    let b_text = read_file(&args.b)?;
    macro_rules! run {
        ($S:ty) => {{
            let a: CooMatrix<$S> = parse_matrix(&a_text).map_err(|e| e.to_string())?;
            let b: CooMatrix<$S> = parse_matrix(&b_text).map_err(|e| e.to_string())?;
            let (c, stats, label) = run_multiply_generic(args.algo, &a, &b, &budget, args.seed)?;
            dump_audit_log(&stats);
            let row = csv_row(
                &label,
                (a.side() as usize).pow(2),
                a.nnz(),
                b.nnz(),
                c.nnz(),
                &budget,
                args.seed,
                &stats,
                theory_bound(
                    args.algo,
                    a.side() as usize,
                    a.nnz(),
                    b.nnz(),
                    c.nnz(),
                    &budget,
                ),
            );
            append_csv(args.csv.as_deref(), &row)?;
            println!(
                "algo={label} rounds={} max_local={} max_agg={} nnz_c={}",
                stats.rounds, stats.max_local_words, stats.max_agg_words, c.nnz()
            );
            if let Some(out) = &args.out {
                write_file(out, &format_matrix(&c))?;
            }
            if !stats.violations.is_empty() {
                eprintln!("budget violations: {:?}", stats.violations);
                if args.strict {
                    return Ok(ExitCode::from(3));
                }
            }
        }};
    }
    match args.semiring {
        SemiringKind::Nat => run!(Nat),
        SemiringKind::Minplus => run!(MinPlus),
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_dense(side: u32, seed: u64) -> CooMatrix<Nat> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<u64> = (0..side as usize * side as usize)
        .map(|_| rng.gen_range(1..9))
        .collect();
    CooMatrix::from_dense(side, &vals)
}

fn gen_sparse(side: u32, nnz: usize, seed: u64) -> CooMatrix<Nat> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut ents = std::collections::BTreeMap::new();
    while ents.len() < nnz.min(side as usize * side as usize) {
        ents.insert(
            (rng.gen_range(0..side), rng.gen_range(0..side)),
            rng.gen_range(1..9u64),
        );
    }
    CooMatrix::from_entries(side, ents.into_iter().map(|((i, j), x)| (i, j, x)).collect())
        .unwrap()
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode, String> {
    let mut cells = Vec::new();
    for cell in args.grid.split(',').filter(|c| !c.trim().is_empty()) {
        let parts: Vec<&str> = cell.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(format!("bad grid cell `{cell}`: expected side:m:M"));
        }
        let side: u32 = parts[0]
            .parse()
            .map_err(|_| format!("bad side in `{cell}`"))?;
        let m: usize = parts[1].parse().map_err(|_| format!("bad m in `{cell}`"))?;
        let big_m: usize = parts[2].parse().map_err(|_| format!("bad M in `{cell}`"))?;
        cells.push((side, m, big_m));
    }
    println!("{CSV_HEADER}");
    if cells.is_empty() {
        if let Some(path) = args.csv.as_deref() {
            let need_header = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
            if need_header {
                fs::write(path, format!("{CSV_HEADER}\n")).map_err(|e| e.to_string())?;
            }
        }
        return Ok(ExitCode::SUCCESS);
    }
    for (side, m, big_m) in cells {
        let budget = MemoryBudget::new(m, big_m);
        for seed in 0..args.seeds.max(1) {
            let row = match args.algo {
                Algo::Sort => {
                    use mrmx_core::mr_sort;
                    use rand::{Rng, SeedableRng};
                    let n = side as usize;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                    let items: Vec<(u64, u64)> = (0..n)
                        .map(|i| (i as u64, rng.gen_range(0..1_000_000)))
                        .collect();
                    let (_, stats) = mr_sort(&items, &budget, mrmx_core::ExecMode::Audit)
                        .map_err(|e| e.to_string())?;
                    dump_audit_log(&stats);
                    csv_row(
                        "sort",
                        n,
                        n,
                        0,
                        0,
                        &budget,
                        seed,
                        &stats,
                        theory_bound(Algo::Sort, n, n, 0, 0, &budget),
                    )
                }
                Algo::Prefix => {
                    use mrmx_core::mr_prefix;
                    use rand::{Rng, SeedableRng};
                    use std::sync::Arc;
                    let n = side as usize;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                    let items: Vec<(u64, u64)> =
                        (0..n).map(|i| (i as u64, rng.gen_range(0..100))).collect();
                    let op: Arc<dyn Fn(&u64, &u64) -> u64 + Send + Sync> = Arc::new(|a, b| a + b);
                    let (_, stats) = mr_prefix(&items, op, &budget, mrmx_core::ExecMode::Audit)
                        .map_err(|e| e.to_string())?;
                    dump_audit_log(&stats);
                    csv_row(
                        "prefix",
                        n,
                        n,
                        0,
                        0,
                        &budget,
                        seed,
                        &stats,
                        theory_bound(Algo::Prefix, n, n, 0, 0, &budget),
                    )
                }
                algo => {
                    let (a, b) = if matches!(algo, Algo::Dense) || args.nnz == 0 {
                        (gen_dense(side, seed * 2 + 1), gen_dense(side, seed * 2 + 2))
                    } else {
                        (
                            gen_sparse(side, args.nnz, seed * 2 + 1),
                            gen_sparse(side, args.nnz, seed * 2 + 2),
                        )
                    };
                    let (c, stats, label) = run_multiply_generic(algo, &a, &b, &budget, seed)?;
                    dump_audit_log(&stats);
                    let (o_true, _) = exact_distinct_products(&a, &b);
                    csv_row(
                        &label,
                        (side as usize).pow(2),
                        a.nnz(),
                        b.nnz(),
                        c.nnz(),
                        &budget,
                        seed,
                        &stats,
                        theory_bound(algo, side as usize, a.nnz(), b.nnz(), o_true, &budget),
                    )
                }
            };
            println!("{row}");
            append_csv(args.csv.as_deref(), &row)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_invert(args: InvertArgs) -> Result<ExitCode, String> {
    let budget = MemoryBudget::new(args.m, args.big_m);
    let text = read_file(&args.a)?;
    match args.method {
        InvertMethod::Triangular | InvertMethod::Charpoly => {
            let coo: CooMatrix<FieldSemiring<ExactScalar>> =
                parse_matrix(&text).map_err(|e| e.to_string())?;
            let a = FieldMatrix::<ExactScalar>::from_coo(&coo);
            let result = if args.method == InvertMethod::Triangular {
                invert_lower_triangular(&a, &budget)
            } else {
                invert_general(&a, &budget)
            };
            match result {
                Ok((inv, stats)) => {
                    dump_audit_log(&stats);
                    println!(
                        "method={} rounds={} max_local={} max_agg={}",
                        if args.method == InvertMethod::Triangular {
                            "triangular"
                        } else {
                            "charpoly"
                        },
                        stats.rounds,
                        stats.max_local_words,
                        stats.max_agg_words
                    );
                    let row = csv_row(
                        "invert",
                        (a.side() as usize).pow(2),
                        coo.nnz(),
                        0,
                        0,
                        &budget,
                        0,
                        &stats,
                        0.0,
                    );
                    append_csv(args.csv.as_deref(), &row)?;
                    let rendered = format_matrix(&inv.to_coo());
                    match &args.out {
                        Some(out) => write_file(out, &rendered)?,
                        None => print!("{rendered}"),
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(LinalgError::Singular) => {
                    eprintln!("singular matrix");
                    Ok(ExitCode::from(3))
                }
                Err(e) => Err(e.to_string()),
            }
        }
        InvertMethod::Newton => {
            let coo: CooMatrix<FieldSemiring<FloatScalar>> =
                parse_matrix(&text).map_err(|e| e.to_string())?;
            let a = FieldMatrix::<FloatScalar>::from_coo(&coo);
            let max_iter = args
                .max_iter
                .unwrap_or_else(|| default_newton_max_iter(a.side()));
            match newton_inverse(&a, &budget, args.tol, max_iter) {
                Ok((inv, state, stats)) => {
                    dump_audit_log(&stats);
                    println!(
                        "method=newton iterations={} residual={:.3e} rounds={}",
                        state.iterations,
                        state.residual_norms.last().copied().unwrap_or(0.0),
                        stats.rounds
                    );
                    let row = csv_row(
                        "invert",
                        (a.side() as usize).pow(2),
                        coo.nnz(),
                        0,
                        0,
                        &budget,
                        0,
                        &stats,
                        0.0,
                    );
                    append_csv(args.csv.as_deref(), &row)?;
                    let rendered = format_matrix(&inv.to_coo());
                    match &args.out {
                        Some(out) => write_file(out, &rendered)?,
                        None => print!("{rendered}"),
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(LinalgError::NoConvergence { iters, residual }) => {
                    eprintln!("no convergence after {iters} iterations (residual {residual:.3e})");
                    Ok(ExitCode::from(3))
                }
                Err(LinalgError::Singular) => {
                    eprintln!("singular matrix");
                    Ok(ExitCode::from(3))
                }
                Err(e) => Err(e.to_string()),
            }
        }
    }
}

fn cmd_match(args: MatchArgs) -> Result<ExitCode, String> {
    let budget = MemoryBudget::new(args.m, args.big_m);
    let g = parse_graph(&read_file(&args.graph)?).map_err(|e| e.to_string())?;
    let mut last_err: Option<MatchingError> = None;
    for trial in 0..args.retries.max(1) {
        let seed = args.seed + trial;
        match mvv_matching(&g, &budget, seed) {
            Ok((result, stats)) => {
                dump_audit_log(&stats);
                println!(
                    "seed={seed} det_valuation={} rounds={}",
                    result.valuation, stats.rounds
                );
                for (u, v) in &result.matched {
                    println!("{u} {v}");
                }
                let row = csv_row(
                    "match",
                    (g.vertex_count() as usize).pow(2),
                    g.edge_count(),
                    0,
                    result.matched.len(),
                    &budget,
                    seed,
                    &stats,
                    0.0,
                );
                append_csv(args.csv.as_deref(), &row)?;
                return Ok(ExitCode::SUCCESS);
            }
            Err(MatchingError::OddVertexCount(d)) => {
                eprintln!("odd vertex count {d}");
                return Ok(ExitCode::from(3));
            }
            Err(e @ (MatchingError::SingularWeighting | MatchingError::NoPerfectMatchingFound)) => {
                last_err = Some(e);
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    eprintln!(
        "no perfect matching found after {} trials ({})",
        args.retries.max(1),
        last_err.map(|e| e.to_string()).unwrap_or_default()
    );
    Ok(ExitCode::from(3))
}

fn cmd_estimate(args: EstimateArgs) -> Result<ExitCode, String> {
    let budget = MemoryBudget::new(args.m, args.big_m);
    let a: CooMatrix<Nat> = parse_matrix(&read_file(&args.a)?).map_err(|e| e.to_string())?;
    let b: CooMatrix<Nat> = parse_matrix(&read_file(&args.b)?).map_err(|e| e.to_string())?;
    let params = SketchParams::new(args.eps, args.delta, (a.side() as u64).pow(2));
    if 2 * budget.m < params.h_words() {
        return Err(format!(
            "local budget too small for the sketch: need m >= {}",
            params.h_words().div_ceil(2)
        ));
    }
    let (est, sketch, stats) = estimate_output_nnz_full(
        &a,
        &b,
        args.eps,
        args.delta,
        &budget,
        args.seed,
        &EstimateOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    dump_audit_log(&stats);
    println!(
        "estimate={est} rounds={} sketch_words={}",
        stats.rounds,
        params.h_words()
    );
    if let Some(path) = &args.sketch_out {
        if let Some(sk) = &sketch {
            write_file(path, &sk.to_text())?;
        }
    }
    let row = csv_row(
        "estimate",
        (a.side() as usize).pow(2),
        a.nnz(),
        b.nnz(),
        est as usize,
        &budget,
        args.seed,
        &stats,
        0.0,
    );
    append_csv(args.csv.as_deref(), &row)?;
    Ok(ExitCode::SUCCESS)
}
