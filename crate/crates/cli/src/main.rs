use std::fs;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rdkv::allocator::SolverConfig;
use rdkv::cache::{synthetic_cache, CacheShape, KvCache, ProbeConfig};
use rdkv::harness::{dump_bits, sweep, verify_packed, SweepConfig};
use rdkv::pipeline::{allocate_model, BudgetSpec, ModelAllocation, PipelineConfig, Tables};
use rdkv::quantizer::{calibrate_epsilon, BitSet, DistortionTable};
use rdkv::trizone::PackedModel;
use rdkv::weights::UnitKind;

#[derive(Parser)]
#[command(name = "rdkv", version, about = "Rate-distortion KV-cache compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cache file.
    Gen(GenArgs),
    /// Estimate a distortion table from cache files.
    Calibrate(CalibrateArgs),
    /// Allocate bit-widths and write the allocation and packed cache.
    Allocate(AllocateArgs),
    /// Check packed decode against a dense reference.
    Verify(VerifyArgs),
    /// Sweep average bit-widths and report distortion with its lower bound.
    Sweep(SweepArgs),
    /// Write per-unit weights and bit-widths of one head.
    DumpBits(DumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Units {
    Token,
    Channel,
}

impl From<Units> for UnitKind {
    fn from(u: Units) -> Self {
        match u {
            Units::Token => UnitKind::Token,
            Units::Channel => UnitKind::Channel,
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Relative tolerance on the achieved average bit-width.
    #[arg(long, default_value_t = 1e-2)]
    delta: f64,
    #[arg(long, default_value_t = 64)]
    max_iter: usize,
    /// Only accept allocations at or below the budget.
    #[arg(long)]
    strict_budget: bool,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.delta,
            max_iterations: self.max_iter,
            strict: self.strict_budget,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    q_heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 32)]
    head_dim: usize,
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    /// Observation-window length.
    #[arg(long, default_value_t = 32)]
    window: usize,
    /// Number of K channels scaled up as outliers.
    #[arg(long, default_value_t = 0)]
    outliers: usize,
    #[arg(long, default_value_t = 10.0)]
    outlier_scale: f32,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    caches: Vec<PathBuf>,
    #[arg(long, value_enum)]
    granularity: Units,
    #[arg(long, default_value = "0,2,4,8,16")]
    bits: BitSet,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Budget as the number of tokens a full-precision cache would hold.
    #[arg(long)]
    budget_tokens: usize,
    /// Fraction of the budget given to K.
    #[arg(long, default_value_t = 0.5)]
    rk: f64,
    #[arg(long, default_value = "0,2,4,8,16")]
    bits: BitSet,
    #[arg(long)]
    v_table: PathBuf,
    #[arg(long)]
    k_table: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Keep observation-window tokens at full precision.
    #[arg(long)]
    force_window_retain: bool,
    #[arg(long, default_value_t = 5)]
    pool_kernel: usize,
    /// Allocation JSON output.
    #[arg(long, short)]
    out: PathBuf,
    /// Packed cache output.
    #[arg(long)]
    packed: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    allocation: PathBuf,
    #[arg(long)]
    packed: PathBuf,
    #[arg(long, default_value_t = 8)]
    queries: usize,
    /// Decode tokens appended before querying.
    #[arg(long, default_value_t = 0)]
    appended: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct SweepArgs {
    caches: Vec<PathBuf>,
    #[arg(long)]
    table: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    grid: Vec<f64>,
    #[arg(long, value_enum, default_value = "token")]
    units: Units,
    /// Action set, e.g. `0,16` (evict-only), `2,4,8,16` (quant-only), `0,4,16`.
    #[arg(long, default_value = "0,2,4,8,16")]
    bits: BitSet,
    #[arg(long, default_value_t = 1e-2)]
    delta: f64,
    #[arg(long, default_value_t = 64)]
    max_iter: usize,
    #[arg(long, default_value_t = 5)]
    pool_kernel: usize,
    #[arg(long, short)]
    out: PathBuf,
    /// Also write an SVG plot of the median curve.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    allocation: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    head: usize,
    #[arg(long, value_enum, default_value = "token")]
    units: Units,
    #[arg(long, short)]
    out: PathBuf,
}

fn load_caches(paths: &[PathBuf]) -> Result<Vec<KvCache>> {
    ensure!(!paths.is_empty(), "no cache files given");
    paths
        .iter()
        .map(|p| KvCache::load(p).with_context(|| format!("loading cache {}", p.display())))
        .collect()
}

fn load_table(path: &PathBuf) -> Result<DistortionTable> {
    DistortionTable::load(path).with_context(|| format!("loading distortion table {}", path.display()))
}

fn probe_for(cache: &KvCache, pool_kernel: usize) -> ProbeConfig {
    ProbeConfig {
        window: cache.window(),
        pool_kernel,
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let shape = CacheShape::new(a.layers, a.q_heads, a.kv_heads, a.head_dim, a.seq_len)?;
    let cache = synthetic_cache(a.seed, shape, a.window, a.outliers, a.outlier_scale)?;
    cache.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let caches = load_caches(&a.caches)?;
    let mut table = calibrate_epsilon(&caches, a.granularity.into(), &a.bits)?;
    table.provenance = format!("calibrated on {} synthetic cache(s)", caches.len());
    fs::write(&a.out, table.to_json()?)?;
    let eps: Vec<String> = table.eps.iter().map(|(b, e)| format!("eps({b})={e:.4e}")).collect();
    println!("{}", eps.join(" "));
    Ok(())
}

fn allocate(a: AllocateArgs) -> Result<()> {
    let cache = KvCache::load(&a.cache).with_context(|| format!("loading cache {}", a.cache.display()))?;
    let tables = Tables::new(load_table(&a.v_table)?, load_table(&a.k_table)?)?;
    let spec = BudgetSpec::new(a.budget_tokens, a.rk, a.bits)?;
    let config = PipelineConfig {
        probe: probe_for(&cache, a.pool_kernel),
        solver: a.solver.config(),
        force_window_retain: a.force_window_retain,
    };
    let alloc = allocate_model(&cache, &spec, &tables, &config)?;
    alloc.save(&a.out)?;
    let budget: f64 = alloc.heads.iter().map(|h| h.budget.head_bits).sum();
    let unconverged = alloc
        .heads
        .iter()
        .filter(|h| !h.v_solve.converged || !h.k_solve.converged)
        .count();
    println!(
        "allocated {:.0} of {:.0} budget bits over {} heads ({} flagged unconverged)",
        alloc.total_achieved_bits(),
        budget,
        alloc.heads.len(),
        unconverged
    );
    if let Some(path) = &a.packed {
        let packed = PackedModel::build(&cache, &alloc)?;
        packed.save(path)?;
        let (payload, padding, meta) = packed.heads.iter().fold((0, 0, 0), |acc, (_, tz)| {
            let s = tz.storage();
            (
                acc.0 + s.zone_a_packed_bytes + s.full_precision_bytes,
                acc.1 + s.padding_bits,
                acc.2 + s.metadata_bytes,
            )
        });
        println!("packed payload {payload} bytes ({padding} padding bits), metadata {meta} bytes");
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let cache = KvCache::load(&a.cache).with_context(|| format!("loading cache {}", a.cache.display()))?;
    let alloc = ModelAllocation::load(&a.allocation)?;
    let packed = match PackedModel::load(&a.packed) {
        Ok(p) => p,
        Err(e) => bail!("FAIL: packed cache rejected: {e}"),
    };
    let report = match verify_packed(&cache, &alloc, &packed, a.queries, a.appended, a.seed, a.tolerance) {
        Ok(r) => r,
        Err(e) => bail!("FAIL: {e}"),
    };
    let status = if report.passed { "PASS" } else { "FAIL" };
    println!(
        "{status}: {} heads x {} queries, max relative error {:.3e} (tolerance {:.0e})",
        report.heads, report.queries, report.max_rel_error, report.tolerance
    );
    ensure!(report.passed, "packed decode deviates from the dense reference");
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let caches = load_caches(&a.caches)?;
    let table = load_table(&a.table)?;
    let config = SweepConfig {
        grid: a.grid,
        units: a.units.into(),
        bits: a.bits,
        probe: probe_for(&caches[0], a.pool_kernel),
        tolerance: a.delta,
        max_iterations: a.max_iter,
    };
    let result = sweep(&caches, &table, &config)?;
    fs::write(&a.out, result.to_csv())?;
    if let Some(plot) = &a.plot {
        fs::write(plot, result.to_svg())?;
    }
    match result.check_invariants() {
        Ok(()) => println!("{} rows, duality and monotonicity hold", result.rows.len()),
        Err(e) => println!("{} rows, invariant violated: {e}", result.rows.len()),
    }
    Ok(())
}

fn dump(a: DumpArgs) -> Result<()> {
    let alloc = ModelAllocation::load(&a.allocation)?;
    let csv = dump_bits(&alloc, a.layer, a.head, a.units.into())?;
    fs::write(&a.out, csv)?;
    Ok(())
}

fn main() -> Result<()> {
    if let Ok(n) = std::env::var("RDKV_THREADS") {
        let n: usize = n.parse().context("RDKV_THREADS must be a positive integer")?;
        ensure!(n > 0, "RDKV_THREADS must be a positive integer");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match Cli::parse().command {
        Command::Gen(a) => gen(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Allocate(a) => allocate(a),
        Command::Verify(a) => verify(a),
        Command::Sweep(a) => run_sweep(a),
        Command::DumpBits(a) => dump(a),
    }
}
