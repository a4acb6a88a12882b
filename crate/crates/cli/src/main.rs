mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use accelplug::pipeline::{sweep, PlanMethod};
use accelplug::{
    balance_capacity, balance_data, calibrate_nodes, even_split, generate, load_edge_list,
    makespan, optimal_makespan, plan, program_for, run, write_edge_list, BalanceProblem,
    CacheConfig, CapacityProblem, EngineConfig, Error, GraphKind, PipelineCostModel,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{Balance, FileConfig, FlagValues, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "accelplug", version, about = "Simulated accelerator middleware for iterative graph processing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an algorithm on a graph and write metrics and final values.
    Run(RunArgs),
    /// Compare the closed-form block size with an exhaustive search.
    PlanBlock(PlanBlockArgs),
    /// Print a data or capacity balancing plan with predicted makespans.
    PlanBalance(PlanBalanceArgs),
    /// Write a synthetic graph as an edge list.
    GenGraph(GenGraphArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML file with the same keys as the flags (underscored).
    #[arg(long)]
    config: Option<PathBuf>,
    /// sssp, pagerank or lp.
    #[arg(long)]
    algo: Option<String>,
    /// Edge-list file: "src dst [weight]" per line, '#' comments.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    daemons_per_node: Option<usize>,
    /// cpu-like, gpu-like or custom:LANES,PER_UNIT_COST,CALL_OVERHEAD.
    #[arg(long)]
    daemon_profile: Option<String>,
    /// bsp or gas.
    #[arg(long)]
    model: Option<String>,
    /// auto or a fixed number of items per block.
    #[arg(long)]
    block_size: Option<String>,
    #[arg(long)]
    enable_cache: bool,
    #[arg(long)]
    cache_capacity: Option<usize>,
    #[arg(long)]
    enable_skip: bool,
    /// none, data or capacity.
    #[arg(long)]
    balance: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Line-delimited JSON metrics, one record per iteration.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Final values, "id value(s)" per line. Standard output when absent.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Overrides the algorithm's iteration cap.
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct PlanBlockArgs {
    /// Download cost per item.
    #[arg(long)]
    k1: f64,
    /// Compute cost per item.
    #[arg(long)]
    k2: f64,
    /// Upload cost per item.
    #[arg(long)]
    k3: f64,
    /// Fixed cost per accelerator call.
    #[arg(long)]
    a: f64,
    /// Items to process.
    #[arg(long)]
    d: u64,
}

#[derive(Args, Debug)]
struct PlanBalanceArgs {
    /// data or capacity.
    mode: String,
    /// Total data units (data mode).
    #[arg(long)]
    total: Option<u64>,
    /// Per-unit cost of every node, comma separated.
    #[arg(long, value_delimiter = ',')]
    costs: Vec<f64>,
    /// Current partition sizes (capacity mode), comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<u64>,
    /// Best capacity factor (capacity mode).
    #[arg(long)]
    f: Option<f64>,
}

#[derive(Args, Debug)]
struct GenGraphArgs {
    /// path, cycle, star, components or random.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    n: usize,
    /// Number of components.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Edge probability for random and components.
    #[arg(long, default_value_t = 0.05)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::PlanBlock(a) => cmd_plan_block(&a).map(|_| 0),
        Command::PlanBalance(a) => cmd_plan_balance(&a).map(|_| 0),
        Command::GenGraph(a) => cmd_gen_graph(&a).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<u8> {
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let flags = FlagValues {
        algo: args.algo,
        graph: args.graph,
        partitions: args.partitions,
        daemons_per_node: args.daemons_per_node,
        daemon_profile: args.daemon_profile,
        model: args.model,
        block_size: args.block_size,
        enable_cache: args.enable_cache,
        cache_capacity: args.cache_capacity,
        enable_skip: args.enable_skip,
        balance: args.balance,
        seed: args.seed,
        metrics_out: args.metrics_out,
        dump: args.dump,
        max_iterations: args.max_iterations,
    };
    let cfg = RunConfig::resolve(flags, file)?;
    let graph = load_edge_list(&cfg.graph).with_context(|| format!("loading {}", cfg.graph.display()))?;
    let program = program_for(cfg.algo, &graph, None)?;
    let mut engine = EngineConfig {
        nodes: cfg.partitions,
        profiles: vec![cfg.daemon_profile.profile()],
        daemons_per_node: cfg.daemons_per_node,
        block_policy: cfg.block_size,
        cache: cfg.enable_cache.then(|| CacheConfig::with_capacity(cfg.cache_capacity)),
        enable_skip: cfg.enable_skip,
        max_iterations: cfg.max_iterations,
        record_traces: false,
        ..EngineConfig::default()
    };
    if cfg.balance != Balance::None && cfg.partitions > 1 {
        apply_balance(cfg.balance, &graph, &program, &cfg, &mut engine)?;
    }
    let out = run(&graph, program, cfg.model, &engine)?;

    if let Some(path) = &cfg.metrics_out {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        out.metrics.write_jsonl(&mut w)?;
        w.flush()?;
    }
    let mut dump = String::new();
    for (id, attr) in &out.attributes {
        dump.push_str(&format!("{id} {}\n", attr.render()));
    }
    match &cfg.dump {
        Some(path) => std::fs::write(path, dump).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(dump.as_bytes())?,
    }
    let s = &out.metrics.summary;
    eprintln!(
        "{} {}: {} iterations ({} skipped), converged: {}, simulated time {:.1}",
        s.algo, s.model, s.iterations, s.iterations_skipped, s.converged, s.t_total
    );
    Ok(if out.converged { 0 } else { 2 })
}

/// Fits per-node costs from two short probe runs, then either moves data
/// (data mode) or rescales each node's per-unit compute cost (capacity
/// mode).
fn apply_balance(
    mode: Balance,
    graph: &accelplug::Graph,
    program: &std::sync::Arc<dyn accelplug::VertexProgram>,
    cfg: &RunConfig,
    engine: &mut EngineConfig,
) -> Result<()> {
    let m = cfg.partitions;
    let per_node = (graph.edges().len() / (8 * m)).max(1);
    let blocks = [per_node, per_node * 4];
    let fits = calibrate_nodes(graph, program.clone(), cfg.model, engine, blocks, 3)
        .context("calibrating node costs")?;
    let costs: Vec<f64> = fits.iter().map(|f| f.c).collect();
    if costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        bail!("calibration produced unusable costs {costs:?}");
    }
    let total = graph.vertex_count() as u64;
    match mode {
        Balance::Data => {
            let sizes = balance_data(&BalanceProblem { total, costs: costs.clone() })?;
            eprintln!("balance data: fitted costs {costs:?}, partition sizes {sizes:?}");
            engine.partition_sizes = Some(sizes.into_iter().map(|x| x as usize).collect());
        }
        Balance::Capacity => {
            let sizes = even_split(total, m);
            let f = costs.iter().map(|c| 1.0 / c).fold(0.0, f64::max);
            let factors = balance_capacity(&CapacityProblem {
                sizes: sizes.clone(),
                f,
                costs: Some(costs.clone()),
            })?;
            let base = cfg.daemon_profile.profile();
            engine.profiles = costs
                .iter()
                .zip(&factors)
                .map(|(c, x)| {
                    let mut p = base;
                    if *x > 0.0 {
                        p.per_unit_cost *= (1.0 / x) / c;
                    }
                    p
                })
                .collect();
            eprintln!("balance capacity: fitted costs {costs:?}, capacity factors {factors:?}");
            // Whole-daemon equivalent: each daemon currently supplies
            // 1/(c·daemons_per_node) of capacity.
            let k = cfg.daemons_per_node as f64;
            for (j, (c, x)) in costs.iter().zip(&factors).enumerate() {
                let daemons = (x * c * k - 1e-9).ceil().max(1.0);
                let overshoot = daemons / (c * k) - x;
                eprintln!("  node {j}: {daemons} daemons would cover factor {x:.4} (overshoot {overshoot:.4})");
            }
        }
        Balance::None => {}
    }
    Ok(())
}

fn cmd_plan_block(a: &PlanBlockArgs) -> Result<()> {
    let model = PipelineCostModel::new(a.k1, a.k2, a.k3, a.a, a.d)?;
    let p = plan(&model)?;
    let (s_bf, t_bf) = sweep(&model);
    match (p.method, p.b_opt) {
        (PlanMethod::ClosedForm, Some(b)) => println!("closed_form b_opt={b} s={} b={} T={}", p.s, p.b, p.t),
        _ => println!(
            "closed_form none: {} (sweep chose s={} b={} T={})",
            Error::NoInteriorOptimum,
            p.s,
            p.b,
            p.t
        ),
    }
    println!("brute_force s={s_bf} b={} T={t_bf}", a.d.div_ceil(s_bf));
    println!("relative_gap={}", (p.t - t_bf) / t_bf);
    Ok(())
}

fn cmd_plan_balance(a: &PlanBalanceArgs) -> Result<()> {
    match a.mode.as_str() {
        "data" => {
            let total = a.total.context("data mode needs --total")?;
            if a.costs.is_empty() {
                bail!("data mode needs --costs");
            }
            let problem = BalanceProblem { total, costs: a.costs.clone() };
            let sizes = balance_data(&problem)?;
            let even = even_split(total, a.costs.len());
            println!("sizes={}", join(&sizes));
            println!("balanced_makespan={}", makespan(&sizes, &a.costs)?);
            println!("even_makespan={}", makespan(&even, &a.costs)?);
            println!("optimum_makespan={}", optimal_makespan(&problem)?);
        }
        "capacity" => {
            let f = a.f.context("capacity mode needs --f")?;
            if a.sizes.is_empty() {
                bail!("capacity mode needs --sizes");
            }
            let costs = (!a.costs.is_empty()).then(|| a.costs.clone());
            let problem = CapacityProblem { sizes: a.sizes.clone(), f, costs: costs.clone() };
            let factors = balance_capacity(&problem)?;
            let balanced = a
                .sizes
                .iter()
                .zip(&factors)
                .filter(|(&d, _)| d > 0)
                .map(|(&d, &x)| d as f64 / x)
                .fold(0.0, f64::max);
            let unbalanced = match &costs {
                Some(c) => makespan(&a.sizes, c)?,
                None => a.sizes.iter().map(|&d| d as f64 / f).fold(0.0, f64::max),
            };
            let d_star = *a.sizes.iter().max().expect("non-empty");
            println!("factors={}", join(&factors));
            println!("balanced_makespan={balanced}");
            println!("unbalanced_makespan={unbalanced}");
            println!("optimum_makespan={}", d_star as f64 / f);
        }
        other => bail!("unknown balance mode {other:?} (data or capacity)"),
    }
    Ok(())
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn cmd_gen_graph(a: &GenGraphArgs) -> Result<()> {
    let kind = match a.kind.parse::<GraphKind>()? {
        GraphKind::Components { .. } => GraphKind::Components { k: a.k, p: a.p },
        GraphKind::Random { .. } => GraphKind::Random { p: a.p },
        k => k,
    };
    let g = generate(kind, a.n, a.seed)?;
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(f);
    write_edge_list(&g, &mut w)?;
    w.flush()?;
    Ok(())
}
