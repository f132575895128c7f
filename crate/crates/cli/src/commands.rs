use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use pcirc_core::compiler::{cache, CompileConfig, CompiledCircuit};
use pcirc_core::graph::{parse_model, write_model};
use pcirc_core::runtime::log_likelihood_metrics;
use pcirc_core::structures::{self, StructureConfig};
use pcirc_core::train::{evaluate, train as run_em, TrainConfig};
use pcirc_core::{bench as harness, compile as compile_graph, data, oracle, Batch, CircuitGraph, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{CompileArgs, MetricArg};

/// Maps an error chain to the process exit code: 2 for invalid models and
/// configurations, 3 for numeric failures, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Numeric(_)) => 3,
        Some(
            Error::Invalid(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::Cycle(_)
            | Error::NoChildren(_)
            | Error::UnknownNode(_)
            | Error::VarOutOfRange { .. }
            | Error::ArityMismatch { .. }
            | Error::InvalidDistribution(_),
        ) => 2,
        _ => 1,
    }
}

fn read_model(path: &Path) -> Result<CircuitGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let g = parse_model(&text).with_context(|| format!("parsing {}", path.display()))?;
    g.validate().into_result().with_context(|| format!("validating {}", path.display()))?;
    Ok(g)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn compile_config(args: &CompileArgs) -> Result<CompileConfig> {
    let cfg = CompileConfig { max_groups: args.groups, tol: args.tol, ..CompileConfig::with_block_size(args.block_size) };
    cfg.validate()?;
    Ok(cfg)
}

/// Compiles `g`, reusing the cache named in `args` when it matches.
fn compiled(g: &CircuitGraph, args: &CompileArgs) -> Result<CompiledCircuit> {
    let cfg = compile_config(args)?;
    if let Some(path) = &args.cache {
        if let Ok(bytes) = fs::read(path) {
            match cache::load_for(&bytes, g, &cfg) {
                Ok(c) => {
                    info!("loaded compiled cache {}", path.display());
                    return Ok(c);
                }
                Err(e) => warn!("ignoring cache {}: {e}", path.display()),
            }
        }
        let c = compile_graph(g, &cfg)?;
        cache::save(&c, path).with_context(|| format!("writing cache {}", path.display()))?;
        return Ok(c);
    }
    Ok(compile_graph(g, &cfg)?)
}

fn load_data(path: &Path, g: &CircuitGraph) -> Result<Batch> {
    let d = data::load(path).with_context(|| format!("loading {}", path.display()))?;
    d.check_categories(&oracle::category_counts(g)).with_context(|| format!("checking {}", path.display()))?;
    Ok(d.samples)
}

pub fn build(config: &Path, output: &Path) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = StructureConfig::parse(&text).with_context(|| format!("parsing {}", config.display()))?;
    let g = structures::build(&cfg)?;
    g.validate().into_result()?;
    write_file(output, write_model(&g))?;
    println!("nodes={} edges={} params={}", g.num_nodes(), g.num_edges(), g.num_param_slots());
    Ok(())
}

pub fn compile(model: &Path, args: &CompileArgs, output: Option<&Path>) -> Result<()> {
    let g = read_model(model)?;
    let c = compile_graph(&g, &compile_config(args)?)?;
    print!("{}", c.describe());
    if let Some(path) = output.or(args.cache.as_deref()) {
        cache::save(&c, path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn train(model: &Path, data_path: &Path, output: &Path, cfg: &TrainConfig, args: &CompileArgs) -> Result<()> {
    let mut g = read_model(model)?;
    let mut c = compiled(&g, args)?;
    let data = load_data(data_path, &g)?;
    let out = run_em(&c, &data, cfg)?;
    for h in &out.history {
        println!("epoch={} mean_ll={:.6} secs={:.3}", h.epoch, h.mean_ll, h.elapsed.as_secs_f64());
    }
    c.params.set_key_values(&out.key_values);
    c.params.write_to_graph(&mut g);
    write_file(output, write_model(&g))
}

pub fn eval(model: &Path, data_path: &Path, metric: MetricArg, batch_size: usize, args: &CompileArgs) -> Result<()> {
    let g = read_model(model)?;
    let c = compiled(&g, args)?;
    let data = load_data(data_path, &g)?;
    let lls = evaluate(&c, &c.params.key_values, &data, batch_size)?;
    let m = log_likelihood_metrics(&lls, data.num_vars());
    let (name, value) = match metric {
        MetricArg::Nll => ("nll", m.nll),
        MetricArg::Bpd => ("bpd", m.bpd),
        MetricArg::Ppl => ("ppl", m.perplexity),
    };
    if !value.is_finite() {
        return Err(Error::Numeric(format!("{name} is {value}; some sample has zero probability")).into());
    }
    println!("metric={name} value={value:.6}");
    Ok(())
}

pub fn sample(model: &Path, n: usize, seed: u64, output: &Path) -> Result<()> {
    let g = read_model(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Batch::new(g.num_vars() as usize);
    for _ in 0..n {
        let x: Vec<Option<u32>> = oracle::sample(&g, &mut rng).into_iter().map(Some).collect();
        batch.push(&x);
    }
    data::save(&batch, output).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

pub struct BenchOpts {
    pub batch_size: usize,
    pub block_sizes: Vec<usize>,
    pub repeats: usize,
    pub samples: usize,
    pub groups: usize,
    pub tol: f64,
}

pub fn bench(model: &Path, data_path: Option<&Path>, opts: &BenchOpts, output: Option<&Path>) -> Result<()> {
    let g = read_model(model)?;
    let data = match data_path {
        Some(p) => load_data(p, &g)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut b = Batch::new(g.num_vars() as usize);
            for _ in 0..opts.samples {
                let x: Vec<Option<u32>> = oracle::sample(&g, &mut rng).into_iter().map(Some).collect();
                b.push(&x);
            }
            b
        }
    };
    if opts.block_sizes.contains(&0) {
        bail!(Error::Config("block sizes must be positive".into()));
    }
    let base = CompileConfig { max_groups: opts.groups, tol: opts.tol, ..CompileConfig::default() };
    let report = harness::sweep_block_sizes(&g, &base, &data, opts.batch_size, &opts.block_sizes, opts.repeats)?;
    match output {
        Some(p) => write_file(p, report.to_tsv())?,
        None => print!("{}", report.to_tsv()),
    }
    Ok(())
}
