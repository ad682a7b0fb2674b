use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use leafann::adaptive::{AdaptiveParams, TrainParams};
use leafann::bench::{run_bench, BenchReport};
use leafann::dataset::{brute_force_topk, load_vectors_auto, save_ivecs, GroundTruth, Metric, VectorSet};
use leafann::filtration::{compute_dim_stats, select_dims, DEFAULT_FILTER_THRESHOLD};
use leafann::leafgraph::{HybridPolicy, DEFAULT_DEGREE};
use leafann::pq::ResidualMode;
use leafann::prunelab::{
    measure_prune_stats, reports_csv, AnnulusData, HullIndex, Lab, LabStrategy, SignIndex, StripsIndex,
    DEFAULT_HULL_RANK, DEFAULT_HYPERPLANES, DEFAULT_STRIPS,
};
use leafann::{build_index, load_index, save_index, Index, IndexParams, SearchRequest};

#[derive(Parser)]
#[command(name = "leafann", version, about = "IVF + 4-bit PQ vector search tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact top-k ground truth (ids as ivecs, distances as fvecs).
    Gt(GtArgs),
    /// Builds an index and writes it to disk.
    Build(BuildArgs),
    /// Trains the adaptive predictors and stores them in the index.
    Train(TrainArgs),
    /// Searches a query file and writes the result ids.
    Search(SearchArgs),
    /// Single-query latency / throughput / recall benchmark.
    Bench(BenchArgs),
    /// Reports which dimensions the filtration step would drop.
    Dims(DimsArgs),
    /// Measures the experimental within-cluster filters.
    Lab(LabArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    L2,
    Angular,
    Ip,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::L2 => Metric::L2,
            MetricArg::Angular => Metric::Angular,
            MetricArg::Ip => Metric::InnerProduct,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResidualArg {
    Raw,
    Normalized,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Disabled,
    Sign,
    Strips,
    Hull,
    Annulus,
}

#[derive(Args)]
struct GtArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, value_enum, default_value = "l2")]
    metric: MetricArg,
    /// Id file; distances go next to it with an `.fvecs` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long, value_enum, default_value = "l2")]
    metric: MetricArg,
    /// Output index file.
    #[arg(long)]
    index: PathBuf,
    /// Cluster count (default: round(sqrt(n))).
    #[arg(long)]
    clusters: Option<usize>,
    /// Enables dimension filtration at this threshold.
    #[arg(long)]
    filter_threshold: Option<f32>,
    #[arg(long, value_enum, default_value = "off")]
    graph: Toggle,
    #[arg(long, default_value_t = DEFAULT_DEGREE)]
    graph_degree: usize,
    #[arg(long, value_enum, default_value = "raw")]
    residual: ResidualArg,
    /// Trains the PQ codebooks on at most this many residuals.
    #[arg(long)]
    pq_sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    index: PathBuf,
    /// Training queries (e.g. a learn set disjoint from the test queries).
    #[arg(long)]
    queries: PathBuf,
    /// Ground truth ids for the training queries; computed when omitted.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    nprob_min: usize,
    #[arg(long, default_value_t = 64)]
    nprob_max: usize,
    #[arg(long, default_value_t = 50)]
    reorder_min: usize,
    #[arg(long, default_value_t = 200)]
    reorder_max: usize,
    /// Prune threshold stored with the models.
    #[arg(long)]
    theta: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the trained index (default: overwrite `--index`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryFlags {
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 32, conflicts_with = "exhaustive")]
    nprob: usize,
    #[arg(long, default_value_t = 100, conflicts_with = "exhaustive")]
    reorder: usize,
    /// Probe every cluster and rerank every point.
    #[arg(long)]
    exhaustive: bool,
    #[arg(long, value_enum, default_value = "off", conflicts_with = "exhaustive")]
    adaptive: Toggle,
    #[arg(long, value_enum, default_value = "off", conflicts_with = "exhaustive")]
    graph: Toggle,
    /// Cluster prune threshold (requires a trained prune model).
    #[arg(long, conflicts_with = "exhaustive")]
    theta: Option<f32>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    flags: QueryFlags,
    /// Ground truth ids; when given, recall is reported.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Result ids (ivecs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[command(flatten)]
    flags: QueryFlags,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report (appended, header written for a new file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DimsArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FILTER_THRESHOLD)]
    filter_threshold: f32,
    /// Per-dimension CSV (index, fraction of zero or near-mean components, kept).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LabArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Hamming threshold sweep `start:end[:step]` (inclusive) for `sign`.
    #[arg(long, default_value = "8:24:2")]
    thresholds: String,
    #[arg(long, default_value_t = DEFAULT_HYPERPLANES)]
    hyperplanes: usize,
    #[arg(long, default_value_t = DEFAULT_STRIPS)]
    strips: usize,
    #[arg(long, default_value_t = DEFAULT_HULL_RANK)]
    hull_rank: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    nprob: usize,
    #[arg(long, default_value_t = 100)]
    reorder: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sweep CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gt(a) => cmd_gt(a),
        Command::Build(a) => cmd_build(a),
        Command::Train(a) => cmd_train(a),
        Command::Search(a) => cmd_search(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Dims(a) => cmd_dims(a),
        Command::Lab(a) => cmd_lab(a),
    }
}

fn load(path: &Path) -> Result<VectorSet> {
    load_vectors_auto(path).with_context(|| format!("reading {}", path.display()))
}

fn open_index(path: &Path) -> Result<Index> {
    load_index(path).with_context(|| format!("loading index {}", path.display()))
}

fn distance_path(ids: &Path) -> PathBuf {
    ids.with_extension("fvecs")
}

fn load_gt(path: &Path) -> Result<GroundTruth> {
    let dist = distance_path(path);
    let dist = (dist != path && dist.exists()).then_some(dist);
    GroundTruth::load(path, dist.as_deref()).with_context(|| format!("reading ground truth {}", path.display()))
}

fn cmd_gt(a: GtArgs) -> Result<()> {
    let base = load(&a.base)?.with_metric(a.metric.into());
    let queries = load(&a.queries)?;
    if queries.dim() != base.dim() {
        bail!(
            "query dimension {} does not match base dimension {}",
            queries.dim(),
            base.dim()
        );
    }
    let t = Instant::now();
    let gt = brute_force_topk(&base, &queries, a.k)?;
    let dist = distance_path(&a.out);
    if dist == a.out {
        bail!("--out must not already end in .fvecs");
    }
    gt.save(&a.out, &dist)?;
    println!(
        "ground truth: {} queries, k={} in {:.2}s -> {}, {}",
        gt.len(),
        a.k,
        t.elapsed().as_secs_f64(),
        a.out.display(),
        dist.display()
    );
    Ok(())
}

fn cmd_build(a: BuildArgs) -> Result<()> {
    let base = load(&a.base)?;
    let params = IndexParams {
        num_clusters: a.clusters,
        residual_mode: match a.residual {
            ResidualArg::Raw => ResidualMode::RawMean,
            ResidualArg::Normalized => ResidualMode::Normalized,
            ResidualArg::None => ResidualMode::None,
        },
        pq_train_sample: a.pq_sample,
        filter_threshold: a.filter_threshold,
        graph_degree: (a.graph == Toggle::On).then_some(a.graph_degree),
        seed: a.seed,
        ..IndexParams::new(a.metric.into())
    };
    let t = Instant::now();
    let mut index = build_index(&base, &params)?;
    index.ensure_stats()?;
    save_index(&index, &a.index)?;
    println!(
        "built {} points, {} dims ({} working), {} clusters in {:.2}s -> {}",
        index.len(),
        index.dim(),
        index.working_dim(),
        index.num_clusters(),
        t.elapsed().as_secs_f64(),
        a.index.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut index = open_index(&a.index)?;
    let queries = load(&a.queries)?;
    let truth = match &a.gt {
        Some(p) => load_gt(p)?,
        None => brute_force_topk(index.vectors(), &queries, a.k)?,
    };
    let mut adaptive = AdaptiveParams::new(a.nprob_min, a.nprob_max, a.reorder_min, a.reorder_max);
    if let Some(t) = a.theta {
        adaptive.theta = t;
    }
    let mut tp = TrainParams::new(a.k, adaptive);
    tp.seed = a.seed;
    let t = Instant::now();
    index.train(&queries, &truth, &tp)?;
    let out = a.out.as_ref().unwrap_or(&a.index);
    save_index(&index, out)?;
    let m = index.models().expect("models were just trained");
    println!(
        "trained on {} queries in {:.2}s (nprob model: {}, reorder model: {}, prune model: {}) -> {}",
        queries.len(),
        t.elapsed().as_secs_f64(),
        m.nprob.is_some(),
        m.reorder.is_some(),
        m.prune.is_some(),
        out.display()
    );
    Ok(())
}

fn request(index: &mut Index, f: &QueryFlags) -> Result<SearchRequest> {
    if f.exhaustive {
        return Ok(SearchRequest::exhaustive(index, f.k));
    }
    let mut req = SearchRequest::new(f.k, f.nprob.min(index.num_clusters()), f.reorder);
    req.adaptive = f.adaptive == Toggle::On;
    req.prune_theta = f.theta;
    if (req.adaptive || f.theta.is_some()) && index.models().is_none() {
        bail!("--adaptive on and --theta need an index trained with `leafann train`");
    }
    if f.graph == Toggle::On {
        index.ensure_graphs(index.params().graph_degree.unwrap_or(DEFAULT_DEGREE))?;
        req.hybrid = Some(HybridPolicy::default());
    }
    Ok(req)
}

fn describe(f: &QueryFlags) -> String {
    if f.exhaustive {
        return format!("k={} exhaustive", f.k);
    }
    let on = |t: Toggle| if t == Toggle::On { "on" } else { "off" };
    format!(
        "k={} nprob={} reorder={} adaptive={} graph={} theta={}",
        f.k,
        f.nprob,
        f.reorder,
        on(f.adaptive),
        on(f.graph),
        f.theta.map_or("none".to_string(), |t| t.to_string())
    )
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let mut index = open_index(&a.index)?;
    let queries = load(&a.queries)?;
    let req = request(&mut index, &a.flags)?;
    let t = Instant::now();
    let results = index.search_batch(&queries, &req)?;
    let secs = t.elapsed().as_secs_f64();
    println!("{} queries in {:.3}s ({})", results.len(), secs, describe(&a.flags));
    if let Some(p) = &a.gt {
        let truth = load_gt(p)?;
        let eval = leafann::bench::Evaluation::from_results(&results, &truth, req.k);
        println!("recall@{} {:.4}  mean nprob {:.2}", req.k, eval.recall, eval.mean_nprob);
    }
    if let Some(out) = &a.out {
        let rows: Vec<Vec<i32>> = results
            .iter()
            .map(|r| r.ids().iter().map(|&i| i as i32).collect())
            .collect();
        save_ivecs(out, &rows)?;
        println!("ids -> {}", out.display());
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut index = open_index(&a.index)?;
    let queries = load(&a.queries)?;
    let truth = load_gt(&a.gt)?;
    let req = request(&mut index, &a.flags)?;
    let (report, _) = run_bench(&index, &queries, &truth, &req, a.workers, a.seed, &describe(&a.flags))?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        let mut text = if out.exists() {
            fs::read_to_string(out)?
        } else {
            format!("{}\n", BenchReport::CSV_HEADER)
        };
        text.push_str(&report.csv_row());
        text.push('\n');
        fs::write(out, text)?;
    }
    Ok(())
}

fn cmd_dims(a: DimsArgs) -> Result<()> {
    let base = load(&a.base)?;
    let fractions = compute_dim_stats(&base)?;
    let filter = select_dims(&fractions, a.filter_threshold)?;
    println!(
        "threshold {}: keeps {} of {} dimensions, prunes {}",
        a.filter_threshold,
        filter.d_kept(),
        filter.d_original(),
        filter.pruned_count()
    );
    if let Some(out) = &a.out {
        let mut s = String::from("dim,near_fraction,kept\n");
        for (i, (f, k)) in fractions.iter().zip(filter.mask()).enumerate() {
            s.push_str(&format!("{i},{f:.6},{}\n", u8::from(*k)));
        }
        fs::write(out, s)?;
    }
    Ok(())
}

/// Parses `start:end[:step]` into an inclusive list.
fn parse_range(s: &str) -> Result<Vec<u32>> {
    let parts: Vec<u32> = s
        .split(':')
        .map(|p| p.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad range {s:?}"))?;
    let (start, end, step) = match parts[..] {
        [a] => (a, a, 1),
        [a, b] => (a, b, 1),
        [a, b, c] => (a, b, c),
        _ => bail!("bad range {s:?}: expected start:end[:step]"),
    };
    if step == 0 || start > end {
        bail!("bad range {s:?}");
    }
    Ok((start..=end).step_by(step as usize).collect())
}

fn cmd_lab(a: LabArgs) -> Result<()> {
    let index = open_index(&a.index)?;
    let queries = load(&a.queries)?;
    let truth = load_gt(&a.gt)?;
    let req = SearchRequest::new(a.k, a.nprob.min(index.num_clusters()), a.reorder);
    let mut lab = Lab::default();
    let mut strategies = vec![LabStrategy::Disabled];
    match a.strategy {
        StrategyArg::Disabled => {}
        StrategyArg::Sign => {
            lab.sign = Some(SignIndex::for_index(&index, a.hyperplanes, a.seed)?);
            strategies.extend(
                parse_range(&a.thresholds)?
                    .into_iter()
                    .map(|t| LabStrategy::Sign { threshold: t }),
            );
        }
        StrategyArg::Strips => {
            lab.strips = Some(StripsIndex::for_index(&index, a.strips, a.seed)?);
            strategies.push(LabStrategy::Strips);
        }
        StrategyArg::Hull => {
            let hull = HullIndex::for_index(&index, a.hull_rank, a.seed)?;
            println!("hull non-vertex fraction {:.4}", hull.non_vertex_fraction());
            lab.hull = Some(hull);
            strategies.push(LabStrategy::Hull);
        }
        StrategyArg::Annulus => {
            lab.annulus = Some(AnnulusData::for_index(&index)?);
            strategies.push(LabStrategy::Annulus);
        }
    }
    let mut reports = Vec::with_capacity(strategies.len());
    for s in strategies {
        let r = measure_prune_stats(&index, &lab, s, &queries, &truth, &req)?;
        println!("{r}");
        reports.push(r);
    }
    if let Some(out) = &a.out {
        fs::write(out, reports_csv(&reports))?;
        println!("report -> {}", out.display());
    }
    Ok(())
}
