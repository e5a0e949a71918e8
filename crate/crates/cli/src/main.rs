use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use curvecov::dataio::{load_csv, synth_generate, GraphSnapshots, SynthConfig};
use curvecov::forecaster::{fit, Ablation, FitData, ModelParams, TrainConfig};
use curvecov::graph::WeightedGraph;
use curvecov::metrics::evaluate;
use curvecov::pipeline::{rewire_report, rolling_evaluation, ForecastPlan, Prepared};
use curvecov::rngs::substream_seed;
use curvecov::sampler::{
    init_tracker, rollout, ForecastEnsemble, Noise, RolloutConfig, DEFAULT_RHO, ENSEMBLE_MAGIC,
};

#[derive(Parser)]
#[command(name = "curvecov", version, about = "Curvature-aware probabilistic spatio-temporal forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, its graph and ground truth.
    Gen(GenArgs),
    /// Compare graph connectivity before and after curvature reweighting.
    RewireReport(RewireArgs),
    /// Train a model and write a checkpoint plus loss trace.
    Train(TrainArgs),
    /// Sample a forecast ensemble from a checkpoint.
    Forecast(ForecastArgs),
    /// Score an ensemble, or a checkpoint over rolling test origins.
    Eval(EvalArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Output directory for data.csv, graph.csv and truth.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.7)]
    ar_coef: f64,
    /// Diagonal precision `a` of the innovation precision `aI + bL`.
    #[arg(long, default_value_t = 1.0)]
    precision_diag: f64,
    /// Laplacian weight `b` of the innovation precision `aI + bL`.
    #[arg(long, default_value_t = 2.0)]
    laplacian_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    seasonal_amplitude: f64,
    #[arg(long, default_value_t = 24.0)]
    seasonal_period: f64,
    #[arg(long, default_value_t = 0.1)]
    obs_noise: f64,
}

#[derive(Args, Serialize)]
struct RewireArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    kappa0: f64,
    #[arg(long, default_value_t = 5.0)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Cut to evaluate, as comma-separated node ids; repeatable.
    #[arg(long = "cut", value_delimiter = None)]
    cuts: Vec<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AblateFlag {
    None,
    NoRewiring,
    NoVolatility,
    ReweightOnly,
}

impl From<AblateFlag> for Ablation {
    fn from(a: AblateFlag) -> Self {
        match a {
            AblateFlag::None => Ablation::None,
            AblateFlag::NoRewiring => Ablation::NoRewiring,
            AblateFlag::NoVolatility => Ablation::NoVolatility,
            AblateFlag::ReweightOnly => Ablation::ReweightOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SnapshotFlag {
    /// The same graph at every step.
    Static,
    /// Per-step multiplicative weight jitter in [0.8, 1.2].
    Perturbed,
}

#[derive(Args, Serialize)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, value_enum, default_value_t = SnapshotFlag::Perturbed)]
    snapshots: SnapshotFlag,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Checkpoint path; the loss trace goes next to it as `<stem>.trace.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    rank: usize,
    #[arg(long, default_value_t = 12)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    mixtures: usize,
    #[arg(long, default_value_t = 12)]
    lags: usize,
    #[arg(long, default_value_t = 40)]
    hidden: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 10_000)]
    max_steps: usize,
    /// Windows per gradient step.
    #[arg(long, default_value_t = 20)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    /// Cap on validation windows per evaluation (0 = all).
    #[arg(long, default_value_t = 0)]
    max_val_windows: usize,
    #[arg(long, value_enum, default_value_t = AblateFlag::None)]
    ablate: AblateFlag,
    /// Train the diagonal-only head instead of the structured covariance.
    #[arg(long)]
    diagonal: bool,
}

#[derive(Args, Serialize)]
struct ForecastArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Ensemble path; `.bin` selects the binary layout, anything else CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// First forecast step; defaults to the start of the test split.
    #[arg(long)]
    origin: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RHO)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = AblateFlag::None)]
    ablate: AblateFlag,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Ensemble to score (CSV or binary).
    #[arg(long)]
    forecast: Option<PathBuf>,
    /// First forecast step of a CSV ensemble.
    #[arg(long)]
    origin: Option<usize>,
    /// Checkpoint for rolling-origin evaluation over the test split.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SnapshotFlag::Perturbed)]
    snapshots: SnapshotFlag,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 12)]
    stride: usize,
    #[arg(long, default_value_t = DEFAULT_RHO)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = AblateFlag::None)]
    ablate: AblateFlag,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

/// Error tagged with the pipeline stage that produced it.
struct StageError {
    stage: &'static str,
    source: curvecov::Error,
}

type CmdResult<T> = std::result::Result<T, StageError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> CmdResult<T>;
}

impl<T, E: Into<curvecov::Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> CmdResult<T> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

fn echo_config<T: Serialize>(command: &str, config: &T) {
    let json = serde_json::to_string(config).unwrap_or_else(|e| format!("\"<unserialisable: {e}>\""));
    println!("{command} config: {json}");
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let f = File::create(path).stage("write output")?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).stage("write output")?;
    std::io::Write::write_all(&mut w, b"\n").stage("write output")?;
    Ok(())
}

fn snapshots(graph: WeightedGraph, flag: SnapshotFlag, seed: u64) -> GraphSnapshots {
    match flag {
        SnapshotFlag::Static => GraphSnapshots::Static(graph),
        SnapshotFlag::Perturbed => GraphSnapshots::perturbed(graph, seed),
    }
}

fn load_prepared(args: &DataArgs) -> CmdResult<Prepared> {
    let ds = load_csv(&args.data).stage("load data")?;
    let graph = WeightedGraph::load_edge_list(&args.graph, Some(ds.nodes())).stage("load graph")?;
    let graphs = snapshots(graph, args.snapshots, args.seed);
    Prepared::new(ds.values, graphs).stage("split data")
}

#[derive(Serialize)]
struct Truth<'a> {
    config: &'a SynthConfig,
    coords: &'a [[f64; 2]],
    phases: &'a [f64],
    noise_covariance: Vec<Vec<f64>>,
}

fn cmd_gen(args: &GenArgs) -> CmdResult<()> {
    echo_config("gen", args);
    let config = SynthConfig {
        nodes: args.nodes,
        steps: args.steps,
        seed: args.seed,
        ar_coef: args.ar_coef,
        precision_diag: args.precision_diag,
        laplacian_weight: args.laplacian_weight,
        seasonal_amplitude: args.seasonal_amplitude,
        seasonal_period: args.seasonal_period,
        obs_noise: args.obs_noise,
        ..SynthConfig::default()
    };
    let out = synth_generate(&config).stage("generate")?;
    std::fs::create_dir_all(&args.out).stage("write output")?;
    out.dataset.save_csv(&args.out.join("data.csv")).stage("write output")?;
    out.graph.save_edge_list(&args.out.join("graph.csv")).stage("write output")?;
    let cov = &out.noise_covariance;
    let truth = Truth {
        config: &config,
        coords: &out.coords,
        phases: &out.phases,
        noise_covariance: (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect(),
    };
    write_json(&args.out.join("truth.json"), &truth)?;
    println!(
        "wrote {} steps x {} nodes, {} edges to {}",
        config.steps,
        config.nodes,
        out.graph.edges().len(),
        args.out.display()
    );
    Ok(())
}

fn parse_cut(s: &str) -> CmdResult<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| StageError {
            stage: "parse cut",
            source: curvecov::Error::InvalidParameter(format!("cut {s:?}: {e}")),
        })
}

fn cmd_rewire_report(args: &RewireArgs) -> CmdResult<()> {
    echo_config("rewire-report", args);
    let graph = WeightedGraph::load_edge_list(&args.graph, None).stage("load graph")?;
    let cuts = if args.cuts.is_empty() {
        None
    } else {
        Some(args.cuts.iter().map(|c| parse_cut(c)).collect::<CmdResult<Vec<_>>>()?)
    };
    let report = rewire_report(&graph, args.kappa0, args.tau, args.lambda, cuts, args.seed)
        .stage("rewire report")?;
    print!("{}", report.table());
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).stage("write output")?),
    }
    Ok(())
}

fn trace_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.trace.csv"))
}

fn cmd_train(args: &TrainArgs) -> CmdResult<()> {
    let config = TrainConfig {
        learning_rate: args.learning_rate,
        max_epochs: args.epochs,
        max_steps: args.max_steps,
        window: args.window,
        rank: args.rank,
        mixtures: args.mixtures,
        lags: args.lags,
        hidden: args.hidden,
        batch_windows: args.batch,
        seed: args.data.seed,
        eval_every: args.eval_every,
        max_val_windows: args.max_val_windows,
        head: if args.diagonal {
            curvecov::forecaster::CovarianceHead::DiagonalOnly
        } else {
            curvecov::forecaster::CovarianceHead::Structured
        },
        ablation: args.ablate.into(),
        ..TrainConfig::default()
    };
    echo_config("train", &serde_json::json!({ "args": args, "resolved": &config }));
    let prepared = load_prepared(&args.data)?;
    let data = FitData {
        values: &prepared.values,
        train_end: prepared.train_end,
        val_end: prepared.val_end,
        graphs: &prepared.graphs,
    };
    let result = fit(data, &config).stage("train")?;
    result.params.save(&args.out).stage("write checkpoint")?;
    let trace = trace_path(&args.out);
    let f = File::create(&trace).stage("write trace")?;
    curvecov::forecaster::write_trace_csv(&result.trace, BufWriter::new(f)).stage("write trace")?;
    println!(
        "trained {} steps; best validation NLL {:.6}; checkpoint {}; trace {}",
        result.steps,
        result.best_val_nll,
        args.out.display(),
        trace.display()
    );
    Ok(())
}

fn cmd_forecast(args: &ForecastArgs) -> CmdResult<()> {
    echo_config("forecast", args);
    let prepared = load_prepared(&args.data)?;
    let params = ModelParams::load(&args.checkpoint).stage("load checkpoint")?;
    let t = prepared.values.nrows();
    let origin = args.origin.unwrap_or(prepared.val_end);
    if origin > t {
        return Err(StageError {
            stage: "forecast",
            source: curvecov::Error::InvalidParameter(format!("origin {origin} beyond the {t} data rows")),
        });
    }
    let tracker = init_tracker(&params, &prepared.values, prepared.train_end.min(origin), args.rho)
        .stage("volatility tracker")?;
    let lo = prepared.train_end.min(origin).saturating_sub(params.dims.lags + params.dims.window);
    let history = prepared.values.rows(lo, origin - lo).into_owned();
    let ablation: Ablation = args.ablate.into();
    let cfg = RolloutConfig {
        horizon: args.horizon,
        samples: args.samples,
        volatility_scaling: ablation.volatility_scaling(),
    };
    let noise = Noise::Seeded(substream_seed(args.data.seed, "forecast"));
    let ens = rollout(&params, &history, origin, &prepared.graphs, &tracker, &cfg, noise).stage("forecast")?;
    let f = File::create(&args.out).stage("write ensemble")?;
    if args.out.extension().is_some_and(|e| e == "bin") {
        ens.write_binary(BufWriter::new(f)).stage("write ensemble")?;
    } else {
        ens.write_csv(BufWriter::new(f)).stage("write ensemble")?;
    }
    println!(
        "wrote {} samples x {} steps x {} nodes from origin {origin} to {}",
        ens.num_samples(),
        ens.horizon(),
        ens.nodes(),
        args.out.display()
    );
    Ok(())
}

fn read_ensemble(path: &Path, origin: Option<usize>) -> CmdResult<ForecastEnsemble> {
    let mut head = [0u8; 8];
    let is_binary = File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| &head == ENSEMBLE_MAGIC)
        .unwrap_or(false);
    let f = BufReader::new(File::open(path).stage("load ensemble")?);
    if is_binary {
        let ens = ForecastEnsemble::read_binary(f).stage("load ensemble")?;
        match origin {
            Some(o) if o as u64 != ens.produced_at() => Err(StageError {
                stage: "load ensemble",
                source: curvecov::Error::InvalidParameter(format!(
                    "--origin {o} disagrees with the ensemble header ({})",
                    ens.produced_at()
                )),
            }),
            _ => Ok(ens),
        }
    } else {
        let origin = origin.ok_or(StageError {
            stage: "load ensemble",
            source: curvecov::Error::InvalidParameter("CSV ensembles need --origin".into()),
        })?;
        ForecastEnsemble::read_csv(f, origin as u64).stage("load ensemble")
    }
}

fn cmd_eval(args: &EvalArgs) -> CmdResult<()> {
    echo_config("eval", args);
    let ds = load_csv(&args.data).stage("load data")?;
    let report = match (&args.forecast, &args.checkpoint) {
        (Some(path), None) => {
            let ens = read_ensemble(path, args.origin)?;
            let origin = ens.produced_at() as usize;
            if origin + ens.horizon() > ds.steps() || ens.nodes() != ds.nodes() {
                return Err(StageError {
                    stage: "eval",
                    source: curvecov::Error::ShapeMismatch(format!(
                        "ensemble covers steps {origin}..{} over {} nodes; data has {} steps and {} nodes",
                        origin + ens.horizon(),
                        ens.nodes(),
                        ds.steps(),
                        ds.nodes()
                    )),
                });
            }
            let actuals = ds.values.rows(origin, ens.horizon()).into_owned();
            evaluate(&ens, &actuals).stage("eval")?
        }
        (None, Some(ckpt)) => {
            let graph_path = args.graph.as_ref().ok_or(StageError {
                stage: "eval",
                source: curvecov::Error::InvalidParameter("rolling evaluation needs --graph".into()),
            })?;
            let graph = WeightedGraph::load_edge_list(graph_path, Some(ds.nodes())).stage("load graph")?;
            let prepared = Prepared::new(ds.values.clone(), snapshots(graph, args.snapshots, args.seed))
                .stage("split data")?;
            let params = ModelParams::load(ckpt).stage("load checkpoint")?;
            let plan = ForecastPlan {
                horizon: args.horizon,
                samples: args.samples,
                stride: args.stride,
                seed: args.seed,
                rho: args.rho,
            };
            let ablation: Ablation = args.ablate.into();
            rolling_evaluation(
                &params,
                &prepared,
                prepared.val_end,
                prepared.values.nrows(),
                &plan,
                ablation.volatility_scaling(),
            )
            .stage("eval")?
        }
        _ => {
            return Err(StageError {
                stage: "eval",
                source: curvecov::Error::InvalidParameter(
                    "pass exactly one of --forecast or --checkpoint".into(),
                ),
            })
        }
    };
    print!("{}", report.table());
    write_json(&args.out, &report)?;
    if !report.is_finite() {
        return Err(StageError {
            stage: "eval",
            source: curvecov::Error::NonFinite("evaluation metrics".into()),
        });
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("CURVECOV_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::RewireReport(a) => cmd_rewire_report(a),
        Command::Train(a) => cmd_train(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.stage, e.source);
            ExitCode::FAILURE
        }
    }
}
