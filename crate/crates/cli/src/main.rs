//! Command-line surface for graph neural tangent kernel experiments:
//! exact kernels, trainability diagnostics, gradient-flow dynamics, kernel
//! regression, edge sampling, percolation sweeps, Monte-Carlo verification,
//! and finite-width training. Every run writes its resolved configuration
//! as JSON next to the outputs; identical configs and seeds reproduce all
//! CSV/JSON artifacts byte for byte.

mod io;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gntk_core::activation::Activation;
use gntk_core::data::{self, DatasetSplit, FeatureMatrix, LabelVector};
use gntk_core::diagnostics::{
    condition_number, fit_rate, kernel_regression, simulate_dynamics, ConvergenceTrace,
};
use gntk_core::error::{Error, Result};
use gntk_core::kernel::{compute_gntk_with_snapshots, GntkConfig};
use gntk_core::linalg::frobenius_norm;
use gntk_core::network::{empirical_ntk, train_gcn, AggregationKind, GcnConfig};
use gntk_core::operator::{build_operator, spectral_summary};
use gntk_core::sampling::{
    critical_rate, percolation_sweep, sample_edges, SampleConfig, SampleMode,
};
use gntk_core::Graph;
use io::OutDir;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(
    name = "gntk",
    version,
    about = "Infinite-width graph kernels, trainability diagnostics, and critical edge sampling",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the exact kernel and write it with metadata (and a trace).
    Kernel(KernelCmd),
    /// Convergence trace, exponential-rate fit, spectral summary, and
    /// condition numbers at selected depths.
    Diagnose(DiagnoseCmd),
    /// Closed-form gradient-flow residuals under MSE.
    Dynamics(DynamicsCmd),
    /// Kernel ridge regression node classification.
    Classify(ClassifyCmd),
    /// Sample a subgraph (DropEdge / Critical DropEdge).
    Sample(SampleCmd),
    /// Largest-component statistics of random graphs across probabilities.
    Percolate(PercolateCmd),
    /// Compare the analytic kernel against a finite-width Monte-Carlo NTK.
    #[command(name = "mc-verify")]
    McVerify(McVerifyCmd),
    /// Train a finite-width GCN with full-batch gradient descent.
    Train(TrainCmd),
}

#[derive(Args, Debug, Serialize)]
struct CommonArgs {
    /// Output directory (default: $GNTK_OUT_DIR, else the current directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Base RNG seed for everything stochastic in the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap the global worker-thread pool.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    threads: Option<usize>,
    /// Flat key=value config file mirroring flag names; explicit flags win.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<PathBuf>,
}

impl CommonArgs {
    fn out_dir(&self) -> Result<OutDir> {
        let root = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os("GNTK_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        OutDir::new(root)
    }
}

/// Flags shared by every kernel-computing command.
#[derive(Args, Debug, Serialize)]
struct KernelSpecArgs {
    /// Edge-list file ("u v" lines, '#' comments, optional "#nodes N").
    #[arg(long)]
    graph: PathBuf,
    /// Feature file (numeric rows), or "identity" for one-hot indicators.
    #[arg(long, default_value = "identity")]
    features: String,
    /// Keep feature rows as-is instead of unit-normalizing them.
    #[arg(long)]
    raw_features: bool,
    /// relu or tanh.
    #[arg(long, default_value = "relu")]
    activation: String,
    /// Nonlinear transformations per propagation unit.
    #[arg(long = "R", default_value_t = 1)]
    transforms_per_unit: usize,
    /// Number of propagation units.
    #[arg(long = "L", default_value_t = 2)]
    units: usize,
    /// Weight variance scale; defaults to the edge-of-chaos value
    /// (2 for relu; solved from sigma-b-sq for tanh).
    #[arg(long)]
    sigma_w_sq: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    sigma_b_sq: f64,
    /// Residual aggregation weight in (0,1).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    /// Residual connections between transformations.
    #[arg(long)]
    residual_mlp: bool,
    /// Gauss-Hermite order for tanh expectations.
    #[arg(long, default_value_t = 60)]
    quad_order: usize,
    /// Override the dense-kernel size guard.
    #[arg(long)]
    allow_large: bool,
}

impl KernelSpecArgs {
    fn activation(&self) -> Result<Activation> {
        self.activation.parse()
    }

    fn resolved_sigma_w_sq(&self) -> Result<f64> {
        if let Some(s) = self.sigma_w_sq {
            return Ok(s);
        }
        match self.activation()? {
            Activation::Relu => Ok(2.0),
            Activation::Tanh => {
                let eoc = gntk_core::activation::edge_of_chaos_solve::<f64>(
                    Activation::Tanh,
                    self.sigma_b_sq,
                )?;
                if eoc.degenerate {
                    return Err(Error::InvalidParameter(
                        "tanh edge of chaos degenerates at sigma_b_sq = 0; \
                         pass --sigma-w-sq explicitly or a positive --sigma-b-sq"
                            .into(),
                    ));
                }
                eprintln!(
                    "solved edge of chaos: sigma_w_sq = {}, q* = {}",
                    eoc.sigma_w_sq, eoc.q_star
                );
                Ok(eoc.sigma_w_sq)
            }
        }
    }

    fn gntk_config(&self, record_trace: bool) -> Result<GntkConfig<f64>> {
        let config = GntkConfig {
            activation: self.activation()?,
            sigma_w_sq: self.resolved_sigma_w_sq()?,
            sigma_b_sq: self.sigma_b_sq,
            transforms_per_unit: self.transforms_per_unit,
            units: self.units,
            residual_aggregation: self.delta,
            residual_mlp: self.residual_mlp,
            quadrature_order: self.quad_order,
            record_trace,
            allow_large: self.allow_large,
        };
        config.validate()?;
        Ok(config)
    }

    fn load_graph(&self) -> Result<Graph> {
        Graph::load(&self.graph)
    }

    fn load_features(&self, graph: &Graph) -> Result<FeatureMatrix<f64>> {
        if self.features == "identity" {
            Ok(FeatureMatrix::identity(graph.node_count()))
        } else {
            let f = data::load_features::<f64>(&self.features, !self.raw_features)?;
            if f.node_count() != graph.node_count() {
                return Err(Error::Dimension(format!(
                    "feature rows ({}) do not match graph nodes ({})",
                    f.node_count(),
                    graph.node_count()
                )));
            }
            Ok(f)
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct LabeledDataArgs {
    /// Label file: "node_id label" lines.
    #[arg(long)]
    labels: PathBuf,
    /// Split file with TRAIN/VAL/TEST sections.
    #[arg(long)]
    split: PathBuf,
}

impl LabeledDataArgs {
    fn load(&self, graph: &Graph) -> Result<(LabelVector, DatasetSplit)> {
        let labels = data::load_labels(&self.labels, graph.node_count())?;
        let split = data::load_split(&self.split, graph.node_count())?;
        for set in [&split.train, &split.validation, &split.test] {
            for &node in set {
                if labels.class(node).is_none() {
                    return Err(Error::InvalidParameter(format!(
                        "split node {node} has no label"
                    )));
                }
            }
        }
        Ok((labels, split))
    }
}

#[derive(Args, Debug, Serialize)]
struct KernelCmd {
    #[command(flatten)]
    spec: KernelSpecArgs,
    /// Record per-depth normalized kernel statistics to trace.csv.
    #[arg(long)]
    trace: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct DiagnoseCmd {
    #[command(flatten)]
    spec: KernelSpecArgs,
    /// Unit indices at which to report condition numbers, e.g. "2,32".
    /// The largest one also bounds the trace length.
    #[arg(long, default_value = "2")]
    depths: String,
    /// Optional split file; condition numbers restrict to its train block.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<PathBuf>,
    /// Restrict the rate fit to this inclusive depth range, e.g. "10,200".
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    fit_range: Option<String>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct DynamicsCmd {
    #[command(flatten)]
    spec: KernelSpecArgs,
    #[command(flatten)]
    data: LabeledDataArgs,
    /// Learning rate of the gradient flow.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Time grid: comma floats or "log:start,end,count".
    #[arg(long, default_value = "log:0.01,10000,40")]
    times: String,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct ClassifyCmd {
    #[command(flatten)]
    spec: KernelSpecArgs,
    #[command(flatten)]
    data: LabeledDataArgs,
    /// Ridge term; defaults to 1e-6·trace(Θ_tr)/n_tr.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ridge: Option<f64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct SampleCmd {
    #[arg(long)]
    graph: PathBuf,
    /// critical, or fixed (with --rate).
    #[arg(long, default_value = "critical")]
    mode: String,
    /// Edge keep rate for --mode fixed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct PercolateCmd {
    /// Number of nodes of each random graph.
    #[arg(long)]
    n: usize,
    /// Probabilities: floats or pc multiples, e.g. "0.5pc,pc,2pc".
    #[arg(long)]
    p_values: String,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct McVerifyCmd {
    #[command(flatten)]
    spec: KernelSpecArgs,
    #[arg(long, default_value_t = 2048)]
    width: usize,
    #[arg(long, default_value_t = 20)]
    inits: usize,
    /// Also estimate at this width for a convergence comparison.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    compare_width: Option<usize>,
    /// Override the width guard.
    #[arg(long)]
    allow_wide: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct TrainCmd {
    #[command(flatten)]
    spec: KernelSpecArgs,
    #[command(flatten)]
    data: LabeledDataArgs,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// mean_with_self (the kernel theory's form) or symmetric_normalized.
    #[arg(long, default_value = "mean_with_self")]
    aggregation: String,
    /// none, critical, or fixed (with --sample-rate).
    #[arg(long, default_value = "none")]
    sample_mode: String,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_rate: Option<f64>,
    /// Keep one sampled subgraph for the whole run instead of resampling
    /// every epoch.
    #[arg(long)]
    static_sample: bool,
    /// Override the width guard.
    #[arg(long)]
    allow_wide: bool,
    #[command(flatten)]
    common: CommonArgs,
}

fn parse_sample_mode(mode: &str, rate: Option<f64>, seed: u64) -> Result<Option<SampleConfig>> {
    match mode {
        "none" => Ok(None),
        "critical" => Ok(Some(SampleConfig {
            mode: SampleMode::Critical,
            seed,
            resample_each_epoch: true,
        })),
        "fixed" | "rate" => {
            let rate = rate.ok_or_else(|| {
                Error::InvalidParameter("--sample-rate required for fixed mode".into())
            })?;
            Ok(Some(SampleConfig {
                mode: SampleMode::Fixed { rate },
                seed,
                resample_each_epoch: true,
            }))
        }
        other => Err(Error::InvalidParameter(format!(
            "unknown sample mode {other:?} (expected none, critical, or fixed)"
        ))),
    }
}

fn run_kernel(cmd: &KernelCmd) -> Result<()> {
    let out = cmd.common.out_dir()?;
    out.write_json("kernel_config.json", cmd)?;
    let graph = cmd.spec.load_graph()?;
    let features = cmd.spec.load_features(&graph)?;
    let config = cmd.spec.gntk_config(cmd.trace)?;
    let started = Instant::now();
    let (run, _) = compute_gntk_with_snapshots(&graph, &features, &config, &[])?;
    eprintln!("kernel computed in {:.2?}", started.elapsed());
    out.write("kernel.txt", &io::matrix_to_text(&run.theta))?;
    #[derive(Serialize)]
    struct KernelMeta<'a> {
        config: &'a GntkConfig<f64>,
        graph_hash: String,
        nodes: usize,
        edges: usize,
        depth: usize,
        clamp_count: u64,
        features_normalized: bool,
    }
    out.write_json(
        "kernel_meta.json",
        &KernelMeta {
            config: &config,
            graph_hash: format!("{:016x}", graph.fingerprint()),
            nodes: graph.node_count(),
            edges: graph.edge_count(),
            depth: run.depth,
            clamp_count: run.clamp_events,
            features_normalized: features.is_normalized(),
        },
    )?;
    if let Some(samples) = &run.trace {
        out.write("trace.csv", &io::trace_to_csv(samples))?;
    }
    Ok(())
}

fn run_diagnose(cmd: &DiagnoseCmd) -> Result<()> {
    let out = cmd.common.out_dir()?;
    out.write_json("diagnose_config.json", cmd)?;
    let graph = cmd.spec.load_graph()?;
    let features = cmd.spec.load_features(&graph)?;
    let depths = io::parse_usize_list(&cmd.depths)?;
    if depths.is_empty() {
        return Err(Error::InvalidParameter("--depths is empty".into()));
    }
    let mut config = cmd.spec.gntk_config(true)?;
    config.units = config.units.max(depths.iter().copied().max().unwrap_or(0));
    let indices: Vec<usize> = match &cmd.split {
        Some(path) => data::load_split(path, graph.node_count())?.train,
        None => (0..graph.node_count()).collect(),
    };
    let (run, snapshots) = compute_gntk_with_snapshots(&graph, &features, &config, &depths)?;
    let samples = run.trace.as_ref().expect("trace recorded");
    out.write("trace.csv", &io::trace_to_csv(samples))?;

    let trace = ConvergenceTrace::from_samples(samples.clone())?;
    let fit_range = match &cmd.fit_range {
        Some(spec) => {
            let v = io::parse_usize_list(spec)?;
            if v.len() != 2 {
                return Err(Error::InvalidParameter(
                    "--fit-range needs exactly two depths".into(),
                ));
            }
            Some((v[0], v[1]))
        }
        None => None,
    };
    let fit = fit_rate(&trace, fit_range)?;
    out.write_json("fit.json", &fit)?;

    let mut condition_csv = String::from("depth,lambda_min,lambda_max,kappa\n");
    for (unit, theta) in &snapshots {
        let report = condition_number(theta, &indices)?;
        let _ = writeln!(
            condition_csv,
            "{},{},{},{}",
            unit * config.transforms_per_unit,
            report.lambda_min,
            report.lambda_max,
            report.kappa
        );
    }
    out.write("condition.csv", &condition_csv)?;

    let op = build_operator::<f64>(&graph, config.residual_aggregation)?;
    let spectral = spectral_summary(&op, &graph)?;
    out.write_json("spectral.json", &spectral)?;
    Ok(())
}

fn run_dynamics(cmd: &DynamicsCmd) -> Result<()> {
    let out = cmd.common.out_dir()?;
    out.write_json("dynamics_config.json", cmd)?;
    let graph = cmd.spec.load_graph()?;
    let features = cmd.spec.load_features(&graph)?;
    let (labels, split) = cmd.data.load(&graph)?;
    let config = cmd.spec.gntk_config(false)?;
    let times = io::parse_time_grid(&cmd.times)?;
    let (run, _) = compute_gntk_with_snapshots(&graph, &features, &config, &[])?;
    let result = simulate_dynamics(&run.theta, &labels, &split, cmd.eta, &times)?;
    let mut csv = String::from("t,residual\n");
    for (t, r) in result.times.iter().zip(&result.residuals) {
        let _ = writeln!(csv, "{t},{r}");
    }
    out.write("dynamics.csv", &csv)?;
    Ok(())
}

fn run_classify(cmd: &ClassifyCmd) -> Result<()> {
    let out = cmd.common.out_dir()?;
    out.write_json("classify_config.json", cmd)?;
    let graph = cmd.spec.load_graph()?;
    let features = cmd.spec.load_features(&graph)?;
    let (labels, split) = cmd.data.load(&graph)?;
    let config = cmd.spec.gntk_config(false)?;
    let (run, _) = compute_gntk_with_snapshots(&graph, &features, &config, &[])?;
    let outcome = kernel_regression(&run.theta, &labels, &split, cmd.ridge)?;
    #[derive(Serialize)]
    struct ClassifyReport {
        test_accuracy: f64,
        train_accuracy: f64,
        n_train: usize,
        n_test: usize,
        ridge: f64,
        kappa: f64,
        singular: bool,
        depth: usize,
    }
    out.write_json(
        "classify.json",
        &ClassifyReport {
            test_accuracy: outcome.test_accuracy,
            train_accuracy: outcome.train_accuracy,
            n_train: split.train.len(),
            n_test: split.test.len(),
            ridge: outcome.ridge,
            kappa: outcome.condition.kappa,
            singular: outcome.condition.singular,
            depth: run.depth,
        },
    )?;
    Ok(())
}

fn run_sample(cmd: &SampleCmd) -> Result<()> {
    let out = cmd.common.out_dir()?;
    out.write_json("sample_config.json", cmd)?;
    let graph = Graph::load(&cmd.graph)?;
    let config = match cmd.mode.as_str() {
        "critical" => SampleConfig {
            mode: SampleMode::Critical,
            seed: cmd.common.seed,
            resample_each_epoch: false,
        },
        "fixed" | "rate" => SampleConfig {
            mode: SampleMode::Fixed {
                rate: cmd.rate.ok_or_else(|| {
                    Error::InvalidParameter("--rate required for fixed mode".into())
                })?,
            },
            seed: cmd.common.seed,
            resample_each_epoch: false,
        },
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown sample mode {other:?}"
            )))
        }
    };
    let sampled = sample_edges(&graph, &config)?;
    eprintln!(
        "kept {} of {} edges (critical rate {:.4})",
        sampled.edge_count(),
        graph.edge_count(),
        critical_rate::<f64>(&graph)?
    );
    out.write("sampled.txt", &sampled.to_edge_list_string())?;
    Ok(())
}

fn run_percolate(cmd: &PercolateCmd) -> Result<()> {
    let out = cmd.common.out_dir()?;
    out.write_json("percolate_config.json", cmd)?;
    let p_values = io::parse_p_values(&cmd.p_values, cmd.n)?;
    let stats = percolation_sweep(cmd.n, &p_values, cmd.trials, cmd.common.seed)?;
    let mut csv = String::from("p,trial,largest_component,components\n");
    for row in &stats.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.p, row.trial, row.largest_component, row.components
        );
    }
    out.write("percolation.csv", &csv)?;
    let summary: Vec<_> = stats
        .points
        .iter()
        .map(|pt| {
            #[derive(Serialize)]
            struct Point {
                p: f64,
                trials: usize,
                median: f64,
                mean: f64,
            }
            Point {
                p: pt.p,
                trials: pt.trials,
                median: pt.median,
                mean: pt.mean,
            }
        })
        .collect();
    out.write_json("percolation_summary.json", &summary)?;
    Ok(())
}

fn run_mc_verify(cmd: &McVerifyCmd) -> Result<()> {
    let out = cmd.common.out_dir()?;
    out.write_json("mc_verify_config.json", cmd)?;
    let graph = cmd.spec.load_graph()?;
    let features = cmd.spec.load_features(&graph)?;
    if cmd.spec.delta.is_some() || cmd.spec.residual_mlp {
        return Err(Error::InvalidParameter(
            "the finite-width oracle covers the vanilla architecture only".into(),
        ));
    }
    let kernel_config = cmd.spec.gntk_config(false)?;
    let (analytic, _) = compute_gntk_with_snapshots(&graph, &features, &kernel_config, &[])?;
    let gcn_config = GcnConfig::<f64> {
        units: kernel_config.units,
        transforms_per_unit: kernel_config.transforms_per_unit,
        activation: kernel_config.activation,
        sigma_w_sq: kernel_config.sigma_w_sq,
        sigma_b_sq: kernel_config.sigma_b_sq,
        aggregation: AggregationKind::MeanWithSelf,
        allow_wide: cmd.allow_wide,
    };
    let analytic_norm = frobenius_norm(&analytic.theta);
    let compare = |width: usize| -> Result<(f64, f64)> {
        let est = empirical_ntk(
            &graph,
            &features,
            &gcn_config,
            width,
            cmd.inits,
            cmd.common.seed,
        )?;
        let diff = &est.matrix - &analytic.theta;
        let max_entry = diff.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        Ok((frobenius_norm(&diff) / analytic_norm, max_entry))
    };
    let started = Instant::now();
    let (rel, max_entry) = compare(cmd.width)?;
    eprintln!("width {} done in {:.2?}", cmd.width, started.elapsed());
    #[derive(Serialize)]
    struct Comparison {
        width: usize,
        inits: usize,
        rel_frobenius_error: f64,
        max_entry_error: f64,
    }
    #[derive(Serialize)]
    struct McReport {
        main: Comparison,
        #[serde(skip_serializing_if = "Option::is_none")]
        compare: Option<Comparison>,
    }
    let compare_result = match cmd.compare_width {
        Some(w) => {
            let (rel2, max2) = compare(w)?;
            Some(Comparison {
                width: w,
                inits: cmd.inits,
                rel_frobenius_error: rel2,
                max_entry_error: max2,
            })
        }
        None => None,
    };
    out.write_json(
        "mc_verify.json",
        &McReport {
            main: Comparison {
                width: cmd.width,
                inits: cmd.inits,
                rel_frobenius_error: rel,
                max_entry_error: max_entry,
            },
            compare: compare_result,
        },
    )?;
    Ok(())
}

fn run_train(cmd: &TrainCmd) -> Result<()> {
    let out = cmd.common.out_dir()?;
    out.write_json("train_config.json", cmd)?;
    let graph = cmd.spec.load_graph()?;
    let features = cmd.spec.load_features(&graph)?;
    let (labels, split) = cmd.data.load(&graph)?;
    let aggregation = match cmd.aggregation.as_str() {
        "mean_with_self" | "mean" => AggregationKind::MeanWithSelf,
        "symmetric_normalized" | "sym" => AggregationKind::SymmetricNormalized,
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown aggregation {other:?}"
            )))
        }
    };
    let config = GcnConfig::<f64> {
        units: cmd.spec.units,
        transforms_per_unit: cmd.spec.transforms_per_unit,
        activation: cmd.spec.activation()?,
        sigma_w_sq: cmd.spec.resolved_sigma_w_sq()?,
        sigma_b_sq: cmd.spec.sigma_b_sq,
        aggregation,
        allow_wide: cmd.allow_wide,
    };
    let mut sampler = parse_sample_mode(&cmd.sample_mode, cmd.sample_rate, cmd.common.seed)?;
    if let Some(s) = sampler.as_mut() {
        s.resample_each_epoch = !cmd.static_sample;
    }
    let history = train_gcn(
        &graph,
        &features,
        &labels,
        &split,
        &config,
        cmd.width,
        cmd.epochs,
        cmd.lr,
        sampler.as_ref(),
        cmd.common.seed,
    )?;
    let mut csv = String::from("epoch,loss,train_acc,test_acc\n");
    for s in &history {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            s.epoch, s.loss, s.train_accuracy, s.test_accuracy
        );
    }
    out.write("train.csv", &csv)?;
    Ok(())
}

/// Splice config-file tokens in front of the user's flags so that explicit
/// flags override file values (the parser keeps the last occurrence).
fn expand_args(raw: Vec<String>) -> Result<Vec<String>> {
    let mut config_path: Option<PathBuf> = None;
    for (i, arg) in raw.iter().enumerate() {
        if arg == "--config" {
            config_path = raw.get(i + 1).map(PathBuf::from);
        } else if let Some(v) = arg.strip_prefix("--config=") {
            config_path = Some(PathBuf::from(v));
        }
    }
    let Some(path) = config_path else {
        return Ok(raw);
    };
    let file_args = io::config_file_to_args(&path)?;
    if raw.len() < 2 {
        return Ok(raw);
    }
    let mut merged = Vec::with_capacity(raw.len() + file_args.len());
    merged.push(raw[0].clone());
    merged.push(raw[1].clone()); // subcommand
    merged.extend(file_args);
    merged.extend(raw.iter().skip(2).cloned());
    Ok(merged)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let threads = match &cli.command {
        Command::Kernel(c) => c.common.threads,
        Command::Diagnose(c) => c.common.threads,
        Command::Dynamics(c) => c.common.threads,
        Command::Classify(c) => c.common.threads,
        Command::Sample(c) => c.common.threads,
        Command::Percolate(c) => c.common.threads,
        Command::McVerify(c) => c.common.threads,
        Command::Train(c) => c.common.threads,
    };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Kernel(c) => run_kernel(c),
        Command::Diagnose(c) => run_diagnose(c),
        Command::Dynamics(c) => run_dynamics(c),
        Command::Classify(c) => run_classify(c),
        Command::Sample(c) => run_sample(c),
        Command::Percolate(c) => run_percolate(c),
        Command::McVerify(c) => run_mc_verify(c),
        Command::Train(c) => run_train(c),
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let expanded = match expand_args(raw) {
        Ok(args) => args,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&expanded) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
