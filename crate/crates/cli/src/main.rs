use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use robustshift::analysis::Hyperplane;
use robustshift::attack::{evaluate_with, AttackConfig, TargetMode};
use robustshift::bounds::Domain;
use robustshift::data::{fetch, save_cache, subset, FetchEntry};
use robustshift::experiment::ModelSpec;
use robustshift::nn::{encode_model, load_model, save_model, Arch, Model};
use robustshift::seed::derive_seed;
use robustshift::train::{train, LrSchedule, Optimizer, TrainConfig};
use robustshift::transforms::{apply, TransformSpec};

use robustshift_cli::config::{AnalysisRequest, BoundsRequest, ExperimentConfig, Split};
use robustshift_cli::datasets::{data_dir, load_path};
use robustshift_cli::error::{CliError, Result, StageContext};
use robustshift_cli::num::Num;
use robustshift_cli::report::{merge, write_merged_csv, EvalJson};
use robustshift_cli::runner::{analysis, bounds_record, run, write_history};

#[derive(Parser)]
#[command(name = "robustshift", version, about = "Adversarial robustness under semantics-preserving shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify the files listed in a TOML manifest.
    Fetch {
        manifest: PathBuf,
        /// Destination directory (default: the data directory).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Apply a transform chain to a dataset split and store the result.
    Transform {
        #[command(flatten)]
        data: DataArgs,
        /// Transforms in order, e.g. `smooth(s=3)` `saturate(p=inf)`.
        #[arg(long = "chain", num_args = 1..)]
        chain: Vec<TransformSpec>,
        #[command(flatten)]
        op: OpArgs,
        #[arg(long, short, visible_alias = "out")]
        output: PathBuf,
    },
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a saved model under PGD.
    Attack(AttackArgs),
    /// Dataset diagnostics: per-item CSV on stdout, JSON summary on stderr.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
        /// Write the JSON summary here instead of stderr.
        #[arg(long, global = true)]
        summary: Option<PathBuf>,
    },
    /// Closed-form vulnerability bounds.
    Bounds {
        #[command(subcommand)]
        what: BoundsCmd,
    },
    /// Run every stage of an experiment config.
    Run {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Combine run reports.
    Report {
        #[command(subcommand)]
        what: ReportCmd,
    },
}

/// A single transform given as `--op NAME` plus its parameter flags.
#[derive(Args)]
struct OpArgs {
    #[arg(long)]
    op: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    t_low: Option<f64>,
    #[arg(long)]
    t_high: Option<f64>,
}

impl OpArgs {
    fn spec(&self) -> Result<Option<TransformSpec>> {
        let Some(op) = &self.op else {
            return Ok(None);
        };
        let params: Vec<String> = [
            ("p", self.p),
            ("s", self.s.map(|s| s as f64)),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("sigma", self.sigma),
            ("lo", self.t_low),
            ("hi", self.t_high),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
        .collect();
        let text = if params.is_empty() {
            op.clone()
        } else {
            format!("{op}({})", params.join(","))
        };
        text.parse().map(Some).invalid("--op")
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (IDX or CIFAR-10 binary) or a `.dsnc` cache file.
    #[arg(long, visible_alias = "in")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args)]
struct AttackParams {
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 40)]
    iters: usize,
    #[arg(long)]
    no_random_start: bool,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

impl AttackParams {
    fn config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            eps: self.eps,
            alpha: self.alpha,
            iters: self.iters,
            random_start: !self.no_random_start,
            restarts: self.restarts,
            seed,
            ..AttackConfig::mnist()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Transforms applied to the training split before training.
    #[arg(long = "chain", num_args = 1..)]
    chain: Vec<TransformSpec>,
    #[arg(long, default_value = "lenet")]
    arch: Arch,
    #[arg(long, default_value_t = 1.0)]
    widen: f64,
    #[arg(long)]
    standardize: bool,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    /// Stratified training subset size.
    #[arg(long)]
    train_size: Option<usize>,
    /// PGD (Madry) training instead of standard training.
    #[arg(long)]
    adversarial: bool,
    /// Steps over which the adversarial budget ramps up to `--eps`.
    #[arg(long, default_value_t = 0)]
    eps_warmup: usize,
    #[command(flatten)]
    attack: AttackParams,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: PathBuf,
    /// Also write the training history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "chain", num_args = 1..)]
    chain: Vec<TransformSpec>,
    /// Stratified evaluation subset size.
    #[arg(long)]
    test_size: Option<usize>,
    #[command(flatten)]
    attack: AttackParams,
    /// Let adversarial images leave the `[0, 1]` pixel domain.
    #[arg(long)]
    no_domain_clip: bool,
    /// Attack the model's predictions rather than the labels.
    #[arg(long)]
    vs_prediction: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Log2 perturbable volume of every image.
    Volume {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        eps: f64,
    },
    /// Per-class distance to the other classes.
    Interclass {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.1)]
        nn_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        sel_frac: f64,
    },
    Histogram {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = robustshift::analysis::DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
    },
    /// Monte Carlo robust error of a linear Bayes classifier on the cube.
    McLinear {
        #[arg(long)]
        hyperplane: Hyperplane,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BoundsCmd {
    Cube {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        eps: f64,
    },
    Ball {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        d: usize,
    },
    /// Fraction of a balanced k-class distribution that every classifier
    /// misclassifies or leaves attackable.
    Vuln {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        d: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Concatenate reports into one long-form CSV.
    Merge {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(rename = "file")]
    files: Vec<FetchEntry>,
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(v).expect("value serializes");
    writeln!(std::io::stdout().lock(), "{json}").map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

/// `file://` URLs with relative paths are taken relative to the manifest.
fn resolve_file_url(url: &str, base: &Path) -> String {
    match url.strip_prefix("file://") {
        Some(p) if !Path::new(p).is_absolute() => format!("file://{}", base.join(p).display()),
        _ => url.to_string(),
    }
}

fn cmd_fetch(manifest: &Path, dest: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(manifest).map_err(|e| CliError::io(manifest, e))?;
    let m: Manifest = toml::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {}", manifest.display(), e.to_string().trim_end())))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let dest = dest.unwrap_or_else(data_dir);
    let mut fetched = Vec::new();
    for entry in m.files {
        let entry = FetchEntry {
            url: resolve_file_url(&entry.url, base),
            ..entry
        };
        let path = fetch(&entry, &dest).stage(&format!("fetch {}", entry.name))?;
        fetched.push(serde_json::json!({ "name": entry.name, "path": path }));
    }
    print_json(&fetched)
}

fn load_chain(data: &DataArgs, chain: &[TransformSpec]) -> Result<robustshift::data::Dataset> {
    let mut ds = load_path(&data.data, data.split.into())?;
    for t in chain {
        ds = apply(&ds, t).stage("transform")?;
    }
    Ok(ds)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut ds = load_chain(
        &DataArgs {
            data: a.data.clone(),
            split: SplitArg::Train,
        },
        &a.chain,
    )?;
    if let Some(n) = a.train_size {
        ds = subset(&ds, n, true, derive_seed(a.seed, "subset-train")).invalid("--train-size")?;
    }
    let spec = ModelSpec {
        arch: a.arch,
        widen: a.widen,
        standardize: a.standardize,
    };
    let model = Model::build(spec.arch, spec.widen, ds.num_classes, ds.item_shape(), derive_seed(a.seed, "init"))
        .invalid("model")?
        .with_standardization(spec.standardize);
    let cfg = TrainConfig {
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::SgdMomentum,
        },
        lr: LrSchedule::constant(a.lr),
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        total_steps: a.steps,
        adversarial: a.adversarial,
        attack: a.adversarial.then(|| a.attack.config(0)),
        eps_warmup: a.eps_warmup,
        seed: derive_seed(a.seed, "train"),
        ..TrainConfig::desk_default()
    };
    cfg.validate().invalid("training options")?;
    let (model, history) = train(model, &ds, &cfg, None).stage("train")?;
    save_model(&model, &a.output).stage("save")?;
    if let Some(h) = &a.history {
        write_history(&history, h)?;
    }
    print_json(&serde_json::json!({
        "model": a.output,
        "model_hash": robustshift::data::sha256_hex(&encode_model(&model)),
        "steps": cfg.total_steps,
        "final_loss": history.last().map(|r| Num(r.loss)),
    }))
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let model = load_model(&a.model).stage("load model")?;
    let mut ds = load_chain(&a.data, &a.chain)?;
    if let Some(n) = a.test_size {
        ds = subset(&ds, n, true, derive_seed(a.seed, "subset-test")).invalid("--test-size")?;
    }
    let cfg = AttackConfig {
        clip_domain: !a.no_domain_clip,
        mode: if a.vs_prediction {
            TargetMode::VsPrediction
        } else {
            TargetMode::VsLabel
        },
        ..a.attack.config(derive_seed(a.seed, "eval"))
    };
    cfg.validate().invalid("attack options")?;
    let report = evaluate_with(&model, &ds, Some(&cfg), false).stage("attack")?;
    print_json(&serde_json::json!({
        "model": a.model,
        "eval": EvalJson::from(&report),
        "attack": cfg,
    }))
}

fn cmd_analyze(what: AnalyzeCmd, summary: Option<&Path>) -> Result<()> {
    let (req, data, seed) = match what {
        AnalyzeCmd::Volume { data, eps } => (
            AnalysisRequest::Volume {
                eps,
                split: data.split.into(),
            },
            Some(data),
            0,
        ),
        AnalyzeCmd::Interclass { data, nn_frac, sel_frac } => (
            AnalysisRequest::Interclass {
                nn_frac,
                sel_frac,
                split: data.split.into(),
            },
            Some(data),
            0,
        ),
        AnalyzeCmd::Histogram { data, bins } => (
            AnalysisRequest::Histogram {
                bins,
                split: data.split.into(),
            },
            Some(data),
            0,
        ),
        AnalyzeCmd::McLinear {
            hyperplane,
            d,
            eps,
            n,
            seed,
        } => (AnalysisRequest::McLinear { hyperplane, d, eps, n }, None, seed),
    };
    let ds = data.as_ref().map(|d| load_path(&d.data, d.split.into())).transpose()?;
    let variant = data.as_ref().map(|d| d.data.display().to_string());
    // Bad parameters surface from the analysis itself; report them as such.
    let mut rec = analysis(&req, ds.as_ref(), variant.as_deref(), seed).map_err(|e| match e {
        CliError::Stage { source, .. } => CliError::validation(source.to_string()),
        other => other,
    })?;

    let csv_err = |e: csv::Error| CliError::Runtime(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    match &req {
        AnalysisRequest::Volume { .. } => {
            w.write_record(["index", "log2_volume"]).map_err(csv_err)?;
            for (i, v) in rec.values.iter().enumerate() {
                w.write_record([i.to_string(), v.to_string()]).map_err(csv_err)?;
            }
        }
        AnalysisRequest::Interclass { .. } => {
            let counts = ds.as_ref().expect("interclass has data").class_counts();
            let classes = (0..counts.len()).filter(|&c| counts[c] > 0);
            w.write_record(["class", "distance"]).map_err(csv_err)?;
            for (c, v) in classes.zip(&rec.values) {
                w.write_record([c.to_string(), v.to_string()]).map_err(csv_err)?;
            }
        }
        AnalysisRequest::Histogram { bins, .. } => {
            w.write_record(["bin", "lo", "hi", "count"]).map_err(csv_err)?;
            for (i, v) in rec.values.iter().enumerate() {
                let lo = Num(i as f64 / *bins as f64);
                let hi = Num((i + 1) as f64 / *bins as f64);
                w.write_record([i.to_string(), lo.to_string(), hi.to_string(), v.to_string()])
                    .map_err(csv_err)?;
            }
        }
        AnalysisRequest::McLinear { .. } => {
            w.write_record(["estimate", "stderr"]).map_err(csv_err)?;
            let se = rec.stderr.expect("Monte Carlo has a standard error");
            w.write_record([rec.values[0].to_string(), se.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::Runtime(format!("stdout: {e}")))?;
    drop(w);

    if !matches!(req, AnalysisRequest::McLinear { .. }) {
        rec.values.clear();
    }
    let json = serde_json::to_string_pretty(&rec).expect("record serializes") + "\n";
    match summary {
        Some(path) => std::fs::write(path, json).map_err(|e| CliError::io(path, e)),
        None => {
            eprint!("{json}");
            Ok(())
        }
    }
}

fn cmd_bounds(what: BoundsCmd) -> Result<()> {
    let req = match what {
        BoundsCmd::Cube { p, eps } => BoundsRequest::Cube { p, eps },
        BoundsCmd::Ball { p, eps, d } => BoundsRequest::Ball { p, eps, d },
        BoundsCmd::Vuln { k, eps, domain, d } => BoundsRequest::Vuln { k, eps, domain, d },
    };
    print_json(&bounds_record(&req).invalid("bounds")?)
}

fn cmd_run(config: &Path, output_dir: Option<PathBuf>, quiet: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if output_dir.is_some() {
        cfg.output_dir = output_dir;
    }
    let report = run(&cfg, !quiet)?;
    let out = cfg.output_dir();
    if !quiet {
        eprintln!("wrote {}", out.join("report.json").display());
    }
    print_json(&serde_json::json!({
        "run_id": report.run_id,
        "report": out.join("report.json"),
        "runs": report.runs.len(),
        "bounds": report.bounds,
    }))
}

fn cmd_merge(reports: &[PathBuf], output: Option<PathBuf>) -> Result<()> {
    let merged = merge(reports)?;
    if merged.duplicate_rows > 0 {
        eprintln!(
            "warning: skipped {} rows from reports with an already-merged run id",
            merged.duplicate_rows
        );
    }
    match output {
        Some(p) => {
            let f = std::fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
            write_merged_csv(&merged.rows, f)
        }
        None => write_merged_csv(&merged.rows, std::io::stdout().lock()),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fetch { manifest, dest } => cmd_fetch(&manifest, dest),
        Command::Transform {
            data,
            mut chain,
            op,
            output,
        } => {
            chain.extend(op.spec()?);
            if chain.is_empty() {
                return Err(CliError::validation("transform needs --op or --chain"));
            }
            let ds = load_chain(&data, &chain)?;
            save_cache(&ds, &output).stage("save")?;
            print_json(&serde_json::json!({
                "output": output,
                "n": ds.len(),
                "transforms": ds.meta.transforms,
            }))
        }
        Command::Train(a) => cmd_train(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Analyze { what, summary } => cmd_analyze(what, summary.as_deref()),
        Command::Bounds { what } => cmd_bounds(what),
        Command::Run {
            config,
            output_dir,
            quiet,
        } => cmd_run(&config, output_dir, quiet),
        Command::Report {
            what: ReportCmd::Merge { reports, output },
        } => cmd_merge(&reports, output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
