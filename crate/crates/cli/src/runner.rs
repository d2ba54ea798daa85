//! `run`: every stage of a config, in order, into one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use robustshift::analysis::{interclass_report, mc_linear_robust_error, pixel_histogram, volume_report, AnalysisReport, Summary};
use robustshift::attack::{evaluate_with, AttackConfig};
use robustshift::bounds::{ball_mass_bound, cube_mass_bound, vulnerability_bound_with, BoundForm, Domain};
use robustshift::data::{sha256_hex, Dataset};
use robustshift::experiment::{prepare, run_experiment, sweep, Experiment};
use robustshift::nn::save_model;
use robustshift::seed::derive_seed;
use robustshift::train::HistoryRow;

use crate::config::{AnalysisRequest, BoundsRequest, ExperimentConfig, Mode, Split, Variant};
use crate::datasets::{input_hash, load_base, load_variant};
use crate::error::{CliError, Result, StageContext};
use crate::num::Num;
use crate::report::{AnalysisRecord, BoundsRecord, RunRecord, RunReport, Status, SummaryNum, SweepRecord, REPORT_SCHEMA};

/// Seed shared by every model of a run, so variants and modes see the same
/// subsets and initial weights.
pub fn experiment_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, "experiment")
}

/// Hash of the config and the files it reads. Where results are written
/// does not enter.
pub fn run_input_hash(cfg: &ExperimentConfig) -> Result<String> {
    let echo = ExperimentConfig {
        output_dir: None,
        ..cfg.clone()
    };
    let mut parts = serde_json::to_string(&echo).expect("config serializes");
    if let Some(ds) = &cfg.dataset {
        if cfg.needs_data() {
            for split in [Split::Train, Split::Test] {
                parts.push('\n');
                parts.push_str(&input_hash(ds, cfg.seed, split)?);
            }
        }
    }
    Ok(sha256_hex(parts.as_bytes()))
}

pub fn bounds_record(req: &BoundsRequest) -> robustshift::Result<BoundsRecord> {
    Ok(match *req {
        BoundsRequest::Cube { p, eps } => BoundsRecord::from_result("cube", &cube_mass_bound(p, eps)?, &[]),
        BoundsRequest::Ball { p, eps, d } => BoundsRecord::from_result("ball", &ball_mass_bound(p, eps, d)?, &[]),
        BoundsRequest::Vuln { k, eps, domain, d } => {
            let value = vulnerability_bound_with(k, eps, domain, d, false)?;
            let loose = vulnerability_bound_with(k, eps, domain, d, true)?;
            let mut params = BTreeMap::from([("k".to_string(), Num(k as f64)), ("eps".to_string(), Num(eps))]);
            if let (Domain::Ball, Some(d)) = (domain, d) {
                params.insert("d".into(), Num(d as f64));
            }
            let form = match domain {
                Domain::Cube => BoundForm::GaussianExact,
                Domain::Ball => BoundForm::Tight,
            };
            BoundsRecord {
                kind: format!("vuln-{}", serde_json::to_value(domain).unwrap().as_str().unwrap()),
                params,
                value: Num(value),
                rounded: format!("{value:.4}"),
                form: serde_json::to_value(form).unwrap().as_str().unwrap().to_string(),
                exponential_lower: Some(Num(loose)),
            }
        }
    })
}

fn analysis_record(r: AnalysisReport, variant: Option<&str>, split: Option<Split>) -> AnalysisRecord {
    AnalysisRecord {
        kind: r.kind,
        variant: variant.map(String::from),
        split: split.map(|s| s.as_str().to_string()),
        params: r.params.into_iter().map(|(k, v)| (k, Num(v))).collect(),
        summary: Some(SummaryNum::from(&r.summary)),
        values: r.values.into_iter().map(Num).collect(),
        stderr: None,
    }
}

/// Runs one analysis request on `ds` (ignored by the Monte Carlo kind).
pub fn analysis(req: &AnalysisRequest, ds: Option<&Dataset>, variant: Option<&str>, seed: u64) -> Result<AnalysisRecord> {
    let need = || ds.ok_or_else(|| CliError::validation(format!("analysis `{}` needs a dataset", req.kind())));
    Ok(match *req {
        AnalysisRequest::Volume { eps, split } => {
            analysis_record(volume_report(need()?, eps).stage("analyze")?, variant, Some(split))
        }
        AnalysisRequest::Interclass { nn_frac, sel_frac, split } => {
            analysis_record(interclass_report(need()?, nn_frac, sel_frac).stage("analyze")?, variant, Some(split))
        }
        AnalysisRequest::Histogram { bins, split } => {
            let counts = pixel_histogram(need()?, bins).stage("analyze")?;
            AnalysisRecord {
                kind: "histogram".into(),
                variant: variant.map(String::from),
                split: Some(split.as_str().into()),
                params: BTreeMap::from([("bins".to_string(), Num(bins as f64))]),
                summary: None,
                values: counts.into_iter().map(|c| Num(c as f64)).collect(),
                stderr: None,
            }
        }
        AnalysisRequest::McLinear { hyperplane, d, eps, n } => {
            let seed = derive_seed(seed, "mc-linear");
            let (est, se) = mc_linear_robust_error(hyperplane, d, eps, n, seed).stage("analyze")?;
            let name = serde_json::to_value(hyperplane).unwrap().as_str().unwrap().to_string();
            AnalysisRecord {
                kind: format!("mc-linear-{name}"),
                variant: None,
                split: None,
                params: [("d", d as f64), ("eps", eps), ("n", n as f64), ("seed", seed as f64)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), Num(v)))
                    .collect(),
                summary: Summary::of(&[est]).as_ref().map(SummaryNum::from),
                values: vec![Num(est)],
                stderr: Some(Num(se)),
            }
        }
    })
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    w.write_record(["step", "loss", "clean_acc", "robust_acc"])
        .and_then(|_| {
            for r in rows {
                let opt = |v: Option<f64>| v.map(|v| Num(v).to_string()).unwrap_or_default();
                w.write_record([
                    r.step.to_string(),
                    Num(r.loss).to_string(),
                    opt(r.clean_acc),
                    opt(r.robust_acc),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// The experiment for one variant and mode; transforms are already applied
/// to the data it will see.
fn experiment_for(cfg: &ExperimentConfig, mode: Mode, transforms: Vec<robustshift::transforms::TransformSpec>) -> Experiment {
    let ds = cfg.dataset.as_ref().expect("validated");
    let mut train = cfg.train.clone().expect("validated");
    train.adversarial = mode == Mode::Adversarial;
    if train.adversarial && train.attack.is_none() {
        train.attack = cfg.attack.clone();
    }
    Experiment {
        model: cfg.model.clone().expect("validated"),
        transforms,
        train_size: ds.train_size,
        stratified: ds.stratified,
        test_size: ds.test_size,
        train,
        eval_attack: cfg.attack.clone(),
        eval_train: false,
        seed: experiment_seed(cfg),
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    report: RunReport,
    verbose: bool,
}

impl Runner<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        if self.verbose {
            eprintln!("[{}] {name}", self.report.run_id);
        }
        let t = Instant::now();
        let r = f(self);
        self.report.timings.push((name.to_string(), Num(t.elapsed().as_secs_f64())));
        match &r {
            Ok(_) => self.report.save(&self.out.join("report.json"))?,
            Err(e) => {
                self.report.status = Status::Failed;
                self.report.failed_stage = Some(name.to_string());
                self.report.error = Some(e.to_string());
                // Best effort: the original error matters more than a
                // failure to record it.
                let _ = self.report.save(&self.out.join("report.json"));
            }
        }
        r
    }

    fn variant_data(&self, v: &Variant) -> Result<(Dataset, Dataset)> {
        let ds = self.cfg.dataset.as_ref().expect("validated");
        Ok((
            load_variant(ds, self.cfg.seed, Split::Train, &v.transforms)?,
            load_variant(ds, self.cfg.seed, Split::Test, &v.transforms)?,
        ))
    }

    fn train_variant(&mut self, v: &Variant) -> Result<()> {
        let (tr, te) = self.variant_data(v)?;
        for &mode in &self.cfg.modes {
            let exp = experiment_for(self.cfg, mode, Vec::new());
            let outcome = run_experiment(&exp, &tr, &te).stage(&format!("train {}/{}", v.name, mode.as_str()))?;
            let stem = format!("{}-{}", v.name, mode.as_str());
            let model_file = PathBuf::from("models").join(format!("{stem}.dsnm"));
            let history_file = PathBuf::from("history").join(format!("{stem}.csv"));
            save_model(&outcome.model, self.out.join(&model_file)).stage("save")?;
            write_history(&outcome.history, &self.out.join(&history_file))?;
            let robust_noclip = match (&self.cfg.attack, self.cfg.clip_ablation && mode == Mode::Adversarial) {
                (Some(a), true) => {
                    let (_, test) = prepare(&exp, &tr, &te).stage("attack")?;
                    let noclip = AttackConfig {
                        clip_domain: false,
                        seed: derive_seed(exp.seed, "eval"),
                        ..a.clone()
                    };
                    evaluate_with(&outcome.model, &test, Some(&noclip), false)
                        .stage("attack")?
                        .robust_acc
                }
                _ => None,
            };
            self.report.runs.push(RunRecord {
                variant: v.name.clone(),
                mode: mode.as_str().into(),
                transforms: v.transforms.iter().map(ToString::to_string).collect(),
                model_hash: outcome.model_hash,
                model_file,
                history_file,
                n_test: outcome.test.n,
                clean_acc: Num(outcome.test.clean_acc),
                robust_acc: outcome.test.robust_acc.map(Num),
                robust_wrt_pred: outcome.test.robust_wrt_pred.map(Num),
                robust_noclip: robust_noclip.map(Num),
            });
        }
        Ok(())
    }

    fn sweep(&mut self) -> Result<()> {
        let s = self.cfg.sweep.as_ref().expect("checked");
        let variants = self.cfg.variants();
        let v = match &s.variant {
            Some(name) => variants.iter().find(|v| &v.name == name).expect("validated"),
            None => &variants[0],
        };
        let ds = self.cfg.dataset.as_ref().expect("validated");
        // The swept transform parameter must be applied per point, so the
        // sweep starts from the untransformed data.
        let tr = load_base(ds, self.cfg.seed, Split::Train)?;
        let te = load_base(ds, self.cfg.seed, Split::Test)?;
        let exp = experiment_for(self.cfg, s.mode, v.transforms.clone());
        let rows = sweep(s.axis, &s.values, &exp, &tr, &te).stage("sweep")?;
        self.report.sweep.extend(rows.into_iter().map(|r| SweepRecord {
            variant: v.name.clone(),
            mode: s.mode.as_str().into(),
            axis: r.axis.to_string(),
            value: Num(r.value),
            split: r.split,
            metric: r.metric,
            accuracy: Num(r.accuracy),
            model_hash: r.model_hash,
        }));
        Ok(())
    }

    fn analyze(&mut self) -> Result<()> {
        let variants = self.cfg.variants();
        for req in &self.cfg.analysis {
            let split = match *req {
                AnalysisRequest::Volume { split, .. }
                | AnalysisRequest::Interclass { split, .. }
                | AnalysisRequest::Histogram { split, .. } => split,
                AnalysisRequest::McLinear { .. } => {
                    let rec = analysis(req, None, None, self.cfg.seed)?;
                    self.report.analyses.push(rec);
                    continue;
                }
            };
            let ds_spec = self.cfg.dataset.as_ref().expect("validated");
            for v in &variants {
                let ds = load_variant(ds_spec, self.cfg.seed, split, &v.transforms)?;
                let ds = match (split, ds_spec.train_size, ds_spec.test_size) {
                    (Split::Train, Some(n), _) | (Split::Test, _, Some(n)) => {
                        let stage = format!("subset-{}", split.as_str());
                        robustshift::data::subset(&ds, n, ds_spec.stratified || split == Split::Test, derive_seed(experiment_seed(self.cfg), &stage))
                            .stage("analyze")?
                    }
                    _ => ds,
                };
                let rec = analysis(req, Some(&ds), Some(&v.name), self.cfg.seed)?;
                self.report.analyses.push(rec);
            }
        }
        Ok(())
    }

    fn bounds(&mut self) -> Result<()> {
        for b in &self.cfg.bounds {
            let rec = bounds_record(b).stage("bounds")?;
            self.report.bounds.push(rec);
        }
        Ok(())
    }

    fn results_csv(&self) -> Result<()> {
        if self.report.runs.is_empty() {
            return Ok(());
        }
        let path = self.out.join("results.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let cell = |v: Option<Num>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut rows = vec![vec![
            "variant".to_string(),
            "clean_std".into(),
            "clean_adv".into(),
            "robust".into(),
            "robust_wrt_pred".into(),
            "robust_noclip".into(),
        ]];
        for v in self.cfg.variants() {
            let find = |mode: Mode| {
                self.report
                    .runs
                    .iter()
                    .find(|r| r.variant == v.name && r.mode == mode.as_str())
            };
            let std = find(Mode::Standard);
            let adv = find(Mode::Adversarial);
            rows.push(vec![
                v.name.clone(),
                cell(std.map(|r| r.clean_acc)),
                cell(adv.map(|r| r.clean_acc)),
                cell(adv.and_then(|r| r.robust_acc)),
                cell(adv.and_then(|r| r.robust_wrt_pred)),
                cell(adv.and_then(|r| r.robust_noclip)),
            ]);
        }
        for r in rows {
            w.write_record(&r).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }
}

/// Executes `cfg`, writing `report.json`, `results.csv`, models and
/// training histories under its output directory. On failure the report on
/// disk is marked `failed` with the stage and error.
pub fn run(cfg: &ExperimentConfig, verbose: bool) -> Result<RunReport> {
    cfg.validate()?;
    let out = cfg.output_dir();
    for sub in ["", "models", "history"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
    }
    let hash = run_input_hash(cfg)?;
    let mut runner = Runner {
        cfg,
        out,
        report: RunReport {
            schema: REPORT_SCHEMA,
            run_id: format!("{}-{}", cfg.name, &hash[..12]),
            status: Status::Running,
            failed_stage: None,
            error: None,
            input_hash: hash,
            config: cfg.clone(),
            runs: Vec::new(),
            sweep: Vec::new(),
            analyses: Vec::new(),
            bounds: Vec::new(),
            timings: Vec::new(),
        },
        verbose,
    };
    runner.report.save(&runner.out.join("report.json"))?;
    if cfg.trains() {
        for v in cfg.variants() {
            runner.stage(&format!("train+attack {}", v.name), |r| r.train_variant(&v))?;
        }
    }
    if cfg.sweep.is_some() {
        runner.stage("sweep", Runner::sweep)?;
    }
    if !cfg.analysis.is_empty() {
        runner.stage("analyze", Runner::analyze)?;
    }
    if !cfg.bounds.is_empty() {
        runner.stage("bounds", Runner::bounds)?;
    }
    runner.stage("results", |r| r.results_csv())?;
    runner.report.status = Status::Ok;
    runner.report.save(&runner.out.join("report.json"))?;
    Ok(runner.report)
}
