mod svg;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tdcal::ingest::{
    self, LoadedData, Manifest, MetricTable, ReplicationReport, Report, SplitRecord, SplitSpec, ValueKind,
    WeightsFile, MANIFEST_VERSION, REPORT_VERSION,
};
use tdcal::metrics::{build_bins, reliability_diagram, BinPolicy};
use tdcal::pipeline::{aggregate, calibrate, evaluate_subset, Aggregated, Aggregation, CalibrationPlan};
use tdcal::posthoc::{mapped_scores, Alpha2Mode, EvalConfig, EvalSample, MappingConfig};
use tdcal::synth::{generate, SynthSpec};
use tdcal::{CalError, TruthConfig};

#[derive(Parser)]
#[command(name = "tdcal", version, args_override_self = true, about = "Truth-discovery ensembles and post-hoc confidence calibration")]
struct Cli {
    /// Format of the summary printed on stdout.
    #[arg(long, value_enum, global = true, default_value_t = ReportFormat::Json)]
    report: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Tsv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ensemble in the ingest format.
    Synth(SynthArgs),
    /// Run truth discovery and write truth vectors, HV and reliabilities.
    Discover(DiscoverArgs),
    /// Fit attenuation weights on calibration splits and report held-out metrics.
    Calibrate(CalibrateArgs),
    /// Report metrics with and without a fitted mapping.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    De,
    Tde,
    Atde,
}

impl From<VariantArg> for Aggregation {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::De => Aggregation::Mean,
            VariantArg::Tde => Aggregation::Tde,
            VariantArg::Atde => Aggregation::Atde,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Regularize {
    Truth,
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Alpha2Arg {
    PerBinPsi,
    Zero,
    Constant,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    sources: usize,
    #[arg(long, default_value_t = 0.3)]
    concentration: f64,
    /// Distortion temperature; one value shared by all sources or one per source.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    tau: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write log-probabilities instead of probabilities.
    #[arg(long)]
    logits: bool,
}

#[derive(Args, Clone)]
struct TruthArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::Atde)]
    variant: VariantArg,
    #[arg(long, default_value_t = (-8.0f64).exp())]
    epsilon: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
}

impl TruthArgs {
    fn config(&self) -> TruthConfig {
        TruthConfig { epsilon: self.epsilon, max_iters: self.max_iters, ..TruthConfig::default() }
    }
}

#[derive(Args)]
struct DiscoverArgs {
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    truth: TruthArgs,
    #[arg(long, default_value_t = 15)]
    bins: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    truth: TruthArgs,
    #[arg(long, default_value_t = 15)]
    bins: usize,
    #[arg(long, default_value_t = 70)]
    epochs_hist: usize,
    #[arg(long, default_value_t = 5)]
    epochs_kde: usize,
    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha1: f64,
    #[arg(long, value_enum, default_value_t = Alpha2Arg::PerBinPsi)]
    alpha2_mode: Alpha2Arg,
    /// Value of α2 for `--alpha2-mode constant`.
    #[arg(long, default_value_t = 1.0)]
    alpha2: f64,
    #[arg(long, value_enum, default_value_t = Regularize::Truth)]
    regularize: Regularize,
    #[arg(long, default_value_t = 5)]
    replications: usize,
    /// Seed of the first replication; replication r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Weights written by `calibrate`. Without them only the raw metrics are reported.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    truth: TruthArgs,
    #[arg(long, default_value_t = 15)]
    bins: usize,
    #[arg(long, value_enum, default_value_t = Regularize::Truth)]
    regularize: Regularize,
    /// Also render the reliability diagram as SVG.
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            let numerical = e.chain().any(|c| c.downcast_ref::<CalError>().is_some_and(CalError::is_numerical));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let out = match &cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Discover(a) => cmd_discover(a)?,
        Command::Calibrate(a) => cmd_calibrate(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
    };
    let text = match cli.report {
        ReportFormat::Json => serde_json::to_string_pretty(&out.json)? + "\n",
        ReportFormat::Tsv => out.tsv,
    };
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

struct Output {
    json: serde_json::Value,
    tsv: String,
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load(manifest: &Path) -> Result<LoadedData> {
    let data = ingest::load(manifest)?;
    if data.renormalized > 0 {
        eprintln!("warning: {} prediction rows were renormalized onto the simplex", data.renormalized);
    }
    Ok(data)
}

fn metrics_tsv(table: &MetricTable) -> String {
    let with_std = table.acc.before_std.is_some();
    let mut s = String::from(if with_std { "metric\tbefore\tbefore_std\tafter\tafter_std\n" } else { "metric\tbefore\tafter\n" });
    for (name, p) in table.rows() {
        if with_std {
            s += &format!(
                "{name}\t{}\t{}\t{}\t{}\n",
                p.before,
                p.before_std.unwrap_or(0.0),
                p.after,
                p.after_std.unwrap_or(0.0)
            );
        } else {
            s += &format!("{name}\t{}\t{}\n", p.before, p.after);
        }
    }
    s
}

fn cmd_synth(a: &SynthArgs) -> Result<Output> {
    let spec = SynthSpec {
        num_samples: a.samples,
        num_classes: a.classes,
        num_sources: a.sources,
        dirichlet_concentration: a.concentration,
        distortion_temperature: a.tau.clone(),
        source_noise_scale: a.noise,
        seed: a.seed,
    };
    let data = generate(&spec)?;
    let ens = &data.ensemble;
    make_dir(&a.out_dir)?;
    let mut sources = Vec::with_capacity(ens.num_sources());
    for s in 0..ens.num_sources() {
        let name = format!("source_{s}.csv");
        let preds = ens.source_predictions(s);
        let path = a.out_dir.join(&name);
        if a.logits {
            let rows: Vec<Vec<f64>> =
                preds.iter().map(|p| p.as_slice().iter().map(|x| x.max(1e-300).ln()).collect()).collect();
            ingest::write_matrix(&path, &rows)?;
        } else {
            ingest::write_matrix(&path, &preds)?;
        }
        sources.push(name);
    }
    ingest::write_labels(&a.out_dir.join("labels.csv"), ens.labels())?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        num_classes: ens.num_classes(),
        values: if a.logits { ValueKind::Logits } else { ValueKind::Probabilities },
        labels: "labels.csv".into(),
        sources,
        hv: None,
    };
    let manifest_path = a.out_dir.join("manifest.json");
    ingest::write_manifest(&manifest_path, &manifest)?;
    let json = json!({
        "version": REPORT_VERSION,
        "command": "synth",
        "seed": a.seed,
        "samples": ens.num_samples(),
        "classes": ens.num_classes(),
        "sources": ens.num_sources(),
        "manifest": manifest_path.display().to_string(),
    });
    let tsv = format!(
        "seed\tsamples\tclasses\tsources\tmanifest\n{}\t{}\t{}\t{}\t{}\n",
        a.seed,
        ens.num_samples(),
        ens.num_classes(),
        ens.num_sources(),
        manifest_path.display()
    );
    Ok(Output { json, tsv })
}

fn eval_config(bins: usize, num_classes: usize) -> EvalConfig {
    EvalConfig { bins, kde: tdcal::metrics::KdeConfig::for_classes(num_classes) }
}

fn cmd_discover(a: &DiscoverArgs) -> Result<Output> {
    let data = load(&a.manifest)?;
    let ens = &data.ensemble;
    let cfg = a.truth.config();
    cfg.validate()?;
    let eval = eval_config(a.bins, ens.num_classes());
    make_dir(&a.out_dir)?;

    let mut rows = Vec::new();
    let mut tsv = String::from("method\tece_kde\tece\tacc\n");
    for how in [Aggregation::Mean, Aggregation::Tde, Aggregation::Atde] {
        let agg = aggregate(ens, how, &cfg, false)?;
        let m = evaluate_subset(&agg.samples, None, None, &eval)?.before;
        tsv += &format!("{}\t{}\t{}\t{}\n", how.name(), m.ece_kde, m.ece, m.acc);
        rows.push(json!({ "method": how.name(), "ece_kde": m.ece_kde, "ece": m.ece, "acc": m.acc }));
        if how == Aggregation::from(a.truth.variant) {
            write_truth_files(&a.out_dir, ens.source_ids(), how, &agg, &cfg, ens)?;
        }
    }
    let json = json!({
        "version": REPORT_VERSION,
        "command": "discover",
        "variant": Aggregation::from(a.truth.variant).name(),
        "samples": ens.num_samples(),
        "rows": rows,
    });
    Ok(Output { json, tsv })
}

fn write_truth_files(
    dir: &Path,
    source_ids: &[String],
    how: Aggregation,
    agg: &Aggregated,
    cfg: &TruthConfig,
    ens: &tdcal::EnsembleTensor,
) -> Result<()> {
    let probs: Vec<&tdcal::ProbVector> = agg.samples.iter().map(|s| &s.probs).collect();
    ingest::write_matrix(&dir.join("truth.csv"), &probs)?;
    let results = match &agg.truth {
        Some(t) => t.clone(),
        // HV and reliabilities around the accuracy-preserving truth
        None => aggregate(ens, how, cfg, true)?.truth.expect("truth discovery ran"),
    };
    ingest::save_hv(&dir.join("hv.csv"), &results)?;
    ingest::save_reliability_summary(&dir.join("reliabilities.csv"), source_ids, &results)?;
    Ok(())
}

fn samples_for(data: &LoadedData, how: Aggregation, cfg: &TruthConfig, regularize: bool) -> Result<Vec<EvalSample>> {
    let use_file_hv = regularize && data.hv.is_some();
    let mut samples = aggregate(&data.ensemble, how, cfg, regularize && !use_file_hv)?.samples;
    if use_file_hv {
        for (s, &hv) in samples.iter_mut().zip(data.hv.as_ref().unwrap()) {
            s.hv = hv;
        }
    }
    Ok(samples)
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<Output> {
    if a.replications == 0 {
        anyhow::bail!(CalError::InvalidConfig("--replications must be at least 1".into()));
    }
    let data = load(&a.manifest)?;
    let cfg = a.truth.config();
    cfg.validate()?;
    let how = Aggregation::from(a.truth.variant);
    let regularize = a.regularize == Regularize::Truth;
    let samples = samples_for(&data, how, &cfg, regularize)?;
    let alpha2_mode = match a.alpha2_mode {
        Alpha2Arg::PerBinPsi => Alpha2Mode::PerBinPsi,
        Alpha2Arg::Zero => Alpha2Mode::Zero,
        Alpha2Arg::Constant => Alpha2Mode::Constant(a.alpha2),
    };
    make_dir(&a.out_dir)?;

    let mut reports = Vec::new();
    let mut replications = Vec::new();
    for r in 0..a.replications {
        let seed = a.seed.wrapping_add(r as u64);
        let mut plan = CalibrationPlan::new(data.ensemble.num_classes(), seed);
        plan.bins = a.bins;
        plan.split = SplitSpec { seed, fraction: a.split_fraction };
        plan.mapping = MappingConfig { alpha1: a.alpha1, alpha2_mode };
        for t in [&mut plan.hist, &mut plan.kde] {
            t.batch_size = a.batch_size;
            t.learning_rate = a.lr;
        }
        plan.hist.epochs = a.epochs_hist;
        plan.kde.epochs = a.epochs_kde;
        let rep = calibrate(&samples, &plan)?;
        let wf = WeightsFile::new(
            &rep.weights,
            how,
            regularize,
            Some(SplitRecord { seed, fraction: a.split_fraction }),
        );
        ingest::save_weights(&a.out_dir.join(format!("weights_{r}.json")), &wf)?;
        replications.push(ReplicationReport {
            seed,
            calibration_samples: rep.calibration.len(),
            evaluation_samples: rep.evaluation.len(),
            metrics: MetricTable::from_report(&rep.report),
        });
        reports.push(rep.report);
    }
    let report = Report {
        version: REPORT_VERSION,
        command: "calibrate".into(),
        seed: a.seed,
        samples: data.ensemble.num_samples(),
        metrics: MetricTable::summarize(&reports, a.replications > 1),
        replications,
    };
    ingest::save_report(&a.out_dir.join("report.json"), &report)?;
    Ok(Output { json: serde_json::to_value(&report)?, tsv: metrics_tsv(&report.metrics) })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Output> {
    let data = load(&a.manifest)?;
    let cfg = a.truth.config();
    cfg.validate()?;
    let wf = a.weights.as_deref().map(ingest::load_weights).transpose()?;
    let weights = wf.as_ref().map(WeightsFile::to_weights).transpose()?;
    let (how, regularize) = match &wf {
        Some(w) => (w.aggregation, w.regularized),
        None => (Aggregation::from(a.truth.variant), a.regularize == Regularize::Truth),
    };
    let samples = samples_for(&data, how, &cfg, regularize)?;
    let split = wf.as_ref().and_then(|w| w.split);
    let eval_idx = match split {
        Some(s) => Some(ingest::split(samples.len(), &SplitSpec { seed: s.seed, fraction: s.fraction })?.1),
        None => None,
    };
    let ecfg = eval_config(a.bins, data.ensemble.num_classes());
    let report = evaluate_subset(&samples, eval_idx.as_deref(), weights.as_ref(), &ecfg)?;

    let subset: Vec<EvalSample> = match &eval_idx {
        Some(idx) => idx.iter().map(|&i| samples[i].clone()).collect(),
        None => samples.clone(),
    };
    let scored = mapped_scores(weights.as_ref(), &subset);
    let conf: Vec<f64> = scored.iter().map(|s| s.confidence).collect();
    let bins = build_bins(&conf, a.bins.min(conf.len()), BinPolicy::EqualMass)?;
    let diagram = reliability_diagram(&scored, &bins);
    make_dir(&a.out_dir)?;
    let csv_path = a.out_dir.join("reliability.csv");
    let mut file = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    diagram.write_csv(&mut file).with_context(|| format!("writing {}", csv_path.display()))?;
    if let Some(path) = &a.svg {
        fs::write(path, svg::reliability_svg(&diagram)).with_context(|| format!("writing {}", path.display()))?;
    }

    let out = Report {
        version: REPORT_VERSION,
        command: "evaluate".into(),
        seed: split.map_or(0, |s| s.seed),
        samples: report.samples,
        metrics: MetricTable::from_report(&report),
        replications: Vec::new(),
    };
    ingest::save_report(&a.out_dir.join("report.json"), &out)?;
    Ok(Output { json: serde_json::to_value(&out)?, tsv: metrics_tsv(&out.metrics) })
}
