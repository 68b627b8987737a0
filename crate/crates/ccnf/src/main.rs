//! Command-line surface: generate synthetic data, train a flow, edit and
//! sample embeddings, and run the severity-sweep evaluation.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
//! Diagnostics go to stderr and data to files; stdout carries a one-line
//! summary per run. Every run writes one manifest beside its primary output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use ccnf::error::Error;
use ccnf::eval::{fit_probe, severity_sweep_report, SweepLevel, DEFAULT_IMPOSTERS_PER_TRIAL};
use ccnf::field::{FieldKind, MlpField};
use ccnf::flow::{AttrStats, AttributeVector, EmbeddingVector, FlowModel};
use ccnf::io::{Dataset, KvDoc};
use ccnf::solver::SolverConfig;
use ccnf::synth::{AttrSampler, ConditionalGaussianGenerator};
use ccnf::train::{apply_stats, train, TraceChoice, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "ccnf",
    version,
    about = "Conditional continuous normalizing flows for embedding editing",
    after_help = "Set CCNF_THREADS to bound the worker thread count."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic conditional-Gaussian dataset.
    Gen(GenArgs),
    /// Train a flow on a dataset file.
    Train(TrainArgs),
    /// Edit embeddings with the two-pass manipulation block.
    Edit(EditArgs),
    /// Sample embeddings at a fixed attribute vector.
    Sample(SampleArgs),
    /// Severity-sweep evaluation: probe predictions and EER per level.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Embedding dimension.
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Attribute dimension.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skew attribute sampling toward low severities (Beta(2,5)).
    #[arg(long)]
    skew: bool,
    /// Raw units per axis, e.g. `0:100,0:200` (default 0:1 per axis).
    #[arg(long)]
    ranges: Option<String>,
    /// Reuse an existing generator spec instead of building one.
    #[arg(long)]
    from_spec: Option<PathBuf>,
    /// Output dataset path (.csv); the generator spec lands beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (csv with emb_*/attr_* columns).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Key/value config file mirroring the training fields; explicit flags
    /// override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    /// Hidden width of the flow block.
    #[arg(long)]
    hidden: Option<usize>,
    /// Trace estimator: `exact` or `hutchinson`.
    #[arg(long)]
    trace: Option<String>,
    /// Probe count for the hutchinson estimator.
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Declared raw ranges per axis, e.g. `0:100,0:200`; default fits the
    /// observed per-dimension min/max.
    #[arg(long)]
    ranges: Option<String>,
    /// Take raw ranges from a generator spec file.
    #[arg(long)]
    ranges_from: Option<PathBuf>,
    /// NLL curve output (default `<out>.nll.csv`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    /// Checkpoint path.
    #[arg(long)]
    model: PathBuf,
    /// Input dataset (embeddings with raw attribute columns).
    #[arg(long)]
    data: PathBuf,
    /// Output path; with `--levels`, one file per level is derived from it.
    #[arg(long)]
    out: PathBuf,
    /// Attribute axis for single-axis modes.
    #[arg(long)]
    axis: Option<usize>,
    /// Single raw level for the chosen axis.
    #[arg(long)]
    level: Option<f64>,
    /// Comma-separated raw levels; emits one output file per level.
    #[arg(long)]
    levels: Option<String>,
    /// Full raw target vector, comma-separated.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Number of samples to draw.
    #[arg(long)]
    n: usize,
    /// Raw attribute vector, comma-separated.
    #[arg(long)]
    attr: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset used to fit the attribute probe.
    #[arg(long)]
    probe_data: PathBuf,
    /// Test dataset to edit and score.
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long)]
    axis: usize,
    /// Comma-separated raw levels; the token `identity` keeps each sample's
    /// own value.
    #[arg(long)]
    levels: String,
    #[arg(long, default_value_t = 1e-6)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_IMPOSTERS_PER_TRIAL)]
    imposters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path (.csv); a human-readable `.txt` twin lands beside it.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Edit(args) => cmd_edit(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Instability { .. } | Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("CCNF_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

type CmdResult = Result<String, Error>;

// ── manifests ───────────────────────────────────────────────────────────

fn write_manifest(
    command: &str,
    config: &KvDoc,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<(), Error> {
    let primary = outputs
        .first()
        .ok_or_else(|| Error::InvalidInput("run produced no outputs".into()))?;
    let mut doc = KvDoc::new("ccnf-manifest");
    doc.push("command", command);
    doc.push("argv", std::env::args().collect::<Vec<_>>().join(" "));
    doc.push("version", env!("CARGO_PKG_VERSION"));
    doc.push("seed", seed);
    let mut hasher = Sha256::new();
    hasher.update(config.render().as_bytes());
    doc.push("config_hash", format!("{:x}", hasher.finalize()));
    for (i, p) in inputs.iter().enumerate() {
        doc.push(&format!("input.{i}"), p.display());
    }
    for (i, p) in outputs.iter().enumerate() {
        doc.push(&format!("output.{i}"), p.display());
    }
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    doc.push("timestamp_unix", ts);
    let path = manifest_path(primary);
    doc.write(&path)
}

fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut os = primary_output.as_os_str().to_os_string();
    os.push(".manifest");
    PathBuf::from(os)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}{ext}"))
}

fn parse_ranges(s: &str) -> Result<Vec<(f64, f64)>, Error> {
    s.split(',')
        .map(|tok| {
            let (lo, hi) = tok
                .split_once(':')
                .ok_or_else(|| Error::InvalidInput(format!("bad range `{tok}` (want lo:hi)")))?;
            let lo: f64 = lo
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad range bound `{lo}`")))?;
            let hi: f64 = hi
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad range bound `{hi}`")))?;
            Ok((lo, hi))
        })
        .collect()
}

fn parse_floats(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad number `{tok}`")))
        })
        .collect()
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_gen(args: GenArgs) -> CmdResult {
    if args.n == 0 {
        return Err(Error::InvalidInput("--n must be >= 1".into()));
    }
    let gen = match &args.from_spec {
        Some(spec) => {
            let mut g = ConditionalGaussianGenerator::load(spec)?.with_seed(args.seed);
            if args.skew {
                g = g.with_sampler(AttrSampler::SkewLow);
            }
            g
        }
        None => {
            let mut g = ConditionalGaussianGenerator::random(args.d, args.k, args.seed);
            if let Some(r) = &args.ranges {
                g = g.with_ranges(parse_ranges(r)?)?;
            }
            if args.skew {
                g = g.with_sampler(AttrSampler::SkewLow);
            }
            g
        }
    };
    let ds = gen.generate_dataset(args.n)?;
    ds.write_csv(&args.out)?;
    let spec_path = args.out.with_extension("gen.kv");
    gen.save(&spec_path)?;
    let config = gen.to_document();
    let inputs: Vec<&Path> = args.from_spec.iter().map(|p| p.as_path()).collect();
    write_manifest("gen", &config, args.seed, &inputs, &[&args.out, &spec_path])?;
    Ok(format!(
        "gen: wrote {} samples (d={}, k={}) to {}",
        ds.len(),
        gen.d(),
        gen.k(),
        args.out.display()
    ))
}

/// Resolves training settings: explicit flag, then config file, then
/// default. Returns the config plus the hidden width and the resolved
/// key/value document (hashed into the manifest).
fn resolved_train_config(args: &TrainArgs) -> Result<(TrainConfig, usize, KvDoc), Error> {
    let file = match &args.config {
        Some(path) => Some(KvDoc::read(path, "ccnf-train-config")?),
        None => None,
    };
    fn pick<T: std::str::FromStr>(
        flag: Option<T>,
        file: &Option<KvDoc>,
        key: &str,
        default: T,
    ) -> Result<T, Error> {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Some(doc) = file {
            if doc.get(key).is_some() {
                return doc.parse(key);
            }
        }
        Ok(default)
    }
    let defaults = TrainConfig::default();
    let trace_name = pick(args.trace.clone(), &file, "trace", "exact".to_string())?;
    let probes = pick(args.probes, &file, "probes", 1)?;
    let trace = match trace_name.as_str() {
        "exact" => TraceChoice::Exact,
        "hutchinson" => TraceChoice::Hutchinson { probes },
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown trace estimator `{other}` (want exact|hutchinson)"
            )))
        }
    };
    let cfg = TrainConfig {
        batch_size: pick(args.batch_size, &file, "batch_size", defaults.batch_size)?,
        lr0: pick(args.lr0, &file, "lr0", defaults.lr0)?,
        decay: pick(args.decay, &file, "decay", defaults.decay)?,
        decay_every: pick(args.decay_every, &file, "decay_every", defaults.decay_every)?,
        epochs: pick(args.epochs, &file, "epochs", defaults.epochs)?,
        trace,
        seed: pick(args.seed, &file, "seed", defaults.seed)?,
    };
    cfg.validate()?;
    let hidden = pick(args.hidden, &file, "hidden", 64)?;
    let mut doc = KvDoc::new("ccnf-train-config");
    doc.push("batch_size", cfg.batch_size);
    doc.push("lr0", cfg.lr0);
    doc.push("decay", cfg.decay);
    doc.push("decay_every", cfg.decay_every);
    doc.push("epochs", cfg.epochs);
    doc.push("trace", &trace_name);
    doc.push("probes", probes);
    doc.push("seed", cfg.seed);
    doc.push("hidden", hidden);
    Ok((cfg, hidden, doc))
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let ds = Dataset::read_csv(&args.data)?;
    if ds.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let (cfg, hidden, config_doc) = resolved_train_config(&args)?;

    let stats = if let Some(r) = &args.ranges {
        AttrStats::from_ranges(parse_ranges(r)?)?
    } else if let Some(spec) = &args.ranges_from {
        ConditionalGaussianGenerator::load(spec)?.attr_stats()
    } else {
        AttrStats::from_data(&ds.attributes)?
    };
    if stats.k() != ds.k {
        return Err(Error::DimensionMismatch {
            what: "attribute ranges",
            expected: ds.k,
            got: stats.k(),
        });
    }
    let normalized = apply_stats(&stats, &ds.attributes)?;
    let data: Vec<(EmbeddingVector, AttributeVector)> = ds
        .embeddings
        .iter()
        .zip(normalized)
        .map(|(e, a)| Ok((EmbeddingVector::new(e.clone())?, a)))
        .collect::<Result<_, Error>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let field = FieldKind::Mlp(MlpField::new(ds.d, ds.k, hidden, &mut rng));
    let model = FlowModel::new(field, SolverConfig::default(), stats)?;

    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".nll").with_extension("csv"));

    match train(model, data, cfg.clone()) {
        Ok(report) => {
            report.model.save(&args.out)?;
            let mut curve = String::from("epoch,nll,lr\n");
            for (e, (nll, lr)) in report.nll.iter().zip(&report.learning_rates).enumerate() {
                curve.push_str(&format!("{e},{nll},{lr}\n"));
            }
            std::fs::write(&report_path, curve)?;
            write_manifest(
                "train",
                &config_doc,
                cfg.seed,
                &[args.data.as_path()],
                &[args.out.as_path(), report_path.as_path()],
            )?;
            let final_nll = report.nll.last().copied().unwrap_or(f64::NAN);
            Ok(format!(
                "train: {} epochs in {:.1}s, final NLL {:.4}, checkpoint {}",
                report.nll.len(),
                report.wall_secs,
                final_nll,
                args.out.display()
            ))
        }
        Err(abort) => {
            // Keep the last good checkpoint, then fail with the numerical
            // error so scripts see exit code 3.
            abort.last_good.save(&args.out)?;
            eprintln!(
                "training aborted at epoch {}; last good checkpoint written to {}",
                abort.epoch,
                args.out.display()
            );
            Err(abort.error)
        }
    }
}

fn load_pairs(
    model: &FlowModel,
    ds: &Dataset,
) -> Result<Vec<(EmbeddingVector, AttributeVector)>, Error> {
    if ds.d != model.d() || ds.k != model.k() {
        return Err(Error::DimensionMismatch {
            what: "dataset dims vs model",
            expected: model.d(),
            got: ds.d,
        });
    }
    ds.embeddings
        .iter()
        .zip(&ds.attributes)
        .map(|(e, raw)| {
            let (a, _) = model.attr_stats().normalize(raw)?;
            Ok((EmbeddingVector::new(e.clone())?, a))
        })
        .collect()
}

fn cmd_edit(args: EditArgs) -> CmdResult {
    let model = FlowModel::load(&args.model)?;
    let ds = Dataset::read_csv(&args.data)?;
    let pairs = load_pairs(&model, &ds)?;

    enum Mode {
        SingleLevel { axis: usize, level: f64 },
        Sweep { axis: usize, levels: Vec<f64> },
        Target(Vec<f64>),
    }
    let mode = match (&args.axis, &args.level, &args.levels, &args.target) {
        (Some(axis), Some(level), None, None) => Mode::SingleLevel {
            axis: *axis,
            level: *level,
        },
        (Some(axis), None, Some(levels), None) => Mode::Sweep {
            axis: *axis,
            levels: parse_floats(levels)?,
        },
        (None, None, None, Some(t)) => Mode::Target(parse_floats(t)?),
        _ => {
            return Err(Error::InvalidInput(
                "choose one of --axis+--level, --axis+--levels, or --target".into(),
            ))
        }
    };

    let edit_at = |axis: usize, level: f64, out_path: &Path| -> Result<usize, Error> {
        let mut out = Dataset::new(ds.d, ds.k);
        let mut clamped = 0usize;
        for ((s, a), raw) in pairs.iter().zip(&ds.attributes) {
            let r = model.edit_single_axis(s, a, axis, level)?;
            clamped += r.clamped as usize;
            let mut raw_out = raw.clone();
            let (norm_level, _) = model.attr_stats().normalize_component(axis, level)?;
            raw_out[axis] = model.attr_stats().denormalize_component(axis, norm_level);
            out.push(r.embedding.into_values(), raw_out);
        }
        out.write_csv(out_path)?;
        Ok(clamped)
    };

    let mut config_doc = KvDoc::new("ccnf-edit-config");
    config_doc.push("model", args.model.display());
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut clamp_total = 0usize;
    match mode {
        Mode::SingleLevel { axis, level } => {
            config_doc.push("axis", axis);
            config_doc.push("level", level);
            clamp_total += edit_at(axis, level, &args.out)?;
            outputs.push(args.out.clone());
        }
        Mode::Sweep { axis, levels } => {
            config_doc.push("axis", axis);
            config_doc.push(
                "levels",
                levels
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
            for level in &levels {
                let path = with_suffix(&args.out, &format!(".level{level}"));
                clamp_total += edit_at(axis, *level, &path)?;
                outputs.push(path);
            }
        }
        Mode::Target(raw_target) => {
            config_doc.push(
                "target",
                raw_target
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
            let (a_target, clamped) = model.attr_stats().normalize(&raw_target)?;
            if clamped {
                clamp_total += 1;
            }
            let mut out = Dataset::new(ds.d, ds.k);
            for (s, a) in &pairs {
                let e = model.edit(s, a, &a_target)?;
                out.push(e.into_values(), raw_target.clone());
            }
            out.write_csv(&args.out)?;
            outputs.push(args.out.clone());
        }
    }
    if clamp_total > 0 {
        eprintln!("warning: {clamp_total} edit target(s) clamped into the axis range");
    }
    let out_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(
        "edit",
        &config_doc,
        0,
        &[args.model.as_path(), args.data.as_path()],
        &out_refs,
    )?;
    Ok(format!(
        "edit: {} record(s) across {} output file(s)",
        ds.len(),
        outputs.len()
    ))
}

fn cmd_sample(args: SampleArgs) -> CmdResult {
    if args.n == 0 {
        return Err(Error::InvalidInput("--n must be >= 1".into()));
    }
    let model = FlowModel::load(&args.model)?;
    let raw = parse_floats(&args.attr)?;
    let (a, clamped) = model.attr_stats().normalize(&raw)?;
    if clamped {
        eprintln!("warning: attribute vector clamped into the declared ranges");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut out = Dataset::new(model.d(), model.k());
    for _ in 0..args.n {
        let s = model.sample(&a, &mut rng)?;
        out.push(s.into_values(), raw.clone());
    }
    out.write_csv(&args.out)?;
    let mut config_doc = KvDoc::new("ccnf-sample-config");
    config_doc.push("model", args.model.display());
    config_doc.push("n", args.n);
    config_doc.push("attr", &args.attr);
    config_doc.push("seed", args.seed);
    write_manifest(
        "sample",
        &config_doc,
        args.seed,
        &[args.model.as_path()],
        &[args.out.as_path()],
    )?;
    Ok(format!(
        "sample: drew {} embedding(s) at attr [{}] into {}",
        args.n,
        args.attr,
        args.out.display()
    ))
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let model = FlowModel::load(&args.model)?;
    let probe_ds = Dataset::read_csv(&args.probe_data)?;
    let test_ds = Dataset::read_csv(&args.test_data)?;
    let probe = fit_probe(&probe_ds, args.lambda)?;
    let levels: Vec<SweepLevel> = args
        .levels
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            if tok.eq_ignore_ascii_case("identity") {
                Ok(SweepLevel::Identity)
            } else {
                tok.parse::<f64>()
                    .map(SweepLevel::Raw)
                    .map_err(|_| Error::InvalidInput(format!("bad level `{tok}`")))
            }
        })
        .collect::<Result<_, Error>>()?;
    if levels.is_empty() {
        return Err(Error::InvalidInput("no sweep levels given".into()));
    }
    let report = severity_sweep_report(
        &model,
        &probe,
        &test_ds,
        args.axis,
        &levels,
        args.imposters,
        args.seed,
    )?;
    std::fs::write(&args.out, report.to_csv_string())?;
    let txt_path = args.out.with_extension("txt");
    std::fs::write(&txt_path, report.to_table_string())?;
    let clamped: usize = report.rows.iter().map(|r| r.clamped).sum();
    if clamped > 0 {
        eprintln!("warning: {clamped} edit target(s) clamped into the axis range");
    }
    let mut config_doc = KvDoc::new("ccnf-eval-config");
    config_doc.push("model", args.model.display());
    config_doc.push("axis", args.axis);
    config_doc.push("levels", &args.levels);
    config_doc.push("lambda", args.lambda);
    config_doc.push("imposters", args.imposters);
    config_doc.push("seed", args.seed);
    write_manifest(
        "eval",
        &config_doc,
        args.seed,
        &[
            args.model.as_path(),
            args.probe_data.as_path(),
            args.test_data.as_path(),
        ],
        &[args.out.as_path(), txt_path.as_path()],
    )?;
    Ok(format!(
        "eval: axis {} over {} level(s), report {}",
        args.axis,
        report.rows.len(),
        args.out.display()
    ))
}
