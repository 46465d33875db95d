//! Command-line entry point: simulation, full runs, ablation sweeps,
//! gradient verification, and embedding export.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 data
//! error.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ssocl_core::engine::{
    self, pretrain_source, run_stream, MetricsFile, PretrainConfig, RunInputs, RunOutput,
    TrainConfig, Variant,
};
use ssocl_core::error::Error;
use ssocl_core::model::{self, ModelConfig};
use ssocl_core::numerics::gradcheck::{run_suite, Fault};
use ssocl_core::numerics::{Real, Tensor};
use ssocl_core::stream::{
    generate_synthetic, load_segments, LabeledDataset, SidecarMeta, Stream, StreamMeta,
    SyntheticConfig,
};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

/// Everything a run needs, mirrored from the library config types by
/// name. Unknown keys are rejected.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    train: TrainConfig,
    synthetic: SyntheticConfig,
    pretrain: PretrainConfig,
    /// Explicit model; when absent the preset flag and stream
    /// dimensions decide.
    model: Option<ModelConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Full,
    NoSsm,
    NoMenm,
    RandomMemory,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoSsm => Variant::NoSsm,
            VariantArg::NoMenm => Variant::NoMenm,
            VariantArg::RandomMemory => Variant::RandomMemory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Parser)]
#[command(
    name = "ssocl",
    about = "Self-supervised online continual learning on multichannel signal streams",
    version,
    after_help = "Config files are JSON objects with `train`, `synthetic`, `pretrain` and\n\
                  optional `model` sections mirroring the library configuration types;\n\
                  unknown keys are rejected. Run `ssocl defaults` to print every default."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config path; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stream plus test and source sets as segment
    /// files.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain on the source set and run the continual loop over the
    /// stream; writes run.jsonl, metrics.json, model.ssoc and the
    /// memory buffer.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// `synthetic` or a path to a `.sseg` stream file.
        #[arg(long, default_value = "synthetic")]
        stream: String,
        /// Pipeline variant.
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
        /// Architecture preset when the config has no explicit model.
        #[arg(long, value_enum, default_value = "desk")]
        preset: PresetArg,
        /// Labeled test segments (`.sseg` with sidecar); required for
        /// file streams.
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Labeled source segments for pretraining file streams;
        /// without it the model starts from random initialization.
        #[arg(long)]
        source_data: Option<PathBuf>,
    },
    /// Run the desk ablation benchmark over several seeds and variants.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Seeds to sweep.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Verify analytic gradients against central finite differences
    /// for every layer and loss.
    Gradcheck {
        /// Random restarts per op.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt one gradient on purpose (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Recompute buffer embeddings with the final model of a completed
    /// run and export them as CSV.
    ExportEmbeddings {
        /// Directory written by `run`.
        #[arg(long)]
        run_dir: PathBuf,
        /// Output CSV path (default: <run_dir>/embeddings.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration as JSON.
    Defaults,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate { common } => cmd_simulate(&common),
        Command::Run { common, stream, variant, preset, test_data, source_data } => {
            cmd_run(&common, &stream, variant.into(), preset, test_data, source_data)
        }
        Command::Ablate { common, seeds } => cmd_ablate(&common, seeds),
        Command::Gradcheck { seeds, inject_fault } => cmd_gradcheck(seeds, inject_fault),
        Command::ExportEmbeddings { run_dir, out } => cmd_export_embeddings(&run_dir, out),
        Command::Defaults => {
            println!(
                "{}",
                serde_json::to_string_pretty(&FileConfig::default()).expect("default config")
            );
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Data(_) | Error::Io(_) => EXIT_DATA,
                _ => EXIT_CONFIG,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<FileConfig, Error> {
    let mut config: FileConfig = match &common.config {
        None => FileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config parse: {e}")))?
        }
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.synthetic.seed = seed;
    }
    Ok(config)
}

fn ensure_out_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

// ── simulate ────────────────────────────────────────────────────────

fn cmd_simulate(common: &CommonArgs) -> Result<(), Error> {
    let config = load_config(common)?;
    ensure_out_dir(&common.out)?;
    let data = generate_synthetic(&config.synthetic)?;
    let rate = config.synthetic.sample_rate_hz as f64;
    let write = |name: &str, segs: &[ssocl_core::stream::Segment], labels: Vec<usize>, subjects: Vec<usize>| {
        ssocl_core::stream::write_segments(
            &common.out.join(name),
            config.synthetic.channels,
            config.synthetic.segment_len,
            segs,
            Some(&SidecarMeta { labels, subjects, sample_rate_hz: rate }),
        )
    };
    write(
        "stream.sseg",
        &data.stream.segments,
        data.stream_meta.labels.clone(),
        data.stream_meta.subjects.clone(),
    )?;
    write(
        "test.sseg",
        &data.test.segments,
        data.test.labels.clone(),
        data.test.subjects.clone(),
    )?;
    write(
        "source.sseg",
        &data.source.segments,
        data.source.labels.clone(),
        data.source.subjects.clone(),
    )?;
    std::fs::write(
        common.out.join("simulate_config.json"),
        serde_json::to_vec_pretty(&config.synthetic)
            .map_err(|e| Error::Data(format!("config echo: {e}")))?,
    )?;
    println!(
        "wrote {} stream / {} test / {} source segments to {}",
        data.stream.segments.len(),
        data.test.len(),
        data.source.len(),
        common.out.display()
    );
    Ok(())
}

// ── run ─────────────────────────────────────────────────────────────

struct RunData {
    stream: Stream,
    stream_meta: StreamMeta,
    test: LabeledDataset,
    source: Option<LabeledDataset>,
}

fn load_run_data(
    config: &FileConfig,
    stream_arg: &str,
    test_data: Option<&Path>,
    source_data: Option<&Path>,
) -> Result<RunData, Error> {
    if stream_arg == "synthetic" {
        let data = generate_synthetic(&config.synthetic)?;
        return Ok(RunData {
            stream: data.stream,
            stream_meta: data.stream_meta,
            test: data.test,
            source: Some(data.source),
        });
    }
    let loaded = load_segments(Path::new(stream_arg))?;
    let (stream_labeled, _) = loaded.into_labeled().map_err(|_| {
        Error::data("file streams need a sidecar with subject ids for boundary logging")
    })?;
    let stream_meta = StreamMeta {
        labels: stream_labeled.labels.clone(),
        subjects: stream_labeled.subjects.clone(),
    };
    let stream = Stream {
        channels: stream_labeled.channels,
        segment_len: stream_labeled.segment_len,
        segments: stream_labeled.segments,
    };
    let test_path = test_data
        .ok_or_else(|| Error::config("--test-data is required for file streams"))?;
    let (test, _) = load_segments(test_path)?.into_labeled()?;
    if test.channels != stream.channels || test.segment_len != stream.segment_len {
        return Err(Error::data("test segments do not match the stream dimensions"));
    }
    let source = match source_data {
        None => None,
        Some(p) => {
            let (s, _) = load_segments(p)?.into_labeled()?;
            if s.channels != stream.channels || s.segment_len != stream.segment_len {
                return Err(Error::data("source segments do not match the stream dimensions"));
            }
            Some(s)
        }
    };
    Ok(RunData { stream, stream_meta, test, source })
}

fn resolve_model(
    config: &FileConfig,
    preset: PresetArg,
    channels: usize,
    segment_len: usize,
    num_classes: usize,
) -> Result<ModelConfig, Error> {
    let model = match &config.model {
        Some(m) => m.clone(),
        None => match preset {
            PresetArg::Desk => ModelConfig::desk(channels, segment_len, num_classes),
            PresetArg::Paper => ModelConfig::paper(channels, segment_len, num_classes),
        },
    };
    if model.input_channels != channels || model.segment_len != segment_len {
        return Err(Error::config(format!(
            "model expects ({}, {}) segments but the stream provides ({channels}, {segment_len})",
            model.input_channels, model.segment_len
        )));
    }
    model.validate()?;
    Ok(model)
}

fn write_run_outputs(
    out_dir: &Path,
    config_echo: serde_json::Value,
    train: &TrainConfig,
    out: &RunOutput,
    stream_dims: (usize, usize),
) -> Result<(), Error> {
    ensure_out_dir(out_dir)?;
    let metrics = MetricsFile::new(config_echo.clone(), train, out);
    std::fs::write(out_dir.join("metrics.json"), metrics.to_json_bytes()?)?;

    // JSON-lines step log with a self-describing header record
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("run.jsonl"))?);
    let header = serde_json::json!({
        "run_id": metrics.run_id,
        "variant": train.variant,
        "config": config_echo,
    });
    writeln!(log, "{header}").map_err(Error::Io)?;
    for step in &out.steps {
        let line = serde_json::to_string(step)
            .map_err(|e| Error::Data(format!("step record: {e}")))?;
        writeln!(log, "{line}").map_err(Error::Io)?;
    }
    let final_record = serde_json::json!({
        "final": true,
        "adap_acc": out.metrics.adap_acc,
        "gen_acc": out.metrics.gen_acc,
        "for_acc": out.metrics.for_acc,
    });
    writeln!(log, "{final_record}").map_err(Error::Io)?;
    log.flush()?;

    model::save_checkpoint(&out.final_model, &out_dir.join("model.ssoc"))?;

    // buffer contents: raw segments with pseudo-labels, plus scores
    let (channels, segment_len) = stream_dims;
    let segments: Vec<ssocl_core::stream::Segment> = out
        .memory
        .entries()
        .iter()
        .map(|e| ssocl_core::stream::Segment { values: e.segment.clone() })
        .collect();
    let labels: Vec<usize> = out.memory.entries().iter().map(|e| e.pseudo_label).collect();
    ssocl_core::stream::write_segments(
        &out_dir.join("buffer.sseg"),
        channels,
        segment_len,
        &segments,
        Some(&SidecarMeta {
            labels,
            subjects: vec![0; segments.len()],
            sample_rate_hz: 0.0,
        }),
    )?;
    let scores = serde_json::json!({
        "run_id": metrics.run_id,
        "entropy": out.memory.entries().iter().map(|e| e.entropy).collect::<Vec<_>>(),
        "arrival_step": out.memory.entries().iter().map(|e| e.arrival_step).collect::<Vec<_>>(),
    });
    std::fs::write(
        out_dir.join("buffer_scores.json"),
        serde_json::to_vec_pretty(&scores).map_err(|e| Error::Data(format!("scores: {e}")))?,
    )?;
    Ok(())
}

fn cmd_run(
    common: &CommonArgs,
    stream_arg: &str,
    variant: Variant,
    preset: PresetArg,
    test_data: Option<PathBuf>,
    source_data: Option<PathBuf>,
) -> Result<(), Error> {
    let mut config = load_config(common)?;
    config.train.variant = variant;
    let data = load_run_data(&config, stream_arg, test_data.as_deref(), source_data.as_deref())?;
    let num_classes = if stream_arg == "synthetic" {
        config.synthetic.num_classes
    } else {
        data.test.labels.iter().copied().max().unwrap_or(0) + 1
    };
    let model_config = resolve_model(
        &config,
        preset,
        data.stream.channels,
        data.stream.segment_len,
        num_classes,
    )?;
    config.model = Some(model_config.clone());
    let seed = config.train.seed;

    let bundle = match &data.source {
        Some(source) => {
            let (bundle, train_acc) =
                pretrain_source(&model_config, &config.pretrain, source, seed)?;
            println!("pretrained on {} source segments (train acc {train_acc:.3})", source.len());
            bundle
        }
        None => {
            println!("no source data: starting from random initialization");
            model::init_model(&model_config, seed)?
        }
    };

    let out = run_stream(
        &bundle,
        RunInputs {
            stream: &data.stream,
            stream_meta: &data.stream_meta,
            test: &data.test,
        },
        &config.train,
    )?;
    let echo = serde_json::to_value(&config)
        .map_err(|e| Error::Data(format!("config echo: {e}")))?;
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(
        common.out.join("config_resolved.json"),
        serde_json::to_vec_pretty(&config).map_err(|e| Error::Data(format!("config: {e}")))?,
    )?;
    write_run_outputs(
        &common.out,
        echo,
        &config.train,
        &out,
        (data.stream.channels, data.stream.segment_len),
    )?;
    println!(
        "AdapAcc {:.4}  GenAcc {:.4}  ForAcc {:+.4} (retention minus adaptation)",
        out.metrics.adap_acc, out.metrics.gen_acc, out.metrics.for_acc
    );
    println!("outputs in {}", common.out.display());
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────

fn cmd_ablate(common: &CommonArgs, seeds: u64) -> Result<(), Error> {
    if seeds == 0 {
        return Err(Error::config("--seeds must be >= 1"));
    }
    ensure_out_dir(&common.out)?;
    let override_config = common.config.as_ref().map(|_| load_config(common)).transpose()?;
    let variants = [Variant::Full, Variant::NoSsm, Variant::NoMenm, Variant::RandomMemory];
    let mut per_variant: Vec<Vec<serde_json::Value>> = vec![Vec::new(); variants.len()];
    let mut gen_means = vec![0.0 as Real; variants.len()];
    let mut for_means = vec![0.0 as Real; variants.len()];
    for seed in 0..seeds {
        let (syn, base_train) = match &override_config {
            Some(cfg) => {
                let mut syn = cfg.synthetic.clone();
                syn.seed = seed;
                let mut train = cfg.train.clone();
                train.seed = seed;
                (syn, train)
            }
            None => engine::ablation_benchmark(seed),
        };
        let data = generate_synthetic(&syn)?;
        let model_config =
            ModelConfig::desk(syn.channels, syn.segment_len, syn.num_classes);
        let pretrain = override_config
            .as_ref()
            .map(|c| c.pretrain.clone())
            .unwrap_or_else(engine::ablation_pretrain);
        let (bundle, _) = pretrain_source(&model_config, &pretrain, &data.source, seed)?;
        for (vi, variant) in variants.iter().enumerate() {
            let cfg = TrainConfig { variant: *variant, ..base_train.clone() };
            let out = run_stream(
                &bundle,
                RunInputs {
                    stream: &data.stream,
                    stream_meta: &data.stream_meta,
                    test: &data.test,
                },
                &cfg,
            )?;
            println!(
                "seed {seed} {variant:?}: AdapAcc {:.3} GenAcc {:.3} ForAcc {:+.3}",
                out.metrics.adap_acc, out.metrics.gen_acc, out.metrics.for_acc
            );
            gen_means[vi] += out.metrics.gen_acc / seeds as Real;
            for_means[vi] += out.metrics.for_acc / seeds as Real;
            per_variant[vi].push(serde_json::json!({
                "seed": seed,
                "adap_acc": out.metrics.adap_acc,
                "gen_acc": out.metrics.gen_acc,
                "for_acc": out.metrics.for_acc,
            }));
        }
    }
    let mut summary = serde_json::Map::new();
    for (vi, variant) in variants.iter().enumerate() {
        let name = serde_json::to_value(variant)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| format!("{variant:?}"));
        summary.insert(
            name,
            serde_json::json!({
                "mean_gen_acc": gen_means[vi],
                "mean_for_acc": for_means[vi],
                "runs": per_variant[vi],
            }),
        );
    }
    std::fs::write(
        common.out.join("ablation.json"),
        serde_json::to_vec_pretty(&serde_json::Value::Object(summary))
            .map_err(|e| Error::Data(format!("summary: {e}")))?,
    )?;
    println!("mean GenAcc: full {:.3}, no_ssm {:.3}, no_menm {:.3}, random_memory {:.3}",
        gen_means[0], gen_means[1], gen_means[2], gen_means[3]);
    println!("mean ForAcc: full {:+.3}, no_ssm {:+.3}, no_menm {:+.3}, random_memory {:+.3}",
        for_means[0], for_means[1], for_means[2], for_means[3]);
    println!("wrote {}", common.out.join("ablation.json").display());
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

fn cmd_gradcheck(seeds: u64, inject_fault: bool) -> Result<(), Error> {
    let fault = if inject_fault { Fault::FlipSign } else { Fault::None };
    let start = std::time::Instant::now();
    let report = run_suite(seeds, fault)?;
    println!("{:<32} {:>14}  result", "op", "max rel err");
    for e in &report.entries {
        println!(
            "{:<32} {:>14.3e}  {}",
            e.op,
            e.max_rel_err,
            if e.pass { "ok" } else { "FAIL" }
        );
    }
    let worst = report.worst().expect("non-empty report");
    println!(
        "worst: {} at {:.3e} (tolerance {:.0e}, {} seeds, {:.1}s)",
        worst.op,
        worst.max_rel_err,
        report.tolerance,
        seeds,
        start.elapsed().as_secs_f64()
    );
    if report.all_pass() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed at op {}",
            report
                .entries
                .iter()
                .find(|e| !e.pass)
                .map(|e| e.op.clone())
                .unwrap_or_default()
        )))
    }
}

// ── export-embeddings ───────────────────────────────────────────────

fn cmd_export_embeddings(run_dir: &Path, out: Option<PathBuf>) -> Result<(), Error> {
    let checkpoint = run_dir.join("model.ssoc");
    if !checkpoint.exists() {
        return Err(Error::data(format!(
            "no checkpoint at {}; run a simulation first",
            checkpoint.display()
        )));
    }
    let bundle = model::load_checkpoint(&checkpoint)?;
    let loaded = load_segments(&run_dir.join("buffer.sseg"))?;
    let meta = loaded
        .meta
        .clone()
        .ok_or_else(|| Error::data("buffer sidecar missing"))?;
    let scores_text = std::fs::read_to_string(run_dir.join("buffer_scores.json"))?;
    let scores: serde_json::Value = serde_json::from_str(&scores_text)
        .map_err(|e| Error::Data(format!("buffer scores: {e}")))?;
    let entropy: Vec<Real> = serde_json::from_value(scores["entropy"].clone())
        .map_err(|e| Error::Data(format!("entropy array: {e}")))?;
    let arrival: Vec<usize> = serde_json::from_value(scores["arrival_step"].clone())
        .map_err(|e| Error::Data(format!("arrival array: {e}")))?;
    if entropy.len() != loaded.segments.len() || arrival.len() != loaded.segments.len() {
        return Err(Error::data("buffer score arrays do not match segment count"));
    }
    // normalization flag from the run's resolved config
    let normalize = std::fs::read_to_string(run_dir.join("config_resolved.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<FileConfig>(&t).ok())
        .map(|c| c.train.ssl.normalize_embeddings)
        .unwrap_or(true);

    let n = loaded.segments.len();
    let mut values = Vec::with_capacity(n * loaded.channels * loaded.segment_len);
    for s in &loaded.segments {
        values.extend_from_slice(&s.values);
    }
    let batch = Tensor::new(vec![n, loaded.channels, loaded.segment_len], values)?;
    let z = model::embed_batch(&bundle, &batch, normalize)?;
    let d = z.shape()[1];
    let mut csv = String::from("arrival_step,pseudo_label,entropy");
    for i in 0..d {
        csv.push_str(&format!(",embedding_{i}"));
    }
    csv.push('\n');
    for i in 0..n {
        csv.push_str(&format!("{},{},{}", arrival[i], meta.labels[i], entropy[i]));
        for v in z.row(i) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let out_path = out.unwrap_or_else(|| run_dir.join("embeddings.csv"));
    std::fs::write(&out_path, csv)?;
    // sidecar so the export is self-describing without polluting the CSV
    let run_id = scores["run_id"].as_str().unwrap_or("unknown").to_string();
    std::fs::write(
        out_path.with_extension("meta.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "run_id": run_id,
            "rows": n,
            "embedding_dim": d,
            "normalized": normalize,
        }))
        .map_err(|e| Error::Data(format!("export meta: {e}")))?,
    )?;
    println!("wrote {n} rows x {} columns to {}", 3 + d, out_path.display());
    Ok(())
}
