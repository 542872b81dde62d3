//! `camodet` command-line interface.
//!
//! Exit codes: 0 success, 1 I/O or runtime error, 2 usage error, 3 failed
//! acceptance check (`gradcheck`, `bench-synth --assert`).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camodet_core::alignment::EmbeddingField;
use camodet_core::dataset::{
    self, default_stopwords, parse_stopwords, ConvertOptions, MIN_PHRASES,
};
use camodet_core::eval::{self, EvalConfig};
use camodet_core::gradcheck::{self, GradcheckConfig};
use camodet_core::synth::{run_benchmark, BenchConfig, BenchReport};
use camodet_core::textfusion::{fuse, refine};
use camodet_core::{
    embfile, AdapterParams, Error, FusionVariant, GateVariant, Matrix, Result, SvdRank,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::FileConfig;

#[derive(Parser)]
#[command(
    name = "camodet",
    version,
    about = "Camouflaged open-vocabulary detection toolkit"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key/value config file (TOML syntax).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build YOLO labels, the class vocabulary and the term repository.
    Convert {
        /// Input directory with masks/, labels.tsv and optional descriptions/.
        #[arg(long)]
        input: PathBuf,
        /// File of modifiers to strip from class names, one per line.
        #[arg(long)]
        modifiers: Option<PathBuf>,
        /// Stop-word list replacing the bundled English list.
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        min_phrases: Option<usize>,
    },
    /// Fuse sub-description embeddings into class embeddings.
    Fuse {
        /// Sub-description embedding files, one per class.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "contrastive")]
        variant: FusionVariant,
        /// Region embedding file; required by the contrastive variants.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Fuse for this region only instead of every region.
        #[arg(long)]
        region: Option<usize>,
        #[arg(long, default_value_t = 3)]
        rank_min: usize,
        #[arg(long, default_value_t = 10)]
        rank_max: usize,
    },
    /// Check every hand-written gradient against finite differences.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Score detections against ground truth.
    Eval {
        /// `image_id class x1 y1 x2 y2 confidence` per line.
        #[arg(long)]
        detections: PathBuf,
        /// `image_id class x1 y1 x2 y2 [pixel_area]` per line.
        #[arg(long)]
        ground_truth: PathBuf,
        /// `image_id mild|moderate|severe` per line.
        #[arg(long)]
        difficulty: Option<PathBuf>,
    },
    /// Run the synthetic benchmark matrix.
    BenchSynth {
        /// Number of seeds, starting at --seed.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        scenes: Option<usize>,
        /// Comma-separated fusion variants.
        #[arg(long, value_delimiter = ',')]
        fusion: Option<Vec<FusionVariant>>,
        /// Comma-separated gate variants.
        #[arg(long, value_delimiter = ',')]
        gate: Option<Vec<GateVariant>>,
        /// Comma-separated coverage weights.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Exit with code 3 unless every directional check passes.
        #[arg(long)]
        assert: bool,
    },
}

enum Failure {
    Runtime(Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    dataset::write_atomic(&dir.join(name), format!("{text}\n").as_bytes())
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    match stdout
        .write_all(text.as_bytes())
        .and_then(|_| stdout.flush())
    {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let file = match &cli.common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let out = cli.common.out.clone();
    match cli.command {
        Command::Convert {
            input,
            modifiers,
            stopwords,
            min_phrases,
        } => {
            let output = out.ok_or_else(|| Error::Validation("convert needs --out".into()))?;
            let stopwords = match stopwords {
                Some(p) => parse_stopwords(&read_lines(&p)?.join("\n")),
                None => default_stopwords(),
            };
            let opts = ConvertOptions {
                input,
                output: output.clone(),
                modifiers: modifiers
                    .map(|p| read_lines(&p))
                    .transpose()?
                    .unwrap_or_default(),
                stopwords,
                min_phrases: min_phrases.or(file.min_phrases).unwrap_or(MIN_PHRASES),
            };
            let summary = dataset::convert(&opts)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            write_json(&output, "convert_summary.json", &summary)?;
            emit(&format!(
                "{}\n",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            ))?;
        }
        Command::Fuse {
            inputs,
            variant,
            regions,
            region,
            rank_min,
            rank_max,
        } => {
            let output = out.ok_or_else(|| Error::Validation("fuse needs --out".into()))?;
            let rank = SvdRank {
                min: rank_min,
                max: rank_max,
            };
            let field = regions
                .map(|p| embfile::read(&p).and_then(|f| EmbeddingField::new(f.matrix)))
                .transpose()?;
            if variant.is_region_dependent() && field.is_none() {
                return Err(
                    Error::Validation(format!("fusion variant {variant} needs --regions")).into(),
                );
            }
            let mut summary = Vec::new();
            for path in &inputs {
                let set = embfile::read_sub_descriptions(path)?;
                let refined = refine(&set, rank, &AdapterParams::identity(set.dim()))?;
                let targets: Vec<usize> = match (&field, region) {
                    (Some(f), _) if region.is_some_and(|r| r >= f.len()) => {
                        return Err(Error::Validation(format!(
                            "region {} out of range",
                            region.unwrap()
                        ))
                        .into())
                    }
                    (Some(f), None) if variant.is_region_dependent() => (0..f.len()).collect(),
                    (_, Some(r)) => vec![r],
                    _ => vec![0],
                };
                let mut rows = Vec::new();
                let mut weights = Vec::new();
                let mut degenerate = false;
                for &r in &targets {
                    let (v, g) = match &field {
                        Some(f) => (f.region(r), f.mean()),
                        None => (&[][..], &[][..]),
                    };
                    let (fused, w) = fuse(variant, &set, &refined, v, g)?;
                    degenerate |= fused.degenerate;
                    rows.push(fused.vector);
                    weights.push(w.map(|w| w.normalized));
                }
                let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                let dest = output.join(format!("{stem}.fused.emb"));
                embfile::write(&dest, set.class_id, &Matrix::from_rows(&rows)?)?;
                summary.push(serde_json::json!({
                    "class_id": set.class_id,
                    "input": path.display().to_string(),
                    "output": dest.display().to_string(),
                    "variant": variant.name(),
                    "regions": targets,
                    "degenerate": degenerate,
                    "weights": weights,
                }));
            }
            write_json(&output, "fuse_summary.json", &summary)?;
            emit(&format!(
                "{}\n",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            ))?;
        }
        Command::Gradcheck {
            instances,
            tolerance,
        } => {
            let mut cfg = GradcheckConfig::default();
            file.apply_gradcheck(&mut cfg);
            if let Some(s) = cli.common.seed {
                cfg.seed = s;
            }
            if let Some(n) = instances {
                cfg.instances = n;
            }
            if let Some(t) = tolerance {
                cfg.tolerance = t;
            }
            let report = gradcheck::run_all(&cfg)?;
            let mut text = String::new();
            for s in &report.suites {
                text.push_str(&format!(
                    "{} {:<8} {} instances, max relative error {:.3e} (instance {})\n",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.instances,
                    s.max_rel_error,
                    s.worst_instance
                ));
            }
            emit(&text)?;
            if let Some(dir) = &out {
                write_json(dir, "gradcheck_report.json", &report)?;
            }
            if !report.passed() {
                return Err(Failure::Acceptance(format!(
                    "gradient check above tolerance {:e}",
                    report.tolerance
                )));
            }
        }
        Command::Eval {
            detections,
            ground_truth,
            difficulty,
        } => {
            let dets = eval::read_detections(&detections)?;
            let gts = eval::read_ground_truth(&ground_truth)?;
            let cfg = EvalConfig {
                difficulty: difficulty
                    .map(|p| eval::read_difficulty(&p))
                    .transpose()?
                    .unwrap_or_default(),
            };
            let report = eval::evaluate(&dets, &gts, &cfg);
            if let Some(dir) = &out {
                write_json(dir, "eval_report.json", &report)?;
            }
            emit(&format!(
                "{}\n",
                serde_json::to_string_pretty(&report).expect("report serializes")
            ))?;
        }
        Command::BenchSynth {
            seeds,
            scenes,
            fusion,
            gate,
            lambda,
            assert,
        } => {
            let mut cfg = BenchConfig::default();
            file.apply_bench(&mut cfg)?;
            let base = cli.common.seed.or(file.seed).unwrap_or(0);
            let n = seeds.or(file.seeds).unwrap_or(cfg.seeds.len());
            cfg.seeds = (base..base + n as u64).collect();
            if let Some(s) = scenes {
                cfg.synth.scenes = s;
            }
            if let Some(f) = fusion {
                cfg.fusions = f;
            }
            if let Some(g) = gate {
                cfg.gates = g;
            }
            if let Some(l) = lambda {
                cfg.lambdas = l;
            }
            let report = run_benchmark(&cfg)?;
            emit(&report.table())?;
            if let Some(dir) = &out {
                write_json(dir, "bench_report.json", &report)?;
                dataset::write_atomic(
                    &dir.join("bench_per_seed.tsv"),
                    per_seed_table(&report).as_bytes(),
                )?;
            }
            if assert && !report.passed() {
                return Err(Failure::Acceptance(
                    "directional benchmark checks failed".into(),
                ));
            }
        }
    }
    Ok(())
}

/// One row per (run, seed) for plotting.
fn per_seed_table(report: &BenchReport) -> String {
    let mut out = String::from(
        "fusion\tgate\tlambda\tseed\tap\tap50\tap75\tap_mild\tap_moderate\tap_severe\n",
    );
    let f = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| x.to_string());
    for r in &report.runs {
        for s in &r.seeds {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.fusion,
                r.gate,
                r.lambda,
                s.seed,
                f(s.ap),
                f(s.ap50),
                f(s.ap75),
                f(s.ap_mild),
                f(s.ap_moderate),
                f(s.ap_severe)
            ));
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Acceptance(msg)) => {
            eprintln!("acceptance failure: {msg}");
            ExitCode::from(3)
        }
    }
}
