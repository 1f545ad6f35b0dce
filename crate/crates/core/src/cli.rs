//! Command-line interface: data generation, teacher training, alignment
//! export, student training, evaluation, cache inspection and the ablation.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::alignments::{
    estimate_full_cache_bytes, hard_from_soft, read_cache, read_hard_labels, write_cache, write_hard_labels,
    CacheReader, HardAlignment, DEFAULT_MASS,
};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::datagen::{generate, labels_path, read_split, write_dataset, Split, SynthData, SynthSpec, SPLITS};
use crate::distillation::{generate_soft_alignments_with_stats, MassStats};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, run_ablation, AblationConfig};
use crate::layers::{init_params, ModelParams, ModelSpec};
use crate::rng::derive_seed;
use crate::training::{
    default_grid, sweep, DevData, EpochRecord, SweepReport, TrainConfig, TrainData, Targets,
};

#[derive(Debug, Parser)]
#[command(name = "distilkit", version, about = "Distil a recurrent frame classifier into a small feed-forward network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/dev/test corpus.
    GenSynth(GenSynthArgs),
    /// Train the recurrent teacher on hard labels.
    TrainTeacher(TrainArgs),
    /// Export teacher alignments (hard labels or a soft cache).
    GenAlign(GenAlignArgs),
    /// Train a student on hard labels or a soft cache.
    TrainStudent(TrainStudentArgs),
    /// Report frame error rate and cross-entropy.
    Evaluate(EvaluateArgs),
    /// Summarise a soft-alignment cache.
    InspectCache(InspectArgs),
    /// Run the full alignment-type comparison.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    pub spec_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_states: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub train_utterances: Option<usize>,
    #[arg(long)]
    pub dev_utterances: Option<usize>,
    #[arg(long)]
    pub test_utterances: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `default` for the five-schedule grid, or a TOML file of `[[run]]` tables.
    #[arg(long, default_value = "default")]
    pub sweep: String,
    /// Master seed for initialisation and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides every run's epoch limit.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Appends one JSON object per epoch to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model spec (TOML); defaults to the built-in architecture.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sweep: SweepArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignMode {
    Hard,
    Soft,
}

#[derive(Debug, Args)]
pub struct GenAlignArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: AlignMode,
    #[arg(long, default_value_t = DEFAULT_MASS)]
    pub mass: f64,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainStudentArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Hard label text file or soft-alignment cache for the training split.
    #[arg(long)]
    pub targets: PathBuf,
    /// Dev-split targets of the same kind, used for model selection; the
    /// dev labels in the data directory are used when omitted.
    #[arg(long)]
    pub dev_targets: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sweep: SweepArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Splits to evaluate.
    #[arg(long, default_values_t = ["dev".to_string(), "test".to_string()])]
    pub split: Vec<String>,
    /// Hard reference labels; only with a single --split. Defaults to the
    /// split's labels in the data directory.
    #[arg(long)]
    pub r#ref: Option<PathBuf>,
    /// Soft reference for an additional cross-entropy column; single split only.
    #[arg(long)]
    pub soft_ref: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub cache: PathBuf,
    /// State count for the dense-size baseline; defaults to the largest state id + 1.
    #[arg(long)]
    pub states: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Corpus directory; the default synthetic corpus for --seed is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MASS)]
    pub mass: f64,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Skip the large feed-forward teacher and its row.
    #[arg(long)]
    pub no_big_dnn: bool,
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DISTILKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DISTILKIT_THREADS must be a positive integer, got {v:?}")))?;
    // Fails only if the pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::GenAlign(a) => gen_align(a),
        Command::TrainStudent(a) => train_student(a),
        Command::Evaluate(a) => evaluate(a),
        Command::InspectCache(a) => inspect_cache(a),
        Command::Ablation(a) => ablation(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::codec::write_atomically(path, |w| {
        w.write_all(text.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    })
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut spec = match &a.spec_file {
        Some(p) => SynthSpec::from_text(&read_text(p)?)?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(seed, num_states, feature_dim, train_utterances, dev_utterances, test_utterances, sigma);
    spec.validate()?;
    let data = generate(&spec)?;
    write_dataset(&a.out, &spec, &data)?;
    for name in SPLITS {
        let s = data.split(name).expect("known split");
        println!("{name}: {} utterances, {} frames", s.utterances.len(), s.frames());
    }
    Ok(())
}

/// `[[run]]` tables in a sweep file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    run: Vec<TrainConfig>,
}

fn load_grid(args: &SweepArgs, stream: &str) -> Result<Vec<TrainConfig>> {
    let seed = derive_seed(args.seed, stream, 0);
    let mut grid = if args.sweep == "default" {
        default_grid(&TrainConfig::default())
    } else {
        let f: SweepFile = toml::from_str(&read_text(Path::new(&args.sweep))?)
            .map_err(|e| Error::Config(format!("sweep file: {e}")))?;
        f.run
    };
    for c in &mut grid {
        c.seed = seed;
        if let Some(m) = args.max_epochs {
            c.max_epochs = m;
        }
        c.validate()?;
    }
    Ok(grid)
}

fn load_spec(path: Option<&Path>, default: impl FnOnce() -> ModelSpec) -> Result<ModelSpec> {
    match path {
        Some(p) => ModelSpec::from_text(&read_text(p)?),
        None => Ok(default()),
    }
}

/// Feature width of the corpus and the state count implied by its labels.
fn corpus_dims(train: &Split, dev: &Split) -> Result<(usize, usize)> {
    let d = train
        .utterances
        .first()
        .map(|u| u.features.cols())
        .ok_or_else(|| Error::Data("training split is empty".into()))?;
    let n = train
        .labels
        .iter()
        .chain(&dev.labels)
        .flat_map(|l| l.labels.iter())
        .max()
        .map(|&m| m as usize + 1)
        .ok_or_else(|| Error::Data("no labels in the corpus".into()))?;
    Ok((d, n))
}

#[derive(Serialize)]
struct MetricLine<'a> {
    run: usize,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Runs the sweep, streaming per-epoch metrics, then writes the best
/// checkpoint and `<out>.history.json`.
#[allow(clippy::too_many_arguments)]
fn sweep_and_save(
    spec: &ModelSpec,
    init_seed: u64,
    data: TrainData<'_>,
    dev: DevData<'_>,
    grid: &[TrainConfig],
    metrics: Option<&Path>,
    out: &Path,
) -> Result<SweepReport> {
    let init = init_params(spec, init_seed);
    let sink = match metrics {
        Some(p) => Some(Mutex::new(BufWriter::new(
            File::create(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?,
        ))),
        None => None,
    };
    let hook = |run: usize, record: &EpochRecord, _: Option<&ModelParams>| -> Result<()> {
        eprintln!(
            "run {run} epoch {} rate {} train_ce {:.5} dev_ce {:.5} dev_fer {:.4}",
            record.epoch, record.rate, record.train_ce, record.dev_ce, record.dev_fer
        );
        if let Some(s) = &sink {
            let line = serde_json::to_string(&MetricLine { run, record }).expect("record serialises");
            let mut w = s.lock().expect("metrics lock");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("writing metrics".to_string(), e))?;
        }
        Ok(())
    };
    let (report, params) = sweep(spec, &init, data, dev, grid, Some(&hook))?;
    write_checkpoint(spec, &params, out)?;
    let history = serde_json::to_string_pretty(&report).expect("report serialises");
    write_text(&sidecar(out, "history.json"), &history)?;
    for (i, r) in report.runs.iter().enumerate() {
        match (&r.error, r.best_dev_ce) {
            (Some(e), _) => println!("run {i} ({}): failed: {e}", r.config.schedule.label()),
            (None, Some(ce)) => println!(
                "run {i} ({}): best dev_ce {ce:.5} after {} epochs",
                r.config.schedule.label(),
                r.history.len()
            ),
            _ => {}
        }
    }
    if let Some(b) = report.best {
        println!("selected run {b}; checkpoint written to {}", out.display());
    }
    Ok(report)
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn require_labels(split: &Split, name: &str) -> Result<()> {
    if split.labels.is_empty() {
        return Err(Error::Data(format!("no {name} labels found")));
    }
    Ok(())
}

fn train_teacher(a: TrainArgs) -> Result<()> {
    let train = read_split(&a.data, "train")?;
    let dev = read_split(&a.data, "dev")?;
    require_labels(&train, "train")?;
    require_labels(&dev, "dev")?;
    let (d, n) = corpus_dims(&train, &dev)?;
    let spec = load_spec(a.spec.as_deref(), || ModelSpec::default_teacher(d, n))?;
    if spec.feature_dim() != d {
        return Err(Error::Data(format!(
            "spec expects {}-dim features, corpus has {d}",
            spec.feature_dim()
        )));
    }
    let targets = Targets::Hard(train.labels.clone());
    let grid = load_grid(&a.sweep, "shuffle/teacher")?;
    sweep_and_save(
        &spec,
        derive_seed(a.sweep.seed, "init/teacher", 0),
        TrainData {
            utterances: &train.utterances,
            targets: &targets,
        },
        DevData {
            utterances: &dev.utterances,
            labels: &dev.labels,
            targets: None,
        },
        &grid,
        a.sweep.metrics.as_deref(),
        &a.out,
    )?;
    Ok(())
}

fn gen_align(a: GenAlignArgs) -> Result<()> {
    let (spec, params) = read_checkpoint(&a.teacher)?;
    let split = read_split(&a.data, &a.split)?;
    let (soft, stats) = generate_soft_alignments_with_stats(&spec, &params, &split.utterances, a.mass)?;
    match a.mode {
        AlignMode::Hard => {
            let hard: Vec<HardAlignment> = soft.iter().map(hard_from_soft).collect();
            write_hard_labels(&a.out, &hard)?;
            let frames: usize = hard.iter().map(|h| h.labels.len()).sum();
            println!("wrote {} utterances, {frames} frames of hard labels", hard.len());
        }
        AlignMode::Soft => {
            let cs = write_cache(&soft, &a.out)?;
            write_text(
                &sidecar(&a.out, "meta"),
                &serde_json::to_string_pretty(&stats).expect("stats serialise"),
            )?;
            let dense = estimate_full_cache_bytes(cs.frames.max(1), spec.states() as u64, 4)?;
            println!(
                "wrote {} utterances, {} frames, {} entries ({:.3} per frame), {} bytes",
                cs.utterances,
                cs.frames,
                cs.entries,
                cs.mean_entries_per_frame(),
                cs.bytes
            );
            println!(
                "dense f32 size {dense} bytes, ratio {:.4}; retained mass min {:.6} mean {:.6} max {:.6}",
                cs.bytes as f64 / dense as f64,
                stats.min,
                stats.mean,
                stats.max
            );
        }
    }
    Ok(())
}

/// Reads a target file, telling a soft cache from hard labels by its magic.
fn read_targets(path: &Path) -> Result<Targets> {
    let mut magic = [0u8; 4];
    let n = File::open(path)
        .and_then(|mut f| f.read(&mut magic))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if n == 4 && &magic == crate::alignments::CACHE_MAGIC {
        Ok(Targets::Soft(read_cache(path)?))
    } else {
        Ok(Targets::Hard(read_hard_labels(path)?))
    }
}

fn train_student(a: TrainStudentArgs) -> Result<()> {
    let train = read_split(&a.data, "train")?;
    let dev = read_split(&a.data, "dev")?;
    require_labels(&dev, "dev")?;
    let targets = read_targets(&a.targets)?;
    let dev_targets = a.dev_targets.as_deref().map(read_targets).transpose()?;
    let d = train
        .utterances
        .first()
        .map(|u| u.features.cols())
        .ok_or_else(|| Error::Data("training split is empty".into()))?;
    let n = corpus_dims(&train, &dev).map(|(_, n)| n).unwrap_or(0).max(max_target_state(&targets) + 1);
    let spec = load_spec(a.spec.as_deref(), || ModelSpec::default_student(d, n))?;
    let grid = load_grid(&a.sweep, "shuffle/student")?;
    sweep_and_save(
        &spec,
        derive_seed(a.sweep.seed, "init/student", 0),
        TrainData {
            utterances: &train.utterances,
            targets: &targets,
        },
        DevData {
            utterances: &dev.utterances,
            labels: &dev.labels,
            targets: dev_targets.as_ref(),
        },
        &grid,
        a.sweep.metrics.as_deref(),
        &a.out,
    )?;
    Ok(())
}

fn max_target_state(t: &Targets) -> usize {
    match t {
        Targets::Hard(a) => a.iter().flat_map(|x| x.labels.iter()).max().map_or(0, |&m| m as usize),
        Targets::Soft(a) => a
            .iter()
            .flat_map(|x| x.frames.iter())
            .map(|f| f.max_state() as usize)
            .max()
            .unwrap_or(0),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (spec, params) = read_checkpoint(&a.model)?;
    if (a.r#ref.is_some() || a.soft_ref.is_some()) && a.split.len() != 1 {
        return Err(Error::Config("--ref and --soft-ref need exactly one --split".into()));
    }
    for name in &a.split {
        let split = read_split(&a.data, name)?;
        let labels = match &a.r#ref {
            Some(p) => read_hard_labels(p)?,
            None if !split.labels.is_empty() => split.labels.clone(),
            None => {
                return Err(Error::Data(format!(
                    "no reference labels: {} is missing and --ref was not given",
                    labels_path(&a.data, name).display()
                )))
            }
        };
        let m = evaluate_split(&spec, &params, &split.utterances, &labels, None)?;
        let mut line = format!("split={name} frames={} fer={} cse={}", m.frames, m.fer, m.cse);
        if let Some(p) = &a.soft_ref {
            let soft = Targets::Soft(read_cache(p)?);
            let s = evaluate_split(&spec, &params, &split.utterances, &labels, Some(&soft))?;
            line.push_str(&format!(" soft_cse={}", s.cse));
        }
        println!("{line}");
    }
    Ok(())
}

fn inspect_cache(a: InspectArgs) -> Result<()> {
    let reader = CacheReader::new(crate::codec::open_reader(&a.cache)?)?;
    let (mut utts, mut frames, mut entries, mut max_state) = (0u64, 0u64, 0u64, 0u64);
    for u in reader {
        let u = u?;
        utts += 1;
        frames += u.frames.len() as u64;
        entries += u.entry_count() as u64;
        for f in &u.frames {
            max_state = max_state.max(f.max_state() as u64);
        }
    }
    let bytes = std::fs::metadata(&a.cache)
        .map_err(|e| Error::io(format!("reading {}", a.cache.display()), e))?
        .len();
    println!("utterances {utts}");
    println!("frames {frames}");
    println!("entries {entries}");
    let mean = if frames == 0 { 0.0 } else { entries as f64 / frames as f64 };
    println!("mean_entries_per_frame {mean:.6}");
    println!("bytes {bytes}");
    let meta = sidecar(&a.cache, "meta");
    if meta.exists() {
        let s: MassStats = serde_json::from_str(&read_text(&meta)?)
            .map_err(|e| Error::Data(format!("{}: {e}", meta.display())))?;
        println!("threshold {}", s.threshold);
        println!("retained_mass_min {:.6}", s.min);
        println!("retained_mass_mean {:.6}", s.mean);
        println!("retained_mass_max {:.6}", s.max);
    } else {
        println!("retained_mass unknown (no {} sidecar)", meta.display());
    }
    let states = a.states.unwrap_or(max_state + 1);
    if frames > 0 {
        let dense = estimate_full_cache_bytes(frames, states, 4)?;
        println!("dense_bytes {dense}");
        println!("compression_ratio {:.6}", bytes as f64 / dense as f64);
    } else {
        println!("dense_bytes 0");
        println!("compression_ratio 0");
    }
    Ok(())
}

fn ablation(a: AblationArgs) -> Result<()> {
    let data = match &a.data {
        Some(dir) => SynthData {
            train: read_split(dir, "train")?,
            dev: read_split(dir, "dev")?,
            test: read_split(dir, "test")?,
        },
        None => generate(&SynthSpec {
            seed: a.seed,
            ..SynthSpec::default()
        })?,
    };
    let mut config = AblationConfig::for_data(&data, a.seed)?;
    config.mass = a.mass;
    if let Some(m) = a.max_epochs {
        config.base.max_epochs = m;
    }
    if a.no_big_dnn {
        config.big_dnn = None;
    }
    let report = run_ablation(&data, &config)?;
    let text = format!("{}\n{}", report.table(), report.machine_lines());
    write_text(&a.out, &text)?;
    write_text(
        &sidecar(&a.out, "json"),
        &serde_json::to_string_pretty(&report).expect("report serialises"),
    )?;
    print!("{text}");
    Ok(())
}
