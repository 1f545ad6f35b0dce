//! Frame error rate, dataset cross-entropy, and the alignment-type ablation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignments::{hard_from_soft, HardAlignment};
use crate::datagen::{check_alignment_ids, SynthData, Utterance};
use crate::distillation::{cross_entropy, generate_soft_alignments};
use crate::error::{Error, Result};
use crate::layers::{forward_logits, init_params, ModelParams, ModelSpec};
use crate::rng::derive_seed;
use crate::tensor::{argmax, log_softmax_rows, Tensor};
use crate::training::{default_grid, model_input, sweep, DevData, SweepReport, TrainConfig, TrainData, Targets};

/// Per-frame log-posteriors `T × states` for one utterance's raw features.
pub fn log_posteriors(spec: &ModelSpec, params: &ModelParams, features: &Tensor) -> Result<Tensor> {
    let x = model_input(spec, features)?;
    let (logits, _) = forward_logits(spec, params, &x)?;
    log_softmax_rows(&logits)
}

/// Argmax state per frame for every utterance.
pub fn predict(spec: &ModelSpec, params: &ModelParams, utterances: &[Utterance]) -> Result<Vec<HardAlignment>> {
    utterances
        .par_iter()
        .map(|u| {
            let lp = log_posteriors(spec, params, &u.features)?;
            Ok(HardAlignment {
                id: u.id.clone(),
                labels: (0..lp.rows()).map(|t| argmax(lp.row(t)) as u32).collect(),
            })
        })
        .collect()
}

/// Fraction of frames whose predicted state differs from the reference.
pub fn frame_error_rate(predictions: &[HardAlignment], reference: &[HardAlignment]) -> Result<f64> {
    if predictions.len() != reference.len() {
        return Err(Error::Data(format!(
            "{} predicted utterances vs {} reference",
            predictions.len(),
            reference.len()
        )));
    }
    let mut wrong = 0usize;
    let mut total = 0usize;
    for (p, r) in predictions.iter().zip(reference) {
        if p.id != r.id || p.labels.len() != r.labels.len() {
            return Err(Error::Data(format!(
                "prediction {} ({} frames) does not match reference {} ({} frames)",
                p.id,
                p.labels.len(),
                r.id,
                r.labels.len()
            )));
        }
        wrong += p.labels.iter().zip(&r.labels).filter(|(a, b)| a != b).count();
        total += r.labels.len();
    }
    Ok(if total == 0 { 0.0 } else { wrong as f64 / total as f64 })
}

/// Mean per-frame cross-entropy of the model against `targets`, in nats.
pub fn dataset_cse(spec: &ModelSpec, params: &ModelParams, utterances: &[Utterance], targets: &Targets) -> Result<f64> {
    targets.check(utterances, spec.states())?;
    let per_utt: Vec<(f64, usize)> = (0..utterances.len())
        .into_par_iter()
        .map(|u| {
            let lp = log_posteriors(spec, params, &utterances[u].features)?;
            let mut sum = 0.0;
            for (t, target) in targets.frames(u).iter().enumerate() {
                sum += cross_entropy(target, lp.row(t))?;
            }
            Ok((sum, lp.rows()))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per_utt.iter().fold((0.0, 0), |(s, n), &(a, b)| (s + a, n + b));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Mean per-frame cross-entropy in nats.
    pub cse: f64,
    pub fer: f64,
    pub frames: usize,
}

/// FER against `labels` and cross-entropy against `targets` (or `labels` when
/// `targets` is `None`), from one forward pass per utterance.
pub fn evaluate_split(
    spec: &ModelSpec,
    params: &ModelParams,
    utterances: &[Utterance],
    labels: &[HardAlignment],
    targets: Option<&Targets>,
) -> Result<SplitMetrics> {
    check_alignment_ids(utterances, labels.iter().map(|l| (&l.id, l.labels.len())))?;
    let hard;
    let targets = match targets {
        Some(t) => t,
        None => {
            hard = Targets::Hard(labels.to_vec());
            &hard
        }
    };
    targets.check(utterances, spec.states())?;
    let per_utt: Vec<(f64, usize)> = (0..utterances.len())
        .into_par_iter()
        .map(|u| {
            let lp = log_posteriors(spec, params, &utterances[u].features)?;
            let mut ce = 0.0;
            for (t, target) in targets.frames(u).iter().enumerate() {
                ce += cross_entropy(target, lp.row(t))?;
            }
            let wrong = labels[u]
                .labels
                .iter()
                .enumerate()
                .filter(|&(t, &l)| argmax(lp.row(t)) as u32 != l)
                .count();
            Ok((ce, wrong))
        })
        .collect::<Result<_>>()?;
    let frames: usize = labels.iter().map(|l| l.labels.len()).sum();
    let (ce, wrong) = per_utt.iter().fold((0.0, 0), |(c, w), &(a, b)| (c + a, w + b));
    let d = frames.max(1) as f64;
    Ok(SplitMetrics {
        cse: ce / d,
        fer: wrong as f64 / d,
        frames,
    })
}

/// Student training conditions, by the source of the per-frame targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    /// True labels of the training data.
    HardLabels,
    /// Argmax of the recurrent teacher's posteriors.
    HardTeacher,
    /// Mass-truncated recurrent teacher posteriors.
    SoftTeacher,
    /// Mass-truncated posteriors of a large feed-forward teacher.
    SoftDnnTeacher,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::HardLabels,
        Condition::HardTeacher,
        Condition::SoftTeacher,
        Condition::SoftDnnTeacher,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Condition::HardLabels => "Hard-labels",
            Condition::HardTeacher => "Hard-teacher",
            Condition::SoftTeacher => "Soft-teacher",
            Condition::SoftDnnTeacher => "Soft-DNN-teacher",
        }
    }
}

/// Dev and test metrics against the true labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub dev: SplitMetrics,
    pub test: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: Condition,
    pub metrics: Option<ModelMetrics>,
    pub sweep: Option<SweepReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub teacher: Option<ModelMetrics>,
    pub big_dnn: Option<ModelMetrics>,
    pub rows: Vec<AblationRow>,
    pub teacher_sweep: Option<SweepReport>,
    pub big_dnn_sweep: Option<SweepReport>,
}

fn fmt_metrics(m: &Option<ModelMetrics>) -> String {
    match m {
        Some(m) => format!(
            "{:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            m.dev.fer, m.dev.cse, m.test.fer, m.test.cse
        ),
        None => format!("{:>8} {:>8} {:>8} {:>8}", "failed", "-", "-", "-"),
    }
}

fn same_split(a: &SplitMetrics, b: &SplitMetrics) -> bool {
    a.cse.to_bits() == b.cse.to_bits() && a.fer.to_bits() == b.fer.to_bits() && a.frames == b.frames
}

fn same_model(a: &Option<ModelMetrics>, b: &Option<ModelMetrics>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => same_split(&a.dev, &b.dev) && same_split(&a.test, &b.test),
        (None, None) => true,
        _ => false,
    }
}

fn same_sweep(a: &Option<SweepReport>, b: &Option<SweepReport>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.same_metrics(b),
        (None, None) => true,
        _ => false,
    }
}

impl AblationReport {
    /// Bitwise equality of every metric and training history, ignoring timing.
    pub fn same_metrics(&self, other: &AblationReport) -> bool {
        self.seed == other.seed
            && same_model(&self.teacher, &other.teacher)
            && same_model(&self.big_dnn, &other.big_dnn)
            && same_sweep(&self.teacher_sweep, &other.teacher_sweep)
            && same_sweep(&self.big_dnn_sweep, &other.big_dnn_sweep)
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.condition == b.condition
                    && a.error == b.error
                    && same_model(&a.metrics, &b.metrics)
                    && same_sweep(&a.sweep, &b.sweep)
            })
    }

    pub fn row(&self, c: Condition) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    pub fn dev_cse(&self, c: Condition) -> Option<f64> {
        self.row(c)?.metrics.map(|m| m.dev.cse)
    }

    /// Aligned text table. FER stands in for word error rate.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "small-student results by training alignment (seed {})", self.seed);
        let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>8} {:>8}", "targets", "dev FER", "dev CSE", "test FER", "test CSE");
        for r in &self.rows {
            let _ = writeln!(s, "{:<18} {}", r.condition.name(), fmt_metrics(&r.metrics));
        }
        let _ = writeln!(s, "{:<18} {}", "(teacher)", fmt_metrics(&self.teacher));
        if self.big_dnn.is_some() {
            let _ = writeln!(s, "{:<18} {}", "(big DNN)", fmt_metrics(&self.big_dnn));
        }
        let _ = writeln!(s, "FER: frame error rate. CSE: mean cross-entropy (nats) against true labels.");
        s
    }

    /// One `key=value` line per model, for scripts.
    pub fn machine_lines(&self) -> String {
        let mut s = String::new();
        let mut line = |name: &str, m: &Option<ModelMetrics>| {
            let _ = match m {
                Some(m) => writeln!(
                    s,
                    "row={name} seed={} dev_fer={} dev_cse={} test_fer={} test_cse={}",
                    self.seed, m.dev.fer, m.dev.cse, m.test.fer, m.test.cse
                ),
                None => writeln!(s, "row={name} seed={} status=failed", self.seed),
            };
        };
        for r in &self.rows {
            line(r.condition.name(), &r.metrics);
        }
        line("teacher", &self.teacher);
        if self.big_dnn.is_some() {
            line("big-dnn", &self.big_dnn);
        }
        s
    }
}

/// Models, training recipe and truncation mass for [`run_ablation`].
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub seed: u64,
    pub teacher: ModelSpec,
    pub big_dnn: Option<ModelSpec>,
    pub student: ModelSpec,
    pub base: TrainConfig,
    pub grid: Option<Vec<TrainConfig>>,
    pub mass: f64,
}

impl AblationConfig {
    pub fn for_data(data: &SynthData, seed: u64) -> Result<Self> {
        let (d, n) = dimensions(data)?;
        Ok(AblationConfig {
            seed,
            teacher: ModelSpec::default_teacher(d, n),
            big_dnn: Some(ModelSpec::default_big_dnn(d, n)),
            student: ModelSpec::default_student(d, n),
            base: TrainConfig::default(),
            grid: None,
            mass: crate::alignments::DEFAULT_MASS,
        })
    }

    fn grid(&self, stream: &str) -> Vec<TrainConfig> {
        let base = TrainConfig {
            seed: derive_seed(self.seed, stream, 0),
            ..self.base
        };
        match &self.grid {
            Some(g) => g.iter().map(|c| TrainConfig { seed: base.seed, ..*c }).collect(),
            None => default_grid(&base),
        }
    }
}

/// Feature width and state count implied by the data (labels cover 0..n).
pub fn dimensions(data: &SynthData) -> Result<(usize, usize)> {
    let d = data
        .train
        .utterances
        .first()
        .map(|u| u.features.cols())
        .ok_or_else(|| Error::Data("empty training split".into()))?;
    let n = [&data.train, &data.dev, &data.test]
        .iter()
        .flat_map(|s| s.labels.iter().flat_map(|l| l.labels.iter()))
        .max()
        .map(|&m| m as usize + 1)
        .ok_or_else(|| Error::Data("no labels".into()))?;
    Ok((d, n))
}

/// Trains a model with the sweep; returns the best params and its report.
pub fn train_model(
    spec: &ModelSpec,
    init_seed: u64,
    utterances: &[Utterance],
    targets: &Targets,
    dev: DevData<'_>,
    grid: &[TrainConfig],
) -> Result<(ModelParams, SweepReport)> {
    let init = init_params(spec, init_seed);
    let (report, params) = sweep(
        spec,
        &init,
        TrainData {
            utterances,
            targets,
        },
        dev,
        grid,
        None,
    )?;
    Ok((params, report))
}

fn model_metrics(spec: &ModelSpec, params: &ModelParams, data: &SynthData) -> Result<ModelMetrics> {
    Ok(ModelMetrics {
        dev: evaluate_split(spec, params, &data.dev.utterances, &data.dev.labels, None)?,
        test: evaluate_split(spec, params, &data.test.utterances, &data.test.labels, None)?,
    })
}

/// Target sets for one student condition.
pub struct ConditionTargets {
    pub condition: Condition,
    pub train: Targets,
    /// Dev targets for model selection; `None` selects on the true dev labels.
    pub dev: Option<Targets>,
}

/// Students trained on each target set with the same initialisation and sweep.
pub fn ablation_report(
    config: &AblationConfig,
    data: &SynthData,
    conditions: Vec<ConditionTargets>,
) -> Result<Vec<AblationRow>> {
    let grid = config.grid("shuffle/student");
    let init_seed = derive_seed(config.seed, "init/student", 0);
    conditions
        .into_iter()
        .map(|c| {
            let dev = DevData {
                utterances: &data.dev.utterances,
                labels: &data.dev.labels,
                targets: c.dev.as_ref(),
            };
            let trained = train_model(&config.student, init_seed, &data.train.utterances, &c.train, dev, &grid)
                .and_then(|(p, r)| Ok((model_metrics(&config.student, &p, data)?, r)));
            Ok(match trained {
                Ok((m, r)) => AblationRow {
                    condition: c.condition,
                    metrics: Some(m),
                    sweep: Some(r),
                    error: None,
                },
                Err(e) => AblationRow {
                    condition: c.condition,
                    metrics: None,
                    sweep: None,
                    error: Some(e.to_string()),
                },
            })
        })
        .collect()
}

/// The full four-way comparison: train the recurrent teacher (and optionally
/// a large feed-forward teacher) on the true labels, derive hard and soft
/// alignments, and train one student per alignment type.
pub fn run_ablation(data: &SynthData, config: &AblationConfig) -> Result<AblationReport> {
    for split in [&data.train, &data.dev, &data.test] {
        split.check(config.student.states())?;
    }
    let hard_dev = DevData {
        utterances: &data.dev.utterances,
        labels: &data.dev.labels,
        targets: None,
    };
    let true_train = Targets::Hard(data.train.labels.clone());
    let train_utts = &data.train.utterances;

    let (teacher, teacher_sweep) = train_model(
        &config.teacher,
        derive_seed(config.seed, "init/teacher", 0),
        &data.train.utterances,
        &true_train,
        hard_dev,
        &config.grid("shuffle/teacher"),
    )?;
    let teacher_metrics = model_metrics(&config.teacher, &teacher, data)?;
    let soft_train = generate_soft_alignments(&config.teacher, &teacher, train_utts, config.mass)?;
    let hard_train = soft_train.iter().map(hard_from_soft).collect();

    let mut conditions = vec![
        ConditionTargets {
            condition: Condition::HardLabels,
            train: true_train.clone(),
            dev: None,
        },
        ConditionTargets {
            condition: Condition::HardTeacher,
            train: Targets::Hard(hard_train),
            dev: None,
        },
        ConditionTargets {
            condition: Condition::SoftTeacher,
            train: Targets::Soft(soft_train),
            dev: None,
        },
    ];

    let mut big_metrics = None;
    let mut big_sweep = None;
    let mut big_failure = None;
    if let Some(big) = &config.big_dnn {
        let trained = train_model(
            big,
            derive_seed(config.seed, "init/big-dnn", 0),
            &data.train.utterances,
            &true_train,
            hard_dev,
            &config.grid("shuffle/big-dnn"),
        )
        .and_then(|(p, r)| {
            let m = model_metrics(big, &p, data)?;
            let t = generate_soft_alignments(big, &p, train_utts, config.mass)?;
            Ok((m, r, t))
        });
        match trained {
            Ok((m, r, t)) => {
                big_metrics = Some(m);
                big_sweep = Some(r);
                conditions.push(ConditionTargets {
                    condition: Condition::SoftDnnTeacher,
                    train: Targets::Soft(t),
                    dev: None,
                });
            }
            Err(e) => big_failure = Some(e.to_string()),
        }
    }

    let mut rows = ablation_report(config, data, conditions)?;
    if let Some(e) = big_failure {
        rows.push(AblationRow {
            condition: Condition::SoftDnnTeacher,
            metrics: None,
            sweep: None,
            error: Some(e),
        });
    }
    Ok(AblationReport {
        seed: config.seed,
        teacher: Some(teacher_metrics),
        big_dnn: big_metrics,
        rows,
        teacher_sweep: Some(teacher_sweep),
        big_dnn_sweep: big_sweep,
    })
}
