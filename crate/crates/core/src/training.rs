//! Minibatch SGD with dev-set early stopping, and the learning-rate sweep.

use std::borrow::Cow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignments::{HardAlignment, SoftAlignment, SparsePosterior};
use crate::datagen::{check_alignment_ids, Utterance};
use crate::distillation::{cross_entropy, subtract_target};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, SplitMetrics};
use crate::layers::{backward_with_cache, forward_logits, ModelParams, ModelSpec};
use crate::rng::substream;
use crate::tensor::{log_softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant { rate: f64 },
    /// `initial · factor^epoch`, decayed once per epoch.
    Geometric { initial: f64, factor: f64 },
}

impl Schedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant { rate } => rate,
            Schedule::Geometric { initial, factor } => initial * factor.powi(epoch as i32),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Schedule::Constant { rate } => format!("constant {rate}"),
            Schedule::Geometric { initial, factor } => format!("geometric {initial}x{factor}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub schedule: Schedule,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch_size: 128,
            schedule: Schedule::Constant { rate: 0.1 },
            max_epochs: 20,
            patience: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be >= 1".into());
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be >= 1".into());
        }
        match self.schedule {
            Schedule::Constant { rate } if !(rate >= 0.0 && rate.is_finite()) => {
                bad(format!("learning rate must be finite and >= 0, got {rate}"))
            }
            Schedule::Geometric { initial, factor }
                if !(initial >= 0.0 && initial.is_finite() && factor > 0.0 && factor < 1.0) =>
            {
                bad(format!("bad geometric schedule {initial} x {factor}"))
            }
            _ => Ok(()),
        }
    }
}

/// Constant rates 0.1, 0.01, 0.001 and geometric 0.1, 0.01 halving per epoch.
pub fn default_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let constant = [0.1, 0.01, 0.001].map(|rate| Schedule::Constant { rate });
    let geometric = [0.1, 0.01].map(|initial| Schedule::Geometric {
        initial,
        factor: 0.5,
    });
    constant
        .into_iter()
        .chain(geometric)
        .map(|schedule| TrainConfig { schedule, ..*base })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Hard,
    Soft,
}

/// Per-frame training targets: hard labels or soft alignments.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Hard(Vec<HardAlignment>),
    Soft(Vec<SoftAlignment>),
}

impl Targets {
    pub fn kind(&self) -> TargetKind {
        match self {
            Targets::Hard(_) => TargetKind::Hard,
            Targets::Soft(_) => TargetKind::Soft,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(a) => a.len(),
            Targets::Soft(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks ids, frame counts and state range against `utterances`.
    pub fn check(&self, utterances: &[Utterance], states: usize) -> Result<()> {
        match self {
            Targets::Hard(a) => {
                check_alignment_ids(utterances, a.iter().map(|x| (&x.id, x.labels.len())))?;
                crate::alignments::check_hard_labels(a, states)
            }
            Targets::Soft(a) => {
                check_alignment_ids(utterances, a.iter().map(|x| (&x.id, x.frames.len())))?;
                for x in a {
                    if let Some(f) = x.frames.iter().find(|f| f.max_state() as usize >= states) {
                        return Err(Error::Data(format!(
                            "utterance {}: state id {} >= {states}",
                            x.id,
                            f.max_state()
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Frame targets of utterance `u`; hard labels become one-hot posteriors so
    /// both kinds share one loss path.
    pub fn frames(&self, u: usize) -> Vec<Cow<'_, SparsePosterior>> {
        match self {
            Targets::Hard(a) => a[u]
                .labels
                .iter()
                .map(|&s| Cow::Owned(SparsePosterior::one_hot(s)))
                .collect(),
            Targets::Soft(a) => a[u].frames.iter().map(Cow::Borrowed).collect(),
        }
    }
}

/// Training split: features and aligned targets.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub utterances: &'a [Utterance],
    pub targets: &'a Targets,
}

/// Dev split: hard labels for frame error rate, and optionally targets of the
/// training kind for the selection cross-entropy (hard labels otherwise).
#[derive(Debug, Clone, Copy)]
pub struct DevData<'a> {
    pub utterances: &'a [Utterance],
    pub labels: &'a [HardAlignment],
    pub targets: Option<&'a Targets>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub dev_ce: f64,
    pub dev_fer: f64,
    pub rate: f64,
    pub wall_seconds: f64,
    /// Mean cross-entropy of each minibatch, in training order. Not serialised.
    #[serde(skip)]
    pub batch_losses: Vec<f64>,
}

impl EpochRecord {
    /// Equality on everything except timing.
    pub fn same_metrics(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.train_ce.to_bits() == other.train_ce.to_bits()
            && self.dev_ce.to_bits() == other.dev_ce.to_bits()
            && self.dev_fer.to_bits() == other.dev_fer.to_bits()
            && self.rate.to_bits() == other.rate.to_bits()
            && self.batch_losses.len() == other.batch_losses.len()
            && self
                .batch_losses
                .iter()
                .zip(&other.batch_losses)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest dev cross-entropy.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }
}

/// Called after each epoch with the record and, when dev improved, the new best
/// parameters.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord, Option<&ModelParams>) -> Result<()>;

/// Per-frame concatenation of `left` previous and `right` following frames,
/// replicating the first and last frame at the edges.
pub fn make_context_windows(features: &Tensor, left: usize, right: usize) -> Tensor {
    let (t, d) = (features.rows(), features.cols());
    let width = (left + 1 + right) * d;
    let mut out = Vec::with_capacity(t * width);
    for i in 0..t {
        for k in 0..left + 1 + right {
            let j = (i + k).saturating_sub(left).min(t - 1);
            out.extend_from_slice(features.row(j));
        }
    }
    Tensor::new(vec![t, width], out).expect("window of finite features")
}

/// Rows fed to the network for one utterance.
pub fn model_input<'a>(spec: &ModelSpec, features: &'a Tensor) -> Result<Cow<'a, Tensor>> {
    if features.rank() != 2 || features.cols() != spec.feature_dim() {
        return Err(Error::shape(
            "model input",
            features.shape(),
            &[features.rows(), spec.feature_dim()],
        ));
    }
    Ok(match spec {
        ModelSpec::FeedForward(s) => {
            Cow::Owned(make_context_windows(features, s.context_left, s.context_right))
        }
        ModelSpec::TcDnnBlstmDnn(_) => Cow::Borrowed(features),
    })
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

/// Mean cross-entropy of `logits` rows against `targets`; overwrites `logits`
/// with `(softmax − P) · scale`, the gradient of the scaled summed loss.
fn loss_and_grad(logits: &mut Tensor, targets: &[&SparsePosterior], scale: f64) -> Result<f64> {
    let cols = logits.cols();
    let mut loss = 0.0;
    for (row, target) in logits.data_mut().chunks_mut(cols).zip(targets) {
        log_softmax_in_place(row);
        loss += cross_entropy(target, row)?;
        for v in row.iter_mut() {
            *v = v.exp() * scale;
        }
        subtract_target(row, target, scale)?;
    }
    Ok(loss)
}

/// One SGD step on a minibatch of rows. Returns the summed loss.
pub(crate) fn sgd_step(
    spec: &ModelSpec,
    params: &mut ModelParams,
    inputs: &[&Tensor],
    targets: &[&SparsePosterior],
    rate: f64,
) -> Result<f64> {
    let frames: usize = inputs.iter().map(|x| x.rows()).sum();
    let scale = 1.0 / frames as f64;
    let mut grad: Option<ModelParams> = None;
    let mut loss = 0.0;
    let mut offset = 0;
    for x in inputs {
        let (mut logits, cache) = forward_logits(spec, params, x)?;
        let n = x.rows();
        loss += loss_and_grad(&mut logits, &targets[offset..offset + n], scale)?;
        offset += n;
        let g = backward_with_cache(spec, params, &cache, &logits)?;
        match grad.as_mut() {
            None => grad = Some(g),
            Some(acc) => acc.axpy(1.0, &g),
        }
    }
    if let Some(g) = grad {
        params.axpy(-rate, &g);
    }
    Ok(loss)
}

/// Trains from `init` and returns the best-dev parameters with the history.
pub fn train(
    spec: &ModelSpec,
    init: &ModelParams,
    data: TrainData<'_>,
    dev: DevData<'_>,
    config: &TrainConfig,
    mut hook: Option<EpochHook<'_>>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    config.validate()?;
    init.validate(spec)?;
    let states = spec.states();
    data.targets.check(data.utterances, states)?;
    if data.utterances.is_empty() || dev.utterances.is_empty() {
        return Err(Error::Data("train and dev splits must be non-empty".into()));
    }
    check_alignment_ids(dev.utterances, dev.labels.iter().map(|l| (&l.id, l.labels.len())))?;
    if let Some(t) = dev.targets {
        t.check(dev.utterances, states)?;
    }

    let inputs: Vec<Cow<'_, Tensor>> = data
        .utterances
        .iter()
        .map(|u| model_input(spec, &u.features))
        .collect::<Result<_>>()?;
    let frame_targets: Vec<Vec<Cow<'_, SparsePosterior>>> =
        (0..data.utterances.len()).map(|u| data.targets.frames(u)).collect();
    // Feed-forward models are trained on shuffled frames; keep a flat index.
    let flat: Vec<(usize, usize)> = frame_targets
        .iter()
        .enumerate()
        .flat_map(|(u, f)| (0..f.len()).map(move |t| (u, t)))
        .collect();
    let in_width = spec.input_width();

    let mut params = init.clone();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_ce = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();

    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let rate = config.schedule.rate(epoch);
        let mut rng = substream(config.seed, "shuffle", epoch as u64);
        let mut loss_sum = 0.0;
        let mut frames_seen = 0usize;
        let mut batch_losses = Vec::new();
        let on_err = diverged(epoch, 0);

        if spec.is_recurrent() {
            let mut order: Vec<usize> = (0..inputs.len()).collect();
            order.shuffle(&mut rng);
            let mut batch = 0;
            let mut i = 0;
            while i < order.len() {
                let mut xs = Vec::new();
                let mut ts: Vec<&SparsePosterior> = Vec::new();
                while i < order.len() && ts.len() < config.minibatch_size {
                    let u = order[i];
                    xs.push(inputs[u].as_ref());
                    ts.extend(frame_targets[u].iter().map(|c| c.as_ref()));
                    i += 1;
                }
                let loss = sgd_step(spec, &mut params, &xs, &ts, rate).map_err(diverged(epoch, batch))?;
                if !loss.is_finite() || !params.is_finite() {
                    return Err(Error::Diverged { epoch, batch });
                }
                loss_sum += loss;
                frames_seen += ts.len();
                batch_losses.push(loss / ts.len() as f64);
                batch += 1;
            }
        } else {
            let mut order = flat.clone();
            order.shuffle(&mut rng);
            let mut buf = Vec::with_capacity(config.minibatch_size * in_width);
            for (batch, chunk) in order.chunks(config.minibatch_size).enumerate() {
                buf.clear();
                let mut ts = Vec::with_capacity(chunk.len());
                for &(u, t) in chunk {
                    buf.extend_from_slice(inputs[u].row(t));
                    ts.push(frame_targets[u][t].as_ref());
                }
                let x = Tensor::new(vec![chunk.len(), in_width], std::mem::take(&mut buf))?;
                let loss = sgd_step(spec, &mut params, &[&x], &ts, rate).map_err(diverged(epoch, batch))?;
                buf = x.into_data();
                if !loss.is_finite() || !params.is_finite() {
                    return Err(Error::Diverged { epoch, batch });
                }
                loss_sum += loss;
                frames_seen += chunk.len();
                batch_losses.push(loss / chunk.len() as f64);
            }
        }

        let SplitMetrics { cse, fer, .. } =
            evaluate_split(spec, &params, dev.utterances, dev.labels, dev.targets).map_err(&on_err)?;
        let record = EpochRecord {
            epoch,
            train_ce: loss_sum / frames_seen as f64,
            dev_ce: cse,
            dev_fer: fer,
            rate,
            wall_seconds: start.elapsed().as_secs_f64(),
            batch_losses,
        };
        let improved = cse < best_ce;
        if improved {
            best_ce = cse;
            best_epoch = epoch;
            best.clone_from(&params);
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(h) = hook.as_mut() {
            h(&record, improved.then_some(&params))?;
        }
        history.push(record);
        if stale >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_ce: Option<f64>,
    /// Set when the run failed (for example diverged).
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<RunReport>,
    /// Index of the selected run: the lowest best dev cross-entropy.
    pub best: Option<usize>,
}

impl SweepReport {
    /// Bitwise equality of every run's outcome and history, ignoring timing.
    pub fn same_metrics(&self, other: &SweepReport) -> bool {
        self.best == other.best
            && self.runs.len() == other.runs.len()
            && self.runs.iter().zip(&other.runs).all(|(a, b)| {
                a.config == b.config
                    && a.best_epoch == b.best_epoch
                    && a.best_dev_ce.map(f64::to_bits) == b.best_dev_ce.map(f64::to_bits)
                    && a.error == b.error
                    && a.history.len() == b.history.len()
                    && a.history.iter().zip(&b.history).all(|(x, y)| x.same_metrics(y))
            })
    }
}

pub type SweepHook<'a> = &'a (dyn Fn(usize, &EpochRecord, Option<&ModelParams>) -> Result<()> + Sync);

/// Trains one model per config from the same `init` and keeps the run with the
/// lowest dev cross-entropy. Failed runs are reported, not fatal; the sweep
/// fails only if every run does.
pub fn sweep(
    spec: &ModelSpec,
    init: &ModelParams,
    data: TrainData<'_>,
    dev: DevData<'_>,
    grid: &[TrainConfig],
    hook: Option<SweepHook<'_>>,
) -> Result<(SweepReport, ModelParams)> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let outcomes: Vec<Result<TrainOutcome>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, config)| match hook {
            Some(h) => {
                let mut f = |r: &EpochRecord, p: Option<&ModelParams>| h(i, r, p);
                train(spec, init, data, dev, config, Some(&mut f))
            }
            None => train(spec, init, data, dev, config, None),
        })
        .collect();
    let mut runs = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    let mut best_params = None;
    for (i, (config, outcome)) in grid.iter().zip(outcomes).enumerate() {
        match outcome {
            Ok(o) => {
                let ce = o.best().dev_ce;
                if best.is_none_or(|(_, b)| ce < b) {
                    best = Some((i, ce));
                    best_params = Some(o.params);
                }
                runs.push(RunReport {
                    config: *config,
                    best_epoch: Some(o.best_epoch),
                    best_dev_ce: Some(ce),
                    history: o.history,
                    error: None,
                });
            }
            Err(e) => runs.push(RunReport {
                config: *config,
                history: Vec::new(),
                best_epoch: None,
                best_dev_ce: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let report = SweepReport {
        runs,
        best: best.map(|(i, _)| i),
    };
    match best_params {
        Some(p) => Ok((report, p)),
        None => Err(Error::Data(format!(
            "every sweep run failed: {}",
            report
                .runs
                .iter()
                .filter_map(|r| r.error.as_deref())
                .collect::<Vec<_>>()
                .join("; ")
        ))),
    }
}
