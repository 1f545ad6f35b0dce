//! Teacher–student losses and soft-alignment generation.
//!
//! The student minimises the cross-entropy `H(P, Q) = −Σ P ln Q` against the
//! teacher distribution `P`. KL divergence differs from it by the target
//! entropy `H(P) = −Σ P ln P`, which does not depend on the student, so it is
//! only reported.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignments::{truncate_with_mass, SoftAlignment, SparsePosterior};
use crate::datagen::Utterance;
use crate::error::{Error, Result};
use crate::evaluation::log_posteriors;
use crate::layers::{ModelParams, ModelSpec};

/// Mean per-frame losses over a set of frames, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cross_entropy: f64,
    pub kl_divergence: f64,
    pub frame_count: usize,
}

fn check_support(target: &SparsePosterior, states: usize) -> Result<()> {
    match target.entries().iter().find(|e| e.0 as usize >= states) {
        Some(e) => Err(Error::Distribution(format!(
            "target state {} outside {states} model states",
            e.0
        ))),
        None => Ok(()),
    }
}

/// Target probabilities widened to f64 and rescaled so they sum to 1 in f64,
/// removing the rounding left by 32-bit storage.
fn probs(target: &SparsePosterior) -> impl Iterator<Item = (usize, f64)> + '_ {
    let total: f64 = target.entries().iter().map(|e| e.1 as f64).sum();
    target
        .entries()
        .iter()
        .map(move |&(s, p)| (s as usize, p as f64 / total))
}

/// `−Σ P(s) ln Q(s)` over the target's support.
pub fn cross_entropy(target: &SparsePosterior, log_probs: &[f64]) -> Result<f64> {
    check_support(target, log_probs.len())?;
    Ok(-probs(target).map(|(s, p)| p * log_probs[s]).sum::<f64>())
}

/// `−Σ P ln P`, with `0 ln 0 = 0`.
pub fn target_entropy(target: &SparsePosterior) -> f64 {
    -probs(target).map(|(_, p)| p * p.ln()).sum::<f64>()
}

/// `Σ P ln(P / Q)` over the target's support.
pub fn kl_divergence(target: &SparsePosterior, log_probs: &[f64]) -> Result<f64> {
    check_support(target, log_probs.len())?;
    Ok(probs(target).map(|(s, p)| p * (p.ln() - log_probs[s])).sum())
}

/// Gradient of the cross-entropy with respect to the logits: `Q − P`.
pub fn logit_gradient(target: &SparsePosterior, probs: &[f64]) -> Result<Vec<f64>> {
    let mut g = probs.to_vec();
    subtract_target(&mut g, target, 1.0)?;
    Ok(g)
}

/// `row[s] −= scale · P(s)` for every target entry.
pub(crate) fn subtract_target(row: &mut [f64], target: &SparsePosterior, scale: f64) -> Result<()> {
    check_support(target, row.len())?;
    for (s, p) in probs(target) {
        row[s] -= scale * p;
    }
    Ok(())
}

/// Mean cross-entropy and KL of `log_probs` rows against `targets`.
pub fn loss_report<'a>(
    targets: impl IntoIterator<Item = &'a SparsePosterior>,
    log_probs: &[&[f64]],
) -> Result<LossReport> {
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut n = 0;
    for (t, lp) in targets.into_iter().zip(log_probs) {
        ce += cross_entropy(t, lp)?;
        kl += kl_divergence(t, lp)?;
        n += 1;
    }
    if n != log_probs.len() {
        return Err(Error::Data(format!(
            "{} frames but only {n} targets",
            log_probs.len()
        )));
    }
    let d = n.max(1) as f64;
    Ok(LossReport {
        cross_entropy: ce / d,
        kl_divergence: kl / d,
        frame_count: n,
    })
}

/// Summary of the probability mass kept by truncation, before renormalisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassStats {
    pub threshold: f64,
    pub frames: u64,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Runs the teacher over each utterance and truncates every frame's posterior
/// to `mass`. Output order follows `utterances`.
pub fn generate_soft_alignments(
    spec: &ModelSpec,
    params: &ModelParams,
    utterances: &[Utterance],
    mass: f64,
) -> Result<Vec<SoftAlignment>> {
    generate_soft_alignments_with_stats(spec, params, utterances, mass).map(|(a, _)| a)
}

pub fn generate_soft_alignments_with_stats(
    spec: &ModelSpec,
    params: &ModelParams,
    utterances: &[Utterance],
    mass: f64,
) -> Result<(Vec<SoftAlignment>, MassStats)> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::Config(format!("mass must be in (0, 1], got {mass}")));
    }
    let per_utt: Vec<(SoftAlignment, Vec<f64>)> = utterances
        .par_iter()
        .map(|u| {
            let lp = log_posteriors(spec, params, &u.features)?;
            let mut frames = Vec::with_capacity(lp.rows());
            let mut kept = Vec::with_capacity(lp.rows());
            let mut dense = vec![0.0; lp.cols()];
            for t in 0..lp.rows() {
                for (d, &l) in dense.iter_mut().zip(lp.row(t)) {
                    *d = l.exp();
                }
                let (post, m) = truncate_with_mass(&dense, mass)?;
                frames.push(post);
                kept.push(m);
            }
            Ok((
                SoftAlignment {
                    id: u.id.clone(),
                    frames,
                    threshold: Some(mass),
                },
                kept,
            ))
        })
        .collect::<Result<_>>()?;
    let mut stats = MassStats {
        threshold: mass,
        frames: 0,
        min: f64::INFINITY,
        mean: 0.0,
        max: f64::NEG_INFINITY,
    };
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(per_utt.len());
    for (a, kept) in per_utt {
        for m in kept {
            stats.min = stats.min.min(m);
            stats.max = stats.max.max(m);
            sum += m;
            stats.frames += 1;
        }
        out.push(a);
    }
    if stats.frames == 0 {
        stats.min = 0.0;
        stats.max = 0.0;
    } else {
        stats.mean = sum / stats.frames as f64;
    }
    Ok((out, stats))
}
