//! Hard and soft frame alignments, probability-mass truncation, and the text
//! format for hard labels.

mod cache;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

pub use cache::{
    read_cache, read_cache_from, write_cache, write_cache_to, CacheReader, CacheStats, MAGIC as CACHE_MAGIC,
};

use crate::codec::{open_reader, write_atomically};
use crate::error::{Error, Result};

pub const DEFAULT_MASS: f64 = 0.98;

/// Slack allowed when comparing accumulated mass against the threshold, so that
/// e.g. 98 × 0.01 reaches 0.98 despite rounding.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// One utterance's per-frame state labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAlignment {
    pub id: String,
    pub labels: Vec<u32>,
}

/// A truncated per-frame distribution: `(state, prob)` pairs sorted by
/// descending probability, ties by ascending state id.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePosterior {
    entries: Vec<(u32, f32)>,
}

fn entry_order(a: &(u32, f32), b: &(u32, f32)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

impl SparsePosterior {
    /// Validates and canonicalises the entry order.
    pub fn new(mut entries: Vec<(u32, f32)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Distribution("posterior needs at least one entry".into()));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for &(s, p) in &entries {
            if !seen.insert(s) {
                return Err(Error::Distribution(format!("duplicate state id {s}")));
            }
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Distribution(format!(
                    "probability {p} for state {s} outside (0, 1]"
                )));
            }
        }
        let sum: f64 = entries.iter().map(|&(_, p)| p as f64).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Distribution(format!("probabilities sum to {sum}")));
        }
        entries.sort_by(entry_order);
        Ok(SparsePosterior { entries })
    }

    pub fn one_hot(state: u32) -> Self {
        SparsePosterior {
            entries: vec![(state, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Most probable state; ties go to the smallest id.
    pub fn argmax(&self) -> u32 {
        let mut best = self.entries[0];
        for &e in &self.entries[1..] {
            if e.1 > best.1 || (e.1 == best.1 && e.0 < best.0) {
                best = e;
            }
        }
        best.0
    }

    pub fn max_state(&self) -> u32 {
        self.entries.iter().map(|e| e.0).max().unwrap_or(0)
    }

    pub fn prob(&self, state: u32) -> f64 {
        self.entries
            .iter()
            .find(|e| e.0 == state)
            .map_or(0.0, |e| e.1 as f64)
    }
}

/// One utterance of teacher posteriors after truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAlignment {
    pub id: String,
    pub frames: Vec<SparsePosterior>,
    /// Mass threshold used at generation time; unknown for caches read from disk.
    pub threshold: Option<f64>,
}

impl SoftAlignment {
    pub fn entry_count(&self) -> usize {
        self.frames.iter().map(SparsePosterior::len).sum()
    }
}

/// Keeps the shortest prefix of states (by descending probability) whose mass
/// reaches `threshold`, then renormalises the kept probabilities.
pub fn truncate_to_mass(dist: &[f64], threshold: f64) -> Result<SparsePosterior> {
    truncate_with_mass(dist, threshold).map(|(p, _)| p)
}

/// As [`truncate_to_mass`], also returning the retained mass before
/// renormalisation.
pub fn truncate_with_mass(dist: &[f64], threshold: f64) -> Result<(SparsePosterior, f64)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "mass threshold must be in (0, 1], got {threshold}"
        )));
    }
    if dist.is_empty() {
        return Err(Error::Distribution("empty distribution".into()));
    }
    if let Some(bad) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Distribution(format!("invalid probability {bad}")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Distribution(format!(
            "distribution sums to {total}, expected 1"
        )));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let target = threshold * total - MASS_TOLERANCE;
    let mut kept = 0;
    let mut mass = 0.0;
    for &s in &order {
        if dist[s] == 0.0 {
            break;
        }
        mass += dist[s];
        kept += 1;
        if mass >= target {
            break;
        }
    }
    let entries: Vec<(u32, f32)> = order[..kept]
        .iter()
        .map(|&s| (s as u32, (dist[s] / mass) as f32))
        .collect();
    let mut post = SparsePosterior { entries };
    // Rounding to f32 can create ties between neighbours; restore the canonical order.
    post.entries.sort_by(entry_order);
    Ok((post, mass))
}

/// Bytes needed to store every frame's full distribution densely.
pub fn estimate_full_cache_bytes(frames: u64, states: u64, bytes_per_value: u64) -> Result<u64> {
    if frames == 0 || states == 0 || bytes_per_value == 0 {
        return Err(Error::Config("dense size inputs must be positive".into()));
    }
    frames
        .checked_mul(states)
        .and_then(|v| v.checked_mul(bytes_per_value))
        .ok_or_else(|| Error::Config("dense cache size overflows u64".into()))
}

/// Per-frame argmax of a soft alignment.
pub fn hard_from_soft(soft: &SoftAlignment) -> HardAlignment {
    HardAlignment {
        id: soft.id.clone(),
        labels: soft.frames.iter().map(SparsePosterior::argmax).collect(),
    }
}

/// Writes hard labels, one utterance per line: `<id> <state> <state> ...`.
pub fn write_hard_labels(path: &Path, alignments: &[HardAlignment]) -> Result<()> {
    write_atomically(path, |w| {
        for a in alignments {
            let mut line = a.id.clone();
            for l in &a.labels {
                line.push(' ');
                line.push_str(&l.to_string());
            }
            writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    })
}

pub fn read_hard_labels(path: &Path) -> Result<Vec<HardAlignment>> {
    let reader = open_reader(path)?;
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let labels = fields
            .map(|f| {
                f.parse::<u32>().map_err(|_| {
                    Error::Data(format!(
                        "{}:{}: bad state id {f:?}",
                        path.display(),
                        n + 1
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(HardAlignment {
            id: id.to_string(),
            labels,
        });
    }
    Ok(out)
}

/// Checks that every label is below `states`.
pub fn check_hard_labels(alignments: &[HardAlignment], states: usize) -> Result<()> {
    for a in alignments {
        if let Some(&bad) = a.labels.iter().find(|&&l| l as usize >= states) {
            return Err(Error::Data(format!(
                "utterance {}: state id {bad} >= {states}",
                a.id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_keeps_single_state() {
        for t in [0.01, 0.5, 0.98, 1.0] {
            let p = truncate_to_mass(&[0.0, 0.0, 1.0, 0.0], t).unwrap();
            assert_eq!(p.entries(), &[(2, 1.0)]);
        }
    }

    #[test]
    fn worked_example() {
        let p = truncate_to_mass(&[0.60, 0.30, 0.08, 0.02], 0.98).unwrap();
        let ids: Vec<u32> = p.entries().iter().map(|e| e.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        // 0.60/0.98, 0.30/0.98, 0.08/0.98
        let expect = [0.612245, 0.306122, 0.081633];
        for (e, x) in p.entries().iter().zip(expect) {
            assert!((e.1 as f64 - x).abs() < 1e-6, "{e:?}");
        }
    }

    #[test]
    fn uniform_hundred_keeps_ninety_eight() {
        let p = truncate_to_mass(&[0.01; 100], 0.98).unwrap();
        assert_eq!(p.len(), 98);
        for e in p.entries() {
            assert_eq!(e.1, (1.0f64 / 98.0) as f32);
        }
        // ties broken by ascending state id
        let ids: Vec<u32> = p.entries().iter().map(|e| e.0).collect();
        assert_eq!(ids, (0..98).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            truncate_to_mass(&[0.5, 0.6], 0.98),
            Err(Error::Distribution(_))
        ));
        assert!(matches!(
            truncate_to_mass(&[1.2, -0.2], 0.98),
            Err(Error::Distribution(_))
        ));
        assert!(truncate_to_mass(&[0.5, 0.5], 0.0).is_err());
        assert!(truncate_to_mass(&[0.5, 0.5], 1.5).is_err());
    }

    #[test]
    fn full_mass_keeps_positive_support() {
        let p = truncate_to_mass(&[0.25, 0.0, 0.5, 0.25], 1.0).unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn argmax_of_soft() {
        let p = truncate_to_mass(&[0.60, 0.30, 0.08, 0.02], 0.98).unwrap();
        let soft = SoftAlignment {
            id: "u".into(),
            frames: vec![p, SparsePosterior::one_hot(3)],
            threshold: Some(0.98),
        };
        assert_eq!(hard_from_soft(&soft).labels, vec![0, 3]);
    }

    #[test]
    fn argmax_tie_goes_to_smallest_id() {
        let p = SparsePosterior::new(vec![(5, 0.5), (2, 0.5)]).unwrap();
        assert_eq!(p.argmax(), 2);
        assert_eq!(p.entries()[0].0, 2);
    }

    #[test]
    fn sparse_posterior_validation() {
        assert!(SparsePosterior::new(vec![]).is_err());
        assert!(SparsePosterior::new(vec![(1, 0.5), (1, 0.5)]).is_err());
        assert!(SparsePosterior::new(vec![(1, 0.5), (2, 0.4)]).is_err());
        assert!(SparsePosterior::new(vec![(1, 1.0), (2, 0.0)]).is_err());
    }

    #[test]
    fn dense_size_estimate() {
        assert_eq!(estimate_full_cache_bytes(1000, 3431, 4).unwrap(), 13_724_000);
        assert_eq!(estimate_full_cache_bytes(1, 1, 1).unwrap(), 1);
        let wsj = estimate_full_cache_bytes(29_160_000, 3431, 4).unwrap();
        assert_eq!(wsj, 400_191_840_000);
        assert!(estimate_full_cache_bytes(u64::MAX, 2, 1).is_err());
        assert!(estimate_full_cache_bytes(0, 2, 1).is_err());
    }

    #[test]
    fn hard_label_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        let labels = vec![
            HardAlignment {
                id: "utt-a".into(),
                labels: vec![0, 4, 4, 2],
            },
            HardAlignment {
                id: "utt-b".into(),
                labels: vec![1],
            },
        ];
        write_hard_labels(&path, &labels).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "utt-a 0 4 4 2\nutt-b 1\n"
        );
        assert_eq!(read_hard_labels(&path).unwrap(), labels);
        assert!(check_hard_labels(&labels, 5).is_ok());
        assert!(check_hard_labels(&labels, 4).is_err());
    }
}
