//! Synthetic frame-classification corpus and the "FEAT" feature container.
//!
//! Each utterance follows a hidden left-to-right Markov chain over the states.
//! A frame's features are its state's mean vector, plus a fraction of the
//! previous frame's state mean, plus Gaussian noise. Segment durations and the
//! successor structure make temporal context informative, which a
//! bidirectional recurrent model can exploit and a windowed feed-forward
//! model only partly can.
//!
//! FEAT v1, little-endian:
//!
//! ```text
//! header   "FEAT" | version u32 | utterance_count u64
//! utterance id_len u16 | id | frame_count u32 | dim u32 | frame_count·dim × f32
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignments::{check_hard_labels, read_hard_labels, write_hard_labels, HardAlignment};
use crate::codec::{open_reader, write_atomically, CrcReader, CrcWriter, MAX_PREALLOC};
use crate::error::{CodecError, Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";
pub const FEAT_VERSION: u32 = 1;

/// One utterance: `frames × feature_dim` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_states: usize,
    pub feature_dim: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Probability of staying in the current state at each frame.
    pub self_loop: f64,
    /// Probability that a transition skips one state ahead.
    pub skip: f64,
    pub sigma: f64,
    /// Weight of the previous frame's state mean in the emission.
    pub coupling: f64,
    /// Standard deviation of each state-mean component.
    pub mean_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_states: 48,
            feature_dim: 16,
            train_utterances: 400,
            dev_utterances: 50,
            test_utterances: 50,
            min_frames: 40,
            max_frames: 80,
            self_loop: 0.85,
            skip: 0.25,
            sigma: 0.7,
            coupling: 0.3,
            mean_scale: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_states < 2 || self.num_states > u32::MAX as usize {
            return bad("num_states must be >= 2");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.train_utterances == 0 || self.dev_utterances == 0 || self.test_utterances == 0 {
            return bad("every split needs at least one utterance");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 1 <= min_frames <= max_frames");
        }
        if !(self.self_loop > 0.0 && self.self_loop < 1.0) {
            return bad("self_loop must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.skip) {
            return bad("skip must be in [0, 1]");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !self.coupling.is_finite() || !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return bad("coupling must be finite and mean_scale positive");
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("synthetic spec serialises")
    }
}

/// Features and true state labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub utterances: Vec<Utterance>,
    pub labels: Vec<HardAlignment>,
}

impl Split {
    pub fn frames(&self) -> usize {
        self.utterances.iter().map(Utterance::frames).sum()
    }

    /// Checks ids and frame counts of `labels` against the features.
    pub fn check(&self, states: usize) -> Result<()> {
        check_alignment_ids(&self.utterances, self.labels.iter().map(|l| (&l.id, l.labels.len())))?;
        check_hard_labels(&self.labels, states)
    }
}

/// Verifies that `(id, frames)` pairs line up with `utterances`.
pub fn check_alignment_ids<'a>(
    utterances: &[Utterance],
    items: impl ExactSizeIterator<Item = (&'a String, usize)>,
) -> Result<()> {
    if items.len() != utterances.len() {
        return Err(Error::Data(format!(
            "{} utterances but {} alignments",
            utterances.len(),
            items.len()
        )));
    }
    for (u, (id, n)) in utterances.iter().zip(items) {
        if &u.id != id {
            return Err(Error::Data(format!("alignment {id} does not match utterance {}", u.id)));
        }
        if u.frames() != n {
            return Err(Error::Data(format!(
                "utterance {id}: {} frames but {n} alignment frames",
                u.frames()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Split,
    pub dev: Split,
    pub test: Split,
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

impl SynthData {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn state_means(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = substream(spec.seed, "data/means", 0);
    (0..spec.num_states)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| spec.mean_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn generate_utterance(spec: &SynthSpec, means: &[Vec<f64>], split: &str, index: usize) -> (Utterance, HardAlignment) {
    let mut rng = substream(spec.seed, &format!("data/{split}"), index as u64);
    let n = spec.num_states;
    let frames = rng.random_range(spec.min_frames..=spec.max_frames);
    let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let mut state = rng.random_range(0..n);
    let mut prev = state;
    let mut labels = Vec::with_capacity(frames);
    let mut data = Vec::with_capacity(frames * spec.feature_dim);
    for t in 0..frames {
        if t > 0 && !rng.random_bool(spec.self_loop) {
            let step = if rng.random_bool(spec.skip) { 2 } else { 1 };
            state = (state + step) % n;
        }
        for k in 0..spec.feature_dim {
            let x = means[state][k] + spec.coupling * means[prev][k] + noise.sample(&mut rng);
            // Stored as f32 on disk; round now so in-memory and on-disk data agree.
            data.push(x as f32 as f64);
        }
        labels.push(state as u32);
        prev = state;
    }
    let id = format!("{split}-{index:05}");
    (
        Utterance {
            id: id.clone(),
            features: Tensor::new(vec![frames, spec.feature_dim], data).expect("finite features"),
        },
        HardAlignment { id, labels },
    )
}

fn generate_split(spec: &SynthSpec, means: &[Vec<f64>], split: &str, count: usize) -> Split {
    let (utterances, labels) = (0..count)
        .into_par_iter()
        .map(|i| generate_utterance(spec, means, split, i))
        .unzip();
    Split { utterances, labels }
}

/// Deterministic in `spec`, including `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let means = state_means(spec);
    Ok(SynthData {
        train: generate_split(spec, &means, "train", spec.train_utterances),
        dev: generate_split(spec, &means, "dev", spec.dev_utterances),
        test: generate_split(spec, &means, "test", spec.test_utterances),
    })
}

pub fn write_features_to<W: Write>(utterances: &[Utterance], w: W) -> Result<(W, u64)> {
    let io = CodecError::Io;
    let mut out = CrcWriter::new(w);
    out.bytes(FEAT_MAGIC).map_err(io)?;
    out.u32(FEAT_VERSION).map_err(io)?;
    out.u64(utterances.len() as u64).map_err(io)?;
    for u in utterances {
        out.id(&u.id)?;
        out.u32(u.features.rows() as u32).map_err(io)?;
        out.u32(u.features.cols() as u32).map_err(io)?;
        for &v in u.features.data() {
            out.f32(v as f32).map_err(io)?;
        }
    }
    Ok(out.finish_plain().map_err(io)?)
}

pub fn write_features(utterances: &[Utterance], path: &Path) -> Result<u64> {
    write_atomically(path, |w| write_features_to(utterances, w).map(|(_, n)| n))
}

pub fn read_features_from<R: Read>(reader: R) -> Result<Vec<Utterance>> {
    let mut r = CrcReader::new(reader);
    r.header(FEAT_MAGIC, FEAT_VERSION)?;
    let count = r.u64("utterance count")?;
    let mut out = Vec::with_capacity((count as usize).min(MAX_PREALLOC));
    let mut dim = None;
    for _ in 0..count {
        let id = r.id("utterance id")?;
        let frames = r.u32("frame count")? as usize;
        let d = r.u32("feature dim")? as usize;
        if frames == 0 || d == 0 {
            return Err(CodecError::Invalid(format!("{id}: empty feature matrix")).into());
        }
        if *dim.get_or_insert(d) != d {
            return Err(CodecError::Invalid(format!("{id}: feature dim {d} differs from earlier utterances")).into());
        }
        let n = frames
            .checked_mul(d)
            .ok_or_else(|| CodecError::Invalid(format!("{id}: size overflow")))?;
        let mut data = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let v = r.f32("features")?;
            if !v.is_finite() {
                return Err(CodecError::Invalid(format!("{id}: non-finite feature")).into());
            }
            data.push(v as f64);
        }
        out.push(Utterance {
            id,
            features: Tensor::new(vec![frames, d], data)?,
        });
    }
    r.finish_plain()?;
    Ok(out)
}

pub fn read_features(path: &Path) -> Result<Vec<Utterance>> {
    read_features_from(open_reader(path)?)
}

pub fn features_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.feat"))
}

pub fn labels_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.labels"))
}

/// Writes `<split>.feat` and `<split>.labels` for every split plus `synth.toml`.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, data: &SynthData) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for name in SPLITS {
        let split = data.split(name).expect("known split");
        write_features(&split.utterances, &features_path(dir, name))?;
        write_hard_labels(&labels_path(dir, name), &split.labels)?;
    }
    let spec_path = dir.join("synth.toml");
    write_atomically(&spec_path, |w| {
        w.write_all(spec.to_text().as_bytes())
            .map_err(|e| Error::io(format!("writing {}", spec_path.display()), e))
    })
}

/// Reads one split's features and, if present, its labels.
pub fn read_split(dir: &Path, name: &str) -> Result<Split> {
    let utterances = read_features(&features_path(dir, name))?;
    let lp = labels_path(dir, name);
    let labels = if lp.exists() { read_hard_labels(&lp)? } else { Vec::new() };
    Ok(Split { utterances, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_states: 6,
            feature_dim: 3,
            train_utterances: 4,
            dev_utterances: 2,
            test_utterances: 2,
            min_frames: 5,
            max_frames: 9,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
        let mut ids = std::collections::HashSet::new();
        for name in SPLITS {
            let s = a.split(name).unwrap();
            s.check(6).unwrap();
            for u in &s.utterances {
                assert!(ids.insert(u.id.clone()));
                assert!((5..=9).contains(&u.frames()));
                assert!(u.features.data().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn labels_move_forward_only() {
        let spec = SynthSpec { skip: 0.0, ..small() };
        let data = generate(&spec).unwrap();
        for l in &data.train.labels {
            for w in l.labels.windows(2) {
                assert!(w[1] == w[0] || w[1] == (w[0] + 1) % 6);
            }
        }
    }

    #[test]
    fn noiseless_uncoupled_frames_sit_on_state_means() {
        let spec = SynthSpec {
            sigma: 1e-9,
            coupling: 0.0,
            ..small()
        };
        let data = generate(&spec).unwrap();
        let means = state_means(&spec);
        for (u, l) in data.train.utterances.iter().zip(&data.train.labels) {
            for (t, &s) in l.labels.iter().enumerate() {
                for (x, m) in u.features.row(t).iter().zip(&means[s as usize]) {
                    assert!((x - m).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn feat_round_trip_and_layout() {
        let data = generate(&small()).unwrap();
        let (bytes, n) = write_features_to(&data.dev.utterances, Vec::new()).unwrap();
        assert_eq!(bytes.len() as u64, n);
        let expect: usize = 16
            + data
                .dev
                .utterances
                .iter()
                .map(|u| 2 + u.id.len() + 8 + 4 * u.features.len())
                .sum::<usize>();
        assert_eq!(bytes.len(), expect);
        assert_eq!(read_features_from(bytes.as_slice()).unwrap(), data.dev.utterances);
        assert!(read_features_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(read_features_from(extra.as_slice()).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let data = generate(&spec).unwrap();
        write_dataset(dir.path(), &spec, &data).unwrap();
        for name in SPLITS {
            assert_eq!(&read_split(dir.path(), name).unwrap(), data.split(name).unwrap());
        }
        let text = std::fs::read_to_string(dir.path().join("synth.toml")).unwrap();
        assert_eq!(SynthSpec::from_text(&text).unwrap(), spec);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SynthSpec { sigma: 0.0, ..small() }.validate().is_err());
        assert!(SynthSpec { self_loop: 1.0, ..small() }.validate().is_err());
        assert!(SynthSpec { min_frames: 10, max_frames: 5, ..small() }.validate().is_err());
        assert!(SynthSpec { dev_utterances: 0, ..small() }.validate().is_err());
    }
}
