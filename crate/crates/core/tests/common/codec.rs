//! Random payloads and byte mutations for the container codecs.

use distilkit::alignments::{read_cache_from, write_cache_to, SoftAlignment, SparsePosterior};
use distilkit::checkpoint::{read_checkpoint_from, write_checkpoint_to};
use distilkit::layers::{init_params, FeedForwardSpec, ModelParams, ModelSpec, RecurrentSpec};
use distilkit::{Error, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_posterior(rng: &mut ChaCha8Rng, states: u32) -> SparsePosterior {
    let n = rng.random_range(1..=states.min(8)) as usize;
    let mut ids: Vec<u32> = (0..states).collect();
    ids.shuffle(rng);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let entries = ids[..n]
        .iter()
        .zip(&raw)
        .map(|(&s, &p)| (s, (p / total) as f32))
        .collect();
    SparsePosterior::new(entries).unwrap()
}

fn rand_id(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['a', 'z', '0', '9', '-', '_', 'é', 'ß', '語', ' '];
    let len = rng.random_range(0..12);
    (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect()
}

/// `utterances` random alignments with 0 to `max_frames` frames each.
pub fn rand_alignments(rng: &mut ChaCha8Rng, utterances: usize, max_frames: usize) -> Vec<SoftAlignment> {
    let states = rng.random_range(1..3000);
    (0..utterances)
        .map(|_| {
            let frames = rng.random_range(0..=max_frames);
            SoftAlignment {
                id: rand_id(rng),
                frames: (0..frames).map(|_| rand_posterior(rng, states)).collect(),
                threshold: None,
            }
        })
        .collect()
}

pub fn encode_cache(alignments: &[SoftAlignment]) -> Vec<u8> {
    write_cache_to(alignments, Vec::new()).unwrap().0
}

pub fn cache_round_trips(alignments: &[SoftAlignment]) -> bool {
    let bytes = encode_cache(alignments);
    let back = read_cache_from(bytes.as_slice()).unwrap();
    back.len() == alignments.len()
        && back.iter().zip(alignments).all(|(a, b)| {
            a.id == b.id
                && a.frames.len() == b.frames.len()
                && a.frames.iter().zip(&b.frames).all(|(x, y)| {
                    x.entries().len() == y.entries().len()
                        && x.entries()
                            .iter()
                            .zip(y.entries())
                            .all(|(p, q)| p.0 == q.0 && p.1.to_bits() == q.1.to_bits())
                })
        })
}

pub fn rand_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let feature_dim = rng.random_range(1..6);
    let states = rng.random_range(2..7);
    if rng.random_bool(0.5) {
        let depth = rng.random_range(0..3);
        ModelSpec::FeedForward(FeedForwardSpec {
            feature_dim,
            context_left: rng.random_range(0..3),
            context_right: rng.random_range(0..3),
            hidden: (0..depth).map(|_| rng.random_range(1..6)).collect(),
            states,
        })
    } else {
        ModelSpec::TcDnnBlstmDnn(RecurrentSpec {
            feature_dim,
            tc_width: [1, 3, 5][rng.random_range(0..3)],
            tc_out: rng.random_range(1..5),
            pre_hidden: (0..rng.random_range(0..2)).map(|_| rng.random_range(1..5)).collect(),
            blstm_cells: rng.random_range(1..4),
            post_hidden: (0..rng.random_range(0..2)).map(|_| rng.random_range(1..5)).collect(),
            states,
            cell_clip: rng.random_range(0.5..5.0),
        })
    }
}

/// Initialised parameters with some values replaced by awkward finite bit patterns.
pub fn rand_params(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ModelParams {
    const ODD: [f64; 6] = [-0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, -1e300, 1.0 / 3.0];
    let mut params = init_params(spec, rng.random());
    for t in params.tensors_mut() {
        let mut data = t.data().to_vec();
        for v in &mut data {
            if rng.random_bool(0.1) {
                *v = ODD[rng.random_range(0..ODD.len())];
            }
        }
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    }
    params
}

pub fn encode_checkpoint(spec: &ModelSpec, params: &ModelParams) -> Vec<u8> {
    write_checkpoint_to(spec, params, Vec::new()).unwrap()
}

pub fn checkpoint_round_trips(spec: &ModelSpec, params: &ModelParams) -> bool {
    let bytes = encode_checkpoint(spec, params);
    let (s, p) = read_checkpoint_from(bytes.as_slice()).unwrap();
    let a = p.tensors();
    let b = params.tensors();
    s == *spec
        && a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.shape() == y.shape()
                && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

/// Flips, truncates or extends `bytes`; the result always differs from the input.
pub fn mutate(rng: &mut ChaCha8Rng, bytes: &[u8]) -> Vec<u8> {
    let mut out = bytes.to_vec();
    match rng.random_range(0..4) {
        0 | 1 => {
            let flips = rng.random_range(1..4);
            for _ in 0..flips {
                let i = rng.random_range(0..out.len());
                out[i] ^= rng.random_range(1..=255u8);
            }
            if out == bytes {
                out[0] ^= 0xff;
            }
        }
        2 => out.truncate(rng.random_range(0..out.len())),
        _ => {
            let extra = rng.random_range(1..16);
            out.extend((0..extra).map(|_| rng.random::<u8>()));
        }
    }
    out
}

/// A mutated encoding must decode to a codec error, never a value or a panic.
pub fn is_structured_rejection<T>(r: distilkit::Result<T>) -> bool {
    matches!(r, Err(Error::Codec(e)) if (1..=7).contains(&e.code()))
}

/// Runs `n` mutations against each decoder and returns the number that did not
/// produce a structured codec error.
pub fn fuzz_failures(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let cache = encode_cache(&rand_alignments(rng, 4, 6));
    let spec = rand_spec(rng);
    let ckpt = encode_checkpoint(&spec, &rand_params(rng, &spec));
    let mut failures = 0;
    for _ in 0..n {
        let bad = mutate(rng, &cache);
        let ok = std::panic::catch_unwind(|| is_structured_rejection(read_cache_from(bad.as_slice())));
        failures += usize::from(!matches!(ok, Ok(true)));
        let bad = mutate(rng, &ckpt);
        let ok = std::panic::catch_unwind(|| is_structured_rejection(read_checkpoint_from(bad.as_slice())));
        failures += usize::from(!matches!(ok, Ok(true)));
    }
    failures
}
