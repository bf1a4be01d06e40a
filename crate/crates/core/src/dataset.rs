//! Synthetic online dataset: a mixture of noisy binary prototype images.
//!
//! Each example picks a component `m` with probability `w_m` and returns
//! that component's prototype with every pixel flipped independently with
//! probability `p_m`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rbm::LogSumExp;

/// Mixing weights of the benchmark mixture.
pub const PAPER_WEIGHTS: [f64; 5] = [0.3314, 0.2262, 0.0812, 0.0254, 0.3358];
/// Per-component pixel flip probabilities of the benchmark mixture.
pub const PAPER_FLIP_PROBS: [f64; 5] = [0.0001, 0.0137, 0.0215, 0.0223, 0.0544];
pub const PAPER_IMAGE_SIDE: usize = 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRecord", into = "SpecRecord")]
pub struct MixtureSpec {
    pub image_side: usize,
    pub prototypes: Vec<Vec<u8>>,
    pub weights: Vec<f64>,
    pub flip_probs: Vec<f64>,
    /// Seed the prototypes were drawn from, when known.
    pub seed: Option<u64>,
}

/// JSON layout: prototypes as strings of `0`/`1`.
#[derive(Serialize, Deserialize)]
struct SpecRecord {
    image_side: usize,
    weights: Vec<f64>,
    flip_probs: Vec<f64>,
    prototypes: Vec<String>,
    seed: Option<u64>,
}

impl From<MixtureSpec> for SpecRecord {
    fn from(spec: MixtureSpec) -> Self {
        Self {
            image_side: spec.image_side,
            weights: spec.weights,
            flip_probs: spec.flip_probs,
            prototypes: spec
                .prototypes
                .iter()
                .map(|p| p.iter().map(|&b| if b != 0 { '1' } else { '0' }).collect())
                .collect(),
            seed: spec.seed,
        }
    }
}

impl TryFrom<SpecRecord> for MixtureSpec {
    type Error = Error;

    fn try_from(record: SpecRecord) -> Result<Self> {
        let prototypes = record
            .prototypes
            .iter()
            .map(|s| {
                s.chars()
                    .map(|c| match c {
                        '0' => Ok(0),
                        '1' => Ok(1),
                        other => Err(Error::InvalidInput(format!("invalid prototype pixel {other:?}"))),
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureSpec::new(record.image_side, prototypes, record.weights, record.flip_probs, record.seed)
    }
}

impl MixtureSpec {
    /// Validates the spec and renormalizes the weights.
    pub fn new(
        image_side: usize,
        prototypes: Vec<Vec<u8>>,
        weights: Vec<f64>,
        flip_probs: Vec<f64>,
        seed: Option<u64>,
    ) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        check_len("mixture weights", prototypes.len(), weights.len())?;
        check_len("flip probabilities", prototypes.len(), flip_probs.len())?;
        let width = image_side * image_side;
        for p in &prototypes {
            check_len("prototype", width, p.len())?;
            if p.iter().any(|&b| b > 1) {
                return Err(Error::InvalidInput("prototype pixels must be 0 or 1".into()));
            }
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput("mixture weights sum to zero".into()));
        }
        if flip_probs.iter().any(|&p| !(0.0..=0.5).contains(&p)) {
            return Err(Error::InvalidInput("flip probabilities must lie in [0, 0.5]".into()));
        }
        Ok(Self {
            image_side,
            prototypes,
            weights: weights.iter().map(|w| w / total).collect(),
            flip_probs,
            seed,
        })
    }

    pub fn width(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn num_components(&self) -> usize {
        self.prototypes.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Benchmark mixture on `side x side` images with prototypes drawn as
/// i.i.d. fair pixels from `rng`.
pub fn paper_spec_with_side<R: Rng + ?Sized>(side: usize, rng: &mut R) -> MixtureSpec {
    let prototypes = (0..PAPER_WEIGHTS.len())
        .map(|_| (0..side * side).map(|_| rng.gen_range(0..=1u8)).collect())
        .collect();
    MixtureSpec::new(side, prototypes, PAPER_WEIGHTS.to_vec(), PAPER_FLIP_PROBS.to_vec(), None)
        .expect("benchmark constants are valid")
}

/// Benchmark mixture on 28x28 images.
pub fn paper_spec<R: Rng + ?Sized>(rng: &mut R) -> MixtureSpec {
    paper_spec_with_side(PAPER_IMAGE_SIDE, rng)
}

/// Benchmark mixture whose prototypes are derived from `seed`.
pub fn paper_spec_seeded(side: usize, seed: u64) -> MixtureSpec {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    MixtureSpec {
        seed: Some(seed),
        ..paper_spec_with_side(side, &mut rng)
    }
}

/// Draws a component index from the mixing weights.
pub fn sample_component<R: Rng + ?Sized>(spec: &MixtureSpec, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (m, &w) in spec.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return m;
        }
    }
    // Rounding in the cumulative sum: fall back to the last positive weight.
    spec.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// One example from the mixture.
pub fn sample<R: Rng + ?Sized>(spec: &MixtureSpec, rng: &mut R) -> Vec<u8> {
    let m = sample_component(spec, rng);
    let p = spec.flip_probs[m];
    spec.prototypes[m]
        .iter()
        .map(|&b| if rng.gen::<f64>() < p { 1 - b } else { b })
        .collect()
}

/// `n` independent examples.
pub fn draw<R: Rng + ?Sized>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Vec<Vec<u8>> {
    (0..n).map(|_| sample(spec, rng)).collect()
}

/// Log-density of `v` under the mixture.
pub fn mixture_log_likelihood(spec: &MixtureSpec, v: &[u8]) -> Result<f64> {
    check_len("image", spec.width(), v.len())?;
    let n = v.len() as f64;
    let mut lse = LogSumExp::new();
    for ((proto, &w), &p) in spec.prototypes.iter().zip(&spec.weights).zip(&spec.flip_probs) {
        if w == 0.0 {
            continue;
        }
        let flips = proto.iter().zip(v).filter(|(a, b)| a != b).count() as f64;
        let log_flip = if flips == 0.0 { 0.0 } else { flips * p.ln() };
        let log_keep = if flips == n { 0.0 } else { (n - flips) * (-p).ln_1p() };
        lse.push(w.ln() + log_flip + log_keep);
    }
    Ok(lse.value())
}

/// Mean mixture log-density over `data`.
pub fn mean_mixture_log_likelihood(spec: &MixtureSpec, data: &[Vec<u8>]) -> Result<f64> {
    let mut total = 0.0;
    for v in data {
        total += mixture_log_likelihood(spec, v)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Packed-bit snapshot: `count` and `width` as little-endian u64, then one
/// row per example of `ceil(width / 8)` bytes, least significant bit first.
pub fn write_snapshot<W: Write>(data: &[Vec<u8>], width: usize, mut out: W) -> Result<()> {
    out.write_all(&(data.len() as u64).to_le_bytes())?;
    out.write_all(&(width as u64).to_le_bytes())?;
    let mut row = vec![0u8; width.div_ceil(8)];
    for v in data {
        check_len("snapshot row", width, v.len())?;
        row.fill(0);
        for (j, &b) in v.iter().enumerate() {
            if b != 0 {
                row[j / 8] |= 1 << (j % 8);
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<Vec<Vec<u8>>> {
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let count = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let width = u64::from_le_bytes(word) as usize;
    let mut row = vec![0u8; width.div_ceil(8)];
    (0..count)
        .map(|_| {
            input.read_exact(&mut row)?;
            Ok((0..width).map(|j| (row[j / 8] >> (j % 8)) & 1).collect())
        })
        .collect()
}
