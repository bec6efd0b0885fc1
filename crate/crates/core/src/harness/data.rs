//! Synthetic three-modality grid data.
//!
//! Each modality has its own per-channel intensity statistics and texture,
//! and carries one task: modality A labels every grid cell with a class,
//! modalities B and C regress an oriented-object target per cell. Objects are
//! square blobs whose channel signature encodes the class (A) or the
//! orientation angle (B, C), so every target is recoverable from the cell's
//! own feature vector up to noise.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
    C,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::A, Modality::B, Modality::C];

    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::B => 1,
            Modality::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::B => "B",
            Modality::C => "C",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Modality::A),
            "B" => Ok(Modality::B),
            "C" => Ok(Modality::C),
            other => Err(format!("unknown modality {other:?}, expected A, B or C")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Per-cell class label; cross-entropy loss.
    Classification { classes: usize },
    /// Per-cell `[presence, presence·cos 2θ, presence·sin 2θ]`; smooth-L1 loss.
    OrientedRegression,
}

impl TaskKind {
    /// Output width of the task head.
    pub fn head_width(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::OrientedRegression => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: usize,
    pub modality: Modality,
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn head_width(&self) -> usize {
        self.kind.head_width()
    }
}

/// One task per modality, in modality order.
pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            id: 0,
            modality: Modality::A,
            kind: TaskKind::Classification { classes: 3 },
        },
        TaskSpec {
            id: 1,
            modality: Modality::B,
            kind: TaskKind::OrientedRegression,
        },
        TaskSpec {
            id: 2,
            modality: Modality::C,
            kind: TaskKind::OrientedRegression,
        },
    ]
}

/// Generation parameters of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub task: TaskKind,
    pub height: usize,
    pub width: usize,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    /// Cycles of the background texture across the grid.
    pub spatial_frequency: f64,
    /// Texture amplitude in units of the channel std.
    pub texture_amplitude: f64,
    /// Fraction of cells whose deviation is multiplied by an Exp(1) draw.
    pub speckle_rate: f64,
    /// Expected number of 2×2 blobs per grid cell.
    pub blob_density: f64,
    /// Object signature amplitude in units of the channel std.
    pub signal_amplitude: f64,
    /// Label flip probability (classification) or target noise std
    /// (regression).
    pub label_noise: f64,
}

impl ModalitySpec {
    /// Built-in statistics for `modality` on a `height × width × channels` grid.
    pub fn standard(modality: Modality, height: usize, width: usize, channels: usize) -> Self {
        let task = default_tasks()[modality.index()].kind;
        let (base, slope, std, freq, texture, speckle, density, noise) = match modality {
            Modality::A => (0.4, 0.05, 0.6, 1.0, 0.5, 0.15, 0.08, 0.1),
            Modality::B => (1.6, -0.04, 0.9, 2.0, 0.8, 0.0, 0.10, 0.1),
            Modality::C => (2.8, 0.02, 0.4, 0.5, 0.3, 0.0, 0.06, 0.1),
        };
        Self {
            modality,
            task,
            height,
            width,
            channel_mean: (0..channels).map(|c| base + slope * c as f64).collect(),
            channel_std: vec![std; channels],
            spatial_frequency: freq,
            texture_amplitude: texture,
            speckle_rate: speckle,
            blob_density: density,
            signal_amplitude: 1.5,
            label_noise: noise,
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Row-major class label per cell.
    Classes(Vec<usize>),
    /// `[height, width, 3]` regression targets.
    Oriented(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub modality: Modality,
    /// `[height, width, channels]`.
    pub image: Tensor,
    pub target: Target,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent generator seed from a base seed and a key path.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Stream tags keeping training, evaluation and inspection data disjoint.
pub mod stream {
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const INSPECT: u64 = 3;
}

/// Deterministic sample keyed by `(seed, stream, modality, index)`.
pub fn generate_sample(spec: &ModalitySpec, seed: u64, stream: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[stream, spec.modality.index() as u64, index],
    ));
    generate_with_rng(spec, &mut rng)
}

struct Blob {
    row: usize,
    col: usize,
    class: usize,
    angle: f64,
}

pub fn generate_with_rng<R: Rng + ?Sized>(spec: &ModalitySpec, rng: &mut R) -> Sample {
    let (h, w, c) = (spec.height, spec.width, spec.channels());
    let cells = h * w;

    let expected = spec.blob_density * cells as f64;
    let n_blobs = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            row: rng.random_range(0..h),
            col: rng.random_range(0..w),
            class: rng.random_range(1..3),
            angle: rng.random::<f64>() * PI,
        })
        .collect();
    // later blobs overwrite earlier ones
    let mut owner: Vec<Option<usize>> = vec![None; cells];
    for (b, blob) in blobs.iter().enumerate() {
        for i in blob.row..(blob.row + 2).min(h) {
            for j in blob.col..(blob.col + 2).min(w) {
                owner[i * w + j] = Some(b);
            }
        }
    }

    let phase = match spec.modality {
        Modality::A => 0.0,
        Modality::B => 0.5,
        Modality::C => 1.0,
    };
    let mut data = vec![0.0; cells * c];
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            let speckle = if spec.speckle_rate > 0.0 && rng.random::<f64>() < spec.speckle_rate {
                Exp1.sample(rng)
            } else {
                1.0
            };
            for ch in 0..c {
                let noise: f64 = StandardNormal.sample(rng);
                let texture = spec.texture_amplitude
                    * (2.0 * PI * spec.spatial_frequency * (i as f64 + phase * j as f64)
                        / h as f64
                        + ch as f64 * PI / 4.0)
                        .sin();
                let signal = owner[cell].map_or(0.0, |b| signature(spec, &blobs[b], ch, c));
                let dev = (noise + texture + signal) * speckle;
                data[cell * c + ch] = spec.channel_mean[ch] + spec.channel_std[ch] * dev;
            }
        }
    }
    let image = Tensor::new(vec![h, w, c], data).expect("image shape");

    let target = match spec.task {
        TaskKind::Classification { classes } => {
            let labels = (0..cells)
                .map(|cell| {
                    let clean = owner[cell].map_or(0, |b| blobs[b].class.min(classes - 1));
                    if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                        rng.random_range(0..classes)
                    } else {
                        clean
                    }
                })
                .collect();
            Target::Classes(labels)
        }
        TaskKind::OrientedRegression => {
            let mut t = vec![0.0; cells * 3];
            for cell in 0..cells {
                if let Some(b) = owner[cell] {
                    let a = 2.0 * blobs[b].angle;
                    t[cell * 3] = 1.0;
                    t[cell * 3 + 1] = a.cos();
                    t[cell * 3 + 2] = a.sin();
                }
                if spec.label_noise > 0.0 {
                    for k in 0..3 {
                        let n: f64 = StandardNormal.sample(rng);
                        t[cell * 3 + k] += spec.label_noise * n;
                    }
                }
            }
            Target::Oriented(Tensor::new(vec![h, w, 3], t).expect("target shape"))
        }
    };
    Sample {
        modality: spec.modality,
        image,
        target,
    }
}

fn signature(spec: &ModalitySpec, blob: &Blob, ch: usize, channels: usize) -> f64 {
    let amp = spec.signal_amplitude;
    match spec.task {
        TaskKind::Classification { .. } => {
            let sign = if blob.class == 1 {
                if ch % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else if (ch / 2) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            amp * sign
        }
        TaskKind::OrientedRegression => {
            let phi = 2.0 * PI * ch as f64 / channels as f64;
            amp * (0.5 + (2.0 * blob.angle - phi).cos())
        }
    }
}

/// Pairwise symmetric KL divergence between modality intensity histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestReport {
    /// `(first, second, mean over channels, min over channels)`.
    pub pairs: Vec<(Modality, Modality, f64, f64)>,
}

impl SelfTestReport {
    pub fn min_divergence(&self) -> f64 {
        self.pairs.iter().map(|p| p.3).fold(f64::INFINITY, f64::min)
    }
}

const HIST_LO: f64 = -4.0;
const HIST_HI: f64 = 10.0;
const HIST_BINS: usize = 140;
const HIST_EPS: f64 = 1e-6;

fn channel_histograms(spec: &ModalitySpec, seed: u64, n_samples: u64) -> Vec<Vec<f64>> {
    let c = spec.channels();
    let mut hist = vec![vec![0.0; HIST_BINS]; c];
    let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
    for idx in 0..n_samples {
        let s = generate_sample(spec, seed, stream::EVAL, idx);
        for cell in 0..s.image.rows() {
            for (ch, &v) in s.image.row(cell).iter().enumerate() {
                let bin = (((v - HIST_LO) / width).floor().max(0.0) as usize).min(HIST_BINS - 1);
                hist[ch][bin] += 1.0;
            }
        }
    }
    for h in &mut hist {
        let total: f64 = h.iter().sum::<f64>() + HIST_EPS * HIST_BINS as f64;
        for v in h.iter_mut() {
            *v = (*v + HIST_EPS) / total;
        }
    }
    hist
}

fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a / b).ln() + b * (b / a).ln())
        .sum()
}

/// Histograms `n_samples` per modality and reports pairwise divergences.
pub fn self_test(specs: &[ModalitySpec], seed: u64, n_samples: u64) -> SelfTestReport {
    let hists: Vec<_> = specs
        .iter()
        .map(|s| channel_histograms(s, seed, n_samples))
        .collect();
    let mut pairs = Vec::new();
    for a in 0..specs.len() {
        for b in a + 1..specs.len() {
            let per_channel: Vec<f64> = hists[a]
                .iter()
                .zip(&hists[b])
                .map(|(p, q)| symmetric_kl(p, q))
                .collect();
            let mean = per_channel.iter().sum::<f64>() / per_channel.len() as f64;
            let min = per_channel.iter().copied().fold(f64::INFINITY, f64::min);
            pairs.push((specs[a].modality, specs[b].modality, mean, min));
        }
    }
    SelfTestReport { pairs }
}
