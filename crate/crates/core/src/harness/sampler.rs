use super::data::{generate_sample, stream, Modality, ModalitySpec, Sample};
use super::{HarnessError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-modality batch composition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Samples of A, B and C per batch.
    pub counts: [usize; 3],
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            counts: [2, 1, 1],
            batch_size: 4,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.counts.iter().sum();
        if total != self.batch_size {
            return Err(HarnessError::Config(format!(
                "sampler.counts sum to {total} but sampler.batch_size is {}",
                self.batch_size
            )));
        }
        if let Some(m) = self.counts.iter().position(|&c| c == 0) {
            return Err(HarnessError::Config(format!(
                "sampler.counts gives modality {} no samples; every batch must contain every modality",
                Modality::from_index(m).expect("three modalities")
            )));
        }
        Ok(())
    }
}

/// Modality tags of one batch: exact composition, shuffled by `rng`.
pub fn sample_batch<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> Result<Vec<Modality>> {
    cfg.validate()?;
    let mut tags: Vec<Modality> = Modality::ALL
        .iter()
        .zip(cfg.counts)
        .flat_map(|(&m, c)| std::iter::repeat_n(m, c))
        .collect();
    tags.shuffle(rng);
    Ok(tags)
}

/// Endless stream of training batches. Each modality draws its samples from
/// a running index, so the sequence depends only on the seeds.
#[derive(Debug, Clone)]
pub struct BatchStream {
    cfg: SamplerConfig,
    specs: Vec<ModalitySpec>,
    data_seed: u64,
    rng: ChaCha8Rng,
    next_index: [u64; 3],
}

impl BatchStream {
    pub fn new(cfg: SamplerConfig, specs: Vec<ModalitySpec>, data_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if specs.len() != 3
            || specs
                .iter()
                .enumerate()
                .any(|(i, s)| s.modality.index() != i)
        {
            return Err(HarnessError::Config(
                "batch stream needs one spec per modality, in order A, B, C".into(),
            ));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            specs,
            data_seed,
            rng,
            next_index: [0; 3],
        })
    }

    pub fn next_batch(&mut self) -> Result<Vec<Sample>> {
        let tags = sample_batch(&self.cfg, &mut self.rng)?;
        Ok(tags
            .into_iter()
            .map(|m| {
                let i = m.index();
                let idx = self.next_index[i];
                self.next_index[i] += 1;
                generate_sample(&self.specs[i], self.data_seed, stream::TRAIN, idx)
            })
            .collect())
    }
}
