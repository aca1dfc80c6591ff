//! Epoch plans that guarantee positives in every batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::manifest::ImageRecord;
use crate::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub positives_per_batch: usize,
    pub shuffle_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            positives_per_batch: 1,
            shuffle_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.positives_per_batch < 1 || self.positives_per_batch >= self.batch_size {
            return Err(TrainError::InvalidConfig(format!(
                "need 1 <= positives_per_batch < batch_size, got {} and {}",
                self.positives_per_batch, self.batch_size
            )));
        }
        Ok(())
    }

    pub fn negatives_per_batch(&self) -> usize {
        self.batch_size - self.positives_per_batch
    }

    pub fn batches_per_epoch(&self, n_negatives: usize) -> usize {
        n_negatives.div_ceil(self.negatives_per_batch())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSamplePlan {
    pub batches: Vec<Vec<String>>,
}

/// Negatives are drawn once each in shuffled order; positives are dealt
/// from a shuffled cycle that is reshuffled whenever it wraps.
pub fn build_epoch_plan(
    records: &[&ImageRecord],
    sampler: &SamplerConfig,
    epoch_seed: u64,
) -> Result<EpochSamplePlan, TrainError> {
    sampler.validate()?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for r in records {
        if r.cancer {
            pos.push(r.image_id.as_str());
        } else {
            neg.push(r.image_id.as_str());
        }
    }
    if pos.is_empty() {
        return Err(TrainError::NoPositives);
    }
    if neg.is_empty() {
        return Err(TrainError::NoNegatives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(sampler.shuffle_seed, epoch_seed));
    neg.shuffle(&mut rng);
    pos.shuffle(&mut rng);
    let mut cursor = 0;
    let mut batches = Vec::with_capacity(sampler.batches_per_epoch(neg.len()));
    for chunk in neg.chunks(sampler.negatives_per_batch()) {
        let mut batch: Vec<String> = chunk.iter().map(|s| s.to_string()).collect();
        for _ in 0..sampler.positives_per_batch {
            if cursor == pos.len() {
                pos.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(pos[cursor].to_string());
            cursor += 1;
        }
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(EpochSamplePlan { batches })
}
