//! Observation-to-action inference: condition encoding, latent generation, decoding,
//! and per-embodiment denormalization.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ata::{AtaError, AtaModel};
use crate::datapipe::{center_crop, select_view, ActionStats, DataError};
use crate::diffusion::Sampler;
use crate::encoders::{ConditionBatch, EncoderError, ImageEncoder, InstructionEncoder, ProprioBatch};
use crate::lpg::{EpsNet, LatentRegressor, LpgError};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::types::{ActionChunk, ObservationFrame};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("no action statistics for embodiment `{0}`")]
    MissingStats(String),
    #[error("policy has no action autoencoder")]
    MissingAta,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ata(#[from] AtaError),
    #[error(transparent)]
    Lpg(#[from] LpgError),
}

/// How a chunk is produced from conditions.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// Diffuse a latent, then decode it with the autoencoder.
    LatentDiffusion(EpsNet),
    /// Regress the latent mean, then decode it.
    LatentRegression(LatentRegressor),
    /// Diffuse the `h × d_a` chunk directly (no autoencoder).
    Trajectory(EpsNet),
}

/// Frozen encoders shared by every model in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders {
    pub image: ImageEncoder,
    pub text: InstructionEncoder,
    pub proprio_dim: usize,
}

impl FrozenEncoders {
    pub fn new(image_size: usize, d_model: usize, proprio_dim: usize, seed: u64) -> Self {
        Self { image: ImageEncoder::new(image_size, seed), text: InstructionEncoder::new(d_model, seed), proprio_dim }
    }

    /// Conditions for evaluation frames: first view by id, center-cropped.
    pub fn conditions(&self, frames: &[ObservationFrame]) -> Result<ConditionBatch, PolicyError> {
        let n = frames.len();
        let mut features = Tensor::zeros(n, self.image.feature_dim());
        let mut text = Tensor::zeros(n, self.text.dim());
        let mut proprio = Vec::with_capacity(n);
        for (i, f) in frames.iter().enumerate() {
            let img = center_crop(select_view(f, None), self.image.input_size())?;
            features.row_mut(i).copy_from_slice(&self.image.encode(&img)?);
            text.row_mut(i).copy_from_slice(&self.text.encode(&f.task_instruction)?);
            proprio.push(f.proprio.as_ref().map(|p| crate::datapipe::pad_to(p, self.proprio_dim)).transpose()?);
        }
        let refs: Vec<Option<&[f64]>> = proprio.iter().map(|p| p.as_deref()).collect();
        Ok(ConditionBatch { features, proprio: ProprioBatch::new(&refs, self.proprio_dim)?, text })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub ata: Option<AtaModel>,
    pub generator: Generator,
    pub encoders: FrozenEncoders,
    /// Normalization statistics keyed by embodiment id.
    pub stats: BTreeMap<String, ActionStats>,
    pub horizon: usize,
    pub action_dim: usize,
}

impl Policy {
    /// Normalized canonical-width chunks for a condition batch.
    pub fn generate_normalized(
        &self,
        cond: &ConditionBatch,
        sampler: Sampler,
        rng: &mut RngStream,
    ) -> Result<Vec<ActionChunk>, PolicyError> {
        let decode = |z: Tensor| -> Result<Vec<ActionChunk>, PolicyError> {
            let ata = self.ata.as_ref().ok_or(PolicyError::MissingAta)?;
            Ok(ata.decode(&z, cond)?)
        };
        match &self.generator {
            Generator::LatentDiffusion(net) => decode(net.sample(cond, sampler, rng)?),
            Generator::LatentRegression(reg) => decode(reg.predict(cond)?),
            Generator::Trajectory(net) => {
                let x = net.sample(cond, sampler, rng)?;
                Ok((0..x.rows)
                    .map(|b| {
                        let v = x.row(b).iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                        ActionChunk::dense(v, self.horizon, self.action_dim).expect("trajectory width")
                    })
                    .collect())
            }
        }
    }

    /// Native-unit `h × d_a(native)` chunks, one per frame.
    pub fn generate_actions(
        &self,
        frames: &[ObservationFrame],
        sampler: Sampler,
        rng: &mut RngStream,
    ) -> Result<Vec<ActionChunk>, PolicyError> {
        let stats: Vec<&ActionStats> = frames
            .iter()
            .map(|f| self.stats.get(&f.embodiment_id).ok_or_else(|| PolicyError::MissingStats(f.embodiment_id.clone())))
            .collect::<Result<_, _>>()?;
        let cond = self.encoders.conditions(frames)?;
        let chunks = self.generate_normalized(&cond, sampler, rng)?;
        Ok(chunks.iter().zip(stats).map(|(c, s)| denormalize_chunk(c, s)).collect())
    }
}

/// Drops padded dimensions and maps each step back to native units.
pub fn denormalize_chunk(chunk: &ActionChunk, stats: &ActionStats) -> ActionChunk {
    let d = stats.dim();
    let mut values = Vec::with_capacity(chunk.horizon * d);
    for i in 0..chunk.horizon {
        values.extend(stats.denormalize(&chunk.step(i)[..d]));
    }
    ActionChunk::new(values, chunk.horizon, d, chunk.pad_mask.clone(), alloc::vec![true; d]).expect("native chunk")
}
