//! Domain values exchanged between the data pipeline, the models and the simulator.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// An RGB image stored as bytes; channel values read back as `byte / 255` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width × 3`.
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
    }
}

/// One timestep of what a policy may observe.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    pub images: Vec<(String, Arc<Image>)>,
    /// Robot state in canonical units; `None` during pre-training.
    pub proprio: Option<Vec<f64>>,
    pub embodiment_id: String,
    pub task_instruction: String,
}

impl ObservationFrame {
    pub fn view(&self, id: &str) -> Option<&Arc<Image>> {
        self.images.iter().find(|(v, _)| v == id).map(|(_, img)| img)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChunkError {
    #[error("chunk values have length {got}, expected {horizon}x{action_dim}")]
    Shape { got: usize, horizon: usize, action_dim: usize },
    #[error("pad mask must be a non-empty prefix of real steps followed by padding")]
    PadMask,
    #[error("dimension mask has length {got}, expected {expected}")]
    DimMask { got: usize, expected: usize },
}

/// An `h × d_a` block of consecutive actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    /// Row-major `horizon × action_dim`.
    pub values: Vec<f64>,
    pub horizon: usize,
    pub action_dim: usize,
    /// `true` for real steps, `false` for tail padding.
    pub pad_mask: Vec<bool>,
    /// `true` for action dimensions the embodiment actually has.
    pub dim_mask: Vec<bool>,
}

impl ActionChunk {
    pub fn new(
        values: Vec<f64>,
        horizon: usize,
        action_dim: usize,
        pad_mask: Vec<bool>,
        dim_mask: Vec<bool>,
    ) -> Result<Self, ChunkError> {
        if values.len() != horizon * action_dim || horizon == 0 || action_dim == 0 {
            return Err(ChunkError::Shape { got: values.len(), horizon, action_dim });
        }
        if pad_mask.len() != horizon || !pad_mask[0] {
            return Err(ChunkError::PadMask);
        }
        let real = pad_mask.iter().take_while(|m| **m).count();
        if pad_mask[real..].iter().any(|m| *m) {
            return Err(ChunkError::PadMask);
        }
        if dim_mask.len() != action_dim {
            return Err(ChunkError::DimMask { got: dim_mask.len(), expected: action_dim });
        }
        Ok(Self { values, horizon, action_dim, pad_mask, dim_mask })
    }

    /// A fully real chunk over all dimensions.
    pub fn dense(values: Vec<f64>, horizon: usize, action_dim: usize) -> Result<Self, ChunkError> {
        Self::new(values, horizon, action_dim, vec![true; horizon], vec![true; action_dim])
    }

    pub fn step(&self, i: usize) -> &[f64] {
        &self.values[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn real_steps(&self) -> usize {
        self.pad_mask.iter().filter(|m| **m).count()
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// `horizon × action_dim` weights: 1 where both the step and the dimension are real.
    pub fn loss_mask(&self) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.values.len());
        for &s in &self.pad_mask {
            for &d in &self.dim_mask {
                m.push(if s && d { 1.0 } else { 0.0 });
            }
        }
        m
    }
}

/// Posterior parameters of one latent and a draw from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVariable {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sample: Vec<f64>,
}
