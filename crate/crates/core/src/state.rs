//! The full trainable model: encoder, adapters, backbone and low-rank deltas.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiofront::{init_adapters, init_encoder, AudioConfig};
use crate::backbone::{init_params, BackboneConfig, LowRankDelta, Vocab};
use crate::error::Result;
use crate::substrate::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub backbone: BackboneConfig,
    pub audio: AudioConfig,
}

impl ModelConfig {
    pub fn new(vocab: Vocab, backbone: BackboneConfig, audio: AudioConfig) -> Self {
        Self {
            vocab,
            backbone,
            audio,
        }
    }

    /// A model small enough for exhaustive gradient checks.
    pub fn tiny(vocab: Vocab) -> Self {
        Self {
            vocab,
            backbone: BackboneConfig {
                layers: 1,
                model_dim: 8,
                heads: 2,
                ffn_dim: 16,
                max_positions: 128,
            },
            audio: AudioConfig {
                encoder_dim: 8,
                adapter_hidden: 8,
                queries: 64,
                ..AudioConfig::default()
            },
        }
    }
}

/// Parameters plus the metadata a checkpoint must carry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParamStore,
    pub config: ModelConfig,
    pub lora: BTreeMap<String, LowRankDelta>,
    pub stage: u8,
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    /// Fresh model. The encoder comes from the audio world seed and is frozen;
    /// everything else is drawn from `seed` and left trainable.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &config.audio)?;
        init_adapters(
            &mut params,
            &config.audio,
            config.backbone.model_dim,
            &mut rng,
        )?;
        init_params(&mut params, config.vocab.size(), &config.backbone, &mut rng)?;
        Ok(Self {
            params,
            config,
            lora: BTreeMap::new(),
            stage: 0,
            step: 0,
            seed,
        })
    }

    /// A copy with every tensor frozen, used as a preference reference.
    pub fn frozen_copy(&self) -> Self {
        let mut c = self.clone();
        c.params.freeze_all();
        c
    }
}
