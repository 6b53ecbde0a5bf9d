//! Encoder plus attractor head.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eda::{compute_attractors, compute_posteriors, EdaParams};
use crate::encoders::{encode_session, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::features::ModelInput;
use crate::params::{Binding, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub embeddings: Var,
    pub attractors: Var,
    /// `S × T`.
    pub posteriors: Var,
}

/// Full forward pass on a tape. `shuffle` enables frame shuffling in the
/// attractor encoder (training only).
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    b: &Binding,
    config: &ModelConfig,
    input: &ModelInput,
    shuffle: Option<&mut R>,
) -> Result<Forward> {
    let embeddings = encode_session(tape, b, config, input)?;
    let eda = EdaParams::bind(b)?;
    let attractors = compute_attractors(tape, embeddings, &eda, config.speakers, shuffle)?;
    let posteriors = compute_posteriors(tape, attractors, embeddings)?;
    Ok(Forward {
        embeddings,
        attractors,
        posteriors,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn specs(config: &ModelConfig) -> Vec<ParamSpec> {
        let mut s = config.encoder_specs();
        s.extend(EdaParams::specs(config.attractor_dim()));
        s
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&Self::specs(&config), &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Model { config, params })
    }

    /// Wraps loaded parameters after checking them against the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.validate(&Self::specs(&config))?;
        Ok(Model { config, params })
    }

    /// Posteriors `S × T` without shuffling or gradients.
    pub fn infer(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let frozen: BTreeSet<String> = self.params.names().map(String::from).collect();
        let b = Binding::bind(&mut tape, &self.params, &frozen);
        let out = forward::<ChaCha8Rng>(&mut tape, &b, &self.config, input, None)?;
        let y = tape.value(out.posteriors).clone();
        if !y.is_finite() {
            return Err(Error::NonFinite("posteriors"));
        }
        Ok(y)
    }
}

/// Tape memory of one training forward/backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryProbe {
    /// Parameters and input features.
    pub leaf_bytes: usize,
    /// Values recorded by the forward pass.
    pub activation_bytes: usize,
    /// Peak of all values plus live gradients during backward.
    pub peak_bytes: usize,
}

/// Random input of the right shape for `config`.
pub fn random_input(config: &ModelConfig, frames: usize, channels: usize, rng: &mut impl Rng) -> ModelInput {
    let mut t = |rows: usize| Tensor::from_fn(&[rows, frames], |_| rng.gen_range(-1.0..1.0));
    match config.variant {
        Variant::Transformer => ModelInput::Single(t(config.input_dim)),
        Variant::SpatioTemporal => {
            ModelInput::MultiChannel((0..channels).map(|_| t(config.input_dim)).collect())
        }
        Variant::CoAttention => ModelInput::CoAttention {
            averaged: t(config.input_dim),
            channels: (0..channels).map(|_| t(config.multi_input_dim)).collect(),
        },
    }
}

/// Measures one forward/backward pass of a freshly initialized model on
/// random input (frame shuffling off, all parameters trainable).
pub fn measure_memory(config: &ModelConfig, frames: usize, channels: usize, seed: u64) -> Result<MemoryProbe> {
    let model = Model::init(config.clone(), seed)?;
    let input = random_input(config, frames, channels, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut tape = Tape::new();
    let b = Binding::bind(&mut tape, &model.params, &BTreeSet::new());
    let leaf_bytes = tape.value_bytes() + input_bytes(&input);
    let out = forward::<ChaCha8Rng>(&mut tape, &b, config, &input, None)?;
    let activation_bytes = tape.value_bytes() - leaf_bytes;
    let loss = tape.sum(out.posteriors);
    tape.backward(loss)?;
    Ok(MemoryProbe {
        leaf_bytes,
        activation_bytes,
        peak_bytes: tape.peak_bytes(),
    })
}

fn input_bytes(input: &ModelInput) -> usize {
    let n = match input {
        ModelInput::Single(x) => x.numel(),
        ModelInput::MultiChannel(xs) => xs.iter().map(Tensor::numel).sum(),
        ModelInput::CoAttention { averaged, channels } => {
            averaged.numel() + channels.iter().map(Tensor::numel).sum::<usize>()
        }
    };
    n * std::mem::size_of::<f64>()
}
