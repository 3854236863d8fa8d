use std::sync::Arc;

use rand::Rng;

use super::params::{normal, AdapterVars, ModelParams, ModelVars};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tape, Tensor};

/// Low-rank additive update `(alpha/r)·A·B` for one weight matrix.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T: Scalar = f32> {
    pub rank: usize,
    pub alpha: f64,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A` random, `B` zero, so the initial update is exactly zero.
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        Ok(Self {
            rank,
            alpha,
            a: normal(rng, &[d_in, rank], 1.0 / (d_in as f64).sqrt()).with_grad(true),
            b: Tensor::zeros(&[rank, d_out]).with_grad(true),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The dense update this adapter adds to its weight matrix.
    pub fn delta(&self) -> Result<Tensor<T>> {
        let ab = matmul(&self.a, &self.b)?;
        let s = T::of(self.scale());
        Tensor::new(ab.shape().to_vec(), ab.data().iter().map(|&v| v * s).collect())
    }

    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

pub const ADAPTED: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

/// Adapters on the attention q/k/v/o and MLP up/down projections of one layer.
#[derive(Clone, Debug)]
pub struct LayerAdapters<T: Scalar = f32> {
    pub adapters: [LoraAdapter<T>; 6],
}

/// Frozen `K`-layer prefix of a target model plus trainable adapters.
#[derive(Clone, Debug)]
pub struct AssistantModel<T: Scalar = f32> {
    pub target: Arc<ModelParams<T>>,
    pub k: usize,
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LayerAdapters<T>>,
}

pub fn build_assistant<T: Scalar>(
    target: Arc<ModelParams<T>>,
    k: usize,
    rank: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<AssistantModel<T>> {
    let m = target.config.n_layers;
    if k == 0 || k >= m {
        return Err(Error::Contract(format!("assistant depth K={k} must satisfy 1 <= K < M={m}")));
    }
    let (d, f) = (target.config.d_model, target.config.d_ff);
    let dims = [(d, d), (d, d), (d, d), (d, d), (d, f), (f, d)];
    let mut layers = Vec::with_capacity(k);
    for _ in 0..k {
        let mut make = |(i, o): (usize, usize)| LoraAdapter::new(i, o, rank, alpha, rng);
        layers.push(LayerAdapters {
            adapters: [
                make(dims[0])?,
                make(dims[1])?,
                make(dims[2])?,
                make(dims[3])?,
                make(dims[4])?,
                make(dims[5])?,
            ],
        });
    }
    Ok(AssistantModel {
        target,
        k,
        rank,
        alpha,
        layers,
    })
}

impl<T: Scalar> AssistantModel<T> {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(self.k * 12);
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, ad) in ADAPTED.iter().zip(&layer.adapters) {
                out.push((format!("layers.{i}.{name}.lora_a"), &ad.a));
                out.push((format!("layers.{i}.{name}.lora_b"), &ad.b));
            }
        }
        out
    }

    /// Adapter tensors, same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(self.k * 12);
        for layer in &mut self.layers {
            for ad in &mut layer.adapters {
                out.push(&mut ad.a);
                out.push(&mut ad.b);
            }
        }
        out
    }

    /// Only adapters ever carry `requires_grad`; the target prefix is frozen
    /// by construction.
    pub fn count_trainable(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn register<'t>(&self, tape: &'t Tape<T>) -> (ModelVars<'t, T>, Vec<AdapterVars<'t, T>>) {
        let base = self.target.register(tape, false);
        let adapters = self
            .layers
            .iter()
            .map(|layer| {
                let pair = |j: usize| {
                    let ad = &layer.adapters[j];
                    (tape.leaf(&ad.a), tape.leaf(&ad.b))
                };
                AdapterVars {
                    scale: T::of(self.alpha / self.rank as f64),
                    pairs: [pair(0), pair(1), pair(2), pair(3), pair(4), pair(5)],
                }
            })
            .collect();
        (base, adapters)
    }

    /// Logits: embedding → adapted layers `1..=K` → final norm → LM head.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let (base, adapters) = self.register(&tape);
        Ok(base
            .forward(&self.target.config, tokens, self.k, Some(&adapters))?
            .value())
    }
}
