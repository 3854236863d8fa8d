use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LayerParams<T: Scalar = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

pub(crate) const LAYER_FIELDS: [&str; 8] =
    ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"];

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Full parameter set of the transformer.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<T>,
    pub pos_embed: Option<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

pub(crate) fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialisation; every tensor starts with `requires_grad = true`.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, f, m) = (config.vocab_size, config.d_model, config.d_ff, config.n_layers);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = inv(2 * m);
        let tok_embed = normal(rng, &[v, d], 1.0);
        let pos_embed = (!config.rope).then(|| normal(rng, &[config.max_seq_len, d], 0.5));
        let layers = (0..m)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[d], T::one()),
                wq: normal(rng, &[d, d], inv(d)),
                wk: normal(rng, &[d, d], inv(d)),
                wv: normal(rng, &[d, d], inv(d)),
                wo: normal(rng, &[d, d], inv(d) * resid),
                mlp_norm: Tensor::full(&[d], T::one()),
                w_up: normal(rng, &[d, f], inv(d)),
                w_down: normal(rng, &[f, d], inv(f) * resid),
            })
            .collect();
        let mut params = Self {
            tok_embed,
            pos_embed,
            layers,
            final_norm: Tensor::full(&[d], T::one()),
            lm_head: normal(rng, &[d, v], inv(d)),
            config,
        };
        params.set_trainable(true);
        Ok(params)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_embed".to_string(), &self.tok_embed)];
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed".to_string(), p));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_embed];
        if let Some(p) = &mut self.pos_embed {
            out.push(p);
        }
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.tensors_mut() {
            t.requires_grad = trainable;
            t.grad = None;
        }
    }

    pub fn frozen(mut self) -> Self {
        self.set_trainable(false);
        self
    }

    pub fn count_total(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.tensors().iter().filter(|t| t.requires_grad).map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named_tensors(), other.named_tensors());
        self.config == other.config
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tok_embed: self.tok_embed.cast(),
            pos_embed: self.pos_embed.as_ref().map(Tensor::cast),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// A standalone copy holding only the first `k` layers.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::Contract(format!(
                "cannot keep {k} of {} layers",
                self.layers.len()
            )));
        }
        let mut out = self.clone();
        out.layers.truncate(k);
        out.config.n_layers = k;
        Ok(out)
    }

    /// Register every tensor on `tape`; `trainable` decides whether they
    /// receive gradient.
    pub fn register<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ModelVars<'t, T> {
        let reg = |t: &Tensor<T>| if trainable { tape.variable(t) } else { tape.constant(t) };
        ModelVars {
            tok_embed: reg(&self.tok_embed),
            pos_embed: self.pos_embed.as_ref().map(reg),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    attn_norm: reg(&l.attn_norm),
                    wq: reg(&l.wq),
                    wk: reg(&l.wk),
                    wv: reg(&l.wv),
                    wo: reg(&l.wo),
                    mlp_norm: reg(&l.mlp_norm),
                    w_up: reg(&l.w_up),
                    w_down: reg(&l.w_down),
                })
                .collect(),
            final_norm: reg(&self.final_norm),
            lm_head: reg(&self.lm_head),
        }
    }

    /// Causal next-token logits `[T×V]`.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.forward_prefix(tokens, self.layers.len())
    }

    /// Logits through the first `depth` layers followed by the final norm and head.
    pub fn forward_prefix(&self, tokens: &[usize], depth: usize) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.register(&tape, false);
        Ok(vars.forward(&self.config, tokens, depth, None)?.value())
    }
}

pub struct LayerVars<'t, T: Scalar> {
    pub attn_norm: Var<'t, T>,
    pub wq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
    pub wo: Var<'t, T>,
    pub mlp_norm: Var<'t, T>,
    pub w_up: Var<'t, T>,
    pub w_down: Var<'t, T>,
}

/// Parameters of a [`ModelParams`] registered on a tape.
pub struct ModelVars<'t, T: Scalar> {
    pub tok_embed: Var<'t, T>,
    pub pos_embed: Option<Var<'t, T>>,
    pub layers: Vec<LayerVars<'t, T>>,
    pub final_norm: Var<'t, T>,
    pub lm_head: Var<'t, T>,
}

/// Adapter pairs for one layer on a tape, with the `alpha/r` factor.
pub struct AdapterVars<'t, T: Scalar> {
    pub scale: T,
    /// q, k, v, o, up, down; each `(A, B)`.
    pub pairs: [(Var<'t, T>, Var<'t, T>); 6],
}

impl<'t, T: Scalar> AdapterVars<'t, T> {
    /// Group a flat `[A, B, A, B, ...]` list (twelve per layer) into layers.
    pub fn from_leaves(scale: T, leaves: &[Var<'t, T>]) -> Result<Vec<Self>> {
        if leaves.is_empty() || leaves.len() % 12 != 0 {
            return Err(Error::Contract(format!("{} adapter leaves is not a multiple of 12", leaves.len())));
        }
        Ok(leaves
            .chunks(12)
            .map(|c| Self {
                scale,
                pairs: std::array::from_fn(|j| (c[2 * j], c[2 * j + 1])),
            })
            .collect())
    }
}

fn linear<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    lora: Option<(&(Var<'t, T>, Var<'t, T>), T)>,
) -> Result<Var<'t, T>> {
    let y = x.matmul(w)?;
    match lora {
        None => Ok(y),
        Some(((a, b), s)) => y.add(x.matmul(*a)?.matmul(*b)?.scale(s)),
    }
}

impl<'t, T: Scalar> ModelVars<'t, T> {
    /// All registered leaves in canonical order.
    pub fn leaves(&self) -> Vec<Var<'t, T>> {
        let mut out = vec![self.tok_embed];
        out.extend(self.pos_embed);
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w_up, l.w_down]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }

    /// Inverse of [`leaves`](Self::leaves).
    pub fn from_leaves(config: &ModelConfig, leaves: &[Var<'t, T>]) -> Result<Self> {
        let expect = 3 + usize::from(!config.rope) + 8 * config.n_layers;
        if leaves.len() != expect {
            return Err(Error::Contract(format!(
                "{} leaves for a model with {expect} tensors",
                leaves.len()
            )));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("length checked");
        let tok_embed = next();
        let pos_embed = (!config.rope).then(&mut next);
        let layers = (0..config.n_layers)
            .map(|_| LayerVars {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        Ok(Self {
            tok_embed,
            pos_embed,
            layers,
            final_norm: next(),
            lm_head: next(),
        })
    }

    /// Logits after `depth` layers; `adapters[i]` (if given) augments layer `i`.
    pub fn forward(
        &self,
        config: &ModelConfig,
        tokens: &[usize],
        depth: usize,
        adapters: Option<&[AdapterVars<'t, T>]>,
    ) -> Result<Var<'t, T>> {
        self.hidden(config, tokens, depth, adapters)?.matmul(self.lm_head)
    }

    /// Final-normed hidden states `[T×d]`, i.e. everything before the head.
    pub fn hidden(
        &self,
        config: &ModelConfig,
        tokens: &[usize],
        depth: usize,
        adapters: Option<&[AdapterVars<'t, T>]>,
    ) -> Result<Var<'t, T>> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                config.max_seq_len
            )));
        }
        if depth == 0 || depth > self.layers.len() {
            return Err(Error::Contract(format!("depth {depth} of {} layers", self.layers.len())));
        }
        let heads = config.n_heads;
        let mut x = self.tok_embed.embed(tokens)?;
        if let Some(pos) = self.pos_embed {
            let positions: Vec<usize> = (0..tokens.len()).collect();
            x = x.add(pos.embed(&positions)?)?;
        }
        for (i, l) in self.layers.iter().take(depth).enumerate() {
            let ad = adapters.and_then(|a| a.get(i));
            let lo = |j: usize| ad.map(|a| (&a.pairs[j], a.scale));
            let h = x.rms_norm(l.attn_norm)?;
            let mut q = linear(h, l.wq, lo(0))?;
            let mut k = linear(h, l.wk, lo(1))?;
            let v = linear(h, l.wv, lo(2))?;
            if config.rope {
                q = q.rope(heads)?;
                k = k.rope(heads)?;
            }
            let att = q.attention(k, v, heads)?;
            x = x.add(linear(att, l.wo, lo(3))?)?;
            let h = x.rms_norm(l.mlp_norm)?;
            let u = linear(h, l.w_up, lo(4))?.silu();
            x = x.add(linear(u, l.w_down, lo(5))?)?;
        }
        x.rms_norm(self.final_norm)
    }
}
