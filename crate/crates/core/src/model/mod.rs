//! Sparse mixture-of-experts transformer with routing hooks.
//!
//! Each block is pre-norm causal attention followed by a sparse MoE
//! sublayer. The MoE sublayer computes `softmax(norm(h) · W_g)` over all
//! experts, keeps the Top-k, and adds `Σ g_i · E_i(norm(h))` to the residual
//! stream using the full-softmax probabilities of the selected experts (no
//! renormalisation over the active set). Analysis code observes and edits
//! routing through [`RoutingOverride`].

mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use forward::{
    Ablation, BoundLayer, BoundParams, ForwardOutput, LayerTrace, RouterStats, RoutingOverride,
    TapeForward,
};

/// Hyperparameters of the toy MoE transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_experts: usize,
    /// Experts activated per token under standard routing.
    pub k_baseline: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_heads: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("k_baseline", self.k_baseline),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_heads", self.n_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.k_baseline > self.n_experts {
            return Err(Error::Config(format!(
                "k_baseline {} exceeds n_experts {}",
                self.k_baseline, self.n_experts
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Total expert activations per token under standard routing.
    pub fn k_total(&self) -> usize {
        self.n_layers * self.k_baseline
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<T: Real = f32> {
    /// `[d_model × d_ff]`
    pub w_in: Tensor<T>,
    /// `[d_ff × d_model]`
    pub w_out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub moe_norm: Tensor<T>,
    /// Router projection `W_g`, `[d_model × n_experts]`.
    pub router: Tensor<T>,
    pub experts: Vec<ExpertParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel<T: Real = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Half-width of the uniform router initialisation.
pub const ROUTER_INIT: f64 = 0.02;

impl<T: Real> MoeModel<T> {
    /// Seeded random initialisation.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig {
            d_model: d,
            d_ff,
            n_experts,
            vocab_size,
            max_seq_len,
            ..
        } = config;
        let sd = 1.0 / (d as f64).sqrt();
        let sff = 1.0 / (d_ff as f64).sqrt();
        let tok_emb = uniform(&mut rng, vec![vocab_size, d], 0.5);
        let pos_emb = uniform(&mut rng, vec![max_seq_len, d], 0.1);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(vec![d], T::one()),
                wq: uniform(&mut rng, vec![d, d], sd),
                wk: uniform(&mut rng, vec![d, d], sd),
                wv: uniform(&mut rng, vec![d, d], sd),
                wo: uniform(&mut rng, vec![d, d], 0.5 * sd),
                moe_norm: Tensor::full(vec![d], T::one()),
                router: uniform(&mut rng, vec![d, n_experts], ROUTER_INIT),
                experts: (0..n_experts)
                    .map(|_| ExpertParams {
                        w_in: uniform(&mut rng, vec![d, d_ff], sd),
                        w_out: uniform(&mut rng, vec![d_ff, d], sff),
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::full(vec![d], T::one()),
            unembed: uniform(&mut rng, vec![d, vocab_size], sd),
            config,
        })
    }

    /// Every parameter with its checkpoint name, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{l}.wq"), &layer.wq));
            out.push((format!("layers.{l}.wk"), &layer.wk));
            out.push((format!("layers.{l}.wv"), &layer.wv));
            out.push((format!("layers.{l}.wo"), &layer.wo));
            out.push((format!("layers.{l}.moe_norm"), &layer.moe_norm));
            out.push((format!("layers.{l}.router"), &layer.router));
            for (e, ex) in layer.experts.iter().enumerate() {
                out.push((format!("layers.{l}.experts.{e}.w_in"), &ex.w_in));
                out.push((format!("layers.{l}.experts.{e}.w_out"), &ex.w_out));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable parameters in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.moe_norm);
            out.push(&mut layer.router);
            for ex in &mut layer.experts {
                out.push(&mut ex.w_in);
                out.push(&mut ex.w_out);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    /// Expected `(name, shape)` list for this config.
    pub fn expected_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let ModelConfig {
            d_model: d,
            d_ff,
            n_experts,
            vocab_size,
            max_seq_len,
            ..
        } = *config;
        let mut out = vec![
            ("tok_emb".to_string(), vec![vocab_size, d]),
            ("pos_emb".to_string(), vec![max_seq_len, d]),
        ];
        for l in 0..config.n_layers {
            out.push((format!("layers.{l}.attn_norm"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{l}.{w}"), vec![d, d]));
            }
            out.push((format!("layers.{l}.moe_norm"), vec![d]));
            out.push((format!("layers.{l}.router"), vec![d, n_experts]));
            for e in 0..n_experts {
                out.push((format!("layers.{l}.experts.{e}.w_in"), vec![d, d_ff]));
                out.push((format!("layers.{l}.experts.{e}.w_out"), vec![d_ff, d]));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![d, vocab_size]));
        out
    }

    pub fn cast<U: Real>(&self) -> MoeModel<U> {
        MoeModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    moe_norm: l.moe_norm.cast(),
                    router: l.router.cast(),
                    experts: l
                        .experts
                        .iter()
                        .map(|e| ExpertParams {
                            w_in: e.w_in.cast(),
                            w_out: e.w_out.cast(),
                        })
                        .collect(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}
