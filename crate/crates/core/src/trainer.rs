//! Language-model training with a load-balancing auxiliary loss.
//!
//! Each layer contributes `N · Σ_i f_i · P_i`, where `f_i` is the share of
//! expert assignments that went to expert `i` (held constant) and `P_i` the
//! mean gate probability of expert `i`. The auxiliary term is the layer mean
//! scaled by `aux_weight`. Gradients reach the router through the selected
//! gate probabilities and through `P_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelConfig, MoeModel, RoutingOverride};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub aux_weight: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// When set, every layer draws its active-expert count uniformly from
    /// this inclusive range at every step instead of using `k_baseline`.
    #[serde(default)]
    pub k_jitter: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            seq_len: 16,
            learning_rate: 3e-3,
            aux_weight: 0.01,
            seed: 0,
            optimizer: Optimizer::Adam,
            k_jitter: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if self.seq_len > model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds the model's max_seq_len {}",
                self.seq_len, model.max_seq_len
            )));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config(format!("aux_weight must be >= 0, got {}", self.aux_weight)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some((lo, hi)) = self.k_jitter {
            if lo == 0 || lo > hi || hi > model.n_experts {
                return Err(Error::Config(format!(
                    "k_jitter range [{lo}, {hi}] must lie within [1, {}]",
                    model.n_experts
                )));
            }
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub lm_loss: f64,
    pub aux_loss: f64,
}

pub fn loss_log_jsonl(log: &[StepLoss]) -> Result<String> {
    let mut out = String::new();
    for s in log {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Per-layer balance term `n · Σ f_i · p_i` for assignment counts and mean
/// gate probabilities.
pub fn balance_term(counts: &[usize], mean_probs: &[f64]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = counts.len() as f64;
    n * counts
        .iter()
        .zip(mean_probs)
        .map(|(&c, &p)| c as f64 / total as f64 * p)
        .sum::<f64>()
}

pub struct BatchLoss {
    pub total: Var,
    pub lm: f64,
    pub aux: f64,
}

/// Records LM cross-entropy plus weighted balance loss for sequences laid
/// out back to back in `inputs`, with `targets` aligned row by row.
pub fn batch_loss<T: Real>(
    model: &MoeModel<T>,
    tape: &mut Tape<'_, T>,
    bound: &BoundParams,
    inputs: &[u32],
    targets: &[u32],
    seq_len: usize,
    aux_weight: f64,
) -> Result<BatchLoss> {
    batch_loss_routed(model, tape, bound, inputs, targets, seq_len, aux_weight, &[])
}

/// [`batch_loss`] under per-layer routing overrides.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_routed<T: Real>(
    model: &MoeModel<T>,
    tape: &mut Tape<'_, T>,
    bound: &BoundParams,
    inputs: &[u32],
    targets: &[u32],
    seq_len: usize,
    aux_weight: f64,
    overrides: &[RoutingOverride],
) -> Result<BatchLoss> {
    let fwd = model.forward_on_tape(tape, bound, inputs, seq_len, overrides, false)?;
    let lm = tape.cross_entropy_mean(fwd.logits, targets)?;
    let lm_value = tape.value(lm).data()[0].as_f64();
    let mut total = lm;
    let mut aux = 0.0;
    if aux_weight > 0.0 {
        let n = model.config.n_experts as f64;
        let layers = fwd.router.len() as f64;
        let mut terms = Vec::new();
        for stats in &fwd.router {
            let assigned: usize = stats.counts.iter().sum();
            if assigned == 0 {
                continue;
            }
            let p = tape.col_mean(stats.probs)?;
            let w: Vec<T> = stats
                .counts
                .iter()
                .map(|&c| T::lit(aux_weight * n * c as f64 / assigned as f64 / layers))
                .collect();
            terms.push(tape.dot_const(p, w)?);
        }
        for t in terms {
            aux += tape.value(t).data()[0].as_f64();
            total = tape.add(total, t)?;
        }
    }
    Ok(BatchLoss {
        total,
        lm: lm_value,
        aux,
    })
}

/// Flattened training stream with the offsets where documents start.
struct Stream {
    tokens: Vec<u32>,
    starts: Vec<usize>,
}

impl Stream {
    fn new(docs: &[Vec<u32>]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut starts = Vec::new();
        for d in docs.iter().filter(|d| !d.is_empty()) {
            starts.push(tokens.len());
            tokens.extend_from_slice(d);
        }
        if tokens.len() < 2 {
            return Err(Error::Input("training corpus has fewer than two tokens".into()));
        }
        Ok(Self { tokens, starts })
    }

    /// `seq_len + 1` tokens starting at a random document, wrapping around.
    fn window(&self, rng: &mut ChaCha8Rng, seq_len: usize) -> Vec<u32> {
        let s = self.starts[rng.gen_range(0..self.starts.len())];
        (0..=seq_len)
            .map(|i| self.tokens[(s + i) % self.tokens.len()])
            .collect()
    }
}

pub struct Trainer {
    pub model: MoeModel,
    cfg: TrainConfig,
    step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Trainer {
    pub fn new(model: MoeModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(&model.config)?;
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            model,
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// One optimizer update on a batch of `seq_len + 1`-token windows.
    pub fn train_step(&mut self, batch: &[Vec<u32>]) -> Result<StepLoss> {
        self.train_step_routed(batch, &[])
    }

    /// [`Self::train_step`] under per-layer routing overrides.
    pub fn train_step_routed(
        &mut self,
        batch: &[Vec<u32>],
        overrides: &[RoutingOverride],
    ) -> Result<StepLoss> {
        let seq_len = self.cfg.seq_len;
        let mut inputs = Vec::with_capacity(batch.len() * seq_len);
        let mut targets = Vec::with_capacity(batch.len() * seq_len);
        for w in batch {
            if w.len() != seq_len + 1 {
                return Err(Error::Input(format!(
                    "training window has {} tokens, expected {}",
                    w.len(),
                    seq_len + 1
                )));
            }
            inputs.extend_from_slice(&w[..seq_len]);
            targets.extend_from_slice(&w[1..]);
        }
        let step = self.step;
        let at_step = |e: Error| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("training step {step}: {context}"),
            },
            other => other,
        };
        let (loss, grads) = {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let loss = batch_loss_routed(
                &self.model,
                &mut tape,
                &bound,
                &inputs,
                &targets,
                seq_len,
                self.cfg.aux_weight,
                overrides,
            )
            .map_err(at_step)?;
            let mut grads = tape.backward(loss.total).map_err(at_step)?;
            let g: Vec<Option<Tensor>> = bound.in_order().into_iter().map(|v| grads.take(v)).collect();
            (loss, g)
        };
        if !(loss.lm.is_finite() && loss.aux.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("training step {step}: loss lm={} aux={}", loss.lm, loss.aux),
            });
        }
        self.apply(grads);
        self.step += 1;
        Ok(StepLoss {
            step,
            lm_loss: loss.lm,
            aux_loss: loss.aux,
        })
    }

    fn apply(&mut self, grads: Vec<Option<Tensor>>) {
        let lr = self.cfg.learning_rate as f32;
        let t = (self.step + 1) as i32;
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let opt = self.cfg.optimizer;
        for (i, (p, g)) in self.model.params_mut().into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                match opt {
                    Optimizer::Sgd => *w -= lr * gj,
                    Optimizer::Adam => {
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Trains a freshly initialised model on `docs`. Initialisation and batch
/// sampling both derive from `cfg.seed`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    docs: &[Vec<u32>],
) -> Result<(MoeModel, Vec<StepLoss>)> {
    let model = MoeModel::init(model_cfg.clone(), cfg.seed)?;
    train_from(model, cfg, docs)
}

pub fn train_from(
    model: MoeModel,
    cfg: &TrainConfig,
    docs: &[Vec<u32>],
) -> Result<(MoeModel, Vec<StepLoss>)> {
    let stream = Stream::new(docs)?;
    if let Some(&bad) = stream.tokens.iter().find(|&&t| t as usize >= model.config.vocab_size) {
        return Err(Error::Index(format!(
            "corpus token {bad} outside vocabulary of {}",
            model.config.vocab_size
        )));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let n_layers = trainer.model.config.n_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| stream.window(&mut rng, cfg.seq_len))
            .collect();
        let overrides: Vec<RoutingOverride> = match cfg.k_jitter {
            Some((lo, hi)) => (0..n_layers)
                .map(|_| RoutingOverride::with_k(rng.gen_range(lo..=hi)))
                .collect(),
            None => Vec::new(),
        };
        log.push(trainer.train_step_routed(&batch, &overrides)?);
    }
    Ok((trainer.model, log))
}

/// Largest share of expert assignments any single expert receives in any
/// layer, measured under standard routing over the given sequences.
pub fn max_expert_load(model: &MoeModel, seqs: &[Vec<u32>]) -> Result<f64> {
    let n = model.config.n_experts;
    let mut counts = vec![vec![0usize; n]; model.config.n_layers];
    for s in seqs {
        let s = &s[..s.len().min(model.config.max_seq_len)];
        let out = model.forward(s, &[], true)?;
        for (l, tr) in out.traces.expect("captured").iter().enumerate() {
            for set in &tr.active {
                for &e in set {
                    counts[l][e] += 1;
                }
            }
        }
    }
    Ok(counts
        .iter()
        .map(|c| {
            let total: usize = c.iter().sum();
            *c.iter().max().unwrap_or(&0) as f64 / total.max(1) as f64
        })
        .fold(0.0, f64::max))
}
