use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{top_k_indices, Real, Tape, Tensor, Var};
use crate::router::fused_select;

use super::MoeModel;

/// Removes one active expert at one position and renormalises the remaining
/// active gates proportionally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Row of the forward input (token position for a single sequence).
    pub position: usize,
    pub expert: usize,
}

/// Per-layer routing edits. The default value is standard Top-k routing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingOverride {
    /// Active experts per token; `None` means `k_baseline`. Zero turns the
    /// MoE sublayer into the residual identity.
    pub k: Option<usize>,
    /// Normalised prior added to the gates for selection only:
    /// `score = g + lambda · prior`. Mixing weights stay `g`.
    pub prior: Option<Vec<f64>>,
    pub lambda: f64,
    pub ablations: Vec<Ablation>,
    /// Multiplies the expert-sum output before the residual add.
    pub output_scale: Option<f64>,
    /// Pick `k` experts uniformly at random instead of by score.
    pub random_seed: Option<u64>,
}

impl RoutingOverride {
    pub fn with_k(k: usize) -> Self {
        Self {
            k: Some(k),
            ..Self::default()
        }
    }

    pub fn scaled(factor: f64) -> Self {
        Self {
            output_scale: Some(factor),
            ..Self::default()
        }
    }
}

/// What one MoE sublayer saw and did, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T: Real = f32> {
    /// Full softmax gate probabilities, `[tokens × n_experts]`.
    pub gates: Tensor<T>,
    /// Selected experts per token, in selection order.
    pub active: Vec<Vec<usize>>,
    /// Residual stream entering the MoE sublayer.
    pub hidden_in: Tensor<T>,
    /// Expert-sum term added to the residual stream.
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real = f32> {
    /// `[tokens × vocab]`
    pub logits: Tensor<T>,
    pub traces: Option<Vec<LayerTrace<T>>>,
    /// Expert FFN invocations summed over tokens and layers.
    pub expert_calls: usize,
}

/// Router statistics of one layer, used by the load-balancing loss.
pub struct RouterStats {
    pub probs: Var,
    /// Assignments per expert.
    pub counts: Vec<usize>,
    pub tokens: usize,
}

pub struct TapeForward<T: Real> {
    pub logits: Var,
    pub traces: Option<Vec<LayerTrace<T>>>,
    pub expert_calls: usize,
    pub router: Vec<RouterStats>,
}

pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub moe_norm: Var,
    pub router: Var,
    pub experts: Vec<(Var, Var)>,
}

/// Tape handles of every parameter of a model.
pub struct BoundParams {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub unembed: Var,
}

impl BoundParams {
    /// Rebuilds the handle layout from handles listed in
    /// [`MoeModel::named_params`] order.
    pub fn from_ordered(config: &super::ModelConfig, vars: &[Var]) -> Result<Self> {
        let per_layer = 7 + 2 * config.n_experts;
        let want = 4 + config.n_layers * per_layer;
        if vars.len() != want {
            return Err(Error::Input(format!(
                "{} parameter handles, the config needs {want}",
                vars.len()
            )));
        }
        let layers = (0..config.n_layers)
            .map(|l| {
                let v = &vars[2 + l * per_layer..2 + (l + 1) * per_layer];
                BoundLayer {
                    attn_norm: v[0],
                    wq: v[1],
                    wk: v[2],
                    wv: v[3],
                    wo: v[4],
                    moe_norm: v[5],
                    router: v[6],
                    experts: v[7..].chunks(2).map(|c| (c[0], c[1])).collect(),
                }
            })
            .collect();
        Ok(Self {
            tok_emb: vars[0],
            pos_emb: vars[1],
            layers,
            final_norm: vars[want - 2],
            unembed: vars[want - 1],
        })
    }

    /// Handles in the order of [`MoeModel::named_params`].
    pub fn in_order(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.moe_norm, l.router]);
            for &(a, b) in &l.experts {
                out.extend([a, b]);
            }
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }
}

fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl<T: Real> MoeModel<T> {
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> BoundParams {
        let tok_emb = tape.param(&self.tok_emb);
        let pos_emb = tape.param(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                attn_norm: tape.param(&l.attn_norm),
                wq: tape.param(&l.wq),
                wk: tape.param(&l.wk),
                wv: tape.param(&l.wv),
                wo: tape.param(&l.wo),
                moe_norm: tape.param(&l.moe_norm),
                router: tape.param(&l.router),
                experts: l
                    .experts
                    .iter()
                    .map(|e| (tape.param(&e.w_in), tape.param(&e.w_out)))
                    .collect(),
            })
            .collect();
        let final_norm = tape.param(&self.final_norm);
        let unembed = tape.param(&self.unembed);
        BoundParams {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            unembed,
        }
    }

    /// Gate probabilities `softmax(norm(h) · W_g)` for each row of the
    /// residual stream `h` (`[d]` or `[tokens × d]`).
    pub fn gate(&self, h: &Tensor<T>, layer: usize) -> Result<Tensor<T>> {
        let lp = self.layer_params(layer)?;
        let h = as_rows(h, self.config.d_model)?;
        let mut tape = Tape::inference();
        let x = tape.param(&h);
        let g = tape.param(&lp.moe_norm);
        let r = tape.param(&lp.router);
        let hn = tape.rms_norm(x, g)?;
        let logits = tape.matmul(hn, r)?;
        let probs = tape.softmax_rows(logits)?;
        Ok(tape.value(probs).clone())
    }

    /// One MoE sublayer applied to residual rows `h` (`[d]` or
    /// `[tokens × d]`): returns `h + Σ w_i E_i(norm(h))` and the trace.
    pub fn moe_layer_forward(
        &self,
        h: &Tensor<T>,
        layer: usize,
        routing: Option<&RoutingOverride>,
    ) -> Result<(Tensor<T>, LayerTrace<T>)> {
        self.layer_params(layer)?;
        let h_rows = as_rows(h, self.config.d_model)?;
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let x = tape.constant(h_rows);
        let (out, trace, _, _) = self.moe_block(&mut tape, &bound, x, layer, routing, true)?;
        let mut out = tape.value(out).clone();
        if h.shape().len() == 1 {
            out = out.reshape(h.shape().to_vec())?;
        }
        Ok((out, trace.expect("trace requested")))
    }

    fn layer_params(&self, layer: usize) -> Result<&super::LayerParams<T>> {
        self.layers.get(layer).ok_or_else(|| {
            Error::Index(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            ))
        })
    }

    /// Causal LM forward over one sequence of at most `max_seq_len` tokens.
    /// `overrides` is empty or holds one entry per layer.
    pub fn forward(
        &self,
        tokens: &[u32],
        overrides: &[RoutingOverride],
        capture: bool,
    ) -> Result<ForwardOutput<T>> {
        if tokens.is_empty() {
            return Err(Error::Input("cannot run a forward pass on zero tokens".into()));
        }
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let fwd = self.forward_on_tape(&mut tape, &bound, tokens, tokens.len(), overrides, capture)?;
        Ok(ForwardOutput {
            logits: tape.value(fwd.logits).clone(),
            traces: fwd.traces,
            expert_calls: fwd.expert_calls,
        })
    }

    /// Forward over `tokens.len() / seq_len` sequences laid out back to back.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &BoundParams,
        tokens: &[u32],
        seq_len: usize,
        overrides: &[RoutingOverride],
        capture: bool,
    ) -> Result<TapeForward<T>> {
        let cfg = &self.config;
        if seq_len == 0 || seq_len > cfg.max_seq_len || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::Input(format!(
                "{} tokens cannot be split into sequences of {seq_len} (max {})",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        if !overrides.is_empty() && overrides.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "{} routing overrides for {} layers",
                overrides.len(),
                cfg.n_layers
            )));
        }
        let positions: Vec<u32> = (0..tokens.len()).map(|i| (i % seq_len) as u32).collect();
        let tok = tape.embedding(bound.tok_emb, tokens)?;
        let pos = tape.embedding(bound.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut traces = capture.then(Vec::new);
        let mut expert_calls = 0;
        let mut router = Vec::with_capacity(cfg.n_layers);
        for (l, bl) in bound.layers.iter().enumerate() {
            let a = tape.rms_norm(x, bl.attn_norm)?;
            let q = tape.matmul(a, bl.wq)?;
            let k = tape.matmul(a, bl.wk)?;
            let v = tape.matmul(a, bl.wv)?;
            let att = tape.causal_attention(q, k, v, cfg.n_heads, seq_len)?;
            let att = tape.matmul(att, bl.wo)?;
            x = tape.add(x, att)?;

            let (out, trace, calls, stats) =
                self.moe_block(tape, bound, x, l, overrides.get(l), capture)?;
            x = out;
            expert_calls += calls;
            router.push(stats);
            if let (Some(ts), Some(t)) = (traces.as_mut(), trace) {
                ts.push(t);
            }
        }
        let xf = tape.rms_norm(x, bound.final_norm)?;
        let logits = tape.matmul(xf, bound.unembed)?;
        Ok(TapeForward {
            logits,
            traces,
            expert_calls,
            router,
        })
    }

    /// MoE sublayer on tape. Returns the new residual stream, the optional
    /// trace, the number of expert invocations and router statistics.
    fn moe_block(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &BoundParams,
        x: Var,
        layer: usize,
        routing: Option<&RoutingOverride>,
        capture: bool,
    ) -> Result<(Var, Option<LayerTrace<T>>, usize, RouterStats)> {
        let n_experts = self.config.n_experts;
        let bl = &bound.layers[layer];
        let hn = tape.rms_norm(x, bl.moe_norm)?;
        let logits = tape.matmul(hn, bl.router)?;
        let probs = tape.softmax_rows(logits)?;

        let rows = tape.value(x).rows();
        let width = tape.value(x).cols();
        let mut active = self.select(tape.value(probs), layer, routing)?;

        // rows whose gates are renormalised over a reduced active set
        let mut renorm = vec![false; rows];
        if let Some(r) = routing {
            for ab in &r.ablations {
                let set = active.get_mut(ab.position).ok_or_else(|| {
                    Error::Index(format!(
                        "ablation position {} out of range for {rows} tokens",
                        ab.position
                    ))
                })?;
                let Some(at) = set.iter().position(|&e| e == ab.expert) else {
                    return Err(Error::NotActivated {
                        layer,
                        expert: ab.expert,
                        position: ab.position,
                    });
                };
                if set.len() < 2 {
                    return Err(Error::AblationDegenerate {
                        layer,
                        position: ab.position,
                    });
                }
                set.remove(at);
                renorm[ab.position] = true;
            }
        }

        let mut counts = vec![0usize; n_experts];
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
        for (r, set) in active.iter().enumerate() {
            for &e in set {
                counts[e] += 1;
                rows_of[e].push(r);
            }
        }
        let calls = counts.iter().sum();

        let pv = tape.value(probs);
        let renorm_mass: Vec<T> = (0..rows)
            .map(|r| {
                if renorm[r] {
                    active[r].iter().map(|&e| pv.row(r)[e]).sum()
                } else {
                    T::one()
                }
            })
            .collect();

        let mut parts = Vec::new();
        for (e, rows_e) in rows_of.into_iter().enumerate() {
            if rows_e.is_empty() {
                continue;
            }
            let (w_in, w_out) = bl.experts[e];
            let xe = tape.gather_rows(hn, &rows_e)?;
            let h1 = tape.matmul(xe, w_in)?;
            let a1 = tape.silu(h1)?;
            let ye = tape.matmul(a1, w_out)?;
            let at: Vec<(usize, usize)> = rows_e.iter().map(|&r| (r, e)).collect();
            let w = if rows_e.iter().any(|&r| renorm[r]) {
                let pv = tape.value(probs);
                let data = rows_e
                    .iter()
                    .map(|&r| {
                        let g = pv.row(r)[e];
                        if renorm[r] {
                            g / renorm_mass[r]
                        } else {
                            g
                        }
                    })
                    .collect();
                tape.constant(Tensor::new(vec![rows_e.len(), 1], data)?)
            } else {
                tape.pick(probs, &at)?
            };
            let ye = tape.mul_rows(ye, w)?;
            parts.push((ye, rows_e));
        }
        let mut o = tape.scatter_rows(rows, width, parts)?;
        if let Some(s) = routing.and_then(|r| r.output_scale) {
            o = tape.scale(o, T::lit(s))?;
        }
        let out = tape.add(x, o)?;

        let trace = capture.then(|| LayerTrace {
            gates: tape.value(probs).clone(),
            active,
            hidden_in: tape.value(x).clone(),
            output: tape.value(o).clone(),
        });
        let stats = RouterStats {
            probs,
            counts,
            tokens: rows,
        };
        Ok((out, trace, calls, stats))
    }

    fn select(
        &self,
        probs: &Tensor<T>,
        layer: usize,
        routing: Option<&RoutingOverride>,
    ) -> Result<Vec<Vec<usize>>> {
        let n = self.config.n_experts;
        let k = routing.and_then(|r| r.k).unwrap_or(self.config.k_baseline);
        if k > n {
            return Err(Error::Config(format!(
                "layer {layer} asks for {k} active experts out of {n}"
            )));
        }
        let rows = probs.rows();
        if let Some(seed) = routing.and_then(|r| r.random_seed) {
            let mut rng = layer_rng(seed, layer);
            return Ok((0..rows).map(|_| sample(&mut rng, n, k).into_vec()).collect());
        }
        match routing.and_then(|r| r.prior.as_ref().map(|p| (p, r.lambda))) {
            Some((prior, lambda)) => {
                if prior.len() != n {
                    return Err(Error::Config(format!(
                        "layer {layer} prior has {} entries for {n} experts",
                        prior.len()
                    )));
                }
                Ok((0..rows)
                    .map(|r| {
                        let g: Vec<f64> = probs.row(r).iter().map(|v| v.as_f64()).collect();
                        fused_select(&g, prior, lambda, k).active
                    })
                    .collect())
            }
            None => Ok((0..rows).map(|r| top_k_indices(probs.row(r), k)).collect()),
        }
    }
}

fn as_rows<T: Real>(h: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    match h.shape() {
        [n] if *n == d => h.clone().reshape(vec![1, d]),
        [_, n] if *n == d => Ok(h.clone()),
        s => Err(Error::dim(
            "moe_layer",
            format!("expected [{d}] or [tokens × {d}], got {s:?}"),
        )),
    }
}
