//! Straight-line scalar reimplementation of the MoE transformer forward
//! pass in f64, used as an independent reference.

#![allow(dead_code)]

use corlab::MoeModel;

pub type Mat = Vec<Vec<f64>>;

/// Routing edit for one (layer, position): given the gates and the
/// standard active set, returns explicit `(expert, weight)` pairs.
pub type Edit<'a> = &'a dyn Fn(usize, usize, &[f64], &[usize]) -> Option<Vec<(usize, f64)>>;

pub fn no_edit(_: usize, _: usize, _: &[f64], _: &[usize]) -> Option<Vec<(usize, f64)>> {
    None
}

fn mat(t: &corlab::Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r)
        .map(|i| (0..c).map(|j| t.data()[i * c + j] as f64).collect())
        .collect()
}

fn vecf(t: &corlab::Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn vm(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w[i][j];
        }
    }
    out
}

fn norm(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Indices of the `k` largest values; the lower index wins ties.
pub fn top_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; x.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(x.len()) {
        let mut best: Option<usize> = None;
        for i in 0..x.len() {
            if !taken[i] && best.map_or(true, |b| x[i] > x[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Expert output `W_out · silu(W_in · x)`.
pub fn expert(m: &MoeModel, layer: usize, e: usize, x: &[f64]) -> Vec<f64> {
    let ex = &m.layers[layer].experts[e];
    let h: Vec<f64> = vm(x, &mat(&ex.w_in)).into_iter().map(silu).collect();
    vm(&h, &mat(&ex.w_out))
}

/// Logits `[T × V]` for one sequence.
pub fn logits(m: &MoeModel, tokens: &[u32], edit: Edit) -> Mat {
    let c = &m.config;
    let d = c.d_model;
    let tok = mat(&m.tok_emb);
    let pos = mat(&m.pos_emb);
    let mut h: Mat = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| tok[id as usize][j] + pos[t][j]).collect())
        .collect();
    let n = tokens.len();
    for (l, lp) in m.layers.iter().enumerate() {
        let g = vecf(&lp.attn_norm);
        let a: Mat = h.iter().map(|x| norm(x, &g)).collect();
        let q: Mat = a.iter().map(|x| vm(x, &mat(&lp.wq))).collect();
        let k: Mat = a.iter().map(|x| vm(x, &mat(&lp.wk))).collect();
        let v: Mat = a.iter().map(|x| vm(x, &mat(&lp.wv))).collect();
        let dh = d / c.n_heads;
        let mut att = vec![vec![0.0; d]; n];
        for head in 0..c.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let p = softmax(&scores);
                for (j, pj) in p.iter().enumerate() {
                    for c in cols.clone() {
                        att[i][c] += pj * v[j][c];
                    }
                }
            }
        }
        let wo = mat(&lp.wo);
        for i in 0..n {
            let o = vm(&att[i], &wo);
            for j in 0..d {
                h[i][j] += o[j];
            }
        }
        let mg = vecf(&lp.moe_norm);
        let router = mat(&lp.router);
        for (t, row) in h.iter_mut().enumerate() {
            let x = norm(row, &mg);
            let gates = softmax(&vm(&x, &router));
            let active = top_k(&gates, c.k_baseline);
            let weights = edit(l, t, &gates, &active)
                .unwrap_or_else(|| active.iter().map(|&e| (e, gates[e])).collect());
            let mut out = vec![0.0; d];
            for (e, w) in weights {
                let y = expert(m, l, e, &x);
                for j in 0..d {
                    out[j] += w * y[j];
                }
            }
            for j in 0..d {
                row[j] += out[j];
            }
        }
    }
    let fg = vecf(&m.final_norm);
    let un = mat(&m.unembed);
    h.iter().map(|x| vm(&norm(x, &fg), &un)).collect()
}

pub fn nll(logits: &[f64], target: u32) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

/// Rescue gain by two full passes: with expert `e` removed at
/// `(layer, pos)` and the remaining active gates renormalised, minus the
/// factual loss of `target` predicted at `pos`.
pub fn rescue_gain(m: &MoeModel, ctx: &[u32], target: u32, layer: usize, pos: usize, e: usize) -> f64 {
    let base = logits(m, ctx, &no_edit);
    let edited = logits(m, ctx, &|l, t, g, active| {
        (l == layer && t == pos).then(|| {
            let rest: Vec<usize> = active.iter().copied().filter(|&a| a != e).collect();
            let mass: f64 = rest.iter().map(|&a| g[a]).sum();
            rest.iter().map(|&a| (a, g[a] / mass)).collect()
        })
    });
    nll(&edited[pos], target) - nll(&base[pos], target)
}
