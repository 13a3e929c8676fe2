//! Counterfactual expert impact: the loss increase on hard tokens when one
//! active expert is removed and the remaining active gates are rescaled to
//! keep their total mass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{StratifiedSets, TokenRecord};
use crate::error::{Error, Result};
use crate::model::{Ablation, MoeModel, RoutingOverride};
use crate::numerics::{cross_entropy_nll, Real, Tensor};

/// Gates with `expert` removed from `active` and the other active gates
/// divided by their sum. Inactive entries are returned unchanged. `site`
/// is the `(layer, position)` reported in errors.
pub fn ablate_gates(
    gates: &[f64],
    active: &[usize],
    expert: usize,
    site: (usize, usize),
) -> Result<Vec<f64>> {
    let (layer, position) = site;
    if !active.contains(&expert) {
        return Err(Error::NotActivated {
            layer,
            expert,
            position,
        });
    }
    if active.len() < 2 {
        return Err(Error::AblationDegenerate { layer, position });
    }
    let mass: f64 = active.iter().filter(|&&m| m != expert).map(|&m| gates[m]).sum();
    let mut out = gates.to_vec();
    for &m in active {
        out[m] = if m == expert { 0.0 } else { gates[m] / mass };
    }
    Ok(out)
}

fn target_loss<T: Real>(logits: &Tensor<T>, row: usize, token: u32) -> Result<f64> {
    let r = Tensor::new(vec![1, logits.cols()], logits.row(row).to_vec())?;
    Ok(cross_entropy_nll(&r, &[token])?[0].as_f64())
}

fn ablation_override(n_layers: usize, layer: usize, position: usize, expert: usize) -> Vec<RoutingOverride> {
    let mut ov = vec![RoutingOverride::default(); n_layers];
    ov[layer].ablations.push(Ablation { position, expert });
    ov
}

/// Loss change of the record's target token when `expert` is ablated in
/// `layer` at the routing position only.
pub fn rescue_gain<T: Real>(model: &MoeModel<T>, record: &TokenRecord, layer: usize, expert: usize) -> Result<f64> {
    if layer >= model.config.n_layers {
        return Err(Error::Index(format!("layer {layer} out of range")));
    }
    let pos = record.routing_position();
    let base = model.forward(&record.context, &[], false)?;
    let ov = ablation_override(model.config.n_layers, layer, pos, expert);
    let ablated = model.forward(&record.context, &ov, false)?;
    Ok(target_loss(&ablated.logits, pos, record.token)? - target_loss(&base.logits, pos, record.token)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertImpact {
    pub layer: usize,
    pub expert: usize,
    /// Mean rescue gain over the hard tokens where the expert was active.
    pub cei: f64,
    /// Hard tokens that contributed a rescue gain.
    pub n_active: usize,
    /// Mean gate probability over those tokens.
    pub mean_gate: f64,
    pub defined: bool,
    /// Activations skipped because the expert was the only active one.
    pub n_skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertImpactTable {
    pub n_layers: usize,
    pub n_experts: usize,
    /// Row-major over `(layer, expert)`.
    pub cells: Vec<ExpertImpact>,
}

impl ExpertImpactTable {
    pub fn cell(&self, layer: usize, expert: usize) -> &ExpertImpact {
        &self.cells[layer * self.n_experts + expert]
    }

    pub fn layer(&self, layer: usize) -> &[ExpertImpact] {
        &self.cells[layer * self.n_experts..(layer + 1) * self.n_experts]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.cells)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_cells(serde_json::from_str(text)?)
    }

    pub fn from_cells(cells: Vec<ExpertImpact>) -> Result<Self> {
        let n_layers = cells.iter().map(|c| c.layer + 1).max().unwrap_or(0);
        let n_experts = cells.iter().map(|c| c.expert + 1).max().unwrap_or(0);
        if n_layers * n_experts != cells.len() || cells.is_empty() {
            return Err(Error::Input(format!(
                "impact table has {} cells, not a full {n_layers}x{n_experts} grid",
                cells.len()
            )));
        }
        for (i, c) in cells.iter().enumerate() {
            if (c.layer, c.expert) != (i / n_experts, i % n_experts) {
                return Err(Error::Input(format!(
                    "impact cell {i} is ({}, {}), expected row-major order",
                    c.layer, c.expert
                )));
            }
            if c.defined && !c.cei.is_finite() {
                return Err(Error::Input(format!("impact cell {i} has non-finite score")));
            }
        }
        Ok(Self {
            n_layers,
            n_experts,
            cells,
        })
    }
}

/// One rescue gain sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub layer: usize,
    pub expert: usize,
    pub gate: f64,
    /// `None` when the ablation was degenerate.
    pub gain: Option<f64>,
}

/// All rescue gain samples of one record under standard routing.
pub fn record_samples<T: Real>(model: &MoeModel<T>, record: &TokenRecord) -> Result<Vec<Sample>> {
    let pos = record.routing_position();
    let base = model.forward(&record.context, &[], true)?;
    let base_loss = target_loss(&base.logits, pos, record.token)?;
    let traces = base.traces.expect("captured");
    let mut out = Vec::new();
    for (layer, tr) in traces.iter().enumerate() {
        let active = &tr.active[pos];
        for &expert in active {
            let gate = tr.gates.row(pos)[expert].as_f64();
            let gain = if active.len() < 2 {
                None
            } else {
                let ov = ablation_override(model.config.n_layers, layer, pos, expert);
                let ablated = model.forward(&record.context, &ov, false)?;
                Some(target_loss(&ablated.logits, pos, record.token)? - base_loss)
            };
            out.push(Sample {
                layer,
                expert,
                gate,
                gain,
            });
        }
    }
    Ok(out)
}

/// Aggregates samples into a table. Samples are summed in the order given.
pub fn aggregate(n_layers: usize, n_experts: usize, samples: &[Sample]) -> ExpertImpactTable {
    let mut sum = vec![0.0; n_layers * n_experts];
    let mut gate = vec![0.0; n_layers * n_experts];
    let mut n = vec![0usize; n_layers * n_experts];
    let mut skipped = vec![0usize; n_layers * n_experts];
    for s in samples {
        let i = s.layer * n_experts + s.expert;
        match s.gain {
            Some(g) => {
                sum[i] += g;
                gate[i] += s.gate;
                n[i] += 1;
            }
            None => skipped[i] += 1,
        }
    }
    let cells = (0..n_layers * n_experts)
        .map(|i| {
            let defined = n[i] > 0;
            ExpertImpact {
                layer: i / n_experts,
                expert: i % n_experts,
                cei: if defined { sum[i] / n[i] as f64 } else { 0.0 },
                n_active: n[i],
                mean_gate: if defined { gate[i] / n[i] as f64 } else { 0.0 },
                defined,
                n_skipped: skipped[i],
            }
        })
        .collect();
    ExpertImpactTable {
        n_layers,
        n_experts,
        cells,
    }
}

/// Impact of every (layer, expert) over the hard tokens. Records are
/// processed in parallel and reduced in `(doc, pos, context)` order, so the
/// result does not depend on the order of `sets.hard`.
pub fn compute_cei<T: Real>(model: &MoeModel<T>, sets: &StratifiedSets) -> Result<ExpertImpactTable> {
    if sets.hard.is_empty() {
        return Err(Error::Stratification("no hard tokens to ablate".into()));
    }
    let mut hard: Vec<&TokenRecord> = sets.hard.iter().collect();
    hard.sort_by(|a, b| {
        (a.doc, a.pos, &a.context, a.token).cmp(&(b.doc, b.pos, &b.context, b.token))
    });
    let per_record: Vec<Result<Vec<Sample>>> =
        hard.par_iter().map(|r| record_samples(model, r)).collect();
    let mut samples = Vec::new();
    for s in per_record {
        samples.extend(s?);
    }
    Ok(aggregate(model.config.n_layers, model.config.n_experts, &samples))
}
