//! Per-token losses on a calibration corpus and their split into hard
//! (high-loss) and easy (low-loss) tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MoeModel;
use crate::numerics::{cross_entropy_nll, percentile};

pub const HISTOGRAM_BINS: usize = 32;
pub const MIN_RECORDS: usize = 10;

/// Loss of one predicted token together with the context that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub doc: usize,
    /// Position of the predicted token inside its document.
    pub pos: usize,
    pub token: u32,
    /// Tokens fed to the model; the last one sits at the routing position.
    pub context: Vec<u32>,
    pub loss: f64,
}

impl TokenRecord {
    /// Row of the forward pass over `context` that predicts `token`.
    pub fn routing_position(&self) -> usize {
        self.context.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub p_low: f64,
    pub p_high: f64,
    pub tau_low: f64,
    pub tau_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratifiedSets {
    pub thresholds: Thresholds,
    /// Records with loss strictly above `tau_high`.
    pub hard: Vec<TokenRecord>,
    /// Records with loss strictly below `tau_low`.
    pub easy: Vec<TokenRecord>,
}

/// One record per predicted token of each document; the first token of a
/// document has no context and is skipped. Documents longer than the
/// model's context are scored with a sliding window.
pub fn compute_losses(model: &MoeModel, docs: &[Vec<u32>]) -> Result<Vec<TokenRecord>> {
    if docs.is_empty() {
        return Err(Error::Input("calibration corpus is empty".into()));
    }
    let t_max = model.config.max_seq_len;
    let per_doc: Vec<Result<Vec<TokenRecord>>> = docs
        .par_iter()
        .enumerate()
        .map(|(doc, tokens)| {
            let mut out = Vec::with_capacity(tokens.len().saturating_sub(1));
            if tokens.len() < 2 {
                return Ok(out);
            }
            // positions whose context fits from the document start share one pass
            let shared = (tokens.len() - 1).min(t_max);
            let logits = model.forward(&tokens[..shared], &[], false)?.logits;
            let nll = cross_entropy_nll(&logits, &tokens[1..=shared])?;
            for (i, &l) in nll.iter().enumerate() {
                out.push(TokenRecord {
                    doc,
                    pos: i + 1,
                    token: tokens[i + 1],
                    context: tokens[..=i].to_vec(),
                    loss: l as f64,
                });
            }
            for pos in shared + 1..tokens.len() {
                let context = &tokens[pos - t_max..pos];
                let logits = model.forward(context, &[], false)?.logits;
                let row = crate::numerics::Tensor::new(
                    vec![1, logits.cols()],
                    logits.row(t_max - 1).to_vec(),
                )?;
                let l = cross_entropy_nll(&row, &tokens[pos..=pos])?[0];
                out.push(TokenRecord {
                    doc,
                    pos,
                    token: tokens[pos],
                    context: context.to_vec(),
                    loss: l as f64,
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_doc {
        records.extend(r?);
    }
    Ok(records)
}

/// Splits records at the `p_low` and `p_high` loss percentiles (linear
/// interpolation); membership uses strict inequalities.
pub fn stratify(records: &[TokenRecord], p_low: f64, p_high: f64) -> Result<StratifiedSets> {
    if records.len() < MIN_RECORDS {
        return Err(Error::InsufficientData {
            needed: MIN_RECORDS,
            got: records.len(),
        });
    }
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low > p_high {
        return Err(Error::Config(format!(
            "percentiles must satisfy 0 <= p_low <= p_high <= 100, got {p_low} and {p_high}"
        )));
    }
    if let Some(r) = records.iter().find(|r| !(r.loss.is_finite() && r.loss >= 0.0)) {
        return Err(Error::Input(format!(
            "record doc {} pos {} has invalid loss {}",
            r.doc, r.pos, r.loss
        )));
    }
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let tau_low = percentile(&losses, p_low);
    let tau_high = percentile(&losses, p_high);
    Ok(StratifiedSets {
        thresholds: Thresholds {
            p_low,
            p_high,
            tau_low,
            tau_high,
        },
        hard: records.iter().filter(|r| r.loss > tau_high).cloned().collect(),
        easy: records.iter().filter(|r| r.loss < tau_low).cloned().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[min, max]`; the maximum falls in the last
/// bin and a constant input puts everything in the first.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    if values.is_empty() {
        return Histogram {
            min: 0.0,
            max: 0.0,
            counts,
        };
    }
    let width = max - min;
    for &v in values {
        let b = if width > 0.0 {
            (((v - min) / width * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Histogram { min, max, counts }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationReport {
    pub n_records: usize,
    pub mean_loss: f64,
    pub histogram: Histogram,
    pub thresholds: Thresholds,
    pub hard: Vec<TokenRecord>,
    pub easy: Vec<TokenRecord>,
}

impl CalibrationReport {
    pub fn new(records: &[TokenRecord], sets: StratifiedSets) -> Self {
        let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
        Self {
            n_records: records.len(),
            mean_loss: crate::numerics::mean(&losses),
            histogram: histogram(&losses, HISTOGRAM_BINS),
            thresholds: sets.thresholds,
            hard: sets.hard,
            easy: sets.easy,
        }
    }

    pub fn sets(&self) -> StratifiedSets {
        StratifiedSets {
            thresholds: self.thresholds.clone(),
            hard: self.hard.clone(),
            easy: self.easy.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(losses: &[f64]) -> Vec<TokenRecord> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| TokenRecord {
                doc: i,
                pos: 1,
                token: 0,
                context: vec![0],
                loss,
            })
            .collect()
    }

    #[test]
    fn equal_losses_give_empty_sets() {
        let s = stratify(&recs(&[2.0; 20]), 10.0, 90.0).unwrap();
        assert!(s.hard.is_empty() && s.easy.is_empty());
    }

    #[test]
    fn one_to_hundred() {
        let losses: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = stratify(&recs(&losses), 10.0, 90.0).unwrap();
        assert!((s.thresholds.tau_high - 90.1).abs() < 1e-9);
        assert!((s.thresholds.tau_low - 10.9).abs() < 1e-9);
        let hard: Vec<f64> = s.hard.iter().map(|r| r.loss).collect();
        let easy: Vec<f64> = s.easy.iter().map(|r| r.loss).collect();
        assert_eq!(hard, (91..=100).map(f64::from).collect::<Vec<_>>());
        assert_eq!(easy, (1..=10).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn full_range_percentiles_give_empty_sets() {
        let losses: Vec<f64> = (1..=30).map(f64::from).collect();
        let s = stratify(&recs(&losses), 0.0, 100.0).unwrap();
        assert!(s.hard.is_empty() && s.easy.is_empty());
    }

    #[test]
    fn too_few_records() {
        assert!(matches!(
            stratify(&recs(&[1.0; 9]), 10.0, 90.0),
            Err(Error::InsufficientData { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[0.0, 1.0, 2.0, 4.0], 4);
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        assert_eq!(histogram(&[3.0; 5], 8).counts[0], 5);
    }
}
