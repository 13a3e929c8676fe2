//! Layer sensitivity to a multiplicative perturbation of the expert output,
//! and the relative knowledge intensity that divides hard-token sensitivity
//! by easy-token sensitivity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{StratifiedSets, TokenRecord};
use crate::error::{Error, Result};
use crate::model::{MoeModel, RoutingOverride};
use crate::numerics::{cross_entropy_nll, mean, Real, Tensor};

pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSensitivity {
    pub layer: usize,
    #[serde(rename = "S_hard")]
    pub s_hard: f64,
    #[serde(rename = "S_easy")]
    pub s_easy: f64,
    #[serde(rename = "R_l")]
    pub r_l: f64,
    pub n_hard: usize,
    pub n_easy: usize,
}

pub fn sensitivities_to_json(rows: &[LayerSensitivity]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}

pub fn sensitivities_from_json(text: &str) -> Result<Vec<LayerSensitivity>> {
    Ok(serde_json::from_str(text)?)
}

/// Target-token loss of every record under `overrides`. Records from the
/// same document whose contexts are prefixes of one another share a pass.
pub fn record_losses<T: Real>(
    model: &MoeModel<T>,
    records: &[TokenRecord],
    overrides: &[RoutingOverride],
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (records[i].doc, records[i].context.len()));
    // each group is a run of records whose contexts prefix the last one
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order.into_iter().rev() {
        let r = &records[i];
        match groups.last_mut() {
            Some(g)
                if records[g[0]].doc == r.doc
                    && records[g[0]].context.starts_with(&r.context) =>
            {
                g.push(i)
            }
            _ => groups.push(vec![i]),
        }
    }
    let per_group: Vec<Result<Vec<(usize, f64)>>> = groups
        .par_iter()
        .map(|g| {
            let logits = model.forward(&records[g[0]].context, overrides, false)?.logits;
            g.iter()
                .map(|&i| {
                    let r = &records[i];
                    let row = Tensor::new(
                        vec![1, logits.cols()],
                        logits.row(r.routing_position()).to_vec(),
                    )?;
                    Ok((i, cross_entropy_nll(&row, &[r.token])?[0].as_f64()))
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; records.len()];
    for g in per_group {
        for (i, l) in g? {
            out[i] = l;
        }
    }
    Ok(out)
}

fn scaled_layer<T: Real>(model: &MoeModel<T>, layer: usize, delta: f64) -> Result<Vec<RoutingOverride>> {
    if layer >= model.config.n_layers {
        return Err(Error::Index(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    let mut ov = vec![RoutingOverride::default(); model.config.n_layers];
    ov[layer].output_scale = Some(1.0 + delta);
    Ok(ov)
}

/// Loss change per record when layer `layer`'s expert output is scaled by
/// `1 + delta` at every position. `base` holds the unperturbed losses at
/// the model's precision; for an f32 model they equal the stored record
/// losses bit for bit.
pub fn degradations<T: Real>(
    model: &MoeModel<T>,
    records: &[TokenRecord],
    base: &[f64],
    layer: usize,
    delta: f64,
) -> Result<Vec<f64>> {
    let ov = scaled_layer(model, layer, delta)?;
    let perturbed = record_losses(model, records, &ov)?;
    Ok(perturbed.iter().zip(base).map(|(p, b)| p - b).collect())
}

/// Mean loss degradation over `records`; may be negative.
pub fn perturb_and_measure<T: Real>(
    model: &MoeModel<T>,
    records: &[TokenRecord],
    layer: usize,
    delta: f64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("no records to perturb".into()));
    }
    let base = record_losses(model, records, &[])?;
    Ok(mean(&degradations(model, records, &base, layer, delta)?))
}

/// `R = S_hard / (S_easy + epsilon)`.
pub fn intensity(s_hard: f64, s_easy: f64, epsilon: f64) -> f64 {
    s_hard / (s_easy + epsilon)
}

/// Sensitivities and relative knowledge intensity for every layer, one
/// batched pass per layer over hard and easy records together.
pub fn rki<T: Real>(
    model: &MoeModel<T>,
    sets: &StratifiedSets,
    delta: f64,
    epsilon: f64,
) -> Result<Vec<LayerSensitivity>> {
    if sets.hard.is_empty() || sets.easy.is_empty() {
        return Err(Error::Stratification(format!(
            "need hard and easy tokens, got {} hard and {} easy",
            sets.hard.len(),
            sets.easy.len()
        )));
    }
    let all: Vec<TokenRecord> = sets.hard.iter().chain(&sets.easy).cloned().collect();
    let n_hard = sets.hard.len();
    let base = record_losses(model, &all, &[])?;
    (0..model.config.n_layers)
        .map(|layer| {
            let d = degradations(model, &all, &base, layer, delta)?;
            let s_hard = mean(&d[..n_hard]);
            let s_easy = mean(&d[n_hard..]);
            let r_l = intensity(s_hard, s_easy, epsilon);
            if !r_l.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("layer {layer} intensity {s_hard} / ({s_easy} + {epsilon})"),
                });
            }
            Ok(LayerSensitivity {
                layer,
                s_hard,
                s_easy,
                r_l,
                n_hard,
                n_easy: sets.easy.len(),
            })
        })
        .collect()
}

/// Linear residual cascade `h_l = h_{l-1} + gain · h_{l-1} + c_l · u` read
/// out by `loss = u · h_L`. The knowledge branch `c_l · u` carries `kappa_l`
/// on hard probes and `floor` on easy probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCascadeSpec {
    pub gain: f64,
    pub kappa: Vec<f64>,
    pub floor: f64,
    pub dim: usize,
    pub probes: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl SyntheticCascadeSpec {
    pub fn constant(depth: usize, gain: f64, kappa: f64) -> Self {
        Self {
            gain,
            kappa: vec![kappa; depth],
            floor: 0.05,
            dim: 8,
            probes: 16,
            delta: DEFAULT_DELTA,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.kappa.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa.is_empty() || self.dim == 0 || self.probes == 0 {
            return Err(Error::Config("cascade needs layers, a dimension and probes".into()));
        }
        if !(self.gain >= 0.0) || !(self.floor > 0.0) || self.kappa.iter().any(|k| !(*k >= 0.0)) {
            return Err(Error::Config(
                "cascade gain and kappa must be nonnegative and the floor positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub s_hard: Vec<f64>,
    pub s_easy: Vec<f64>,
    pub r: Vec<f64>,
    /// `max R / min R`.
    pub r_spread: f64,
    /// Whether raw hard sensitivity strictly decreases from the first
    /// layer to the last, i.e. grows with distance to the output.
    pub raw_grows_with_distance: bool,
    pub argmax_r: usize,
}

/// Runs the cascade with and without a `(1 + delta)` perturbation of each
/// layer's knowledge branch and measures sensitivities as for a model.
pub fn verify_cascade(spec: &SyntheticCascadeSpec) -> Result<CascadeReport> {
    use rand::{Rng, SeedableRng};
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let mut u: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= norm);
    let probes: Vec<Vec<f64>> = (0..spec.probes)
        .map(|_| (0..spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let run = |x: &[f64], coef: &dyn Fn(usize) -> f64, hit: Option<usize>| -> f64 {
        let mut h = x.to_vec();
        for l in 0..spec.depth() {
            let scale = if hit == Some(l) { 1.0 + spec.delta } else { 1.0 };
            let c = coef(l) * scale;
            for (hj, uj) in h.iter_mut().zip(&u) {
                *hj += spec.gain * *hj + c * uj;
            }
        }
        h.iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    let sensitivity = |coef: &dyn Fn(usize) -> f64, layer: usize| -> f64 {
        let d: Vec<f64> = probes
            .iter()
            .map(|x| run(x, coef, Some(layer)) - run(x, coef, None))
            .collect();
        mean(&d)
    };
    let hard = |l: usize| spec.kappa[l];
    let easy = |_: usize| spec.floor;
    let s_hard: Vec<f64> = (0..spec.depth()).map(|l| sensitivity(&hard, l)).collect();
    let s_easy: Vec<f64> = (0..spec.depth()).map(|l| sensitivity(&easy, l)).collect();
    let r: Vec<f64> = s_hard
        .iter()
        .zip(&s_easy)
        .map(|(&h, &e)| intensity(h, e, spec.epsilon))
        .collect();
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = r.iter().copied().fold(f64::INFINITY, f64::min);
    let argmax_r = crate::numerics::argmax(&r);
    Ok(CascadeReport {
        raw_grows_with_distance: s_hard.windows(2).all(|w| w[0] > w[1]),
        r_spread: max / min,
        s_hard,
        s_easy,
        r,
        argmax_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_guard() {
        assert!((intensity(1.0, 0.0, 1e-6) - 1e6).abs() < 1e-3);
        assert!((intensity(0.3, 0.3, 1e-6) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_kappa_is_flat_after_normalisation() {
        let rep = verify_cascade(&SyntheticCascadeSpec::constant(8, 0.3, 1.0)).unwrap();
        assert!(rep.raw_grows_with_distance);
        assert!(rep.r_spread <= 1.10, "{}", rep.r_spread);
        assert!(rep.s_hard[0] / rep.s_hard[7] > 5.0);
    }

    #[test]
    fn peaked_kappa_is_found() {
        for peak in 0..6 {
            let mut spec = SyntheticCascadeSpec::constant(6, 0.3, 0.2);
            spec.kappa[peak] = 2.0;
            assert_eq!(verify_cascade(&spec).unwrap().argmax_r, peak);
        }
    }

    #[test]
    fn identity_cascade_has_depth_free_sensitivity() {
        let mut spec = SyntheticCascadeSpec::constant(5, 0.0, 1.0);
        spec.kappa = vec![0.5, 1.0, 2.0, 1.5, 0.25];
        let rep = verify_cascade(&spec).unwrap();
        for w in rep.s_easy.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
        for (r, k) in rep.r.iter().zip(&spec.kappa) {
            assert!((r / k - rep.r[0] / spec.kappa[0]).abs() < 1e-6 * r / k);
        }
    }

    proptest::proptest! {
        #[test]
        fn common_scale_cancels_up_to_the_guard(
            h in 1e-4f64..10.0,
            e in 1e-4f64..10.0,
            c in 1e-3f64..1e3,
        ) {
            let eps = DEFAULT_EPSILON;
            let r = intensity(h, e, eps);
            let rc = intensity(c * h, c * e, eps);
            let bound = r * eps * (c - 1.0).abs() / (c * e + eps);
            proptest::prop_assert!((rc - r).abs() <= bound * (1.0 + 1e-9) + 1e-12 * r);
            let exact = intensity(c * h, c * e, 0.0);
            proptest::prop_assert!((exact - h / e).abs() <= 1e-12 * h / e);
        }
    }
}
