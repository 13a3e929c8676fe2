//! Compute-preserving routing: per-layer expert budgets proportional to
//! knowledge intensity, and selection scores fused with a causal prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert_analysis::ExpertImpactTable;
use crate::layer_analysis::LayerSensitivity;
use crate::model::RoutingOverride;
use crate::numerics::{min_max_normalize, top_k_indices};

/// Default prior weight in the fused selection score.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Range of prior weights in which fused routing is expected to be stable.
pub const ROBUST_LAMBDA: (f64, f64) = (0.05, 0.2);
/// Intensities at or below zero are raised to this value before allocation.
pub const MIN_INTENSITY: f64 = 1e-6;

/// Integer budgets `k_l` with `Σ k_l == k_total` and `k_min ≤ k_l ≤ k_max`,
/// as close as possible to shares proportional to `r`.
///
/// Layers whose proportional share falls outside the bounds are pinned to
/// the bound and the rest of the budget is shared among the free layers in
/// proportion to `r`. Shares are floored and the leftover units go to the
/// largest fractional remainders, lower index first on ties.
pub fn allocate_budgets(r: &[f64], k_total: usize, k_min: usize, k_max: usize) -> Result<Vec<usize>> {
    let n = r.len();
    if n == 0 {
        return Err(Error::Allocation("no layers to allocate".into()));
    }
    if let Some((l, v)) = r.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Allocation(format!(
            "layer {l} has intensity {v}; intensities must be positive and finite"
        )));
    }
    if k_min > k_max || n * k_min > k_total || n * k_max < k_total {
        return Err(Error::Allocation(format!(
            "cannot place {k_total} experts over {n} layers with bounds [{k_min}, {k_max}]"
        )));
    }
    let shares = water_fill(r, k_total as f64, k_min as f64, k_max as f64);

    let mut k: Vec<usize> = shares
        .iter()
        .map(|&s| (s.floor() as usize).clamp(k_min, k_max))
        .collect();
    let frac: Vec<f64> = shares.iter().zip(&k).map(|(s, &f)| s - f as f64).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));

    let assigned: usize = k.iter().sum();
    if assigned < k_total {
        let mut need = k_total - assigned;
        // repeated sweeps only matter when rounding error piles up
        while need > 0 {
            for &l in &order {
                if need > 0 && k[l] < k_max {
                    k[l] += 1;
                    need -= 1;
                }
            }
        }
    } else {
        let mut extra = assigned - k_total;
        while extra > 0 {
            for &l in order.iter().rev() {
                if extra > 0 && k[l] > k_min {
                    k[l] -= 1;
                    extra -= 1;
                }
            }
        }
    }
    debug_assert_eq!(k.iter().sum::<usize>(), k_total);
    Ok(k)
}

/// Real-valued shares `clamp(t · r_l, lo, hi)` with `t` chosen so that they
/// sum to `total`.
fn water_fill(r: &[f64], total: f64, lo: f64, hi: f64) -> Vec<f64> {
    let sum_at = |t: f64| -> f64 { r.iter().map(|&x| (t * x).clamp(lo, hi)).sum() };
    let mut knots: Vec<f64> = r.iter().flat_map(|&x| [lo / x, hi / x]).collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let mut t = *knots.last().expect("nonempty");
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fb) = (sum_at(a), sum_at(b));
        if fa >= total {
            t = a;
            break;
        }
        if fb >= total {
            // the sum is linear on [a, b]
            t = a + (b - a) * (total - fa) / (fb - fa);
            break;
        }
    }
    let free: f64 = r.iter().filter(|&&x| lo < t * x && t * x < hi).sum();
    let pinned: f64 = r
        .iter()
        .map(|&x| (t * x).clamp(lo, hi))
        .filter(|&s| s <= lo || s >= hi)
        .sum();
    r.iter()
        .map(|&x| {
            let s = (t * x).clamp(lo, hi);
            if s <= lo || s >= hi || free == 0.0 {
                s
            } else {
                // recompute free shares directly to avoid drift from `t`
                (total - pinned) * x / free
            }
        })
        .collect()
}

/// Per-layer priors in `[0, 1]`: min-max normalised impact scores, with
/// undefined cells counted as zero and flat layers mapped to all zeros.
pub fn normalize_cei(table: &ExpertImpactTable) -> Vec<Vec<f64>> {
    (0..table.n_layers)
        .map(|l| {
            let raw: Vec<f64> = (0..table.n_experts)
                .map(|e| {
                    let c = table.cell(l, e);
                    if c.defined {
                        c.cei
                    } else {
                        0.0
                    }
                })
                .collect();
            min_max_normalize(&raw)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    /// Chosen experts, highest fused score first.
    pub active: Vec<usize>,
    /// Chosen experts that plain Top-k over the gates would have left out.
    pub awakened: Vec<usize>,
}

/// Top-`k` of `gates + lambda · prior`, lower index first on ties.
pub fn fused_select(gates: &[f64], prior: &[f64], lambda: f64, k: usize) -> Selection {
    let scores: Vec<f64> = gates.iter().zip(prior).map(|(g, p)| g + lambda * p).collect();
    let active = top_k_indices(&scores, k);
    let plain = top_k_indices(gates, k);
    let awakened = active.iter().copied().filter(|e| !plain.contains(e)).collect();
    Selection { active, awakened }
}

/// Which layers use the fused selection score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseScope {
    #[default]
    All,
    /// Only layers whose intensity is at least the mean intensity.
    KnowledgeLayers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOptions {
    pub lambda: f64,
    pub k_min: usize,
    /// Capped at the expert count.
    pub k_max: usize,
    pub fuse: FuseScope,
}

impl PlanOptions {
    pub fn new(n_experts: usize) -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            k_min: 1,
            k_max: n_experts,
            fuse: FuseScope::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanLayer {
    pub l: usize,
    pub k_l: usize,
    #[serde(rename = "R_l")]
    pub r_l: f64,
    pub prior: Vec<f64>,
    /// Whether selection in this layer adds the prior.
    pub fuse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingPlan {
    #[serde(rename = "K_total")]
    pub k_total: usize,
    pub lambda: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub layers: Vec<PlanLayer>,
}

impl RoutingPlan {
    pub fn budgets(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.k_l).collect()
    }

    /// Per-layer routing edits that apply this plan in a forward pass.
    pub fn overrides(&self) -> Vec<RoutingOverride> {
        self.layers
            .iter()
            .map(|l| RoutingOverride {
                k: Some(l.k_l),
                prior: l.fuse.then(|| l.prior.clone()),
                lambda: self.lambda,
                ..RoutingOverride::default()
            })
            .collect()
    }

    pub fn warnings(&self) -> Vec<String> {
        lambda_warning(self.lambda).into_iter().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: usize = self.budgets().iter().sum();
        if sum != self.k_total {
            return Err(Error::Input(format!(
                "plan budgets sum to {sum}, K_total is {}",
                self.k_total
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.l != i {
                return Err(Error::Input(format!("plan layer {i} is labelled {}", l.l)));
            }
            if l.k_l < self.k_min || l.k_l > self.k_max {
                return Err(Error::Input(format!(
                    "layer {i} budget {} outside [{}, {}]",
                    l.k_l, self.k_min, self.k_max
                )));
            }
            if l.prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Input(format!("layer {i} prior leaves [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Warning text when `lambda` lies outside the robust range.
pub fn lambda_warning(lambda: f64) -> Option<String> {
    let (lo, hi) = ROBUST_LAMBDA;
    (!(lo..=hi).contains(&lambda)).then(|| {
        format!("lambda {lambda} is outside [{lo}, {hi}]; fused routing may be unstable")
    })
}

/// Combines layer intensities and expert impacts into a routing plan with
/// the same total number of active experts as standard routing.
pub fn build_plan(
    rki: &[LayerSensitivity],
    cei: &ExpertImpactTable,
    k_baseline: usize,
    opts: &PlanOptions,
) -> Result<RoutingPlan> {
    build_plan_with_total(rki, cei, rki.len() * k_baseline, opts)
}

/// Like [`build_plan`] with an explicit total number of active experts.
pub fn build_plan_with_total(
    rki: &[LayerSensitivity],
    cei: &ExpertImpactTable,
    k_total: usize,
    opts: &PlanOptions,
) -> Result<RoutingPlan> {
    if rki.len() != cei.n_layers {
        return Err(Error::Input(format!(
            "{} layer sensitivities but an impact table over {} layers",
            rki.len(),
            cei.n_layers
        )));
    }
    for (i, s) in rki.iter().enumerate() {
        if s.layer != i {
            return Err(Error::Input(format!("sensitivity entry {i} is for layer {}", s.layer)));
        }
    }
    if !opts.lambda.is_finite() || opts.lambda < 0.0 {
        return Err(Error::Input(format!("lambda must be finite and nonnegative, got {}", opts.lambda)));
    }
    let n_layers = rki.len();
    let k_max = opts.k_max.min(cei.n_experts);
    let r: Vec<f64> = rki.iter().map(|s| s.r_l.max(MIN_INTENSITY)).collect();
    let budgets = allocate_budgets(&r, k_total, opts.k_min, k_max)?;
    let priors = normalize_cei(cei);
    let mean_r = r.iter().sum::<f64>() / n_layers as f64;
    let layers = (0..n_layers)
        .map(|l| PlanLayer {
            l,
            k_l: budgets[l],
            r_l: rki[l].r_l,
            prior: priors[l].clone(),
            fuse: match opts.fuse {
                FuseScope::All => true,
                FuseScope::KnowledgeLayers => r[l] >= mean_r,
            },
        })
        .collect();
    let plan = RoutingPlan {
        k_total,
        lambda: opts.lambda,
        k_min: opts.k_min,
        k_max,
        layers,
    };
    for w in plan.warnings() {
        log::warn!("{w}");
    }
    Ok(plan)
}
