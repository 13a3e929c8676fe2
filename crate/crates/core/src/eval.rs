//! Synthetic long-tail fact corpora, routing-mode comparisons at matched
//! compute, and the data behind the scatter, Pareto and lambda-sweep plots.
//!
//! The metric is fact-object next-token accuracy: the share of completion
//! queries whose argmax prediction is the true object token.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{compute_losses, stratify, StratifiedSets, TokenRecord};
use crate::error::{Error, Result};
use crate::expert_analysis::{compute_cei, ExpertImpactTable};
use crate::layer_analysis::{rki, LayerSensitivity, DEFAULT_DELTA, DEFAULT_EPSILON};
use crate::model::{ModelConfig, MoeModel, RoutingOverride};
use crate::numerics::{argmax, cross_entropy_nll, percentile, Tensor};
use crate::router::{build_plan, build_plan_with_total, PlanOptions, RoutingPlan};
use crate::trainer::{train, StepLoss, TrainConfig};

pub const METRIC: &str = "fact-object next-token accuracy";

const BOS: &str = "<bos>";
const RELATIONS: [&str; 8] = [
    "capital", "anthem", "river", "mascot", "founder", "harbor", "festival", "dialect",
];
const ADJECTIVES: [&str; 8] = ["old", "quiet", "red", "small", "bright", "cold", "green", "tall"];
const NOUNS: [&str; 8] = ["dog", "tree", "house", "road", "child", "bird", "stone", "boat"];
const VERBS: [&str; 8] = ["sees", "finds", "likes", "passes", "follows", "keeps", "meets", "moves"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactCorpusSpec {
    pub n_head_facts: usize,
    pub n_tail_facts: usize,
    /// Training occurrences of each head fact.
    pub head_rep: usize,
    /// Training occurrences of each tail fact.
    pub tail_rep: usize,
    /// Relations per subject, at most 8.
    pub n_relations: usize,
    /// Filler sentences in the training split.
    pub n_filler: usize,
    /// Subjects whose dossiers are re-rendered in the calibration split.
    pub calib_subjects: usize,
    /// Filler sentences in the calibration split.
    pub calib_filler: usize,
    pub seed: u64,
}

impl Default for FactCorpusSpec {
    fn default() -> Self {
        Self {
            n_head_facts: 48,
            n_tail_facts: 300,
            head_rep: 30,
            tail_rep: 1,
            n_relations: 4,
            n_filler: 300,
            calib_subjects: 40,
            calib_filler: 60,
            seed: 0,
        }
    }
}

impl FactCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_relations == 0 || self.n_relations > RELATIONS.len() {
            return Err(Error::Config(format!(
                "n_relations must be in 1..={}, got {}",
                RELATIONS.len(),
                self.n_relations
            )));
        }
        if self.tail_rep >= self.head_rep {
            return Err(Error::Config(format!(
                "tail_rep ({}) must be below head_rep ({})",
                self.tail_rep, self.head_rep
            )));
        }
        if self.tail_rep == 0 {
            return Err(Error::Config("tail facts must appear in training at least once".into()));
        }
        if self.n_head_facts + self.n_tail_facts == 0 {
            return Err(Error::Config("corpus needs at least one fact".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fact {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
    pub tail: bool,
}

/// Completion prompt for a seen fact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub fact: usize,
    pub context: Vec<u32>,
    pub target: u32,
    pub tail: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    pub vocab: Vec<String>,
    pub facts: Vec<Fact>,
    pub train: Vec<Vec<u32>>,
    pub calibration: Vec<Vec<u32>>,
    pub test: Vec<Query>,
}

impl Corpus {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        let v = c.vocab.len() as u32;
        let ok = c.train.iter().chain(&c.calibration).flatten().all(|&t| t < v)
            && c.test.iter().all(|q| q.target < v && q.context.iter().all(|&t| t < v));
        if !ok {
            return Err(Error::Input("corpus token outside its vocabulary".into()));
        }
        Ok(c)
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.vocab[t as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Training-split occurrences of each token.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.vocab.len()];
        for &t in self.train.iter().flatten() {
            c[t as usize] += 1;
        }
        c
    }
}

struct VocabBuilder {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl VocabBuilder {
    fn new() -> Self {
        Self {
            words: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn id(&mut self, w: &str) -> u32 {
        if let Some(&i) = self.index.get(w) {
            return i;
        }
        let i = self.words.len() as u32;
        self.words.push(w.to_string());
        self.index.insert(w.to_string(), i);
        i
    }
}

struct Words {
    bos: u32,
    colon: u32,
    is: u32,
    comma: u32,
    dot: u32,
    the: u32,
    a: u32,
    relations: Vec<u32>,
    adjectives: Vec<u32>,
    nouns: Vec<u32>,
    verbs: Vec<u32>,
}

impl Words {
    /// `<bos> SUBJ : REL is OBJ , REL is OBJ ... .` with the subject's facts
    /// in the given order.
    fn dossier(&self, facts: &[&Fact]) -> Vec<u32> {
        let mut out = vec![self.bos, facts[0].subject, self.colon];
        for (i, f) in facts.iter().enumerate() {
            if i > 0 {
                out.push(self.comma);
            }
            out.extend([f.relation, self.is, f.object]);
        }
        out.push(self.dot);
        out
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let pick = |rng: &mut ChaCha8Rng, xs: &[u32]| xs[rng.gen_range(0..xs.len())];
        if rng.gen_bool(0.5) {
            vec![
                self.bos,
                self.the,
                pick(rng, &self.adjectives),
                pick(rng, &self.nouns),
                pick(rng, &self.verbs),
                self.the,
                pick(rng, &self.nouns),
                self.dot,
            ]
        } else {
            vec![self.bos, self.a, pick(rng, &self.nouns), pick(rng, &self.verbs), self.dot]
        }
    }
}

/// Deterministic corpus. Each subject owns up to `n_relations` facts and is
/// described by a dossier listing them in a freshly shuffled order. Head
/// subjects' dossiers occur `head_rep` times in training and tail subjects'
/// `tail_rep` times, mixed with filler sentences. The calibration split
/// holds fresh dossier renderings and filler; the test split asks for the
/// object of every fact right after its subject.
pub fn generate_corpus(spec: &FactCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut v = VocabBuilder::new();
    let words = Words {
        bos: v.id(BOS),
        colon: v.id(":"),
        is: v.id("is"),
        comma: v.id(","),
        dot: v.id("."),
        the: v.id("the"),
        a: v.id("a"),
        relations: RELATIONS[..spec.n_relations].iter().map(|w| v.id(w)).collect(),
        adjectives: ADJECTIVES.iter().map(|w| v.id(w)).collect(),
        nouns: NOUNS.iter().map(|w| v.id(w)).collect(),
        verbs: VERBS.iter().map(|w| v.id(w)).collect(),
    };

    let n_facts = spec.n_head_facts + spec.n_tail_facts;
    let mut subjects: Vec<Vec<usize>> = Vec::new();
    let facts: Vec<Fact> = (0..n_facts)
        .map(|i| {
            let tail = i >= spec.n_head_facts;
            // subjects never mix head and tail facts
            let local = if tail { i - spec.n_head_facts } else { i };
            let group = if tail { "t" } else { "h" };
            if local % spec.n_relations == 0 {
                subjects.push(Vec::new());
            }
            subjects.last_mut().expect("pushed").push(i);
            Fact {
                subject: v.id(&format!("{group}subj{}", local / spec.n_relations)),
                relation: words.relations[local % spec.n_relations],
                object: v.id(&format!("obj{i}")),
                tail,
            }
        })
        .collect();

    let render = |rng: &mut ChaCha8Rng, ids: &[usize]| -> Vec<u32> {
        let mut order: Vec<&Fact> = ids.iter().map(|&i| &facts[i]).collect();
        order.shuffle(rng);
        words.dossier(&order)
    };

    let mut train = Vec::new();
    for ids in &subjects {
        let rep = if facts[ids[0]].tail { spec.tail_rep } else { spec.head_rep };
        for _ in 0..rep {
            train.push(render(&mut rng, ids));
        }
    }
    for _ in 0..spec.n_filler {
        train.push(words.filler(&mut rng));
    }
    train.shuffle(&mut rng);

    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.shuffle(&mut rng);
    let mut calibration: Vec<Vec<u32>> = order
        .iter()
        .take(spec.calib_subjects)
        .map(|&s| render(&mut rng, &subjects[s]))
        .collect();
    for _ in 0..spec.calib_filler {
        calibration.push(words.filler(&mut rng));
    }
    calibration.shuffle(&mut rng);

    let test = facts
        .iter()
        .enumerate()
        .map(|(i, f)| Query {
            fact: i,
            context: vec![words.bos, f.subject, words.colon, f.relation, words.is],
            target: f.object,
            tail: f.tail,
        })
        .collect();

    Ok(Corpus {
        vocab: v.words,
        facts,
        train,
        calibration,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeResult {
    pub mode: String,
    #[serde(rename = "K_total")]
    pub k_total: usize,
    pub accuracy: f64,
    /// `None` when there are no tail queries.
    pub tail_accuracy: Option<f64>,
    pub head_accuracy: Option<f64>,
    pub mean_nll: f64,
    /// Expert FFN invocations over all query tokens.
    pub expert_calls: usize,
    pub n_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metric: String,
    pub modes: Vec<ModeResult>,
}

impl EvalReport {
    pub fn mode(&self, name: &str) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Accuracy and loss of `queries` under one set of routing overrides.
pub fn evaluate_mode(
    model: &MoeModel,
    overrides: &[RoutingOverride],
    queries: &[Query],
    mode: &str,
    k_total: usize,
) -> Result<ModeResult> {
    if queries.is_empty() {
        return Err(Error::Input("no queries to evaluate".into()));
    }
    let per_query: Vec<Result<(bool, f64, usize)>> = queries
        .par_iter()
        .map(|q| {
            let out = model.forward(&q.context, overrides, false)?;
            let row = out.logits.row(q.context.len() - 1);
            let hit = argmax(row) == q.target as usize;
            let nll = cross_entropy_nll(&Tensor::new(vec![1, row.len()], row.to_vec())?, &[q.target])?[0];
            Ok((hit, nll as f64, out.expert_calls))
        })
        .collect();
    let (mut hits, mut tail_hits, mut head_hits) = (0usize, 0usize, 0usize);
    let (mut n_tail, mut n_head, mut calls) = (0usize, 0usize, 0usize);
    let mut nll = 0.0;
    for (q, r) in queries.iter().zip(per_query) {
        let (hit, l, c) = r?;
        hits += hit as usize;
        nll += l;
        calls += c;
        if q.tail {
            n_tail += 1;
            tail_hits += hit as usize;
        } else {
            n_head += 1;
            head_hits += hit as usize;
        }
    }
    let frac = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    Ok(ModeResult {
        mode: mode.to_string(),
        k_total,
        accuracy: hits as f64 / queries.len() as f64,
        tail_accuracy: frac(tail_hits, n_tail),
        head_accuracy: frac(head_hits, n_head),
        mean_nll: nll / queries.len() as f64,
        expert_calls: calls,
        n_queries: queries.len(),
    })
}

fn uniform_k(model: &MoeModel, k: usize) -> Vec<RoutingOverride> {
    vec![RoutingOverride::with_k(k); model.config.n_layers]
}

fn ensure_matched(a: &ModeResult, b: &ModeResult) -> Result<()> {
    if a.expert_calls != b.expert_calls {
        return Err(Error::ComputeMismatch(format!(
            "{} used {} expert calls, {} used {}",
            a.mode, a.expert_calls, b.mode, b.expert_calls
        )));
    }
    Ok(())
}

/// Standard, random and (with a plan) CoR routing at the baseline budget,
/// plus static uniform-k routing for every `k` from 1 to the expert count.
pub fn evaluate(
    model: &MoeModel,
    plan: Option<&RoutingPlan>,
    queries: &[Query],
    seed: u64,
) -> Result<EvalReport> {
    let cfg = &model.config;
    let base_total = cfg.k_total();
    let standard = evaluate_mode(model, &[], queries, "standard", base_total)?;
    let random_ov = vec![
        RoutingOverride {
            random_seed: Some(seed),
            ..RoutingOverride::default()
        };
        cfg.n_layers
    ];
    let random = evaluate_mode(model, &random_ov, queries, "random", base_total)?;
    ensure_matched(&standard, &random)?;
    let mut modes = vec![standard.clone(), random];
    if let Some(plan) = plan {
        if plan.layers.len() != cfg.n_layers {
            return Err(Error::Input(format!(
                "plan covers {} layers, model has {}",
                plan.layers.len(),
                cfg.n_layers
            )));
        }
        let cor = evaluate_mode(model, &plan.overrides(), queries, "cor", plan.k_total)?;
        if plan.k_total == base_total {
            ensure_matched(&standard, &cor)?;
        }
        modes.push(cor);
    }
    for k in 1..=cfg.n_experts {
        modes.push(evaluate_mode(
            model,
            &uniform_k(model, k),
            queries,
            &format!("static_k{k}"),
            k * cfg.n_layers,
        )?);
    }
    Ok(EvalReport {
        metric: METRIC.to_string(),
        modes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub mode: String,
    #[serde(rename = "K_total")]
    pub k_total: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub tail_accuracy: Option<f64>,
    pub head_accuracy: Option<f64>,
    pub expert_calls: usize,
}

impl From<ModeResult> for ParetoRow {
    fn from(m: ModeResult) -> Self {
        Self {
            mode: m.mode,
            k_total: m.k_total,
            accuracy: m.accuracy,
            nll: m.mean_nll,
            tail_accuracy: m.tail_accuracy,
            head_accuracy: m.head_accuracy,
            expert_calls: m.expert_calls,
        }
    }
}

/// A static uniform-k row and a CoR row for each budget, checked to use the
/// same number of expert calls. Budgets must be multiples of the layer
/// count.
pub fn pareto_sweep(
    model: &MoeModel,
    budgets: &[usize],
    make_plan: &(dyn Fn(usize) -> Result<RoutingPlan> + Sync),
    queries: &[Query],
) -> Result<Vec<ParetoRow>> {
    let l = model.config.n_layers;
    let mut rows = Vec::with_capacity(2 * budgets.len());
    for &k_total in budgets {
        if k_total % l != 0 || k_total / l > model.config.n_experts {
            return Err(Error::Input(format!(
                "budget {k_total} is not a uniform per-layer count over {l} layers"
            )));
        }
        let stat = evaluate_mode(model, &uniform_k(model, k_total / l), queries, "static", k_total)?;
        let plan = make_plan(k_total)?;
        if plan.k_total != k_total {
            return Err(Error::ComputeMismatch(format!(
                "plan for budget {k_total} spends {}",
                plan.k_total
            )));
        }
        let cor = evaluate_mode(model, &plan.overrides(), queries, "cor", k_total)?;
        ensure_matched(&stat, &cor)?;
        rows.push(stat.into());
        rows.push(cor.into());
    }
    Ok(rows)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn pareto_to_csv(rows: &[ParetoRow]) -> Result<String> {
    to_csv(rows)
}

pub fn pareto_from_csv(text: &str) -> Result<Vec<ParetoRow>> {
    from_csv(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub layer: usize,
    pub expert: usize,
    pub mean_gate: f64,
    pub cei: f64,
    pub defined: bool,
}

pub fn scatter_rows(table: &ExpertImpactTable) -> Vec<ScatterRow> {
    table
        .cells
        .iter()
        .map(|c| ScatterRow {
            layer: c.layer,
            expert: c.expert,
            mean_gate: c.mean_gate,
            cei: c.cei,
            defined: c.defined,
        })
        .collect()
}

/// Router confidence against causal necessity, one row per (layer, expert).
pub fn export_scatter(table: &ExpertImpactTable) -> Result<String> {
    to_csv(&scatter_rows(table))
}

pub fn parse_scatter(text: &str) -> Result<Vec<ScatterRow>> {
    from_csv(text)
}

/// Defined cells whose mean gate is below their layer's median and whose
/// impact is above their layer's 75th percentile, both over defined cells.
pub fn dormant_zone(rows: &[ScatterRow]) -> Vec<ScatterRow> {
    let n_layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for l in 0..n_layers {
        let layer: Vec<&ScatterRow> = rows.iter().filter(|r| r.layer == l && r.defined).collect();
        if layer.is_empty() {
            continue;
        }
        let gates: Vec<f64> = layer.iter().map(|r| r.mean_gate).collect();
        let ceis: Vec<f64> = layer.iter().map(|r| r.cei).collect();
        let median = percentile(&gates, 50.0);
        let p75 = percentile(&ceis, 75.0);
        out.extend(
            layer
                .into_iter()
                .filter(|r| r.mean_gate < median && r.cei > p75)
                .cloned(),
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub tail_accuracy: Option<f64>,
    pub head_accuracy: Option<f64>,
    pub nll: f64,
    pub expert_calls: usize,
}

/// CoR at the baseline budget for each prior weight in `lambdas`.
pub fn lambda_sweep(
    model: &MoeModel,
    rki: &[LayerSensitivity],
    cei: &ExpertImpactTable,
    opts: &PlanOptions,
    lambdas: &[f64],
    queries: &[Query],
) -> Result<Vec<LambdaRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let o = PlanOptions {
                lambda,
                ..opts.clone()
            };
            let plan = build_plan(rki, cei, model.config.k_baseline, &o)?;
            let m = evaluate_mode(model, &plan.overrides(), queries, "cor", plan.k_total)?;
            Ok(LambdaRow {
                lambda,
                accuracy: m.accuracy,
                tail_accuracy: m.tail_accuracy,
                head_accuracy: m.head_accuracy,
                nll: m.mean_nll,
                expert_calls: m.expert_calls,
            })
        })
        .collect()
}

pub fn lambda_to_csv(rows: &[LambdaRow]) -> Result<String> {
    to_csv(rows)
}

pub fn lambda_from_csv(text: &str) -> Result<Vec<LambdaRow>> {
    from_csv(text)
}

/// Settings for one end-to-end run of the analysis and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub corpus: FactCorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub p_low: f64,
    pub p_high: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub plan: PlanOptions,
}

impl PipelineConfig {
    /// Four layers, sixteen experts, two active per token.
    pub fn desk_scale(seed: u64) -> Result<Self> {
        let corpus = FactCorpusSpec {
            seed,
            ..FactCorpusSpec::default()
        };
        let vocab_size = generate_corpus(&corpus)?.vocab.len();
        let model = ModelConfig {
            n_layers: 4,
            n_experts: 16,
            k_baseline: 2,
            d_model: 32,
            d_ff: 32,
            vocab_size,
            max_seq_len: 24,
            n_heads: 4,
        };
        let plan = PlanOptions {
            k_max: 4,
            ..PlanOptions::new(model.n_experts)
        };
        Ok(Self {
            corpus,
            plan,
            model,
            train: TrainConfig {
                steps: 800,
                batch_size: 16,
                seq_len: 20,
                learning_rate: 3e-3,
                aux_weight: 0.01,
                seed,
                k_jitter: Some((1, 4)),
                ..TrainConfig::default()
            },
            p_low: 10.0,
            p_high: 90.0,
            delta: DEFAULT_DELTA,
            epsilon: DEFAULT_EPSILON,
        })
    }
}

pub struct PipelineRun {
    pub corpus: Corpus,
    pub model: MoeModel,
    pub loss_log: Vec<StepLoss>,
    pub records: Vec<TokenRecord>,
    pub sets: StratifiedSets,
    pub rki: Vec<LayerSensitivity>,
    pub cei: ExpertImpactTable,
    pub plan: RoutingPlan,
    pub report: EvalReport,
}

impl PipelineRun {
    pub fn plan_for_budget(&self, k_total: usize, opts: &PlanOptions) -> Result<RoutingPlan> {
        build_plan_with_total(&self.rki, &self.cei, k_total, opts)
    }
}

/// Corpus, training, calibration, layer and expert analysis, plan and
/// evaluation for one configuration.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let corpus = generate_corpus(&cfg.corpus)?;
    if corpus.vocab.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary of {} exceeds model vocabulary {}",
            corpus.vocab.len(),
            cfg.model.vocab_size
        )));
    }
    let (model, loss_log) = train(&cfg.model, &cfg.train, &corpus.train)?;
    let records = compute_losses(&model, &corpus.calibration)?;
    let sets = stratify(&records, cfg.p_low, cfg.p_high)?;
    let rki = rki(&model, &sets, cfg.delta, cfg.epsilon)?;
    let cei = compute_cei(&model, &sets)?;
    let plan = build_plan(&rki, &cei, model.config.k_baseline, &cfg.plan)?;
    let report = evaluate(&model, Some(&plan), &corpus.test, cfg.train.seed)?;
    Ok(PipelineRun {
        corpus,
        model,
        loss_log,
        records,
        sets,
        rki,
        cei,
        plan,
        report,
    })
}
