//! One function per subcommand. Each reads its inputs from files, writes its
//! outputs and a run manifest into the output directory, and returns a
//! human summary for standard output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use corlab::calibration::{compute_losses, stratify, CalibrationReport};
use corlab::eval::{
    dormant_zone, evaluate, export_scatter, generate_corpus, lambda_sweep, lambda_to_csv,
    pareto_sweep, pareto_to_csv, scatter_rows, Corpus, PipelineConfig,
};
use corlab::expert_analysis::{compute_cei, ExpertImpactTable};
use corlab::layer_analysis::{
    rki, sensitivities_from_json, sensitivities_to_json, verify_cascade, SyntheticCascadeSpec,
};
use corlab::model::{load_checkpoint, save_checkpoint};
use corlab::router::{build_plan, build_plan_with_total, lambda_warning, FuseScope, PlanOptions, RoutingPlan};
use corlab::trainer::{loss_log_jsonl, train, Optimizer};
use corlab::{Error, MoeModel, Result};
use serde::Serialize;

use crate::settings::Settings;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub version: String,
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(s: &Settings) -> Result<Self> {
        let dir = s.out_dir();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(self, s: &Settings, subcommand: &str, seed: Option<u64>, inputs: &[&str]) -> Result<()> {
        let manifest = RunManifest {
            subcommand: subcommand.to_string(),
            config: s.config_path.as_ref().map(|p| p.display().to_string()),
            seed,
            inputs: s.inputs(inputs),
            outputs: self.written,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(self.dir.join(format!("{subcommand}.manifest.json")), text)?;
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn seed(s: &Settings) -> Result<u64> {
    s.get_or("seed", 0)
}

fn defaults(s: &Settings) -> Result<PipelineConfig> {
    PipelineConfig::desk_scale(seed(s)?)
}

fn load_corpus(s: &Settings) -> Result<Corpus> {
    Corpus::from_json(&read(&s.path("corpus")?)?)
}

fn load_model(s: &Settings) -> Result<MoeModel> {
    load_checkpoint(s.path("model")?)
}

fn load_calibration(s: &Settings) -> Result<CalibrationReport> {
    CalibrationReport::from_json(&read(&s.path("calibration")?)?)
}

fn load_rki(s: &Settings) -> Result<Vec<corlab::layer_analysis::LayerSensitivity>> {
    sensitivities_from_json(&read(&s.path("rki")?)?)
}

fn load_cei(s: &Settings) -> Result<ExpertImpactTable> {
    ExpertImpactTable::from_json(&read(&s.path("cei")?)?)
}

fn plan_options(s: &Settings, n_experts: usize) -> Result<PlanOptions> {
    let base = defaults(s)?.plan;
    let fuse = match s.raw("fuse").unwrap_or("all") {
        "all" => FuseScope::All,
        "knowledge_layers" => FuseScope::KnowledgeLayers,
        other => return Err(Error::Config(format!("unknown fuse scope `{other}`"))),
    };
    Ok(PlanOptions {
        lambda: s.get_or("lambda", base.lambda)?,
        k_min: s.get_or("k_min", base.k_min)?,
        k_max: s.get_or("k_max", base.k_max.min(n_experts))?,
        fuse,
    })
}

pub fn gen_corpus(s: &Settings) -> Result<String> {
    let mut spec = defaults(s)?.corpus;
    spec.n_head_facts = s.get_or("n_head_facts", spec.n_head_facts)?;
    spec.n_tail_facts = s.get_or("n_tail_facts", spec.n_tail_facts)?;
    spec.head_rep = s.get_or("head_rep", spec.head_rep)?;
    spec.tail_rep = s.get_or("tail_rep", spec.tail_rep)?;
    spec.n_relations = s.get_or("n_relations", spec.n_relations)?;
    spec.n_filler = s.get_or("n_filler", spec.n_filler)?;
    spec.calib_subjects = s.get_or("calib_subjects", spec.calib_subjects)?;
    spec.calib_filler = s.get_or("calib_filler", spec.calib_filler)?;
    let corpus = generate_corpus(&spec)?;
    let mut out = Outputs::new(s)?;
    out.write("corpus.json", corpus.to_json()?)?;
    out.finish(s, "gen-corpus", Some(spec.seed), &[])?;
    Ok(format!(
        "corpus: {} words, {} facts, {} training docs, {} calibration docs, {} queries",
        corpus.vocab.len(),
        corpus.facts.len(),
        corpus.train.len(),
        corpus.calibration.len(),
        corpus.test.len()
    ))
}

pub fn train_cmd(s: &Settings) -> Result<String> {
    let corpus = load_corpus(s)?;
    let base = defaults(s)?;
    let mut mc = base.model;
    mc.vocab_size = corpus.vocab.len();
    mc.n_layers = s.get_or("n_layers", mc.n_layers)?;
    mc.n_experts = s.get_or("n_experts", mc.n_experts)?;
    mc.k_baseline = s.get_or("k_baseline", mc.k_baseline)?;
    mc.d_model = s.get_or("d_model", mc.d_model)?;
    mc.d_ff = s.get_or("d_ff", mc.d_ff)?;
    mc.n_heads = s.get_or("n_heads", mc.n_heads)?;
    mc.max_seq_len = s.get_or("max_seq_len", mc.max_seq_len)?;
    let mut tc = base.train;
    tc.steps = s.get_or("steps", tc.steps)?;
    tc.batch_size = s.get_or("batch_size", tc.batch_size)?;
    tc.seq_len = s.get_or("seq_len", tc.seq_len)?;
    tc.learning_rate = s.get_or("learning_rate", tc.learning_rate)?;
    tc.aux_weight = s.get_or("aux_weight", tc.aux_weight)?;
    tc.optimizer = match s.raw("optimizer") {
        None => tc.optimizer,
        Some("adam") => Optimizer::Adam,
        Some("sgd") => Optimizer::Sgd,
        Some(other) => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
    };
    if let Some(j) = s.raw("k_jitter") {
        tc.k_jitter = if j == "none" {
            None
        } else {
            match s.list::<usize>("k_jitter")?.as_deref() {
                Some([lo, hi]) => Some((*lo, *hi)),
                _ => return Err(Error::Config(format!("k_jitter must be `lo,hi` or `none`, got `{j}`"))),
            }
        };
    }
    let (model, log) = train(&mc, &tc, &corpus.train)?;
    let mut out = Outputs::new(s)?;
    save_checkpoint(&model, out.path("model.ckpt"))?;
    out.write("loss_log.jsonl", loss_log_jsonl(&log)?)?;
    out.finish(s, "train", Some(tc.seed), &["corpus"])?;
    let first = log.first().map_or(f64::NAN, |l| l.lm_loss);
    let last = log.last().map_or(f64::NAN, |l| l.lm_loss);
    Ok(format!(
        "trained {} parameters for {} steps: lm loss {first:.3} -> {last:.3}",
        model.param_count(),
        tc.steps
    ))
}

pub fn calibrate(s: &Settings) -> Result<String> {
    let model = load_model(s)?;
    let corpus = load_corpus(s)?;
    let base = defaults(s)?;
    let p_low = s.get_or("p_low", base.p_low)?;
    let p_high = s.get_or("p_high", base.p_high)?;
    let records = compute_losses(&model, &corpus.calibration)?;
    let sets = stratify(&records, p_low, p_high)?;
    let report = CalibrationReport::new(&records, sets);
    let mut out = Outputs::new(s)?;
    out.write("calibration.json", report.to_json()?)?;
    out.finish(s, "calibrate", None, &["model", "corpus"])?;
    Ok(format!(
        "{} tokens, mean loss {:.3}; {} hard (loss > {:.3}), {} easy (loss < {:.3})",
        report.n_records,
        report.mean_loss,
        report.hard.len(),
        report.thresholds.tau_high,
        report.easy.len(),
        report.thresholds.tau_low
    ))
}

pub fn analyze_layers(s: &Settings) -> Result<String> {
    let model = load_model(s)?;
    let calib = load_calibration(s)?;
    let base = defaults(s)?;
    let delta = s.get_or("delta", base.delta)?;
    let epsilon = s.get_or("epsilon", base.epsilon)?;
    let rows = rki(&model, &calib.sets(), delta, epsilon)?;
    let mut out = Outputs::new(s)?;
    out.write("rki.json", sensitivities_to_json(&rows)?)?;
    out.finish(s, "analyze-layers", None, &["model", "calibration"])?;
    let mut summary = String::from("layer  S_hard      S_easy      R");
    for r in &rows {
        write!(summary, "\n{:5}  {:+.3e}  {:+.3e}  {:.3}", r.layer, r.s_hard, r.s_easy, r.r_l).ok();
    }
    Ok(summary)
}

pub fn analyze_experts(s: &Settings) -> Result<String> {
    let model = load_model(s)?;
    let calib = load_calibration(s)?;
    let table = compute_cei(&model, &calib.sets())?;
    let mut out = Outputs::new(s)?;
    out.write("cei.json", table.to_json()?)?;
    out.finish(s, "analyze-experts", None, &["model", "calibration"])?;
    let defined = table.cells.iter().filter(|c| c.defined).count();
    let skipped: usize = table.cells.iter().map(|c| c.n_skipped).sum();
    Ok(format!(
        "{} of {} (layer, expert) cells active on hard tokens; {skipped} degenerate ablations skipped",
        defined,
        table.cells.len()
    ))
}

pub fn build_plan_cmd(s: &Settings) -> Result<String> {
    let rki = load_rki(s)?;
    let cei = load_cei(s)?;
    let opts = plan_options(s, cei.n_experts)?;
    let k_baseline = match s.get("k_baseline")? {
        Some(k) => k,
        None => match s.raw("model") {
            Some(_) => load_model(s)?.config.k_baseline,
            None => defaults(s)?.model.k_baseline,
        },
    };
    if let Some(w) = lambda_warning(opts.lambda) {
        eprintln!("warning: {w}");
    }
    let plan = build_plan(&rki, &cei, k_baseline, &opts)?;
    let mut out = Outputs::new(s)?;
    out.write("plan.json", plan.to_json()?)?;
    out.finish(s, "build-plan", None, &["rki", "cei", "model"])?;
    Ok(format!(
        "plan: K_total {} split as {:?}, lambda {}",
        plan.k_total,
        plan.budgets(),
        plan.lambda
    ))
}

pub fn eval_cmd(s: &Settings) -> Result<String> {
    let model = load_model(s)?;
    let corpus = load_corpus(s)?;
    let plan = match s.raw("plan") {
        Some(p) => Some(RoutingPlan::from_json(&read(Path::new(p))?)?),
        None => None,
    };
    let seed = seed(s)?;
    let report = evaluate(&model, plan.as_ref(), &corpus.test, seed)?;
    let mut out = Outputs::new(s)?;
    out.write("eval.json", report.to_json()?)?;
    out.finish(s, "eval", Some(seed), &["model", "corpus", "plan"])?;
    let mut summary = format!("metric: {}\nmode        K    acc    tail   head   nll", report.metric);
    let f = |v: Option<f64>| v.map_or("  -  ".to_string(), |v| format!("{v:.3}"));
    for m in &report.modes {
        write!(
            summary,
            "\n{:10} {:3}  {:.3}  {}  {}  {:.3}",
            m.mode,
            m.k_total,
            m.accuracy,
            f(m.tail_accuracy),
            f(m.head_accuracy),
            m.mean_nll
        )
        .ok();
    }
    Ok(summary)
}

pub fn pareto(s: &Settings) -> Result<String> {
    let model = load_model(s)?;
    let corpus = load_corpus(s)?;
    let rki = load_rki(s)?;
    let cei = load_cei(s)?;
    let opts = plan_options(s, model.config.n_experts)?;
    let l = model.config.n_layers;
    let budgets = match s.list::<usize>("budgets")? {
        Some(b) => b,
        None => (opts.k_min.max(1)..=opts.k_max).map(|k| k * l).collect(),
    };
    let make = |k: usize| build_plan_with_total(&rki, &cei, k, &opts);
    let rows = pareto_sweep(&model, &budgets, &make, &corpus.test)?;
    let lambdas = s.list::<f64>("lambdas")?.unwrap_or_else(|| vec![0.05, 0.1, 0.2, 0.5]);
    let sweep = lambda_sweep(&model, &rki, &cei, &opts, &lambdas, &corpus.test)?;
    let mut out = Outputs::new(s)?;
    out.write("pareto.csv", pareto_to_csv(&rows)?)?;
    out.write("lambda_sweep.csv", lambda_to_csv(&sweep)?)?;
    out.finish(s, "pareto", None, &["model", "corpus", "rki", "cei"])?;
    let mut summary = String::from("K_total  static acc/nll   cor acc/nll");
    for pair in rows.chunks(2) {
        write!(
            summary,
            "\n{:7}  {:.3} / {:.3}    {:.3} / {:.3}",
            pair[0].k_total, pair[0].accuracy, pair[0].nll, pair[1].accuracy, pair[1].nll
        )
        .ok();
    }
    Ok(summary)
}

pub fn scatter(s: &Settings) -> Result<String> {
    let cei = load_cei(s)?;
    let mut out = Outputs::new(s)?;
    out.write("scatter.csv", export_scatter(&cei)?)?;
    out.finish(s, "export-scatter", None, &["cei"])?;
    let dormant = dormant_zone(&scatter_rows(&cei));
    Ok(format!(
        "{} rows; {} experts with below-median gate and top-quartile impact",
        cei.cells.len(),
        dormant.len()
    ))
}

pub fn cascade(s: &Settings) -> Result<String> {
    let depth = s.get_or("depth", 6)?;
    let mut spec = SyntheticCascadeSpec::constant(depth, s.get_or("gain", 0.3)?, 1.0);
    if let Some(k) = s.list::<f64>("kappa")? {
        spec.kappa = match k.as_slice() {
            [one] => vec![*one; depth],
            _ => k,
        };
    }
    spec.floor = s.get_or("floor", spec.floor)?;
    spec.probes = s.get_or("probes", spec.probes)?;
    spec.dim = s.get_or("dim", spec.dim)?;
    spec.delta = s.get_or("delta", spec.delta)?;
    spec.epsilon = s.get_or("epsilon", spec.epsilon)?;
    spec.seed = seed(s)?;
    if let Some(peak) = s.get::<usize>("peak")? {
        if peak >= spec.kappa.len() {
            return Err(Error::Config(format!("peak {peak} outside {} layers", spec.kappa.len())));
        }
        spec.kappa = vec![0.2; spec.kappa.len()];
        spec.kappa[peak] = 2.0;
    }
    let report = verify_cascade(&spec)?;
    let mut out = Outputs::new(s)?;
    out.write("cascade.json", serde_json::to_string_pretty(&report)?)?;
    out.finish(s, "verify-cascade", Some(spec.seed), &[])?;
    Ok(format!(
        "raw hard sensitivity grows with distance: {}; R spread {:.4}; argmax R at layer {}",
        report.raw_grows_with_distance, report.r_spread, report.argmax_r
    ))
}
