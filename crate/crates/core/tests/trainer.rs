use corlab::model::BoundParams;
use corlab::numerics::gradcheck::check_gradients;
use corlab::numerics::Tape;
use corlab::trainer::{balance_term, batch_loss, loss_log_jsonl, train, Optimizer, StepLoss, TrainConfig};
use corlab::{ModelConfig, MoeModel, Tensor};
use rand::{Rng, SeedableRng};

fn model_cfg(d: usize, n: usize, layers: usize, k: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_experts: n,
        k_baseline: k,
        d_model: d,
        d_ff: 2 * d,
        vocab_size: vocab,
        max_seq_len: 12,
        n_heads: 2,
    }
}

fn sentences(n: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..rng.gen_range(5..9)).map(|_| rng.gen_range(1..vocab)).collect())
        .collect()
}

#[test]
fn uniform_routing_gives_aux_equal_to_weight() {
    let mut m: MoeModel = MoeModel::init(model_cfg(8, 4, 2, 2, 10), 0).unwrap();
    for l in &mut m.layers {
        l.router = Tensor::zeros(l.router.shape().to_vec());
    }
    let mut tape = Tape::inference();
    let bound = m.bind(&mut tape);
    let inputs = [1, 2, 3, 4, 5, 6];
    let targets = [2, 3, 4, 5, 6, 7];
    let loss = batch_loss(&m, &mut tape, &bound, &inputs, &targets, 3, 0.01).unwrap();
    assert!((loss.aux - 0.01).abs() < 1e-8, "{}", loss.aux);
}

#[test]
fn balance_term_is_smallest_when_uniform() {
    assert!((balance_term(&[5, 5, 5, 5], &[0.25; 4]) - 1.0).abs() < 1e-12);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut prev = 1.0;
    for skew in [0.3, 0.5, 0.7, 0.9] {
        let rest = (1.0 - skew) / 3.0;
        let probs = [skew, rest, rest, rest];
        let counts = [(skew * 1000.0) as usize, (rest * 1000.0) as usize, (rest * 1000.0) as usize, (rest * 1000.0) as usize];
        let b = balance_term(&counts, &probs);
        assert!(b > prev, "{b} <= {prev}");
        prev = b;
    }
    for _ in 0..200 {
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let counts: Vec<usize> = p.iter().map(|v| (v * 1e6) as usize).collect();
        assert!(balance_term(&counts, &p) >= 1.0 - 1e-4);
    }
}

#[test]
fn loss_decreases_on_a_memorizable_corpus() {
    let docs = sentences(50, 20, 3);
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        seq_len: 8,
        learning_rate: 3e-3,
        aux_weight: 0.01,
        seed: 4,
        optimizer: Optimizer::Adam,
        k_jitter: None,
    };
    let (_, log) = train(&model_cfg(16, 4, 2, 2, 20), &cfg, &docs).unwrap();
    let head: f64 = log[..10].iter().map(|s| s.lm_loss).sum::<f64>() / 10.0;
    let tail: f64 = log[190..].iter().map(|s| s.lm_loss).sum::<f64>() / 10.0;
    assert!(tail < head, "{tail} >= {head}");
    assert!(log.iter().all(|s| s.lm_loss.is_finite() && s.aux_loss.is_finite()));
}

#[test]
fn sgd_also_reduces_loss() {
    let docs = sentences(50, 20, 3);
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        seq_len: 8,
        learning_rate: 0.5,
        aux_weight: 0.0,
        seed: 4,
        optimizer: Optimizer::Sgd,
        k_jitter: None,
    };
    let (_, log) = train(&model_cfg(16, 4, 2, 2, 20), &cfg, &docs).unwrap();
    assert!(log[199].lm_loss < log[0].lm_loss);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        n_layers: 1,
        n_experts: 2,
        k_baseline: 1,
        d_model: 4,
        d_ff: 4,
        vocab_size: 6,
        max_seq_len: 4,
        n_heads: 2,
    };
    for seed in 0..3 {
        let m = MoeModel::<f32>::init(cfg.clone(), seed).unwrap().cast::<f64>();
        let inputs: Vec<Tensor<f64>> = m.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let tokens = [1u32, 4, 2, 5, 0, 3];
        let targets = [4u32, 2, 5, 0, 3, 1];
        let check = check_gradients(&inputs, 1e-6, |tape, vars| {
            let bound = BoundParams::from_ordered(&m.config, vars)?;
            Ok(batch_loss(&m, tape, &bound, &tokens, &targets, 3, 0.5)?.total)
        })
        .unwrap();
        assert!(check.max_rel_err() < 1e-3, "seed {seed}: {:?}", check.rel_err);
    }
}

#[test]
fn training_is_deterministic_and_zero_steps_is_init() {
    let docs = sentences(20, 15, 8);
    let mc = model_cfg(8, 4, 2, 2, 15);
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 4,
        seq_len: 6,
        seed: 9,
        ..TrainConfig::default()
    };
    let (a, la) = train(&mc, &cfg, &docs).unwrap();
    let (b, lb) = train(&mc, &cfg, &docs).unwrap();
    assert_eq!(corlab::model::write_checkpoint(&a).unwrap(), corlab::model::write_checkpoint(&b).unwrap());
    assert_eq!(la, lb);

    let zero = TrainConfig { steps: 0, ..cfg };
    let (z, log) = train(&mc, &zero, &docs).unwrap();
    assert!(log.is_empty());
    let init: MoeModel = MoeModel::init(mc, 9).unwrap();
    assert_eq!(corlab::model::write_checkpoint(&z).unwrap(), corlab::model::write_checkpoint(&init).unwrap());
}

#[test]
fn empty_corpus_is_an_input_error() {
    let r = train(&model_cfg(8, 4, 1, 1, 10), &TrainConfig::default(), &[vec![], vec![]]);
    assert!(matches!(r, Err(corlab::Error::Input(_))));
}

#[test]
fn loss_log_lines_parse_back() {
    let log = vec![
        StepLoss { step: 0, lm_loss: 2.5, aux_loss: 0.0101 },
        StepLoss { step: 1, lm_loss: 2.25, aux_loss: 0.01 },
    ];
    let text = loss_log_jsonl(&log).unwrap();
    let back: Vec<StepLoss> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, log);
    assert_eq!(loss_log_jsonl(&back).unwrap(), text);
}

#[test]
fn balancing_loss_lowers_peak_expert_load() {
    use corlab::eval::{generate_corpus, FactCorpusSpec};
    use corlab::trainer::max_expert_load;
    let corpus = generate_corpus(&FactCorpusSpec {
        n_head_facts: 16,
        n_tail_facts: 40,
        head_rep: 10,
        n_filler: 60,
        ..FactCorpusSpec::default()
    })
    .unwrap();
    let mc = ModelConfig {
        max_seq_len: 24,
        ..model_cfg(16, 8, 2, 2, corpus.vocab.len())
    };
    let load = |aux_weight: f64| {
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 8,
            seq_len: 20,
            aux_weight,
            seed: 3,
            ..TrainConfig::default()
        };
        let (m, _) = train(&mc, &cfg, &corpus.train).unwrap();
        max_expert_load(&m, &corpus.calibration).unwrap()
    };
    let (free, balanced) = (load(0.0), load(0.01));
    eprintln!("max load: alpha 0 {free:.3}, alpha 0.01 {balanced:.3}");
    assert!(balanced < free, "alpha 0.01 load {balanced} vs alpha 0 load {free}");
}
