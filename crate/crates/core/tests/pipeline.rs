use bivlgm::diffnum::{check_gradient, DifferentiableProgram};
use bivlgm::losses::LossWeights;
use bivlgm::pipeline::{
    encoder_objective, encoder_step, generator_objective, prepare_samples, segmenter_step,
    strategy_by_name, train, PreparedSample, SegmenterVars, TextBank, TrainConfig, TrainState,
};
use bivlgm::prompts::HashEmbedder;
use bivlgm::synthdata::{gen_sample, SeveritySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WIDTH: usize = 4;

fn small_config() -> TrainConfig {
    TrainConfig {
        feature_width: WIDTH,
        image_size: 16,
        train_size: 4,
        test_size: 2,
        batch_size: 2,
        budget: 6,
        ..Default::default()
    }
}

fn toy(
    seed: u64,
    specs: &[&str],
    cfg: &TrainConfig,
) -> (Vec<PreparedSample>, TextBank, TrainState) {
    let samples = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spec: SeveritySpec = s.parse().unwrap();
            gen_sample(seed * 31 + i as u64, 16, 16, &spec, cfg.t1, cfg.t2).unwrap()
        })
        .collect();
    let embedder = HashEmbedder { dim: WIDTH, seed };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prepared = prepare_samples(samples, cfg, &embedder, &mut rng).unwrap();
    let text = TextBank::new(&embedder).unwrap();
    let state = TrainState::init(WIDTH, &mut rng);
    (prepared, text, state)
}

#[test]
fn steps_respect_freeze_contracts() {
    let cfg = small_config();
    let strategy = strategy_by_name("full").unwrap();
    let (samples, text, mut state) = toy(1, &["EX:high,HE:mid", "SE:low,MA:mid"], &cfg);
    let batch: Vec<&PreparedSample> = samples.iter().collect();

    let before = state.clone();
    encoder_step(&mut state, &batch, &text, &cfg, strategy.as_ref()).unwrap();
    assert_eq!(state.segmenter, before.segmenter);
    assert_ne!(state.alignment, before.alignment);

    let before = state.clone();
    segmenter_step(&mut state, &batch, &text, &cfg, strategy.as_ref()).unwrap();
    assert_eq!(state.alignment, before.alignment);
    assert_ne!(state.segmenter, before.segmenter);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = TrainConfig {
        lr_encoder: 0.0,
        lr_segmenter: 0.0,
        ..small_config()
    };
    let strategy = strategy_by_name("full").unwrap();
    let (samples, text, mut state) = toy(2, &["EX:mid", "HE:high,SE:low"], &cfg);
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let before = state.clone();
    let e = encoder_step(&mut state, &batch, &text, &cfg, strategy.as_ref()).unwrap();
    let g = segmenter_step(&mut state, &batch, &text, &cfg, strategy.as_ref()).unwrap();
    assert!(e.total.is_finite() && g.total.is_finite());
    assert_eq!(state, before);
}

#[test]
fn zero_alignment_weights_reduce_to_dice() {
    let weights = LossWeights {
        lambda_d: 0.0,
        lambda_e: 0.0,
        ..Default::default()
    };
    let full = TrainConfig {
        weights,
        ..small_config()
    };
    let dice = TrainConfig {
        losses: "dice".into(),
        ..small_config()
    };
    let (samples, text, state) = toy(3, &["EX:high", "MA:low,HE:low"], &full);
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let mut a = state.clone();
    let mut b = state;
    for _ in 0..3 {
        segmenter_step(
            &mut a,
            &batch,
            &text,
            &full,
            strategy_by_name("full").unwrap().as_ref(),
        )
        .unwrap();
        segmenter_step(
            &mut b,
            &batch,
            &text,
            &dice,
            strategy_by_name("dice").unwrap().as_ref(),
        )
        .unwrap();
    }
    assert_eq!(a.segmenter, b.segmenter);
}

#[test]
fn encoder_training_reduces_its_loss() {
    let cfg = small_config();
    let strategy = strategy_by_name("full").unwrap();
    let (samples, text, mut state) = toy(
        4,
        &["EX:high,HE:mid,SE:low", "HE:low,MA:high", "EX:low,SE:mid"],
        &cfg,
    );
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let first = encoder_step(&mut state, &batch, &text, &cfg, strategy.as_ref())
        .unwrap()
        .total;
    let mut last = first;
    for _ in 0..19 {
        last = encoder_step(&mut state, &batch, &text, &cfg, strategy.as_ref())
            .unwrap()
            .total;
    }
    assert!(last < first, "L_E {first} -> {last}");
}

#[test]
fn alternating_rounds_reduce_segmenter_loss() {
    let cfg = small_config();
    let strategy = strategy_by_name("full").unwrap();
    let (samples, text, mut state) = toy(5, &["EX:high,SE:mid", "HE:high,MA:mid"], &cfg);
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..50 {
        encoder_step(&mut state, &batch, &text, &cfg, strategy.as_ref()).unwrap();
        last = segmenter_step(&mut state, &batch, &text, &cfg, strategy.as_ref())
            .unwrap()
            .total;
        first.get_or_insert(last);
    }
    assert!(last < first.unwrap(), "L_G {first:?} -> {last}");
}

#[test]
fn training_is_deterministic_and_finite() {
    let cfg = small_config();
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.log.len(), cfg.budget);
    for round in &a.log {
        for v in round
            .encoder
            .iter()
            .map(|e| e.total)
            .chain(round.segmenter.iter().map(|g| g.total))
        {
            assert!(v.is_finite());
        }
    }
    // warm-up rounds carry encoder steps only
    assert!(a.log[0].segmenter.is_none() && a.log[0].encoder.is_some());
    assert!(a.log.last().unwrap().segmenter.is_some());
}

#[test]
fn zero_budget_keeps_initial_metrics_only() {
    let m = train(&TrainConfig {
        budget: 0,
        ..small_config()
    })
    .unwrap();
    assert!(m.log.is_empty());
    assert!(m.final_metrics.is_none());
    assert_eq!(m.status, "complete");
}

#[test]
fn every_strategy_completes() {
    for losses in ["dice", "full", "contrastive"] {
        let m = train(&TrainConfig {
            losses: losses.into(),
            ..small_config()
        })
        .unwrap();
        assert!(m.final_metrics.is_some(), "{losses}");
    }
}

fn segmenter_program(seed: u64, losses: &str) -> DifferentiableProgram {
    let cfg = TrainConfig {
        losses: losses.into(),
        ..small_config()
    };
    let (samples, text, state) = toy(seed, &["EX:high,HE:mid,SE:low"], &cfg);
    let strategy = strategy_by_name(losses).unwrap();
    let align = state.alignment.clone();
    let [w1, b1, w2, b2] = state.segmenter.tensors().map(|t| t.clone());
    DifferentiableProgram::new(move |tape, b| {
        let seg = SegmenterVars {
            w1: b.get("w1"),
            b1: b.get("b1"),
            w2: b.get("w2"),
            b2: b.get("b2"),
        };
        let align = align.bind(tape, false);
        let batch: Vec<&PreparedSample> = samples.iter().collect();
        generator_objective(tape, &seg, &align, &batch, &text, &cfg, strategy.as_ref())
            .unwrap()
            .total
    })
    .with_input("w1", w1)
    .with_input("b1", b1)
    .with_input("w2", w2)
    .with_input("b2", b2)
}

#[test]
fn end_to_end_segmenter_gradient() {
    for seed in 0..5 {
        for losses in ["full", "contrastive"] {
            let program = segmenter_program(seed, losses);
            for name in ["w1", "b1", "w2", "b2"] {
                let report = check_gradient(&program, name, 1e-4).unwrap();
                assert!(
                    report.passes(1e-2),
                    "{losses} seed {seed} {name}: {}",
                    report.max_relative_error
                );
            }
        }
    }
}

#[test]
fn encoder_objective_gradient() {
    let cfg = small_config();
    let (samples, text, state) = toy(9, &["EX:high,HE:mid", "SE:low,MA:high,HE:low"], &cfg);
    let strategy = strategy_by_name("full").unwrap();
    let segmenter = state.segmenter.clone();
    let align = state.alignment.clone();
    let count = align.tensors().len();
    let mut program = DifferentiableProgram::new(move |tape, b| {
        let vars = align.bind_each(|i, _| b.get(&format!("p{i:02}")));
        let batch: Vec<&PreparedSample> = samples.iter().collect();
        encoder_objective(
            tape,
            &segmenter,
            &vars,
            &batch,
            &text,
            &cfg,
            strategy.as_ref(),
        )
        .unwrap()
        .total
        .unwrap()
    });
    for (i, t) in state.alignment.tensors().into_iter().enumerate() {
        program = program.with_input(format!("p{i:02}"), t.clone());
    }
    for i in 0..count {
        let report = check_gradient(&program, &format!("p{i:02}"), 1e-4).unwrap();
        assert!(
            report.passes(1e-3),
            "tensor {i}: {}",
            report.max_relative_error
        );
    }
}
