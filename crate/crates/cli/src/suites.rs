//! Self-contained numerical checks behind `gradcheck`, `sinkhorn-bench`
//! and `match-demo`.

use bivlgm::diffnum::{check_gradient, DifferentiableProgram, Tape, Var};
use bivlgm::features::{encode_on_tape, global_project_on_tape, masked_pool_on_tape, EncoderVars};
use bivlgm::gcn::{gcn_on_tape, GcnParams};
use bivlgm::graphs::{build_graph, graph_on_tape, EdgeGeneratorParams, EdgeVars};
use bivlgm::losses::{
    ce_corr_on_tape, contrastive_on_tape, dice_on_tape, l1_corr_on_tape, qc_on_tape,
    GtCorrespondence,
};
use bivlgm::matching::{
    ais, ais_on_tape, positive_normalize_on_tape, sinkhorn_on_tape, sinkhorn_trace, AffinityParams,
    SinkhornConfig,
};
use bivlgm::pipeline::{
    generator_objective, prepare_samples, strategy_by_name, PreparedSample, SegmenterVars,
    TextBank, TrainConfig, TrainState,
};
use bivlgm::prompts::HashEmbedder;
use bivlgm::synthdata::{gen_sample, SeveritySpec};
use bivlgm::{DenseMatrix, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const END_TO_END_TOLERANCE: f64 = 1e-2;

/// One component's worst result over all instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub component: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn binary(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(
        rows,
        cols,
        |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 },
    )
}

fn probe<'t>(out: Var<'t>, weights: &DenseMatrix) -> Var<'t> {
    (out * out.tape().constant(weights.clone())).sum()
}

fn edge_vars<'t>(b: &bivlgm::diffnum::Bindings<'t>, q: &str, k: &str) -> EdgeVars<'t> {
    EdgeVars {
        query: b.get(q),
        key: b.get(k),
    }
}

type Builder = fn(&mut ChaCha8Rng) -> DifferentiableProgram;

fn ce_corr(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    let gt = GtCorrespondence::new(binary(rng, 4, 4)).expect("binary");
    DifferentiableProgram::new(move |_, b| ce_corr_on_tape(b.get("x"), &gt))
        .with_input("x", uniform(rng, 4, 4, 0.05, 0.95))
}

fn l1_corr(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    let gt = GtCorrespondence::new(binary(rng, 4, 4)).expect("binary");
    DifferentiableProgram::new(move |_, b| l1_corr_on_tape(b.get("x"), &gt))
        .with_input("x", uniform(rng, 4, 4, 0.05, 0.95))
}

fn structural(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    DifferentiableProgram::new(|_, b| qc_on_tape(b.get("ea"), b.get("eb"), b.get("x")))
        .with_input("ea", uniform(rng, 4, 4, 0.0, 1.0))
        .with_input("eb", uniform(rng, 4, 4, 0.0, 1.0))
        .with_input("x", uniform(rng, 4, 4, 0.0, 1.0))
}

fn dice(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    let gt = binary(rng, 16, 4);
    DifferentiableProgram::new(move |tape, b| dice_on_tape(b.get("p"), tape.constant(gt.clone())))
        .with_input("p", uniform(rng, 16, 4, 0.05, 0.95))
}

fn contrastive(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    let gt = GtCorrespondence::identity(4);
    DifferentiableProgram::new(move |_, b| contrastive_on_tape(b.get("a"), b.get("b"), &gt, 0.07))
        .with_input("a", uniform(rng, 4, 4, -1.0, 1.0))
        .with_input("b", uniform(rng, 4, 4, -1.0, 1.0))
}

fn edges_and_gcn(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    let w = uniform(rng, 4, 4, -1.0, 1.0);
    DifferentiableProgram::new(move |_, b| {
        let g = graph_on_tape(b.get("x"), &edge_vars(b, "wq", "wk"));
        probe(gcn_on_tape(&g, b.get("w")), &w)
    })
    .with_input("x", uniform(rng, 4, 4, -1.0, 1.0))
    .with_input("wq", uniform(rng, 4, 4, -0.5, 0.5))
    .with_input("wk", uniform(rng, 4, 4, -0.5, 0.5))
    .with_input("w", uniform(rng, 4, 4, -1.0, 1.0))
}

fn sinkhorn(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    let w = uniform(rng, 4, 4, -1.0, 1.0);
    DifferentiableProgram::new(move |_, b| {
        probe(
            sinkhorn_on_tape(positive_normalize_on_tape(b.get("s")), 10),
            &w,
        )
    })
    .with_input("s", uniform(rng, 4, 4, -2.0, 2.0))
}

fn ais_program(rng: &mut ChaCha8Rng, cross_entropy: bool) -> DifferentiableProgram {
    let gt = GtCorrespondence::identity(4);
    DifferentiableProgram::new(move |_, b| {
        let ga = graph_on_tape(b.get("a"), &edge_vars(b, "qa", "ka"));
        let gb = graph_on_tape(b.get("b"), &edge_vars(b, "qb", "kb"));
        let x = ais_on_tape(&ga, &gb, b.get("gcn"), b.get("aff"), 10);
        let corr = if cross_entropy {
            ce_corr_on_tape(x, &gt)
        } else {
            l1_corr_on_tape(x, &gt)
        };
        corr + qc_on_tape(ga.adjacency, gb.adjacency, x)
    })
    .with_input("a", uniform(rng, 4, 4, -1.0, 1.0))
    .with_input("b", uniform(rng, 4, 4, -1.0, 1.0))
    .with_input("qa", uniform(rng, 4, 4, -0.5, 0.5))
    .with_input("ka", uniform(rng, 4, 4, -0.5, 0.5))
    .with_input("qb", uniform(rng, 4, 4, -0.5, 0.5))
    .with_input("kb", uniform(rng, 4, 4, -0.5, 0.5))
    .with_input("gcn", uniform(rng, 4, 4, -0.5, 0.5))
    .with_input("aff", uniform(rng, 4, 4, -0.5, 0.5))
}

fn ais_gt_branch(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    ais_program(rng, true)
}

fn ais_predicted_branch(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    ais_program(rng, false)
}

/// Smallest distance of a hidden pre-activation from the ReLU kink.
fn relu_margin(mask: &DenseMatrix, f: &DenseMatrix, w1: &DenseMatrix, b1: &DenseMatrix) -> f64 {
    let tape = Tape::new();
    let pooled = masked_pool_on_tape(
        tape.constant(mask.clone()),
        tape.constant(f.clone()),
        &[0, 2, 3],
    );
    let pre = pooled.matmul(tape.constant(w1.clone())) + tape.constant(b1.clone());
    pre.value()
        .data()
        .iter()
        .fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

fn features(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    let w = uniform(rng, 1, 4, -1.0, 1.0);
    let (mask, f, w1, b1) = loop {
        let mask = uniform(rng, 16, 4, 0.05, 0.95);
        let f = uniform(rng, 16, 4, -1.0, 1.0);
        let w1 = uniform(rng, 4, 8, -0.5, 0.5);
        let b1 = uniform(rng, 1, 8, -0.1, 0.1);
        if relu_margin(&mask, &f, &w1, &b1) > 1e-2 {
            break (mask, f, w1, b1);
        }
    };
    DifferentiableProgram::new(move |_, b| {
        let pooled = masked_pool_on_tape(b.get("mask"), b.get("f"), &[0, 2, 3]);
        let enc = EncoderVars {
            w1: b.get("w1"),
            b1: b.get("b1"),
            w2: b.get("w2"),
            b2: b.get("b2"),
        };
        probe(
            global_project_on_tape(encode_on_tape(pooled, &enc), b.get("proj")),
            &w,
        )
    })
    .with_input("mask", mask)
    .with_input("f", f)
    .with_input("w1", w1)
    .with_input("b1", b1)
    .with_input("w2", uniform(rng, 8, 4, -0.5, 0.5))
    .with_input("b2", uniform(rng, 1, 4, -0.1, 0.1))
    .with_input("proj", uniform(rng, 4, 4, -1.0, 1.0))
}

/// Segmenter objective of one 16×16 synthetic sample, differentiated with
/// respect to the segmenter parameters.
fn segmenter_end_to_end(rng: &mut ChaCha8Rng) -> DifferentiableProgram {
    let width = 4;
    let cfg = TrainConfig {
        feature_width: width,
        image_size: 16,
        ..Default::default()
    };
    let spec = SeveritySpec::random(rng);
    let sample = gen_sample(rng.random(), 16, 16, &spec, cfg.t1, cfg.t2).expect("valid spec");
    let embedder = HashEmbedder {
        dim: width,
        seed: rng.random(),
    };
    let samples = prepare_samples(vec![sample], &cfg, &embedder, rng).expect("prepared");
    let text = TextBank::new(&embedder).expect("text bank");
    let state = TrainState::init(width, rng);
    let [w1, b1, w2, b2] = state.segmenter.tensors().map(|t| t.clone());
    let alignment = state.alignment;
    let strategy = strategy_by_name(&cfg.losses).expect("default strategy");
    DifferentiableProgram::new(move |tape, b| {
        let seg = SegmenterVars {
            w1: b.get("w1"),
            b1: b.get("b1"),
            w2: b.get("w2"),
            b2: b.get("b2"),
        };
        let align = alignment.bind(tape, false);
        let batch: Vec<&PreparedSample> = samples.iter().collect();
        generator_objective(tape, &seg, &align, &batch, &text, &cfg, strategy.as_ref())
            .expect("objective")
            .total
    })
    .with_input("w1", w1)
    .with_input("b1", b1)
    .with_input("w2", w2)
    .with_input("b2", b2)
}

const COMPONENTS: [(&str, Builder, f64); 11] = [
    ("ce_corr", ce_corr, GRAD_TOLERANCE),
    ("l1_corr", l1_corr, GRAD_TOLERANCE),
    ("qc", structural, GRAD_TOLERANCE),
    ("dice", dice, GRAD_TOLERANCE),
    ("contrastive", contrastive, GRAD_TOLERANCE),
    ("edges+gcn", edges_and_gcn, GRAD_TOLERANCE),
    ("positivity+sinkhorn", sinkhorn, GRAD_TOLERANCE),
    ("ais+ce+qc", ais_gt_branch, GRAD_TOLERANCE),
    ("ais+l1+qc", ais_predicted_branch, GRAD_TOLERANCE),
    ("pool+encoder+projection", features, GRAD_TOLERANCE),
    (
        "segmenter_end_to_end",
        segmenter_end_to_end,
        END_TO_END_TOLERANCE,
    ),
];

/// Checks every input of every component on `instances` seeded instances.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for (k, (component, build, tolerance)) in COMPONENTS.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ i as u64);
            let program = build(&mut rng);
            let names: Vec<String> = program.input_names().map(String::from).collect();
            for name in names {
                worst = worst.max(check_gradient(&program, &name, GRAD_STEP)?.max_relative_error);
            }
        }
        rows.push(GradRow {
            component,
            instances,
            max_relative_error: worst,
            tolerance: *tolerance,
        });
    }
    Ok(rows)
}

/// One normalized random matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornTrial {
    pub size: usize,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_deviation: f64,
}

/// Tolerance-driven Sinkhorn on `trials` random positive matrices of sizes
/// 2 to 16.
pub fn sinkhorn_bench(seed: u64, trials: usize) -> Result<Vec<SinkhornTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = SinkhornConfig {
        max_iterations: 10_000,
        tolerance: 1e-9,
    };
    (0..trials)
        .map(|_| {
            let size = rng.random_range(2..=16);
            let k = DenseMatrix::from_fn(size, size, |_, _| rng.random_range(-2.0f64..2.0).exp());
            let out = sinkhorn_trace(&k, &config)?;
            Ok(SinkhornTrial {
                size,
                iterations: out.iterations,
                converged: out.converged,
                marginal_deviation: out.matrix.marginal_deviation(),
            })
        })
        .collect()
}

/// Outcome of matching a graph against a permuted, perturbed copy.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTrial {
    pub correct: usize,
    pub nodes: usize,
}

/// Matches random graphs against noisy permuted copies through edges, GCN,
/// affinity and Sinkhorn, scoring row-argmax against the true permutation.
pub fn match_demo(
    seed: u64,
    trials: usize,
    nodes: usize,
    width: usize,
    noise: f64,
) -> Result<Vec<MatchTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = SinkhornConfig::forward();
    (0..trials)
        .map(|_| {
            let edges = EdgeGeneratorParams::init(width, width, &mut rng);
            let gcn = GcnParams::init(width, &mut rng);
            let affinity = AffinityParams::identity(width);
            let a = uniform(&mut rng, nodes, width, -1.0, 1.0);
            let mut perm: Vec<usize> = (0..nodes).collect();
            perm.shuffle(&mut rng);
            // row i of the copy is node perm[i] of the original
            let b = DenseMatrix::from_fn(nodes, width, |r, c| {
                a.get(perm[r], c) + noise * rng.random_range(-1.0..1.0)
            });
            let x = ais(
                &build_graph(&a, &edges)?,
                &build_graph(&b, &edges)?,
                &gcn,
                &affinity,
                &config,
            )?;
            let correct = x
                .values()
                .row_argmax()
                .into_iter()
                .enumerate()
                .filter(|&(i, j)| perm[j] == i)
                .count();
            Ok(MatchTrial { correct, nodes })
        })
        .collect()
}
