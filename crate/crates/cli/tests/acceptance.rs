//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bivlgm::graphs::{generate_edges, EdgeGeneratorParams};
use bivlgm::losses::{ce_corr, dice_loss, qc, GtCorrespondence};
use bivlgm::matching::{sinkhorn, CorrespondenceMatrix, SinkhornConfig};
use bivlgm::pipeline::TrainConfig;
use bivlgm::prompts::{
    render_severity, severity_level, severity_prompt, AdjectiveGroup, GroupChoice, LesionClass,
    SeverityLevel, SeverityProfile, DEFAULT_T1, DEFAULT_T2,
};
use bivlgm::synthdata::{aupr, f_score, iou, Volume};
use bivlgm::DenseMatrix;
use bivlgm_cli::compare::{compare, RunSummary};
use bivlgm_cli::suites::{gradient_suite, match_demo, sinkhorn_bench};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, id: &str, name: &str, ok: bool, detail: String) {
        println!(
            "[{}] {id}. {name}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            self.failures += 1;
        }
    }

    fn info(&self, id: &str, detail: String) {
        println!("[INFO] {id}. {detail}");
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn m<const N: usize>(rows: &[[f64; N]]) -> DenseMatrix {
    DenseMatrix::from_rows(rows).unwrap()
}

/// Plain alternating normalization, run far past convergence.
fn brute_sinkhorn(k: &DenseMatrix, sweeps: usize) -> DenseMatrix {
    let n = k.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|r| k.row(r).to_vec()).collect();
    for _ in 0..sweeps {
        for row in a.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        for c in 0..n {
            let s: f64 = a.iter().map(|row| row[c]).sum();
            a.iter_mut().for_each(|row| row[c] /= s);
        }
    }
    DenseMatrix::from_fn(n, n, |r, c| a[r][c])
}

fn sinkhorn_correctness(report: &mut Report) {
    let start = Instant::now();
    let trials = sinkhorn_bench(0, 100).unwrap();
    let small = m(&[[2.0, 1.0], [1.0, 1.0]]);
    let limit = sinkhorn(&small, &SinkhornConfig::forward()).unwrap();
    let elapsed = start.elapsed();
    let worst = trials
        .iter()
        .map(|t| t.marginal_deviation)
        .fold(0.0, f64::max);
    let sizes_ok = trials.iter().all(|t| (2..=16).contains(&t.size));
    let brute_gap = limit.values().max_abs_diff(&brute_sinkhorn(&small, 10_000));
    report.check(
        "1",
        "Sinkhorn correctness",
        trials.len() == 100 && sizes_ok && worst <= 1e-6 && brute_gap <= 1e-6 && elapsed < Duration::from_secs(1),
        format!(
            "100 matrices max marginal deviation {worst:.2e} (tol 1e-6); 2x2 gap to brute-force limit {brute_gap:.2e} (tol 1e-6); {:.3}s (limit 1s)",
            secs(elapsed)
        ),
    );
}

fn permutation_recovery(report: &mut Report) {
    let start = Instant::now();
    let trials = match_demo(0, 100, 8, 16, 0.01).unwrap();
    let elapsed = start.elapsed();
    let correct: usize = trials.iter().map(|t| t.correct).sum();
    let rate = correct as f64 / 800.0;
    report.check(
        "2",
        "Permutation recovery",
        rate >= 0.95 && elapsed < Duration::from_secs(10),
        format!(
            "N=8 D=16 noise 1%: {correct}/800 = {:.2}% recovered (need 95%); {:.3}s (limit 10s)",
            100.0 * rate,
            secs(elapsed)
        ),
    );
}

fn loss_identities(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_qc = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..8);
        let a = DenseMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        let params = EdgeGeneratorParams::init(4, 4, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // node i of the first graph is node perm[i] of the second
        let p = DenseMatrix::permutation(&perm);
        let b = p.transpose().matmul(&a).unwrap();
        let ea = generate_edges(&a, &params).unwrap();
        let eb = generate_edges(&b, &params).unwrap();
        let x = CorrespondenceMatrix::new(p).unwrap();
        worst_qc = worst_qc.max(qc(&ea, &eb, &x).unwrap());
    }

    let gt =
        GtCorrespondence::new(m(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])).unwrap();
    let self_ce = ce_corr(
        &CorrespondenceMatrix::new(gt.values().clone()).unwrap(),
        &gt,
    )
    .unwrap();

    let ce_hand = ce_corr(
        &CorrespondenceMatrix::new(m(&[[0.8, 0.2], [0.2, 0.8]])).unwrap(),
        &GtCorrespondence::identity(2),
    )
    .unwrap();
    let ce_err = (ce_hand - (-4.0 * 0.8f64.ln())).abs();
    let qc_hand = qc(
        &m(&[[0.6, 0.4], [0.3, 0.7]]),
        &m(&[[0.5, 0.5], [0.2, 0.8]]),
        &CorrespondenceMatrix::new(DenseMatrix::identity(2)).unwrap(),
    )
    .unwrap();
    let qc_err = (qc_hand - 0.1).abs();
    let mut pred = Volume::zeros(1, 2, 3);
    let mut gt_mask = Volume::zeros(1, 2, 3);
    for col in 0..2 {
        pred.set(0, 0, col, 1.0);
        pred.set(0, 1, col, 1.0);
    }
    for col in 1..3 {
        gt_mask.set(0, 0, col, 1.0);
        gt_mask.set(0, 1, col, 1.0);
    }
    let dice_err = (dice_loss(&pred, &gt_mask).unwrap() - 4.0 / 9.0).abs();

    report.check(
        "3",
        "Loss identities",
        worst_qc <= 1e-10 && self_ce <= 1e-5 && ce_err <= 1e-9 && qc_err <= 1e-9 && dice_err <= 1e-9,
        format!(
            "qc on permuted graphs {worst_qc:.1e} (tol 1e-10); ce(gt,gt) {self_ce:.1e} (tol 1e-5); hand values ce {ce_err:.1e}, qc {qc_err:.1e}, dice {dice_err:.1e} (tol 1e-9)"
        ),
    );
}

fn gradient_oracle(report: &mut Report) {
    let start = Instant::now();
    let rows = gradient_suite(0, 50).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e}", r.component, r.max_relative_error))
        .collect();
    let worst = rows
        .iter()
        .map(|r| format!("{} {:.1e}", r.component, r.max_relative_error))
        .collect::<Vec<_>>()
        .join(", ");
    report.check(
        "4",
        "Gradient oracle",
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} components x 50 instances, h=1e-4, tol 1e-3 (end-to-end 1e-2); failures [{}]; {:.1}s (limit 60s)",
            rows.len(),
            failed.join("; "),
            secs(elapsed)
        ),
    );
    report.info("4", format!("worst relative errors: {worst}"));
}

fn one_class_mask(cls: LesionClass, pixels: usize) -> Volume {
    let mut mask = Volume::zeros(4, 10, 10);
    for p in 0..pixels {
        mask.set(cls.index(), p / 10, p % 10, 1.0);
    }
    mask
}

fn prompt_goldens(report: &mut Report) {
    let mut misses = Vec::new();
    let mut expect = |label: &str, got: String, want: &str| {
        if got != want {
            misses.push(format!("{label}: got {got:?}"));
        }
    };

    let profile = SeverityProfile::new(vec![
        (LesionClass::HardExudates, SeverityLevel::Low),
        (LesionClass::Hemorrhages, SeverityLevel::High),
    ])
    .unwrap();
    let groups = GroupChoice::uniform(AdjectiveGroup::Density)
        .with(LesionClass::Hemorrhages, AdjectiveGroup::Severity);
    expect(
        "worked example",
        render_severity(&profile, 1, &groups).unwrap().text,
        "This fundus image has low-density hard exudates and high-severity hemorrhages.",
    );

    let few = SeverityProfile::new(vec![(LesionClass::HardExudates, SeverityLevel::Low)]).unwrap();
    let amount = GroupChoice::uniform(AdjectiveGroup::Amount);
    let templates = [
        "This fundus image has few hard exudates.",
        "There are few hard exudates in this fundus image.",
        "A fundus image with few hard exudates.",
        "A diabetic retinopathy image has few hard exudates.",
        "few hard exudates in a diabetic retinopathy fundus image.",
    ];
    for (i, want) in templates.iter().enumerate() {
        expect(
            &format!("template {}", i + 1),
            render_severity(&few, i as u8 + 1, &amount).unwrap().text,
            want,
        );
    }

    // 6 of 100 pixels sits on the lower boundary, 12 of 100 on the upper
    let mid = severity_prompt(
        &one_class_mask(LesionClass::SoftExudates, 6),
        3,
        &amount,
        DEFAULT_T1,
        DEFAULT_T2,
    )
    .unwrap();
    expect(
        "ratio 0.06",
        mid.text,
        "A fundus image with some soft exudates.",
    );
    let high = severity_prompt(
        &one_class_mask(LesionClass::SoftExudates, 12),
        3,
        &amount,
        DEFAULT_T1,
        DEFAULT_T2,
    )
    .unwrap();
    expect(
        "ratio 0.12",
        high.text,
        "A fundus image with many soft exudates.",
    );
    let levels = (
        severity_level(0.06, DEFAULT_T1, DEFAULT_T2).unwrap(),
        severity_level(0.12, DEFAULT_T1, DEFAULT_T2).unwrap(),
    );
    expect("boundary levels", format!("{levels:?}"), "(Mid, High)");

    let groups_want = [
        (
            AdjectiveGroup::Amount,
            "This fundus image has many microaneurysms.",
        ),
        (
            AdjectiveGroup::Density,
            "This fundus image has high-density microaneurysms.",
        ),
        (
            AdjectiveGroup::Severity,
            "This fundus image has high-severity microaneurysms.",
        ),
    ];
    let ma =
        SeverityProfile::new(vec![(LesionClass::Microaneurysms, SeverityLevel::High)]).unwrap();
    for (group, want) in groups_want {
        expect(
            group.name(),
            render_severity(&ma, 1, &GroupChoice::uniform(group))
                .unwrap()
                .text,
            want,
        );
    }

    report.check(
        "5",
        "Prompt golden tests",
        misses.is_empty(),
        if misses.is_empty() {
            "worked example, 5 templates, boundaries 0.06->Mid and 0.12->High, 3 adjective groups byte-exact".into()
        } else {
            misses.join("; ")
        },
    );
}

fn by_family<'a>(rows: &'a [RunSummary], losses: &str) -> Vec<&'a RunSummary> {
    rows.iter().filter(|r| r.losses == losses).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(values: impl Iterator<Item = f64>) -> String {
    values
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn paired_runs(report: &mut Report) {
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let rows = match compare(&cfg, 5) {
        Ok(rows) => rows,
        Err(e) => {
            report.check(
                "6",
                "Ablation analogue",
                false,
                format!("training failed: {e}"),
            );
            report.check(
                "7",
                "Contrastive comparison analogue",
                false,
                format!("training failed: {e}"),
            );
            return;
        }
    };
    let elapsed = start.elapsed();
    let dice = by_family(&rows, "dice");
    let full = by_family(&rows, "full");
    let contrastive = by_family(&rows, "contrastive");

    let dice_miou = mean(dice.iter().map(|r| r.mean_iou));
    let full_miou = mean(full.iter().map(|r| r.mean_iou));
    report.check(
        "6",
        "Ablation analogue",
        full_miou > dice_miou && elapsed < Duration::from_secs(600),
        format!(
            "64x64, batch {}, budget {}, 5 seeds: full mean mIoU {full_miou:.4} vs Dice-only {dice_miou:.4}; all 15 runs {:.0}s (limit 600s)",
            cfg.batch_size,
            cfg.budget,
            secs(elapsed)
        ),
    );
    report.info(
        "6",
        format!(
            "per-seed mIoU full [{}] dice [{}] contrastive [{}]",
            fmt_list(full.iter().map(|r| r.mean_iou)),
            fmt_list(dice.iter().map(|r| r.mean_iou)),
            fmt_list(contrastive.iter().map(|r| r.mean_iou))
        ),
    );

    let wins = full
        .iter()
        .zip(&contrastive)
        .filter(|(f, c)| f.hidden_distortion < c.hidden_distortion)
        .count();
    let finite = full
        .iter()
        .chain(&contrastive)
        .all(|r| r.all_losses_finite && r.rounds == cfg.budget);
    report.check(
        "7",
        "Contrastive comparison analogue",
        wins >= 3 && finite,
        format!(
            "relation distortion of segmenter features at held-out lesion pixels vs the Dice-only run: graph matching lower in {wins}/5 seeds (need 3); full [{}] contrastive [{}]; all losses finite: {finite}",
            fmt_list(full.iter().map(|r| r.hidden_distortion)),
            fmt_list(contrastive.iter().map(|r| r.hidden_distortion))
        ),
    );
    let enc_wins = full
        .iter()
        .zip(&contrastive)
        .filter(|(f, c)| f.encoder_distortion < c.encoder_distortion)
        .count();
    report.info(
        "7",
        format!(
            "encoder input-to-output distortion: graph matching lower in {enc_wins}/5 seeds; full [{}] contrastive [{}]",
            fmt_list(full.iter().filter_map(|r| r.encoder_distortion)),
            fmt_list(contrastive.iter().filter_map(|r| r.encoder_distortion))
        ),
    );
}

fn snapshot(dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            snapshot(&path, out);
        } else {
            out.insert(path.display().to_string(), std::fs::read(&path).unwrap());
        }
    }
}

/// Runs the binary in `cwd` and returns its exit code, stdout and every
/// file under `cwd/out`, keyed by path relative to `cwd`.
fn invoke(cwd: &Path, args: &[&str]) -> (Option<i32>, Vec<u8>, BTreeMap<String, Vec<u8>>) {
    let output = Command::new(env!("CARGO_BIN_EXE_bivlgm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    let mut files = BTreeMap::new();
    snapshot(&cwd.join("out"), &mut files);
    let prefix = cwd.display().to_string();
    let files = files
        .into_iter()
        .map(|(k, v)| (k.trim_start_matches(&prefix).to_string(), v))
        .collect();
    (output.status.code(), output.stdout, files)
}

fn determinism(report: &mut Report) {
    let commands: [&[&str]; 7] = [
        &[
            "gradcheck",
            "--seed",
            "7",
            "--instances",
            "5",
            "--out",
            "out",
        ],
        &["sinkhorn-bench", "--seed", "3", "--out", "out"],
        &["match-demo", "--seed", "3", "--out", "out"],
        &["prompt", "--spec", "EX:high,SE:low", "--seed", "5"],
        &[
            "train-synthetic",
            "--seed",
            "4",
            "--budget",
            "15",
            "--losses",
            "full",
            "--out",
            "out",
            "--save-predictions",
        ],
        &[
            "compare-contrastive",
            "--seed",
            "2",
            "--seeds",
            "1",
            "--budget",
            "8",
            "--out",
            "out",
        ],
        &["eval", "pred"],
    ];
    let mut mismatched = Vec::new();
    let mut failed = Vec::new();
    let mut artifacts = 0;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for args in commands {
        let mut runs = Vec::new();
        for root in [a.path(), b.path()] {
            let cwd = root.join(args[0]);
            std::fs::create_dir_all(&cwd).unwrap();
            if args[0] == "eval" {
                std::fs::create_dir_all(cwd.join("pred")).unwrap();
                for entry in std::fs::read_dir(root.join("train-synthetic/out/predictions"))
                    .unwrap()
                    .flatten()
                {
                    std::fs::copy(entry.path(), cwd.join("pred").join(entry.file_name())).unwrap();
                }
            }
            runs.push(invoke(&cwd, args));
        }
        if runs[0].0 != Some(0) || runs[1].0 != Some(0) {
            failed.push(args[0]);
        }
        if runs[0] != runs[1] {
            mismatched.push(args[0]);
        }
        artifacts += runs[0].2.len();
    }
    report.check(
        "8",
        "Determinism",
        mismatched.is_empty() && failed.is_empty() && artifacts > 0,
        format!(
            "7 commands run twice, stdout and {artifacts} artifact files compared byte for byte; mismatched {mismatched:?}; nonzero exit {failed:?}"
        ),
    );
}

struct Counts {
    tp: f64,
    fp: f64,
    fneg: f64,
}

fn counts(pred: &[f64], gt: &[f64], threshold: f64) -> Counts {
    let mut c = Counts {
        tp: 0.0,
        fp: 0.0,
        fneg: 0.0,
    };
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g == 1.0) {
            (true, true) => c.tp += 1.0,
            (true, false) => c.fp += 1.0,
            (false, true) => c.fneg += 1.0,
            _ => {}
        }
    }
    c
}

fn oracle_aupr(scores: &[f64], gt: &[f64]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = gt.iter().filter(|&&g| g == 1.0).count() as f64;
    let (mut area, mut prev) = (0.0, 0.0);
    for t in thresholds {
        let c = counts(scores, gt, t);
        let recall = c.tp / positives;
        area += (recall - prev) * c.tp / (c.tp + c.fp);
        prev = recall;
    }
    area
}

fn metrics_oracle(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let n = rng.random_range(4..=144);
        let pred: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..=16) as f64 / 16.0)
            .collect();
        let mut gt: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.35) { 1.0 } else { 0.0 })
            .collect();
        gt[case % n] = 1.0;
        let c = counts(&pred, &gt, 0.5);
        let pairs = [
            (iou(&pred, &gt).unwrap(), c.tp / (c.tp + c.fp + c.fneg)),
            (
                f_score(&pred, &gt).unwrap(),
                2.0 * c.tp / (2.0 * c.tp + c.fp + c.fneg),
            ),
            (aupr(&pred, &gt).unwrap(), oracle_aupr(&pred, &gt)),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
    }
    report.check(
        "9",
        "Metrics oracle",
        worst <= 1e-9,
        format!("50 random masks, IoU/F/AUPR max deviation from brute-force oracle {worst:.1e} (tol 1e-9)"),
    );
}

fn main() {
    let mut report = Report { failures: 0 };
    sinkhorn_correctness(&mut report);
    permutation_recovery(&mut report);
    loss_identities(&mut report);
    gradient_oracle(&mut report);
    prompt_goldens(&mut report);
    paired_runs(&mut report);
    determinism(&mut report);
    metrics_oracle(&mut report);
    if report.failures > 0 {
        println!("{} criteria failed", report.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
