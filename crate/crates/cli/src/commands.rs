//! Command implementations. Each writes its artifacts and returns the text
//! printed on stdout.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use bivlgm::pipeline::{RunManifest, TrainConfig, TrainFailure};
use bivlgm::prompts::{
    render_severity, severity_profile, GroupChoice, LesionClass, SeverityProfile, DEFAULT_T1,
    DEFAULT_T2,
};
use bivlgm::synthdata::{
    evaluate_pooled, read_sample, write_sample, SegMetrics, SegSample, SeveritySpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::args::{
    BenchArgs, CompareArgs, ConfigArgs, EvalArgs, GradcheckArgs, MatchArgs, PromptArgs, TrainArgs,
};
use crate::compare::compare;
use crate::suites::{gradient_suite, match_demo, sinkhorn_bench};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; nothing was run.
    #[error("{0}")]
    Usage(String),
    #[error("{message}")]
    Runtime {
        message: String,
        manifest: Option<PathBuf>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime {
        message: e.to_string(),
        manifest: None,
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_csv<R: AsRef<[String]>>(path: &Path, rows: &[R]) -> CliResult<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.write_record(row.as_ref()).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let file = File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(runtime)?;
    w.write_all(b"\n").map_err(runtime)?;
    w.flush().map_err(runtime)
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Defaults, then the JSON file, then explicit flags.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let file = File::open(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_reader(BufReader::new(file))
                .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = args.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed,
        budget => budget,
        batch => batch_size,
        t1 => t1,
        t2 => t2,
        lambda_a => weights.lambda_a,
        lambda_b => weights.lambda_b,
        lambda_c => weights.lambda_c,
        lambda_d => weights.lambda_d,
        lambda_e => weights.lambda_e,
        strict_diagonal => strict_diagonal,
        losses => losses,
    );
    if args.template.is_some() {
        cfg.template = args.template;
    }
    cfg.groups.extend(args.groups.iter().copied());
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<String> {
    if args.instances == 0 {
        return Err(usage("--instances must be at least 1"));
    }
    let rows = gradient_suite(args.seed, args.instances).map_err(runtime)?;
    let mut table = vec![[
        "component",
        "instances",
        "max_relative_error",
        "tolerance",
        "status",
    ]
    .map(String::from)];
    let mut text = format!(
        "{:<26}{:>10}{:>14}{:>11}  status\n",
        "component", "instances", "max rel err", "tolerance"
    );
    for r in &rows {
        let status = if r.passed() { "pass" } else { "FAIL" };
        table.push([
            r.component.to_string(),
            r.instances.to_string(),
            num(r.max_relative_error),
            num(r.tolerance),
            status.to_string(),
        ]);
        let _ = writeln!(
            text,
            "{:<26}{:>10}{:>14.3e}{:>11.0e}  {status}",
            r.component, r.instances, r.max_relative_error, r.tolerance
        );
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_csv(&dir.join("gradcheck.csv"), &table)?;
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.component)
        .collect();
    if failed.is_empty() {
        Ok(text)
    } else {
        Err(runtime(format!(
            "{text}gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn sinkhorn(args: &BenchArgs) -> CliResult<String> {
    if args.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let trials = sinkhorn_bench(args.seed, args.trials).map_err(runtime)?;
    let mut table = vec![[
        "trial",
        "size",
        "iterations",
        "converged",
        "marginal_deviation",
    ]
    .map(String::from)];
    for (i, t) in trials.iter().enumerate() {
        table.push([
            i.to_string(),
            t.size.to_string(),
            t.iterations.to_string(),
            t.converged.to_string(),
            num(t.marginal_deviation),
        ]);
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_csv(&dir.join("sinkhorn.csv"), &table)?;
    }
    let converged = trials.iter().filter(|t| t.converged).count();
    let worst = trials
        .iter()
        .map(|t| t.marginal_deviation)
        .fold(0.0, f64::max);
    let mean_iter = trials.iter().map(|t| t.iterations as f64).sum::<f64>() / trials.len() as f64;
    let max_iter = trials.iter().map(|t| t.iterations).max().unwrap_or(0);
    Ok(format!(
        "trials {}\nconverged {converged}\nmax marginal deviation {worst:.3e}\nmean iterations {mean_iter:.2}\nmax iterations {max_iter}\n",
        trials.len()
    ))
}

pub fn matching(args: &MatchArgs) -> CliResult<String> {
    if args.trials == 0 || args.nodes < 2 || args.width == 0 {
        return Err(usage(
            "--trials and --width must be at least 1 and --nodes at least 2",
        ));
    }
    if !(args.noise >= 0.0 && args.noise.is_finite()) {
        return Err(usage("--noise must be finite and nonnegative"));
    }
    let trials =
        match_demo(args.seed, args.trials, args.nodes, args.width, args.noise).map_err(runtime)?;
    let mut table = vec![["trial", "correct", "nodes"].map(String::from)];
    for (i, t) in trials.iter().enumerate() {
        table.push([i.to_string(), t.correct.to_string(), t.nodes.to_string()]);
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_csv(&dir.join("match.csv"), &table)?;
    }
    let correct: usize = trials.iter().map(|t| t.correct).sum();
    let total: usize = trials.iter().map(|t| t.nodes).sum();
    let perfect = trials.iter().filter(|t| t.correct == t.nodes).count();
    Ok(format!(
        "assignments recovered {correct}/{total} ({:.2}%)\nperfect trials {perfect}/{}\n",
        100.0 * correct as f64 / total as f64,
        trials.len()
    ))
}

pub fn prompt(args: &PromptArgs) -> CliResult<String> {
    let t1 = args.t1.unwrap_or(DEFAULT_T1);
    let t2 = args.t2.unwrap_or(DEFAULT_T2);
    bivlgm::prompts::severity_level(0.0, t1, t2).map_err(usage)?;
    let profile = match (&args.spec, &args.sample) {
        (Some(spec), _) => {
            let spec: SeveritySpec = spec.parse().map_err(usage)?;
            let entries = LesionClass::ALL
                .into_iter()
                .filter_map(|c| spec.level(c).map(|l| (c, l)))
                .collect();
            SeverityProfile::new(entries).map_err(usage)?
        }
        (None, Some(path)) => {
            let sample = load_sample(path)?;
            severity_profile(&sample.gt_mask, t1, t2).map_err(runtime)?
        }
        (None, None) => return Err(usage("either --spec or --sample is required")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let template = args.template.unwrap_or_else(|| rng.random_range(1..=5));
    let mut groups = GroupChoice::random(&mut rng);
    for &(cls, group) in &args.groups {
        groups = groups.with(cls, group);
    }
    let prompt = render_severity(&profile, template, &groups).map_err(runtime)?;
    Ok(format!("{}\n", prompt.text))
}

fn metrics_rows(split: &str, m: &SegMetrics) -> Vec<[String; 5]> {
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let mut rows: Vec<[String; 5]> = LesionClass::ALL
        .into_iter()
        .filter(|c| c.index() < m.iou.len())
        .map(|c| {
            let i = c.index();
            [
                split.to_string(),
                c.code().to_string(),
                opt(m.iou[i]),
                opt(m.f_score[i]),
                opt(m.aupr[i]),
            ]
        })
        .collect();
    rows.push([
        split.to_string(),
        "mean".into(),
        num(m.mean_iou),
        num(m.mean_f),
        num(m.mean_aupr),
    ]);
    rows
}

fn metrics_header() -> [String; 5] {
    ["split", "class", "iou", "f_score", "aupr"].map(String::from)
}

fn write_manifest_files(dir: &Path, manifest: &RunManifest) -> CliResult<PathBuf> {
    let path = dir.join("manifest.json");
    write_json(&path, manifest)?;
    write_csv(&dir.join("losses.csv"), &manifest.loss_table())?;
    let mut rows = vec![metrics_header()];
    rows.extend(metrics_rows("initial", &manifest.initial_metrics));
    if let Some(m) = &manifest.final_metrics {
        rows.extend(metrics_rows("final", m));
    }
    write_csv(&dir.join("metrics.csv"), &rows)?;
    Ok(path)
}

fn failed_run(dir: &Path, failure: TrainFailure) -> CliError {
    match write_manifest_files(dir, &failure.manifest) {
        Ok(path) => CliError::Runtime {
            message: failure.to_string(),
            manifest: Some(path),
        },
        Err(e) => runtime(format!("{failure}; manifest not written: {e}")),
    }
}

pub fn train_synthetic(args: &TrainArgs) -> CliResult<String> {
    let cfg = resolve_config(&args.config)?;
    create_dir(&args.out)?;
    let run = bivlgm::pipeline::train_run(&cfg).map_err(|f| failed_run(&args.out, f))?;
    let path = write_manifest_files(&args.out, &run.manifest)?;
    if args.save_predictions {
        let dir = args.out.join("predictions");
        create_dir(&dir)?;
        for (i, s) in run.test_set.iter().enumerate() {
            let predicted = run
                .state
                .segmenter
                .predict(&s.patches, s.sample.height(), s.sample.width())
                .map_err(runtime)?;
            let sample = SegSample {
                predicted_mask: Some(predicted),
                ..s.sample.clone()
            };
            let file = dir.join(format!("sample_{i:04}.bvlg"));
            let mut w = BufWriter::new(
                File::create(&file).map_err(|e| runtime(format!("{}: {e}", file.display())))?,
            );
            write_sample(&mut w, &sample).map_err(runtime)?;
            w.flush().map_err(runtime)?;
        }
    }
    let m = &run.manifest;
    let shown = m.final_metrics.as_ref().unwrap_or(&m.initial_metrics);
    Ok(format!(
        "losses {}\nrounds {}\nmIoU {:.4}\nmF {:.4}\nmAUPR {:.4}\nmanifest {}\n",
        m.config.losses,
        m.log.len(),
        shown.mean_iou,
        shown.mean_f,
        shown.mean_aupr,
        path.display()
    ))
}

pub fn compare_contrastive(args: &CompareArgs) -> CliResult<String> {
    let cfg = resolve_config(&args.config)?;
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    create_dir(&args.out)?;
    let rows = compare(&cfg, args.seeds).map_err(|f| failed_run(&args.out, f))?;
    let mut table = vec![[
        "seed",
        "losses",
        "mean_iou",
        "mean_f",
        "mean_aupr",
        "hidden_distortion",
        "encoder_distortion",
        "rounds",
        "all_losses_finite",
    ]
    .map(String::from)];
    for r in &rows {
        table.push([
            r.seed.to_string(),
            r.losses.clone(),
            num(r.mean_iou),
            num(r.mean_f),
            num(r.mean_aupr),
            num(r.hidden_distortion),
            r.encoder_distortion.map(num).unwrap_or_default(),
            r.rounds.to_string(),
            r.all_losses_finite.to_string(),
        ]);
    }
    write_csv(&args.out.join("compare.csv"), &table)?;
    write_json(&args.out.join("compare_config.json"), &cfg)?;

    let mut text = String::new();
    let mean = |losses: &str, f: fn(&crate::compare::RunSummary) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.losses == losses).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    for losses in crate::compare::FAMILIES {
        let _ = writeln!(
            text,
            "{losses:<12} mean mIoU {:.4}  mean hidden distortion {:.4}",
            mean(losses, |r| r.mean_iou),
            mean(losses, |r| r.hidden_distortion)
        );
    }
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + args.seeds).collect();
    let wins = seeds
        .iter()
        .filter(|&&s| {
            let of = |l: &str| {
                rows.iter()
                    .find(|r| r.seed == s && r.losses == l)
                    .map(|r| r.hidden_distortion)
            };
            of("full") < of("contrastive")
        })
        .count();
    let _ = writeln!(
        text,
        "graph matching distorts less than contrastive in {wins}/{} seeds",
        seeds.len()
    );
    Ok(text)
}

fn load_sample(path: &Path) -> CliResult<SegSample> {
    let file = File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    read_sample(BufReader::new(file)).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn sample_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| runtime(format!("{}: {e}", input.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bvlg"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(runtime("no sample files found"));
    }
    Ok(files)
}

pub fn eval(args: &EvalArgs) -> CliResult<String> {
    let files = sample_files(&args.inputs)?;
    let samples = files
        .iter()
        .map(|p| load_sample(p))
        .collect::<CliResult<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for (s, path) in samples.iter().zip(&files) {
        let pred = s
            .predicted_mask
            .as_ref()
            .ok_or_else(|| runtime(format!("{} has no predicted mask", path.display())))?;
        pairs.push((pred, &s.gt_mask));
    }
    let metrics = evaluate_pooled(pairs).map_err(runtime)?;
    let mut rows = vec![metrics_header()];
    rows.extend(metrics_rows("eval", &metrics));
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_csv(&dir.join("eval.csv"), &rows)?;
    }
    let mut text = format!("samples {}\n", samples.len());
    for r in &rows[1..] {
        let _ = writeln!(
            text,
            "{:<5} IoU {:<22} F {:<22} AUPR {}",
            r[1], r[2], r[3], r[4]
        );
    }
    Ok(text)
}
