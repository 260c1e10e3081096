//! Paired runs of the three loss families under one seed.

use bivlgm::pipeline::{
    hidden_features, probe_pixels, relation_distortion, train_run, TrainConfig, TrainFailure,
    TrainedRun, PROBE_PIXELS_PER_CLASS,
};

/// Loss families compared, baseline first.
pub const FAMILIES: [&str; 3] = ["dice", "full", "contrastive"];

/// Summary of one trained run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub losses: String,
    pub mean_iou: f64,
    pub mean_f: f64,
    pub mean_aupr: f64,
    /// Relation distortion of the segmenter's hidden features at fixed
    /// held-out lesion pixels, against the Dice-only run of the same seed.
    pub hidden_distortion: f64,
    /// Relation distortion introduced by the image and text encoders.
    pub encoder_distortion: Option<f64>,
    pub rounds: usize,
    pub all_losses_finite: bool,
}

fn all_finite(run: &TrainedRun) -> bool {
    run.manifest.log.iter().all(|r| {
        r.encoder.iter().all(|e| e.total.is_finite())
            && r.segmenter.iter().all(|g| g.total.is_finite())
    })
}

/// Trains every family on `base` with `seed` and summarizes each run.
pub fn compare_seed(base: &TrainConfig, seed: u64) -> Result<Vec<RunSummary>, TrainFailure> {
    let runs = FAMILIES
        .iter()
        .map(|losses| {
            train_run(&TrainConfig {
                seed,
                losses: losses.to_string(),
                ..base.clone()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let baseline = &runs[0];
    let wrap = |error| TrainFailure {
        error,
        manifest: Box::new(baseline.manifest.clone()),
    };
    let pixels = probe_pixels(&baseline.test_set, PROBE_PIXELS_PER_CLASS);
    let reference =
        hidden_features(&baseline.state.segmenter, &baseline.test_set, &pixels).map_err(wrap)?;
    runs.iter()
        .map(|run| {
            let hidden =
                hidden_features(&run.state.segmenter, &run.test_set, &pixels).map_err(wrap)?;
            let metrics = run
                .manifest
                .final_metrics
                .as_ref()
                .unwrap_or(&run.manifest.initial_metrics);
            Ok(RunSummary {
                seed,
                losses: run.manifest.config.losses.clone(),
                mean_iou: metrics.mean_iou,
                mean_f: metrics.mean_f,
                mean_aupr: metrics.mean_aupr,
                hidden_distortion: relation_distortion(&reference, &hidden).map_err(wrap)?,
                encoder_distortion: run.manifest.distortion.map(|d| d.mean),
                rounds: run.manifest.log.len(),
                all_losses_finite: all_finite(run),
            })
        })
        .collect()
}

/// [`compare_seed`] for `count` consecutive seeds from `base.seed`.
pub fn compare(base: &TrainConfig, count: u64) -> Result<Vec<RunSummary>, TrainFailure> {
    let mut out = Vec::new();
    for seed in base.seed..base.seed + count {
        out.extend(compare_seed(base, seed)?);
    }
    Ok(out)
}
