//! Seeded synthetic lesion images, their binary container format, and the
//! segmentation metrics (IoU, F-score, AUPR).

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnum::DenseMatrix;
use crate::error::{Error, Result};
use crate::prompts::{lesion_ratio, LesionClass, SeverityLevel};

/// Channel-major `C×H×W` array.
#[derive(Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Volume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Volume({}x{}x{})",
            self.channels, self.height, self.width
        )
    }
}

impl Volume {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(
                "Volume::new",
                format!(
                    "{} values for a {channels}x{height}x{width} volume",
                    data.len()
                ),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                context: "Volume::new".into(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, c: usize, r: usize, col: usize) -> usize {
        assert!(
            c < self.channels && r < self.height && col < self.width,
            "volume index out of range"
        );
        (c * self.height + r) * self.width + col
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[self.offset(c, r, col)]
    }

    pub fn set(&mut self, c: usize, r: usize, col: usize, value: f64) {
        let i = self.offset(c, r, col);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// `HW×C` matrix with one row per pixel in row-major pixel order.
    pub fn to_pixel_major(&self) -> DenseMatrix {
        let n = self.pixels();
        DenseMatrix::from_fn(n, self.channels, |p, c| self.data[c * n + p])
    }

    pub fn from_pixel_major(m: &DenseMatrix, height: usize, width: usize) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::invalid(
                "Volume::from_pixel_major",
                format!("{} rows for a {height}x{width} canvas", m.rows()),
            ));
        }
        let n = m.rows();
        let mut v = Self::zeros(m.cols(), height, width);
        for p in 0..n {
            for c in 0..m.cols() {
                v.data[c * n + p] = m.get(p, c);
            }
        }
        Ok(v)
    }

    /// Per-channel 3×3 box blur with edge clamping.
    pub fn box_blur(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = Self::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for r in 0..h {
                for col in 0..w {
                    let mut acc = 0.0;
                    for dr in [-1isize, 0, 1] {
                        for dc in [-1isize, 0, 1] {
                            let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                            let cc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                            acc += src[rr * w + cc];
                        }
                    }
                    dst[r * w + col] = acc / 9.0;
                }
            }
        }
        out
    }
}

/// Requested severity band per lesion class; `None` means absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeveritySpec([Option<SeverityLevel>; 4]);

impl SeveritySpec {
    pub fn new(levels: [Option<SeverityLevel>; 4]) -> Result<Self> {
        if levels.iter().all(Option::is_none) {
            return Err(Error::invalid(
                "SeveritySpec",
                "at least one class must be present",
            ));
        }
        Ok(Self(levels))
    }

    pub fn single(class: LesionClass, level: SeverityLevel) -> Self {
        let mut levels = [None; 4];
        levels[class.index()] = Some(level);
        Self(levels)
    }

    pub fn level(&self, class: LesionClass) -> Option<SeverityLevel> {
        self.0[class.index()]
    }

    pub fn present(&self) -> Vec<LesionClass> {
        LesionClass::ALL
            .into_iter()
            .filter(|c| self.level(*c).is_some())
            .collect()
    }

    /// Each class present with probability one half, at least one present,
    /// levels uniform.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut levels: [Option<SeverityLevel>; 4] = std::array::from_fn(|_| {
            rng.random_bool(0.5)
                .then(|| SeverityLevel::ALL[rng.random_range(0..3)])
        });
        if levels.iter().all(Option::is_none) {
            levels[rng.random_range(0..4)] = Some(SeverityLevel::ALL[rng.random_range(0..3)]);
        }
        Self(levels)
    }
}

impl fmt::Display for SeveritySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = LesionClass::ALL
            .into_iter()
            .filter_map(|c| self.level(c).map(|l| format!("{}:{}", c.code(), l.name())))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `EX:high,HE:low`.
impl FromStr for SeveritySpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut levels = [None; 4];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (cls, level) = part.split_once(':').ok_or_else(|| {
                Error::invalid("SeveritySpec", format!("expected CLS:level, got {part:?}"))
            })?;
            let cls: LesionClass = cls.parse()?;
            if levels[cls.index()].replace(level.parse()?).is_some() {
                return Err(Error::invalid(
                    "SeveritySpec",
                    format!("class {cls} given twice"),
                ));
            }
        }
        Self::new(levels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `1×H×W` intensities in `[0, 1]`.
    pub image: Volume,
    /// Binary `C×H×W`; channels may overlap.
    pub gt_mask: Volume,
    pub predicted_mask: Option<Volume>,
    pub seed: u64,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn present_classes(&self) -> Vec<LesionClass> {
        LesionClass::ALL
            .into_iter()
            .filter(|c| self.gt_mask.channel(c.index()).iter().any(|&v| v > 0.5))
            .collect()
    }
}

struct ClassLook {
    radius: (f64, f64),
    intensity: f64,
    blur_passes: usize,
}

fn look(class: LesionClass) -> ClassLook {
    match class {
        LesionClass::HardExudates => ClassLook {
            radius: (1.5, 3.5),
            intensity: 0.4,
            blur_passes: 1,
        },
        LesionClass::Hemorrhages => ClassLook {
            radius: (2.5, 5.5),
            intensity: -0.35,
            blur_passes: 1,
        },
        LesionClass::SoftExudates => ClassLook {
            radius: (3.5, 7.0),
            intensity: 0.25,
            blur_passes: 2,
        },
        LesionClass::Microaneurysms => ClassLook {
            radius: (0.8, 1.6),
            intensity: -0.3,
            blur_passes: 0,
        },
    }
}

/// Headroom above `t2` for the high band.
const HIGH_BAND_WIDTH: f64 = 0.08;
const MAX_ATTEMPTS: usize = 40;
const NOISE_SIGMA: f64 = 0.05;

fn band(level: SeverityLevel, t1: f64, t2: f64) -> (f64, f64) {
    match level {
        SeverityLevel::Low => (0.0, t1),
        SeverityLevel::Mid => (t1, t2),
        SeverityLevel::High => (t2, (t2 + HIGH_BAND_WIDTH).min(1.0)),
    }
}

fn stamp_ellipse(
    channel: &mut [f64],
    h: usize,
    w: usize,
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
) -> usize {
    let (sin, cos) = angle.sin_cos();
    let reach = radii.0.max(radii.1).ceil() as isize + 1;
    let (cr, cc) = center;
    let mut added = 0;
    for r in (cr as isize - reach).max(0)..=(cr as isize + reach).min(h as isize - 1) {
        for c in (cc as isize - reach).max(0)..=(cc as isize + reach).min(w as isize - 1) {
            let dy = r as f64 - cr;
            let dx = c as f64 - cc;
            let u = (dx * cos + dy * sin) / radii.0;
            let v = (-dx * sin + dy * cos) / radii.1;
            if u * u + v * v <= 1.0 {
                let p = &mut channel[r as usize * w + c as usize];
                if *p == 0.0 {
                    *p = 1.0;
                    added += 1;
                }
            }
        }
    }
    added
}

/// Grows blobs until the covered fraction reaches a target drawn inside
/// `[lo, hi)`; fails if the final ratio leaves the band.
fn grow_class(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    class: LesionClass,
    lo: f64,
    hi: f64,
) -> Option<Vec<f64>> {
    let total = (h * w) as f64;
    let min_pixels = ((lo * total).ceil() as usize).max(1);
    let max_pixels = ((hi * total).ceil() as usize).saturating_sub(1);
    if min_pixels > max_pixels {
        return None;
    }
    let target = rng.random_range(min_pixels..=max_pixels);
    let scale = (h.min(w) as f64 / 64.0).max(0.5);
    let spec = look(class);
    let mut channel = vec![0.0; h * w];
    let mut covered = 0;
    let mut stalls = 0;
    while covered < target {
        let r0 = rng.random_range(spec.radius.0..spec.radius.1) * scale;
        let r1 = rng.random_range(spec.radius.0..spec.radius.1) * scale;
        let center = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let mut trial = channel.clone();
        let added = stamp_ellipse(&mut trial, h, w, center, (r0.max(0.5), r1.max(0.5)), angle);
        if covered + added > max_pixels {
            // overshoot: try a single-pixel dot instead
            stalls += 1;
            if stalls > 200 {
                break;
            }
            let p = rng.random_range(0..h * w);
            if channel[p] == 0.0 {
                channel[p] = 1.0;
                covered += 1;
            }
            continue;
        }
        channel = trial;
        covered += added;
    }
    (min_pixels..=max_pixels)
        .contains(&covered)
        .then_some(channel)
}

/// Renders one synthetic sample whose per-class lesion ratios fall in the
/// bands requested by `spec`. Deterministic in `(seed, h, w, spec, t1, t2)`.
pub fn gen_sample(
    seed: u64,
    h: usize,
    w: usize,
    spec: &SeveritySpec,
    t1: f64,
    t2: f64,
) -> Result<SegSample> {
    if h < 16 || w < 16 {
        return Err(Error::invalid(
            "gen_sample",
            format!("canvas {h}x{w} is smaller than 16x16"),
        ));
    }
    crate::prompts::severity_level(0.0, t1, t2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt = Volume::zeros(LesionClass::ALL.len(), h, w);
    for class in LesionClass::ALL {
        let Some(level) = spec.level(class) else {
            continue;
        };
        let (lo, hi) = band(level, t1, t2);
        let channel = (0..MAX_ATTEMPTS)
            .find_map(|_| grow_class(&mut rng, h, w, class, lo, hi))
            .ok_or_else(|| {
                Error::invalid(
                    "gen_sample",
                    format!("could not place {class} at {level} severity on a {h}x{w} canvas"),
                )
            })?;
        gt.channel_mut(class.index()).copy_from_slice(&channel);
        debug_assert!({
            let r = lesion_ratio(&gt, class);
            r >= lo && r < hi
        });
    }

    let mut image = vec![0.5; h * w];
    for class in LesionClass::ALL {
        let spec = look(class);
        let mut layer = Volume::new(1, h, w, gt.channel(class.index()).to_vec())?;
        for _ in 0..spec.blur_passes {
            layer = layer.box_blur();
        }
        for (px, v) in image.iter_mut().zip(layer.data()) {
            *px += spec.intensity * v;
        }
    }
    for px in image.iter_mut() {
        let noise: f64 = rng.sample(StandardNormal);
        *px = (*px + NOISE_SIGMA * noise).clamp(0.0, 1.0);
    }
    Ok(SegSample {
        image: Volume::new(1, h, w, image)?,
        gt_mask: gt,
        predicted_mask: None,
        seed,
    })
}

/// Sample seeds and specs for a dataset, drawn from one master seed.
pub fn dataset_plan(master_seed: u64, count: usize) -> Vec<(u64, SeveritySpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..count)
        .map(|_| {
            let seed = rng.random::<u64>();
            (seed, SeveritySpec::random(&mut rng))
        })
        .collect()
}

pub fn gen_dataset(
    master_seed: u64,
    count: usize,
    h: usize,
    w: usize,
    t1: f64,
    t2: f64,
) -> Result<Vec<SegSample>> {
    dataset_plan(master_seed, count)
        .iter()
        .map(|(seed, spec)| gen_sample(*seed, h, w, spec, t1, t2))
        .collect()
}

// ---- metrics ----

/// Binarization threshold for predicted masks.
pub const BINARY_THRESHOLD: f64 = 0.5;

fn check_pair(op: &'static str, pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::mismatch(op, (1, pred.len()), (1, gt.len())));
    }
    Ok(())
}

fn confusion(pred: &[f64], gt: &[f64]) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= BINARY_THRESHOLD, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fneg)
}

/// Jaccard index of `pred ≥ 0.5` against `gt`; 1 when both are empty.
pub fn iou(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("iou", pred, gt)?;
    let (tp, fp, fneg) = confusion(pred, gt);
    let union = tp + fp + fneg;
    Ok(if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    })
}

/// Dice/F1 of `pred ≥ 0.5` against `gt`; 1 when both are empty.
pub fn f_score(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("f_score", pred, gt)?;
    let (tp, fp, fneg) = confusion(pred, gt);
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over the distinct score
/// thresholds taken in decreasing order.
pub fn aupr(scores: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("aupr", scores, gt)?;
    if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::invalid(
            "aupr",
            format!("score {} at {i} outside [0, 1]", scores[i]),
        ));
    }
    let positives = gt.iter().filter(|&&g| g > 0.5).count();
    if positives == 0 {
        return Err(Error::invalid("aupr", "ground truth has no positive pixel"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if gt[order[i]] > 0.5 {
                tp += 1;
            }
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Per-class scores (`None` where the class is absent from the ground truth)
/// and their means over the classes that are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub iou: Vec<Option<f64>>,
    pub f_score: Vec<Option<f64>>,
    pub aupr: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub mean_f: f64,
    pub mean_aupr: f64,
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

fn metrics_from_channels(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<SegMetrics> {
    let mut out = SegMetrics {
        iou: Vec::new(),
        f_score: Vec::new(),
        aupr: Vec::new(),
        mean_iou: 0.0,
        mean_f: 0.0,
        mean_aupr: 0.0,
    };
    for (p, g) in pred.iter().zip(gt) {
        if g.iter().any(|&v| v > 0.5) {
            out.iou.push(Some(iou(p, g)?));
            out.f_score.push(Some(f_score(p, g)?));
            out.aupr.push(Some(aupr(p, g)?));
        } else {
            out.iou.push(None);
            out.f_score.push(None);
            out.aupr.push(None);
        }
    }
    out.mean_iou = mean_present(&out.iou);
    out.mean_f = mean_present(&out.f_score);
    out.mean_aupr = mean_present(&out.aupr);
    Ok(out)
}

fn check_volumes(pred: &Volume, gt: &Volume) -> Result<()> {
    if pred.dims() != gt.dims() {
        let (pc, ph, pw) = pred.dims();
        let (gc, gh, gw) = gt.dims();
        return Err(Error::mismatch("evaluate", (pc, ph * pw), (gc, gh * gw)));
    }
    Ok(())
}

/// Metrics for one image.
pub fn evaluate(pred: &Volume, gt: &Volume) -> Result<SegMetrics> {
    check_volumes(pred, gt)?;
    let split = |v: &Volume| {
        (0..v.channels())
            .map(|c| v.channel(c).to_vec())
            .collect::<Vec<_>>()
    };
    metrics_from_channels(&split(pred), &split(gt))
}

/// Metrics with pixels pooled per class over all `(pred, gt)` pairs.
pub fn evaluate_pooled<'a>(
    pairs: impl IntoIterator<Item = (&'a Volume, &'a Volume)>,
) -> Result<SegMetrics> {
    let mut pred_ch: Vec<Vec<f64>> = Vec::new();
    let mut gt_ch: Vec<Vec<f64>> = Vec::new();
    for (pred, gt) in pairs {
        check_volumes(pred, gt)?;
        if pred_ch.is_empty() {
            pred_ch.resize(pred.channels(), Vec::new());
            gt_ch.resize(gt.channels(), Vec::new());
        } else if pred_ch.len() != pred.channels() {
            return Err(Error::invalid(
                "evaluate_pooled",
                "channel count differs between samples",
            ));
        }
        for c in 0..pred.channels() {
            pred_ch[c].extend_from_slice(pred.channel(c));
            gt_ch[c].extend_from_slice(gt.channel(c));
        }
    }
    if pred_ch.is_empty() {
        return Err(Error::invalid("evaluate_pooled", "no samples"));
    }
    metrics_from_channels(&pred_ch, &gt_ch)
}

// ---- serialization ----

const MAGIC: &[u8; 5] = b"BVLG1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes `magic, C, H, W (u32 LE), seed (u64 LE), has-prediction (u8)`,
/// then the image as f64 LE, the ground-truth mask as one byte per entry
/// and, if present, the prediction as f64 LE.
pub fn write_sample(mut out: impl Write, sample: &SegSample) -> Result<()> {
    let (c, h, w) = sample.gt_mask.dims();
    if sample.image.dims() != (1, h, w) {
        return Err(Error::Format("image and mask sizes differ".into()));
    }
    out.write_all(MAGIC)?;
    for d in [c, h, w] {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        out.write_all(&d.to_le_bytes())?;
    }
    out.write_all(&sample.seed.to_le_bytes())?;
    out.write_all(&[u8::from(sample.predicted_mask.is_some())])?;
    for v in sample.image.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    let mask: Vec<u8> = sample
        .gt_mask
        .data()
        .iter()
        .map(|&v| u8::from(v > 0.5))
        .collect();
    out.write_all(&mask)?;
    if let Some(pred) = &sample.predicted_mask {
        if pred.dims() != (c, h, w) {
            return Err(Error::Format("prediction and mask sizes differ".into()));
        }
        for v in pred.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_sample(mut input: impl Read) -> Result<SegSample> {
    let mut magic = [0; 5];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let c = read_u32(&mut input)? as usize;
    let h = read_u32(&mut input)? as usize;
    let w = read_u32(&mut input)? as usize;
    let mut seed = [0; 8];
    input.read_exact(&mut seed)?;
    let mut flag = [0; 1];
    input.read_exact(&mut flag)?;
    let image = Volume::new(1, h, w, read_f64s(&mut input, h * w)?)?;
    let mut mask = vec![0u8; c * h * w];
    input.read_exact(&mut mask)?;
    if mask.iter().any(|&b| b > 1) {
        return Err(Error::Format("mask entries must be 0 or 1".into()));
    }
    let gt_mask = Volume::new(c, h, w, mask.iter().map(|&b| f64::from(b)).collect())?;
    let predicted_mask = match flag[0] {
        0 => None,
        1 => Some(Volume::new(c, h, w, read_f64s(&mut input, c * h * w)?)?),
        f => return Err(Error::Format(format!("bad prediction flag {f}"))),
    };
    Ok(SegSample {
        image,
        gt_mask,
        predicted_mask,
        seed: u64::from_le_bytes(seed),
    })
}

/// Plain-text dataset listing: a header line then `index<TAB>seed<TAB>spec`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub t1: f64,
    pub t2: f64,
    pub entries: Vec<(u64, SeveritySpec)>,
}

impl DatasetManifest {
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "# BVLG1 dataset h={} w={} t1={:?} t2={:?}",
            self.height, self.width, self.t1, self.t2
        )?;
        for (i, (seed, spec)) in self.entries.iter().enumerate() {
            writeln!(out, "{i}\t{seed}\t{spec}")?;
        }
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))??;
        let fields: Vec<&str> = header
            .strip_prefix("# BVLG1 dataset ")
            .ok_or_else(|| Error::Format(format!("bad manifest header {header:?}")))?
            .split(' ')
            .collect();
        let field = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find_map(|f| f.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| Error::Format(format!("manifest header lacks {key}")))
        };
        let num = |key: &str| -> Result<f64> {
            field(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {key}")))
        };
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [_, seed, spec] = parts[..] else {
                return Err(Error::Format(format!("bad manifest line {line:?}")));
            };
            let seed = seed
                .parse()
                .map_err(|_| Error::Format(format!("bad seed {seed:?}")))?;
            entries.push((seed, spec.parse()?));
        }
        Ok(Self {
            height: num("h")? as usize,
            width: num("w")? as usize,
            t1: num("t1")?,
            t2: num("t2")?,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{DEFAULT_T1, DEFAULT_T2};

    #[test]
    fn generation_is_deterministic() {
        let spec: SeveritySpec = "EX:high,MA:low".parse().unwrap();
        let a = gen_sample(11, 32, 32, &spec, DEFAULT_T1, DEFAULT_T2).unwrap();
        let b = gen_sample(11, 32, 32, &spec, DEFAULT_T1, DEFAULT_T2).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_sample(&mut ba, &a).unwrap();
        write_sample(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn high_band_is_reached() {
        let spec = SeveritySpec::single(LesionClass::HardExudates, SeverityLevel::High);
        for seed in 0..10 {
            let s = gen_sample(seed, 64, 64, &spec, DEFAULT_T1, DEFAULT_T2).unwrap();
            assert!(lesion_ratio(&s.gt_mask, LesionClass::HardExudates) >= 0.12);
            assert_eq!(s.present_classes(), vec![LesionClass::HardExudates]);
        }
    }

    #[test]
    fn every_band_for_every_class() {
        for class in LesionClass::ALL {
            for level in SeverityLevel::ALL {
                let spec = SeveritySpec::single(class, level);
                let s = gen_sample(3, 64, 64, &spec, DEFAULT_T1, DEFAULT_T2).unwrap();
                let r = lesion_ratio(&s.gt_mask, class);
                let got = crate::prompts::severity_level(r, DEFAULT_T1, DEFAULT_T2).unwrap();
                assert!(r > 0.0);
                assert_eq!(got, level, "{class} {level} ratio {r}");
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn bad_generation_requests() {
        let spec = SeveritySpec::single(LesionClass::HardExudates, SeverityLevel::Low);
        assert!(gen_sample(0, 8, 64, &spec, 0.06, 0.12).is_err());
        // a Low band narrower than one pixel cannot be met
        assert!(gen_sample(0, 16, 16, &spec, 0.001, 0.12).is_err());
        assert!("".parse::<SeveritySpec>().is_err());
        assert!("EX:high,EX:low".parse::<SeveritySpec>().is_err());
        assert!("XX:high".parse::<SeveritySpec>().is_err());
    }

    #[test]
    fn spec_round_trip() {
        let spec: SeveritySpec = "HE:mid, EX:low".parse().unwrap();
        assert_eq!(spec.to_string(), "EX:low,HE:mid");
        assert_eq!(spec.to_string().parse::<SeveritySpec>().unwrap(), spec);
    }

    #[test]
    fn metric_hand_cases() {
        let gt = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(f_score(&gt, &gt).unwrap(), 1.0);
        assert_eq!(aupr(&gt, &gt).unwrap(), 1.0);
        let pred = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert!((iou(&pred, &gt).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!((f_score(&pred, &gt).unwrap() - 0.5).abs() < 1e-15);
        assert!(iou(&pred[..4], &gt).is_err());
        assert!(aupr(&[1.5; 8], &gt).is_err());
        assert!(aupr(&pred, &[0.0; 8]).is_err());
    }

    #[test]
    fn inverted_ranking_gives_prevalence_floor() {
        let gt = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let scores: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        // all scores tie at the two levels: positives appear only once the
        // threshold admits every pixel, precision 2/8 at recall 1
        assert!((aupr(&scores, &gt).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn evaluation_skips_absent_classes() {
        let mut gt = Volume::zeros(2, 4, 4);
        gt.set(0, 0, 0, 1.0);
        let m = evaluate(&gt, &gt).unwrap();
        assert_eq!(m.iou, vec![Some(1.0), None]);
        assert_eq!(m.mean_iou, 1.0);
        let pooled = evaluate_pooled([(&gt, &gt), (&gt, &gt)]).unwrap();
        assert_eq!(pooled, m);
    }

    #[test]
    fn sample_round_trip() {
        let spec: SeveritySpec = "SE:mid".parse().unwrap();
        let mut s = gen_sample(5, 16, 20, &spec, DEFAULT_T1, DEFAULT_T2).unwrap();
        s.predicted_mask = Some(s.gt_mask.box_blur());
        let mut buf = Vec::new();
        write_sample(&mut buf, &s).unwrap();
        assert_eq!(&buf[..5], b"BVLG1");
        assert_eq!(read_sample(buf.as_slice()).unwrap(), s);
        buf[0] = b'X';
        assert!(read_sample(buf.as_slice()).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = DatasetManifest {
            height: 64,
            width: 64,
            t1: 0.06,
            t2: 0.12,
            entries: dataset_plan(9, 5),
        };
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(DatasetManifest::read(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn pixel_major_round_trip() {
        let mut v = Volume::zeros(3, 2, 5);
        v.set(2, 1, 4, 7.0);
        v.set(0, 0, 1, -1.0);
        let m = v.to_pixel_major();
        assert_eq!(m.get(9, 2), 7.0);
        assert_eq!(m.get(1, 0), -1.0);
        assert_eq!(Volume::from_pixel_major(&m, 2, 5).unwrap(), v);
    }
}
