//! Class-aware and severity-aware prompt rendering, lesion-ratio
//! quantization, and the text-embedding providers.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnum::DenseMatrix;
use crate::error::{Error, Result};
use crate::synthdata::Volume;

/// Default lower lesion-ratio threshold.
pub const DEFAULT_T1: f64 = 0.06;
/// Default upper lesion-ratio threshold.
pub const DEFAULT_T2: f64 = 0.12;

/// The four retinal lesion classes, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LesionClass {
    #[serde(rename = "EX")]
    HardExudates,
    #[serde(rename = "HE")]
    Hemorrhages,
    #[serde(rename = "SE")]
    SoftExudates,
    #[serde(rename = "MA")]
    Microaneurysms,
}

impl LesionClass {
    pub const ALL: [LesionClass; 4] = [
        LesionClass::HardExudates,
        LesionClass::Hemorrhages,
        LesionClass::SoftExudates,
        LesionClass::Microaneurysms,
    ];

    /// Channel index in masks.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            LesionClass::HardExudates => "EX",
            LesionClass::Hemorrhages => "HE",
            LesionClass::SoftExudates => "SE",
            LesionClass::Microaneurysms => "MA",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            LesionClass::HardExudates => "hard exudates",
            LesionClass::Hemorrhages => "hemorrhages",
            LesionClass::SoftExudates => "soft exudates",
            LesionClass::Microaneurysms => "microaneurysms",
        }
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for LesionClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid("LesionClass", format!("unknown class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityLevel {
    Low,
    Mid,
    High,
}

impl SeverityLevel {
    pub const ALL: [SeverityLevel; 3] =
        [SeverityLevel::Low, SeverityLevel::Mid, SeverityLevel::High];

    pub fn name(self) -> &'static str {
        match self {
            SeverityLevel::Low => "low",
            SeverityLevel::Mid => "mid",
            SeverityLevel::High => "high",
        }
    }
}

impl fmt::Display for SeverityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeverityLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(SeverityLevel::Low),
            "mid" | "medium" => Ok(SeverityLevel::Mid),
            "high" => Ok(SeverityLevel::High),
            _ => Err(Error::invalid(
                "SeverityLevel",
                format!("unknown level {s:?}"),
            )),
        }
    }
}

/// Adjective vocabulary used to voice a severity level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjectiveGroup {
    Amount,
    Density,
    Severity,
}

impl AdjectiveGroup {
    pub const ALL: [AdjectiveGroup; 3] = [
        AdjectiveGroup::Amount,
        AdjectiveGroup::Density,
        AdjectiveGroup::Severity,
    ];

    pub fn adjectives(self) -> [&'static str; 3] {
        match self {
            AdjectiveGroup::Amount => ["few", "some", "many"],
            AdjectiveGroup::Density => ["low-density", "medium-density", "high-density"],
            AdjectiveGroup::Severity => ["low-severity", "medium-severity", "high-severity"],
        }
    }

    pub fn adjective(self, level: SeverityLevel) -> &'static str {
        self.adjectives()[level as usize]
    }

    pub fn name(self) -> &'static str {
        match self {
            AdjectiveGroup::Amount => "amount",
            AdjectiveGroup::Density => "density",
            AdjectiveGroup::Severity => "severity",
        }
    }
}

impl FromStr for AdjectiveGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "amount" => Ok(AdjectiveGroup::Amount),
            "density" => Ok(AdjectiveGroup::Density),
            "severity" => Ok(AdjectiveGroup::Severity),
            _ => Err(Error::invalid(
                "AdjectiveGroup",
                format!("unknown group {s:?}"),
            )),
        }
    }
}

/// Adjective group per lesion class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupChoice([AdjectiveGroup; 4]);

impl GroupChoice {
    pub fn uniform(group: AdjectiveGroup) -> Self {
        Self([group; 4])
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self(std::array::from_fn(|_| {
            AdjectiveGroup::ALL[rng.random_range(0..3)]
        }))
    }

    pub fn with(mut self, class: LesionClass, group: AdjectiveGroup) -> Self {
        self.0[class.index()] = group;
        self
    }

    pub fn get(&self, class: LesionClass) -> AdjectiveGroup {
        self.0[class.index()]
    }
}

/// The severity-aware sentence templates; `[ADJ] [CLS]` is the slot.
pub const SEVERITY_TEMPLATES: [&str; 5] = [
    "This fundus image has [ADJ] [CLS].",
    "There are [ADJ] [CLS] in this fundus image.",
    "A fundus image with [ADJ] [CLS].",
    "A diabetic retinopathy image has [ADJ] [CLS].",
    "[ADJ] [CLS] in a diabetic retinopathy fundus image.",
];

const SLOT: &str = "[ADJ] [CLS]";

/// Sentence used when a mask has no lesion at all.
pub const NO_LESION_PROMPT: &str = "This fundus image has no lesions.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub class: LesionClass,
    pub level: Option<SeverityLevel>,
    pub group: Option<AdjectiveGroup>,
}

/// Rendered prompt text with the facts it was rendered from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalPrompt {
    pub text: String,
    /// Severity template (1–5); `None` for class prompts.
    pub template_index: Option<u8>,
    pub records: Vec<PromptRecord>,
}

/// Present classes with their severity, in canonical class order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SeverityProfile(Vec<(LesionClass, SeverityLevel)>);

impl SeverityProfile {
    pub fn new(mut entries: Vec<(LesionClass, SeverityLevel)>) -> Result<Self> {
        entries.sort_by_key(|(c, _)| *c);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("SeverityProfile", "duplicate lesion class"));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[(LesionClass, SeverityLevel)] {
        &self.0
    }

    pub fn classes(&self) -> Vec<LesionClass> {
        self.0.iter().map(|(c, _)| *c).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fraction of the image covered by `cls`.
pub fn lesion_ratio(mask: &Volume, cls: LesionClass) -> f64 {
    let (_, h, w) = mask.dims();
    let count = mask
        .channel(cls.index())
        .iter()
        .filter(|&&v| v > 0.5)
        .count();
    count as f64 / (h * w) as f64
}

/// `Low` below `t1`, `Mid` on `[t1, t2)`, `High` from `t2` up.
pub fn severity_level(ratio: f64, t1: f64, t2: f64) -> Result<SeverityLevel> {
    if !(0.0 <= t1 && t1 < t2) {
        return Err(Error::invalid(
            "severity_level",
            format!("thresholds must satisfy 0 <= t1 < t2, got t1={t1}, t2={t2}"),
        ));
    }
    Ok(if ratio < t1 {
        SeverityLevel::Low
    } else if ratio < t2 {
        SeverityLevel::Mid
    } else {
        SeverityLevel::High
    })
}

pub fn severity_profile(mask: &Volume, t1: f64, t2: f64) -> Result<SeverityProfile> {
    let mut entries = Vec::new();
    for cls in LesionClass::ALL.into_iter().take(mask.channels()) {
        let ratio = lesion_ratio(mask, cls);
        if ratio > 0.0 {
            entries.push((cls, severity_level(ratio, t1, t2)?));
        }
    }
    SeverityProfile::new(entries)
}

/// `"A fundus image with {class name}"`.
pub fn class_prompt(cls: LesionClass) -> MedicalPrompt {
    MedicalPrompt {
        text: format!("A fundus image with {}", cls.display_name()),
        template_index: None,
        records: vec![PromptRecord {
            class: cls,
            level: None,
            group: None,
        }],
    }
}

/// Renders a profile into severity template `template_index` (1–5).
pub fn render_severity(
    profile: &SeverityProfile,
    template_index: u8,
    groups: &GroupChoice,
) -> Result<MedicalPrompt> {
    let template = template_index
        .checked_sub(1)
        .and_then(|i| SEVERITY_TEMPLATES.get(i as usize))
        .ok_or_else(|| {
            Error::invalid(
                "severity_prompt",
                format!("template index {template_index} outside 1..=5"),
            )
        })?;
    if profile.is_empty() {
        return Ok(MedicalPrompt {
            text: NO_LESION_PROMPT.to_string(),
            template_index: Some(template_index),
            records: Vec::new(),
        });
    }
    let mut records = Vec::new();
    let phrases: Vec<String> = profile
        .entries()
        .iter()
        .map(|&(class, level)| {
            let group = groups.get(class);
            records.push(PromptRecord {
                class,
                level: Some(level),
                group: Some(group),
            });
            format!("{} {}", group.adjective(level), class.display_name())
        })
        .collect();
    Ok(MedicalPrompt {
        text: template.replace(SLOT, &phrases.join(" and ")),
        template_index: Some(template_index),
        records,
    })
}

pub fn severity_prompt(
    mask: &Volume,
    template_index: u8,
    groups: &GroupChoice,
    t1: f64,
    t2: f64,
) -> Result<MedicalPrompt> {
    render_severity(&severity_profile(mask, t1, t2)?, template_index, groups)
}

/// Source of unit-norm prompt embeddings.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<DenseMatrix>;
}

/// Deterministic stand-in for a language model: each whitespace token hashes
/// to a seeded pseudo-Gaussian vector; the prompt vector is the normalized
/// mean of its tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

fn fnv1a(seed: u64, token: &str) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<DenseMatrix> {
        if self.dim == 0 {
            return Err(Error::invalid(
                "embed_prompt",
                "dimension must be at least 1",
            ));
        }
        let mut acc = vec![0.0; self.dim];
        for token in text.split_whitespace() {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, token));
            for a in acc.iter_mut() {
                *a += rng.sample::<f64, _>(StandardNormal);
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // empty text: fixed basis direction
            acc[0] = 1.0;
        } else {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        DenseMatrix::new(1, self.dim, acc)
    }
}

pub fn embed_prompt(prompt: &MedicalPrompt, dim: usize, seed: u64) -> Result<DenseMatrix> {
    HashEmbedder { dim, seed }.embed(&prompt.text)
}

/// Embeddings loaded verbatim from a text file.
///
/// Format: a `DIM <d>` header line, then one `<prompt>\t<d floats>` line per
/// prompt. Lookup is by exact prompt text. Unknown prompts are rejected in
/// strict mode and fall back to the hash embedder otherwise.
#[derive(Debug, Clone)]
pub struct FileEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    strict: bool,
    fallback: HashEmbedder,
}

impl FileEmbeddings {
    pub fn read(reader: impl BufRead, strict: bool, fallback_seed: u64) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("embedding file is empty".into()))??;
        let dim: usize = header
            .strip_prefix("DIM ")
            .and_then(|d| d.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Format(format!("bad header {header:?}, expected \"DIM <d>\"")))?;
        let mut table = HashMap::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (text, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: missing tab", n + 2)))?;
            let values: Vec<f64> = values
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?;
            if values.len() != dim || values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "line {}: expected {dim} finite values, got {}",
                    n + 2,
                    values.len()
                )));
            }
            table.insert(text.to_string(), values);
        }
        Ok(Self {
            dim,
            table,
            strict,
            fallback: HashEmbedder {
                dim,
                seed: fallback_seed,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<DenseMatrix> {
        match self.table.get(text) {
            Some(v) => DenseMatrix::new(1, self.dim, v.clone()),
            None if self.strict => Err(Error::invalid(
                "embed_prompt",
                format!("no embedding for prompt {text:?}"),
            )),
            None => self.fallback.embed(text),
        }
    }
}

/// Writes embeddings in the format read by [`FileEmbeddings::read`].
pub fn write_embeddings<'a>(
    mut out: impl Write,
    dim: usize,
    entries: impl IntoIterator<Item = (&'a str, &'a DenseMatrix)>,
) -> Result<()> {
    writeln!(out, "DIM {dim}")?;
    for (text, v) in entries {
        if text.contains('\t') || text.contains('\n') {
            return Err(Error::Format(format!(
                "prompt {text:?} contains a tab or newline"
            )));
        }
        if v.len() != dim {
            return Err(Error::Format(format!(
                "embedding for {text:?} has {} values",
                v.len()
            )));
        }
        let values: Vec<String> = v.data().iter().map(|x| format!("{x:?}")).collect();
        writeln!(out, "{text}\t{}", values.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask_with(pixels: &[(LesionClass, usize)], h: usize, w: usize) -> Volume {
        let mut v = Volume::zeros(4, h, w);
        for &(cls, n) in pixels {
            for i in 0..n {
                v.set(cls.index(), i / w, i % w, 1.0);
            }
        }
        v
    }

    #[test]
    fn ratio_cases() {
        let empty = Volume::zeros(4, 64, 64);
        assert_eq!(lesion_ratio(&empty, LesionClass::HardExudates), 0.0);
        let full = mask_with(&[(LesionClass::Hemorrhages, 4096)], 64, 64);
        assert_eq!(lesion_ratio(&full, LesionClass::Hemorrhages), 1.0);
        let some = mask_with(&[(LesionClass::SoftExudates, 410)], 64, 64);
        assert!((lesion_ratio(&some, LesionClass::SoftExudates) - 410.0 / 4096.0).abs() < 1e-15);
    }

    #[test]
    fn level_bands_and_boundaries() {
        let lvl = |r| severity_level(r, DEFAULT_T1, DEFAULT_T2).unwrap();
        assert_eq!(lvl(0.03), SeverityLevel::Low);
        assert_eq!(lvl(0.06), SeverityLevel::Mid);
        assert_eq!(lvl(0.12), SeverityLevel::High);
        assert_eq!(lvl(0.5), SeverityLevel::High);
        assert!(severity_level(0.1, 0.2, 0.2).is_err());
        assert!(severity_level(0.1, 0.3, 0.2).is_err());
    }

    #[test]
    fn class_prompts() {
        assert_eq!(
            class_prompt(LesionClass::HardExudates).text,
            "A fundus image with hard exudates"
        );
        assert_eq!(
            class_prompt(LesionClass::Microaneurysms).text,
            "A fundus image with microaneurysms"
        );
        assert_eq!(
            class_prompt(LesionClass::Hemorrhages),
            class_prompt(LesionClass::Hemorrhages)
        );
    }

    #[test]
    fn worked_example_sentence() {
        let profile = SeverityProfile::new(vec![
            (LesionClass::Hemorrhages, SeverityLevel::High),
            (LesionClass::HardExudates, SeverityLevel::Low),
        ])
        .unwrap();
        let groups = GroupChoice::uniform(AdjectiveGroup::Amount)
            .with(LesionClass::HardExudates, AdjectiveGroup::Density)
            .with(LesionClass::Hemorrhages, AdjectiveGroup::Severity);
        let p = render_severity(&profile, 1, &groups).unwrap();
        assert_eq!(
            p.text,
            "This fundus image has low-density hard exudates and high-severity hemorrhages."
        );
    }

    #[test]
    fn mask_driven_prompt() {
        // 300 of 4096 pixels is 0.073, inside the middle band
        let mask = mask_with(&[(LesionClass::SoftExudates, 300)], 64, 64);
        let p = severity_prompt(
            &mask,
            3,
            &GroupChoice::uniform(AdjectiveGroup::Amount),
            DEFAULT_T1,
            DEFAULT_T2,
        )
        .unwrap();
        assert_eq!(p.text, "A fundus image with some soft exudates.");
        let empty = Volume::zeros(4, 16, 16);
        let p = severity_prompt(
            &empty,
            2,
            &GroupChoice::uniform(AdjectiveGroup::Amount),
            0.06,
            0.12,
        )
        .unwrap();
        assert_eq!(p.text, NO_LESION_PROMPT);
        assert!(severity_prompt(
            &mask,
            0,
            &GroupChoice::uniform(AdjectiveGroup::Amount),
            0.06,
            0.12
        )
        .is_err());
        assert!(severity_prompt(
            &mask,
            6,
            &GroupChoice::uniform(AdjectiveGroup::Amount),
            0.06,
            0.12
        )
        .is_err());
    }

    #[test]
    fn embedding_is_deterministic_unit_norm() {
        let p = class_prompt(LesionClass::SoftExudates);
        let a = embed_prompt(&p, 16, 3).unwrap();
        let b = embed_prompt(&p, 16, 3).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(embed_prompt(&p, 0, 3).is_err());
    }

    #[test]
    fn one_adjective_changes_embedding() {
        let few = MedicalPrompt {
            text: "This fundus image has few hemorrhages.".into(),
            template_index: Some(1),
            records: vec![],
        };
        let many = MedicalPrompt {
            text: "This fundus image has many hemorrhages.".into(),
            ..few.clone()
        };
        for seed in 0..100 {
            let a = embed_prompt(&few, 16, seed).unwrap();
            let b = embed_prompt(&many, 16, seed).unwrap();
            let cos: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            assert!(cos < 1.0 - 1e-9, "seed {seed}: cos {cos}");
        }
    }

    #[test]
    fn embedding_file_round_trip_and_strictness() {
        let v = DenseMatrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, 2, [("A fundus image with hard exudates", &v)]).unwrap();
        let strict = FileEmbeddings::read(buf.as_slice(), true, 0).unwrap();
        assert_eq!(
            strict.embed("A fundus image with hard exudates").unwrap(),
            v
        );
        assert!(strict.embed("unknown").is_err());
        let lenient = FileEmbeddings::read(buf.as_slice(), false, 0).unwrap();
        assert_eq!(lenient.embed("unknown").unwrap().shape(), (1, 2));
        assert!(FileEmbeddings::read("DIM x\n".as_bytes(), true, 0).is_err());
        assert!(FileEmbeddings::read("DIM 2\nfoo\t1.0\n".as_bytes(), true, 0).is_err());
    }

    fn arb_profile() -> impl Strategy<Value = (SeverityProfile, [usize; 4])> {
        (
            proptest::collection::vec(proptest::option::of(0usize..3), 4),
            proptest::array::uniform4(0usize..3),
        )
            .prop_map(|(levels, groups)| {
                let entries = levels
                    .iter()
                    .enumerate()
                    .filter_map(|(i, l)| l.map(|l| (LesionClass::ALL[i], SeverityLevel::ALL[l])))
                    .collect();
                (SeverityProfile::new(entries).unwrap(), groups)
            })
    }

    proptest! {
        #[test]
        fn level_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(severity_level(lo, DEFAULT_T1, DEFAULT_T2).unwrap()
                <= severity_level(hi, DEFAULT_T1, DEFAULT_T2).unwrap());
        }

        #[test]
        fn rendering_follows_template_and_records((profile, g) in arb_profile(), t in 1u8..=5) {
            let mut groups = GroupChoice::uniform(AdjectiveGroup::Amount);
            for (cls, gi) in LesionClass::ALL.into_iter().zip(g) {
                groups = groups.with(cls, AdjectiveGroup::ALL[gi]);
            }
            let p = render_severity(&profile, t, &groups).unwrap();
            if profile.is_empty() {
                prop_assert_eq!(p.text.as_str(), NO_LESION_PROMPT);
                return Ok(());
            }
            let template = SEVERITY_TEMPLATES[t as usize - 1];
            let (prefix, suffix) = template.split_once(SLOT).unwrap();
            prop_assert!(p.text.starts_with(prefix) && p.text.ends_with(suffix));
            let slot = &p.text[prefix.len()..p.text.len() - suffix.len()];
            let phrases: Vec<&str> = slot.split(" and ").collect();
            prop_assert_eq!(phrases.len(), p.records.len());
            for (phrase, rec) in phrases.iter().zip(&p.records) {
                let group = rec.group.unwrap();
                let adj = group.adjective(rec.level.unwrap());
                prop_assert!(group.adjectives().contains(&adj));
                prop_assert_eq!(phrase.to_string(), format!("{} {}", adj, rec.class.display_name()));
            }
        }
    }
}
