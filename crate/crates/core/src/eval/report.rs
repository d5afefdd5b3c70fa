//! Running a predictor over a dataset under distortions, and the text
//! formats for the results.

use std::fmt::Write as _;

use super::distort::{distort, distort_mask, resize_bilinear, Distortion};
use super::metrics::{f1_at, f1_curve, pixel_auc, FIXED_THRESHOLD, THRESHOLDS};
use super::{EvalError, Result};
use crate::forge::{sub_seed, DatasetManifest, Label};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::stub::FAKE;
use crate::tensor::Tensor;

/// What a predictor returns for one image.
#[derive(Debug, Clone)]
pub struct Localization {
    /// `[h, w]` probabilities, same size as the input image.
    pub mask_prob: Tensor<f32>,
    /// Whether the answer text carries `<FAKE>`.
    pub says_fake: bool,
}

/// Anything that can be scored. `truth` is the (distorted) ground truth;
/// real models ignore it, the reference baselines use it.
pub trait Localizer {
    fn localize(&mut self, image: &Tensor<f32>, truth: &Tensor<f32>) -> Result<Localization>;
}

/// A trained model. Images whose size differs from the model's input are
/// resized to it (bilinear) and the probability map is resized back.
pub struct ModelLocalizer<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore<f32>,
}

impl Localizer for ModelLocalizer<'_> {
    fn localize(&mut self, image: &Tensor<f32>, _truth: &Tensor<f32>) -> Result<Localization> {
        let s = self.model.cfg.image_size;
        let (h, w) = match *image.shape() {
            [_, h, w] => (h, w),
            ref other => return Err(EvalError::InvalidDistortion(format!("expected a [3, h, w] image, got {other:?}"))),
        };
        let native = (h, w) == (s, s);
        let input = if native { image.clone() } else { resize_bilinear(image, s, s)? };
        let pred = self.model.predict(self.store, &input)?;
        let mask_prob = if native { pred.mask_prob } else { resize_bilinear(&pred.mask_prob, h, w)? };
        Ok(Localization {
            mask_prob,
            says_fake: pred.text.contains(self.model.vocab.special(FAKE)),
        })
    }
}

/// Reference predictors for checking the harness itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// Returns the ground truth; says FAKE iff the mask is non-empty.
    Oracle,
    /// Returns `1 − gt`; says FAKE iff the mask is empty.
    AntiOracle,
    /// Returns `p` everywhere.
    Constant { p: f32, says_fake: bool },
}

impl Localizer for Baseline {
    fn localize(&mut self, _image: &Tensor<f32>, truth: &Tensor<f32>) -> Result<Localization> {
        let any = truth.data().iter().any(|&g| g > 0.5);
        let (mask_prob, says_fake) = match *self {
            Baseline::Oracle => (truth.clone(), any),
            Baseline::AntiOracle => (fill(truth, |g| 1.0 - g), !any),
            Baseline::Constant { p, says_fake } => (fill(truth, |_| p), says_fake),
        };
        Ok(Localization { mask_prob, says_fake })
    }
}

fn fill(t: &Tensor<f32>, f: impl Fn(f32) -> f32) -> Tensor<f32> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// How the "optimal" F1 threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Best threshold for each image separately.
    #[default]
    PerImage,
    /// One threshold for the whole set, maximising the mean F1.
    Dataset,
}

impl ThresholdMode {
    pub fn name(self) -> &'static str {
        match self {
            ThresholdMode::PerImage => "per-image",
            ThresholdMode::Dataset => "dataset",
        }
    }
}

impl std::str::FromStr for ThresholdMode {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" => Ok(ThresholdMode::PerImage),
            "dataset" => Ok(ThresholdMode::Dataset),
            _ => Err(EvalError::Report {
                line: 0,
                reason: format!("threshold mode {s:?}: expected per-image or dataset"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub threshold: ThresholdMode,
    /// Seeds the noise distortion; image `i` uses `sub_seed(seed, i)`.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: ThresholdMode::PerImage,
            seed: 0,
        }
    }
}

/// Scores for one distortion setting. Localisation scores are per-image
/// means over images whose ground truth has both classes; `None` when no
/// image qualifies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub f1_fixed: Option<f64>,
    pub f1_optimal: Option<f64>,
    pub auc: Option<f64>,
    /// FAKE samples answered `<FAKE>`.
    pub recall_fake: Option<f64>,
    /// REAL samples answered without `<FAKE>`.
    pub real_acc: Option<f64>,
    pub n_images: usize,
    /// Images used for the localisation scores.
    pub n_localized: usize,
    /// Images skipped because their ground truth is one-class.
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionScores {
    pub distortion: Distortion,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Column name when several reports are tabulated together.
    pub name: String,
    pub dataset: String,
    pub threshold: ThresholdMode,
    pub rows: Vec<DistortionScores>,
}

/// Scores `localizer` on every sample of `data` under each distortion.
pub fn evaluate(
    localizer: &mut dyn Localizer,
    data: &DatasetManifest,
    distortions: &[Distortion],
    name: &str,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    for d in distortions {
        d.validate()?;
    }
    let pairs = (0..data.len()).map(|i| data.load_pair(i)).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(distortions.len());
    for d in distortions {
        let mut acc = Accumulator::default();
        for (i, ((image, mask), rec)) in pairs.iter().zip(&data.records).enumerate() {
            let image = distort(image, d, sub_seed(opts.seed, i as u64))?;
            let mask = distort_mask(mask, d)?;
            let loc = localizer.localize(&image, &mask)?;
            acc.add(&loc, &mask, rec.label)?;
        }
        rows.push(DistortionScores {
            distortion: *d,
            scores: acc.finish(opts.threshold),
        });
    }
    Ok(MetricsReport {
        name: name.to_string(),
        dataset: data.root.display().to_string(),
        threshold: opts.threshold,
        rows,
    })
}

struct Accumulator {
    n: usize,
    f1_fixed: f64,
    f1_best: f64,
    curve: Vec<f64>,
    auc: f64,
    localized: usize,
    fake: usize,
    fake_hit: usize,
    real: usize,
    real_hit: usize,
}

impl Default for Accumulator {
    fn default() -> Self {
        Accumulator {
            n: 0,
            f1_fixed: 0.0,
            f1_best: 0.0,
            curve: vec![0.0; THRESHOLDS],
            auc: 0.0,
            localized: 0,
            fake: 0,
            fake_hit: 0,
            real: 0,
            real_hit: 0,
        }
    }
}

impl Accumulator {
    fn add(&mut self, loc: &Localization, gt: &Tensor<f32>, label: Label) -> Result<()> {
        self.n += 1;
        match label {
            Label::Fake => {
                self.fake += 1;
                self.fake_hit += loc.says_fake as usize;
            }
            Label::Real => {
                self.real += 1;
                self.real_hit += !loc.says_fake as usize;
            }
        }
        let Some(auc) = pixel_auc(&loc.mask_prob, gt)? else {
            return Ok(());
        };
        let curve = f1_curve(&loc.mask_prob, gt)?;
        self.localized += 1;
        self.auc += auc;
        self.f1_fixed += f1_at(&loc.mask_prob, gt, FIXED_THRESHOLD)?;
        self.f1_best += curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (a, c) in self.curve.iter_mut().zip(curve) {
            *a += c;
        }
        Ok(())
    }

    fn finish(&self, mode: ThresholdMode) -> Scores {
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        let best = match mode {
            ThresholdMode::PerImage => self.f1_best,
            ThresholdMode::Dataset => self.curve.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        Scores {
            f1_fixed: mean(self.f1_fixed, self.localized),
            f1_optimal: mean(best, self.localized),
            auc: mean(self.auc, self.localized),
            recall_fake: mean(self.fake_hit as f64, self.fake),
            real_acc: mean(self.real_hit as f64, self.real),
            n_images: self.n,
            n_localized: self.localized,
            n_excluded: self.n - self.localized,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn opt_fixed(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn row(&self, d: &Distortion) -> Option<&Scores> {
        self.rows.iter().find(|r| r.distortion == *d).map(|r| &r.scores)
    }

    /// Key-value records: a header block, then one block per distortion,
    /// separated by blank lines. Values print at full precision so the
    /// text parses back to the same numbers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "threshold = {}", self.threshold.name());
        for r in &self.rows {
            let c = &r.scores;
            let _ = write!(
                s,
                "\ndistortion = {}\nf1_fixed = {}\nf1_optimal = {}\nauc = {}\nrecall_fake = {}\nreal_acc = {}\nn_images = {}\nn_localized = {}\nn_excluded = {}\n",
                r.distortion,
                opt(c.f1_fixed),
                opt(c.f1_optimal),
                opt(c.auc),
                opt(c.recall_fake),
                opt(c.real_acc),
                c.n_images,
                c.n_localized,
                c.n_excluded
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = MetricsReport {
            name: String::new(),
            dataset: String::new(),
            threshold: ThresholdMode::PerImage,
            rows: Vec::new(),
        };
        let mut current: Option<(usize, Distortion, Vec<(String, String)>)> = None;
        let mut blocks = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| EvalError::Report {
                line: lineno,
                reason: format!("expected `key = value`, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            match (k, &mut current) {
                ("distortion", _) => {
                    let d = v.parse::<Distortion>().map_err(|e| EvalError::Report {
                        line: lineno,
                        reason: e.to_string(),
                    })?;
                    if let Some(b) = current.take() {
                        blocks.push(b);
                    }
                    current = Some((lineno, d, Vec::new()));
                }
                (_, Some((_, _, fields))) => fields.push((k.to_string(), v.to_string())),
                ("name", None) => report.name = v.to_string(),
                ("dataset", None) => report.dataset = v.to_string(),
                ("threshold", None) => {
                    report.threshold = v.parse().map_err(|_| EvalError::Report {
                        line: lineno,
                        reason: format!("threshold {v:?}: expected per-image or dataset"),
                    })?
                }
                (other, None) => {
                    return Err(EvalError::Report {
                        line: lineno,
                        reason: format!("unknown header key {other:?}"),
                    })
                }
            }
        }
        blocks.extend(current);
        for (line, distortion, fields) in blocks {
            let get = |key: &str| {
                fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).ok_or_else(|| EvalError::Report {
                    line,
                    reason: format!("record {distortion} is missing {key}"),
                })
            };
            let bad = |key: &str, v: &str| EvalError::Report {
                line,
                reason: format!("record {distortion}: {key} = {v:?} is not a number"),
            };
            let score = |key: &str| -> Result<Option<f64>> {
                match get(key)? {
                    "none" => Ok(None),
                    v => v.parse().map(Some).map_err(|_| bad(key, v)),
                }
            };
            let count = |key: &str| -> Result<usize> {
                let v = get(key)?;
                v.parse().map_err(|_| bad(key, v))
            };
            if let Some((k, _)) = fields.iter().find(|(k, _)| !SCORE_KEYS.contains(&k.as_str())) {
                return Err(EvalError::Report {
                    line,
                    reason: format!("record {distortion}: unknown key {k:?}"),
                });
            }
            report.rows.push(DistortionScores {
                distortion,
                scores: Scores {
                    f1_fixed: score("f1_fixed")?,
                    f1_optimal: score("f1_optimal")?,
                    auc: score("auc")?,
                    recall_fake: score("recall_fake")?,
                    real_acc: score("real_acc")?,
                    n_images: count("n_images")?,
                    n_localized: count("n_localized")?,
                    n_excluded: count("n_excluded")?,
                },
            });
        }
        Ok(report)
    }

    /// One report as a table: distortions down, metrics across.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("distortion,f1_fixed,f1_optimal,auc,recall_fake,real_acc,n_images\n");
        for r in &self.rows {
            let c = &r.scores;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.distortion.label(),
                opt_fixed(c.f1_fixed),
                opt_fixed(c.f1_optimal),
                opt_fixed(c.auc),
                opt_fixed(c.recall_fake),
                opt_fixed(c.real_acc),
                c.n_images
            );
        }
        s
    }
}

const SCORE_KEYS: [&str; 8] = [
    "f1_fixed",
    "f1_optimal",
    "auc",
    "recall_fake",
    "real_acc",
    "n_images",
    "n_localized",
    "n_excluded",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    F1Fixed,
    F1Optimal,
    Auc,
    RecallFake,
}

impl Metric {
    pub fn of(self, s: &Scores) -> Option<f64> {
        match self {
            Metric::F1Fixed => s.f1_fixed,
            Metric::F1Optimal => s.f1_optimal,
            Metric::Auc => s.auc,
            Metric::RecallFake => s.recall_fake,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1_fixed" => Ok(Metric::F1Fixed),
            "f1_optimal" => Ok(Metric::F1Optimal),
            "auc" => Ok(Metric::Auc),
            "recall_fake" => Ok(Metric::RecallFake),
            _ => Err(EvalError::Report {
                line: 0,
                reason: format!("metric {s:?}: expected f1_fixed, f1_optimal, auc or recall_fake"),
            }),
        }
    }
}

/// Robustness table: the undistorted row first, then the battery in order
/// (plus any other distortion found), one column per report.
pub fn robustness_table(reports: &[MetricsReport], metric: Metric) -> String {
    let mut order = vec![Distortion::None];
    order.extend(Distortion::battery());
    for r in reports {
        for row in &r.rows {
            if !order.contains(&row.distortion) {
                order.push(row.distortion);
            }
        }
    }
    order.retain(|d| reports.iter().any(|r| r.row(d).is_some()));
    let mut s = String::from("Distortion");
    for r in reports {
        s.push(',');
        s.push_str(&r.name);
    }
    s.push('\n');
    for d in order {
        s.push_str(&match d {
            Distortion::None => "w/o distortion".to_string(),
            _ => d.label(),
        });
        for r in reports {
            s.push(',');
            s.push_str(&opt_fixed(r.row(&d).and_then(|c| metric.of(c))));
        }
        s.push('\n');
    }
    s
}
