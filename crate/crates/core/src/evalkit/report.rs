use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, iou_at, kld, mae, miou, sim};
use crate::error::{bail, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// How continuous scores are binarized for IoU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    Sweep,
    Threshold(f64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleKey {
    pub id: String,
    pub category: String,
    pub affordance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub category: String,
    pub affordance: String,
    pub miou: Option<f64>,
    pub auc: Option<f64>,
    pub sim: Option<f64>,
    pub mae: Option<f64>,
    pub kld: Option<f64>,
}

/// Mean over the samples where the metric is defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl Summary {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let mut s = Summary::default();
        let mut total = 0.0;
        for v in values {
            match v {
                Some(x) => {
                    total += x;
                    s.defined += 1;
                }
                None => s.undefined += 1,
            }
        }
        s.mean = (s.defined > 0).then(|| total / s.defined as f64);
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub miou: Summary,
    pub auc: Summary,
    pub sim: Summary,
    pub mae: Summary,
    pub kld: Summary,
}

impl Aggregate {
    pub fn of<'a>(samples: impl Iterator<Item = &'a SampleMetrics> + Clone) -> Self {
        Self {
            count: samples.clone().count(),
            miou: Summary::of(samples.clone().map(|s| s.miou)),
            auc: Summary::of(samples.clone().map(|s| s.auc)),
            sim: Summary::of(samples.clone().map(|s| s.sim)),
            mae: Summary::of(samples.clone().map(|s| s.mae)),
            kld: Summary::of(samples.map(|s| s.kld)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub split: String,
    pub iou_mode: IouMode,
    pub samples: Vec<SampleMetrics>,
    pub overall: Aggregate,
    pub by_affordance: BTreeMap<String, Aggregate>,
    pub by_category: BTreeMap<String, Aggregate>,
}

impl MetricReport {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

/// Metrics for one sample; ground-truth scores `>= 0.5` form the positive set.
pub fn sample_metrics(key: &SampleKey, pred: &[f64], gt: &[f64], mode: IouMode) -> SampleMetrics {
    let binary: Vec<bool> = gt.iter().map(|&g| g >= 0.5).collect();
    let iou = match mode {
        IouMode::Sweep => miou(pred, &binary),
        IouMode::Threshold(t) => {
            if binary.iter().any(|&b| b) {
                iou_at(pred, &binary, t)
            } else {
                None
            }
        }
    };
    SampleMetrics {
        id: key.id.clone(),
        category: key.category.clone(),
        affordance: key.affordance.clone(),
        miou: iou,
        auc: auc(pred, &binary),
        sim: sim(pred, gt),
        mae: mae(pred, gt),
        kld: kld(pred, gt),
    }
}

pub fn evaluate_dataset(
    predictions: &[ScoredSample],
    ground_truths: &[ScoredSample],
    keys: &[SampleKey],
    split: &str,
    mode: IouMode,
) -> Result<MetricReport> {
    if predictions.len() != keys.len() || ground_truths.len() != keys.len() {
        bail!(
            Alignment,
            "{} predictions, {} ground truths, {} keys",
            predictions.len(),
            ground_truths.len(),
            keys.len()
        );
    }
    let mut samples = Vec::with_capacity(keys.len());
    for ((p, t), k) in predictions.iter().zip(ground_truths).zip(keys) {
        if p.id != k.id || t.id != k.id {
            bail!(Alignment, "sample ids differ: prediction '{}', truth '{}', key '{}'", p.id, t.id, k.id);
        }
        if p.scores.len() != t.scores.len() {
            bail!(Alignment, "sample '{}' has {} scores for {} labels", k.id, p.scores.len(), t.scores.len());
        }
        samples.push(sample_metrics(k, &p.scores, &t.scores, mode));
    }
    Ok(report_from_samples(samples, split, mode))
}

pub fn report_from_samples(samples: Vec<SampleMetrics>, split: &str, mode: IouMode) -> MetricReport {
    let mut by_affordance: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut by_category: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_affordance.entry(s.affordance.clone()).or_default().push(i);
        by_category.entry(s.category.clone()).or_default().push(i);
    }
    let group = |m: BTreeMap<String, Vec<usize>>| -> BTreeMap<String, Aggregate> {
        m.into_iter().map(|(k, idx)| (k, Aggregate::of(idx.iter().map(|&i| &samples[i])))).collect()
    };
    let by_affordance = group(by_affordance);
    let by_category = group(by_category);
    MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        split: split.into(),
        iou_mode: mode,
        overall: Aggregate::of(samples.iter()),
        by_affordance,
        by_category,
        samples,
    }
}
