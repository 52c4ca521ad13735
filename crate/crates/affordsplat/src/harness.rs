//! Stage drivers behind the CLI: dataset generation, the two training
//! stages, evaluation, prediction and reporting.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use affordsplat_core::autograd::Graph;
use affordsplat_core::datagen::{
    affordances_of, build_splits_with, corpus, generate_dataset, make_instruction, template_listing, Dataset, DatasetSplit,
    CATEGORIES, QUESTION_TEMPLATES,
};
use affordsplat_core::evalkit::{evaluate_dataset, miou, IouMode, MetricReport, SampleKey, ScoredSample};
use affordsplat_core::gscore::{extract_struct, make_batch, GaussianObject};
use affordsplat_core::params::ParamStore;
use affordsplat_core::textmod::{TokenSequence, Vocabulary};
use affordsplat_core::train::{predict_samples, EpochStats, Model, Prepared, Sequential, Stage, Trainer};
use affordsplat_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::compact::{load_dataset, save_dataset};
use crate::config::{ExperimentConfig, Subset};
use crate::error::{Error, Result};
use crate::ply::{load_gaussian_ply, write_colored_ply};
use crate::scores::write_scores;

pub const DATASET_FILE: &str = "dataset.afs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

/// Split, vocabulary and templates of a generated dataset, for people and
/// tools that do not read the compact format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_file: String,
    pub dataset_seed: u64,
    pub fingerprint: u64,
    pub objects: usize,
    pub samples: usize,
    pub pairs: Vec<(String, String)>,
    pub split: DatasetSplit,
    pub vocabulary: Vec<String>,
    pub question_templates: Vec<String>,
    pub answer_templates: Vec<String>,
}

/// Words of every template filled with every generator pair, so held-out
/// pairs never tokenize to unknowns.
pub fn vocabulary_for(ds: &Dataset) -> Vocabulary {
    let mut pairs: Vec<(String, String)> = CATEGORIES
        .iter()
        .flat_map(|&c| affordances_of(c).unwrap_or(&[]).iter().map(move |&a| (c.to_string(), a.to_string())))
        .collect();
    pairs.extend(ds.pairs());
    pairs.sort();
    pairs.dedup();
    Vocabulary::build(&corpus(pairs.iter().map(|(c, a)| (c.as_str(), a.as_str()))))
}

/// The split is seeded by the dataset, not the training run, so every stage
/// and the manifest agree on it.
pub fn resolve_split(cfg: &ExperimentConfig, ds: &Dataset) -> Result<DatasetSplit> {
    Ok(build_splits_with(&ds.sample_keys(), cfg.split_mode(), cfg.holdout(), ds.config.seed)?)
}

pub fn sample_indices(ds: &Dataset, ids: &[String]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    ids.iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::format(format!("split names unknown sample '{id}'"))))
        .collect()
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(ExperimentConfig::require_path(&cfg.data, "data")?)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<Option<PathBuf>> {
    match &cfg.out {
        None => Ok(None),
        Some(p) => {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            Ok(Some(p.clone()))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct Generated {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub manifest: Manifest,
}

/// Generates the corpus; with `out` set, writes the compact file and manifest there.
pub fn run_datagen(cfg: &ExperimentConfig) -> Result<Generated> {
    let dataset = generate_dataset(&cfg.dataset()?)?;
    let split = resolve_split(cfg, &dataset)?;
    let (question_templates, answer_templates) = template_listing();
    let manifest = Manifest {
        dataset_file: DATASET_FILE.into(),
        dataset_seed: dataset.config.seed,
        fingerprint: dataset.fingerprint(),
        objects: dataset.objects.len(),
        samples: dataset.samples.len(),
        pairs: dataset.pairs(),
        split: split.clone(),
        vocabulary: vocabulary_for(&dataset).tokens().to_vec(),
        question_templates,
        answer_templates,
    };
    if let Some(dir) = out_dir(cfg)? {
        save_dataset(dir.join(DATASET_FILE), &dataset)?;
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    Ok(Generated { dataset, split, manifest })
}

/// What an epoch observer sees.
pub struct EpochEvent<'a> {
    pub stats: &'a EpochStats,
    pub val_miou: Option<f64>,
    pub store: &'a ParamStore,
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Parameters to train from: a fresh model, or a copy of `init` after
/// checking the configuration agrees with it.
fn starting_point(cfg: &ExperimentConfig, ds: &Dataset, init: Option<&Checkpoint>) -> Result<(ParamStore, Model, Vocabulary)> {
    match init {
        Some(ck) => {
            check_compatible(cfg, ck)?;
            Ok((ck.store.clone(), ck.header.model.clone(), ck.vocabulary()?))
        }
        None => {
            let vocab = vocabulary_for(ds);
            let model_cfg = cfg.model()?;
            let mut store = ParamStore::new();
            let model = Model::new(&mut store, model_cfg, cfg.cmsa(model_cfg.d)?, vocab.len(), cfg.require_seed()?)?;
            Ok((store, model, vocab))
        }
    }
}

/// Explicit architecture keys must describe the checkpoint's network.
pub fn check_compatible(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    let have = ck.header.model.net.cfg;
    if cfg.sets_model() {
        let want = cfg.model_on(have)?;
        if want != have {
            return Err(CoreError::Compatibility(format!("configuration asks for {want:?} but the checkpoint holds {have:?}")).into());
        }
    }
    let cm = &ck.header.model.cmsa.cfg;
    if cfg.d_consis.is_some_and(|v| v != cm.d_consis) || cfg.pc_points.is_some_and(|v| v != cm.pc_points) {
        return Err(CoreError::Compatibility("alignment settings differ from the checkpoint".into()).into());
    }
    if ck.store.len() != ck.header.params.len() {
        return Err(CoreError::Compatibility("checkpoint parameter table is inconsistent".into()).into());
    }
    Ok(())
}

/// Mean sweep mIoU of each sample under its own question, one object at a time.
pub fn own_question_miou(store: &ParamStore, model: &Model, ds: &Dataset, prep: &Prepared, samples: &[usize]) -> Result<Option<f64>> {
    let questions: Vec<TokenSequence> = samples.iter().map(|&s| prep.questions[s].clone()).collect();
    let scores = predict_samples(store, model, ds, prep, samples, &questions, 1, &Sequential)?;
    let vals: Vec<f64> = samples
        .iter()
        .zip(&scores)
        .filter_map(|(&s, p)| miou(p, &ds.ground_truth(&ds.samples[s]).binary_view()))
        .collect();
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

pub fn run_pretrain(cfg: &ExperimentConfig, ds: &Dataset, split: &DatasetSplit) -> Result<Checkpoint> {
    run_stage(Stage::Pretrain, cfg, ds, split, None, &mut |_| Control::Continue)
}

pub fn run_finetune(cfg: &ExperimentConfig, ds: &Dataset, split: &DatasetSplit, init: Option<&Checkpoint>) -> Result<Checkpoint> {
    run_stage(Stage::Finetune, cfg, ds, split, init, &mut |_| Control::Continue)
}

/// Trains one stage on `split.train`, calling `observer` after every epoch.
///
/// Finetuning validates on `split.val` each epoch (unless `select_best` is
/// off or the split has no validation ids) and returns the parameters of the
/// best epoch; otherwise the last epoch's parameters are returned.
pub fn run_stage(
    stage: Stage,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    split: &DatasetSplit,
    init: Option<&Checkpoint>,
    observer: &mut dyn FnMut(&EpochEvent) -> Control,
) -> Result<Checkpoint> {
    let stage_cfg = cfg.stage(stage)?;
    let (mut store, model, vocab) = starting_point(cfg, ds, init)?;
    let prep = Prepared::new(ds, &vocab);
    let train = sample_indices(ds, &split.train)?;
    let val = sample_indices(ds, &split.val)?;
    let validate = stage == Stage::Finetune && cfg.select_best.unwrap_or(true) && !val.is_empty();
    let mut trainer = Trainer::new(&store, stage_cfg, ds, &prep, train)?;
    let mut history = Vec::with_capacity(stage_cfg.epochs);
    let mut val_history = Vec::with_capacity(stage_cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for _ in 0..stage_cfg.epochs {
        let stats = trainer.run_epoch(&mut store, &model, &Sequential)?;
        let val_miou = if validate { own_question_miou(&store, &model, ds, &prep, &val)? } else { None };
        if let Some(v) = val_miou {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, stats.epoch, store.clone()));
            }
        }
        history.push(stats.clone());
        val_history.push(val_miou);
        let ev = EpochEvent { stats: &stats, val_miou, store: &store, model: &model, vocab: &vocab };
        if observer(&ev) == Control::Stop {
            break;
        }
    }
    let (epoch, store) = match best {
        Some((_, e, s)) => (e, s),
        None => (trainer.epoch, store),
    };
    Ok(Checkpoint::new(stage, epoch, history, val_history, ds.fingerprint(), cfg.clone(), model, &vocab, store))
}

/// Question `j` of the fixed evaluation set, spreading the templates evenly.
pub fn fixed_question(category: &str, affordance: &str, j: usize, count: usize) -> Result<String> {
    let t = j * QUESTION_TEMPLATES.len() / count;
    Ok(make_instruction(category, affordance, t, 0)?.question)
}

/// One evaluated (sample, question) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub sample: usize,
    pub question: String,
    pub key: SampleKey,
}

pub fn subset_ids(split: &DatasetSplit, subset: Subset) -> &[String] {
    match subset {
        Subset::Train => &split.train,
        Subset::Val => &split.val,
        Subset::Test => &split.test,
    }
}

/// The fixed question set over `ids`, in split order then question order.
pub fn evaluation_entries(ds: &Dataset, ids: &[String], questions: usize) -> Result<Vec<EvalEntry>> {
    if questions > QUESTION_TEMPLATES.len() {
        return Err(Error::Config(format!("at most {} distinct questions exist", QUESTION_TEMPLATES.len())));
    }
    let mut out = Vec::with_capacity(ids.len() * questions);
    for s in sample_indices(ds, ids)? {
        let r = &ds.samples[s];
        for j in 0..questions {
            out.push(EvalEntry {
                sample: s,
                question: fixed_question(&r.category, &r.affordance, j, questions)?,
                key: SampleKey { id: format!("{}#q{j}", r.id), category: r.category.clone(), affordance: r.affordance.clone() },
            });
        }
    }
    Ok(out)
}

/// Scores `entries` with any predictor and aggregates the metrics.
pub fn evaluate_predictions(ds: &Dataset, entries: &[EvalEntry], scores: Vec<Vec<f64>>, split: &str, mode: IouMode) -> Result<MetricReport> {
    let preds: Vec<ScoredSample> = entries.iter().zip(scores).map(|(e, s)| ScoredSample { id: e.key.id.clone(), scores: s }).collect();
    let truths: Vec<ScoredSample> = entries
        .iter()
        .map(|e| ScoredSample { id: e.key.id.clone(), scores: ds.ground_truth(&ds.samples[e.sample]).scores.clone() })
        .collect();
    let keys: Vec<SampleKey> = entries.iter().map(|e| e.key.clone()).collect();
    Ok(evaluate_dataset(&preds, &truths, &keys, split, mode)?)
}

/// Model scores for `entries`, one object per forward pass.
pub fn predict_entries(ck: &Checkpoint, ds: &Dataset, entries: &[EvalEntry]) -> Result<Vec<Vec<f64>>> {
    let vocab = ck.vocabulary()?;
    let prep = Prepared::new(ds, &vocab);
    let samples: Vec<usize> = entries.iter().map(|e| e.sample).collect();
    let questions: Vec<TokenSequence> = entries.iter().map(|e| vocab.tokenize(&e.question).with_aff_query()).collect();
    Ok(predict_samples(&ck.store, &ck.header.model, ds, &prep, &samples, &questions, 1, &Sequential)?)
}

fn file_safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Evaluates `ck` on the configured subset (test by default). With `out`
/// set, writes the report and one score file per entry under `masks/`.
pub fn run_evaluate(cfg: &ExperimentConfig, ck: &Checkpoint, ds: &Dataset) -> Result<MetricReport> {
    check_compatible(cfg, ck)?;
    let split = resolve_split(cfg, ds)?;
    let entries = evaluation_entries(ds, subset_ids(&split, cfg.subset.unwrap_or(Subset::Test)), cfg.question_count()?)?;
    if entries.is_empty() {
        return Err(Error::format("the evaluated subset is empty"));
    }
    let scores = predict_entries(ck, ds, &entries)?;
    let name = match split.mode {
        affordsplat_core::datagen::SplitMode::Seen => "seen",
        affordsplat_core::datagen::SplitMode::Unseen => "unseen",
    };
    if let Some(dir) = out_dir(cfg)? {
        let masks = dir.join("masks");
        std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        for (e, s) in entries.iter().zip(&scores) {
            let f: Vec<f32> = s.iter().map(|&x| x as f32).collect();
            write_scores(&masks.join(format!("{}.f32", file_safe(&e.key.id))), &f, &e.key.id, &e.question, None)?;
        }
        let report = evaluate_predictions(ds, &entries, scores, name, cfg.iou_mode()?)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        return Ok(report);
    }
    evaluate_predictions(ds, &entries, scores, name, cfg.iou_mode()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// One score per splat, in the object's row order.
    pub scores: Vec<f32>,
    pub answer: String,
}

pub fn predict_object(ck: &Checkpoint, g: &GaussianObject, question: &str) -> Result<Prediction> {
    let vocab = ck.vocabulary()?;
    let model = &ck.header.model;
    let q = vocab.tokenize(question).with_aff_query();
    let s = extract_struct(g);
    let batch = make_batch(&[&s], std::slice::from_ref(&g.id), 0)?;
    let graph = Graph::new(&ck.store);
    let out = model.net.forward_sample(&graph, &batch, 0, &q)?;
    let mut scores: Vec<f32> = graph.value(out.scores).into_vec().into_iter().map(|x| x as f32).collect();
    scores.truncate(g.len());
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite(format!("scores for '{}'", g.id)).into());
    }
    let ids = model.net.text.greedy_decode(&ck.store, &q)?;
    Ok(Prediction { scores, answer: vocab.detokenize(&ids) })
}

pub struct PredictOutput {
    pub prediction: Prediction,
    pub score_file: Option<PathBuf>,
    pub preview_file: Option<PathBuf>,
}

/// Predicts on the PLY named by `input`; with `out` set, writes
/// `<stem>.scores.f32` (+ sidecar) and a tinted `<stem>.affordance.ply`.
pub fn run_predict(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<PredictOutput> {
    check_compatible(cfg, ck)?;
    let input = ExperimentConfig::require_path(&cfg.input, "input")?;
    let question = cfg.question.as_deref().ok_or_else(|| Error::Config("`question` is required for predict".into()))?;
    let g = load_gaussian_ply(input)?;
    let prediction = predict_object(ck, &g, question)?;
    let (mut score_file, mut preview_file) = (None, None);
    if let Some(dir) = out_dir(cfg)? {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "object".into());
        let sp = dir.join(format!("{stem}.scores.f32"));
        write_scores(&sp, &prediction.scores, &input.display().to_string(), question, Some(&prediction.answer))?;
        let pp = dir.join(format!("{stem}.affordance.ply"));
        let f = std::fs::File::create(&pp).map_err(|e| Error::io(&pp, e))?;
        write_colored_ply(std::io::BufWriter::new(f), &g, &prediction.scores)?;
        score_file = Some(sp);
        preview_file = Some(pp);
    }
    Ok(PredictOutput { prediction, score_file, preview_file })
}
