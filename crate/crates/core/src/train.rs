//! Losses and epoch loops for the two training stages.
//!
//! Every sample in a batch gets its own graph; its parameter gradients are
//! summed in slot order and divided by the batch size, so the update is the
//! gradient of the batch-mean loss. How the per-sample work is scheduled is
//! left to a [`SampleMap`], which keeps this crate single-threaded while the
//! std companion can fan out over a thread pool.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::affordnet::{AffordNet, ModelConfig};
use crate::autograd::{Graph, Var};
use crate::cmsa::{consistency_loss_graph, consistency_weights, region_mask, subsample_cloud, Branch, Cmsa, CmsaConfig, MaskMode};
use crate::datagen::{pair_pointclouds, Dataset};
use crate::error::{bail, Result};
use crate::evalkit::{bce_graph, dice_graph};
use crate::gscore::{extract_struct, make_batch, BatchedGaussians, GaussianStruct, PointCloudObject};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::textmod::{TokenSequence, Vocabulary};

/// Runs `f(0..n)` and returns the results in index order.
pub trait SampleMap {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T>;
}

pub struct Sequential;

impl SampleMap for Sequential {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

/// Mask network plus the alignment encoders, sharing one parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub net: AffordNet,
    pub cmsa: Cmsa,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, cmsa: CmsaConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let net = AffordNet::new(store, cfg, vocab_size, seed)?;
        let cmsa = Cmsa::new(store, cmsa, &mut rng::stream(seed, "init:cmsa"))?;
        Ok(Self { net, cmsa })
    }
}

/// Tokenized, tensorized view of a dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub structs: Vec<GaussianStruct>,
    pub questions: Vec<TokenSequence>,
    pub answers: Vec<TokenSequence>,
}

impl Prepared {
    pub fn new(dataset: &Dataset, vocab: &Vocabulary) -> Self {
        Self {
            structs: dataset.objects.iter().map(|o| extract_struct(&o.gaussian)).collect(),
            questions: dataset.samples.iter().map(|s| vocab.tokenize(&s.instruction.question).with_aff_query()).collect(),
            answers: dataset.samples.iter().map(|s| vocab.tokenize(&s.instruction.answer)).collect(),
        }
    }
}

/// Batches the objects behind `samples` (indices into `dataset.samples`).
pub fn batch_for(dataset: &Dataset, prep: &Prepared, samples: &[usize]) -> Result<BatchedGaussians> {
    let objs: Vec<&GaussianStruct> = samples.iter().map(|&s| &prep.structs[dataset.samples[s].object]).collect();
    let ids: Vec<String> = samples.iter().map(|&s| dataset.samples[s].id.clone()).collect();
    make_batch(&objs, &ids, 0)
}

/// Ground truth for slot `b`, zero-padded to `n_max`.
pub fn padded_truth(dataset: &Dataset, sample: usize, batch: &BatchedGaussians) -> Vec<f64> {
    let mut gt = dataset.ground_truth(&dataset.samples[sample]).scores.clone();
    gt.resize(batch.n_max, 0.0);
    gt
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub text: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.bce + self.dice + self.text
    }
}

/// `L_BCE + L_Dice + L_text` for slot `b` of `batch`.
pub fn finetune_sample_loss(
    g: &Graph,
    model: &Model,
    batch: &BatchedGaussians,
    b: usize,
    question: &TokenSequence,
    answer: &TokenSequence,
    gt: &[f64],
) -> Result<(Var, LossParts)> {
    let out = model.net.forward_sample(g, batch, b, question)?;
    let valid = &batch.validity[b];
    let bce = bce_graph(g, out.scores, gt, valid)?;
    let dice = dice_graph(g, out.scores, gt, valid);
    let text = model.net.text.text_loss(g, &out.encoded, answer)?;
    let parts = LossParts { bce: g.scalar(bce), dice: g.scalar(dice), text: g.scalar(text) };
    Ok((g.add(g.add(bce, dice), text), parts))
}

/// The `K` paired clouds of a sample, thinned to `pc_points`. The sample's
/// own object is left out of its pool whenever another candidate exists.
pub fn paired_clouds(dataset: &Dataset, sample: usize, k: usize, pc_points: usize, seed: u64) -> Result<Vec<PointCloudObject>> {
    let s = &dataset.samples[sample];
    let own = format_own(&dataset.objects[s.object].gaussian.id, &s.affordance);
    let mut pool = dataset.pool(&s.category, &s.affordance);
    if pool.len() > 1 {
        pool.retain(|&i| dataset.point_clouds[i].id != own);
    }
    let picks = pair_pointclouds(&s.id, pool.len(), k, seed)?;
    Ok(picks.into_iter().map(|i| subsample_cloud(&dataset.point_clouds[pool[i]], pc_points)).collect())
}

fn format_own(object_id: &str, affordance: &str) -> String {
    alloc::format!("{object_id}/pc/{affordance}")
}

pub struct PretrainLoss {
    pub loss: Var,
    pub weights: Vec<f64>,
    /// Nothing crossed the threshold, so the whole object was the region.
    pub fallback: bool,
}

/// `Σ_k w_k (1 − cos(z_gs, z_pc^k))` for slot `b`.
pub fn pretrain_sample_loss(
    g: &Graph,
    model: &Model,
    batch: &BatchedGaussians,
    b: usize,
    question: &TokenSequence,
    clouds: &[PointCloudObject],
    mode: MaskMode,
) -> Result<PretrainLoss> {
    let out = model.net.forward_sample(g, batch, b, question)?;
    let n = batch.n_real[b];
    let scores = g.gather_rows(out.scores, (0..n).collect());
    let rows: Vec<usize> = (0..n).collect();
    let x = g.constant(batch.padded[b].gather_rows(&rows));
    let region = region_mask(g, scores, mode);
    let (fa, ff) = model.cmsa.encode_region(g, x, region.mask, &region.selected, Branch::Splat)?;
    let z_gs = model.cmsa.structural_affinity(g, fa, ff);
    let z_pcs = clouds.iter().map(|c| model.cmsa.embed_cloud(g, c)).collect::<Result<Vec<Var>>>()?;
    let cloud_pts: Vec<_> = clouds.iter().map(PointCloudObject::points_f64).collect();
    let weights = consistency_weights(&batch.real_positions(b), &cloud_pts, model.cmsa.cfg.tau)?;
    let loss = consistency_loss_graph(g, z_gs, &z_pcs, &weights)?;
    Ok(PretrainLoss { loss, weights, fallback: region.fallback })
}

/// Loss value and parameter gradients of one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
    pub parts: Option<LossParts>,
    pub fallback: bool,
}

/// Sums gradients in slot order and averages over the batch.
pub fn mean_gradients(samples: Vec<SampleGrad>, n_params: usize) -> (Vec<Option<Tensor>>, f64) {
    let n = samples.len().max(1) as f64;
    let mut acc: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
    let mut loss = 0.0;
    for s in samples {
        loss += s.loss;
        for (a, g) in acc.iter_mut().zip(s.grads) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    for t in acc.iter_mut().flatten() {
        for x in t.data_mut() {
            *x /= n;
        }
    }
    (acc, loss / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    /// Finetuning keeps the question encoder fixed; pretraining has no use
    /// for the answer head.
    pub fn frozen(self) -> &'static [ParamGroup] {
        match self {
            Stage::Pretrain => &[ParamGroup::AnswerHead],
            Stage::Finetune => &[ParamGroup::TextEncoder],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Paired clouds per sample (pretraining).
    pub k: usize,
}

impl StageConfig {
    pub fn pretrain(seed: u64) -> Self {
        Self { stage: Stage::Pretrain, optimizer: AdamWConfig { lr: 1e-5, ..Default::default() }, epochs: 1, batch_size: 16, seed, k: 4 }
    }

    pub fn finetune(seed: u64) -> Self {
        Self { stage: Stage::Finetune, optimizer: AdamWConfig { lr: 1e-4, ..Default::default() }, epochs: 60, batch_size: 16, seed, k: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if self.stage == Stage::Pretrain && self.k == 0 {
            bail!(Config, "K must be positive");
        }
        if !(self.optimizer.lr >= 0.0) || !self.optimizer.lr.is_finite() {
            bail!(Config, "learning rate {} is not a finite non-negative number", self.optimizer.lr);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Finetune only: mean of each loss term.
    pub parts: Option<LossParts>,
    /// Pretrain only: samples whose region fell back to the whole object.
    pub fallbacks: usize,
}

/// Optimizer state plus the fixed inputs of one stage.
pub struct Trainer<'d> {
    pub cfg: StageConfig,
    pub dataset: &'d Dataset,
    pub prep: &'d Prepared,
    /// Indices into `dataset.samples`.
    pub samples: Vec<usize>,
    pub opt: AdamW,
    pub epoch: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(store: &ParamStore, cfg: StageConfig, dataset: &'d Dataset, prep: &'d Prepared, samples: Vec<usize>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            bail!(Argument, "no training samples");
        }
        Ok(Self { opt: AdamW::new(store, cfg.optimizer, cfg.stage.frozen()), cfg, dataset, prep, samples, epoch: 0 })
    }

    /// Shuffled batches for the current epoch.
    pub fn epoch_batches(&self) -> Vec<Vec<usize>> {
        let mut order = self.samples.clone();
        order.shuffle(&mut rng::indexed_stream(self.cfg.seed, "epoch-order", self.epoch as u64));
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn sample_grad(&self, store: &ParamStore, model: &Model, batch: &BatchedGaussians, b: usize, s: usize) -> Result<SampleGrad> {
        let g = Graph::with_frozen(store, self.cfg.stage.frozen());
        let q = &self.prep.questions[s];
        let (loss, parts, fallback) = match self.cfg.stage {
            Stage::Finetune => {
                let gt = padded_truth(self.dataset, s, batch);
                let (l, p) = finetune_sample_loss(&g, model, batch, b, q, &self.prep.answers[s], &gt)?;
                (l, Some(p), false)
            }
            Stage::Pretrain => {
                let seed = self.cfg.seed ^ (self.epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let clouds = paired_clouds(self.dataset, s, self.cfg.k, model.cmsa.cfg.pc_points, seed)?;
                let r = pretrain_sample_loss(&g, model, batch, b, q, &clouds, MaskMode::Ste)?;
                (r.loss, None, r.fallback)
            }
        };
        let value = g.scalar(loss);
        if !value.is_finite() {
            bail!(NonFinite, "loss {value} on sample '{}' in epoch {}", self.dataset.samples[s].id, self.epoch + 1);
        }
        let grads = g.backward(loss).into_param_grads();
        Ok(SampleGrad { loss: value, grads, parts, fallback })
    }

    /// One pass over the training samples with an optimizer step per batch.
    pub fn run_epoch<M: SampleMap>(&mut self, store: &mut ParamStore, model: &Model, exec: &M) -> Result<EpochStats> {
        let mut total = 0.0;
        let mut count = 0usize;
        let mut parts = LossParts { bce: 0.0, dice: 0.0, text: 0.0 };
        let mut fallbacks = 0;
        for chunk in self.epoch_batches() {
            let batch = batch_for(self.dataset, self.prep, &chunk)?;
            let results = {
                let st: &ParamStore = store;
                exec.map(chunk.len(), |b| self.sample_grad(st, model, &batch, b, chunk[b]))
            };
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            for r in &results {
                total += r.loss;
                count += 1;
                fallbacks += r.fallback as usize;
                if let Some(p) = r.parts {
                    parts.bce += p.bce;
                    parts.dice += p.dice;
                    parts.text += p.text;
                }
            }
            let (grads, _) = mean_gradients(results, store.len());
            self.opt.step(store, &grads);
        }
        self.epoch += 1;
        let n = count as f64;
        let parts = (self.cfg.stage == Stage::Finetune).then(|| LossParts { bce: parts.bce / n, dice: parts.dice / n, text: parts.text / n });
        Ok(EpochStats { epoch: self.epoch, mean_loss: total / n, parts, fallbacks })
    }
}

/// Real-row scores for each sample, batched in the given order.
pub fn predict_samples<M: SampleMap>(
    store: &ParamStore,
    model: &Model,
    dataset: &Dataset,
    prep: &Prepared,
    samples: &[usize],
    questions: &[TokenSequence],
    batch_size: usize,
    exec: &M,
) -> Result<Vec<Vec<f64>>> {
    if questions.len() != samples.len() {
        bail!(Argument, "{} questions for {} samples", questions.len(), samples.len());
    }
    let mut out = Vec::with_capacity(samples.len());
    for (ci, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let batch = batch_for(dataset, prep, chunk)?;
        let base = ci * batch_size.max(1);
        let res = exec.map(chunk.len(), |b| -> Result<Vec<f64>> {
            let g = Graph::new(store);
            let o = model.net.forward_sample(&g, &batch, b, &questions[base + b])?;
            let mut s = g.value(o.scores).into_vec();
            s.truncate(batch.n_real[b]);
            if s.iter().any(|x| !x.is_finite()) {
                bail!(NonFinite, "scores for '{}'", batch.ids[b]);
            }
            Ok(s)
        });
        for r in res {
            out.push(r?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatasetConfig};
    use alloc::vec;

    fn tiny() -> (Dataset, Vocabulary, Prepared) {
        let cfg = DatasetConfig {
            n_objects: 3,
            seed: 2,
            categories: vec!["mug".into(), "knife".into()],
            max_affordances: Some(1),
            n_gaussians_range: (40, 48),
            n_points: 128,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let text: Vec<String> = ds.samples.iter().flat_map(|s| [s.instruction.question.clone(), s.instruction.answer.clone()]).collect();
        let vocab = Vocabulary::build(&text);
        let prep = Prepared::new(&ds, &vocab);
        (ds, vocab, prep)
    }

    fn toy_model(vocab: &Vocabulary) -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let cc = CmsaConfig { d_consis: 8, width: 4, heads: 2, tau: 0.1, pc_points: 32 };
        let m = Model::new(&mut store, ModelConfig::toy(), cc, vocab.len(), 1).unwrap();
        (store, m)
    }

    #[test]
    fn gradients_average_in_order() {
        let mk = |v: f64, l: f64| SampleGrad { loss: l, grads: vec![Some(Tensor::scalar(v)), None], parts: None, fallback: false };
        let (g, l) = mean_gradients(vec![mk(1.0, 2.0), mk(3.0, 4.0)], 2);
        assert_eq!(g[0].as_ref().unwrap().data(), &[2.0]);
        assert!(g[1].is_none());
        assert_eq!(l, 3.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let (ds, vocab, prep) = tiny();
        let (mut store, model) = toy_model(&vocab);
        let before = store.clone();
        for stage in [Stage::Pretrain, Stage::Finetune] {
            let mut cfg = if stage == Stage::Pretrain { StageConfig::pretrain(3) } else { StageConfig::finetune(3) };
            cfg.optimizer.lr = 0.0;
            cfg.batch_size = 2;
            let mut t = Trainer::new(&store, cfg, &ds, &prep, (0..ds.samples.len()).collect()).unwrap();
            let stats = t.run_epoch(&mut store, &model, &Sequential).unwrap();
            assert!(stats.mean_loss.is_finite());
        }
        assert_eq!(store, before);
    }

    #[test]
    fn finetune_keeps_the_question_encoder_fixed() {
        let (ds, vocab, prep) = tiny();
        let (mut store, model) = toy_model(&vocab);
        let enc = store.checksum(ParamGroup::TextEncoder);
        let dec = store.checksum(ParamGroup::Decoder);
        let mut cfg = StageConfig::finetune(3);
        cfg.batch_size = 2;
        cfg.optimizer.lr = 1e-2;
        let mut t = Trainer::new(&store, cfg, &ds, &prep, (0..ds.samples.len()).collect()).unwrap();
        let s = t.run_epoch(&mut store, &model, &Sequential).unwrap();
        assert!(s.parts.is_some());
        assert_eq!(store.checksum(ParamGroup::TextEncoder), enc);
        assert_ne!(store.checksum(ParamGroup::Decoder), dec);
    }

    #[test]
    fn pairing_avoids_the_own_cloud_when_possible() {
        let (ds, _, _) = tiny();
        // Two mugs (objects 0 and 2), so each mug gets the other's cloud.
        let c = paired_clouds(&ds, 0, 4, 32, 5).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|p| p.id == "mug-0002/pc/grasp"));
        assert!(c.iter().all(|p| p.points.len() == 32));
        // The lone knife pairs with itself.
        let k = paired_clouds(&ds, 1, 2, 32, 5).unwrap();
        assert!(k.iter().all(|p| p.id == "knife-0001/pc/grasp"));
    }
}
