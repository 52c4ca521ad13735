//! The mask network: a hierarchical set encoder over structural features,
//! language fusion at three granularities, a per-channel granularity gate
//! and a dynamic-kernel decoder.

mod config;
mod decoder;
mod encoder;
mod fusion;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use decoder::{padded_upsampler, score_points, MaskDecoder};
pub use encoder::{sa_grouping, Encoder3d, Grouping, Levels};
pub use fusion::{level_softmax, mix_levels, Fusion};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::gscore::{idw_weights, AffordanceMask, BatchedGaussians};
use crate::params::ParamStore;
use crate::rng;
use crate::textmod::{Encoded, TextConfig, TextModule, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordNet {
    pub cfg: ModelConfig,
    pub text: TextModule,
    pub encoder: Encoder3d,
    pub fusion: Fusion,
    pub decoder: MaskDecoder,
}

/// Graph handles produced for one batch slot.
pub struct SampleOutput {
    /// `n_max × 1`, zero at padding.
    pub scores: Var,
    /// `3 × d`, each column on the simplex.
    pub gate_weights: Var,
    /// `1 × d`.
    pub kernel: Var,
    pub encoded: Encoded,
}

impl AffordNet {
    /// Each submodule draws its initial weights from its own stream.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let tcfg = TextConfig {
            vocab_size,
            d_text: cfg.d_text,
            heads: cfg.text_heads,
            layers: cfg.text_layers,
            answer_layers: cfg.answer_layers,
            max_len: cfg.max_text_len,
        };
        Ok(Self {
            cfg,
            text: TextModule::new(store, tcfg, &mut rng::stream(seed, "init:text")),
            encoder: Encoder3d::new(store, &cfg, &mut rng::stream(seed, "init:encoder")),
            fusion: Fusion::new(store, &cfg, &mut rng::stream(seed, "init:fusion")),
            decoder: MaskDecoder::new(store, &cfg, &mut rng::stream(seed, "init:decoder")),
        })
    }

    pub fn forward_sample(&self, g: &Graph, batch: &BatchedGaussians, b: usize, question: &TokenSequence) -> Result<SampleOutput> {
        if b >= batch.len() {
            bail!(Argument, "slot {b} outside a batch of {}", batch.len());
        }
        let cfg = &self.cfg;
        let levels = self.encoder.forward(g, &batch.down[b], cfg)?;
        let encoded = self.text.encode(g, question, true)?;
        let h_aff = self.text.project_aff(g, encoded.h_aff.expect("marker checked by encode"));

        let p0 = batch.down_positions(b);
        let mut upsampled = Vec::with_capacity(3);
        for i in 0..3 {
            let f_g = levels.features[i];
            let f_bar = self.fusion.spatial_residual(g, self.fusion.cross_attend(g, h_aff, f_g, i));
            let fused = self.fusion.channel_attend(g, f_bar, f_g);
            let src = &levels.positions[i];
            let op = idw_weights(src, &p0, cfg.idw_k.min(src.len()), cfg.idw_power)?;
            upsampled.push(g.sparse(fused, alloc::rc::Rc::new(op)));
        }
        let upsampled: [Var; 3] = [upsampled[0], upsampled[1], upsampled[2]];
        let (fused, gate_weights) = self.fusion.select_granularity(g, &upsampled);

        let valid = batch.validity_column(b);
        let up = g.sparse(fused, padded_upsampler(&p0, &batch.real_positions(b), batch.n_max, cfg)?);
        let f_valid = g.mul_col(up, g.constant(valid.clone()));
        let kernel = self.decoder.dynamic_kernel(g, h_aff, f_valid, &batch.validity[b]);
        let scores = score_points(g, f_valid, kernel, &valid);
        Ok(SampleOutput { scores, gate_weights, kernel, encoded })
    }

    /// Scores for every slot, one question per slot, padded to `n_max`.
    pub fn predict(&self, store: &ParamStore, batch: &BatchedGaussians, questions: &[TokenSequence]) -> Result<Vec<AffordanceMask>> {
        if questions.len() != batch.len() {
            bail!(Argument, "{} questions for a batch of {}", questions.len(), batch.len());
        }
        let mut out = Vec::with_capacity(batch.len());
        for (b, q) in questions.iter().enumerate() {
            let g = Graph::new(store);
            let s = self.forward_sample(&g, batch, b, q)?;
            let scores = g.value(s.scores).into_vec();
            if scores.iter().any(|x| !x.is_finite()) {
                bail!(NonFinite, "mask scores for slot {b}");
            }
            out.push(AffordanceMask { scores });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::gscore::{make_batch, GaussianStruct, STRUCT_DIM};
    use crate::nn::{Linear, MultiHeadAttention};
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;
    use crate::textmod::Vocabulary;
    use rand::Rng;

    fn blob(n: usize, seed: u64) -> GaussianStruct {
        let mut r = rng::stream(seed, "blob");
        let mut t = Tensor::zeros(n, STRUCT_DIM);
        for i in 0..n {
            for c in 0..STRUCT_DIM {
                t.set(i, c, r.random_range(-1.0..1.0));
            }
        }
        GaussianStruct { features: t, n_real: n }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn set(store: &mut ParamStore, lin: &Linear, w: &[&[f64]]) {
        *store.get_mut(lin.weight) = Tensor::from_rows(w);
        if let Some(b) = lin.bias {
            let c = store.get(b).cols();
            *store.get_mut(b) = Tensor::zeros(1, c);
        }
    }

    #[test]
    fn uniform_keys_give_the_value_projection() {
        let mut store = ParamStore::new();
        let cfg = ModelConfig::toy();
        let f = Fusion::new(&mut store, &cfg, &mut rng::stream(2, "f"));
        let v = [0.3, -0.2, 0.9, 0.1, 0.0, 0.4, -0.7, 0.5];
        let g = Graph::new(&store);
        let kv = g.constant(Tensor::from_rows(&[v, v, v, v]));
        let a = g.value(f.cross_attend(&g, g.constant(Tensor::row_vector(&[1.0; 8])), kv, 1));
        let b = g.value(f.cross_attend(&g, g.constant(Tensor::row_vector(&[-4.0, 2.0, 0.0, 0.0, 1.0, 1.0, 3.0, -1.0])), kv, 1));
        let one = g.constant(Tensor::row_vector(&v));
        let expect = g.add(f.cross.wo.forward(&g, f.cross.wv.forward(&g, one)), g.row(g.param(f.pos_emb), 1));
        assert!(max_diff(&a, &g.value(expect)) < 1e-12);
        assert!(max_diff(&a, &b) < 1e-12);
        assert_eq!(a.shape(), (1, 8));
    }

    #[test]
    fn single_head_attention_by_hand() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "m", ParamGroup::Fusion, 2, 2, 2, 2, 1, &mut rng::stream(0, "m"));
        set(&mut store, &mha.wq, &[&[1.0, 0.0], &[0.0, 1.0]]);
        set(&mut store, &mha.wk, &[&[2.0, 0.0], &[0.0, 1.0]]);
        set(&mut store, &mha.wv, &[&[1.0, 1.0], &[0.0, -1.0]]);
        set(&mut store, &mha.wo, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = Graph::new(&store);
        let q = g.constant(Tensor::row_vector(&[1.0, 0.5]));
        let kv = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]));
        let out = g.value(mha.forward(&g, q, kv, crate::nn::AttnMask::None));
        // Keys (2, 0) and (0, 2); scores 2/√2 and 1/√2; values (1, 1) and (0, -2).
        let s = [2.0 / libm::sqrt(2.0), 1.0 / libm::sqrt(2.0)];
        let e = [libm::exp(s[0]), libm::exp(s[1])];
        let w = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let expect = [w[0], w[0] - 2.0 * w[1]];
        assert!((out.get(0, 0) - expect[0]).abs() < 1e-12);
        assert!((out.get(0, 1) - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn channel_attention_closed_forms() {
        let mut store = ParamStore::new();
        let cfg = ModelConfig { d: 4, heads: 2, ..ModelConfig::toy() };
        let f = Fusion::new(&mut store, &cfg, &mut rng::stream(5, "f"));
        let f_g = Tensor::from_rows(&[[0.5, -1.0, 2.0, 0.0], [1.5, 0.25, -0.5, 3.0]]);
        let f_bar = Tensor::row_vector(&[0.1, 0.2, -0.3, 0.4]);

        // Zeroed excitation: every gate is exactly one half.
        let mut s = store.clone();
        *s.get_mut(f.excite.weight) = Tensor::zeros(2, 4);
        let g = Graph::new(&s);
        let (fb, fg) = (g.constant(f_bar.clone()), g.constant(f_g.clone()));
        let concat = g.concat_cols(&[g.broadcast_rows(fb, 2), fg]);
        assert!(g.value(f.channel_gates(&g, concat)).data().iter().all(|&x| x == 0.5));

        // Zeroed projection: the residual alone survives.
        let mut s = store.clone();
        *s.get_mut(f.proj.weight) = Tensor::zeros(8, 4);
        let g = Graph::new(&s);
        let out = g.value(f.channel_attend(&g, g.constant(f_bar.clone()), g.constant(f_g.clone())));
        assert_eq!(out, f_g);
    }

    #[test]
    fn channel_attention_two_by_two_by_hand() {
        let mut store = ParamStore::new();
        let cfg = ModelConfig { d: 2, heads: 1, ..ModelConfig::toy() };
        // d = 2 is below the validated minimum but the fusion block itself
        // is well defined at that width.
        let f = Fusion::new(&mut store, &cfg, &mut rng::stream(5, "f"));
        set(&mut store, &f.squeeze, &[&[1.0], &[0.0], &[1.0], &[-1.0]]);
        set(&mut store, &f.excite, &[&[2.0, -1.0]]);
        set(&mut store, &f.proj, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.0, 2.0]]);
        let g = Graph::new(&store);
        let f_bar = [0.5, -0.5];
        let f_g = [[1.0, 2.0], [3.0, -2.0]];
        let out = g.value(f.channel_attend(&g, g.constant(Tensor::row_vector(&f_bar)), g.constant(Tensor::from_rows(&f_g))));
        // Pooled concat: (0.5, -0.5, 2, 0); squeeze = 0.5 + 2 = 2.5.
        let h = crate::autograd::gelu(2.5);
        let gate = [sigmoid(2.0 * h), sigmoid(-h)];
        for (i, row) in f_g.iter().enumerate() {
            let (a, b) = (gate[0] * row[0], gate[1] * row[1]);
            let expect = [f_bar[0] + a + row[0], f_bar[1] + a + 2.0 * b + row[1]];
            assert!((out.get(i, 0) - expect[0]).abs() < 1e-12);
            assert!((out.get(i, 1) - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn granularity_gate_closed_forms() {
        let mut store = ParamStore::new();
        let cfg = ModelConfig::toy();
        let f = Fusion::new(&mut store, &cfg, &mut rng::stream(5, "f"));
        let mut r = rng::stream(8, "levels");
        let levels: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_vec(6, 8, (0..48).map(|_| r.random_range(-2.0..2.0)).collect()))
            .collect();

        let g = Graph::new(&store);
        let ups = [g.constant(levels[0].clone()), g.constant(levels[1].clone()), g.constant(levels[2].clone())];
        let (fused, w) = f.select_granularity(&g, &ups);
        assert!(g.value(w).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let mut mean = levels[0].clone();
        mean.add_assign(&levels[1]);
        mean.add_assign(&levels[2]);
        assert!(max_diff(&g.value(fused), &mean.map(|x| x / 3.0)) < 1e-12);

        let mut logits = Tensor::zeros(3, 8);
        for c in 0..8 {
            logits.set(1, c, 1e4);
        }
        let w = level_softmax(&g, g.constant(logits));
        assert!(max_diff(&g.value(mix_levels(&g, &ups, w)), &levels[1]) <= 1e-3);

        let mut s = store.clone();
        *s.get_mut(f.w_gate) = Tensor::from_vec(3, 8, (0..24).map(|_| r.random_range(-5.0..5.0)).collect());
        let g = Graph::new(&s);
        let ups = [g.constant(levels[0].clone()), g.constant(levels[1].clone()), g.constant(levels[2].clone())];
        let w = g.value(f.select_granularity(&g, &ups).1);
        for c in 0..8 {
            let col: f64 = (0..3).map(|i| w.get(i, c)).sum();
            assert!((col - 1.0).abs() <= 1e-12);
            assert!((0..3).all(|i| w.get(i, c) >= 0.0));
        }
    }

    #[test]
    fn pointwise_kernel_scores() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let f_valid = g.constant(Tensor::from_rows(&[[1.0, 2.0], [-0.5, 0.25], [0.0, 0.0]]));
        let valid = Tensor::column_vector(&[1.0, 1.0, 0.0]);
        let k = g.constant(Tensor::row_vector(&[0.3, -0.7]));
        let s = g.value(score_points(&g, f_valid, k, &valid));
        assert!((s.get(0, 0) - sigmoid(0.3 - 1.4)).abs() < 1e-15);
        assert!((s.get(1, 0) - sigmoid(-0.15 - 0.175)).abs() < 1e-15);
        assert_eq!(s.get(2, 0), 0.0);
        let zero = g.constant(Tensor::zeros(1, 2));
        assert_eq!(g.value(score_points(&g, f_valid, zero, &valid)).data(), &[0.5, 0.5, 0.0]);
    }

    fn toy_net() -> (Vocabulary, ParamStore, AffordNet) {
        let v = Vocabulary::build(&["grasp ⟨Aff⟩ the mug handle"]);
        let mut store = ParamStore::new();
        let net = AffordNet::new(&mut store, ModelConfig::toy(), v.len(), 11).unwrap();
        (v, store, net)
    }

    #[test]
    fn forward_contracts() {
        let (v, store, net) = toy_net();
        let (a, b) = (blob(32, 1), blob(27, 2));
        let batch = make_batch(&[&a, &b], &[], 0).unwrap();
        let q = v.tokenize("grasp ⟨Aff⟩ the mug handle");
        let masks = net.predict(&store, &batch, &[q.clone(), q.clone()]).unwrap();
        assert_eq!(masks.len(), 2);
        for (m, &n) in masks.iter().zip(&batch.n_real) {
            assert_eq!(m.scores.len(), 32);
            assert!(m.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
            assert!(m.scores[n..].iter().all(|&s| s == 0.0));
        }
        let g = Graph::new(&store);
        let out = net.forward_sample(&g, &batch, 1, &q).unwrap();
        let w = g.value(out.gate_weights);
        assert_eq!(w.shape(), (3, 8));
        assert_eq!(g.shape(out.kernel), (1, 8));
        assert!(net.forward_sample(&g, &batch, 1, &v.tokenize("grasp it")).is_err());
    }

    #[test]
    fn duplicated_slots_agree() {
        let (v, store, net) = toy_net();
        let a = blob(40, 3);
        let batch = make_batch(&[&a, &a], &[], 7).unwrap();
        let q = v.tokenize("grasp ⟨Aff⟩ the mug handle");
        let m = net.predict(&store, &batch, &[q.clone(), q]).unwrap();
        assert_eq!(m[0], m[1]);
    }

    #[test]
    fn too_few_rows_for_the_schedule() {
        let (v, store, net) = toy_net();
        let batch = make_batch(&[&blob(10, 1)], &[], 0).unwrap();
        let err = net.predict(&store, &batch, &[v.tokenize("grasp ⟨Aff⟩")]).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }
}
