//! Latent world model: a block-causal transformer that predicts the next
//! frame's visual tokens from the instruction and all earlier frames. Teacher
//! forcing trains every horizon position in one masked pass; at planning time
//! the model rolls forward autoregressively on its own predictions.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::blockworld::{TokenizedInstruction, VOCABULARY};
use crate::checkpoint::Checkpoint;
use crate::episodes::{sample_window, Dataset, DatasetManifest, EpisodeRecord};
use crate::latent_encoder::{Encoder, TokenGrid};
use crate::nn::{
    layer_norm, layer_norm_init, linear, linear_init, mask_from_allowed, transformer_block,
    transformer_block_init, BlockCfg, Bound, ParamStore,
};
use crate::optim::AdamW;
use crate::rngs::derive_seed;
use crate::tensor::{Graph, Scalar, Tensor};

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentWmConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_hidden: usize,
    /// Extra context frames the position table allows beyond the horizon.
    pub k_max: usize,
    /// Prediction horizon in frames.
    pub horizon: usize,
    /// Instruction length in tokens.
    pub n_text: usize,
    /// Visual tokens per frame.
    pub n_tokens: usize,
    pub steps: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub val_windows: usize,
}

impl Default for LatentWmConfig {
    fn default() -> Self {
        LatentWmConfig {
            layers: 4,
            heads: 4,
            model_dim: 128,
            ffn_hidden: 256,
            k_max: 2,
            horizon: 8,
            n_text: 8,
            n_tokens: 64,
            steps: 5000,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.04,
            val_windows: 64,
        }
    }
}

impl LatentWmConfig {
    /// Longest frame context the position table supports.
    pub fn max_frames(&self) -> usize {
        self.k_max + self.horizon
    }

    fn block_cfg(&self) -> BlockCfg {
        BlockCfg {
            dim: self.model_dim,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            cross: false,
        }
    }
}

/// Initialize all transformer parameters under the `wm.` prefix.
pub fn init_latent_wm_params<S: Scalar>(p: &mut ParamStore<S>, cfg: &LatentWmConfig) {
    assert_eq!(cfg.model_dim % cfg.heads, 0, "model_dim must divide into heads");
    p.init_normal("wm.tok_embed", &[VOCABULARY.len(), cfg.model_dim], 0.02);
    p.init_normal("wm.text_pos", &[cfg.n_text, cfg.model_dim], 0.02);
    p.init_normal("wm.frame_pos", &[cfg.max_frames(), cfg.model_dim], 0.02);
    p.init_normal("wm.spatial_pos", &[cfg.n_tokens, cfg.model_dim], 0.02);
    for i in 0..cfg.layers {
        transformer_block_init(p, &format!("wm.block{i}"), &cfg.block_cfg());
    }
    layer_norm_init(p, "wm.ln_out", cfg.model_dim);
    linear_init(p, "wm.head", cfg.model_dim, cfg.model_dim);
}

/// Attention layout: text tokens see each other; a frame's tokens see the
/// text, every earlier frame, and their own frame.
fn block_causal_allowed(cfg: &LatentWmConfig, n_frames: usize) -> Vec<Vec<bool>> {
    let l = cfg.n_text + n_frames * cfg.n_tokens;
    let mut allowed = vec![vec![false; l]; l];
    for (q, row) in allowed.iter_mut().enumerate() {
        let horizon = if q < cfg.n_text {
            cfg.n_text
        } else {
            let frame = (q - cfg.n_text) / cfg.n_tokens;
            cfg.n_text + (frame + 1) * cfg.n_tokens
        };
        for slot in row.iter_mut().take(horizon) {
            *slot = true;
        }
    }
    allowed
}

/// One transformer pass over a batch of frame stacks. `text_ids` holds
/// `batch * n_text` vocabulary ids; `frames` is (B, F, N, D). Returns the
/// next-frame prediction read at every frame position, shape (B, F, N, D).
pub fn forward_frames<S: Scalar>(
    b: &Bound<S>,
    cfg: &LatentWmConfig,
    text_ids: &[usize],
    frames: &Tensor<S>,
) -> Tensor<S> {
    let g = b.g;
    let (batch, n_frames) = (frames.shape()[0], frames.shape()[1]);
    assert_eq!(text_ids.len(), batch * cfg.n_text);
    assert_eq!(frames.shape()[2], cfg.n_tokens);
    assert_eq!(frames.shape()[3], cfg.model_dim);
    assert!(n_frames >= 1 && n_frames <= cfg.max_frames());

    let text = g.embedding(b.get("wm.tok_embed"), text_ids);
    let text = g.reshape(&text, &[batch, cfg.n_text, cfg.model_dim]);
    let text = g.add(&text, b.get("wm.text_pos"));

    let frame_pos = g.narrow(b.get("wm.frame_pos"), 0, 0, n_frames);
    let frame_pos = g.reshape(&frame_pos, &[n_frames, 1, cfg.model_dim]);
    let x = g.add(frames, b.get("wm.spatial_pos"));
    let x = g.add(&x, &frame_pos);
    let x = g.reshape(&x, &[batch, n_frames * cfg.n_tokens, cfg.model_dim]);

    let mut seq = g.concat(&[&text, &x], 1);
    let mask = mask_from_allowed(g, &block_causal_allowed(cfg, n_frames));
    for i in 0..cfg.layers {
        seq = transformer_block(b, &format!("wm.block{i}"), &cfg.block_cfg(), &seq, None, Some(&mask));
    }
    let seq = layer_norm(b, "wm.ln_out", &seq);
    let out = linear(b, "wm.head", &seq);
    let out = g.narrow(&out, 1, cfg.n_text, n_frames * cfg.n_tokens);
    g.reshape(&out, &[batch, n_frames, cfg.n_tokens, cfg.model_dim])
}

/// Weighted mean absolute error between predictions and target token grids.
/// `weights` is (B, F) with zeros on padded positions. `smooth` switches the
/// elementwise distance to a Huber form for finite-difference checks.
pub fn prediction_loss<S: Scalar>(
    b: &Bound<S>,
    cfg: &LatentWmConfig,
    text_ids: &[usize],
    inputs: &Tensor<S>,
    targets: &Tensor<S>,
    weights: &Tensor<S>,
    smooth: Option<f64>,
) -> Tensor<S> {
    let g = b.g;
    let pred = forward_frames(b, cfg, text_ids, inputs);
    let diff = g.sub(&pred, targets);
    let dist = match smooth {
        Some(delta) => g.huber(&diff, delta),
        None => g.abs(&diff),
    };
    let n_frames = inputs.shape()[1];
    let w = g.reshape(weights, &[weights.shape()[0], n_frames, 1, 1]);
    let total = g.sum_all(&g.mul(&dist, &w));
    let count: f64 = weights.array().iter().map(|v| Scalar::to_f64(*v)).sum::<f64>()
        * (cfg.n_tokens * cfg.model_dim) as f64;
    g.scale(&total, 1.0 / count)
}

/// A trained (or freshly initialized) latent world model.
#[derive(Clone)]
pub struct LatentWm {
    pub cfg: LatentWmConfig,
    pub params: ParamStore<f32>,
}

impl LatentWm {
    pub fn init(cfg: &LatentWmConfig, seed: u64) -> LatentWm {
        let mut params = ParamStore::new(derive_seed(seed, &["latent-wm-init"], &[]));
        init_latent_wm_params(&mut params, cfg);
        LatentWm { cfg: cfg.clone(), params }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<LatentWm> {
        let cfg_value = ckpt
            .meta
            .get("config")
            .with_context(|| "latent world model checkpoint meta lacks a config entry")?;
        let cfg: LatentWmConfig =
            serde_json::from_value(cfg_value.clone()).context("parsing latent world model config")?;
        Ok(LatentWm { cfg, params: ckpt.params.clone() })
    }

    fn ids(&self, instruction: &TokenizedInstruction) -> Vec<usize> {
        assert_eq!(self.cfg.n_text, instruction.token_ids.len());
        instruction.token_ids.iter().map(|&id| id as usize).collect()
    }

    /// Predict the token grid of the frame after the given context.
    pub fn predict_next(
        &self,
        instruction: &TokenizedInstruction,
        frames: &[TokenGrid],
    ) -> Result<TokenGrid> {
        if frames.is_empty() {
            bail!("prediction needs at least one context frame");
        }
        if frames.len() > self.cfg.max_frames() {
            bail!(
                "{} context frames exceed the position table ({} slots)",
                frames.len(),
                self.cfg.max_frames()
            );
        }
        let g = Graph::<f32>::inference();
        let b = self.params.bind_frozen(&g);
        let input = g.constant(grids_to_array(&self.cfg, frames));
        let out = forward_frames(&b, &self.cfg, &self.ids(instruction), &input);
        let last = g.narrow(&out, 1, frames.len() - 1, 1);
        let tokens = last
            .array()
            .clone()
            .into_shape(IxDyn(&[self.cfg.n_tokens, self.cfg.model_dim]))
            .expect("prediction reshapes");
        Ok(TokenGrid { tokens })
    }

    /// Autoregressive rollout: feed predictions back as context for `t`
    /// steps and stack them, shape (t, n_tokens, model_dim).
    pub fn rollout(
        &self,
        instruction: &TokenizedInstruction,
        s0: &TokenGrid,
        t: usize,
    ) -> Result<ArrayD<f32>> {
        let mut context = vec![s0.clone()];
        let mut out = ArrayD::zeros(IxDyn(&[t, self.cfg.n_tokens, self.cfg.model_dim]));
        for i in 0..t {
            let next = self.predict_next(instruction, &context)?;
            out.slice_mut(ndarray::s![i, .., ..]).assign(
                &next
                    .tokens
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("token grid is rank 2"),
            );
            if i + 1 < t {
                context.push(next);
            }
        }
        Ok(out)
    }
}

/// Stack token grids into a (1, F, N, D) batch.
fn grids_to_array(cfg: &LatentWmConfig, frames: &[TokenGrid]) -> ArrayD<f32> {
    let mut out = ArrayD::zeros(IxDyn(&[1, frames.len(), cfg.n_tokens, cfg.model_dim]));
    for (i, grid) in frames.iter().enumerate() {
        assert_eq!(grid.tokens.shape(), &[cfg.n_tokens, cfg.model_dim], "token grid shape");
        out.slice_mut(ndarray::s![0, i, .., ..]).assign(
            &grid.tokens.view().into_dimensionality::<ndarray::Ix2>().expect("grid is rank 2"),
        );
    }
    out
}

/// Visual tokens for every frame of every episode, computed once up front.
pub fn encode_dataset(encoder: &Encoder, dataset: &Dataset) -> Vec<Vec<ArrayD<f32>>> {
    dataset
        .records
        .iter()
        .map(|r| r.frames.iter().map(|f| encoder.encode(f).tokens).collect())
        .collect()
}

/// Token-level training window: teacher-forcing inputs, next-frame targets,
/// and padding weights, assembled from precomputed episode tokens.
struct TokenWindow {
    text_ids: Vec<usize>,
    inputs: Vec<ArrayD<f32>>,
    targets: Vec<ArrayD<f32>>,
    weights: Vec<f32>,
}

fn token_window(
    cfg: &LatentWmConfig,
    record: &EpisodeRecord,
    tokens: &[ArrayD<f32>],
    seed: u64,
) -> TokenWindow {
    let w = sample_window(record, cfg.horizon, seed);
    let total = record.meta.t_total as usize;
    let k = w.start;
    let clamp = |i: usize| i.min(total);
    let inputs = (0..cfg.horizon).map(|j| tokens[clamp(k + j)].clone()).collect();
    let targets = (0..cfg.horizon).map(|j| tokens[clamp(k + j + 1)].clone()).collect();
    let weights = w.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let text_ids = w.tokens.token_ids.iter().map(|&id| id as usize).collect();
    TokenWindow { text_ids, inputs, targets, weights }
}

fn stack_windows(
    cfg: &LatentWmConfig,
    windows: &[TokenWindow],
) -> (Vec<usize>, ArrayD<f32>, ArrayD<f32>, ArrayD<f32>) {
    let b = windows.len();
    let (f, n, d) = (cfg.horizon, cfg.n_tokens, cfg.model_dim);
    let mut inputs = ArrayD::zeros(IxDyn(&[b, f, n, d]));
    let mut targets = ArrayD::zeros(IxDyn(&[b, f, n, d]));
    let mut weights = ArrayD::zeros(IxDyn(&[b, f]));
    let mut text_ids = Vec::with_capacity(b * cfg.n_text);
    for (i, w) in windows.iter().enumerate() {
        text_ids.extend_from_slice(&w.text_ids);
        for j in 0..f {
            let src = |a: &ArrayD<f32>| {
                a.view().into_dimensionality::<ndarray::Ix2>().expect("grid is rank 2").to_owned()
            };
            inputs.slice_mut(ndarray::s![i, j, .., ..]).assign(&src(&w.inputs[j]));
            targets.slice_mut(ndarray::s![i, j, .., ..]).assign(&src(&w.targets[j]));
            weights[[i, j]] = w.weights[j];
        }
    }
    (text_ids, inputs, targets, weights)
}

/// Mean weighted L1 of the model and of the frame-persistence baseline
/// (predict the next grid as a copy of the current one) on fixed windows.
fn eval_windows(
    params: &ParamStore<f32>,
    cfg: &LatentWmConfig,
    dataset: &Dataset,
    tokens: &[Vec<ArrayD<f32>>],
    seed: u64,
) -> (f64, f64) {
    let windows: Vec<TokenWindow> = (0..cfg.val_windows)
        .map(|i| {
            let ep = (derive_seed(seed, &["val-episode"], &[i as u64]) % dataset.records.len() as u64)
                as usize;
            token_window(
                cfg,
                &dataset.records[ep],
                &tokens[ep],
                derive_seed(seed, &["val-window"], &[i as u64]),
            )
        })
        .collect();
    let (text_ids, inputs, targets, weights) = stack_windows(cfg, &windows);

    let mut persist = 0.0f64;
    let mut count = 0.0f64;
    for w in &windows {
        for j in 0..cfg.horizon {
            if w.weights[j] == 0.0 {
                continue;
            }
            for (a, b) in w.inputs[j].iter().zip(w.targets[j].iter()) {
                persist += (a - b).abs() as f64;
                count += 1.0;
            }
        }
    }

    let g = Graph::<f32>::inference();
    let b = params.bind_frozen(&g);
    let loss = prediction_loss(
        &b,
        cfg,
        &text_ids,
        &g.constant(inputs),
        &g.constant(targets),
        &g.constant(weights),
        None,
    );
    (loss.scalar() as f64, persist / count)
}

/// Train the latent world model against frozen encoder tokens.
/// Deterministic per seed; the checkpoint records config and final losses.
pub fn train_latent_wm(
    manifest: &DatasetManifest,
    encoder: &Encoder,
    cfg: &LatentWmConfig,
    seed: u64,
) -> Result<Checkpoint> {
    assert_eq!(cfg.model_dim, encoder.cfg.dim, "world model width must match encoder tokens");
    assert_eq!(cfg.n_tokens, encoder.cfg.n_tokens(), "token count must match encoder grid");
    let train = Dataset::load(manifest, "train")?;
    let val = Dataset::load(manifest, "test").unwrap_or_else(|_| train.clone());
    let train_tokens = encode_dataset(encoder, &train);
    let val_tokens = encode_dataset(encoder, &val);

    let mut params = ParamStore::<f32>::new(derive_seed(seed, &["latent-wm-init"], &[]));
    init_latent_wm_params(&mut params, cfg);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.steps as usize);

    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let windows: Vec<TokenWindow> = (0..cfg.batch_size)
            .map(|slot| {
                let pick = derive_seed(seed, &["episode-pick"], &[step as u64, slot as u64]);
                let ep = (pick % train.records.len() as u64) as usize;
                token_window(
                    cfg,
                    &train.records[ep],
                    &train_tokens[ep],
                    derive_seed(seed, &["window"], &[step as u64, slot as u64]),
                )
            })
            .collect();
        let (text_ids, inputs, targets, weights) = stack_windows(cfg, &windows);

        let g = Graph::<f32>::new();
        let b = params.bind(&g);
        let loss = prediction_loss(
            &b,
            cfg,
            &text_ids,
            &g.constant(inputs),
            &g.constant(targets),
            &g.constant(weights),
            None,
        );
        let value = loss.scalar() as f64;
        if !value.is_finite() {
            bail!("latent world model training diverged: loss {value} at step {step}");
        }
        if step == 0 {
            first_loss = value;
        }
        last_loss = value;
        let grads = b.grads(&g.backward(&loss));
        opt.step(&mut params, &grads);
    }

    let (val_loss, persistence) =
        eval_windows(&params, cfg, &val, &val_tokens, derive_seed(seed, &["val"], &[]));

    let mut meta = BTreeMap::new();
    meta.insert("model".to_string(), serde_json::json!("latent_wm"));
    meta.insert("config".to_string(), serde_json::to_value(cfg).expect("config serializes"));
    meta.insert("seed".to_string(), serde_json::json!(seed));
    meta.insert("first_train_loss".to_string(), serde_json::json!(first_loss));
    meta.insert("final_train_loss".to_string(), serde_json::json!(last_loss));
    meta.insert("final_val_loss".to_string(), serde_json::json!(val_loss));
    meta.insert("persistence_val_loss".to_string(), serde_json::json!(persistence));
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{tokenize, ThemeId};
    use crate::checkpoint::param_hash;
    use crate::episodes::generate_episodes;
    use crate::latent_encoder::EncoderConfig;
    use crate::rngs::rng_from;
    use rand::Rng;
    use tempfile::tempdir;

    fn small_cfg() -> LatentWmConfig {
        LatentWmConfig {
            layers: 2,
            heads: 4,
            model_dim: 32,
            ffn_hidden: 64,
            n_tokens: 16,
            horizon: 4,
            ..LatentWmConfig::default()
        }
    }

    fn random_grid(cfg: &LatentWmConfig, seed: u64) -> TokenGrid {
        let mut rng = rng_from(seed);
        let data: Vec<f32> =
            (0..cfg.n_tokens * cfg.model_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TokenGrid {
            tokens: ArrayD::from_shape_vec(IxDyn(&[cfg.n_tokens, cfg.model_dim]), data).unwrap(),
        }
    }

    #[test]
    fn predict_next_shape_context_limits() {
        let cfg = small_cfg();
        let model = LatentWm::init(&cfg, 0);
        let text = tokenize("go to red block").unwrap();
        let s0 = random_grid(&cfg, 1);
        let pred = model.predict_next(&text, &[s0.clone()]).unwrap();
        assert_eq!(pred.tokens.shape(), &[16, 32]);
        assert_eq!(pred, model.predict_next(&text, &[s0.clone()]).unwrap());
        assert!(model.predict_next(&text, &[]).is_err());
        let too_many = vec![s0; cfg.max_frames() + 1];
        assert!(model.predict_next(&text, &too_many).is_err());
    }

    #[test]
    fn future_frames_cannot_leak_backward() {
        let cfg = small_cfg();
        let model = LatentWm::init(&cfg, 3);
        let text = tokenize("push green block right").unwrap();
        let frames: Vec<TokenGrid> = (0..3).map(|i| random_grid(&cfg, 10 + i)).collect();

        let g = Graph::<f32>::inference();
        let b = model.params.bind_frozen(&g);
        let ids = model.ids(&text);
        let two = forward_frames(&b, &cfg, &ids, &g.constant(grids_to_array(&cfg, &frames[..2])));
        let three = forward_frames(&b, &cfg, &ids, &g.constant(grids_to_array(&cfg, &frames)));
        for n in 0..cfg.n_tokens {
            for d in 0..cfg.model_dim {
                let a = two.array()[[0, 1, n, d]];
                let c = three.array()[[0, 1, n, d]];
                assert!((a - c).abs() < 1e-5, "position 1 changed: {a} vs {c}");
            }
        }
    }

    #[test]
    fn memorizes_a_single_sequence() {
        let cfg = LatentWmConfig { steps: 800, lr: 3e-3, ..small_cfg() };
        let mut params = ParamStore::<f32>::new(7);
        init_latent_wm_params(&mut params, &cfg);
        let mut opt = AdamW::new(cfg.lr, 0.0, cfg.steps as usize);

        let text = tokenize("press the button").unwrap();
        let ids: Vec<usize> = text.token_ids.iter().map(|&i| i as usize).collect();
        let grids: Vec<TokenGrid> = (0..=cfg.horizon).map(|i| random_grid(&cfg, 40 + i as u64)).collect();
        let inputs = {
            let mut a = ArrayD::zeros(IxDyn(&[1, cfg.horizon, cfg.n_tokens, cfg.model_dim]));
            for j in 0..cfg.horizon {
                a.slice_mut(ndarray::s![0, j, .., ..]).assign(
                    &grids[j].tokens.view().into_dimensionality::<ndarray::Ix2>().unwrap(),
                );
            }
            a
        };
        let targets = {
            let mut a = ArrayD::zeros(IxDyn(&[1, cfg.horizon, cfg.n_tokens, cfg.model_dim]));
            for j in 0..cfg.horizon {
                a.slice_mut(ndarray::s![0, j, .., ..]).assign(
                    &grids[j + 1].tokens.view().into_dimensionality::<ndarray::Ix2>().unwrap(),
                );
            }
            a
        };
        let weights = ArrayD::ones(IxDyn(&[1, cfg.horizon]));

        let mut final_loss = f64::NAN;
        for _ in 0..cfg.steps {
            let g = Graph::<f32>::new();
            let b = params.bind(&g);
            let loss = prediction_loss(
                &b,
                &cfg,
                &ids,
                &g.constant(inputs.clone()),
                &g.constant(targets.clone()),
                &g.constant(weights.clone()),
                None,
            );
            final_loss = loss.scalar() as f64;
            let grads = b.grads(&g.backward(&loss));
            opt.step(&mut params, &grads);
        }
        assert!(final_loss < 0.02, "teacher-forced L1 stuck at {final_loss}");
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let dir = tempdir().unwrap();
        let manifest = generate_episodes(dir.path(), &[ThemeId::A], 1, 2).unwrap();
        let enc_cfg = EncoderConfig { patch: 8, dim: 32, blocks: 1, heads: 2, ffn_hidden: 64, ..EncoderConfig::default() };
        let encoder = Encoder::init(&enc_cfg, 1);
        let cfg = LatentWmConfig {
            steps: 30,
            batch_size: 4,
            val_windows: 8,
            horizon: 4,
            ..small_cfg()
        };
        let ckpt = train_latent_wm(&manifest, &encoder, &cfg, 5).unwrap();
        let again = train_latent_wm(&manifest, &encoder, &cfg, 5).unwrap();
        assert_eq!(param_hash(&ckpt.params), param_hash(&again.params));
        let first = ckpt.meta["first_train_loss"].as_f64().unwrap();
        let last = ckpt.meta["final_train_loss"].as_f64().unwrap();
        assert!(last < first, "L1 {first} -> {last} did not improve");
        assert!(ckpt.meta["persistence_val_loss"].as_f64().unwrap() > 0.0);

        let model = LatentWm::from_checkpoint(&ckpt).unwrap();
        let text = tokenize("go to blue block").unwrap();
        let roll = model.rollout(&text, &random_grid(&cfg, 2), 3).unwrap();
        assert_eq!(roll.shape(), &[3, 16, 32]);
        assert_eq!(roll, model.rollout(&text, &random_grid(&cfg, 2), 3).unwrap());
    }
}
