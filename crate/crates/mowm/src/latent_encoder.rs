//! Frozen patch encoder mapping a frame to a grid of visual tokens. A small
//! ViT is pretrained once with masked-patch reconstruction, then frozen; the
//! rest of the pipeline treats it as a fixed tokenizer.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blockworld::{Frame, FRAME_SIDE};
use crate::checkpoint::Checkpoint;
use crate::episodes::{Dataset, DatasetManifest};
use crate::nn::{
    layer_norm, layer_norm_init, linear, linear_init, transformer_block, transformer_block_init,
    BlockCfg, Bound, ParamStore,
};
use crate::optim::AdamW;
use crate::rngs::{derive_seed, rng_from};
use crate::tensor::{Graph, Scalar, Tensor};

/// Architecture and pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Side length of a square patch in pixels.
    pub patch: usize,
    /// Token embedding width.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub steps: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of patches hidden during pretraining.
    pub mask_ratio: f64,
    /// Frames drawn for the final validation estimate.
    pub val_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch: 4,
            dim: 128,
            blocks: 2,
            heads: 4,
            ffn_hidden: 256,
            steps: 2000,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.04,
            mask_ratio: 0.5,
            val_frames: 256,
        }
    }
}

impl EncoderConfig {
    /// Tokens per side of the patch grid.
    pub fn grid_side(&self) -> usize {
        FRAME_SIDE / self.patch
    }

    /// Tokens per frame.
    pub fn n_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Flattened pixel values per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    fn block_cfg(&self) -> BlockCfg {
        BlockCfg { dim: self.dim, heads: self.heads, ffn_hidden: self.ffn_hidden, cross: false }
    }
}

/// Per-frame visual tokens, shape (n_tokens, dim).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: ArrayD<f32>,
}

/// Split a frame into non-overlapping square patches, normalized to [0, 1].
/// Rows follow the token order (patch-row, patch-col); columns hold the
/// patch pixels in (y, x, channel) order.
pub fn patchify(frame: &Frame, patch: usize) -> ArrayD<f32> {
    let side = FRAME_SIDE / patch;
    let pdim = patch * patch * 3;
    let mut out = ArrayD::zeros(IxDyn(&[side * side, pdim]));
    for py in 0..side {
        for px in 0..side {
            let token = py * side + px;
            let mut col = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let y = py * patch + dy;
                    let x = px * patch + dx;
                    for c in 0..3 {
                        out[[token, col]] = frame[(y * FRAME_SIDE + x) * 3 + c] as f32 / 255.0;
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

fn init_encoder_params<S: Scalar>(p: &mut ParamStore<S>, cfg: &EncoderConfig) {
    linear_init(p, "enc.patch", cfg.patch_dim(), cfg.dim);
    p.init_normal("enc.pos", &[cfg.n_tokens(), cfg.dim], 0.02);
    for i in 0..cfg.blocks {
        transformer_block_init(p, &format!("enc.block{i}"), &cfg.block_cfg());
    }
    layer_norm_init(p, "enc.ln_out", cfg.dim);
}

fn init_decoder_params<S: Scalar>(p: &mut ParamStore<S>, cfg: &EncoderConfig) {
    p.init_normal("dec.mask_token", &[1, 1, cfg.dim], 0.02);
    for i in 0..cfg.blocks {
        transformer_block_init(p, &format!("dec.block{i}"), &cfg.block_cfg());
    }
    linear_init(p, "dec.head", cfg.dim, cfg.patch_dim());
}

/// Patch embeddings through the encoder trunk. `patches`: (B, N, P) ->
/// tokens (B, N, D). `hide` optionally replaces embeddings with the mask
/// token where its (B, N, 1) entries are 1.
fn encoder_trunk<S: Scalar>(
    b: &Bound<S>,
    cfg: &EncoderConfig,
    patches: &Tensor<S>,
    hide: Option<&Tensor<S>>,
) -> Tensor<S> {
    let g = b.g;
    let mut x = linear(b, "enc.patch", patches);
    if let Some(m) = hide {
        let keep = g.add_scalar(&g.neg(m), 1.0);
        x = g.add(&g.mul(&x, &keep), &g.mul(b.get("dec.mask_token"), m));
    }
    x = g.add(&x, b.get("enc.pos"));
    for i in 0..cfg.blocks {
        x = transformer_block(b, &format!("enc.block{i}"), &cfg.block_cfg(), &x, None, None);
    }
    layer_norm(b, "enc.ln_out", &x)
}

/// Reconstruction head used only during pretraining.
fn decoder_head<S: Scalar>(b: &Bound<S>, cfg: &EncoderConfig, tokens: &Tensor<S>) -> Tensor<S> {
    let mut x = tokens.clone();
    for i in 0..cfg.blocks {
        x = transformer_block(b, &format!("dec.block{i}"), &cfg.block_cfg(), &x, None, None);
    }
    linear(b, "dec.head", &x)
}

/// A pretrained (or freshly initialized) encoder ready for inference.
#[derive(Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: ParamStore<f32>,
}

impl Encoder {
    /// Randomly initialized encoder; useful for fast tests.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Encoder {
        let mut params = ParamStore::new(derive_seed(seed, &["encoder-init"], &[]));
        init_encoder_params(&mut params, cfg);
        Encoder { cfg: cfg.clone(), params }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Encoder> {
        let cfg_value = ckpt
            .meta
            .get("config")
            .with_context(|| "encoder checkpoint meta lacks a config entry")?;
        let cfg: EncoderConfig =
            serde_json::from_value(cfg_value.clone()).context("parsing encoder config")?;
        Ok(Encoder { cfg, params: ckpt.params.clone() })
    }

    /// Map one frame to its token grid. Pure: identical frames give
    /// identical tokens.
    pub fn encode(&self, frame: &Frame) -> TokenGrid {
        let cfg = &self.cfg;
        let g = Graph::<f32>::inference();
        let b = self.params.bind_frozen(&g);
        let patches = patchify(frame, cfg.patch);
        let batched = patches
            .into_shape(IxDyn(&[1, cfg.n_tokens(), cfg.patch_dim()]))
            .expect("patch grid reshapes");
        let tokens = encoder_trunk(&b, cfg, &g.constant(batched), None);
        let tokens = tokens
            .array()
            .clone()
            .into_shape(IxDyn(&[cfg.n_tokens(), cfg.dim]))
            .expect("token grid reshapes");
        TokenGrid { tokens }
    }
}

/// Draw `count` frames uniformly over (episode, frame index) pairs.
fn sample_frames(dataset: &Dataset, count: usize, seed: u64) -> Vec<Frame> {
    let mut rng = rng_from(seed);
    (0..count)
        .map(|_| {
            let ep = &dataset.records[rng.gen_range(0..dataset.records.len())];
            ep.frames[rng.gen_range(0..ep.frames.len())]
        })
        .collect()
}

/// Exactly `ratio` of each sample's patches hidden, as a (B, N, 1) indicator.
fn sample_masks<S: Scalar>(batch: usize, n_tokens: usize, ratio: f64, seed: u64) -> ArrayD<S> {
    let mut rng = rng_from(seed);
    let n_hide = ((n_tokens as f64) * ratio).round() as usize;
    let mut mask = ArrayD::zeros(IxDyn(&[batch, n_tokens, 1]));
    let mut order: Vec<usize> = (0..n_tokens).collect();
    for b in 0..batch {
        order.shuffle(&mut rng);
        for &t in &order[..n_hide] {
            mask[[b, t, 0]] = S::one();
        }
    }
    mask
}

fn frames_to_batch(frames: &[Frame], cfg: &EncoderConfig) -> ArrayD<f32> {
    let mut out = ArrayD::zeros(IxDyn(&[frames.len(), cfg.n_tokens(), cfg.patch_dim()]));
    for (i, f) in frames.iter().enumerate() {
        out.slice_mut(ndarray::s![i, .., ..]).assign(
            &patchify(f, cfg.patch)
                .into_dimensionality::<ndarray::Ix2>()
                .expect("patchify is rank 2"),
        );
    }
    out
}

/// Masked-pixel mean squared error of the reconstruction pipeline.
fn masked_loss<S: Scalar>(
    b: &Bound<S>,
    cfg: &EncoderConfig,
    patches: &Tensor<S>,
    hide: &Tensor<S>,
) -> Tensor<S> {
    let g = b.g;
    let tokens = encoder_trunk(b, cfg, patches, Some(hide));
    let recon = decoder_head(b, cfg, &tokens);
    let diff = g.mul(&g.sub(&recon, patches), hide);
    let total = g.sum_all(&g.square(&diff));
    let n_masked: f64 = hide.array().iter().map(|v| Scalar::to_f64(*v)).sum();
    g.scale(&total, 1.0 / (n_masked * cfg.patch_dim() as f64))
}

/// Masked MSE of predicting each image's own mean color everywhere.
fn mean_color_loss(frames: &[Frame], cfg: &EncoderConfig, hide: &ArrayD<f32>) -> f64 {
    let patches = frames_to_batch(frames, cfg);
    let mut total = 0.0f64;
    let mut count = 0.0f64;
    for (i, _) in frames.iter().enumerate() {
        let mut mean = [0.0f64; 3];
        for t in 0..cfg.n_tokens() {
            for col in 0..cfg.patch_dim() {
                mean[col % 3] += patches[[i, t, col]] as f64;
            }
        }
        let per_channel = (cfg.n_tokens() * cfg.patch_dim() / 3) as f64;
        for m in &mut mean {
            *m /= per_channel;
        }
        for t in 0..cfg.n_tokens() {
            if hide[[i, t, 0]] == 0.0 {
                continue;
            }
            for col in 0..cfg.patch_dim() {
                let d = patches[[i, t, col]] as f64 - mean[col % 3];
                total += d * d;
                count += 1.0;
            }
        }
    }
    total / count
}

fn eval_masked(params: &ParamStore<f32>, cfg: &EncoderConfig, frames: &[Frame], seed: u64) -> f64 {
    let g = Graph::<f32>::inference();
    let b = params.bind_frozen(&g);
    let patches = g.constant(frames_to_batch(frames, cfg));
    let hide = g.constant(sample_masks::<f32>(frames.len(), cfg.n_tokens(), cfg.mask_ratio, seed));
    masked_loss(&b, cfg, &patches, &hide).scalar() as f64
}

/// Pretrain the encoder with masked-patch reconstruction and return a
/// checkpoint holding the encoder parameters only. Deterministic per seed.
pub fn pretrain_encoder(
    manifest: &DatasetManifest,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<Checkpoint> {
    let train = Dataset::load(manifest, "train")?;
    let val = Dataset::load(manifest, "test").unwrap_or_else(|_| train.clone());

    let mut params = ParamStore::<f32>::new(derive_seed(seed, &["encoder-init"], &[]));
    init_encoder_params(&mut params, cfg);
    init_decoder_params(&mut params, cfg);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.steps as usize);

    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let frames = sample_frames(
            &train,
            cfg.batch_size,
            derive_seed(seed, &["encoder-frames"], &[step as u64]),
        );
        let g = Graph::<f32>::new();
        let b = params.bind(&g);
        let patches = g.constant(frames_to_batch(&frames, cfg));
        let hide = g.constant(sample_masks::<f32>(
            cfg.batch_size,
            cfg.n_tokens(),
            cfg.mask_ratio,
            derive_seed(seed, &["encoder-mask"], &[step as u64]),
        ));
        let loss = masked_loss(&b, cfg, &patches, &hide);
        let value = loss.scalar() as f64;
        if !value.is_finite() {
            bail!("encoder pretraining diverged: loss {value} at step {step}");
        }
        if step == 0 {
            first_loss = value;
        }
        last_loss = value;
        let grads = b.grads(&g.backward(&loss));
        opt.step(&mut params, &grads);
    }

    let val_frames = sample_frames(&val, cfg.val_frames, derive_seed(seed, &["encoder-val"], &[]));
    let val_seed = derive_seed(seed, &["encoder-val-mask"], &[]);
    let val_loss = eval_masked(&params, cfg, &val_frames, val_seed);
    let baseline = mean_color_loss(
        &val_frames,
        cfg,
        &sample_masks::<f32>(val_frames.len(), cfg.n_tokens(), cfg.mask_ratio, val_seed),
    );

    let mut encoder_only = ParamStore::<f32>::new(0);
    for (name, arr) in &params.map {
        if name.starts_with("enc.") {
            encoder_only.insert(name, arr.clone());
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("model".to_string(), serde_json::json!("encoder"));
    meta.insert("config".to_string(), serde_json::to_value(cfg).expect("config serializes"));
    meta.insert("seed".to_string(), serde_json::json!(seed));
    meta.insert("first_train_loss".to_string(), serde_json::json!(first_loss));
    meta.insert("final_train_loss".to_string(), serde_json::json!(last_loss));
    meta.insert("final_val_loss".to_string(), serde_json::json!(val_loss));
    meta.insert("baseline_val_loss".to_string(), serde_json::json!(baseline));
    Ok(Checkpoint { meta, params: encoder_only })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{render, reset, ThemeId};
    use crate::checkpoint::{self, param_hash};
    use crate::episodes::generate_episodes;
    use tempfile::tempdir;

    #[test]
    fn patchify_partitions_the_frame() {
        let state = reset(ThemeId::A, 0).unwrap();
        let frame = render(&state);
        let base = patchify(&frame, 4);
        assert_eq!(base.shape(), &[64, 48]);

        // Change one pixel inside patch (2, 5): exactly one row moves.
        let mut other = frame;
        let (y, x) = (2 * 4 + 1, 5 * 4 + 3);
        other[(y * FRAME_SIDE + x) * 3 + 1] = other[(y * FRAME_SIDE + x) * 3 + 1].wrapping_add(40);
        let changed = patchify(&other, 4);
        for t in 0..64 {
            let differs = (0..48).any(|c| base[[t, c]] != changed[[t, c]]);
            assert_eq!(differs, t == 2 * 8 + 5, "token {t}");
        }
    }

    #[test]
    fn encode_is_pure_with_expected_shape() {
        let enc = Encoder::init(&EncoderConfig::default(), 9);
        let frame = render(&reset(ThemeId::B, 3).unwrap());
        let a = enc.encode(&frame);
        assert_eq!(a.tokens.shape(), &[64, 128]);
        assert!(a.tokens.iter().all(|v| v.is_finite()));
        assert_eq!(a, enc.encode(&frame));
    }

    #[test]
    fn pretraining_learns_deterministically_and_round_trips() {
        let dir = tempdir().unwrap();
        let manifest = generate_episodes(dir.path(), &[ThemeId::A], 1, 5).unwrap();
        let cfg = EncoderConfig {
            steps: 80,
            batch_size: 8,
            val_frames: 32,
            ..EncoderConfig::default()
        };
        let ckpt = pretrain_encoder(&manifest, &cfg, 11).unwrap();
        let again = pretrain_encoder(&manifest, &cfg, 11).unwrap();
        assert_eq!(param_hash(&ckpt.params), param_hash(&again.params));

        let first = ckpt.meta["first_train_loss"].as_f64().unwrap();
        let last = ckpt.meta["final_train_loss"].as_f64().unwrap();
        assert!(last < 0.8 * first, "masked loss {first} -> {last} did not improve");
        assert!(ckpt.params.map.keys().all(|k| k.starts_with("enc.")), "decoder was discarded");

        let path = dir.path().join("enc.ckpt");
        checkpoint::save(&path, &ckpt.params, &ckpt.meta).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        let enc = Encoder::from_checkpoint(&loaded).unwrap();
        let frame = render(&reset(ThemeId::A, 0).unwrap());
        let direct = Encoder { cfg: cfg.clone(), params: ckpt.params.clone() };
        assert_eq!(enc.encode(&frame), direct.encode(&frame));
    }
}
