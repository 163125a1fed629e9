//! Parameter storage and neural-net building blocks on top of the tape
//! engine. Parameters live outside any graph as named arrays in sorted-map
//! order; a forward pass binds them into a graph as leaves (trainable) or
//! constants (frozen). Each parameter is initialized from an RNG seeded by
//! (model seed, parameter name), so creation order never affects weights.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rngs::{derive_seed, rng_from};
use crate::tensor::{GradStore, Graph, Scalar, Tensor};

/// Named parameter arrays, iterated in name order.
#[derive(Clone)]
pub struct ParamStore<S: Scalar> {
    pub map: BTreeMap<String, ArrayD<S>>,
    seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            map: BTreeMap::new(),
            seed,
        }
    }

    fn param_rng(&self, name: &str) -> rand_chacha::ChaCha12Rng {
        rng_from(derive_seed(self.seed, &["param", name], &[]))
    }

    pub fn insert(&mut self, name: &str, arr: ArrayD<S>) {
        let prev = self.map.insert(name.to_string(), arr);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Uniform in (-bound, bound) with bound = 1/sqrt(fan_in).
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = self.param_rng(name);
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut rng = self.param_rng(name);
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                S::from_f64(z * std)
            })
            .collect();
        self.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::ones(IxDyn(shape)));
    }

    pub fn get(&self, name: &str) -> &ArrayD<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<S> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn n_values(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Bind all parameters as differentiable leaves.
    pub fn bind<'a>(&self, g: &'a Graph<S>) -> Bound<'a, S> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
            .collect();
        Bound { g, map }
    }

    /// Bind all parameters as constants; no gradients can reach them.
    pub fn bind_frozen<'a>(&self, g: &'a Graph<S>) -> Bound<'a, S> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        Bound { g, map }
    }
}

/// Parameters bound into one graph for one forward pass.
pub struct Bound<'g, S: Scalar> {
    pub g: &'g Graph<S>,
    map: BTreeMap<String, Tensor<S>>,
}

impl<'g, S: Scalar> Bound<'g, S> {
    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients by parameter name; absent entries got no gradient.
    pub fn grads(&self, store: &GradStore<S>) -> BTreeMap<String, ArrayD<S>> {
        self.map
            .iter()
            .filter_map(|(k, t)| store.get(t).map(|gr| (k.clone(), gr.clone())))
            .collect()
    }
}

// ---- layers ----
// Layers are name prefixes plus forward functions; all state is in the store.

pub fn linear_init<S: Scalar>(p: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize) {
    p.init_uniform(&format!("{name}.w"), &[d_in, d_out], d_in);
    p.init_zeros(&format!("{name}.b"), &[d_out]);
}

pub fn linear_init_zero<S: Scalar>(p: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize) {
    p.init_zeros(&format!("{name}.w"), &[d_in, d_out]);
    p.init_zeros(&format!("{name}.b"), &[d_out]);
}

/// x: (..., d_in) -> (..., d_out).
pub fn linear<S: Scalar>(b: &Bound<S>, name: &str, x: &Tensor<S>) -> Tensor<S> {
    let g = b.g;
    let w = b.get(&format!("{name}.w"));
    let bias = b.get(&format!("{name}.b"));
    let shape = x.shape().to_vec();
    let d_in = *shape.last().expect("linear input must have rank >= 1");
    assert_eq!(d_in, w.shape()[0], "linear {name}: dim mismatch");
    let n: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(x, &[n, d_in]);
    let y = g.matmul(&flat, w);
    let y = g.add(&y, bias);
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = w.shape()[1];
    g.reshape(&y, &out_shape)
}

pub fn layer_norm_init<S: Scalar>(p: &mut ParamStore<S>, name: &str, d: usize) {
    p.init_ones(&format!("{name}.g"), &[d]);
    p.init_zeros(&format!("{name}.b"), &[d]);
}

/// Normalize over the last axis: (x - mean) / sqrt(var + eps) * g + b.
pub fn layer_norm<S: Scalar>(b: &Bound<S>, name: &str, x: &Tensor<S>) -> Tensor<S> {
    let g = b.g;
    let last = x.shape().len() - 1;
    let mu = g.mean_axis_keep(x, last);
    let centered = g.sub(x, &mu);
    let var = g.mean_axis_keep(&g.square(&centered), last);
    let inv = g.rsqrt(&g.add_scalar(&var, 1e-5));
    let normed = g.mul(&centered, &inv);
    let scaled = g.mul(&normed, b.get(&format!("{name}.g")));
    g.add(&scaled, b.get(&format!("{name}.b")))
}

pub struct MhaDims {
    pub dim: usize,
    pub heads: usize,
}

pub fn mha_init<S: Scalar>(p: &mut ParamStore<S>, name: &str, dim: usize) {
    for part in ["q", "k", "v", "o"] {
        linear_init(p, &format!("{name}.{part}"), dim, dim);
    }
}

/// Multi-head attention. q_in: (B, Lq, D); kv_in: (B, Lk, D).
/// `mask` is an optional additive (Lq, Lk) bias (0 or large negative).
pub fn mha<S: Scalar>(
    b: &Bound<S>,
    name: &str,
    dims: &MhaDims,
    q_in: &Tensor<S>,
    kv_in: &Tensor<S>,
    mask: Option<&Tensor<S>>,
) -> Tensor<S> {
    let g = b.g;
    let (batch, lq, d) = (q_in.shape()[0], q_in.shape()[1], q_in.shape()[2]);
    let lk = kv_in.shape()[1];
    assert_eq!(d, dims.dim);
    let h = dims.heads;
    let dh = d / h;

    let split = |t: &Tensor<S>, l: usize| {
        let t = g.reshape(t, &[batch, l, h, dh]);
        let t = g.permute(&t, &[0, 2, 1, 3]);
        g.reshape(&t, &[batch * h, l, dh])
    };
    let q = split(&linear(b, &format!("{name}.q"), q_in), lq);
    let k = split(&linear(b, &format!("{name}.k"), kv_in), lk);
    let v = split(&linear(b, &format!("{name}.v"), kv_in), lk);

    let kt = g.permute(&k, &[0, 2, 1]);
    let scores = g.scale(&g.bmm(&q, &kt), 1.0 / (dh as f64).sqrt());
    let scores = match mask {
        Some(m) => g.add(&scores, m),
        None => scores,
    };
    let attn = g.softmax_last(&scores);
    let ctx = g.bmm(&attn, &v);
    let ctx = g.reshape(&ctx, &[batch, h, lq, dh]);
    let ctx = g.permute(&ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(&ctx, &[batch, lq, d]);
    linear(b, &format!("{name}.o"), &ctx)
}

pub fn swiglu_init<S: Scalar>(p: &mut ParamStore<S>, name: &str, dim: usize, hidden: usize) {
    linear_init(p, &format!("{name}.wg"), dim, hidden);
    linear_init(p, &format!("{name}.wu"), dim, hidden);
    linear_init(p, &format!("{name}.wd"), hidden, dim);
}

/// SwiGLU feed-forward: down( silu(gate(x)) * up(x) ).
pub fn swiglu<S: Scalar>(b: &Bound<S>, name: &str, x: &Tensor<S>) -> Tensor<S> {
    let g = b.g;
    let gate = g.silu(&linear(b, &format!("{name}.wg"), x));
    let up = linear(b, &format!("{name}.wu"), x);
    linear(b, &format!("{name}.wd"), &g.mul(&gate, &up))
}

pub struct BlockCfg {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub cross: bool,
}

pub fn transformer_block_init<S: Scalar>(p: &mut ParamStore<S>, name: &str, cfg: &BlockCfg) {
    layer_norm_init(p, &format!("{name}.ln1"), cfg.dim);
    mha_init(p, &format!("{name}.attn"), cfg.dim);
    if cfg.cross {
        layer_norm_init(p, &format!("{name}.lnc"), cfg.dim);
        mha_init(p, &format!("{name}.xattn"), cfg.dim);
    }
    layer_norm_init(p, &format!("{name}.ln2"), cfg.dim);
    swiglu_init(p, &format!("{name}.ffn"), cfg.dim, cfg.ffn_hidden);
}

/// Pre-norm block: self-attention, optional cross-attention, feed-forward,
/// each with a residual connection. x: (B, L, D).
pub fn transformer_block<S: Scalar>(
    b: &Bound<S>,
    name: &str,
    cfg: &BlockCfg,
    x: &Tensor<S>,
    ctx: Option<&Tensor<S>>,
    mask: Option<&Tensor<S>>,
) -> Tensor<S> {
    let g = b.g;
    let dims = MhaDims {
        dim: cfg.dim,
        heads: cfg.heads,
    };
    let h = layer_norm(b, &format!("{name}.ln1"), x);
    let mut x = g.add(x, &mha(b, &format!("{name}.attn"), &dims, &h, &h, mask));
    if cfg.cross {
        let ctx = ctx.expect("cross block needs context");
        let h = layer_norm(b, &format!("{name}.lnc"), &x);
        x = g.add(&x, &mha(b, &format!("{name}.xattn"), &dims, &h, ctx, None));
    }
    let h = layer_norm(b, &format!("{name}.ln2"), &x);
    g.add(&x, &swiglu(b, &format!("{name}.ffn"), &h))
}

pub fn conv2d_init<S: Scalar>(
    p: &mut ParamStore<S>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    p.init_uniform(&format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k);
    p.init_zeros(&format!("{name}.b"), &[c_out]);
}

pub fn conv2d_init_zero<S: Scalar>(
    p: &mut ParamStore<S>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    p.init_zeros(&format!("{name}.w"), &[c_out, c_in, k, k]);
    p.init_zeros(&format!("{name}.b"), &[c_out]);
}

pub fn conv2d<S: Scalar>(
    b: &Bound<S>,
    name: &str,
    x: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Tensor<S> {
    b.g.conv2d(
        x,
        b.get(&format!("{name}.w")),
        b.get(&format!("{name}.b")),
        stride,
        padding,
    )
}

pub fn conv_transpose2d_init<S: Scalar>(
    p: &mut ParamStore<S>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    p.init_uniform(&format!("{name}.w"), &[c_in, c_out, k, k], c_in * k * k);
    p.init_zeros(&format!("{name}.b"), &[c_out]);
}

pub fn conv_transpose2d<S: Scalar>(
    b: &Bound<S>,
    name: &str,
    x: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Tensor<S> {
    b.g.conv_transpose2d(
        x,
        b.get(&format!("{name}.w")),
        b.get(&format!("{name}.b")),
        stride,
        padding,
    )
}

/// Group normalization over (B, C, H, W) with `groups` channel groups.
pub fn group_norm_init<S: Scalar>(p: &mut ParamStore<S>, name: &str, c: usize) {
    p.init_ones(&format!("{name}.g"), &[c, 1, 1]);
    p.init_zeros(&format!("{name}.b"), &[c, 1, 1]);
}

pub fn group_norm<S: Scalar>(
    b: &Bound<S>,
    name: &str,
    x: &Tensor<S>,
    groups: usize,
) -> Tensor<S> {
    let g = b.g;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(c % groups, 0, "group_norm {name}: channels not divisible");
    let grouped = g.reshape(x, &[n, groups, (c / groups) * h * w]);
    let mu = g.mean_axis_keep(&grouped, 2);
    let centered = g.sub(&grouped, &mu);
    let var = g.mean_axis_keep(&g.square(&centered), 2);
    let inv = g.rsqrt(&g.add_scalar(&var, 1e-5));
    let normed = g.reshape(&g.mul(&centered, &inv), &[n, c, h, w]);
    let scaled = g.mul(&normed, b.get(&format!("{name}.g")));
    g.add(&scaled, b.get(&format!("{name}.b")))
}

/// Batch normalization over (B, C, H, W). Running statistics live in the
/// store under `.running_mean` / `.running_var` and are updated by the
/// caller via `batch_norm_update_running`; they receive no gradients.
pub fn batch_norm_init<S: Scalar>(p: &mut ParamStore<S>, name: &str, c: usize) {
    p.init_ones(&format!("{name}.g"), &[c, 1, 1]);
    p.init_zeros(&format!("{name}.b"), &[c, 1, 1]);
    p.init_zeros(&format!("{name}.running_mean"), &[c]);
    p.init_ones(&format!("{name}.running_var"), &[c]);
}

pub fn batch_norm_param_names(name: &str) -> [String; 2] {
    [format!("{name}.running_mean"), format!("{name}.running_var")]
}

/// Training-mode forward; returns (output, batch_mean, batch_var) with the
/// statistics detached for the running update.
pub fn batch_norm_train<S: Scalar>(
    b: &Bound<S>,
    name: &str,
    x: &Tensor<S>,
) -> (Tensor<S>, ArrayD<S>, ArrayD<S>) {
    let g = b.g;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let perm = g.permute(x, &[1, 0, 2, 3]);
    let flat = g.reshape(&perm, &[c, n * h * w]);
    let mu = g.mean_axis_keep(&flat, 1);
    let centered = g.sub(&flat, &mu);
    let var = g.mean_axis_keep(&g.square(&centered), 1);
    let inv = g.rsqrt(&g.add_scalar(&var, 1e-5));
    let normed = g.mul(&centered, &inv);
    let back = g.reshape(&normed, &[c, n, h, w]);
    let back = g.permute(&back, &[1, 0, 2, 3]);
    let scaled = g.mul(&back, b.get(&format!("{name}.g")));
    let out = g.add(&scaled, b.get(&format!("{name}.b")));
    let mean_flat = mu.array().to_shape(IxDyn(&[c])).unwrap().to_owned();
    let var_flat = var.array().to_shape(IxDyn(&[c])).unwrap().to_owned();
    (out, mean_flat, var_flat)
}

pub fn batch_norm_update_running<S: Scalar>(
    p: &mut ParamStore<S>,
    name: &str,
    batch_mean: &ArrayD<S>,
    batch_var: &ArrayD<S>,
    momentum: f64,
) {
    let m = S::from_f64(momentum);
    let one_m = S::from_f64(1.0 - momentum);
    let rm = p.get_mut(&format!("{name}.running_mean"));
    *rm = &*rm * one_m + &(batch_mean * m);
    let rv = p.get_mut(&format!("{name}.running_var"));
    *rv = &*rv * one_m + &(batch_var * m);
}

/// Inference-mode forward using running statistics.
pub fn batch_norm_eval<S: Scalar>(b: &Bound<S>, name: &str, x: &Tensor<S>) -> Tensor<S> {
    let g = b.g;
    let c = x.shape()[1];
    let rm = b.get(&format!("{name}.running_mean"));
    let rv = b.get(&format!("{name}.running_var"));
    let rm = g.reshape(&rm.detached(), &[c, 1, 1]);
    let rv = g.reshape(&rv.detached(), &[c, 1, 1]);
    let inv = g.rsqrt(&g.add_scalar(&rv, 1e-5));
    let normed = g.mul(&g.sub(x, &rm), &inv);
    let scaled = g.mul(&normed, b.get(&format!("{name}.g")));
    g.add(&scaled, b.get(&format!("{name}.b")))
}

/// Sinusoidal position/step embedding as a constant row vector (1, dim).
pub fn sinusoidal_embedding<S: Scalar>(g: &Graph<S>, t: f64, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        data.push(S::from_f64((t * freq).sin()));
    }
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        data.push(S::from_f64((t * freq).cos()));
    }
    g.constant(ArrayD::from_shape_vec(IxDyn(&[1, dim]), data).unwrap())
}

/// Additive attention mask from a boolean allow matrix: allowed -> 0,
/// blocked -> -1e9. Shape (Lq, Lk), broadcast over batch by the caller.
pub fn mask_from_allowed<S: Scalar>(g: &Graph<S>, allowed: &[Vec<bool>]) -> Tensor<S> {
    let lq = allowed.len();
    let lk = allowed[0].len();
    let mut data = Vec::with_capacity(lq * lk);
    for row in allowed {
        assert_eq!(row.len(), lk);
        for &a in row {
            data.push(S::from_f64(if a { 0.0 } else { -1e9 }));
        }
    }
    g.constant(ArrayD::from_shape_vec(IxDyn(&[lq, lk]), data).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::<f32>::new(5);
        a.init_uniform("x", &[4, 4], 4);
        a.init_uniform("y", &[4, 4], 4);
        let mut b = ParamStore::<f32>::new(5);
        b.init_uniform("y", &[4, 4], 4);
        b.init_uniform("x", &[4, 4], 4);
        assert_eq!(a.get("x"), b.get("x"));
        assert_eq!(a.get("y"), b.get("y"));
    }

    #[test]
    fn linear_matches_dense_algebra() {
        let mut p = ParamStore::<f64>::new(0);
        linear_init(&mut p, "l", 3, 2);
        let g = Graph::inference();
        let b = p.bind_frozen(&g);
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![1.0, 2.0, 3.0]).unwrap());
        let y = linear(&b, "l", &x);
        let w = p.get("l.w");
        for j in 0..2 {
            let expect: f64 = (0..3).map(|i| x.array()[[0, i]] * w[[i, j]]).sum();
            assert!((y.array()[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut p = ParamStore::<f64>::new(1);
        layer_norm_init(&mut p, "ln", 8);
        let g = Graph::inference();
        let b = p.bind_frozen(&g);
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 8]), (0..16).map(|v| v as f64).collect()).unwrap());
        let y = layer_norm(&b, "ln", &x);
        for r in 0..2 {
            let row: Vec<f64> = (0..8).map(|c| y.array()[[r, c]]).collect();
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn frozen_params_get_no_grads() {
        let mut p = ParamStore::<f64>::new(2);
        linear_init(&mut p, "l", 3, 3);
        let g = Graph::new();
        let b = p.bind_frozen(&g);
        let x = g.leaf(ArrayD::ones(IxDyn(&[2, 3])));
        let y = linear(&b, "l", &x);
        let loss = g.sum_all(&y);
        let grads = g.backward(&loss);
        assert!(b.grads(&grads).is_empty());
        assert!(grads.get(&x).is_some());
    }

    #[test]
    fn mha_mask_blocks_attention() {
        let mut p = ParamStore::<f64>::new(3);
        mha_init(&mut p, "a", 8);
        let dims = MhaDims { dim: 8, heads: 2 };
        let base: Vec<f64> = (0..24).map(|v| (v as f64) * 0.07 - 0.8).collect();
        // Fully causal mask: position 0 ignores positions 1, 2.
        let run = |tail: [f64; 16]| {
            let g = Graph::<f64>::inference();
            let b = p.bind_frozen(&g);
            let mut data = base.clone();
            for (i, v) in tail.iter().enumerate() {
                data[8 + i] = *v;
            }
            let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3, 8]), data).unwrap());
            let allowed = vec![
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true],
            ];
            let m = mask_from_allowed(&g, &allowed);
            let y = mha(&b, "a", &dims, &x, &x, Some(&m));
            (0..8).map(|c| y.array()[[0, 0, c]]).collect::<Vec<f64>>()
        };
        let y1 = run([0.0; 16]);
        let y2 = run([9.0; 16]);
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert!((a - b).abs() < 1e-9, "masked positions leaked");
        }
    }
}
