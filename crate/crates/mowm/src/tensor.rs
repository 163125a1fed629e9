//! Reverse-mode automatic differentiation over `ndarray`, generic in the
//! scalar type so the same model code runs in f32 for training and f64 for
//! finite-difference verification.
//!
//! All tensors are kept in standard (contiguous, row-major) layout and every
//! op is evaluated eagerly; when a graph is recording, each op pushes a
//! backward closure onto a tape. Backward walks the tape in reverse, which is
//! reverse topological order by construction, so gradient accumulation order
//! is fixed and runs are bit-reproducible on a given platform.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};

/// Scalar types the engine supports.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A value in the graph. Cheap to clone; the data is shared.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    pub data: Rc<ArrayD<S>>,
    node: Option<usize>,
}

impl<S: Scalar> Tensor<S> {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn array(&self) -> &ArrayD<S> {
        &self.data
    }

    pub fn scalar(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        *self.data.iter().next().expect("empty tensor")
    }

    pub fn detached(&self) -> Tensor<S> {
        Tensor {
            data: Rc::clone(&self.data),
            node: None,
        }
    }
}

type BackFn<S> = Box<dyn Fn(&ArrayD<S>, &mut GradStore<S>)>;

struct TapeEntry<S: Scalar> {
    out: usize,
    back: BackFn<S>,
}

/// Per-node gradient accumulator, indexed by node id.
pub struct GradStore<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> GradStore<S> {
    pub fn get(&self, t: &Tensor<S>) -> Option<&ArrayD<S>> {
        t.node.and_then(|n| self.grads.get(n).and_then(|g| g.as_ref()))
    }

    fn accumulate(&mut self, node: usize, contribution: ArrayD<S>) {
        if self.grads.len() <= node {
            self.grads.resize_with(node + 1, || None);
        }
        match &mut self.grads[node] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Owner of the tape. Create one per forward/backward pass.
pub struct Graph<S: Scalar> {
    recording: bool,
    next_id: RefCell<usize>,
    tape: RefCell<Vec<TapeEntry<S>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            recording: true,
            next_id: RefCell::new(0),
            tape: RefCell::new(Vec::new()),
        }
    }

    /// A graph that never records; forwards through it are plain math.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Graph::new()
        }
    }

    fn fresh_id(&self) -> usize {
        let mut id = self.next_id.borrow_mut();
        let v = *id;
        *id += 1;
        v
    }

    /// A leaf that participates in differentiation.
    pub fn leaf(&self, data: ArrayD<S>) -> Tensor<S> {
        let node = if self.recording {
            Some(self.fresh_id())
        } else {
            None
        };
        Tensor {
            data: Rc::new(data),
            node,
        }
    }

    /// A constant; no gradient is ever produced for it.
    pub fn constant(&self, data: ArrayD<S>) -> Tensor<S> {
        Tensor {
            data: Rc::new(data),
            node: None,
        }
    }

    fn record1(
        &self,
        out_data: ArrayD<S>,
        a: &Tensor<S>,
        back: impl Fn(&ArrayD<S>) -> ArrayD<S> + 'static,
    ) -> Tensor<S> {
        let node = match (self.recording, a.node) {
            (true, Some(pa)) => {
                let id = self.fresh_id();
                self.tape.borrow_mut().push(TapeEntry {
                    out: id,
                    back: Box::new(move |dout, store| {
                        store.accumulate(pa, back(dout));
                    }),
                });
                Some(id)
            }
            _ => None,
        };
        Tensor {
            data: Rc::new(out_data),
            node,
        }
    }

    fn record2(
        &self,
        out_data: ArrayD<S>,
        a: &Tensor<S>,
        b: &Tensor<S>,
        back: impl Fn(&ArrayD<S>) -> (Option<ArrayD<S>>, Option<ArrayD<S>>) + 'static,
    ) -> Tensor<S> {
        let (pa, pb) = (a.node, b.node);
        let node = if self.recording && (pa.is_some() || pb.is_some()) {
            let id = self.fresh_id();
            self.tape.borrow_mut().push(TapeEntry {
                out: id,
                back: Box::new(move |dout, store| {
                    let (da, db) = back(dout);
                    if let (Some(p), Some(d)) = (pa, da) {
                        store.accumulate(p, d);
                    }
                    if let (Some(p), Some(d)) = (pb, db) {
                        store.accumulate(p, d);
                    }
                }),
            });
            Some(id)
        } else {
            None
        };
        Tensor {
            data: Rc::new(out_data),
            node,
        }
    }

    /// Run backward from a scalar loss. Returns the gradient store.
    pub fn backward(&self, loss: &Tensor<S>) -> GradStore<S> {
        let mut store = GradStore {
            grads: vec![None; *self.next_id.borrow()],
        };
        let node = loss.node.expect("backward through a constant");
        store.accumulate(node, ArrayD::ones(loss.data.raw_dim()));
        let tape = self.tape.borrow();
        for entry in tape.iter().rev() {
            let dout = match store.grads.get(entry.out).and_then(|g| g.clone()) {
                Some(g) => g,
                None => continue,
            };
            (entry.back)(&dout, &mut store);
        }
        store
    }

    // ---- elementwise / broadcast ----

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        let out = broadcast_bin(&a.data, &b.data, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.record2(out, a, b, move |dout| {
            (
                Some(reduce_to_shape(dout, &sa)),
                Some(reduce_to_shape(dout, &sb)),
            )
        })
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        let out = broadcast_bin(&a.data, &b.data, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.record2(out, a, b, move |dout| {
            (
                Some(reduce_to_shape(dout, &sa)),
                Some(reduce_to_shape(dout, &sb).mapv(|v| -v)),
            )
        })
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        let out = broadcast_bin(&a.data, &b.data, |x, y| x * y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (ad, bd) = (Rc::clone(&a.data), Rc::clone(&b.data));
        self.record2(out, a, b, move |dout| {
            let da = broadcast_bin(dout, &bd, |x, y| x * y);
            let db = broadcast_bin(dout, &ad, |x, y| x * y);
            (
                Some(reduce_to_shape(&da, &sa)),
                Some(reduce_to_shape(&db, &sb)),
            )
        })
    }

    pub fn scale(&self, a: &Tensor<S>, c: f64) -> Tensor<S> {
        let k = S::from_f64(c);
        let out = a.data.mapv(|v| v * k);
        self.record1(out, a, move |dout| dout.mapv(|v| v * k))
    }

    pub fn add_scalar(&self, a: &Tensor<S>, c: f64) -> Tensor<S> {
        let k = S::from_f64(c);
        let out = a.data.mapv(|v| v + k);
        self.record1(out, a, |dout| dout.clone())
    }

    pub fn neg(&self, a: &Tensor<S>) -> Tensor<S> {
        self.scale(a, -1.0)
    }

    pub fn square(&self, a: &Tensor<S>) -> Tensor<S> {
        let out = a.data.mapv(|v| v * v);
        let ad = Rc::clone(&a.data);
        self.record1(out, a, move |dout| {
            let two = S::from_f64(2.0);
            ndarray::Zip::from(dout)
                .and(&*ad)
                .map_collect(|&d, &x| d * two * x)
        })
    }

    pub fn sqrt(&self, a: &Tensor<S>) -> Tensor<S> {
        let out = a.data.mapv(|v| v.sqrt());
        let od = out.clone();
        self.record1(out, a, move |dout| {
            let half = S::from_f64(0.5);
            ndarray::Zip::from(dout)
                .and(&od)
                .map_collect(|&d, &y| d * half / y)
        })
    }

    pub fn rsqrt(&self, a: &Tensor<S>) -> Tensor<S> {
        let out = a.data.mapv(|v| v.sqrt().recip());
        let od = out.clone();
        self.record1(out, a, move |dout| {
            let mhalf = S::from_f64(-0.5);
            ndarray::Zip::from(dout)
                .and(&od)
                .map_collect(|&d, &y| d * mhalf * y * y * y)
        })
    }

    pub fn abs(&self, a: &Tensor<S>) -> Tensor<S> {
        let out = a.data.mapv(|v| v.abs());
        let ad = Rc::clone(&a.data);
        self.record1(out, a, move |dout| {
            ndarray::Zip::from(dout).and(&*ad).map_collect(|&d, &x| {
                if x > S::zero() {
                    d
                } else if x < S::zero() {
                    -d
                } else {
                    S::zero()
                }
            })
        })
    }

    /// Elementwise Huber with threshold `delta`: x²/(2δ) inside, |x|−δ/2 outside.
    pub fn huber(&self, a: &Tensor<S>, delta: f64) -> Tensor<S> {
        let d = S::from_f64(delta);
        let half = S::from_f64(0.5);
        let out = a.data.mapv(|x| {
            if x.abs() <= d {
                x * x * half / d
            } else {
                x.abs() - half * d
            }
        });
        let ad = Rc::clone(&a.data);
        self.record1(out, a, move |dout| {
            ndarray::Zip::from(dout).and(&*ad).map_collect(|&g, &x| {
                if x.abs() <= d {
                    g * x / d
                } else if x > S::zero() {
                    g
                } else {
                    -g
                }
            })
        })
    }

    pub fn relu(&self, a: &Tensor<S>) -> Tensor<S> {
        let out = a.data.mapv(|v| if v > S::zero() { v } else { S::zero() });
        let ad = Rc::clone(&a.data);
        self.record1(out, a, move |dout| {
            ndarray::Zip::from(dout)
                .and(&*ad)
                .map_collect(|&d, &x| if x > S::zero() { d } else { S::zero() })
        })
    }

    pub fn sigmoid(&self, a: &Tensor<S>) -> Tensor<S> {
        let out = a.data.mapv(|v| (S::one() + (-v).exp()).recip());
        let od = out.clone();
        self.record1(out, a, move |dout| {
            ndarray::Zip::from(dout)
                .and(&od)
                .map_collect(|&d, &y| d * y * (S::one() - y))
        })
    }

    pub fn silu(&self, a: &Tensor<S>) -> Tensor<S> {
        let out = a.data.mapv(|v| v / (S::one() + (-v).exp()));
        let ad = Rc::clone(&a.data);
        self.record1(out, a, move |dout| {
            ndarray::Zip::from(dout).and(&*ad).map_collect(|&d, &x| {
                let s = (S::one() + (-x).exp()).recip();
                d * (s + x * s * (S::one() - s))
            })
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: &Tensor<S>) -> Tensor<S> {
        let total: S = a.data.iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        let shape = a.shape().to_vec();
        self.record1(out, a, move |dout| {
            let g = *dout.iter().next().expect("scalar grad");
            ArrayD::from_elem(IxDyn(&shape), g)
        })
    }

    pub fn mean_all(&self, a: &Tensor<S>) -> Tensor<S> {
        let n = a.data.len() as f64;
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n)
    }

    /// Sum over one axis, keeping it as a length-1 dim.
    pub fn sum_axis_keep(&self, a: &Tensor<S>, axis: usize) -> Tensor<S> {
        let mut out = a.data.sum_axis(Axis(axis));
        out.insert_axis_inplace(Axis(axis));
        let shape = a.shape().to_vec();
        self.record1(out, a, move |dout| {
            dout.broadcast(IxDyn(&shape)).expect("broadcast grad").to_owned()
        })
    }

    pub fn mean_axis_keep(&self, a: &Tensor<S>, axis: usize) -> Tensor<S> {
        let n = a.shape()[axis] as f64;
        let s = self.sum_axis_keep(a, axis);
        self.scale(&s, 1.0 / n)
    }

    // ---- shape ----

    pub fn reshape(&self, a: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
        let out = a
            .data
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        let orig = a.shape().to_vec();
        self.record1(out, a, move |dout| {
            dout.to_shape(IxDyn(&orig)).expect("reshape grad").to_owned()
        })
    }

    pub fn permute(&self, a: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
        let out = a
            .data
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.record1(out, a, move |dout| {
            dout.view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned()
        })
    }

    pub fn concat(&self, parts: &[&Tensor<S>], axis: usize) -> Tensor<S> {
        let views: Vec<ArrayViewD<S>> = parts.iter().map(|t| t.data.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let node = if self.recording && parts.iter().any(|t| t.node.is_some()) {
            let id = self.fresh_id();
            let pieces: Vec<(Option<usize>, usize)> = parts
                .iter()
                .map(|t| (t.node, t.shape()[axis]))
                .collect();
            self.tape.borrow_mut().push(TapeEntry {
                out: id,
                back: Box::new(move |dout, store| {
                    let mut offset = 0isize;
                    for (pnode, len) in &pieces {
                        let len = *len as isize;
                        if let Some(p) = pnode {
                            let slice = dout
                                .slice_axis(Axis(axis), Slice::new(offset, Some(offset + len), 1))
                                .to_owned();
                            store.accumulate(*p, slice);
                        }
                        offset += len;
                    }
                }),
            });
            Some(id)
        } else {
            None
        };
        Tensor {
            data: Rc::new(out.as_standard_layout().to_owned()),
            node,
        }
    }

    pub fn narrow(&self, a: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
        let out = a
            .data
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .as_standard_layout()
            .to_owned();
        let shape = a.shape().to_vec();
        self.record1(out, a, move |dout| {
            let mut g = ArrayD::zeros(IxDyn(&shape));
            g.slice_axis_mut(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .assign(dout);
            g
        })
    }

    // ---- linear algebra ----

    /// 2-D matmul: (M,K) x (K,N) -> (M,N).
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        let out = matmul2(&a.data, &b.data);
        let (ad, bd) = (Rc::clone(&a.data), Rc::clone(&b.data));
        self.record2(out, a, b, move |dout| {
            let da = matmul2_nt(dout, &bd);
            let db = matmul2_tn(&ad, dout);
            (Some(da), Some(db))
        })
    }

    /// Batched matmul: (B,M,K) x (B,K,N) -> (B,M,N).
    pub fn bmm(&self, a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        let out = bmm_raw(&a.data, &b.data, false, false);
        let (ad, bd) = (Rc::clone(&a.data), Rc::clone(&b.data));
        self.record2(out, a, b, move |dout| {
            let da = bmm_raw(dout, &bd, false, true);
            let db = bmm_raw(&ad, dout, true, false);
            (Some(da), Some(db))
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: &Tensor<S>) -> Tensor<S> {
        let mut out = a.data.as_standard_layout().to_owned();
        let last = out.ndim() - 1;
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let od = out.clone();
        let _ = last;
        self.record1(out, a, move |dout| {
            let mut g = ndarray::Zip::from(dout).and(&od).map_collect(|&d, &y| d * y);
            // g -= y * sum_last(g)
            let last = g.ndim() - 1;
            let sums = g.sum_axis(Axis(last)).insert_axis(Axis(last));
            let sums_b = sums.broadcast(g.raw_dim()).expect("softmax grad bc").to_owned();
            ndarray::Zip::from(&mut g)
                .and(&od)
                .and(&sums_b)
                .for_each(|gv, &y, &s| *gv = *gv - y * s);
            g
        })
    }

    // ---- convolution ----

    /// 2-D convolution. Input (B,Cin,H,W), weight (Cout,Cin,kh,kw), bias (Cout).
    pub fn conv2d(
        &self,
        input: &Tensor<S>,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
        stride: usize,
        padding: usize,
    ) -> Tensor<S> {
        let (b, cin, h, w) = dims4(input.shape());
        let (cout, wcin, kh, kw) = dims4(weight.shape());
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            c: cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let w2 = weight
            .data
            .to_shape(IxDyn(&[cout, cin * kh * kw]))
            .unwrap()
            .to_owned();
        let mut out = ArrayD::zeros(IxDyn(&[b, cout, oh, ow]));
        let mut cols: Vec<ArrayD<S>> = Vec::with_capacity(b);
        for i in 0..b {
            let col = im2col(&input.data.index_axis(Axis(0), i).to_owned(), &geom);
            let prod = matmul2(&w2, &col);
            out.index_axis_mut(Axis(0), i).assign(
                &prod
                    .to_shape(IxDyn(&[cout, oh, ow]))
                    .unwrap()
                    .view(),
            );
            cols.push(col);
        }
        {
            let bias_v = bias.data.view();
            for i in 0..b {
                for c in 0..cout {
                    let bv = bias_v[[c]];
                    out.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), c)
                        .mapv_inplace(|v| v + bv);
                }
            }
        }
        let (pin, pw, pb) = (input.node, weight.node, bias.node);
        let node = if self.recording && (pin.is_some() || pw.is_some() || pb.is_some()) {
            let id = self.fresh_id();
            let in_data = Rc::clone(&input.data);
            self.tape.borrow_mut().push(TapeEntry {
                out: id,
                back: Box::new(move |dout, store| {
                    if let Some(p) = pb {
                        let mut db = ArrayD::zeros(IxDyn(&[cout]));
                        for i in 0..b {
                            for c in 0..cout {
                                db[[c]] += dout
                                    .index_axis(Axis(0), i)
                                    .index_axis(Axis(0), c)
                                    .iter()
                                    .copied()
                                    .sum();
                            }
                        }
                        store.accumulate(p, db);
                    }
                    let need_w = pw.is_some();
                    let need_x = pin.is_some();
                    if !(need_w || need_x) {
                        return;
                    }
                    let mut dw2 = ArrayD::zeros(IxDyn(&[cout, cin * kh * kw]));
                    let mut dx = ArrayD::zeros(IxDyn(&[b, cin, h, w]));
                    for i in 0..b {
                        let dout2 = dout
                            .index_axis(Axis(0), i)
                            .to_shape(IxDyn(&[cout, oh * ow]))
                            .unwrap()
                            .to_owned();
                        if need_w {
                            let col = im2col(&in_data.index_axis(Axis(0), i).to_owned(), &geom);
                            dw2 += &matmul2_nt(&dout2, &col);
                        }
                        if need_x {
                            let dcol = matmul2_tn(&w2, &dout2);
                            dx.index_axis_mut(Axis(0), i)
                                .assign(&col2im(&dcol, &geom));
                        }
                    }
                    if let Some(p) = pw {
                        store.accumulate(p, dw2.to_shape(IxDyn(&[cout, cin, kh, kw])).unwrap().to_owned());
                    }
                    if let Some(p) = pin {
                        store.accumulate(p, dx);
                    }
                }),
            });
            Some(id)
        } else {
            None
        };
        Tensor {
            data: Rc::new(out),
            node,
        }
    }

    /// Transposed 2-D convolution. Input (B,Cin,H,W), weight (Cin,Cout,kh,kw),
    /// bias (Cout). Output spatial size (H-1)*stride - 2*padding + k.
    pub fn conv_transpose2d(
        &self,
        input: &Tensor<S>,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
        stride: usize,
        padding: usize,
    ) -> Tensor<S> {
        let (b, cin, h, w) = dims4(input.shape());
        let (wcin, cout, kh, kw) = dims4(weight.shape());
        assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
        let oh = (h - 1) * stride + kh - 2 * padding;
        let ow = (w - 1) * stride + kw - 2 * padding;
        // col positions index the *input* grid; the image side is the output.
        let geom = ConvGeom {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            padding,
            oh: h,
            ow: w,
        };
        let w2 = weight
            .data
            .to_shape(IxDyn(&[cin, cout * kh * kw]))
            .unwrap()
            .to_owned();
        let mut out = ArrayD::zeros(IxDyn(&[b, cout, oh, ow]));
        for i in 0..b {
            let x2 = input
                .data
                .index_axis(Axis(0), i)
                .to_shape(IxDyn(&[cin, h * w]))
                .unwrap()
                .to_owned();
            let col = matmul2_tn(&w2, &x2);
            out.index_axis_mut(Axis(0), i).assign(&col2im(&col, &geom));
        }
        {
            let bias_v = bias.data.view();
            for i in 0..b {
                for c in 0..cout {
                    let bv = bias_v[[c]];
                    out.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), c)
                        .mapv_inplace(|v| v + bv);
                }
            }
        }
        let (pin, pw, pb) = (input.node, weight.node, bias.node);
        let node = if self.recording && (pin.is_some() || pw.is_some() || pb.is_some()) {
            let id = self.fresh_id();
            let in_data = Rc::clone(&input.data);
            self.tape.borrow_mut().push(TapeEntry {
                out: id,
                back: Box::new(move |dout, store| {
                    if let Some(p) = pb {
                        let mut db = ArrayD::zeros(IxDyn(&[cout]));
                        for i in 0..b {
                            for c in 0..cout {
                                db[[c]] += dout
                                    .index_axis(Axis(0), i)
                                    .index_axis(Axis(0), c)
                                    .iter()
                                    .copied()
                                    .sum();
                            }
                        }
                        store.accumulate(p, db);
                    }
                    let need_w = pw.is_some();
                    let need_x = pin.is_some();
                    if !(need_w || need_x) {
                        return;
                    }
                    let mut dw2 = ArrayD::zeros(IxDyn(&[cin, cout * kh * kw]));
                    let mut dx = ArrayD::zeros(IxDyn(&[b, cin, h, w]));
                    for i in 0..b {
                        let dcol = im2col(&dout.index_axis(Axis(0), i).to_owned(), &geom);
                        if need_w {
                            let x2 = in_data
                                .index_axis(Axis(0), i)
                                .to_shape(IxDyn(&[cin, h * w]))
                                .unwrap()
                                .to_owned();
                            dw2 += &matmul2_nt(&x2, &dcol);
                        }
                        if need_x {
                            let dx2 = matmul2_nt(&dcol, &w2);
                            dx.index_axis_mut(Axis(0), i).assign(
                                &dx2.t()
                                    .as_standard_layout()
                                    .to_shape(IxDyn(&[cin, h, w]))
                                    .unwrap()
                                    .view(),
                            );
                        }
                    }
                    if let Some(p) = pw {
                        store.accumulate(
                            p,
                            dw2.to_shape(IxDyn(&[cin, cout, kh, kw])).unwrap().to_owned(),
                        );
                    }
                    if let Some(p) = pin {
                        store.accumulate(p, dx);
                    }
                }),
            });
            Some(id)
        } else {
            None
        };
        Tensor {
            data: Rc::new(out),
            node,
        }
    }

    /// Nearest-neighbour 2x upsampling on (B,C,H,W).
    pub fn upsample_nearest2x(&self, a: &Tensor<S>) -> Tensor<S> {
        let (b, c, h, w) = dims4(a.shape());
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for ib in 0..b {
            for ic in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        out[[ib, ic, y, x]] = a.data[[ib, ic, y / 2, x / 2]];
                    }
                }
            }
        }
        self.record1(out, a, move |dout| {
            let mut g = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for ib in 0..b {
                for ic in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            g[[ib, ic, y / 2, x / 2]] += dout[[ib, ic, y, x]];
                        }
                    }
                }
            }
            g
        })
    }

    /// Row gather: out[i] = table[ids[i]]. ids are not differentiated.
    pub fn embedding(&self, table: &Tensor<S>, ids: &[usize]) -> Tensor<S> {
        let d = table.shape()[1];
        let mut out = ArrayD::zeros(IxDyn(&[ids.len(), d]));
        for (i, &id) in ids.iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&table.data.index_axis(Axis(0), id));
        }
        let ids_v = ids.to_vec();
        let tshape = table.shape().to_vec();
        self.record1(out, table, move |dout| {
            let mut g = ArrayD::zeros(IxDyn(&tshape));
            for (i, &id) in ids_v.iter().enumerate() {
                let mut row = g.index_axis_mut(Axis(0), id);
                row += &dout.index_axis(Axis(0), i);
            }
            g
        })
    }
}

// ---- raw helpers (no tape) ----

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-d tensor, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

/// Geometry shared by im2col and col2im. `(h,w)` is the image side,
/// `(oh,ow)` the column-position side.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

/// Unfold (C,H,W) into (C*kh*kw, oh*ow); out-of-bounds taps read zero.
fn im2col<S: Scalar>(img: &ArrayD<S>, g: &ConvGeom) -> ArrayD<S> {
    let mut col = ArrayD::zeros(IxDyn(&[g.c * g.kh * g.kw, g.oh * g.ow]));
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        col[[row, oy * g.ow + ox]] = img[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Fold (C*kh*kw, oh*ow) back onto a (C,H,W) image, accumulating overlaps.
fn col2im<S: Scalar>(col: &ArrayD<S>, g: &ConvGeom) -> ArrayD<S> {
    let mut img = ArrayD::zeros(IxDyn(&[g.c, g.h, g.w]));
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        img[[c, iy as usize, ix as usize]] += col[[row, oy * g.ow + ox]];
                    }
                }
            }
        }
    }
    img
}

/// Bilinear resize of (C,H,W) to (C,out_h,out_w) with half-pixel centres.
/// Plain array math; used on detached feature maps.
pub fn bilinear_resize<S: Scalar>(img: &ArrayD<S>, out_h: usize, out_w: usize) -> ArrayD<S> {
    let c = img.shape()[0];
    let h = img.shape()[1];
    let w = img.shape()[2];
    let mut out = ArrayD::zeros(IxDyn(&[c, out_h, out_w]));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0).min(h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = S::from_f64(fy - y0 as f64);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0).min(w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = S::from_f64(fx - x0 as f64);
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (S::one() - wx) + img[[ch, y0, x1]] * wx;
                let bot = img[[ch, y1, x0]] * (S::one() - wx) + img[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (S::one() - wy) + bot * wy;
            }
        }
    }
    out
}

pub fn broadcast_bin<S: Scalar>(
    a: &ArrayD<S>,
    b: &ArrayD<S>,
    f: impl Fn(S, S) -> S,
) -> ArrayD<S> {
    if a.shape() == b.shape() {
        return ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y));
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs not broadcastable");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs not broadcastable");
    ndarray::Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let x = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let y = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            x == y || x == 1 || y == 1,
            "shapes {:?} and {:?} not broadcastable",
            a,
            b
        );
        out[i] = x.max(y);
    }
    out
}

/// Sum `dout` down to `shape` (inverse of broadcasting).
pub fn reduce_to_shape<S: Scalar>(dout: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let mut g = dout.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if gd != sd {
            debug_assert_eq!(sd, 1);
            let mut summed = g.sum_axis(Axis(ax));
            summed.insert_axis_inplace(Axis(ax));
            g = summed;
        }
    }
    g
}

fn matmul2<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> ArrayD<S> {
    let a2 = a.view().into_dimensionality::<ndarray::Ix2>().expect("lhs not 2-d");
    let b2 = b.view().into_dimensionality::<ndarray::Ix2>().expect("rhs not 2-d");
    a2.dot(&b2).into_dyn()
}

fn matmul2_nt<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> ArrayD<S> {
    let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    a2.dot(&b2.t()).into_dyn()
}

fn matmul2_tn<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> ArrayD<S> {
    let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    a2.t().dot(&b2).into_dyn()
}

/// Batched matmul with optional transposes of the trailing two axes.
pub fn bmm_raw<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>, ta: bool, tb: bool) -> ArrayD<S> {
    assert_eq!(a.ndim(), 3, "bmm lhs must be 3-d");
    assert_eq!(b.ndim(), 3, "bmm rhs must be 3-d");
    let batch = a.shape()[0];
    assert_eq!(batch, b.shape()[0], "bmm batch mismatch");
    let (m, k) = if ta {
        (a.shape()[2], a.shape()[1])
    } else {
        (a.shape()[1], a.shape()[2])
    };
    let (kb, n) = if tb {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    assert_eq!(k, kb, "bmm inner dim mismatch");
    let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
    for i in 0..batch {
        let av = a
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bv = b
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let prod = match (ta, tb) {
            (false, false) => av.dot(&bv),
            (true, false) => av.t().dot(&bv),
            (false, true) => av.dot(&bv.t()),
            (true, true) => av.t().dot(&bv.t()),
        };
        out.index_axis_mut(Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .assign(&prod);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn to_dyn2(a: ndarray::Array2<f64>) -> ArrayD<f64> {
        a.into_dyn()
    }

    #[test]
    fn add_broadcast_backward_reduces() {
        let g = Graph::<f64>::new();
        let a = g.leaf(to_dyn2(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let b = g.leaf(arr1(&[10.0, 20.0]).into_dyn());
        let y = g.add(&a, &b);
        let loss = g.sum_all(&y);
        let grads = g.backward(&loss);
        assert_eq!(grads.get(&b).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
        assert_eq!(
            grads.get(&a).unwrap().as_slice().unwrap(),
            &[1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn matmul_gradients_match_formula() {
        let g = Graph::<f64>::new();
        let a = g.leaf(to_dyn2(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let b = g.leaf(to_dyn2(arr2(&[[5.0, 6.0], [7.0, 8.0]])));
        let y = g.matmul(&a, &b);
        let loss = g.sum_all(&y);
        let grads = g.backward(&loss);
        // dA = 1 @ B^T
        assert_eq!(
            grads.get(&a).unwrap().as_slice().unwrap(),
            &[11.0, 15.0, 11.0, 15.0]
        );
        assert_eq!(
            grads.get(&b).unwrap().as_slice().unwrap(),
            &[4.0, 4.0, 6.0, 6.0]
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::<f64>::inference();
        let a = g.constant(to_dyn2(arr2(&[[0.0, 1.0, 2.0], [5.0, 5.0, 5.0]])));
        let y = g.softmax_last(&a);
        for row in y.array().rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::<f64>::inference();
        let a = g.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = g.scale(&a, 3.0);
        assert!(y.node.is_none());
        assert_eq!(g.tape.borrow().len(), 0);
    }
}

#[cfg(test)]
mod gemm_bench {
    use ndarray::Array2;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn throughput() {
        for (m, k, n, reps) in [
            (520usize, 128usize, 128usize, 40usize),
            (520, 32, 520, 40),
            (1024, 288, 32, 40),
            (256, 576, 64, 80),
            (64, 1152, 128, 200),
            (512, 224, 128, 80),
        ] {
            let a = Array2::<f32>::from_elem((m, k), 1.001);
            let b = Array2::<f32>::from_elem((k, n), 0.999);
            let t = Instant::now();
            let mut acc = 0.0f32;
            for _ in 0..reps {
                let c = a.dot(&b);
                acc += c[[0, 0]];
            }
            let secs = t.elapsed().as_secs_f64();
            let gflop = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / 1e9;
            println!("{}x{}x{}: {:.2} GFLOP/s ({acc})", m, k, n, gflop / secs);
        }
    }
}
