use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::layer::{LayerSpec, Shape};
use crate::ops::{gather, scatter, PatchGeom};
use crate::scalar::gemm;
use crate::{ParamSet, Params, Scalar, Tensor, TensorError};

/// A feed-forward stack of layers with fixed per-sample input shape.
///
/// Parameters live outside the network in a [`Params`] container under the
/// names `{prefix}{layer}.weight` / `{prefix}{layer}.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    prefix: String,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
}

enum Saved<T> {
    Nothing,
    Input(Tensor<T>),
    Cols(Vec<T>),
    Output(Vec<T>),
    Mask(Vec<bool>),
    Argmax(Vec<usize>),
}

/// Intermediates recorded by [`Network::forward`] for one backward pass.
pub struct Cache<T> {
    generation: u64,
    batch: usize,
    saved: Vec<Saved<T>>,
}

impl<T> std::fmt::Debug for Cache<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache")
            .field("generation", &self.generation)
            .field("batch", &self.batch)
            .field("layers", &self.saved.len())
            .finish()
    }
}

impl<T> Cache<T> {
    /// Hash of every piecewise-linear branch taken (ReLU signs, pooling
    /// winners). Two evaluations with equal signatures lie on the same smooth
    /// piece of the network function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.saved {
            match s {
                Saved::Mask(m) => m.hash(&mut h),
                Saved::Argmax(a) => a.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Network {
    pub fn new(input: &[usize], layers: Vec<LayerSpec>) -> Result<Self, TensorError> {
        Self::with_prefix("", input, layers)
    }

    pub fn with_prefix(
        prefix: impl Into<String>,
        input: &[usize],
        layers: Vec<LayerSpec>,
    ) -> Result<Self, TensorError> {
        let mut shape = Shape::from_dims(input)
            .ok_or_else(|| TensorError::InvalidSpec(format!("unsupported input shape {input:?}")))?;
        let mut shapes = vec![shape];
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(shape).ok_or_else(|| TensorError::ShapeMismatch {
                layer: i,
                kind: layer.kind().to_string(),
                expected: vec![],
                got: shape.dims(),
            })?;
            shapes.push(shape);
        }
        Ok(Self {
            prefix: prefix.into(),
            layers,
            shapes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("shapes never empty")
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn weight_name(&self, i: usize) -> String {
        format!("{}{i}.weight", self.prefix)
    }

    fn bias_name(&self, i: usize) -> String {
        format!("{}{i}.bias", self.prefix)
    }

    /// Fan-in scaled uniform initialization, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((ws, bs)) = layer.param_shapes(self.shapes[i]) {
                let bound = 1.0 / (layer.fan_in(self.shapes[i]) as f32).sqrt();
                let nw: usize = ws.iter().product();
                let nb: usize = bs.iter().product();
                let w = (0..nw).map(|_| rng.random_range(-bound..bound)).collect();
                let b = (0..nb).map(|_| rng.random_range(-bound..bound)).collect();
                p.insert(self.weight_name(i), Tensor::new(ws, w).expect("sized"))
                    .expect("unique layer names");
                p.insert(self.bias_name(i), Tensor::new(bs, b).expect("sized"))
                    .expect("unique layer names");
            }
        }
        p
    }

    /// Verifies that `params` holds every tensor this network needs with the
    /// right shapes.
    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<(), TensorError> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((ws, bs)) = layer.param_shapes(self.shapes[i]) {
                for (name, shape) in [(self.weight_name(i), ws), (self.bias_name(i), bs)] {
                    let t = params.require(&name)?;
                    if t.shape() != shape.as_slice() {
                        return Err(TensorError::ParamShape {
                            name,
                            expected: shape,
                            got: t.shape().to_vec(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Runs the stack and records what [`backward`](Self::backward) needs.
    pub fn forward<T: Scalar>(
        &self,
        params: &Params<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, Cache<T>), TensorError> {
        let (out, saved) = self.run(params, input, true)?;
        Ok((
            out,
            Cache {
                generation: params.generation(),
                batch: input.batch(),
                saved,
            },
        ))
    }

    /// Forward pass without keeping intermediates.
    pub fn infer<T: Scalar>(&self, params: &Params<T>, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(self.run(params, input, false)?.0)
    }

    fn run<T: Scalar>(
        &self,
        params: &Params<T>,
        input: &Tensor<T>,
        keep: bool,
    ) -> Result<(Tensor<T>, Vec<Saved<T>>), TensorError> {
        let expected = self.shapes[0].dims();
        if input.shape().len() != expected.len() + 1 || input.shape()[1..] != expected[..] {
            return Err(TensorError::ShapeMismatch {
                layer: 0,
                kind: self
                    .layers
                    .first()
                    .map(|l| l.kind().to_string())
                    .unwrap_or_else(|| "input".into()),
                expected,
                got: input.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        let batch = input.batch();
        let mut x = input.clone();
        let mut saved = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = self.shapes[i];
            let out_shape = self.shapes[i + 1];
            let mut out_dims = vec![batch];
            out_dims.extend(out_shape.dims());
            let (y, s) = match *layer {
                LayerSpec::Dense { units } => {
                    let w = self.param(params, &self.weight_name(i))?;
                    let b = self.param(params, &self.bias_name(i))?;
                    let n_in = in_shape.size();
                    let mut y = Tensor::zeros(out_dims);
                    for r in 0..batch {
                        y.row_mut(r).copy_from_slice(b.data());
                    }
                    gemm(false, false, batch, units, n_in, T::one(), x.data(), w.data(), T::one(), y.data_mut());
                    (y, if keep { Saved::Input(x) } else { Saved::Nothing })
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (Shape::Image(h, w_, c), Shape::Image(oh, ow, _)) = (in_shape, out_shape) else {
                        unreachable!("validated at construction")
                    };
                    let geom = PatchGeom {
                        batch,
                        src_h: h,
                        src_w: w_,
                        channels: c,
                        grid_h: oh,
                        grid_w: ow,
                        kernel,
                        stride,
                        pad: padding,
                    };
                    let wt = self.param(params, &self.weight_name(i))?;
                    let b = self.param(params, &self.bias_name(i))?;
                    let cols = gather(x.data(), &geom);
                    let rows = geom.rows();
                    let mut y = Tensor::zeros(out_dims);
                    for r in 0..rows {
                        y.data_mut()[r * filters..(r + 1) * filters].copy_from_slice(b.data());
                    }
                    gemm(false, false, rows, filters, geom.row_len(), T::one(), &cols, wt.data(), T::one(), y.data_mut());
                    (y, if keep { Saved::Cols(cols) } else { Saved::Nothing })
                }
                LayerSpec::ConvTranspose2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (Shape::Image(h, w_, c), Shape::Image(oh, ow, _)) = (in_shape, out_shape) else {
                        unreachable!("validated at construction")
                    };
                    let geom = PatchGeom {
                        batch,
                        src_h: oh,
                        src_w: ow,
                        channels: filters,
                        grid_h: h,
                        grid_w: w_,
                        kernel,
                        stride,
                        pad: padding,
                    };
                    let wt = self.param(params, &self.weight_name(i))?;
                    let b = self.param(params, &self.bias_name(i))?;
                    let rows = batch * h * w_;
                    let mut cols = vec![T::zero(); rows * geom.row_len()];
                    gemm(false, false, rows, geom.row_len(), c, T::one(), x.data(), wt.data(), T::zero(), &mut cols);
                    let mut y = Tensor::zeros(out_dims);
                    for px in y.data_mut().chunks_exact_mut(filters) {
                        px.copy_from_slice(b.data());
                    }
                    scatter(&cols, &geom, y.data_mut());
                    (y, if keep { Saved::Input(x) } else { Saved::Nothing })
                }
                LayerSpec::Relu => {
                    let mask: Vec<bool> = x.data().iter().map(|v| *v > T::zero()).collect();
                    for v in x.data_mut() {
                        if !(*v > T::zero()) {
                            *v = T::zero();
                        }
                    }
                    (x, if keep { Saved::Mask(mask) } else { Saved::Nothing })
                }
                LayerSpec::Tanh => {
                    for v in x.data_mut() {
                        *v = v.tanh();
                    }
                    let s = if keep { Saved::Output(x.data().to_vec()) } else { Saved::Nothing };
                    (x, s)
                }
                LayerSpec::Sigmoid => {
                    for v in x.data_mut() {
                        *v = sigmoid(*v);
                    }
                    let s = if keep { Saved::Output(x.data().to_vec()) } else { Saved::Nothing };
                    (x, s)
                }
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                    (x.reshape(out_dims)?, Saved::Nothing)
                }
                LayerSpec::MaxPool { size } => {
                    let (Shape::Image(h, w_, c), Shape::Image(oh, ow, _)) = (in_shape, out_shape) else {
                        unreachable!("validated at construction")
                    };
                    let mut y = Tensor::zeros(out_dims);
                    let mut arg = vec![0usize; y.len()];
                    let src = x.data();
                    for b in 0..batch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                for ch in 0..c {
                                    let mut best = usize::MAX;
                                    for dy in 0..size {
                                        for dx in 0..size {
                                            let idx = ((b * h + oy * size + dy) * w_ + ox * size + dx) * c + ch;
                                            if best == usize::MAX || src[idx] > src[best] {
                                                best = idx;
                                            }
                                        }
                                    }
                                    let o = ((b * oh + oy) * ow + ox) * c + ch;
                                    y.data_mut()[o] = src[best];
                                    arg[o] = best;
                                }
                            }
                        }
                    }
                    (y, if keep { Saved::Argmax(arg) } else { Saved::Nothing })
                }
            };
            if keep {
                saved.push(s);
            }
            x = y;
        }
        Ok((x, saved))
    }

    /// Reverse-mode pass. Returns gradients for this network's parameters (in
    /// the same order they appear in `params`) and the gradient with respect to
    /// the input.
    pub fn backward<T: Scalar>(
        &self,
        params: &Params<T>,
        cache: &Cache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Params<T>, Tensor<T>), TensorError> {
        if cache.generation != params.generation() {
            return Err(TensorError::StaleCache {
                cached: cache.generation,
                current: params.generation(),
            });
        }
        if cache.saved.len() != self.layers.len() {
            return Err(TensorError::InvalidSpec("cache belongs to a different network".into()));
        }
        let batch = cache.batch;
        let mut out_dims = vec![batch];
        out_dims.extend(self.output_shape().dims());
        if grad_out.shape() != out_dims.as_slice() {
            return Err(TensorError::ShapeMismatch {
                layer: self.layers.len().saturating_sub(1),
                kind: "output gradient".into(),
                expected: out_dims,
                got: grad_out.shape().to_vec(),
            });
        }
        let mut grads: Vec<(String, Tensor<T>)> = Vec::new();
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let in_shape = self.shapes[i];
            let mut in_dims = vec![batch];
            in_dims.extend(in_shape.dims());
            g = match (*layer, &cache.saved[i]) {
                (LayerSpec::Dense { units }, Saved::Input(x)) => {
                    let w = self.param(params, &self.weight_name(i))?;
                    let n_in = in_shape.size();
                    let mut dw = Tensor::zeros(w.shape().to_vec());
                    gemm(true, false, n_in, units, batch, T::one(), x.data(), g.data(), T::zero(), dw.data_mut());
                    let db = column_sums(g.data(), units);
                    let mut dx = Tensor::zeros(in_dims);
                    gemm(false, true, batch, n_in, units, T::one(), g.data(), w.data(), T::zero(), dx.data_mut());
                    grads.push((self.bias_name(i), Tensor::new(vec![units], db)?));
                    grads.push((self.weight_name(i), dw));
                    dx
                }
                (
                    LayerSpec::Conv2d {
                        filters,
                        kernel,
                        stride,
                        padding,
                    },
                    Saved::Cols(cols),
                ) => {
                    let (Shape::Image(h, w_, c), Shape::Image(oh, ow, _)) = (in_shape, self.shapes[i + 1]) else {
                        unreachable!()
                    };
                    let geom = PatchGeom {
                        batch,
                        src_h: h,
                        src_w: w_,
                        channels: c,
                        grid_h: oh,
                        grid_w: ow,
                        kernel,
                        stride,
                        pad: padding,
                    };
                    let wt = self.param(params, &self.weight_name(i))?;
                    let rows = geom.rows();
                    let kkc = geom.row_len();
                    let mut dw = Tensor::zeros(wt.shape().to_vec());
                    gemm(true, false, kkc, filters, rows, T::one(), cols, g.data(), T::zero(), dw.data_mut());
                    let db = column_sums(g.data(), filters);
                    let mut dcols = vec![T::zero(); rows * kkc];
                    gemm(false, true, rows, kkc, filters, T::one(), g.data(), wt.data(), T::zero(), &mut dcols);
                    let mut dx = Tensor::zeros(in_dims);
                    scatter(&dcols, &geom, dx.data_mut());
                    grads.push((self.bias_name(i), Tensor::new(vec![filters], db)?));
                    grads.push((self.weight_name(i), dw));
                    dx
                }
                (
                    LayerSpec::ConvTranspose2d {
                        filters,
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    Saved::Input(x),
                ) => {
                    let (Shape::Image(h, w_, c), Shape::Image(oh, ow, _)) = (in_shape, self.shapes[i + 1]) else {
                        unreachable!()
                    };
                    let geom = PatchGeom {
                        batch,
                        src_h: oh,
                        src_w: ow,
                        channels: filters,
                        grid_h: h,
                        grid_w: w_,
                        kernel,
                        stride,
                        pad: padding,
                    };
                    let wt = self.param(params, &self.weight_name(i))?;
                    let rows = batch * h * w_;
                    let kkf = geom.row_len();
                    let dcols = gather(g.data(), &geom);
                    let mut dw = Tensor::zeros(wt.shape().to_vec());
                    gemm(true, false, c, kkf, rows, T::one(), x.data(), &dcols, T::zero(), dw.data_mut());
                    let db = column_sums(g.data(), filters);
                    let mut dx = Tensor::zeros(in_dims);
                    gemm(false, true, rows, c, kkf, T::one(), &dcols, wt.data(), T::zero(), dx.data_mut());
                    grads.push((self.bias_name(i), Tensor::new(vec![filters], db)?));
                    grads.push((self.weight_name(i), dw));
                    dx
                }
                (LayerSpec::Relu, Saved::Mask(mask)) => {
                    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                        if !m {
                            *v = T::zero();
                        }
                    }
                    g
                }
                (LayerSpec::Tanh, Saved::Output(y)) => {
                    for (v, &yv) in g.data_mut().iter_mut().zip(y) {
                        *v *= T::one() - yv * yv;
                    }
                    g
                }
                (LayerSpec::Sigmoid, Saved::Output(y)) => {
                    for (v, &yv) in g.data_mut().iter_mut().zip(y) {
                        *v *= yv * (T::one() - yv);
                    }
                    g
                }
                (LayerSpec::Flatten | LayerSpec::Reshape { .. }, _) => g.reshape(in_dims)?,
                (LayerSpec::MaxPool { .. }, Saved::Argmax(arg)) => {
                    let mut dx = Tensor::zeros(in_dims);
                    for (o, &src) in arg.iter().enumerate() {
                        dx.data_mut()[src] += g.data()[o];
                    }
                    dx
                }
                _ => {
                    return Err(TensorError::InvalidSpec(format!(
                        "cache entry for layer {i} does not match {}",
                        layer.kind()
                    )))
                }
            };
        }
        // grads were pushed in reverse; restore parameter order
        let mut out = Params::new();
        for (name, t) in grads.into_iter().rev() {
            out.insert(name, t)?;
        }
        Ok((out, g))
    }

    fn param<'a, T: Scalar>(&self, params: &'a Params<T>, name: &str) -> Result<&'a Tensor<T>, TensorError> {
        params.require(name)
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn column_sums<T: Scalar>(data: &[T], width: usize) -> Vec<T> {
    let mut s = vec![T::zero(); width];
    for row in data.chunks_exact(width) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += *b;
        }
    }
    s
}
