use super::ops::{self, GroupNormCache};
use super::{ParamSet, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        groups: usize,
        cache: GroupNormCache<T>,
        beta: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatChannels(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Resize(Var),
    GatherPixels {
        x: Var,
        positions: Vec<(usize, usize)>,
    },
    GatherFlat {
        x: Var,
        indices: Vec<usize>,
    },
    CombineRows {
        x: Var,
        rows: Vec<Vec<(usize, T)>>,
    },
    DynConv {
        kernels: Var,
        features: Var,
    },
    Sum(Var),
    NormalizeSum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<String>,
    needs_grad: bool,
}

/// Records forward operations so that [`Tape::backward`] can propagate
/// gradients to the parameters they were built from.
///
/// A tape is used for one forward pass; build a fresh one per sample.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter; its gradient is delivered by [`Tape::backward`].
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let value = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(name.to_string()),
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (v, cache) = ops::group_norm(
            self.value(x),
            groups,
            self.value(gamma),
            self.value(beta),
            T::of(ops::GN_EPS),
        )?;
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "elementwise shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut v = self.value(a).clone();
        for (o, &r) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += r;
        }
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut v = self.value(a).clone();
        for (o, &r) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= r;
        }
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Channels `start..end` of a `[C, H, W]` value.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if start >= end || end > c {
            return Err(shape_err!("channel slice {start}..{end} of {c}"));
        }
        let data = self.value(x).data()[start * h * w..end * h * w].to_vec();
        let v = Tensor::new(&[end - start, h, w], data)?;
        Ok(self.push(v, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(v, Op::Resize(x), &[x]))
    }

    /// Columns of a `[C, H, W]` map at `(x, y)` positions, as `[n, C]`.
    pub fn gather_pixels(&mut self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let src = self.value(x);
        let (c, h, w) = src.chw()?;
        if positions.is_empty() {
            return Err(shape_err!("gather_pixels needs at least one position"));
        }
        let mut data = Vec::with_capacity(positions.len() * c);
        for &(px, py) in positions {
            if px >= w || py >= h {
                return Err(shape_err!("position ({px},{py}) outside {h}x{w}"));
            }
            data.extend((0..c).map(|ci| src.at3(ci, py, px)));
        }
        let v = Tensor::new(&[positions.len(), c], data)?;
        Ok(self.push(
            v,
            Op::GatherPixels {
                x,
                positions: positions.to_vec(),
            },
            &[x],
        ))
    }

    /// Elements at flat indices, as `[n]`.
    pub fn gather_flat(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= src.len()) {
            return Err(shape_err!("gather_flat indices out of range"));
        }
        let v = Tensor::new(&[indices.len()], indices.iter().map(|&i| src.data()[i]).collect())?;
        Ok(self.push(
            v,
            Op::GatherFlat {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Linear combinations of the rows of an `[n, C]` value: output row `j`
    /// is `sum(coef * x[i])` over `rows[j]`.
    pub fn combine_rows(&mut self, x: Var, rows: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let src = self.value(x);
        let [n, c] = src.shape()[..] else {
            return Err(shape_err!("combine_rows expects [n, C]"));
        };
        let mut data = vec![T::zero(); rows.len() * c];
        for (j, row) in rows.iter().enumerate() {
            for &(i, coef) in row {
                if i >= n {
                    return Err(shape_err!("combine_rows index {i} >= {n}"));
                }
                for ci in 0..c {
                    data[j * c + ci] += coef * src.data()[i * c + ci];
                }
            }
        }
        let v = Tensor::new(&[rows.len(), c], data)?;
        Ok(self.push(v, Op::CombineRows { x, rows }, &[x]))
    }

    pub fn dynamic_conv1x1(&mut self, kernels: Var, features: Var) -> Result<Var> {
        let v = ops::dynamic_conv1x1(self.value(kernels), self.value(features))?;
        Ok(self.push(v, Op::DynConv { kernels, features }, &[kernels, features]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// `s / sum(s)`; an all-zero input maps to uniform weights.
    pub fn normalize_sum(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let total = src.sum();
        let v = if total == T::zero() {
            let u = T::one() / T::of(src.len() as f64);
            src.map(|_| u)
        } else {
            src.map(|s| s / total)
        };
        self.push(v, Op::NormalizeSum(x), &[x])
    }

    /// Records a fused operation. `backward` maps the output gradient to one
    /// gradient per input, in order.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            inputs,
        )
    }

    /// Propagates `d loss / d node` from a scalar `loss` and adds the
    /// parameter gradients into `params`. Gradients accumulate across calls
    /// until [`ParamSet::zero_grad`].
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, d: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => {
                        for (a, b) in e.data_mut().iter_mut().zip(d.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        params.accumulate_grad(name, &g)?;
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        self.needs(*x),
                    )?;
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    cache,
                } => {
                    let (dx, dg, db) =
                        ops::group_norm_backward(&g, cache, self.value(*gamma), *groups)?;
                    acc(*x, dx, &mut grads);
                    acc(*gamma, dg, &mut grads);
                    acc(*beta, db, &mut grads);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (o, &xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    for (o, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= y * (T::one() - y);
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (o, &bv) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= bv;
                    }
                    let mut db = g;
                    for (o, &av) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= av;
                    }
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|v| v * c), &mut grads);
                }
                Op::ConcatChannels(a, b) => {
                    let na = self.value(*a).len();
                    let (ga, gb) = g.data().split_at(na);
                    acc(
                        *a,
                        Tensor::new(self.value(*a).shape(), ga.to_vec())?,
                        &mut grads,
                    );
                    acc(
                        *b,
                        Tensor::new(self.value(*b).shape(), gb.to_vec())?,
                        &mut grads,
                    );
                }
                Op::SliceChannels { x, start } => {
                    let src = self.value(*x);
                    let (_, h, w) = src.chw()?;
                    let mut d = Tensor::zeros(src.shape());
                    let off = start * h * w;
                    d.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                    acc(*x, d, &mut grads);
                }
                Op::Resize(x) => {
                    let (_, h, w) = self.value(*x).chw()?;
                    acc(*x, ops::bilinear_resize_backward(&g, h, w)?, &mut grads);
                }
                Op::GatherPixels { x, positions } => {
                    let src = self.value(*x);
                    let (c, h, w) = src.chw()?;
                    let mut d = Tensor::zeros(src.shape());
                    for (r, &(px, py)) in positions.iter().enumerate() {
                        for ci in 0..c {
                            d.data_mut()[(ci * h + py) * w + px] += g.data()[r * c + ci];
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::GatherFlat { x, indices } => {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    for (r, &i) in indices.iter().enumerate() {
                        d.data_mut()[i] += g.data()[r];
                    }
                    acc(*x, d, &mut grads);
                }
                Op::CombineRows { x, rows } => {
                    let src = self.value(*x);
                    let c = src.shape()[1];
                    let mut d = Tensor::zeros(src.shape());
                    for (j, row) in rows.iter().enumerate() {
                        for &(i, coef) in row {
                            for ci in 0..c {
                                d.data_mut()[i * c + ci] += coef * g.data()[j * c + ci];
                            }
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::DynConv { kernels, features } => {
                    let kv = self.value(*kernels);
                    let fv = self.value(*features);
                    let (n, c) = (kv.shape()[0], kv.shape()[1]);
                    let p = fv.len() / c;
                    if self.needs(*kernels) {
                        // dK[n, c] = dOut[n, p] . F[c, p]^T
                        let mut dk = vec![T::zero(); n * c];
                        T::gemm(
                            n,
                            p,
                            c,
                            T::one(),
                            g.data(),
                            p as isize,
                            1,
                            fv.data(),
                            1,
                            p as isize,
                            T::zero(),
                            &mut dk,
                            c as isize,
                            1,
                        );
                        acc(*kernels, Tensor::new(kv.shape(), dk)?, &mut grads);
                    }
                    if self.needs(*features) {
                        // dF[c, p] = K[n, c]^T . dOut[n, p]
                        let mut df = vec![T::zero(); c * p];
                        T::gemm(
                            c,
                            n,
                            p,
                            T::one(),
                            kv.data(),
                            1,
                            c as isize,
                            g.data(),
                            p as isize,
                            1,
                            T::zero(),
                            &mut df,
                            p as isize,
                            1,
                        );
                        acc(*features, Tensor::new(fv.shape(), df)?, &mut grads);
                    }
                }
                Op::Sum(x) => {
                    let g0 = g.data()[0];
                    acc(*x, Tensor::full(self.value(*x).shape(), g0), &mut grads);
                }
                Op::NormalizeSum(x) => {
                    let src = self.value(*x);
                    let total = src.sum();
                    if total == T::zero() {
                        continue;
                    }
                    let dot: T = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    let d = g.map(|gv| (gv - dot) / total);
                    acc(*x, d, &mut grads);
                }
                Op::Custom { inputs, backward } => {
                    let ds = backward(&g);
                    debug_assert_eq!(ds.len(), inputs.len());
                    for (v, d) in inputs.iter().zip(ds) {
                        acc(*v, d, &mut grads);
                    }
                }
            }
        }
        Ok(())
    }
}
