//! Reverse-mode differentiation over a linear record of layer operations.

use std::collections::BTreeMap;

use super::conv::{self, ConvGeom};
use super::ops;
use super::tensor::{Dims, Tensor};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(String),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    UpConv { x: Var, w: Var, b: Option<Var>, kernel: [usize; 3] },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    PRelu { x: Var, slope: Var },
    Relu { x: Var },
    Softmax { x: Var },
    Concat { xs: Vec<Var> },
    AvgPool { x: Var, factor: [usize; 3] },
    MaxPool { x: Var, argmax: Vec<u32> },
    Resize { x: Var },
    ChannelScale { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Records a named trainable parameter; its gradient is reported under
    /// the same name by [`Gradients::params`].
    pub fn param(&mut self, name: &str, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(name.to_string()))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let y = conv::conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        self.push(y, Op::Conv { x, w, b, geom })
    }

    pub fn upconv(&mut self, x: Var, w: Var, b: Option<Var>, kernel: [usize; 3]) -> Var {
        let y = conv::upconv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), kernel);
        self.push(y, Op::UpConv { x, w, b, kernel })
    }

    /// Batch normalisation. With `frozen = Some((mean, var))` the given
    /// statistics are used; otherwise batch statistics are computed and
    /// returned so the caller can update running averages.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, frozen: Option<(&[T], &[T])>) -> (Var, Option<ops::BatchStats<T>>) {
        let (mean, var, stats) = match frozen {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let s = ops::batch_stats(self.value(x));
                (s.mean.clone(), s.var.clone(), Some(s))
            }
        };
        let inv_std = ops::inv_std(&var);
        let y = ops::batchnorm_apply(self.value(x), &mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        let batch_stats = stats.is_some();
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats });
        (v, stats)
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let y = ops::prelu_forward(self.value(x), self.value(slope).data());
        self.push(y, Op::PRelu { x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax_forward(self.value(x));
        self.push(y, Op::Softmax { x })
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let y = ops::concat_channels(&xs.iter().map(|&v| self.value(v)).collect::<Vec<_>>());
        self.push(y, Op::Concat { xs: xs.to_vec() })
    }

    pub fn avgpool(&mut self, x: Var, factor: [usize; 3]) -> Var {
        let y = ops::avgpool_forward(self.value(x), factor);
        self.push(y, Op::AvgPool { x, factor })
    }

    pub fn maxpool(&mut self, x: Var, factor: [usize; 3]) -> Var {
        let (y, argmax) = ops::maxpool_forward(self.value(x), factor);
        self.push(y, Op::MaxPool { x, argmax })
    }

    pub fn resize(&mut self, x: Var, out: [usize; 3]) -> Var {
        let y = ops::resize_forward(self.value(x), out);
        self.push(y, Op::Resize { x })
    }

    pub fn channel_scale(&mut self, x: Var, mask: Vec<T>) -> Var {
        let y = ops::channel_scale(self.value(x), &mask);
        self.push(y, Op::ChannelScale { x, mask })
    }

    /// Back-propagates the given output cotangents through the whole tape.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.dims(), self.dims(*v), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
        }
        let mut params = BTreeMap::new();
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(dy);
                }
                Op::Param(name) => {
                    params
                        .entry(name.clone())
                        .and_modify(|g: &mut Tensor<T>| g.add_assign(&dy))
                        .or_insert(dy);
                }
                Op::Conv { x, w, b, geom } => {
                    let g = conv::conv_backward(self.value(*x), self.value(*w), b.is_some(), geom, &dy);
                    accumulate(&mut grads, *x, g.dx);
                    accumulate(&mut grads, *w, g.dw);
                    if let (Some(b), Some(db)) = (b, g.db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::UpConv { x, w, b, kernel } => {
                    let g = conv::upconv_backward(self.value(*x), self.value(*w), b.is_some(), *kernel, &dy);
                    accumulate(&mut grads, *x, g.dx);
                    accumulate(&mut grads, *w, g.dw);
                    if let (Some(b), Some(db)) = (b, g.db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                    let (dx, dg, db) = ops::batchnorm_backward(self.value(*x), mean, inv_std, self.value(*gamma).data(), &dy, *batch_stats);
                    accumulate(&mut grads, *x, dx);
                    let pd = self.dims(*gamma);
                    accumulate(&mut grads, *gamma, Tensor::from_vec(pd, dg));
                    accumulate(&mut grads, *beta, Tensor::from_vec(pd, db));
                }
                Op::PRelu { x, slope } => {
                    let (dx, da) = ops::prelu_backward(self.value(*x), self.value(*slope).data(), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *slope, Tensor::from_vec(self.dims(*slope), da));
                }
                Op::Relu { x } => {
                    accumulate(&mut grads, *x, ops::relu_backward(self.value(*x), &dy));
                }
                Op::Softmax { x } => {
                    accumulate(&mut grads, *x, ops::softmax_backward(&node.value, &dy));
                }
                Op::Concat { xs } => {
                    let parts: Vec<usize> = xs.iter().map(|v| self.dims(*v).c).collect();
                    for (v, g) in xs.iter().zip(ops::split_channels(&dy, &parts)) {
                        accumulate(&mut grads, *v, g);
                    }
                }
                Op::AvgPool { x, factor } => {
                    accumulate(&mut grads, *x, ops::avgpool_backward(self.dims(*x), *factor, &dy));
                }
                Op::MaxPool { x, argmax } => {
                    accumulate(&mut grads, *x, ops::maxpool_backward(self.dims(*x), argmax, &dy));
                }
                Op::Resize { x } => {
                    accumulate(&mut grads, *x, ops::resize_backward(self.dims(*x), &dy));
                }
                Op::ChannelScale { x, mask } => {
                    accumulate(&mut grads, *x, ops::channel_scale(&dy, mask));
                }
            }
        }
        Gradients { params, inputs: grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: BTreeMap<String, Tensor<T>>,
    inputs: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    /// Gradient with respect to a value recorded by [`Tape::input`].
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(d: Dims, s: f64, off: f64) -> Tensor<f64> {
        Tensor::from_vec(d, (0..d.len()).map(|i| ((i as f64) * s + off).sin()).collect())
    }

    /// Small graph touching every op kind; returns a scalar objective
    /// `sum(out * probe)`.
    fn objective(x: &Tensor<f64>, w: &Tensor<f64>, uw: &Tensor<f64>, slope: &Tensor<f64>, gamma: &Tensor<f64>) -> (f64, Option<Tensor<f64>>, BTreeMap<String, Tensor<f64>>) {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let wv = t.param("w", w.clone());
        let uwv = t.param("uw", uw.clone());
        let sv = t.param("slope", slope.clone());
        let gv = t.param("gamma", gamma.clone());
        let bv = t.param("beta", Tensor::full(gamma.dims(), 0.1));
        let c = t.conv(xv, wv, None, ConvGeom::same([3, 3, 3]));
        let (bn, _) = t.batchnorm(c, gv, bv, None);
        let a = t.prelu(bn, sv);
        let p = t.avgpool(a, [2, 2, 2]);
        let m = t.maxpool(a, [2, 2, 2]);
        let cat = t.concat(&[p, m]);
        let up = t.upconv(cat, uwv, None, [2, 2, 2]);
        let r = t.relu(up);
        let rs = t.resize(r, [3, 5, 2]);
        let d = t.channel_scale(rs, vec![2.0, 0.0]);
        let sm = t.softmax(d);
        let probe = ramp(t.dims(sm), 0.77, 0.3);
        let f: f64 = t.value(sm).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let g = t.backward(&[(sm, probe)]);
        (f, g.input(xv).cloned(), g.into_params())
    }

    #[test]
    fn tape_gradients_match_central_differences() {
        let x = ramp(Dims::new(2, 2, [4, 4, 2]), 0.61, 0.0);
        let w = ramp(Dims::new(3, 2, [3, 3, 3]), 0.37, 1.0).map(|v| v * 0.3);
        let uw = ramp(Dims::new(6, 2, [2, 2, 2]), 0.53, 0.2);
        let slope = Tensor::full(Dims::new(1, 3, [1, 1, 1]), 0.25);
        let gamma = ramp(Dims::new(1, 3, [1, 1, 1]), 1.0, 0.5).map(|v| 1.0 + 0.3 * v);
        let (_, dx, pg) = objective(&x, &w, &uw, &slope, &gamma);
        let dx = dx.unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            assert!((analytic - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "analytic {analytic} vs fd {fd}");
        };
        for i in (0..x.dims().len()).step_by(7) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            check(dx.data()[i], objective(&xp, &w, &uw, &slope, &gamma).0, objective(&xm, &w, &uw, &slope, &gamma).0);
        }
        for i in (0..w.dims().len()).step_by(11) {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            check(pg["w"].data()[i], objective(&x, &wp, &uw, &slope, &gamma).0, objective(&x, &wm, &uw, &slope, &gamma).0);
        }
        for i in 0..3 {
            let (mut sp, mut sm) = (slope.clone(), slope.clone());
            sp.data_mut()[i] += h;
            sm.data_mut()[i] -= h;
            check(pg["slope"].data()[i], objective(&x, &w, &uw, &sp, &gamma).0, objective(&x, &w, &uw, &sm, &gamma).0);
            let (mut gp, mut gm) = (gamma.clone(), gamma.clone());
            gp.data_mut()[i] += h;
            gm.data_mut()[i] -= h;
            check(pg["gamma"].data()[i], objective(&x, &w, &uw, &slope, &gp).0, objective(&x, &w, &uw, &slope, &gm).0);
        }
        for i in (0..uw.dims().len()).step_by(5) {
            let (mut up, mut um) = (uw.clone(), uw.clone());
            up.data_mut()[i] += h;
            um.data_mut()[i] -= h;
            check(pg["uw"].data()[i], objective(&x, &w, &up, &slope, &gamma).0, objective(&x, &w, &um, &slope, &gamma).0);
        }
    }
}
