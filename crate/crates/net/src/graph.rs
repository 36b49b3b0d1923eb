//! Minimal reverse-mode differentiation over the handful of layers the
//! network needs. Activations are single-sample `C×H×W` tensors in `f64`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }
}

/// Named parameter arrays. Convolution weights are `[out, in, k, k]`,
/// biases `[out]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> usize {
        let name = name.into();
        assert_eq!(values.len(), shape.iter().product::<usize>(), "parameter {name} size");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        id
    }

    /// He-normal weights and zero bias for a `k×k` convolution.
    pub fn add_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        Conv {
            w: self.add(format!("{name}.weight"), vec![cout, cin, k, k], w),
            b: self.add(format!("{name}.bias"), vec![cout], vec![0.0; cout]),
        }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.shapes[id]
    }

    pub fn value(&self, id: usize) -> &[f64] {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.values[id]
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|v| vec![0.0; v.len()]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((n, s), v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }
}

/// Parameter ids of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
}

pub type Var = usize;

enum Op {
    Input,
    Conv { x: Var, conv: Conv, k: usize, cols: Vec<f64> },
    Relu(Var),
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample(Var),
    Concat(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass, recorded for backpropagation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), c: &mut [f64], beta: f64) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe matrices that lie within the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let r = (k / 2) as isize;
    let mut cols = vec![0.0; x.c * k * k * h * w];
    for ci in 0..x.c {
        let plane = x.plane(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * h * w;
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            cols[row + y * w + xx] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let r = (k / 2) as isize;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * h * w;
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += cols[row + y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Conv { .. } => true,
            Op::Relu(x) | Op::MaxPool { x, .. } | Op::Upsample(x) => self.nodes[*x].needs_grad,
            Op::Concat(a, b) => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Same-padded convolution with an odd square kernel.
    pub fn conv(&mut self, x: Var, conv: Conv) -> Var {
        let shape = self.params.shape(conv.w);
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        let xin = &self.nodes[x].value;
        assert_eq!(xin.c, cin, "conv {} input channels", self.params.name(conv.w));
        let (h, w) = (xin.h, xin.w);
        let hw = h * w;
        let cols = if k == 1 { Vec::new() } else { im2col(xin, k) };
        let src: &[f64] = if k == 1 { &xin.data } else { &cols };
        let kk = cin * k * k;
        let mut out = vec![0.0; cout * hw];
        let bias = self.params.value(conv.b);
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        gemm(cout, kk, hw, (self.params.value(conv.w), kk as isize, 1), (src, hw as isize, 1), &mut out, 1.0);
        self.push(Tensor::from_vec(cout, h, w, out), Op::Conv { x, conv, k, cols })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x].value;
        let data = t.data.iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_vec(t.c, t.h, t.w, data);
        self.push(out, Op::Relu(x))
    }

    pub fn conv_relu(&mut self, x: Var, conv: Conv) -> Var {
        let y = self.conv(x, conv);
        self.relu(y)
    }

    /// 2×2 max pooling; sizes must be even. Ties go to the first element in
    /// row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let t = &self.nodes[x].value;
        assert!(t.h.is_multiple_of(2) && t.w.is_multiple_of(2), "max_pool2 needs even sizes");
        let (h2, w2) = (t.h / 2, t.w / 2);
        let mut out = Tensor::zeros(t.c, h2, w2);
        let mut arg = vec![0u32; t.c * h2 * w2];
        for c in 0..t.c {
            let plane = t.plane(c);
            for y in 0..h2 {
                for xx in 0..w2 {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * t.w + 2 * xx + dx;
                        if plane[i] > best {
                            best = plane[i];
                            bi = i;
                        }
                    }
                    let o = (c * h2 + y) * w2 + xx;
                    out.data[o] = best;
                    arg[o] = bi as u32;
                }
            }
        }
        self.push(out, Op::MaxPool { x, arg })
    }

    /// Nearest-neighbor 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = &self.nodes[x].value;
        let (h, w) = (t.h * 2, t.w * 2);
        let mut out = Tensor::zeros(t.c, h, w);
        for c in 0..t.c {
            let src = t.plane(c);
            for y in 0..h {
                for xx in 0..w {
                    out.data[(c * h + y) * w + xx] = src[(y / 2) * t.w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample(x))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((ta.h, ta.w), (tb.h, tb.w), "concat spatial sizes");
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let out = Tensor::from_vec(ta.c + tb.c, ta.h, ta.w, data);
        self.push(out, Op::Concat(a, b))
    }

    /// Accumulates parameter gradients into `grads` (indexed like the
    /// parameter store) given output gradients for some variables.
    pub fn backward(&self, seeds: &[(Var, &[f64])], grads: &mut [Vec<f64>]) {
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, d) in seeds {
            assert_eq!(d.len(), self.nodes[*v].value.data.len(), "seed gradient size");
            add_into(&mut g[*v], d);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Relu(x) => {
                    let d: Vec<f64> =
                        gi.iter().zip(&node.value.data).map(|(&d, &y)| if y > 0.0 { d } else { 0.0 }).collect();
                    add_into(&mut g[*x], &d);
                }
                Op::MaxPool { x, arg } => {
                    if self.nodes[*x].needs_grad {
                        let src = &self.nodes[*x].value;
                        let n_in = src.h * src.w;
                        let n_out = node.value.h * node.value.w;
                        let mut d = vec![0.0; src.data.len()];
                        for (o, (&gv, &a)) in gi.iter().zip(arg).enumerate() {
                            d[(o / n_out) * n_in + a as usize] += gv;
                        }
                        add_into(&mut g[*x], &d);
                    }
                }
                Op::Upsample(x) => {
                    if self.nodes[*x].needs_grad {
                        let src = &self.nodes[*x].value;
                        let (h, w) = (node.value.h, node.value.w);
                        let mut d = vec![0.0; src.data.len()];
                        for c in 0..src.c {
                            for y in 0..h {
                                for xx in 0..w {
                                    d[(c * src.h + y / 2) * src.w + xx / 2] += gi[(c * h + y) * w + xx];
                                }
                            }
                        }
                        add_into(&mut g[*x], &d);
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[*a].value.data.len();
                    if self.nodes[*a].needs_grad {
                        add_into(&mut g[*a], &gi[..na]);
                    }
                    if self.nodes[*b].needs_grad {
                        add_into(&mut g[*b], &gi[na..]);
                    }
                }
                Op::Conv { x, conv, k, cols } => {
                    let src = &self.nodes[*x].value;
                    let hw = src.h * src.w;
                    let cout = node.value.c;
                    let kk = src.c * k * k;
                    let colsrc: &[f64] = if *k == 1 { &src.data } else { cols };
                    // dW += dY · colsᵀ
                    gemm(cout, hw, kk, (&gi, hw as isize, 1), (colsrc, 1, hw as isize), &mut grads[conv.w], 1.0);
                    for (co, row) in gi.chunks(hw).enumerate() {
                        grads[conv.b][co] += row.iter().sum::<f64>();
                    }
                    if self.nodes[*x].needs_grad {
                        let wv = self.params.value(conv.w);
                        let mut dcols = vec![0.0; kk * hw];
                        gemm(kk, cout, hw, (wv, 1, kk as isize), (&gi, hw as isize, 1), &mut dcols, 0.0);
                        if *k == 1 {
                            add_into(&mut g[*x], &dcols);
                        } else {
                            let mut d = vec![0.0; src.data.len()];
                            col2im(&dcols, src.c, src.h, src.w, *k, &mut d);
                            add_into(&mut g[*x], &d);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, d: &[f64]) {
    match slot {
        Some(v) => v.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        None => *slot = Some(d.to_vec()),
    }
}
