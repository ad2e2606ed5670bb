//! Minimal reverse-mode autodiff over 2-D `f64` tensors, plus the layers and
//! optimizer the denoiser and evaluator are built from.
//!
//! Every forward pass records onto a [`Tape`]; `backward` walks it in reverse
//! and returns one gradient per parameter in the [`ParamStore`].

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Rounds every weight to the nearest `f32`, matching what a checkpoint
    /// stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a `1 × n` row over every row of `a`.
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * &self.value(row).row(0);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x: a, norms })
    }

    /// Mean squared error against a constant target, as a `1 × 1` tensor.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim(), "mse shape mismatch");
        let loss = (x - target).mapv(|d| d * d).mean().expect("non-empty");
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::Mse {
                x: a,
                target: target.clone(),
            },
        )
    }

    /// Mean row-wise softmax cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let probs = softmax(self.value(logits));
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[[i, l]].max(1e-300).ln())
            .sum::<f64>()
            / labels.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var, param_count: usize) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).dim()));
        let mut out: Vec<Option<Tensor>> = vec![None; param_count];
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Tensor| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out[id.0] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    acc(*row, (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, &g * &r.row(0));
                }
                Op::Scale(a, k) => acc(*a, g * *k),
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(|x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
                    });
                    acc(*a, g * d);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut dx = Array2::zeros(y.dim());
                    for (i, ((gr, yr), mut dr)) in g.rows().into_iter().zip(y.rows()).zip(dx.rows_mut()).enumerate() {
                        let mean_g = gr.sum() / n;
                        let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, gv), yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *d = inv_std[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yr, |d, yv| *d -= yv * dot);
                    }
                    acc(*a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        acc(*p, g.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., start..start + cols]).to_owned());
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let row = g.row(0).mapv(|v| v / n as f64);
                    let d = Array2::from_shape_fn((n, row.len()), |(_, j)| row[j]);
                    acc(*a, d);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (i, (mut dr, yr)) in dx.rows_mut().into_iter().zip(y.rows()).enumerate() {
                        let dot: f64 = dr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        dr.zip_mut_with(&yr, |d, yv| *d = (*d - yv * dot) / norms[i]);
                    }
                    acc(*x, dx);
                }
                Op::Mse { x, target } => {
                    let k = 2.0 * g[[0, 0]] / target.len() as f64;
                    acc(*x, (self.value(*x) - target) * k);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[[i, l]] -= 1.0;
                    }
                    acc(*logits, d * (g[[0, 0]] / labels.len() as f64));
                }
            }
        }
        out
    }
}

pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), glorot(input, output, rng)),
            b: store.add(format!("{name}.b"), Array2::zeros((1, output))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, width))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, width))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(width % heads == 0, "width must divide into heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
            width,
        }
    }

    /// Queries from `x`, keys and values from `context`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, context: Var) -> Var {
        let q = self.q.forward(tape, store, x);
        let k = self.k.forward(tape, store, context);
        let v = self.v.forward(tape, store, context);
        let hd = self.width / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, a, b);
            let kh = tape.slice_cols(k, a, b);
            let vh = tape.slice_cols(v, a, b);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let joined = tape.concat_cols(&heads);
        self.out.forward(tape, store, joined)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(tape, store, x);
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.norm_attn.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, h);
        let x = tape.add(x, a);
        let h = self.norm_ff.forward(tape, store, x);
        let f = self.ff.forward(tape, store, h);
        tape.add(x, f)
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            step: 0,
            m: store.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
            v: store.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i].zip_mut_with(g, |m, gv| *m = b1 * *m + (1.0 - b1) * gv * clip);
            self.v[i].zip_mut_with(g, |v, gv| *v = b2 * *v + (1.0 - b2) * (gv * clip).powi(2));
            let (lr, eps) = (self.lr, self.eps);
            let p = &mut store.values[i];
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, m, v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
        }
    }
}

/// Accumulates per-parameter gradients across several backward passes.
pub fn accumulate(total: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>, weight: f64) {
    if total.is_empty() {
        total.resize(grads.len(), None);
    }
    for (t, g) in total.iter_mut().zip(grads) {
        if let Some(g) = g {
            match t {
                Some(existing) => existing.scaled_add(weight, &g),
                slot => *slot = Some(g * weight),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every scalar of every parameter.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        let grads = tape.backward(loss, store.len());
        let h = 1e-6;
        for p in 0..store.len() {
            for idx in 0..store.values[p].len() {
                let orig = store.values[p].as_slice().unwrap()[idx];
                store.values[p].as_slice_mut().unwrap()[idx] = orig + h;
                let mut t = Tape::new();
                let lp = f(&mut t, store);
                let up = t.value(lp)[[0, 0]];
                store.values[p].as_slice_mut().unwrap()[idx] = orig - h;
                let mut t = Tape::new();
                let lm = f(&mut t, store);
                let down = t.value(lm)[[0, 0]];
                store.values[p].as_slice_mut().unwrap()[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[p].as_ref().map_or(0.0, |g| g.as_slice().unwrap()[idx]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() < 1e-8 || (numeric - analytic).abs() / denom < 1e-5,
                    "{}[{idx}]: numeric {numeric} analytic {analytic}",
                    store.names[p]
                );
            }
        }
    }

    #[test]
    fn encoder_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let layer = EncoderLayer::new(&mut store, "enc", 8, 2, 16, &mut rng);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let target = Array2::from_shape_fn((5, 8), |(i, j)| ((i + j) as f64 * 0.2).cos());
        check_grads(&mut store, |tape, store| {
            let xv = tape.constant(x.clone());
            let y = layer.forward(tape, store, xv);
            tape.mse(y, &target)
        });
    }

    #[test]
    fn pooling_normalize_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let lin = Linear::new(&mut store, "lin", 4, 3, &mut rng);
        let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f64 * 0.7).cos());
        check_grads(&mut store, |tape, store| {
            let xv = tape.constant(x.clone());
            let h = lin.forward(tape, store, xv);
            let top = tape.slice_rows(h, 0, 3);
            let bottom = tape.slice_rows(h, 3, 6);
            let pooled = tape.mean_rows(bottom);
            let both = tape.concat_rows(&[top, pooled]);
            let n = tape.l2_normalize_rows(both);
            let logits = tape.matmul_nt(n, n);
            let logits = tape.scale(logits, 3.0);
            tape.cross_entropy(logits, &[0, 1, 2, 3])
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i * j) as f64 - 4.0);
        let s = softmax(&x);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut store = ParamStore::default();
        let p = store.add("p", Array2::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let v = tape.param(&store, p);
            let loss = tape.mse(v, &Array2::zeros((1, 2)));
            let g = tape.backward(loss, store.len());
            opt.step(&mut store, &g);
        }
        assert!(store.get(p).iter().all(|v| v.abs() < 0.05));
    }
}
