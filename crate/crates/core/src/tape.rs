//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the handles of its inputs. [`Tape::backward`] walks the
//! nodes in reverse and accumulates adjoints. Only the handful of operations
//! the recurrent head, the patch encoder and the triplet loss need are
//! provided.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::distance::euclidean;

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Distance(Var, Var),
    Hinge(Var, Var),
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::MatMul(a, b), needs)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::MatMulNt(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Add(a, b), needs)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let needs = self.needs(a) || self.needs(row);
        self.push(Cow::Owned(value), Op::AddRow(a, row), needs)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::Scale(a, factor), needs)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, factor: Mat) -> Var {
        let value = self.value(a) * &factor;
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::MulConst(a, factor), needs)
    }

    /// Inverted dropout; identity when `p == 0` or no generator is given.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Var {
        let Some(rng) = rng else { return a };
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let mask = self
            .value(a)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep });
        self.mul_const(a, mask)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total: f64 = row.iter().sum();
            row.mapv_inplace(|x| x / total);
        }
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::SoftmaxRows(a), needs)
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let input = self.value(x);
        let n = input.ncols() as f64;
        let mut xhat = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            Cow::Owned(value),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::Gelu(a), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::SliceCols(a, start), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(value), Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Mean over rows, giving a `1×n` node.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty")
            .insert_axis(Axis(0));
        let needs = self.needs(a);
        self.push(Cow::Owned(value), Op::MeanRows(a), needs)
    }

    /// Euclidean distance between two `1×n` rows, as a `1×1` node.
    pub fn distance(&mut self, a: Var, b: Var) -> Var {
        let d = euclidean(
            self.value(a).as_slice().expect("contiguous"),
            self.value(b).as_slice().expect("contiguous"),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Cow::Owned(Array2::from_elem((1, 1), d)),
            Op::Distance(a, b),
            needs,
        )
    }

    /// `max(pos - neg + margin, 0)` over `1×1` nodes.
    pub fn hinge(&mut self, pos: Var, neg: Var, margin: f64) -> Var {
        let v = (self.scalar(pos) - self.scalar(neg) + margin).max(0.0);
        let needs = self.needs(pos) || self.needs(neg);
        self.push(
            Cow::Owned(Array2::from_elem((1, 1), v)),
            Op::Hinge(pos, neg),
            needs,
        )
    }

    /// Sum of same-shaped nodes, accumulated in argument order.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value += self.value(p);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(value), Op::Sum(parts.to_vec()), needs)
    }

    /// Back-propagates from a `1×1` root with unit seed.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node<'a>, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*row) {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => accumulate(&mut grads[a.0], g * *f),
            Op::MulConst(a, m) => accumulate(&mut grads[a.0], g * m),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * &**y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.iter().sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.needs(*gain) {
                    accumulate(
                        &mut grads[gain.0],
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.needs(*bias) {
                    accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*x) {
                    let n = xhat.ncols() as f64;
                    let mut dx = g * self.value(*gain);
                    for ((mut row, xh), &inv) in
                        dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let mean_d = row.iter().sum::<f64>() / n;
                        let mean_dx = row.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n;
                        row.zip_mut_with(&xh, |d, &xv| *d = inv * (*d - mean_d - xv * mean_dx));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
                });
                d *= g;
                accumulate(&mut grads[a.0], d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(&mut grads[a.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).nrows();
                let d = g.broadcast(self.value(*a).raw_dim()).expect("broadcast").to_owned()
                    / rows as f64;
                accumulate(&mut grads[a.0], d);
            }
            Op::Distance(a, b) => {
                let d = node.value[[0, 0]];
                if d == 0.0 {
                    return;
                }
                let unit = (self.value(*a) - self.value(*b)) * (g[[0, 0]] / d);
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], -&unit);
                }
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], unit);
                }
            }
            Op::Hinge(pos, neg) => {
                if node.value[[0, 0]] <= 0.0 {
                    return;
                }
                let gv = g[[0, 0]];
                if self.needs(*pos) {
                    accumulate(&mut grads[pos.0], Array2::from_elem((1, 1), gv));
                }
                if self.needs(*neg) {
                    accumulate(&mut grads[neg.0], Array2::from_elem((1, 1), -gv));
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    /// Central-difference check of d(sum(f(x) ⊙ w))/dx for a unary graph.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Mat, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let out = build(&mut t, v);
            random(t.value(out).nrows(), t.value(out).ncols(), &mut rng)
        };
        let objective = |x: &Mat| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let out = build(&mut t, v);
            (t.value(out) * &probe).sum()
        };
        let mut t = Tape::new();
        let v = t.param(&x);
        let out = build(&mut t, v);
        let weighted = t.mul_const(out, probe.clone());
        let ones_l = t.constant(Array2::ones((1, probe.nrows())));
        let ones_r = t.constant(Array2::ones((probe.ncols(), 1)));
        let rowsum = t.matmul(ones_l, weighted);
        let total = t.matmul(rowsum, ones_r);
        let grads = t.backward(total);
        let analytic = grads.get(v).unwrap();
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (objective(&xp) - objective(&xm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "idx {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -5.0]]);
        let y = t.softmax_rows(x);
        for row in t.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(3, 5, &mut rng);
        check_unary(|t, v| t.softmax_rows(v), x.clone(), 1);
        check_unary(|t, v| t.gelu(v), x.clone(), 2);
        check_unary(|t, v| t.mean_rows(v), x.clone(), 3);
        check_unary(|t, v| t.slice_cols(v, 1, 3), x.clone(), 4);
        let g = random(1, 5, &mut rng);
        let b = random(1, 5, &mut rng);
        check_unary(
            move |t, v| {
                let gv = t.constant(g.clone());
                let bv = t.constant(b.clone());
                t.layer_norm(v, gv, bv)
            },
            x.clone(),
            5,
        );
        let w = random(5, 5, &mut rng);
        check_unary(
            move |t, v| {
                let wv = t.constant(w.clone());
                let a = t.matmul(v, wv);
                let c = t.matmul_nt(a, v);
                let halves = [t.slice_cols(c, 0, 1), t.slice_cols(c, 1, 2)];
                t.concat_cols(&halves)
            },
            x,
            6,
        );
    }

    #[test]
    fn distance_gradient_is_zero_at_coincident_points() {
        let a = array![[1.0, 2.0]];
        let mut t = Tape::new();
        let va = t.param(&a);
        let vb = t.constant(a.clone());
        let d = t.distance(va, vb);
        let grads = t.backward(d);
        assert!(grads.get(va).is_none());
    }
}
