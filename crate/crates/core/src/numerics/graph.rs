//! Tape-based reverse-mode differentiation.
//!
//! Every kernel call appends a node holding its forward value and the
//! operation that produced it. [`Graph::backward`] walks the tape in reverse
//! and adds the gradients of parameter leaves into a [`ParamStore`].

use super::tensor::sigmoid;
use super::{NumericsError, ParamId, ParamStore, ShapeError, Tensor};

/// Lower clamp for probabilities entering the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-12;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LeakyRelu(Var),
    MeanRows(Var),
    Sum(Var),
    SoftmaxRows(Var),
    Bce(Var, Vec<f64>),
    GaussianKl([Var; 4]),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type OpResult = Result<Var, ShapeError>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.value(v).item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Elementwise sum; `b` may broadcast along rows, columns or both.
    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        let v = self.value(a).add_broadcast(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(ShapeError::new("mul", ta.shape(), tb.shape()));
        }
        let v = ta.zip_map(tb, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> OpResult {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&ts)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> OpResult {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&ts)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> OpResult {
        let v = self.value(a).gather_rows(indices)?;
        Ok(self.push(v, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn row(&mut self, a: Var, i: usize) -> OpResult {
        self.gather_rows(a, &[i])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { LEAKY_SLOPE * x });
        self.push(v, Op::LeakyRelu(a))
    }

    /// Column mean over rows, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    /// `-sum(t ln p + (1 - t) ln(1 - p))` with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> OpResult {
        let p = self.value(probs);
        if p.len() != targets.len() {
            return Err(ShapeError::new("bce", p.shape(), [1, targets.len()]));
        }
        let loss = bce_value(targets, p.data());
        Ok(self.push(Tensor::scalar(loss), Op::Bce(probs, targets.to_vec())))
    }

    /// Closed-form `KL(q || p)` between diagonal Gaussians in log-variance form.
    pub fn gaussian_kl(&mut self, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> OpResult {
        let shape = self.shape(mu_q);
        for v in [lv_q, mu_p, lv_p] {
            if self.shape(v) != shape {
                return Err(ShapeError::new("gaussian_kl", shape, self.shape(v)));
            }
        }
        let kl = kl_value(
            self.value(mu_q).data(),
            self.value(lv_q).data(),
            self.value(mu_p).data(),
            self.value(lv_p).data(),
        );
        Ok(self.push(Tensor::scalar(kl), Op::GaussianKl([mu_q, lv_q, mu_p, lv_p])))
    }

    /// Accumulates `d loss / d param` into `store` for every parameter leaf.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    send(*a, g.matmul(&tb.transpose()).expect("shapes checked"));
                    send(*b, ta.transpose().matmul(&g).expect("shapes checked"));
                }
                Op::Add(a, b) => {
                    let [br, bc] = self.shape(*b);
                    send(*b, reduce_to(&g, br, bc));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    send(*a, g.zip_map(tb, |x, y| x * y));
                    send(*b, g.zip_map(ta, |x, y| x * y));
                }
                Op::Affine(a, s) => send(*a, g.map(|x| x * s)),
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let r = self.shape(*p)[0];
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        send(*p, Tensor::new(r, c, data).expect("sized"));
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.shape(*p)[1];
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        send(*p, Tensor::new(rows, c, data).expect("sized"));
                        offset += c;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let [r, c] = self.shape(*a);
                    let mut out = Tensor::zeros(r, c);
                    let data = out.data_mut();
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    send(*a, out);
                }
                Op::Tanh(a) => send(*a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
                Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |d, y| d * y)),
                Op::Log(a) => send(*a, g.zip_map(self.value(*a), |d, x| d / x)),
                Op::LeakyRelu(a) => send(
                    *a,
                    g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { LEAKY_SLOPE * d }),
                ),
                Op::MeanRows(a) => {
                    let [r, c] = self.shape(*a);
                    let mut out = Tensor::zeros(r, c);
                    let scale = if r > 0 { 1.0 / r as f64 } else { 0.0 };
                    let data = out.data_mut();
                    for i in 0..r {
                        for (j, o) in data[i * c..(i + 1) * c].iter_mut().enumerate() {
                            *o = g.data()[j] * scale;
                        }
                    }
                    send(*a, out);
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(*a);
                    send(*a, Tensor::filled(r, c, g.data()[0]));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let [r, c] = y.shape();
                    let mut out = Tensor::zeros(r, c);
                    let data = out.data_mut();
                    for i in 0..r {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            data[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*a, out);
                }
                Op::Bce(p, targets) => {
                    let scale = g.data()[0];
                    let probs = self.value(*p);
                    let data = probs
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &t)| {
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                                0.0
                            } else {
                                scale * (-t / p + (1.0 - t) / (1.0 - p))
                            }
                        })
                        .collect();
                    let [r, c] = probs.shape();
                    send(*p, Tensor::new(r, c, data).expect("sized"));
                }
                Op::GaussianKl([mq, lq, mp, lp]) => {
                    let s = g.data()[0];
                    let (mu_q, lv_q) = (self.value(*mq), self.value(*lq));
                    let (mu_p, lv_p) = (self.value(*mp), self.value(*lp));
                    let [r, c] = mu_q.shape();
                    let n = mu_q.len();
                    let (mut gmq, mut glq, mut gmp, mut glp) =
                        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                    for k in 0..n {
                        let var_q = lv_q.data()[k].exp();
                        let inv_var_p = (-lv_p.data()[k]).exp();
                        let diff = mu_q.data()[k] - mu_p.data()[k];
                        gmq[k] = s * diff * inv_var_p;
                        gmp[k] = -gmq[k];
                        glq[k] = s * 0.5 * (var_q * inv_var_p - 1.0);
                        glp[k] = s * 0.5 * (1.0 - (var_q + diff * diff) * inv_var_p);
                    }
                    send(*mq, Tensor::new(r, c, gmq).expect("sized"));
                    send(*lq, Tensor::new(r, c, glq).expect("sized"));
                    send(*mp, Tensor::new(r, c, gmp).expect("sized"));
                    send(*lp, Tensor::new(r, c, glp).expect("sized"));
                }
            }
        }
        Ok(())
    }
}

fn reduce_to(g: &Tensor, rows: usize, cols: usize) -> Tensor {
    let [r, c] = g.shape();
    if [r, c] == [rows, cols] {
        return g.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    let data = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            let oi = if rows == 1 { 0 } else { i };
            let oj = if cols == 1 { 0 } else { j };
            data[oi * cols + oj] += g.get(i, j);
        }
    }
    out
}

pub(crate) fn bce_value(targets: &[f64], probs: &[f64]) -> f64 {
    -targets
        .iter()
        .zip(probs)
        .map(|(&t, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum::<f64>()
}

pub(crate) fn kl_value(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    let mut kl = 0.0;
    for k in 0..mu_q.len() {
        let diff = mu_q[k] - mu_p[k];
        kl += 0.5 * (lv_p[k] - lv_q[k] + ((lv_q[k] - lv_p[k]).exp() + diff * diff * (-lv_p[k]).exp()) - 1.0);
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.sigmoid(xv);
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let c = g.constant(Tensor::zeros(2, 1));
        assert!(matches!(
            g.backward(c, &mut store),
            Err(NumericsError::NonScalarLoss([2, 1]))
        ));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(vec![1.0, -2.0]));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let t = g.tanh(wv);
        let loss = g.sum(t);
        g.backward(loss, &mut store).unwrap();
        let once = store.grad(w).clone();
        g.backward(loss, &mut store).unwrap();
        for (a, b) in store.grad(w).data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn sum_matmul_gradient_is_ones_times_b_transpose() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let b_t = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-3.0, 1.5]]).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let bv = g.constant(b_t.clone());
        let m = g.matmul(av, bv).unwrap();
        let loss = g.sum(m);
        g.backward(loss, &mut store).unwrap();
        let expected = Tensor::filled(2, 2, 1.0).matmul(&b_t.transpose()).unwrap();
        assert_eq!(store.grad(a), &expected);
    }

    #[test]
    fn bce_hand_values() {
        assert!((bce_value(&[1.0], &[0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_value(&[1.0], &[1.0 - BCE_EPS]) < 1e-11);
        let v = bce_value(&[1.0, 0.0], &[0.9, 0.1]);
        assert!((v - 2.0 * -(0.9f64.ln())).abs() < 1e-14);
        assert!((v - 0.21072).abs() < 1e-5);
        let mut g = Graph::new();
        let p = g.constant(Tensor::row_vector(vec![0.5, 0.5]));
        assert!(g.bce(p, &[1.0]).is_err());
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_value(&[0.3, -1.0], &[0.2, 0.7], &[0.3, -1.0], &[0.2, 0.7]), 0.0);
        assert!((kl_value(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
    }
}
