//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records a computation graph; [`Tensor`] handles index into it.
//! Every operation is single-threaded and deterministic: the same inputs
//! produce bit-identical outputs and gradients. All arithmetic is 64-bit,
//! which is what makes the finite-difference gradient checks in the test
//! suite meaningful at 1e-3/1e-4 relative tolerance.

mod conv;
mod loss_ops;
mod norm;
mod resize;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub use loss_ops::lovasz_grad_vector;

type Value = Rc<ArrayD<f64>>;
type GradSink<'a> = dyn FnMut(usize, ArrayD<f64>) + 'a;
type GradFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Value,
    needs_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Records operations for reverse-mode differentiation.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, needs_grad: bool, grad_fn: Option<GradFn>) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            needs_grad,
            grad_fn,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// A differentiable leaf (parameter). Shares the given storage.
    pub fn leaf(&self, value: Rc<ArrayD<f64>>) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            needs_grad: true,
            grad_fn: None,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: ArrayD<f64>) -> Tensor {
        self.push(value, false, None)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }
}

/// Accumulated gradients from one backward pass, indexed by tensor.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tensor {
    pub fn value(&self) -> Value {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Copy of the scalar held by a 0-d or single-element tensor.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    /// Re-enter the value as a constant, severing gradient flow.
    pub fn detach(&self) -> Tensor {
        let v = self.value().as_ref().clone();
        self.tape.constant(v)
    }

    fn unary(
        &self,
        value: ArrayD<f64>,
        grad_fn: impl Fn(&ArrayD<f64>, &mut GradSink) + 'static,
    ) -> Tensor {
        let needs = self.needs_grad();
        self.tape
            .push(value, needs, needs.then(|| Box::new(grad_fn) as GradFn))
    }

    fn binary(
        &self,
        other: &Tensor,
        value: ArrayD<f64>,
        grad_fn: impl Fn(&ArrayD<f64>, &mut GradSink) + 'static,
    ) -> Tensor {
        debug_assert!(Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes));
        let needs = self.needs_grad() || other.needs_grad();
        self.tape
            .push(value, needs, needs.then(|| Box::new(grad_fn) as GradFn))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// differentiable node that contributed to it.
    pub fn backward(&self) -> Gradients {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(
            nodes[self.id].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::new();
        grads.resize_with(self.id + 1, || None);
        grads[self.id] = Some(ArrayD::from_elem(nodes[self.id].value.raw_dim(), 1.0));

        for id in (0..=self.id).rev() {
            if grads[id].is_none() || !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            if let Some(f) = &nodes[id].grad_fn {
                let g = grads[id].take().unwrap();
                let mut sink = |pid: usize, contrib: ArrayD<f64>| {
                    debug_assert!(pid < id);
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                };
                f(&g, &mut sink);
            }
            // leaves keep their gradient
        }
        Gradients { grads }
    }

    // ----- elementwise -----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let value = a.as_ref() + b.as_ref();
        let (ia, ib) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        self.binary(other, value, move |g, sink| {
            if na {
                sink(ia, g.clone());
            }
            if nb {
                sink(ib, g.clone());
            }
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let value = a.as_ref() - b.as_ref();
        let (ia, ib) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        self.binary(other, value, move |g, sink| {
            if na {
                sink(ia, g.clone());
            }
            if nb {
                sink(ib, -g);
            }
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let value = a.as_ref() * b.as_ref();
        let (ia, ib) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        self.binary(other, value, move |g, sink| {
            if na {
                sink(ia, g * b.as_ref());
            }
            if nb {
                sink(ib, g * a.as_ref());
            }
        })
    }

    pub fn neg(&self) -> Tensor {
        let value = -self.value().as_ref();
        let ia = self.id;
        self.unary(value, move |g, sink| sink(ia, -g))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let value = self.value().as_ref() * c;
        let ia = self.id;
        self.unary(value, move |g, sink| sink(ia, g * c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let value = self.value().as_ref() + c;
        let ia = self.id;
        self.unary(value, move |g, sink| sink(ia, g.clone()))
    }

    pub fn abs(&self) -> Tensor {
        let a = self.value();
        let value = a.mapv(f64::abs);
        let ia = self.id;
        self.unary(value, move |g, sink| {
            sink(ia, g * &a.mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }));
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let value = self.value().mapv(sigmoid);
        let s = value.clone();
        let ia = self.id;
        self.unary(value, move |g, sink| {
            sink(ia, g * &s.mapv(|y| y * (1.0 - y)));
        })
    }

    pub fn gelu(&self) -> Tensor {
        let a = self.value();
        let value = a.mapv(gelu);
        let ia = self.id;
        self.unary(value, move |g, sink| {
            sink(ia, g * &a.mapv(gelu_grad));
        })
    }

    // ----- broadcasting helpers -----

    /// `x + b` with `b: [C]` broadcast along axis 0 of `x: [C, ...]`.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (a, b) = (self.value(), bias.value());
        let c = a.shape()[0];
        assert_eq!(b.shape(), [c], "add_bias: bias must be [C]");
        let mut value = a.as_ref().clone();
        for (i, mut lane) in value.outer_iter_mut().enumerate() {
            lane += b[[i]];
        }
        let (ia, ib) = (self.id, bias.id);
        let (na, nb) = (self.needs_grad(), bias.needs_grad());
        self.binary(bias, value, move |g, sink| {
            if na {
                sink(ia, g.clone());
            }
            if nb {
                let db: Vec<f64> = g.outer_iter().map(|lane| lane.sum()).collect();
                sink(ib, Array1::from_vec(db).into_dyn());
            }
        })
    }

    /// `x + b` with `b: [C]` broadcast along axis 1 of `x: [n, C]`.
    pub fn add_row_bias(&self, bias: &Tensor) -> Tensor {
        let (a, b) = (self.value(), bias.value());
        let a2 = a.view().into_dimensionality::<Ix2>().expect("add_row_bias: 2-d input");
        let c = a2.ncols();
        assert_eq!(b.shape(), [c], "add_row_bias: bias must be [C]");
        let b1 = b.view().into_dimensionality::<Ix1>().unwrap();
        let value = (&a2 + &b1).into_dyn();
        let (ia, ib) = (self.id, bias.id);
        let (na, nb) = (self.needs_grad(), bias.needs_grad());
        self.binary(bias, value, move |g, sink| {
            if na {
                sink(ia, g.clone());
            }
            if nb {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                sink(ib, g2.sum_axis(Axis(0)).into_dyn());
            }
        })
    }

    /// Scale each row of `x: [n, C]` by `s[n]`.
    pub fn mul_rows(&self, s: &Tensor) -> Tensor {
        let (a, sv) = (self.value(), s.value());
        let a2 = a.view().into_dimensionality::<Ix2>().expect("mul_rows: 2-d input");
        let n = a2.nrows();
        assert_eq!(sv.shape(), [n], "mul_rows: scale must be [n]");
        let mut value = a2.to_owned();
        for (i, mut row) in value.outer_iter_mut().enumerate() {
            row *= sv[[i]];
        }
        let (ia, is) = (self.id, s.id);
        let (na, ns) = (self.needs_grad(), s.needs_grad());
        self.binary(s, value.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if na {
                let mut dx = g2.to_owned();
                for (i, mut row) in dx.outer_iter_mut().enumerate() {
                    row *= sv[[i]];
                }
                sink(ia, dx.into_dyn());
            }
            if ns {
                let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
                let ds: Vec<f64> = g2
                    .outer_iter()
                    .zip(a2.outer_iter())
                    .map(|(gr, ar)| gr.dot(&ar))
                    .collect();
                sink(is, Array1::from_vec(ds).into_dyn());
            }
        })
    }

    // ----- shape -----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let a = self.value();
        let old: Vec<usize> = a.shape().to_vec();
        assert_eq!(
            a.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let value = a
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let ia = self.id;
        self.unary(value, move |g, sink| {
            sink(
                ia,
                g.clone().into_shape_with_order(IxDyn(&old)).expect("reshape grad"),
            );
        })
    }

    /// 2-d transpose (materialized).
    pub fn transpose2(&self) -> Tensor {
        let a = self.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("transpose2: 2-d input");
        let value = a2.t().to_owned().into_dyn();
        let ia = self.id;
        self.unary(value, move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            sink(ia, g2.t().to_owned().into_dyn());
        })
    }

    /// Concatenate along `axis`. All inputs must share the remaining dims.
    pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat: empty input");
        let values: Vec<Value> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs: Vec<bool> = parts.iter().map(|p| p.needs_grad()).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let any = needs.iter().any(|&b| b);
        let tape = parts[0].tape.clone();
        let grad_fn = move |g: &ArrayD<f64>, sink: &mut GradSink| {
            let mut off = 0;
            for (i, &sz) in sizes.iter().enumerate() {
                if needs[i] {
                    let slice = g.slice_axis(Axis(axis), ndarray::Slice::from(off..off + sz));
                    sink(ids[i], slice.to_owned());
                }
                off += sz;
            }
        };
        tape.push(value, any, any.then(|| Box::new(grad_fn) as GradFn))
    }

    // ----- reductions -----

    pub fn sum_all(&self) -> Tensor {
        let a = self.value();
        let value = ArrayD::from_elem(IxDyn(&[]), a.sum());
        let shape: Vec<usize> = a.shape().to_vec();
        let ia = self.id;
        self.unary(value, move |g, sink| {
            let gv = *g.iter().next().unwrap();
            sink(ia, ArrayD::from_elem(IxDyn(&shape), gv));
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    // ----- linear algebra -----

    /// Matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.value(), other.value());
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul: lhs 2-d");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul: rhs 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
        let mut out = Array2::<f64>::zeros((a2.nrows(), b2.ncols()));
        general_mat_mul(1.0, &a2, &b2, 0.0, &mut out);
        let (ia, ib) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        self.binary(other, out.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if na {
                let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = Array2::<f64>::zeros((g2.nrows(), b2.nrows()));
                general_mat_mul(1.0, &g2, &b2.t(), 0.0, &mut da);
                sink(ia, da.into_dyn());
            }
            if nb {
                let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
                let mut db = Array2::<f64>::zeros((a2.ncols(), g2.ncols()));
                general_mat_mul(1.0, &a2.t(), &g2, 0.0, &mut db);
                sink(ib, db.into_dyn());
            }
        })
    }

    // ----- softmax -----

    /// Softmax over axis 0 (per column) of a `[m, n]` matrix, with max
    /// subtraction for overflow safety.
    pub fn softmax_cols(&self) -> Tensor {
        self.softmax_axis(0)
    }

    /// Softmax over axis 1 (per row) of a `[m, n]` matrix.
    pub fn softmax_rows(&self) -> Tensor {
        self.softmax_axis(1)
    }

    fn softmax_axis(&self, axis: usize) -> Tensor {
        let a = self.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("softmax: 2-d input");
        let mut out = a2.to_owned();
        let lane_axis = Axis(1 - axis);
        for mut lane in out.axis_iter_mut(lane_axis) {
            let m = lane.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        let y = Rc::new(out.clone());
        let ia = self.id;
        self.unary(out.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = g2.to_owned();
            for (mut dlane, ylane) in dx.axis_iter_mut(lane_axis).zip(y.axis_iter(lane_axis)) {
                let dot = dlane.dot(&ylane);
                dlane.zip_mut_with(&ylane, |d, &yv| *d = yv * (*d - dot));
            }
            sink(ia, dx.into_dyn());
        })
    }

    // ----- pairwise similarity -----

    /// Negative squared Euclidean distances between the columns of
    /// `k: [C, m]` (memory) and `q: [C, n]` (query): `out[j, i] = -||k_j - q_i||^2`.
    pub fn pairwise_neg_sqdist(query: &Tensor, keys: &Tensor) -> Tensor {
        let (qv, kv) = (query.value(), keys.value());
        let q2 = qv.view().into_dimensionality::<Ix2>().expect("pairwise: query 2-d");
        let k2 = kv.view().into_dimensionality::<Ix2>().expect("pairwise: keys 2-d");
        assert_eq!(q2.nrows(), k2.nrows(), "pairwise: channel mismatch");
        let (m, n) = (k2.ncols(), q2.ncols());
        let mut out = Array2::<f64>::zeros((m, n));
        general_mat_mul(2.0, &k2.t(), &q2, 0.0, &mut out);
        let qn: Vec<f64> = q2.axis_iter(Axis(1)).map(|c| c.dot(&c)).collect();
        let kn: Vec<f64> = k2.axis_iter(Axis(1)).map(|c| c.dot(&c)).collect();
        for j in 0..m {
            for i in 0..n {
                out[[j, i]] -= kn[j] + qn[i];
            }
        }
        let (iq, ik) = (query.id, keys.id);
        let (nq, nk) = (query.needs_grad(), keys.needs_grad());
        query.binary(keys, out.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let q2 = qv.view().into_dimensionality::<Ix2>().unwrap();
            let k2 = kv.view().into_dimensionality::<Ix2>().unwrap();
            if nq {
                // dq = 2 (K G - q * colsum(G))
                let mut dq = Array2::<f64>::zeros(q2.raw_dim());
                general_mat_mul(2.0, &k2, &g2, 0.0, &mut dq);
                let colsum = g2.sum_axis(Axis(0));
                for (mut col, (qcol, &cs)) in dq
                    .axis_iter_mut(Axis(1))
                    .zip(q2.axis_iter(Axis(1)).zip(colsum.iter()))
                {
                    col.zip_mut_with(&qcol, |d, &qv| *d -= 2.0 * qv * cs);
                }
                sink(iq, dq.into_dyn());
            }
            if nk {
                // dk = 2 (Q G^T - k * rowsum(G))
                let mut dk = Array2::<f64>::zeros(k2.raw_dim());
                general_mat_mul(2.0, &q2, &g2.t(), 0.0, &mut dk);
                let rowsum = g2.sum_axis(Axis(1));
                for (mut col, (kcol, &rs)) in dk
                    .axis_iter_mut(Axis(1))
                    .zip(k2.axis_iter(Axis(1)).zip(rowsum.iter()))
                {
                    col.zip_mut_with(&kcol, |d, &kv| *d -= 2.0 * kv * rs);
                }
                sink(ik, dk.into_dyn());
            }
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x.powi(3))).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}


#[cfg(test)]
mod tests {
    use super::testutil::check_gradient;
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn add_mul_values() {
        let tape = Tape::new();
        let a = tape.constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = tape.constant(arr1(&[3.0, -1.0]).into_dyn());
        assert_eq!(a.add(&b).value().as_slice().unwrap(), &[4.0, 1.0]);
        assert_eq!(a.mul(&b).value().as_slice().unwrap(), &[3.0, -2.0]);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let tape = Tape::new();
        let a = tape.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.constant(arr2(&[[5.0], [6.0]]).into_dyn());
        let c = a.matmul(&b);
        assert_eq!(c.value().as_slice().unwrap(), &[17.0, 39.0]);
    }

    #[test]
    fn softmax_cols_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let x = tape.constant(rand_array(&[5, 3], &mut rng));
        let y = x.softmax_cols();
        let v = y.value();
        let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
        for col in v2.axis_iter(Axis(1)) {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_neg_sqdist_hand_case() {
        let tape = Tape::new();
        // C=2: a=(1,0), b=(0,1) -> -2
        let q = tape.constant(arr2(&[[1.0], [0.0]]).into_dyn());
        let k = tape.constant(arr2(&[[0.0], [1.0]]).into_dyn());
        let s = Tensor::pairwise_neg_sqdist(&q, &k);
        assert_eq!(s.value().as_slice().unwrap(), &[-2.0]);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_array(&[6], &mut rng);
        check_gradient(
            |_t, x| x.gelu().mul(&x.sigmoid()).sum_all(),
            &x0,
            1e-5,
            1e-6,
        );
        check_gradient(
            |_t, x| x.scale(2.5).add_scalar(0.3).abs().sum_all(),
            &x0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn matmul_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_array(&[3, 4], &mut rng);
        let w = rand_array(&[4, 2], &mut rng);
        check_gradient(
            move |t, x| {
                let w = t.constant(w.clone());
                x.matmul(&w).softmax_rows().mul(&x.matmul(&w)).sum_all()
            },
            &x0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn pairwise_gradients_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q0 = rand_array(&[3, 2], &mut rng);
        let k0 = rand_array(&[3, 4], &mut rng);
        let kc = k0.clone();
        check_gradient(
            move |t, q| {
                let k = t.constant(kc.clone());
                Tensor::pairwise_neg_sqdist(q, &k).softmax_cols().sum_all()
            },
            &q0,
            1e-5,
            1e-6,
        );
        let qc = q0.clone();
        check_gradient(
            move |t, k| {
                let q = t.constant(qc.clone());
                Tensor::pairwise_neg_sqdist(&q, k)
                    .softmax_cols()
                    .mul(&Tensor::pairwise_neg_sqdist(&q, k))
                    .sum_all()
            },
            &k0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn concat_and_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_array(&[2, 3], &mut rng);
        check_gradient(
            |_t, x| {
                let y = Tensor::concat(1, &[x.clone(), x.scale(2.0)]);
                y.reshape(&[12]).gelu().sum_all()
            },
            &x0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn bias_and_row_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_array(&[4, 3], &mut rng);
        let b = rand_array(&[3], &mut rng);
        let s = rand_array(&[4], &mut rng);
        let (bc, sc) = (b.clone(), s.clone());
        check_gradient(
            move |t, x| {
                let b = t.constant(bc.clone());
                let s = t.constant(sc.clone());
                x.add_row_bias(&b).mul_rows(&s).gelu().sum_all()
            },
            &x0,
            1e-5,
            1e-6,
        );
        // gradient w.r.t. bias and scale
        let x0c = x0.clone();
        check_gradient(
            move |t, b| {
                let x = t.constant(x0c.clone());
                x.add_row_bias(b).sigmoid().sum_all()
            },
            &b,
            1e-5,
            1e-6,
        );
        let x0c = x0.clone();
        check_gradient(
            move |t, s| {
                let x = t.constant(x0c.clone());
                x.mul_rows(s).sigmoid().sum_all()
            },
            &s,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Rc::new(arr1(&[2.0]).into_dyn()));
        let loss = x.detach().mul(&x).sum_all();
        let grads = loss.backward();
        // d/dx of detach(x)*x is detach(x) = 2, not 2x = 4
        assert_eq!(grads.get(&x).unwrap().as_slice().unwrap(), &[2.0]);
    }
}
