//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are cheap handles (`Rc`) to immutable value buffers plus optional
//! graph edges. Elementwise binary ops require identical shapes; there is no
//! implicit broadcasting (scalar ops are explicit). `backward()` runs on a
//! scalar and accumulates gradients into every participating tensor with
//! `requires_grad`. Operations whose inputs all have `requires_grad == false`
//! record no graph node, which makes detached evaluation observable through
//! [`graph_nodes`].

mod ops;
pub mod optim;

pub use ops::Op;

use crate::{Error, Result};
use std::cell::{Cell, RefCell};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAPH_NODES: Cell<u64> = const { Cell::new(0) };
    static DEBUG_CHECKS: Cell<bool> = const { Cell::new(false) };
}

/// Total number of graph nodes (op-producing tensors) recorded on this
/// thread since start. Detached computations leave this unchanged.
pub fn graph_nodes() -> u64 {
    GRAPH_NODES.with(|c| c.get())
}

/// When enabled, tensor creation and every op scan for non-finite values and
/// panic on the first hit. Off by default (it is a full scan per op).
pub fn set_debug_checks(on: bool) {
    DEBUG_CHECKS.with(|c| c.set(on));
}

fn debug_checks() -> bool {
    DEBUG_CHECKS.with(|c| c.get())
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Handle to a tensor value and its place in the backward graph.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        assert_eq!(
            data.len(),
            numel(&shape),
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        if debug_checks() {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                panic!(
                    "tensor: non-finite value {} at flat index {} (shape {:?}, op {:?})",
                    data[i],
                    i,
                    shape,
                    op.as_ref().map(Op::name)
                );
            }
        }
        let id = NEXT_ID.with(|c| {
            let id = c.get();
            c.set(id + 1);
            id
        });
        if op.is_some() {
            GRAPH_NODES.with(|c| c.set(c.get() + 1));
        }
        Tensor {
            inner: Rc::new(Inner {
                id,
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::make(data, shape.to_vec(), false, None)
    }

    /// Leaf tensor that accumulates gradients (a parameter).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::make(data, shape.to_vec(), true, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(vec![v; numel(shape)], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Copy of the value buffer.
    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Borrowed read access without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "tensor: item() on shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Overwrite the value buffer in place (optimizer updates on leaves).
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "tensor: set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// Mutate the value buffer in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => *g = Some(contribution.to_vec()),
        }
    }

    fn collect_graph(&self) -> Vec<Tensor> {
        // Children always have larger ids than their parents, so sorting by
        // descending id is a topological order from the root.
        let mut seen = std::collections::BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.contains_key(&t.inner.id) {
                continue;
            }
            if let Some(op) = &t.inner.op {
                for p in op.parents() {
                    if p.inner.requires_grad && !seen.contains_key(&p.inner.id) {
                        stack.push(p.clone());
                    }
                }
            }
            seen.insert(t.inner.id, t);
        }
        seen.into_values().rev().collect()
    }

    /// Reverse-mode sweep from a scalar. Errors if the tensor is not scalar
    /// or if it already holds a gradient (backward without reset).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward() requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if self.inner.grad.borrow().is_some() {
            return Err(Error::Autodiff(
                "backward() called twice without resetting gradients".into(),
            ));
        }
        *self.inner.grad.borrow_mut() = Some(vec![1.0]);
        for node in self.collect_graph() {
            let Some(op) = &node.inner.op else { continue };
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let data = node.inner.data.borrow();
            op.backward(&node.inner.shape, &data, &grad);
        }
        Ok(())
    }

    /// Clear gradients on this tensor and everything reachable from it.
    pub fn clear_graph_grads(&self) {
        for node in self.collect_graph() {
            *node.inner.grad.borrow_mut() = None;
        }
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.op.as_ref().map(Op::name))
            .finish()
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: (usize, usize),
}

/// Central-difference gradient check of a scalar-valued function against the
/// backward pass. Relative error per element is |fd - grad| / max(|fd|,
/// |grad|, 1), so values below 1 are compared absolutely.
pub fn finite_difference_check(
    f: impl Fn(&[Tensor]) -> Tensor,
    params: &[Tensor],
    step: f64,
) -> GradCheckReport {
    let loss = f(params);
    loss.backward().expect("gradcheck: backward failed");
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    loss.clear_graph_grads();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0) };
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.inner.data.borrow()[ei];
            p.inner.data.borrow_mut()[ei] = orig + step;
            let up = f(params).item();
            p.inner.data.borrow_mut()[ei] = orig - step;
            let down = f(params).item();
            p.inner.data.borrow_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * step);
            let g = grads[pi][ei];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
        }
    }
    report
}

/// Finite-difference checks for every differentiable op, used by unit tests
/// and the acceptance gate. Each entry is a small randomized scalar-valued
/// graph exercising one op (plus two composites); inputs are kept away from
/// non-differentiable kinks.
pub fn gradient_check_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    use crate::rng::Rng;
    let mut rng = Rng::new(seed);
    let rt = |shape: &[usize], lo: f64, hi: f64, rng: &mut Rng| {
        Tensor::param((0..numel(shape)).map(|_| rng.uniform(lo, hi)).collect(), shape)
    };
    let ct = |shape: &[usize], rng: &mut Rng| {
        Tensor::from_vec((0..numel(shape)).map(|_| rng.uniform(-1.0, 1.0)).collect(), shape)
    };
    let step = 1e-4;
    let mut out = Vec::new();
    let mut check = |name: &str, params: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor| {
        out.push((name.to_string(), finite_difference_check(f, params, step)));
    };

    let c23 = ct(&[2, 3], &mut rng);
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    let b = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("add", &[a, b], &|p| p[0].add(&p[1]).mul(&c23).sum(None));
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    let b = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("sub", &[a, b], &|p| p[0].sub(&p[1]).mul(&c23).sum(None));
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    let b = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("mul", &[a, b], &|p| p[0].mul(&p[1]).mul(&c23).sum(None));
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    let b = rt(&[2, 3], 1.0, 2.0, &mut rng);
    check("div", &[a, b], &|p| p[0].div(&p[1]).mul(&c23).sum(None));
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("affine", &[a], &|p| p[0].affine(1.7, -0.3).mul(&c23).sum(None));
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("exp", &[a], &|p| p[0].exp().mul(&c23).sum(None));
    let a = rt(&[2, 3], 0.5, 2.0, &mut rng);
    check("ln", &[a], &|p| p[0].ln().mul(&c23).sum(None));
    let a = rt(&[2, 3], 0.5, 2.0, &mut rng);
    check("sqrt", &[a], &|p| p[0].sqrt().mul(&c23).sum(None));
    let a = rt(&[2, 3], -2.0, 2.0, &mut rng);
    check("sigmoid", &[a], &|p| p[0].sigmoid().mul(&c23).sum(None));
    let a = rt(&[2, 3], -2.0, 2.0, &mut rng);
    check("gelu", &[a], &|p| p[0].gelu().mul(&c23).sum(None));
    let a = rt(&[2, 3], 0.1, 1.0, &mut rng);
    let neg = rt(&[2, 3], -1.0, -0.1, &mut rng);
    check("relu", &[a, neg], &|p| {
        Tensor::concat(&[&p[0], &p[1]], 0).relu().mul(&Tensor::concat(&[&c23, &c23], 0)).sum(None)
    });
    let a = rt(&[2, 3], 0.3, 1.5, &mut rng);
    check("pow_scalar", &[a], &|p| p[0].pow_scalar(2.7).mul(&c23).sum(None));
    let a = rt(&[2, 3], 0.1, 1.0, &mut rng);
    let neg = rt(&[2, 3], -1.0, -0.1, &mut rng);
    check("clamp_min", &[a, neg], &|p| {
        Tensor::concat(&[&p[0], &p[1]], 0)
            .clamp_min(0.0)
            .mul(&Tensor::concat(&[&c23, &c23], 0))
            .sum(None)
    });
    let cmm = ct(&[3, 2], &mut rng);
    let a = rt(&[3, 4], -1.0, 1.0, &mut rng);
    let b = rt(&[4, 2], -1.0, 1.0, &mut rng);
    check("matmul", &[a, b], &|p| p[0].matmul(&p[1]).mul(&cmm).sum(None));
    let c32 = ct(&[3, 2], &mut rng);
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("transpose", &[a], &|p| p[0].t().mul(&c32).sum(None));
    let c6 = ct(&[6], &mut rng);
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("reshape", &[a], &|p| p[0].reshape(&[6]).mul(&c6).sum(None));
    let c43 = ct(&[4, 3], &mut rng);
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    let b = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("concat", &[a, b], &|p| Tensor::concat(&[&p[0], &p[1]], 0).mul(&c43).sum(None));
    let c22 = ct(&[2, 2], &mut rng);
    let a = rt(&[2, 4], -1.0, 1.0, &mut rng);
    check("narrow", &[a], &|p| p[0].narrow(1, 1, 2).mul(&c22).sum(None));
    let c33 = ct(&[3, 3], &mut rng);
    let a = rt(&[4, 3], -1.0, 1.0, &mut rng);
    check("gather", &[a], &|p| p[0].gather(0, &[1, 1, 3]).mul(&c33).sum(None));
    let c4 = ct(&[4], &mut rng);
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("take_flat", &[a], &|p| p[0].take_flat(&[0, 5, 5, 2]).mul(&c4).sum(None));
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("masked_fill", &[a], &|p| {
        p[0].masked_fill(&[false, true, false, false, true, false], -3.0).mul(&c23).sum(None)
    });
    let a = rt(&[2, 3], -2.0, 2.0, &mut rng);
    check("softmax", &[a], &|p| p[0].softmax(1).mul(&c23).sum(None));
    let c35 = ct(&[3, 5], &mut rng);
    let x = rt(&[3, 5], -1.0, 1.0, &mut rng);
    let scale = rt(&[5], 0.5, 1.5, &mut rng);
    let shift = rt(&[5], -0.5, 0.5, &mut rng);
    check("layernorm", &[x, scale, shift], &|p| {
        p[0].layernorm(&p[1], &p[2], 1e-5).mul(&c35).sum(None)
    });
    let c3 = ct(&[3], &mut rng);
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("sum_axis", &[a], &|p| p[0].sum(Some(0)).mul(&c3).sum(None));
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("sum_all", &[a], &|p| p[0].sum(None));
    let c2 = ct(&[2], &mut rng);
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("mean_axis", &[a], &|p| p[0].mean(Some(1)).mul(&c2).sum(None));
    let a = rt(&[2, 3], -1.0, 1.0, &mut rng);
    check("mean_all", &[a], &|p| p[0].mean(None));
    let cc = ct(&[3, 5, 5], &mut rng);
    let x = rt(&[2, 5, 5], -1.0, 1.0, &mut rng);
    let w = rt(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let bias = rt(&[3], -0.5, 0.5, &mut rng);
    check("conv2d", &[x, w, bias], &|p| {
        p[0].conv2d(&p[1], Some(&p[2]), 1, 1).mul(&cc).sum(None)
    });
    let cs = ct(&[3, 2, 2], &mut rng);
    let x = rt(&[2, 5, 5], -1.0, 1.0, &mut rng);
    let w = rt(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    check("conv2d_strided", &[x, w], &|p| p[0].conv2d(&p[1], None, 2, 0).mul(&cs).sum(None));
    let cu = ct(&[2, 5, 5], &mut rng);
    let x = rt(&[2, 3, 3], -1.0, 1.0, &mut rng);
    check("bilinear_up", &[x], &|p| p[0].bilinear_resize(5, 5).mul(&cu).sum(None));
    let cd = ct(&[2, 2, 2], &mut rng);
    let x = rt(&[2, 3, 3], -1.0, 1.0, &mut rng);
    check("bilinear_down", &[x], &|p| p[0].bilinear_resize(2, 2).mul(&cd).sum(None));

    // Composite chains close to real use: attention-style and focal-style.
    let q = rt(&[2, 4], -1.0, 1.0, &mut rng);
    let k = rt(&[5, 4], -1.0, 1.0, &mut rng);
    let v = rt(&[5, 4], -1.0, 1.0, &mut rng);
    let ca = ct(&[2, 4], &mut rng);
    let mask = vec![false, true, false, false, false, false, false, true, false, false];
    check("attention_chain", &[q, k, v], &|p| {
        let scores = p[0].matmul(&p[1].t()).mul_scalar(0.5).masked_fill(&mask, -1e30);
        scores.softmax(1).matmul(&p[2]).mul(&ca).sum(None)
    });
    let logits = rt(&[6], -2.0, 2.0, &mut rng);
    let targets = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0], &[6]);
    check("focal_chain", &[logits], &|p| {
        let pr = p[0].sigmoid();
        let pt = pr.mul(&targets).add(&pr.rsub_scalar(1.0).mul(&targets.rsub_scalar(1.0)));
        pt.rsub_scalar(1.0).pow_scalar(2.0).mul(&pt.clamp_min(1e-12).ln().neg()).mean(None)
    });
    out
}
