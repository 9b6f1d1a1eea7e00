//! Spatial jets: a field's value together with its first and pure second
//! derivatives with respect to each input coordinate.
//!
//! [`FieldJet`] carries the jet of a batch of points on a [`Graph`] (so
//! parameter gradients flow through every component); [`SpatialJet`] is the
//! plain single-point result handed back to callers.

use super::activation::Activation;
use super::graph::{Graph, Var};
use super::mat::Mat;

/// Jet of an `n x c` field at `n` points. `grad[k]` and `hess[k]` are
/// `∂/∂x_k` and `∂²/∂x_k²`; `hess[k] == None` means identically zero.
/// Value-only jets have empty `grad`/`hess`.
#[derive(Clone, Debug)]
pub struct FieldJet {
    pub value: Var,
    pub grad: Vec<Var>,
    pub hess: Vec<Option<Var>>,
}

impl FieldJet {
    pub fn values_only(value: Var) -> Self {
        Self {
            value,
            grad: Vec::new(),
            hess: Vec::new(),
        }
    }

    pub fn has_derivatives(&self) -> bool {
        !self.grad.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    /// Jet of the coordinate map `x ↦ x` at the rows of `points` (`n x d`).
    pub fn coordinates(g: &mut Graph, points: &Mat) -> Self {
        let (n, d) = points.shape();
        let value = g.constant(points.clone());
        let grad = (0..d)
            .map(|k| g.constant(Mat::from_fn(n, d, |_, j| if j == k { 1.0 } else { 0.0 })))
            .collect();
        Self {
            value,
            grad,
            hess: vec![None; d],
        }
    }

    /// Same jet without derivative components.
    pub fn drop_derivatives(&self) -> Self {
        Self::values_only(self.value)
    }

    /// Laplacian `Σ_k ∂²/∂x_k²`; requires derivatives.
    pub fn laplacian(&self, g: &mut Graph) -> Var {
        assert!(self.has_derivatives(), "laplacian of a value-only jet");
        let mut acc: Option<Var> = None;
        for h in self.hess.iter() {
            let h = match h {
                Some(h) => *h,
                None => {
                    let (r, c) = g.shape(self.value);
                    g.constant(Mat::zeros(r, c))
                }
            };
            acc = Some(match acc {
                None => h,
                Some(a) => g.add(a, h),
            });
        }
        acc.expect("at least one coordinate")
    }

    /// Column slice of every component.
    pub fn slice_cols(&self, g: &mut Graph, start: usize, len: usize) -> Self {
        Self {
            value: g.slice_cols(self.value, start, len),
            grad: self.grad.iter().map(|&v| g.slice_cols(v, start, len)).collect(),
            hess: self
                .hess
                .iter()
                .map(|h| h.map(|v| g.slice_cols(v, start, len)))
                .collect(),
        }
    }

    /// Reads row `i` into a plain [`SpatialJet`].
    pub fn to_spatial(&self, g: &Graph, i: usize) -> SpatialJet {
        let value = g.value(self.value).row(i).to_vec();
        let c = value.len();
        SpatialJet {
            grad: self.grad.iter().map(|&v| g.value(v).row(i).to_vec()).collect(),
            hess_diag: self
                .hess
                .iter()
                .map(|h| match h {
                    Some(v) => g.value(*v).row(i).to_vec(),
                    None => vec![0.0; c],
                })
                .collect(),
            value,
        }
    }
}

/// Value, gradient and pure second derivatives of a vector field at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialJet {
    pub value: Vec<f64>,
    /// `grad[k][c] = ∂ value[c] / ∂x_k`
    pub grad: Vec<Vec<f64>>,
    /// `hess_diag[k][c] = ∂² value[c] / ∂x_k²`
    pub hess_diag: Vec<Vec<f64>>,
}

impl SpatialJet {
    pub fn dim(&self) -> usize {
        self.grad.len()
    }
}

fn add_opt(g: &mut Graph, a: Option<Var>, b: Option<Var>) -> Option<Var> {
    match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (x, None) | (None, x) => x,
    }
}

/// `j · W` on every component (W is `c_in x c_out`).
pub fn matmul(g: &mut Graph, j: &FieldJet, w: Var) -> FieldJet {
    FieldJet {
        value: g.matmul(j.value, w),
        grad: j.grad.iter().map(|&v| g.matmul(v, w)).collect(),
        hess: j.hess.iter().map(|h| h.map(|v| g.matmul(v, w))).collect(),
    }
}

/// `j · W + b` with `b` a `1 x c_out` row.
pub fn affine(g: &mut Graph, j: &FieldJet, w: Var, b: Var) -> FieldJet {
    let mut out = matmul(g, j, w);
    out.value = g.add(out.value, b);
    out
}

/// Adds a term that is constant in x (derivatives unchanged).
pub fn add_value(g: &mut Graph, j: &FieldJet, v: Var) -> FieldJet {
    FieldJet {
        value: g.add(j.value, v),
        grad: j.grad.clone(),
        hess: j.hess.clone(),
    }
}

pub fn add(g: &mut Graph, a: &FieldJet, b: &FieldJet) -> FieldJet {
    assert_eq!(a.dim(), b.dim());
    FieldJet {
        value: g.add(a.value, b.value),
        grad: a.grad.iter().zip(&b.grad).map(|(&x, &y)| g.add(x, y)).collect(),
        hess: a
            .hess
            .iter()
            .zip(&b.hess)
            .map(|(&x, &y)| add_opt(g, x, y))
            .collect(),
    }
}

pub fn scale(g: &mut Graph, a: &FieldJet, c: f64) -> FieldJet {
    FieldJet {
        value: g.scale(a.value, c),
        grad: a.grad.iter().map(|&v| g.scale(v, c)).collect(),
        hess: a.hess.iter().map(|h| h.map(|v| g.scale(v, c))).collect(),
    }
}

/// `1 - a`.
pub fn one_minus(g: &mut Graph, a: &FieldJet) -> FieldJet {
    let neg = scale(g, a, -1.0);
    FieldJet {
        value: g.add_scalar(neg.value, 1.0),
        ..neg
    }
}

/// Elementwise product by the Leibniz rule:
/// `(ab)'' = a''b + 2a'b' + ab''`.
pub fn mul(g: &mut Graph, a: &FieldJet, b: &FieldJet) -> FieldJet {
    let value = g.mul(a.value, b.value);
    if !a.has_derivatives() || !b.has_derivatives() {
        assert!(!a.has_derivatives() && !b.has_derivatives(), "mixed jet kinds");
        return FieldJet::values_only(value);
    }
    let mut grad = Vec::with_capacity(a.dim());
    let mut hess = Vec::with_capacity(a.dim());
    for k in 0..a.dim() {
        let t1 = g.mul(a.grad[k], b.value);
        let t2 = g.mul(a.value, b.grad[k]);
        grad.push(g.add(t1, t2));
        let cross = g.mul(a.grad[k], b.grad[k]);
        let mut h = g.scale(cross, 2.0);
        if let Some(ah) = a.hess[k] {
            let t = g.mul(ah, b.value);
            h = g.add(h, t);
        }
        if let Some(bh) = b.hess[k] {
            let t = g.mul(a.value, bh);
            h = g.add(h, t);
        }
        hess.push(Some(h));
    }
    FieldJet { value, grad, hess }
}

/// Chain rule through an elementwise activation:
/// `σ(u)' = σ'(u) u'`, `σ(u)'' = σ''(u) u'² + σ'(u) u''`.
pub fn activate(g: &mut Graph, a: &FieldJet, act: Activation) -> FieldJet {
    if act == Activation::Identity {
        return a.clone();
    }
    if !a.has_derivatives() {
        return FieldJet::values_only(g.act(a.value, act));
    }
    let d = g.unary_orders(a.value, act, 2);
    let (value, s1, s2) = (d[0], d[1], d[2]);
    let mut grad = Vec::with_capacity(a.dim());
    let mut hess = Vec::with_capacity(a.dim());
    for k in 0..a.dim() {
        let gk = a.grad[k];
        grad.push(g.mul(s1, gk));
        let gsq = g.square(gk);
        let mut h = g.mul(s2, gsq);
        if let Some(hk) = a.hess[k] {
            let t = g.mul(s1, hk);
            h = g.add(h, t);
        }
        hess.push(Some(h));
    }
    FieldJet { value, grad, hess }
}
