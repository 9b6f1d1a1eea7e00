//! Scalar activations and their derivatives up to third order.
//!
//! Derivatives are obtained by evaluating each function on a truncated
//! Taylor series `x + t`, so every activation only needs to be written once
//! in terms of the series primitives below.

use serde::{Deserialize, Serialize};

/// Highest derivative order available from [`Activation::derivative`].
pub const MAX_ORDER: usize = 3;
const N: usize = MAX_ORDER + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Mish,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Square,
    Recip,
    Sqrt,
    Tan,
}

impl Activation {
    /// `order`-th derivative evaluated at `x` (order 0 is the function).
    pub fn derivative(self, order: usize, x: f64) -> f64 {
        assert!(order <= MAX_ORDER, "derivative order {order} unsupported");
        match self {
            Activation::Identity => match order {
                0 => x,
                1 => 1.0,
                _ => 0.0,
            },
            Activation::Square => match order {
                0 => x * x,
                1 => 2.0 * x,
                2 => 2.0,
                _ => 0.0,
            },
            _ => self.taylor(x)[order] * FACT[order],
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        self.derivative(0, x)
    }

    /// Taylor coefficients `f^{(k)}(x) / k!` for `k = 0..=3`.
    pub fn taylor(self, x: f64) -> [f64; N] {
        let s = Series::var(x);
        match self {
            Activation::Identity => s.0,
            Activation::Square => s.mul(&s).0,
            Activation::Mish => s.mul(&mish_gate(x)).0,
            Activation::Tanh => s.tanh().0,
            Activation::Sigmoid => s.sigmoid().0,
            Activation::Softplus => s.softplus().0,
            Activation::Exp => s.exp().0,
            Activation::Ln => s.ln().0,
            Activation::Recip => Series::constant(1.0).div(&s).0,
            Activation::Sqrt => s.ln().scale(0.5).exp().0,
            Activation::Tan => {
                let (sin, cos) = s.sin_cos();
                sin.div(&cos).0
            }
        }
    }
}

pub(crate) const FACT: [f64; N] = [1.0, 1.0, 2.0, 6.0];

/// Truncated power series in `t`.
#[derive(Clone, Copy, Debug)]
struct Series([f64; N]);

impl Series {
    fn var(x: f64) -> Self {
        let mut c = [0.0; N];
        c[0] = x;
        c[1] = 1.0;
        Series(c)
    }

    fn constant(x: f64) -> Self {
        let mut c = [0.0; N];
        c[0] = x;
        Series(c)
    }

    fn scale(&self, v: f64) -> Series {
        Series(self.0.map(|a| a * v))
    }

    fn mul(&self, o: &Series) -> Series {
        let mut c = [0.0; N];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = (0..=i).map(|k| self.0[k] * o.0[i - k]).sum();
        }
        Series(c)
    }

    fn div(&self, o: &Series) -> Series {
        let a = &o.0;
        let mut q = [0.0; N];
        for n in 0..N {
            let mut s = self.0[n];
            for k in 1..=n {
                s -= a[k] * q[n - k];
            }
            q[n] = s / a[0];
        }
        Series(q)
    }

    /// `f(self)` given `f` and its first three derivatives at `self.0[0]`.
    fn compose(&self, d: [f64; N]) -> Series {
        let [_, a1, a2, a3] = self.0;
        Series([
            d[0],
            d[1] * a1,
            d[1] * a2 + 0.5 * d[2] * a1 * a1,
            d[1] * a3 + d[2] * a1 * a2 + d[3] / 6.0 * a1 * a1 * a1,
        ])
    }

    fn exp(&self) -> Series {
        let e = self.0[0].exp();
        self.compose([e; N])
    }

    fn ln(&self) -> Series {
        let r = 1.0 / self.0[0];
        self.compose([self.0[0].ln(), r, -r * r, 2.0 * r * r * r])
    }

    fn sin_cos(&self) -> (Series, Series) {
        let (s, c) = self.0[0].sin_cos();
        (self.compose([s, c, -s, -c]), self.compose([c, -s, -c, s]))
    }

    fn sigmoid(&self) -> Series {
        let s = sigmoid(self.0[0]);
        let d1 = s * (1.0 - s);
        self.compose([s, d1, d1 * (1.0 - 2.0 * s), d1 * (1.0 - 6.0 * s + 6.0 * s * s)])
    }

    fn softplus(&self) -> Series {
        let x = self.0[0];
        let s = sigmoid(x);
        let d2 = s * (1.0 - s);
        let v = x.max(0.0) + (-x.abs()).exp().ln_1p();
        self.compose([v, s, d2, d2 * (1.0 - 2.0 * s)])
    }

    fn tanh(&self) -> Series {
        let t = self.0[0].tanh();
        let d1 = 1.0 - t * t;
        self.compose([t, d1, -2.0 * t * d1, -2.0 * d1 * (1.0 - 3.0 * t * t)])
    }
}

/// Series of `tanh(softplus(x + t))` from a single exponential, using
/// `tanh(softplus(x)) = n / (n + 2)` with `n = e^x (e^x + 2)`.
fn mish_gate(x: f64) -> Series {
    let (s, t) = if x >= 0.0 {
        let q = (-x).exp();
        let a = 1.0 + 2.0 * q;
        (1.0 / (1.0 + q), a / (a + 2.0 * q * q))
    } else {
        let e = x.exp();
        let n = e * (e + 2.0);
        (e / (1.0 + e), n / (n + 2.0))
    };
    let d2 = s * (1.0 - s);
    // The softplus value itself is never needed: `compose` only reads the
    // higher coefficients of its argument.
    let sp = Series::var(x).compose([0.0, s, d2, d2 * (1.0 - 2.0 * s)]);
    let d1 = 1.0 - t * t;
    sp.compose([t, d1, -2.0 * t * d1, -2.0 * d1 * (1.0 - 3.0 * t * t)])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softplus inverse, used to initialise softplus-parameterised scales.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
