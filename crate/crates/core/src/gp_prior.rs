//! Squared-exponential Gaussian-process prior for the latent field.
//!
//! Training samples paths through a truncated Karhunen–Loève expansion, whose
//! basis functions have closed-form derivatives. A second sampler draws
//! `(z, ∂z, ∂²z)` jointly from the derivative-augmented covariance and is
//! used to validate the first.
//!
//! The expansion represents `k(x, x') = exp(-|x - x'|² / L_c²)`, i.e. an SE
//! kernel with lengthscale `ℓ = L_c / √2` and unit signal variance.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::mat::{cholesky_jittered, Mat};
use crate::diffcore::SpatialJet;
use crate::error::{Error, Result};

/// Independent RNG stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Squared-exponential kernel `σ_K² exp(-|x - x'|² / 2ℓ²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeKernel {
    pub lengthscale: f64,
    pub variance: f64,
}

impl SeKernel {
    pub fn new(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) {
            return Err(Error::config(format!("lengthscale must be positive, got {lengthscale}")));
        }
        Ok(Self {
            lengthscale,
            variance: 1.0,
        })
    }

    /// Kernel whose KL expansion uses correlation length `lc`.
    pub fn from_correlation_length(lc: f64) -> Result<Self> {
        Self::new(lc / 2f64.sqrt())
    }

    pub fn correlation_length(&self) -> f64 {
        self.lengthscale * 2f64.sqrt()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.variance * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    /// `Cov(∂^a z(x), ∂^b z(x'))` in 1D: `(-1)^b k^{(a+b)}(x - x')`.
    pub fn deriv_cov_1d(&self, a: usize, b: usize, x: f64, y: f64) -> f64 {
        let n = a + b;
        let l = self.lengthscale;
        let u = (x - y) / l;
        // Probabilists' Hermite polynomials.
        let he = match n {
            0 => 1.0,
            1 => u,
            2 => u * u - 1.0,
            3 => u * u * u - 3.0 * u,
            4 => u.powi(4) - 6.0 * u * u + 3.0,
            _ => panic!("derivative order {n} unsupported"),
        };
        let kn = (-1.0f64).powi(n as i32) * l.powi(-(n as i32)) * he * self.eval(&[x], &[y]);
        if b % 2 == 1 {
            -kn
        } else {
            kn
        }
    }
}

/// One-dimensional truncated KL expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct KlExpansion {
    pub lc: f64,
    pub lp: f64,
    pub l: f64,
    /// `coef[0]` multiplies the constant term; `coef[j-1] = ζ_j` for `j ≥ 2`.
    pub coefs: Vec<f64>,
    /// Angular frequency `⌊j/2⌋π / L_p` per term.
    pub freqs: Vec<f64>,
    /// `true` for sine terms (even `j`), `false` for cosine terms.
    pub is_sin: Vec<bool>,
}

impl KlExpansion {
    /// `n_terms` basis functions for correlation length `lc` over an
    /// interval of length `domain_length`; `L_p = max(domain_length, 2 L_c)`.
    pub fn new(lc: f64, n_terms: usize, domain_length: f64) -> Result<Self> {
        if !(lc > 0.0) {
            return Err(Error::config(format!("correlation length must be positive, got {lc}")));
        }
        if n_terms == 0 {
            return Err(Error::config("KL expansion needs at least one term"));
        }
        let lp = domain_length.max(2.0 * lc);
        let l = lc / lp;
        let mut coefs = Vec::with_capacity(n_terms);
        let mut freqs = Vec::with_capacity(n_terms);
        let mut is_sin = Vec::with_capacity(n_terms);
        for j in 1..=n_terms {
            let k = (j / 2) as f64;
            if j == 1 {
                coefs.push((PI.sqrt() * l / 2.0).sqrt());
            } else {
                coefs.push((PI.sqrt() * l).sqrt() * (-(k * PI * l).powi(2) / 8.0).exp());
            }
            freqs.push(k * PI / lp);
            is_sin.push(j % 2 == 0);
        }
        Ok(Self {
            lc,
            lp,
            l,
            coefs,
            freqs,
            is_sin,
        })
    }

    pub fn len(&self) -> usize {
        self.coefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefs.is_empty()
    }

    /// `(φ_j, φ_j', φ_j'')` with `φ_j = coef_j q_j`.
    pub fn basis(&self, j: usize, x: f64) -> (f64, f64, f64) {
        let c = self.coefs[j];
        if j == 0 {
            return (c, 0.0, 0.0);
        }
        let w = self.freqs[j];
        let (s, co) = (w * x).sin_cos();
        if self.is_sin[j] {
            (c * s, c * w * co, -c * w * w * s)
        } else {
            (c * co, -c * w * s, -c * w * w * co)
        }
    }

    /// Truncated Mercer sum `Σ_j φ_j(x) φ_j(y)`.
    pub fn reconstruct(&self, x: f64, y: f64) -> f64 {
        (0..self.len())
            .map(|j| self.basis(j, x).0 * self.basis(j, y).0)
            .sum()
    }
}

/// Basis functions and their derivatives at a batch of points.
#[derive(Clone, Debug)]
pub struct BasisJet {
    /// `n x M`
    pub value: Mat,
    pub grad: Vec<Mat>,
    pub hess: Vec<Mat>,
}

/// KL prior over `d ∈ {1, 2}` input dimensions (tensor product in 2D) with
/// `latent_dim` independent components.
#[derive(Clone, Debug)]
pub struct KlPrior {
    pub dims: Vec<KlExpansion>,
    pub latent_dim: usize,
}

/// Standard normal coefficients of one prior path (`M x d_z`).
#[derive(Clone, Debug, PartialEq)]
pub struct GpDraw {
    pub omega: Mat,
}

impl KlPrior {
    pub fn new(lc: f64, terms_per_dim: usize, domain_lengths: &[f64], latent_dim: usize) -> Result<Self> {
        if domain_lengths.is_empty() || domain_lengths.len() > 2 {
            return Err(Error::config(format!(
                "KL prior supports 1 or 2 input dimensions, got {}",
                domain_lengths.len()
            )));
        }
        let dims = domain_lengths
            .iter()
            .map(|&len| KlExpansion::new(lc, terms_per_dim, len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, latent_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_terms(&self) -> usize {
        self.dims.iter().map(|d| d.len()).product()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> GpDraw {
        let m = self.num_terms();
        GpDraw {
            omega: Mat::from_fn(m, self.latent_dim, |_, _| rng.sample(StandardNormal)),
        }
    }

    /// Basis matrix (and derivatives when `derivs`) at the rows of `points`.
    pub fn basis(&self, points: &Mat, derivs: bool) -> BasisJet {
        let n = points.rows();
        let d = self.input_dim();
        assert_eq!(points.cols(), d);
        let m = self.num_terms();
        let mut value = Mat::zeros(n, m);
        let mut grad: Vec<Mat> = (0..if derivs { d } else { 0 }).map(|_| Mat::zeros(n, m)).collect();
        let mut hess = grad.clone();
        for i in 0..n {
            if d == 1 {
                let e = &self.dims[0];
                for j in 0..m {
                    let (v, g1, g2) = e.basis(j, points[(i, 0)]);
                    value[(i, j)] = v;
                    if derivs {
                        grad[0][(i, j)] = g1;
                        hess[0][(i, j)] = g2;
                    }
                }
            } else {
                let (e1, e2) = (&self.dims[0], &self.dims[1]);
                let b1: Vec<_> = (0..e1.len()).map(|j| e1.basis(j, points[(i, 0)])).collect();
                let b2: Vec<_> = (0..e2.len()).map(|k| e2.basis(k, points[(i, 1)])).collect();
                for (j, a) in b1.iter().enumerate() {
                    for (k, b) in b2.iter().enumerate() {
                        let col = j * e2.len() + k;
                        value[(i, col)] = a.0 * b.0;
                        if derivs {
                            grad[0][(i, col)] = a.1 * b.0;
                            grad[1][(i, col)] = a.0 * b.1;
                            hess[0][(i, col)] = a.2 * b.0;
                            hess[1][(i, col)] = a.0 * b.2;
                        }
                    }
                }
            }
        }
        BasisJet { value, grad, hess }
    }

    /// Jet of the sampled path at `x`, one entry per latent component.
    pub fn path_jet(&self, draw: &GpDraw, x: &[f64]) -> SpatialJet {
        let b = self.basis(&Mat::row_vector(x.to_vec()), true);
        let row = |m: &Mat| m.matmul(&draw.omega).as_slice().to_vec();
        SpatialJet {
            value: row(&b.value),
            grad: b.grad.iter().map(row).collect(),
            hess_diag: b.hess.iter().map(row).collect(),
        }
    }

    /// Truncated Mercer reconstruction of the (product) kernel.
    pub fn reconstruct(&self, x: &[f64], y: &[f64]) -> f64 {
        self.dims
            .iter()
            .enumerate()
            .map(|(k, e)| e.reconstruct(x[k], y[k]))
            .product()
    }

    /// The SE kernel this expansion represents.
    pub fn kernel(&self) -> SeKernel {
        SeKernel::from_correlation_length(self.dims[0].lc).expect("validated at construction")
    }
}

/// Joint covariance of `[z(X_u); z(X_f); ∂z(X_f); ∂²z(X_f)]` for a scalar 1D
/// SE process.
#[derive(Clone, Debug)]
pub struct JointDerivCov {
    pub cov: Mat,
    pub n_u: usize,
    pub n_f: usize,
    chol: Mat,
    pub jitter: f64,
}

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

impl JointDerivCov {
    pub fn new(kernel: &SeKernel, xu: &[f64], xf: &[f64]) -> Result<Self> {
        // (point, derivative order) for every row of the stacked vector.
        let mut rows: Vec<(f64, usize)> = xu.iter().map(|&x| (x, 0)).collect();
        for order in 0..3 {
            rows.extend(xf.iter().map(|&x| (x, order)));
        }
        let n = rows.len();
        let cov = Mat::from_fn(n, n, |i, j| {
            let (x, a) = rows[i];
            let (y, b) = rows[j];
            kernel.deriv_cov_1d(a, b, x, y)
        });
        let (chol, jitter) = cholesky_jittered(&cov, JITTER_START, JITTER_MAX).ok_or_else(|| {
            Error::Numeric("joint derivative covariance is not positive definite".into())
        })?;
        Ok(Self {
            cov,
            n_u: xu.len(),
            n_f: xf.len(),
            chol,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.rows()
    }

    /// One stacked sample `L ξ`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.dim();
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        (0..n)
            .map(|i| (0..=i).map(|k| self.chol[(i, k)] * xi[k]).sum())
            .collect()
    }
}

/// Summary used by the `gp-validate` command.
#[derive(Clone, Debug)]
pub struct GpValidation {
    /// `(x, x', exact, reconstructed, empirical)`
    pub kernel_rows: Vec<(f64, f64, f64, f64, f64)>,
    /// `(quantity, exact, KL empirical, joint empirical)`
    pub variance_rows: Vec<(String, f64, f64, f64)>,
}

/// Compares the KL sampler and the joint sampler against the exact kernel
/// on `[-1, 1]`.
pub fn validate(lengthscale: f64, samples: usize, terms: usize, seed: u64) -> Result<GpValidation> {
    let kernel = SeKernel::new(lengthscale)?;
    let prior = KlPrior::new(kernel.correlation_length(), terms, &[2.0], 1)?;
    let grid: Vec<f64> = (0..9).map(|i| -1.0 + 0.25 * i as f64).collect();
    let pts = Mat::col_vector(grid.clone());
    let probe = 0.1;
    let basis = prior.basis(&pts, false);
    let probe_b = prior.basis(&Mat::row_vector(vec![probe]), true);

    let mut rng = stream_rng(seed, 0);
    let n = grid.len();
    let mut second = Mat::zeros(n, n);
    let mut mom = [0.0f64; 3];
    for _ in 0..samples {
        let draw = prior.sample(&mut rng);
        let vals = basis.value.matmul(&draw.omega);
        for i in 0..n {
            for j in 0..n {
                second[(i, j)] += vals[(i, 0)] * vals[(j, 0)];
            }
        }
        let v = probe_b.value.matmul(&draw.omega).item();
        let d1 = probe_b.grad[0].matmul(&draw.omega).item();
        let d2 = probe_b.hess[0].matmul(&draw.omega).item();
        mom[0] += v * v;
        mom[1] += d1 * d1;
        mom[2] += d2 * d2;
    }
    let s = samples as f64;
    let mut kernel_rows = Vec::new();
    for i in 0..n {
        for j in i..n {
            kernel_rows.push((
                grid[i],
                grid[j],
                kernel.eval(&[grid[i]], &[grid[j]]),
                prior.reconstruct(&[grid[i]], &[grid[j]]),
                second[(i, j)] / s,
            ));
        }
    }

    let joint = JointDerivCov::new(&kernel, &[], &[probe])?;
    let mut rng = stream_rng(seed, 1);
    let mut jm = [0.0f64; 3];
    for _ in 0..samples {
        let z = joint.sample(&mut rng);
        for k in 0..3 {
            jm[k] += z[k] * z[k];
        }
    }
    let names = ["value", "d1", "d2"];
    let variance_rows = (0..3)
        .map(|k| {
            (
                names[k].to_string(),
                kernel.deriv_cov_1d(k, k, probe, probe),
                mom[k] / s,
                jm[k] / s,
            )
        })
        .collect();
    Ok(GpValidation {
        kernel_rows,
        variance_rows,
    })
}

impl GpValidation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,a,b,exact,reconstructed_or_kl,empirical_or_joint\n");
        for (x, y, e, r, m) in &self.kernel_rows {
            out.push_str(&format!("kernel,{x},{y},{e},{r},{m}\n"));
        }
        for (name, e, kl, j) in &self.variance_rows {
            out.push_str(&format!("variance,{name},,{e},{kl},{j}\n"));
        }
        out
    }
}
