//! Benchmark PDEs, exact fields, sensor layouts and noisy data generation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;
use crate::error::{Error, Result};
use crate::gp_prior::stream_rng;
use crate::operator_decoder::tensor_grid;

pub const PROBLEM_NAMES: [&str; 6] = [
    "poisson1d",
    "porous1d",
    "nlpoisson1d_inverse",
    "nlpoisson1d_extrap",
    "diffreact2d_inverse",
    "source6d_inverse",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Poisson1d,
    Porous1d,
    NlPoisson1d,
    DiffReact2d,
    Source2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Forward,
    Inverse,
    Extrapolation,
}

/// Observation noise standard deviations for one experiment case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCase {
    pub label: String,
    pub u: f64,
    pub f: f64,
    pub b: f64,
}

impl NoiseCase {
    fn uniform(label: &str, s: f64) -> Self {
        Self {
            label: label.to_string(),
            u: s,
            f: s,
            b: s,
        }
    }

    pub fn noiseless() -> Self {
        Self::uniform("0", 0.0)
    }
}

// Porous-medium constants.
const NU_E: f64 = 1e-3;
const NU: f64 = 1e-3;
const PHI: f64 = 0.4;
const PERM: f64 = 1e-3;
const G_FORCE: f64 = 1.0;

// Source-inversion constants.
pub const SOURCE_WEIGHTS: [f64; 3] = [2.0, -3.0, 0.5];
pub const SOURCE_WIDTH: f64 = 0.15;
pub const SOURCE_DIFFUSION: f64 = 0.02;
pub const SOURCE_CENTERS: [f64; 6] = [0.3, 0.3, 0.75, 0.75, 0.2, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub kind: ProblemKind,
    pub mode: Mode,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Known operator coefficient (`λ` of the linear Poisson problem, the
    /// diffusion `k`, or `ν_e/φ` for the porous medium).
    pub coefficient: f64,
    /// Ground truth of the inferred quantities (empty in forward mode).
    pub unknown_true: Vec<f64>,
    pub unknown_names: Vec<String>,
    pub noise_cases: Vec<NoiseCase>,
}

pub fn make_problem(name: &str) -> Result<ProblemSpec> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let two = || vec![NoiseCase::uniform("0.01", 0.01), NoiseCase::uniform("0.1", 0.1)];
    let spec = match name {
        "poisson1d" => ProblemSpec {
            name: name.into(),
            kind: ProblemKind::Poisson1d,
            mode: Mode::Forward,
            lower: vec![-0.7],
            upper: vec![0.7],
            coefficient: 0.01,
            unknown_true: vec![],
            unknown_names: vec![],
            noise_cases: two(),
        },
        "porous1d" => ProblemSpec {
            name: name.into(),
            kind: ProblemKind::Porous1d,
            mode: Mode::Forward,
            lower: vec![0.0],
            upper: vec![1.0],
            coefficient: NU_E / PHI,
            unknown_true: vec![],
            unknown_names: vec![],
            noise_cases: two(),
        },
        "nlpoisson1d_inverse" => ProblemSpec {
            name: name.into(),
            kind: ProblemKind::NlPoisson1d,
            mode: Mode::Inverse,
            lower: vec![-0.7],
            upper: vec![0.7],
            coefficient: 0.01,
            unknown_true: vec![0.7],
            unknown_names: s(&["lambda"]),
            noise_cases: two(),
        },
        "nlpoisson1d_extrap" => ProblemSpec {
            name: name.into(),
            kind: ProblemKind::NlPoisson1d,
            mode: Mode::Extrapolation,
            lower: vec![-0.7],
            upper: vec![0.7],
            coefficient: 0.01,
            unknown_true: vec![0.7],
            unknown_names: s(&["lambda"]),
            noise_cases: vec![NoiseCase::uniform("0.01", 0.01)],
        },
        "diffreact2d_inverse" => ProblemSpec {
            name: name.into(),
            kind: ProblemKind::DiffReact2d,
            mode: Mode::Inverse,
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
            coefficient: 0.01,
            unknown_true: vec![1.0],
            unknown_names: s(&["lambda"]),
            noise_cases: two(),
        },
        "source6d_inverse" => ProblemSpec {
            name: name.into(),
            kind: ProblemKind::Source2d,
            mode: Mode::Inverse,
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
            coefficient: SOURCE_DIFFUSION,
            unknown_true: SOURCE_CENTERS.to_vec(),
            unknown_names: s(&["xc1_1", "xc1_2", "xc2_1", "xc2_2", "xc3_1", "xc3_2"]),
            noise_cases: vec![NoiseCase {
                label: "default".into(),
                u: 0.1,
                f: 0.01,
                b: 0.01,
            }],
        },
        other => return Err(Error::UnknownProblem(other.to_string())),
    };
    Ok(spec)
}

/// `Σ_i k_i exp(-½|x - c_i|² / s²)` for centres `c` (flattened pairs).
pub fn source_term(x: &[f64], centers: &[f64]) -> f64 {
    SOURCE_WEIGHTS
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let d2 = (x[0] - centers[2 * i]).powi(2) + (x[1] - centers[2 * i + 1]).powi(2);
            k * (-0.5 * d2 / (SOURCE_WIDTH * SOURCE_WIDTH)).exp()
        })
        .sum()
}

fn porous_r() -> f64 {
    (NU * PHI / (NU_E * PERM)).sqrt()
}

/// Value, gradient and pure second derivatives of a scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactJet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_inverse(&self) -> bool {
        self.mode != Mode::Forward
    }

    pub fn num_unknowns(&self) -> usize {
        self.unknown_true.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn domain_lengths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn noise_case(&self, label: &str) -> Result<NoiseCase> {
        self.noise_cases
            .iter()
            .find(|c| c.label == label)
            .cloned()
            .ok_or_else(|| {
                let known: Vec<&str> = self.noise_cases.iter().map(|c| c.label.as_str()).collect();
                Error::config(format!(
                    "problem {} has no noise case `{label}` (known: {})",
                    self.name,
                    known.join(", ")
                ))
            })
    }

    /// Analytic jet of the exact solution (`None` for the source problem,
    /// whose solution is only available on the reference grid).
    pub fn exact_u_jet(&self, x: &[f64]) -> Option<ExactJet> {
        match self.kind {
            ProblemKind::Poisson1d | ProblemKind::NlPoisson1d => {
                let (s, c) = (6.0 * x[0]).sin_cos();
                Some(ExactJet {
                    value: s * s * s,
                    grad: vec![18.0 * s * s * c],
                    hess: vec![216.0 * s * c * c - 108.0 * s * s * s],
                })
            }
            ProblemKind::Porous1d => {
                let r = porous_r();
                let a = G_FORCE * PERM / NU;
                let den = (r / 2.0).cosh();
                let t = r * (x[0] - 0.5);
                Some(ExactJet {
                    value: a * (1.0 - t.cosh() / den),
                    grad: vec![-a * r * t.sinh() / den],
                    hess: vec![-a * r * r * t.cosh() / den],
                })
            }
            ProblemKind::DiffReact2d => {
                let (s1, c1) = (PI * x[0]).sin_cos();
                let (s2, c2) = (PI * x[1]).sin_cos();
                let u = s1 * s2;
                Some(ExactJet {
                    value: u,
                    grad: vec![PI * c1 * s2, PI * s1 * c2],
                    hess: vec![-PI * PI * u, -PI * PI * u],
                })
            }
            ProblemKind::Source2d => None,
        }
    }

    pub fn exact_u(&self, x: &[f64]) -> f64 {
        match self.exact_u_jet(x) {
            Some(j) => j.value,
            None => reference_u_source6d().interpolate(x),
        }
    }

    /// Exact forcing in closed form.
    pub fn exact_f(&self, x: &[f64]) -> f64 {
        match self.kind {
            // sin³θ = (3 sin θ - sin 3θ) / 4
            ProblemKind::Poisson1d => self.coefficient * (-27.0 * (6.0 * x[0]).sin() + 81.0 * (18.0 * x[0]).sin()),
            ProblemKind::Porous1d => G_FORCE,
            ProblemKind::NlPoisson1d => {
                let u = (6.0 * x[0]).sin().powi(3);
                self.coefficient * (-27.0 * (6.0 * x[0]).sin() + 81.0 * (18.0 * x[0]).sin())
                    + self.unknown_true[0] * u.tanh()
            }
            ProblemKind::DiffReact2d => {
                let u = (PI * x[0]).sin() * (PI * x[1]).sin();
                -2.0 * PI * PI * self.coefficient * u + self.unknown_true[0] * u * u
            }
            ProblemKind::Source2d => 0.1 * (PI * x[0]).sin() * (PI * x[1]).sin(),
        }
    }

    /// Differential operator applied to a jet, with the inferred quantities
    /// `unknowns` (ignored in forward mode).
    pub fn apply_operator(&self, x: &[f64], u: &ExactJet, unknowns: &[f64]) -> f64 {
        let lap: f64 = u.hess.iter().sum();
        match self.kind {
            ProblemKind::Poisson1d => self.coefficient * lap,
            ProblemKind::Porous1d => -self.coefficient * lap + (NU / PERM) * u.value,
            ProblemKind::NlPoisson1d => self.coefficient * lap + unknowns[0] * u.value.tanh(),
            ProblemKind::DiffReact2d => self.coefficient * lap + unknowns[0] * u.value * u.value,
            ProblemKind::Source2d => -self.coefficient * lap - source_term(x, unknowns),
        }
    }

    /// Reaction coefficient of the porous operator `-a u'' + c u`.
    pub fn linear_reaction(&self) -> f64 {
        match self.kind {
            ProblemKind::Porous1d => NU / PERM,
            _ => 0.0,
        }
    }

    /// Sensor locations per field. Random layouts draw from `rng`.
    pub fn sensor_layout(&self, rng: &mut impl Rng) -> SensorLayout {
        let lin = |a: f64, b: f64, n: usize| Mat::col_vector((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect());
        let ends = |a: f64, b: f64| Mat::col_vector(vec![a, b]);
        let empty = || Mat::zeros(0, self.dim());
        match (self.kind, self.mode) {
            (ProblemKind::Poisson1d, _) => SensorLayout {
                u: empty(),
                f: lin(-0.7, 0.7, 32),
                b: ends(-0.7, 0.7),
            },
            (ProblemKind::Porous1d, _) => SensorLayout {
                u: empty(),
                f: lin(0.0, 1.0, 16),
                b: ends(0.0, 1.0),
            },
            (ProblemKind::NlPoisson1d, Mode::Extrapolation) => SensorLayout {
                u: lin(-0.7, 0.0, 4),
                f: lin(-0.7, 0.7, 40),
                b: empty(),
            },
            (ProblemKind::NlPoisson1d, _) => {
                let all = lin(-0.7, 0.7, 8);
                SensorLayout {
                    u: all.slice_rows(1, 6),
                    f: lin(-0.7, 0.7, 32),
                    b: ends(-0.7, 0.7),
                }
            }
            (ProblemKind::DiffReact2d, _) => SensorLayout {
                u: interior_grid(&self.lower, &self.upper, 10),
                f: interior_grid(&self.lower, &self.upper, 22),
                b: boundary_points(&self.lower, &self.upper, 25),
            },
            (ProblemKind::Source2d, _) => {
                let mut uniform = |n: usize| {
                    Mat::from_fn(n, 2, |_, k| {
                        let t: f64 = rng.random_range(0.0..1.0);
                        self.lower[k] + t * (self.upper[k] - self.lower[k])
                    })
                };
                let u = uniform(1000);
                let f = uniform(200);
                SensorLayout {
                    u,
                    f,
                    b: boundary_points(&self.lower, &self.upper, 25),
                }
            }
        }
    }
}

/// `n x n` grid strictly inside the box (endpoints of an `n + 2` grid
/// dropped).
pub fn interior_grid(lower: &[f64], upper: &[f64], n: usize) -> Mat {
    let full = tensor_grid(lower, upper, &[n + 2, n + 2]);
    let idx: Vec<usize> = (0..full.rows())
        .filter(|&r| {
            let (i, j) = (r / (n + 2), r % (n + 2));
            i > 0 && i <= n && j > 0 && j <= n
        })
        .collect();
    full.select_rows(&idx)
}

/// `per_edge` equispaced points on each edge of a 2D box, corners included
/// on every edge they belong to.
pub fn boundary_points(lower: &[f64], upper: &[f64], per_edge: usize) -> Mat {
    let t = |i: usize| i as f64 / (per_edge - 1) as f64;
    let mut rows = Vec::with_capacity(4 * per_edge * 2);
    for i in 0..per_edge {
        let a = lower[0] + t(i) * (upper[0] - lower[0]);
        let b = lower[1] + t(i) * (upper[1] - lower[1]);
        rows.extend_from_slice(&[a, lower[1]]);
        rows.extend_from_slice(&[a, upper[1]]);
        rows.extend_from_slice(&[lower[0], b]);
        rows.extend_from_slice(&[upper[0], b]);
    }
    Mat::from_vec(4 * per_edge, 2, rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorLayout {
    pub u: Mat,
    pub f: Mat,
    pub b: Mat,
}

/// Noisy observations of one field.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSet {
    pub points: Mat,
    pub values: Vec<f64>,
    /// The noise realisation added to the exact values.
    pub noise: Vec<f64>,
}

impl SensorSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn empty(dim: usize) -> Self {
        Self {
            points: Mat::zeros(0, dim),
            values: vec![],
            noise: vec![],
        }
    }

    /// The first `n` entries.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            points: self.points.slice_rows(0, n),
            values: self.values[..n].to_vec(),
            noise: self.noise[..n].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorDataset {
    pub problem: String,
    pub seed: u64,
    pub noise: NoiseCase,
    pub u: SensorSet,
    pub f: SensorSet,
    pub b: SensorSet,
    /// Direct observations of the inferred quantity (none in the benchmarks).
    pub lambda: SensorSet,
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_NOISE: u64 = 2;

pub fn generate_dataset(spec: &ProblemSpec, seed: u64, noise: &NoiseCase) -> SensorDataset {
    let mut lrng = stream_rng(seed, STREAM_LAYOUT);
    let layout = spec.sensor_layout(&mut lrng);
    let mut nrng = stream_rng(seed, STREAM_NOISE);
    let mut make = |points: Mat, sigma: f64, exact: &dyn Fn(&[f64]) -> f64| {
        let mut values = Vec::with_capacity(points.rows());
        let mut eps = Vec::with_capacity(points.rows());
        for i in 0..points.rows() {
            let z: f64 = nrng.sample(StandardNormal);
            let e = sigma * z;
            values.push(exact(points.row(i)) + e);
            eps.push(e);
        }
        SensorSet {
            points,
            values,
            noise: eps,
        }
    };
    let u = make(layout.u, noise.u, &|x| spec.exact_u(x));
    let f = make(layout.f, noise.f, &|x| spec.exact_f(x));
    let b = make(layout.b, noise.b, &|x| spec.exact_u(x));
    SensorDataset {
        problem: spec.name.clone(),
        seed,
        noise: noise.clone(),
        u,
        f,
        b,
        lambda: SensorSet::empty(spec.dim()),
    }
}

impl SensorDataset {
    pub fn dim(&self) -> usize {
        self.f.points.cols()
    }

    /// `field,x0[,x1],value` rows.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut s = String::from("field");
        for k in 0..d {
            let _ = write!(s, ",x{k}");
        }
        s.push_str(",value\n");
        for (name, set) in [("u", &self.u), ("f", &self.f), ("b", &self.b), ("lambda", &self.lambda)] {
            for i in 0..set.len() {
                s.push_str(name);
                for v in set.points.row(i) {
                    let _ = write!(s, ",{v:e}");
                }
                let _ = writeln!(s, ",{:e}", set.values[i]);
            }
        }
        s
    }

    /// Inverse of [`to_csv`](Self::to_csv); noise realisations are not part
    /// of the format and come back as zeros.
    pub fn from_csv(text: &str, problem: &str, seed: u64, noise: NoiseCase) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty dataset file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "field" || *cols.last().unwrap() != "value" {
            return Err(Error::Data(format!("unexpected dataset header `{header}`")));
        }
        let d = cols.len() - 2;
        let mut sets: [(Vec<f64>, Vec<f64>); 4] = Default::default();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != d + 2 {
                return Err(Error::Data(format!("line {}: expected {} columns", ln + 2, d + 2)));
            }
            let which = match parts[0] {
                "u" => 0,
                "f" => 1,
                "b" => 2,
                "lambda" => 3,
                other => return Err(Error::Data(format!("line {}: unknown field `{other}`", ln + 2))),
            };
            for p in &parts[1..] {
                let v: f64 = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("line {}: bad number `{p}`", ln + 2)))?;
                sets[which].0.push(v);
            }
            let v = sets[which].0.pop().unwrap();
            sets[which].1.push(v);
        }
        let mk = |(pts, vals): (Vec<f64>, Vec<f64>)| {
            let n = vals.len();
            SensorSet {
                points: Mat::from_vec(n, d, pts),
                noise: vec![0.0; n],
                values: vals,
            }
        };
        let [u, f, b, l] = sets;
        Ok(Self {
            problem: problem.to_string(),
            seed,
            noise,
            u: mk(u),
            f: mk(f),
            b: mk(b),
            lambda: mk(l),
        })
    }
}

/// Nodal values on a uniform square grid over `[0, 1]²`.
#[derive(Clone, Debug)]
pub struct GridField {
    pub n: usize,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Bilinear interpolation; `x` is clamped into the unit square.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let h = 1.0 / (self.n - 1) as f64;
        let cell = |v: f64| {
            let t = (v.clamp(0.0, 1.0) / h).min((self.n - 1) as f64);
            let i = (t.floor() as usize).min(self.n - 2);
            (i, t - i as f64)
        };
        let (i, a) = cell(x[0]);
        let (j, b) = cell(x[1]);
        (1.0 - a) * (1.0 - b) * self.at(i, j)
            + a * (1.0 - b) * self.at(i + 1, j)
            + (1.0 - a) * b * self.at(i, j + 1)
            + a * b * self.at(i + 1, j + 1)
    }
}

/// Solves `-coef Δu = rhs` on `[0, 1]²` with zero Dirichlet data by
/// conjugate gradients on the 5-point stencil.
pub fn solve_poisson_dirichlet(n: usize, coef: f64, rhs: impl Fn(f64, f64) -> f64) -> Result<GridField> {
    if n < 3 {
        return Err(Error::config("finite-difference grid needs at least 3 points per side"));
    }
    let m = n - 2;
    let h = 1.0 / (n - 1) as f64;
    let scale = coef / (h * h);
    let apply = |v: &[f64], out: &mut [f64]| {
        for i in 0..m {
            for j in 0..m {
                let c = v[i * m + j];
                let mut s = 4.0 * c;
                if i > 0 {
                    s -= v[(i - 1) * m + j];
                }
                if i + 1 < m {
                    s -= v[(i + 1) * m + j];
                }
                if j > 0 {
                    s -= v[i * m + j - 1];
                }
                if j + 1 < m {
                    s -= v[i * m + j + 1];
                }
                out[i * m + j] = scale * s;
            }
        }
    };
    let b: Vec<f64> = (0..m * m)
        .map(|k| rhs((k / m + 1) as f64 * h, (k % m + 1) as f64 * h))
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; m * m];
    if bnorm > 0.0 {
        let mut r = b.clone();
        let mut p = r.clone();
        let mut ap = vec![0.0; m * m];
        let mut rr = dot(&r, &r);
        let mut converged = false;
        for _ in 0..20 * m * m {
            apply(&p, &mut ap);
            let alpha = rr / dot(&p, &ap);
            for k in 0..m * m {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() <= 1e-12 * bnorm {
                converged = true;
                break;
            }
            let beta = rr_new / rr;
            for k in 0..m * m {
                p[k] = r[k] + beta * p[k];
            }
            rr = rr_new;
        }
        if !converged {
            return Err(Error::Numeric("conjugate gradients did not converge".into()));
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..m {
        for j in 0..m {
            values[(i + 1) * n + j + 1] = x[i * m + j];
        }
    }
    Ok(GridField { n, values })
}

pub const REFERENCE_GRID: usize = 101;

/// Reference concentration for the source problem on a 101² grid (cached).
pub fn reference_u_source6d() -> &'static GridField {
    static CELL: OnceLock<GridField> = OnceLock::new();
    CELL.get_or_init(|| reference_source_solution(REFERENCE_GRID).expect("reference solve converges"))
}

pub fn reference_source_solution(n: usize) -> Result<GridField> {
    solve_poisson_dirichlet(n, SOURCE_DIFFUSION, |x, y| {
        0.1 * (PI * x).sin() * (PI * y).sin() + source_term(&[x, y], &SOURCE_CENTERS)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_every_problem() {
        for name in PROBLEM_NAMES {
            assert_eq!(make_problem(name).unwrap().name, name);
        }
        assert!(matches!(make_problem("heat3d"), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn analytic_problems_satisfy_their_pde() {
        for name in PROBLEM_NAMES {
            let spec = make_problem(name).unwrap();
            if spec.kind == ProblemKind::Source2d {
                continue;
            }
            let pts = if spec.dim() == 1 {
                tensor_grid(&spec.lower, &spec.upper, &[201])
            } else {
                tensor_grid(&spec.lower, &spec.upper, &[41, 41])
            };
            for i in 0..pts.rows() {
                let x = pts.row(i);
                let jet = spec.exact_u_jet(x).unwrap();
                let lhs = spec.apply_operator(x, &jet, &spec.unknown_true);
                assert!((lhs - spec.exact_f(x)).abs() < 1e-8, "{name} at {x:?}");
            }
        }
    }

    #[test]
    fn exact_solution_landmarks() {
        let p = make_problem("poisson1d").unwrap();
        assert_eq!(p.exact_f(&[0.0]), 0.0);
        let q = make_problem("porous1d").unwrap();
        assert_eq!(q.exact_u(&[0.0]), 0.0);
        assert_eq!(q.exact_u(&[1.0]), 0.0);
        assert!((porous_r() - 20.0).abs() < 1e-12);
        let x = [0.3, 0.3];
        let cross: f64 = [(0.75, 0.75, -3.0), (0.2, 0.7, 0.5)]
            .iter()
            .map(|(a, b, k)| k * (-0.5 * ((0.3 - a) * (0.3f64 - a) + (0.3 - b) * (0.3f64 - b)) / 0.0225).exp())
            .sum();
        assert!((source_term(&x, &SOURCE_CENTERS) - (2.0 + cross)).abs() < 1e-14);
    }

    #[test]
    fn sensor_counts_and_placement() {
        let mut rng = stream_rng(0, 0);
        let p = make_problem("poisson1d").unwrap().sensor_layout(&mut rng);
        assert_eq!((p.u.rows(), p.f.rows(), p.b.rows()), (0, 32, 2));
        assert_eq!(p.f[(0, 0)], -0.7);
        assert!((p.f[(31, 0)] - 0.7).abs() < 1e-15);
        assert!((p.f[(1, 0)] - p.f[(0, 0)] - 1.4 / 31.0).abs() < 1e-15);
        let mut c = |n: &str| {
            let l = make_problem(n).unwrap().sensor_layout(&mut rng);
            (l.u.rows(), l.f.rows(), l.b.rows())
        };
        assert_eq!(c("porous1d"), (0, 16, 2));
        assert_eq!(c("nlpoisson1d_inverse"), (6, 32, 2));
        assert_eq!(c("nlpoisson1d_extrap"), (4, 40, 0));
        assert_eq!(c("diffreact2d_inverse"), (100, 484, 100));
        assert_eq!(c("source6d_inverse"), (1000, 200, 100));
        let e = make_problem("nlpoisson1d_extrap").unwrap().sensor_layout(&mut rng);
        assert!(e.u.as_slice().iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn noiseless_dataset_matches_exact_fields_and_is_reproducible() {
        let spec = make_problem("nlpoisson1d_inverse").unwrap();
        let d = generate_dataset(&spec, 3, &NoiseCase::noiseless());
        for i in 0..d.f.len() {
            assert_eq!(d.f.values[i], spec.exact_f(d.f.points.row(i)));
        }
        let case = spec.noise_case("0.1").unwrap();
        let a = generate_dataset(&spec, 7, &case);
        let b = generate_dataset(&spec, 7, &case);
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 8, &case);
        assert_ne!(a.f.values, c.f.values);
    }

    #[test]
    fn csv_round_trip() {
        let spec = make_problem("diffreact2d_inverse").unwrap();
        let case = spec.noise_case("0.01").unwrap();
        let d = generate_dataset(&spec, 1, &case);
        let back = SensorDataset::from_csv(&d.to_csv(), &spec.name, 1, case).unwrap();
        assert_eq!(back.u.points, d.u.points);
        assert_eq!(back.f.values, d.f.values);
        assert_eq!(back.b.len(), 100);
        assert!(SensorDataset::from_csv("nonsense", "x", 0, NoiseCase::noiseless()).is_err());
    }

    #[test]
    fn finite_difference_solver() {
        let z = solve_poisson_dirichlet(21, 1.0, |_, _| 0.0).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        // -Δ(sin πx sin πy) = 2π² sin πx sin πy
        let s = solve_poisson_dirichlet(41, 1.0, |x, y| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin()).unwrap();
        assert!((s.interpolate(&[0.5, 0.5]) - 1.0).abs() < 2e-3);
    }

    #[test]
    fn reference_solution_is_grid_converged() {
        let coarse = reference_u_source6d();
        let fine = reference_source_solution(201).unwrap();
        let n = coarse.n;
        let mut max_change: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                max_change = max_change.max((coarse.at(i, j) - fine.at(2 * i, 2 * j)).abs());
            }
            assert_eq!(coarse.at(i, 0), 0.0);
            assert_eq!(coarse.at(0, i), 0.0);
            assert_eq!(coarse.at(i, n - 1), 0.0);
        }
        assert!(max_change < 1e-3, "max change {max_change}");
    }
}
