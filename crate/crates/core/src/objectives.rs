//! The LVM-GP model and its training objective: Gaussian data
//! log-likelihoods, PDE residuals through the decoder jets, the latent
//! regularisers and the λ head of inverse problems.


use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Bound, FieldJet, Graph, Mat, Mlp, ParamGroup, ParamId, ParamStore, Var};
use crate::encoder::{encode_jet, kernel_matrix, latent_kl_correlated, latent_kl_independent, EncoderFeatures, EncoderNets};
use crate::error::{Error, Result};
use crate::gp_prior::{BasisJet, KlPrior, JITTER_MAX, JITTER_START};
use crate::operator_decoder::{
    Decoder, DecoderInputs, DecoderKind, DeepOnetHead, IntegralDecoder, KernelGeometry, NoiseHead, QuadratureGrid,
};
use crate::problems::{Mode, ProblemKind, ProblemSpec, SensorDataset, SensorSet, SOURCE_WEIGHTS, SOURCE_WIDTH};

/// Box constraint on a learnable correlation length.
pub const LC_BOUNDS: (f64, f64) = (0.05, 5.0);

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    Independent,
    Correlated,
}

/// How the inferred quantity enters the operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// Forward problem: nothing to infer.
    Known,
    /// One value per draw, the domain average of `μ_λ(x, ω)`.
    Integrated,
    /// Pointwise `μ_λ(x, ω)` inside the residual.
    Field,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Hidden widths of the encoder networks.
    pub hidden: Vec<usize>,
    pub decoder: DecoderKind,
    /// Number of integral layers (their width is the latent dimension).
    pub integral_layers: usize,
    /// Quadrature nodes per input dimension.
    pub quadrature: usize,
    /// DeepONet grid points per input dimension.
    pub deeponet_points: usize,
    pub deeponet_hidden: Vec<usize>,
    pub deeponet_features: usize,
    /// KL terms per input dimension.
    pub kl_terms: usize,
    pub lc: f64,
    pub lc_learnable: bool,
    pub regularizer: RegKind,
    pub reg_points: usize,
    /// Latent draws per training step.
    pub draws: usize,
    pub beta: f64,
    pub lambda_mode: LambdaMode,
    pub lambda_hidden: Vec<usize>,
    pub lambda_activation: Activation,
    /// Initial output of the λ head, one entry per unknown.
    pub lambda_init: Vec<f64>,
    /// Map each integrated unknown into the domain box through a logistic
    /// (unknown `k` uses input axis `k mod d`). Used for source locations.
    #[serde(default)]
    pub lambda_box: bool,
    /// Whether direct λ observations exist (adds `σ_λ`).
    pub lambda_observed: bool,
    pub hetero_noise: bool,
    pub noise_hidden: Vec<usize>,
    pub sigma_init_u: Option<f64>,
    pub sigma_init_f: Option<f64>,
    pub sigma_init_b: Option<f64>,
    pub sigma_init_lambda: Option<f64>,
    pub weight_u: f64,
    pub weight_f: f64,
    pub weight_b: f64,
    pub weight_lambda: f64,
}

impl ModelConfig {
    /// Defaults for a benchmark.
    pub fn for_problem(spec: &ProblemSpec) -> Self {
        let two_d = spec.dim() == 2;
        let (lambda_mode, lambda_hidden, lambda_init) = match (spec.mode, spec.kind) {
            (Mode::Forward, _) => (LambdaMode::Known, vec![], vec![]),
            (_, ProblemKind::Source2d) => (
                LambdaMode::Integrated,
                vec![128, 128],
                (0..spec.num_unknowns())
                    .map(|k| 0.5 * (spec.lower[k % 2] + spec.upper[k % 2]))
                    .collect(),
            ),
            _ => (LambdaMode::Integrated, vec![1], vec![0.0; spec.num_unknowns()]),
        };
        let hidden = match spec.kind {
            ProblemKind::Porous1d => vec![20, 20],
            _ => vec![64, 64],
        };
        Self {
            latent_dim: 20,
            hidden,
            decoder: DecoderKind::Integral,
            integral_layers: 2,
            quadrature: if two_d { 16 } else { 64 },
            deeponet_points: if two_d { 6 } else { 32 },
            deeponet_hidden: vec![64, 64],
            deeponet_features: 64,
            kl_terms: if two_d { 16 } else { 64 },
            lc: 1.0,
            lc_learnable: false,
            regularizer: RegKind::Independent,
            reg_points: 128,
            draws: if two_d { 4 } else { 8 },
            beta: if spec.mode == Mode::Extrapolation { 0.1 } else { 0.01 },
            lambda_mode,
            lambda_hidden,
            lambda_activation: Activation::Tanh,
            lambda_init,
            lambda_box: spec.kind == ProblemKind::Source2d,
            lambda_observed: false,
            hetero_noise: false,
            noise_hidden: vec![32],
            sigma_init_u: (spec.kind == ProblemKind::Source2d).then_some(0.1),
            sigma_init_f: None,
            sigma_init_b: None,
            sigma_init_lambda: None,
            weight_u: 1.0,
            weight_f: 1.0,
            weight_b: 1.0,
            weight_lambda: 1.0,
        }
    }

    /// Fills unset noise initialisations from the declared noise levels
    /// (twice the level, or 0.1 for noiseless data).
    pub fn resolve_for(&mut self, data: &SensorDataset) {
        let init = |s: f64| if s > 0.0 { 2.0 * s } else { 0.1 };
        self.sigma_init_u.get_or_insert(init(data.noise.u));
        self.sigma_init_f.get_or_insert(init(data.noise.f));
        self.sigma_init_b.get_or_insert(init(data.noise.b));
        self.sigma_init_lambda.get_or_insert(0.1);
        self.lambda_observed = !data.lambda.is_empty();
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.latent_dim == 0 || self.draws == 0 || self.reg_points == 0 {
            return bad("latent_dim, draws and reg_points must be positive".into());
        }
        if self.integral_layers == 0 && self.decoder == DecoderKind::Integral {
            return bad("the integral decoder needs at least one integral layer".into());
        }
        if !(self.lc > 0.0) {
            return bad(format!("lc must be positive, got {}", self.lc));
        }
        if self.lc_learnable && self.regularizer != RegKind::Correlated {
            return bad("a learnable lc requires the correlated regularizer".into());
        }
        if self.beta < 0.0 {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        let inverse = spec.is_inverse();
        if inverse == (self.lambda_mode == LambdaMode::Known) {
            return bad(format!(
                "lambda_mode {:?} does not fit a {:?} problem",
                self.lambda_mode, spec.mode
            ));
        }
        if inverse && self.lambda_init.len() != spec.num_unknowns() {
            return bad(format!(
                "lambda_init has {} entries, problem has {} unknowns",
                self.lambda_init.len(),
                spec.num_unknowns()
            ));
        }
        if inverse && self.lambda_box {
            if self.lambda_mode != LambdaMode::Integrated {
                return bad("lambda_box needs the integrated lambda mode".into());
            }
            for (k, &v) in self.lambda_init.iter().enumerate() {
                let (lo, hi) = (spec.lower[k % spec.dim()], spec.upper[k % spec.dim()]);
                if !(v > lo && v < hi) {
                    return bad(format!("lambda_init[{k}] = {v} lies outside ({lo}, {hi})"));
                }
            }
        }
        if self.lambda_observed && spec.num_unknowns() != 1 {
            return bad("direct lambda observations need a scalar unknown".into());
        }
        Ok(())
    }
}

/// Sensor group prepared for repeated evaluation.
#[derive(Clone, Debug)]
pub struct Group {
    pub points: Mat,
    /// Observations as a column.
    pub values: Mat,
    pub derivs: bool,
    geom: Option<KernelGeometry>,
}

/// Dataset with precomputed kernel geometry.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub u: Option<Group>,
    pub f: Option<Group>,
    pub b: Option<Group>,
    pub lambda: Option<Group>,
}

impl TrainingData {
    pub fn new(model: &LvmGp, data: &SensorDataset) -> Result<Self> {
        if data.dim() != model.spec.dim() {
            return Err(Error::config(format!(
                "dataset is {}-dimensional, problem {} is {}-dimensional",
                data.dim(),
                model.spec.name,
                model.spec.dim()
            )));
        }
        let group = |s: &SensorSet, derivs: bool| {
            (!s.is_empty()).then(|| Group {
                points: s.points.clone(),
                values: Mat::col_vector(s.values.clone()),
                derivs,
                geom: model.geometry(&s.points),
            })
        };
        Ok(Self {
            u: group(&data.u, false),
            f: group(&data.f, true),
            b: group(&data.b, false),
            lambda: group(&data.lambda, false),
        })
    }
}

/// Random inputs of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    /// Prior coefficients of all draws side by side (`M x D·d_z`).
    pub omega: Mat,
    pub draws: usize,
    /// Collocation points of the regulariser.
    pub reg_points: Mat,
    /// Correlation length of the prior paths. Part of the sample, so a
    /// learnable `L_c` receives gradient only through the regulariser.
    pub prior_lc: f64,
}

impl StepBatch {
    pub fn sample(model: &LvmGp, rng: &mut impl Rng) -> Self {
        let draws = model.config.draws;
        Self {
            omega: model.sample_omega(draws, rng),
            draws,
            reg_points: uniform_points(&model.spec, model.config.reg_points, rng),
            prior_lc: model.lc(),
        }
    }
}

pub fn uniform_points(spec: &ProblemSpec, n: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(n, spec.dim(), |_, k| {
        let t: f64 = rng.random_range(0.0..1.0);
        spec.lower[k] + t * (spec.upper[k] - spec.lower[k])
    })
}

/// Objective terms as they enter the total (after the data weights).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub data_u: Option<f64>,
    pub data_f: Option<f64>,
    pub data_b: Option<f64>,
    pub data_lambda: Option<f64>,
    pub reg: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn data_sum(&self) -> f64 {
        [self.data_u, self.data_f, self.data_b, self.data_lambda]
            .iter()
            .flatten()
            .sum()
    }

    /// `Σ L_data - β L_reg`.
    pub fn recompute_total(&self) -> f64 {
        self.data_sum() - self.beta * self.reg
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.reg.is_finite() && self.data_sum().is_finite()
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms = [
            ("data_u", self.data_u),
            ("data_f", self.data_f),
            ("data_b", self.data_b),
            ("data_lambda", self.data_lambda),
            ("reg", Some(self.reg)),
            ("total", Some(self.total)),
        ];
        terms
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    pub const CSV_HEADER: &'static str = "data_u,data_f,data_b,data_lambda,reg,beta,total";

    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map(|v| format!("{v:.10e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.10e},{},{:.10e}",
            o(self.data_u),
            o(self.data_f),
            o(self.data_b),
            o(self.data_lambda),
            self.reg,
            self.beta,
            self.total
        )
    }
}

/// Mean Gaussian log-density `log N(y; μ, σ²)` over the rows. `sigma` is
/// `1 x 1` or has the rows of `mu`.
pub fn gaussian_loglik(g: &mut Graph, mu: Var, y: Var, sigma: Var) -> Var {
    let r = g.sub(y, mu);
    let z = g.div(r, sigma);
    let z2 = g.square(z);
    let q = g.mean(z2);
    let ls = g.ln(sigma);
    let ls = g.mean(ls);
    let t = g.scale(q, -0.5);
    let t = g.sub(t, ls);
    g.add_scalar(t, -HALF_LN_2PI)
}

/// Plain Gaussian log-density of one datum.
pub fn gaussian_logpdf(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -HALF_LN_2PI - sigma.ln() - 0.5 * z * z
}

/// `N_x[u]` on the graph. `x` holds the coordinates of the rows of `u`;
/// `lambda` is `1 x k` or has one row per row of `u`.
pub fn residual_graph(g: &mut Graph, spec: &ProblemSpec, u: &FieldJet, x: &Mat, lambda: Option<Var>) -> Var {
    let lap = u.laplacian(g);
    let a = spec.coefficient;
    let need = |l: Option<Var>| l.expect("inverse operator needs the inferred quantity");
    match spec.kind {
        ProblemKind::Poisson1d => g.scale(lap, a),
        ProblemKind::Porous1d => {
            let t = g.scale(lap, -a);
            let r = g.scale(u.value, spec.linear_reaction());
            g.add(t, r)
        }
        ProblemKind::NlPoisson1d => {
            let t = g.act(u.value, Activation::Tanh);
            let t = g.mul(need(lambda), t);
            let l = g.scale(lap, a);
            g.add(l, t)
        }
        ProblemKind::DiffReact2d => {
            let t = g.square(u.value);
            let t = g.mul(need(lambda), t);
            let l = g.scale(lap, a);
            g.add(l, t)
        }
        ProblemKind::Source2d => {
            let lam = need(lambda);
            let x0 = g.constant(Mat::col_vector(x.col(0)));
            let x1 = g.constant(Mat::col_vector(x.col(1)));
            let mut acc = g.scale(lap, -a);
            for (i, &k) in SOURCE_WEIGHTS.iter().enumerate() {
                let cx = g.slice_cols(lam, 2 * i, 1);
                let cy = g.slice_cols(lam, 2 * i + 1, 1);
                let dx = g.sub(x0, cx);
                let dy = g.sub(x1, cy);
                let dx2 = g.square(dx);
                let dy2 = g.square(dy);
                let s = g.add(dx2, dy2);
                let s = g.scale(s, -0.5 / (SOURCE_WIDTH * SOURCE_WIDTH));
                let e = g.exp(s);
                let e = g.scale(e, k);
                acc = g.sub(acc, e);
            }
            acc
        }
    }
}

/// Stacks `draws` copies of `v` vertically.
fn tile(g: &mut Graph, v: Var, draws: usize) -> Var {
    if draws == 1 {
        v
    } else {
        g.concat_rows(&vec![v; draws])
    }
}

fn tile_jet(g: &mut Graph, j: &FieldJet, draws: usize) -> FieldJet {
    FieldJet {
        value: tile(g, j.value, draws),
        grad: j.grad.iter().map(|&v| tile(g, v, draws)).collect(),
        hess: j.hess.iter().map(|h| h.map(|v| tile(g, v, draws))).collect(),
    }
}

fn tile_mat(m: &Mat, draws: usize) -> Mat {
    Mat::vstack(&vec![m; draws])
}

/// `D·n x D` indicator mapping each stacked row to its draw.
fn draw_indicator(n: usize, draws: usize) -> Mat {
    Mat::from_fn(draws * n, draws, |r, d| if r / n == d { 1.0 } else { 0.0 })
}

/// Prior path jets at `n` points for every draw, rearranged to `D·n x d_z`.
fn prior_jet(g: &mut Graph, basis: &BasisJet, omega: &Mat, draws: usize, dz: usize) -> FieldJet {
    let n = basis.value.rows();
    let arrange = |b: &Mat| {
        let y = b.matmul(omega);
        Mat::from_fn(draws * n, dz, |r, k| y[(r % n, (r / n) * dz + k)])
    };
    FieldJet {
        value: g.constant(arrange(&basis.value)),
        grad: basis.grad.iter().map(|b| g.constant(arrange(b))).collect(),
        hess: basis.hess.iter().map(|b| Some(g.constant(arrange(b)))).collect(),
    }
}

/// Target points of one forward pass.
struct Target<'a> {
    points: &'a Mat,
    derivs: bool,
    geom: Option<&'a KernelGeometry>,
}

/// Outputs of one forward pass for a batch of draws.
struct Forward {
    /// `μ_u` jets per target, `D·n` rows each.
    mu: Vec<FieldJet>,
    /// `D x k` inferred quantity per draw.
    lambda_draws: Option<Var>,
    /// Inferred quantity at the rows of each target.
    lambda_rows: Vec<Option<Var>>,
}

/// The assembled model: encoder, GP prior, decoder, noise and λ heads.
#[derive(Clone, Debug)]
pub struct LvmGp {
    pub spec: ProblemSpec,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderNets,
    pub decoder: Decoder,
    /// Quadrature nodes (integral decoder) or branch grid (DeepONet).
    pub node_grid: QuadratureGrid,
    node_geom: Option<KernelGeometry>,
    prior: KlPrior,
    pub noise_u: NoiseHead,
    pub noise_f: NoiseHead,
    pub noise_b: NoiseHead,
    pub noise_lambda: Option<NoiseHead>,
    pub lambda_net: Option<Mlp>,
    pub lc_param: Option<ParamId>,
}

impl LvmGp {
    /// Builds a model; unset noise initialisations fall back to 0.1.
    pub fn new(spec: &ProblemSpec, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate(spec)?;
        let d = spec.dim();
        let dz = config.latent_dim;
        let mut store = ParamStore::new();
        let encoder = EncoderNets::new(&mut store, d, &config.hidden, dz, rng);
        let counts = match config.decoder {
            DecoderKind::Integral => vec![config.quadrature; d],
            DecoderKind::Deeponet => vec![config.deeponet_points; d],
        };
        let node_grid = QuadratureGrid::new(&spec.lower, &spec.upper, &counts)?;
        let (decoder, node_geom) = match config.decoder {
            DecoderKind::Integral => (
                Decoder::Integral(IntegralDecoder::new(&mut store, "dec", dz, config.integral_layers, 1, rng)),
                Some(KernelGeometry::new(node_grid.nodes(), &node_grid)),
            ),
            DecoderKind::Deeponet => (
                Decoder::DeepOnet(DeepOnetHead::new(
                    &mut store,
                    node_grid.nodes().clone(),
                    dz,
                    &config.deeponet_hidden,
                    config.deeponet_features,
                    rng,
                )),
                None,
            ),
        };
        let prior = KlPrior::new(config.lc, config.kl_terms, &spec.domain_lengths(), dz)?;
        let mut head = |name: &str, init: Option<f64>, store: &mut ParamStore| {
            let init = init.unwrap_or(0.1);
            if config.hetero_noise {
                NoiseHead::hetero(store, name, d, &config.noise_hidden, init, rng)
            } else {
                NoiseHead::scalar(store, name, init)
            }
        };
        let noise_u = head("noise.u", config.sigma_init_u, &mut store);
        let noise_f = head("noise.f", config.sigma_init_f, &mut store);
        let noise_b = head("noise.b", config.sigma_init_b, &mut store);
        let noise_lambda = config
            .lambda_observed
            .then(|| NoiseHead::scalar(&mut store, "noise.lambda", config.sigma_init_lambda.unwrap_or(0.1)));
        let lambda_net = (config.lambda_mode != LambdaMode::Known).then(|| {
            let mut sizes = vec![dz];
            sizes.extend_from_slice(&config.lambda_hidden);
            sizes.push(spec.num_unknowns());
            let net = Mlp::new(
                &mut store,
                "lambda",
                &sizes,
                config.lambda_activation,
                Activation::Identity,
                ParamGroup::Mean,
                rng,
            );
            let (_, b) = net.layer_ids(sizes.len() - 2);
            let mut init = config.lambda_init.clone();
            if config.lambda_box {
                for (k, v) in init.iter_mut().enumerate() {
                    let (lo, hi) = (spec.lower[k % spec.dim()], spec.upper[k % spec.dim()]);
                    let t = (*v - lo) / (hi - lo);
                    *v = (t / (1.0 - t)).ln();
                }
            }
            store.set(b, &Mat::row_vector(init));
            net
        });
        let lc_param = config
            .lc_learnable
            .then(|| store.add_bounded("prior.lc", ParamGroup::Mean, Mat::scalar(config.lc), Some(LC_BOUNDS)));
        Ok(Self {
            spec: spec.clone(),
            config: config.clone(),
            store,
            encoder,
            decoder,
            node_grid,
            node_geom,
            prior,
            noise_u,
            noise_f,
            noise_b,
            noise_lambda,
            lambda_net,
            lc_param,
        })
    }

    /// Current correlation length of the prior.
    pub fn lc(&self) -> f64 {
        match self.lc_param {
            Some(id) => self.store.slice(id)[0],
            None => self.config.lc,
        }
    }

    fn prior_at(&self, lc: f64) -> Result<KlPrior> {
        if lc == self.prior.dims[0].lc {
            Ok(self.prior.clone())
        } else {
            KlPrior::new(lc, self.config.kl_terms, &self.spec.domain_lengths(), self.config.latent_dim)
        }
    }

    pub fn num_prior_terms(&self) -> usize {
        self.prior.num_terms()
    }

    /// Standard normal prior coefficients for `draws` draws.
    pub fn sample_omega(&self, draws: usize, rng: &mut impl Rng) -> Mat {
        Mat::from_fn(self.num_prior_terms(), draws * self.config.latent_dim, |_, _| {
            rng.sample(StandardNormal)
        })
    }

    fn geometry(&self, points: &Mat) -> Option<KernelGeometry> {
        self.node_geom
            .as_ref()
            .map(|_| KernelGeometry::new(points, &self.node_grid))
    }

    fn features(&self, g: &mut Graph, p: &Bound, points: &Mat, derivs: bool) -> EncoderFeatures {
        let x = if derivs {
            FieldJet::coordinates(g, points)
        } else {
            FieldJet::values_only(g.constant(points.clone()))
        };
        self.encoder.features(g, p, &x)
    }

    /// `z₁` jets at `points` for every draw of `omega`.
    fn latent(&self, g: &mut Graph, p: &Bound, prior: &KlPrior, points: &Mat, derivs: bool, omega: &Mat, draws: usize) -> FieldJet {
        let feats = self.features(g, p, points, derivs);
        let feats = EncoderFeatures {
            m: tile_jet(g, &feats.m, draws),
            zbar: tile_jet(g, &feats.zbar, draws),
        };
        let basis = prior.basis(points, derivs);
        let z0 = prior_jet(g, &basis, omega, draws, self.config.latent_dim);
        encode_jet(g, &feats, &z0)
    }

    fn forward(&self, g: &mut Graph, p: &Bound, targets: &[Target], omega: &Mat, draws: usize, lc: f64) -> Result<Forward> {
        let prior = self.prior_at(lc)?;
        let latents: Vec<FieldJet> = targets
            .iter()
            .map(|t| self.latent(g, p, &prior, t.points, t.derivs, omega, draws))
            .collect();
        let nodes = self.latent(g, p, &prior, self.node_grid.nodes(), false, omega, draws).value;
        let geoms: Vec<&KernelGeometry> = targets.iter().filter_map(|t| t.geom).collect();
        if self.node_geom.is_some() {
            assert_eq!(geoms.len(), targets.len(), "integral decoder needs geometry for every target");
        }
        let latent_values: Vec<Var> = latents.iter().map(|z| z.value).collect();
        let inputs = DecoderInputs {
            targets: latents,
            nodes,
            draws,
            target_geoms: geoms,
            node_geom: self.node_geom.as_ref(),
        };
        let mu = self.decoder.decode_mean_jet(g, p, &inputs);

        let (lambda_draws, lambda_rows) = match (&self.lambda_net, self.config.lambda_mode) {
            (Some(net), mode) => {
                let q = self.node_grid.len();
                let vol = self.node_grid.volume();
                let w = self.node_grid.weights();
                let sel = Mat::from_fn(draws, draws * q, |d, c| if c / q == d { w[c % q] / vol } else { 0.0 });
                let sel = g.constant(sel);
                let at_nodes = net.forward(g, p, nodes);
                let mut per_draw = g.matmul(sel, at_nodes);
                if self.config.lambda_box {
                    let k = self.spec.num_unknowns();
                    let d = self.spec.dim();
                    let lo = Mat::row_vector((0..k).map(|j| self.spec.lower[j % d]).collect());
                    let width = Mat::row_vector((0..k).map(|j| self.spec.upper[j % d] - self.spec.lower[j % d]).collect());
                    let s = g.act(per_draw, Activation::Sigmoid);
                    let width = g.constant(width);
                    let s = g.mul(s, width);
                    let lo = g.constant(lo);
                    per_draw = g.add(s, lo);
                }
                let rows = match mode {
                    LambdaMode::Field => latent_values.iter().map(|&z| Some(net.forward(g, p, z))).collect(),
                    _ => targets
                        .iter()
                        .map(|t| {
                            let r = g.constant(draw_indicator(t.points.rows(), draws));
                            Some(g.matmul(r, per_draw))
                        })
                        .collect(),
                };
                (Some(per_draw), rows)
            }
            (None, _) => (None, vec![None; targets.len()]),
        };
        Ok(Forward {
            mu,
            lambda_draws,
            lambda_rows,
        })
    }

    fn sigma_rows(&self, g: &mut Graph, p: &Bound, head: &NoiseHead, points: &Mat, draws: usize) -> Var {
        let s = head.sigma(g, p, points);
        if g.shape(s).0 == 1 {
            s
        } else {
            tile(g, s, draws)
        }
    }

    /// Builds the objective on `g` and returns the total and its parts.
    fn build(&self, g: &mut Graph, p: &Bound, data: &TrainingData, batch: &StepBatch) -> Result<(Var, LossBreakdown)> {
        let draws = batch.draws;
        let order: Vec<(&Group, usize)> = [&data.f, &data.u, &data.b, &data.lambda]
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (g, i)))
            .collect();
        let targets: Vec<Target> = order
            .iter()
            .map(|(grp, _)| Target {
                points: &grp.points,
                derivs: grp.derivs,
                geom: grp.geom.as_ref(),
            })
            .collect();
        let fw = self.forward(g, p, &targets, &batch.omega, draws, batch.prior_lc)?;

        let mut terms: [Option<Var>; 4] = [None; 4];
        for (slot, (grp, kind)) in order.iter().enumerate() {
            let y = g.constant(tile_mat(&grp.values, draws));
            let (mu, sigma, w) = match kind {
                0 => {
                    let x = tile_mat(&grp.points, draws);
                    let mu = residual_graph(g, &self.spec, &fw.mu[slot], &x, fw.lambda_rows[slot]);
                    let s = self.sigma_rows(g, p, &self.noise_f, &grp.points, draws);
                    (mu, s, self.config.weight_f)
                }
                1 => (
                    fw.mu[slot].value,
                    self.sigma_rows(g, p, &self.noise_u, &grp.points, draws),
                    self.config.weight_u,
                ),
                2 => (
                    fw.mu[slot].value,
                    self.sigma_rows(g, p, &self.noise_b, &grp.points, draws),
                    self.config.weight_b,
                ),
                _ => {
                    let lam = fw.lambda_rows[slot].ok_or_else(|| Error::config("lambda observations in a forward problem"))?;
                    let head = self
                        .noise_lambda
                        .as_ref()
                        .ok_or_else(|| Error::config("lambda observations without a lambda noise head"))?;
                    (lam, self.sigma_rows(g, p, head, &grp.points, draws), self.config.weight_lambda)
                }
            };
            let ll = gaussian_loglik(g, mu, y, sigma);
            terms[*kind] = Some(if w == 1.0 { ll } else { g.scale(ll, w) });
        }

        let feats = self.features(g, p, &batch.reg_points, false);
        let reg = match self.config.regularizer {
            RegKind::Independent => latent_kl_independent(g, feats.m.value, feats.zbar.value),
            RegKind::Correlated => {
                let lc = match self.lc_param {
                    Some(id) => p.var(id),
                    None => g.scalar(self.config.lc),
                };
                let k = kernel_matrix(g, &batch.reg_points, lc);
                latent_kl_correlated(g, feats.m.value, feats.zbar.value, k, JITTER_START, JITTER_MAX)?
            }
        };

        let mut total: Option<Var> = None;
        for t in terms.iter().flatten() {
            total = Some(match total {
                None => *t,
                Some(a) => g.add(a, *t),
            });
        }
        let penalty = g.scale(reg, -self.config.beta);
        let total = match total {
            Some(t) => g.add(t, penalty),
            None => penalty,
        };
        let val = |v: Option<Var>| v.map(|v| g.scalar_value(v));
        let parts = LossBreakdown {
            data_f: val(terms[0]),
            data_u: val(terms[1]),
            data_b: val(terms[2]),
            data_lambda: val(terms[3]),
            reg: g.scalar_value(reg),
            beta: self.config.beta,
            total: g.scalar_value(total),
        };
        Ok((total, parts))
    }

    /// Objective value and, with `with_grad`, the gradient of `-total`
    /// (the minimised quantity) aligned with the flat parameter buffer.
    pub fn evaluate(&self, data: &TrainingData, batch: &StepBatch, with_grad: bool) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
        let mut g = if with_grad { Graph::new() } else { Graph::inference() };
        let p = self.store.bind(&mut g);
        let (total, parts) = self.build(&mut g, &p, data, batch)?;
        let grad = with_grad.then(|| {
            let grads = g.backward(total);
            let mut flat = self.store.gather(&p, &grads);
            flat.iter_mut().for_each(|v| *v = -*v);
            flat
        });
        Ok((parts, grad))
    }

    /// Confidence `m` at each point, averaged over latent components.
    pub fn confidence(&self, points: &Mat) -> Vec<f64> {
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let x = g.constant(points.clone());
        let m = self.encoder.m_net.forward(&mut g, &p, x);
        let v = g.value(m);
        (0..v.rows()).map(|i| v.row(i).iter().sum::<f64>() / v.cols() as f64).collect()
    }

    /// Average confidence `m` over points and latent components.
    pub fn mean_confidence(&self, points: &Mat) -> f64 {
        let c = self.confidence(points);
        c.iter().sum::<f64>() / c.len() as f64
    }

    /// Per-point predictive statistics of `u` and `f = N_x[μ_u]` over `m`
    /// latent draws, plus per-draw statistics of the inferred quantity.
    pub fn predict_stats(&self, points: &Mat, m: usize, rng: &mut impl Rng) -> Result<Prediction> {
        if m < 2 {
            return Err(Error::config(format!("prediction needs at least 2 draws, got {m}")));
        }
        const CHUNK: usize = 16;
        let n = points.rows();
        let geom = self.geometry(points);
        let k = self.spec.num_unknowns();
        let mut su = Welford::new(n);
        let mut sf = Welford::new(n);
        let mut sl = Welford::new(k);
        let mut lambda_samples = Vec::new();
        let mut done = 0;
        while done < m {
            let draws = CHUNK.min(m - done);
            let omega = self.sample_omega(draws, rng);
            let mut g = Graph::inference();
            let p = self.store.bind(&mut g);
            let target = Target {
                points,
                derivs: true,
                geom: geom.as_ref(),
            };
            let fw = self.forward(&mut g, &p, &[target], &omega, draws, self.lc())?;
            let x = tile_mat(points, draws);
            let f = residual_graph(&mut g, &self.spec, &fw.mu[0], &x, fw.lambda_rows[0]);
            let (uv, fv) = (g.value(fw.mu[0].value), g.value(f));
            for d in 0..draws {
                su.push(&uv.as_slice()[d * n..(d + 1) * n]);
                sf.push(&fv.as_slice()[d * n..(d + 1) * n]);
            }
            if let Some(l) = fw.lambda_draws {
                let lv = g.value(l);
                for d in 0..draws {
                    sl.push(lv.row(d));
                    lambda_samples.push(lv.row(d).to_vec());
                }
            }
            done += draws;
        }
        let sigma = |head: &NoiseHead| -> Result<Vec<f64>> {
            (0..n).map(|i| head.sigma_at(&self.store, points.row(i))).collect()
        };
        let stats = |w: &Welford, s: Vec<f64>| {
            let epi = w.std();
            FieldStats {
                total: epi.iter().zip(&s).map(|(e, s)| (e * e + s * s).sqrt()).collect(),
                mean: w.mean.clone(),
                epistemic: epi,
                sigma: s,
            }
        };
        let lambda = (self.lambda_net.is_some()).then(|| LambdaStats {
            mean: sl.mean.clone(),
            std: sl.std(),
            samples: lambda_samples,
        });
        Ok(Prediction {
            points: points.clone(),
            confidence: self.confidence(points),
            u: stats(&su, sigma(self.u_noise_head())?),
            f: stats(&sf, sigma(&self.noise_f)?),
            lambda,
        })
    }

    /// Noise head describing direct observations of `u`. Forward problems
    /// have no interior `u` data, so the Dirichlet boundary head is used.
    pub fn u_noise_head(&self) -> &NoiseHead {
        match self.spec.mode {
            Mode::Forward => &self.noise_b,
            _ => &self.noise_u,
        }
    }

    /// Mean predictions of `u` at `points` for the given draws, `D x n`.
    pub fn sample_means(&self, points: &Mat, omega: &Mat, draws: usize) -> Result<Mat> {
        let geom = self.geometry(points);
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let target = Target {
            points,
            derivs: false,
            geom: geom.as_ref(),
        };
        let fw = self.forward(&mut g, &p, &[target], omega, draws, self.lc())?;
        Ok(g.value(fw.mu[0].value).clone().reshape(draws, points.rows()))
    }

    /// `μ_u` jets at `points` for one draw given by `omega` (`M x d_z`).
    pub fn mean_jet(&self, points: &Mat, omega: &Mat) -> Result<Vec<crate::diffcore::SpatialJet>> {
        let geom = self.geometry(points);
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let target = Target {
            points,
            derivs: true,
            geom: geom.as_ref(),
        };
        let fw = self.forward(&mut g, &p, &[target], omega, 1, self.lc())?;
        Ok((0..points.rows()).map(|i| fw.mu[0].to_spatial(&g, i)).collect())
    }
}

/// Running mean and sum of squared deviations per coordinate.
struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(n: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / c;
            *s += d * (v - *m);
        }
    }

    /// Sample standard deviation (`count - 1` denominator).
    fn std(&self) -> Vec<f64> {
        let c = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| (s / c).max(0.0).sqrt()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldStats {
    pub mean: Vec<f64>,
    pub epistemic: Vec<f64>,
    /// Learned observation noise at each point.
    pub sigma: Vec<f64>,
    /// `sqrt(epistemic² + σ²)`.
    pub total: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Per-draw values, one row per draw.
    pub samples: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub points: Mat,
    /// Confidence `m` per point.
    pub confidence: Vec<f64>,
    pub u: FieldStats,
    pub f: FieldStats,
    pub lambda: Option<LambdaStats>,
}
