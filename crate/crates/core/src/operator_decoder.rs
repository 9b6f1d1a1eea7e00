//! Integral-operator decoder with the normalised Gaussian (positional
//! transformer) kernel, a DeepONet-style alternative, and observation-noise
//! heads.
//!
//! Target-point jets are stacked draw-major: row `d * n + i` is point `i`
//! under draw `d`. Node values follow the same layout with `Q` rows per draw.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::activation::softplus_inverse;
use crate::diffcore::{jet, Activation, Bound, FieldJet, Graph, Mat, Mlp, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Bounds keeping `α̃` inside `(0, π/2)`.
pub const ALPHA_RAW_BOUNDS: (f64, f64) = (1e-6, std::f64::consts::FRAC_PI_2 - 1e-6);

/// Uniform tensor grid with trapezoidal weights.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    nodes: Mat,
    weights: Vec<f64>,
    counts: Vec<usize>,
}

/// `counts[k]` equispaced coordinates per axis, endpoints included.
pub fn tensor_grid(lower: &[f64], upper: &[f64], counts: &[usize]) -> Mat {
    let d = counts.len();
    let total: usize = counts.iter().product();
    let axis = |k: usize, i: usize| {
        if counts[k] == 1 {
            0.5 * (lower[k] + upper[k])
        } else {
            lower[k] + (upper[k] - lower[k]) * i as f64 / (counts[k] - 1) as f64
        }
    };
    let mut out = Mat::zeros(total, d);
    for flat in 0..total {
        let mut rem = flat;
        for k in (0..d).rev() {
            out[(flat, k)] = axis(k, rem % counts[k]);
            rem /= counts[k];
        }
    }
    out
}

impl QuadratureGrid {
    pub fn new(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.len() != lower.len() || counts.len() != upper.len() {
            return Err(Error::config("quadrature grid needs one count per dimension"));
        }
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::config("quadrature grid needs at least 2 nodes per dimension"));
        }
        if lower.iter().zip(upper).any(|(l, u)| !(u > l)) {
            return Err(Error::config("quadrature grid bounds must satisfy lower < upper"));
        }
        let nodes = tensor_grid(lower, upper, counts);
        let axis_w: Vec<Vec<f64>> = counts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let h = (upper[k] - lower[k]) / (c - 1) as f64;
                (0..c)
                    .map(|i| if i == 0 || i == c - 1 { h / 2.0 } else { h })
                    .collect()
            })
            .collect();
        let mut weights = Vec::with_capacity(nodes.rows());
        for flat in 0..nodes.rows() {
            let mut rem = flat;
            let mut w = 1.0;
            for k in (0..counts.len()).rev() {
                w *= axis_w[k][rem % counts[k]];
                rem /= counts[k];
            }
            weights.push(w);
        }
        Ok(Self {
            nodes,
            weights,
            counts: counts.to_vec(),
        })
    }

    pub fn nodes(&self) -> &Mat {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Pairwise geometry between evaluation points and quadrature nodes.
#[derive(Clone, Debug)]
pub struct KernelGeometry {
    sqdist: Mat,
    /// `diffs[k][(i, q)] = x_ik - x'_qk`
    diffs: Vec<Mat>,
    log_w: Mat,
}

impl KernelGeometry {
    pub fn new(points: &Mat, grid: &QuadratureGrid) -> Self {
        let (n, d) = points.shape();
        let nodes = grid.nodes();
        assert_eq!(nodes.cols(), d, "points and grid differ in dimension");
        let q = nodes.rows();
        let diffs: Vec<Mat> = (0..d)
            .map(|k| Mat::from_fn(n, q, |i, j| points[(i, k)] - nodes[(j, k)]))
            .collect();
        let mut sqdist = Mat::zeros(n, q);
        for dk in &diffs {
            sqdist.add_assign(&dk.map(|v| v * v));
        }
        Self {
            sqdist,
            diffs,
            log_w: Mat::row_vector(grid.weights().iter().map(|w| w.ln()).collect()),
        }
    }

    pub fn num_points(&self) -> usize {
        self.sqdist.rows()
    }
}

/// Normalised kernel weights `ŵ_q(x)` and their pure second-order jets.
#[derive(Clone, Debug)]
pub struct KernelWeights {
    pub value: Var,
    pub grad: Vec<Var>,
    pub hess: Vec<Var>,
}

/// `ŵ = softmax_q(ln w_q - α |x - x'_q|²)`. With `E_k = -2α (x_k - x'_k)` and
/// `C = E_k - Σ ŵ E_k`, `∂_k ŵ = ŵ C` and `∂²_k ŵ = ŵ (C² - Σ ŵ C²)`.
pub fn kernel_weights(g: &mut Graph, geom: &KernelGeometry, alpha: Var, derivs: bool) -> KernelWeights {
    let sq = g.constant(geom.sqdist.clone());
    let logw = g.constant(geom.log_w.clone());
    let scaled = g.mul(sq, alpha);
    let logits = g.sub(logw, scaled);
    let value = g.softmax_rows(logits);
    let mut grad = Vec::new();
    let mut hess = Vec::new();
    if derivs {
        for dk in &geom.diffs {
            let dk = g.constant(dk.clone());
            let e = g.mul(dk, alpha);
            let e = g.scale(e, -2.0);
            let ae = g.mul(value, e);
            let ebar = g.sum_cols(ae);
            let c = g.sub(e, ebar);
            grad.push(g.mul(value, c));
            let c2 = g.square(c);
            let ac2 = g.mul(value, c2);
            let m2 = g.sum_cols(ac2);
            let inner = g.sub(c2, m2);
            hess.push(g.mul(value, inner));
        }
    }
    KernelWeights { value, grad, hess }
}

/// Plain normalised weights at one point.
pub fn normalized_weights(x: &[f64], grid: &QuadratureGrid, alpha: f64) -> Vec<f64> {
    let nodes = grid.nodes();
    let logits: Vec<f64> = (0..grid.len())
        .map(|q| {
            let d2: f64 = x.iter().enumerate().map(|(k, v)| (v - nodes[(q, k)]).powi(2)).sum();
            grid.weights()[q].ln() - alpha * d2
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `A · Y_d` for every draw `d`, where `a` is `R x Q` and `y` stacks the
/// draws as `D·Q x c`. Returns `D·R x c` (draw-major) using one GEMM.
pub fn integrate_draws(g: &mut Graph, a: Var, y: Var, draws: usize) -> Var {
    if draws == 1 {
        return g.matmul(a, y);
    }
    let (r, q) = g.shape(a);
    let (dq, c) = g.shape(y);
    assert_eq!(dq, draws * q, "node block does not match the kernel matrix");
    // [(d,q), c] -> [d, (q,c)] -> [(q,c), d] -> [q, (c,d)]
    let t = g.reshape(y, draws, q * c);
    let t = g.transpose(t);
    let t = g.reshape(t, q, c * draws);
    // [r, (c,d)] -> [(r,c), d] -> [d, (r,c)] -> [(d,r), c]
    let out = g.matmul(a, t);
    let out = g.reshape(out, r * c, draws);
    let out = g.transpose(out);
    g.reshape(out, draws * r, c)
}

/// One layer `σ(W z + b + ∫ k(x, x') V z(x') dx')`.
#[derive(Clone, Debug)]
pub struct OperatorLayer {
    pub w: ParamId,
    pub b: ParamId,
    /// `α̃`, with `α = tan(α̃)`.
    pub alpha_raw: ParamId,
    pub v: ParamId,
    pub act: Activation,
}

impl OperatorLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (width as f64).sqrt();
        let mut init = || Mat::from_fn(width, width, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let w = store.add(&format!("{prefix}.w"), ParamGroup::Mean, init());
        let v = store.add(&format!("{prefix}.v"), ParamGroup::Mean, init());
        let b = store.add(&format!("{prefix}.b"), ParamGroup::Mean, Mat::zeros(1, width));
        let alpha_raw = store.add_bounded(
            &format!("{prefix}.alpha"),
            ParamGroup::Mean,
            Mat::scalar(FRAC_PI_4),
            Some(ALPHA_RAW_BOUNDS),
        );
        Self {
            w,
            b,
            alpha_raw,
            v,
            act: Activation::Mish,
        }
    }

    pub fn alpha(&self, params: &ParamStore) -> f64 {
        params.slice(self.alpha_raw)[0].tan()
    }

    /// Propagates target jets (`D·n` rows) and node values (`D·Q` rows).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_jet(
        &self,
        g: &mut Graph,
        p: &Bound,
        targets: &FieldJet,
        nodes: Var,
        target_geom: &KernelGeometry,
        node_geom: &KernelGeometry,
        draws: usize,
    ) -> (FieldJet, Var) {
        let (mut t, n) = self.forward_groups(
            g,
            p,
            std::slice::from_ref(targets),
            &[target_geom],
            nodes,
            node_geom,
            draws,
        );
        (t.pop().unwrap(), n)
    }

    /// Same as [`forward_jet`](Self::forward_jet) for several target groups
    /// sharing one node set.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_groups(
        &self,
        g: &mut Graph,
        p: &Bound,
        targets: &[FieldJet],
        target_geoms: &[&KernelGeometry],
        nodes: Var,
        node_geom: &KernelGeometry,
        draws: usize,
    ) -> (Vec<FieldJet>, Var) {
        assert_eq!(targets.len(), target_geoms.len());
        let w = p.var(self.w);
        let b = p.var(self.b);
        let alpha = g.act(p.var(self.alpha_raw), Activation::Tan);
        let y = g.matmul(nodes, p.var(self.v));

        let mut outs = Vec::with_capacity(targets.len());
        for (t, geom) in targets.iter().zip(target_geoms) {
            let kt = kernel_weights(g, geom, alpha, t.has_derivatives());
            let mut pre = jet::affine(g, t, w, b);
            let it = integrate_draws(g, kt.value, y, draws);
            pre.value = g.add(pre.value, it);
            for k in 0..pre.dim() {
                let ig = integrate_draws(g, kt.grad[k], y, draws);
                pre.grad[k] = g.add(pre.grad[k], ig);
                let ih = integrate_draws(g, kt.hess[k], y, draws);
                pre.hess[k] = Some(match pre.hess[k] {
                    Some(h) => g.add(h, ih),
                    None => ih,
                });
            }
            outs.push(jet::activate(g, &pre, self.act));
        }

        let kn = kernel_weights(g, node_geom, alpha, false);
        let zn = g.matmul(nodes, w);
        let zn = g.add(zn, b);
        let inn = integrate_draws(g, kn.value, y, draws);
        let zn = g.add(zn, inn);
        let out_n = match self.act {
            Activation::Identity => zn,
            act => g.act(zn, act),
        };
        (outs, out_n)
    }
}

/// Stack of integral layers followed by an affine read-out.
#[derive(Clone, Debug)]
pub struct IntegralDecoder {
    pub layers: Vec<OperatorLayer>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub width: usize,
    pub out_dim: usize,
}

impl IntegralDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        num_integral: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..num_integral)
            .map(|i| OperatorLayer::new(store, &format!("{prefix}.layer{i}"), width, rng))
            .collect();
        let s = 1.0 / (width as f64).sqrt();
        let out_w = store.add(
            &format!("{prefix}.out.w"),
            ParamGroup::Mean,
            Mat::from_fn(width, out_dim, |_, _| s * rng.sample::<f64, _>(StandardNormal)),
        );
        let out_b = store.add(&format!("{prefix}.out.b"), ParamGroup::Mean, Mat::zeros(1, out_dim));
        Self {
            layers,
            out_w,
            out_b,
            width,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &DecoderInputs) -> Vec<FieldJet> {
        let geom_n = inputs
            .node_geom
            .expect("integral decoder needs node-to-node geometry");
        let mut zt = inputs.targets.clone();
        let mut zn = inputs.nodes;
        for layer in &self.layers {
            let (t, n) =
                layer.forward_groups(g, p, &zt, &inputs.target_geoms, zn, geom_n, inputs.draws);
            zt = t;
            zn = n;
        }
        let (w, b) = (p.var(self.out_w), p.var(self.out_b));
        zt.iter().map(|t| jet::affine(g, t, w, b)).collect()
    }
}

/// `Branch(z(x_grid,1..p)) · Trunk(z(x))`.
#[derive(Clone, Debug)]
pub struct DeepOnetHead {
    pub branch: Mlp,
    pub trunk: Mlp,
    pub grid: Mat,
}

impl DeepOnetHead {
    pub fn new(
        store: &mut ParamStore,
        grid: Mat,
        latent_dim: usize,
        hidden: &[usize],
        features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut bs = vec![grid.rows() * latent_dim];
        bs.extend_from_slice(hidden);
        bs.push(features);
        let mut ts = vec![latent_dim];
        ts.extend_from_slice(hidden);
        ts.push(features);
        let branch = Mlp::new(store, "don.branch", &bs, Activation::Mish, Activation::Identity, ParamGroup::Mean, rng);
        let trunk = Mlp::new(store, "don.trunk", &ts, Activation::Mish, Activation::Identity, ParamGroup::Mean, rng);
        Self { branch, trunk, grid }
    }

    /// Grid-point latents are constants in `x`: only the trunk carries jets.
    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &DecoderInputs) -> Vec<FieldJet> {
        let draws = inputs.draws;
        let pts = self.grid.rows();
        let (rows, c) = g.shape(inputs.nodes);
        assert_eq!(rows, draws * pts);
        let flat = g.reshape(inputs.nodes, draws, pts * c);
        let br = self.branch.forward(g, p, flat);
        let mut outs = Vec::with_capacity(inputs.targets.len());
        for t in &inputs.targets {
            let n = g.shape(t.value).0 / draws;
            let tile = g.constant(Mat::from_fn(draws * n, draws, |r, d| if r / n == d { 1.0 } else { 0.0 }));
            let brt = g.matmul(tile, br);
            let tr = self.trunk.forward_jet(g, p, t);
            let dot = |g: &mut Graph, v: Var| {
                let prod = g.mul(v, brt);
                g.sum_cols(prod)
            };
            outs.push(FieldJet {
                value: dot(g, tr.value),
                grad: tr.grad.iter().map(|&v| dot(g, v)).collect(),
                hess: tr.hess.iter().map(|h| h.map(|v| dot(g, v))).collect(),
            });
        }
        outs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Integral,
    Deeponet,
}

/// Latent inputs to a decoder for one batch of draws.
pub struct DecoderInputs<'a> {
    /// `z₁` jets at each target group, `D·n_g` rows per group.
    pub targets: Vec<FieldJet>,
    /// `z₁` values at the decoder's node set, `D·Q` rows.
    pub nodes: Var,
    pub draws: usize,
    /// One geometry per target group; unused by DeepONet.
    pub target_geoms: Vec<&'a KernelGeometry>,
    pub node_geom: Option<&'a KernelGeometry>,
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Integral(IntegralDecoder),
    DeepOnet(DeepOnetHead),
}

impl Decoder {
    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Integral(_) => DecoderKind::Integral,
            Decoder::DeepOnet(_) => DecoderKind::Deeponet,
        }
    }

    /// Mean jet `μ_u` at every target group for every draw.
    pub fn decode_mean_jet(&self, g: &mut Graph, p: &Bound, inputs: &DecoderInputs) -> Vec<FieldJet> {
        match self {
            Decoder::Integral(d) => d.forward(g, p, inputs),
            Decoder::DeepOnet(d) => d.forward(g, p, inputs),
        }
    }
}

/// Observation noise `σ(x) > 0`, never differentiated in `x`.
#[derive(Clone, Debug)]
pub enum NoiseHead {
    /// Softplus of a learnable scalar.
    Scalar(ParamId),
    /// Softplus-output network of `x`.
    Hetero(Mlp),
}

impl NoiseHead {
    pub fn scalar(store: &mut ParamStore, name: &str, init_sigma: f64) -> Self {
        let raw = softplus_inverse(init_sigma);
        NoiseHead::Scalar(store.add(name, ParamGroup::Std, Mat::scalar(raw)))
    }

    /// Network whose output bias starts at `init_sigma` (weights of the last
    /// layer zeroed so the initial field is flat).
    pub fn hetero(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        init_sigma: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mlp = Mlp::new(store, name, &sizes, Activation::Mish, Activation::Softplus, ParamGroup::Std, rng);
        let last = sizes.len() - 2;
        let (w, b) = mlp.layer_ids(last);
        let (r, c) = (store.entry(w).rows, store.entry(w).cols);
        store.set(w, &Mat::zeros(r, c));
        store.set(b, &Mat::scalar(softplus_inverse(init_sigma)));
        NoiseHead::Hetero(mlp)
    }

    /// `1 x 1` (scalar) or `n x 1` (heteroscedastic).
    pub fn sigma(&self, g: &mut Graph, p: &Bound, x: &Mat) -> Var {
        match self {
            NoiseHead::Scalar(id) => g.act(p.var(*id), Activation::Softplus),
            NoiseHead::Hetero(mlp) => {
                let xv = g.constant(x.clone());
                mlp.forward(g, p, xv)
            }
        }
    }

    pub fn sigma_at(&self, params: &ParamStore, x: &[f64]) -> Result<f64> {
        match self {
            NoiseHead::Scalar(id) => Ok(Activation::Softplus.eval(params.slice(*id)[0])),
            NoiseHead::Hetero(mlp) => Ok(mlp.eval(params, x)?[0]),
        }
    }
}

/// `μ + σ ω_D`.
pub fn sample_output(mu: f64, sigma: f64, omega_d: f64) -> f64 {
    mu + sigma * omega_d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trapezoid_weights_sum_to_volume() {
        let g1 = QuadratureGrid::new(&[-0.7], &[0.7], &[64]).unwrap();
        assert!((g1.volume() - 1.4).abs() < 1e-13);
        let g2 = QuadratureGrid::new(&[-1.0, 0.0], &[1.0, 0.5], &[5, 7]).unwrap();
        assert!((g2.volume() - 1.0).abs() < 1e-13);
        assert_eq!(g2.len(), 35);
        assert!(QuadratureGrid::new(&[0.0], &[1.0], &[1]).is_err());
        assert!(QuadratureGrid::new(&[], &[], &[]).is_err());
    }

    #[test]
    fn weights_are_normalized() {
        let grid = QuadratureGrid::new(&[0.0, 0.0], &[1.0, 1.0], &[9, 9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5)];
            let alpha = (rng.random_range(0.0..1.5f64)).tan();
            let w = normalized_weights(&x, &grid, alpha);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn large_alpha_picks_nearest_node() {
        let grid = QuadratureGrid::new(&[0.0], &[1.0], &[11]).unwrap();
        let w = normalized_weights(&[0.31], &grid, 1e5);
        assert!((w[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn integrate_draws_matches_per_draw_products() {
        let mut g = Graph::new();
        let a = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.3);
        let y = Mat::from_fn(3 * 4, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let av = g.constant(a.clone());
        let yv = g.constant(y.clone());
        let out = integrate_draws(&mut g, av, yv, 3);
        let out = g.value(out).clone();
        for d in 0..3 {
            let expect = a.matmul(&y.slice_rows(d * 4, 4));
            assert_eq!(out.slice_rows(d * 3, 3), expect);
        }
    }

    fn setup(seed: u64, width: usize) -> (ParamStore, Mlp, OperatorLayer, QuadratureGrid) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = Mlp::new(&mut store, "feat", &[1, 8, width], Activation::Mish, Activation::Identity, ParamGroup::Mean, &mut rng);
        let layer = OperatorLayer::new(&mut store, "op", width, &mut rng);
        let grid = QuadratureGrid::new(&[-0.7], &[0.7], &[64]).unwrap();
        (store, feat, layer, grid)
    }

    /// Output jet of one layer at a single target point.
    fn layer_at(store: &ParamStore, feat: &Mlp, layer: &OperatorLayer, grid: &QuadratureGrid, x: f64) -> jet::SpatialJet {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let pts = Mat::col_vector(vec![x]);
        let xj = FieldJet::coordinates(&mut g, &pts);
        let zt = feat.forward_jet(&mut g, &p, &xj);
        let nodes = g.constant(grid.nodes().clone());
        let zn = feat.forward(&mut g, &p, nodes);
        let tg = KernelGeometry::new(&pts, grid);
        let ng = KernelGeometry::new(grid.nodes(), grid);
        let (out, _) = layer.forward_jet(&mut g, &p, &zt, zn, &tg, &ng, 1);
        out.to_spatial(&g, 0)
    }

    #[test]
    fn layer_jet_matches_finite_differences() {
        let (store, feat, layer, grid) = setup(9, 6);
        let x = 0.2;
        let h = 1e-4;
        let j = layer_at(&store, &feat, &layer, &grid, x);
        let jp = layer_at(&store, &feat, &layer, &grid, x + h);
        let jm = layer_at(&store, &feat, &layer, &grid, x - h);
        for c in 0..6 {
            let d1 = (jp.value[c] - jm.value[c]) / (2.0 * h);
            let d2 = (jp.value[c] - 2.0 * j.value[c] + jm.value[c]) / (h * h);
            let rel1 = (d1 - j.grad[0][c]).abs() / j.grad[0][c].abs().max(1e-2);
            let rel2 = (d2 - j.hess_diag[0][c]).abs() / j.hess_diag[0][c].abs().max(1e-2);
            assert!(rel1 < 1e-4, "grad {c}: {d1} vs {}", j.grad[0][c]);
            assert!(rel2 < 1e-4, "hess {c}: {d2} vs {}", j.hess_diag[0][c]);
        }
    }

    #[test]
    fn constant_latent_integrates_to_v_times_constant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = OperatorLayer::new(&mut store, "op", 3, &mut rng);
        let n = 3;
        store.set(layer.w, &Mat::zeros(n, n));
        let mut layer = layer;
        layer.act = Activation::Identity;
        let grid = QuadratureGrid::new(&[0.0], &[1.0], &[16]).unwrap();
        let pts = Mat::col_vector(vec![0.1, 0.45, 0.97]);
        let c = [0.4, -1.2, 2.0];
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zt = FieldJet::values_only(g.constant(Mat::from_fn(3, n, |_, j| c[j])));
        let zn = g.constant(Mat::from_fn(16, n, |_, j| c[j]));
        let tg = KernelGeometry::new(&pts, &grid);
        let ng = KernelGeometry::new(grid.nodes(), &grid);
        let (out, _) = layer.forward_jet(&mut g, &p, &zt, zn, &tg, &ng, 1);
        let v = store.get(layer.v);
        let expect = Mat::row_vector(c.to_vec()).matmul(&v);
        for i in 0..3 {
            for j in 0..n {
                assert!((g.value(out.value)[(i, j)] - expect[(0, j)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn identity_stack_is_affine_readout() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut dec = IntegralDecoder::new(&mut store, "dec", 2, 1, 1, &mut rng);
        let l = &mut dec.layers[0];
        l.act = Activation::Identity;
        store.set(l.w, &Mat::identity(2));
        store.set(l.v, &Mat::zeros(2, 2));
        store.set(dec.out_w, &Mat::col_vector(vec![2.0, -1.0]));
        store.set(dec.out_b, &Mat::scalar(0.5));
        let grid = QuadratureGrid::new(&[0.0], &[1.0], &[8]).unwrap();
        let pts = Mat::col_vector(vec![0.3]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zt = FieldJet::values_only(g.constant(Mat::row_vector(vec![1.5, 4.0])));
        let zn = g.constant(Mat::zeros(8, 2));
        let tg = KernelGeometry::new(&pts, &grid);
        let ng = KernelGeometry::new(grid.nodes(), &grid);
        let inputs = DecoderInputs {
            targets: vec![zt],
            nodes: zn,
            draws: 1,
            target_geoms: vec![&tg],
            node_geom: Some(&ng),
        };
        let mu = Decoder::Integral(dec).decode_mean_jet(&mut g, &p, &inputs).remove(0);
        assert!((g.scalar_value(mu.value) - (2.0 * 1.5 - 4.0 + 0.5)).abs() < 1e-14);
    }

    #[test]
    fn deeponet_with_unit_branch_reads_first_trunk_feature() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = tensor_grid(&[0.0], &[1.0], &[4]);
        let head = DeepOnetHead::new(&mut store, grid, 2, &[5], 3, &mut rng);
        // branch ≡ e₁: zero weights, bias (1, 0, 0)
        for i in 0..2 {
            let (w, b) = head.branch.layer_ids(i);
            let e = store.entry(w).clone();
            store.set(w, &Mat::zeros(e.rows, e.cols));
            let e = store.entry(b).clone();
            store.set(b, &Mat::zeros(e.rows, e.cols));
        }
        store.set(head.branch.layer_ids(1).1, &Mat::row_vector(vec![1.0, 0.0, 0.0]));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let pts = Mat::from_vec(2, 1, vec![0.2, 0.8]);
        let xj = FieldJet::coordinates(&mut g, &pts);
        let xj2 = jet::scale(&mut g, &xj, 1.0);
        let targets = FieldJet {
            value: g.concat_cols(&[xj.value, xj2.value]),
            grad: vec![g.concat_cols(&[xj.grad[0], xj2.grad[0]])],
            hess: vec![None],
        };
        let nodes = g.constant(Mat::filled(4, 2, 0.3));
        let tgrid = QuadratureGrid::new(&[0.0], &[1.0], &[4]).unwrap();
        let tg = KernelGeometry::new(&pts, &tgrid);
        let inputs = DecoderInputs {
            targets: vec![targets.clone()],
            nodes,
            draws: 1,
            target_geoms: vec![&tg],
            node_geom: None,
        };
        let mu = head.forward(&mut g, &p, &inputs).remove(0);
        let tr = head.trunk.forward_jet(&mut g, &p, &targets);
        for i in 0..2 {
            assert!((g.value(mu.value)[(i, 0)] - g.value(tr.value)[(i, 0)]).abs() < 1e-14);
            assert!((g.value(mu.grad[0])[(i, 0)] - g.value(tr.grad[0])[(i, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn noise_heads_start_at_requested_sigma() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = NoiseHead::scalar(&mut store, "noise.u", 0.02);
        let h = NoiseHead::hetero(&mut store, "noise.f", 1, &[4], 0.2, &mut rng);
        assert!((s.sigma_at(&store, &[0.0]).unwrap() - 0.02).abs() < 1e-15);
        assert!((h.sigma_at(&store, &[0.7]).unwrap() - 0.2).abs() < 1e-14);
    }

    #[test]
    fn sampled_output_statistics() {
        assert_eq!(sample_output(1.3, 0.5, 0.0), 1.3);
        assert!((sample_output(0.0, 0.1, 1.0) - 0.1).abs() < 1e-16);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_output(2.0, 0.1, rng.sample(StandardNormal)))
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - 0.1).abs() < 1e-3);
    }
}
