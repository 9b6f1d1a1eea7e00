//! Confidence-gated encoder `z₁ = m ⊙ z̄ + (1 - m) ⊙ z₀` and the latent
//! regularisers.

use rand::Rng;

use crate::diffcore::{jet, Activation, Bound, FieldJet, Graph, Mat, Mlp, ParamGroup, ParamStore, Var};
use crate::error::Result;

/// Floor for `1 - m` inside logarithms.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct EncoderNets {
    /// Confidence `m(x) ∈ [0, 1]^{d_z}` (sigmoid output).
    pub m_net: Mlp,
    /// Deterministic feature `z̄(x) ∈ R^{d_z}`.
    pub zbar_net: Mlp,
    pub latent_dim: usize,
}

/// Draw-independent encoder outputs at a batch of points.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub m: FieldJet,
    pub zbar: FieldJet,
}

impl EncoderNets {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(latent_dim);
        let m_net = Mlp::new(
            store,
            "enc.m",
            &sizes,
            Activation::Mish,
            Activation::Sigmoid,
            ParamGroup::Mean,
            rng,
        );
        let zbar_net = Mlp::new(
            store,
            "enc.zbar",
            &sizes,
            Activation::Mish,
            Activation::Identity,
            ParamGroup::Mean,
            rng,
        );
        Self {
            m_net,
            zbar_net,
            latent_dim,
        }
    }

    /// `m` and `z̄` at the points of `x` (jets if `x` carries derivatives).
    pub fn features(&self, g: &mut Graph, p: &Bound, x: &FieldJet) -> EncoderFeatures {
        if x.has_derivatives() {
            EncoderFeatures {
                m: self.m_net.forward_jet(g, p, x),
                zbar: self.zbar_net.forward_jet(g, p, x),
            }
        } else {
            EncoderFeatures {
                m: FieldJet::values_only(self.m_net.forward(g, p, x.value)),
                zbar: FieldJet::values_only(self.zbar_net.forward(g, p, x.value)),
            }
        }
    }

    /// Latent distribution `N(m z̄, diag(1 - m)²)` at one point.
    pub fn latent_dist(&self, params: &ParamStore, x: &[f64]) -> Result<LatentDist> {
        let m = self.m_net.eval(params, x)?;
        let zbar = self.zbar_net.eval(params, x)?;
        Ok(LatentDist {
            mean: m.iter().zip(&zbar).map(|(a, b)| a * b).collect(),
            std: m.iter().map(|a| 1.0 - a).collect(),
        })
    }
}

/// Combines encoder features with a prior path jet via the Leibniz rule.
pub fn encode_jet(g: &mut Graph, feats: &EncoderFeatures, z0: &FieldJet) -> FieldJet {
    let gated = jet::mul(g, &feats.m, &feats.zbar);
    let one_minus_m = jet::one_minus(g, &feats.m);
    let noise = jet::mul(g, &one_minus_m, z0);
    jet::add(g, &gated, &noise)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDist {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentDist {
    pub fn variance(&self) -> Vec<f64> {
        self.std.iter().map(|s| s * s).collect()
    }
}

/// `KL(N(m z̄, diag(1-m)²) ‖ N(0, I))` summed over latent components and
/// averaged over the rows of `m`, `zbar` (`B x d_z`).
pub fn latent_kl_independent(g: &mut Graph, m: Var, zbar: Var) -> Var {
    let (b, _) = g.shape(m);
    let d = g.one_minus(m);
    let d_floor = g.clamp_min(d, STD_FLOOR);
    let log_d = g.ln(d_floor);
    let mz = g.mul(m, zbar);
    let d2 = g.square(d);
    let mz2 = g.square(mz);
    let quad = g.add(d2, mz2);
    let quad = g.add_scalar(quad, -1.0);
    let half = g.scale(quad, 0.5);
    let per = g.sub(half, log_d);
    let total = g.sum(per);
    g.scale(total, 1.0 / b as f64)
}

/// Plain-value version of [`latent_kl_independent`] for a single point.
pub fn latent_kl_independent_point(m: &[f64], zbar: &[f64]) -> f64 {
    m.iter()
        .zip(zbar)
        .map(|(&m, &z)| {
            let d = 1.0 - m;
            -d.max(STD_FLOOR).ln() + (d * d + (m * z) * (m * z) - 1.0) / 2.0
        })
        .sum()
}

/// SE Gram matrix `exp(-|x_i - x_j|² / L_c²)` as a differentiable function
/// of the correlation length.
pub fn kernel_matrix(g: &mut Graph, points: &Mat, lc: Var) -> Var {
    let n = points.rows();
    let sq = Mat::from_fn(n, n, |i, j| {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    });
    let sq = g.constant(sq);
    let lc2 = g.square(lc);
    let inv = g.act(lc2, Activation::Recip);
    let scaled = g.mul(sq, inv);
    let neg = g.neg(scaled);
    g.exp(neg)
}

/// Correlated-prior regulariser
/// `(1/2B)[-2 ln det D_m - B + tr(K⁻¹ D_m K D_m) + (m z̄)ᵀ K⁻¹ (m z̄)]`,
/// summed over latent components (which are independent under both the
/// encoder and the prior).
pub fn latent_kl_correlated(
    g: &mut Graph,
    m: Var,
    zbar: Var,
    k: Var,
    jitter: f64,
    max_jitter: f64,
) -> Result<Var> {
    let (b, dz) = g.shape(m);
    let d = g.one_minus(m);
    let d_floor = g.clamp_min(d, STD_FLOOR);
    let log_d = g.ln(d_floor);
    let logdet = g.sum(log_d);
    let logdet_term = g.scale(logdet, -2.0);

    // tr(K⁻¹ D K D) = dᵀ (K⁻¹ ∘ K) d per component.
    let eye = g.constant(Mat::identity(b));
    let kinv = g.spd_solve(k, eye, jitter, max_jitter)?;
    let p = g.mul(kinv, k);
    let pd = g.matmul(p, d);
    let dpd = g.mul(d, pd);
    let trace = g.sum(dpd);

    let v = g.mul(m, zbar);
    let kinv_v = g.spd_solve(k, v, jitter, max_jitter)?;
    let vkv = g.mul(v, kinv_v);
    let quad = g.sum(vkv);

    let s = g.add(logdet_term, trace);
    let s = g.add(s, quad);
    let s = g.add_scalar(s, -((b * dz) as f64));
    Ok(g.scale(s, 1.0 / (2.0 * b as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn kl_graph(m: &Mat, z: &Mat) -> f64 {
        let mut g = Graph::new();
        let mv = g.constant(m.clone());
        let zv = g.constant(z.clone());
        let kl = latent_kl_independent(&mut g, mv, zv);
        g.scalar_value(kl)
    }

    #[test]
    fn independent_kl_special_values() {
        assert_eq!(kl_graph(&Mat::zeros(1, 3), &Mat::filled(1, 3, 5.0)), 0.0);
        let v = kl_graph(&Mat::scalar(0.5), &Mat::scalar(2.0));
        assert!((v - (2f64.ln() + 0.125)).abs() < 1e-15);
        let sat = kl_graph(&Mat::scalar(1.0), &Mat::scalar(0.0));
        assert!(sat.is_finite() && sat > 10.0);
    }

    /// Single-sample log-ratio estimator averaged over many samples.
    #[test]
    fn independent_kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, zbar) = ([0.3, 0.8], [1.5, -0.7]);
        let exact = latent_kl_independent_point(&m, &zbar);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut lr = 0.0;
            for k in 0..2 {
                let s = 1.0 - m[k];
                let eps: f64 = StandardNormal.sample(&mut rng);
                let z = m[k] * zbar[k] + s * eps;
                lr += -s.ln() - 0.5 * eps * eps + 0.5 * z * z;
            }
            sum += lr;
            sumsq += lr * lr;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    fn corr(m: &Mat, z: &Mat, k: &Mat) -> f64 {
        let mut g = Graph::new();
        let mv = g.constant(m.clone());
        let zv = g.constant(z.clone());
        let kv = g.constant(k.clone());
        let r = latent_kl_correlated(&mut g, mv, zv, kv, 0.0, 1e-4).unwrap();
        g.scalar_value(r)
    }

    #[test]
    fn correlated_reg_is_zero_at_zero_confidence() {
        let pts = Mat::col_vector(vec![-0.5, 0.0, 0.3, 0.9]);
        let mut g = Graph::new();
        let lc = g.scalar(1.2);
        let k = kernel_matrix(&mut g, &pts, lc);
        let k = g.value(k).clone();
        let v = corr(&Mat::zeros(4, 2), &Mat::filled(4, 2, 3.0), &k);
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn correlated_reg_with_identity_is_mean_of_independent() {
        let m = Mat::from_vec(3, 2, vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.7]);
        let z = Mat::from_vec(3, 2, vec![1.0, -2.0, 0.5, 0.3, -1.1, 2.2]);
        let expected = kl_graph(&m, &z);
        let got = corr(&m, &z, &Mat::identity(3));
        assert!((got - expected).abs() < 1e-13, "{got} vs {expected}");
        // B = 1 reduces to the single-point formula.
        let got1 = corr(&Mat::scalar(0.5), &Mat::scalar(2.0), &Mat::scalar(1.0));
        assert!((got1 - latent_kl_independent_point(&[0.5], &[2.0])).abs() < 1e-14);
    }

    #[test]
    fn correlated_reg_saturates_finite() {
        let v = corr(
            &Mat::col_vector(vec![1.0, 0.2]),
            &Mat::col_vector(vec![0.0, 0.0]),
            &Mat::identity(2),
        );
        assert!(v.is_finite() && v > 5.0);
    }

    #[test]
    fn encode_jet_special_cases() {
        let mut g = Graph::new();
        let pts = Mat::col_vector(vec![0.1]);
        let x = FieldJet::coordinates(&mut g, &pts);
        let c = |g: &mut Graph, v: f64| {
            let value = g.constant(Mat::scalar(v));
            let gr = g.constant(Mat::scalar(0.0));
            FieldJet {
                value,
                grad: vec![gr],
                hess: vec![None],
            }
        };
        // z̄ = 2 + 3x, z₀ = 1 + x (through the coordinate jet)
        let two = c(&mut g, 2.0);
        let three_x = jet::scale(&mut g, &x, 3.0);
        let zbar = jet::add(&mut g, &two, &three_x);
        let one = c(&mut g, 1.0);
        let z0 = jet::add(&mut g, &one, &x);
        for (mv, expect_val, expect_grad) in [
            (1.0, 2.3, 3.0),
            (0.0, 1.1, 1.0),
            (0.5, 0.5 * 2.3 + 0.5 * 1.1, 0.5 * 3.0 + 0.5 * 1.0),
        ] {
            let m = c(&mut g, mv);
            let feats = EncoderFeatures {
                m,
                zbar: zbar.clone(),
            };
            let z1 = encode_jet(&mut g, &feats, &z0).to_spatial(&g, 0);
            assert!((z1.value[0] - expect_val).abs() < 1e-14);
            assert!((z1.grad[0][0] - expect_grad).abs() < 1e-14);
        }
    }

    #[test]
    fn latent_variance_is_one_minus_m_squared() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderNets::new(&mut store, 1, &[8], 4, &mut rng);
        let d = enc.latent_dist(&store, &[0.2]).unwrap();
        let m = enc.m_net.eval(&store, &[0.2]).unwrap();
        for (v, m) in d.variance().iter().zip(m) {
            assert!((0.0..=1.0).contains(&m));
            assert!((v - (1.0 - m).powi(2)).abs() < 1e-15);
        }
    }
}
