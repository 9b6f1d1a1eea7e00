//! Deterministic PINN and the deep-ensemble baseline built from it.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, AdamConfig, AdamState, FieldJet, Graph, Mat, Mlp, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::gp_prior::stream_rng;
use crate::objectives::residual_graph;
use crate::problems::{ProblemSpec, SensorDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinnConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Residual, boundary and interior-data weights.
    pub w_r: f64,
    pub w_b: f64,
    pub w_d: f64,
    /// L2 penalty on the network parameters.
    pub weight_decay: f64,
    /// Initial value of each inferred quantity (defaults to zeros).
    pub lambda_init: Option<Vec<f64>>,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50],
            activation: Activation::Tanh,
            steps: 10_000,
            adam: AdamConfig::default(),
            w_r: 1.0,
            w_b: 1.0,
            w_d: 1.0,
            weight_decay: 0.0,
            lambda_init: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PinnModel {
    pub spec: ProblemSpec,
    pub store: ParamStore,
    pub net: Mlp,
    pub lambda: Option<ParamId>,
    /// `(step, loss, residual loss)` every 100 steps and at the end.
    pub trace: Vec<(usize, f64, f64)>,
}

impl PinnModel {
    pub fn new(spec: &ProblemSpec, config: &PinnConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![spec.dim()];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let mut store = ParamStore::new();
        let net = Mlp::new(
            &mut store,
            "pinn",
            &sizes,
            config.activation,
            Activation::Identity,
            ParamGroup::Mean,
            rng,
        );
        let lambda = if spec.is_inverse() {
            let init = match &config.lambda_init {
                Some(v) if v.len() == spec.num_unknowns() => v.clone(),
                Some(v) => {
                    return Err(Error::config(format!(
                        "lambda_init has {} entries, problem has {} unknowns",
                        v.len(),
                        spec.num_unknowns()
                    )))
                }
                None => vec![0.0; spec.num_unknowns()],
            };
            Some(store.add("pinn.lambda", ParamGroup::Mean, Mat::row_vector(init)))
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            store,
            net,
            lambda,
            trace: Vec::new(),
        })
    }

    pub fn predict(&self, points: &Mat) -> Vec<f64> {
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let x = g.constant(points.clone());
        let u = self.net.forward(&mut g, &p, x);
        g.value(u).as_slice().to_vec()
    }

    pub fn lambda_values(&self) -> Option<Vec<f64>> {
        self.lambda.map(|id| self.store.slice(id).to_vec())
    }

    /// Composite loss and its parts `(total, residual)`; gradient of the
    /// total when `with_grad`.
    pub fn loss(&self, data: &SensorDataset, config: &PinnConfig, with_grad: bool) -> (f64, f64, Option<Vec<f64>>) {
        let mut g = if with_grad { Graph::new() } else { Graph::inference() };
        let p = self.store.bind(&mut g);
        let lam = self.lambda.map(|id| p.var(id));
        let mse = |g: &mut Graph, pred: Var, y: &[f64]| {
            let y = g.constant(Mat::col_vector(y.to_vec()));
            let r = g.sub(pred, y);
            let r2 = g.square(r);
            g.mean(r2)
        };
        let mut terms: Vec<Var> = Vec::new();
        let mut residual = None;
        if !data.f.is_empty() {
            let x = FieldJet::coordinates(&mut g, &data.f.points);
            let u = self.net.forward_jet(&mut g, &p, &x);
            let f = residual_graph(&mut g, &self.spec, &u, &data.f.points, lam);
            let l = mse(&mut g, f, &data.f.values);
            residual = Some(l);
            terms.push(g.scale(l, config.w_r));
        }
        for (set, w) in [(&data.b, config.w_b), (&data.u, config.w_d)] {
            if set.is_empty() || w == 0.0 {
                continue;
            }
            let x = g.constant(set.points.clone());
            let u = self.net.forward(&mut g, &p, x);
            let l = mse(&mut g, u, &set.values);
            terms.push(g.scale(l, w));
        }
        if config.weight_decay > 0.0 {
            for e in self.store.entries() {
                if e.name == "pinn.lambda" {
                    continue;
                }
                let id = self.store.id(&e.name).expect("entry exists");
                let sq = g.square(p.var(id));
                let s = g.sum(sq);
                terms.push(g.scale(s, config.weight_decay));
            }
        }
        let mut total = g.scalar(0.0);
        for &t in &terms {
            total = g.add(total, t);
        }
        let grad = with_grad.then(|| {
            let grads = g.backward(total);
            self.store.gather(&p, &grads)
        });
        let r = residual.map(|v| g.scalar_value(v)).unwrap_or(0.0);
        (g.scalar_value(total), r, grad)
    }
}

/// Adam minimisation of the composite loss.
pub fn train_pinn(spec: &ProblemSpec, data: &SensorDataset, config: &PinnConfig, seed: u64) -> Result<PinnModel> {
    let mut rng = stream_rng(seed, 0);
    let mut model = PinnModel::new(spec, config, &mut rng)?;
    let mut adam = AdamState::new(config.adam.clone(), model.store.num_scalars());
    for step in 0..config.steps {
        let (loss, res, grad) = model.loss(data, config, true);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                term: "pinn loss".into(),
            });
        }
        if step % 100 == 0 {
            model.trace.push((step, loss, res));
        }
        adam.step(&mut model.store, &grad.expect("requested"), &[]);
    }
    let (loss, res, _) = model.loss(data, config, false);
    if !loss.is_finite() {
        return Err(Error::Training {
            step: config.steps,
            term: "pinn loss".into(),
        });
    }
    model.trace.push((config.steps, loss, res));
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    /// Members that may diverge before the run fails.
    pub max_diverged: usize,
    /// Give every member the master seed (degenerate, for testing).
    pub identical_seeds: bool,
    pub member: PinnConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 20,
            max_diverged: 2,
            identical_seeds: false,
            member: PinnConfig {
                weight_decay: 4e-6,
                ..PinnConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleRun {
    pub seeds: Vec<u64>,
    /// Predictions of each surviving member at the evaluation points.
    pub member_predictions: Vec<Vec<f64>>,
    pub member_lambdas: Vec<Vec<f64>>,
    /// Indices of members that diverged.
    pub diverged: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub lambda_mean: Option<Vec<f64>>,
    pub lambda_std: Option<Vec<f64>>,
}

pub fn member_seeds(master: u64, n: usize, identical: bool) -> Vec<u64> {
    if identical {
        return vec![master; n];
    }
    let mut rng = stream_rng(master, 0xE5);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Pointwise sample mean and standard deviation (`n - 1` denominator) of
/// equally long rows.
pub fn aggregate(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let len = rows.first().map_or(0, |r| r.len());
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for i in 0..len {
        // Deviations from the first member keep identical rows exact.
        let shift = rows[0][i];
        let (s, ss) = rows.iter().fold((0.0, 0.0), |(s, ss), r| {
            let d = r[i] - shift;
            (s + d, ss + d * d)
        });
        mean.push(shift + s / n);
        std.push(if rows.len() < 2 {
            0.0
        } else {
            ((ss - s * s / n) / (n - 1.0)).max(0.0).sqrt()
        });
    }
    (mean, std)
}

/// Trains the members independently on the shared dataset and aggregates
/// their predictions at `eval_points`.
pub fn run_ensemble(
    spec: &ProblemSpec,
    data: &SensorDataset,
    config: &EnsembleConfig,
    master_seed: u64,
    eval_points: &Mat,
) -> Result<EnsembleRun> {
    if config.members == 0 {
        return Err(Error::config("an ensemble needs at least one member"));
    }
    let seeds = member_seeds(master_seed, config.members, config.identical_seeds);
    let mut preds = Vec::new();
    let mut lambdas = Vec::new();
    let mut diverged = Vec::new();
    for (i, &s) in seeds.iter().enumerate() {
        match train_pinn(spec, data, &config.member, s) {
            Ok(m) => {
                let p = m.predict(eval_points);
                if p.iter().all(|v| v.is_finite()) {
                    preds.push(p);
                    lambdas.extend(m.lambda_values());
                } else {
                    diverged.push(i);
                }
            }
            Err(Error::Training { .. }) => diverged.push(i),
            Err(e) => return Err(e),
        }
    }
    if diverged.len() > config.max_diverged {
        return Err(Error::Training {
            step: config.member.steps,
            term: format!("{} of {} ensemble members", diverged.len(), config.members),
        });
    }
    let (mean, std) = aggregate(&preds);
    let (lambda_mean, lambda_std) = if lambdas.is_empty() {
        (None, None)
    } else {
        let (m, s) = aggregate(&lambdas);
        (Some(m), Some(s))
    };
    Ok(EnsembleRun {
        seeds,
        member_predictions: preds,
        member_lambdas: lambdas,
        diverged,
        mean,
        std,
        lambda_mean,
        lambda_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate_dataset, make_problem, NoiseCase};

    fn rel_l2(spec: &ProblemSpec, model: &PinnModel) -> f64 {
        let x = crate::operator_decoder::tensor_grid(&spec.lower, &spec.upper, &[201]);
        let p = model.predict(&x);
        let (mut num, mut den) = (0.0, 0.0);
        for (i, v) in p.iter().enumerate() {
            let e = spec.exact_u(x.row(i));
            num += (v - e).powi(2);
            den += e * e;
        }
        (num / den).sqrt()
    }

    #[test]
    fn aggregation_matches_hand_statistics() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![5.0, 2.0]];
        let (m, s) = aggregate(&rows);
        assert_eq!(m, vec![3.0, 2.0]);
        assert_eq!(s, vec![2.0, 0.0]);
    }

    #[test]
    fn member_seeds_are_distinct_and_reproducible() {
        let a = member_seeds(7, 20, false);
        let b = member_seeds(7, 20, false);
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 20);
        assert_eq!(member_seeds(7, 3, true), vec![7, 7, 7]);
    }

    #[test]
    fn identical_seeds_give_zero_spread() {
        let spec = make_problem("poisson1d").unwrap();
        let data = generate_dataset(&spec, 1, &NoiseCase::noiseless());
        let cfg = EnsembleConfig {
            members: 3,
            identical_seeds: true,
            member: PinnConfig {
                steps: 20,
                hidden: vec![8],
                ..PinnConfig::default()
            },
            ..EnsembleConfig::default()
        };
        let x = Mat::col_vector(vec![-0.5, 0.0, 0.4]);
        let run = run_ensemble(&spec, &data, &cfg, 11, &x).unwrap();
        assert!(run.std.iter().all(|&s| s == 0.0));
        assert_eq!(run.member_predictions.len(), 3);
    }

    #[test]
    fn weight_decay_gradient_is_linear_in_weights() {
        let spec = make_problem("poisson1d").unwrap();
        let mut data = generate_dataset(&spec, 1, &NoiseCase::noiseless());
        data.f = data.f.truncate(0);
        data.b = data.b.truncate(0);
        let cfg = PinnConfig {
            hidden: vec![4],
            weight_decay: 0.5,
            ..PinnConfig::default()
        };
        // With no data the loss is ½‖θ‖², whose gradient is θ.
        let mut rng = stream_rng(3, 0);
        let m = PinnModel::new(&spec, &cfg, &mut rng).unwrap();
        let (_, _, g) = m.loss(&data, &cfg, true);
        for (a, b) in g.unwrap().iter().zip(m.store.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn pinn_solves_noiseless_poisson() {
        let spec = make_problem("poisson1d").unwrap();
        let data = generate_dataset(&spec, 1, &NoiseCase::noiseless());
        let cfg = PinnConfig {
            steps: 6000,
            ..PinnConfig::default()
        };
        let m = train_pinn(&spec, &data, &cfg, 4).unwrap();
        let err = rel_l2(&spec, &m);
        assert!(err < 0.02, "rel. L2 {err}");
        let first = m.trace.first().unwrap().2;
        let last = m.trace.last().unwrap().2;
        assert!(first / last >= 100.0, "residual {first} -> {last}");
    }

    #[test]
    fn pinn_recovers_lambda_without_noise() {
        let spec = make_problem("nlpoisson1d_inverse").unwrap();
        let data = generate_dataset(&spec, 1, &NoiseCase::noiseless());
        let cfg = PinnConfig {
            steps: 6000,
            ..PinnConfig::default()
        };
        let m = train_pinn(&spec, &data, &cfg, 5).unwrap();
        let lam = m.lambda_values().unwrap()[0];
        assert!((lam - 0.7).abs() < 1e-2, "lambda {lam}");
    }
}
