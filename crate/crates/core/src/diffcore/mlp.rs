//! Fully-connected networks evaluated on the graph, with spatial jets.

use rand::Rng;
use rand_distr::StandardNormal;

use super::activation::Activation;
use super::graph::{Graph, Var};
use super::jet::{self, FieldJet, SpatialJet};
use super::mat::Mat;
use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers `{prefix}.w{i}` (`in x out`) and `{prefix}.b{i}` in `store`.
    /// Weights are drawn from `N(0, 1/fan_in)`, biases start at zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an Mlp needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                let weights = Mat::from_fn(w[0], w[1], |_, _| {
                    scale * rng.sample::<f64, _>(StandardNormal)
                });
                let wid = store.add(&format!("{prefix}.w{i}"), group, weights);
                let bid = store.add(&format!("{prefix}.b{i}"), group, Mat::zeros(1, w[1]));
                (wid, bid)
            })
            .collect();
        Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    /// `(weight, bias)` ids of layer `i`.
    pub fn layer_ids(&self, i: usize) -> (ParamId, ParamId) {
        self.layers[i]
    }

    fn act_for(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Batched forward of `x` (`n x input_dim`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, p.var(w));
            let z = g.add(z, p.var(b));
            h = match self.act_for(i) {
                Activation::Identity => z,
                act => g.act(z, act),
            };
        }
        h
    }

    /// Batched forward carrying spatial jets.
    pub fn forward_jet(&self, g: &mut Graph, p: &Bound, x: &FieldJet) -> FieldJet {
        let mut h = x.clone();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = jet::affine(g, &h, p.var(w), p.var(b));
            h = jet::activate(g, &z, self.act_for(i));
        }
        h
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::config(format!(
                "input has {} coordinates, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Plain evaluation at one point.
    pub fn eval(&self, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut g = Graph::inference();
        let p = params.bind(&mut g);
        let xv = g.constant(Mat::row_vector(x.to_vec()));
        let y = self.forward(&mut g, &p, xv);
        Ok(g.value(y).as_slice().to_vec())
    }

    /// Value, gradient and pure second derivatives at one point.
    pub fn spatial_jet(&self, params: &ParamStore, x: &[f64]) -> Result<SpatialJet> {
        self.check_point(x)?;
        let mut g = Graph::inference();
        let p = params.bind(&mut g);
        let xj = FieldJet::coordinates(&mut g, &Mat::row_vector(x.to_vec()));
        let y = self.forward_jet(&mut g, &p, &xj);
        Ok(y.to_spatial(&g, 0))
    }
}
