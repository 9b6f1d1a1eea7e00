//! Named, grouped trainable parameters stored in one flat buffer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::mat::Mat;
use crate::error::{Error, Result};

/// Which optimisation phase a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Mean,
    Std,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Mean => 0,
            ParamGroup::Std => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(ParamGroup::Mean),
            1 => Some(ParamGroup::Std),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    /// Box constraint re-applied after every optimiser step.
    pub bounds: Option<(f64, f64)>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Mat) -> ParamId {
        self.add_bounded(name, group, value, None)
    }

    pub fn add_bounded(
        &mut self,
        name: &str,
        group: ParamGroup,
        value: Mat,
        bounds: Option<(f64, f64)>,
    ) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            rows: value.rows(),
            cols: value.cols(),
            offset: self.data.len(),
            bounds,
        });
        self.data.extend_from_slice(value.as_slice());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        let (o, n) = (e.offset, e.len());
        &mut self.data[o..o + n]
    }

    pub fn get(&self, id: ParamId) -> Mat {
        let e = &self.entries[id.0];
        Mat::from_vec(e.rows, e.cols, self.slice(id).to_vec())
    }

    pub fn get_by_name(&self, name: &str) -> Option<Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: &Mat) {
        let e = &self.entries[id.0];
        assert_eq!((e.rows, e.cols), value.shape());
        self.slice_mut(id).copy_from_slice(value.as_slice());
    }

    pub fn num_scalars(&self) -> usize {
        self.data.len()
    }

    pub fn flatten(&self) -> &[f64] {
        &self.data
    }

    pub fn flatten_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.data.len() {
            return Err(Error::config(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.data.len()
            )));
        }
        self.data.copy_from_slice(flat);
        Ok(())
    }

    /// Group tag for every scalar, aligned with [`flatten`](Self::flatten).
    pub fn scalar_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::with_capacity(self.data.len());
        for e in &self.entries {
            out.extend(std::iter::repeat_n(e.group, e.len()));
        }
        out
    }

    /// Clamp bounded entries back into their box.
    pub fn project(&mut self) {
        for e in &self.entries {
            if let Some((lo, hi)) = e.bounds {
                for v in &mut self.data[e.offset..e.offset + e.len()] {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }

    /// Records every entry as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, _)| g.param(self.get(ParamId(i))))
            .collect();
        Bound { vars }
    }

    /// Flat gradient aligned with [`flatten`](Self::flatten); entries the
    /// output does not depend on get zeros.
    pub fn gather(&self, bound: &Bound, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for (e, &v) in self.entries.iter().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                out[e.offset..e.offset + e.len()].copy_from_slice(g.as_slice());
            }
        }
        out
    }
}

/// Graph leaves for every entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(vals in proptest::collection::vec(-10.0f64..10.0, 7)) {
            let mut s = ParamStore::new();
            s.add("a", ParamGroup::Mean, Mat::zeros(2, 2));
            s.add("b", ParamGroup::Std, Mat::zeros(1, 3));
            s.unflatten(&vals).unwrap();
            prop_assert_eq!(s.flatten(), &vals[..]);
            let a = s.get(s.id("a").unwrap());
            prop_assert_eq!(a.as_slice(), &vals[..4]);
            let mut t = s.clone();
            t.unflatten(s.flatten()).unwrap();
            prop_assert_eq!(t, s);
        }
    }

    #[test]
    fn every_scalar_has_one_group() {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Mean, Mat::zeros(3, 2));
        s.add("sigma", ParamGroup::Std, Mat::zeros(1, 1));
        let groups = s.scalar_groups();
        assert_eq!(groups.len(), s.num_scalars());
        assert_eq!(groups.iter().filter(|g| **g == ParamGroup::Std).count(), 1);
    }

    #[test]
    fn bounds_are_projected() {
        let mut s = ParamStore::new();
        let id = s.add_bounded("alpha", ParamGroup::Mean, Mat::scalar(5.0), Some((0.0, 1.0)));
        s.project();
        assert_eq!(s.slice(id), &[1.0]);
    }

    #[test]
    fn wrong_length_unflatten_is_rejected() {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Mean, Mat::zeros(2, 2));
        assert!(s.unflatten(&[1.0]).is_err());
    }
}
