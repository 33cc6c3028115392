use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use super::record::{read_records, write_records, Record};
use super::{Gradients, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Named collection of tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Keep only entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrite or add every entry of `other`.
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register every tensor as a trainable leaf on `graph`.
    pub fn attach<'g>(&self, graph: &'g Graph<T>) -> BTreeMap<String, Var<'g, T>> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect()
    }

    /// Register every tensor as a constant on `graph`.
    pub fn attach_frozen<'g>(&self, graph: &'g Graph<T>) -> BTreeMap<String, Var<'g, T>> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect()
    }

    /// Collect the gradients of attached leaves; unreached leaves get zeros.
    pub fn gradients(grads: &Gradients<T>, vars: &BTreeMap<String, Var<'_, T>>) -> Self {
        Self {
            map: vars.iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect(),
        }
    }

    /// `self += other`, entry by entry.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (k, v) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => acc.add_assign(v)?,
                None => {
                    self.map.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for v in self.map.values_mut() {
            v.scale_in_place(c);
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.map
            .iter()
            .map(|(k, v)| Record::from_tensor(k, &v.cast::<f32>()))
            .collect()
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut out = Self::new();
        for r in records {
            let t = r.to_tensor()?;
            out.insert(r.name, t.cast());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_records(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(read_records(path)?)
    }
}

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn xavier_bound_and_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f32> = xavier_uniform(&[8, 4, 3, 3], 36, 72, &mut a);
        let u: Tensor<f32> = xavier_uniform(&[8, 4, 3, 3], 36, 72, &mut b);
        assert_eq!(t, u);
        let bound = (6.0f32 / 108.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn prefix_filter_and_merge() {
        let mut p = Params::<f32>::new();
        p.insert("encoder.a", Tensor::zeros(&[2]));
        p.insert("decoder.a", Tensor::zeros(&[3]));
        let enc = p.filter_prefix("encoder.");
        assert_eq!(enc.names().collect::<Vec<_>>(), ["encoder.a"]);
        let mut q = Params::new();
        q.insert("encoder.a", Tensor::full(&[2], 1.0));
        p.merge(&q);
        assert_eq!(p.get("encoder.a").unwrap().data(), &[1.0, 1.0]);
    }
}
