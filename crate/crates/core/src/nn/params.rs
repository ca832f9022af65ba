use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// One learnable tensor with its Adam moment state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub steps: u64,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            steps: 0,
        }
    }
}

/// Named learnable tensors, iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Re-registering a name with a different shape
    /// is an error; the same shape keeps the existing value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if let Some(existing) = self.entries.get(&name) {
            existing.value.same_shape(&value, "param(reinsert)")?;
            return Ok(());
        }
        self.entries.insert(name, ParamEntry::new(value));
        Ok(())
    }

    /// Glorot-uniform weight: entries in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<(), NnError> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.insert(name, Tensor::new(fan_in, fan_out, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<(), NnError> {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NnError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Overwrites a value, keeping shape and optimizer state.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        let slot = self.value_mut(name)?;
        slot.same_shape(&value, "set_value")?;
        *slot = value;
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub(crate) fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coefficients.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Same names and shapes in both sets.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<(), NnError> {
        if self.len() != other.len() {
            return Err(NnError::Consistency(format!(
                "parameter count differs: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(NnError::Consistency(format!("parameter `{na}` vs `{nb}`")));
            }
            a.same_shape(b, "param layout")?;
        }
        Ok(())
    }

    /// Copy of the values only, with fresh optimizer state.
    pub fn values_only(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), ParamEntry::new(e.value.clone())))
                .collect(),
        }
    }

    /// Redraws every coefficient uniformly from `[-bound, bound]`.
    pub fn randomize_uniform<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        for e in self.entries.values_mut() {
            for x in e.value.data_mut() {
                *x = rng.gen_range(-bound..=bound);
            }
        }
    }

    /// Sets every coefficient to zero.
    pub fn zero_values(&mut self) {
        for e in self.entries.values_mut() {
            e.value.data_mut().fill(0.0);
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradSet {
    /// Zero gradient for every parameter in `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`; names missing from `self` are added.
    pub fn accumulate(&mut self, other: &GradSet) -> Result<(), NnError> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(mine) => {
                    mine.same_shape(g, "grad accumulate")?;
                    mine.add_assign(g);
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_sorted_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        p.insert_glorot("z.w", 10, 20, &mut rng).unwrap();
        p.insert_zeros("a.b", 1, 20).unwrap();
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(p.value("z.w").unwrap().data().iter().all(|v| v.abs() <= limit));
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a.b", "z.w"]);
    }

    #[test]
    fn shapes_are_fixed() {
        let mut p = ParamSet::new();
        p.insert_zeros("w", 2, 2).unwrap();
        assert!(p.insert_zeros("w", 3, 2).is_err());
        assert!(p.set_value("w", Tensor::zeros(2, 3)).is_err());
        assert!(p.value("missing").is_err());
    }
}
