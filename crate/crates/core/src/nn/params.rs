use rand::Rng;

use crate::error::{ensure, Result};

use super::tensor::Tensor;

/// Handle to a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameters in registration order. The order is the canonical order
/// for optimizer updates, flattening and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Accumulate `g` into the tensor `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        self.tensors[id.0].add_assign(g)
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        ensure!(
            self.names == other.names,
            Contract,
            "parameter sets have different names"
        );
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            ensure!(
                a.shape() == b.shape(),
                Contract,
                "parameter {n}: shape {:?} vs {:?}",
                a.shape(),
                b.shape()
            );
        }
        Ok(())
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::from_vec(&[n], data).expect("flat length")
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&self, flat: &Tensor) -> Result<Self> {
        ensure!(flat.numel() == self.numel(), Contract, "flat parameter length mismatch");
        let mut out = self.clone();
        let mut off = 0;
        for t in &mut out.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// He-normal initialisation for a layer with `fan_in` inputs.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
