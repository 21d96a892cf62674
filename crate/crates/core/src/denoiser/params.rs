use crate::error::{Error, Result};

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.params[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.params[i].data
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    /// `self += k·other`; layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet, k: f64) {
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            for (a, b) in p.data.iter_mut().zip(&q.data) {
                *a += k * b;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for p in &mut self.params {
            for v in &mut p.data {
                *v *= k;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that `other` has the same names and shapes, in order.
    pub fn ensure_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}
