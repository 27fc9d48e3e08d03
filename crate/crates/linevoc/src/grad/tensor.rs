//! Shaped, contiguous, row-major value arrays.

use super::scalar::Scalar;
use crate::rng::Rng;

/// A dense row-major array of scalars with an explicit shape.
///
/// The invariant `product(shape) == data.len()` holds for every constructor.
/// Scalars are represented as shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut buf = vec![0.0f64; n];
        rng.fill_gaussian_f64(&mut buf);
        Tensor {
            shape: shape.to_vec(),
            data: buf.into_iter().map(S::from_f64).collect(),
        }
    }

    /// Uniform entries in [-limit, limit].
    pub fn rand_uniform(shape: &[usize], limit: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n)
                .map(|_| S::from_f64(rng.uniform(-limit, limit)))
                .collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.to_f64().abs()))
    }

    /// Convert element type (used when moving constants between precisions).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }
}

/// A named learnable tensor. The name is the stable key used for gradient
/// collection, optimizer state, and the checkpoint container.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

/// Anything holding named parameters: models, layers, optimizer targets.
/// Visit order is the canonical parameter order for optimizers and
/// checkpoints and must be stable.
pub trait Parameterized<S: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }

    /// Snapshot of all parameters as (name, tensor) pairs in visit order.
    fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out
    }

    /// Overwrite parameters by name from a lookup table, erroring on shape
    /// mismatch; returns how many were loaded.
    fn load_named(
        &mut self,
        table: &std::collections::BTreeMap<String, Tensor<S>>,
    ) -> crate::Result<usize> {
        let mut loaded = 0usize;
        let mut err: Option<crate::Error> = None;
        self.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            if let Some(t) = table.get(&p.name) {
                if t.shape() != p.value.shape() {
                    err = Some(crate::Error::Checkpoint(format!(
                        "shape mismatch for {}: checkpoint {:?} vs model {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                    return;
                }
                p.value = t.clone();
                loaded += 1;
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(loaded),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "does not match")]
    fn shape_element_count_enforced() {
        let _ = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_fn(&[2, 6], |i| i as f32);
        let r = t.reshaped(&[3, 4]);
        assert_eq!(r.shape(), &[3, 4]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let mut a = Rng::seed_from(8);
        let mut b = Rng::seed_from(8);
        let ta = Tensor::<f32>::randn(&[64], &mut a);
        let tb = Tensor::<f32>::randn(&[64], &mut b);
        assert_eq!(ta.data(), tb.data());
    }
}
