use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "parameter `{name}` registered twice"
        );
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        self.params[id.0].value.data()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Zeroed gradient buffers shaped like this store.
    pub fn grad_buffers(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
    }

    /// Copies `grads` into the per-parameter accumulators.
    pub fn set_grads(&mut self, grads: &Grads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.grad.data_mut().copy_from_slice(g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    /// Two distinct buffers at once, e.g. a weight and its bias.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a.0, b.0, "pair_mut needs distinct parameters");
        if a.0 < b.0 {
            let (lo, hi) = self.0.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.0.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            super::kernels::add_into(a, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Normal(0, σ) truncated at two standard deviations (resampled).
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized by shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = truncated_normal(&mut rng, &[50, 40], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2]));
        s.get_mut(a).grad.data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[1]));
        s.add("w", Tensor::zeros(&[1]));
    }
}
