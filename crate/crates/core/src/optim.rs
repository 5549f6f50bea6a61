//! Named parameter sets, their tape bindings, and the AdamW optimizer.
//!
//! Parameters live in an insertion-ordered map so that iteration, checkpoint
//! serialization, and optimizer updates are all deterministic for a given
//! construction order.

use crate::autodiff::{Gradients, Tape, Var};
use crate::Scalar;
use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// All trainable arrays of a model, keyed by a dotted path such as
/// `prosody_enc.conv0.weight`.
#[derive(Clone, Debug)]
pub struct ParamSet<F: Scalar> {
    entries: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    /// Panics on unknown names: parameter paths are fixed at construction.
    pub fn get(&self, name: &str) -> &Array2<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<F> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all arrays.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn to_f64(&self) -> IndexMap<String, Array2<f64>> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(Scalar::to_f64)))
            .collect()
    }

    pub fn from_f64(map: &IndexMap<String, Array2<f64>>) -> Self {
        ParamSet {
            entries: map
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(F::from_f64)))
                .collect(),
        }
    }
}

/// Tape leaves for every parameter of a set, in set order.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Push every parameter onto the tape as a leaf.
    pub fn bind<F: Scalar>(tape: &mut Tape<F>, params: &ParamSet<F>) -> Self {
        let mut vars = IndexMap::new();
        for (name, value) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(value.clone()));
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// Gradients per parameter; zeros for parameters the loss never touched.
    pub fn collect_grads<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        grads: &Gradients<F>,
    ) -> GradSet<F> {
        let mut entries = IndexMap::new();
        for (name, var) in &self.vars {
            let g = match grads.get(*var) {
                Some(g) => g.clone(),
                None => Array2::zeros(params.get(name).dim()),
            };
            entries.insert(name.clone(), g);
        }
        GradSet { entries }
    }
}

/// Gradients keyed like the parameter set they were collected for.
pub struct GradSet<F: Scalar> {
    entries: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> GradSet<F> {
    pub fn get(&self, name: &str) -> &Array2<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown gradient `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW<F: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: IndexMap<String, Array2<F>>,
    second_moment: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &GradSet<F>) {
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let lr = F::from_f64(self.learning_rate);
        let eps = F::from_f64(self.eps);
        let wd = F::from_f64(self.weight_decay);
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.step as i32));

        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.dim()));
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.dim()));
            azip(m, g, |m, g| *m = b1 * *m + (one - b1) * g);
            azip(v, g, |v, g| *v = b2 * *v + (one - b2) * g * g);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

fn azip<F: Scalar>(dst: &mut Array2<F>, src: &Array2<F>, f: impl Fn(&mut F, F)) {
    ndarray::Zip::from(dst).and(src).for_each(|d, &s| f(d, s));
}

/// Matrix of independent standard-normal draws, converted from f64 so the
/// stream is identical across scalar types.
pub fn randn<F: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        F::from_f64(x * std)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut params = ParamSet::<f64>::new();
        params.insert("x", Array2::from_elem((1, 3), 5.0));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let g = params.get("x").clone();
            let mut grads = GradSet {
                entries: IndexMap::new(),
            };
            grads.entries.insert("x".to_string(), g);
            opt.step(&mut params, &grads);
        }
        for &v in params.get("x") {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut params = ParamSet::<f32>::new();
        params.insert("w", randn(&mut rng, 4, 4, 1.0));
        let before = params.get("w").clone();
        let mut grads = GradSet {
            entries: IndexMap::new(),
        };
        grads
            .entries
            .insert("w".to_string(), randn(&mut rng, 4, 4, 1.0));
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&mut params, &grads);
        assert_eq!(params.get("w"), &before);
    }
}
