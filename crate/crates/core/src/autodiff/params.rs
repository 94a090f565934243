use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stable index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Adam first moment.
    pub m: Tensor,
    /// Adam second moment.
    pub v: Tensor,
    /// Adam steps taken by this parameter.
    pub steps: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with gradients and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let shape = value.shape().to_vec();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            steps: 0,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Marks every parameter whose name starts with one of `prefixes` as
    /// trainable and freezes all others.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// One bias-corrected Adam update of every trainable parameter, then zeroes gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self
            .params
            .iter()
            .find(|p| p.trainable && !p.grad.is_finite())
        {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.steps += 1;
            let t = p.steps as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            let value = p.value.data_mut();
            for k in 0..value.len() {
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                value[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Copies values (not optimizer state) of every parameter with `from_prefix`
    /// onto the same-named parameter under `to_prefix`.
    pub fn copy_values(&mut self, from_prefix: &str, to_prefix: &str) -> Result<()> {
        let pairs: Vec<(ParamId, ParamId)> = self
            .by_name
            .iter()
            .filter_map(|(name, &id)| {
                name.strip_prefix(from_prefix)
                    .map(|rest| (id, format!("{to_prefix}{rest}")))
            })
            .map(|(id, target)| self.expect_id(&target).map(|t| (id, t)))
            .collect::<Result<_>>()?;
        for (src, dst) in pairs {
            let v = self.params[src.0].value.clone();
            self.params[dst.0].value = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(s.add("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        s.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.0, 1.0])).unwrap();
        s.accumulate_grad(id, &Tensor::vector(vec![3.0, -0.25]));
        s.adam_step(&AdamConfig::with_lr(1e-3)).unwrap();
        let v = s.value(id).data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(1.0)).unwrap();
        s.accumulate_grad(id, &Tensor::scalar(f64::NAN));
        assert!(matches!(
            s.adam_step(&AdamConfig::with_lr(1e-3)),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", Tensor::scalar(1.0)).unwrap();
        let b = s.add("head.w", Tensor::scalar(1.0)).unwrap();
        s.train_only(&["head."]);
        s.accumulate_grad(a, &Tensor::scalar(1.0));
        s.accumulate_grad(b, &Tensor::scalar(1.0));
        s.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.value(a).data(), &[1.0]);
        assert!(s.value(b).data()[0] < 1.0);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![2.0, -3.0, 1.5])).unwrap();
        let cfg = AdamConfig::with_lr(0.05);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let mut g = Graph::new();
            let x = g.param(&s, id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            losses.push(g.scalar(loss));
            g.backward_into(loss, &mut s).unwrap();
            s.adam_step(&cfg).unwrap();
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
        s.accumulate_grad(id, &Tensor::vector(vec![30.0, 40.0]));
        assert_eq!(s.clip_grad_norm(5.0), 50.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }
}
