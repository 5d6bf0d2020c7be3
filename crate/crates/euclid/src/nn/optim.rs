//! Named parameter storage, Adam, and Polyak-averaged target parameters.

use std::collections::BTreeMap;

use crate::nn::error::{NnError, NnResult};
use crate::nn::tape::GradMap;
use crate::nn::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Named parameter tensors plus Adam first/second moment accumulators and a
/// step counter. `BTreeMap` keeps iteration order deterministic, which in
/// turn keeps whole training runs bitwise reproducible.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    adam_m: BTreeMap<String, Tensor>,
    adam_v: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> NnResult<&Tensor> {
        self.params.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> NnResult<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn adam_moments(&self, name: &str) -> (Option<&Tensor>, Option<&Tensor>) {
        (self.adam_m.get(name), self.adam_v.get(name))
    }

    /// Copy all parameters (not moments) from another store. Names must match
    /// one-to-one where present in `self`.
    pub fn copy_params_from(&mut self, other: &ParamStore, prefix: &str) -> NnResult<()> {
        for (name, value) in &other.params {
            if !name.starts_with(prefix) {
                continue;
            }
            let dst = self
                .params
                .get_mut(name)
                .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            dst.require_same_shape(value, name)?;
            *dst = value.clone();
        }
        Ok(())
    }

    /// Restore a first-moment accumulator, used when loading a checkpoint.
    pub(crate) fn restore_moment_m(&mut self, name: &str, value: Tensor) -> NnResult<()> {
        self.get(name)?.require_same_shape(&value, name)?;
        self.adam_m.insert(name.to_string(), value);
        Ok(())
    }

    /// Restore a second-moment accumulator, used when loading a checkpoint.
    pub(crate) fn restore_moment_v(&mut self, name: &str, value: Tensor) -> NnResult<()> {
        self.get(name)?.require_same_shape(&value, name)?;
        self.adam_v.insert(name.to_string(), value);
        Ok(())
    }

    pub(crate) fn restore_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One Adam update. Every gradient key must name an existing parameter of
    /// identical shape; parameters without a gradient are left untouched
    /// (their moments do not decay). The step counter advances once per call.
    pub fn adam_step(&mut self, grads: &GradMap, lr: f64) -> NnResult<()> {
        for (name, grad) in grads {
            let param = self
                .params
                .get(name)
                .ok_or_else(|| NnError::GradientKey(name.clone()))?;
            param.require_same_shape(grad, name)?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, grad) in grads {
            let param = self.params.get_mut(name).expect("validated above");
            let m = self
                .adam_m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            let v = self
                .adam_v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            let (pd, md, vd, gd) =
                (param.data_mut(), m.data_mut(), v.data_mut(), grad.data());
            for i in 0..gd.len() {
                let g = gd[i];
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Shadow copy of a parameter set, refreshed by Polyak averaging every
/// `period` source updates. Shadow values enter loss graphs only as
/// constants, so they can never receive gradient.
#[derive(Clone)]
pub struct TargetTracker {
    shadow: BTreeMap<String, Tensor>,
    period: u64,
    blend: f64,
    ticks: u64,
}

impl TargetTracker {
    /// Start tracking every parameter of `source` whose name begins with one
    /// of `prefixes` (empty list means all). The shadow starts as an exact
    /// copy.
    pub fn new(source: &ParamStore, prefixes: &[&str], period: u64, blend: f64) -> Self {
        assert!(period > 0, "target update period must be positive");
        assert!((0.0..=1.0).contains(&blend), "blend must be in [0, 1]");
        let shadow = source
            .iter()
            .filter(|(name, _)| prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(name, value)| (name.to_string(), value.clone()))
            .collect();
        TargetTracker { shadow, period, blend, ticks: 0 }
    }

    pub fn get(&self, name: &str) -> NnResult<&Tensor> {
        self.shadow.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.shadow.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Overwrite a shadow entry, used when restoring from a checkpoint.
    pub fn set(&mut self, name: &str, value: Tensor) {
        self.shadow.insert(name.to_string(), value);
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn set_ticks(&mut self, ticks: u64) {
        self.ticks = ticks;
    }

    /// Record one source update; blends on every `period`-th call.
    pub fn tick(&mut self, source: &ParamStore) -> NnResult<()> {
        self.ticks += 1;
        if self.ticks % self.period == 0 {
            self.blend_now(source)?;
        }
        Ok(())
    }

    /// shadow <- (1 - blend) * shadow + blend * source, unconditionally.
    pub fn blend_now(&mut self, source: &ParamStore) -> NnResult<()> {
        let blend = self.blend;
        for (name, shadow) in self.shadow.iter_mut() {
            let src = source.get(name)?;
            shadow.require_same_shape(src, name)?;
            let (sd, od) = (shadow.data_mut(), src.data());
            for i in 0..sd.len() {
                sd[i] = (1.0 - blend) * sd[i] + blend * od[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::row_vector(value));
        s
    }

    fn grad_for(value: &[f64]) -> GradMap {
        let mut g = GradMap::new();
        g.insert("p".to_string(), Tensor::row_vector(value));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = single_param(&[1.5, -2.0]);
        s.adam_step(&grad_for(&[0.0, 0.0]), 0.1).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(s.step_count(), 1);
        let (m, v) = s.adam_moments("p");
        assert!(m.unwrap().data().iter().all(|&x| x == 0.0));
        assert!(v.unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut s = single_param(&[0.0, 0.0, 0.0]);
        s.adam_step(&grad_for(&[3.0, -0.2, 1e-6]), 0.01).unwrap();
        let p = s.get("p").unwrap().data();
        assert!(p[0] < 0.0);
        assert!(p[1] > 0.0);
        assert!(p[2] < 0.0);
    }

    #[test]
    fn descends_scalar_quadratic() {
        // f(p) = (p - 1)^2 from p = 0 with lr = 0.1: ten steps must move
        // strictly closer to the minimizer.
        let mut s = single_param(&[0.0]);
        for _ in 0..10 {
            let p = s.get("p").unwrap().get(0, 0);
            let g = grad_for(&[2.0 * (p - 1.0)]);
            s.adam_step(&g, 0.1).unwrap();
        }
        let p = s.get("p").unwrap().get(0, 0);
        assert!((p - 1.0).abs() < 1.0, "p = {p} did not approach 1");
        assert_eq!(s.step_count(), 10);
    }

    #[test]
    fn unknown_gradient_key_is_an_error() {
        let mut s = single_param(&[0.0]);
        let mut g = GradMap::new();
        g.insert("q".to_string(), Tensor::row_vector(&[1.0]));
        assert!(matches!(s.adam_step(&g, 0.1), Err(NnError::GradientKey(_))));
    }

    #[test]
    fn target_blend_arithmetic() {
        let mut src = ParamStore::new();
        src.insert("p", Tensor::row_vector(&[1.0]));

        // blend 1.0 is a hard copy
        let mut zero_src = ParamStore::new();
        zero_src.insert("p", Tensor::row_vector(&[0.0]));
        let mut hard = TargetTracker::new(&zero_src, &[], 1, 1.0);
        hard.blend_now(&src).unwrap();
        assert_eq!(hard.get("p").unwrap().data(), &[1.0]);

        // blend 0.0 never moves
        let mut frozen = TargetTracker::new(&zero_src, &[], 1, 0.0);
        frozen.blend_now(&src).unwrap();
        assert_eq!(frozen.get("p").unwrap().data(), &[0.0]);

        // blend 0.01 from 0 toward 1 lands exactly on 0.01
        let mut soft = TargetTracker::new(&zero_src, &[], 1, 0.01);
        soft.blend_now(&src).unwrap();
        assert_eq!(soft.get("p").unwrap().data(), &[0.01]);
    }

    #[test]
    fn tick_blends_only_on_period() {
        let mut src = ParamStore::new();
        src.insert("p", Tensor::row_vector(&[1.0]));
        let mut zero_src = ParamStore::new();
        zero_src.insert("p", Tensor::row_vector(&[0.0]));

        let mut t = TargetTracker::new(&zero_src, &[], 2, 1.0);
        t.tick(&src).unwrap();
        assert_eq!(t.get("p").unwrap().data(), &[0.0], "no blend after one tick");
        t.tick(&src).unwrap();
        assert_eq!(t.get("p").unwrap().data(), &[1.0], "blend on the second tick");
    }

    #[test]
    fn tracker_prefix_filter_selects_subset() {
        let mut src = ParamStore::new();
        src.insert("enc.w0", Tensor::row_vector(&[1.0]));
        src.insert("actor.w0", Tensor::row_vector(&[2.0]));
        let t = TargetTracker::new(&src, &["enc."], 2, 0.01);
        assert!(t.get("enc.w0").is_ok());
        assert!(t.get("actor.w0").is_err());
    }
}
