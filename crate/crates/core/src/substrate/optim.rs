use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Learning-rate schedule and batching for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl TrainSchedule {
    /// Linear warmup to `peak_lr`, constant afterwards.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.peak_lr;
        }
        self.peak_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam with decoupled weight decay (zero by default).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    updates: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            moments: HashMap::new(),
            updates: 0,
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update at the scheduled rate for `step_index`.
    ///
    /// Frozen tensors are skipped even if a gradient is supplied. Updated
    /// values are rounded through `f32`, the checkpoint storage precision.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Grads,
        schedule: &TrainSchedule,
        step_index: u64,
    ) -> Result<()> {
        for (name, g) in &grads.0 {
            let t = params.require(name)?;
            if t.values.len() != g.len() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has {} entries, tensor has {}",
                    g.len(),
                    t.values.len()
                )));
            }
        }
        self.updates += 1;
        let lr = schedule.lr(step_index);
        let bc1 = 1.0 - self.beta1.powi(self.updates as i32);
        let bc2 = 1.0 - self.beta2.powi(self.updates as i32);
        for (name, g) in &grads.0 {
            let t = params.get_mut(name).expect("checked above");
            if t.frozen {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let mut p = t.values[i];
                p -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p);
                t.values[i] = p as f32 as f64;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::ParamTensor;

    #[test]
    fn stage_one_schedule_endpoints() {
        let s = TrainSchedule {
            peak_lr: 1e-4,
            warmup_steps: 1000,
            batch_size: 1280,
            epochs: 12,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(1000), 1e-4);
        assert_eq!(s.lr(5000), 1e-4);
        assert!(s.lr(500) > s.lr(499));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store
            .insert(ParamTensor::new("w", vec![3], vec![0.5, -0.25, 1.0]).unwrap())
            .unwrap();
        let before = store.clone();
        let mut g = Grads::default();
        g.0.insert("w".into(), vec![0.0; 3]);
        let sched = TrainSchedule {
            peak_lr: 1e-2,
            warmup_steps: 0,
            batch_size: 1,
            epochs: 1,
        };
        let mut adam = Adam::new();
        for step in 1..=10 {
            adam.step(&mut store, &g, &sched, step).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.insert(ParamTensor::zeros("w", vec![2, 2])).unwrap();
        let mut g = Grads::default();
        g.0.insert("w".into(), vec![1.0; 3]);
        let sched = TrainSchedule {
            peak_lr: 1e-3,
            warmup_steps: 0,
            batch_size: 1,
            epochs: 1,
        };
        assert!(matches!(
            Adam::new().step(&mut store, &g, &sched, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn frozen_tensor_is_not_updated() {
        let mut store = ParamStore::new();
        let mut t = ParamTensor::filled("w", vec![2], 1.0);
        t.frozen = true;
        store.insert(t).unwrap();
        let mut g = Grads::default();
        g.0.insert("w".into(), vec![1.0, 1.0]);
        let sched = TrainSchedule {
            peak_lr: 1.0,
            warmup_steps: 0,
            batch_size: 1,
            epochs: 1,
        };
        Adam::new().step(&mut store, &g, &sched, 1).unwrap();
        assert_eq!(store.get("w").unwrap().values, vec![1.0, 1.0]);
    }
}
