//! Adam with two parameter groups (encoder and heads) and a step-decay schedule.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::{OptimizerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const ADAM_EPS: f64 = 1e-8;
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Heads,
}

impl Group {
    pub fn of(name: &str) -> Self {
        if name.starts_with(ENCODER_PREFIX) {
            Group::Encoder
        } else {
            Group::Heads
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    group: Group,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    cfg: OptimizerConfig,
    slots: Vec<Slot>,
    step: u64,
    /// Multiplier from the schedule, applied to both groups.
    factor: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &OptimizerConfig) -> Result<Self> {
        let slots = store
            .trainable()
            .into_iter()
            .map(|(name, var)| {
                let zeros = var.zeros_like()?;
                Ok(Slot {
                    group: Group::of(&name),
                    name,
                    m: zeros.clone(),
                    v: zeros,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            slots,
            step: 0,
            factor: 1.0,
        })
    }

    /// Parameter names per group, in optimizer order.
    pub fn group_members(&self, group: Group) -> Vec<&str> {
        self.slots
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.name.as_str())
            .collect()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, schedule: &ScheduleConfig, epoch: usize) {
        self.factor = schedule.factor(epoch);
    }

    /// Effective learning rate of a group at the current schedule position.
    pub fn lr(&self, group: Group) -> f64 {
        let base = match group {
            Group::Encoder => self.cfg.encoder_lr(),
            Group::Heads => self.cfg.lr_heads,
        };
        base * self.factor
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lrs = [self.lr(Group::Encoder), self.lr(Group::Heads)];
        let wd = self.cfg.weight_decay;
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            let g = if wd > 0.0 {
                (g + (s.var.as_tensor() * wd)?)?
            } else {
                g.clone()
            };
            s.m = ((&s.m * b1)? + (&g * (1.0 - b1))?)?;
            s.v = ((&s.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let lr = lrs[usize::from(s.group == Group::Heads)];
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + ADAM_EPS)?)?;
            s.var.set(&(s.var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Saves the moment estimates; the step count goes into the checkpoint sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for s in &self.slots {
            map.insert(format!("m.{}", s.name), s.m.clone());
            map.insert(format!("v.{}", s.name), s.v.clone());
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, step: u64) -> Result<()> {
        let map = candle_core::safetensors::load(path, &candle_core::Device::Cpu)?;
        for s in &mut self.slots {
            for (key, dst) in [("m", &mut s.m), ("v", &mut s.v)] {
                let t = map
                    .get(&format!("{key}.{}", s.name))
                    .ok_or_else(|| Error::Config(format!("optimizer state is missing {key}.{}", s.name)))?;
                *dst = t.to_dtype(dst.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::DType;

    #[test]
    fn groups_partition_parameters() {
        let mut store = ParamStore::new(DType::F32, 0);
        let mut r = store.root();
        r.pp("encoder").param("w", &[2], Init::Zeros).unwrap();
        r.pp("rsp").param("w", &[2], Init::Zeros).unwrap();
        r.pp("bn").buffer("x.running_mean", &[2], Init::Zeros).unwrap();
        let opt = Adam::new(&store, &OptimizerConfig::default()).unwrap();
        assert_eq!(opt.group_members(Group::Encoder), vec!["encoder.w"]);
        assert_eq!(opt.group_members(Group::Heads), vec!["rsp.w"]);
    }

    #[test]
    fn schedule_scales_exactly() {
        let store = ParamStore::new(DType::F32, 0);
        let mut opt = Adam::new(&store, &OptimizerConfig::default()).unwrap();
        let s = ScheduleConfig::default();
        opt.set_epoch(&s, 24);
        let before = opt.lr(Group::Heads);
        opt.set_epoch(&s, 25);
        assert_eq!(opt.lr(Group::Heads), before * 0.1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new(DType::F64, 0);
        let w = store.root().param("w", &[3], Init::Ones).unwrap();
        let mut opt = Adam::new(&store, &OptimizerConfig::default()).unwrap();
        let loss = w.sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v: Vec<f64> = store.get("w").unwrap().as_tensor().to_vec1().unwrap();
        for x in v {
            assert!((x - (1.0 - 5e-4)).abs() < 1e-9);
        }
    }
}
