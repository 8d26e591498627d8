use crate::data::Checkpoint;
use crate::error::{contract_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay.
///
/// Frozen parameters are skipped; every trainable parameter must carry a
/// gradient when [`AdamW::step`] is called.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if p.requires_grad && p.grad.is_none() {
                return Err(contract_err!("parameter '{}' has no gradient", p.name));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get(id);
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.clone().expect("checked above");
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let value = store.value_mut(id);
            for (((x, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi as f64;
                let mn = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let mhat = mn / bc1;
                let vhat = vn / bc2;
                let p0 = *x as f64;
                *x = (p0 - c.lr * mhat / (vhat.sqrt() + c.eps) - c.lr * c.weight_decay * p0) as f32;
            }
        }
        Ok(())
    }

    /// Store moments and the step counter under `prefix`.
    pub fn save(&self, prefix: &str, store: &ParamStore, ck: &mut Checkpoint) {
        ck.set(&format!("{prefix}.step"), self.step);
        for (id, p) in store.iter() {
            let i = id.index();
            if let (Some(Some(m)), Some(Some(v))) = (self.m.get(i), self.v.get(i)) {
                ck.push(format!("{prefix}.m.{}", p.name), m.clone());
                ck.push(format!("{prefix}.v.{}", p.name), v.clone());
            }
        }
    }

    pub fn load(config: AdamWConfig, prefix: &str, store: &ParamStore, ck: &Checkpoint) -> Result<Self> {
        let mut opt = Self::new(config);
        opt.step = ck.parse(&format!("{prefix}.step"))?;
        opt.m.resize(store.len(), None);
        opt.v.resize(store.len(), None);
        if opt.step == 0 {
            return Ok(opt);
        }
        for (id, p) in store.iter() {
            if !p.requires_grad {
                continue;
            }
            let m = ck.tensor(&format!("{prefix}.m.{}", p.name))?;
            let v = ck.tensor(&format!("{prefix}.v.{}", p.name))?;
            p.value.expect_same_shape(m, &p.name)?;
            p.value.expect_same_shape(v, &p.name)?;
            opt.m[id.index()] = Some(m.clone());
            opt.v[id.index()] = Some(v.clone());
        }
        Ok(opt)
    }
}
