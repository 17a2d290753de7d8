use super::{AutodiffError, ParamStore, Result, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState,
}

/// First/second moment estimates and the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                m: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
                v: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            },
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState) -> Result<()> {
        let ok = state.m.len() == self.state.m.len()
            && state
                .m
                .iter()
                .zip(&self.state.m)
                .all(|(a, b)| a.len() == b.len())
            && state.v.len() == state.m.len();
        if !ok {
            return Err(AutodiffError::Checkpoint(
                "optimizer state does not match parameters".into(),
            ));
        }
        self.state = state;
        Ok(())
    }

    /// One update. Missing gradients count as zero. Any non-finite gradient
    /// aborts before a single parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = &grads[id.index()] {
                if !g.is_finite() {
                    return Err(AutodiffError::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            let i = id.index();
            let Some(g) = &grads[i] else {
                continue;
            };
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
