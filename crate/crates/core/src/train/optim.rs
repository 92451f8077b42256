use crate::vit::EncoderParams;

/// Adam moment estimates, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams<f32>,
    pub v: EncoderParams<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// 1-based step count used for bias correction.
    pub t: u64,
}

impl AdamHyper {
    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }
}

impl AdamState {
    pub fn new(params: &EncoderParams<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One AdamW update. Decay is applied multiplicatively before the
    /// adaptive step, and only to tensors whose [`ParamInfo::decays`] holds.
    ///
    /// [`ParamInfo::decays`]: crate::vit::ParamInfo::decays
    pub fn step(
        &mut self,
        params: &mut EncoderParams<f32>,
        grads: &EncoderParams<f32>,
        h: AdamHyper,
    ) {
        let (c1, c2) = h.corrections();
        let lr = h.lr as f32;
        let b1 = h.beta1 as f32;
        let b2 = h.beta2 as f32;
        let eps = h.eps as f32;
        let c1 = c1 as f32;
        let c2 = c2 as f32;
        let decay = (1.0 - h.lr * h.weight_decay) as f32;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((info, p), (_, g)), (_, m)), (_, v)) in tensors {
            let decays = info.decays();
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if decays {
                    *p *= decay;
                }
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Adam on a single scalar, in `f64`; used for the temperature.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    pub fn step(&mut self, value: &mut f64, grad: f64, h: AdamHyper) {
        let (c1, c2) = h.corrections();
        self.m = h.beta1 * self.m + (1.0 - h.beta1) * grad;
        self.v = h.beta2 * self.v + (1.0 - h.beta2) * grad * grad;
        *value -= h.lr * (self.m / c1) / ((self.v / c2).sqrt() + h.eps);
    }
}
