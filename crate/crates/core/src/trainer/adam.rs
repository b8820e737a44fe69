use crate::tensor::Tensor;

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    state.t += 1;
    let c1 = 1.0 - beta1.powf(state.t as f64);
    let c2 = 1.0 - beta2.powf(state.t as f64);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in it {
            let g = g as f64;
            let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
            let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *p = (*p as f64 - step) as f32;
        }
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·epoch/max_epochs))`.
pub fn cosine_lr(epoch: usize, max_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    let frac = if max_epochs == 0 { 1.0 } else { epoch.min(max_epochs) as f64 / max_epochs as f64 };
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
