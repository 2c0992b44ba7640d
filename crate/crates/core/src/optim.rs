use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay, applied to a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    /// `decay[i]` selects whether tensor `i` receives weight decay.
    pub fn new(shapes: &[&[usize]], decay: Vec<bool>) -> Self {
        assert_eq!(shapes.len(), decay.len());
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            decay,
            t: 0,
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<f32>>,
        grads: &[Tensor<f32>],
        lr: f64,
        h: &AdamHyper,
    ) {
        self.t += 1;
        let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let eps = h.eps as f32;
        for (i, p) in params.into_iter().enumerate() {
            let decay = if self.decay[i] { lr * h.weight_decay as f32 } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w -= lr * update + decay * *w;
            }
        }
    }
}
