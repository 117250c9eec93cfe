use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, lr: f64) -> Self {
        let m: Vec<_> = params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, v: m.clone(), m }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.m, &self.v)
    }

    /// Restores optimizer state saved with [`Adam::moments`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<f32>>, v: Vec<Tensor<f32>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Applies one update. Missing gradients count as zero.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        self.step += 1;
        let mut scale = 1.0f64;
        if let Some(max) = self.clip_norm {
            let norm = grads.iter().flatten().map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sum::<f64>().sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        let scale = scale as f32;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.map_in_place(|id, p| {
            let Some(Some(g)) = grads.get(id.0) else { return };
            let m = ms[id.0].data_mut();
            let v = vs[id.0].data_mut();
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gr = gr * scale;
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                *w -= step_size * *mi / (vi.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.1);
        let g = Tensor::from_vec(1, 3, vec![2.0, -0.5, 0.0]).unwrap();
        adam.update(&mut store, &[Some(g)]);
        let got = store.get(w).data();
        assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] - 1.1).abs() < 1e-6);
        assert_eq!(got[2], 1.0);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn clipping_rescales_the_moments() {
        let mut store = ParamStore::<f32>::new();
        store.zeros("w", 1, 2);
        let mut adam = Adam::new(&store, 0.1);
        adam.clip_norm = Some(1.0);
        adam.update(&mut store, &[Some(Tensor::from_vec(1, 2, vec![3.0, 4.0]).unwrap())]);
        let (m, _) = adam.moments();
        assert!((m[0].data()[0] - 0.1 * 0.6).abs() < 1e-7 && (m[0].data()[1] - 0.1 * 0.8).abs() < 1e-7);
    }

    #[test]
    fn restored_state_continues_identically() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_vec(1, 2, vec![0.3, -0.2]).unwrap());
        let g = [Some(Tensor::from_vec(1, 2, vec![0.7, 0.1]).unwrap())];
        let mut a = Adam::new(&store, 0.01);
        a.update(&mut store, &g);
        let (mut s1, mut s2) = (store.clone(), store.clone());
        let (m, v) = a.moments();
        let mut b = Adam::new(&store, 0.01);
        b.restore(a.step_count(), m.to_vec(), v.to_vec());
        a.update(&mut s1, &g);
        b.update(&mut s2, &g);
        assert_eq!(s1.get(ParamId(0)), s2.get(ParamId(0)));
    }
}
