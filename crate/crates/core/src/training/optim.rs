use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with a learning rate per parameter tensor. A zero rate freezes the tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    lrs: Vec<f64>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(lrs: Vec<f64>) -> Self {
        Self {
            first: vec![Vec::new(); lrs.len()],
            second: vec![Vec::new(); lrs.len()],
            lrs,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), self.lrs.len(), "parameter count changed under the optimizer");
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps);
        let c2 = 1.0 - BETA2.powi(self.steps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let lr = self.lrs[i];
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            if m.is_empty() {
                m.resize(g.len(), 0.0);
                v.resize(g.len(), 0.0);
            }
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                if *gi == 0.0 && *mi == 0.0 {
                    continue;
                }
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
            }
        }
    }
}
