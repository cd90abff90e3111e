use super::network::Network;

/// Adam with bias correction. Moments live in each [`super::Param`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter of `nets` and clears their
    /// gradients. Networks left out are not touched, which is how freezing
    /// is done.
    pub fn step(&mut self, nets: &mut [&mut Network]) {
        self.t += 1;
        let mut scale = 1.0;
        if let Some(max) = self.clip_norm {
            let sq: f64 = nets
                .iter()
                .flat_map(|n| n.params())
                .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for net in nets.iter_mut() {
            for p in net.params_mut() {
                let n = p.value.len();
                for i in 0..n {
                    let g = p.grad.data()[i] * scale;
                    p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                    p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                    let mh = p.m[i] / bc1;
                    let vh = p.v[i] / bc2;
                    p.value.data_mut()[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
                p.zero_grad();
            }
        }
    }
}
