use std::f64::consts::PI;

/// Cosine decay from `base` at `t = 0` to zero at `t = total`.
pub fn cosine_lr(t: u64, total: u64, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (t.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (PI * frac).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// One zeroed velocity buffer per tensor length in `shapes`.
    pub fn new(momentum: f64, weight_decay: f64, shapes: &[usize]) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn with_velocity(momentum: f64, weight_decay: f64, velocity: Vec<Vec<f64>>) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(params.len(), self.velocity.len(), "tensor count changed");
        assert_eq!(grads.len(), self.velocity.len(), "gradient count mismatch");
        for ((theta, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *t;
                *t -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.05), 0.05);
        assert!(cosine_lr(100, 100, 0.05).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.05) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_non_increasing() {
        let total = 997;
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = cosine_lr(t, total, 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut theta = vec![1.0, -2.0];
        let mut opt = Sgd::new(0.9, 0.1, &[2]);
        opt.step(vec![&mut theta], vec![&[0.5, 0.5]], 0.1);
        // v = g + 0.1θ = [0.6, 0.3]; θ -= 0.1 v
        assert!((theta[0] - 0.94).abs() < 1e-15);
        assert!((theta[1] + 2.03).abs() < 1e-15);
        opt.step(vec![&mut theta], vec![&[0.0, 0.0]], 0.1);
        // v = 0.9·[0.6, 0.3] + 0.1·θ
        let v0 = 0.9 * 0.6 + 0.1 * 0.94;
        assert!((theta[0] - (0.94 - 0.1 * v0)).abs() < 1e-15);
    }
}
