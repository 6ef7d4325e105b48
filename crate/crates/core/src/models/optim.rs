//! Adam over a fixed list of parameter segments.

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// `segments` gives the length of every parameter block updated each step.
    pub fn new(learning_rate: f64, segments: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: segments.iter().map(|&n| vec![0.0; n]).collect(),
            second: segments.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the bias-correction clock; call once before the segment updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    fn scale(&self) -> (f64, f64) {
        (
            1.0 - self.beta1.powi(self.step),
            1.0 - self.beta2.powi(self.step),
        )
    }

    pub fn update(&mut self, segment: usize, params: &mut [f64], grads: &[f64]) {
        let (c1, c2) = self.scale();
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let m = &mut self.first[segment];
        let v = &mut self.second[segment];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }

    pub fn update_f32(&mut self, segment: usize, params: &mut [f32], grads: &[f32]) {
        let (c1, c2) = self.scale();
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let m = &mut self.first[segment];
        let v = &mut self.second[segment];
        for i in 0..params.len() {
            let g = grads[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            params[i] -= (lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps)) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(0.1, &[2]);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.begin_step();
            adam.update(0, &mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3));
    }
}
