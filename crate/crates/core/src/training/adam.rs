use crate::model::Params;
use crate::real::Real;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u32,
    m: Params<T>,
    v: Params<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Params<T>, alpha: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam { alpha, beta1, beta2, epsilon, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params<T>, grad: &Params<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (alpha, eps) = (T::of(self.alpha), T::of(self.epsilon));
        let ps = params.tensors_mut();
        let gs = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= alpha * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::{Model, Variant};

    #[test]
    fn first_step_moves_by_alpha() {
        let model = Model::<f64>::build(tiny_config(Variant::NoAe), 1).unwrap();
        let mut p = model.params.clone();
        let mut g = p.zeros_like();
        for (i, t) in g.tensors_mut().into_iter().enumerate() {
            t.data.iter_mut().for_each(|v| *v = if i % 2 == 0 { 3.0 } else { -0.5 });
        }
        let mut adam = Adam::new(&p, 0.01, 0.9, 0.999, 1e-12);
        adam.update(&mut p, &g);
        for (i, (a, b)) in p.tensors().iter().zip(model.params.tensors()).enumerate() {
            let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - y - sign * 0.01).abs() < 1e-9);
            }
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimises_quadratic() {
        // f(w) = sum (w - 1)^2
        let model = Model::<f64>::build(tiny_config(Variant::NoAe), 2).unwrap();
        let mut p = model.params.clone();
        let mut adam = Adam::new(&p, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let mut g = p.clone();
            for t in g.tensors_mut() {
                t.data.iter_mut().for_each(|v| *v = 2.0 * (*v - 1.0));
            }
            adam.update(&mut p, &g);
        }
        for t in p.tensors() {
            assert!(t.data.iter().all(|v| (v - 1.0).abs() < 1e-2), "{}", t.name);
        }
    }
}
