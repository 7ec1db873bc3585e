use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use super::params::{GradStore, Model};

/// Adam with bias correction. Parameters without a gradient entry are
/// left untouched, which is how frozen submodules opt out of updates.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Model, grads: &GradStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |path, mut p| {
            let Some(g) = grads.get(path) else { return };
            let m = ms
                .entry(path.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = vs
                .entry(path.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            Zip::from(&mut p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        });
    }
}

#[derive(Debug)]
struct SfState {
    /// Base iterate advanced by raw Adam-style steps.
    z: ArrayD<f64>,
    /// Running mean of the base iterates; the evaluation weights.
    x: ArrayD<f64>,
    v: ArrayD<f64>,
}

/// Schedule-free AdamW. The model holds the interpolated training point
/// `y = (1 - interpolation) * z + interpolation * x` between steps; call
/// `swap_to_eval` to load the averaged weights before validation and
/// `swap_to_train` to restore `y` afterwards. No learning-rate schedule
/// is involved anywhere.
#[derive(Debug)]
pub struct ScheduleFreeAdamW {
    pub lr: f64,
    /// Weight on the averaged iterate when forming the training point.
    pub interpolation: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: BTreeMap<String, SfState>,
}

impl ScheduleFreeAdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            interpolation: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut dyn Model, grads: &GradStore) {
        self.t += 1;
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let c = 1.0 / self.t as f64;
        let (lr, b1, b2, eps, wd) = (
            self.lr,
            self.interpolation,
            self.beta2,
            self.eps,
            self.weight_decay,
        );
        let state = &mut self.state;
        model.visit_params_mut(&mut |path, mut p| {
            let Some(g) = grads.get(path) else { return };
            let st = state.entry(path.to_string()).or_insert_with(|| SfState {
                z: p.to_owned(),
                x: p.to_owned(),
                v: ArrayD::zeros(g.raw_dim()),
            });
            st.v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            // decoupled weight decay is applied at the training point y
            let mut upd = g.clone();
            Zip::from(&mut upd)
                .and(&st.v)
                .and(&p)
                .for_each(|u, &v, &y| {
                    *u = *u / ((v / bc2).sqrt() + eps) + wd * y;
                });
            st.z.zip_mut_with(&upd, |z, &u| *z -= lr * u);
            let zs = &st.z;
            st.x.zip_mut_with(zs, |x, &z| *x = (1.0 - c) * *x + c * z);
            Zip::from(&mut p)
                .and(&st.z)
                .and(&st.x)
                .for_each(|y, &z, &x| {
                    *y = (1.0 - b1) * z + b1 * x;
                });
        });
    }

    /// Loads the averaged iterate `x` into the model for evaluation.
    pub fn swap_to_eval(&self, model: &mut dyn Model) {
        let state = &self.state;
        model.visit_params_mut(&mut |path, mut p| {
            if let Some(st) = state.get(path) {
                p.assign(&st.x);
            }
        });
    }

    /// Restores the training point `y` after an evaluation pass.
    pub fn swap_to_train(&self, model: &mut dyn Model) {
        let b1 = self.interpolation;
        let state = &self.state;
        model.visit_params_mut(&mut |path, mut p| {
            if let Some(st) = state.get(path) {
                Zip::from(&mut p)
                    .and(&st.z)
                    .and(&st.x)
                    .for_each(|y, &z, &x| {
                        *y = (1.0 - b1) * z + b1 * x;
                    });
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayViewD, ArrayViewMutD, IxDyn};

    struct Vec1 {
        w: ArrayD<f64>,
    }

    impl Model for Vec1 {
        fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
            f("w", self.w.view());
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
            f("w", self.w.view_mut());
        }
    }

    fn quad_grad(m: &Vec1, target: f64) -> GradStore {
        let mut g = GradStore::new();
        g.add("w", m.w.mapv(|w| 2.0 * (w - target)));
        g
    }

    #[test]
    fn adam_first_step_size_is_about_lr() {
        let mut m = Vec1 {
            w: ArrayD::from_elem(IxDyn(&[1]), 5.0),
        };
        let mut opt = Adam::new(0.01);
        let g = quad_grad(&m, 0.0);
        opt.step(&mut m, &g);
        // bias correction makes the first update lr * sign(g) up to eps
        assert!((m.w[[0]] - (5.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut m = Vec1 {
            w: ArrayD::from_elem(IxDyn(&[3]), 4.0),
        };
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = quad_grad(&m, 1.5);
            opt.step(&mut m, &g);
        }
        for v in m.w.iter() {
            assert!((v - 1.5).abs() < 1e-3, "got {v}");
        }
    }

    #[test]
    fn adam_skips_params_without_grads() {
        let mut m = Vec1 {
            w: ArrayD::from_elem(IxDyn(&[2]), 3.0),
        };
        let mut opt = Adam::new(0.1);
        opt.step(&mut m, &GradStore::new());
        assert_eq!(m.w[[0]], 3.0);
    }

    #[test]
    fn schedule_free_first_step_matches_scalar_oracle() {
        let w0 = 1.0;
        let g = 0.5;
        let (lr, b2, eps) = (0.1, 0.999, 1e-8);
        let mut m = Vec1 {
            w: ArrayD::from_elem(IxDyn(&[1]), w0),
        };
        let mut opt = ScheduleFreeAdamW::new(lr);
        let mut gs = GradStore::new();
        gs.add("w", ArrayD::from_elem(IxDyn(&[1]), g));
        opt.step(&mut m, &gs);

        // scalar recomputation of one step
        let v = (1.0 - b2) * g * g;
        let vhat = v / (1.0 - b2);
        let z = w0 - lr * (g / (vhat.sqrt() + eps));
        let x = z; // c = 1 on the first step
        let y = (1.0 - 0.9) * z + 0.9 * x;
        assert!((m.w[[0]] - y).abs() < 1e-15);

        opt.swap_to_eval(&mut m);
        assert!((m.w[[0]] - x).abs() < 1e-15);
    }

    #[test]
    fn schedule_free_converges_on_quadratic() {
        let mut m = Vec1 {
            w: ArrayD::from_elem(IxDyn(&[2]), -3.0),
        };
        let mut opt = ScheduleFreeAdamW::new(0.05);
        for _ in 0..3000 {
            let g = quad_grad(&m, 2.0);
            opt.step(&mut m, &g);
        }
        opt.swap_to_eval(&mut m);
        for v in m.w.iter() {
            assert!((v - 2.0).abs() < 5e-3, "got {v}");
        }
    }

    #[test]
    fn eval_train_swap_roundtrips_exactly() {
        let mut m = Vec1 {
            w: ArrayD::from_elem(IxDyn(&[4]), 0.7),
        };
        let mut opt = ScheduleFreeAdamW::new(0.02);
        for _ in 0..5 {
            let g = quad_grad(&m, -1.0);
            opt.step(&mut m, &g);
        }
        let before = m.w.clone();
        opt.swap_to_eval(&mut m);
        assert_ne!(before, m.w);
        opt.swap_to_train(&mut m);
        assert_eq!(before, m.w);
    }

    #[test]
    fn averaged_iterate_is_mean_of_base_iterates() {
        // with interpolation = 0 the model always holds z, so x can be
        // tracked against an explicit running mean
        let mut m = Vec1 {
            w: ArrayD::from_elem(IxDyn(&[1]), 1.0),
        };
        let mut opt = ScheduleFreeAdamW::new(0.1);
        opt.interpolation = 0.0;
        let mut zs = Vec::new();
        for k in 0..6 {
            let mut gs = GradStore::new();
            gs.add(
                "w",
                ArrayD::from_elem(IxDyn(&[1]), if k % 2 == 0 { 0.4 } else { -0.2 }),
            );
            opt.step(&mut m, &gs);
            zs.push(m.w[[0]]);
        }
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        opt.swap_to_eval(&mut m);
        assert!((m.w[[0]] - mean).abs() < 1e-12);
    }
}
