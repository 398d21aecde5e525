use serde::{Deserialize, Serialize};

use crate::tape::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer {other:?} (sgd or adam)")),
        }
    }
}

/// Parameter update rule. SGD is `p ← p − lr·g`; Adam uses β = (0.9, 0.999),
/// ε = 1e-8 and bias correction.
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, shapes: &[&Mat]) -> Self {
        let zeros = || shapes.iter().map(|p| Mat::zeros(p.raw_dim())).collect();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Self { kind, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per block");
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.zip_mut_with(g, |p, &g| *p -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    m.zip_mut_with(g, |m, &g| *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g);
                    v.zip_mut_with(g, |v, &g| *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g);
                    ndarray::Zip::from(&mut **p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + Self::EPS);
                    });
                }
            }
        }
    }
}

/// Rescales the gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
