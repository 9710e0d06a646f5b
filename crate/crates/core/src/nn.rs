//! Dense networks with hand-written reverse-mode gradients, plus Adam.
//!
//! Activations are computed in `f64` for batch rows stored as matrix rows.
//! A forward pass returns a [`ForwardCache`] that `backward` consumes, so the
//! dropout mask of a step is reused exactly by its gradient.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.w.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols
    }
}

/// A stack of dense layers. Dropout follows every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
    pub dropout: f64,
    pub training: bool,
}

impl DenseNet {
    /// Builds a net with ReLU hidden layers and an identity output layer.
    /// Weights are drawn He-normal for ReLU layers and Glorot-normal for the
    /// output layer; biases start at zero.
    pub fn new(dims: &[usize], dropout: f64, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {dims:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let (act, sd) = if i + 1 < n {
                    (Activation::Relu, (2.0 / fan_in as f64).sqrt())
                } else {
                    (Activation::Identity, (2.0 / (fan_in + fan_out) as f64).sqrt())
                };
                let normal = Normal::new(0.0, sd).expect("positive sd");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Dense {
                    w: Matrix { rows: fan_in, cols: fan_out, data },
                    b: vec![0.0; fan_out],
                    act,
                }
            })
            .collect();
        Ok(Self {
            layers,
            dropout,
            training: false,
        })
    }

    /// Builds a net from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a net needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!("layer {i} output does not feed layer {}", i + 1)));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.output_dim() || l.w.data.len() != l.w.rows * l.w.cols {
                return Err(Error::Shape(format!("layer {i} bias or weight size mismatch")));
            }
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            layers,
            dropout,
            training: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.data.len() + l.b.len()).sum()
    }

    /// Parameter slices in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.w.data.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.w.data.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    /// Runs the net on a batch. Dropout is active only when `training` is set
    /// and an rng is supplied.
    pub fn forward(&self, x: &Matrix, mut rng: Option<&mut Rng>) -> Result<ForwardCache> {
        if x.cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} vs net input {}",
                x.cols,
                self.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Matrix::zeros(h.rows, layer.output_dim());
            for r in 0..z.rows {
                z.row_mut(r).copy_from_slice(&layer.b);
            }
            gemm(1.0, &h, false, &layer.w, false, 1.0, &mut z)?;
            let mut a = z.clone();
            if layer.act == Activation::Relu {
                a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let mask = match rng.as_deref_mut() {
                Some(r) if self.training && self.dropout > 0.0 && i + 1 < n => {
                    let keep = 1.0 - self.dropout;
                    let m: Vec<f64> = (0..a.data.len())
                        .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    a.data.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                    Some(m)
                }
                _ => None,
            };
            inputs.push(h);
            pre.push(z);
            masks.push(mask);
            h = a;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            masks,
            output: h,
        })
    }

    /// Convenience inference pass without dropout.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut net = self.clone();
        net.training = false;
        Ok(net.forward(x, None)?.output)
    }

    /// Backpropagates `dy` (gradient of the loss w.r.t. the output) through
    /// the pass recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, dy: &Matrix) -> Result<(Grads, Matrix)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::State("backward called without a matching forward pass".into()));
        }
        if dy.rows != cache.output.rows || dy.cols != cache.output.cols {
            return Err(Error::Shape("upstream gradient does not match output".into()));
        }
        let n = self.layers.len();
        let mut gw = vec![Matrix::zeros(0, 0); n];
        let mut gb = vec![Vec::new(); n];
        let mut g = dy.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if let Some(m) = &cache.masks[i] {
                g.data.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            }
            if layer.act == Activation::Relu {
                g.data
                    .iter_mut()
                    .zip(&cache.pre[i].data)
                    .for_each(|(v, z)| {
                        if *z <= 0.0 {
                            *v = 0.0
                        }
                    });
            }
            let x = &cache.inputs[i];
            let mut w = Matrix::zeros(layer.input_dim(), layer.output_dim());
            gemm(1.0, x, true, &g, false, 0.0, &mut w)?;
            let mut b = vec![0.0; layer.output_dim()];
            for r in 0..g.rows {
                b.iter_mut().zip(g.row(r)).for_each(|(s, v)| *s += v);
            }
            let mut dx = Matrix::zeros(g.rows, layer.input_dim());
            gemm(1.0, &g, false, &layer.w, true, 0.0, &mut dx)?;
            gw[i] = w;
            gb[i] = b;
            g = dx;
        }
        Ok((Grads { w: gw, b: gb }, g))
    }
}

/// Values retained by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
    pub masks: Vec<Option<Vec<f64>>>,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w: Vec<Matrix>,
    pub b: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            w: net.layers.iter().map(|l| Matrix::zeros(l.w.rows, l.w.cols)).collect(),
            b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    /// Same order as [`DenseNet::params`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.w.len());
        for (w, b) in self.w.iter().zip(&self.b) {
            out.push(w.data.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a fixed list of parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update. Checks every gradient before touching any
    /// parameter, so a non-finite gradient leaves state unchanged.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer slot count mismatch".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("optimizer slot {i} size mismatch")));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient slot {i} entry {j}")));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Matrix { rows, cols, data }
    }

    fn half_sq(y: &Matrix, t: &Matrix) -> f64 {
        y.data.iter().zip(&t.data).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = DenseNet::from_layers(
            vec![Dense {
                w: Matrix::identity(3),
                b: vec![0.0; 3],
                act: Activation::Identity,
            }],
            0.0,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0]], 3).unwrap();
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn relu_on_negative_preactivation_is_zero() {
        let net = DenseNet::from_layers(
            vec![
                Dense {
                    w: Matrix::identity(2),
                    b: vec![-5.0, -5.0],
                    act: Activation::Relu,
                },
                Dense {
                    w: Matrix::identity(2),
                    b: vec![0.0, 0.0],
                    act: Activation::Identity,
                },
            ],
            0.0,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]], 2).unwrap();
        let cache = net.forward(&x, None).unwrap();
        assert_eq!(cache.output.data, vec![0.0, 0.0]);
        let (g, dx) = net.backward(&cache, &Matrix::from_rows(&[[1.0, 1.0]], 2).unwrap()).unwrap();
        assert!(dx.data.iter().all(|v| *v == 0.0));
        assert!(g.b[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = component_rng(3, "nn-oracle");
        let net = DenseNet::new(&[4, 5, 2], 0.0, &mut rng).unwrap();
        let x = random_matrix(3, 4, &mut rng);
        let y = net.infer(&x).unwrap();
        for r in 0..3 {
            let mut h = vec![0.0; 5];
            for j in 0..5 {
                let mut s = net.layers[0].b[j];
                for i in 0..4 {
                    s += x.get(r, i) * net.layers[0].w.get(i, j);
                }
                h[j] = s.max(0.0);
            }
            for j in 0..2 {
                let mut s = net.layers[1].b[j];
                for i in 0..5 {
                    s += h[i] * net.layers[1].w.get(i, j);
                }
                assert!((s - y.get(r, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = component_rng(4, "nn-zero");
        let net = DenseNet::new(&[3, 4, 2], 0.0, &mut rng).unwrap();
        let x = random_matrix(2, 3, &mut rng);
        let cache = net.forward(&x, None).unwrap();
        let dy = Matrix::zeros(2, 2);
        let (g, dx) = net.backward(&cache, &dy).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
        assert!(dx.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut rng = component_rng(5, "nn-state");
        let net = DenseNet::new(&[2, 2], 0.0, &mut rng).unwrap();
        let empty = ForwardCache {
            inputs: vec![],
            pre: vec![],
            masks: vec![],
            output: Matrix::zeros(1, 2),
        };
        assert!(matches!(net.backward(&empty, &Matrix::zeros(1, 2)), Err(Error::State(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-4;
        for seed in 0..20u64 {
            let mut rng = component_rng(seed, "nn-fd");
            let net = DenseNet::new(&[3, 5, 4, 2], 0.0, &mut rng).unwrap();
            let x = random_matrix(4, 3, &mut rng);
            let t = random_matrix(4, 2, &mut rng);
            let cache = net.forward(&x, None).unwrap();
            let mut dy = cache.output.clone();
            dy.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a -= b);
            let (g, dx) = net.backward(&cache, &dy).unwrap();
            let analytic: Vec<f64> = g.slices().concat();
            let mut flat = 0;
            for slot in 0..2 * net.layers.len() {
                let len = net.params()[slot].len();
                for k in 0..len {
                    let mut plus = net.clone();
                    plus.params_mut()[slot][k] += h;
                    let mut minus = net.clone();
                    minus.params_mut()[slot][k] -= h;
                    let kink = |n: &DenseNet| {
                        n.forward(&x, None).unwrap().pre[..n.layers.len() - 1]
                            .iter()
                            .zip(&cache.pre)
                            .any(|(a, b)| a.data.iter().zip(&b.data).any(|(p, q)| p.signum() != q.signum()))
                    };
                    if kink(&plus) || kink(&minus) {
                        flat += 1;
                        continue;
                    }
                    let fd = (half_sq(&plus.infer(&x).unwrap(), &t) - half_sq(&minus.infer(&x).unwrap(), &t))
                        / (2.0 * h);
                    let a = analytic[flat];
                    let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                    assert!(rel < 1e-4, "seed {seed} slot {slot} k {k}: fd {fd} vs {a}");
                    flat += 1;
                }
            }
            for k in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[k] += h;
                let mut xm = x.clone();
                xm.data[k] -= h;
                let fd = (half_sq(&net.infer(&xp).unwrap(), &t) - half_sq(&net.infer(&xm).unwrap(), &t)) / (2.0 * h);
                let rel = (fd - dx.data[k]).abs() / fd.abs().max(dx.data[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "input grad seed {seed} k {k}");
            }
        }
    }

    #[test]
    fn dropout_mask_reused_in_backward() {
        let mut rng = component_rng(6, "nn-drop");
        let mut net = DenseNet::new(&[3, 6, 2], 0.5, &mut rng).unwrap();
        net.training = true;
        let x = random_matrix(2, 3, &mut rng);
        let cache = net.forward(&x, Some(&mut rng)).unwrap();
        let mask = cache.masks[0].clone().unwrap();
        let dy = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let (g, _) = net.backward(&cache, &dy).unwrap();
        for (j, m) in mask.iter().take(6).enumerate() {
            if *m == 0.0 && mask[6 + j] == 0.0 {
                assert_eq!(g.b[0][j], 0.0);
            }
        }
        net.training = false;
        assert_eq!(net.forward(&x, Some(&mut rng)).unwrap().output, net.infer(&x).unwrap());
    }

    #[test]
    fn adam_zero_gradient_is_noop_and_moves_against_sign() {
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -1.0]);
        for _ in 0..50 {
            adam.step(&mut [p.as_mut_slice()], &[&[0.5, -2.0]]).unwrap();
        }
        assert!(p[0] < 1.0 && p[1] > -1.0);
    }

    #[test]
    fn adam_quadratic_step_matches_reference() {
        // f(x) = (x - 3)^2 at x = 1, gradient -4
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &[1]);
        let mut p = vec![1.0];
        let g = 2.0 * (p[0] - 3.0);
        adam.step(&mut [p.as_mut_slice()], &[&[g]]).unwrap();
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let expect = 1.0 - 1e-3 * (m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut adam = Adam::new(AdamConfig::default(), &[1]);
        let mut p = vec![1.0];
        assert!(matches!(
            adam.step(&mut [p.as_mut_slice()], &[&[f64::NAN]]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, vec![1.0]);
        assert_eq!(adam.t, 0);
    }
}
