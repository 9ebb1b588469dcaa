//! Minimal layers with explicit forward caches and hand-written backward
//! passes. Gradients accumulate into a zero-initialised copy of the layer,
//! so a parameter and its gradient always share a name and shape.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Train mode uses batch statistics and dropout; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameter (and buffer) access used by the optimiser and checkpoints.
pub trait Module {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    /// Non-trainable state persisted in checkpoints.
    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        Vec::new()
    }

    fn zero_params(&mut self) {
        for (_, mut p) in self.params_mut() {
            p.fill(0.0);
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// All parameters concatenated in declaration order.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, p) in self.params() {
            out.extend(p.iter().copied());
        }
        out
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, items: Vec<(String, T)>) -> impl Iterator<Item = (String, T)> + 'a
where
    T: 'a,
{
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, v)| (format!("{prefix}.{n}"), v))
}

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, bound: f64, n: usize) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Fully connected layer `y = x W + b` with `W` stored as in×out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform(±1/√fan_in) initialisation for weights and bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_vec((fan_in, fan_out), uniform_init(rng, bound, fan_in * fan_out))
            .expect("shape");
        let bias = Array1::from(uniform_init(rng, bound, fan_out));
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward(&self, input: &Array2<f64>, grad_out: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &input.t().dot(grad_out);
        grads.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight.t())
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(output: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(output, |gi, &o| {
        if o <= 0.0 {
            *gi = 0.0
        }
    });
    g
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 1-D batch normalisation over the sample axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm1d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    mode: Mode,
}

impl BatchNorm1d {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows();
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let var = (x - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                let unbiased = if n > 1 { &var * (n as f64 / (n - 1) as f64) } else { var.clone() };
                let m = self.momentum;
                self.running_mean = &self.running_mean * (1.0 - m) + &mean * m;
                self.running_var = &self.running_var * (1.0 - m) + &unbiased * m;
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let normalized = (x - &mean) * &inv_std;
        let out = &normalized * &self.gamma + &self.beta;
        (out, BatchNormCache { normalized, inv_std, mode })
    }

    pub fn backward(&self, cache: &BatchNormCache, grad_out: &Array2<f64>, grads: &mut BatchNorm1d) -> Array2<f64> {
        let xhat = &cache.normalized;
        grads.gamma += &(grad_out * xhat).sum_axis(Axis(0));
        grads.beta += &grad_out.sum_axis(Axis(0));
        let gxhat = grad_out * &self.gamma;
        match cache.mode {
            Mode::Eval => gxhat * &cache.inv_std,
            Mode::Train => {
                let n = grad_out.nrows() as f64;
                let sum_g = gxhat.sum_axis(Axis(0));
                let sum_gx = (&gxhat * xhat).sum_axis(Axis(0));
                let inner = &gxhat * n - &sum_g - &(xhat * &sum_gx);
                inner * &cache.inv_std / n
            }
        }
    }
}

impl Module for BatchNorm1d {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("gamma".into(), self.gamma.view().into_dyn()),
            ("beta".into(), self.beta.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("gamma".into(), self.gamma.view_mut().into_dyn()),
            ("beta".into(), self.beta.view_mut().into_dyn()),
        ]
    }

    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("running_mean".into(), self.running_mean.view().into_dyn()),
            ("running_var".into(), self.running_var.view().into_dyn()),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("running_mean".into(), self.running_mean.view_mut().into_dyn()),
            ("running_var".into(), self.running_var.view_mut().into_dyn()),
        ]
    }
}

/// Inverted dropout; the returned mask is already scaled by `1/(1−p)`.
pub fn dropout<R: Rng + ?Sized>(x: &Array2<f64>, p: f64, mode: Mode, rng: &mut R) -> (Array2<f64>, Option<Array2<f64>>) {
    if mode == Mode::Eval || p <= 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - p;
    let mask = Array2::from_shape_fn(x.dim(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    (x * &mask, Some(mask))
}

/// 2-D convolution over NCHW batches, square kernel, zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// out_channels × (in_channels·k·k)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_vec((out_channels, fan_in), uniform_init(rng, bound, out_channels * fan_in))
                .expect("shape"),
            bias: Array1::from(uniform_init(rng, bound, out_channels)),
            in_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array4<f64>, sample: usize) -> Array2<f64> {
        let (_, c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[[row, oi * ow + oj]] = x[[sample, ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let oc = self.out_channels();
        let mut out = Array4::zeros((n, oc, oh, ow));
        for s in 0..n {
            let cols = self.im2col(x, s);
            let y = self.weight.dot(&cols) + self.bias.view().insert_axis(Axis(1));
            out.index_axis_mut(Axis(0), s)
                .assign(&y.into_shape_with_order((oc, oh, ow)).expect("shape"));
        }
        out
    }

    pub fn backward(&self, input: &Array4<f64>, grad_out: &Array4<f64>, grads: &mut Conv2d) -> Array4<f64> {
        let (n, c, h, w) = input.dim();
        let (oh, ow) = self.output_hw(h, w);
        let oc = self.out_channels();
        let k = self.kernel;
        let mut grad_in = Array4::zeros((n, c, h, w));
        for s in 0..n {
            let cols = self.im2col(input, s);
            let g = grad_out
                .index_axis(Axis(0), s)
                .to_owned()
                .into_shape_with_order((oc, oh * ow))
                .expect("shape")
                .into_dimensionality::<Ix2>()
                .expect("2-d");
            grads.weight += &g.dot(&cols.t());
            grads.bias += &g.sum_axis(Axis(1));
            let dcols = self.weight.t().dot(&g);
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (ci * k + ki) * k + kj;
                        for oi in 0..oh {
                            let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for oj in 0..ow {
                                let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                grad_in[[s, ci, ii as usize, jj as usize]] += dcols[[row, oi * ow + oj]];
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

/// Named tensor snapshot (parameters or buffers) for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_view(name: String, v: &ArrayViewD<'_, f64>) -> Self {
        Self {
            name,
            shape: v.shape().to_vec(),
            data: v.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(self.shape.clone(), self.data.clone()).expect("shape recorded with data")
    }
}
