//! Gradient reversal, the domain discriminator and its cross-entropy
//! objective, and the discriminator-free (classifier-as-critic) objective.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossValue;
use crate::nn::{dropout, prefixed, relu, relu_backward, sigmoid, Linear, Mode, Module};

/// Identity on the way forward, `−λ·g` on the way back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReversal {
    lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config("grl.lambda", "must be a finite value >= 0"));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.clone()
    }

    pub fn backward(&self, grad_out: &Array2<f64>) -> Array2<f64> {
        grad_out * (-self.lambda)
    }
}

/// Forward through a reversal layer; kept as a free function for symmetry
/// with the loss API.
pub fn grl_apply(x: &Array2<f64>, lambda: f64) -> Result<(Array2<f64>, GradientReversal)> {
    let grl = GradientReversal::new(lambda)?;
    Ok((grl.forward(x), grl))
}

/// Domain label: 1 for source, 0 for target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn z(self) -> f64 {
        match self {
            DomainTag::Source => 1.0,
            DomainTag::Target => 0.0,
        }
    }
}

pub const DISCRIMINATOR_EPS: f64 = 1e-7;

/// Binary cross-entropy of discriminator outputs against domain tags.
///
/// Outputs are clamped to `[ε, 1−ε]` for the value. The returned gradient is
/// with respect to the discriminator *logits*, `(d − z)/2B`, which is the
/// exact derivative wherever the clamp is inactive.
pub fn domain_adversarial(d_out: &Array1<f64>, tags: &[DomainTag]) -> Result<(LossValue, Array1<f64>)> {
    if d_out.len() != tags.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} discriminator outputs for {} tags",
            d_out.len(),
            tags.len()
        )));
    }
    let n_src = tags.iter().filter(|t| **t == DomainTag::Source).count();
    let n_tgt = tags.len() - n_src;
    if n_src != n_tgt || n_src == 0 {
        return Err(Error::UnbalancedBatch {
            source_count: n_src,
            target_count: n_tgt,
        });
    }
    let two_b = tags.len() as f64;
    let mut total = 0.0;
    let mut grad = Array1::zeros(tags.len());
    for (j, (&d, tag)) in d_out.iter().zip(tags).enumerate() {
        let z = tag.z();
        let dc = d.clamp(DISCRIMINATOR_EPS, 1.0 - DISCRIMINATOR_EPS);
        total += z * dc.ln() + (1.0 - z) * (1.0 - dc).ln();
        grad[j] = (d - z) / two_b;
    }
    let value = -total / two_b;
    Ok((LossValue::scalar(value).with_component("adversarial", value), grad))
}

pub fn domain_adversarial_loss(d_out: &Array1<f64>, tags: &[DomainTag]) -> Result<LossValue> {
    domain_adversarial(d_out, tags).map(|(l, _)| l)
}

/// `ce − λ·nwd`; the trainer realises the maximisation over the critic by
/// routing the NWD branch through a [`GradientReversal`].
pub fn daln_objective(ce: &LossValue, nwd: &LossValue, lambda: f64) -> Result<LossValue> {
    if !(lambda >= 0.0) {
        return Err(Error::config("da_weight", "must be >= 0"));
    }
    let value = ce.value - lambda * nwd.value;
    Ok(LossValue::scalar(value)
        .with_component("ce", ce.value)
        .with_component("nwd", nwd.value))
}

/// `d → h → h → 1` MLP with ReLU, dropout and a logistic output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDiscriminator {
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub output: Linear,
    pub dropout: f64,
}

pub struct DiscriminatorPass {
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
    input: Array2<f64>,
    h1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    d1: Array2<f64>,
    h2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    d2: Array2<f64>,
}

impl DomainDiscriminator {
    pub const DEFAULT_WIDTH: usize = 1024;
    pub const DEFAULT_DROPOUT: f64 = 0.5;

    pub fn new<R: Rng + ?Sized>(input_dim: usize, width: usize, dropout: f64, rng: &mut R) -> Self {
        Self {
            hidden1: Linear::new(input_dim, width, rng),
            hidden2: Linear::new(width, width, rng),
            output: Linear::new(width, 1, rng),
            dropout,
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Array2<f64>, mode: Mode, rng: &mut R) -> DiscriminatorPass {
        let h1 = relu(&self.hidden1.forward(x));
        let (d1, mask1) = dropout(&h1, self.dropout, mode, rng);
        let h2 = relu(&self.hidden2.forward(&d1));
        let (d2, mask2) = dropout(&h2, self.dropout, mode, rng);
        let logits = self.output.forward(&d2).column(0).to_owned();
        let probabilities = logits.mapv(sigmoid);
        DiscriminatorPass {
            logits,
            probabilities,
            input: x.clone(),
            h1,
            mask1,
            d1,
            h2,
            mask2,
            d2,
        }
    }

    /// Backpropagates a gradient on the logits; returns the input gradient.
    pub fn backward(&self, pass: &DiscriminatorPass, grad_logits: &Array1<f64>, grads: &mut DomainDiscriminator) -> Array2<f64> {
        let g = grad_logits.view().insert_axis(ndarray::Axis(1)).to_owned();
        let mut g = self.output.backward(&pass.d2, &g, &mut grads.output);
        if let Some(m) = &pass.mask2 {
            g *= m;
        }
        let g = relu_backward(&pass.h2, &g);
        let mut g = self.hidden2.backward(&pass.d1, &g, &mut grads.hidden2);
        if let Some(m) = &pass.mask1 {
            g *= m;
        }
        let g = relu_backward(&pass.h1, &g);
        self.hidden1.backward(&pass.input, &g, &mut grads.hidden1)
    }
}

impl Module for DomainDiscriminator {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        prefixed("hidden1", self.hidden1.params())
            .chain(prefixed("hidden2", self.hidden2.params()))
            .chain(prefixed("output", self.output.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        prefixed("hidden1", self.hidden1.params_mut())
            .chain(prefixed("hidden2", self.hidden2.params_mut()))
            .chain(prefixed("output", self.output.params_mut()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tags(b: usize) -> Vec<DomainTag> {
        std::iter::repeat_n(DomainTag::Source, b)
            .chain(std::iter::repeat_n(DomainTag::Target, b))
            .collect()
    }

    #[test]
    fn grl_forward_and_backward() {
        let x = array![[1.5, -2.0]];
        let (y, grl) = grl_apply(&x, 1.0).unwrap();
        assert_eq!(y, x);
        // downstream loss = sum(x)
        assert_eq!(grl.backward(&Array2::ones((1, 2))), array![[-1.0, -1.0]]);
        let (_, blocked) = grl_apply(&x, 0.0).unwrap();
        assert!(blocked.backward(&Array2::ones((1, 2))).iter().all(|v| *v == 0.0));
        assert!(grl_apply(&x, -0.1).is_err());
    }

    #[test]
    fn adversarial_uniform_discriminator() {
        let d = Array1::from_elem(4, 0.5);
        let (l, g) = domain_adversarial(&d, &tags(2)).unwrap();
        assert_abs_diff_eq!(l.value, 2f64.ln(), epsilon = 1e-15);
        // balanced batch at d = 0.5: gradients cancel in aggregate
        assert_abs_diff_eq!(g.sum(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn adversarial_clamp_arithmetic() {
        let perfect = array![1.0, 1.0, 0.0, 0.0];
        let l = domain_adversarial_loss(&perfect, &tags(2)).unwrap();
        assert_abs_diff_eq!(l.value, -(1.0 - DISCRIMINATOR_EPS).ln(), epsilon = 1e-15);
        assert!((l.value - 1.0e-7).abs() < 1e-9);

        let inverted = array![0.0, 0.0, 1.0, 1.0];
        let l = domain_adversarial_loss(&inverted, &tags(2)).unwrap();
        assert_abs_diff_eq!(l.value, -(DISCRIMINATOR_EPS.ln()), epsilon = 1e-8);
        assert_abs_diff_eq!(l.value, 16.118, epsilon = 1e-3);
    }

    #[test]
    fn adversarial_requires_balanced_batch() {
        let d = Array1::from_elem(3, 0.5);
        let t = vec![DomainTag::Source, DomainTag::Source, DomainTag::Target];
        assert!(matches!(
            domain_adversarial_loss(&d, &t),
            Err(Error::UnbalancedBatch { source_count: 2, target_count: 1 })
        ));
    }

    #[test]
    fn daln_objective_arithmetic() {
        let ce = LossValue::scalar(0.7);
        let nwd = LossValue::scalar(0.2);
        assert_abs_diff_eq!(daln_objective(&ce, &nwd, 0.1).unwrap().value, 0.68, epsilon = 1e-15);
        assert_eq!(daln_objective(&ce, &nwd, 0.0).unwrap().value, 0.7);
        assert_eq!(daln_objective(&ce, &LossValue::scalar(0.0), 0.5).unwrap().value, 0.7);
    }

    #[test]
    fn discriminator_outputs_are_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let disc = DomainDiscriminator::new(3, 16, 0.5, &mut rng);
        let x = array![[1.0, -2.0, 0.5], [30.0, 10.0, -4.0]];
        let pass = disc.forward(&x, Mode::Train, &mut rng);
        assert!(pass.probabilities.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    /// Toy model: feature f = g·x, critic score s = d·f, ce = (d·f − y)².
    /// The single reversed pass must equal separate descent on the critic for
    /// `ce − λ·s` and on the extractor for `ce + λ·s`.
    #[test]
    fn reversal_matches_two_optimizer_reference() {
        let (x, y, lambda) = (0.8, 1.3, 0.1);
        let (g, d) = (0.6, -0.4);
        let f = g * x;

        // single pass with reversal on the critic branch
        let dce_df = 2.0 * (d * f - y) * d;
        let dce_dd = 2.0 * (d * f - y) * f;
        let branch = -lambda; // d(−λ·s)/ds
        let grl = GradientReversal::new(1.0).unwrap();
        let ds_df = grl.backward(&array![[branch * d]])[[0, 0]];
        let grad_g = (dce_df + ds_df) * x;
        let grad_d = dce_dd + branch * f;

        // reference: two objectives
        let ref_grad_d = dce_dd - lambda * f;
        let ref_grad_g = (dce_df + lambda * d) * x;
        assert_abs_diff_eq!(grad_d, ref_grad_d, epsilon = 1e-15);
        assert_abs_diff_eq!(grad_g, ref_grad_g, epsilon = 1e-15);
    }
}
