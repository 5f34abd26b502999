use rand::Rng;

use crate::error::{Error, Result};
use crate::gates::{gumbel_logits, GumbelParams};
use crate::tensor::{ConvLayerSpec, Tensor};

/// Softmax temperature of the binary relaxation.
pub const TEMPERATURE: f64 = 1.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two independent standard Gumbel draws per output position.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl GumbelNoise {
    pub fn draw(n: usize, rng: &mut impl Rng) -> Self {
        let mut one = || {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            -(-u.ln()).ln()
        };
        let g1 = (0..n).map(|_| one()).collect();
        let g2 = (0..n).map(|_| one()).collect();
        Self { g1, g2 }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            g1: vec![0.0; n],
            g2: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.g1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g1.is_empty()
    }

    /// `g1 - g2`, the logistic perturbation added to each logit.
    pub fn difference(&self) -> Vec<f64> {
        self.g1.iter().zip(&self.g2).map(|(a, b)| a - b).collect()
    }
}

/// A training-time gate sample on one layer's output grid.
#[derive(Clone, Debug)]
pub struct GumbelSample {
    pub logits: Vec<f64>,
    pub noise: GumbelNoise,
    /// `1[logit + g1 - g2 >= 0]`.
    pub hard: Vec<bool>,
    /// `sigmoid((logit + g1 - g2) / tau)`.
    pub soft: Vec<f64>,
}

impl GumbelSample {
    pub fn hard_rate(&self) -> f64 {
        self.hard.iter().filter(|&&h| h).count() as f64 / self.hard.len().max(1) as f64
    }

    pub fn soft_mean(&self) -> f64 {
        self.soft.iter().sum::<f64>() / self.soft.len().max(1) as f64
    }
}

/// Draws a hard/soft gate pair for residual `r` with the given noise.
pub fn sample_gate_train(
    r: &Tensor,
    layer: &ConvLayerSpec,
    phi: &GumbelParams,
    noise: &GumbelNoise,
) -> Result<GumbelSample> {
    let logits: Vec<f64> = gumbel_logits(r, layer, phi)?
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    if noise.len() != logits.len() {
        return Err(Error::Invalid(format!(
            "{} noise pairs for {} gate positions",
            noise.len(),
            logits.len()
        )));
    }
    let u: Vec<f64> = logits
        .iter()
        .zip(noise.difference())
        .map(|(l, n)| (l + n) / TEMPERATURE)
        .collect();
    Ok(GumbelSample {
        hard: u.iter().map(|&v| v >= 0.0).collect(),
        soft: u.iter().map(|&v| sigmoid(v)).collect(),
        logits,
        noise: noise.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer() -> ConvLayerSpec {
        ConvLayerSpec::new(2, 1, ConvGeometry::same(3), vec![0.0; 18]).unwrap()
    }

    #[test]
    fn noise_has_gumbel_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = GumbelNoise::draw(200_000, &mut rng);
        let mean = n.g1.iter().sum::<f64>() / n.len() as f64;
        // Euler-Mascheroni constant
        assert!((mean - 0.5772).abs() < 0.01, "{mean}");
        let d = n.difference();
        let pos = d.iter().filter(|&&v| v >= 0.0).count() as f64 / d.len() as f64;
        assert!((pos - 0.5).abs() < 0.01);
    }

    #[test]
    fn hard_agrees_with_soft_half_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Tensor::from_fn(1, 5, 5, |_, y, x| (y as f32 - x as f32) * 0.1);
        let mut w = vec![0.0; 9];
        w[4] = 3.0;
        let phi = GumbelParams::new(w, -0.1);
        let noise = GumbelNoise::draw(25, &mut rng);
        let s = sample_gate_train(&r, &layer(), &phi, &noise).unwrap();
        for (h, p) in s.hard.iter().zip(&s.soft) {
            assert_eq!(*h, *p >= 0.5);
        }
    }

    #[test]
    fn firing_frequency_matches_sigmoid_of_logit() {
        // with logistic noise, P(hard) = sigmoid(logit)
        let r = Tensor::zeros(1, 1, 1);
        let l = ConvLayerSpec::new(1, 1, ConvGeometry::same(1), vec![0.0]).unwrap();
        let phi = GumbelParams::new(vec![0.0], 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trials = 40_000;
        let fired = (0..trials)
            .filter(|_| {
                let noise = GumbelNoise::draw(1, &mut rng);
                sample_gate_train(&r, &l, &phi, &noise).unwrap().hard[0]
            })
            .count();
        let rate = fired as f64 / trials as f64;
        assert!((rate - sigmoid(0.7)).abs() < 0.01, "{rate}");
    }

    #[test]
    fn noise_length_checked() {
        let r = Tensor::zeros(1, 4, 4);
        let phi = GumbelParams::initial(&layer());
        assert!(sample_gate_train(&r, &layer(), &phi, &GumbelNoise::zeros(3)).is_err());
        let s = sample_gate_train(&r, &layer(), &phi, &GumbelNoise::zeros(16)).unwrap();
        assert_eq!(s.hard_rate(), 1.0);
        assert!((s.soft_mean() - sigmoid(2.0)).abs() < 1e-6);
    }
}
