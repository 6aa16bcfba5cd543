use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Point;
use crate::schedule::NoiseSchedule;

use super::mixture::GaussianMixture;
use super::net::{Dense, NoisePredictorNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 20_000, batch_size: 128, learning_rate: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("training iterations, batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: NoisePredictorNet,
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
}

/// One denoising example: network features for `x_t` and the noise target.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: Point,
}

/// Draws `n` examples `(x_t = sqrt(ab) x_0 + sqrt(1-ab) eps, t) -> eps` with
/// `t` uniform on `1..=T`.
pub fn draw_examples<R: Rng + ?Sized>(
    net: &NoisePredictorNet,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut R,
) -> Vec<Example> {
    let x0 = mixture.sample_with(n, rng);
    x0.into_iter()
        .map(|x| {
            let t = rng.random_range(1..=schedule.len());
            let (a, s) = schedule.marginal_coeffs(t).expect("t drawn in range");
            let eps: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let xt = [a * x[0] + s * eps[0], a * x[1] + s * eps[1]];
            Example { features: net.features(&xt, t, schedule.len()), target: eps }
        })
        .collect()
}

/// Mean over the batch of `||net(x_t, t) - eps||^2`, and its exact gradient
/// with respect to every weight and bias.
pub fn loss_and_gradient(net: &NoisePredictorNet, batch: &[Example]) -> (f64, Vec<Dense>) {
    let mut grads: Vec<Dense> = net.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
    let last = net.layers.len() - 1;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len() + 1);
    let mut pres: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());

    for ex in batch {
        acts.clear();
        pres.clear();
        acts.push(ex.features.clone());
        for (i, layer) in net.layers.iter().enumerate() {
            let pre = layer.apply(&acts[i]);
            let act = if i == last { pre.clone() } else { pre.iter().map(|v| net.activation.apply(*v)).collect() };
            pres.push(pre);
            acts.push(act);
        }
        let out = &acts[last + 1];
        let mut delta: Vec<f64> = out.iter().zip(&ex.target).map(|(o, e)| o - e).collect();
        loss += delta.iter().map(|d| d * d).sum::<f64>() * scale;
        for d in &mut delta {
            *d *= 2.0 * scale;
        }

        for i in (0..=last).rev() {
            let layer = &net.layers[i];
            let input = &acts[i];
            let g = &mut grads[i];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if i > 0 {
                let mut back = vec![0.0; layer.inputs];
                for (o, d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += w * d;
                    }
                }
                for (b, p) in back.iter_mut().zip(&pres[i - 1]) {
                    *b *= net.activation.derivative(*p);
                }
                delta = back;
            }
        }
    }
    (loss, grads)
}

/// Mean denoising loss of `net` on the given examples.
pub fn batch_loss(net: &NoisePredictorNet, batch: &[Example]) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|ex| {
            let out = super::net::run_layers(&net.layers, net.activation, ex.features.clone(), |_, _| {});
            (out[0] - ex.target[0]).powi(2) + (out[1] - ex.target[1]).powi(2)
        })
        .sum::<f64>()
        / n
}

/// Trains `net` on the denoising objective by plain fixed-step SGD.
pub fn train_dsm(
    mut net: NoisePredictorNet,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    net.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let batch = draw_examples(&net, mixture, schedule, cfg.batch_size, &mut rng);
        let (loss, grads) = loss_and_gradient(&net, &batch);
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        losses.push(loss);
        for (layer, g) in net.layers.iter_mut().zip(&grads) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= cfg.learning_rate * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= cfg.learning_rate * gb;
            }
        }
    }
    Ok(Trained { net, losses })
}

/// Mean over `n` forward-diffused points (uniform `t`) of
/// `||net(x_t, t) - eps*(x_t, t)||^2`, where `eps*` is the analytic oracle.
pub fn oracle_discrepancy(
    net: &NoisePredictorNet,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = mixture.sample_with(n, &mut rng);
    let mut total = 0.0;
    for x in x0 {
        let t = rng.random_range(1..=schedule.len());
        let (a, s) = schedule.marginal_coeffs(t)?;
        let xt =
            [a * x[0] + s * rng.sample::<f64, _>(StandardNormal), a * x[1] + s * rng.sample::<f64, _>(StandardNormal)];
        let want = mixture.analytic_epsilon(&xt, t, schedule)?;
        let got = net.forward(&xt, t, schedule.len());
        total += (got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::net::{Activation, TimeEmbedding};

    fn setup() -> (GaussianMixture, NoiseSchedule) {
        (GaussianMixture::default(), NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap())
    }

    #[test]
    fn zero_net_loss_is_noise_energy() {
        let (gm, s) = setup();
        let net = NoisePredictorNet::zeros(&[8], Activation::Silu, TimeEmbedding::Scalar).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = draw_examples(&net, &gm, &s, 20_000, &mut rng);
        let loss = batch_loss(&net, &batch);
        // E||eps||^2 = 2 with standard error 2/sqrt(n) ~ 0.014.
        assert!((loss - 2.0).abs() < 0.06, "{loss}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (gm, s) = setup();
        for act in [Activation::Silu, Activation::Tanh] {
            let net = NoisePredictorNet::new(&[6, 5], act, TimeEmbedding::Scalar, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let batch = draw_examples(&net, &gm, &s, 16, &mut rng);
            let (_, grads) = loss_and_gradient(&net, &batch);
            let h = 1e-6;
            for (li, layer) in net.layers.iter().enumerate() {
                for wi in (0..layer.weights.len()).step_by(3) {
                    let mut up = net.clone();
                    up.layers[li].weights[wi] += h;
                    let mut down = net.clone();
                    down.layers[li].weights[wi] -= h;
                    let fd = (batch_loss(&up, &batch) - batch_loss(&down, &batch)) / (2.0 * h);
                    let g = grads[li].weights[wi];
                    assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "layer {li} w{wi}: {fd} vs {g}");
                }
                for bi in 0..layer.bias.len() {
                    let mut up = net.clone();
                    up.layers[li].bias[bi] += h;
                    let mut down = net.clone();
                    down.layers[li].bias[bi] -= h;
                    let fd = (batch_loss(&up, &batch) - batch_loss(&down, &batch)) / (2.0 * h);
                    let g = grads[li].bias[bi];
                    assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "layer {li} b{bi}: {fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn short_training_reduces_held_out_loss() {
        let (gm, s) = setup();
        let net = NoisePredictorNet::new(&[32, 32], Activation::Silu, TimeEmbedding::Scalar, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let held_out = draw_examples(&net, &gm, &s, 4000, &mut rng);
        let before = batch_loss(&net, &held_out);
        let cfg = TrainConfig { iterations: 500, batch_size: 64, learning_rate: 0.02, seed: 3 };
        let trained = train_dsm(net, &gm, &s, &cfg).unwrap();
        assert_eq!(trained.losses.len(), 500);
        let after = batch_loss(&trained.net, &held_out);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn divergence_is_reported() {
        let (gm, s) = setup();
        let net = NoisePredictorNet::new(&[16], Activation::Silu, TimeEmbedding::Scalar, 7).unwrap();
        let cfg = TrainConfig { iterations: 200, batch_size: 16, learning_rate: 1e6, seed: 3 };
        assert!(matches!(train_dsm(net, &gm, &s, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn rejects_bad_config() {
        let (gm, s) = setup();
        let net = NoisePredictorNet::new(&[4], Activation::Silu, TimeEmbedding::Scalar, 7).unwrap();
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        assert!(train_dsm(net, &gm, &s, &cfg).is_err());
    }
}
