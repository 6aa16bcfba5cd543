//! Uniform asymmetric fake quantization of the toy noise predictor.
//!
//! A value maps to `clamp(round(x / s) + z, 0, 2^b - 1)` with
//! round-half-away-from-zero, and back via `(q - z) s`. Weights are quantized
//! per tensor; activations are quantized at the input of every layer.
//! Scales come from an MSE grid search over shrunken min/max ranges.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Point;
use crate::schedule::NoiseSchedule;
use crate::source::EpsilonSource;
use crate::toymodel::{run_layers, Dense, NoisePredictorNet};

pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f64,
    zero_point: u32,
    bits: u8,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: u32, bits: u8) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::invalid(format!("bit width must be in 2..=16, got {bits}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive and finite, got {scale}")));
        }
        let qp = Self { scale, zero_point, bits };
        if zero_point > qp.qmax() {
            return Err(Error::invalid(format!("zero point {zero_point} exceeds {}", qp.qmax())));
        }
        Ok(qp)
    }

    /// Parameters covering `[lo, hi]` (extended to include zero).
    pub fn from_range(lo: f64, hi: f64, bits: u8) -> Result<Self> {
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        let qmax = ((1u32 << bits) - 1) as f64;
        if hi - lo <= 0.0 {
            return Self::new(MIN_SCALE, (1u32 << bits) / 2, bits);
        }
        let scale = ((hi - lo) / qmax).max(MIN_SCALE);
        let zero_point = (-lo / scale).round().clamp(0.0, qmax) as u32;
        Self::new(scale, zero_point, bits)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> u32 {
        self.zero_point
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Real interval that quantizes without clipping.
    pub fn range(&self) -> (f64, f64) {
        let z = self.zero_point as f64;
        (-z * self.scale, (self.qmax() as f64 - z) * self.scale)
    }

    pub fn quantize(&self, x: f64) -> u32 {
        // f64::round rounds half away from zero.
        let q = (x / self.scale).round() + self.zero_point as f64;
        q.clamp(0.0, self.qmax() as f64) as u32
    }

    pub fn dequantize(&self, q: u32) -> Result<f64> {
        if q > self.qmax() {
            return Err(Error::invalid(format!("quantized value {q} exceeds {}", self.qmax())));
        }
        Ok(self.dequantize_unchecked(q))
    }

    #[inline]
    fn dequantize_unchecked(&self, q: u32) -> f64 {
        (q as f64 - self.zero_point as f64) * self.scale
    }

    /// `dequantize(quantize(x))`.
    #[inline]
    pub fn fake(&self, x: f64) -> f64 {
        self.dequantize_unchecked(self.quantize(x))
    }
}

pub fn fake_quant_mse(values: &[f64], qp: &QuantParams) -> f64 {
    values.iter().map(|v| (qp.fake(*v) - v).powi(2)).sum::<f64>() / values.len() as f64
}

/// Plain min/max parameters over the whole tensor.
pub fn min_max_params(values: &[f64], bits: u8) -> Result<QuantParams> {
    let (lo, hi) = extent(values)?;
    QuantParams::from_range(lo, hi, bits)
}

fn extent(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("cannot calibrate an empty tensor"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot calibrate a tensor with non-finite values"));
    }
    Ok(values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v))))
}

/// MSE-optimal parameters among `grid` ranges `[f min, f max]` with `f`
/// evenly spaced in `[0.5, 1]`. Ties keep the larger range.
pub fn calibrate(values: &[f64], bits: u8, grid: usize) -> Result<QuantParams> {
    if grid == 0 {
        return Err(Error::invalid("calibration grid must have at least one candidate"));
    }
    let (lo, hi) = extent(values)?;
    let mut best = QuantParams::from_range(lo, hi, bits)?;
    let mut best_mse = fake_quant_mse(values, &best);
    for i in (0..grid.saturating_sub(1)).rev() {
        let f = 0.5 + 0.5 * i as f64 / (grid - 1) as f64;
        let cand = QuantParams::from_range(f * lo, f * hi, bits)?;
        let mse = fake_quant_mse(values, &cand);
        if mse < best_mse {
            best = cand;
            best_mse = mse;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    /// Bit width forced on the first and last layer weights; `None` uses
    /// `weight_bits` everywhere.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_layer_bits: Option<u8>,
    pub grid: usize,
    /// Full-precision trajectories whose inputs form the calibration set.
    pub calib_trajectories: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { weight_bits: 4, act_bits: 8, edge_layer_bits: Some(8), grid: 100, calib_trajectories: 32 }
    }
}

impl QuantConfig {
    pub fn uniform(bits: u8) -> Self {
        Self { weight_bits: bits, act_bits: bits, edge_layer_bits: None, ..Self::default() }
    }

    fn layer_bits(&self, layer: usize, layers: usize) -> u8 {
        match self.edge_layer_bits {
            Some(b) if layer == 0 || layer + 1 == layers => b,
            _ => self.weight_bits,
        }
    }
}

/// Serialized form: the reference net plus one parameter set per weight
/// tensor and per activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetFile {
    pub net: NoisePredictorNet,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub weights: Vec<QuantParams>,
    pub activations: Vec<QuantParams>,
}

/// Fake-quantized noise predictor `eps_hat_theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantizedNetFile", into = "QuantizedNetFile")]
pub struct QuantizedNet {
    reference: NoisePredictorNet,
    weight_bits: u8,
    act_bits: u8,
    weight_params: Vec<QuantParams>,
    act_params: Vec<QuantParams>,
    fake_layers: Vec<Dense>,
}

impl TryFrom<QuantizedNetFile> for QuantizedNet {
    type Error = Error;

    fn try_from(f: QuantizedNetFile) -> Result<Self> {
        QuantizedNet::from_parts(f.net, f.weight_bits, f.act_bits, f.weights, f.activations)
    }
}

impl From<QuantizedNet> for QuantizedNetFile {
    fn from(q: QuantizedNet) -> Self {
        QuantizedNetFile {
            net: q.reference,
            weight_bits: q.weight_bits,
            act_bits: q.act_bits,
            weights: q.weight_params,
            activations: q.act_params,
        }
    }
}

impl QuantizedNet {
    pub fn from_parts(
        reference: NoisePredictorNet,
        weight_bits: u8,
        act_bits: u8,
        weight_params: Vec<QuantParams>,
        act_params: Vec<QuantParams>,
    ) -> Result<Self> {
        reference.validate()?;
        let layers = reference.layers.len();
        if weight_params.len() != layers {
            return Err(Error::MissingCalibration(format!(
                "weights: {} parameter sets for {layers} layers",
                weight_params.len()
            )));
        }
        if act_params.len() != layers {
            return Err(Error::MissingCalibration(format!(
                "activations: {} parameter sets for {layers} sites",
                act_params.len()
            )));
        }
        let fake_layers = reference
            .layers
            .iter()
            .zip(&weight_params)
            .map(|(l, qp)| Dense { weights: l.weights.iter().map(|w| qp.fake(*w)).collect(), ..l.clone() })
            .collect();
        Ok(Self { reference, weight_bits, act_bits, weight_params, act_params, fake_layers })
    }

    /// Post-training calibration. Weight tensors are calibrated on their own
    /// values; activation sites on the values the full-precision net produces
    /// for `inputs` (pairs of `x_t` and `t`).
    pub fn calibrate(
        net: &NoisePredictorNet,
        cfg: &QuantConfig,
        inputs: &[(Point, usize)],
        schedule_len: usize,
    ) -> Result<Self> {
        net.validate()?;
        if inputs.is_empty() {
            return Err(Error::invalid("empty calibration set"));
        }
        let layers = net.layers.len();
        let weight_params = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| calibrate(&l.weights, cfg.layer_bits(i, layers), cfg.grid))
            .collect::<Result<Vec<_>>>()?;

        let mut site_values: Vec<Vec<f64>> = vec![Vec::new(); layers];
        for (x, t) in inputs {
            run_layers(&net.layers, net.activation, net.features(x, *t, schedule_len), |i, h| {
                site_values[i].extend_from_slice(h)
            });
        }
        let act_params =
            site_values.iter().map(|v| calibrate(v, cfg.act_bits, cfg.grid)).collect::<Result<Vec<_>>>()?;
        Self::from_parts(net.clone(), cfg.weight_bits, cfg.act_bits, weight_params, act_params)
    }

    pub fn reference(&self) -> &NoisePredictorNet {
        &self.reference
    }

    pub fn weight_params(&self) -> &[QuantParams] {
        &self.weight_params
    }

    pub fn act_params(&self) -> &[QuantParams] {
        &self.act_params
    }

    /// Fake-quantized forward pass for one point.
    pub fn forward(&self, x: &Point, t: usize, schedule_len: usize) -> Point {
        let features = self.reference.features(x, t, schedule_len);
        let out = run_layers(&self.fake_layers, self.reference.activation, features, |i, h| {
            let qp = &self.act_params[i];
            for v in h.iter_mut() {
                *v = qp.fake(*v);
            }
        });
        [out[0], out[1]]
    }

    pub fn forward_batch(&self, xs: &[Point], t: usize, schedule: &NoiseSchedule) -> Result<Vec<Point>> {
        schedule.alpha_bar(t)?;
        Ok(xs.iter().map(|x| self.forward(x, t, schedule.len())).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuantizedEpsilon<'a> {
    pub net: &'a QuantizedNet,
    pub schedule_len: usize,
}

impl EpsilonSource for QuantizedEpsilon<'_> {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        self.net.forward(x, t, self.schedule_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{Activation, TimeEmbedding};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn quantize_hand_values() {
        let qp = QuantParams::new(1.0, 0, 8).unwrap();
        assert_eq!(qp.quantize(0.0), 0);
        let qp = QuantParams::new(0.02, 128, 8).unwrap();
        assert_eq!(qp.quantize(2.56), 255);
        assert_eq!(qp.quantize(-10.0), 0);
        assert_eq!(qp.quantize(0.01), 129); // half rounds away from zero
        assert_eq!(qp.quantize(-0.01), 127);
    }

    #[test]
    fn dequantize_hand_values() {
        let qp = QuantParams::new(0.02, 128, 8).unwrap();
        assert_eq!(qp.dequantize(128).unwrap(), 0.0);
        assert!((qp.dequantize(255).unwrap() - 2.54).abs() < 1e-12);
        assert!(qp.dequantize(256).is_err());
    }

    #[test]
    fn param_validation() {
        assert!(QuantParams::new(0.0, 0, 8).is_err());
        assert!(QuantParams::new(1.0, 256, 8).is_err());
        assert!(QuantParams::new(1.0, 0, 1).is_err());
        assert!(QuantParams::new(1.0, 0, 17).is_err());
    }

    #[test]
    fn constant_tensors() {
        let zeros = vec![0.0; 50];
        let qp = calibrate(&zeros, 8, 20).unwrap();
        assert_eq!(qp.scale(), MIN_SCALE);
        assert_eq!(qp.zero_point(), 128);
        assert_eq!(fake_quant_mse(&zeros, &qp), 0.0);

        let consts = vec![0.75; 50];
        let qp = calibrate(&consts, 8, 20).unwrap();
        assert!(fake_quant_mse(&consts, &qp) < 1e-24);
    }

    #[test]
    fn uniform_grid_beats_min_max() {
        let v: Vec<f64> = (0..=1000).map(|i| -1.0 + 2.0 * i as f64 / 1000.0).collect();
        let cal = calibrate(&v, 8, 100).unwrap();
        let mm = min_max_params(&v, 8).unwrap();
        assert!(fake_quant_mse(&v, &cal) <= fake_quant_mse(&v, &mm));
    }

    #[test]
    fn heavy_tails_get_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let qp = calibrate(&v, 4, 100).unwrap();
        let (lo, hi) = qp.range();
        let (min, max) = extent(&v).unwrap();
        assert!(lo > min && hi < max, "range {lo}..{hi} vs data {min}..{max}");
    }

    #[test]
    fn empty_or_bad_tensors_rejected() {
        assert!(calibrate(&[], 8, 10).is_err());
        assert!(calibrate(&[1.0, f64::NAN], 8, 10).is_err());
        assert!(calibrate(&[1.0], 8, 0).is_err());
    }

    proptest! {
        #[test]
        fn quantized_value_in_range(x in -1e6f64..1e6, scale in 1e-4f64..10.0, bits in 2u8..=16, zf in 0.0f64..1.0) {
            let qmax = (1u32 << bits) - 1;
            let qp = QuantParams::new(scale, (zf * qmax as f64) as u32, bits).unwrap();
            prop_assert!(qp.quantize(x) <= qmax);
        }

        #[test]
        fn round_trip_within_half_step(u in 0.0f64..1.0, scale in 1e-4f64..10.0, bits in 2u8..=16, zf in 0.0f64..1.0) {
            let qmax = (1u32 << bits) - 1;
            let qp = QuantParams::new(scale, (zf * qmax as f64) as u32, bits).unwrap();
            let (lo, hi) = qp.range();
            let x = lo + u * (hi - lo);
            prop_assert!((qp.fake(x) - x).abs() <= scale / 2.0 * (1.0 + 1e-9));
        }

        #[test]
        fn calibration_never_worse_than_min_max(seed in 0u64..1000, bits in 2u8..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shift: f64 = rng.random_range(-2.0..2.0);
            let v: Vec<f64> = (0..200).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect();
            let cal = calibrate(&v, bits, 40).unwrap();
            let mm = min_max_params(&v, bits).unwrap();
            prop_assert!(fake_quant_mse(&v, &cal) <= fake_quant_mse(&v, &mm));
        }
    }

    fn toy_inputs(n: usize) -> Vec<(Point, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n).map(|_| ([rng.sample(StandardNormal), rng.sample(StandardNormal)], rng.random_range(1..=100))).collect()
    }

    #[test]
    fn sixteen_bit_matches_full_precision() {
        let net = NoisePredictorNet::new(&[16, 16, 16], Activation::Silu, TimeEmbedding::Scalar, 5).unwrap();
        let inputs = toy_inputs(500);
        let q = QuantizedNet::calibrate(&net, &QuantConfig::uniform(16), &inputs, 100).unwrap();
        for (x, t) in &inputs {
            let a = net.forward(x, *t, 100);
            let b = q.forward(x, *t, 100);
            assert!((a[0] - b[0]).abs() < 1e-2 && (a[1] - b[1]).abs() < 1e-2);
            assert_eq!(b, q.forward(x, *t, 100));
        }
    }

    #[test]
    fn error_shrinks_with_bits() {
        let net = NoisePredictorNet::new(&[16, 16, 16], Activation::Silu, TimeEmbedding::Scalar, 5).unwrap();
        let inputs = toy_inputs(500);
        let mut last = f64::INFINITY;
        for bits in [4, 8, 12, 16] {
            let mut cfg = QuantConfig::uniform(bits);
            cfg.grid = 1;
            let q = QuantizedNet::calibrate(&net, &cfg, &inputs, 100).unwrap();
            let mse = inputs
                .iter()
                .map(|(x, t)| {
                    let (a, b) = (net.forward(x, *t, 100), q.forward(x, *t, 100));
                    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
                })
                .sum::<f64>();
            assert!(mse < last, "bits {bits}: {mse} >= {last}");
            last = mse;
        }
    }

    #[test]
    fn edge_layers_stay_at_eight_bits() {
        let net = NoisePredictorNet::new(&[8, 8, 8], Activation::Silu, TimeEmbedding::Scalar, 5).unwrap();
        let q = QuantizedNet::calibrate(&net, &QuantConfig::default(), &toy_inputs(50), 100).unwrap();
        let bits: Vec<u8> = q.weight_params().iter().map(|p| p.bits()).collect();
        assert_eq!(bits, vec![8, 4, 4, 8]);
        assert!(q.act_params().iter().all(|p| p.bits() == 8));
    }

    #[test]
    fn missing_site_is_rejected() {
        let net = NoisePredictorNet::new(&[8], Activation::Silu, TimeEmbedding::Scalar, 5).unwrap();
        let q = QuantizedNet::calibrate(&net, &QuantConfig::default(), &toy_inputs(50), 100).unwrap();
        let mut file = QuantizedNetFile::from(q.clone());
        file.activations.pop();
        let json = serde_json::to_string(&file).unwrap();
        assert!(serde_json::from_str::<QuantizedNet>(&json).is_err());

        let back: QuantizedNet = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        assert_eq!(back, q);
    }
}
