//! End-to-end runs: model, quantization or injection, pair collection,
//! noise-model fit, sampling under each mode, and metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, ModelSource, NoiseModelSource};
use crate::error::{Error, Result, StageContext};
use crate::injection::{inject_synthetic_noise, SyntheticInjection};
use crate::linalg::Point;
use crate::metrics::{self, MetricsReport};
use crate::noisemodel::{collect_pairs, gaussianity_report, GaussianityReport, JointGaussianModel, PairedSamples};
use crate::quantizer::QuantizedNet;
use crate::sampler::{self, Mode, PerturbationRow, SampleOutput, Sampler, SamplerConfig};
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::seed::{self, tag};
use crate::source::EpsilonSource;
use crate::toymodel::{train_dsm, AnalyticEpsilon, GaussianMixture, NoisePredictorNet};

/// Name of the marker written when a run fails.
pub const FAILED_MARKER: &str = "FAILED";

/// Full-precision noise predictor.
#[derive(Debug, Clone)]
pub enum FpModel {
    Analytic(AnalyticEpsilon),
    Net { net: NoisePredictorNet, schedule_len: usize },
}

impl EpsilonSource for FpModel {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        match self {
            FpModel::Analytic(a) => a.epsilon(x, t),
            FpModel::Net { net, schedule_len } => net.forward(x, t, *schedule_len),
        }
    }
}

/// The noise source the non-`fp` modes sample with.
#[derive(Debug, Clone)]
pub enum QuantSource {
    /// No quantization configured: the full-precision model itself.
    Identity(FpModel),
    Quantized {
        net: QuantizedNet,
        schedule_len: usize,
    },
    Injected(SyntheticInjection<FpModel>),
}

impl EpsilonSource for QuantSource {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        match self {
            QuantSource::Identity(m) => m.epsilon(x, t),
            QuantSource::Quantized { net, schedule_len } => net.forward(x, t, *schedule_len),
            QuantSource::Injected(inj) => inj.epsilon(x, t),
        }
    }
}

/// Resolved configuration: schedule, plan and target built once.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub plan: StepPlan,
    pub mixture: GaussianMixture,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { schedule: cfg.schedule()?, plan: cfg.plan()?, mixture: cfg.mixture()?, cfg })
    }

    fn seed(&self, stage: u64) -> u64 {
        seed::derive(self.cfg.seed, stage)
    }

    /// Trains a fresh net from the `[train]` section.
    pub fn train_net(&self) -> Result<NoisePredictorNet> {
        let t = &self.cfg.train;
        let init = NoisePredictorNet::new(&t.hidden, t.activation, t.embedding, self.seed(tag::INIT))?;
        Ok(train_dsm(init, &self.mixture, &self.schedule, &t.train_config(self.seed(tag::TRAIN)))?.net)
    }

    /// The full-precision model, and whether it was trained in this call.
    pub fn fp_model(&self) -> Result<(FpModel, bool)> {
        match self.cfg.model.source {
            ModelSource::Analytic => {
                Ok((FpModel::Analytic(AnalyticEpsilon::new(&self.mixture, &self.schedule)?), false))
            }
            ModelSource::Net => {
                let (net, trained) = match &self.cfg.model.net_path {
                    Some(p) => (NoisePredictorNet::load(p)?, false),
                    None => (self.train_net().stage("train")?, true),
                };
                Ok((FpModel::Net { net, schedule_len: self.schedule.len() }, trained))
            }
        }
    }

    pub fn quantize(&self, net: &NoisePredictorNet) -> Result<QuantizedNet> {
        let q = self.cfg.quantization.as_ref().ok_or_else(|| Error::Config("no [quantization] section".into()))?;
        if let Some(p) = &self.cfg.model.qnet_path {
            return QuantizedNet::load(p);
        }
        let fp = FpModel::Net { net: net.clone(), schedule_len: self.schedule.len() };
        let inputs = sampler::trajectory_inputs(
            &fp,
            &self.schedule,
            &self.plan,
            q.calib_trajectories,
            self.seed(tag::CALIBRATE),
        )?;
        QuantizedNet::calibrate(net, q, &inputs, self.schedule.len())
    }

    pub fn quant_source(&self, fp: &FpModel) -> Result<QuantSource> {
        if self.cfg.quantization.is_some() {
            let FpModel::Net { net, .. } = fp else {
                return Err(Error::Config("quantization requires a network model".into()));
            };
            let net = self.quantize(net).stage("quantize")?;
            return Ok(QuantSource::Quantized { net, schedule_len: self.schedule.len() });
        }
        if let Some(inj) = &self.cfg.injection {
            let src = inject_synthetic_noise(fp.clone(), inj, &self.schedule, &self.plan, self.seed(tag::INJECT))
                .stage("inject")?;
            return Ok(QuantSource::Injected(src));
        }
        Ok(QuantSource::Identity(fp.clone()))
    }

    pub fn collect(&self, fp: &FpModel, q: &QuantSource) -> Result<Vec<PairedSamples>> {
        let nm = &self.cfg.noise_model;
        collect_pairs(
            fp,
            q,
            &self.schedule,
            &self.plan,
            nm.collect_trajectories,
            self.seed(tag::COLLECT),
            nm.collect_along,
        )
        .stage("collect")
    }

    pub fn noise_model(&self, pairs: &[PairedSamples], q: &QuantSource) -> Result<JointGaussianModel> {
        match (self.cfg.noise_model.source, q) {
            (NoiseModelSource::Exact, QuantSource::Injected(inj)) => Ok(inj.exact_model().clone()),
            (NoiseModelSource::Exact, _) => Err(Error::Config("exact noise model requires injection".into())),
            (NoiseModelSource::Fitted, _) => JointGaussianModel::fit(pairs).stage("fit"),
        }
    }

    pub fn sample(
        &self,
        mode: Mode,
        fp: &FpModel,
        q: &QuantSource,
        model: Option<&JointGaussianModel>,
    ) -> Result<SampleOutput> {
        let cfg = SamplerConfig {
            mode,
            plan: self.plan.clone(),
            seed: self.seed(tag::SAMPLE),
            dd2_unconditional_mean: self.cfg.sampler.dd2_unconditional_mean,
        };
        Sampler::new(&self.schedule, fp, q, model, cfg)?.sample(self.cfg.n_samples).stage("sample")
    }

    /// Fresh target sample with its own seed stream.
    pub fn ground_truth(&self) -> Vec<Point> {
        self.mixture.sample(self.cfg.n_samples, self.seed(tag::GROUND_TRUTH))
    }

    pub fn perturbation(&self, model: &JointGaussianModel) -> Result<Vec<PerturbationRow>> {
        sampler::perturbation_report(model, &self.schedule, &self.plan)
    }
}

/// Everything a run produces besides the files.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub samples: BTreeMap<Mode, SampleOutput>,
    pub ground_truth: Vec<Point>,
    pub noise_model: JointGaussianModel,
    pub gaussianity: GaussianityReport,
}

/// Runs the configured experiment and writes its artifacts under
/// `cfg.output_dir`. On failure a `FAILED` marker naming the stage is left
/// next to whatever was already written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let pipeline = Pipeline::new(cfg.clone()).stage("config")?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)).stage("setup")?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e)).stage("setup")?;
    }
    let result = run_stages(&pipeline, &out);
    if let Err(e) = &result {
        let stage = match e {
            Error::Stage { stage, .. } => *stage,
            _ => "unknown",
        };
        // Best effort: the original error matters more than the marker.
        let _ = std::fs::write(&marker, format!("stage: {stage}\nerror: {e}\n"));
    }
    result
}

fn run_stages(p: &Pipeline, out: &Path) -> Result<ExperimentOutput> {
    write_text(&out.join("config.toml"), &p.cfg.to_toml()?).stage("write")?;

    let (fp, trained) = p.fp_model().stage("model")?;
    if let (true, FpModel::Net { net, .. }) = (trained, &fp) {
        net.save(&out.join("net.json")).stage("write")?;
    }
    let q = p.quant_source(&fp).stage("quantize")?;
    if let QuantSource::Quantized { net, .. } = &q {
        net.save(&out.join("qnet.json")).stage("write")?;
    }

    let pairs = p.collect(&fp, &q)?;
    let gaussianity = gaussianity_report(&pairs).stage("gaussianity")?;
    write_with(&out.join("gaussianity.csv"), |w| gaussianity.write_csv(w)).stage("write")?;

    let model = p.noise_model(&pairs, &q)?;
    model.save(&out.join("noise_model.json")).stage("write")?;
    let perturbation = p.perturbation(&model).stage("report")?;
    write_with(&out.join("perturbation.csv"), |w| write_perturbation_csv(&perturbation, w)).stage("write")?;

    let ground_truth = p.ground_truth();
    metrics::save_points(&ground_truth, &out.join("ground_truth.csv")).stage("write")?;

    let mut report = MetricsReport::default();
    let mut samples = BTreeMap::new();
    for &mode in &p.cfg.modes {
        let s = p.sample(mode, &fp, &q, Some(&model))?;
        metrics::save_points(&s.points, &out.join(format!("samples_{mode}.csv"))).stage("write")?;
        write_with(&out.join(format!("diagnostics_{mode}.csv")), |w| sampler::write_diagnostics_csv(&s.diagnostics, w))
            .stage("write")?;
        let m = metrics::compare(&s.points, &ground_truth, &p.mixture).stage("metrics")?;
        report.modes.insert(mode.to_string(), m);
        samples.insert(mode, s);
    }
    report.save(&out.join("metrics.json")).stage("write")?;
    Ok(ExperimentOutput { report, samples, ground_truth, noise_model: model, gaussianity })
}

pub fn write_perturbation_csv<W: Write>(rows: &[PerturbationRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,drift_bias,diffusion_inflation")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.t, r.drift_bias, r.diffusion_inflation)?;
    }
    Ok(())
}

/// Pooled `(eps_hat, delta)` pairs, one row per element.
pub fn write_pairs_csv<W: Write>(pairs: &[PairedSamples], mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,eps_hat,delta")?;
    for s in pairs {
        for (e, d) in &s.pairs {
            writeln!(w, "{},{},{}", s.t, e, d)?;
        }
    }
    Ok(())
}

pub fn read_pairs_csv(path: &Path) -> Result<Vec<PairedSamples>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("t,eps_hat,delta") {
        return Err(Error::Schema("pairs CSV must start with header `t,eps_hat,delta`".into()));
    }
    let mut by_t: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Schema(format!("{}: malformed row {}", path.display(), i + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [t, e, d] = f[..] else { return Err(bad()) };
        let t: usize = t.parse().map_err(|_| bad())?;
        let e: f64 = e.parse().map_err(|_| bad())?;
        let d: f64 = d.parse().map_err(|_| bad())?;
        by_t.entry(t).or_default().push((e, d));
    }
    Ok(by_t.into_iter().rev().map(|(t, pairs)| PairedSamples { t, pairs }).collect())
}

pub fn write_with<F>(path: &PathBuf, f: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
{
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::{InjectionConfig, Profile};

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: dir.to_path_buf(),
            n_samples: 400,
            modes: vec![Mode::Fp, Mode::Naive, Mode::Dd2],
            injection: Some(InjectionConfig {
                mu_delta: Profile::Constant(0.1),
                var_delta: Profile::Constant(0.04),
                rho: Profile::Constant(0.0),
                pilot_trajectories: 256,
            }),
            sampler: crate::config::SamplerSection { steps: 20, ..Default::default() },
            noise_model: crate::config::NoiseModelSection { collect_trajectories: 64, ..Default::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let out = run_experiment(&cfg).unwrap();
        for f in [
            "config.toml",
            "gaussianity.csv",
            "noise_model.json",
            "perturbation.csv",
            "ground_truth.csv",
            "samples_fp.csv",
            "samples_naive.csv",
            "samples_dd2.csv",
            "diagnostics_dd2.csv",
            "metrics.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(!dir.path().join(FAILED_MARKER).exists());
        assert_eq!(out.report.modes.len(), 3);
        let echoed = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(echoed, cfg);
        assert_eq!(JointGaussianModel::load(&dir.path().join("noise_model.json")).unwrap(), out.noise_model);
    }

    #[test]
    fn failure_leaves_marker_with_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.model.source = ModelSource::Net;
        cfg.model.net_path = Some(dir.path().join("missing.json"));
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }), "{err}");
        let marker = std::fs::read_to_string(dir.path().join(FAILED_MARKER)).unwrap();
        assert!(marker.starts_with("stage: "), "{marker}");
        assert!(dir.path().join("config.toml").exists());
    }

    #[test]
    fn pairs_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![
            PairedSamples { t: 21, pairs: vec![(0.5, 0.25), (-1.0, 0.125)] },
            PairedSamples { t: 1, pairs: vec![(0.1, 0.2)] },
        ];
        let path = dir.path().join("pairs.csv");
        write_with(&path, |w| write_pairs_csv(&pairs, w)).unwrap();
        let back = read_pairs_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].t, 21);
        assert_eq!(back[0].pairs, pairs[0].pairs);
    }
}
