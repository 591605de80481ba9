//! Losses, optimizers, synthetic tasks and the two training loops.
//!
//! Both loops are single-threaded and draw every random number from
//! streams derived from one seed, so a (seed, settings) pair always yields
//! the same trace, bit for bit.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, GradientMap, Graph, GraphError, NodeId, ParamId};
use crate::models::{ModelError, ModelSpec};
use crate::oracle::{eval_explicit, OracleError, OracleParams};
use crate::rng::{gaussian, stream, uniform, uniform_matrix, Stream};
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize, trace: Trace },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(TrainError::Invalid(msg.into()))
}

pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    Ok(autodiff::mse(pred, target)?)
}

/// Median of all pairwise Euclidean distances between rows.
pub fn median_pairwise_distance(x: &Matrix) -> f64 {
    let mut d = Vec::with_capacity(x.rows() * x.rows().saturating_sub(1) / 2);
    for i in 0..x.rows() {
        for j in i + 1..x.rows() {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 0 {
        0.5 * (d[m - 1] + d[m])
    } else {
        d[m]
    }
}

pub const BANDWIDTH_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Bandwidths scaled by the median pairwise distance of `real`.
pub fn default_bandwidths(real: &Matrix) -> Vec<f64> {
    let mut m = median_pairwise_distance(real);
    if !(m > 0.0) {
        m = 1.0;
    }
    BANDWIDTH_MULTIPLIERS.iter().map(|k| k * m).collect()
}

/// Biased MMD² with RBF kernels, summed over bandwidths.
pub fn mmd_loss(x: &Matrix, y: &Matrix, bandwidths: &[f64]) -> Result<f64> {
    if x.rows() == 0 || y.rows() == 0 {
        return invalid("mmd needs non-empty batches");
    }
    if x.cols() != y.cols() {
        return invalid(format!(
            "mmd feature widths differ: {} vs {}",
            x.cols(),
            y.cols()
        ));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|&b| !(b > 0.0)) {
        return invalid("bandwidths must be positive");
    }
    Ok(autodiff::mmd_value(x, y, bandwidths))
}

/// `(loss_D, loss_G)` of the non-saturating objective.
pub fn nonsat_gan_losses(real_logits: &[f64], fake_logits: &[f64]) -> Result<(f64, f64)> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return invalid("gan losses need logits");
    }
    if real_logits
        .iter()
        .chain(fake_logits)
        .any(|v| !v.is_finite())
    {
        return invalid("non-finite logits");
    }
    let mean =
        |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let sp = autodiff::softplus;
    let d = mean(real_logits, &|x| sp(-x)) + mean(fake_logits, &sp);
    let g = mean(fake_logits, &|x| sp(-x));
    Ok((d, g))
}

/// `min(‖g1 − g2‖₁ / ‖z1 − z2‖₁, τ)`.
pub fn diversity_regularizer(
    g1: &[f64],
    g2: &[f64],
    z1: &[f64],
    z2: &[f64],
    tau: f64,
) -> Result<f64> {
    if g1.len() != g2.len() || z1.len() != z2.len() {
        return invalid("diversity inputs have mismatched lengths");
    }
    if !(tau > 0.0) {
        return invalid("tau must be positive");
    }
    let dz: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b).abs()).sum();
    if dz == 0.0 {
        return invalid("noise samples are identical");
    }
    let dg: f64 = g1.iter().zip(g2).map(|(a, b)| (a - b).abs()).sum();
    Ok((dg / dz).min(tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub method: Method,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine-anneal the learning rate down to `lr * final_lr_fraction`;
    /// 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            method: Method::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr_fraction: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return invalid("optimizer.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("optimizer betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("optimizer.eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return invalid("optimizer.final_lr_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.final_lr_fraction >= 1.0 || total <= 1 {
            return self.lr;
        }
        let p = step as f64 / (total - 1) as f64;
        let lo = self.lr * self.final_lr_fraction;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: OptimConfig,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptState {
    pub fn new(config: OptimConfig, params: &[&Matrix]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        OptState {
            config,
            lr: config.lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

fn check_update(state: &OptState, grads: &GradientMap, params: &[&mut Matrix]) -> Result<()> {
    if params.len() != state.m.len() {
        return invalid(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        ));
    }
    for (i, p) in params.iter().enumerate() {
        let g = grads
            .get(&ParamId(i))
            .ok_or_else(|| TrainError::Invalid(format!("no gradient for parameter {i}")))?;
        if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
            return invalid(format!(
                "parameter {i}: gradient shape {:?} vs {:?}",
                g.shape(),
                p.shape()
            ));
        }
    }
    Ok(())
}

/// Bias-corrected Adam; gradient for `params[i]` is `grads[ParamId(i)]`.
pub fn adam_step(
    state: &mut OptState,
    grads: &GradientMap,
    params: &mut [&mut Matrix],
) -> Result<()> {
    check_update(state, grads, params)?;
    state.step += 1;
    let OptimConfig {
        beta1, beta2, eps, ..
    } = state.config;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[&ParamId(i)];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *w -= state.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step(
    state: &mut OptState,
    grads: &GradientMap,
    params: &mut [&mut Matrix],
) -> Result<()> {
    check_update(state, grads, params)?;
    state.step += 1;
    for (i, p) in params.iter_mut().enumerate() {
        for (w, g) in p.data_mut().iter_mut().zip(grads[&ParamId(i)].data()) {
            *w -= state.lr * g;
        }
    }
    Ok(())
}

pub fn optimizer_step(
    state: &mut OptState,
    grads: &GradientMap,
    params: &mut [&mut Matrix],
) -> Result<()> {
    match state.config.method {
        Method::Adam => adam_step(state, grads, params),
        Method::Sgd => sgd_step(state, grads, params),
    }
}

/// Per-step metrics; serialized as CSV with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl Trace {
    pub fn new(columns: &[&str]) -> Self {
        Trace {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn last(&self, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == column)?;
        self.rows.last().map(|(_, v)| v[c])
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string()];
        header.extend(self.columns.iter().cloned());
        out.write_record(&header)?;
        for (step, vals) in &self.rows {
            let mut rec = vec![step.to_string()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// A fixed supervised dataset: one batch matrix per input variable.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub inputs: Vec<Matrix>,
    pub targets: Matrix,
}

/// Targets drawn from a random explicit polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyRegression {
    pub target: OracleParams,
    pub data: RegressionData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolyRegressionConfig {
    pub degree: usize,
    pub input_dims: Vec<usize>,
    pub output_dim: usize,
    pub samples: usize,
    pub target_rms: f64,
}

impl Default for PolyRegressionConfig {
    fn default() -> Self {
        PolyRegressionConfig {
            degree: 3,
            input_dims: vec![2, 2],
            output_dim: 1,
            samples: 256,
            target_rms: 1.0,
        }
    }
}

impl PolyRegression {
    /// Random coefficients, rescaled so the training targets have the
    /// configured root-mean-square value. Inputs are uniform on [−1, 1].
    pub fn generate(cfg: &PolyRegressionConfig, seed: u64) -> Result<Self> {
        if cfg.samples == 0 || !(cfg.target_rms > 0.0) {
            return invalid("task.samples and task.target_rms must be positive");
        }
        let mut rng = stream(seed, Stream::Data);
        let mut target = OracleParams::random(
            cfg.degree,
            cfg.input_dims.clone(),
            cfg.output_dim,
            1.0,
            &mut rng,
        )?;
        let inputs: Vec<Matrix> = cfg
            .input_dims
            .iter()
            .map(|&d| uniform_matrix(&mut rng, cfg.samples, d, -1.0, 1.0))
            .collect();
        let raw = Self::evaluate(&target, &inputs)?;
        let rms = (raw.data().iter().map(|v| v * v).sum::<f64>() / raw.data().len() as f64).sqrt();
        let s = cfg.target_rms / rms;
        for t in target.tensors.values_mut() {
            *t = t.scale(s);
        }
        for b in &mut target.beta {
            *b *= s;
        }
        let targets = Self::evaluate(&target, &inputs)?;
        Ok(PolyRegression {
            target,
            data: RegressionData { inputs, targets },
        })
    }

    fn evaluate(target: &OracleParams, inputs: &[Matrix]) -> Result<Matrix> {
        let (rows, o) = (inputs[0].rows(), target.output_dim);
        let mut out = Matrix::zeros(rows, o);
        for r in 0..rows {
            let args: Vec<&[f64]> = inputs.iter().map(|m| m.row(r)).collect();
            out.data_mut()[r * o..(r + 1) * o].copy_from_slice(&eval_explicit(target, &args)?);
        }
        Ok(out)
    }
}

/// Smooth random 1D signals paired with their block-averaged downsampling;
/// the model maps the low-resolution signal to the full one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Downsample1D {
    pub length: usize,
    pub factor: usize,
    pub samples: usize,
    pub harmonics: usize,
}

impl Default for Downsample1D {
    fn default() -> Self {
        Downsample1D {
            length: 16,
            factor: 4,
            samples: 256,
            harmonics: 2,
        }
    }
}

impl Downsample1D {
    pub fn downsample(&self, signal: &[f64]) -> Vec<f64> {
        signal
            .chunks(self.factor)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<RegressionData> {
        if self.factor == 0
            || self.length == 0
            || self.length % self.factor != 0
            || self.samples == 0
        {
            return invalid("downsampling needs positive sizes with length divisible by factor");
        }
        let mut rng = stream(seed, Stream::Data);
        let low = self.length / self.factor;
        let mut inputs = Matrix::zeros(self.samples, low);
        let mut targets = Matrix::zeros(self.samples, self.length);
        for r in 0..self.samples {
            let coeffs: Vec<(f64, f64)> = (0..self.harmonics)
                .map(|_| {
                    (
                        uniform(&mut rng, -0.5, 0.5),
                        uniform(&mut rng, 0.0, std::f64::consts::TAU),
                    )
                })
                .collect();
            let signal: Vec<f64> = (0..self.length)
                .map(|i| {
                    let x = i as f64 / self.length as f64;
                    coeffs
                        .iter()
                        .enumerate()
                        .map(|(h, (a, ph))| {
                            a * (std::f64::consts::TAU * (h + 1) as f64 * x + ph).sin()
                        })
                        .sum()
                })
                .collect();
            inputs.data_mut()[r * low..(r + 1) * low].copy_from_slice(&self.downsample(&signal));
            targets.data_mut()[r * self.length..(r + 1) * self.length].copy_from_slice(&signal);
        }
        Ok(RegressionData {
            inputs: vec![inputs],
            targets,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSettings {
    pub steps: usize,
    pub optim: OptimConfig,
}

impl Default for RegressionSettings {
    fn default() -> Self {
        RegressionSettings {
            steps: 20_000,
            optim: OptimConfig::default(),
        }
    }
}

fn loss_and_grads(
    model: &ModelSpec,
    inputs: &[Matrix],
    objective: impl FnOnce(&mut Graph, NodeId) -> std::result::Result<NodeId, GraphError>,
) -> Result<(f64, GradientMap)> {
    let mut g = Graph::new();
    let ins: Vec<NodeId> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = model.build_graph(&mut g, &ins)?;
    let loss = objective(&mut g, out)?;
    let value = g.value(loss)[(0, 0)];
    Ok((value, g.backward_scalar(loss)?))
}

/// Full-batch training on a fixed dataset. The trace records the loss at
/// each step before the update, and the MSE after the final update.
pub fn train_regression(
    data: &RegressionData,
    model: &mut ModelSpec,
    settings: &RegressionSettings,
) -> Result<Trace> {
    settings.optim.validate()?;
    let mut state = OptState::new(
        settings.optim,
        &model.params().iter().map(|(_, m)| *m).collect::<Vec<_>>(),
    );
    let mut trace = Trace::new(&["loss", "lr"]);
    for step in 0..settings.steps {
        let (loss, grads) =
            loss_and_grads(model, &data.inputs, |g, out| g.mse(out, &data.targets))?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, trace });
        }
        state.lr = settings.optim.lr_at(step, settings.steps);
        trace.push(step, vec![loss, state.lr]);
        optimizer_step(&mut state, &grads, &mut model.params_mut())?;
    }
    let final_loss = mse_loss(&model.forward_batch(&data.inputs)?, &data.targets)?;
    if !final_loss.is_finite() {
        return Err(TrainError::Diverged {
            step: settings.steps,
            trace,
        });
    }
    trace.push(settings.steps, vec![final_loss, state.lr]);
    Ok(trace)
}

/// `K` Gaussian clusters in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondPointCloud {
    pub centers: Vec<[f64; 2]>,
    pub std: f64,
}

impl CondPointCloud {
    /// Centers evenly spaced on a circle, starting at 45°; for `K = 4` these
    /// are `(±0.5, ±0.5)` up to rounding.
    pub fn ring(classes: usize, radius: f64, std: f64) -> Result<Self> {
        let centers = (0..classes)
            .map(|i| {
                let a =
                    std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * i as f64 / classes as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let task = CondPointCloud { centers, std };
        task.validate()?;
        Ok(task)
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    /// Pairwise center distance must be at least four standard deviations.
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return invalid("task needs at least one class");
        }
        if !(self.std > 0.0) {
            return invalid("task.std must be positive");
        }
        for (i, a) in self.centers.iter().enumerate() {
            for b in &self.centers[i + 1..] {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                if d < 4.0 * self.std {
                    return invalid(format!("clusters {a:?} and {b:?} are closer than 4 std"));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, class: usize, n: usize, rng: &mut impl Rng) -> Matrix {
        let c = self.centers[class];
        Matrix::from_fn(n, 2, |_, j| c[j] + self.std * gaussian(rng))
    }

    /// Index of the nearest center.
    pub fn classify(&self, p: &[f64]) -> usize {
        let d = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        (0..self.centers.len())
            .min_by(|&a, &b| d(&self.centers[a]).total_cmp(&d(&self.centers[b])))
            .expect("non-empty centers")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Uniform,
    Gaussian,
}

pub fn sample_noise(kind: NoiseKind, rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    match kind {
        NoiseKind::Uniform => uniform_matrix(rng, rows, cols, -1.0, 1.0),
        NoiseKind::Gaussian => Matrix::from_fn(rows, cols, |_, _| gaussian(rng)),
    }
}

/// Rows `class` repeated `per_class` times for each class in order.
pub fn one_hot_blocks(classes: usize, per_class: usize) -> Matrix {
    Matrix::from_fn(classes * per_class, classes, |r, c| {
        f64::from(u8::from(r / per_class == c))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondLoss {
    #[default]
    Mmd,
    Gan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionalSettings {
    pub steps: usize,
    pub per_class_batch: usize,
    pub noise: NoiseKind,
    pub loss: CondLoss,
    pub optim: OptimConfig,
    /// Discriminator optimizer for the adversarial loss.
    pub disc_optim: OptimConfig,
    pub disc_hidden: usize,
    pub eval_per_class: usize,
    pub sweep_noise: usize,
    pub sweep_points: usize,
    pub diversity_tau: f64,
}

impl Default for ConditionalSettings {
    fn default() -> Self {
        ConditionalSettings {
            steps: 1500,
            per_class_batch: 32,
            noise: NoiseKind::Uniform,
            loss: CondLoss::Mmd,
            optim: OptimConfig::default(),
            disc_optim: OptimConfig {
                lr: 1e-3,
                beta1: 0.5,
                ..OptimConfig::default()
            },
            disc_hidden: 32,
            eval_per_class: 1000,
            sweep_noise: 4,
            sweep_points: 11,
            diversity_tau: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub noise: usize,
    pub from: usize,
    pub to: usize,
    pub alpha: f64,
    pub point: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalReport {
    pub trace: Trace,
    /// `(conditioning class, x, y)` per generated sample.
    pub samples: Vec<(usize, f64, f64)>,
    pub accuracy: f64,
    pub class_means: Vec<[f64; 2]>,
    pub sweep: Vec<SweepRow>,
    pub sweep_endpoints_ok: bool,
}

impl ConditionalReport {
    pub fn write_samples_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class", "x", "y"])?;
        for (c, x, y) in &self.samples {
            out.write_record([c.to_string(), x.to_string(), y.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_sweep_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["noise", "from", "to", "alpha", "x", "y"])?;
        for r in &self.sweep {
            out.write_record([
                r.noise.to_string(),
                r.from.to_string(),
                r.to.to_string(),
                r.alpha.to_string(),
                r.point[0].to_string(),
                r.point[1].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Two-hidden-layer leaky-ReLU discriminator over `[sample; one-hot]`.
#[derive(Debug, Clone, PartialEq)]
struct Discriminator {
    layers: Vec<(Matrix, Matrix)>,
}

impl Discriminator {
    const SLOPE: f64 = 0.2;

    fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let dims = [input, hidden, hidden, 1];
        let layers = dims
            .windows(2)
            .map(|w| {
                let s = 1.0 / (w[0] as f64).sqrt();
                (
                    uniform_matrix(rng, w[0], w[1], -s, s),
                    Matrix::zeros(1, w[1]),
                )
            })
            .collect();
        Discriminator { layers }
    }

    fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Logits as a column; parameter ids start at `first`.
    fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        first: usize,
    ) -> std::result::Result<NodeId, GraphError> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wn = g.param(ParamId(first + 2 * i), w);
            let bn = g.param(ParamId(first + 2 * i + 1), b);
            let z = g.matmul(h, wn)?;
            h = g.add_row(z, bn)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, Self::SLOPE);
            }
        }
        Ok(h)
    }
}

/// `mean(softplus(sign · x))` on the graph.
fn softplus_mean(g: &mut Graph, x: NodeId, sign: f64) -> NodeId {
    let s = g.scale(x, sign);
    let sp = g.softplus(s);
    g.mean_all(sp)
}

/// Trains a generator `G(noise, one-hot class)` and evaluates class
/// fidelity with nearest-center classification.
pub fn train_conditional_generator(
    task: &CondPointCloud,
    model: &mut ModelSpec,
    settings: &ConditionalSettings,
    seed: u64,
) -> Result<ConditionalReport> {
    task.validate()?;
    settings.optim.validate()?;
    let k = task.classes();
    if model.variable_dims.len() != 2 || model.variable_dims[1] != k || model.output_dim() != 2 {
        return invalid(format!(
            "generator must take (noise, {k}-dim one-hot) and emit 2D points; got inputs {:?}, output {}",
            model.variable_dims,
            model.output_dim()
        ));
    }
    if settings.per_class_batch < 2 || settings.sweep_points < 2 {
        return invalid("per_class_batch and sweep_points must be at least 2");
    }
    let noise_dim = model.variable_dims[0];
    let b = settings.per_class_batch;
    let mut data_rng = stream(seed, Stream::Data);
    let mut noise_rng = stream(seed, Stream::Noise);
    let mut init_rng = stream(seed, Stream::Init);
    let cond = one_hot_blocks(k, b);

    let mut state = OptState::new(
        settings.optim,
        &model.params().iter().map(|(_, m)| *m).collect::<Vec<_>>(),
    );
    let mut disc = Discriminator::init(2 + k, settings.disc_hidden, &mut init_rng);
    let mut disc_state = OptState::new(settings.disc_optim, &disc.params());

    // fixed pair for the diversity metric
    let z_pair = sample_noise(
        settings.noise,
        2,
        noise_dim,
        &mut stream(seed, Stream::Eval),
    );
    let pair_cond = Matrix::from_fn(2, k, |_, c| f64::from(u8::from(c == 0)));

    let mut trace = Trace::new(&["loss", "diversity"]);
    for step in 0..settings.steps {
        let real: Vec<Matrix> = (0..k).map(|c| task.sample(c, b, &mut data_rng)).collect();
        let noise = sample_noise(settings.noise, k * b, noise_dim, &mut noise_rng);
        state.lr = settings.optim.lr_at(step, settings.steps);
        let loss = match settings.loss {
            CondLoss::Mmd => {
                let all_real = stack_rows(&real);
                let bw = default_bandwidths(&all_real);
                let (loss, grads) = loss_and_grads(model, &[noise, cond.clone()], |g, out| {
                    let mut total: Option<NodeId> = None;
                    for (c, r) in real.iter().enumerate() {
                        let part = g.slice_rows(out, c * b, b)?;
                        let m = g.mmd(part, r, &bw)?;
                        total = Some(match total {
                            Some(t) => g.add(t, m)?,
                            None => m,
                        });
                    }
                    Ok(total.expect("at least one class"))
                })?;
                if loss.is_finite() {
                    optimizer_step(&mut state, &grads, &mut model.params_mut())?;
                }
                loss
            }
            CondLoss::Gan => {
                let fake = model.forward_batch(&[noise.clone(), cond.clone()])?;
                let real_x = concat_cols(&stack_rows(&real), &cond);
                let fake_x = concat_cols(&fake, &cond);
                let mut g = Graph::new();
                let rn = g.input(real_x);
                let fnode = g.input(fake_x);
                let rl = disc.build(&mut g, rn, 0)?;
                let fl = disc.build(&mut g, fnode, 0)?;
                let a = softplus_mean(&mut g, rl, -1.0);
                let bterm = softplus_mean(&mut g, fl, 1.0);
                let d_loss = g.add(a, bterm)?;
                let d_grads = g.backward_scalar(d_loss)?;
                disc_state.lr = settings.disc_optim.lr_at(step, settings.steps);
                optimizer_step(&mut disc_state, &d_grads, &mut disc.params_mut())?;

                let n_gen = model.params().len();
                let mut g = Graph::new();
                let zn = g.input(noise);
                let cn = g.input(cond.clone());
                let out = model.build_graph(&mut g, &[zn, cn])?;
                let x = g.concat_cols(out, cn)?;
                let logits = disc.build(&mut g, x, n_gen)?;
                let g_loss = softplus_mean(&mut g, logits, -1.0);
                let loss = g.value(g_loss)[(0, 0)];
                let grads = g.backward_scalar(g_loss)?;
                optimizer_step(&mut state, &grads, &mut model.params_mut())?;
                loss
            }
        };
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, trace });
        }
        let pair = model.forward_batch(&[z_pair.clone(), pair_cond.clone()])?;
        let div = diversity_regularizer(
            pair.row(0),
            pair.row(1),
            z_pair.row(0),
            z_pair.row(1),
            settings.diversity_tau,
        )?;
        trace.push(step, vec![loss, div]);
    }

    let mut eval_rng = stream(seed, Stream::Eval);
    let n = settings.eval_per_class;
    let noise = sample_noise(settings.noise, k * n, noise_dim, &mut eval_rng);
    let out = model.forward_batch(&[noise, one_hot_blocks(k, n)])?;
    let mut samples = Vec::with_capacity(k * n);
    let mut correct = 0usize;
    let mut class_means = vec![[0.0; 2]; k];
    for r in 0..k * n {
        let c = r / n.max(1);
        let p = out.row(r);
        correct += usize::from(task.classify(p) == c);
        class_means[c][0] += p[0] / n as f64;
        class_means[c][1] += p[1] / n as f64;
        samples.push((c, p[0], p[1]));
    }
    let accuracy = if k * n == 0 {
        0.0
    } else {
        correct as f64 / (k * n) as f64
    };

    let sweep_z = sample_noise(
        settings.noise,
        settings.sweep_noise,
        noise_dim,
        &mut eval_rng,
    );
    let mut sweep = Vec::new();
    let mut endpoints_ok = true;
    for from in 0..k {
        let to = (from + 1) % k;
        for a in 0..settings.sweep_points {
            let alpha = a as f64 / (settings.sweep_points - 1) as f64;
            let mut c = Matrix::zeros(settings.sweep_noise, k);
            for r in 0..settings.sweep_noise {
                c[(r, from)] += 1.0 - alpha;
                c[(r, to)] += alpha;
            }
            let pts = model.forward_batch(&[sweep_z.clone(), c])?;
            for s in 0..settings.sweep_noise {
                let p = pts.row(s);
                if a == 0 {
                    endpoints_ok &= task.classify(p) == from;
                }
                if a + 1 == settings.sweep_points {
                    endpoints_ok &= task.classify(p) == to;
                }
                sweep.push(SweepRow {
                    noise: s,
                    from,
                    to,
                    alpha,
                    point: [p[0], p[1]],
                });
            }
        }
    }

    Ok(ConditionalReport {
        trace,
        samples,
        accuracy,
        class_means,
        sweep,
        sweep_endpoints_ok: endpoints_ok,
    })
}

fn stack_rows(parts: &[Matrix]) -> Matrix {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    Matrix::from_vec(data.len() / cols, cols, data).expect("equal widths")
}

fn concat_cols(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols() + b.cols(), |i, j| {
        if j < a.cols() {
            a[(i, j)]
        } else {
            b[(i, j - a.cols())]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let t = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(mse_loss(&t.map(|v| v + 1.0), &t).unwrap(), 1.0);
        assert_eq!(
            mse_loss(&Matrix::row_vector(&[0.0]), &Matrix::row_vector(&[2.0])).unwrap(),
            4.0
        );
        assert!(mse_loss(&t, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn mmd_examples() {
        let x = Matrix::from_rows(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        assert!(mmd_loss(&x, &x, &[1.0]).unwrap().abs() < 1e-12);
        let (r, s) = (1.3f64, 0.7f64);
        let v = mmd_loss(&Matrix::row_vector(&[0.0]), &Matrix::row_vector(&[r]), &[s]).unwrap();
        assert!((v - 2.0 * (1.0 - (-r * r / (2.0 * s * s)).exp())).abs() < 1e-14);
        assert!(mmd_loss(&Matrix::zeros(0, 2), &x, &[1.0]).is_err());
        assert!(mmd_loss(&x, &x, &[0.0]).is_err());
    }

    #[test]
    fn gan_loss_examples() {
        let (d, g) = nonsat_gan_losses(&[0.0; 3], &[0.0; 3]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d - 2.0 * ln2).abs() < 1e-15 && (g - ln2).abs() < 1e-15);
        let (d, _) = nonsat_gan_losses(&[800.0], &[-800.0]).unwrap();
        assert!(d < 1e-300);
        let gs: Vec<f64> = [-2.0, -1.0, 0.0, 1.0, 2.0]
            .iter()
            .map(|&f| nonsat_gan_losses(&[0.0], &[f]).unwrap().1)
            .collect();
        assert!(gs.windows(2).all(|w| w[1] < w[0]));
        assert!(nonsat_gan_losses(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(
            diversity_regularizer(&[1.0], &[1.0], &[0.0], &[1.0], 10.0).unwrap(),
            0.0
        );
        assert_eq!(
            diversity_regularizer(&[0.0], &[50.0], &[0.0], &[1.0], 10.0).unwrap(),
            10.0
        );
        assert_eq!(
            diversity_regularizer(&[0.0, 0.0], &[1.0, 3.0], &[0.0, 0.0], &[1.0, 1.0], 10.0)
                .unwrap(),
            2.0
        );
        assert!(diversity_regularizer(&[0.0], &[1.0], &[0.5], &[0.5], 10.0).is_err());
    }

    fn grads_of(vals: &[f64]) -> GradientMap {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| (ParamId(i), Matrix::filled(1, 1, v)))
            .collect()
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Matrix::filled(1, 1, 0.3);
        let mut st = OptState::new(OptimConfig::default(), &[&p]);
        adam_step(&mut st, &grads_of(&[0.0]), &mut [&mut p]).unwrap();
        assert_eq!(p[(0, 0)], 0.3);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut p = Matrix::zeros(1, 2);
        let mut st = OptState::new(OptimConfig::default(), &[&p]);
        let mut g = GradientMap::new();
        g.insert(ParamId(0), Matrix::row_vector(&[0.37, -5.0]));
        adam_step(&mut st, &g, &mut [&mut p]).unwrap();
        assert!((p[(0, 0)] + 1e-3).abs() < 1e-10);
        assert!((p[(0, 1)] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_second_identical_step_is_smaller() {
        // t=1: m̂=g, v̂=g² → step lr. t=2: m̂=g, v̂=g² again, so equal up to ε;
        // with a growing second moment the step shrinks below lr.
        let cfg = OptimConfig {
            lr: 0.1,
            ..OptimConfig::default()
        };
        let mut p = Matrix::zeros(1, 1);
        let mut st = OptState::new(cfg, &[&p]);
        adam_step(&mut st, &grads_of(&[1.0]), &mut [&mut p]).unwrap();
        let first = -p[(0, 0)];
        adam_step(&mut st, &grads_of(&[2.0]), &mut [&mut p]).unwrap();
        let second = -p[(0, 0)] - first;
        let m = 0.9 * 0.1 + 0.1 * 2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let expect = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((second - expect).abs() < 1e-12);
        assert!(second < 2.0 * first);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let cfg = OptimConfig {
            method: Method::Sgd,
            lr: 0.5,
            ..OptimConfig::default()
        };
        let mut p = Matrix::filled(1, 1, 1.0);
        let mut st = OptState::new(cfg, &[&p]);
        sgd_step(&mut st, &grads_of(&[2.0]), &mut [&mut p]).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimConfig {
            lr: 1.0,
            final_lr_fraction: 0.01,
            ..OptimConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 11), 1.0);
        assert!((cfg.lr_at(10, 11) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn ring_of_four_and_classification() {
        let t = CondPointCloud::ring(4, 0.5 * 2f64.sqrt(), 0.08).unwrap();
        assert!((t.centers[0][0] - 0.5).abs() < 1e-12 && (t.centers[2][1] + 0.5).abs() < 1e-12);
        assert_eq!(t.classify(&[0.45, 0.6]), 0);
        assert!(CondPointCloud::ring(4, 0.1, 0.08).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let d = Downsample1D {
            length: 4,
            factor: 2,
            samples: 3,
            harmonics: 1,
        };
        assert_eq!(d.downsample(&[1.0, 3.0, 5.0, 7.0]), vec![2.0, 6.0]);
        let data = d.generate(1).unwrap();
        assert_eq!(data.inputs[0].shape(), (3, 2));
        for r in 0..3 {
            assert_eq!(d.downsample(data.targets.row(r)), data.inputs[0].row(r));
        }
    }

    #[test]
    fn trace_csv_has_header() {
        let mut t = Trace::new(&["loss"]);
        t.push(0, vec![0.5]);
        assert_eq!(t.to_csv_string(), "step,loss\n0,0.5\n");
    }
}
