//! Experiment configuration.
//!
//! A config file is a flat JSON object; every key is optional and unknown
//! keys are rejected. Values are resolved in this order, later winning:
//!
//! 1. built-in defaults (some depend on the command, see [`Resolved`]),
//! 2. keys from `--config FILE`,
//! 3. command-line flags (`--seed`, `--out`, `--suite`, `--steps`).
//!
//! The output directory falls back to `$COPE_OUT/<command>-seed<seed>` and
//! then to `runs/<command>-seed<seed>` when neither `--out` nor
//! `output_dir` is given.

use std::fmt;
use std::path::PathBuf;

use clap::ValueEnum;
use cope::models::{Activation, ArchKind, Architecture, Centering};
use cope::oracle::MAX_PROBE_ORDER;
use cope::train::{
    CondLoss, CondPointCloud, ConditionalSettings, Downsample1D, Method, NoiseKind, OptimConfig,
    PolyRegressionConfig, RegressionSettings,
};
use cope::verify::{Suite, VerifyConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Verify,
    TrainRegression,
    TrainConditional,
    DegreeReport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::TrainRegression => "train-regression",
            Command::TrainConditional => "train-conditional",
            Command::DegreeReport => "degree-report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionTask {
    /// Random polynomial target of `degree` over `input_dims`.
    #[default]
    Poly,
    /// Recover a 1D signal from its block-averaged downsampling.
    Downsample,
}

/// Every tunable of every command. `None` means "use the command default".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub command: Option<Command>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,

    pub variant: ArchKind,
    /// Expansion order per block; the block count is its length.
    pub orders: Option<Vec<usize>>,
    pub rank: usize,
    pub hidden: usize,
    pub omega: Option<usize>,
    pub share_conditional: bool,
    pub reconsume_conditional: bool,
    pub centering: Centering,
    pub activation: Option<Activation>,

    pub task: RegressionTask,
    pub degree: usize,
    pub input_dims: Vec<usize>,
    pub output_dim: usize,
    pub samples: usize,
    pub target_rms: f64,
    pub signal_length: usize,
    pub downsample_factor: usize,
    pub harmonics: usize,

    pub clusters: usize,
    pub radius: f64,
    pub cluster_std: f64,
    pub noise_dim: usize,
    pub noise: NoiseKind,
    pub loss: CondLoss,
    pub per_class_batch: usize,
    pub eval_per_class: usize,
    pub sweep_noise: usize,
    pub sweep_points: usize,
    pub diversity_tau: f64,
    pub disc_hidden: usize,
    pub disc_lr: f64,

    pub steps: Option<usize>,
    pub optimizer: Method,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub final_lr_fraction: f64,

    /// Fail the regression run if the final MSE is above this.
    pub max_final_mse: Option<f64>,
    /// Fail the conditional run below this class accuracy.
    pub min_accuracy: Option<f64>,

    /// Suites to run; empty means all.
    pub suites: Vec<String>,
    pub claim1_draws: usize,
    pub claim1_pairs: usize,
    pub lemma1_sets: usize,
    pub degree_instances: usize,
    pub reduction_instances: usize,
    pub affine_rays: usize,
    pub gradient_instances: usize,
    pub gradient_step: f64,

    /// Random rays per probe in `degree-report`.
    pub rays: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let poly = PolyRegressionConfig::default();
        let down = Downsample1D::default();
        let cond = ConditionalSettings::default();
        let optim = OptimConfig::default();
        let verify = VerifyConfig::default();
        ExperimentConfig {
            command: None,
            seed: 0,
            output_dir: None,
            variant: ArchKind::Ccp,
            orders: None,
            rank: 16,
            hidden: 8,
            omega: None,
            share_conditional: false,
            reconsume_conditional: true,
            centering: Centering::None,
            activation: None,
            task: RegressionTask::Poly,
            degree: poly.degree,
            input_dims: poly.input_dims,
            output_dim: poly.output_dim,
            samples: poly.samples,
            target_rms: poly.target_rms,
            signal_length: down.length,
            downsample_factor: down.factor,
            harmonics: down.harmonics,
            clusters: 4,
            radius: 0.5 * std::f64::consts::SQRT_2,
            cluster_std: 0.08,
            noise_dim: 4,
            noise: cond.noise,
            loss: cond.loss,
            per_class_batch: cond.per_class_batch,
            eval_per_class: cond.eval_per_class,
            sweep_noise: cond.sweep_noise,
            sweep_points: cond.sweep_points,
            diversity_tau: cond.diversity_tau,
            disc_hidden: cond.disc_hidden,
            disc_lr: cond.disc_optim.lr,
            steps: None,
            optimizer: optim.method,
            lr: optim.lr,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
            final_lr_fraction: optim.final_lr_fraction,
            max_final_mse: None,
            min_accuracy: None,
            suites: Vec::new(),
            claim1_draws: verify.claim1_draws,
            claim1_pairs: verify.claim1_pairs,
            lemma1_sets: verify.lemma1_sets,
            degree_instances: verify.degree_instances,
            reduction_instances: verify.reduction_instances,
            affine_rays: verify.affine_rays,
            gradient_instances: verify.gradient_instances,
            gradient_step: verify.gradient_step,
            rays: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "invalid config: field `{}`: {}",
            self.field, self.message
        )
    }
}

impl std::error::Error for ConfigError {}

fn bad<T>(field: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        field: field.into(),
        message: message.into(),
    })
}

fn at_least(field: &str, value: usize, min: usize) -> Result<(), ConfigError> {
    if value < min {
        return bad(field, format!("must be at least {min}, got {value}"));
    }
    Ok(())
}

fn positive(field: &str, value: f64) -> Result<(), ConfigError> {
    if !(value > 0.0) || !value.is_finite() {
        return bad(field, format!("must be a positive number, got {value}"));
    }
    Ok(())
}

/// Parses a config file, reporting the line and column of syntax errors
/// and the name of unknown keys.
pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError {
        field: unknown_field(&e.to_string()).unwrap_or_else(|| "<file>".into()),
        message: e.to_string(),
    })
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Command-line values that override file keys.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub suites: Vec<String>,
    pub steps: Option<usize>,
    /// Value of `COPE_OUT`, if set.
    pub out_root: Option<PathBuf>,
}

/// A validated config with every default materialized.
/// `config` has `command` and `output_dir` filled in, so writing it out
/// gives a file that reproduces the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub command: Command,
    pub output_dir: PathBuf,
    pub config: ExperimentConfig,
}

impl Resolved {
    pub fn architecture(&self, variable_dims: Vec<usize>, output_dim: usize) -> Architecture {
        let c = &self.config;
        Architecture {
            kind: c.variant,
            orders: c.orders.clone().expect("resolved"),
            rank: c.rank,
            hidden: c.hidden,
            variable_dims,
            output_dim,
            omega: c.omega,
            share_conditional: c.share_conditional,
            reconsume_conditional: c.reconsume_conditional,
            centering: c.centering,
            activation: c.activation.expect("resolved"),
        }
    }

    pub fn optim(&self) -> OptimConfig {
        let c = &self.config;
        OptimConfig {
            method: c.optimizer,
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            final_lr_fraction: c.final_lr_fraction,
        }
    }

    pub fn steps(&self) -> usize {
        self.config.steps.expect("resolved")
    }

    pub fn poly(&self) -> PolyRegressionConfig {
        let c = &self.config;
        PolyRegressionConfig {
            degree: c.degree,
            input_dims: c.input_dims.clone(),
            output_dim: c.output_dim,
            samples: c.samples,
            target_rms: c.target_rms,
        }
    }

    pub fn downsample(&self) -> Downsample1D {
        let c = &self.config;
        Downsample1D {
            length: c.signal_length,
            factor: c.downsample_factor,
            samples: c.samples,
            harmonics: c.harmonics,
        }
    }

    pub fn regression_settings(&self) -> RegressionSettings {
        RegressionSettings {
            steps: self.steps(),
            optim: self.optim(),
        }
    }

    pub fn conditional_settings(&self) -> ConditionalSettings {
        let c = &self.config;
        let base = ConditionalSettings::default();
        ConditionalSettings {
            steps: self.steps(),
            per_class_batch: c.per_class_batch,
            noise: c.noise,
            loss: c.loss,
            optim: self.optim(),
            disc_optim: OptimConfig {
                lr: c.disc_lr,
                ..base.disc_optim
            },
            disc_hidden: c.disc_hidden,
            eval_per_class: c.eval_per_class,
            sweep_noise: c.sweep_noise,
            sweep_points: c.sweep_points,
            diversity_tau: c.diversity_tau,
        }
    }

    pub fn verify_config(&self) -> VerifyConfig {
        let c = &self.config;
        VerifyConfig {
            claim1_draws: c.claim1_draws,
            claim1_pairs: c.claim1_pairs,
            lemma1_sets: c.lemma1_sets,
            degree_instances: c.degree_instances,
            reduction_instances: c.reduction_instances,
            affine_rays: c.affine_rays,
            gradient_instances: c.gradient_instances,
            gradient_step: c.gradient_step,
        }
    }

    pub fn suites(&self) -> Vec<Suite> {
        self.config
            .suites
            .iter()
            .map(|s| Suite::from_name(s).expect("validated"))
            .collect()
    }

    /// Polynomial degree of the configured generator in all inputs jointly.
    pub fn expected_degree(&self) -> usize {
        match self.config.variant {
            ArchKind::Additive | ArchKind::GanConc => 1,
            _ => self
                .config
                .orders
                .as_ref()
                .expect("resolved")
                .iter()
                .product(),
        }
    }
}

pub fn resolve(mut c: ExperimentConfig, o: Overrides) -> Result<Resolved, ConfigError> {
    let command = match (o.command, c.command) {
        (Some(a), Some(b)) if a != b => {
            return bad(
                "command",
                format!("file says {} but {} was requested", b.name(), a.name()),
            )
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => {
            return bad(
                "command",
                "no command given on the command line or in the file",
            )
        }
    };
    c.command = Some(command);
    if let Some(seed) = o.seed {
        c.seed = seed;
    }
    if !o.suites.is_empty() {
        c.suites = o.suites;
    }
    if o.steps.is_some() {
        c.steps = o.steps;
    }
    let conditional = command == Command::TrainConditional;
    c.orders
        .get_or_insert_with(|| if conditional { vec![2, 2] } else { vec![3] });
    c.activation.get_or_insert(if conditional {
        Activation::Tanh
    } else {
        Activation::None
    });
    c.steps.get_or_insert(match command {
        Command::TrainConditional => ConditionalSettings::default().steps,
        _ => RegressionSettings::default().steps,
    });
    if c.suites.is_empty() {
        c.suites = Suite::ALL.iter().map(|s| s.name().to_string()).collect();
    }
    let run_name = format!("{}-seed{}", command.name(), c.seed);
    let output_dir = o.out.or_else(|| c.output_dir.clone()).unwrap_or_else(|| {
        o.out_root
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(run_name)
    });
    c.output_dir = Some(output_dir.clone());
    let r = Resolved {
        command,
        output_dir,
        config: c,
    };
    validate(&r)?;
    Ok(r)
}

fn validate(r: &Resolved) -> Result<(), ConfigError> {
    let c = &r.config;
    let orders = c.orders.as_ref().expect("resolved");
    if orders.is_empty() {
        return bad("orders", "needs at least one block");
    }
    for &n in orders {
        at_least("orders", n, 1)?;
    }
    at_least("rank", c.rank, 1)?;
    at_least("hidden", c.hidden, 1)?;
    if let Some(w) = c.omega {
        at_least("omega", w, 1)?;
    }
    at_least("steps", r.steps(), 1)?;
    positive("lr", c.lr)?;
    if !(0.0..1.0).contains(&c.beta1) {
        return bad("beta1", "must lie in [0, 1)");
    }
    if !(0.0..1.0).contains(&c.beta2) {
        return bad("beta2", "must lie in [0, 1)");
    }
    positive("eps", c.eps)?;
    if !(0.0..=1.0).contains(&c.final_lr_fraction) {
        return bad("final_lr_fraction", "must lie in [0, 1]");
    }
    for name in &c.suites {
        if Suite::from_name(name).is_none() {
            let known: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
            return bad(
                "suites",
                format!("unknown suite {name:?}; known: {}", known.join(", ")),
            );
        }
    }

    match r.command {
        Command::Verify => {
            at_least("claim1_draws", c.claim1_draws, 1)?;
            at_least("claim1_pairs", c.claim1_pairs, 1)?;
            at_least("lemma1_sets", c.lemma1_sets, 1)?;
            at_least("degree_instances", c.degree_instances, 1)?;
            at_least("reduction_instances", c.reduction_instances, 1)?;
            at_least("affine_rays", c.affine_rays, 1)?;
            at_least("gradient_instances", c.gradient_instances, 1)?;
            positive("gradient_step", c.gradient_step)?;
        }
        Command::TrainRegression => {
            at_least("samples", c.samples, 1)?;
            match c.task {
                RegressionTask::Poly => {
                    check_dims(&c.input_dims)?;
                    at_least("output_dim", c.output_dim, 1)?;
                    at_least("degree", c.degree, 1)?;
                    positive("target_rms", c.target_rms)?;
                }
                RegressionTask::Downsample => {
                    at_least("downsample_factor", c.downsample_factor, 1)?;
                    at_least("signal_length", c.signal_length, 1)?;
                    if c.signal_length % c.downsample_factor != 0 {
                        return bad("signal_length", "must be divisible by downsample_factor");
                    }
                    at_least("harmonics", c.harmonics, 1)?;
                }
            }
            if let Some(m) = c.max_final_mse {
                positive("max_final_mse", m)?;
            }
        }
        Command::TrainConditional => {
            at_least("clusters", c.clusters, 1)?;
            positive("radius", c.radius)?;
            positive("cluster_std", c.cluster_std)?;
            at_least("noise_dim", c.noise_dim, 1)?;
            at_least("per_class_batch", c.per_class_batch, 2)?;
            at_least("eval_per_class", c.eval_per_class, 1)?;
            at_least("sweep_noise", c.sweep_noise, 1)?;
            at_least("sweep_points", c.sweep_points, 2)?;
            positive("diversity_tau", c.diversity_tau)?;
            at_least("disc_hidden", c.disc_hidden, 1)?;
            positive("disc_lr", c.disc_lr)?;
            if let Some(a) = c.min_accuracy {
                if !(0.0..=1.0).contains(&a) {
                    return bad("min_accuracy", "must lie in [0, 1]");
                }
            }
        }
        Command::DegreeReport => {
            check_dims(&c.input_dims)?;
            at_least("output_dim", c.output_dim, 1)?;
            at_least("rays", c.rays, 1)?;
            let limit = MAX_PROBE_ORDER - 2;
            if r.expected_degree() > limit {
                return bad(
                    "orders",
                    format!("total degree must be at most {limit} to probe"),
                );
            }
        }
    }

    let shape = match r.command {
        Command::Verify => None,
        Command::TrainRegression => Some(match c.task {
            RegressionTask::Poly => (c.input_dims.clone(), c.output_dim),
            RegressionTask::Downsample => {
                (vec![c.signal_length / c.downsample_factor], c.signal_length)
            }
        }),
        Command::TrainConditional => {
            if let Err(e) = CondPointCloud::ring(c.clusters, c.radius, c.cluster_std) {
                return bad("cluster_std", e.to_string());
            }
            Some((vec![c.noise_dim, c.clusters], 2))
        }
        Command::DegreeReport => Some((c.input_dims.clone(), c.output_dim)),
    };
    if let Some((dims, out)) = shape {
        if let Err(e) = r.architecture(dims, out).num_params() {
            return bad("variant", e.to_string());
        }
    }
    Ok(())
}

fn check_dims(dims: &[usize]) -> Result<(), ConfigError> {
    if dims.is_empty() {
        return bad("input_dims", "needs at least one variable");
    }
    for &d in dims {
        at_least("input_dims", d, 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn over(command: Command) -> Overrides {
        Overrides {
            command: Some(command),
            ..Default::default()
        }
    }

    #[test]
    fn flags_override_file_keys() {
        let c = parse(r#"{"seed": 3, "steps": 10, "suites": ["lemma1"]}"#).unwrap();
        let r = resolve(
            c,
            Overrides {
                seed: Some(9),
                steps: Some(20),
                ..over(Command::Verify)
            },
        )
        .unwrap();
        assert_eq!(r.config.seed, 9);
        assert_eq!(r.steps(), 20);
        assert_eq!(r.config.suites, vec!["lemma1"]);
        assert_eq!(r.output_dir, PathBuf::from("runs/verify-seed9"));
    }

    #[test]
    fn command_defaults_are_materialized() {
        let r = resolve(ExperimentConfig::default(), over(Command::TrainConditional)).unwrap();
        assert_eq!(r.config.orders, Some(vec![2, 2]));
        assert_eq!(r.config.activation, Some(Activation::Tanh));
        assert_eq!(r.steps(), 1500);
        let r = resolve(ExperimentConfig::default(), over(Command::TrainRegression)).unwrap();
        assert_eq!(r.config.orders, Some(vec![3]));
        assert_eq!(r.steps(), 20_000);
        assert_eq!(r.config.suites.len(), Suite::ALL.len());
    }

    #[test]
    fn errors_name_the_field() {
        let c = parse(r#"{"rank": 0}"#).unwrap();
        let e = resolve(c, over(Command::TrainRegression)).unwrap_err();
        assert_eq!(e.field, "rank");
        let e = parse(r#"{"rnak": 4}"#).unwrap_err();
        assert_eq!(e.field, "rnak");
        let e = parse("{\n  \"rank\": 4,\n  \"seed\": -1\n}").unwrap_err();
        assert!(e.message.contains("line 3"), "{}", e.message);
        let c = parse(r#"{"command": "verify"}"#).unwrap();
        assert_eq!(
            resolve(c, over(Command::DegreeReport)).unwrap_err().field,
            "command"
        );
        let c = parse(r#"{"suites": ["nope"]}"#).unwrap();
        assert_eq!(
            resolve(c, over(Command::Verify)).unwrap_err().field,
            "suites"
        );
        let c = parse(r#"{"cluster_std": 1.0}"#).unwrap();
        assert_eq!(
            resolve(c, over(Command::TrainConditional))
                .unwrap_err()
                .field,
            "cluster_std"
        );
        let c = parse(r#"{"variant": "spade", "input_dims": [3]}"#).unwrap();
        assert_eq!(
            resolve(c, over(Command::DegreeReport)).unwrap_err().field,
            "variant"
        );
    }

    #[test]
    fn out_root_is_a_fallback() {
        let o = Overrides {
            out_root: Some("/tmp/root".into()),
            ..over(Command::DegreeReport)
        };
        let r = resolve(ExperimentConfig::default(), o.clone()).unwrap();
        assert_eq!(r.output_dir, PathBuf::from("/tmp/root/degree-report-seed0"));
        let c = parse(r#"{"output_dir": "here"}"#).unwrap();
        assert_eq!(resolve(c, o).unwrap().output_dir, PathBuf::from("here"));
    }
}
