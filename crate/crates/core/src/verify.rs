//! Randomized invariant suites.
//!
//! Each suite draws its instances from its own seeded stream and reports
//! the largest deviation it saw against a fixed tolerance. Suites are
//! independent and may run on separate threads; [`run_suites`] returns
//! reports in the order requested regardless of scheduling.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, Graph, ParamId};
use crate::models::{
    additive_forward, ccp_forward, concat_linear_forward, ncp_forward, pinet_forward,
    spade_configure, spade_forward, Activation, ArchKind, Architecture, Centering, CopeParams,
    CopeShape, Layer, ModelSpec, PiNetParams, SpadeParams, Variant, CONDITIONAL,
};
use crate::oracle::{
    build_order2_coupled_tensors, degree_probe, eval_explicit, split_inputs, Degree, OracleParams,
};
use crate::rng::{stream, uniform_matrix, uniform_vec, Stream};
use crate::tensor::{hadamard, khatri_rao_chain, Matrix};
use crate::train::mse_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    #[serde(rename = "claim1-equivalence")]
    Claim1,
    Lemma1,
    DegreeLaw,
    Reductions,
    Affineness,
    Gradients,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Claim1,
        Suite::Lemma1,
        Suite::DegreeLaw,
        Suite::Reductions,
        Suite::Affineness,
        Suite::Gradients,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Claim1 => "claim1-equivalence",
            Suite::Lemma1 => "lemma1",
            Suite::DegreeLaw => "degree-law",
            Suite::Reductions => "reductions",
            Suite::Affineness => "affineness",
            Suite::Gradients => "gradients",
        }
    }

    pub fn from_name(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }

    fn stream_index(self) -> u64 {
        Suite::ALL
            .iter()
            .position(|&s| s == self)
            .expect("listed suite") as u64
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub claim1_draws: usize,
    pub claim1_pairs: usize,
    pub lemma1_sets: usize,
    pub degree_instances: usize,
    pub reduction_instances: usize,
    pub affine_rays: usize,
    pub gradient_instances: usize,
    pub gradient_step: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            claim1_draws: 200,
            claim1_pairs: 10,
            lemma1_sets: 100,
            degree_instances: 20,
            reduction_instances: 50,
            affine_rays: 50,
            gradient_instances: 20,
            gradient_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub trials: usize,
    /// Largest error seen. For `degree-law` this is the number of probes
    /// whose degree differed from the expected one.
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Suite-specific figures, e.g. per-variant maxima.
    pub metrics: BTreeMap<String, f64>,
    pub seconds: f64,
}

pub const CLAIM1_TOL: f64 = 1e-9;
pub const LEMMA1_TOL: f64 = 1e-10;
pub const REDUCTION_TOL: f64 = 1e-12;
pub const AFFINE_TOL: f64 = 1e-9;
pub const CURVATURE_FLOOR: f64 = 1e-3;
pub const CURVED_FRACTION: f64 = 0.95;
pub const GRADIENT_TOL: f64 = 1e-5;

fn random_cope(
    rng: &mut impl Rng,
    variant: Variant,
    order: usize,
    rank: usize,
    input_dims: Vec<usize>,
    output_dim: usize,
) -> CopeParams {
    let omega = rng.random_range(1..=rank + 1);
    let mut p = CopeParams::zeros(&CopeShape {
        variant,
        order,
        rank,
        input_dims,
        output_dim,
        omega: Some(omega),
        share_conditional: false,
    })
    .expect("valid random shape");
    for m in p.matrices_mut() {
        *m = uniform_matrix(rng, m.rows(), m.cols(), -1.0, 1.0);
    }
    p
}

fn randomize(spec: &mut ModelSpec, rng: &mut impl Rng) {
    for m in spec.params_mut() {
        *m = uniform_matrix(rng, m.rows(), m.cols(), -1.0, 1.0);
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn dim(rng: &mut impl Rng, hi: usize) -> usize {
    rng.random_range(1..=hi)
}

/// Coupled second-order recursion against its explicit tensors.
pub fn claim1(rng: &mut impl Rng, draws: usize, pairs: usize) -> (f64, usize) {
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let dims = vec![dim(rng, 5), dim(rng, 5)];
        let (k, o) = (dim(rng, 5), dim(rng, 5));
        let f = random_cope(rng, Variant::Ccp, 2, k, dims.clone(), o);
        let w = build_order2_coupled_tensors(&f).expect("order-2 ccp");
        for _ in 0..pairs {
            let zi = uniform_vec(rng, dims[0], -1.0, 1.0);
            let zii = uniform_vec(rng, dims[1], -1.0, 1.0);
            let a = eval_explicit(&w, &[&zi, &zii]).expect("oracle eval");
            let b = ccp_forward(&f, &[&zi, &zii]).expect("ccp eval");
            worst = worst.max(max_abs(&a, &b));
        }
    }
    (worst, draws * pairs)
}

/// `(⨀ A_ν)ᵀ (⨀ B_ν)` against the Hadamard chain of `A_νᵀ B_ν`.
pub fn lemma1(rng: &mut impl Rng, sets: usize) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..sets {
        let n = 2 + s % 2;
        let (k, l) = (dim(rng, 6), dim(rng, 6));
        let rows: Vec<usize> = (0..n).map(|_| dim(rng, 6)).collect();
        let a: Vec<Matrix> = rows
            .iter()
            .map(|&i| uniform_matrix(rng, i, k, -1.0, 1.0))
            .collect();
        let b: Vec<Matrix> = rows
            .iter()
            .map(|&i| uniform_matrix(rng, i, l, -1.0, 1.0))
            .collect();
        let ka = khatri_rao_chain(&a.iter().collect::<Vec<_>>()).expect("equal ranks");
        let kb = khatri_rao_chain(&b.iter().collect::<Vec<_>>()).expect("equal ranks");
        let lhs = ka.transpose().matmul(&kb).expect("matching rows");
        let mut rhs = a[0].transpose().matmul(&b[0]).expect("matching rows");
        for (x, y) in a.iter().zip(&b).skip(1) {
            rhs = hadamard(&rhs, &x.transpose().matmul(y).expect("matching rows")).expect("k × l");
        }
        worst = worst.max(lhs.max_abs_diff(&rhs).expect("k × l"));
    }
    worst
}

/// Degree of a model along a ray through the concatenated inputs.
pub fn probe_model(spec: &ModelSpec, base: &[f64], direction: &[f64], max_order: usize) -> Degree {
    let dims = spec.variable_dims.clone();
    degree_probe(
        |x| {
            spec.forward(&split_inputs(x, &dims))
                .expect("validated model")
        },
        base,
        direction,
        max_order,
    )
    .expect("probe arguments")
}

/// Long rays keep the top-degree term well above the probe's relative
/// floor even when lower-order terms dominate near the base point.
const RAY_SCALE: f64 = 4.0;

/// Rescales `dir` so its largest component has magnitude [`RAY_SCALE`].
pub fn stretch(mut dir: Vec<f64>) -> Vec<f64> {
    let m = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        for v in &mut dir {
            *v *= RAY_SCALE / m;
        }
    }
    dir
}

/// Base point in `[-1, 1]^n` and a stretched direction.
pub fn random_ray(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    (
        uniform_vec(rng, n, -1.0, 1.0),
        stretch(uniform_vec(rng, n, -1.0, 1.0)),
    )
}

fn chain_arch(orders: Vec<usize>, reconsume: bool, dims: Vec<usize>, rank: usize) -> Architecture {
    Architecture {
        kind: ArchKind::Ccp,
        orders,
        rank,
        hidden: 3,
        variable_dims: dims,
        output_dim: 2,
        omega: None,
        share_conditional: false,
        reconsume_conditional: reconsume,
        centering: Centering::None,
        activation: Activation::None,
    }
}

/// Degree checks: single blocks of order 1..=4, chains (2,2) and (2,2,2),
/// and a per-variable check on a chain whose first block is linear in
/// `z_I`. Returns (mismatches, trials, metrics).
pub fn degree_law(rng: &mut impl Rng, instances: usize) -> (usize, usize, BTreeMap<String, f64>) {
    const MAX_ORDER: usize = 10;
    let mut misses = 0;
    let mut trials = 0;
    let mut metrics = BTreeMap::new();
    for variant in [Variant::Ccp, Variant::Ncp] {
        for n in 1..=4 {
            let mut bad = 0;
            for _ in 0..instances {
                let dims = vec![dim(rng, 3), dim(rng, 3)];
                let (k, o) = (dim(rng, 4), dim(rng, 3));
                let p = random_cope(rng, variant, n, k, dims.clone(), o);
                let layer = match variant {
                    Variant::Ccp => Layer::Ccp(p),
                    Variant::Ncp => Layer::Ncp(p),
                };
                let spec = ModelSpec::single(layer, dims.clone()).expect("valid block");
                let (b, d) = random_ray(rng, dims.iter().sum());
                bad += usize::from(probe_model(&spec, &b, &d, MAX_ORDER) != Degree::Exact(n));
            }
            metrics.insert(
                format!("{variant:?}-N{n}-misses").to_lowercase(),
                bad as f64,
            );
            misses += bad;
            trials += instances;
        }
    }
    for (orders, want) in [(vec![2, 2], 4), (vec![2, 2, 2], 8)] {
        let mut bad = 0;
        for i in 0..instances {
            let dims = vec![dim(rng, 3), dim(rng, 3)];
            let rank = rng.random_range(2..=4);
            let mut spec = chain_arch(orders.clone(), i % 2 == 1, dims.clone(), rank)
                .build(rng)
                .expect("valid chain");
            randomize(&mut spec, rng);
            let (b, d) = random_ray(rng, dims.iter().sum());
            bad += usize::from(probe_model(&spec, &b, &d, MAX_ORDER) != Degree::Exact(want));
        }
        metrics.insert(format!("chain-{}-misses", orders.len()), bad as f64);
        misses += bad;
        trials += instances;
    }
    // Block 1 with U[2,I] = 0 is linear in z_I and quadratic in z_II; the
    // second block squares it and re-reads z_II.
    let mut bad = 0;
    for _ in 0..instances {
        let dims = vec![dim(rng, 3), dim(rng, 3)];
        let (d_i, d_ii) = (dims[0], dims[1]);
        let rank = rng.random_range(2..=4);
        let mut spec = chain_arch(vec![2, 2], true, dims, rank)
            .build(rng)
            .expect("valid chain");
        randomize(&mut spec, rng);
        if let Layer::Ccp(p) = &mut spec.blocks[0].layer {
            p.factor_mut(2, 0).data_mut().fill(0.0);
        }
        let base = uniform_vec(rng, d_i + d_ii, -1.0, 1.0);
        let mut only_i = uniform_vec(rng, d_i + d_ii, -1.0, 1.0);
        only_i[d_i..].fill(0.0);
        let only_i = stretch(only_i);
        let mut only_ii = uniform_vec(rng, d_i + d_ii, -1.0, 1.0);
        only_ii[..d_i].fill(0.0);
        let only_ii = stretch(only_ii);
        let deg_i = probe_model(&spec, &base, &only_i, MAX_ORDER);
        let deg_ii = probe_model(&spec, &base, &only_ii, MAX_ORDER);
        bad += usize::from(deg_i != Degree::Exact(2) || deg_ii != Degree::Exact(4));
    }
    metrics.insert("per-variable-misses".into(), bad as f64);
    misses += bad;
    trials += instances;
    (misses, trials, metrics)
}

/// Exact special cases; returns the largest deviation per identity.
pub fn reductions(rng: &mut impl Rng, instances: usize) -> BTreeMap<String, f64> {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |name: &str, v: f64| {
        let e = worst.entry(name.to_string()).or_insert(0.0);
        *e = e.max(v);
    };
    for _ in 0..instances {
        let n = dim(rng, 4);
        let (k, o) = (dim(rng, 4), dim(rng, 3));
        let dims = vec![dim(rng, 4), dim(rng, 4), dim(rng, 4)];
        let zs: Vec<Vec<f64>> = dims
            .iter()
            .map(|&d| uniform_vec(rng, d, -1.0, 1.0))
            .collect();

        // conditional factors zeroed → single-variable polynomial of z_I
        let mut p = random_cope(rng, Variant::Ccp, n, k, dims[..2].to_vec(), o);
        for f in &mut p.factors[CONDITIONAL] {
            f.data_mut().fill(0.0);
        }
        let pi = PiNetParams {
            order: n,
            rank: k,
            input_dim: dims[0],
            output_dim: o,
            lambdas: p.factors[0].clone(),
            gamma: p.c.clone(),
            beta: p.beta.clone(),
        };
        let a = ccp_forward(&p, &[&zs[0], &zs[1]]).expect("ccp");
        let b = pinet_forward(&pi, &zs[0]).expect("pinet");
        note("ccp-to-pinet", max_abs(&a, &b));

        // third-variable factors zeroed → two-variable model
        let mut p3 = random_cope(rng, Variant::Ccp, n, k, dims.clone(), o);
        for f in &mut p3.factors[2] {
            f.data_mut().fill(0.0);
        }
        let mut p2 = p3.clone();
        p2.factors.truncate(2);
        p2.input_dims.truncate(2);
        let a = ccp_forward(&p3, &[&zs[0], &zs[1], &zs[2]]).expect("ccp");
        let b = ccp_forward(&p2, &[&zs[0], &zs[1]]).expect("ccp");
        note("three-to-two-variables", max_abs(&a, &b));

        // NCP zeroed into SPADE form against the dedicated recursion
        let mut q = random_cope(rng, Variant::Ncp, n, k, dims[..2].to_vec(), o);
        spade_configure(&mut q);
        let s = SpadeParams::from_ncp(&q).expect("spade form");
        let a = ncp_forward(&q, &[&zs[0], &zs[1]]).expect("ncp");
        let b = spade_forward(&s, &zs[0], &zs[1]).expect("spade");
        note("ncp-to-spade", max_abs(&a, &b));

        // sharing with already-equal conditional factors
        let mut r = random_cope(rng, Variant::Ccp, n, k, dims[..2].to_vec(), o);
        let first = r.factor(1, CONDITIONAL).clone();
        for m in 2..=n {
            *r.factor_mut(m, CONDITIONAL) = first.clone();
        }
        let shared = r.clone().into_shared();
        let a = ccp_forward(&r, &[&zs[0], &zs[1]]).expect("ccp");
        let b = ccp_forward(&shared, &[&zs[0], &zs[1]]).expect("ccp");
        note("sharing-no-op", max_abs(&a, &b));

        // explicit three-variable expansion without z_III terms
        let small: Vec<usize> = dims.iter().map(|&d| d.min(3)).collect();
        let mut w =
            OracleParams::random(n.min(3), small.clone(), o, 1.0, rng).expect("oracle limits");
        for (key, t) in w.tensors.iter_mut() {
            if key.touches(2) {
                *t = t.scale(0.0);
            }
        }
        let zsmall: Vec<&[f64]> = zs.iter().zip(&small).map(|(z, &d)| &z[..d]).collect();
        let a = eval_explicit(&w, &zsmall).expect("oracle");
        let b =
            eval_explicit(&w.restrict_to_two().expect("three vars"), &zsmall[..2]).expect("oracle");
        note("oracle-three-to-two", max_abs(&a, &b));
    }
    worst
}

fn second_difference(f: impl Fn(&[f64]) -> Vec<f64>, base: &[f64], dir: &[f64]) -> f64 {
    let at = |t: f64| {
        f(&base
            .iter()
            .zip(dir)
            .map(|(b, d)| b + t * d)
            .collect::<Vec<_>>())
    };
    let (y0, y1, y2) = (at(0.0), at(1.0), at(2.0));
    (0..y0.len()).fold(0.0, |m, i| m.max((y2[i] - 2.0 * y1[i] + y0[i]).abs()))
}

/// Second differences of the additive and concatenation baselines, and the
/// fraction of rays on which a generic CCP block is visibly curved.
pub fn affineness(rng: &mut impl Rng, rays: usize) -> (f64, f64) {
    let mut worst = 0.0f64;
    let mut curved = 0usize;
    for _ in 0..rays {
        let dims = vec![dim(rng, 4), dim(rng, 4)];
        let total: usize = dims.iter().sum();
        let (n, k, o) = (rng.random_range(2..=4), dim(rng, 4), dim(rng, 3));
        let add = random_cope(rng, Variant::Ncp, n, k, dims.clone(), o);
        let p = uniform_matrix(rng, total, o, -1.0, 1.0);
        let ccp = random_cope(rng, Variant::Ccp, n, k, dims.clone(), o);
        let (base, dir) = random_ray(rng, total);
        let args = |x: &[f64]| {
            split_inputs(x, &dims)
                .into_iter()
                .map(<[f64]>::to_vec)
                .collect::<Vec<_>>()
        };
        worst = worst.max(second_difference(
            |x| {
                let a = args(x);
                additive_forward(&add, &[&a[0], &a[1]]).expect("additive")
            },
            &base,
            &dir,
        ));
        worst = worst.max(second_difference(
            |x| {
                let a = args(x);
                concat_linear_forward(&p, &[&a[0], &a[1]]).expect("concat")
            },
            &base,
            &dir,
        ));
        let c = second_difference(
            |x| {
                let a = args(x);
                ccp_forward(&ccp, &[&a[0], &a[1]]).expect("ccp")
            },
            &base,
            &dir,
        );
        curved += usize::from(c > CURVATURE_FLOOR);
    }
    (worst, curved as f64 / rays.max(1) as f64)
}

/// Largest relative error between backward and central differences of an
/// MSE loss on a small batch.
pub fn gradient_error(spec: &ModelSpec, inputs: &[Matrix], target: &Matrix, h: f64) -> f64 {
    let mut g = Graph::new();
    let ins: Vec<_> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = spec.build_graph(&mut g, &ins).expect("valid model");
    let loss = g.mse(out, target).expect("target shape");
    let grads = g.backward_scalar(loss).expect("registered ops");
    let analytic: Vec<f64> = (0..spec.params().len())
        .flat_map(|i| grads[&ParamId(i)].data().to_vec())
        .collect();
    let flat = spec.flat_params();
    let f = |x: &[f64]| {
        let mut s = spec.clone();
        s.set_flat_params(x);
        mse_loss(&s.forward_batch(inputs).expect("valid model"), target).expect("target shape")
    };
    finite_diff_check(f, &flat, &analytic, h).unwrap_or(f64::INFINITY)
}

/// Model families covered by the gradient suite.
pub const GRADIENT_VARIANTS: [&str; 8] = [
    "ccp",
    "ccp-shared",
    "ncp",
    "additive",
    "spade",
    "pinet-concat",
    "gan-conc",
    "ccp-chain-tanh",
];

/// A random small instance of one gradient-suite variant.
pub fn gradient_instance(variant: &str, rng: &mut impl Rng) -> ModelSpec {
    let dims = vec![dim(rng, 3), dim(rng, 3)];
    let (n, k, o, hidden) = (dim(rng, 3), dim(rng, 4), dim(rng, 3), dim(rng, 3));
    let arch = |kind, orders: Vec<usize>| Architecture {
        kind,
        orders,
        rank: k,
        hidden,
        variable_dims: dims.clone(),
        output_dim: o,
        omega: None,
        share_conditional: false,
        reconsume_conditional: true,
        centering: Centering::None,
        activation: Activation::None,
    };
    let a = match variant {
        "ccp" => arch(ArchKind::Ccp, vec![n]),
        "ccp-shared" => Architecture {
            share_conditional: true,
            ..arch(ArchKind::Ccp, vec![n.max(2)])
        },
        "ncp" => arch(ArchKind::Ncp, vec![n]),
        "additive" => arch(ArchKind::Additive, vec![n]),
        "spade" => arch(ArchKind::Spade, vec![n]),
        "pinet-concat" => arch(ArchKind::PinetConcat, vec![n]),
        "gan-conc" => arch(ArchKind::GanConc, vec![n]),
        "ccp-chain-tanh" => Architecture {
            activation: Activation::Tanh,
            ..arch(ArchKind::Ccp, vec![2, 2])
        },
        other => panic!("unknown gradient variant {other}"),
    };
    let mut spec = a.build(rng).expect("valid architecture");
    randomize(&mut spec, rng);
    spec
}

/// Worst relative gradient error per variant.
pub fn gradients(rng: &mut impl Rng, instances: usize, h: f64) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for variant in GRADIENT_VARIANTS {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let spec = gradient_instance(variant, rng);
            let batch = 3;
            let inputs: Vec<Matrix> = spec
                .variable_dims
                .iter()
                .map(|&d| uniform_matrix(rng, batch, d, -1.0, 1.0))
                .collect();
            let target = uniform_matrix(rng, batch, spec.output_dim(), -1.0, 1.0);
            worst = worst.max(gradient_error(&spec, &inputs, &target, h));
        }
        out.insert(variant.to_string(), worst);
    }
    out
}

/// Runs one suite on its own stream of `seed`.
pub fn run_suite(suite: Suite, seed: u64, cfg: &VerifyConfig) -> SuiteReport {
    let mut rng = stream(seed, Stream::Suite(suite.stream_index()));
    let start = Instant::now();
    let (trials, max_deviation, tolerance, passed, metrics) = match suite {
        Suite::Claim1 => {
            let (dev, trials) = claim1(&mut rng, cfg.claim1_draws, cfg.claim1_pairs);
            (trials, dev, CLAIM1_TOL, dev < CLAIM1_TOL, BTreeMap::new())
        }
        Suite::Lemma1 => {
            let dev = lemma1(&mut rng, cfg.lemma1_sets);
            (
                cfg.lemma1_sets,
                dev,
                LEMMA1_TOL,
                dev < LEMMA1_TOL,
                BTreeMap::new(),
            )
        }
        Suite::DegreeLaw => {
            let (misses, trials, metrics) = degree_law(&mut rng, cfg.degree_instances);
            (trials, misses as f64, 0.0, misses == 0, metrics)
        }
        Suite::Reductions => {
            let m = reductions(&mut rng, cfg.reduction_instances);
            let dev = m.values().fold(0.0f64, |a, &b| a.max(b));
            (
                cfg.reduction_instances,
                dev,
                REDUCTION_TOL,
                dev < REDUCTION_TOL,
                m,
            )
        }
        Suite::Affineness => {
            let (dev, frac) = affineness(&mut rng, cfg.affine_rays);
            let mut m = BTreeMap::new();
            m.insert("ccp-curved-fraction".to_string(), frac);
            (
                cfg.affine_rays,
                dev,
                AFFINE_TOL,
                dev < AFFINE_TOL && frac >= CURVED_FRACTION,
                m,
            )
        }
        Suite::Gradients => {
            let m = gradients(&mut rng, cfg.gradient_instances, cfg.gradient_step);
            let dev = m.values().fold(0.0f64, |a, &b| a.max(b));
            (
                cfg.gradient_instances * m.len(),
                dev,
                GRADIENT_TOL,
                dev < GRADIENT_TOL,
                m,
            )
        }
    };
    SuiteReport {
        suite: suite.name().to_string(),
        trials,
        max_deviation,
        tolerance,
        passed,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs the suites concurrently; reports come back in request order.
pub fn run_suites(suites: &[Suite], seed: u64, cfg: &VerifyConfig) -> Vec<SuiteReport> {
    std::thread::scope(|s| {
        let handles: Vec<_> = suites
            .iter()
            .map(|&suite| s.spawn(move || run_suite(suite, seed, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("suite thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig {
            claim1_draws: 10,
            claim1_pairs: 2,
            lemma1_sets: 10,
            degree_instances: 2,
            reduction_instances: 5,
            affine_rays: 20,
            gradient_instances: 1,
            gradient_step: 1e-5,
        }
    }

    #[test]
    fn names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::from_name(s.name()), Some(s));
        }
        assert_eq!(Suite::from_name("nope"), None);
    }

    #[test]
    fn small_suites_pass_and_keep_order() {
        let order = [Suite::Gradients, Suite::Claim1, Suite::Lemma1];
        let r = run_suites(&order, 5, &small());
        let names: Vec<_> = r.iter().map(|s| s.suite.as_str()).collect();
        assert_eq!(names, ["gradients", "claim1-equivalence", "lemma1"]);
        assert!(r.iter().all(|s| s.passed), "{r:#?}");
    }

    #[test]
    fn suites_are_reproducible() {
        let a = run_suite(Suite::Reductions, 9, &small());
        let b = run_suite(Suite::Reductions, 9, &small());
        assert_eq!(a.max_deviation, b.max_deviation);
        assert_eq!(a.metrics, b.metrics);
    }
}
