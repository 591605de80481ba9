use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cope::models::{save_checkpoint, ModelSpec};
use cope::oracle::Degree;
use cope::rng::{stream, uniform_vec, Stream};
use cope::train::{
    train_conditional_generator, train_regression, CondPointCloud, PolyRegression, Trace,
    TrainError,
};
use cope::verify::{probe_model, random_ray, run_suites, stretch};
use serde_json::json;

use crate::config::{Command, RegressionTask, Resolved};

/// Runs the configured command. `Ok(false)` means the run finished but
/// did not meet its checks.
pub fn run(r: &Resolved) -> Result<bool> {
    let out = &r.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(
        &out.join("resolved_config.json"),
        &serde_json::to_value(&r.config)?,
    )?;
    match r.command {
        Command::Verify => verify(r),
        Command::TrainRegression => regression(r),
        Command::TrainConditional => conditional(r),
        Command::DegreeReport => degree_report(r),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<(), TrainError>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint(r: &Resolved, model: &ModelSpec) -> Result<()> {
    let path = r.output_dir.join("checkpoint.json");
    save_checkpoint(model, &path).with_context(|| format!("writing {}", path.display()))
}

fn verify(r: &Resolved) -> Result<bool> {
    let reports = run_suites(&r.suites(), r.config.seed, &r.verify_config());
    let mut csv = String::from("suite,trials,max_deviation,tolerance,passed\n");
    for s in &reports {
        csv += &format!(
            "{},{},{:e},{:e},{}\n",
            s.suite, s.trials, s.max_deviation, s.tolerance, s.passed
        );
        println!(
            "{:<20} {:>6} trials  max dev {:>10.3e}  tol {:>8.1e}  {}",
            s.suite,
            s.trials,
            s.max_deviation,
            s.tolerance,
            if s.passed { "pass" } else { "FAIL" }
        );
    }
    fs::write(r.output_dir.join("metrics.csv"), csv)?;
    let passed = reports.iter().all(|s| s.passed);
    write_json(
        &r.output_dir.join("report.json"),
        &json!({ "seed": r.config.seed, "passed": passed, "suites": reports }),
    )?;
    for s in reports.iter().filter(|s| !s.passed) {
        eprintln!(
            "suite {} failed: max deviation {:e} against tolerance {:e}",
            s.suite, s.max_deviation, s.tolerance
        );
    }
    Ok(passed)
}

/// Saves the trace of a diverged run before reporting it.
fn diverged(r: &Resolved, step: usize, trace: &Trace) -> Result<bool> {
    trace.save(&r.output_dir.join("metrics.csv"))?;
    eprintln!("training diverged at step {step}; partial trace saved");
    Ok(false)
}

fn regression(r: &Resolved) -> Result<bool> {
    let seed = r.config.seed;
    let data = match r.config.task {
        RegressionTask::Poly => PolyRegression::generate(&r.poly(), seed)?.data,
        RegressionTask::Downsample => r.downsample().generate(seed)?,
    };
    let dims: Vec<usize> = data.inputs.iter().map(|m| m.cols()).collect();
    let arch = r.architecture(dims, data.targets.cols());
    let mut model = arch.build(&mut stream(seed, Stream::Init))?;
    let trace = match train_regression(&data, &mut model, &r.regression_settings()) {
        Ok(t) => t,
        Err(TrainError::Diverged { step, trace }) => return diverged(r, step, &trace),
        Err(e) => return Err(e.into()),
    };
    trace.save(&r.output_dir.join("metrics.csv"))?;
    checkpoint(r, &model)?;
    let mse = trace.last("loss").context("empty trace")?;
    let passed = r.config.max_final_mse.is_none_or(|m| mse <= m);
    println!("final mse {mse:e} with {} parameters", model.num_params());
    write_json(
        &r.output_dir.join("report.json"),
        &json!({
            "final_mse": mse,
            "params": model.num_params(),
            "steps": r.steps(),
            "max_final_mse": r.config.max_final_mse,
            "passed": passed,
        }),
    )?;
    if !passed {
        eprintln!("final mse {mse:e} is above max_final_mse");
    }
    Ok(passed)
}

fn conditional(r: &Resolved) -> Result<bool> {
    let c = &r.config;
    let task = CondPointCloud::ring(c.clusters, c.radius, c.cluster_std)?;
    let arch = r.architecture(vec![c.noise_dim, c.clusters], 2);
    let mut model = arch.build(&mut stream(c.seed, Stream::Init))?;
    let report =
        match train_conditional_generator(&task, &mut model, &r.conditional_settings(), c.seed) {
            Ok(rep) => rep,
            Err(TrainError::Diverged { step, trace }) => return diverged(r, step, &trace),
            Err(e) => return Err(e.into()),
        };
    report.trace.save(&r.output_dir.join("metrics.csv"))?;
    write_file(&r.output_dir.join("samples.csv"), |w| {
        report.write_samples_csv(w)
    })?;
    write_file(&r.output_dir.join("sweep.csv"), |w| {
        report.write_sweep_csv(w)
    })?;
    checkpoint(r, &model)?;
    let passed = c.min_accuracy.is_none_or(|a| report.accuracy >= a);
    println!(
        "class accuracy {:.4} over {} samples; sweep endpoints {}",
        report.accuracy,
        report.samples.len(),
        if report.sweep_endpoints_ok {
            "correct"
        } else {
            "wrong"
        }
    );
    write_json(
        &r.output_dir.join("report.json"),
        &json!({
            "accuracy": report.accuracy,
            "samples": report.samples.len(),
            "class_means": report.class_means,
            "sweep_endpoints_ok": report.sweep_endpoints_ok,
            "min_accuracy": c.min_accuracy,
            "passed": passed,
        }),
    )?;
    if !passed {
        eprintln!(
            "class accuracy {:.4} is below min_accuracy",
            report.accuracy
        );
    }
    Ok(passed)
}

fn degree_value(d: Degree) -> (usize, bool) {
    match d {
        Degree::Exact(n) => (n, true),
        Degree::AtLeast(n) => (n, false),
    }
}

fn degree_report(r: &Resolved) -> Result<bool> {
    let c = &r.config;
    let dims = c.input_dims.clone();
    let model = r
        .architecture(dims.clone(), c.output_dim)
        .build(&mut stream(c.seed, Stream::Init))?;
    checkpoint(r, &model)?;
    let expected = r.expected_degree();
    let max_order = expected + 2;
    let total: usize = dims.iter().sum();
    let mut rng = stream(c.seed, Stream::Eval);

    // probe 0 is the joint ray, probe v+1 moves only variable v
    let probes = dims.len() + 1;
    let mut best = vec![(0usize, true); probes];
    let mut csv = String::from("ray,probe,degree,exact\n");
    for ray in 0..c.rays {
        for (p, slot) in best.iter_mut().enumerate() {
            let (base, dir) = if p == 0 {
                random_ray(&mut rng, total)
            } else {
                let start: usize = dims[..p - 1].iter().sum();
                let mut dir = vec![0.0; total];
                dir[start..start + dims[p - 1]].copy_from_slice(&uniform_vec(
                    &mut rng,
                    dims[p - 1],
                    -1.0,
                    1.0,
                ));
                (uniform_vec(&mut rng, total, -1.0, 1.0), stretch(dir))
            };
            let (deg, exact) = degree_value(probe_model(&model, &base, &dir, max_order));
            let name = if p == 0 {
                "joint".to_string()
            } else {
                format!("z{}", p - 1)
            };
            csv += &format!("{ray},{name},{deg},{exact}\n");
            if deg > slot.0 || (deg == slot.0 && !exact) {
                *slot = (deg, exact);
            }
        }
    }
    fs::write(r.output_dir.join("metrics.csv"), csv)?;
    let (joint, joint_exact) = best[0];
    let passed = joint_exact && joint == expected;
    println!("expected degree {expected}, measured {joint}");
    for (v, (d, exact)) in best[1..].iter().enumerate() {
        println!("  z{v}: {}{d}", if *exact { "" } else { ">=" });
    }
    write_json(
        &r.output_dir.join("report.json"),
        &json!({
            "expected_degree": expected,
            "measured_degree": joint,
            "exact": joint_exact,
            "per_variable": best[1..].iter().map(|&(d, e)| json!({"degree": d, "exact": e})).collect::<Vec<_>>(),
            "rays": c.rays,
            "passed": passed,
        }),
    )?;
    if !passed {
        eprintln!("measured degree {joint} does not match expected {expected}");
    }
    Ok(passed)
}
