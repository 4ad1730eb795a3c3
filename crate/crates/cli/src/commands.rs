use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use osmee::linalg::{linspace, sample_variance};
use osmee::osmee::{run_osmee, OsmeeConfig, OsmeeFit};
use osmee::predictor::ErrorModel;
use osmee::simlab::{
    case_by_id, ensure_simulation_family, latent_reliability_ratio, reliability_ratio, rescale_error_variance,
    run_study, Estimator, PredictorLaw, StudyConfig, StudyRow,
};
use rayon::prelude::*;

use crate::args::{parse_list, FitArgs, GridSpec, SensitivityArgs, SimulateArgs, DEFAULT_SAMPLES};
use crate::data::{fmt_num, read_dataset, write_curve, write_rows, write_text};
use crate::error::{CliError, CliResult};

const DEFAULT_GRID_POINTS: usize = 101;
const DESK_REPS: usize = 50;
const DESK_SIZES: [usize; 3] = [128, 256, 512];
const DESK_SAMPLES: usize = 1000;
const PAPER_REPS: usize = 300;
const PAPER_SIZES: [usize; 5] = [128, 256, 512, 1024, 2048];

fn grid_points(spec: Option<&str>, w: &[f64]) -> CliResult<Vec<f64>> {
    let g = match spec {
        Some(s) => s.parse::<GridSpec>()?,
        None => {
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(lo < hi) {
                return Err(CliError::Input("all w values are equal; give --grid explicitly".into()));
            }
            GridSpec { a: lo, b: hi, count: DEFAULT_GRID_POINTS }
        }
    };
    Ok(linspace(g.a, g.b, g.count))
}

fn report_path(output: &Path, report: Option<&PathBuf>) -> PathBuf {
    report.cloned().unwrap_or_else(|| {
        let mut os = output.as_os_str().to_owned();
        os.push(".report.txt");
        PathBuf::from(os)
    })
}

fn fit_report(fit: &OsmeeFit, cfg: &OsmeeConfig, err: &ErrorModel, n: usize) -> String {
    let sel = fit.selected_iterate();
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k}: {v}");
    };
    line("family", cfg.family.name.to_string());
    line("link", cfg.family.link.as_str().into());
    line("basis", cfg.basis.basis.short_name().into());
    line("basis_dim", cfg.basis.dim.to_string());
    line("method", cfg.method.to_string());
    line("sigma_w2", fmt_num(err.sigma_w2()));
    line("n", n.to_string());
    line("seed", cfg.seed.to_string());
    if let Some(p) = &fit.posterior {
        line("sampler", p.sampler.to_string());
        line("mc_samples", p.n_samples.to_string());
        line("posterior_mean_sd", fmt_num(p.mean_sd));
    }
    if cfg.family.uses_shape() {
        line("shape", fmt_num(fit.scale.theta));
    }
    line("lambda", fmt_num(sel.lambda));
    line("phi", fmt_num(sel.phi));
    line("edf", fmt_num(sel.edf));
    line("deviance", fmt_num(sel.deviance));
    line("qgcv", fmt_num(sel.qgcv));
    line("selected_iteration", (fit.selected + 1).to_string());
    line("iterations", fit.iterates.len().to_string());
    line("converged", fit.converged.to_string());
    line("naive_lambda", fmt_num(fit.naive.fit.lambda));
    line("naive_edf", fmt_num(fit.naive.fit.edf));
    let path: Vec<String> = fit.iterates.iter().map(|it| fmt_num(it.qgcv)).collect();
    line("qgcv_path", path.join(","));
    s
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let data = read_dataset(&args.input)?;
    let cfg = args.model.config(DEFAULT_SAMPLES)?;
    let err = args.error_model()?;
    let grid = grid_points(args.grid.as_deref(), &data.w)?;
    let fit = run_osmee(&data.y, &data.w, &err, &cfg)?;
    write_curve(&args.output, &grid, &fit.predict_curve(&grid))?;
    let report = fit_report(&fit, &cfg, &err, data.y.len());
    write_text(&report_path(&args.output, args.report.as_ref()), &report)
}

fn study_table(rows: &[StudyRow], timing: bool) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.case.to_string(),
                r.family.to_string(),
                r.law.clone(),
                r.estimator.to_string(),
                r.n.to_string(),
                r.reps_used.to_string(),
                r.reps_failed.to_string(),
                fmt_num(r.mse),
                fmt_num(r.bias2_fraction),
                if timing { fmt_num(r.runtime_sec) } else { "NA".into() },
            ]
        })
        .collect()
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let case = case_by_id(args.case).map_err(|e| CliError::Usage(e.to_string()))?;
    let law: PredictorLaw = args.xdist.parse().map_err(|e: osmee::OsmeeError| CliError::Usage(e.to_string()))?;
    let samples = if args.paper_scale { DEFAULT_SAMPLES } else { DESK_SAMPLES };
    let fit = args.model.config(samples)?;
    ensure_simulation_family(&fit.family).map_err(|e| CliError::Usage(e.to_string()))?;
    let n_list = match &args.n_list {
        Some(s) => parse_list::<usize>(s, "sample size")?,
        None if args.paper_scale => PAPER_SIZES.to_vec(),
        None => DESK_SIZES.to_vec(),
    };
    if let Some(&n) = n_list.iter().find(|&&n| n < 8) {
        return Err(CliError::Usage(format!("sample size {n} is below 8")));
    }
    let reps = args.reps.unwrap_or(if args.paper_scale { PAPER_REPS } else { DESK_REPS });
    if reps < 2 {
        return Err(CliError::Usage("--reps must be at least 2".into()));
    }
    let estimators = parse_list::<Estimator>(&args.estimators, "estimator")?;
    let cfg = StudyConfig {
        case,
        family: fit.family,
        n_list,
        reps,
        estimators,
        law,
        seed: fit.seed,
        fit,
    };
    let rows = run_study(&cfg)?;
    let header = [
        "case", "family", "xdist", "estimator", "n", "reps_used", "reps_failed", "mse", "bias2_fraction", "runtime_sec",
    ];
    write_rows(&args.output, &header, study_table(&rows, args.timing))?;
    println!("{:<16} {:>6} {:>6} {:>14} {:>8}", "estimator", "n", "used", "mse", "bias2/mse");
    for r in &rows {
        println!(
            "{:<16} {:>6} {:>6} {:>14.6} {:>8.3}",
            r.estimator.as_str(),
            r.n,
            r.reps_used,
            r.mse,
            r.bias2_fraction
        );
    }
    Ok(())
}

pub fn cmd_sensitivity(args: &SensitivityArgs) -> CliResult<()> {
    let data = read_dataset(&args.input)?;
    let cfg = args.model.config(DEFAULT_SAMPLES)?;
    let variances = parse_list::<f64>(&args.sigma_w2_list, "error variance")?;
    if let Some(v) = variances.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(CliError::Usage(format!("error variance {v} is not a non-negative number")));
    }
    let var_w = sample_variance(&data.w);
    let (fit_w, var_fit) = if args.log_transform {
        if let Some(i) = data.w.iter().position(|&v| v <= 0.0) {
            return Err(CliError::Input(format!("--log-transform needs positive w; row {} has {}", i + 1, data.w[i])));
        }
        let lw: Vec<f64> = data.w.iter().map(|v| v.ln()).collect();
        let v = sample_variance(&lw);
        (lw, v)
    } else {
        (data.w.clone(), var_w)
    };
    let grid = grid_points(args.grid.as_deref(), &data.w)?;
    let eval: Vec<f64> = if args.log_transform {
        if let Some(d) = grid.iter().find(|&&d| d <= 0.0) {
            return Err(CliError::Usage(format!("--log-transform needs a positive grid, got {d}")));
        }
        grid.iter().map(|d| d.ln()).collect()
    } else {
        grid.clone()
    };
    let curves: Vec<CliResult<Vec<f64>>> = variances
        .par_iter()
        .map(|&s2| {
            let s2_fit = if args.log_transform { rescale_error_variance(s2, var_w, var_fit) } else { s2 };
            let err = ErrorModel::new(s2_fit).map_err(|e| CliError::Usage(e.to_string()))?;
            let fit = run_osmee(&data.y, &fit_w, &err, &cfg)?;
            Ok(fit.predict_curve(&eval))
        })
        .collect();
    std::fs::create_dir_all(&args.output_dir)
        .map_err(|e| CliError::Output(format!("{}: {e}", args.output_dir.display())))?;
    let mut combined = Vec::new();
    let mut reliability = Vec::new();
    for (&s2, curve) in variances.iter().zip(curves) {
        let curve = curve?;
        write_curve(&args.output_dir.join(format!("curve_sigma_w2_{}.csv", fmt_num(s2))), &grid, &curve)?;
        for (d, f) in grid.iter().zip(&curve) {
            combined.push(vec![fmt_num(s2), fmt_num(*d), fmt_num(*f)]);
        }
        let literal = reliability_ratio(var_w, s2).map(fmt_num).unwrap_or_else(|_| "NA".into());
        let latent = latent_reliability_ratio(var_w, s2).map(fmt_num).unwrap_or_else(|_| "NA".into());
        reliability.push(vec![fmt_num(s2), fmt_num(var_w), literal, latent]);
    }
    write_rows(&args.output_dir.join("combined.csv"), &["sigma_w2", "d", "fitted_mean"], combined)?;
    write_rows(
        &args.output_dir.join("reliability.csv"),
        &["sigma_w2", "var_w", "reliability_ratio", "latent_reliability_ratio"],
        reliability,
    )
}
