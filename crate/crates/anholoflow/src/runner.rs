//! Command orchestration behind the CLI: each command turns a validated
//! [`RunConfig`](crate::config::RunConfig) into one output directory.
//!
//! A directory is *complete* exactly when it holds `manifest.json` (the
//! last file written).  Any abort instead leaves a `FAILED` marker with
//! the error text, so no directory can masquerade as a finished run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::ansatz::{assemble, residual_system, solve_psi, GeneratingData};
use crate::config::{eval_field, Command, RunConfig};
use crate::error::{Error, Result};
use crate::flow::{f_evolution, flow_step_general, monotonicity_report, FlowState};
use crate::functionals::{
    compare_connections, normalize_f, thermodynamics, ConnectionComparison, FunctionalReport,
};
use crate::geometry::{DMetric, SourceSpec};
use crate::grid::{Field, GridChart};
use crate::io;
use crate::manifest::{verify_run, RunManifest};
use crate::spde::{ensemble_run, soc_statistics, NoiseSpec, SocReport, SpdeConfig, SpdeDomain};

pub const FAILED_MARKER: &str = "FAILED";

/// Pick the effective output directory: the CLI `--out` flag beats the
/// config entry, and a relative choice is rooted under `env_root` (the
/// `ANHOLOFLOW_OUT` variable) when that is set.
pub fn resolve_output_dir(cfg: &RunConfig, cli_out: Option<&Path>, env_root: Option<&str>) -> PathBuf {
    let chosen = cli_out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    match env_root {
        Some(root) if chosen.is_relative() => Path::new(root).join(chosen),
        _ => chosen,
    }
}

/// Run one command into `dir`.  On success the directory ends with a
/// verified manifest; on failure it ends with a `FAILED` marker.
pub fn execute(cfg: &RunConfig, config_text: &str, dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    // A fresh attempt supersedes any old failure marker.
    let _ = std::fs::remove_file(dir.join(FAILED_MARKER));

    let mut man = RunManifest::begin(cfg.command.name(), cfg.seed, config_text);
    let result = match cfg.command {
        Command::GenMetric => run_gen_metric(cfg, dir, &mut man),
        Command::Flow => run_flow(cfg, dir, &mut man),
        Command::Spde => run_spde(cfg, dir, &mut man),
        Command::Functionals => run_functionals(cfg, dir, &mut man),
        Command::Report => run_report(cfg, dir, &mut man),
    };
    match result {
        Ok(()) => man.finish(dir),
        Err(e) => {
            let _ = std::fs::write(dir.join(FAILED_MARKER), format!("{e}\n"));
            Err(e)
        }
    }
}

fn write_json_artifact<T: Serialize>(
    dir: &Path,
    man: &mut RunManifest,
    name: &str,
    value: &T,
) -> Result<()> {
    let path = dir.join(name);
    io::write_json(&path, value)?;
    man.record(dir, &path)
}

fn write_csv_artifact(
    dir: &Path,
    man: &mut RunManifest,
    name: &str,
    header: &[&str],
    rows: &[Vec<f64>],
) -> Result<()> {
    let path = dir.join(name);
    io::write_csv(&path, header, rows)?;
    man.record(dir, &path)
}

fn write_field_artifact(
    dir: &Path,
    man: &mut RunManifest,
    name: &str,
    field: &Field,
) -> Result<()> {
    let path = dir.join(name);
    io::write_field(&path, field)?;
    man.record(dir, &path)
}

/// Build the metric a run evolves or measures on: the `[metric]` block
/// when present, the flat product otherwise.
fn build_metric(cfg: &RunConfig, chart: &Arc<GridChart>) -> Result<Arc<DMetric>> {
    match &cfg.metric {
        Some(mc) => mc.build(chart),
        None => Ok(Arc::new(DMetric::flat(chart))),
    }
}

// ---------------------------------------------------------------------
// gen-metric
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct GenMetricSummary {
    lambda: f64,
    eps_phi: f64,
    residuals: crate::ansatz::ResidualReport,
    system_max: f64,
}

fn run_gen_metric(cfg: &RunConfig, dir: &Path, man: &mut RunManifest) -> Result<()> {
    let grid = cfg.grid.as_ref().expect("validated");
    let a = cfg.ansatz.as_ref().expect("validated");
    let chart = grid.to_chart()?;

    let phi = eval_field(&a.phi, "ansatz.phi", &chart)?;
    let h4_0 = eval_field(&a.h4_0, "ansatz.h4_0", &chart)?;
    let n1 = [
        eval_field(&a.n1[0], "ansatz.n1", &chart)?,
        eval_field(&a.n1[1], "ansatz.n1", &chart)?,
    ];
    let n2 = [
        eval_field(&a.n2[0], "ansatz.n2", &chart)?,
        eval_field(&a.n2[1], "ansatz.n2", &chart)?,
    ];
    let data = GeneratingData::new(phi, a.lambda, h4_0, n1, n2, a.eps_phi)?;
    let boundary = eval_field(&a.psi_boundary, "ansatz.psi_boundary", &chart)?;
    let psi = solve_psi(&boundary, a.psi_tol)?;
    let am = assemble(&data, psi)?;
    let residuals = residual_system(&am, &data.phi, a.lambda)?;

    for (name, field) in [
        ("phi.afld", &data.phi),
        ("psi.afld", &am.psi),
        ("h3.afld", &am.h3),
        ("h4.afld", &am.h4),
        ("w1.afld", &am.w[0]),
        ("w2.afld", &am.w[1]),
        ("n1.afld", &am.n[0]),
        ("n2.afld", &am.n[1]),
    ] {
        write_field_artifact(dir, man, name, field)?;
    }
    let summary = GenMetricSummary {
        lambda: a.lambda,
        eps_phi: a.eps_phi,
        system_max: residuals.system_max(),
        residuals,
    };
    write_json_artifact(dir, man, "residuals.json", &summary)
}

// ---------------------------------------------------------------------
// flow
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct FlowSummary {
    dchi: f64,
    steps: usize,
    snapshots: usize,
    tau_end: f64,
    max_mixed_residual: f64,
    mixed_warning: bool,
    mass_drift: f64,
    min_omega: f64,
    f_first: f64,
    f_last: f64,
    w_first: f64,
    w_last: f64,
    mid_rel_mismatch_f: f64,
    mid_rel_mismatch_sigma: f64,
}

fn run_flow(cfg: &RunConfig, dir: &Path, man: &mut RunManifest) -> Result<()> {
    let grid = cfg.grid.as_ref().expect("validated");
    let fc = cfg.flow.as_ref().expect("validated");
    let chart = grid.to_chart()?;
    let metric = build_metric(cfg, &chart)?;
    let f0 = eval_field(&fc.f0, "flow.f0", &chart)?;

    let mut state = FlowState::new(metric, f0, fc.tau0, 0.0)?;
    let source = SourceSpec { lambda_h: fc.lambda_h, lambda_v: fc.lambda_v };
    let mut snapshots = vec![state.clone()];
    let mut max_mixed = 0.0_f64;
    let mut warned = false;
    for step in 1..=fc.steps {
        let gs = flow_step_general(&state, fc.dchi, source, fc.tol_mixed)?;
        max_mixed = max_mixed.max(gs.mixed_residual);
        warned |= gs.mixed_warning;
        state = gs.state;
        if step % fc.snapshot_every == 0 {
            snapshots.push(state.clone());
        }
    }
    if snapshots.len() < 2 {
        return Err(Error::Config(
            "flow produced fewer than two snapshots; lower snapshot_every or raise steps".into(),
        ));
    }

    // Backward pass for the potential, then the per-snapshot functionals.
    let pot = f_evolution(&snapshots, fc.variant, fc.cfl)?;
    let states: Vec<FlowState> = snapshots
        .iter()
        .zip(&pot.f_hats)
        .map(|(s, f)| FlowState::new(Arc::clone(&s.metric), f.clone(), s.tau_hat, s.chi))
        .collect::<Result<_>>()?;
    let report = monotonicity_report(&states)?;

    let rows: Vec<Vec<f64>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.chi,
                r.tau,
                r.f,
                r.w,
                r.integrand,
                r.sigma,
                r.fd_slope_f.unwrap_or(f64::NAN),
                r.fd_slope_w.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    write_csv_artifact(
        dir,
        man,
        "monotonicity.csv",
        &["chi", "tau", "F", "W", "integrand", "sigma", "fd_slope_F", "fd_slope_W"],
        &rows,
    )?;

    let first = report.rows.first().expect("nonempty");
    let last = report.rows.last().expect("nonempty");
    let summary = FlowSummary {
        dchi: fc.dchi,
        steps: fc.steps,
        snapshots: snapshots.len(),
        tau_end: state.tau_hat,
        max_mixed_residual: max_mixed,
        mixed_warning: warned,
        mass_drift: pot.mass_drift,
        min_omega: pot.min_omega,
        f_first: first.f,
        f_last: last.f,
        w_first: first.w,
        w_last: last.w,
        mid_rel_mismatch_f: report.mid_rel_mismatch_f,
        mid_rel_mismatch_sigma: report.mid_rel_mismatch_sigma,
    };
    write_json_artifact(dir, man, "summary.json", &summary)
}

// ---------------------------------------------------------------------
// spde
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct SpdeSummary {
    paths: usize,
    failed: usize,
    steps: usize,
    dchi: f64,
    noise_k: usize,
    admissibility: f64,
    min_over_paths: f64,
    positivity_all: bool,
    m_bar_first: f64,
    m_bar_last: f64,
    soc: SocReport,
}

fn run_spde(cfg: &RunConfig, dir: &Path, man: &mut RunManifest) -> Result<()> {
    let grid = cfg.grid.as_ref().expect("validated");
    let sc = cfg.spde.as_ref().expect("validated");
    let chart = grid.to_chart()?;
    let metric = build_metric(cfg, &chart)?;
    let dom = SpdeDomain::new(&metric, &sc.active_indices()?)?;

    let u0 = eval_field(&sc.initial, "spde.initial", &chart)?;
    let l = match &sc.noise.l {
        Some(src) => Some(eval_field(src, "spde.noise.l", &chart)?),
        None => None,
    };
    let ns = NoiseSpec::new(&dom, sc.noise.k, &sc.noise.rule, l.as_ref(), sc.noise.shift)?;
    let run_cfg = SpdeConfig {
        graph: sc.graph.clone(),
        dchi: sc.dchi,
        steps: sc.steps,
        eps_min: sc.eps_min,
        eps_scale: sc.eps_scale,
    };
    let stats = ensemble_run(&dom, &run_cfg, &ns, &u0, cfg.seed, sc.paths)?;
    if stats.failed == stats.paths {
        return Err(Error::Numeric("every path aborted; see solver tolerances".into()));
    }
    let soc = soc_statistics(&stats);

    let header = ["chi", "l2", "min", "max", "m"];
    for (p, rec) in stats.records.iter().enumerate() {
        let Some(rec) = rec else { continue };
        let rows: Vec<Vec<f64>> =
            rec.rows.iter().map(|r| vec![r.chi, r.l2, r.min, r.max, r.m]).collect();
        write_csv_artifact(dir, man, &format!("path_{p:03}.csv"), &header, &rows)?;
    }
    // Ensemble series, on the chi axis of the first surviving path.
    let chi_axis: Vec<f64> = stats
        .records
        .iter()
        .flatten()
        .next()
        .map(|rec| rec.rows.iter().map(|r| r.chi).collect())
        .unwrap_or_default();
    let rows: Vec<Vec<f64>> = (0..stats.m_bar.len())
        .map(|i| {
            vec![
                chi_axis.get(i).copied().unwrap_or(f64::NAN),
                stats.m_bar[i],
                stats.l2_mean[i],
                stats.l2_q10[i],
                stats.l2_q50[i],
                stats.l2_q90[i],
            ]
        })
        .collect();
    write_csv_artifact(
        dir,
        man,
        "ensemble.csv",
        &["chi", "m_bar", "l2_mean", "l2_q10", "l2_q50", "l2_q90"],
        &rows,
    )?;

    let summary = SpdeSummary {
        paths: stats.paths,
        failed: stats.failed,
        steps: sc.steps,
        dchi: sc.dchi,
        noise_k: ns.k,
        admissibility: ns.admissibility,
        min_over_paths: stats.min_over_paths,
        positivity_all: stats.positivity_all,
        m_bar_first: stats.m_bar.first().copied().unwrap_or(f64::NAN),
        m_bar_last: stats.m_bar.last().copied().unwrap_or(f64::NAN),
        soc,
    };
    write_json_artifact(dir, man, "ensemble.json", &summary)
}

// ---------------------------------------------------------------------
// functionals
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct FunctionalsSummary {
    tau: f64,
    report: FunctionalReport,
    comparison: ConnectionComparison,
}

fn run_functionals(cfg: &RunConfig, dir: &Path, man: &mut RunManifest) -> Result<()> {
    let grid = cfg.grid.as_ref().expect("validated");
    let fc = cfg.functionals.as_ref().expect("validated");
    let chart = grid.to_chart()?;
    let metric = build_metric(cfg, &chart)?;
    // The config gives the potential's shape; shift it onto the unit-mass
    // compatibility slice the functional identities assume.
    let f_hat = normalize_f(&metric, &eval_field(&fc.f, "functionals.f", &chart)?, fc.tau)?;

    let report = thermodynamics(&metric, &f_hat, fc.tau)?;
    let comparison = compare_connections(&metric, &f_hat, fc.tau, fc.tol_s)?;
    let summary = FunctionalsSummary { tau: fc.tau, report, comparison };
    write_json_artifact(dir, man, "functionals.json", &summary)
}

// ---------------------------------------------------------------------
// report
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct ReportRun {
    dir: String,
    command: String,
    seed: u64,
    tool_version: String,
    started: u64,
    finished: u64,
    files: usize,
    /// Contents of every JSON summary the run produced, keyed by name.
    summaries: std::collections::BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct ReportSummary {
    runs: Vec<ReportRun>,
    checksum_failures: Vec<String>,
}

fn run_report(cfg: &RunConfig, dir: &Path, man: &mut RunManifest) -> Result<()> {
    let rc = cfg.report.as_ref().expect("validated");
    let mut runs = Vec::new();
    let mut failures: Vec<String> = Vec::new();

    for (i, run_dir) in rc.runs.iter().enumerate() {
        let (m, bad) = verify_run(run_dir)?;
        failures.extend(bad.iter().map(|p| p.display().to_string()));

        let mut summaries = std::collections::BTreeMap::new();
        for entry in &m.files {
            let path = run_dir.join(&entry.path);
            // Files that failed their checksum are listed, never consumed.
            if bad.contains(&path) {
                continue;
            }
            let stem = Path::new(&entry.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| entry.path.clone());
            if entry.path.ends_with(".json") {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
                summaries.insert(entry.path.clone(), value);
            } else if entry.path.ends_with(".csv") {
                // Gnuplot-ready mirror of each intact series.
                let dat_rel = format!("run{i:02}_{stem}.dat");
                let dat = dir.join(&dat_rel);
                io::csv_to_dat(&path, &dat)?;
                man.record(dir, &dat)?;
            }
        }
        runs.push(ReportRun {
            dir: run_dir.display().to_string(),
            command: m.command,
            seed: m.seed,
            tool_version: m.tool_version,
            started: m.started,
            finished: m.finished,
            files: m.files.len(),
            summaries,
        });
    }

    let summary = ReportSummary { runs, checksum_failures: failures.clone() };
    write_json_artifact(dir, man, "report.json", &summary)?;
    if !failures.is_empty() {
        return Err(Error::Integrity(format!(
            "checksum mismatch in {} file(s): {}",
            failures.len(),
            failures.join(", ")
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::MANIFEST_NAME;

    fn run_toml(command: &str, body: &str) -> String {
        format!(
            r#"
command = "{command}"
seed = 11
output_dir = "unused"

[grid]
x1 = {{ min = 0.0, max = 1.0, count = 7, boundary = "dirichlet" }}
x2 = {{ min = 0.0, max = 1.0, count = 7, boundary = "dirichlet" }}
t = {{ min = 0.0, max = 1.0, count = 7, boundary = "dirichlet" }}
y4 = {{ min = 0.0, max = 1.0, count = 5, boundary = "dirichlet" }}
{body}
"#
        )
    }

    fn execute_str(text: &str, dir: &Path) -> Result<()> {
        let cfg = RunConfig::from_toml(text)?;
        execute(&cfg, text, dir)
    }

    const GEN_BODY: &str = r#"
[ansatz]
phi = "t"
lambda = 0.25
"#;

    #[test]
    fn gen_metric_produces_verified_deterministic_artifacts() {
        // Narrow t-window: the closed form h4 = e^{2t} is steepest along t,
        // and the coarse 7-node chart needs a small spacing there for the
        // residual smoke bound below to be meaningful.
        let text = run_toml("gen-metric", GEN_BODY)
            .replace("t = { min = 0.0, max = 1.0", "t = { min = 0.0, max = 0.25");
        let dir = tempfile::tempdir().unwrap();
        execute_str(&text, dir.path()).unwrap();

        let (m, bad) = verify_run(dir.path()).unwrap();
        assert!(bad.is_empty());
        assert_eq!(m.command, "gen-metric");
        assert_eq!(m.seed, 11);
        assert!(m.files.iter().any(|f| f.path == "residuals.json"));
        assert!(m.files.iter().any(|f| f.path == "h4.afld"));
        assert!(!dir.path().join(FAILED_MARKER).exists());

        // phi = t, lambda = 1/4 closed form: the whole defining system is
        // satisfied to stencil accuracy (second order; the chart here is
        // deliberately coarse, so only demand the O(spacing^2) ballpark).
        let text_json = std::fs::read_to_string(dir.path().join("residuals.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text_json).unwrap();
        let system_max = v["system_max"].as_f64().unwrap();
        assert!(system_max < 0.05, "closed form should be stencil-accurate, got {system_max}");

        // Rerunning the same config yields byte-identical fields.
        let dir2 = tempfile::tempdir().unwrap();
        execute_str(&text, dir2.path()).unwrap();
        for name in ["phi.afld", "psi.afld", "h3.afld", "h4.afld", "n1.afld"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn gen_metric_rejects_zero_lambda_as_config_error() {
        let text = run_toml("gen-metric", GEN_BODY).replace("lambda = 0.25", "lambda = 0.0");
        let dir = tempfile::tempdir().unwrap();
        let err = execute_str(&text, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(format!("{err}").contains("lambda"));
        assert!(dir.path().join(FAILED_MARKER).exists());
        assert!(!dir.path().join(MANIFEST_NAME).exists());
    }

    #[test]
    fn flat_flow_reports_a_zero_f_series() {
        let body = r#"
[flow]
dchi = 0.001
steps = 4
snapshot_every = 2
tau0 = 1.0
"#;
        let text = run_toml("flow", body);
        let dir = tempfile::tempdir().unwrap();
        execute_str(&text, dir.path()).unwrap();

        let csv = std::fs::read_to_string(dir.path().join("monotonicity.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "chi,tau,F,W,integrand,sigma,fd_slope_F,fd_slope_W"
        );
        for line in lines {
            let f: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert!(f.abs() < 1e-10, "flat metric must have F = 0, got {f}");
        }
        let (m, bad) = verify_run(dir.path()).unwrap();
        assert!(bad.is_empty());
        assert!(m.files.iter().any(|f| f.path == "summary.json"));
    }

    fn spde_dir() -> (tempfile::TempDir, String) {
        let body = r#"
[spde]
dchi = 0.002
steps = 30
paths = 5
active_axes = ["x1"]
initial = "0.6*pow(sin(pi*x1), 4)"

[spde.graph]
variant = "heaviside_soc"
kappa = 0.5
c_u = 0.3

[spde.noise]
k = 2
shift = 0.3
"#;
        let text = run_toml("spde", body);
        let dir = tempfile::tempdir().unwrap();
        execute_str(&text, dir.path()).unwrap();
        (dir, text)
    }

    #[test]
    fn spde_run_writes_paths_and_an_absorption_summary() {
        let (dir, _) = spde_dir();
        let summary = std::fs::read_to_string(dir.path().join("ensemble.json")).unwrap();
        assert!(summary.contains("absorption_flag"));
        let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
        assert_eq!(v["paths"].as_u64(), Some(5));
        assert!(dir.path().join("path_000.csv").exists());
        assert!(dir.path().join("ensemble.csv").exists());
        let (_, bad) = verify_run(dir.path()).unwrap();
        assert!(bad.is_empty());
    }

    #[test]
    fn functionals_on_a_product_metric_judge_equivalent() {
        let body = r#"
[metric]
g11 = "1 + 0.2*x1*x2"
g22 = "1 + 0.1*x2"

[functionals]
f = "0.1*x1"
tau = 1.0
"#;
        let text = run_toml("functionals", body);
        let dir = tempfile::tempdir().unwrap();
        execute_str(&text, dir.path()).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("functionals.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
        assert_eq!(v["comparison"]["verdict"].as_str(), Some("equivalent"));
    }

    #[test]
    fn report_merges_runs_and_flags_tampering() {
        let (spde, _) = spde_dir();
        let report_toml = format!(
            r#"
command = "report"
seed = 0
output_dir = "unused"

[report]
runs = ["{}"]
"#,
            spde.path().display()
        );
        let dir = tempfile::tempdir().unwrap();
        execute_str(&report_toml, dir.path()).unwrap();
        let merged = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&merged).unwrap();
        assert_eq!(v["runs"][0]["command"].as_str(), Some("spde"));
        assert_eq!(v["runs"][0]["seed"].as_u64(), Some(11));
        assert!(v["runs"][0]["summaries"]["ensemble.json"]["soc"].is_object());
        assert!(v["checksum_failures"].as_array().unwrap().is_empty());
        // The intact series gained gnuplot mirrors.
        assert!(dir.path().join("run00_ensemble.dat").exists());

        // Now tamper with a produced CSV and report again.
        let victim = spde.path().join("path_000.csv");
        let mut text = std::fs::read_to_string(&victim).unwrap();
        text.push_str("9,9,9,9,9\n");
        std::fs::write(&victim, text).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let err = execute_str(&report_toml, dir2.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(dir2.path().join(FAILED_MARKER).exists());
        let merged = std::fs::read_to_string(dir2.path().join("report.json")).unwrap();
        assert!(merged.contains("path_000.csv"));
    }

    #[test]
    fn report_on_a_directory_without_manifest_is_an_integrity_error() {
        let empty = tempfile::tempdir().unwrap();
        let report_toml = format!(
            "command = \"report\"\n[report]\nruns = [\"{}\"]\n",
            empty.path().display()
        );
        let dir = tempfile::tempdir().unwrap();
        let err = execute_str(&report_toml, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn output_dir_resolution_prefers_cli_then_env_root() {
        let cfg = RunConfig::from_toml(&run_toml("gen-metric", GEN_BODY)).unwrap();
        assert_eq!(resolve_output_dir(&cfg, None, None), PathBuf::from("unused"));
        assert_eq!(
            resolve_output_dir(&cfg, None, Some("/data")),
            PathBuf::from("/data/unused")
        );
        assert_eq!(
            resolve_output_dir(&cfg, Some(Path::new("explicit")), Some("/data")),
            PathBuf::from("/data/explicit")
        );
        assert_eq!(
            resolve_output_dir(&cfg, Some(Path::new("/abs")), Some("/data")),
            PathBuf::from("/abs")
        );
    }
}
