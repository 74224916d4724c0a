//! Run configuration: a single TOML file per run, schema-validated with
//! unknown keys rejected.  Field-valued entries are arithmetic
//! expressions (see [`crate::expr`]) over the chart coordinates.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::flow::PotentialVariant;
use crate::geometry::{DMetric, SignatureFlag};
use crate::grid::{Axis, BoundaryKind, Field, GridChart, AXIS_NAMES};
use crate::spde::{MonotoneGraph, NuRule};

/// Parse an expression, prefixing errors with the config key it came from.
fn parse_expr(src: &str, what: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Sample an expression string on every chart node.
pub fn eval_field(src: &str, what: &str, chart: &Arc<GridChart>) -> Result<Field> {
    let e = parse_expr(src, what)?;
    Ok(Field::from_fn(chart, |p| e.eval(&p)))
}

/// The run command selected by the config (must agree with the CLI
/// subcommand).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenMetric,
    Flow,
    Spde,
    Functionals,
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenMetric => "gen-metric",
            Command::Flow => "flow",
            Command::Spde => "spde",
            Command::Functionals => "functionals",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub boundary: BoundaryKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x1: AxisConfig,
    pub x2: AxisConfig,
    pub t: AxisConfig,
    pub y4: AxisConfig,
}

impl GridConfig {
    pub fn to_chart(&self) -> Result<Arc<GridChart>> {
        let mk = |name: &str, a: &AxisConfig| Axis::new(name, a.min, a.max, a.count, a.boundary);
        Ok(Arc::new(GridChart::new([
            mk("x1", &self.x1)?,
            mk("x2", &self.x2)?,
            mk("t", &self.t)?,
            mk("y4", &self.y4)?,
        ])?))
    }
}

fn expr_one() -> String {
    "1".into()
}

fn expr_zero() -> String {
    "0".into()
}

fn expr_zero_pair() -> [String; 2] {
    ["0".into(), "0".into()]
}

/// Metric blocks as expressions; defaults give the flat product metric.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default = "expr_one")]
    pub g11: String,
    #[serde(default = "expr_zero")]
    pub g12: String,
    #[serde(default = "expr_one")]
    pub g22: String,
    #[serde(default = "expr_one")]
    pub h33: String,
    #[serde(default = "expr_zero")]
    pub h34: String,
    #[serde(default = "expr_one")]
    pub h44: String,
    /// N-connection rows `N_1^a` and `N_2^a`.
    #[serde(default = "expr_zero_pair")]
    pub n1: [String; 2],
    #[serde(default = "expr_zero_pair")]
    pub n2: [String; 2],
    #[serde(default)]
    pub signature: SignatureConfig,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SignatureConfig {
    #[default]
    Riemannian,
    LorentzV,
}

impl MetricConfig {
    pub fn build(&self, chart: &Arc<GridChart>) -> Result<Arc<DMetric>> {
        let g = [
            eval_field(&self.g11, "metric.g11", chart)?,
            eval_field(&self.g12, "metric.g12", chart)?,
            eval_field(&self.g22, "metric.g22", chart)?,
        ];
        let h = [
            eval_field(&self.h33, "metric.h33", chart)?,
            eval_field(&self.h34, "metric.h34", chart)?,
            eval_field(&self.h44, "metric.h44", chart)?,
        ];
        let n = [
            [
                eval_field(&self.n1[0], "metric.n1", chart)?,
                eval_field(&self.n1[1], "metric.n1", chart)?,
            ],
            [
                eval_field(&self.n2[0], "metric.n2", chart)?,
                eval_field(&self.n2[1], "metric.n2", chart)?,
            ],
        ];
        let m = DMetric::new(chart, g, h, n)?;
        let m = match self.signature {
            SignatureConfig::Riemannian => m,
            SignatureConfig::LorentzV => m.with_signature(SignatureFlag::LorentzV),
        };
        m.check_nondegenerate(1e-12)?;
        Ok(Arc::new(m))
    }
}

fn default_eps_phi() -> f64 {
    crate::ansatz::DEFAULT_EPS_PHI
}

fn default_psi_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnsatzConfig {
    pub phi: String,
    pub lambda: f64,
    #[serde(default = "expr_zero")]
    pub h4_0: String,
    #[serde(default = "expr_zero_pair")]
    pub n1: [String; 2],
    #[serde(default = "expr_zero_pair")]
    pub n2: [String; 2],
    #[serde(default = "expr_zero")]
    pub psi_boundary: String,
    #[serde(default = "default_eps_phi")]
    pub eps_phi: f64,
    #[serde(default = "default_psi_tol")]
    pub psi_tol: f64,
}

fn default_snapshot_every() -> usize {
    1
}

fn default_tau0() -> f64 {
    1.0
}

fn default_variant() -> PotentialVariant {
    PotentialVariant::Plain
}

fn default_cfl() -> f64 {
    0.5
}

fn default_tol_mixed() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dchi: f64,
    pub steps: usize,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default)]
    pub lambda_h: f64,
    #[serde(default)]
    pub lambda_v: f64,
    #[serde(default = "expr_zero")]
    pub f0: String,
    #[serde(default = "default_variant")]
    pub variant: PotentialVariant,
    /// Substep limit of the backward conjugate-density pass.
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    /// Mixed-Ricci warning threshold of the block-diagonal closure.
    #[serde(default = "default_tol_mixed")]
    pub tol_mixed: f64,
}

fn default_noise_k() -> usize {
    16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_noise_k")]
    pub k: usize,
    #[serde(default)]
    pub rule: NuRule,
    /// Reference element expression; defaults to the ground eigenmode.
    #[serde(default)]
    pub l: Option<String>,
    /// Offset in the multiplicative factor `U - shift`.
    #[serde(default)]
    pub shift: f64,
}

fn default_noise() -> NoiseConfig {
    NoiseConfig { k: default_noise_k(), rule: NuRule::default(), l: None, shift: 0.0 }
}

fn default_active_axes() -> Vec<String> {
    vec!["x1".into(), "x2".into()]
}

fn default_paths() -> usize {
    1
}

fn default_eps_min() -> f64 {
    1e-6
}

fn default_eps_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeConfigBlock {
    pub graph: MonotoneGraph,
    pub dchi: f64,
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_active_axes")]
    pub active_axes: Vec<String>,
    pub initial: String,
    #[serde(default = "default_eps_min")]
    pub eps_min: f64,
    #[serde(default = "default_eps_scale")]
    pub eps_scale: f64,
    #[serde(default = "default_noise")]
    pub noise: NoiseConfig,
}

impl SpdeConfigBlock {
    /// Resolve the active axis names to chart indices.
    pub fn active_indices(&self) -> Result<Vec<usize>> {
        self.active_axes
            .iter()
            .map(|name| {
                AXIS_NAMES
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Config(format!("unknown axis name `{name}`")))
            })
            .collect()
    }
}

fn default_tau() -> f64 {
    1.0
}

fn default_tol_s() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalsConfig {
    #[serde(default = "expr_zero")]
    pub f: String,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_tol_s")]
    pub tol_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub runs: Vec<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

/// One run's full configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub metric: Option<MetricConfig>,
    #[serde(default)]
    pub ansatz: Option<AnsatzConfig>,
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub spde: Option<SpdeConfigBlock>,
    #[serde(default)]
    pub functionals: Option<FunctionalsConfig>,
    #[serde(default)]
    pub report: Option<ReportConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Cross-field checks: each command needs its own block(s); every
    /// expression must parse before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "command `{}` requires the {what}",
                    self.command.name()
                )))
            }
        };
        match self.command {
            Command::GenMetric => {
                need(self.grid.is_some(), "[grid] block")?;
                need(self.ansatz.is_some(), "[ansatz] block")?;
            }
            Command::Flow => {
                need(self.grid.is_some(), "[grid] block")?;
                need(self.flow.is_some(), "[flow] block")?;
            }
            Command::Spde => {
                need(self.grid.is_some(), "[grid] block")?;
                need(self.spde.is_some(), "[spde] block")?;
            }
            Command::Functionals => {
                need(self.grid.is_some(), "[grid] block")?;
                need(self.functionals.is_some(), "[functionals] block")?;
            }
            Command::Report => {
                need(self.report.is_some(), "[report] block")?;
                if self.report.as_ref().is_some_and(|r| r.runs.is_empty()) {
                    return Err(Error::Config("report.runs must list at least one run".into()));
                }
            }
        }
        if let Some(a) = &self.ansatz {
            parse_expr(&a.phi, "ansatz.phi")?;
            parse_expr(&a.h4_0, "ansatz.h4_0")?;
            for e in a.n1.iter().chain(&a.n2) {
                parse_expr(e, "ansatz.n")?;
            }
            parse_expr(&a.psi_boundary, "ansatz.psi_boundary")?;
        }
        if let Some(m) = &self.metric {
            for (src, what) in [
                (&m.g11, "metric.g11"),
                (&m.g12, "metric.g12"),
                (&m.g22, "metric.g22"),
                (&m.h33, "metric.h33"),
                (&m.h34, "metric.h34"),
                (&m.h44, "metric.h44"),
            ] {
                parse_expr(src, what)?;
            }
            for e in m.n1.iter().chain(&m.n2) {
                parse_expr(e, "metric.n")?;
            }
        }
        if let Some(f) = &self.flow {
            parse_expr(&f.f0, "flow.f0")?;
            if !(f.dchi > 0.0) || f.steps == 0 || f.snapshot_every == 0 {
                return Err(Error::Config(
                    "flow needs positive dchi, steps >= 1, snapshot_every >= 1".into(),
                ));
            }
            if !(f.tau0 > 0.0) {
                return Err(Error::Config("flow.tau0 must be positive".into()));
            }
            if !(f.cfl > 0.0 && f.cfl < 1.0) {
                return Err(Error::Config("flow.cfl must lie in (0, 1)".into()));
            }
        }
        if let Some(s) = &self.spde {
            s.graph.validate()?;
            parse_expr(&s.initial, "spde.initial")?;
            if let Some(l) = &s.noise.l {
                parse_expr(l, "spde.noise.l")?;
            }
            s.active_indices()?;
            if !(s.dchi > 0.0) || s.steps == 0 || s.paths == 0 {
                return Err(Error::Config(
                    "spde needs positive dchi, steps >= 1, paths >= 1".into(),
                ));
            }
        }
        if let Some(f) = &self.functionals {
            parse_expr(&f.f, "functionals.f")?;
            if !(f.tau > 0.0) {
                return Err(Error::Config("functionals.tau must be positive".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPDE_TOML: &str = r#"
command = "spde"
seed = 7
output_dir = "runs/demo"

[grid]
x1 = { min = 0.0, max = 1.0, count = 21, boundary = "dirichlet" }
x2 = { min = 0.0, max = 1.0, count = 3, boundary = "dirichlet" }
t = { min = 0.0, max = 1.0, count = 3, boundary = "dirichlet" }
y4 = { min = 0.0, max = 1.0, count = 3, boundary = "dirichlet" }

[spde]
dchi = 0.002
steps = 50
paths = 8
active_axes = ["x1"]
initial = "0.7*pow(cos(pi*(x1-0.5)/0.4), 2)"

[spde.graph]
variant = "heaviside_soc"
kappa = 0.5
c_u = 0.3

[spde.noise]
k = 2
rule = { rule = "power_law", p = 1.5 }
shift = 0.3
"#;

    #[test]
    fn sample_config_round_trips_through_the_schema() {
        let cfg = RunConfig::from_toml(SPDE_TOML).unwrap();
        assert_eq!(cfg.command, Command::Spde);
        assert_eq!(cfg.seed, 7);
        let spde = cfg.spde.as_ref().unwrap();
        assert_eq!(spde.active_indices().unwrap(), vec![0]);
        assert_eq!(spde.noise.k, 2);
        assert_eq!(spde.noise.shift, 0.3);
        assert!(matches!(
            spde.graph,
            MonotoneGraph::HeavisideSoc { kappa, c_u } if kappa == 0.5 && c_u == 0.3
        ));
        let chart = cfg.grid.as_ref().unwrap().to_chart().unwrap();
        assert_eq!(chart.dims(), [21, 3, 3, 3]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SPDE_TOML.replace("seed = 7", "seed = 7\nturbo = true");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = SPDE_TOML.replace("dchi = 0.002", "dchi = 0.002\nwarp = 9");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn missing_required_blocks_are_rejected() {
        let bad = SPDE_TOML.replace("command = \"spde\"", "command = \"flow\"");
        let err = RunConfig::from_toml(&bad).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("[flow]")));
    }

    #[test]
    fn bad_embedded_expressions_fail_validation() {
        let bad = SPDE_TOML.replace(
            "initial = \"0.7*pow(cos(pi*(x1-0.5)/0.4), 2)\"",
            "initial = \"sqrt(x1)\"",
        );
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn metric_defaults_build_the_flat_product() {
        let cfg = RunConfig::from_toml(SPDE_TOML).unwrap();
        let chart = cfg.grid.as_ref().unwrap().to_chart().unwrap();
        let mc: MetricConfig = toml::from_str("").unwrap();
        let m = mc.build(&chart).unwrap();
        let idx = [10, 1, 1, 1];
        assert_eq!(m.g_at(idx), [1.0, 0.0, 1.0]);
        assert_eq!(m.h_at(idx), [1.0, 0.0, 1.0]);
        assert_eq!(m.n_at(idx), [[0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn expression_fields_sample_the_chart_points() {
        let cfg = RunConfig::from_toml(SPDE_TOML).unwrap();
        let chart = cfg.grid.as_ref().unwrap().to_chart().unwrap();
        let f = eval_field("x1 - 0.5", "test", &chart).unwrap();
        assert_eq!(f.at([0, 0, 0, 0]), -0.5);
        assert_eq!(f.at([20, 0, 0, 0]), 0.5);
        assert!(eval_field("x9", "test", &chart).is_err());
    }
}
