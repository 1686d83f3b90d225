//! CLI orchestration: run-configuration parsing, δ-sweeps through the
//! analytic and dense engines, CALR classification reports, and emission of
//! machine-readable CSV/JSON results.
//!
//! Exit-code contract: 0 = pass, 1 = numerical tolerance violation (or a
//! runtime failure), 2 = configuration error. Identical configurations
//! produce byte-identical outputs: no RNG, stable ordering, shortest
//! round-trip float formatting.

use crate::annulus::{
    self, AnnulusConfig, CalrEvidence, CalrVerdict, ClassifierThresholds, CoeffSequence, Verdict,
};
use crate::geometry::{BoundaryCurve, CurveKind, Point, ProblemGeometry, Vec2};
use crate::npsystem::{
    assemble_block_operators, build_symmetrization, solve_perturbed, BlockOperatorSet, DensityPair,
    SolutionField, SymmetrizedSpectrum,
};
use crate::sources::{self, SourceSpec};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("tolerance violation: {0}")]
    Tolerance(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Tolerance(_) | AppError::Runtime(_) => 1,
        }
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Config(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub source: SourceConfig,
    #[serde(default)]
    pub delta: DeltaGrid,
    #[serde(default)]
    pub engine: Option<Engine>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Compute the volume-quadrature energy per sweep point (dense engine).
    #[serde(default)]
    pub direct_energy: bool,
    /// Mode truncation for the analytic engine.
    #[serde(default = "default_n_modes")]
    pub n_modes: usize,
    #[serde(default)]
    pub field: Option<FieldGrid>,
}

fn default_n_modes() -> usize {
    256
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GeometryConfig {
    Annulus {
        annulus: AnnulusGeometry,
    },
    General {
        inner: CurveConfig,
        outer: CurveConfig,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnulusGeometry {
    pub r_i: f64,
    pub r_e: f64,
    #[serde(default = "default_n_nodes")]
    pub n_nodes: usize,
}

fn default_n_nodes() -> usize {
    256
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CurveConfig {
    Circle {
        #[serde(default)]
        center: [f64; 2],
        radius: f64,
        #[serde(default = "default_n_nodes")]
        n_nodes: usize,
    },
    Ellipse {
        #[serde(default)]
        center: [f64; 2],
        a: f64,
        b: f64,
        #[serde(default = "default_n_nodes")]
        n_nodes: usize,
    },
    PerturbedCircle {
        #[serde(default)]
        center: [f64; 2],
        r0: f64,
        eps: f64,
        k: u32,
        #[serde(default = "default_n_nodes")]
        n_nodes: usize,
    },
}

impl CurveConfig {
    fn build(&self) -> Result<(BoundaryCurve, usize), AppError> {
        match *self {
            CurveConfig::Circle {
                center,
                radius,
                n_nodes,
            } => Ok((
                BoundaryCurve::circle(Point::new(center[0], center[1]), radius)
                    .map_err(config_err)?,
                n_nodes,
            )),
            CurveConfig::Ellipse {
                center,
                a,
                b,
                n_nodes,
            } => Ok((
                BoundaryCurve::ellipse(Point::new(center[0], center[1]), a, b)
                    .map_err(config_err)?,
                n_nodes,
            )),
            CurveConfig::PerturbedCircle {
                center,
                r0,
                eps,
                k,
                n_nodes,
            } => Ok((
                BoundaryCurve::perturbed_circle(Point::new(center[0], center[1]), r0, eps, k)
                    .map_err(config_err)?,
                n_nodes,
            )),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    Dipole {
        position: [f64; 2],
        vector: [f64; 2],
    },
    Quadrupole {
        position: [f64; 2],
        matrix: [[f64; 2]; 2],
    },
    ChargeCollection {
        charges: Vec<ChargeEntry>,
    },
    FourierCoeffs {
        coeffs: Vec<CoeffEntry>,
        n_max: Option<usize>,
    },
    ShellBump {
        coeffs: Vec<CoeffEntry>,
        r1: f64,
        r2: f64,
    },
    /// The lacunary bounded-energy sequence g_e^n = n ρ^{n/2} at n = 2^j.
    Counterexample {
        j_max: usize,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargeEntry {
    pub position: [f64; 2],
    pub charge: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffEntry {
    pub n: i32,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaGrid {
    pub start: f64,
    pub stop: f64,
    pub points_per_decade: usize,
}

impl Default for DeltaGrid {
    fn default() -> Self {
        Self {
            start: 1e-2,
            stop: 1e-10,
            points_per_decade: 5,
        }
    }
}

impl DeltaGrid {
    /// Strictly decreasing log-spaced values from start down to stop.
    pub fn values(&self) -> Result<Vec<f64>, AppError> {
        if !(self.start > 0.0 && self.stop > 0.0 && self.start > self.stop) {
            return Err(AppError::Config(format!(
                "delta grid must satisfy start > stop > 0, got start={}, stop={}",
                self.start, self.stop
            )));
        }
        if self.points_per_decade == 0 {
            return Err(AppError::Config(
                "points_per_decade must be positive".into(),
            ));
        }
        let decades = (self.start / self.stop).log10();
        let steps = (decades * self.points_per_decade as f64).round() as usize;
        let mut out = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            out.push(self.start * 10f64.powf(-(k as f64) / self.points_per_decade as f64));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Analytic,
    Bem,
    Both,
}

impl std::str::FromStr for Engine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(Engine::Analytic),
            "bem" => Ok(Engine::Bem),
            "both" => Ok(Engine::Both),
            other => Err(format!("unknown engine {other:?} (analytic|bem|both)")),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// |λ| containment slack beyond 1/2.
    pub containment_slack: f64,
    /// absolute eigenvalue match tolerance against the analytic spectrum.
    pub spectrum_match: f64,
    /// relative cross-engine energy agreement.
    pub cross_engine_energy: f64,
    /// relative cross-engine field agreement (sup columns).
    pub cross_engine_field: f64,
    /// dense engine is not solved below this loss.
    pub bem_delta_min: f64,
    pub gp_product: f64,
    pub weak_max_q: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            containment_slack: 1e-3,
            spectrum_match: 1e-6,
            cross_engine_energy: 0.01,
            cross_engine_field: 0.02,
            bem_delta_min: 1e-6,
            gp_product: 1e3,
            weak_max_q: 1e3,
        }
    }
}

impl Tolerances {
    fn classifier(&self) -> ClassifierThresholds {
        ClassifierThresholds {
            gp_product: self.gp_product,
            weak_max_q: self.weak_max_q,
            ..ClassifierThresholds::default()
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldGrid {
    pub delta: f64,
    #[serde(default = "default_field_radii")]
    pub n_radii: usize,
    #[serde(default = "default_field_angles")]
    pub n_angles: usize,
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
}

fn default_field_radii() -> usize {
    48
}

fn default_field_angles() -> usize {
    96
}

// ---------------------------------------------------------------------------
// resolved problem
// ---------------------------------------------------------------------------

pub struct Problem {
    pub geometry: ProblemGeometry,
    pub annulus: Option<AnnulusConfig>,
    pub source: SourceSpec,
    pub engine: Engine,
    pub config: RunConfig,
}

pub fn load_config(path: &Path) -> Result<RunConfig, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(config_err)
}

fn annulus_of(geometry: &ProblemGeometry) -> Option<AnnulusConfig> {
    let radius_of = |c: &BoundaryCurve| match c.kind() {
        CurveKind::Circle { center, radius } if center.x == 0.0 && center.y == 0.0 => Some(radius),
        _ => None,
    };
    let r_i = radius_of(&geometry.inner_curve)?;
    let r_e = radius_of(&geometry.outer_curve)?;
    AnnulusConfig::new(r_i, r_e).ok()
}

pub fn resolve(config: RunConfig, engine_override: Option<Engine>) -> Result<Problem, AppError> {
    let geometry = match &config.geometry {
        GeometryConfig::Annulus { annulus } => {
            ProblemGeometry::annulus(annulus.r_i, annulus.r_e, annulus.n_nodes)
                .map_err(config_err)?
        }
        GeometryConfig::General { inner, outer } => {
            let (ci, ni) = inner.build()?;
            let (ce, ne) = outer.build()?;
            ProblemGeometry::new(ci, ce, ni, ne).map_err(config_err)?
        }
    };
    let annulus = annulus_of(&geometry);
    let engine = engine_override
        .or(config.engine)
        .unwrap_or(if annulus.is_some() {
            Engine::Analytic
        } else {
            Engine::Bem
        });
    if engine != Engine::Bem && annulus.is_none() {
        return Err(AppError::Config(
            "engine=analytic (or both) requires annulus geometry".into(),
        ));
    }
    let source = build_source(&config.source, annulus.as_ref())?;
    Ok(Problem {
        geometry,
        annulus,
        source,
        engine,
        config,
    })
}

fn coeffs_from_entries(entries: &[CoeffEntry], n_max: usize) -> Result<CoeffSequence, AppError> {
    let max_given = entries
        .iter()
        .map(|e| e.n.unsigned_abs() as usize)
        .max()
        .unwrap_or(1);
    let mut coeffs = CoeffSequence::zeros(n_max.max(max_given));
    for e in entries {
        if e.n == 0 {
            return Err(AppError::Config(
                "coefficient index n = 0 carries no data".into(),
            ));
        }
        coeffs.set(e.n, Complex64::new(e.re, e.im));
    }
    Ok(coeffs)
}

fn build_source(
    config: &SourceConfig,
    annulus: Option<&AnnulusConfig>,
) -> Result<SourceSpec, AppError> {
    match config {
        SourceConfig::Dipole { position, vector } => Ok(SourceSpec::dipole(
            Point::new(position[0], position[1]),
            Vec2::new(vector[0], vector[1]),
        )),
        SourceConfig::Quadrupole { position, matrix } => Ok(SourceSpec::quadrupole(
            Point::new(position[0], position[1]),
            *matrix,
        )),
        SourceConfig::ChargeCollection { charges } => SourceSpec::charges(
            charges
                .iter()
                .map(|c| (Point::new(c.position[0], c.position[1]), c.charge))
                .collect(),
        )
        .map_err(config_err),
        SourceConfig::FourierCoeffs { coeffs, n_max } => {
            let ann = annulus.ok_or_else(|| {
                AppError::Config("fourier-coeffs sources require annulus geometry".into())
            })?;
            Ok(SourceSpec::fourier(
                coeffs_from_entries(coeffs, n_max.unwrap_or(default_n_modes()))?,
                ann.r_e,
            ))
        }
        SourceConfig::ShellBump { coeffs, r1, r2 } => {
            let ann = annulus.ok_or_else(|| {
                AppError::Config("shell-bump sources require annulus geometry".into())
            })?;
            SourceSpec::shell_bump(
                coeffs_from_entries(coeffs, default_n_modes())?,
                *r1,
                *r2,
                ann,
            )
            .map_err(config_err)
        }
        SourceConfig::Counterexample { j_max } => {
            let ann = annulus.ok_or_else(|| {
                AppError::Config("the counterexample source requires annulus geometry".into())
            })?;
            let (coeffs, _) = annulus::counterexample(ann, *j_max).map_err(config_err)?;
            Ok(SourceSpec::fourier(coeffs, ann.r_e))
        }
    }
}

// ---------------------------------------------------------------------------
// output helpers
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal in scientific form; deterministic across runs.
fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, AppError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, AppError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    write_file(dir, name, &(text + "\n"))
}

// ---------------------------------------------------------------------------
// spectrum command
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct SpectrumReport {
    pub n_eigenvalues: usize,
    pub max_abs: f64,
    pub containment_ok: bool,
    pub analytic_match_ok: Option<bool>,
    pub max_match_error: Option<f64>,
    pub kernel_dim_s: usize,
    pub calderon_residual: f64,
    pub intertwining_residual: f64,
    /// full-space spectrum range of −S (diagnostic, indefinite on constants)
    pub neg_s_full_min: f64,
    pub neg_s_full_max: f64,
}

/// Writes `spectrum.csv`; exit 0 iff Kellogg containment (and, on the
/// annulus, the analytic ±ρⁿ/2 match) hold.
pub fn cmd_spectrum(problem: &Problem, out: &Path) -> Result<SpectrumReport, AppError> {
    let ops = assemble_block_operators(&problem.geometry).map_err(runtime_err)?;
    let spec = build_symmetrization(&ops).map_err(runtime_err)?;
    let tol = &problem.config.tolerances;

    let max_abs = spec.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    let containment_ok = max_abs <= 0.5 + tol.containment_slack;

    let mut csv = String::new();
    let (analytic_match_ok, max_match_error) = if let Some(ann) = &problem.annulus {
        // value-sorted pairing of the top 32 eigenvalues with ±ρⁿ/2, n ≤ 8
        let n_cmp = 32.min(spec.eigenvalues.len());
        let mut got: Vec<f64> = spec.eigenvalues[..n_cmp].to_vec();
        got.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut want = annulus::analytic_a_eigenvalues(ann, n_cmp / 4);
        want.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut max_err = 0.0_f64;
        csv.push_str("index,lambda,analytic,abs_error\n");
        for (i, (g, w)) in got.iter().zip(want.iter()).enumerate() {
            let err = (g - w).abs();
            max_err = max_err.max(err);
            let _ = writeln!(csv, "{i},{},{},{}", fmt_f64(*g), fmt_f64(*w), fmt_f64(err));
        }
        for (i, l) in spec.eigenvalues.iter().enumerate().skip(n_cmp) {
            let _ = writeln!(csv, "{i},{},,", fmt_f64(*l));
        }
        (Some(max_err <= tol.spectrum_match), Some(max_err))
    } else {
        csv.push_str("index,lambda\n");
        for (i, l) in spec.eigenvalues.iter().enumerate() {
            let _ = writeln!(csv, "{i},{}", fmt_f64(*l));
        }
        (None, None)
    };
    write_file(out, "spectrum.csv", &csv)?;

    let neg_s_full = ops.neg_s_full_spectrum();
    let report = SpectrumReport {
        n_eigenvalues: spec.eigenvalues.len(),
        max_abs,
        containment_ok,
        analytic_match_ok,
        max_match_error,
        kernel_dim_s: spec.kernel_dim_s,
        calderon_residual: crate::npsystem::calderon_residual(&ops),
        intertwining_residual: spec.intertwining_residual(),
        neg_s_full_min: neg_s_full.last().copied().unwrap_or(f64::NAN),
        neg_s_full_max: neg_s_full.first().copied().unwrap_or(f64::NAN),
    };
    write_json(out, "spectrum.json", &report)?;
    if !containment_ok {
        return Err(AppError::Tolerance(format!(
            "eigenvalue containment violated: max |lambda| = {max_abs}"
        )));
    }
    if analytic_match_ok == Some(false) {
        return Err(AppError::Tolerance(format!(
            "analytic spectrum match violated: max error = {}",
            max_match_error.unwrap_or(f64::NAN)
        )));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep command
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    pub delta: f64,
    pub re_z: f64,
    pub im_z: f64,
    pub e_spectral: Option<f64>,
    pub e_direct: Option<f64>,
    /// sup_{|x|=r_*} |V_δ − F| (the invisibility gap column).
    pub sup_v_rstar: Option<f64>,
    /// sup_{|x|=1.01a} |V_δ|.
    pub sup_v_a: Option<f64>,
    /// sup_{|x|=2a} |V_δ|.
    pub sup_v_2a: Option<f64>,
    pub cond_est: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub slope: f64,
    pub r_squared: f64,
}

#[derive(Debug, Serialize)]
pub struct CrossValidation {
    pub max_rel_energy_gap: f64,
    pub max_rel_field_gap: f64,
    pub compared_points: usize,
}

#[derive(Debug, Serialize)]
pub struct SweepOutput {
    pub engine: Engine,
    pub r_star: Option<f64>,
    pub bound_radius: Option<f64>,
    pub records: Vec<SweepRecord>,
    pub bem_records: Option<Vec<SweepRecord>>,
    pub fitted_exponent: Option<FitReport>,
    pub cross_validation: Option<CrossValidation>,
}

const SUP_SAMPLES: usize = 128;

/// sup of |Σ_n c_n e^{inθ} (+ F)| over equispaced angles at radius r.
fn sup_on_circle(
    r: f64,
    coeffs_fn: impl Fn(i32) -> Complex64,
    n_max: usize,
    f_at: Option<&dyn Fn(Point) -> Complex64>,
) -> f64 {
    let mut sup = 0.0_f64;
    for s in 0..SUP_SAMPLES {
        let theta = 2.0 * std::f64::consts::PI * s as f64 / SUP_SAMPLES as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for n_abs in 1..=n_max {
            for sign in [1_i32, -1] {
                let n = sign * n_abs as i32;
                let c = coeffs_fn(n);
                if c.norm() > 0.0 {
                    acc += c * Complex64::from_polar(1.0, n as f64 * theta);
                }
            }
        }
        if let Some(f) = f_at {
            acc += f(Point::new(r * theta.cos(), r * theta.sin()));
        }
        sup = sup.max(acc.norm());
    }
    sup
}

fn analytic_record(
    problem: &Problem,
    ann: &AnnulusConfig,
    coeffs: &CoeffSequence,
    delta: f64,
) -> SweepRecord {
    let z = annulus::z_delta(delta);
    let energy = annulus::energy_series(delta, coeffs, ann).ok();
    let n_max = coeffs.n_max();
    let f_value = |x: Point| {
        sources::newtonian_potential(&problem.source, x)
            .map(|(v, _)| v)
            .unwrap_or(Complex64::new(0.0, 0.0))
    };
    let gap_rstar = sup_on_circle(
        ann.r_star,
        |n| annulus::exterior_layer_coefficient(n, delta, coeffs.get(n), ann, ann.r_star),
        n_max,
        None,
    );
    let r_a = 1.01 * ann.bound_radius;
    let sup_a = sup_on_circle(
        r_a,
        |n| annulus::exterior_layer_coefficient(n, delta, coeffs.get(n), ann, r_a),
        n_max,
        Some(&f_value),
    );
    let r_2a = 2.0 * ann.bound_radius;
    let sup_2a = sup_on_circle(
        r_2a,
        |n| annulus::exterior_layer_coefficient(n, delta, coeffs.get(n), ann, r_2a),
        n_max,
        Some(&f_value),
    );
    // mode-amplification proxy for the conditioning of the per-mode solves
    let cond = (1..=n_max as i32)
        .map(|n| {
            let rho2n = ann.rho_pow(2.0 * n as f64);
            (2.0 * (2.0 * z.norm() + 1.0)) / (4.0 * z * z - rho2n).norm()
        })
        .fold(1.0_f64, f64::max);
    SweepRecord {
        delta,
        re_z: z.re,
        im_z: z.im,
        e_spectral: energy.as_ref().map(|e| e.exact),
        e_direct: None,
        sup_v_rstar: Some(gap_rstar),
        sup_v_a: Some(sup_a),
        sup_v_2a: Some(sup_2a),
        cond_est: Some(cond),
    }
}

fn bem_total_energy(
    ops: &BlockOperatorSet,
    spec: &SymmetrizedSpectrum,
    problem: &Problem,
    phi: &DensityPair,
    delta: f64,
) -> Result<f64, AppError> {
    crate::npsystem::shell_energy_total(ops, spec, &problem.source, phi, delta).map_err(runtime_err)
}

fn bem_record(
    problem: &Problem,
    ops: &BlockOperatorSet,
    spec: &SymmetrizedSpectrum,
    g: &DensityPair,
    delta: f64,
) -> Result<SweepRecord, AppError> {
    let z = annulus::z_delta(delta);
    let sol = solve_perturbed(ops, delta, g).map_err(runtime_err)?;
    let e_total = bem_total_energy(ops, spec, problem, &sol.phi, delta)?;
    let e_direct = if problem.config.direct_energy {
        Some(
            crate::npsystem::shell_energy_direct(
                &problem.geometry,
                &sol.phi,
                Some(&problem.source),
                delta,
            )
            .map_err(runtime_err)?
            .value,
        )
    } else {
        None
    };
    let (sup_rstar, sup_a, sup_2a) = if let Some(ann) = &problem.annulus {
        let layers = SolutionField::new(&problem.geometry, &sol.phi, None);
        let sup_at = |r: f64, with_f: bool| -> Result<f64, AppError> {
            let mut sup = 0.0_f64;
            for s in 0..SUP_SAMPLES {
                let theta = 2.0 * std::f64::consts::PI * s as f64 / SUP_SAMPLES as f64;
                let x = Point::new(r * theta.cos(), r * theta.sin());
                let mut v = layers.value(x).map_err(runtime_err)?;
                if with_f {
                    v += sources::newtonian_potential(&problem.source, x)
                        .map_err(runtime_err)?
                        .0;
                }
                sup = sup.max(v.norm());
            }
            Ok(sup)
        };
        (
            Some(sup_at(ann.r_star, false)?),
            Some(sup_at(1.01 * ann.bound_radius, true)?),
            Some(sup_at(2.0 * ann.bound_radius, true)?),
        )
    } else {
        (None, None, None)
    };
    Ok(SweepRecord {
        delta,
        re_z: z.re,
        im_z: z.im,
        e_spectral: Some(e_total),
        e_direct,
        sup_v_rstar: sup_rstar,
        sup_v_a: sup_a,
        sup_v_2a: sup_2a,
        cond_est: Some(sol.condition_estimate),
    })
}

fn sweep_records_analytic(problem: &Problem, deltas: &[f64]) -> Result<Vec<SweepRecord>, AppError> {
    let ann = problem
        .annulus
        .as_ref()
        .ok_or_else(|| AppError::Config("analytic engine requires annulus geometry".into()))?;
    let coeffs = sources::fourier_coeffs(&problem.source, ann.r_e, problem.config.n_modes)
        .map_err(config_err)?;
    Ok(deltas
        .iter()
        .map(|&d| analytic_record(problem, ann, &coeffs, d))
        .collect())
}

fn sweep_records_bem(problem: &Problem, deltas: &[f64]) -> Result<Vec<SweepRecord>, AppError> {
    let ops = assemble_block_operators(&problem.geometry).map_err(runtime_err)?;
    let spec = build_symmetrization(&ops).map_err(runtime_err)?;
    let bd = sources::boundary_data(&problem.source, &problem.geometry).map_err(config_err)?;
    let g = DensityPair {
        inner: bd.g_inner,
        outer: bd.g_outer,
    };
    let run_one = |&delta: &f64| -> SweepRecord {
        match bem_record(problem, &ops, &spec, &g, delta) {
            Ok(rec) => rec,
            Err(_) => {
                // per-δ solver failures leave null fields; the run continues
                let z = annulus::z_delta(delta);
                SweepRecord {
                    delta,
                    re_z: z.re,
                    im_z: z.im,
                    e_spectral: None,
                    e_direct: None,
                    sup_v_rstar: None,
                    sup_v_a: None,
                    sup_v_2a: None,
                    cond_est: None,
                }
            }
        }
    };
    let workers = problem.config.workers.unwrap_or(1).max(1);
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(runtime_err)?;
        use rayon::prelude::*;
        Ok(pool.install(|| deltas.par_iter().map(run_one).collect()))
    } else {
        Ok(deltas.iter().map(run_one).collect())
    }
}

fn fit_from_records(records: &[SweepRecord]) -> Option<FitReport> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.e_spectral.map(|e| (r.delta, e)))
        .filter(|&(_, e)| e > 0.0)
        .collect();
    if pts.len() < 6 {
        return None;
    }
    let (d, e): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    annulus::blowup_exponent_fit(&d, &e)
        .ok()
        .map(|(slope, r_squared)| FitReport { slope, r_squared })
}

fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut csv =
        String::from("delta,re_z,im_z,e_spectral,e_direct,sup_v_rstar,sup_v_a,cond_est\n");
    for r in records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(r.delta),
            fmt_f64(r.re_z),
            fmt_f64(r.im_z),
            fmt_opt(r.e_spectral),
            fmt_opt(r.e_direct),
            fmt_opt(r.sup_v_rstar),
            fmt_opt(r.sup_v_a),
            fmt_opt(r.cond_est),
        );
    }
    csv
}

/// Runs the δ grid through the selected engine(s), writes `sweep.csv` and
/// `sweep.json`. With engine=both every shared scalar must agree within the
/// declared tolerances or the command exits nonzero.
pub fn cmd_sweep(problem: &Problem, out: &Path) -> Result<SweepOutput, AppError> {
    let deltas = problem.config.delta.values()?;
    let tol = &problem.config.tolerances;
    let (records, bem_records) = match problem.engine {
        Engine::Analytic => (sweep_records_analytic(problem, &deltas)?, None),
        Engine::Bem => {
            let bem_deltas: Vec<f64> = deltas
                .iter()
                .copied()
                .filter(|&d| d >= tol.bem_delta_min)
                .collect();
            (sweep_records_bem(problem, &bem_deltas)?, None)
        }
        Engine::Both => {
            let analytic = sweep_records_analytic(problem, &deltas)?;
            let bem_deltas: Vec<f64> = deltas
                .iter()
                .copied()
                .filter(|&d| d >= tol.bem_delta_min)
                .collect();
            let bem = sweep_records_bem(problem, &bem_deltas)?;
            (analytic, Some(bem))
        }
    };

    let cross_validation = match (&problem.engine, &bem_records) {
        (Engine::Both, Some(bem)) => {
            let mut max_e = 0.0_f64;
            let mut max_f = 0.0_f64;
            let mut compared = 0usize;
            for b in bem {
                let Some(a) = records
                    .iter()
                    .find(|r| (r.delta - b.delta).abs() < 1e-15 * b.delta)
                else {
                    continue;
                };
                if let (Some(ea), Some(eb)) = (a.e_spectral, b.e_spectral) {
                    max_e = max_e.max((ea - eb).abs() / ea.abs().max(f64::MIN_POSITIVE));
                }
                for (fa, fb) in [
                    (a.sup_v_rstar, b.sup_v_rstar),
                    (a.sup_v_a, b.sup_v_a),
                    (a.sup_v_2a, b.sup_v_2a),
                ] {
                    if let (Some(x), Some(y)) = (fa, fb) {
                        max_f = max_f.max((x - y).abs() / x.abs().max(1e-12));
                    }
                }
                compared += 1;
            }
            Some(CrossValidation {
                max_rel_energy_gap: max_e,
                max_rel_field_gap: max_f,
                compared_points: compared,
            })
        }
        _ => None,
    };

    let output = SweepOutput {
        engine: problem.engine,
        r_star: problem.annulus.as_ref().map(|a| a.r_star),
        bound_radius: problem.annulus.as_ref().map(|a| a.bound_radius),
        fitted_exponent: fit_from_records(&records),
        records,
        bem_records,
        cross_validation,
    };
    write_file(out, "sweep.csv", &sweep_csv(&output.records))?;
    write_json(out, "sweep.json", &output)?;

    if let Some(cv) = &output.cross_validation {
        if cv.max_rel_energy_gap > tol.cross_engine_energy {
            return Err(AppError::Tolerance(format!(
                "cross-engine energy gap {} exceeds {}",
                cv.max_rel_energy_gap, tol.cross_engine_energy
            )));
        }
        if cv.max_rel_field_gap > tol.cross_engine_field {
            return Err(AppError::Tolerance(format!(
                "cross-engine field gap {} exceeds {}",
                cv.max_rel_field_gap, tol.cross_engine_field
            )));
        }
    }
    Ok(output)
}

// ---------------------------------------------------------------------------
// classify command
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct VerdictOutput {
    pub verdict: Verdict,
    pub r_star: Option<f64>,
    pub bound_radius: Option<f64>,
    pub evidence: CalrEvidence,
}

/// Writes `verdict.json`. Annulus geometry uses the coefficient test;
/// general geometry falls back to the sweep exponent plus kernel_component.
/// Inconclusive is a success exit.
pub fn cmd_classify(problem: &Problem, out: &Path) -> Result<VerdictOutput, AppError> {
    let tol = &problem.config.tolerances;
    let mut verdict = if let Some(ann) = &problem.annulus {
        let coeffs = sources::fourier_coeffs(&problem.source, ann.r_e, problem.config.n_modes)
            .map_err(config_err)?;
        annulus::classify(&coeffs, ann, &tol.classifier()).map_err(runtime_err)?
    } else {
        CalrVerdict {
            verdict: Verdict::Inconclusive,
            evidence: CalrEvidence {
                witnesses: Vec::new(),
                q_ratio: f64::NAN,
                q_ratio_band: (f64::NAN, f64::NAN),
                max_ln_q: f64::NEG_INFINITY,
                q_trace: Vec::new(),
                blowup_exponent: None,
                kernel_component: None,
                realizability: None,
            },
        }
    };
    verdict.evidence.realizability = problem.source.realizability_note();

    // blow-up exponent evidence from the energy series over the config grid
    if let Some(ann) = &problem.annulus {
        let coeffs = sources::fourier_coeffs(&problem.source, ann.r_e, problem.config.n_modes)
            .map_err(config_err)?;
        let deltas = problem.config.delta.values()?;
        let energies: Vec<f64> = deltas
            .iter()
            .filter_map(|&d| {
                annulus::energy_series(d, &coeffs, ann)
                    .ok()
                    .map(|e| e.exact)
            })
            .collect();
        if energies.len() == deltas.len() {
            if let Ok((slope, _)) = annulus::blowup_exponent_fit(&deltas, &energies) {
                verdict.evidence.blowup_exponent = Some(slope);
            }
        }
    }

    // kernel_component evidence whenever the dense operators are in play
    if problem.engine != Engine::Analytic || problem.annulus.is_none() {
        let ops = assemble_block_operators(&problem.geometry).map_err(runtime_err)?;
        let spec = build_symmetrization(&ops).map_err(runtime_err)?;
        let bd = sources::boundary_data(&problem.source, &problem.geometry).map_err(config_err)?;
        let g = DensityPair {
            inner: bd.g_inner,
            outer: bd.g_outer,
        };
        verdict.evidence.kernel_component = Some(spec.kernel_component(&g));
        if problem.annulus.is_none() {
            // sweep-based heuristic for general geometry
            let deltas: Vec<f64> = problem
                .config
                .delta
                .values()?
                .into_iter()
                .filter(|&d| d >= tol.bem_delta_min)
                .collect();
            let records = sweep_records_bem(problem, &deltas)?;
            if let Some(fit) = fit_from_records(&records) {
                verdict.evidence.blowup_exponent = Some(fit.slope);
                verdict.verdict = if fit.slope > 0.05 {
                    Verdict::Calr
                } else if fit.slope.abs() <= 0.02 {
                    Verdict::NoCalr
                } else {
                    Verdict::Inconclusive
                };
            }
        }
    }

    let output = VerdictOutput {
        verdict: verdict.verdict,
        r_star: problem.annulus.as_ref().map(|a| a.r_star),
        bound_radius: problem.annulus.as_ref().map(|a| a.bound_radius),
        evidence: verdict.evidence,
    };
    write_json(out, "verdict.json", &output)?;
    Ok(output)
}

// ---------------------------------------------------------------------------
// field command
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct FieldReport {
    pub delta: f64,
    pub energy: Option<f64>,
    pub points_written: usize,
    pub points_skipped: usize,
}

/// Writes `field.csv` on a polar grid: x, y, Re V, Im V, |∇V| and the
/// power-normalized |V|/√E_δ column. Points on the interfaces are skipped
/// (their count is reported) and the run still exits 0.
pub fn cmd_field(problem: &Problem, out: &Path) -> Result<FieldReport, AppError> {
    let grid =
        problem.config.field.clone().ok_or_else(|| {
            AppError::Config("field command needs a `field` config section".into())
        })?;
    let delta = grid.delta;
    if delta <= 0.0 {
        return Err(AppError::Config("field.delta must be positive".into()));
    }

    // radii span the core, shell and exterior unless overridden
    let (r_lo, r_hi) = match (&problem.annulus, grid.r_min, grid.r_max) {
        (_, Some(a), Some(b)) => (a, b),
        (Some(ann), _, _) => (0.2 * ann.r_i, 2.0 * ann.bound_radius),
        (None, _, _) => {
            let d = problem.geometry.outer_diameter();
            (0.05 * d, 1.5 * d)
        }
    };

    let analytic_parts;
    let bem_parts;
    match problem.engine {
        Engine::Analytic => {
            let ann = *problem.annulus.as_ref().unwrap();
            let coeffs = sources::fourier_coeffs(&problem.source, ann.r_e, problem.config.n_modes)
                .map_err(config_err)?;
            let energy = annulus::energy_series(delta, &coeffs, &ann)
                .ok()
                .map(|e| e.exact);
            analytic_parts = Some((ann, coeffs, energy));
            bem_parts = None;
        }
        _ => {
            let ops = assemble_block_operators(&problem.geometry).map_err(runtime_err)?;
            let spec = build_symmetrization(&ops).map_err(runtime_err)?;
            let bd =
                sources::boundary_data(&problem.source, &problem.geometry).map_err(config_err)?;
            let g = DensityPair {
                inner: bd.g_inner,
                outer: bd.g_outer,
            };
            let sol = solve_perturbed(&ops, delta, &g).map_err(runtime_err)?;
            let energy = Some(bem_total_energy(&ops, &spec, problem, &sol.phi, delta)?);
            analytic_parts = None;
            bem_parts = Some((sol.phi, energy));
        }
    }

    let energy = match (&analytic_parts, &bem_parts) {
        (Some((_, _, e)), _) => *e,
        (_, Some((_, e))) => *e,
        _ => None,
    };
    let field_struct = bem_parts
        .as_ref()
        .map(|(phi, _)| SolutionField::new(&problem.geometry, phi, Some(&problem.source)));

    let sqrt_e = energy.map(|e| e.max(0.0).sqrt()).unwrap_or(0.0);
    let mut csv = String::from("x,y,re_v,im_v,abs_grad_v,abs_v_normalized\n");
    let mut written = 0usize;
    let mut skipped = 0usize;
    for ir in 0..grid.n_radii {
        let r = r_lo + (r_hi - r_lo) * ir as f64 / (grid.n_radii.max(2) - 1) as f64;
        for ia in 0..grid.n_angles {
            let theta = 2.0 * std::f64::consts::PI * ia as f64 / grid.n_angles as f64;
            let x = Point::new(r * theta.cos(), r * theta.sin());
            let result: Option<(Complex64, [Complex64; 2])> = match (&analytic_parts, &field_struct)
            {
                (Some((ann, coeffs, _)), _) => {
                    annulus_field_with_grad(problem, ann, coeffs, delta, x).ok()
                }
                (_, Some(field)) => match (field.value(x), field.gradient(x)) {
                    (Ok(v), Ok(g)) => Some((v, g)),
                    _ => None,
                },
                _ => None,
            };
            match result {
                Some((v, grad)) => {
                    let abs_grad = (grad[0].norm_sqr() + grad[1].norm_sqr()).sqrt();
                    let normalized = if sqrt_e > 0.0 { v.norm() / sqrt_e } else { 0.0 };
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{}",
                        fmt_f64(x.x),
                        fmt_f64(x.y),
                        fmt_f64(v.re),
                        fmt_f64(v.im),
                        fmt_f64(abs_grad),
                        fmt_f64(normalized),
                    );
                    written += 1;
                }
                None => skipped += 1,
            }
        }
    }
    write_file(out, "field.csv", &csv)?;
    let report = FieldReport {
        delta,
        energy,
        points_written: written,
        points_skipped: skipped,
    };
    write_json(out, "field.json", &report)?;
    Ok(report)
}

fn annulus_field_with_grad(
    problem: &Problem,
    ann: &AnnulusConfig,
    coeffs: &CoeffSequence,
    delta: f64,
    x: Point,
) -> Result<(Complex64, [Complex64; 2]), AppError> {
    let (f, fg) = sources::newtonian_potential(&problem.source, x).map_err(runtime_err)?;
    let (lv, lg) = annulus_layer_with_grad(coeffs, ann, delta, x).map_err(runtime_err)?;
    Ok((f + lv, [fg[0] + lg[0], fg[1] + lg[1]]))
}

/// Layer value and Cartesian gradient of the annulus mode series.
fn annulus_layer_with_grad(
    coeffs: &CoeffSequence,
    ann: &AnnulusConfig,
    delta: f64,
    x: Point,
) -> Result<(Complex64, [Complex64; 2]), annulus::AnnulusError> {
    let r = (x.x * x.x + x.y * x.y).sqrt();
    let theta = x.y.atan2(x.x);
    let value = annulus::layer_series(x, delta, coeffs, ann)?;
    // radial/angular derivatives mode by mode
    let mut dr = Complex64::new(0.0, 0.0);
    let mut dtheta_over_r = Complex64::new(0.0, 0.0);
    for n_abs in 1..=coeffs.n_max() {
        for sign in [1_i32, -1] {
            let n = sign * n_abs as i32;
            let g_e = coeffs.get(n);
            if g_e.norm() == 0.0 {
                continue;
            }
            let g_i = -g_e * ann.rho_pow(n_abs as f64 - 1.0);
            let sol = annulus::mode_solve(n, delta, g_i, g_e, ann)?;
            let an = n_abs as f64;
            let phase = Complex64::from_polar(1.0, n as f64 * theta);
            let (vi, di) = single_layer_mode_value_deriv(ann.r_i, an, r);
            let (ve, de) = single_layer_mode_value_deriv(ann.r_e, an, r);
            let v = vi * sol.phi_i + ve * sol.phi_e;
            dr += (di * sol.phi_i + de * sol.phi_e) * phase;
            dtheta_over_r += v * phase * Complex64::new(0.0, n as f64) / r;
        }
    }
    let (ct, st) = (theta.cos(), theta.sin());
    let gx = dr * ct - dtheta_over_r * st;
    let gy = dr * st + dtheta_over_r * ct;
    Ok((value, [gx, gy]))
}

fn single_layer_mode_value_deriv(r0: f64, n_abs: f64, r: f64) -> (f64, f64) {
    if r < r0 {
        let v = -(r0 / (2.0 * n_abs)) * ((r / r0).ln() * n_abs).exp();
        (v, v * n_abs / r)
    } else {
        let v = -(r0 / (2.0 * n_abs)) * ((r0 / r).ln() * n_abs).exp();
        (v, -v * n_abs / r)
    }
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calr", about = "CALR boundary-integral laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalues of the symmetrized operator (spectrum.csv)
    Spectrum(CommonArgs),
    /// Loss sweep (sweep.csv, sweep.json)
    Sweep(CommonArgs),
    /// CALR verdict with evidence (verdict.json)
    Classify(CommonArgs),
    /// Field dump on a polar grid (field.csv)
    Field(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run-configuration JSON file
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Engine override: analytic | bem | both
    #[arg(long, value_parser = clap::value_parser!(Engine))]
    engine: Option<Engine>,
    /// Sweep worker threads
    #[arg(long)]
    workers: Option<usize>,
}

impl clap::builder::ValueParserFactory for Engine {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Engine>())
    }
}

fn run(
    args: &CommonArgs,
    which: fn(&Problem, &Path) -> Result<(), AppError>,
) -> Result<(), AppError> {
    let mut config = load_config(&args.config)?;
    if let Some(w) = args.workers {
        config.workers = Some(w);
    }
    let out = args
        .out
        .clone()
        .or(config.output.clone())
        .unwrap_or_else(|| PathBuf::from("calr-out"));
    let problem = resolve(config, args.engine)?;
    which(&problem, &out)
}

/// Entry point for the `calr` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Spectrum(a) => run(a, |p, o| {
            let report = cmd_spectrum(p, o)?;
            println!(
                "spectrum: {} eigenvalues, max |lambda| = {:.6e}, containment {}",
                report.n_eigenvalues,
                report.max_abs,
                if report.containment_ok {
                    "ok"
                } else {
                    "VIOLATED"
                }
            );
            Ok(())
        }),
        Command::Sweep(a) => run(a, |p, o| {
            let out = cmd_sweep(p, o)?;
            println!(
                "sweep: {} points, fitted exponent {}",
                out.records.len(),
                out.fitted_exponent
                    .as_ref()
                    .map(|f| format!("{:.4} (R2 {:.4})", f.slope, f.r_squared))
                    .unwrap_or_else(|| "n/a".into()),
            );
            Ok(())
        }),
        Command::Classify(a) => run(a, |p, o| {
            let v = cmd_classify(p, o)?;
            println!("verdict: {}", v.verdict);
            if v.verdict == Verdict::Inconclusive {
                eprintln!("warning: classification inconclusive on the available range");
            }
            Ok(())
        }),
        Command::Field(a) => run(a, |p, o| {
            let rep = cmd_field(p, o)?;
            println!(
                "field: {} points written, {} skipped",
                rep.points_written, rep.points_skipped
            );
            Ok(())
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
