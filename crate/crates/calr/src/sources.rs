//! Charge-conserving source models, their Newtonian potentials F, the block
//! right-hand side g = (∂F/∂ν_i, −∂F/∂ν_e), and annulus Fourier data.
//!
//! Dipoles, quadrupoles and charge collections have closed-form F and
//! closed-form exterior Fourier coefficients; coefficient-driven sources
//! (fourier-coeffs, shell-bump) evaluate the truncated interior series, the
//! shell-bump variant multiplied by a quintic cutoff supported in
//! r_1 ≤ |x| ≤ r_2 inside the critical radius.

use crate::annulus::{AnnulusConfig, CoeffSequence};
use crate::geometry::{BoundaryCurve, DiscreteBoundary, Location, Point, ProblemGeometry, Vec2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("charges must sum to zero exactly, got {0:.3e}")]
    ChargesNotBalanced(f64),
    #[error("evaluation point within {0:.3e} of the singular support")]
    TooCloseToSupport(f64),
    #[error("singular support must lie strictly outside the outer curve")]
    SupportNotOutside,
    #[error("singular support lies on a boundary curve")]
    SupportOnCurve,
    #[error("source support radius {0} must exceed the expansion radius {1}")]
    SupportInsideRadius(f64, f64),
    #[error("shell-bump radii must satisfy r_e < r1 < r2 < r_*, got r1={0}, r2={1}")]
    BadBumpRadii(f64, f64),
    #[error("coefficient series diverges at radius {radius} (term ratio {ratio:.3})")]
    SeriesDiverges { radius: f64, ratio: f64 },
    #[error("n_max={0} beyond the alias limit {1} of the FFT path")]
    AliasLimit(usize, usize),
    #[error("boundary nodes reach radius {0}, outside the bump plateau r1={1}")]
    BoundaryOutsidePlateau(f64, f64),
    #[error("coefficients are defined on r_e={0}, requested expansion at {1}")]
    ExpansionRadiusMismatch(f64, f64),
}

/// A charge-conserving source term.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    /// f = a·∇δ_y; F = a·∇G(x−y).
    Dipole { position: Point, moment: Vec2 },
    /// f = Σ a_ij ∂²δ_y/∂x_i∂x_j; F = A : ∇²G(x−y).
    Quadrupole {
        position: Point,
        matrix: [[f64; 2]; 2],
    },
    /// Point charges with zero total charge.
    ChargeCollection { charges: Vec<(Point, f64)> },
    /// Exterior-harmonic data given directly by its Fourier coefficients on
    /// the circle |x| = r_e; realizable by the shell-bump construction only.
    FourierCoeffs { coeffs: CoeffSequence, r_e: f64 },
    /// τ(|x|)·F with a quintic cutoff between r1 and r2, realizing the same
    /// coefficients with a source supported in the annulus r1 ≤ |x| ≤ r2.
    ShellBump {
        coeffs: CoeffSequence,
        r_e: f64,
        r1: f64,
        r2: f64,
    },
}

impl SourceSpec {
    pub fn dipole(position: Point, moment: Vec2) -> Self {
        Self::Dipole { position, moment }
    }

    pub fn quadrupole(position: Point, matrix: [[f64; 2]; 2]) -> Self {
        Self::Quadrupole { position, matrix }
    }

    pub fn charges(charges: Vec<(Point, f64)>) -> Result<Self, SourceError> {
        let total: f64 = charges.iter().map(|(_, q)| q).sum();
        if total != 0.0 {
            return Err(SourceError::ChargesNotBalanced(total));
        }
        Ok(Self::ChargeCollection { charges })
    }

    pub fn fourier(coeffs: CoeffSequence, r_e: f64) -> Self {
        Self::FourierCoeffs { coeffs, r_e }
    }

    pub fn shell_bump(
        coeffs: CoeffSequence,
        r1: f64,
        r2: f64,
        config: &AnnulusConfig,
    ) -> Result<Self, SourceError> {
        if !(config.r_e < r1 && r1 < r2 && r2 < config.r_star) {
            return Err(SourceError::BadBumpRadii(r1, r2));
        }
        Ok(Self::ShellBump {
            coeffs,
            r_e: config.r_e,
            r1,
            r2,
        })
    }

    /// Conditionality note carried into classifier evidence.
    pub fn realizability_note(&self) -> Option<String> {
        match self {
            Self::FourierCoeffs { .. } => Some("shell-bump-only".to_string()),
            _ => None,
        }
    }

    fn singular_points(&self) -> Vec<Point> {
        match self {
            Self::Dipole { position, .. } | Self::Quadrupole { position, .. } => vec![*position],
            Self::ChargeCollection { charges } => charges.iter().map(|(p, _)| *p).collect(),
            Self::FourierCoeffs { .. } | Self::ShellBump { .. } => Vec::new(),
        }
    }

    fn min_support_radius(&self) -> Option<f64> {
        let pts = self.singular_points();
        if pts.is_empty() {
            None
        } else {
            Some(
                pts.iter()
                    .map(|p| (p.x * p.x + p.y * p.y).sqrt())
                    .fold(f64::INFINITY, f64::min),
            )
        }
    }
}

fn cplx(p: Point) -> Complex64 {
    Complex64::new(p.x, p.y)
}

const SUPPORT_GUARD: f64 = 1e-8;

/// Quintic smoothstep cutoff: 1 below r1, 0 above r2, C² in between.
fn bump_tau(r: f64, r1: f64, r2: f64) -> (f64, f64) {
    if r <= r1 {
        (1.0, 0.0)
    } else if r >= r2 {
        (0.0, 0.0)
    } else {
        let u = (r - r1) / (r2 - r1);
        let s = u * u * u * (6.0 * u * u - 15.0 * u + 10.0);
        let ds = 30.0 * u * u * (u - 1.0) * (u - 1.0) / (r2 - r1);
        (1.0 - s, -ds)
    }
}

/// Interior Fourier series of F and its gradient:
/// F = −Σ_{m≥1} [g(m) wᵐ + g(−m) w̄ᵐ]/(m r_e^{m−1}).
fn series_potential(
    coeffs: &CoeffSequence,
    r_e: f64,
    x: Point,
) -> Result<(Complex64, [Complex64; 2]), SourceError> {
    let w = cplx(x);
    let r = w.norm();
    let mut value = Complex64::new(0.0, 0.0);
    let mut dx = Complex64::new(0.0, 0.0);
    let mut dy = Complex64::new(0.0, 0.0);
    let mut wp = Complex64::new(1.0, 0.0); // w^{m-1}
    let mut wbp = Complex64::new(1.0, 0.0); // conj(w)^{m-1}
    let mut scale = 1.0; // r_e^{-(m-1)}
    let mut prev_mag = f64::INFINITY;
    let mut growth = 0usize;
    for m in 1..=coeffs.n_max() {
        let gp = coeffs.get(m as i32);
        let gm = coeffs.get(-(m as i32));
        let wm = wp * w;
        let wbm = wbp * w.conj();
        let term = -(gp * wm + gm * wbm) * (scale / m as f64);
        value += term;
        dx += -(gp * wp + gm * wbp) * scale;
        dy += -(Complex64::i() * (gp * wp - gm * wbp)) * scale;
        let mag = term.norm();
        if mag > 0.0 {
            if m > 8 && mag > prev_mag {
                growth += 1;
                if growth >= 5 {
                    return Err(SourceError::SeriesDiverges {
                        radius: r,
                        ratio: mag / prev_mag,
                    });
                }
            } else {
                growth = 0;
            }
            prev_mag = mag;
        }
        wp = wm;
        wbp = wbm;
        scale /= r_e;
    }
    Ok((value, [dx, dy]))
}

/// F(x) and ∇F(x).
pub fn newtonian_potential(
    source: &SourceSpec,
    x: Point,
) -> Result<(Complex64, [Complex64; 2]), SourceError> {
    for p in source.singular_points() {
        if (x - p).norm() < SUPPORT_GUARD {
            return Err(SourceError::TooCloseToSupport(SUPPORT_GUARD));
        }
    }
    match source {
        SourceSpec::Dipole { position, moment } => {
            let d = x - *position;
            let r2 = d.norm_squared();
            let two_pi = 2.0 * std::f64::consts::PI;
            let f = moment.dot(&d) / (two_pi * r2);
            let ad = moment.dot(&d);
            let gx = (moment.x / r2 - 2.0 * d.x * ad / (r2 * r2)) / two_pi;
            let gy = (moment.y / r2 - 2.0 * d.y * ad / (r2 * r2)) / two_pi;
            Ok((f.into(), [gx.into(), gy.into()]))
        }
        SourceSpec::Quadrupole { position, matrix } => {
            let d = x - *position;
            let r2 = d.norm_squared();
            let two_pi = 2.0 * std::f64::consts::PI;
            let dd = [d.x, d.y];
            // F = Σ a_ij (δ_ij / r² − 2 d_i d_j / r⁴) / 2π
            let mut f = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let kron = if i == j { 1.0 } else { 0.0 };
                    f += matrix[i][j] * (kron / r2 - 2.0 * dd[i] * dd[j] / (r2 * r2));
                }
            }
            f /= two_pi;
            // ∂_k: −2(δ_ij d_k + δ_ik d_j + δ_jk d_i)/r⁴ + 8 d_i d_j d_k / r⁶
            let mut grad = [0.0_f64; 2];
            for (k, gk) in grad.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        let kron_ij = if i == j { 1.0 } else { 0.0 };
                        let kron_ik = if i == k { 1.0 } else { 0.0 };
                        let kron_jk = if j == k { 1.0 } else { 0.0 };
                        acc += matrix[i][j]
                            * (-2.0 * (kron_ij * dd[k] + kron_ik * dd[j] + kron_jk * dd[i])
                                / (r2 * r2)
                                + 8.0 * dd[i] * dd[j] * dd[k] / (r2 * r2 * r2));
                    }
                }
                *gk = acc / two_pi;
            }
            Ok((f.into(), [grad[0].into(), grad[1].into()]))
        }
        SourceSpec::ChargeCollection { charges } => {
            let two_pi = 2.0 * std::f64::consts::PI;
            let mut f = 0.0;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for (p, q) in charges {
                let d = x - *p;
                let r2 = d.norm_squared();
                f += q * 0.5 * r2.ln() / two_pi;
                gx += q * d.x / (two_pi * r2);
                gy += q * d.y / (two_pi * r2);
            }
            Ok((f.into(), [gx.into(), gy.into()]))
        }
        SourceSpec::FourierCoeffs { coeffs, r_e } => series_potential(coeffs, *r_e, x),
        SourceSpec::ShellBump {
            coeffs,
            r_e,
            r1,
            r2,
        } => {
            let r = cplx(x).norm();
            if r >= *r2 {
                return Ok((Complex64::new(0.0, 0.0), [Complex64::new(0.0, 0.0); 2]));
            }
            let (tau, dtau) = bump_tau(r, *r1, *r2);
            let (f, g) = series_potential(coeffs, *r_e, x)?;
            let rhat = if r > 0.0 {
                [x.x / r, x.y / r]
            } else {
                [0.0, 0.0]
            };
            Ok((
                tau * f,
                [
                    tau * g[0] + dtau * rhat[0] * f,
                    tau * g[1] + dtau * rhat[1] * f,
                ],
            ))
        }
    }
}

/// Block right-hand side sampled at the nodes, plus annulus Fourier data
/// when the geometry is a pair of origin-centered circles.
#[derive(Debug, Clone)]
pub struct BoundaryData {
    /// ∂F/∂ν_i at the inner nodes.
    pub g_inner: Vec<Complex64>,
    /// −∂F/∂ν_e at the outer nodes.
    pub g_outer: Vec<Complex64>,
    pub fourier: Option<AnnulusFourier>,
}

#[derive(Debug, Clone)]
pub struct AnnulusFourier {
    pub g_e: CoeffSequence,
    pub g_i: CoeffSequence,
}

fn normal_derivative_samples(
    source: &SourceSpec,
    bnd: &DiscreteBoundary,
) -> Result<Vec<Complex64>, SourceError> {
    let mut out = Vec::with_capacity(bnd.n);
    for (node, normal) in bnd.nodes.iter().zip(&bnd.normals) {
        let (_, grad) = newtonian_potential(source, *node)?;
        out.push(grad[0] * normal.x + grad[1] * normal.y);
    }
    Ok(out)
}

fn origin_circle_radius(curve: &BoundaryCurve) -> Option<f64> {
    match curve.kind() {
        crate::geometry::CurveKind::Circle { center, radius }
            if center.x == 0.0 && center.y == 0.0 =>
        {
            Some(radius)
        }
        _ => None,
    }
}

/// Fourier coefficients of node samples: c_n = (1/N) Σ_j f_j e^{−i n θ_j}.
pub fn sample_fourier(values: &[Complex64], n_max: usize) -> Result<CoeffSequence, SourceError> {
    let n = values.len();
    if n_max > n / 4 {
        return Err(SourceError::AliasLimit(n_max, n / 4));
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut spec = values.to_vec();
    fft.process(&mut spec);
    let mut coeffs = CoeffSequence::zeros(n_max);
    for m in 1..=n_max {
        coeffs.set(m as i32, spec[m] / n as f64);
        coeffs.set(-(m as i32), spec[n - m] / n as f64);
    }
    Ok(coeffs)
}

/// Node samples of (∂F/∂ν_i, −∂F/∂ν_e).
pub fn boundary_data(
    source: &SourceSpec,
    geometry: &ProblemGeometry,
) -> Result<BoundaryData, SourceError> {
    for p in source.singular_points() {
        if geometry.inner_curve.nearest_distance(p) < SUPPORT_GUARD
            || geometry.outer_curve.nearest_distance(p) < SUPPORT_GUARD
        {
            return Err(SourceError::SupportOnCurve);
        }
        if geometry.outer_curve.locate(p) != Location::Outside {
            return Err(SourceError::SupportNotOutside);
        }
    }
    if let SourceSpec::ShellBump { r1, .. } = source {
        let max_r = geometry
            .outer
            .nodes
            .iter()
            .chain(&geometry.inner.nodes)
            .map(|p| (p.x * p.x + p.y * p.y).sqrt())
            .fold(0.0_f64, f64::max);
        if max_r >= *r1 {
            return Err(SourceError::BoundaryOutsidePlateau(max_r, *r1));
        }
    }
    let g_inner = normal_derivative_samples(source, &geometry.inner)?;
    let g_outer: Vec<Complex64> = normal_derivative_samples(source, &geometry.outer)?
        .into_iter()
        .map(|v| -v)
        .collect();
    let fourier = match (
        origin_circle_radius(&geometry.inner_curve),
        origin_circle_radius(&geometry.outer_curve),
    ) {
        (Some(_), Some(_)) => {
            let n_max = (geometry.inner.n / 4).min(geometry.outer.n / 4);
            Some(AnnulusFourier {
                g_e: sample_fourier(&g_outer, n_max)?,
                g_i: sample_fourier(&g_inner, n_max)?,
            })
        }
        _ => None,
    };
    Ok(BoundaryData {
        g_inner,
        g_outer,
        fourier,
    })
}

/// Coefficients of −∂F/∂ν_e on |x| = r_e: closed form for dipoles,
/// quadrupoles and charge collections (term-by-term differentiation of the
/// fundamental-solution expansion), stored data for coefficient sources.
pub fn fourier_coeffs(
    source: &SourceSpec,
    r_e: f64,
    n_max: usize,
) -> Result<CoeffSequence, SourceError> {
    if let Some(rmin) = source.min_support_radius() {
        if rmin <= r_e {
            return Err(SourceError::SupportInsideRadius(rmin, r_e));
        }
    }
    let four_pi = 4.0 * std::f64::consts::PI;
    let mut coeffs = CoeffSequence::zeros(n_max);
    match source {
        SourceSpec::Dipole { position, moment } => {
            // g_e^n = n r_e^{n−1} a_c / (4π y^{n+1})
            let y = cplx(*position);
            let ac = Complex64::new(moment.x, moment.y);
            let mut re_pow = 1.0; // r_e^{n-1}
            let mut y_pow = y * y; // y^{n+1}
            for n in 1..=n_max {
                let g = (n as f64) * re_pow * ac / (four_pi * y_pow);
                coeffs.set(n as i32, g);
                coeffs.set(-(n as i32), g.conj());
                re_pow *= r_e;
                y_pow *= y;
            }
        }
        SourceSpec::Quadrupole { position, matrix } => {
            // g_e^n = n(n+1) r_e^{n−1} q_c / (4π y^{n+2}),
            // q_c = (a11 − a22) + i(a12 + a21)
            let y = cplx(*position);
            let qc = Complex64::new(matrix[0][0] - matrix[1][1], matrix[0][1] + matrix[1][0]);
            let mut re_pow = 1.0;
            let mut y_pow = y * y * y; // y^{n+2}
            for n in 1..=n_max {
                let g = (n * (n + 1)) as f64 * re_pow * qc / (four_pi * y_pow);
                coeffs.set(n as i32, g);
                coeffs.set(-(n as i32), g.conj());
                re_pow *= r_e;
                y_pow *= y;
            }
        }
        SourceSpec::ChargeCollection { charges } => {
            // g_e^n = (r_e^{n−1}/4π) Σ_k q_k / p_k^n
            let mut re_pow = 1.0;
            let mut p_pows: Vec<Complex64> = charges.iter().map(|(p, _)| cplx(*p)).collect();
            for n in 1..=n_max {
                let mut s = Complex64::new(0.0, 0.0);
                for ((_, q), pw) in charges.iter().zip(&p_pows) {
                    s += *q / pw;
                }
                let g = re_pow * s / four_pi;
                coeffs.set(n as i32, g);
                coeffs.set(-(n as i32), g.conj());
                re_pow *= r_e;
                for (pw, (p, _)) in p_pows.iter_mut().zip(charges.iter()) {
                    *pw *= cplx(*p);
                }
            }
        }
        SourceSpec::FourierCoeffs {
            coeffs: stored,
            r_e: stored_re,
        }
        | SourceSpec::ShellBump {
            coeffs: stored,
            r_e: stored_re,
            ..
        } => {
            if (stored_re - r_e).abs() > 1e-12 * r_e {
                return Err(SourceError::ExpansionRadiusMismatch(*stored_re, r_e));
            }
            for n in 1..=n_max.min(stored.n_max()) {
                coeffs.set(n as i32, stored.get(n as i32));
                coeffs.set(-(n as i32), stored.get(-(n as i32)));
            }
        }
    }
    Ok(coeffs)
}

/// FFT route for the same coefficients: samples −∂F/∂ν_e on the circle and
/// transforms. The closed forms must agree with this to 1e-9.
pub fn fourier_coeffs_fft(
    source: &SourceSpec,
    r_e: f64,
    n_max: usize,
    samples: usize,
) -> Result<CoeffSequence, SourceError> {
    if n_max > samples / 4 {
        return Err(SourceError::AliasLimit(n_max, samples / 4));
    }
    let mut vals = Vec::with_capacity(samples);
    for j in 0..samples {
        let t = 2.0 * std::f64::consts::PI * j as f64 / samples as f64;
        let x = Point::new(r_e * t.cos(), r_e * t.sin());
        let (_, grad) = newtonian_potential(source, x)?;
        vals.push(-(grad[0] * t.cos() + grad[1] * t.sin()));
    }
    sample_fourier(&vals, n_max)
}
