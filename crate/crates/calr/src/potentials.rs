//! Layer potentials on discretized curves: dense Nyström matrices for
//! S_Γ, K_Γ, K*_Γ and the cross-curve coupling operators, plus off-boundary
//! evaluation of single/double layer potentials and their gradients.
//!
//! The on-boundary single layer splits ln|x(t)−x(s)| into the periodic
//! log-singular part, handled by the Kress quadrature rule, and a smooth
//! remainder handled by the trapezoidal rule. K* and K extend continuously
//! to the diagonal with value κ(x)/(4π) on C² curves.

use crate::geometry::{discretize, DiscreteBoundary, Point};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

/// Relative exclusion zone for plain off-boundary quadrature.
pub const NEAR_BOUNDARY_EXCLUSION: f64 = 1e-6;

/// Target exponent for aliasing decay when picking an upsampling level:
/// the quadrature error of an off-boundary evaluation behaves like
/// exp(-M d / speed), so M is chosen with M d / speed >= this.
const UPSAMPLE_DECAY_TARGET: f64 = 38.0;
const UPSAMPLE_MAX_NODES: usize = 16384;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("evaluation point within {0:.3e} of the boundary; use on-boundary matrices instead")]
    NearBoundary(f64),
    #[error("density has {got} values but the boundary has {want} nodes")]
    LengthMismatch { got: usize, want: usize },
    #[error("density is not zero-mean: |sum w phi| = {0:.3e} exceeds the L2_0 tolerance")]
    NotZeroMean(f64),
    #[error("source and target curves overlap or touch (min node distance {0:.3e})")]
    CurvesOverlap(f64),
}

/// Boundary density attached to a `DiscreteBoundary`.
#[derive(Debug, Clone)]
pub struct Density {
    pub values: Vec<Complex64>,
    pub zero_mean: bool,
}

impl Density {
    pub fn new(values: Vec<Complex64>) -> Self {
        Self {
            values,
            zero_mean: false,
        }
    }

    /// Wraps values after verifying membership in L²₀:
    /// |Σ w φ| ≤ 1e-10 Σ w |φ|.
    pub fn new_zero_mean(
        values: Vec<Complex64>,
        bnd: &DiscreteBoundary,
    ) -> Result<Self, PotentialError> {
        if values.len() != bnd.n {
            return Err(PotentialError::LengthMismatch {
                got: values.len(),
                want: bnd.n,
            });
        }
        let moment: Complex64 = values.iter().zip(&bnd.weights).map(|(v, &w)| v * w).sum();
        let scale: f64 = values
            .iter()
            .zip(&bnd.weights)
            .map(|(v, &w)| v.norm() * w)
            .sum();
        if moment.norm() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(PotentialError::NotZeroMean(moment.norm()));
        }
        Ok(Self {
            values,
            zero_mean: true,
        })
    }

    /// Removes the W-weighted mean; returns the density and the removed norm.
    pub fn project_zero_mean(values: Vec<Complex64>, bnd: &DiscreteBoundary) -> (Self, f64) {
        let total_w: f64 = bnd.weights.iter().sum();
        let moment: Complex64 = values.iter().zip(&bnd.weights).map(|(v, &w)| v * w).sum();
        let mean = moment / total_w;
        let projected: Vec<Complex64> = values.iter().map(|v| v - mean).collect();
        (
            Self {
                values: projected,
                zero_mean: true,
            },
            mean.norm() * total_w.sqrt(),
        )
    }

    /// Samples e^{i n t} at the parameter nodes (the Fourier mode on circles).
    pub fn mode(bnd: &DiscreteBoundary, n: i32) -> Self {
        let values = bnd
            .params
            .iter()
            .map(|&t| Complex64::from_polar(1.0, n as f64 * t))
            .collect();
        Self {
            values,
            zero_mean: n != 0,
        }
    }
}

/// Which operator a dense block discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelTag {
    SSelf,
    SCross,
    KstarSelf,
    KSelf,
    DsCross,
    DCross,
}

/// Dense Nyström block mapping node values on the source boundary to node
/// values on the target boundary.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub matrix: DMatrix<f64>,
    pub tag: KernelTag,
    pub n_target: usize,
    pub n_source: usize,
}

impl KernelMatrix {
    pub fn apply(&self, values: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(values.len(), self.n_source);
        let mut out = vec![Complex64::new(0.0, 0.0); self.n_target];
        for (j, &v) in values.iter().enumerate() {
            if v == Complex64::new(0.0, 0.0) {
                continue;
            }
            let col = self.matrix.column(j);
            for (o, &m) in out.iter_mut().zip(col.iter()) {
                *o += m * v;
            }
        }
        out
    }
}

/// Kress weights R_m for the 2π-periodic logarithmic quadrature:
/// ∫ ln(4 sin²((t_i−s)/2)) f(s) ds ≈ Σ_j R_{|i−j|} f(s_j), N = 2·half.
pub fn kress_log_weights(n: usize) -> Vec<f64> {
    assert!(n.is_multiple_of(2) && n >= 2);
    let half = n / 2;
    let mut r = vec![0.0_f64; n];
    for (m, rm) in r.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 1..half {
            acc += (k as f64 * m as f64 * std::f64::consts::PI / half as f64).cos() / k as f64;
        }
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        *rm = -2.0 * std::f64::consts::PI / half as f64 * acc
            - std::f64::consts::PI / (half as f64 * half as f64) * sign;
    }
    r
}

/// On-boundary single layer S_Γ via the Kress split.
pub fn assemble_s_self(bnd: &DiscreteBoundary) -> KernelMatrix {
    let n = bnd.n;
    let r = kress_log_weights(n);
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let idx = i.abs_diff(j);
            let kress = r[idx] / (4.0 * std::f64::consts::PI) * bnd.speeds[j];
            let smooth = if i == j {
                bnd.speeds[i].ln()
            } else {
                let dist = (bnd.nodes[i] - bnd.nodes[j]).norm();
                let s = 2.0 * (0.5 * (bnd.params[i] - bnd.params[j])).sin().abs();
                (dist / s).ln()
            };
            m[(i, j)] = kress + smooth * bnd.speeds[j] / n as f64;
        }
    }
    KernelMatrix {
        matrix: m,
        tag: KernelTag::SSelf,
        n_target: n,
        n_source: n,
    }
}

/// On-boundary K*_Γ; diagonal entries take the continuous-extension limit
/// κ(x)/(4π) times the local weight.
pub fn assemble_kstar_self(bnd: &DiscreteBoundary) -> KernelMatrix {
    let n = bnd.n;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                m[(i, i)] = bnd.curvatures[i] / (4.0 * std::f64::consts::PI) * bnd.weights[i];
            } else {
                let d = bnd.nodes[i] - bnd.nodes[j];
                let k = d.dot(&bnd.normals[i]) / (2.0 * std::f64::consts::PI * d.norm_squared());
                m[(i, j)] = k * bnd.weights[j];
            }
        }
    }
    KernelMatrix {
        matrix: m,
        tag: KernelTag::KstarSelf,
        n_target: n,
        n_source: n,
    }
}

/// On-boundary K_Γ (the L²-adjoint of K*), which is also the Nyström matrix
/// of the double layer restricted to its own curve.
pub fn assemble_k_self(bnd: &DiscreteBoundary) -> KernelMatrix {
    let n = bnd.n;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                m[(i, i)] = bnd.curvatures[i] / (4.0 * std::f64::consts::PI) * bnd.weights[i];
            } else {
                let d = bnd.nodes[j] - bnd.nodes[i];
                let k = d.dot(&bnd.normals[j]) / (2.0 * std::f64::consts::PI * d.norm_squared());
                m[(i, j)] = k * bnd.weights[j];
            }
        }
    }
    KernelMatrix {
        matrix: m,
        tag: KernelTag::KSelf,
        n_target: n,
        n_source: n,
    }
}

fn check_separated(a: &DiscreteBoundary, b: &DiscreteBoundary) -> Result<(), PotentialError> {
    let mut min = f64::INFINITY;
    for p in &a.nodes {
        for q in &b.nodes {
            min = min.min((p - q).norm());
        }
    }
    let scale = a.diameter().max(b.diameter());
    if min <= 1e-6 * scale {
        return Err(PotentialError::CurvesOverlap(min));
    }
    Ok(())
}

/// φ ↦ S_source\[φ\] restricted to the target nodes (smooth kernel).
pub fn assemble_s_cross(
    source: &DiscreteBoundary,
    target: &DiscreteBoundary,
) -> Result<KernelMatrix, PotentialError> {
    check_separated(source, target)?;
    let mut m = DMatrix::zeros(target.n, source.n);
    for i in 0..target.n {
        for j in 0..source.n {
            let d = (target.nodes[i] - source.nodes[j]).norm();
            m[(i, j)] = d.ln() / (2.0 * std::f64::consts::PI) * source.weights[j];
        }
    }
    Ok(KernelMatrix {
        matrix: m,
        tag: KernelTag::SCross,
        n_target: target.n,
        n_source: source.n,
    })
}

/// φ ↦ ∂/∂ν_target S_source\[φ\] at the target nodes.
pub fn assemble_ds_cross(
    source: &DiscreteBoundary,
    target: &DiscreteBoundary,
) -> Result<KernelMatrix, PotentialError> {
    check_separated(source, target)?;
    let mut m = DMatrix::zeros(target.n, source.n);
    for i in 0..target.n {
        for j in 0..source.n {
            let d = target.nodes[i] - source.nodes[j];
            let k = d.dot(&target.normals[i]) / (2.0 * std::f64::consts::PI * d.norm_squared());
            m[(i, j)] = k * source.weights[j];
        }
    }
    Ok(KernelMatrix {
        matrix: m,
        tag: KernelTag::DsCross,
        n_target: target.n,
        n_source: source.n,
    })
}

/// φ ↦ D_source\[φ\] at the target nodes (double layer across curves).
pub fn assemble_d_cross(
    source: &DiscreteBoundary,
    target: &DiscreteBoundary,
) -> Result<KernelMatrix, PotentialError> {
    check_separated(source, target)?;
    let mut m = DMatrix::zeros(target.n, source.n);
    for i in 0..target.n {
        for j in 0..source.n {
            let d = source.nodes[j] - target.nodes[i];
            let k = d.dot(&source.normals[j]) / (2.0 * std::f64::consts::PI * d.norm_squared());
            m[(i, j)] = k * source.weights[j];
        }
    }
    Ok(KernelMatrix {
        matrix: m,
        tag: KernelTag::DCross,
        n_target: target.n,
        n_source: source.n,
    })
}

fn exclusion_check(bnd: &DiscreteBoundary, x: Point) -> Result<f64, PotentialError> {
    let d = bnd.curve.nearest_distance(x);
    let zone = NEAR_BOUNDARY_EXCLUSION * bnd.diameter();
    if d < zone {
        return Err(PotentialError::NearBoundary(zone));
    }
    Ok(d)
}

fn raw_single_layer(bnd: &DiscreteBoundary, values: &[Complex64], x: Point) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for ((node, &w), v) in bnd.nodes.iter().zip(&bnd.weights).zip(values) {
        let d = (x - node).norm();
        acc += v * (d.ln() / (2.0 * std::f64::consts::PI) * w);
    }
    acc
}

fn raw_grad_single_layer(bnd: &DiscreteBoundary, values: &[Complex64], x: Point) -> [Complex64; 2] {
    let mut gx = Complex64::new(0.0, 0.0);
    let mut gy = Complex64::new(0.0, 0.0);
    for ((node, &w), v) in bnd.nodes.iter().zip(&bnd.weights).zip(values) {
        let d = x - node;
        let f = w / (2.0 * std::f64::consts::PI * d.norm_squared());
        gx += v * (d.x * f);
        gy += v * (d.y * f);
    }
    [gx, gy]
}

fn raw_double_layer(bnd: &DiscreteBoundary, values: &[Complex64], x: Point) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (((node, normal), &w), v) in bnd
        .nodes
        .iter()
        .zip(&bnd.normals)
        .zip(&bnd.weights)
        .zip(values)
    {
        let d = node - x;
        let k = d.dot(normal) / (2.0 * std::f64::consts::PI * d.norm_squared());
        acc += v * (k * w);
    }
    acc
}

/// Quadrature approximation of S_Γ\[φ\](x) off the boundary.
pub fn eval_single_layer(
    bnd: &DiscreteBoundary,
    density: &Density,
    x: Point,
) -> Result<Complex64, PotentialError> {
    exclusion_check(bnd, x)?;
    if density.values.len() != bnd.n {
        return Err(PotentialError::LengthMismatch {
            got: density.values.len(),
            want: bnd.n,
        });
    }
    Ok(raw_single_layer(bnd, &density.values, x))
}

/// ∇S_Γ\[φ\](x) off the boundary.
pub fn eval_grad_single_layer(
    bnd: &DiscreteBoundary,
    density: &Density,
    x: Point,
) -> Result<[Complex64; 2], PotentialError> {
    exclusion_check(bnd, x)?;
    if density.values.len() != bnd.n {
        return Err(PotentialError::LengthMismatch {
            got: density.values.len(),
            want: bnd.n,
        });
    }
    Ok(raw_grad_single_layer(bnd, &density.values, x))
}

/// D_Γ\[φ\](x) off the boundary.
pub fn eval_double_layer(
    bnd: &DiscreteBoundary,
    density: &Density,
    x: Point,
) -> Result<Complex64, PotentialError> {
    exclusion_check(bnd, x)?;
    if density.values.len() != bnd.n {
        return Err(PotentialError::LengthMismatch {
            got: density.values.len(),
            want: bnd.n,
        });
    }
    Ok(raw_double_layer(bnd, &density.values, x))
}

/// Trigonometric interpolation of N periodic samples onto M >= N nodes.
pub fn trig_upsample(values: &[Complex64], m: usize) -> Vec<Complex64> {
    let n = values.len();
    assert!(m >= n && n.is_multiple_of(2));
    if m == n {
        return values.to_vec();
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut spec = values.to_vec();
    fft.process(&mut spec);
    let mut padded = vec![Complex64::new(0.0, 0.0); m];
    let half = n / 2;
    padded[..half].copy_from_slice(&spec[..half]);
    for k in 1..half {
        padded[m - k] = spec[n - k];
    }
    // split the Nyquist coefficient symmetrically
    padded[half] = 0.5 * spec[half];
    padded[m - half] = 0.5 * spec[half];
    let ifft = planner.plan_fft_inverse(m);
    ifft.process(&mut padded);
    let scale = 1.0 / n as f64;
    padded.iter_mut().for_each(|v| *v *= scale);
    padded
}

struct EvalLevel {
    bnd: DiscreteBoundary,
    values: Vec<Complex64>,
}

/// Off-boundary evaluator with tiered spectral upsampling: near the curve the
/// density and geometry are resampled at 4×, 16×, 64× the base node count so
/// plain quadrature keeps its aliasing error below ~e^{-38}.
pub struct LayerEvaluator {
    levels: Vec<EvalLevel>,
    max_speed: f64,
    exclusion: f64,
}

impl LayerEvaluator {
    pub fn new(bnd: &DiscreteBoundary, values: &[Complex64]) -> Self {
        assert_eq!(values.len(), bnd.n);
        let mut levels = vec![EvalLevel {
            bnd: bnd.clone(),
            values: values.to_vec(),
        }];
        let mut m = bnd.n;
        while m < UPSAMPLE_MAX_NODES {
            m = (m * 4).min(UPSAMPLE_MAX_NODES);
            let refined = discretize(&bnd.curve, m).expect("refined node count is even");
            let vals = trig_upsample(values, m);
            levels.push(EvalLevel {
                bnd: refined,
                values: vals,
            });
        }
        Self {
            levels,
            max_speed: bnd.max_speed(),
            exclusion: NEAR_BOUNDARY_EXCLUSION * bnd.diameter(),
        }
    }

    fn pick(&self, x: Point) -> Result<&EvalLevel, PotentialError> {
        let d = self.levels[0].bnd.curve.nearest_distance(x);
        if d < self.exclusion {
            return Err(PotentialError::NearBoundary(self.exclusion));
        }
        let d_param = d / self.max_speed;
        for level in &self.levels {
            if level.bnd.n as f64 * d_param >= UPSAMPLE_DECAY_TARGET {
                return Ok(level);
            }
        }
        Ok(self.levels.last().unwrap())
    }

    pub fn single_layer(&self, x: Point) -> Result<Complex64, PotentialError> {
        let level = self.pick(x)?;
        Ok(raw_single_layer(&level.bnd, &level.values, x))
    }

    pub fn grad_single_layer(&self, x: Point) -> Result<[Complex64; 2], PotentialError> {
        let level = self.pick(x)?;
        Ok(raw_grad_single_layer(&level.bnd, &level.values, x))
    }

    pub fn double_layer(&self, x: Point) -> Result<Complex64, PotentialError> {
        let level = self.pick(x)?;
        Ok(raw_double_layer(&level.bnd, &level.values, x))
    }
}

/// Residuals of the jump relations from extrapolated one-sided evaluations.
#[derive(Debug, Clone, Copy)]
pub struct JumpReport {
    pub single_exterior: f64,
    pub single_interior: f64,
    pub double_exterior: f64,
    pub double_interior: f64,
}

impl JumpReport {
    pub fn max(&self) -> f64 {
        self.single_exterior
            .max(self.single_interior)
            .max(self.double_exterior)
            .max(self.double_interior)
    }
}

/// Extrapolation nodes for `jump_check`: fractions of the curve diameter
/// small enough for a tight extrapolation yet large enough that the
/// upsampled quadrature stays spectrally accurate.
pub fn default_jump_offsets(bnd: &DiscreteBoundary) -> Vec<f64> {
    let d = bnd.diameter();
    [0.002, 0.003, 0.004, 0.005, 0.006, 0.007]
        .iter()
        .map(|c| c * d)
        .collect()
}

/// Compares one-sided evaluations of ∂S/∂ν and D, Neville-extrapolated to the
/// boundary over `offsets`, against (±½I + K*)\[φ\] and (∓½I + K)\[φ\].
/// Residuals are absolute sup-norms over the nodes.
pub fn jump_check(bnd: &DiscreteBoundary, density: &Density, offsets: &[f64]) -> JumpReport {
    assert!(!offsets.is_empty());
    let eval = LayerEvaluator::new(bnd, &density.values);
    let kstar = assemble_kstar_self(bnd);
    let kmat = assemble_k_self(bnd);
    let kstar_phi = kstar.apply(&density.values);
    let k_phi = kmat.apply(&density.values);

    let mut report = JumpReport {
        single_exterior: 0.0,
        single_interior: 0.0,
        double_exterior: 0.0,
        double_interior: 0.0,
    };
    for i in 0..bnd.n {
        let node = bnd.nodes[i];
        let nv = bnd.normals[i];
        let mut sn_plus = Vec::with_capacity(offsets.len());
        let mut sn_minus = Vec::with_capacity(offsets.len());
        let mut d_plus = Vec::with_capacity(offsets.len());
        let mut d_minus = Vec::with_capacity(offsets.len());
        for &eps in offsets {
            let xp = Point::new(node.x + eps * nv.x, node.y + eps * nv.y);
            let xm = Point::new(node.x - eps * nv.x, node.y - eps * nv.y);
            let gp = eval
                .grad_single_layer(xp)
                .expect("offset outside exclusion zone");
            let gm = eval
                .grad_single_layer(xm)
                .expect("offset outside exclusion zone");
            sn_plus.push(gp[0] * nv.x + gp[1] * nv.y);
            sn_minus.push(gm[0] * nv.x + gm[1] * nv.y);
            d_plus.push(
                eval.double_layer(xp)
                    .expect("offset outside exclusion zone"),
            );
            d_minus.push(
                eval.double_layer(xm)
                    .expect("offset outside exclusion zone"),
            );
        }
        let phi = density.values[i];
        let ext = crate::linalg::neville_extrapolate(offsets, &sn_plus);
        let int = crate::linalg::neville_extrapolate(offsets, &sn_minus);
        let dext = crate::linalg::neville_extrapolate(offsets, &d_plus);
        let dint = crate::linalg::neville_extrapolate(offsets, &d_minus);
        report.single_exterior = report
            .single_exterior
            .max((ext - (0.5 * phi + kstar_phi[i])).norm());
        report.single_interior = report
            .single_interior
            .max((int - (-0.5 * phi + kstar_phi[i])).norm());
        report.double_exterior = report
            .double_exterior
            .max((dext - (-0.5 * phi + k_phi[i])).norm());
        report.double_interior = report
            .double_interior
            .max((dint - (0.5 * phi + k_phi[i])).norm());
    }
    report
}

/// Discrete W-weighted Hermitian product Σ w φ ψ̄ on one curve.
pub fn inner_w(weights: &[f64], phi: &[Complex64], psi: &[Complex64]) -> Complex64 {
    weights
        .iter()
        .zip(phi.iter().zip(psi.iter()))
        .map(|(&w, (p, q))| w * p * q.conj())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{discretize, BoundaryCurve, Point};
    use crate::linalg::{similarity_scale, spectral_norm};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circle(r: f64, n: usize) -> DiscreteBoundary {
        discretize(&BoundaryCurve::circle(Point::origin(), r).unwrap(), n).unwrap()
    }

    fn ellipse(a: f64, b: f64, n: usize) -> DiscreteBoundary {
        discretize(&BoundaryCurve::ellipse(Point::origin(), a, b).unwrap(), n).unwrap()
    }

    /// Random band-limited zero-mean density, reproducible across runs.
    fn random_smooth_density(bnd: &DiscreteBoundary, seed: u64, max_mode: i32) -> Density {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![Complex64::new(0.0, 0.0); bnd.n];
        for m in 1..=max_mode {
            let cp = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let cm = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            for (j, &t) in bnd.params.iter().enumerate() {
                values[j] += cp * Complex64::from_polar(1.0, m as f64 * t)
                    + cm * Complex64::from_polar(1.0, -(m as f64) * t);
            }
        }
        Density::new(values)
    }

    fn max_diff(got: &[Complex64], want: impl Fn(usize) -> Complex64) -> f64 {
        got.iter()
            .enumerate()
            .map(|(i, v)| (v - want(i)).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn kress_rule_is_exact_on_trig_polynomials() {
        // ∫ ln(4 sin²((t-s)/2)) e^{iks} ds = -(2π/|k|) e^{ikt} for 0 < |k| < N/2
        let n = 32;
        let r = kress_log_weights(n);
        for k in [1_i32, 3, 7, 15] {
            for i in [0usize, 5, 17] {
                let ti = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    let sj = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                    let idx = i.abs_diff(j);
                    acc += r[idx] * Complex64::from_polar(1.0, k as f64 * sj);
                }
                let want = Complex64::from_polar(1.0, k as f64 * ti)
                    * (-2.0 * std::f64::consts::PI / k.unsigned_abs() as f64);
                assert!((acc - want).norm() < 1e-12, "k={k} i={i}: {acc} vs {want}");
            }
        }
        // the rule integrates constants to zero (the log kernel has zero mean)
        let sum: f64 = r.iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn s_self_circle_diagonalizes_fourier_modes() {
        let bnd = circle(1.0, 128);
        let s = assemble_s_self(&bnd);
        for n in [1_i32, 2, 5, -3] {
            let d = Density::mode(&bnd, n);
            let out = s.apply(&d.values);
            let coef = -1.0 / (2.0 * n.unsigned_abs() as f64);
            let err = max_diff(&out, |i| coef * d.values[i]);
            assert!(err < 1e-10, "mode {n}: err={err}");
        }
    }

    #[test]
    fn s_self_circle_constant_is_r_log_r() {
        let bnd = circle(2.0, 128);
        let s = assemble_s_self(&bnd);
        let ones = vec![Complex64::new(1.0, 0.0); bnd.n];
        let out = s.apply(&ones);
        let want = 2.0 * 2.0_f64.ln();
        let err = max_diff(&out, |_| Complex64::new(want, 0.0));
        assert!(err < 1e-12, "err={err}");
    }

    #[test]
    fn s_self_is_w_symmetric() {
        for bnd in [circle(1.3, 64), ellipse(2.0, 1.0, 64)] {
            let s = assemble_s_self(&bnd);
            let w = DVector::from_vec(bnd.weights.clone());
            let sw = similarity_scale(&s.matrix, &w);
            let asym = spectral_norm(&(&sw - sw.transpose()));
            assert!(asym <= 1e-10 * spectral_norm(&sw), "asym={asym}");
        }
    }

    #[test]
    fn kstar_circle_annihilates_modes_and_halves_constants() {
        let bnd = circle(1.0, 128);
        let kstar = assemble_kstar_self(&bnd);
        let out = kstar.apply(&Density::mode(&bnd, 1).values);
        let norm = out.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(norm <= 1e-10, "K*[e^it] norm={norm}");
        let ones = vec![Complex64::new(1.0, 0.0); bnd.n];
        let out1 = kstar.apply(&ones);
        let err = max_diff(&out1, |_| Complex64::new(0.5, 0.0));
        assert!(err < 1e-12, "K*[1] err={err}");
    }

    #[test]
    fn kstar_ellipse_eigenvalues_real_in_kellogg_interval() {
        let bnd = ellipse(2.0, 1.0, 256);
        let kstar = assemble_kstar_self(&bnd);
        let eigs = kstar.matrix.complex_eigenvalues();
        for e in eigs.iter() {
            assert!(e.im.abs() <= 1e-8, "imag part {e}");
            assert!(e.re > -0.5 && e.re <= 0.5 + 1e-8, "real part {e}");
        }
        // the equilibrium eigenvalue 1/2 is present
        let near_half = eigs.iter().any(|e| (e.re - 0.5).abs() < 1e-8);
        assert!(near_half);
    }

    #[test]
    fn ds_cross_circle_modes_match_closed_form() {
        let outer = circle(2.0, 128);
        let inner = circle(1.0, 128);
        // ∂/∂ν_i S_{Γe}[e^{iθ}] at r=1 < 2: -(1/2)(r/r0)^{|n|-1} = -0.5
        let m = assemble_ds_cross(&outer, &inner).unwrap();
        let out = m.apply(&Density::mode(&outer, 1).values);
        let err = max_diff(&out, |i| -0.5 * Density::mode(&inner, 1).values[i]);
        assert!(err < 1e-12, "err={err}");
        // ∂/∂ν_e S_{Γi}[e^{iθ}] at r=2 > 1: +(1/2)(r0/r)^{|n|+1} = 0.125
        let m2 = assemble_ds_cross(&inner, &outer).unwrap();
        let out2 = m2.apply(&Density::mode(&inner, 1).values);
        let err2 = max_diff(&out2, |i| 0.125 * Density::mode(&outer, 1).values[i]);
        assert!(err2 < 1e-12, "err={err2}");
        // zero density maps to zero
        let zeros = vec![Complex64::new(0.0, 0.0); 128];
        assert!(m.apply(&zeros).iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn s_cross_circle_modes_match_closed_form() {
        let outer = circle(2.0, 128);
        let inner = circle(1.0, 128);
        // S_{Γe}[e^{iθ}] at r=1: -(r0/2)(r/r0) = -0.5
        let m = assemble_s_cross(&outer, &inner).unwrap();
        let out = m.apply(&Density::mode(&outer, 1).values);
        let err = max_diff(&out, |i| -0.5 * Density::mode(&inner, 1).values[i]);
        assert!(err < 1e-12, "err={err}");
        // S_{Γi}[e^{2iθ}] at r=2: -(1/4)(1/2)^2 = -0.0625
        let m2 = assemble_s_cross(&inner, &outer).unwrap();
        let out2 = m2.apply(&Density::mode(&inner, 2).values);
        let err2 = max_diff(&out2, |i| -0.0625 * Density::mode(&outer, 2).values[i]);
        assert!(err2 < 1e-12, "err={err2}");
    }

    #[test]
    fn overlapping_curves_rejected() {
        let a = circle(1.0, 64);
        let b = circle(1.0, 64);
        assert!(matches!(
            assemble_s_cross(&a, &b),
            Err(PotentialError::CurvesOverlap(_))
        ));
    }

    #[test]
    fn eval_single_layer_circle_examples() {
        let bnd = circle(1.0, 128);
        // φ = e^{iθ}, |x| = 2: -(1/2)(1/2) e^{iθ}
        let d1 = Density::mode(&bnd, 1);
        for theta in [0.0_f64, 0.9, 2.4] {
            let x = Point::new(2.0 * theta.cos(), 2.0 * theta.sin());
            let v = eval_single_layer(&bnd, &d1, x).unwrap();
            let want = -0.25 * Complex64::from_polar(1.0, theta);
            assert!((v - want).norm() < 1e-12, "theta={theta}");
        }
        // φ = e^{2iθ}, |x| = 0.5: -(1/4)(0.5)² e^{2iθ}
        let d2 = Density::mode(&bnd, 2);
        let x = Point::new(0.5, 0.0);
        let v = eval_single_layer(&bnd, &d2, x).unwrap();
        assert!((v - Complex64::new(-0.0625, 0.0)).norm() < 1e-12);
        // φ = 1, |x| = 2: ln 2
        let ones = Density::new(vec![Complex64::new(1.0, 0.0); bnd.n]);
        let v = eval_single_layer(&bnd, &ones, Point::new(0.0, 2.0)).unwrap();
        assert!((v - Complex64::new(2.0_f64.ln(), 0.0)).norm() < 1e-12);
    }

    #[test]
    fn eval_grad_single_layer_circle_examples() {
        let bnd = circle(1.0, 128);
        let d1 = Density::mode(&bnd, 1);
        // radial derivative at r=2: (1/2)(1/2)² e^{iθ}
        let g = eval_grad_single_layer(&bnd, &d1, Point::new(2.0, 0.0)).unwrap();
        assert!((g[0] - Complex64::new(0.125, 0.0)).norm() < 1e-12);
        // radial derivative at r=0.5: -(1/2)(r/r0)⁰ e^{iθ}
        let g2 = eval_grad_single_layer(&bnd, &d1, Point::new(0.5, 0.0)).unwrap();
        assert!((g2[0] - Complex64::new(-0.5, 0.0)).norm() < 1e-12);
        // zero density
        let zeros = Density::new(vec![Complex64::new(0.0, 0.0); bnd.n]);
        let g3 = eval_grad_single_layer(&bnd, &zeros, Point::new(2.0, 0.0)).unwrap();
        assert!(g3[0].norm() == 0.0 && g3[1].norm() == 0.0);
    }

    #[test]
    fn eval_double_layer_circle_modes() {
        // D_Γ[e^{inθ}]: ½(r/r₀)^{|n|} inside, −½(r₀/r)^{|n|} outside
        let bnd = circle(1.0, 128);
        let d2 = Density::mode(&bnd, 2);
        let inside = eval_double_layer(&bnd, &d2, Point::new(0.5, 0.0)).unwrap();
        assert!((inside - Complex64::new(0.5 * 0.25, 0.0)).norm() < 1e-12);
        let outside = eval_double_layer(&bnd, &d2, Point::new(2.0, 0.0)).unwrap();
        assert!((outside - Complex64::new(-0.5 * 0.25, 0.0)).norm() < 1e-12);
        // constants: 1 inside, 0 outside
        let ones = Density::new(vec![Complex64::new(1.0, 0.0); bnd.n]);
        let vi = eval_double_layer(&bnd, &ones, Point::new(0.3, 0.1)).unwrap();
        let vo = eval_double_layer(&bnd, &ones, Point::new(0.0, 3.0)).unwrap();
        assert!((vi - Complex64::new(1.0, 0.0)).norm() < 1e-13);
        assert!(vo.norm() < 1e-13);
    }

    #[test]
    fn near_boundary_evaluation_rejected() {
        let bnd = circle(1.0, 64);
        let d = Density::mode(&bnd, 1);
        let x = Point::new(1.0 + 1e-8, 0.0);
        assert!(matches!(
            eval_single_layer(&bnd, &d, x),
            Err(PotentialError::NearBoundary(_))
        ));
    }

    #[test]
    fn trig_upsample_reproduces_band_limited_samples() {
        let n = 32;
        let m = 128;
        let f = |t: f64| {
            Complex64::from_polar(1.0, 3.0 * t) + 0.5 * Complex64::from_polar(1.0, -5.0 * t)
        };
        let coarse: Vec<Complex64> = (0..n)
            .map(|j| f(2.0 * std::f64::consts::PI * j as f64 / n as f64))
            .collect();
        let fine = trig_upsample(&coarse, m);
        for (j, v) in fine.iter().enumerate() {
            let t = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            assert!((v - f(t)).norm() < 1e-12);
        }
    }

    #[test]
    fn layer_evaluator_accurate_near_boundary() {
        // mode e^{iθ} on the unit circle evaluated 3e-3 away: closed form known
        let bnd = circle(1.0, 128);
        let d = Density::mode(&bnd, 1);
        let eval = LayerEvaluator::new(&bnd, &d.values);
        let r = 1.0 + 3e-3;
        let v = eval.single_layer(Point::new(r, 0.0)).unwrap();
        let want = Complex64::new(-0.5 / r, 0.0);
        assert!((v - want).norm() < 1e-11, "{v} vs {want}");
        // plain quadrature would be badly aliased here
        let raw = eval_single_layer(&bnd, &d, Point::new(r, 0.0)).unwrap();
        assert!((raw - want).norm() > 1e-4);
    }

    #[test]
    fn jump_relations_on_circle_mode() {
        let bnd = circle(1.0, 256);
        let d = Density::mode(&bnd, 1);
        let report = jump_check(&bnd, &d, &default_jump_offsets(&bnd));
        assert!(
            report.single_exterior <= 1e-4,
            "ext {}",
            report.single_exterior
        );
        assert!(report.max() <= 1e-4, "max {}", report.max());
    }

    #[test]
    fn jump_interior_constant_density_zero_derivative() {
        // φ = 1 on a circle: interior normal derivative (−½ + K*)[1] = 0
        let bnd = circle(1.0, 256);
        let d = Density::new(vec![Complex64::new(1.0, 0.0); bnd.n]);
        let eval = LayerEvaluator::new(&bnd, &d.values);
        let offsets = default_jump_offsets(&bnd);
        let mut samples = Vec::new();
        for &eps in &offsets {
            let g = eval.grad_single_layer(Point::new(1.0 - eps, 0.0)).unwrap();
            samples.push(g[0]);
        }
        let lim = crate::linalg::neville_extrapolate(&offsets, &samples);
        assert!(lim.norm() <= 1e-6, "interior derivative {lim}");
    }

    #[test]
    fn jump_relations_on_ellipse_random_density() {
        let bnd = ellipse(2.0, 1.0, 256);
        let d = random_smooth_density(&bnd, 42, 8);
        let report = jump_check(&bnd, &d, &default_jump_offsets(&bnd));
        assert!(report.max() <= 1e-3, "max {}", report.max());
    }

    #[test]
    fn annulus_matrices_diagonalize_modes_with_small_leakage() {
        let n = 128;
        let inner = circle(1.0, n);
        let outer = circle(2.0, n);
        let mats = [
            assemble_s_self(&inner),
            assemble_kstar_self(&outer),
            assemble_s_cross(&outer, &inner).unwrap(),
            assemble_ds_cross(&inner, &outer).unwrap(),
        ];
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        for mat in &mats {
            for mode in [1_i32, 2, 7, 31, -16] {
                let src = if mat.n_source == inner.n {
                    &inner
                } else {
                    &outer
                };
                let out = mat.apply(&Density::mode(src, mode).values);
                let mut spec = out.clone();
                fft.process(&mut spec);
                let idx = mode.rem_euclid(n as i32) as usize;
                let total: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
                let leak = (total - spec[idx].norm_sqr()).max(0.0).sqrt();
                // normalized against the unit-amplitude input (K* on its own
                // circle annihilates modes, so the image can be ~0)
                let input_norm = (n as f64).sqrt();
                assert!(
                    leak <= 1e-9 * input_norm,
                    "tag {:?} mode {mode}: leakage {leak:.3e}",
                    mat.tag
                );
            }
        }
    }

    #[test]
    fn plemelj_symmetrization_on_one_curve() {
        for bnd in [circle(1.0, 256), ellipse(2.0, 1.0, 256)] {
            let s = assemble_s_self(&bnd).matrix;
            let kstar = assemble_kstar_self(&bnd).matrix;
            let k = assemble_k_self(&bnd).matrix;
            let w = DVector::from_vec(bnd.weights.clone());
            let resid = similarity_scale(&(&s * &kstar - &k * &s), &w);
            let s_norm = spectral_norm(&similarity_scale(&s, &w));
            let r = spectral_norm(&resid);
            assert!(r <= 1e-8 * s_norm, "residual {r:.3e} vs norm {s_norm:.3e}");
        }
    }

    #[test]
    fn discrete_adjoint_duality_is_exact() {
        // ⟨∂/∂ν_i S_e[φ_e], ψ_i⟩_{W_i} = ⟨φ_e, D_i[ψ_i]⟩_{W_e}
        let inner = ellipse(2.0, 1.0, 64);
        let outer = circle(3.0, 96);
        let ds = assemble_ds_cross(&outer, &inner).unwrap();
        let dd = assemble_d_cross(&inner, &outer).unwrap();
        let phi_e = random_smooth_density(&outer, 5, 6);
        let psi_i = random_smooth_density(&inner, 6, 6);
        let lhs = inner_w(&inner.weights, &ds.apply(&phi_e.values), &psi_i.values);
        let rhs = inner_w(&outer.weights, &phi_e.values, &dd.apply(&psi_i.values));
        assert!(
            (lhs - rhs).norm() <= 1e-9 * lhs.norm().max(rhs.norm()),
            "lhs {lhs} rhs {rhs}"
        );
    }

    #[test]
    fn double_layer_of_constants() {
        // D_Γi[1] = 0 on Γe (outside), D_Γe[1] = 1 on Γi (inside)
        let inner = circle(1.0, 128);
        let outer = circle(2.5, 128);
        let ones_i = vec![Complex64::new(1.0, 0.0); inner.n];
        let ones_e = vec![Complex64::new(1.0, 0.0); outer.n];
        let d_i_on_e = assemble_d_cross(&inner, &outer).unwrap().apply(&ones_i);
        let d_e_on_i = assemble_d_cross(&outer, &inner).unwrap().apply(&ones_e);
        assert!(d_i_on_e.iter().all(|c| c.norm() < 1e-12));
        assert!(d_e_on_i
            .iter()
            .all(|c| (c - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    proptest::proptest! {
        #[test]
        fn trig_upsample_exact_on_random_band_limited_data(
            seed in 0u64..1000,
            n_pow in 4u32..7,
            factor_pow in 1u32..4,
        ) {
            let n = 1usize << n_pow;
            let m = n << factor_pow;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let max_mode = (n / 2 - 1) as i32;
            let modes: Vec<(i32, Complex64)> = (1..=max_mode.min(6))
                .map(|k| {
                    (
                        if rng.gen::<bool>() { k } else { -k },
                        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    )
                })
                .collect();
            let f = |t: f64| {
                modes
                    .iter()
                    .map(|&(k, c)| c * Complex64::from_polar(1.0, k as f64 * t))
                    .sum::<Complex64>()
            };
            let coarse: Vec<Complex64> = (0..n)
                .map(|j| f(2.0 * std::f64::consts::PI * j as f64 / n as f64))
                .collect();
            let fine = trig_upsample(&coarse, m);
            for (j, v) in fine.iter().enumerate() {
                let t = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
                proptest::prop_assert!((v - f(t)).norm() < 1e-11);
            }
        }
    }

    #[test]
    fn zero_mean_density_checks() {
        let bnd = circle(1.0, 64);
        assert!(Density::new_zero_mean(Density::mode(&bnd, 3).values, &bnd).is_ok());
        let ones = vec![Complex64::new(1.0, 0.0); bnd.n];
        assert!(matches!(
            Density::new_zero_mean(ones.clone(), &bnd),
            Err(PotentialError::NotZeroMean(_))
        ));
        let (proj, removed) = Density::project_zero_mean(ones, &bnd);
        assert!(removed > 0.0);
        assert!(Density::new_zero_mean(proj.values, &bnd).is_ok());
    }
}
