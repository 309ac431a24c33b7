//! Lorentz-model hyperbolic geometry kernel.
//!
//! Hyperbolic space with curvature `-c < 0` is represented as the upper
//! sheet of the two-sheeted hyperboloid in Minkowski space: the set of
//! points `x = [x_time, x_space]` with `c * <x, x>_L = -1` and
//! `x_time > 0`, where `<x, y>_L = <x_space, y_space> - x_time * y_time`
//! is the Lorentzian inner product.
//!
//! Provided here:
//!
//! * lifting a spatial vector onto the hyperboloid ([`lift`]),
//! * geodesic distance ([`lorentz_distance`]),
//! * the exponential map at the origin ([`exp_map_origin`]), which turns
//!   Euclidean embeddings into tangent vectors at the origin and projects
//!   them onto the manifold,
//! * entailment cones: half-aperture, exterior angle and the hinge
//!   penalty ([`entailment_penalty`]) that is zero exactly when the child
//!   point lies inside the parent's cone,
//! * fused [`Tape`](crate::tape::Tape) operations with hand-derived
//!   adjoints for the batched versions used in training.
//!
//! Numerical policy: arguments of `acosh`, `acos` and `asin` are clamped
//! to their valid domains and gradients are defined as zero through every
//! clamp. The exponential map switches to its series limit for tangent
//! norms below [`SERIES_EPS`].

use ndarray::Array2;
use thiserror::Error;

use crate::tape::{Tape, TensorId, CLAMP_MARGIN};

/// Boundary constant of the entailment-cone half-aperture.
pub const K_APERTURE: f64 = 0.1;

/// Below this tangent norm the exponential map takes its series limit.
pub const SERIES_EPS: f64 = 1e-12;

/// Below this argument the derivative of `sinh(z)/z` uses its series form.
const SINHC_SERIES_Z: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("curvature mismatch: c = {left} vs c = {right}")]
    CurvatureMismatch { left: f64, right: f64 },
    #[error("half-aperture is undefined for a point with zero spatial norm")]
    UndefinedAperture,
    #[error("non-finite input")]
    NonFinite,
}

/// Positive curvature magnitude `c`, parameterized as `c = exp(log_c)` so
/// that positivity holds by construction rather than by clamping.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Curvature {
    log_c: f64,
}

impl Curvature {
    /// Unit curvature, `c = 1`.
    pub const UNIT: Curvature = Curvature { log_c: 0.0 };

    pub fn from_log_c(log_c: f64) -> Result<Self, GeomError> {
        if !log_c.is_finite() {
            return Err(GeomError::NonFinite);
        }
        Ok(Self { log_c })
    }

    pub fn from_c(c: f64) -> Result<Self, GeomError> {
        if !c.is_finite() || c <= 0.0 {
            return Err(GeomError::NonFinite);
        }
        Ok(Self { log_c: c.ln() })
    }

    pub fn log_c(&self) -> f64 {
        self.log_c
    }

    pub fn c(&self) -> f64 {
        self.log_c.exp()
    }

    pub fn sqrt_c(&self) -> f64 {
        (self.log_c / 2.0).exp()
    }
}

/// A point on the hyperboloid, bound to its curvature.
///
/// Invariants (maintained by the constructors): `time > 0` and
/// `c * <x, x>_L = -1` up to round-off. Points constructed through
/// [`lift`] or [`exp_map_origin`] satisfy the constraint by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoint {
    time: f64,
    space: Vec<f64>,
    curvature: Curvature,
}

impl LorentzPoint {
    /// Origin of the hyperboloid: `[1/sqrt(c), 0, ..., 0]`.
    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self { time: 1.0 / curvature.sqrt_c(), space: vec![0.0; dim], curvature }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn space(&self) -> &[f64] {
        &self.space
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    pub fn space_norm(&self) -> f64 {
        self.space.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Residual of the hyperboloid constraint, `c * <x, x>_L + 1`,
    /// normalized by the constraint's own scale `max(1, c * time^2)`. The
    /// raw difference cancels two terms of that magnitude, so only the
    /// normalized residual is meaningful for far-out points.
    pub fn manifold_residual(&self) -> f64 {
        let c = self.curvature.c();
        let raw = c * inner_raw(self.time, &self.space, self.time, &self.space) + 1.0;
        raw / (c * self.time * self.time).max(1.0)
    }
}

/// Angle in radians, restricted to `[0, pi]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Angle {
    radians: f64,
}

impl Angle {
    pub fn from_radians(radians: f64) -> Result<Self, GeomError> {
        if !radians.is_finite() || !(0.0..=std::f64::consts::PI).contains(&radians) {
            return Err(GeomError::NonFinite);
        }
        Ok(Self { radians })
    }

    pub fn radians(&self) -> f64 {
        self.radians
    }
}

/// Exterior angle between a parent's cone axis and the direction to a
/// child, with a degeneracy flag raised when the denominator collapses
/// (numerically coincident points). Degenerate pairs report angle 0 so
/// batched losses never abort mid-training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExteriorAngle {
    pub angle: Angle,
    pub degenerate: bool,
}

// ---------------------------------------------------------------------------
// Raw kernels shared by the safe API and the tape ops.
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn inner_raw(xt: f64, xs: &[f64], yt: f64, ys: &[f64]) -> f64 {
    let dot: f64 = xs.iter().zip(ys).map(|(a, b)| a * b).sum();
    dot - xt * yt
}

/// `sinh(z)/z` with its limit at zero.
#[inline]
fn sinhc(z: f64) -> f64 {
    if z < SERIES_EPS {
        1.0
    } else {
        z.sinh() / z
    }
}

/// Derivative of `sinh(z)/z`; series form below [`SINHC_SERIES_Z`] where
/// the direct expression cancels catastrophically.
#[inline]
fn sinhc_prime(z: f64) -> f64 {
    if z < SINHC_SERIES_Z {
        z / 3.0 + z.powi(3) / 30.0
    } else {
        (z * z.cosh() - z.sinh()) / (z * z)
    }
}

/// Distance from a precomputed Lorentzian inner product. Returns the
/// distance, whether the acosh argument clamped at 1, and whether it fell
/// within [`CLAMP_MARGIN`] of the clamp.
#[inline]
pub(crate) fn distance_from_inner(inner: f64, c: f64) -> (f64, bool, bool) {
    let arg = -c * inner;
    let near = (arg - 1.0).abs() < CLAMP_MARGIN;
    if arg <= 1.0 {
        (0.0, true, near)
    } else {
        (arg.acosh() / c.sqrt(), false, near)
    }
}

struct ApertureRaw {
    angle: f64,
    /// Sine argument clamped at 1 (point close to the origin).
    clamped: bool,
    near_clamp: bool,
    /// `2K / (sqrt(c) * ||y_space||)`, pre-clamp.
    w: f64,
}

fn aperture_raw(space_norm: f64, c: f64) -> Result<ApertureRaw, GeomError> {
    if space_norm <= 0.0 {
        return Err(GeomError::UndefinedAperture);
    }
    let w = 2.0 * K_APERTURE / (c.sqrt() * space_norm);
    let near_clamp = (w - 1.0).abs() < CLAMP_MARGIN;
    if w >= 1.0 {
        Ok(ApertureRaw { angle: std::f64::consts::FRAC_PI_2, clamped: true, near_clamp, w })
    } else {
        Ok(ApertureRaw { angle: w.asin(), clamped: false, near_clamp, w })
    }
}

struct ExtRaw {
    angle: f64,
    /// Cosine after clamping to `[-1, 1]`.
    rho: f64,
    clamped: bool,
    near_clamp: bool,
    degenerate: bool,
    inner: f64,
    den: f64,
    /// `sqrt((c * inner)^2 - 1)`; zero when degenerate.
    q: f64,
}

/// Exterior angle at parent `y` toward child `x`, both on the hyperboloid
/// with curvature magnitude `c`. Coincident coordinates and collapsed
/// denominators report the degenerate case (angle 0, zero gradient).
fn ext_raw(yt: f64, ys: &[f64], xt: f64, xs: &[f64], c: f64) -> ExtRaw {
    let inner = inner_raw(yt, ys, xt, xs);
    let ci = c * inner;
    let d2 = ci * ci - 1.0;
    if d2 <= 0.0 || (yt == xt && ys == xs) {
        return ExtRaw {
            angle: 0.0,
            rho: 0.0,
            clamped: false,
            near_clamp: false,
            degenerate: true,
            inner,
            den: 0.0,
            q: 0.0,
        };
    }
    let ny: f64 = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = d2.sqrt();
    let num = xt + yt * ci;
    let den = ny * q;
    let rho_raw = num / den;
    let rho = rho_raw.clamp(-1.0, 1.0);
    let clamped = rho_raw.abs() >= 1.0;
    let near_clamp = (rho_raw.abs() - 1.0).abs() < CLAMP_MARGIN;
    ExtRaw { angle: rho.acos(), rho, clamped, near_clamp, degenerate: false, inner, den, q }
}

// ---------------------------------------------------------------------------
// Public operations.
// ---------------------------------------------------------------------------

/// Lorentzian inner product `<x, y>_L`.
///
/// For valid points sharing curvature `c` the result is at most `-1/c`.
pub fn lorentz_inner(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64, GeomError> {
    if x.dim() != y.dim() {
        return Err(GeomError::DimensionMismatch { left: x.dim(), right: y.dim() });
    }
    Ok(inner_raw(x.time, &x.space, y.time, &y.space))
}

/// Lorentzian inner product of raw `(time, space)` coordinates.
pub fn lorentz_inner_raw(
    x_time: f64,
    x_space: &[f64],
    y_time: f64,
    y_space: &[f64],
) -> Result<f64, GeomError> {
    if x_space.len() != y_space.len() {
        return Err(GeomError::DimensionMismatch { left: x_space.len(), right: y_space.len() });
    }
    Ok(inner_raw(x_time, x_space, y_time, y_space))
}

/// Lift a spatial vector onto the hyperboloid:
/// `time = sqrt(1/c + ||space||^2)`.
pub fn lift(space: &[f64], curvature: Curvature) -> LorentzPoint {
    let c = curvature.c();
    let norm_sq: f64 = space.iter().map(|x| x * x).sum();
    LorentzPoint { time: (1.0 / c + norm_sq).sqrt(), space: space.to_vec(), curvature }
}

/// Geodesic distance `sqrt(1/c) * acosh(-c * <x, y>_L)`.
///
/// Coincident coordinates return 0 exactly; otherwise round-off can push
/// the acosh argument below 1 and it is clamped to 1 (distance 0).
pub fn lorentz_distance(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64, GeomError> {
    if x.curvature != y.curvature {
        return Err(GeomError::CurvatureMismatch { left: x.curvature.c(), right: y.curvature.c() });
    }
    if x.time == y.time && x.space == y.space {
        return Ok(0.0);
    }
    let inner = lorentz_inner(x, y)?;
    Ok(distance_from_inner(inner, x.curvature.c()).0)
}

/// Exponential map at the origin: interprets a Euclidean vector as a
/// tangent vector at the origin and projects it onto the hyperboloid,
/// `space = sinh(sqrt(c) * ||v||) / (sqrt(c) * ||v||) * v`, time from
/// [`lift`]. Total on finite input; the series limit handles `||v|| -> 0`.
pub fn exp_map_origin(v: &[f64], curvature: Curvature) -> LorentzPoint {
    let r: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let g = sinhc(curvature.sqrt_c() * r);
    let space: Vec<f64> = v.iter().map(|x| g * x).collect();
    lift(&space, curvature)
}

/// Half-aperture of the entailment cone at `y`:
/// `asin(min(1, 2K / (sqrt(c) * ||y_space||)))` with `K = 0.1`.
///
/// Errors with [`GeomError::UndefinedAperture`] at the origin.
pub fn half_aperture(y: &LorentzPoint) -> Result<Angle, GeomError> {
    let raw = aperture_raw(y.space_norm(), y.curvature.c())?;
    Angle::from_radians(raw.angle)
}

/// Exterior angle at parent `y` toward child `x`, the angle used by the
/// cone-membership test. The acos argument is clamped to `[-1, 1]`.
pub fn exterior_angle(y: &LorentzPoint, x: &LorentzPoint) -> Result<ExteriorAngle, GeomError> {
    if x.curvature != y.curvature {
        return Err(GeomError::CurvatureMismatch { left: y.curvature.c(), right: x.curvature.c() });
    }
    if x.dim() != y.dim() {
        return Err(GeomError::DimensionMismatch { left: y.dim(), right: x.dim() });
    }
    let raw = ext_raw(y.time, &y.space, x.time, &x.space, y.curvature.c());
    Ok(ExteriorAngle { angle: Angle::from_radians(raw.angle)?, degenerate: raw.degenerate })
}

/// Entailment penalty `max(0, ext(parent, child) - aper(parent))`.
///
/// Zero exactly when the child lies inside or on the parent's cone.
pub fn entailment_penalty(parent: &LorentzPoint, child: &LorentzPoint) -> Result<f64, GeomError> {
    let aper = half_aperture(parent)?;
    let ext = exterior_angle(parent, child)?;
    Ok((ext.angle.radians() - aper.radians()).max(0.0))
}

// ---------------------------------------------------------------------------
// Fused tape operations.
//
// Point tensors are laid out as `B x (d+1)` with column 0 the time
// component and columns `1..` the spatial component.
// ---------------------------------------------------------------------------

fn split_point_row(row: ndarray::ArrayView1<'_, f64>) -> (f64, Vec<f64>) {
    (row[0], row.iter().skip(1).copied().collect())
}

impl Tape {
    /// Batched exponential map at the origin followed by the hyperboloid
    /// lift. `v` is `B x d`; the result is `B x (d+1)` with time in
    /// column 0. Differentiable in `v` and `log_c`.
    pub fn exp_map_rows(&mut self, v: TensorId, log_c: TensorId) -> TensorId {
        let vv = self.value(v).clone();
        let c = self.scalar(log_c).exp();
        let s = c.sqrt();
        let (b, d) = vv.dim();

        let mut out = Array2::zeros((b, d + 1));
        // Saved per row: (r, z, g, time).
        let mut saved = Vec::with_capacity(b);
        for i in 0..b {
            let row = vv.row(i);
            let r = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let z = s * r;
            let g = sinhc(z);
            let mut q = 0.0;
            for k in 0..d {
                let sk = g * row[k];
                out[[i, k + 1]] = sk;
                q += sk * sk;
            }
            let time = (1.0 / c + q).sqrt();
            out[[i, 0]] = time;
            saved.push((r, z, g, time));
        }

        self.push(
            out.clone(),
            vec![v, log_c],
            Some(Box::new(move |grad| {
                let mut dv = Array2::zeros((b, d));
                let mut dc_total = 0.0;
                for i in 0..b {
                    let (r, z, g, time) = saved[i];
                    let g_time = grad[[i, 0]];
                    // Fold the time adjoint into the spatial adjoint:
                    // time = sqrt(1/c + ||space||^2).
                    let mut h = vec![0.0; d];
                    let mut h_dot_v = 0.0;
                    for k in 0..d {
                        let space_k = out[[i, k + 1]];
                        h[k] = grad[[i, k + 1]] + g_time * space_k / time;
                        h_dot_v += h[k] * vv[[i, k]];
                    }
                    // d time / d c at fixed space.
                    let mut dc = g_time * (-1.0 / (2.0 * c * c * time));
                    if r >= SERIES_EPS {
                        let gp = sinhc_prime(z);
                        let coeff = gp * s / r;
                        for k in 0..d {
                            dv[[i, k]] += g * h[k] + coeff * h_dot_v * vv[[i, k]];
                        }
                        // space = g(z) * v with z = sqrt(c) * r.
                        dc += h_dot_v * gp * z / (2.0 * c);
                    } else {
                        for k in 0..d {
                            dv[[i, k]] += h[k];
                        }
                    }
                    dc_total += dc;
                }
                vec![dv, Array2::from_elem((1, 1), dc_total * c)]
            })),
        )
    }

    /// Pairwise geodesic distances between two batches of hyperboloid
    /// points: `D[i, j] = d(p_i, q_j)`, `p: B1 x (d+1)`, `q: B2 x (d+1)`.
    /// Entries whose acosh argument clamps at 1 have zero gradient.
    pub fn lorentz_distance_matrix(&mut self, p: TensorId, q: TensorId, log_c: TensorId) -> TensorId {
        let pv = self.value(p).clone();
        let qv = self.value(q).clone();
        assert_eq!(pv.ncols(), qv.ncols(), "point width mismatch");
        let c = self.scalar(log_c).exp();
        let s = c.sqrt();
        let (b1, b2) = (pv.nrows(), qv.nrows());
        let d1 = pv.ncols();

        // inner = P_space . Q_space^T - p_time (x) q_time
        let p_space = pv.slice(ndarray::s![.., 1..]);
        let q_space = qv.slice(ndarray::s![.., 1..]);
        let mut inner = p_space.dot(&q_space.t());
        for i in 0..b1 {
            for j in 0..b2 {
                inner[[i, j]] -= pv[[i, 0]] * qv[[j, 0]];
            }
        }

        let mut dist = Array2::zeros((b1, b2));
        let mut arg = Array2::zeros((b1, b2));
        let mut near = 0usize;
        for i in 0..b1 {
            for j in 0..b2 {
                let a = -c * inner[[i, j]];
                arg[[i, j]] = a;
                let (dv, _, near_clamp) = distance_from_inner(inner[[i, j]], c);
                dist[[i, j]] = dv;
                if near_clamp {
                    near += 1;
                }
            }
        }
        self.clamp_events.distance += near;

        let dist_saved = dist.clone();
        self.push(
            dist,
            vec![p, q, log_c],
            Some(Box::new(move |grad| {
                // u = dL/d(inner); chain through d = acosh(-c * inner)/sqrt(c).
                let mut u = Array2::zeros((b1, b2));
                let mut dc_total = 0.0;
                for i in 0..b1 {
                    for j in 0..b2 {
                        let a: f64 = arg[[i, j]];
                        if a <= 1.0 {
                            continue;
                        }
                        let root = (a * a - 1.0).sqrt();
                        let g = grad[[i, j]];
                        u[[i, j]] = g * (-c) / (s * root);
                        dc_total +=
                            g * (-dist_saved[[i, j]] / (2.0 * c) + a / (c * s * root));
                    }
                }
                let mut dp = Array2::zeros((b1, d1));
                let mut dq = Array2::zeros((b2, d1));
                {
                    let p_space = pv.slice(ndarray::s![.., 1..]);
                    let q_space = qv.slice(ndarray::s![.., 1..]);
                    dp.slice_mut(ndarray::s![.., 1..]).assign(&u.dot(&q_space));
                    dq.slice_mut(ndarray::s![.., 1..]).assign(&u.t().dot(&p_space));
                }
                for i in 0..b1 {
                    let mut acc = 0.0;
                    for j in 0..b2 {
                        acc += u[[i, j]] * qv[[j, 0]];
                    }
                    dp[[i, 0]] = -acc;
                }
                for j in 0..b2 {
                    let mut acc = 0.0;
                    for i in 0..b1 {
                        acc += u[[i, j]] * pv[[i, 0]];
                    }
                    dq[[j, 0]] = -acc;
                }
                vec![dp, dq, Array2::from_elem((1, 1), dc_total * c)]
            })),
        )
    }

    /// Mean entailment penalty over paired rows: parent `i` must entail
    /// child `i`. Returns a `1x1` scalar. Errors when any parent sits at
    /// the origin (undefined aperture).
    pub fn entailment_mean(
        &mut self,
        parent: TensorId,
        child: TensorId,
        log_c: TensorId,
    ) -> Result<TensorId, GeomError> {
        let pv = self.value(parent).clone();
        let cv = self.value(child).clone();
        assert_eq!(pv.dim(), cv.dim(), "parent/child shape mismatch");
        let c = self.scalar(log_c).exp();
        let b = pv.nrows();
        let width = pv.ncols();
        let d = width - 1;

        struct RowState {
            active: bool,
            ext: ExtRaw,
            aper: ApertureRaw,
            ny: f64,
        }
        let mut rows = Vec::with_capacity(b);
        let mut total = 0.0;
        for i in 0..b {
            let (yt, ys) = split_point_row(pv.row(i));
            let (xt, xs) = split_point_row(cv.row(i));
            let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let aper = aperture_raw(ny, c)?;
            let ext = ext_raw(yt, &ys, xt, &xs, c);
            if ext.degenerate {
                self.clamp_events.degenerate += 1;
            }
            if ext.near_clamp {
                self.clamp_events.exterior += 1;
            }
            if aper.near_clamp {
                self.clamp_events.aperture += 1;
            }
            let gap = ext.angle - aper.angle;
            if gap.abs() < CLAMP_MARGIN {
                self.clamp_events.penalty_kink += 1;
            }
            let pen = gap.max(0.0);
            total += pen;
            rows.push(RowState { active: pen > 0.0 && !ext.degenerate, ext, aper, ny });
        }
        let value = Array2::from_elem((1, 1), total / b as f64);

        Ok(self.push(
            value,
            vec![parent, child, log_c],
            Some(Box::new(move |grad| {
                let scale = grad[[0, 0]] / b as f64;
                let mut dp = Array2::zeros((b, width));
                let mut dchild = Array2::zeros((b, width));
                let mut dc_total = 0.0;
                for (i, st) in rows.iter().enumerate() {
                    if !st.active {
                        continue;
                    }
                    let (yt, ys) = split_point_row(pv.row(i));
                    let (xt, xs) = split_point_row(cv.row(i));

                    // ext = acos(rho), rho = num / den; zero grad if clamped.
                    if !st.ext.clamped {
                        let rho = st.ext.rho;
                        let inv_sq = 1.0 / (1.0 - rho * rho).sqrt();
                        let den = st.ext.den;
                        let q = st.ext.q;
                        let inner = st.ext.inner;
                        // dL/d num and dL/d den through ext.
                        let d_num = scale * (-inv_sq) / den;
                        let d_den = scale * inv_sq * rho / den;
                        // num = x_t + y_t * c * inner
                        // den = ||y_s|| * sqrt((c * inner)^2 - 1)
                        let w_inner = st.ny * c * c * inner / q;
                        for k in 0..d {
                            // d num/d x_s = c y_t y_s ; d den/d x_s = w ys
                            dchild[[i, k + 1]] += d_num * c * yt * ys[k] + d_den * w_inner * ys[k];
                            // d num/d y_s = c y_t x_s ;
                            // d den/d y_s = q * ys/ny + w * xs
                            dp[[i, k + 1]] += d_num * c * yt * xs[k]
                                + d_den * (q * ys[k] / st.ny + w_inner * xs[k]);
                        }
                        dchild[[i, 0]] += d_num * (1.0 - c * yt * yt) + d_den * w_inner * (-yt);
                        dp[[i, 0]] += d_num * c * (inner - yt * xt) + d_den * w_inner * (-xt);
                        // Explicit curvature dependence of num and den.
                        dc_total += d_num * yt * inner + d_den * st.ny * c * inner * inner / q;
                    }
                    // pen subtracts aper; zero grad if the asin clamped.
                    if !st.aper.clamped {
                        let w = st.aper.w;
                        let da_dw = 1.0 / (1.0 - w * w).sqrt();
                        let coeff = -scale * da_dw; // d pen = -d aper
                        let dw_dny = -w / st.ny;
                        for k in 0..d {
                            dp[[i, k + 1]] += coeff * dw_dny * ys[k] / st.ny;
                        }
                        dc_total += coeff * (-w / (2.0 * c));
                    }
                }
                vec![dp, dchild, Array2::from_elem((1, 1), dc_total * c)]
            })),
        ))
    }
}
