//! Scalar reparameterization functions `w = psi(v)`.
//!
//! The weight compander is `psi(v) = a * atan(v / b)`. The odd S-shaped
//! alternatives (`asinh`, `erf`), powerpropagation and the identity map share
//! the same interface. Weight normalization acts on whole rows and is exposed
//! through [`weight_norm_materialize`] instead of the scalar functions.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower clamp applied to learnable `a` and `b` after every update.
pub const LEARNABLE_AB_MIN: f64 = 0.05;
/// Smallest `a`, `b` recommended for fixed hyperparameters.
pub const FIXED_AB_MIN: f64 = 0.5;

/// `pi/2 - FRAC_PI_2`, the part of pi/2 an f64 cannot hold.
const FRAC_PI_2_LO: f64 = 6.123_233_995_736_766e-17;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReparamKind {
    Identity,
    Arctan,
    Arcsinh,
    Erf,
    Powerprop { alpha: f64 },
    WeightNorm,
}

impl fmt::Display for ReparamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReparamKind::Identity => write!(f, "identity"),
            ReparamKind::Arctan => write!(f, "arctan"),
            ReparamKind::Arcsinh => write!(f, "arcsinh"),
            ReparamKind::Erf => write!(f, "erf"),
            ReparamKind::Powerprop { alpha } => write!(f, "powerprop(alpha={alpha})"),
            ReparamKind::WeightNorm => write!(f, "weight_norm"),
        }
    }
}

impl ReparamKind {
    /// Whether `psi` acts on each weight independently.
    pub fn is_elementwise(&self) -> bool {
        !matches!(self, ReparamKind::WeightNorm)
    }

    /// Whether `a` and `b` enter the map.
    pub fn uses_ab(&self) -> bool {
        matches!(
            self,
            ReparamKind::Arctan | ReparamKind::Arcsinh | ReparamKind::Erf
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbMode {
    #[default]
    Fixed,
    Learnable,
}

/// Sharing scope of learnable `(a, b)`: one pair for the network (coarse)
/// or one pair per reparameterized layer (fine).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbScope {
    #[default]
    Global,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamParams {
    #[serde(default = "unit")]
    pub a: f64,
    #[serde(default = "unit")]
    pub b: f64,
    #[serde(default)]
    pub mode: AbMode,
    #[serde(default)]
    pub scope: AbScope,
}

fn unit() -> f64 {
    1.0
}

impl Default for ReparamParams {
    fn default() -> Self {
        ReparamParams::fixed(1.0, 1.0)
    }
}

impl ReparamParams {
    pub fn fixed(a: f64, b: f64) -> Self {
        ReparamParams {
            a,
            b,
            mode: AbMode::Fixed,
            scope: AbScope::Global,
        }
    }

    pub fn learnable(a: f64, b: f64, scope: AbScope) -> Self {
        ReparamParams {
            a,
            b,
            mode: AbMode::Learnable,
            scope,
        }
    }

    pub fn with_ab(self, a: f64, b: f64) -> Self {
        ReparamParams { a, b, ..self }
    }

    /// Hard validity of `(a, b)` for `kind`; out-of-range values are errors.
    pub fn check(&self, kind: &ReparamKind) -> Result<()> {
        match kind {
            ReparamKind::Powerprop { alpha } => {
                if !(alpha.is_finite() && *alpha >= 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "powerprop needs alpha >= 1, got {alpha}"
                    )));
                }
            }
            k if k.uses_ab() => {
                let lo = match self.mode {
                    AbMode::Fixed => 0.0,
                    AbMode::Learnable => LEARNABLE_AB_MIN,
                };
                for (name, x) in [("a", self.a), ("b", self.b)] {
                    let ok = x.is_finite()
                        && match self.mode {
                            AbMode::Fixed => x > lo,
                            AbMode::Learnable => x >= lo,
                        };
                    if !ok {
                        return Err(Error::InvalidInput(format!(
                            "{name} = {x} is not a valid {:?} parameter for {k}",
                            self.mode
                        )));
                    }
                }
            }
            _ => {}
        }
        if self.mode == AbMode::Learnable && *kind != ReparamKind::Arctan {
            return Err(Error::UnsupportedKind {
                kind: kind.to_string(),
                what: "learnable a, b".into(),
            });
        }
        Ok(())
    }
}

/// Which map, with which parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamSpec {
    #[serde(flatten)]
    pub kind: ReparamKind,
    #[serde(flatten)]
    pub params: ReparamParams,
}

impl ReparamSpec {
    pub fn identity() -> Self {
        ReparamSpec {
            kind: ReparamKind::Identity,
            params: ReparamParams::default(),
        }
    }

    pub fn arctan(a: f64, b: f64) -> Self {
        ReparamSpec {
            kind: ReparamKind::Arctan,
            params: ReparamParams::fixed(a, b),
        }
    }

    pub fn learnable_arctan(a: f64, b: f64, scope: AbScope) -> Self {
        ReparamSpec {
            kind: ReparamKind::Arctan,
            params: ReparamParams::learnable(a, b, scope),
        }
    }

    pub fn new(kind: ReparamKind, params: ReparamParams) -> Self {
        ReparamSpec { kind, params }
    }

    pub fn is_learnable(&self) -> bool {
        self.params.mode == AbMode::Learnable
    }

    /// Validates the spec. Fixed `a` or `b` below 0.5 are accepted with a
    /// warning since they tend to hurt accuracy but are well defined.
    pub fn validate(&self) -> Result<()> {
        self.params.check(&self.kind)?;
        if self.kind.uses_ab()
            && self.params.mode == AbMode::Fixed
            && (self.params.a < FIXED_AB_MIN || self.params.b < FIXED_AB_MIN)
        {
            log::warn!(
                "{}: a = {}, b = {} below the recommended minimum {FIXED_AB_MIN}",
                self.kind,
                self.params.a,
                self.params.b
            );
        }
        Ok(())
    }

    pub fn map(&self) -> Result<ScalarMap> {
        ScalarMap::new(self.kind, self.params.a, self.params.b)
    }
}

/// A validated elementwise map with its parameters resolved, for hot loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMap {
    kind: ReparamKind,
    a: f64,
    b: f64,
}

impl ScalarMap {
    pub fn new(kind: ReparamKind, a: f64, b: f64) -> Result<Self> {
        if !kind.is_elementwise() {
            return Err(Error::UnsupportedKind {
                kind: kind.to_string(),
                what: "elementwise evaluation".into(),
            });
        }
        ReparamParams::fixed(a, b).check(&kind)?;
        Ok(ScalarMap { kind, a, b })
    }

    pub fn identity() -> Self {
        ScalarMap {
            kind: ReparamKind::Identity,
            a: 1.0,
            b: 1.0,
        }
    }

    pub fn kind(&self) -> ReparamKind {
        self.kind
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn value(&self, v: f64) -> f64 {
        let (a, b) = (self.a, self.b);
        match self.kind {
            ReparamKind::Identity | ReparamKind::WeightNorm => v,
            ReparamKind::Arctan => {
                let t = (v / b).atan();
                let w = a * t;
                // Rounding a * FRAC_PI_2 can land on or above the bound.
                if t.abs() > 1.5 && !inside_arctan_bound(a, w) {
                    let mut m = w.abs().min(a * FRAC_PI_2).next_down();
                    while !inside_arctan_bound(a, m) {
                        m = m.next_down();
                    }
                    m.copysign(w)
                } else {
                    w
                }
            }
            ReparamKind::Arcsinh => a * (v / b).asinh(),
            ReparamKind::Erf => {
                let w = a * libm::erf(v / b);
                if w.abs() >= a {
                    a.next_down().copysign(w)
                } else {
                    w
                }
            }
            ReparamKind::Powerprop { alpha } => v * v.abs().powf(alpha - 1.0),
        }
    }

    pub fn derivative(&self, v: f64) -> f64 {
        let (a, b) = (self.a, self.b);
        match self.kind {
            ReparamKind::Identity | ReparamKind::WeightNorm => 1.0,
            ReparamKind::Arctan => a / (b * (1.0 + (v / b) * (v / b))),
            ReparamKind::Arcsinh => a / (b * (1.0 + (v / b) * (v / b)).sqrt()),
            ReparamKind::Erf => 2.0 * a / (b * PI.sqrt()) * (-(v / b) * (v / b)).exp(),
            ReparamKind::Powerprop { alpha } => alpha * v.abs().powf(alpha - 1.0),
        }
    }

    /// Inverse map; `w` must lie inside the image of the map.
    pub fn inverse(&self, w: f64) -> Result<f64> {
        if !w.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite weight {w}")));
        }
        let (a, b) = (self.a, self.b);
        match self.kind {
            ReparamKind::Identity | ReparamKind::WeightNorm => Ok(w),
            ReparamKind::Arctan => {
                if !inside_arctan_bound(a, w) {
                    return Err(Error::Domain {
                        kind: self.kind.to_string(),
                        value: w,
                        bound: format!("|w| < a*pi/2 = {}", a * FRAC_PI_2),
                    });
                }
                Ok(b * (w / a).tan())
            }
            ReparamKind::Arcsinh => Ok(b * (w / a).sinh()),
            ReparamKind::Erf => {
                if w.abs() >= a {
                    return Err(Error::Domain {
                        kind: self.kind.to_string(),
                        value: w,
                        bound: format!("|w| < a = {a}"),
                    });
                }
                Ok(b * erf_inv(w / a))
            }
            ReparamKind::Powerprop { alpha } => Ok(w.abs().powf(1.0 / alpha).copysign(w)),
        }
    }

    /// `(d psi / d a, d psi / d b)`; defined for the arctan map only.
    pub fn grad_ab(&self, v: f64) -> Result<(f64, f64)> {
        if self.kind != ReparamKind::Arctan {
            return Err(Error::UnsupportedKind {
                kind: self.kind.to_string(),
                what: "gradient with respect to a, b".into(),
            });
        }
        Ok(self.grad_ab_unchecked(v))
    }

    #[inline]
    pub(crate) fn grad_ab_unchecked(&self, v: f64) -> (f64, f64) {
        let (a, b) = (self.a, self.b);
        ((v / b).atan(), -a * v / (b * b + v * v))
    }

    /// Supremum of `|psi|`, if the map is bounded.
    pub fn bound(&self) -> Option<f64> {
        match self.kind {
            ReparamKind::Arctan => Some(self.a * FRAC_PI_2),
            ReparamKind::Erf => Some(self.a),
            _ => None,
        }
    }

    /// Whether `w` lies strictly inside the image of the map.
    pub fn in_image(&self, w: f64) -> bool {
        match self.kind {
            ReparamKind::Arctan => inside_arctan_bound(self.a, w),
            ReparamKind::Erf => w.abs() < self.a,
            _ => w.is_finite(),
        }
    }
}

/// `|w| < a * pi / 2`, both for the real number `a pi / 2` and for its
/// rounded value `a * FRAC_PI_2`.
pub fn inside_arctan_bound(a: f64, w: f64) -> bool {
    // a*FRAC_PI_2 - |w| to one rounding, plus the a*lo tail of pi/2.
    let residual = a.mul_add(FRAC_PI_2, -w.abs());
    residual + a * FRAC_PI_2_LO > 0.0 && w.abs() < a * FRAC_PI_2
}

fn check_scalar(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite input {v}")))
    }
}

pub fn psi(kind: ReparamKind, params: &ReparamParams, v: f64) -> Result<f64> {
    check_scalar(v)?;
    Ok(ScalarMap::new(kind, params.a, params.b)?.value(v))
}

pub fn psi_prime(kind: ReparamKind, params: &ReparamParams, v: f64) -> Result<f64> {
    check_scalar(v)?;
    Ok(ScalarMap::new(kind, params.a, params.b)?.derivative(v))
}

pub fn psi_inverse(kind: ReparamKind, params: &ReparamParams, w: f64) -> Result<f64> {
    ScalarMap::new(kind, params.a, params.b)?.inverse(w)
}

pub fn psi_grad_ab(kind: ReparamKind, params: &ReparamParams, v: f64) -> Result<(f64, f64)> {
    check_scalar(v)?;
    ScalarMap::new(kind, params.a, params.b)?.grad_ab(v)
}

/// Inverse error function on `(-1, 1)`: rational initial guess refined by
/// Newton steps on `erf`.
pub fn erf_inv(y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    if y.abs() >= 1.0 {
        return f64::INFINITY.copysign(y);
    }
    // Giles' single-precision approximation as the starting point.
    let w = -((1.0 - y) * (1.0 + y)).ln();
    let mut x = if w < 5.0 {
        let w = w - 2.5;
        let mut p = 2.810_226_36e-08;
        for c in [
            3.432_739_39e-07,
            -3.523_387_7e-06,
            -4.391_506_54e-06,
            0.000_218_580_87,
            -0.001_253_725_03,
            -0.004_177_681_64,
            0.246_640_727,
            1.501_409_41,
        ] {
            p = c + p * w;
        }
        p * y
    } else {
        let w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        for c in [
            0.000_100_950_558,
            0.001_349_343_22,
            -0.003_673_428_44,
            0.005_739_507_73,
            -0.007_622_461_3,
            0.009_438_870_47,
            1.001_674_06,
            2.832_976_82,
        ] {
            p = c + p * w;
        }
        p * y
    };
    let scale = 2.0 / PI.sqrt();
    for _ in 0..3 {
        let err = libm::erf(x) - y;
        let slope = scale * (-x * x).exp();
        if slope == 0.0 {
            break;
        }
        x -= err / slope;
    }
    x
}

/// Rowwise weight normalization `w_r = g_r * v_r / ||v_r||`, where a row is
/// one output unit (`shape[0]` rows).
pub fn weight_norm_materialize<T: Real>(v: &Tensor<T>, g: &[T]) -> Result<Tensor<T>> {
    let rows = v.rows();
    if g.len() != rows {
        return Err(Error::Dimension {
            layer: "weight_norm".into(),
            detail: format!("{} gains for {rows} rows", g.len()),
        });
    }
    let cols = v.row_len();
    let mut out = Vec::with_capacity(v.len());
    for (r, row) in v.data().chunks(cols).enumerate() {
        let norm = row_norm(row);
        if norm == T::zero() {
            return Err(Error::DegenerateDirection { row: r });
        }
        let scale = g[r] / norm;
        out.extend(row.iter().map(|&x| scale * x));
    }
    Tensor::new(v.shape().to_vec(), out)
}

pub(crate) fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|&x| x * x).sum::<T>().sqrt()
}
