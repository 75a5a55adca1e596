use statrs::function::factorial::ln_factorial;
use statrs::function::gamma::ln_gamma;

use super::{
    CountModelError, Dataset, FeatureVector, Information, ModelKind, ModelParams, Result, Score, MAX_LOG_MEAN,
};
use crate::linalg::{dot, Matrix};
use crate::scalar::{log_add_exp, sigmoid, softplus, Scalar};

/// Linear predictor `φᵀθ`, rejecting dimension mismatches.
#[inline]
pub(crate) fn predictor<T: Scalar>(phi: &[T], theta: &[T], index: usize) -> Result<T> {
    if phi.len() != theta.len() {
        return Err(CountModelError::DimensionMismatch {
            index,
            expected: theta.len(),
            found: phi.len(),
        });
    }
    Ok(dot(phi, theta))
}

/// `φᵀβ` checked against the `exp` cap.
#[inline]
pub(crate) fn log_mean<T: Scalar>(phi: &[T], beta: &[T], index: usize) -> Result<T> {
    let eta = predictor(phi, beta, index)?;
    if !eta.is_finite() || eta > T::of(MAX_LOG_MEAN) {
        return Err(CountModelError::NonFinite {
            index,
            log_mean: eta.f64(),
        });
    }
    Ok(eta)
}

/// `ln Γ(y + r) − ln Γ(r)`; exact product form for small counts.
pub(crate) fn ln_gamma_ratio<T: Scalar>(y: u64, r: T) -> T {
    if y <= 64 {
        (0..y).map(|k| (r + T::of(k as f64)).ln()).sum()
    } else {
        let rf = r.f64();
        T::of(ln_gamma(y as f64 + rf) - ln_gamma(rf))
    }
}

/// `ψ(y + r) − ψ(r)`.
pub(crate) fn digamma_diff<T: Scalar>(y: u64, r: T) -> T {
    if y <= 64 {
        (0..y).map(|k| (r + T::of(k as f64)).recip()).sum()
    } else {
        let rf = r.f64();
        T::of(statrs::function::gamma::digamma(y as f64 + rf) - statrs::function::gamma::digamma(rf))
    }
}

#[inline]
pub(crate) fn ln_factorial_t<T: Scalar>(y: u64) -> T {
    T::of(ln_factorial(y))
}

/// Log-pmf of the count component (Poisson, or NB when `r` is given).
#[inline]
pub(crate) fn count_log_pmf<T: Scalar>(y: u64, eta: T, r: Option<T>) -> T {
    let yt = T::of(y as f64);
    match r {
        None => yt * eta - eta.exp() - ln_factorial_t(y),
        Some(r) => {
            let log_r_mu = log_add_exp(r.ln(), eta);
            ln_gamma_ratio(y, r) - ln_factorial_t(y) + yt * (eta - log_r_mu) + r * (r.ln() - log_r_mu)
        }
    }
}

/// Log-probability of a zero from the count component.
#[inline]
fn count_log_p0<T: Scalar>(eta: T, r: Option<T>) -> T {
    match r {
        None => -eta.exp(),
        Some(r) => r * (r.ln() - log_add_exp(r.ln(), eta)),
    }
}

/// First and second η-derivatives of the count log-pmf, returned as
/// `(score, information)` with information = −second derivative.
#[inline]
pub(crate) fn count_derivs<T: Scalar>(y: u64, eta: T, r: Option<T>) -> (T, T) {
    let mu = eta.exp();
    let yt = T::of(y as f64);
    match r {
        None => (yt - mu, mu),
        Some(r) => {
            let denom = r + mu;
            (r * (yt - mu) / denom, r * (r + yt) * mu / (denom * denom))
        }
    }
}

/// Observed-data log-likelihood contribution of one observation.
#[inline]
pub(crate) fn obs_loglik<T: Scalar>(y: u64, eta_b: T, eta_g: Option<T>, r: Option<T>) -> T {
    match eta_g {
        None => count_log_pmf(y, eta_b, r),
        Some(eg) if y == 0 => log_add_exp(eg, count_log_p0(eta_b, r)) - softplus(eg),
        Some(eg) => count_log_pmf(y, eta_b, r) - softplus(eg),
    }
}

/// Posterior probability that a zero came from the structural-zero state.
#[inline]
pub(crate) fn responsibility<T: Scalar>(y: u64, eta_b: T, eta_g: T, r: Option<T>) -> T {
    if y > 0 {
        return T::zero();
    }
    let z = (eta_g - log_add_exp(eta_g, count_log_p0(eta_b, r))).exp();
    z.max(T::zero()).min(T::one())
}

/// Per-observation derivative weights: the score of β is `sb·φ`, its
/// information is `ib·φφᵀ`, and likewise for γ.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ObsDerivs<T> {
    pub sb: T,
    pub ib: T,
    pub sg: T,
    pub ig: T,
    /// `−∂²ℓ/∂η_b∂η_g`; zero outside the zero-inflated models.
    pub ibg: T,
}

#[inline]
pub(crate) fn obs_derivs<T: Scalar>(y: u64, eta_b: T, eta_g: Option<T>, r: Option<T>) -> ObsDerivs<T> {
    let (sc, gc) = count_derivs(y, eta_b, r);
    match eta_g {
        None => ObsDerivs {
            sb: sc,
            ib: gc,
            sg: T::zero(),
            ig: T::zero(),
            ibg: T::zero(),
        },
        Some(eg) => {
            let z = responsibility(y, eta_b, eg, r);
            let p = sigmoid(eg);
            let w = T::one() - z;
            ObsDerivs {
                sb: w * sc,
                ib: w * gc - z * w * sc * sc,
                sg: z - p,
                ig: p * (T::one() - p) - z * w,
                ibg: z * w * sc,
            }
        }
    }
}

/// Linear predictors of every observation.
pub(crate) fn predictors<T: Scalar>(data: &Dataset<T>, params: &ModelParams<T>) -> Result<Vec<(T, Option<T>)>> {
    data.iter()
        .enumerate()
        .map(|(i, o)| {
            let eb = log_mean(&o.phi, &params.beta, i)?;
            let eg = match &params.gamma {
                Some(g) => Some(predictor(&o.phi, g, i)?),
                None => None,
            };
            Ok((eb, eg))
        })
        .collect()
}

/// Observed-data log-likelihood (mixture likelihood for ZIP/ZINB).
pub fn loglik<T: Scalar>(kind: ModelKind, data: &Dataset<T>, params: &ModelParams<T>) -> Result<T> {
    params.check(kind)?;
    let mut total = T::zero();
    for (o, (eb, eg)) in data.iter().zip(predictors(data, params)?) {
        total = total + obs_loglik(o.y, eb, eg, params.r);
    }
    Ok(total)
}

/// Complete-data log-likelihood with fractional zero-state indicators `z`.
pub fn complete_loglik<T: Scalar>(kind: ModelKind, data: &Dataset<T>, z: &[T], params: &ModelParams<T>) -> Result<T> {
    if !kind.is_zero_inflated() {
        return Err(CountModelError::NotZeroInflated("complete_loglik"));
    }
    params.check(kind)?;
    if z.len() != data.len() || z.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(CountModelError::InvalidResponsibilities);
    }
    let mut total = T::zero();
    for ((o, (eb, eg)), &zi) in data.iter().zip(predictors(data, params)?).zip(z) {
        let eg = eg.expect("zero-inflated params carry gamma");
        total = total + zi * eg - softplus(eg) + (T::one() - zi) * count_log_pmf(o.y, eb, params.r);
    }
    Ok(total)
}

/// Analytic gradient of [`loglik`] in β (and γ when present).
pub fn score<T: Scalar>(kind: ModelKind, data: &Dataset<T>, params: &ModelParams<T>) -> Result<Score<T>> {
    params.check(kind)?;
    let d = params.dim();
    let mut gb = vec![T::zero(); d];
    let mut gg = params.gamma.as_ref().map(|_| vec![T::zero(); d]);
    for (o, (eb, eg)) in data.iter().zip(predictors(data, params)?) {
        let dv = obs_derivs(o.y, eb, eg, params.r);
        for (g, &x) in gb.iter_mut().zip(o.phi.iter()) {
            *g = *g + dv.sb * x;
        }
        if let Some(gg) = gg.as_mut() {
            for (g, &x) in gg.iter_mut().zip(o.phi.iter()) {
                *g = *g + dv.sg * x;
            }
        }
    }
    Ok(Score { beta: gb, gamma: gg })
}

/// Observed information (negative Hessian of [`loglik`]) for the β and γ
/// blocks. Cross β–γ terms are not formed.
pub fn information<T: Scalar>(kind: ModelKind, data: &Dataset<T>, params: &ModelParams<T>) -> Result<Information<T>> {
    params.check(kind)?;
    let d = params.dim();
    let mut ib = Matrix::zeros(d);
    let mut ig = params.gamma.as_ref().map(|_| Matrix::zeros(d));
    for (o, (eb, eg)) in data.iter().zip(predictors(data, params)?) {
        let dv = obs_derivs(o.y, eb, eg, params.r);
        ib.add_outer(dv.ib, &o.phi);
        if let Some(m) = ig.as_mut() {
            m.add_outer(dv.ig, &o.phi);
        }
    }
    Ok(Information { beta: ib, gamma: ig })
}

/// E-step responsibilities `z_i = P(zero state | y_i)`.
pub fn e_step<T: Scalar>(kind: ModelKind, data: &Dataset<T>, params: &ModelParams<T>) -> Result<Vec<T>> {
    if !kind.is_zero_inflated() {
        return Err(CountModelError::NotZeroInflated("e_step"));
    }
    params.check(kind)?;
    Ok(data
        .iter()
        .zip(predictors(data, params)?)
        .map(|(o, (eb, eg))| responsibility(o.y, eb, eg.expect("gamma present"), params.r))
        .collect())
}

/// Log of the expected reward `h`; used for argmax comparisons without
/// forming `exp`.
#[inline]
pub(crate) fn log_mean_reward<T: Scalar>(
    kind: ModelKind,
    params: &ModelParams<T>,
    phi_gamma: &[T],
    phi_beta: &[T],
) -> Result<T> {
    let eb = predictor(phi_beta, &params.beta, 0)?;
    match (&params.gamma, kind.is_zero_inflated()) {
        (Some(g), true) => Ok(eb - softplus(predictor(phi_gamma, g, 0)?)),
        (None, true) => Err(CountModelError::ParamsMismatch(kind)),
        _ => Ok(eb),
    }
}

/// Expected reward `h`: `exp(φᵀβ)` for Poisson/NB and
/// `(1 − sigmoid(φᵀγ))·exp(φᵀβ)` for ZIP/ZINB.
pub fn mean_reward<T: Scalar>(
    kind: ModelKind,
    params: &ModelParams<T>,
    phi_gamma: &FeatureVector<T>,
    phi_beta: &FeatureVector<T>,
) -> Result<T> {
    log_mean(phi_beta, &params.beta, 0)?;
    Ok(log_mean_reward(kind, params, phi_gamma, phi_beta)?.exp())
}
