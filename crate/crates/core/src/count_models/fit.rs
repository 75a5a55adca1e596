//! Maximum-likelihood / ridge-MAP fitting.
//!
//! Poisson and NB use damped Newton on β (NB alternates with a profile
//! update of `r`). ZIP and ZINB use generalized EM: every M-step block is a
//! damped Newton ascent on the complete-data objective, so the penalized
//! observed-data log-likelihood never decreases.

use super::dispersion::update_dispersion;
use super::likelihood::{
    count_derivs, count_log_pmf, information, loglik, obs_derivs, obs_loglik, predictor, predictors, responsibility,
    score,
};
use super::{CountModelError, Dataset, FitOptions, FitResult, ModelKind, ModelParams, PriorSpec, Result, MAX_LOG_MEAN};
use crate::linalg::{norm, Cholesky, Matrix};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Parameters, iterations, convergence flag, EM objective trace and ascent
/// violations of one solver run.
type RawFit<T> = (ModelParams<T>, usize, bool, Vec<T>, usize);

/// Slack allowed when auditing EM ascent.
pub const EM_ASCENT_SLACK: f64 = 1e-9;

struct Ridge<'a, T> {
    lambda: T,
    center: Option<&'a [T]>,
}

impl<T: Scalar> Ridge<'_, T> {
    fn center_at(&self, j: usize) -> T {
        self.center.map_or(T::zero(), |c| c[j])
    }

    fn penalty(&self, theta: &[T]) -> T {
        if self.lambda == T::zero() {
            return T::zero();
        }
        let ss: T = theta
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let dlt = t - self.center_at(j);
                dlt * dlt
            })
            .sum();
        self.lambda * ss
    }

    fn add_gradient(&self, theta: &[T], grad: &mut [T]) {
        let two = T::of(2.0);
        for (j, g) in grad.iter_mut().enumerate() {
            *g = *g - two * self.lambda * (theta[j] - self.center_at(j));
        }
    }

    fn add_information(&self, info: &mut Matrix<T>) {
        if self.lambda > T::zero() {
            info.add_diagonal(T::of(2.0) * self.lambda);
        }
    }
}

struct Problem<'a, T> {
    kind: ModelKind,
    data: &'a Dataset<T>,
    ys: Vec<u64>,
    opts: &'a FitOptions<T>,
    ridge_beta: Ridge<'a, T>,
    ridge_gamma: Ridge<'a, T>,
}

#[derive(Debug)]
struct NewtonOutcome<T> {
    steps: usize,
    grad_norm: T,
}

/// Damped Newton ascent. `eval` returns `(value, gradient, −Hessian)` and
/// `value` the objective alone; both include any penalty. Steps are accepted
/// only when the objective does not decrease.
fn newton_ascent<T, E, V>(
    x: &mut Vec<T>,
    max_steps: usize,
    tol: T,
    opts: &FitOptions<T>,
    eval: E,
    value: V,
) -> Result<NewtonOutcome<T>>
where
    T: Scalar,
    E: Fn(&[T]) -> Result<(T, Vec<T>, Matrix<T>)>,
    V: Fn(&[T]) -> Result<T>,
{
    let mut steps = 0;
    loop {
        let (v, g, mut h) = eval(x)?;
        let gn = norm(&g);
        if gn < tol || steps >= max_steps {
            return Ok(NewtonOutcome { steps, grad_norm: gn });
        }
        let mut shift = opts.jitter;
        let chol = loop {
            if let Some(c) = Cholesky::new(&h) {
                break c;
            }
            h.add_diagonal(shift);
            shift = shift * T::of(10.0);
            if !shift.is_finite() {
                return Err(CountModelError::Diverged(0));
            }
        };
        let delta = chol.solve(&g);
        let mut step = T::one();
        let mut accepted = false;
        let mut trial = x.clone();
        // Objective comparisons are only meaningful down to rounding.
        let floor = v - T::epsilon() * T::of(8.0) * v.abs().max(T::one());
        for _ in 0..=opts.step_halving_max {
            for (t, (&xi, &di)) in trial.iter_mut().zip(x.iter().zip(&delta)) {
                *t = xi + step * di;
            }
            match value(&trial) {
                Ok(vn) if vn.is_finite() => {
                    if vn >= floor {
                        accepted = true;
                        break;
                    }
                }
                Ok(_) | Err(CountModelError::NonFinite { .. }) => {}
                Err(e) => return Err(e),
            }
            step = step * T::of(0.5);
        }
        steps += 1;
        if !accepted {
            // No admissible ascent left at working precision, or every trial
            // point lies past the overflow cap.
            return Ok(NewtonOutcome { steps, grad_norm: gn });
        }
        std::mem::swap(x, &mut trial);
    }
}

impl<'a, T: Scalar> Problem<'a, T> {
    fn phi(&self, i: usize) -> &[T] {
        &self.data.observations[i].phi
    }

    fn n(&self) -> usize {
        self.ys.len()
    }

    fn log_means(&self, beta: &[T]) -> Result<Vec<T>> {
        (0..self.n())
            .map(|i| {
                let eta = predictor(self.phi(i), beta, i)?;
                if !eta.is_finite() || eta > T::of(MAX_LOG_MEAN) {
                    return Err(CountModelError::NonFinite {
                        index: i,
                        log_mean: eta.f64(),
                    });
                }
                Ok(eta)
            })
            .collect()
    }

    /// Weighted count-component objective in β (weights `None` ≡ 1).
    fn beta_value(&self, beta: &[T], r: Option<T>, w: Option<&[T]>) -> Result<T> {
        let etas = self.log_means(beta)?;
        let mut total = T::zero();
        for (i, &eta) in etas.iter().enumerate() {
            let wi = w.map_or(T::one(), |w| w[i]);
            if wi == T::zero() {
                continue;
            }
            total = total + wi * count_log_pmf(self.ys[i], eta, r);
        }
        Ok(total - self.ridge_beta.penalty(beta))
    }

    fn beta_eval(&self, beta: &[T], r: Option<T>, w: Option<&[T]>) -> Result<(T, Vec<T>, Matrix<T>)> {
        let d = beta.len();
        let etas = self.log_means(beta)?;
        let mut value = T::zero();
        let mut grad = vec![T::zero(); d];
        let mut info = Matrix::zeros(d);
        for (i, &eta) in etas.iter().enumerate() {
            let wi = w.map_or(T::one(), |w| w[i]);
            if wi == T::zero() {
                continue;
            }
            let y = self.ys[i];
            value = value + wi * count_log_pmf(y, eta, r);
            let (s, g) = count_derivs(y, eta, r);
            let phi = self.phi(i);
            for (gj, &x) in grad.iter_mut().zip(phi) {
                *gj = *gj + wi * s * x;
            }
            info.add_outer(wi * g, phi);
        }
        self.ridge_beta.add_gradient(beta, &mut grad);
        self.ridge_beta.add_information(&mut info);
        Ok((value - self.ridge_beta.penalty(beta), grad, info))
    }

    /// Logistic complete-data objective in γ with targets `z`.
    fn gamma_value(&self, gamma: &[T], z: &[T]) -> Result<T> {
        let mut total = T::zero();
        for (i, &zi) in z.iter().enumerate() {
            let eta = predictor(self.phi(i), gamma, i)?;
            total = total + zi * eta - softplus(eta);
        }
        Ok(total - self.ridge_gamma.penalty(gamma))
    }

    fn gamma_eval(&self, gamma: &[T], z: &[T]) -> Result<(T, Vec<T>, Matrix<T>)> {
        let d = gamma.len();
        let mut value = T::zero();
        let mut grad = vec![T::zero(); d];
        let mut info = Matrix::zeros(d);
        for (i, &zi) in z.iter().enumerate() {
            let phi = self.phi(i);
            let eta = predictor(phi, gamma, i)?;
            value = value + zi * eta - softplus(eta);
            let p = sigmoid(eta);
            for (gj, &x) in grad.iter_mut().zip(phi) {
                *gj = *gj + (zi - p) * x;
            }
            info.add_outer(p * (T::one() - p), phi);
        }
        self.ridge_gamma.add_gradient(gamma, &mut grad);
        self.ridge_gamma.add_information(&mut info);
        Ok((value - self.ridge_gamma.penalty(gamma), grad, info))
    }

    fn penalty(&self, params: &ModelParams<T>) -> T {
        let mut p = self.ridge_beta.penalty(&params.beta);
        if let Some(g) = &params.gamma {
            p = p + self.ridge_gamma.penalty(g);
        }
        p
    }

    fn objective(&self, params: &ModelParams<T>) -> Result<T> {
        Ok(loglik(self.kind, self.data, params)? - self.penalty(params))
    }

    fn penalized_score_norm(&self, params: &ModelParams<T>) -> Result<T> {
        let mut s = score(self.kind, self.data, params)?;
        self.ridge_beta.add_gradient(&params.beta, &mut s.beta);
        if let (Some(sg), Some(g)) = (s.gamma.as_mut(), &params.gamma) {
            self.ridge_gamma.add_gradient(g, sg);
        }
        Ok(s.norm())
    }

    fn split(&self, x: &[T], r: Option<T>) -> ModelParams<T> {
        let d = x.len() / 2;
        ModelParams {
            beta: x[..d].to_vec(),
            gamma: Some(x[d..].to_vec()),
            r,
        }
    }

    /// Penalized observed-data objective, gradient and full negative Hessian
    /// over the stacked vector `(β, γ)` of a zero-inflated model.
    fn joint_eval(&self, x: &[T], r: Option<T>) -> Result<(T, Vec<T>, Matrix<T>)> {
        let d = x.len() / 2;
        let params = self.split(x, r);
        let mut value = T::zero();
        let mut grad = vec![T::zero(); 2 * d];
        let mut info = Matrix::zeros(2 * d);
        for (o, (eb, eg)) in self.data.iter().zip(predictors(self.data, &params)?) {
            value = value + obs_loglik(o.y, eb, eg, r);
            let dv = obs_derivs(o.y, eb, eg, r);
            for j in 0..d {
                grad[j] = grad[j] + dv.sb * o.phi[j];
                grad[d + j] = grad[d + j] + dv.sg * o.phi[j];
            }
            // −H_i = [ib, ibg; ibg, ig] ⊗ φφᵀ
            for a in 0..d {
                for b in 0..d {
                    let pp = o.phi[a] * o.phi[b];
                    let add = |m: &mut Matrix<T>, i: usize, j: usize, v: T| m.set(i, j, m.get(i, j) + v * pp);
                    add(&mut info, a, b, dv.ib);
                    add(&mut info, d + a, d + b, dv.ig);
                    add(&mut info, a, d + b, dv.ibg);
                    add(&mut info, d + a, b, dv.ibg);
                }
            }
        }
        let (gb, gg) = grad.split_at_mut(d);
        self.ridge_beta.add_gradient(&params.beta, gb);
        self.ridge_gamma.add_gradient(params.gamma.as_ref().unwrap(), gg);
        let two_lambda = T::of(2.0) * self.ridge_beta.lambda;
        if two_lambda > T::zero() {
            info.add_diagonal(two_lambda);
        }
        Ok((value - self.penalty(&params), grad, info))
    }

    /// Newton refinement on the observed-data objective once EM has slowed
    /// down. Like EM, it never lowers the objective.
    fn polish(&self, params: &mut ModelParams<T>) -> Result<usize> {
        let mut x: Vec<T> = params.beta.clone();
        x.extend(params.gamma.as_ref().expect("zero-inflated params carry gamma"));
        let mut steps = 0;
        for _ in 0..self.opts.newton_max_iter {
            let r = params.r;
            let out = newton_ascent(
                &mut x,
                self.opts.newton_max_iter,
                self.opts.grad_tol,
                self.opts,
                |v| self.joint_eval(v, r),
                |v| self.objective(&self.split(v, r)),
            )?;
            steps += out.steps;
            *params = self.split(&x, r);
            let Some(r) = r else { break };
            let etas = self.log_means(&params.beta)?;
            let w: Vec<T> = self.responsibilities(params)?.iter().map(|&z| T::one() - z).collect();
            let r_new = update_dispersion(&self.ys, &etas, Some(&w), r);
            params.r = Some(r_new);
            if (r_new.ln() - r.ln()).abs() < T::of(1e-10) || out.steps == 0 {
                break;
            }
        }
        Ok(steps)
    }

    fn responsibilities(&self, params: &ModelParams<T>) -> Result<Vec<T>> {
        let gamma = params.gamma.as_ref().expect("zero-inflated params carry gamma");
        let etas = self.log_means(&params.beta)?;
        (0..self.n())
            .map(|i| {
                let eg = predictor(self.phi(i), gamma, i)?;
                Ok(responsibility(self.ys[i], etas[i], eg, params.r))
            })
            .collect()
    }

    fn newton_beta(
        &self,
        beta: &mut Vec<T>,
        r: Option<T>,
        w: Option<&[T]>,
        max_steps: usize,
    ) -> Result<NewtonOutcome<T>> {
        newton_ascent(
            beta,
            max_steps,
            self.opts.grad_tol,
            self.opts,
            |b| self.beta_eval(b, r, w),
            |b| self.beta_value(b, r, w),
        )
    }

    fn fit_poisson(&self, mut params: ModelParams<T>) -> Result<RawFit<T>> {
        let out = self.newton_beta(&mut params.beta, None, None, self.opts.newton_max_iter)?;
        let converged = out.grad_norm < self.opts.grad_tol;
        Ok((params, out.steps, converged, Vec::new(), 0))
    }

    fn fit_nb(&self, mut params: ModelParams<T>) -> Result<RawFit<T>> {
        let mut r = params.r.expect("NB params carry r");
        let mut used = 0;
        let mut converged = false;
        for _ in 0..self.opts.newton_max_iter.max(1) {
            let etas = self.log_means(&params.beta)?;
            let r_new = update_dispersion(&self.ys, &etas, None, r);
            let r_stable = (r_new.ln() - r.ln()).abs() < T::of(1e-8);
            r = r_new;
            let budget = self.opts.newton_max_iter.saturating_sub(used);
            let out = self.newton_beta(&mut params.beta, Some(r), None, budget)?;
            used += out.steps;
            if out.grad_norm < self.opts.grad_tol && r_stable {
                converged = true;
                break;
            }
            if used >= self.opts.newton_max_iter {
                break;
            }
        }
        params.r = Some(r);
        let converged = converged && self.penalized_score_norm(&params)? < self.opts.grad_tol;
        Ok((params, used, converged, Vec::new(), 0))
    }

    fn fit_em(&self, mut params: ModelParams<T>) -> Result<RawFit<T>> {
        let slack = T::of(EM_ASCENT_SLACK);
        let mut obj = self.objective(&params)?;
        let mut trace = vec![obj];
        let mut violations = 0;
        let mut iterations = 0;
        let mut converged = self.penalized_score_norm(&params)? < self.opts.grad_tol;
        let inner_tol = self.opts.grad_tol * T::of(0.1);
        while !converged && iterations < self.opts.em_max_iter {
            iterations += 1;
            let z = self.responsibilities(&params)?;
            let w: Vec<T> = z.iter().map(|&zi| T::one() - zi).collect();

            let mut gamma = params.gamma.take().expect("zero-inflated params carry gamma");
            newton_ascent(
                &mut gamma,
                self.opts.m_step_max_iter,
                inner_tol,
                self.opts,
                |g| self.gamma_eval(g, &z),
                |g| self.gamma_value(g, &z),
            )?;
            params.gamma = Some(gamma);

            self.newton_beta(&mut params.beta, params.r, Some(&w), self.opts.m_step_max_iter)?;

            if let Some(r) = params.r {
                let etas = self.log_means(&params.beta)?;
                params.r = Some(update_dispersion(&self.ys, &etas, Some(&w), r));
            }

            let next = self.objective(&params)?;
            if next < obj - slack {
                violations += 1;
            }
            trace.push(next);
            converged = self.penalized_score_norm(&params)? < self.opts.grad_tol;
            let stalled = (next - obj).abs() <= self.opts.loglik_rel_tol * obj.abs().max(T::one());
            obj = next;
            if stalled {
                break;
            }
        }
        if !converged {
            let before = obj;
            iterations += self.polish(&mut params)?;
            let next = self.objective(&params)?;
            if next < before - slack {
                violations += 1;
            }
            trace.push(next);
            converged = self.penalized_score_norm(&params)? < self.opts.grad_tol;
        }
        Ok((params, iterations, converged, trace, violations))
    }
}

/// Fits `kind` to `data`, maximizing `loglik − λ‖β − β₀‖² − λ‖γ − γ₀‖²`.
///
/// The returned information matrices include the prior contribution `2λI`
/// and, when their smallest eigenvalue is below `opts.jitter`, an extra
/// `jitter·I`.
pub fn fit<T: Scalar>(
    kind: ModelKind,
    data: &Dataset<T>,
    prior: Option<&PriorSpec<T>>,
    opts: &FitOptions<T>,
    init: Option<&ModelParams<T>>,
) -> Result<FitResult<T>> {
    let lambda = prior.map_or(T::zero(), |p| p.lambda);
    if data.is_empty() && !(lambda > T::zero()) {
        return Err(CountModelError::EmptyDataset);
    }
    let d = init
        .map(|p| p.dim())
        .or_else(|| prior.map(|p| p.center_beta.len()))
        .or_else(|| data.observations.first().map(|o| o.phi.dim()))
        .ok_or(CountModelError::EmptyDataset)?;
    for (i, o) in data.iter().enumerate() {
        if o.phi.dim() != d {
            return Err(CountModelError::DimensionMismatch {
                index: i,
                expected: d,
                found: o.phi.dim(),
            });
        }
    }
    if let Some(p) = prior {
        for c in std::iter::once(&p.center_beta).chain(p.center_gamma.iter()) {
            if c.len() != d {
                return Err(CountModelError::PriorDimension {
                    expected: d,
                    found: c.len(),
                });
            }
        }
    }

    let mut start = match init {
        Some(p) => p.coerce(kind),
        None => ModelParams::zeros(kind, d),
    };
    if init.is_none() {
        if let Some(p) = prior {
            if p.lambda > T::zero() {
                start.beta = p.center_beta.clone();
                if let (Some(g), Some(c)) = (start.gamma.as_mut(), &p.center_gamma) {
                    g.clone_from(c);
                }
            }
        }
    }

    let problem = Problem {
        kind,
        data,
        ys: data.iter().map(|o| o.y).collect(),
        opts,
        ridge_beta: Ridge {
            lambda,
            center: prior.map(|p| p.center_beta.as_slice()),
        },
        ridge_gamma: Ridge {
            lambda,
            center: prior.and_then(|p| p.center_gamma.as_deref()),
        },
    };
    // A start that overflows is replaced by the canonical zero start.
    if problem.log_means(&start.beta).is_err() {
        start.beta = vec![T::zero(); d];
    }

    let (params, iterations, converged, objective_trace, ascent_violations) = match kind {
        ModelKind::Poisson => problem.fit_poisson(start)?,
        ModelKind::NegBinomial => problem.fit_nb(start)?,
        ModelKind::ZeroInflatedPoisson | ModelKind::ZeroInflatedNegBinomial => problem.fit_em(start)?,
    };

    let ll = loglik(kind, data, &params)?;
    let penalized_objective = ll - problem.penalty(&params);
    if !penalized_objective.is_finite() {
        return Err(CountModelError::Diverged(opts.step_halving_max));
    }
    let info = information(kind, data, &params)?;
    let finish = |mut m: Matrix<T>| {
        m.symmetrize();
        if lambda > T::zero() {
            m.add_diagonal(T::of(2.0) * lambda);
        }
        m.regularize(opts.jitter);
        m
    };
    Ok(FitResult {
        kind,
        info_beta: finish(info.beta),
        info_gamma: info.gamma.map(finish),
        params,
        loglik: ll,
        penalized_objective,
        iterations,
        converged,
        objective_trace,
        ascent_violations,
    })
}

/// Norm of the penalized observed-data score at `params`.
pub fn penalized_score_norm<T: Scalar>(
    kind: ModelKind,
    data: &Dataset<T>,
    prior: Option<&PriorSpec<T>>,
    params: &ModelParams<T>,
) -> Result<T> {
    let mut s = score(kind, data, params)?;
    if let Some(p) = prior {
        let rb = Ridge {
            lambda: p.lambda,
            center: Some(p.center_beta.as_slice()),
        };
        rb.add_gradient(&params.beta, &mut s.beta);
        if let (Some(sg), Some(g)) = (s.gamma.as_mut(), &params.gamma) {
            let rg = Ridge {
                lambda: p.lambda,
                center: p.center_gamma.as_deref(),
            };
            rg.add_gradient(g, sg);
        }
    }
    Ok(s.norm())
}
