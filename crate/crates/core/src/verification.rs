//! Numerical oracles for the update-direction theory, run on quadratic
//! instances where every Hessian is exact and stationarity can be
//! engineered.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReservoirBuffer;
use crate::clu::{fast_step, inner_finetune, slow_step, Direction, SaliencyMask};
use crate::data::Sample;
use crate::error::{CluError, Result};
use crate::model::{weighted_grad, Batch, ModelSpec, ParamVector, QuadraticSurrogate, SampleWeights};

/// Largest tolerated condition number before a matrix counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionWeights {
    pub p_remain: f64,
    pub p_learn: f64,
    pub p_unlearn: f64,
}

impl PartitionWeights {
    pub fn new(p_remain: f64, p_learn: f64, p_unlearn: f64) -> Result<Self> {
        let all = [p_remain, p_learn, p_unlearn];
        if all.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(CluError::validation("partition weights must be nonnegative and sum to 1"));
        }
        Ok(Self {
            p_remain,
            p_learn,
            p_unlearn,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPath {
    pub eps_learn: Vec<f64>,
    pub eps_unlearn: Vec<f64>,
}

impl EpsilonPath {
    /// `ε^L = 0, ε^U = 1`: the starting model.
    pub fn start(n_learn: usize, n_unlearn: usize) -> Self {
        Self {
            eps_learn: vec![0.0; n_learn],
            eps_unlearn: vec![1.0; n_unlearn],
        }
    }

    /// `ε^L = 1, ε^U = 0`: the target model.
    pub fn end(n_learn: usize, n_unlearn: usize) -> Self {
        Self {
            eps_learn: vec![1.0; n_learn],
            eps_unlearn: vec![0.0; n_unlearn],
        }
    }
}

/// `1/2 (θ-a)ᵀH(θ-a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPart {
    pub hessian: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl QuadraticPart {
    pub fn loss(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.center;
        0.5 * d.dot(&(&self.hessian * &d))
    }

    pub fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.hessian * (theta - &self.center)
    }
}

/// Remaining loss plus per-sample learn and unlearn losses, all quadratic.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInstance {
    pub remain: QuadraticPart,
    pub learn: Vec<QuadraticPart>,
    pub unlearn: Vec<QuadraticPart>,
}

fn weighted_sum_grad(parts: &[QuadraticPart], theta: &DVector<f64>, w: &[f64]) -> DVector<f64> {
    let mut g = DVector::zeros(theta.len());
    for (p, &wi) in parts.iter().zip(w) {
        g += p.grad(theta) * wi;
    }
    g
}

fn sum_hessian(parts: &[QuadraticPart], dim: usize) -> DMatrix<f64> {
    parts.iter().fold(DMatrix::zeros(dim, dim), |acc, p| acc + &p.hessian)
}

/// SPD solve with a condition-number guard.
fn spd_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(h.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition.is_nan() || condition > MAX_CONDITION {
        return Err(CluError::Singular { condition });
    }
    let chol = h.clone().cholesky().ok_or(CluError::Singular { condition })?;
    Ok(chol.solve(rhs))
}

impl QuadraticInstance {
    pub fn dim(&self) -> usize {
        self.remain.center.len()
    }

    pub fn grad_remain(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.remain.grad(theta)
    }

    /// `∇L^L(θ; w)`.
    pub fn grad_learn(&self, theta: &DVector<f64>, w: &[f64]) -> DVector<f64> {
        weighted_sum_grad(&self.learn, theta, w)
    }

    /// `∇L^U(θ; w)`.
    pub fn grad_unlearn(&self, theta: &DVector<f64>, w: &[f64]) -> DVector<f64> {
        weighted_sum_grad(&self.unlearn, theta, w)
    }

    pub fn hessian_remain(&self) -> &DMatrix<f64> {
        &self.remain.hessian
    }

    pub fn hessian_learn(&self) -> DMatrix<f64> {
        sum_hessian(&self.learn, self.dim())
    }

    pub fn hessian_unlearn(&self) -> DMatrix<f64> {
        sum_hessian(&self.unlearn, self.dim())
    }

    /// Minimizer of `L^R + L^L`.
    pub fn oracle(&self) -> Result<DVector<f64>> {
        let ones = vec![1.0; self.learn.len()];
        let h = self.hessian_remain() + self.hessian_learn();
        let zero = DVector::zeros(self.dim());
        let rhs = -(self.grad_remain(&zero) + self.grad_learn(&zero, &ones));
        spd_solve(&h, &rhs)
    }

    /// Minimizer of `L^R + L^L(·; ε^L) + L^U(·; ε^U)`.
    pub fn stationary_point(&self, eps: &EpsilonPath) -> Result<DVector<f64>> {
        self.check_eps(eps)?;
        let d = self.dim();
        let mut h = self.hessian_remain().clone();
        for (p, &e) in self.learn.iter().zip(&eps.eps_learn) {
            h += &p.hessian * e;
        }
        for (p, &e) in self.unlearn.iter().zip(&eps.eps_unlearn) {
            h += &p.hessian * e;
        }
        let zero = DVector::zeros(d);
        let rhs = -(self.grad_remain(&zero) + self.grad_learn(&zero, &eps.eps_learn) + self.grad_unlearn(&zero, &eps.eps_unlearn));
        spd_solve(&h, &rhs)
    }

    pub fn stationarity_residual(&self, theta: &DVector<f64>, eps: &EpsilonPath) -> f64 {
        (self.grad_remain(theta) + self.grad_learn(theta, &eps.eps_learn) + self.grad_unlearn(theta, &eps.eps_unlearn)).norm()
    }

    fn check_eps(&self, eps: &EpsilonPath) -> Result<()> {
        if eps.eps_learn.len() != self.learn.len() || eps.eps_unlearn.len() != self.unlearn.len() {
            return Err(CluError::shape("epsilon path does not match the instance"));
        }
        Ok(())
    }

    /// `∇L^L(θ; 1-ε^L) + ∇L^U(θ; -ε^U)`.
    pub fn task_gradient(&self, theta: &DVector<f64>, eps: &EpsilonPath) -> Result<DVector<f64>> {
        self.check_eps(eps)?;
        let wl: Vec<f64> = eps.eps_learn.iter().map(|e| 1.0 - e).collect();
        let wu: Vec<f64> = eps.eps_unlearn.iter().map(|e| -e).collect();
        Ok(self.grad_learn(theta, &wl) + self.grad_unlearn(theta, &wu))
    }

    /// Objective with each KL term replaced by its quadratic form around the
    /// oracle, weighted by the partitions.
    pub fn kl_objective(&self, theta: &DVector<f64>, theta_star: &DVector<f64>, p: &PartitionWeights) -> f64 {
        let d = theta - theta_star;
        let q = |h: &DMatrix<f64>| 0.5 * d.dot(&(h * &d));
        p.p_remain * q(self.hessian_remain()) + p.p_learn * q(&self.hessian_learn()) + p.p_unlearn * q(&self.hessian_unlearn())
    }
}

/// Euclidean steepest-descent direction:
/// `-α [∇L^R p^R + ½(H^L p^L + H^U p^U)(H^R_*)⁻¹ g]`.
pub fn vanilla_direction(
    inst: &QuadraticInstance,
    theta_k: &DVector<f64>,
    eps: &EpsilonPath,
    p: &PartitionWeights,
    alpha: f64,
) -> Result<DVector<f64>> {
    let g = inst.task_gradient(theta_k, eps)?;
    let w = spd_solve(inst.hessian_remain(), &g)?;
    let s = (inst.hessian_learn() * p.p_learn + inst.hessian_unlearn() * p.p_unlearn) * w * 0.5;
    Ok(-(inst.grad_remain(theta_k) * p.p_remain + s) * alpha)
}

/// Direction under the remaining-set KL metric:
/// `-(α/(p^R+1)) (H^R_k)⁻¹ ½(H^L p^L + H^U p^U)(H^R_*)⁻¹ g`.
pub fn remain_manifold_direction(
    inst: &QuadraticInstance,
    theta_k: &DVector<f64>,
    eps: &EpsilonPath,
    p: &PartitionWeights,
    alpha: f64,
) -> Result<DVector<f64>> {
    let g = inst.task_gradient(theta_k, eps)?;
    let w = spd_solve(inst.hessian_remain(), &g)?;
    let z_l = spd_solve(inst.hessian_remain(), &(inst.hessian_learn() * &w))?;
    let z_u = spd_solve(inst.hessian_remain(), &(inst.hessian_unlearn() * &w))?;
    let c = 0.5 * alpha / (p.p_remain + 1.0);
    Ok(-(z_l * (c * p.p_learn) + z_u * (c * p.p_unlearn)))
}

/// Learning-only direction `-α̃ (H^R_k)⁻¹ H^L (H^R_*)⁻¹ ∇L^L(θ; 1-ε^L)`.
pub fn learn_only_direction(
    inst: &QuadraticInstance,
    theta_k: &DVector<f64>,
    eps_learn: &[f64],
    alpha_tilde: f64,
) -> Result<DVector<f64>> {
    let wl: Vec<f64> = eps_learn.iter().map(|e| 1.0 - e).collect();
    let g = inst.grad_learn(theta_k, &wl) + DVector::zeros(theta_k.len());
    let w = spd_solve(inst.hessian_remain(), &g)?;
    let z = spd_solve(inst.hessian_remain(), &(inst.hessian_learn() * &w))?;
    Ok(-(z * alpha_tilde))
}

/// Unlearning-only direction `-α̃ (H^R_k)⁻¹ H^U (H^R_*)⁻¹ ∇L^U(θ; -ε^U)`.
pub fn unlearn_only_direction(
    inst: &QuadraticInstance,
    theta_k: &DVector<f64>,
    eps_unlearn: &[f64],
    alpha_tilde: f64,
) -> Result<DVector<f64>> {
    let wu: Vec<f64> = eps_unlearn.iter().map(|e| -e).collect();
    let g = DVector::zeros(theta_k.len()) + inst.grad_unlearn(theta_k, &wu);
    let w = spd_solve(inst.hessian_remain(), &g)?;
    let z = spd_solve(inst.hessian_remain(), &(inst.hessian_unlearn() * &w))?;
    Ok(-(z * alpha_tilde))
}

/// Step size `α p / (α p^R + 1)` as written for the single-request forms.
pub fn single_request_step(alpha: f64, p_request: f64, p_remain: f64) -> f64 {
    alpha * p_request / (alpha * p_remain + 1.0)
}

/// Step size the two-request formula actually reduces to when one request
/// is empty: `α p / (2 (p^R + 1))`.
pub fn reduced_step(alpha: f64, p_request: f64, p_remain: f64) -> f64 {
    0.5 * alpha / (p_remain + 1.0) * p_request
}

/// Minimizer of `F(θ_k + δ) + ‖δ‖²/(2α)`, with `F`'s gradient and Hessian
/// taken by central differences.
pub fn brute_force_step(f: impl Fn(&DVector<f64>) -> f64, theta_k: &DVector<f64>, alpha: f64, h: f64) -> Result<DVector<f64>> {
    let d = theta_k.len();
    let e = |i: usize| {
        let mut v = DVector::zeros(d);
        v[i] = h;
        v
    };
    let grad = DVector::from_fn(d, |i, _| (f(&(theta_k + e(i))) - f(&(theta_k - e(i)))) / (2.0 * h));
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let (ei, ej) = (e(i), e(j));
            hess[(i, j)] = (f(&(theta_k + &ei + &ej)) - f(&(theta_k + &ei - &ej)) - f(&(theta_k - &ei + &ej))
                + f(&(theta_k - &ei - &ej)))
                / (4.0 * h * h);
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let system = hess + DMatrix::identity(d, d) / alpha;
    Ok(-spd_solve(&system, &grad)?)
}

pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, dim: usize, min_eig: f64, max_eig: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    let eig = DVector::from_fn(dim, |_, _| rng.random_range(min_eig..max_eig));
    let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&h + h.transpose()) * 0.5
}

fn random_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
}

/// Instance where the remaining and learn losses share the oracle as their
/// minimizer and the learn Hessian equals the remaining Hessian.
pub fn shared_minimizer_instance<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    n_learn: usize,
    n_unlearn: usize,
) -> QuadraticInstance {
    let h_r = random_spd(rng, dim, 0.5, 3.0);
    let star = random_vec(rng, dim);
    let raw: Vec<f64> = (0..n_learn).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let c: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mut centers: Vec<DVector<f64>> = (0..n_learn).map(|_| random_vec(rng, dim) + &star).collect();
    let rest = centers[1..].iter().zip(&c[1..]).fold(DVector::zeros(dim), |acc, (a, ci)| acc + a * *ci);
    centers[0] = (&star - rest) / c[0];
    let learn = centers
        .into_iter()
        .zip(&c)
        .map(|(center, ci)| QuadraticPart {
            hessian: &h_r * *ci,
            center,
        })
        .collect();
    let unlearn = (0..n_unlearn)
        .map(|_| QuadraticPart {
            hessian: random_spd(rng, dim, 0.1, 1.0),
            center: random_vec(rng, dim) * 2.0,
        })
        .collect();
    QuadraticInstance {
        remain: QuadraticPart { hessian: h_r, center: star },
        learn,
        unlearn,
    }
}

/// Instance whose remaining gradient vanishes at `θ_k` and where `θ_k` is
/// stationary for `eps`. Returns the instance and `θ_k`.
pub fn remain_stationary_instance<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    eps: &EpsilonPath,
) -> Result<(QuadraticInstance, DVector<f64>)> {
    let n_learn = eps.eps_learn.len();
    if n_learn == 0 || eps.eps_learn[0] <= 0.0 {
        return Err(CluError::validation("need a learn sample with positive epsilon"));
    }
    let theta_k = random_vec(rng, dim);
    let remain = QuadraticPart {
        hessian: random_spd(rng, dim, 0.2, 5.0),
        center: theta_k.clone(),
    };
    let mut learn: Vec<QuadraticPart> = (0..n_learn)
        .map(|_| QuadraticPart {
            hessian: random_spd(rng, dim, 0.1, 2.0),
            center: random_vec(rng, dim) * 2.0,
        })
        .collect();
    let unlearn: Vec<QuadraticPart> = eps
        .eps_unlearn
        .iter()
        .map(|_| QuadraticPart {
            hessian: random_spd(rng, dim, 0.1, 2.0),
            center: random_vec(rng, dim) * 2.0,
        })
        .collect();
    let rest = weighted_sum_grad(&learn[1..], &theta_k, &eps.eps_learn[1..]) + weighted_sum_grad(&unlearn, &theta_k, &eps.eps_unlearn);
    // ε_0 H_0 (θ_k - a_0) = -rest
    let shift = spd_solve(&learn[0].hessian, &rest)? / eps.eps_learn[0];
    learn[0].center = &theta_k + shift;
    Ok((QuadraticInstance { remain, learn, unlearn }, theta_k))
}

/// Outcome of simulating one fast-slow update on a quadratic remaining loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingCheck {
    /// `θ_k - θ_{k+1}` from the optimizer code path.
    pub simulated: DVector<f64>,
    /// `β (I - β_R H)^j g`.
    pub closed_form: DVector<f64>,
    /// `H⁻¹ g`, the fully preconditioned reference.
    pub inverse_reference: DVector<f64>,
    pub eigenvalues: Vec<f64>,
    /// `(1 - β_R μ)^j` for every eigenvalue `μ`.
    pub damping: Vec<f64>,
    pub cosine_to_inverse: f64,
    pub diverges: bool,
}

impl DampingCheck {
    pub fn relative_error(&self) -> f64 {
        (&self.simulated - &self.closed_form).norm() / self.closed_form.norm().max(f64::MIN_POSITIVE)
    }
}

fn quadratic_spec(h: &DMatrix<f64>, center: Vec<f64>, linear: Vec<f64>) -> ModelSpec {
    ModelSpec::quadratic(QuadraticSurrogate::new(h, center, linear))
}

fn to_params(v: &DVector<f64>) -> Result<ParamVector> {
    ParamVector::new(v.iter().copied().collect())
}

fn probe_batch() -> Result<Batch> {
    Batch::new(vec![0.0], vec![0], 1)
}

/// Runs the real fast step, inner fine-tuning and slow step on a task loss
/// `gᵀθ` and remaining loss `½(θ-θ_min)ᵀH(θ-θ_min)` starting at `θ_min`,
/// full mask, `α = 1`.
pub fn fast_slow_damping_check(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    beta: f64,
    beta_remain: f64,
    k_inner: usize,
    theta_min: &DVector<f64>,
) -> Result<DampingCheck> {
    let d = g.len();
    if h.nrows() != d || h.ncols() != d || theta_min.len() != d {
        return Err(CluError::shape("Hessian, gradient and minimizer dimensions differ"));
    }
    let eig = SymmetricEigen::new(h.clone());
    let mu_max = eig.eigenvalues.max();
    let diverges = beta_remain * mu_max >= 1.0;
    if diverges {
        warn!("inner step {beta_remain} times top curvature {mu_max} is at least 1; the fine-tuning diverges");
    }
    let task = quadratic_spec(&DMatrix::zeros(d, d), vec![0.0; d], g.iter().copied().collect());
    let remain = quadratic_spec(h, theta_min.iter().copied().collect(), vec![0.0; d]);
    let theta_k = to_params(theta_min)?;
    let batch = probe_batch()?;
    let theta_q = fast_step(&task, &theta_k, &batch, &[0.0], &SaliencyMask::full(d), beta, Direction::Learn)?;
    let mut buffer = ReservoirBuffer::new(1, 0)?;
    buffer.observe(Sample {
        id: 0,
        features: vec![0.0],
        label: 0,
    })?;
    let (theta_r, _) = inner_finetune(&remain, &theta_q, &mut buffer, beta_remain, k_inner, 1)?;
    let next = slow_step(&theta_k, &theta_r, 1.0)?;
    let simulated = DVector::from_iterator(d, theta_k.as_slice().iter().zip(next.as_slice()).map(|(a, b)| a - b));

    let exponent = i32::try_from(k_inner).map_err(|_| CluError::validation("k_inner too large"))?;
    let damping: Vec<f64> = eig.eigenvalues.iter().map(|mu| (1.0 - beta_remain * mu).powi(exponent)).collect();
    let coords = eig.eigenvectors.transpose() * g;
    let scaled = DVector::from_iterator(d, coords.iter().zip(&damping).map(|(c, f)| beta * c * f));
    let closed_form = &eig.eigenvectors * scaled;
    let inverse_reference = spd_solve(h, g)?;
    let cosine_to_inverse = simulated.dot(&inverse_reference) / (simulated.norm() * inverse_reference.norm()).max(f64::MIN_POSITIVE);
    Ok(DampingCheck {
        simulated,
        closed_form,
        inverse_reference,
        eigenvalues: eig.eigenvalues.iter().copied().collect(),
        damping,
        cosine_to_inverse,
        diverges,
    })
}

/// Joint-replay versus fast-slow first-step deltas on a quadratic
/// remaining loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDeltas {
    /// `∇L^Q(θ_k) + ∇L^R(θ_k)`.
    pub replay: DVector<f64>,
    /// `∇L^Q(θ_k) + ∇L^R(θ^Q)` after one task step of size `β`.
    pub ours: DVector<f64>,
    /// `Δ_ours - Δ_replay + β H ∇L^Q`, zero up to rounding.
    pub residual: DVector<f64>,
}

pub fn replay_delta_comparison(
    h_remain: &DMatrix<f64>,
    remain_center: &DVector<f64>,
    task_grad: &DVector<f64>,
    theta_k: &DVector<f64>,
    beta: f64,
) -> Result<ReplayDeltas> {
    let d = theta_k.len();
    let task = quadratic_spec(&DMatrix::zeros(d, d), vec![0.0; d], task_grad.iter().copied().collect());
    let remain = quadratic_spec(h_remain, remain_center.iter().copied().collect(), vec![0.0; d]);
    let batch = probe_batch()?;
    let unit = SampleWeights::mean(1);
    let theta = to_params(theta_k)?;
    let g_q = weighted_grad(&task, &theta, &batch, &unit)?;
    let g_r = weighted_grad(&remain, &theta, &batch, &unit)?;
    let theta_q = fast_step(&task, &theta, &batch, &[0.0], &SaliencyMask::full(d), beta, Direction::Learn)?;
    let g_rq = weighted_grad(&remain, &theta_q, &batch, &unit)?;
    let v = |p: &ParamVector| DVector::from_column_slice(p.as_slice());
    let replay = v(&g_q) + v(&g_r);
    let ours = v(&g_q) + v(&g_rq);
    let residual = &ours - &replay + h_remain * v(&g_q) * beta;
    Ok(ReplayDeltas { replay, ours, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: residual <= tolerance,
            residual,
            tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Props,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "props" => Ok(Suite::Props),
            "all" => Ok(Suite::All),
            other => Err(CluError::Config(format!("unknown verification suite `{other}` (expected props or all)"))),
        }
    }
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Vanilla direction against the brute-force proximal step.
pub fn check_vanilla(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckResult> {
    let alpha = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let dim = 2 + i % 5;
        let inst = shared_minimizer_instance(rng, dim, 3, 2);
        let eps = EpsilonPath {
            eps_learn: (0..3).map(|_| rng.random_range(0.1..0.9)).collect(),
            eps_unlearn: (0..2).map(|_| rng.random_range(0.1..0.9)).collect(),
        };
        let theta_k = inst.stationary_point(&eps)?;
        let star = inst.oracle()?;
        let raw = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        let s: f64 = raw.iter().sum();
        let p = PartitionWeights::new(raw[0] / s, raw[1] / s, 1.0 - raw[0] / s - raw[1] / s)?;
        let dir = vanilla_direction(&inst, &theta_k, &eps, &p, alpha)?;
        let brute = brute_force_step(|t| inst.kl_objective(t, &star, &p), &theta_k, alpha, 1e-3)?;
        worst = worst.max(rel(&dir, &brute));
    }
    Ok(CheckResult::at_most("vanilla direction matches brute-force steepest descent", worst, 1e-3))
}

/// Paired remaining-loss increases at matched step norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionOutcome {
    pub manifold_increase: Vec<f64>,
    pub vanilla_increase: Vec<f64>,
}

impl ProtectionOutcome {
    pub fn wins(&self) -> usize {
        self.manifold_increase.iter().zip(&self.vanilla_increase).filter(|(m, v)| m <= v).count()
    }

    pub fn mean_gap(&self) -> f64 {
        let n = self.manifold_increase.len() as f64;
        (self.manifold_increase.iter().sum::<f64>() - self.vanilla_increase.iter().sum::<f64>()) / n
    }
}

pub fn remain_protection(rng: &mut ChaCha8Rng, instances: usize, dim: usize, step_norm: f64) -> Result<ProtectionOutcome> {
    let mut manifold_increase = Vec::with_capacity(instances);
    let mut vanilla_increase = Vec::with_capacity(instances);
    for _ in 0..instances {
        let eps = EpsilonPath {
            eps_learn: (0..3).map(|_| rng.random_range(0.2..0.9)).collect(),
            eps_unlearn: (0..2).map(|_| rng.random_range(0.2..0.9)).collect(),
        };
        let (inst, theta_k) = remain_stationary_instance(rng, dim, &eps)?;
        let p = PartitionWeights::new(0.5, 0.3, 0.2)?;
        let v = vanilla_direction(&inst, &theta_k, &eps, &p, 1.0)?;
        let m = remain_manifold_direction(&inst, &theta_k, &eps, &p, 1.0)?;
        let base = inst.remain.loss(&theta_k);
        let step = |d: &DVector<f64>| inst.remain.loss(&(&theta_k + d * (step_norm / d.norm()))) - base;
        manifold_increase.push(step(&m));
        vanilla_increase.push(step(&v));
    }
    Ok(ProtectionOutcome {
        manifold_increase,
        vanilla_increase,
    })
}

/// Largest bit difference between the two-request direction with one
/// request switched off and the single-request forms.
pub fn check_single_request_reductions(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckResult> {
    let mut mismatches = 0usize;
    for i in 0..instances {
        let dim = 2 + i % 6;
        let alpha = rng.random_range(0.1..2.0);
        // learning only: no unlearn samples, p^U = 0
        let inst = shared_minimizer_instance(rng, dim, 3, 0);
        let eps = EpsilonPath {
            eps_learn: (0..3).map(|_| rng.random_range(0.1..0.9)).collect(),
            eps_unlearn: vec![],
        };
        let theta_k = inst.stationary_point(&eps)?;
        let p = PartitionWeights::new(0.6, 0.4, 0.0)?;
        let full = remain_manifold_direction(&inst, &theta_k, &eps, &p, alpha)?;
        let single = learn_only_direction(&inst, &theta_k, &eps.eps_learn, reduced_step(alpha, p.p_learn, p.p_remain))?;
        mismatches += full.iter().zip(single.iter()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        // unlearning only: no learn samples, p^L = 0
        let mut inst_u = shared_minimizer_instance(rng, dim, 1, 2);
        inst_u.learn.clear();
        let eps_u = EpsilonPath {
            eps_learn: vec![],
            eps_unlearn: (0..2).map(|_| rng.random_range(0.1..0.9)).collect(),
        };
        let theta_u = inst_u.stationary_point(&eps_u)?;
        let pu = PartitionWeights::new(0.7, 0.0, 0.3)?;
        let full_u = remain_manifold_direction(&inst_u, &theta_u, &eps_u, &pu, alpha)?;
        let single_u = unlearn_only_direction(&inst_u, &theta_u, &eps_u.eps_unlearn, reduced_step(alpha, pu.p_unlearn, pu.p_remain))?;
        mismatches += full_u.iter().zip(single_u.iter()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    Ok(CheckResult::at_most("single-request reductions match bitwise", mismatches as f64, 0.0))
}

pub fn check_damping(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let dim = 2 + (i * 7) % 19;
        let h = random_spd(rng, dim, 0.1, 10.0);
        let mu_max = SymmetricEigen::new(h.clone()).eigenvalues.max();
        let g = random_vec(rng, dim);
        let theta_min = random_vec(rng, dim);
        let beta_remain = rng.random_range(0.1..0.9) / mu_max;
        let k_inner = 1 + i % 10;
        let out = fast_slow_damping_check(&h, &g, rng.random_range(0.01..0.5), beta_remain, k_inner, &theta_min)?;
        worst = worst.max(out.relative_error());
    }
    Ok(CheckResult::at_most("fast-slow update equals damped closed form", worst, 1e-8))
}

pub fn check_replay_identity(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let dim = 2 + i % 8;
        let h = random_spd(rng, dim, 0.1, 3.0);
        let out = replay_delta_comparison(&h, &random_vec(rng, dim), &random_vec(rng, dim), &random_vec(rng, dim), rng.random_range(0.1..1.0))?;
        worst = worst.max(out.residual.amax());
    }
    Ok(CheckResult::at_most("replay delta identity residual", worst, 1e-10))
}

fn check_gradients(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    use crate::model::{explicit_hessian, Activation};
    let spec = ModelSpec::mlp(3, vec![5], 3, Activation::Tanh);
    let params = spec.init_params(rng);
    let n = 6;
    let feats: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let batch = Batch::new(feats, labels, 3)?;
    let w = SampleWeights::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let g = weighted_grad(&spec, &params, &batch, &w)?;
    let hess = explicit_hessian(&spec, &params, &batch, &w)?;
    let h = 1e-5;
    let mut grad_err: f64 = 0.0;
    let mut hess_err: f64 = 0.0;
    let loss = |p: &ParamVector| -> Result<f64> {
        let l = crate::model::per_sample_loss(&spec, p, &batch)?;
        Ok(l.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum())
    };
    for j in 0..params.len() {
        let mut e = ParamVector::zeros(params.len()).into_vec();
        e[j] = h;
        let e = ParamVector::new(e)?;
        let plus = params.add_scaled(1.0, &e)?;
        let minus = params.add_scaled(-1.0, &e)?;
        let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        grad_err = grad_err.max((fd - g.as_slice()[j]).abs() / g.as_slice()[j].abs().max(1.0));
        let gp = weighted_grad(&spec, &plus, &batch, &w)?;
        let gm = weighted_grad(&spec, &minus, &batch, &w)?;
        for r in 0..params.len() {
            let col = (gp.as_slice()[r] - gm.as_slice()[r]) / (2.0 * h);
            hess_err = hess_err.max((col - hess[(r, j)]).abs() / hess[(r, j)].abs().max(1.0));
        }
    }
    let asym = (&hess - hess.transpose()).amax();
    Ok(vec![
        CheckResult::at_most("gradient matches finite differences", grad_err, 1e-4),
        CheckResult::at_most("Hessian matches finite differences", hess_err, 1e-3),
        CheckResult::at_most("Hessian symmetry", asym, 1e-8),
    ])
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<VerificationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![
        check_vanilla(&mut rng, 20)?,
        check_single_request_reductions(&mut rng, 20)?,
        check_damping(&mut rng, 20)?,
        check_replay_identity(&mut rng, 20)?,
    ];
    let prot = remain_protection(&mut rng, 20, 6, 0.1)?;
    checks.push(CheckResult {
        name: "remain-manifold steps raise the remaining loss less (wins out of 20)".into(),
        passed: prot.wins() >= 18 && prot.mean_gap() <= 0.0,
        residual: (20 - prot.wins()) as f64,
        tolerance: 2.0,
    });
    if suite == Suite::All {
        checks.extend(check_gradients(&mut rng)?);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerificationReport {
        suite,
        seed,
        passed,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn vanilla_with_no_requests_is_remaining_gradient() {
        let mut r = rng();
        let inst = shared_minimizer_instance(&mut r, 4, 2, 2);
        let eps = EpsilonPath {
            eps_learn: vec![0.3, 0.6],
            eps_unlearn: vec![0.5, 0.2],
        };
        let theta = inst.stationary_point(&eps).unwrap();
        let p = PartitionWeights::new(1.0, 0.0, 0.0).unwrap();
        let d = vanilla_direction(&inst, &theta, &eps, &p, 0.7).unwrap();
        let expect = -inst.grad_remain(&theta) * 0.7;
        assert!((d - expect).amax() < 1e-14);
    }

    #[test]
    fn target_model_has_zero_direction() {
        let mut r = rng();
        let inst = shared_minimizer_instance(&mut r, 5, 3, 2);
        let eps = EpsilonPath::end(3, 2);
        let theta = inst.stationary_point(&eps).unwrap();
        let star = inst.oracle().unwrap();
        assert!((&theta - &star).amax() < 1e-12);
        let p = PartitionWeights::new(0.5, 0.3, 0.2).unwrap();
        assert!(vanilla_direction(&inst, &theta, &eps, &p, 1.0).unwrap().amax() < 1e-12);
    }

    #[test]
    fn stationary_point_is_stationary() {
        let mut r = rng();
        let inst = shared_minimizer_instance(&mut r, 5, 3, 2);
        let eps = EpsilonPath::start(3, 2);
        let theta = inst.stationary_point(&eps).unwrap();
        assert!(inst.stationarity_residual(&theta, &eps) < 1e-12);
        let eps = EpsilonPath {
            eps_learn: vec![0.5, 0.6, 0.7],
            eps_unlearn: vec![0.4, 0.3],
        };
        let (inst2, theta2) = remain_stationary_instance(&mut r, 4, &eps).unwrap();
        assert!(inst2.stationarity_residual(&theta2, &eps) < 1e-10);
        assert!(inst2.grad_remain(&theta2).amax() == 0.0);
    }

    #[test]
    fn vanilla_matches_brute_force() {
        let c = check_vanilla(&mut rng(), 5).unwrap();
        assert!(c.passed, "{c:?}");
    }

    #[test]
    fn identity_remaining_hessian_scales_task_component() {
        let mut r = rng();
        let mut inst = shared_minimizer_instance(&mut r, 3, 2, 2);
        inst.remain.hessian = DMatrix::identity(3, 3);
        let eps = EpsilonPath {
            eps_learn: vec![0.3, 0.6],
            eps_unlearn: vec![0.5, 0.2],
        };
        let theta = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let p = PartitionWeights::new(0.4, 0.4, 0.2).unwrap();
        let v = vanilla_direction(&inst, &theta, &eps, &p, 1.0).unwrap();
        let task_part = v + inst.grad_remain(&theta) * p.p_remain;
        let m = remain_manifold_direction(&inst, &theta, &eps, &p, 1.0).unwrap();
        assert!((m - task_part / (p.p_remain + 1.0)).amax() < 1e-12);
    }

    #[test]
    fn singular_remaining_hessian_reports_condition() {
        let mut r = rng();
        let mut inst = shared_minimizer_instance(&mut r, 3, 2, 1);
        inst.remain.hessian = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        let eps = EpsilonPath::start(2, 1);
        let p = PartitionWeights::new(0.4, 0.4, 0.2).unwrap();
        let theta = DVector::zeros(3);
        assert!(matches!(
            remain_manifold_direction(&inst, &theta, &eps, &p, 1.0),
            Err(CluError::Singular { .. })
        ));
    }

    #[test]
    fn reductions_are_bitwise() {
        let c = check_single_request_reductions(&mut rng(), 10).unwrap();
        assert!(c.passed, "{c:?}");
    }

    #[test]
    fn step_size_conventions_differ() {
        let a = single_request_step(0.5, 0.3, 0.6);
        let b = reduced_step(0.5, 0.3, 0.6);
        assert!((a - 0.5 * 0.3 / 1.3).abs() < 1e-15);
        assert!((b - 0.25 * 0.3 / 1.6).abs() < 1e-15);
        assert!(a != b);
    }

    #[test]
    fn remain_protection_wins() {
        let out = remain_protection(&mut rng(), 20, 6, 0.1).unwrap();
        assert!(out.wins() >= 18);
        assert!(out.mean_gap() <= 0.0);
    }

    #[test]
    fn no_inner_steps_gives_plain_task_step() {
        let h = random_spd(&mut rng(), 3, 0.5, 2.0);
        let g = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let out = fast_slow_damping_check(&h, &g, 0.3, 0.1, 0, &DVector::zeros(3)).unwrap();
        assert!((out.simulated - &g * 0.3).amax() < 1e-15);
    }

    #[test]
    fn isotropic_curvature_is_colinear_with_inverse() {
        let h = DMatrix::identity(4, 4) * 2.0;
        let g = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let out = fast_slow_damping_check(&h, &g, 0.2, 0.1, 5, &DVector::from_vec(vec![0.3, 0.1, 0.0, -0.4])).unwrap();
        let expect = &g * (0.2 * 0.8f64.powi(5));
        assert!((&out.simulated - expect).amax() < 1e-13);
        assert!((out.cosine_to_inverse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_damping_hand_values() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 1.0]));
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let out = fast_slow_damping_check(&h, &g, 1.0, 0.05, 10, &DVector::zeros(2)).unwrap();
        let mut pairs: Vec<(f64, f64)> = out.eigenvalues.iter().copied().zip(out.damping.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((pairs[1].1 - 0.5f64.powi(10)).abs() < 1e-15);
        assert!((pairs[0].1 - 0.95f64.powi(10)).abs() < 1e-15);
        assert!((pairs[1].1 - 9.765625e-4).abs() < 1e-9);
        assert!((pairs[0].1 - 0.5987369392383787).abs() < 1e-12);
        assert!(out.relative_error() < 1e-12);
        assert!(!out.diverges);
        assert!(fast_slow_damping_check(&h, &g, 1.0, 0.2, 1, &DVector::zeros(2)).unwrap().diverges);
    }

    #[test]
    fn damping_decreases_with_curvature() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 2.0, 4.0]));
        let g = DVector::from_element(4, 1.0);
        let out = fast_slow_damping_check(&h, &g, 0.1, 0.2, 3, &DVector::zeros(4)).unwrap();
        let mut pairs: Vec<(f64, f64)> = out.eigenvalues.iter().copied().zip(out.damping.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[1].1 < w[0].1));
    }

    #[test]
    fn replay_identity_edge_cases() {
        let g = DVector::from_vec(vec![0.5, -1.0]);
        let c = DVector::from_vec(vec![0.2, 0.1]);
        let t = DVector::from_vec(vec![-0.3, 0.4]);
        let zero = replay_delta_comparison(&DMatrix::zeros(2, 2), &c, &g, &t, 1.0).unwrap();
        assert_eq!(zero.ours, zero.replay);
        let id = replay_delta_comparison(&DMatrix::identity(2, 2), &c, &g, &t, 1.0).unwrap();
        assert!((&id.ours - (&t - &c)).amax() < 1e-15);
        assert!(id.residual.amax() < 1e-15);
    }

    #[test]
    fn suite_passes_and_serializes() {
        let report = run_suite(Suite::All, 3).unwrap();
        assert!(report.passed, "{report:#?}");
        let json = serde_json::to_string(&report).unwrap();
        let back: VerificationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.checks.len(), report.checks.len());
        assert!(Suite::parse("everything").is_err());
    }
}
