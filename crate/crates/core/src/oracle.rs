//! Independent numerical checks.
//!
//! Nothing here calls the closed-form weights to produce its answer: the
//! simplex maximizers only evaluate the regularized expected loss, and the
//! finite-difference gradient only evaluates a scalar loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedGroup, Kind, Payload, Target};
use crate::data::InputEncoder;
use crate::diffcore::{DType, Model, ModelSpec, Real};
use crate::engine::{group_step, group_step_with_targets, TrainConfig, TrainMode};
use crate::error::{Error, Result};
use crate::reweight::{self, LossMode, WeightVector};

/// Lower clip applied to weights before taking logarithms.
pub const LOG_CLIP: f64 = 1e-15;

/// Acceptance thresholds for [`verify_theorem1`] reports.
pub const MAX_LINF_GAP: f64 = 1e-5;
pub const MAX_VALUE_GAP: f64 = 1e-9;

/// `Σ w ℓ − λ Σ w ln(n·max(w, clip))`.
fn objective(losses: &[f64], w: &[f64], lambda_p: f64) -> f64 {
    let n = w.len() as f64;
    let mut v = 0.0;
    for (&l, &p) in losses.iter().zip(w) {
        v += p * l;
        if p > 0.0 {
            v -= lambda_p * p * (n * p.max(LOG_CLIP)).ln();
        }
    }
    v
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    // Remove the rounding residue so the sum is 1 to within an ulp or two.
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSolution {
    pub weights: WeightVector,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterative scheme used by [`simplex_maximize_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentMethod {
    /// Euclidean projected gradient ascent with step halving. Reliable only
    /// when no maximizing weight is tiny (roughly `λ_P ≥ spread / 5`).
    ProjectedGradient,
    /// Newton ascent using the exact diagonal Hessian `−λ_P / w_i` on the
    /// affine hull of the simplex, a fraction-to-boundary step limit and
    /// projection back onto the simplex.
    ProjectedNewton,
}

fn gradient(losses: &[f64], w: &[f64], lambda_p: f64, out: &mut [f64]) {
    let n = w.len() as f64;
    for ((g, &wi), &l) in out.iter_mut().zip(w).zip(losses) {
        *g = l - lambda_p * ((n * wi.max(LOG_CLIP)).ln() + 1.0);
    }
}

fn check_ascent_args(losses: &[f64], lambda_p: f64, tol: f64) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("no losses".into()));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("losses {:?}", losses)));
    }
    if !(lambda_p > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda_p {} and tol {} must be positive",
            lambda_p, tol
        )));
    }
    Ok(())
}

/// Numerically maximizes `w ↦ Σ w ℓ − λ_P·KL(w ‖ uniform)` over the
/// simplex with projected Newton ascent.
pub fn simplex_maximize(losses: &[f64], lambda_p: f64, max_iters: usize, tol: f64) -> Result<SimplexSolution> {
    simplex_maximize_with(AscentMethod::ProjectedNewton, losses, lambda_p, max_iters, tol)
}

/// Both methods start from the uniform point and only accept steps that
/// increase the objective. They stop once an accepted step moves the
/// iterate by less than `tol` in L∞ or the step length underflows; hitting
/// `max_iters` returns the best iterate with `converged = false`.
pub fn simplex_maximize_with(
    method: AscentMethod,
    losses: &[f64],
    lambda_p: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SimplexSolution> {
    check_ascent_args(losses, lambda_p, tol)?;
    let n = losses.len();
    if n == 1 {
        return Ok(SimplexSolution {
            weights: WeightVector::uniform(1),
            value: losses[0],
            iterations: 0,
            converged: true,
        });
    }
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
    let mut w = vec![1.0 / n as f64; n];
    let mut value = objective(losses, &w, lambda_p);
    let mut grad = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut step = match method {
        AscentMethod::ProjectedGradient => 0.1 * lambda_p / (1.0 + (hi - lo)),
        AscentMethod::ProjectedNewton => 1.0,
    };
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        gradient(losses, &w, lambda_p, &mut grad);
        let cand = match method {
            AscentMethod::ProjectedGradient => {
                for ((t, &wi), &g) in trial.iter_mut().zip(&w).zip(&grad) {
                    *t = wi + step * g;
                }
                project_to_simplex(&trial)
            }
            AscentMethod::ProjectedNewton => {
                // Newton direction on {Σ d = 0}: d_i = (w_i/λ)(g_i − ν), ν = Σ w_i g_i.
                let nu: f64 = w.iter().zip(&grad).map(|(a, b)| a * b).sum();
                let mut limit = 1.0f64;
                for ((d, &wi), &g) in dir.iter_mut().zip(&w).zip(&grad) {
                    *d = wi * (g - nu) / lambda_p;
                    if *d < 0.0 {
                        limit = limit.min(0.99 * wi / -*d);
                    }
                }
                let newton_size = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
                if newton_size < tol {
                    converged = true;
                    break;
                }
                let alpha = step.min(limit);
                for ((t, &wi), &d) in trial.iter_mut().zip(&w).zip(&dir) {
                    *t = wi + alpha * d;
                }
                project_to_simplex(&trial)
            }
        };
        let cand_value = objective(losses, &cand, lambda_p);
        if cand_value > value {
            let moved = cand.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            w = cand;
            value = cand_value;
            if method == AscentMethod::ProjectedNewton {
                step = 1.0;
            }
            if moved < tol {
                converged = true;
                break;
            }
        } else {
            step *= 0.5;
            if step < f64::MIN_POSITIVE {
                converged = true;
                break;
            }
        }
    }
    Ok(SimplexSolution {
        weights: WeightVector::new(w)?,
        value,
        iterations,
        converged,
    })
}

/// Exhaustive scan of the simplex on a grid of spacing `resolution`
/// (n ≤ 3 only).
pub fn grid_maximize(losses: &[f64], lambda_p: f64, resolution: f64) -> Result<WeightVector> {
    let n = losses.len();
    if n == 0 || n > 3 {
        return Err(Error::InvalidArgument(format!(
            "grid search supports 1 to 3 members, got {}",
            n
        )));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::InvalidArgument(format!("resolution {}", resolution)));
    }
    if n == 1 {
        return Ok(WeightVector::uniform(1));
    }
    let steps = (1.0 / resolution).round() as usize;
    let h = 1.0 / steps as f64;
    let mut best = (f64::NEG_INFINITY, vec![0.0; n]);
    let mut consider = |w: Vec<f64>| {
        let v = objective(losses, &w, lambda_p);
        if v > best.0 {
            best = (v, w);
        }
    };
    if n == 2 {
        for i in 0..=steps {
            let a = i as f64 * h;
            consider(vec![a, (1.0 - a).max(0.0)]);
        }
    } else {
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let (a, b) = (i as f64 * h, j as f64 * h);
                consider(vec![a, b, (1.0 - a - b).max(0.0)]);
            }
        }
    }
    let w = best.1;
    let total: f64 = w.iter().sum();
    WeightVector::new(w.into_iter().map(|x| x / total).collect())
}

/// Central finite differences of `loss_fn` with respect to every scalar
/// parameter, in declaration order. Requires `f64` parameters.
pub fn finite_diff_grad<T, F>(model: &Model<T>, loss_fn: F, eps: f64) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: Fn(&Model<T>) -> Result<f64>,
{
    if T::DTYPE != DType::F64 {
        return Err(Error::Precision("finite_diff_grad"));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps {}", eps)));
    }
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params().len());
    for p in 0..model.params().len() {
        let mut g = Vec::with_capacity(model.params()[p].len());
        for k in 0..model.params()[p].len() {
            let orig = probe.params()[p].data()[k];
            probe.params_mut()[p].data_mut()[k] = orig + T::lit(eps);
            let up = loss_fn(&probe)?;
            probe.params_mut()[p].data_mut()[k] = orig - T::lit(eps);
            let down = loss_fn(&probe)?;
            probe.params_mut()[p].data_mut()[k] = orig;
            g.push((up - down) / (2.0 * eps));
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over paired gradients.
pub fn max_relative_error(a: &[Vec<f64>], b: &[Vec<f64>], floor: f64) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Denominator floor for relative gradient errors, so components that are
/// zero up to finite-difference noise are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const MAX_GRAD_REL_ERROR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub seed: u64,
    pub mode: TrainMode,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares the backward pass of one group step on a random tiny MLP with
/// central differences of the group's maximal objective. Weights are
/// recomputed at every probe; in soft mode the divergence targets stay at
/// their unperturbed values.
pub fn grad_check_group(seed: u64, mode: TrainMode) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, hidden, classes) = (4, 6, 3);
    let model = Model::<f64>::init(ModelSpec::mlp(inputs, hidden, classes), &mut rng)?;
    let members: Vec<Payload> = (0..4)
        .map(|_| Payload::Vector {
            features: (0..inputs).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
        })
        .collect();
    let group = AugmentedGroup {
        id: format!("gradcheck-{}", seed),
        kind: Kind::Vector,
        original: members[0].clone(),
        label: Target::Class(rng.random_range(0..classes)),
        members,
        member_targets: None,
    };
    let mut cfg = TrainConfig {
        mode,
        n_aug: 3,
        ..TrainConfig::default()
    };
    cfg.mmel.lambda_p = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    if mode == TrainMode::MmelSoft {
        cfg.mmel.mode = LossMode::Soft;
    }
    let enc = InputEncoder::new(vec![inputs], None);
    let step = group_step(&model, &enc, &group, &cfg, None, 0)?;
    let analytic: Vec<Vec<f64>> = (0..model.params().len())
        .map(|i| {
            step.grads
                .get(i)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; model.params()[i].len()])
        })
        .collect();
    let numeric = if mode == TrainMode::MmelSoft {
        finite_diff_grad(
            &model,
            |m| Ok(group_step_with_targets(m, &enc, &group, &cfg, &step.targets)?.objective),
            GRAD_EPS,
        )?
    } else {
        finite_diff_grad(
            &model,
            |m| Ok(group_step(m, &enc, &group, &cfg, None, 0)?.objective),
            GRAD_EPS,
        )?
    };
    let max_rel_error = max_relative_error(&analytic, &numeric, GRAD_FLOOR);
    Ok(GradCheck {
        seed,
        mode,
        params: model.num_scalars(),
        max_rel_error,
        passed: max_rel_error < MAX_GRAD_REL_ERROR,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub losses: Vec<f64>,
    pub lambda_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instance: Instance,
    pub oracle_w: WeightVector,
    pub closed_w: WeightVector,
    /// `‖oracle_w − closed_w‖∞`.
    pub linf_gap: f64,
    /// `|hard objective value − λ_P·ln mean exp(ℓ/λ_P)|`.
    pub value_gap: f64,
    /// `max(0, oracle value − closed-form value)`.
    pub sup_excess: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const LAMBDA_CHOICES: [f64; 3] = [0.1, 1.0, 10.0];

/// Instance `index` of the random family used by [`verify_theorem1`]:
/// `n ∈ [2, 8]`, losses `~ U[0, 5]`, `λ_P ∈ {0.1, 1, 10}`.
pub fn random_instance(seed: u64, index: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = rng.random_range(2..=8);
    let losses = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
    let lambda_p = LAMBDA_CHOICES[rng.random_range(0..LAMBDA_CHOICES.len())];
    Instance { losses, lambda_p }
}

pub fn check_instance(instance: &Instance) -> Result<OracleReport> {
    let Instance { losses, lambda_p } = instance;
    let closed = reweight::hard_objective(losses, *lambda_p)?;
    let oracle = simplex_maximize(losses, *lambda_p, 10_000, 1e-14)?;
    let identity = reweight::log_mean_exp(losses, *lambda_p);
    Ok(OracleReport {
        instance: instance.clone(),
        linf_gap: oracle.weights.linf_distance(&closed.weights),
        value_gap: (closed.value - identity).abs(),
        sup_excess: (oracle.value - closed.value).max(0.0),
        oracle_w: oracle.weights,
        closed_w: closed.weights,
        iterations: oracle.iterations,
        converged: oracle.converged,
    })
}

/// Compares the closed form against the numerical maximizer on
/// `num_instances` random instances. Instances are verified in parallel;
/// the output order and content depend only on `seed`.
pub fn verify_theorem1(num_instances: usize, seed: u64) -> Result<Vec<OracleReport>> {
    (0..num_instances as u64)
        .into_par_iter()
        .map(|i| check_instance(&random_instance(seed, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub instances: usize,
    pub max_linf_gap: f64,
    pub max_value_gap: f64,
    pub max_sup_excess: f64,
    pub unconverged: usize,
    pub passed: bool,
}

pub fn summarize(reports: &[OracleReport]) -> VerifySummary {
    let max = |f: fn(&OracleReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
    let max_linf_gap = max(|r| r.linf_gap);
    let max_value_gap = max(|r| r.value_gap);
    let max_sup_excess = max(|r| r.sup_excess);
    VerifySummary {
        instances: reports.len(),
        max_linf_gap,
        max_value_gap,
        max_sup_excess,
        unconverged: reports.iter().filter(|r| !r.converged).count(),
        passed: max_linf_gap < MAX_LINF_GAP && max_value_gap < MAX_VALUE_GAP && max_sup_excess <= 1e-9,
    }
}
