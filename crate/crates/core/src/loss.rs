//! Soft-label alignment objectives over next-token logits.
//!
//! Soft labels mix the one-hot gold token with the collaborative token
//! distribution: `y(v) = (1 - alpha) * [v = gold] + alpha * p(v)`. Two
//! objectives consume them:
//!
//! * soft NTP, `-log sum_v y(v) P(v)`, whose logit gradient is `P - q` with
//!   adaptive weights `q(v) = y(v) P(v) / S`;
//! * auxiliary KL in cross-entropy form, `-sum_v y(v) log P(v)`, whose
//!   gradient is `P - y`.
//!
//! Both reduce to plain next-token cross-entropy at `alpha = 0`, bit for bit.

use serde::{Deserialize, Serialize};

use crate::catalog::TokenId;
use crate::collab::TokenDistribution;
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use rand_distr::Distribution;

/// Floor applied to `S` inside the soft-NTP log.
pub const PROB_FLOOR: f64 = 1e-300;
/// Floor applied to `log P` inside the auxiliary cross-entropy.
pub const LOG_FLOOR: f64 = -700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Ntp,
    SoftNtp,
    AuxKl,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ntp" => Ok(Objective::Ntp),
            "soft_ntp" | "soft-ntp" => Ok(Objective::SoftNtp),
            "aux_kl" | "aux-kl" => Ok(Objective::AuxKl),
            other => Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Ntp => "ntp",
            Objective::SoftNtp => "soft_ntp",
            Objective::AuxKl => "aux_kl",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    pub position: usize,
    pub gold: TokenId,
    pub alpha: f64,
    /// Dense over the vocabulary.
    pub probs: Vec<f64>,
    /// Set when the collaborative distribution was flagged empty and the
    /// label fell back to one-hot.
    pub degraded: bool,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

pub fn one_hot_label(gold: TokenId, vocab_size: usize, position: usize) -> SoftLabel {
    let mut probs = vec![0.0; vocab_size];
    probs[gold as usize] = 1.0;
    SoftLabel {
        position,
        gold,
        alpha: 0.0,
        probs,
        degraded: false,
    }
}

pub fn make_soft_label(
    gold: TokenId,
    collab: &TokenDistribution,
    alpha: f64,
    vocab_size: usize,
) -> Result<SoftLabel> {
    check_alpha(alpha)?;
    if gold as usize >= vocab_size {
        return Err(Error::ContractViolation(format!(
            "gold token {gold} outside vocabulary of {vocab_size}"
        )));
    }
    if collab.is_empty() {
        log::warn!(
            "empty collaborative distribution at position {}; using one-hot label",
            collab.position
        );
        let mut l = one_hot_label(gold, vocab_size, collab.position);
        l.alpha = alpha;
        l.degraded = true;
        return Ok(l);
    }
    let mut probs = vec![0.0; vocab_size];
    for &(t, p) in &collab.probs {
        let slot = probs.get_mut(t as usize).ok_or_else(|| {
            Error::ContractViolation(format!("token {t} outside vocabulary of {vocab_size}"))
        })?;
        *slot = alpha * p;
    }
    probs[gold as usize] += 1.0 - alpha;
    Ok(SoftLabel {
        position: collab.position,
        gold,
        alpha,
        probs,
        degraded: false,
    })
}

/// Per-position and total loss with the logit gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_position: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    /// Soft-NTP adaptive weights `q_j`.
    pub adaptive: Option<Vec<Vec<f64>>>,
    /// Soft-NTP `S_j = sum_v y_j(v) P_j(v)`.
    pub s: Option<Vec<f64>>,
    /// The auxiliary objective omits the label-entropy constant.
    pub constant_dropped: bool,
    /// Positions where a numerical floor was hit.
    pub clamped: Vec<usize>,
}

/// Returns `(P, log-sum-exp)` for a logit vector.
pub fn softmax(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    (z.iter().map(|&v| (v - lse).exp()).collect(), lse)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Plain cross-entropy at one position; writes `P - onehot` into `grad`.
pub fn ntp_position(gold: TokenId, z: &[f64], grad: &mut [f64]) -> f64 {
    let lse = log_sum_exp(z);
    for (g, &v) in grad.iter_mut().zip(z) {
        *g = (v - lse).exp();
    }
    grad[gold as usize] -= 1.0;
    lse - z[gold as usize]
}

pub struct SoftNtpPosition {
    pub loss: f64,
    pub log_s: f64,
    pub clamped: bool,
}

/// Soft NTP at one position; writes `P - q` into `grad` and `q` into `q_out`
/// when given.
pub fn soft_ntp_position(
    label: &[f64],
    z: &[f64],
    grad: &mut [f64],
    mut q_out: Option<&mut [f64]>,
) -> SoftNtpPosition {
    let lse = log_sum_exp(z);
    // log of the unnormalized numerator sum_v y(v) exp(z(v)), over supp(y)
    let mut m = f64::NEG_INFINITY;
    for (&y, &v) in label.iter().zip(z) {
        if y > 0.0 {
            m = m.max(y.ln() + v);
        }
    }
    let mut acc = 0.0;
    for (&y, &v) in label.iter().zip(z) {
        if y > 0.0 {
            acc += (y.ln() + v - m).exp();
        }
    }
    let num = m + acc.ln();
    let mut log_s = num - lse;
    let clamped = !(log_s >= PROB_FLOOR.ln());
    if clamped {
        log_s = PROB_FLOOR.ln();
    }
    for (k, (&y, &v)) in label.iter().zip(z).enumerate() {
        let p = (v - lse).exp();
        let q = if y > 0.0 { (y.ln() + v - num).exp() } else { 0.0 };
        grad[k] = p - q;
        if let Some(out) = q_out.as_deref_mut() {
            out[k] = q;
        }
    }
    SoftNtpPosition {
        loss: -log_s,
        log_s,
        clamped,
    }
}

/// Auxiliary cross-entropy at one position; writes `P - y` into `grad`.
/// Returns the loss and whether the log floor was hit.
pub fn aux_kl_position(label: &[f64], z: &[f64], grad: &mut [f64]) -> (f64, bool) {
    let lse = log_sum_exp(z);
    let mut loss = 0.0;
    let mut clamped = false;
    for (k, (&y, &v)) in label.iter().zip(z).enumerate() {
        let logp = v - lse;
        grad[k] = logp.exp() - y;
        if y > 0.0 {
            let lp = if logp < LOG_FLOOR {
                clamped = true;
                LOG_FLOOR
            } else {
                logp
            };
            loss += y * lp;
        }
    }
    (-loss, clamped)
}

fn check_shapes(labels: &[SoftLabel], logits: &[Vec<f64>]) -> Result<()> {
    if labels.len() != logits.len() {
        return Err(Error::ContractViolation(format!(
            "{} labels but {} logit vectors",
            labels.len(),
            logits.len()
        )));
    }
    for (j, (l, z)) in labels.iter().zip(logits).enumerate() {
        if l.probs.len() != z.len() {
            return Err(Error::ContractViolation(format!(
                "position {j}: label over {} tokens, logits over {}",
                l.probs.len(),
                z.len()
            )));
        }
    }
    Ok(())
}

pub fn ntp_loss(gold: &[TokenId], logits: &[Vec<f64>]) -> Result<LossBreakdown> {
    if gold.len() != logits.len() {
        return Err(Error::ContractViolation("gold/logit length mismatch".into()));
    }
    let mut out = LossBreakdown::default();
    for (&g, z) in gold.iter().zip(logits) {
        let mut grad = vec![0.0; z.len()];
        let l = ntp_position(g, z, &mut grad);
        out.per_position.push(l);
        out.grads.push(grad);
    }
    out.total = out.per_position.iter().sum();
    Ok(out)
}

pub fn soft_ntp_loss(labels: &[SoftLabel], logits: &[Vec<f64>]) -> Result<LossBreakdown> {
    check_shapes(labels, logits)?;
    let mut out = LossBreakdown::default();
    let mut qs = Vec::with_capacity(labels.len());
    let mut ss = Vec::with_capacity(labels.len());
    for (j, (l, z)) in labels.iter().zip(logits).enumerate() {
        let mut grad = vec![0.0; z.len()];
        let mut q = vec![0.0; z.len()];
        let r = soft_ntp_position(&l.probs, z, &mut grad, Some(&mut q));
        if r.clamped {
            out.clamped.push(j);
        }
        out.per_position.push(r.loss);
        out.grads.push(grad);
        qs.push(q);
        ss.push(r.log_s.exp());
    }
    out.total = out.per_position.iter().sum();
    out.adaptive = Some(qs);
    out.s = Some(ss);
    Ok(out)
}

pub fn aux_kl_loss(labels: &[SoftLabel], logits: &[Vec<f64>]) -> Result<LossBreakdown> {
    check_shapes(labels, logits)?;
    let mut out = LossBreakdown {
        constant_dropped: true,
        ..LossBreakdown::default()
    };
    for (j, (l, z)) in labels.iter().zip(logits).enumerate() {
        let mut grad = vec![0.0; z.len()];
        let (loss, clamped) = aux_kl_position(&l.probs, z, &mut grad);
        if clamped {
            log::warn!("log probability floored at position {j}");
            out.clamped.push(j);
        }
        out.per_position.push(loss);
        out.grads.push(grad);
    }
    out.total = out.per_position.iter().sum();
    Ok(out)
}

/// `(P - q, q)` per position.
pub fn soft_ntp_grad(labels: &[SoftLabel], logits: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let b = soft_ntp_loss(labels, logits)?;
    Ok((b.grads, b.adaptive.unwrap_or_default()))
}

/// `P - y` per position.
pub fn aux_kl_grad(labels: &[SoftLabel], logits: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(aux_kl_loss(labels, logits)?.grads)
}

pub fn objective_loss(objective: Objective, labels: &[SoftLabel], logits: &[Vec<f64>]) -> Result<LossBreakdown> {
    match objective {
        Objective::Ntp => {
            let gold: Vec<TokenId> = labels.iter().map(|l| l.gold).collect();
            ntp_loss(&gold, logits)
        }
        Objective::SoftNtp => soft_ntp_loss(labels, logits),
        Objective::AuxKl => aux_kl_loss(labels, logits),
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    /// Coordinates where a perturbed loss was not finite.
    pub non_finite: Vec<usize>,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err <= tol
    }
}

/// Central-difference check of `analytic` against `loss` at `x`.
pub fn fd_check<F>(loss: F, x: &[f64], analytic: &[f64], step: f64) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
{
    fd_check_coords(loss, x, analytic, step, 0..x.len())
}

/// As [`fd_check`], restricted to the given coordinates.
pub fn fd_check_coords<F, I>(loss: F, x: &[f64], analytic: &[f64], step: f64, coords: I) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
    I: IntoIterator<Item = usize>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {step}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::ContractViolation("gradient length mismatch".into()));
    }
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_coordinate: None,
        checked: 0,
        non_finite: Vec::new(),
    };
    let mut buf = x.to_vec();
    for k in coords {
        buf[k] = x[k] + step;
        let up = loss(&buf);
        buf[k] = x[k] - step;
        let down = loss(&buf);
        buf[k] = x[k];
        report.checked += 1;
        if !up.is_finite() || !down.is_finite() {
            report.non_finite.push(k);
            continue;
        }
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[k], numeric);
        if err > report.max_rel_err || report.worst_coordinate.is_none() {
            report.max_rel_err = err;
            report.worst_coordinate = Some(k);
        }
    }
    Ok(report)
}

/// Finite-difference check of one objective's logit gradient on a single
/// instance; logits are flattened position-major.
pub fn fd_check_objective(
    objective: Objective,
    labels: &[SoftLabel],
    logits: &[Vec<f64>],
    step: f64,
) -> Result<FdReport> {
    let analytic: Vec<f64> = objective_loss(objective, labels, logits)?
        .grads
        .concat();
    let width = logits.first().map_or(0, Vec::len);
    let flat = logits.concat();
    let f = |x: &[f64]| {
        let zs: Vec<Vec<f64>> = x.chunks(width.max(1)).map(<[f64]>::to_vec).collect();
        objective_loss(objective, labels, &zs)
            .map(|b| b.total)
            .unwrap_or(f64::NAN)
    };
    fd_check(f, &flat, &analytic, step)
}

/// Random labels and logits: a uniform gold token, a collaborative
/// distribution on a random support of up to 8 tokens (always including the
/// gold token) and Gaussian logits with standard deviation 2.
pub fn random_instance(rng: &mut Rng, vocab: usize, positions: usize, alpha: f64) -> Result<(Vec<SoftLabel>, Vec<Vec<f64>>)> {
    let normal = rand_distr::Normal::new(0.0, 2.0).expect("finite std");
    let mut labels = Vec::with_capacity(positions);
    let mut logits = Vec::with_capacity(positions);
    for j in 0..positions {
        let gold = rng.random_range(0..vocab) as TokenId;
        let mut support: Vec<TokenId> = rand::seq::index::sample(rng, vocab, vocab.min(8))
            .into_iter()
            .map(|t| t as TokenId)
            .collect();
        support.truncate(rng.random_range(1..=support.len()));
        if !support.contains(&gold) {
            support.push(gold);
        }
        support.sort_unstable();
        let w: Vec<f64> = support.iter().map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = w.iter().sum();
        let collab = TokenDistribution {
            position: j + 1,
            prefix: Vec::new(),
            probs: support.iter().zip(&w).map(|(&t, &x)| (t, x / total)).collect(),
        };
        labels.push(make_soft_label(gold, &collab, alpha, vocab)?);
        logits.push((0..vocab).map(|_| normal.sample(rng)).collect());
    }
    Ok((labels, logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub instances: usize,
    pub vocab: usize,
    pub positions: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Worst instance per objective.
    pub soft_ntp: FdReport,
    pub aux_kl: FdReport,
    pub soft_ntp_pass: bool,
    pub aux_kl_pass: bool,
}

/// Finite-difference check, against extended-precision losses, of both soft
/// objectives over random instances with alpha drawn uniformly from [0, 1].
pub fn grad_check(seed: u64, instances: usize, vocab: usize, positions: usize, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = crate::rng::stream(seed, "grad-check");
    let mut worst = [None::<FdReport>, None];
    for _ in 0..instances {
        let alpha = rng.random::<f64>();
        let (labels, logits) = random_instance(&mut rng, vocab, positions, alpha)?;
        for (slot, obj) in worst.iter_mut().zip([Objective::SoftNtp, Objective::AuxKl]) {
            let r = crate::precise::fd_check_objective_precise(obj, &labels, &logits, step)?;
            let replace = match slot {
                Some(w) => r.max_rel_err > w.max_rel_err || !r.non_finite.is_empty(),
                None => true,
            };
            if replace {
                *slot = Some(r);
            }
        }
    }
    let [soft, aux] = worst;
    let empty = FdReport {
        max_rel_err: 0.0,
        worst_coordinate: None,
        checked: 0,
        non_finite: Vec::new(),
    };
    let soft_ntp = soft.unwrap_or_else(|| empty.clone());
    let aux_kl = aux.unwrap_or(empty);
    Ok(GradCheckReport {
        seed,
        instances,
        vocab,
        positions,
        step,
        tolerance,
        soft_ntp_pass: soft_ntp.passes(tolerance),
        aux_kl_pass: aux_kl.passes(tolerance),
        soft_ntp,
        aux_kl,
    })
}
