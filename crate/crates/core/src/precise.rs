//! Extended-precision (128-bit mantissa) evaluation of the per-position
//! objectives, used as the reference in finite-difference checks.
//!
//! A double-precision central difference with step 1e-5 carries a
//! cancellation error around 1e-11, which swamps small gradient entries.
//! Here the loss is evaluated with 128-bit arithmetic, and a perturbation
//! of one logit only recomputes the single exponential it changes.

use astro_float::{BigFloat, Consts, RoundingMode};

use crate::error::{Error, Result};
use crate::loss::{objective_loss, relative_error, FdReport, Objective, SoftLabel};

const PREC: usize = 128;
const RM: RoundingMode = RoundingMode::ToEven;

fn bf(x: f64) -> BigFloat {
    BigFloat::from_f64(x, PREC)
}

pub fn to_f64(x: &BigFloat) -> f64 {
    x.to_string().parse().unwrap_or(f64::NAN)
}

/// Extended-precision context; holds the constant cache.
pub struct Precise {
    cc: Consts,
}

impl Precise {
    pub fn new() -> Result<Self> {
        Ok(Precise {
            cc: Consts::new().map_err(|e| Error::ContractViolation(format!("precision constants: {e:?}")))?,
        })
    }

    pub fn exp(&mut self, x: &BigFloat) -> BigFloat {
        x.exp(PREC, RM, &mut self.cc)
    }

    pub fn ln(&mut self, x: &BigFloat) -> BigFloat {
        x.ln(PREC, RM, &mut self.cc)
    }

    /// Softmax of `z` computed in extended precision, rounded to f64.
    pub fn softmax(&mut self, z: &[f64]) -> Vec<f64> {
        let terms: Vec<BigFloat> = z.iter().map(|&v| self.exp(&bf(v))).collect();
        let total = sum(&terms);
        terms.iter().map(|t| to_f64(&t.div(&total, PREC, RM))).collect()
    }

    /// Loss of one position in extended precision.
    pub fn position_loss(&mut self, objective: Objective, label: &SoftLabel, z: &[f64]) -> f64 {
        let oracle = PositionOracle::new(self, objective, label, z);
        to_f64(&oracle.loss(self, 0, &bf(0.0)))
    }
}

fn sum(xs: &[BigFloat]) -> BigFloat {
    xs.iter().fold(bf(0.0), |a, x| a.add(x, PREC, RM))
}

/// One position's loss under single-coordinate perturbations.
struct PositionOracle<'a> {
    objective: Objective,
    label: &'a SoftLabel,
    z: &'a [f64],
    exps: Vec<BigFloat>,
    total: BigFloat,
    weighted: BigFloat,
}

impl<'a> PositionOracle<'a> {
    fn new(p: &mut Precise, objective: Objective, label: &'a SoftLabel, z: &'a [f64]) -> Self {
        let exps: Vec<BigFloat> = z.iter().map(|&v| p.exp(&bf(v))).collect();
        let total = sum(&exps);
        let weighted = sum(
            &exps
                .iter()
                .zip(&label.probs)
                .map(|(e, &y)| e.mul(&bf(y), PREC, RM))
                .collect::<Vec<_>>(),
        );
        PositionOracle {
            objective,
            label,
            z,
            exps,
            total,
            weighted,
        }
    }

    /// Loss with `z[k]` replaced by `z[k] + delta`.
    fn loss(&self, p: &mut Precise, k: usize, delta: &BigFloat) -> BigFloat {
        let zk = bf(self.z[k]).add(delta, PREC, RM);
        let ek = p.exp(&zk);
        let change = ek.sub(&self.exps[k], PREC, RM);
        let lse = p.ln(&self.total.add(&change, PREC, RM));
        match self.objective {
            Objective::Ntp => {
                let gold = self.label.gold as usize;
                let zg = if gold == k { zk } else { bf(self.z[gold]) };
                lse.sub(&zg, PREC, RM)
            }
            Objective::SoftNtp => {
                let yk = bf(self.label.probs[k]);
                let num = self.weighted.add(&yk.mul(&change, PREC, RM), PREC, RM);
                lse.sub(&p.ln(&num), PREC, RM)
            }
            Objective::AuxKl => {
                // -sum_v y(v) (z(v) - lse)
                let mut acc = bf(0.0);
                for (v, &y) in self.label.probs.iter().enumerate() {
                    if y > 0.0 {
                        let zv = if v == k { zk.clone() } else { bf(self.z[v]) };
                        let term = bf(y).mul(&zv.sub(&lse, PREC, RM), PREC, RM);
                        acc = acc.sub(&term, PREC, RM);
                    }
                }
                acc
            }
        }
    }
}

/// Central-difference check of an objective's logit gradient with the loss
/// evaluated in extended precision. Coordinates are flattened
/// position-major.
pub fn fd_check_objective_precise(
    objective: Objective,
    labels: &[SoftLabel],
    logits: &[Vec<f64>],
    step: f64,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {step}")));
    }
    let analytic = objective_loss(objective, labels, logits)?.grads;
    let mut p = Precise::new()?;
    let h = bf(step);
    let two_h = bf(2.0 * step);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_coordinate: None,
        checked: 0,
        non_finite: Vec::new(),
    };
    let mut offset = 0;
    for ((label, z), grad) in labels.iter().zip(logits).zip(&analytic) {
        let oracle = PositionOracle::new(&mut p, objective, label, z);
        for k in 0..z.len() {
            let up = oracle.loss(&mut p, k, &h);
            let down = oracle.loss(&mut p, k, &h.neg());
            let numeric = to_f64(&up.sub(&down, PREC, RM).div(&two_h, PREC, RM));
            report.checked += 1;
            if !numeric.is_finite() {
                report.non_finite.push(offset + k);
                continue;
            }
            let err = relative_error(grad[k], numeric);
            if err > report.max_rel_err || report.worst_coordinate.is_none() {
                report.max_rel_err = err;
                report.worst_coordinate = Some(offset + k);
            }
        }
        offset += z.len();
    }
    Ok(report)
}
