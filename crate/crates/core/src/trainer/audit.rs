//! Central-difference check of the analytic training gradient.

use rayon::prelude::*;
use serde::Serialize;

use super::{batch_objective, BatchNoise, Example, TrainConfig};
use crate::error::{Error, Result};
use crate::flowcore::{flatten_params, unflatten_params, Parameterized};
use crate::model::Model;

/// Finite-difference step.
pub const AUDIT_STEP: f64 = 1e-4;
/// Parameters at or below this magnitude are not checked.
pub const AUDIT_MIN_MAGNITUDE: f64 = 1e-6;
/// Floor on the relative-error denominator.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Results for one top-level parameter group (`encoder`, `bond`, `atom`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSection {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub tolerance: f64,
    pub total_params: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<AuditEntry>,
    pub sections: Vec<AuditSection>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.sections.iter().all(|s| s.failures.is_empty())
    }

    pub fn section(&self, name: &str) -> Option<&AuditSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AuditEntry> {
        self.sections.iter().flat_map(|s| s.failures.iter())
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// `(section, path)` for every flat parameter index.
fn param_paths(model: &Model) -> Vec<(String, String)> {
    let mut out = Vec::with_capacity(model.num_params());
    model.visit_params("", &mut |name, v| {
        let section = name.split('.').next().unwrap_or(name).to_string();
        for i in 0..v.len() {
            out.push((section.clone(), format!("{name}[{i}]")));
        }
    });
    out
}

/// Checks `analytic` (flat, in the model's parameter order) against central
/// differences of the batch total loss. A frozen encoder is skipped, which
/// leaves its section empty.
pub fn compare_gradients(
    model: &Model,
    batch: &[Example],
    noise: &BatchNoise,
    cfg: &TrainConfig,
    analytic: &[f64],
    tolerance: f64,
) -> Result<AuditReport> {
    let base = flatten_params(model);
    if analytic.len() != base.len() {
        return Err(Error::Shape(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            base.len()
        )));
    }
    let paths = param_paths(model);
    let targets: Vec<usize> = (0..base.len())
        .filter(|&i| base[i].abs() > AUDIT_MIN_MAGNITUDE)
        .filter(|&i| !(cfg.freeze_encoder && paths[i].0 == "encoder"))
        .collect();

    let numeric = targets
        .par_iter()
        .map_init(
            || (model.clone(), base.clone()),
            |(m, theta), &i| {
                let mut eval = |v: f64| -> Result<f64> {
                    theta[i] = v;
                    unflatten_params(m, theta);
                    Ok(batch_objective(m, batch, noise, cfg, false)?.0.total)
                };
                let up = eval(base[i] + AUDIT_STEP)?;
                let down = eval(base[i] - AUDIT_STEP)?;
                theta[i] = base[i];
                unflatten_params(m, theta);
                Ok((up - down) / (2.0 * AUDIT_STEP))
            },
        )
        .collect::<Result<Vec<f64>>>()?;

    let mut sections: Vec<AuditSection> = Vec::new();
    model.visit_params("", &mut |name, _| {
        let s = name.split('.').next().unwrap_or(name);
        if !sections.iter().any(|x| x.name == s) {
            sections.push(AuditSection {
                name: s.to_string(),
                checked: 0,
                max_rel_err: 0.0,
                failures: Vec::new(),
            });
        }
    });
    let mut worst: Option<AuditEntry> = None;
    for (&i, &n) in targets.iter().zip(&numeric) {
        let entry = AuditEntry {
            path: paths[i].1.clone(),
            analytic: analytic[i],
            numeric: n,
            rel_err: rel_err(analytic[i], n),
        };
        let sec = sections
            .iter_mut()
            .find(|s| s.name == paths[i].0)
            .expect("known section");
        sec.checked += 1;
        sec.max_rel_err = sec.max_rel_err.max(entry.rel_err);
        if worst.as_ref().is_none_or(|w| entry.rel_err > w.rel_err) {
            worst = Some(entry.clone());
        }
        if !(entry.rel_err <= tolerance) {
            sec.failures.push(entry);
        }
    }
    Ok(AuditReport {
        tolerance,
        total_params: base.len(),
        checked: targets.len(),
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
        worst,
        sections,
    })
}

/// Audits the trainer's own analytic gradient on one batch with fixed noise.
pub fn audit_gradients(
    model: &Model,
    batch: &[Example],
    noise: &BatchNoise,
    cfg: &TrainConfig,
    tolerance: f64,
) -> Result<AuditReport> {
    let (_, grads) = batch_objective(model, batch, noise, cfg, true)?;
    let analytic = grads.expect("gradient requested").flatten(model);
    compare_gradients(model, batch, noise, cfg, &analytic, tolerance)
}
