//! Verification harness: finite-difference gradient checks, brute-force
//! match oracles, loss-term loop oracles and collapse monitoring.

mod checks;
pub mod instances;
pub mod oracles;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{ArrayD, ArrayView2, Axis, Dimension};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::fault;

use checks::*;
pub use checks::{tiny_model_config, FD_TOLERANCE};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Minimum and mean over dimensions of the unbiased per-dimension standard
/// deviation of an `N x D` batch.
pub fn collapse_monitor(z: ArrayView2<f64>) -> Result<(f64, f64)> {
    if z.nrows() < 2 || z.ncols() == 0 {
        return Err(Error::invalid(format!(
            "collapse monitor needs at least 2 rows and 1 column, got {:?}",
            z.dim()
        )));
    }
    let std = z.var_axis(Axis(0), 1.0).mapv(f64::sqrt);
    let min = std.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min, std.mean().unwrap_or(0.0)))
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Location of the largest error, e.g. `maps0[1, 2, 0, 3]`.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `grads` against central differences of `f` at `point`,
/// coordinate by coordinate.
pub fn finite_diff_check<F>(
    mut f: F,
    point: &[(String, ArrayD<f64>)],
    grads: &[ArrayD<f64>],
    step: f64,
) -> Result<FdReport>
where
    F: FnMut(&[(String, ArrayD<f64>)]) -> Result<f64>,
{
    if grads.len() != point.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} arrays",
            grads.len(),
            point.len()
        )));
    }
    for ((name, x), g) in point.iter().zip(grads) {
        if x.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient of {name} has shape {:?}, expected {:?}",
                g.shape(),
                x.shape()
            )));
        }
    }
    let mut work = point.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for a in 0..work.len() {
        let indices: Vec<_> = work[a].1.indexed_iter().map(|(i, _)| i).collect();
        for idx in indices {
            let x0 = work[a].1[&idx];
            let mut eval = |x: f64, work: &mut Vec<(String, ArrayD<f64>)>| -> Result<f64> {
                work[a].1[&idx] = x;
                let v = f(work)?;
                if !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite value {v} with {}{:?} = {x}",
                        work[a].0,
                        idx.slice()
                    )));
                }
                Ok(v)
            };
            let hi = eval(x0 + step, &mut work)?;
            let lo = eval(x0 - step, &mut work)?;
            work[a].1[&idx] = x0;
            let numeric = (hi - lo) / (2.0 * step);
            let analytic = grads[a][&idx];
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{}{:?}", work[a].0, idx.slice());
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Geometry,
    Match,
    Loss,
    Grad,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Geometry, Group::Match, Group::Loss, Group::Grad];

    pub fn name(self) -> &'static str {
        match self {
            Group::Geometry => "geometry",
            Group::Match => "match",
            Group::Loss => "loss",
            Group::Grad => "grad",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown check group {s:?} (expected geometry, match, loss or grad)"
            ))
        })
    }
}

/// Defects that can be switched on to confirm the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the covariance part of the VICReg gradient.
    CovGradSign,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cov-grad-sign" => Ok(Fault::CovGradSign),
            _ => Err(Error::invalid(format!("unknown fault {s:?} (expected cov-grad-sign)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Groups to run; empty runs all of them.
    pub groups: Vec<Group>,
    pub fault: Option<Fault>,
    /// Random instances per gradient check.
    pub grad_instances: usize,
    /// Random instances per matching oracle.
    pub match_instances: usize,
    /// Random instances for the multi-crop reduction and loop oracles.
    pub loss_instances: usize,
    /// Random crops per geometry property.
    pub geometry_instances: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            groups: Vec::new(),
            fault: None,
            grad_instances: 20,
            match_instances: 1000,
            loss_instances: 100,
            geometry_instances: 1000,
        }
    }
}

impl SuiteConfig {
    fn runs(&self, g: Group) -> bool {
        self.groups.is_empty() || self.groups.contains(&g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub group: Group,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{status} {:<8} {:<32} {:>7.2}s  {}",
                c.group, c.name, c.seconds, c.detail
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// Resets the injected fault when dropped.
struct FaultGuard;

impl Drop for FaultGuard {
    fn drop(&mut self) {
        fault::set_cov_grad_sign_flip(false);
    }
}

type CheckFn = fn(&SuiteConfig) -> (bool, String);

fn registry() -> Vec<(&'static str, Group, CheckFn)> {
    vec![
        ("grid_containment", Group::Geometry, check_grid_containment),
        ("grid_translation", Group::Geometry, check_grid_translation),
        ("grid_flip_reversal", Group::Geometry, check_grid_flip),
        ("grid_full_image_centers", Group::Geometry, check_grid_full_image),
        ("location_match_oracle", Group::Match, check_location_match),
        ("feature_match_oracle", Group::Match, check_feature_match),
        ("top_gamma_oracle", Group::Match, check_top_gamma),
        ("identity_match", Group::Match, check_identity_match),
        ("closed_form_terms", Group::Loss, check_closed_forms),
        ("vicreg_loop_oracle", Group::Loss, check_vicreg_loop_oracle),
        ("alpha_one_is_global", Group::Loss, check_alpha_one),
        ("multicrop_two_view_reduction", Group::Loss, check_multicrop_reduction),
        ("collapse_monitor", Group::Loss, check_collapse_monitor),
        ("fd_quadratic", Group::Grad, check_fd_quadratic),
        ("fd_vicreg", Group::Grad, check_fd_vicreg),
        ("fd_two_view", Group::Grad, check_fd_two_view),
        ("fd_multicrop", Group::Grad, check_fd_multicrop),
        ("fd_model", Group::Grad, check_fd_model),
    ]
}

/// Runs every selected check on the calling thread.
pub fn run_suite(cfg: &SuiteConfig) -> Report {
    let _guard = FaultGuard;
    match cfg.fault {
        Some(Fault::CovGradSign) => fault::set_cov_grad_sign_flip(true),
        None => fault::set_cov_grad_sign_flip(false),
    }
    let mut report = Report::default();
    for (name, group, f) in registry() {
        if !cfg.runs(group) {
            continue;
        }
        let t = Instant::now();
        let (passed, detail) = f(cfg);
        report.checks.push(Check {
            name: name.to_string(),
            group,
            passed,
            detail,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    report
}
