//! Verification bundles: each check yields verdicts, and the command
//! succeeds only if all of them pass.

use mfspde::control::{check_sufficiency, hamiltonian_system_residual};

use crate::config::{Check, ExperimentConfig, VerifyConfig};
use crate::error::CliError;
use crate::experiments::{dependence, gradcheck, solve_lq};
use crate::report::{Report, Verdict};

pub fn verify(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let v: &VerifyConfig = cfg
        .verify
        .as_ref()
        .ok_or_else(|| CliError::Validation("verify needs a [verify] section listing checks".into()))?;
    if v.checks.is_empty() {
        return Err(CliError::Validation("verify.checks is empty".into()));
    }
    let mut report = Report::default();
    let mut solved = None;
    for check in &v.checks {
        match check {
            Check::Gradient => {
                let errors = gradcheck(cfg, &mut report, v.directions)?;
                for (j, e) in errors.into_iter().enumerate() {
                    report.verdicts.push(Verdict::at_most(format!("gradient-direction-{j}"), e, v.gradient_tol));
                }
            }
            Check::Sufficiency | Check::SystemResidual => {
                if solved.is_none() {
                    solved = Some(solve_lq(cfg, &mut report)?);
                }
                let out = solved.as_ref().expect("solved above");
                let ctl = out.problem.control_problem();
                if *check == Check::Sufficiency {
                    let rep = check_sufficiency(ctl, &out.control, &out.ensemble, &out.adjoint, v.probes, cfg.seed)?;
                    report.verdicts.push(Verdict {
                        check: "sufficiency-convexity".into(),
                        value: rep.worst_convexity_gap.max(0.0),
                        threshold: 0.0,
                        passed: rep.hamiltonian_convex && rep.terminal_convex,
                    });
                    report.verdicts.push(Verdict {
                        check: "sufficiency-minimum".into(),
                        value: rep.worst_minimum_gap.max(0.0),
                        threshold: 0.0,
                        passed: rep.pointwise_minimum,
                    });
                } else {
                    let res = hamiltonian_system_residual(ctl, &out.control, &out.ensemble, &out.adjoint)?;
                    report.verdicts.push(Verdict::at_most("system-forward", res.forward, v.residual_tol));
                    report.verdicts.push(Verdict::at_most("system-backward", res.backward, v.residual_tol));
                    report.verdicts.push(Verdict::at_most("system-minimum-condition", res.minimum_condition, v.residual_tol));
                }
            }
            Check::Dependence => {
                let study = dependence(cfg, &mut report)?;
                report.verdicts.push(Verdict::at_most("dependence-slope", (study.fit.slope - v.slope).abs(), v.slope_tol));
            }
        }
    }
    let verdicts = report.verdicts.clone();
    report.csv("verify", true, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["check", "value", "threshold", "passed"])?;
        for v in &verdicts {
            out.write_record([v.check.clone(), format!("{}", v.value), format!("{}", v.threshold), v.passed.to_string()])?;
        }
        out.flush()?;
        Ok(())
    })?;
    let summary = report.summary.clone();
    report.csv("summary", cfg.output.wants("summary"), |w| mfspde::export::write_summary(w, &summary))?;
    Ok(report)
}
