//! One runner per subcommand. Each returns the report files to write, the
//! resolved config echo for the manifest, and whether every verdict in the
//! run came up green.
//!
//! Failure split: anything wrong with the *input* (parse, validation,
//! construction) is an [`InputError`] and the run never starts; a failure
//! *inside* a started run — a stalled reference solve, a probe leaving the
//! domain — still writes the manifest plus an error report and maps to
//! exit 1, same as a refuted verdict.

use fde_core::{
    cross_check, run_dependence, run_fourier_application, solve_with, CheckerRegistry,
    DependenceReport, FnSeq, FourierError, SolveStatus,
};
use serde_json::{json, Value};

use crate::input::{
    parse_doc, resolve_family, resolve_fourier, resolve_problem, resolve_seq, FamilyDoc,
    FourierDoc, InputError, Overrides, ProblemDoc, SeqDoc,
};

pub struct RunOutput {
    pub pass: bool,
    /// `(file name, content)`, manifest excluded.
    pub files: Vec<(&'static str, String)>,
    /// Fully-resolved configuration, echoed into the manifest.
    pub config: Value,
    /// One-line outcome for stdout.
    pub summary: String,
}

pub enum RunError {
    /// Bad input; nothing ran, nothing is written.
    Input(InputError),
    /// The run itself failed. The manifest and an error report are still
    /// written so the output directory explains what happened.
    Run { config: Value, files: Vec<(&'static str, String)>, message: String },
}

impl From<InputError> for RunError {
    fn from(e: InputError) -> Self {
        RunError::Input(e)
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialization cannot fail");
    s.push('\n');
    s
}

fn failed(config: &Value, report_name: &'static str, message: String) -> RunError {
    let err = pretty(&json!({ "error": message }));
    RunError::Run { config: config.clone(), files: vec![(report_name, err)], message }
}

pub fn run_solve(file: &str, text: &str, ovr: &Overrides) -> Result<RunOutput, RunError> {
    let doc: ProblemDoc = parse_doc(file, text)?;
    let rp = resolve_problem(file, &doc, ovr)?;
    let p = rp.spec(file)?;

    let res = solve_with(&p, &rp.solver, None);
    let pass = res.status == SolveStatus::Completed;

    let report = json!({
        "sigma": p.sigma(),
        "r": p.r(),
        "horizon": p.horizon(),
        "h": p.h(),
        "dim": p.dim(),
        "tol": rp.solver.tol,
        "tube_radius": rp.solver.tube_radius,
        "achieved": res.achieved,
        "residual": res.residual,
        "status": res.status,
        "windows": res.steps.len(),
        "steps": res.steps,
    });
    let summary = match &res.status {
        SolveStatus::Completed => format!(
            "solve: completed to t = {} in {} window(s), residual {:.3e}",
            p.sigma() + res.achieved,
            res.steps.len(),
            res.residual
        ),
        SolveStatus::Stalled(reason) => {
            format!("solve: stalled at forward extent {} ({reason})", res.achieved)
        }
    };
    Ok(RunOutput {
        pass,
        files: vec![
            ("solution.csv", res.x.as_fn().to_csv_string()),
            ("solve.json", pretty(&report)),
        ],
        config: rp.config,
        summary,
    })
}

fn family_pass(r: &DependenceReport) -> bool {
    r.existence_ok
        && r.convergence_ok
        && r.rhs_cc_ok != Some(false)
        && r.solution_cc_ok != Some(false)
        && r.phi_uniform_ok
        && r.bound.as_ref().is_none_or(|b| b.ok)
        && r.uniqueness.as_ref().is_none_or(|u| u.ok)
}

pub fn run_family(file: &str, text: &str, ovr: &Overrides) -> Result<RunOutput, RunError> {
    let doc: FamilyDoc = parse_doc(file, text)?;
    let rf = resolve_family(file, &doc, ovr)?;

    let report = run_dependence(&rf.spec, rf.a_prime, &rf.cfg)
        .map_err(|e| failed(&rf.config, "family.json", format!("dependence run failed: {e}")))?;
    let pass = family_pass(&report);

    let value = serde_json::to_value(&report)
        .map_err(|e| failed(&rf.config, "family.json", format!("report serialization: {e}")))?;
    let stalled = report
        .members
        .iter()
        .filter(|m| !matches!(m.status, SolveStatus::Completed))
        .count();
    let summary = format!(
        "family: {} members ({} stalled), existence {}, convergence {}, gen-cc {}, bound {}",
        report.members.len(),
        stalled,
        verdict(report.existence_ok),
        verdict(report.convergence_ok),
        report.solution_cc_ok.map_or("untested", verdict),
        report.bound.as_ref().map_or("untested", |b| verdict(b.ok)),
    );
    Ok(RunOutput {
        pass,
        files: vec![("family.csv", report.to_csv()), ("family.json", pretty(&value))],
        config: rf.config,
        summary,
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

pub fn run_fourier(file: &str, text: &str, ovr: &Overrides) -> Result<RunOutput, RunError> {
    let doc: FourierDoc = parse_doc(file, text)?;
    let rf = resolve_fourier(file, &doc, ovr)?;

    let report = run_fourier_application(rf.f.clone(), rf.c0, rf.horizon, &rf.orders, &rf.cfg)
        .map_err(|e| match e {
            // Bad field values are input errors even when the core only
            // notices them at run time.
            FourierError::Invalid(msg) => RunError::Input(InputError::new(file, msg)),
            other => failed(&rf.config, "fourier.json", format!("fourier run failed: {other}")),
        })?;

    let rows_ok = report.rows.iter().all(|r| matches!(r.status, SolveStatus::Completed));
    let pass = rows_ok && report.gronwall_all_ok && report.bessel_ok && report.cc_ok;

    let value = serde_json::to_value(&report)
        .map_err(|e| failed(&rf.config, "fourier.json", format!("report serialization: {e}")))?;
    let summary = format!(
        "fourier: {} order(s), solves {}, gronwall {}, bessel {}, cc {}{}",
        report.rows.len(),
        verdict(rows_ok),
        verdict(report.gronwall_all_ok),
        verdict(report.bessel_ok),
        verdict(report.cc_ok),
        if report.warnings.is_empty() {
            String::new()
        } else {
            format!("; warnings: {}", report.warnings.join(" / "))
        },
    );
    Ok(RunOutput {
        pass,
        files: vec![("fourier.csv", report.to_csv()), ("fourier.json", pretty(&value))],
        config: rf.config,
        summary,
    })
}

pub fn run_check_seq(file: &str, text: &str, ovr: &Overrides) -> Result<RunOutput, RunError> {
    let doc: SeqDoc = parse_doc(file, text)?;
    let rs = resolve_seq(file, &doc, ovr)?;

    let seq = FnSeq::new(&rs.family, rs.k_max);
    let verdicts = CheckerRegistry::standard()
        .run_all(&seq, &rs.space, &rs.cfg)
        .map_err(|e| failed(&rs.config, "seq.json", format!("check failed: {e}")))?;
    let matrix = cross_check(&seq, &rs.space, &rs.cfg)
        .map_err(|e| failed(&rs.config, "seq.json", format!("cross-check failed: {e}")))?;

    // serde_json maps are sorted, which keeps reruns byte-identical.
    let mut checks = serde_json::Map::new();
    for (name, v) in &verdicts {
        checks.insert(name.to_string(), v.to_json(&rs.space));
    }
    let refuted: Vec<&str> =
        verdicts.iter().filter(|(_, v)| v.refuted()).map(|(n, _)| *n).collect();
    let pass = refuted.is_empty() && matrix.inconsistencies.is_empty();

    let report = json!({
        "k_max": rs.k_max,
        "checks": Value::Object(checks),
        "matrix": matrix,
    });
    let summary = if !matrix.inconsistencies.is_empty() {
        format!("check-seq: INCONSISTENT verdicts: {}", matrix.inconsistencies.join(" / "))
    } else if refuted.is_empty() {
        format!("check-seq: all {} notions consistent up to k = {}", verdicts.len(), rs.k_max)
    } else {
        format!("check-seq: refuted: {} (witnesses in seq.json)", refuted.join(", "))
    };
    Ok(RunOutput {
        pass,
        files: vec![("seq.json", pretty(&report))],
        config: rs.config,
        summary,
    })
}
