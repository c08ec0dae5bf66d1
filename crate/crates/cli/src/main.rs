mod args;
mod report;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use bnndp::certify::{certify, max_certified_radius, CertifyOptions, Query, Verdict};
use bnndp::demo::{sine_model, SineSpec};
use bnndp::error::{BnnError, Result};
use bnndp::model::{gen_model, Activation, BnnModel, CovKind, GenSpec, Task};
use bnndp::oracle::{mc_expectation, soundness_audit, AuditFamily, Readout, AUDIT_MARGIN};

use args::{AuditArgs, CertifyArgs, Cli, Command, CovArg, GenModelArgs, QueryArgs, RadiusArgs, TaskArg};
use report::{hash_without, sha256_hex, QueryEcho, RadiusEcho, Report, Timing, REPORT_SCHEMA};

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_NOT_CERTIFIED: u8 = 2;

fn diag(kind: &str, message: &str) {
    eprintln!("{}", json!({ "level": "error", "kind": kind, "message": message }));
}

fn init_threads() -> std::result::Result<usize, String> {
    match std::env::var("BNNDP_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v.trim().parse().map_err(|_| format!("BNNDP_THREADS must be a nonnegative integer, got {v:?}"))?;
            if n > 0 {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
            }
        }
        _ => {}
    }
    Ok(rayon::current_num_threads())
}

fn parse_center(spec: &str) -> Result<Vec<f64>> {
    let text = match spec.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path)?,
        None => spec.to_string(),
    };
    let t = text.trim();
    if t.starts_with('[') {
        return Ok(serde_json::from_str(t)?);
    }
    t.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| BnnError::Parse(format!("bad coordinate {s:?}"))))
        .collect()
}

fn load(q: &QueryArgs) -> Result<(BnnModel, String)> {
    let bytes = std::fs::read(&q.model)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| BnnError::Parse("model file is not UTF-8".into()))?;
    let mut model = BnnModel::from_json_str(&text)?;
    match q.task {
        TaskArg::Auto => {}
        TaskArg::Regression => model.task = Task::Regression,
        TaskArg::Classification => model.task = Task::Classification,
    }
    Ok((model, sha256_hex(&bytes)))
}

fn options(model: &BnnModel, q: &QueryArgs) -> Result<CertifyOptions> {
    let mut o = CertifyOptions::for_model(model);
    if let Some(e) = q.mass_epsilon {
        o.dp.mass_epsilon = e;
    }
    if let Some(s) = &q.splits {
        o.dp.splits = s.clone();
    }
    if let Some(g) = q.gamma {
        if !(g >= 0.0) {
            return Err(BnnError::Domain(format!("gamma {g} must be nonnegative")));
        }
    }
    o.gamma = q.gamma;
    o.class_override = q.class;
    o.logit_fast_path = !q.no_logit_path;
    o.dp.validate()?;
    Ok(o)
}

fn mc_check(model: &BnnModel, center: &[f64], q: &QueryArgs) -> Result<(Option<bnndp::oracle::McEstimate>, f64)> {
    if q.mc_samples == 0 {
        return Ok((None, 0.0));
    }
    let t = Instant::now();
    let est = mc_expectation(model, center, Readout::for_task(model.task), q.mc_samples, q.seed)?;
    Ok((Some(est), t.elapsed().as_secs_f64() * 1e3))
}

fn write_json(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n"))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn emit(report: Report, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&report.seal())?;
    write_json(out, &text)
}

fn summary(verdict: Verdict, extra: &str) {
    let v = match verdict {
        Verdict::Robust => "robust",
        Verdict::NotCertified => "not-certified",
    };
    if extra.is_empty() {
        eprintln!("verdict: {v}");
    } else {
        eprintln!("verdict: {v} ({extra})");
    }
}

fn cmd_certify(a: &CertifyArgs, threads: usize) -> Result<u8> {
    let start = Instant::now();
    let (model, sha) = load(&a.query)?;
    let center = parse_center(&a.query.center)?;
    let opts = options(&model, &a.query)?;
    let query = Query::new(center.clone(), a.radius)?;
    let t = Instant::now();
    let cert = certify(&model, &query, &opts)?;
    let certify_ms = t.elapsed().as_secs_f64() * 1e3;
    let (mc, mc_ms) = mc_check(&model, &center, &a.query)?;
    let verdict = cert.verdict;
    summary(verdict, &cert.reason);
    let report = Report {
        schema: REPORT_SCHEMA.into(),
        query: QueryEcho {
            command: "certify".into(),
            model_sha256: sha,
            center,
            radius: Some(a.radius),
            task: model.task.name().into(),
            tol: Some(a.tol),
            seed: a.query.seed,
            audit_margin_sigmas: AUDIT_MARGIN,
        },
        certificate: cert,
        radius_search: None,
        mc_check: mc,
        timing: Timing { total_ms: start.elapsed().as_secs_f64() * 1e3, certify_ms, mc_ms, threads },
        determinism_hash: String::new(),
    };
    emit(report, a.query.out.as_deref())?;
    Ok(if verdict == Verdict::Robust { EXIT_OK } else { EXIT_NOT_CERTIFIED })
}

fn cmd_radius(a: &RadiusArgs, threads: usize) -> Result<u8> {
    let start = Instant::now();
    let (model, sha) = load(&a.query)?;
    if model.task == Task::Regression && a.query.gamma.is_none() {
        return Err(BnnError::Domain("radius search on a regression model needs --gamma".into()));
    }
    let center = parse_center(&a.query.center)?;
    let opts = options(&model, &a.query)?;
    let t = Instant::now();
    let res = max_certified_radius(&model, &center, a.tol, &opts)?;
    let mut fixed = opts.clone();
    if res.class.is_some() {
        fixed.class_override = res.class;
    }
    let mut cert = certify(&model, &Query::new(center.clone(), res.radius)?, &fixed)?;
    cert.max_certified_radius = Some(res.radius);
    let certify_ms = t.elapsed().as_secs_f64() * 1e3;
    let (mc, mc_ms) = mc_check(&model, &center, &a.query)?;
    eprintln!("max certified radius: {:e}", res.radius);
    let report = Report {
        schema: REPORT_SCHEMA.into(),
        query: QueryEcho {
            command: "radius".into(),
            model_sha256: sha,
            center,
            radius: None,
            task: model.task.name().into(),
            tol: Some(a.tol),
            seed: a.query.seed,
            audit_margin_sigmas: AUDIT_MARGIN,
        },
        certificate: cert,
        radius_search: Some(RadiusEcho { radius: res.radius, bracket: res.bracket, evaluations: res.evaluations }),
        mc_check: mc,
        timing: Timing { total_ms: start.elapsed().as_secs_f64() * 1e3, certify_ms, mc_ms, threads },
        determinism_hash: String::new(),
    };
    emit(report, a.query.out.as_deref())?;
    Ok(if res.radius > 0.0 { EXIT_OK } else { EXIT_NOT_CERTIFIED })
}

fn cmd_audit(a: &AuditArgs) -> Result<u8> {
    let mut fam = AuditFamily { mc_samples: a.mc_samples, points_per_trial: a.points, ..AuditFamily::default() };
    if let Some(h) = a.hidden_max {
        fam.hidden_max = h.max(fam.hidden_min);
    }
    if let Some(w) = a.width_max {
        fam.width_max = w.max(fam.width_min);
        fam.full_width_max = fam.full_width_max.min(fam.width_max);
    }
    let rep = soundness_audit(&fam, a.trials, a.seed)?;
    let mut v = serde_json::to_value(&rep)?;
    let hash = hash_without(&v, &["timing"]);
    v["determinism_hash"] = json!(hash);
    eprintln!("trials: {}, violations: {}, mean gap: {:e}", rep.trials.len(), rep.violations, rep.mean_gap);
    write_json(a.out.as_deref(), &serde_json::to_string_pretty(&v)?)?;
    Ok(if rep.violations == 0 { EXIT_OK } else { EXIT_NOT_CERTIFIED })
}

fn cmd_gen_model(a: &GenModelArgs) -> Result<u8> {
    let model = if a.demo.is_some() {
        sine_model(&SineSpec::default(), a.seed)?
    } else {
        let widths = a.widths.clone().expect("clap requires widths without --demo");
        let task = match a.task {
            TaskArg::Classification => Task::Classification,
            _ => Task::Regression,
        };
        let mut spec = GenSpec::new(widths, task);
        spec.activation = Activation::parse(&a.activation)
            .ok_or_else(|| BnnError::Parse(format!("unknown activation {:?}", a.activation)))?;
        spec.covariance = match a.covariance {
            CovArg::Diagonal => CovKind::Diagonal,
            CovArg::Full => CovKind::Full,
        };
        spec.scale = a.scale;
        spec.var_scale = a.var_scale;
        gen_model(&spec, a.seed)?
    };
    model.save(&a.out)?;
    eprintln!("wrote {} ({:?})", a.out.display(), model.widths());
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = match init_threads() {
        Ok(n) => n,
        Err(m) => {
            diag("config", &m);
            return ExitCode::from(EXIT_ERROR);
        }
    };
    let res = match &cli.command {
        Command::Certify(a) => cmd_certify(a, threads),
        Command::Radius(a) => cmd_radius(a, threads),
        Command::Audit(a) => cmd_audit(a),
        Command::GenModel(a) => cmd_gen_model(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            diag(e.kind(), &e.to_string());
            ExitCode::from(EXIT_ERROR)
        }
    }
}
