//! Executes one experiment and writes its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value as Json};

use rwre_core::ballisticity::{
    condition_p_probe, fluctuation_scan, freedman_bound, martingale_tail_test,
    mean_drift_green_check, rho_statistics, ConditionPVerdict, FreedmanParams,
};
use rwre_core::env_model::{
    check_k_conditions, law_moments, CheckStatus, EnvironmentLaw, KReport, LawDescriptor,
    LazyEnvironment,
};
use rwre_core::exact_solver::{QuenchedSystem, SolverOptions};
use rwre_core::kalikow::{
    estimate_eps_k, kalikow_environment, kalikow_environment_formula, theorem2_experiment,
    theorem3_experiment, Computation, EvidenceVerdict, KalikowEnv, KalikowOptions, Theorem3Verdict,
};
use rwre_core::lattice::{build_region, HalfSpaceSign};
use rwre_core::monte_carlo::{environment_seed, estimate_velocity, samples_to_csv};
use rwre_core::rng::{derive_seed, Stream};

use crate::config::*;
use crate::report::{config_hash, provenance_header, ReportFile, Status, SummaryRow};
use crate::{fmt_num, CliError};

/// A data file produced by an experiment, before provenance is added.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File name suffix including extension, e.g. `cells.csv`.
    pub name: String,
    pub content: String,
}

impl Table {
    fn csv(name: &str, content: String) -> Self {
        Table {
            name: format!("{name}.csv"),
            content,
        }
    }

    fn dat(name: &str, content: String) -> Self {
        Table {
            name: format!("{name}.dat"),
            content,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: Vec<SummaryRow>,
    pub result: Json,
    pub tables: Vec<Table>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report_path: PathBuf,
    pub report: ReportFile,
    pub files: Vec<PathBuf>,
}

/// Reads the config at `config_path`, runs `kind` and writes the report.
/// `seed` and `out` override the config values.
pub fn run(
    kind: ExperimentKind,
    config_path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunOutput, CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| CliError::io(config_path, e))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let seed = seed.unwrap_or(cfg.seed);
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let outcome = execute(kind, &cfg, seed)?;
    write_outputs(kind, &text, seed, &out_dir, outcome)
}

fn write_outputs(
    kind: ExperimentKind,
    text: &str,
    seed: u64,
    out_dir: &Path,
    outcome: Outcome,
) -> Result<RunOutput, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let hash = config_hash(text);
    let header = provenance_header(kind, &hash, seed);
    let mut files = Vec::new();
    let mut names = Vec::new();
    for t in &outcome.tables {
        let name = format!("{}-{}", kind.name(), t.name);
        let path = out_dir.join(&name);
        fs::write(&path, format!("{header}{}", t.content)).map_err(|e| CliError::io(&path, e))?;
        files.push(path);
        names.push(name);
    }
    let report = ReportFile {
        kind,
        config_sha256: hash,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        summary: outcome.summary,
        files: names,
        result: outcome.result,
    };
    let report_path = out_dir.join(format!("{}.json", kind.name()));
    let mut body = serde_json::to_string_pretty(&report).expect("report serializes");
    body.push('\n');
    fs::write(&report_path, body).map_err(|e| CliError::io(&report_path, e))?;
    Ok(RunOutput {
        report_path,
        report,
        files,
    })
}

/// Runs the experiment without touching the filesystem.
pub fn execute(
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Outcome, CliError> {
    cfg.validate(kind)?;
    match kind {
        ExperimentKind::Moments => moments(cfg),
        ExperimentKind::Green => green(cfg, seed),
        ExperimentKind::KalikowDrift => kalikow_drift(cfg, seed),
        ExperimentKind::EpsK => eps_k(cfg, seed),
        ExperimentKind::Theorem2 => theorem2(cfg, seed),
        ExperimentKind::Theorem3 => theorem3(cfg, seed),
        ExperimentKind::ConditionP => condition_p(cfg, seed),
        ExperimentKind::Prop31 => prop31(cfg, seed),
        ExperimentKind::Fluctuations => fluctuations(cfg, seed),
        ExperimentKind::Rho => rho(cfg, seed),
        ExperimentKind::Velocity => velocity(cfg, seed),
        ExperimentKind::Freedman => freedman(cfg, seed),
    }
}

fn to_json<T: Serialize>(v: &T) -> Json {
    serde_json::to_value(v).expect("result serializes")
}

fn descriptor(cfg: &ExperimentConfig) -> &LawDescriptor {
    cfg.law.as_ref().expect("validated")
}

fn law(cfg: &ExperimentConfig) -> Result<EnvironmentLaw, CliError> {
    Ok(descriptor(cfg).build()?)
}

fn evidence_word(v: EvidenceVerdict) -> &'static str {
    match v {
        EvidenceVerdict::PositiveEvidence => "positive",
        EvidenceVerdict::Inconclusive => "inconclusive",
        EvidenceVerdict::NegativeEvidence => "negative",
    }
}

fn evidence_status(v: EvidenceVerdict) -> Status {
    match v {
        EvidenceVerdict::PositiveEvidence => Status::Pass,
        EvidenceVerdict::Inconclusive => Status::Inconclusive,
        EvidenceVerdict::NegativeEvidence => Status::Fail,
    }
}

fn k_rows(k: &KReport) -> Vec<SummaryRow> {
    k.checks
        .iter()
        .map(|c| {
            let status = match c.status {
                CheckStatus::Pass => Status::Pass,
                CheckStatus::Fail => Status::Fail,
                CheckStatus::Undetermined => Status::Inconclusive,
            };
            SummaryRow::new(
                format!(
                    "{} (rho={}, eps0={})",
                    c.id,
                    fmt_num(k.rho),
                    fmt_num(k.eps0)
                ),
                status,
                c.detail.clone(),
            )
        })
        .collect()
}

fn moments(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p: MomentsParams = cfg.params()?;
    let law = law(cfg)?;
    let m = law_moments(&law)?;
    let mut summary = vec![
        SummaryRow::info(
            "moments",
            format!(
                "eps={}, sigma2={}, lambda={}, kappa={}",
                fmt_num(m.eps),
                fmt_num(m.sigma2),
                fmt_num(m.lambda),
                fmt_num(m.kappa)
            ),
        ),
        SummaryRow::new(
            "perturbative range",
            Status::from_bool(m.within_perturbative_range),
            format!("eps={} in (0, 1)", fmt_num(m.eps)),
        ),
    ];
    let conditions = match p.rho {
        Some(rho) => {
            let k = check_k_conditions(&law, rho, p.eps0)?;
            summary.extend(k_rows(&k));
            Some(k)
        }
        None => None,
    };
    let mut csv = String::from("direction,mean,variance\n");
    for (k, (mu, var)) in m.mean.iter().zip(&m.var).enumerate() {
        csv.push_str(&format!("{k},{mu:.17e},{var:.17e}\n"));
    }
    Ok(Outcome {
        summary,
        result: json!({ "moments": m, "conditions": conditions }),
        tables: vec![Table::csv("directions", csv)],
    })
}

fn green(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: GreenParams = cfg.params()?;
    let law = law(cfg)?;
    let d = law.dim();
    let region = build_region(cfg.region.as_ref().expect("validated"), d)?;
    let x = p.x.unwrap_or_else(|| vec![0; d]);
    let env_seed = environment_seed(seed, 0);
    let env = LazyEnvironment::from_law(&law, env_seed)?;
    let sys = QuenchedSystem::new(&region, &env)?;
    let mut opts = SolverOptions::with_tol(p.tol).method(p.method);
    if p.certify {
        opts = opts.certified();
    }
    let g = sys.green_row(&x, &opts)?;
    let exit = sys.exit_distribution(&x, &opts)?;
    let g_xx = g.get(&x).unwrap_or(0.0);
    let bound = g.error_bound.map_or_else(
        || "not certified".to_string(),
        |b| format!("error bound {}", fmt_num(b)),
    );
    let summary = vec![
        SummaryRow::info(
            "expected exit time",
            format!(
                "E_x[T] = sum_y g(x,y) = {} ({} sites)",
                fmt_num(g.total()),
                region.len()
            ),
        ),
        SummaryRow::info("g(x,x)", fmt_num(g_xx)),
        SummaryRow::info(
            "exit law",
            format!(
                "frontal {}, other {}, total {}",
                fmt_num(exit.frontal),
                fmt_num(exit.other),
                fmt_num(exit.total())
            ),
        ),
        SummaryRow::new(
            "solver residual",
            Status::from_bool(g.residual <= 10.0 * p.tol),
            format!("{} vs tol {}; {bound}", fmt_num(g.residual), fmt_num(p.tol)),
        ),
    ];
    Ok(Outcome {
        summary,
        result: json!({
            "x": x,
            "environment_seed": env_seed,
            "sites": region.len(),
            "expected_exit_time": g.total(),
            "g_xx": g_xx,
            "residual": g.residual,
            "error_bound": g.error_bound,
            "exit_frontal": exit.frontal,
            "exit_other": exit.other,
            "exit_residual": exit.residual,
        }),
        tables: vec![
            Table::csv("green", g.to_csv()),
            Table::csv("exit", exit.to_csv()),
        ],
    })
}

fn kalikow_options(n_env: u64, seed: u64, max_enumeration: u64) -> KalikowOptions {
    KalikowOptions {
        n_env,
        seed,
        max_enumeration,
        ..Default::default()
    }
}

fn drift_row(env: &KalikowEnv, y: &[i64], z: f64) -> Result<SummaryRow, CliError> {
    let de = env.drift(y)?;
    let comps: Vec<String> = de
        .components
        .iter()
        .zip(&de.std_errors)
        .map(|(v, s)| {
            if *s > 0.0 {
                format!("{} ± {}", fmt_num(*v), fmt_num(z * s))
            } else {
                fmt_num(*v)
            }
        })
        .collect();
    let how = match env.computation {
        Computation::Exact => "exact".to_string(),
        Computation::MonteCarlo => format!("MC, {} environments, {z} SE", env.n_samples),
    };
    Ok(SummaryRow::info(
        format!("drift at {y:?} ({:?} route)", env.route).to_lowercase(),
        format!("({}) [{how}]", comps.join(", ")),
    ))
}

fn kalikow_drift(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: KalikowDriftParams = cfg.params()?;
    let law = law(cfg)?;
    let d = law.dim();
    let region = build_region(cfg.region.as_ref().expect("validated"), d)?;
    let x = p.x.unwrap_or_else(|| vec![0; d]);
    let y = p.y.unwrap_or_else(|| x.clone());
    let opts = KalikowOptions {
        control_variate: p.control_variate,
        force_monte_carlo: p.force_monte_carlo,
        ..kalikow_options(p.n_env, seed, p.max_enumeration)
    };
    let mut envs = Vec::new();
    if p.route != RouteChoice::Formula {
        envs.push(kalikow_environment(&law, &region, &x, &opts)?);
    }
    if p.route != RouteChoice::Definition {
        envs.push(kalikow_environment_formula(&law, &region, &x, &opts)?);
    }
    let mut summary = Vec::new();
    let mut tables = Vec::new();
    let mut drifts = Vec::new();
    for env in &envs {
        summary.push(drift_row(env, &y, opts.z)?);
        if let Some(n) = &env.notice {
            summary.push(SummaryRow::info("notice", n.clone()));
        }
        summary.push(SummaryRow::info(
            format!("row defect ({:?} route)", env.route).to_lowercase(),
            fmt_num(env.max_row_defect()),
        ));
        let name = format!("{:?}", env.route).to_lowercase();
        tables.push(Table::csv(&name, env.to_csv()));
        drifts.push(json!({
            "route": env.route,
            "computation": env.computation,
            "n_samples": env.n_samples,
            "notice": env.notice,
            "drift": env.drift(&y)?,
            "max_row_defect": env.max_row_defect(),
        }));
    }
    let mut agreement = Json::Null;
    if let [a, b] = envs.as_slice() {
        let (agree, total, max_diff) = route_agreement(a, b, opts.z);
        let frac = agree as f64 / total.max(1) as f64;
        summary.push(SummaryRow::new(
            "route agreement",
            Status::from_bool(frac >= 0.95),
            format!(
                "{agree}/{total} cells agree within {} combined SE (max |diff| {})",
                opts.z,
                fmt_num(max_diff)
            ),
        ));
        agreement =
            json!({ "agree": agree, "total": total, "fraction": frac, "max_abs_diff": max_diff });
    }
    Ok(Outcome {
        summary,
        result: json!({ "x": x, "y": y, "routes": drifts, "agreement": agreement }),
        tables,
    })
}

/// Cells whose ratios agree within `z` combined standard errors (or 1e-9
/// when both are exact).
pub fn route_agreement(a: &KalikowEnv, b: &KalikowEnv, z: f64) -> (usize, usize, f64) {
    let mut agree = 0;
    let mut max_diff: f64 = 0.0;
    for (ca, cb) in a.cells.iter().zip(&b.cells) {
        let diff = (ca.ratio - cb.ratio).abs();
        max_diff = max_diff.max(diff);
        let tol = (z * ca.std_error.hypot(cb.std_error)).max(1e-9);
        if diff <= tol {
            agree += 1;
        }
    }
    (agree, a.cells.len(), max_diff)
}

fn eps_k(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: EpsKParams = cfg.params()?;
    let law = law(cfg)?;
    let opts = KalikowOptions {
        z: p.z,
        ..kalikow_options(p.n_env, seed, p.max_enumeration)
    };
    let r = estimate_eps_k(&law, &p.family, &opts)?;
    let summary = vec![
        SummaryRow::new(
            "eps_K probe",
            evidence_status(r.verdict),
            format!(
                "min drift.e1 = {} (lower {} SE bound {}) over {} sets → Kalikow evidence: {}",
                fmt_num(r.global_min_drift),
                p.z,
                fmt_num(r.global_min_lower),
                r.sets.len(),
                evidence_word(r.verdict)
            ),
        ),
        SummaryRow::info("caveat", r.disclaimer.clone()),
    ];
    Ok(Outcome {
        summary,
        result: to_json(&r),
        tables: vec![Table::csv("sets", r.to_csv())],
    })
}

fn theorem2(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: EpsKParams = cfg.params()?;
    let law = law(cfg)?;
    let opts = KalikowOptions {
        z: p.z,
        ..kalikow_options(p.n_env, seed, p.max_enumeration)
    };
    let r = theorem2_experiment(&law, &p.family, &opts)?;
    let verdict = r.eps_k.verdict;
    let status = match (r.in_regime, verdict) {
        (_, EvidenceVerdict::NegativeEvidence) => Status::Fail,
        (true, EvidenceVerdict::PositiveEvidence) => Status::Pass,
        _ => Status::Inconclusive,
    };
    let summary = vec![
        SummaryRow::new(
            "Kalikow threshold",
            status,
            threshold_detail(r.lambda, r.threshold, verdict),
        ),
        SummaryRow::info(
            "eps_K probe",
            format!(
                "min drift.e1 = {} (lower bound {}) over {} sets",
                fmt_num(r.eps_k.global_min_drift),
                fmt_num(r.eps_k.global_min_lower),
                r.eps_k.sets.len()
            ),
        ),
        SummaryRow::info("caveat", r.eps_k.disclaimer.clone()),
    ];
    Ok(Outcome {
        summary,
        result: to_json(&r),
        tables: vec![Table::csv("sets", r.eps_k.to_csv())],
    })
}

fn threshold_detail(lambda: f64, threshold: f64, verdict: EvidenceVerdict) -> String {
    format!(
        "λ={} {} 4dσ²(1+9ε)={} → Kalikow evidence: {}",
        fmt_num(lambda),
        if lambda > threshold { ">" } else { "≤" },
        fmt_num(threshold),
        evidence_word(verdict)
    )
}

fn theorem3(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: Theorem3Params = cfg.params()?;
    let law = law(cfg)?;
    let opts = KalikowOptions {
        z: p.z,
        control_variate: true,
        ..kalikow_options(p.n_env, seed, DEFAULT_ENUMERATION)
    };
    let r = theorem3_experiment(
        &law,
        p.rho,
        p.eps0,
        &p.n_list,
        p.allow_failed_conditions,
        &opts,
    )?;
    let mut summary = k_rows(&r.conditions);
    if let Some(w) = &r.warning {
        summary.push(SummaryRow::new("conditions", Status::Fail, w.clone()));
    }
    let mut plus = String::new();
    let mut minus = String::new();
    for row in &r.rows {
        let (tag, buf) = match row.sign {
            HalfSpaceSign::Plus => ("U+", &mut plus),
            HalfSpaceSign::Minus => ("U-", &mut minus),
        };
        buf.push_str(&format!("{} {:.17e}\n", row.n, row.drift[0]));
        summary.push(SummaryRow::info(
            format!("N={} {tag}", row.n),
            format!(
                "drift.e1 = {} ± {} ({:?})",
                fmt_num(row.drift[0]),
                fmt_num(r.z * row.std_errors[0]),
                row.computation
            ),
        ));
    }
    let (status, word) = match r.verdict {
        Theorem3Verdict::KalikowFailsEvidence => (Status::Pass, "opposite signs on U+/U-"),
        Theorem3Verdict::SameSign => (Status::Fail, "same sign on U+/U-"),
        Theorem3Verdict::Inconclusive => (Status::Inconclusive, "CIs do not separate from 0"),
    };
    summary.push(SummaryRow::new(
        "Kalikow condition fails",
        status,
        format!("{word}; stabilized over N: {}", r.stabilized),
    ));
    summary.push(SummaryRow::new(
        "perpendicular drift",
        Status::from_bool(r.max_perpendicular_z <= r.z),
        format!("max |z| = {} ≤ {}", fmt_num(r.max_perpendicular_z), r.z),
    ));
    Ok(Outcome {
        summary,
        result: to_json(&r),
        tables: vec![
            Table::csv("rows", r.to_csv()),
            Table::dat("plus", plus),
            Table::dat("minus", minus),
        ],
    })
}

const DEFAULT_ENUMERATION: u64 = rwre_core::kalikow::DEFAULT_MAX_ENUMERATION;

fn condition_p(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: ConditionPParams = cfg.params()?;
    if p.m_values.is_empty() {
        return Err(CliError::Validation(
            "params.m_values must not be empty".into(),
        ));
    }
    let law = law(cfg)?;
    let mut summary = Vec::new();
    let mut reports = Vec::new();
    let mut tables = Vec::new();
    let mut curve = String::new();
    for (i, &m) in p.m_values.iter().enumerate() {
        let s = derive_seed(seed, Stream::Custom(0x5000), i as u64);
        let r = condition_p_probe(&law, m, p.n_per_site, p.site_cap, s)?;
        let verdict = match r.verdict {
            ConditionPVerdict::PassInformal => "pass-informal",
            ConditionPVerdict::Fail => "fail",
        };
        let exact = r
            .exact_sup
            .map_or(String::new(), |e| format!(", exact {}", fmt_num(e)));
        summary.push(SummaryRow::new(
            format!("condition (P), M={m}"),
            match r.verdict {
                ConditionPVerdict::PassInformal => Status::Pass,
                ConditionPVerdict::Fail => Status::Fail,
            },
            format!(
                "sup P(exit not frontal) = {} (upper {}{exact}; {} failures in {} walks, {}) vs threshold M^{{-{}}} = e^{} → {verdict}",
                fmt_num(r.sup_estimate),
                fmt_num(r.sup_upper),
                r.total_failures(),
                r.total_walks(),
                r.coverage,
                r.threshold_exponent,
                fmt_num(r.log_threshold),
            ),
        ));
        summary.push(SummaryRow::info(
            format!("scale, M={m}"),
            format!(
                "log M0 = {:.4}; M {} M0, so the verdict is informal",
                r.log_m0,
                if r.below_m0 { "<" } else { ">=" }
            ),
        ));
        curve.push_str(&format!("{m} {:.17e}\n", r.sup_estimate));
        tables.push(Table::csv(&format!("m{m}"), r.to_csv()));
        reports.push(r);
    }
    tables.push(Table::dat("sup-vs-m", curve));
    Ok(Outcome {
        summary,
        result: json!({ "probes": reports }),
        tables,
    })
}

fn prop31(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: Prop31Params = cfg.params()?;
    let law = law(cfg)?;
    let w = p.w.unwrap_or(4 * p.l * p.l);
    let r = mean_drift_green_check(&law, p.l, w, p.n_env, p.alpha, seed)?;
    let mut summary = vec![
        SummaryRow::new(
            "mean drift Green",
            Status::from_bool(r.bound_holds),
            format!(
                "E G_U[d.e1](0) = {} ± {}; lower 3 SE {} {} (2/5)dλL² = {}",
                fmt_num(r.mean),
                fmt_num(3.0 * r.mean_se),
                fmt_num(r.lower),
                if r.bound_holds { ">" } else { "≤" },
                fmt_num(r.bound)
            ),
        ),
        SummaryRow::info(
            "fluctuations",
            format!(
                "Var = {} ± {}; constant-drift value λdL(L+1) = {}",
                fmt_num(r.variance),
                fmt_num(r.variance_se),
                fmt_num(r.constant_drift_value)
            ),
        ),
    ];
    if let Some(c) = r.c_alpha_l {
        summary.push(SummaryRow::info("c_alpha_L", fmt_num(c)));
    }
    if let Some(wn) = &r.warning {
        summary.push(SummaryRow::info("warning", wn.clone()));
    }
    let mut tables = Vec::new();
    if let Some(csv) = r.distribution.as_ref().map(samples_to_csv) {
        tables.push(Table::csv("samples", csv));
    }
    tables.push(Table::dat(
        "tail",
        r.tail
            .iter()
            .map(|(u, f)| format!("{u:.17e} {f:.17e}\n"))
            .collect(),
    ));
    Ok(Outcome {
        summary,
        result: to_json(&r),
        tables,
    })
}

/// The law family obtained by varying the amplitude of `desc`.
fn amplitude_family(
    desc: &LawDescriptor,
) -> Result<impl Fn(f64) -> rwre_core::Result<EnvironmentLaw> + '_, CliError> {
    fn with_amplitude(desc: &LawDescriptor, amp: f64) -> Option<LawDescriptor> {
        match desc {
            LawDescriptor::SignedAxisKick {
                d, lambda_shift, ..
            } => Some(LawDescriptor::SignedAxisKick {
                d: *d,
                a: amp,
                lambda_shift: *lambda_shift,
            }),
            LawDescriptor::Shifted { base, lambda_shift } => Some(LawDescriptor::Shifted {
                base: Box::new(with_amplitude(base, amp)?),
                lambda_shift: *lambda_shift,
            }),
            _ => None,
        }
    }
    if with_amplitude(desc, 0.0).is_none() {
        return Err(CliError::Validation(
            "fluctuations need a signed-axis-kick law (possibly shifted) to vary the amplitude"
                .into(),
        ));
    }
    Ok(move |a: f64| with_amplitude(desc, a).expect("checked").build())
}

fn fluctuations(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: FluctuationParams = cfg.params()?;
    let family = amplitude_family(descriptor(cfg))?;
    let w = p.w.unwrap_or(4 * p.l * p.l);
    let r = fluctuation_scan(&family, &p.amplitudes, p.l, w, p.n_env, p.alpha, seed)?;
    let mut summary = Vec::new();
    match r.slope {
        Some(s) => summary.push(SummaryRow::new(
            "variance scaling",
            Status::from_bool((1.8..=2.2).contains(&s)),
            format!(
                "slope of log Var vs log a = {} (expected 2, band [1.8, 2.2])",
                fmt_num(s)
            ),
        )),
        None => summary.push(SummaryRow::new(
            "variance scaling",
            Status::Inconclusive,
            "variance vanishes; no slope".to_string(),
        )),
    }
    for (ar, vr) in &r.ratios {
        let expect = ar * ar;
        summary.push(SummaryRow::new(
            format!("amplitude ×{}", fmt_num(*ar)),
            Status::from_bool(*vr >= 0.875 * expect && *vr <= 1.125 * expect),
            format!("variance ×{} (expected ×{})", fmt_num(*vr), fmt_num(expect)),
        ));
    }
    for row in &r.rows {
        summary.push(SummaryRow::info(
            format!("a={}", fmt_num(row.amplitude)),
            format!(
                "σ²={}, mean {}, Var {} ± {}",
                fmt_num(row.sigma2),
                fmt_num(row.mean),
                fmt_num(row.variance),
                fmt_num(row.variance_se)
            ),
        ));
    }
    if !r.note.is_empty() {
        summary.push(SummaryRow::info("note", r.note.clone()));
    }
    Ok(Outcome {
        summary,
        result: to_json(&r),
        tables: vec![
            Table::csv("rows", r.to_csv()),
            Table::dat("variance", r.plot_data()),
        ],
    })
}

fn rho(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: RhoParams = cfg.params()?;
    let law = law(cfg)?;
    let r = rho_statistics(&law, p.theta, p.eta, p.n_env, &p.options, seed)?;
    let summary = vec![
        SummaryRow::info(
            "scales",
            format!(
                "L={}, M={}, λ={} vs λ0={}, box lateral {} of {}",
                r.l,
                r.m,
                fmt_num(r.lambda),
                fmt_num(r.lambda0),
                r.box_lateral,
                r.box_lateral_full
            ),
        ),
        SummaryRow::info(
            "E sqrt(rho_B)",
            format!(
                "{} ± {}",
                fmt_num(r.mean_sqrt_rho),
                fmt_num(3.0 * r.mean_sqrt_rho_se)
            ),
        ),
        SummaryRow::info(
            "rho_hat(0)",
            format!(
                "mean {} ± {}, max {}",
                fmt_num(r.mean_rho_hat),
                fmt_num(3.0 * r.mean_rho_hat_se),
                fmt_num(r.max_rho_hat)
            ),
        ),
        SummaryRow::new(
            "regime",
            if r.in_regime {
                Status::Pass
            } else {
                Status::Inconclusive
            },
            format!(
                "εL = {} < 3/4: {}",
                fmt_num(r.eps * r.l as f64),
                r.in_regime
            ),
        ),
        SummaryRow::info("coverage", r.declaration.clone()),
        SummaryRow::info(
            "p estimate",
            format!(
                "low fraction {} (upper {}), log10 M^2d = {}, p ≈ {} (lower {})",
                fmt_num(r.low_fraction),
                fmt_num(r.low_fraction_upper),
                fmt_num(r.log10_m2d),
                fmt_num(r.p_estimate),
                fmt_num(r.p_lower)
            ),
        ),
    ];
    Ok(Outcome {
        summary,
        result: to_json(&r),
        tables: vec![Table::csv("environments", r.to_csv())],
    })
}

fn velocity(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: VelocityParams = cfg.params()?;
    let law = law(cfg)?;
    let m = law_moments(&law)?;
    let est = estimate_velocity(&law, p.n_steps, p.n_walks, seed)?;
    let diff = (est.mean - m.lambda).abs();
    let bound = (4 * m.d + 1) as f64 * m.sigma2 + 4.0 * est.std_error;
    let summary = vec![
        SummaryRow::info(
            "velocity",
            format!(
                "v.e1 = {} ± {} ({} walks × {} steps)",
                fmt_num(est.mean),
                fmt_num(3.0 * est.std_error),
                p.n_walks,
                p.n_steps
            ),
        ),
        SummaryRow::new(
            "velocity vs λ",
            Status::from_bool(diff <= bound),
            format!(
                "|v.e1 − λ| = {} {} (4d+1)σ² + 4 SE = {} (λ={})",
                fmt_num(diff),
                if diff <= bound { "≤" } else { ">" },
                fmt_num(bound),
                fmt_num(m.lambda)
            ),
        ),
    ];
    let csv = format!(
        "n_steps,n_walks,mean,std_error,lambda,sigma2\n{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
        p.n_steps, p.n_walks, est.mean, est.std_error, m.lambda, m.sigma2
    );
    Ok(Outcome {
        summary,
        result: json!({
            "estimate": est,
            "lambda": m.lambda,
            "sigma2": m.sigma2,
            "abs_diff": diff,
            "bound": bound,
        }),
        tables: vec![Table::csv("estimate", csv)],
    })
}

fn freedman(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let p: FreedmanConfig = cfg.params()?;
    let mut summary = Vec::new();
    let mut analytic = Json::Null;
    match (p.u, p.b, p.sum_v2) {
        (Some(u), Some(b), Some(sum_v2)) => {
            let v = freedman_bound(&FreedmanParams { u, b, sum_v2 })?;
            summary.push(SummaryRow::info(
                "Freedman bound",
                format!("exp(−u²/(2(Σv² + ub/3))) = {v:.6} at u={u}, b={b}, Σv²={sum_v2}"),
            ));
            analytic = json!({ "u": u, "b": b, "sum_v2": sum_v2, "bound": v });
        }
        (None, None, None) => {}
        _ => {
            return Err(CliError::Validation(
                "params.u, params.b and params.sum_v2 must be given together".into(),
            ))
        }
    }
    let r = martingale_tail_test(p.increments, p.n, &p.u_grid, p.n_paths, seed)?;
    let worst = r
        .rows
        .iter()
        .map(|t| t.two_sided - t.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    summary.push(SummaryRow::new(
        "martingale tails",
        Status::from_bool(r.all_within_bound()),
        format!(
            "P(|M_n| ≥ u) and P(max |M_k| ≥ u) ≤ bound + 3 SE for u in {}..{} ({} paths, n={}; worst excess {})",
            fmt_num(p.u_grid.first().copied().unwrap_or(0.0)),
            fmt_num(p.u_grid.last().copied().unwrap_or(0.0)),
            p.n_paths,
            p.n,
            fmt_num(worst)
        ),
    ));
    let mut bound_dat = String::new();
    let mut tail_dat = String::new();
    for t in &r.rows {
        bound_dat.push_str(&format!("{:.17e} {:.17e}\n", t.u, t.bound));
        tail_dat.push_str(&format!("{:.17e} {:.17e}\n", t.u, t.two_sided));
    }
    Ok(Outcome {
        summary,
        result: json!({ "analytic": analytic, "tails": r }),
        tables: vec![
            Table::csv("tails", r.to_csv()),
            Table::dat("bound", bound_dat),
            Table::dat("empirical", tail_dat),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text).unwrap()
    }

    #[test]
    fn moments_report_has_exact_values() {
        let c = cfg("[law]\nfamily = \"signed-axis-kick\"\nd = 3\na = 0.01\n");
        let out = execute(ExperimentKind::Moments, &c, 0).unwrap();
        let m = &out.result["moments"];
        assert!((m["eps"].as_f64().unwrap() - 0.12).abs() < 1e-12);
        assert!((m["sigma2"].as_f64().unwrap() - 2e-4).abs() < 1e-15);
    }

    #[test]
    fn green_on_ssrw_slab() {
        let c = cfg(
            "[law]\nfamily = \"point-mass\"\nd = 2\n[region]\nkind = \"slab\"\nl = 3\nw = 36\n",
        );
        let out = execute(ExperimentKind::Green, &c, 0).unwrap();
        let t = out.result["expected_exit_time"].as_f64().unwrap();
        assert!((t - 24.0).abs() < 0.02 * 24.0, "{t}");
    }

    #[test]
    fn kalikow_routes_agree_exactly_on_small_support() {
        let c = cfg(r#"
[law]
family = "empirical"
d = 2
support = [
  { weights = [0.3, 0.2, 0.25, 0.25], prob = 0.5 },
  { weights = [0.2, 0.3, 0.25, 0.25], prob = 0.5 },
]
[region]
kind = "box"
lo = [-1, -1]
hi = [1, 1]
[params]
route = "both"
"#);
        let out = execute(ExperimentKind::KalikowDrift, &c, 0).unwrap();
        let row = out
            .summary
            .iter()
            .find(|r| r.check == "route agreement")
            .unwrap();
        assert_eq!(row.status, Status::Pass, "{}", row.detail);
    }

    #[test]
    fn theorem2_row_matches_the_threshold_arithmetic() {
        let c = cfg(r#"
[law]
family = "signed-axis-kick"
d = 2
a = 0.02
lambda_shift = 0.03
[params]
n_env = 50
family = { box_k_max = 1, slab_l_max = 1, half_space_n = [], n_clusters = 0 }
"#);
        let out = execute(ExperimentKind::Theorem2, &c, 1).unwrap();
        let d = &out.summary[0].detail;
        // the shift raises eps from 0.16 to 0.28
        assert!(
            d.starts_with("λ=0.03 > 4dσ²(1+9ε)=0.0225 → Kalikow evidence: "),
            "{d}"
        );
    }

    #[test]
    fn threshold_row_format() {
        let t = rwre_core::kalikow::theorem2_threshold(2, 8e-4, 0.16);
        assert_eq!(
            threshold_detail(0.03, t, EvidenceVerdict::PositiveEvidence),
            "λ=0.03 > 4dσ²(1+9ε)=0.0156 → Kalikow evidence: positive"
        );
    }

    #[test]
    fn condition_p_row_names_the_exponent() {
        let c = cfg(
            "[law]\nfamily = \"point-mass\"\nd = 3\nlambda_shift = 0.3\n[params]\nn_per_site = 20\nsite_cap = 3\n",
        );
        let out = execute(ExperimentKind::ConditionP, &c, 0).unwrap();
        assert!(
            out.summary[0].detail.contains("threshold M^{-50}"),
            "{}",
            out.summary[0].detail
        );
    }

    #[test]
    fn freedman_needs_all_three_analytic_inputs() {
        let c = cfg("[params]\nu = 1.0\nn_paths = 10\n");
        assert!(matches!(
            execute(ExperimentKind::Freedman, &c, 0),
            Err(CliError::Validation(_))
        ));
    }

    #[test]
    fn fluctuations_reject_fixed_laws() {
        let c =
            cfg("[law]\nfamily = \"point-mass\"\nd = 2\n[params]\namplitudes = [0.01]\nl = 2\n");
        assert!(matches!(
            execute(ExperimentKind::Fluctuations, &c, 0),
            Err(CliError::Validation(_))
        ));
    }
}
