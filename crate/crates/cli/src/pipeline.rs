//! Pipeline stages: plan → run → analyze → report, plus the verify fixture
//! suite. Every stage is deterministic given the config and (for analysis
//! onward) the ledger bytes.

use crate::config::AuditConfig;
use riskaudit_core::catalog::FeatureCatalog;
use riskaudit_core::cohort::{
    cohort_summary, cohort_to_csv, sample_cohort, summary_to_csv, PatientProfile,
};
use riskaudit_core::error::{AuditError, Result};
use riskaudit_core::inference::{
    battery_to_csv, format_battery_table, run_hypothesis_battery, ModelBattery,
};
use riskaudit_core::ledger::{Ledger, LedgerWriter, ResponseCache};
use riskaudit_core::metrics::{
    aggregate_curves, compute_instability, curves_to_csv, instability_to_csv,
};
use riskaudit_core::perturbation::{
    build_configurations, configuration_payload, configurations_to_jsonl, payload_text,
};
use riskaudit_core::prompting::{prompt_fingerprint, render_prompt, TEMPLATE_VERSION};
use riskaudit_core::provider::{execute_cells, Cell, CellKey, Provider, RunStats};
use riskaudit_core::report::{curve_svg, heatmap_svg, parse_quality_csv};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";

/// Frozen description of a run, written before the first provider call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: AuditConfig,
    pub config_digest: String,
    pub catalog_schema_version: u32,
    pub template_version: String,
    pub planned_cells: u64,
    pub estimated_cost_usd: f64,
    pub created_at_unix_ms: u64,
    /// (model key, prompt key, patient, t, rep), in execution order
    pub cells: Vec<(String, String, u32, u8, u8)>,
}

/// The artifacts a run directory accumulates.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir {
            root: root.to_path_buf(),
        }
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
    pub fn ledger_path(&self) -> PathBuf {
        self.root.join(LEDGER_FILE)
    }
    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
    pub fn figures_dir(&self) -> PathBuf {
        self.root.join("figures")
    }
    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }
}

/// Sample the cohort and build every prepared cell in execution order:
/// model → prompt → patient → level → rep.
pub fn build_cells(
    config: &AuditConfig,
    catalog: &FeatureCatalog,
    cohort: &[PatientProfile],
) -> Result<Vec<Cell>> {
    let mut cells = Vec::with_capacity(config.cell_count() as usize);
    let mut index = 0usize;
    for target in &config.models {
        for &style in &config.prompts {
            for patient in cohort {
                let configs = build_configurations(patient, catalog, config.master_seed);
                for cfg in configs.iter().take(config.levels as usize + 1) {
                    let payload = configuration_payload(cfg, patient, catalog)?;
                    let spec = render_prompt(style, &payload_text(&payload), &config.scale)?;
                    let fingerprint = prompt_fingerprint(&spec);
                    for rep in 0..config.reps {
                        cells.push(Cell {
                            index,
                            target: target.clone(),
                            spec: spec.clone(),
                            config: cfg.clone(),
                            rep,
                            fingerprint: fingerprint.clone(),
                        });
                        index += 1;
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Plan a run: sample the cohort, build configurations and prompts, write the
/// manifest and cohort artifacts. Makes zero network calls.
pub fn cmd_plan(config: &AuditConfig, out: &Path) -> Result<RunManifest> {
    config.validate()?;
    let catalog = FeatureCatalog::default_catalog();
    let run = RunDir::new(out);
    std::fs::create_dir_all(&run.root)?;

    let cohort = sample_cohort(&catalog, config.patients, config.master_seed);
    std::fs::write(run.root.join("cohort.csv"), cohort_to_csv(&catalog, &cohort)?)?;
    let summary = cohort_summary(&catalog, &cohort)?;
    std::fs::write(run.root.join("cohort_summary.csv"), summary_to_csv(&summary)?)?;

    let mut all_configs = Vec::new();
    for patient in &cohort {
        all_configs.extend(build_configurations(patient, &catalog, config.master_seed));
    }
    std::fs::write(
        run.root.join("configurations.jsonl"),
        configurations_to_jsonl(&all_configs)?,
    )?;

    let cells = build_cells(config, &catalog, &cohort)?;
    let manifest = RunManifest {
        config: config.clone(),
        config_digest: config.digest(),
        catalog_schema_version: catalog.schema_version,
        template_version: TEMPLATE_VERSION.to_string(),
        planned_cells: cells.len() as u64,
        estimated_cost_usd: cells.len() as f64 * config.price_per_call_usd,
        created_at_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        cells: cells
            .iter()
            .map(|c| {
                (
                    c.target.key.clone(),
                    c.spec.style.key().to_string(),
                    c.config.patient_id,
                    c.config.t,
                    c.rep,
                )
            })
            .collect(),
    };
    std::fs::write(run.manifest_path(), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Execute all pending cells against a provider; resumable — cells already in
/// the ledger are skipped.
pub fn cmd_run(
    config: &AuditConfig,
    out: &Path,
    provider: &Provider,
    mut progress: impl FnMut(usize, usize),
) -> Result<RunStats> {
    config.validate()?;
    let run = RunDir::new(out);
    if !run.manifest_path().exists() {
        cmd_plan(config, out)?;
    }
    let catalog = FeatureCatalog::default_catalog();
    let cohort = sample_cohort(&catalog, config.patients, config.master_seed);
    let cells = build_cells(config, &catalog, &cohort)?;

    let (mut writer, completed) = if run.ledger_path().exists() {
        let ledger = Ledger::load(&run.ledger_path())?;
        (
            LedgerWriter::append_to(&run.ledger_path())?,
            ledger.completed_keys(),
        )
    } else {
        (LedgerWriter::create(&run.ledger_path())?, HashSet::new())
    };

    let pending: Vec<Cell> = cells
        .into_iter()
        .filter(|c| !completed.contains(&cell_key(c)))
        .collect();

    let cache = match provider {
        Provider::Real(_) => Some(ResponseCache::open(&run.cache_dir())?),
        Provider::Mock(_) => None,
    };
    execute_cells(
        &pending,
        provider,
        &cohort,
        &catalog,
        &config.scale,
        config.master_seed,
        config.concurrency,
        cache.as_ref(),
        &mut writer,
        &mut progress,
    )
}

fn cell_key(cell: &Cell) -> CellKey {
    (
        cell.target.key.clone(),
        cell.spec.style.key(),
        cell.config.patient_id,
        cell.config.t,
        cell.rep,
    )
}

/// Outputs of an analysis pass, also written to `analysis/`.
pub struct Analysis {
    pub batteries: Vec<ModelBattery>,
    pub dropped_cells: usize,
}

/// Aggregate the ledger into instability records, curves, and the hypothesis
/// battery. Deterministic given ledger bytes.
pub fn cmd_analyze(config: &AuditConfig, out: &Path, allow_partial: bool) -> Result<Analysis> {
    let run = RunDir::new(out);
    let ledger = Ledger::load(&run.ledger_path())?;
    if ledger.records.is_empty() {
        return Err(AuditError::Ledger("ledger is empty".into()));
    }

    let expected = config.cell_count();
    if (ledger.records.len() as u64) < expected && !allow_partial {
        let have = ledger.completed_keys();
        let catalog = FeatureCatalog::default_catalog();
        let cohort = sample_cohort(&catalog, config.patients, config.master_seed);
        let missing: Vec<String> = build_cells(config, &catalog, &cohort)?
            .iter()
            .filter(|c| !have.contains(&cell_key(c)))
            .take(10)
            .map(|c| {
                format!(
                    "{}/{}/patient {}/t={}/rep {}",
                    c.target.key,
                    c.spec.style.key(),
                    c.config.patient_id,
                    c.config.t,
                    c.rep
                )
            })
            .collect();
        return Err(AuditError::Ledger(format!(
            "ledger holds {} of {} cells; pass --allow-partial to analyze anyway; first missing: {}",
            ledger.records.len(),
            expected,
            missing.join("; ")
        )));
    }

    let dir = run.analysis_dir();
    std::fs::create_dir_all(&dir)?;

    let (records, dropped) = compute_instability(&ledger.records, config.reps);
    std::fs::write(dir.join("instability.csv"), instability_to_csv(&records)?)?;
    let curves = aggregate_curves(&records);
    std::fs::write(dir.join("curves.csv"), curves_to_csv(&curves)?)?;
    std::fs::write(
        dir.join("parse_quality.csv"),
        parse_quality_csv(&ledger.records),
    )?;

    let mut models: Vec<String> = records.iter().map(|r| r.model.clone()).collect();
    models.sort();
    models.dedup();
    let mut batteries = Vec::new();
    for model in &models {
        batteries.push(run_hypothesis_battery(&records, model)?);
    }
    std::fs::write(dir.join("hypotheses.csv"), battery_to_csv(&batteries)?)?;
    std::fs::write(dir.join("table.txt"), format_battery_table(&batteries))?;

    Ok(Analysis {
        batteries,
        dropped_cells: dropped,
    })
}

/// Emit figures and the summary report from an analyzed run directory.
pub fn cmd_report(out: &Path) -> Result<Vec<PathBuf>> {
    let run = RunDir::new(out);
    let analysis = run.analysis_dir();
    for required in ["table.txt", "parse_quality.csv"] {
        if !analysis.join(required).exists() {
            return Err(AuditError::Config(format!(
                "missing analysis output `{}`; run analyze first",
                analysis.join(required).display()
            )));
        }
    }
    let ledger = Ledger::load(&run.ledger_path())?;
    // infer S from the ledger so report needs no config
    let reps = ledger.records.iter().map(|r| r.rep).max().unwrap_or(0) + 1;
    let (records, _) = compute_instability(&ledger.records, reps);
    let curves = aggregate_curves(&records);

    let figures = run.figures_dir();
    std::fs::create_dir_all(&figures)?;
    let mut written = Vec::new();

    let mut models: Vec<String> = curves.iter().map(|p| p.model.clone()).collect();
    models.sort();
    models.dedup();
    for model in &models {
        let path = figures.join(format!("curve_{}.svg", model.replace(['/', ' '], "_")));
        std::fs::write(&path, curve_svg(model, &curves))?;
        written.push(path);
    }
    let heatmap = figures.join("heatmap.svg");
    std::fs::write(&heatmap, heatmap_svg(&curves))?;
    written.push(heatmap);

    let mut report = String::new();
    report.push_str(&std::fs::read_to_string(analysis.join("table.txt"))?);
    report.push_str("\nParse-quality appendix\n");
    report.push_str(&std::fs::read_to_string(analysis.join("parse_quality.csv"))?);
    let report_path = run.root.join("report.txt");
    std::fs::write(&report_path, report)?;
    written.push(report_path);
    Ok(written)
}

/// Quick oracle fixture suite: design arithmetic, REML closed-form checks,
/// and the star legend. Returns human-readable pass lines; any failure is an
/// error.
pub fn cmd_verify() -> Result<Vec<String>> {
    use riskaudit_core::inference::{fit_reml, stars, LmmDesign, LmmForm, ALPHA_CORR};
    use riskaudit_core::prompting::PromptStyle;
    use riskaudit_core::rng;

    let mut lines = Vec::new();
    let check = |ok: bool, msg: &str| -> Result<String> {
        if ok {
            Ok(format!("ok: {msg}"))
        } else {
            Err(AuditError::Consistency(format!("verify failed: {msg}")))
        }
    };

    lines.push(check(
        AuditConfig::default().cell_count() == 44_000,
        "default design is 44,000 cells",
    )?);
    lines.push(check(
        AuditConfig::desk_preset().cell_count() == 1_760,
        "desk preset is 1,760 cells",
    )?);

    // REML vs plain least squares at sigma_u = 0
    let mut r = rng::stream(7, "verify/ols");
    let mut response = Vec::new();
    let mut fixed = Vec::new();
    let mut groups = Vec::new();
    for k in 0..40u32 {
        for t in 1..=10u8 {
            response.push(1.0 + 0.2 * t as f64 + rng::standard_normal(&mut r));
            fixed.push(vec![1.0, t as f64]);
            groups.push(k);
        }
    }
    let n = response.len() as f64;
    let (mut st, mut stt, mut sy, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (row, &y) in fixed.iter().zip(&response) {
        st += row[1];
        stt += row[1] * row[1];
        sy += y;
        sty += row[1] * y;
    }
    let det = n * stt - st * st;
    let ols_slope = (n * sty - st * sy) / det;
    let fit = fit_reml(&LmmDesign {
        response,
        fixed,
        columns: vec!["intercept".into(), "t".into()],
        groups,
        form: LmmForm::Basic {
            model: "verify".into(),
            prompt: PromptStyle::Neutral,
        },
        dropped_rows: 0,
    })?;
    lines.push(check(
        (fit.fixed_estimates[1] - ols_slope).abs() < 1e-6,
        "REML slope matches least squares at the variance boundary",
    )?);

    lines.push(check(
        stars(0.0005) == "***"
            && stars(0.002) == "\u{25C7}"
            && stars(0.005) == "**"
            && stars(0.03) == "*"
            && stars(0.2).is_empty(),
        "star legend thresholds",
    )?);
    lines.push(check(
        (ALPHA_CORR - 0.05 / 11.0).abs() < 1e-15,
        "Bonferroni threshold is 0.05/11",
    )?);
    Ok(lines)
}
