//! Random-intercept linear mixed-effects models fitted by profiled REML, and
//! the per-model hypothesis battery with Bonferroni control.
//!
//! Two model forms are fitted over the instability response Δ:
//!
//! - Basic, per (model, prompt): Δ = α₀ + α₁·t + u_k + ε, testing H1 (α₁ > 0).
//! - Complex, per model with neutral as reference: Δ = β₀ + β₁·t +
//!   Σⱼ β₂ⱼ·promptⱼ + Σⱼ β₃ⱼ·(promptⱼ × t) + u_k + ε, testing H2 (β₁ > 0),
//!   H3 (β₂ⱼ ≠ 0), H4 (β₃ⱼ ≠ 0).
//!
//! For the variance ratio θ = σ_u²/σ_e² the marginal covariance is
//! V = σ_e²(I + θZZᵀ), block diagonal over patients with rank-one blocks, so
//! V⁻¹ is available in closed form per block: W_k = I − c_k·11ᵀ with
//! c_k = θ/(1 + θn_k). Generalized-least-squares fixed effects and the
//! profiled residual variance are computed from group-sum downdates of the
//! Gram matrices; no dense solve over all rows is performed. θ is found by
//! bounded minimization of the profiled REML criterion over
//! log θ ∈ [−12, 12] (a coarse grid pass followed by Brent refinement to
//! absolute tolerance 1e-8 in log θ), with the θ = 0 boundary included in the
//! candidate set.

use crate::brent;
use crate::error::{AuditError, Result};
use crate::metrics::InstabilityRecord;
use crate::prompting::PromptStyle;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;

/// Hypotheses tested per model: 4 × H1 + 1 × H2 + 3 × H3 + 3 × H4.
pub const BATTERY_SIZE: usize = 11;

/// Per-model Bonferroni-adjusted threshold, 0.05/11.
pub const ALPHA_CORR: f64 = 0.05 / BATTERY_SIZE as f64;

/// Absolute tolerance of the θ search, in log θ.
pub const LOG_THETA_TOL: f64 = 1e-8;

/// Search bounds for log θ.
pub const LOG_THETA_BOUNDS: (f64, f64) = (-12.0, 12.0);

/// Model form a design was built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmmForm {
    /// One (model, prompt) stratum; columns [1, t].
    Basic { model: String, prompt: PromptStyle },
    /// One model over all prompts; columns [1, t, 3 prompt indicators,
    /// 3 prompt × t interactions], neutral omitted as reference.
    Complex { model: String },
}

/// A fitting problem: response, fixed-effect design, and patient grouping.
#[derive(Debug, Clone)]
pub struct LmmDesign {
    pub response: Vec<f64>,
    /// Row-major fixed design, `response.len()` rows × `columns.len()`.
    pub fixed: Vec<Vec<f64>>,
    pub columns: Vec<String>,
    /// Patient id per row (the random-intercept grouping).
    pub groups: Vec<u32>,
    pub form: LmmForm,
    /// Instability cells that were unavailable for this stratum (missing
    /// baseline or too few valid repetitions), dropped listwise.
    pub dropped_rows: usize,
}

/// A fitted random-intercept model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmmFit {
    pub columns: Vec<String>,
    pub fixed_estimates: Vec<f64>,
    /// Random-intercept variance (≥ 0; the θ = 0 boundary is allowed).
    pub sigma_u2: f64,
    /// Residual variance (> 0).
    pub sigma_e2: f64,
    /// Covariance of the fixed estimates, row-major p × p.
    pub covariance: Vec<Vec<f64>>,
    pub reml_loglik: f64,
    pub converged: bool,
    pub n_rows: usize,
    pub n_groups: usize,
    /// Residual degrees of freedom, n_rows − rank(fixed design).
    pub df: f64,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisFamily {
    H1,
    H2,
    H3,
    H4,
}

impl HypothesisFamily {
    pub fn label(&self) -> &'static str {
        match self {
            HypothesisFamily::H1 => "H1",
            HypothesisFamily::H2 => "H2",
            HypothesisFamily::H3 => "H3",
            HypothesisFamily::H4 => "H4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    OneSidedGreater,
    TwoSided,
}

/// One Wald test outcome. Both sidedness conventions are exported; `p_value`
/// is the headline value under `sidedness`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub family: HypothesisFamily,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptStyle>,
    pub coefficient: String,
    pub estimate: f64,
    pub std_error: f64,
    pub statistic: f64,
    pub df: f64,
    pub sidedness: Sidedness,
    pub p_value: f64,
    pub p_one_sided_greater: f64,
    pub p_two_sided: f64,
    /// Thresholds attained among {0.001, α_corr, 0.01, 0.05}.
    pub significant_at: Vec<f64>,
}

/// The 11-test battery for one model, plus the underlying fits.
#[derive(Debug, Clone)]
pub struct ModelBattery {
    pub model: String,
    pub results: Vec<HypothesisResult>,
    pub basic_fits: Vec<(PromptStyle, LmmFit)>,
    pub complex_fit: LmmFit,
}

// ---------------------------------------------------------------------------
// Design construction
// ---------------------------------------------------------------------------

/// Non-reference prompts, in the complex design's column order.
pub const CONTRAST_PROMPTS: [PromptStyle; 3] = [
    PromptStyle::Logical,
    PromptStyle::HumanImpact,
    PromptStyle::ClinicalJudgment,
];

/// Basic design for one (model, prompt) stratum: Δ on [1, t], t = 1..max.
pub fn basic_design(
    records: &[InstabilityRecord],
    model: &str,
    prompt: PromptStyle,
) -> Result<LmmDesign> {
    let mut response = Vec::new();
    let mut fixed = Vec::new();
    let mut groups = Vec::new();
    let mut dropped = 0usize;
    for r in records {
        if r.model != model || r.prompt != prompt || r.t == 0 {
            continue;
        }
        match r.delta {
            Some(delta) => {
                response.push(delta);
                fixed.push(vec![1.0, r.t as f64]);
                groups.push(r.patient_id);
            }
            None => dropped += 1,
        }
    }
    if response.is_empty() {
        return Err(AuditError::Inference(format!(
            "model `{model}`: no instability rows for prompt `{}`",
            prompt.key()
        )));
    }
    Ok(LmmDesign {
        response,
        fixed,
        columns: vec!["intercept".into(), "t".into()],
        groups,
        form: LmmForm::Basic {
            model: model.to_string(),
            prompt,
        },
        dropped_rows: dropped,
    })
}

/// Complex design for one model, pooling all prompts with neutral as the
/// reference category.
pub fn complex_design(records: &[InstabilityRecord], model: &str) -> Result<LmmDesign> {
    let mut response = Vec::new();
    let mut fixed = Vec::new();
    let mut groups = Vec::new();
    let mut dropped = 0usize;
    for r in records {
        if r.model != model || r.t == 0 {
            continue;
        }
        match r.delta {
            Some(delta) => {
                let t = r.t as f64;
                let mut row = vec![1.0, t];
                for p in CONTRAST_PROMPTS {
                    row.push(if r.prompt == p { 1.0 } else { 0.0 });
                }
                for p in CONTRAST_PROMPTS {
                    row.push(if r.prompt == p { t } else { 0.0 });
                }
                response.push(delta);
                fixed.push(row);
                groups.push(r.patient_id);
            }
            None => dropped += 1,
        }
    }
    if response.is_empty() {
        return Err(AuditError::Inference(format!(
            "model `{model}`: no instability rows"
        )));
    }
    let mut columns = vec!["intercept".to_string(), "t".to_string()];
    for p in CONTRAST_PROMPTS {
        columns.push(format!("prompt_{}", p.key()));
    }
    for p in CONTRAST_PROMPTS {
        columns.push(format!("t_x_{}", p.key()));
    }
    Ok(LmmDesign {
        response,
        fixed,
        columns,
        groups,
        form: LmmForm::Complex {
            model: model.to_string(),
        },
        dropped_rows: dropped,
    })
}

// ---------------------------------------------------------------------------
// REML fitting
// ---------------------------------------------------------------------------

/// Per-group sufficient statistics plus whole-sample Gram matrices; all θ
/// evaluations reuse these, so each is O(G·p²).
struct Sufficient {
    n: usize,
    p: usize,
    xtx: Vec<Vec<f64>>,
    xty: Vec<f64>,
    yty: f64,
    /// per group: (n_k, Σ x rows, Σ y)
    group_sums: Vec<(f64, Vec<f64>, f64)>,
}

impl Sufficient {
    fn build(design: &LmmDesign) -> Self {
        let n = design.response.len();
        let p = design.columns.len();
        let mut xtx = vec![vec![0.0; p]; p];
        let mut xty = vec![0.0; p];
        let mut yty = 0.0;
        let mut by_group: BTreeMap<u32, (f64, Vec<f64>, f64)> = BTreeMap::new();
        for (row, (&y, &g)) in design
            .fixed
            .iter()
            .zip(design.response.iter().zip(design.groups.iter()))
        {
            for i in 0..p {
                for j in i..p {
                    xtx[i][j] += row[i] * row[j];
                }
                xty[i] += row[i] * y;
            }
            yty += y * y;
            let entry = by_group.entry(g).or_insert_with(|| (0.0, vec![0.0; p], 0.0));
            entry.0 += 1.0;
            for i in 0..p {
                entry.1[i] += row[i];
            }
            entry.2 += y;
        }
        for i in 0..p {
            for j in 0..i {
                xtx[i][j] = xtx[j][i];
            }
        }
        Sufficient {
            n,
            p,
            xtx,
            xty,
            yty,
            group_sums: by_group.into_values().collect(),
        }
    }

    /// Whitened Gram matrices under W = blockdiag(I − c_k·11ᵀ),
    /// c_k = θ/(1+θn_k): returns (XᵀWX, XᵀWy, yᵀWy, Σ ln(1+θn_k)).
    fn whitened(&self, theta: f64) -> (Vec<Vec<f64>>, Vec<f64>, f64, f64) {
        let p = self.p;
        let mut a = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut yy = self.yty;
        let mut logdet_v = 0.0;
        if theta > 0.0 {
            for (nk, sx, sy) in &self.group_sums {
                let c = theta / (1.0 + theta * nk);
                logdet_v += (1.0 + theta * nk).ln();
                for i in 0..p {
                    for j in 0..p {
                        a[i][j] -= c * sx[i] * sx[j];
                    }
                    b[i] -= c * sx[i] * sy;
                }
                yy -= c * sy * sy;
            }
        }
        (a, b, yy, logdet_v)
    }
}

/// Cholesky factorization of a small symmetric positive-definite matrix.
/// Returns the lower factor, or the index of the first column whose pivot
/// collapses (rank deficiency).
fn cholesky(a: &[Vec<f64>]) -> std::result::Result<Vec<Vec<f64>>, usize> {
    let p = a.len();
    let mut l = vec![vec![0.0; p]; p];
    for j in 0..p {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > a[j][j].abs() * 1e-12) || !d.is_finite() {
            return Err(j);
        }
        l[j][j] = d.sqrt();
        for i in (j + 1)..p {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    Ok(l)
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let p = l.len();
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in (i + 1)..p {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn chol_logdet(l: &[Vec<f64>]) -> f64 {
    l.iter().enumerate().map(|(i, row)| 2.0 * row[i].ln()).sum()
}

fn chol_inverse(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = l.len();
    let mut inv = vec![vec![0.0; p]; p];
    for (j, col) in (0..p).map(|j| {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        (j, chol_solve(l, &e))
    }) {
        for i in 0..p {
            inv[i][j] = col[i];
        }
    }
    inv
}

/// The profiled −2·REML criterion at θ (up to an additive constant), with the
/// quantities needed to finalize a fit.
struct Profiled {
    criterion: f64,
    beta: Vec<f64>,
    sigma_e2: f64,
    gram_l: Vec<Vec<f64>>,
}

fn profile_theta(suff: &Sufficient, theta: f64) -> std::result::Result<Profiled, usize> {
    let (a, b, yy, logdet_v) = suff.whitened(theta);
    let l = cholesky(&a)?;
    let beta = chol_solve(&l, &b);
    let mut rss = yy;
    for i in 0..suff.p {
        rss -= beta[i] * b[i];
    }
    let dfree = (suff.n - suff.p) as f64;
    let sigma_e2 = (rss / dfree).max(f64::MIN_POSITIVE);
    let criterion = dfree * sigma_e2.ln() + logdet_v + chol_logdet(&l);
    Ok(Profiled {
        criterion,
        beta,
        sigma_e2,
        gram_l: l,
    })
}

/// Fit a random-intercept model by profiled REML.
pub fn fit_reml(design: &LmmDesign) -> Result<LmmFit> {
    let n = design.response.len();
    let p = design.columns.len();
    if n <= p {
        return Err(AuditError::Inference(format!(
            "{n} rows cannot identify {p} fixed effects plus a residual variance"
        )));
    }
    let n_groups = {
        let mut g: Vec<u32> = design.groups.clone();
        g.sort_unstable();
        g.dedup();
        g.len()
    };
    if n_groups < 2 {
        return Err(AuditError::Inference(
            "random-intercept fit requires at least 2 groups".into(),
        ));
    }
    let suff = Sufficient::build(design);
    let named = |col: usize| AuditError::RankDeficient(design.columns[col].clone());

    // Rank check at θ = 0 (the Gram matrix is most informative there).
    profile_theta(&suff, 0.0).map_err(named)?;

    let eval = |log_theta: f64| -> f64 {
        match profile_theta(&suff, log_theta.exp()) {
            Ok(pr) => pr.criterion,
            Err(_) => f64::INFINITY,
        }
    };

    // Coarse grid to bracket the minimum, then Brent refinement.
    let (lo, hi) = LOG_THETA_BOUNDS;
    let grid_n = 49usize;
    let mut best_i = 0usize;
    let mut best_f = f64::INFINITY;
    for i in 0..=grid_n {
        let x = lo + (hi - lo) * i as f64 / grid_n as f64;
        let f = eval(x);
        if f < best_f {
            best_f = f;
            best_i = i;
        }
    }
    let step = (hi - lo) / grid_n as f64;
    let bl = (lo + step * best_i as f64 - step).max(lo);
    let bh = (lo + step * best_i as f64 + step).min(hi);
    let (log_theta_hat, f_interior) = brent::minimize(eval, bl, bh, LOG_THETA_TOL, 500);

    // θ = 0 boundary candidate.
    let boundary = profile_theta(&suff, 0.0).map_err(named)?;
    let (theta_hat, profiled) = if boundary.criterion <= f_interior {
        (0.0, boundary)
    } else {
        (
            log_theta_hat.exp(),
            profile_theta(&suff, log_theta_hat.exp()).map_err(named)?,
        )
    };

    let dfree = (n - p) as f64;
    let sigma_e2 = profiled.sigma_e2;
    let sigma_u2 = theta_hat * sigma_e2;
    let cov = {
        let inv = chol_inverse(&profiled.gram_l);
        inv.into_iter()
            .map(|row| row.into_iter().map(|v| v * sigma_e2).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let reml_loglik =
        -0.5 * (profiled.criterion + dfree * (1.0 + (2.0 * std::f64::consts::PI).ln()));
    let converged = profiled.beta.iter().all(|b| b.is_finite())
        && sigma_e2.is_finite()
        && reml_loglik.is_finite();

    Ok(LmmFit {
        columns: design.columns.clone(),
        fixed_estimates: profiled.beta,
        sigma_u2,
        sigma_e2,
        covariance: cov,
        reml_loglik,
        converged,
        n_rows: n,
        n_groups,
        df: dfree,
        dropped_rows: design.dropped_rows,
    })
}

// ---------------------------------------------------------------------------
// Wald tests and the battery
// ---------------------------------------------------------------------------

/// Significance thresholds annotated on results, in decreasing stringency.
pub fn thresholds() -> [f64; 4] {
    [0.001, ALPHA_CORR, 0.01, 0.05]
}

/// Wald t-test of one coefficient against zero; df = n − rank(fixed design).
pub fn wald_test(
    fit: &LmmFit,
    coefficient: usize,
    sidedness: Sidedness,
    family: HypothesisFamily,
    model: &str,
    prompt: Option<PromptStyle>,
) -> Result<HypothesisResult> {
    if !fit.converged {
        return Err(AuditError::Inference(format!(
            "model `{model}`: test of `{}` suppressed on a non-converged fit",
            fit.columns[coefficient]
        )));
    }
    let estimate = fit.fixed_estimates[coefficient];
    let std_error = fit.covariance[coefficient][coefficient].sqrt();
    let statistic = estimate / std_error;
    let dist = StudentsT::new(0.0, 1.0, fit.df)
        .map_err(|e| AuditError::Inference(format!("t reference: {e}")))?;
    let lower_tail = dist.cdf(statistic);
    let p_one_sided_greater = 1.0 - lower_tail;
    let p_two_sided = 2.0 * lower_tail.min(1.0 - lower_tail);
    let p_value = match sidedness {
        Sidedness::OneSidedGreater => p_one_sided_greater,
        Sidedness::TwoSided => p_two_sided,
    };
    let significant_at = thresholds().into_iter().filter(|t| p_value < *t).collect();
    Ok(HypothesisResult {
        family,
        model: model.to_string(),
        prompt,
        coefficient: fit.columns[coefficient].clone(),
        estimate,
        std_error,
        statistic,
        df: fit.df,
        sidedness,
        p_value,
        p_one_sided_greater,
        p_two_sided,
        significant_at,
    })
}

/// Fit the 4 basic models and 1 complex model for a target model and evaluate
/// the 11-hypothesis battery.
pub fn run_hypothesis_battery(
    records: &[InstabilityRecord],
    model: &str,
) -> Result<ModelBattery> {
    for style in PromptStyle::ALL {
        if !records
            .iter()
            .any(|r| r.model == model && r.prompt == style && r.t > 0 && r.delta.is_some())
        {
            return Err(AuditError::Inference(format!(
                "model `{model}`: missing prompt stratum `{}`",
                style.key()
            )));
        }
    }

    let mut results = Vec::with_capacity(BATTERY_SIZE);
    let mut basic_fits = Vec::with_capacity(4);
    // H1: α₁ > 0 within each prompt.
    for style in PromptStyle::ALL {
        let design = basic_design(records, model, style)?;
        let fit = fit_reml(&design)?;
        results.push(wald_test(
            &fit,
            1,
            Sidedness::OneSidedGreater,
            HypothesisFamily::H1,
            model,
            Some(style),
        )?);
        basic_fits.push((style, fit));
    }

    let complex_fit = fit_reml(&complex_design(records, model)?)?;
    // H2: β₁ > 0.
    results.push(wald_test(
        &complex_fit,
        1,
        Sidedness::OneSidedGreater,
        HypothesisFamily::H2,
        model,
        None,
    )?);
    // H3: β₂ⱼ ≠ 0 (level shifts against neutral).
    for (j, style) in CONTRAST_PROMPTS.into_iter().enumerate() {
        results.push(wald_test(
            &complex_fit,
            2 + j,
            Sidedness::TwoSided,
            HypothesisFamily::H3,
            model,
            Some(style),
        )?);
    }
    // H4: β₃ⱼ ≠ 0 (slope differences against neutral).
    for (j, style) in CONTRAST_PROMPTS.into_iter().enumerate() {
        results.push(wald_test(
            &complex_fit,
            5 + j,
            Sidedness::TwoSided,
            HypothesisFamily::H4,
            model,
            Some(style),
        )?);
    }
    debug_assert_eq!(results.len(), BATTERY_SIZE);

    Ok(ModelBattery {
        model: model.to_string(),
        results,
        basic_fits,
        complex_fit,
    })
}

// ---------------------------------------------------------------------------
// Presentation
// ---------------------------------------------------------------------------

/// Star annotation per the table legend; the ◇ marker flags the
/// Bonferroni-adjusted threshold.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < ALPHA_CORR {
        "\u{25C7}"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        format!("<0.001{}", stars(p))
    } else {
        format!("{:.3}{}", p, stars(p))
    }
}

/// Text table mirroring the published layout: one block per model, rows per
/// prompt, columns Simple α₁ / Complex β₁ / Complex β₂ / Complex β₃, with "—"
/// for the neutral reference contrasts.
pub fn format_battery_table(batteries: &[ModelBattery]) -> String {
    let mut out = String::new();
    out.push_str("Hypothesis battery p-values across models and prompt styles\n");
    out.push_str(&format!(
        "Bonferroni-adjusted threshold per model: 0.05/11 \u{2248} 0.004 (exact {ALPHA_CORR:.10})\n\n"
    ));
    let header = format!(
        "{:<22} {:<20} {:>12} {:>12} {:>12} {:>12}",
        "Model", "Prompt", "Simple α₁", "Complex β₁", "Complex β₂", "Complex β₃"
    );
    out.push_str(&header);
    out.push('\n');
    out.push_str(&"-".repeat(header.chars().count()));
    out.push('\n');
    for battery in batteries {
        let find = |family: HypothesisFamily, prompt: Option<PromptStyle>| {
            battery
                .results
                .iter()
                .find(|r| r.family == family && r.prompt == prompt)
        };
        let beta1 = find(HypothesisFamily::H2, None).map(|r| fmt_p(r.p_value));
        for style in PromptStyle::ALL {
            let h1 = find(HypothesisFamily::H1, Some(style))
                .map(|r| fmt_p(r.p_value))
                .unwrap_or_default();
            let (h3, h4) = if style == PromptStyle::Neutral {
                ("\u{2014}".to_string(), "\u{2014}".to_string())
            } else {
                (
                    find(HypothesisFamily::H3, Some(style))
                        .map(|r| fmt_p(r.p_value))
                        .unwrap_or_default(),
                    find(HypothesisFamily::H4, Some(style))
                        .map(|r| fmt_p(r.p_value))
                        .unwrap_or_default(),
                )
            };
            out.push_str(&format!(
                "{:<22} {:<20} {:>12} {:>12} {:>12} {:>12}\n",
                battery.model,
                style.label(),
                h1,
                beta1.clone().unwrap_or_default(),
                h3,
                h4,
            ));
        }
        out.push('\n');
    }
    out.push_str("*** p < 0.001; \u{25C7} p < 0.004; ** p < 0.01; * p < 0.05\n");
    out
}

/// Hypothesis results as CSV, exporting both sidedness conventions.
pub fn battery_to_csv(batteries: &[ModelBattery]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "model",
        "family",
        "prompt",
        "coefficient",
        "estimate",
        "std_error",
        "statistic",
        "df",
        "sidedness",
        "p_value",
        "p_one_sided_greater",
        "p_two_sided",
        "stars",
    ])
    .map_err(|e| AuditError::Inference(e.to_string()))?;
    for battery in batteries {
        for r in &battery.results {
            wtr.write_record([
                r.model.clone(),
                r.family.label().to_string(),
                r.prompt.map(|p| p.key().to_string()).unwrap_or_default(),
                r.coefficient.clone(),
                format!("{:.6}", r.estimate),
                format!("{:.6}", r.std_error),
                format!("{:.6}", r.statistic),
                format!("{:.1}", r.df),
                match r.sidedness {
                    Sidedness::OneSidedGreater => "one_sided_greater".to_string(),
                    Sidedness::TwoSided => "two_sided".to_string(),
                },
                format!("{:.6e}", r.p_value),
                format!("{:.6e}", r.p_one_sided_greater),
                format!("{:.6e}", r.p_two_sided),
                stars(r.p_value).to_string(),
            ])
            .map_err(|e| AuditError::Inference(e.to_string()))?;
        }
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| AuditError::Inference(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn simulate_basic(
        seed: u64,
        groups: usize,
        levels: u8,
        a0: f64,
        a1: f64,
        sigma_u: f64,
        sigma_e: f64,
    ) -> LmmDesign {
        let mut r = rng::stream(seed, "test/inference/sim");
        let mut response = Vec::new();
        let mut fixed = Vec::new();
        let mut grp = Vec::new();
        for k in 0..groups {
            let u = sigma_u * rng::standard_normal(&mut r);
            for t in 1..=levels {
                let e = sigma_e * rng::standard_normal(&mut r);
                response.push(a0 + a1 * t as f64 + u + e);
                fixed.push(vec![1.0, t as f64]);
                grp.push(k as u32);
            }
        }
        LmmDesign {
            response,
            fixed,
            columns: vec!["intercept".into(), "t".into()],
            groups: grp,
            form: LmmForm::Basic {
                model: "sim".into(),
                prompt: PromptStyle::Neutral,
            },
            dropped_rows: 0,
        }
    }

    /// Plain least squares on a two-column design, via closed-form 2×2
    /// normal equations — an oracle independent of the REML path.
    fn ols_two_col(design: &LmmDesign) -> (f64, f64) {
        let n = design.response.len() as f64;
        let (mut st, mut stt, mut sy, mut sty) = (0.0, 0.0, 0.0, 0.0);
        for (row, &y) in design.fixed.iter().zip(&design.response) {
            st += row[1];
            stt += row[1] * row[1];
            sy += y;
            sty += row[1] * y;
        }
        let det = n * stt - st * st;
        let b0 = (stt * sy - st * sty) / det;
        let b1 = (n * sty - st * sy) / det;
        (b0, b1)
    }

    #[test]
    fn zero_variance_ratio_matches_ols() {
        let design = simulate_basic(7, 40, 10, 1.0, 0.2, 0.0, 1.0);
        let fit = fit_reml(&design).unwrap();
        let (b0, b1) = ols_two_col(&design);
        assert!(fit.sigma_u2 < 1e-4, "sigma_u2 = {}", fit.sigma_u2);
        assert!((fit.fixed_estimates[0] - b0).abs() < 1e-6);
        assert!((fit.fixed_estimates[1] - b1).abs() < 1e-6);
    }

    #[test]
    fn balanced_anova_method_of_moments() {
        // Intercept-only balanced design: REML variance components equal the
        // one-way ANOVA moment estimators when interior.
        let groups = 30usize;
        let reps = 8usize;
        let mut r = rng::stream(11, "test/inference/anova");
        let mut response = Vec::new();
        let mut grp = Vec::new();
        for k in 0..groups {
            let u = 0.9 * rng::standard_normal(&mut r);
            for _ in 0..reps {
                response.push(3.0 + u + 0.7 * rng::standard_normal(&mut r));
                grp.push(k as u32);
            }
        }
        let design = LmmDesign {
            fixed: vec![vec![1.0]; response.len()],
            columns: vec!["intercept".into()],
            groups: grp,
            form: LmmForm::Basic {
                model: "sim".into(),
                prompt: PromptStyle::Neutral,
            },
            dropped_rows: 0,
            response,
        };
        // closed-form ANOVA oracle
        let n = design.response.len() as f64;
        let grand = design.response.iter().sum::<f64>() / n;
        let mut group_means = vec![0.0; groups];
        for (i, &y) in design.response.iter().enumerate() {
            group_means[i / reps] += y / reps as f64;
        }
        let msb = reps as f64
            * group_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
            / (groups as f64 - 1.0);
        let msw = design
            .response
            .iter()
            .enumerate()
            .map(|(i, &y)| (y - group_means[i / reps]).powi(2))
            .sum::<f64>()
            / (n - groups as f64);
        let sigma_u2_mom = (msb - msw) / reps as f64;
        assert!(sigma_u2_mom > 0.0, "oracle not interior for this seed");

        let fit = fit_reml(&design).unwrap();
        assert!((fit.sigma_e2 - msw).abs() < 1e-6, "{} vs {}", fit.sigma_e2, msw);
        assert!(
            (fit.sigma_u2 - sigma_u2_mom).abs() < 1e-6,
            "{} vs {}",
            fit.sigma_u2,
            sigma_u2_mom
        );
    }

    #[test]
    fn monte_carlo_slope_recovery() {
        let mut sum = 0.0;
        for rep in 0..100u64 {
            let design = simulate_basic(1000 + rep, 50, 10, 1.0, 0.2, 0.5, 1.0);
            let fit = fit_reml(&design).unwrap();
            sum += fit.fixed_estimates[1];
        }
        let mean = sum / 100.0;
        assert!((mean - 0.2).abs() < 0.02, "mean recovered slope {mean}");
    }

    #[test]
    fn criterion_is_local_minimum_at_optimum() {
        let design = simulate_basic(3, 50, 10, 1.0, 0.1, 0.8, 1.0);
        let fit = fit_reml(&design).unwrap();
        assert!(fit.sigma_u2 > 0.0, "expected interior optimum");
        let suff = Sufficient::build(&design);
        let theta = fit.sigma_u2 / fit.sigma_e2;
        let at = |th: f64| profile_theta(&suff, th).unwrap().criterion;
        let f0 = at(theta);
        let bump = (10.0 * LOG_THETA_TOL).exp();
        assert!(at(theta * bump) >= f0 - 1e-9);
        assert!(at(theta / bump) >= f0 - 1e-9);
    }

    #[test]
    fn equivariance_under_response_scaling() {
        let design = simulate_basic(5, 30, 10, 1.0, 0.15, 0.5, 1.0);
        let fit = fit_reml(&design).unwrap();
        let t1 = wald_test(
            &fit,
            1,
            Sidedness::TwoSided,
            HypothesisFamily::H1,
            "m",
            None,
        )
        .unwrap();

        let c = 3.7;
        let mut scaled = design.clone();
        for y in &mut scaled.response {
            *y *= c;
        }
        let fit2 = fit_reml(&scaled).unwrap();
        let t2 = wald_test(
            &fit2,
            1,
            Sidedness::TwoSided,
            HypothesisFamily::H1,
            "m",
            None,
        )
        .unwrap();
        // θ̂ matches between the two fits only to the optimizer's log-θ
        // tolerance, so the comparisons carry that tolerance too.
        assert!((fit2.fixed_estimates[1] - c * fit.fixed_estimates[1]).abs() < 1e-6);
        assert!((t2.std_error - c * t1.std_error).abs() < 1e-6);
        assert!((t2.statistic - t1.statistic).abs() < 1e-6);
        assert!((t2.p_value - t1.p_value).abs() < 1e-8);
    }

    #[test]
    fn permutation_invariance() {
        let design = simulate_basic(9, 25, 10, 0.5, 0.1, 0.6, 1.0);
        let fit = fit_reml(&design).unwrap();

        let n = design.response.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(9, "test/inference/shuffle");
        for i in (1..n).rev() {
            let j = r.gen_range(0..=i);
            order.swap(i, j);
        }
        let shuffled = LmmDesign {
            response: order.iter().map(|&i| design.response[i]).collect(),
            fixed: order.iter().map(|&i| design.fixed[i].clone()).collect(),
            groups: order.iter().map(|&i| design.groups[i]).collect(),
            columns: design.columns.clone(),
            form: design.form.clone(),
            dropped_rows: 0,
        };
        let fit2 = fit_reml(&shuffled).unwrap();
        assert!((fit.fixed_estimates[1] - fit2.fixed_estimates[1]).abs() < 1e-10);
        assert!((fit.sigma_u2 - fit2.sigma_u2).abs() < 1e-10);
        assert!((fit.sigma_e2 - fit2.sigma_e2).abs() < 1e-10);
        assert!((fit.reml_loglik - fit2.reml_loglik).abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_names_the_column() {
        let mut design = simulate_basic(13, 10, 5, 1.0, 0.1, 0.3, 1.0);
        design.columns.push("t_copy".into());
        for row in &mut design.fixed {
            let t = row[1];
            row.push(t);
        }
        match fit_reml(&design) {
            Err(AuditError::RankDeficient(col)) => assert_eq!(col, "t_copy"),
            other => panic!("expected rank-deficiency error, got {other:?}"),
        }
    }

    #[test]
    fn wald_trivial_cases() {
        let fit = LmmFit {
            columns: vec!["intercept".into(), "t".into()],
            fixed_estimates: vec![0.0, 0.5],
            sigma_u2: 0.0,
            sigma_e2: 1.0,
            covariance: vec![vec![0.04, 0.0], vec![0.0, 0.01]],
            reml_loglik: 0.0,
            converged: true,
            n_rows: 102,
            n_groups: 10,
            df: 100.0,
            dropped_rows: 0,
        };
        let zero = wald_test(&fit, 0, Sidedness::TwoSided, HypothesisFamily::H3, "m", None)
            .unwrap();
        assert!((zero.p_value - 1.0).abs() < 1e-12);

        let pos = wald_test(
            &fit,
            1,
            Sidedness::OneSidedGreater,
            HypothesisFamily::H1,
            "m",
            None,
        )
        .unwrap();
        // tail complement: one-sided-greater + one-sided-lesser = 1
        let lesser = 1.0 - pos.p_one_sided_greater;
        assert!((pos.p_one_sided_greater + lesser - 1.0).abs() < 1e-12);
        assert!(pos.p_one_sided_greater < 0.5);
        assert!((pos.p_two_sided - 2.0 * pos.p_one_sided_greater).abs() < 1e-12);
    }

    #[test]
    fn null_calibration_within_binomial_band() {
        // β₁ = 0 generator: the two-sided rejection rate at α = 0.05 must sit
        // inside the exact binomial 95% band over 200 replications.
        use statrs::distribution::{Binomial, DiscreteCDF};
        let mut rejections = 0u64;
        let reps = 200u64;
        for rep in 0..reps {
            let design = simulate_basic(5000 + rep, 30, 10, 1.0, 0.0, 0.5, 1.0);
            let fit = fit_reml(&design).unwrap();
            let t = wald_test(
                &fit,
                1,
                Sidedness::TwoSided,
                HypothesisFamily::H1,
                "m",
                None,
            )
            .unwrap();
            if t.p_value < 0.05 {
                rejections += 1;
            }
        }
        let dist = Binomial::new(0.05, reps).unwrap();
        let lo = dist.inverse_cdf(0.025);
        let hi = dist.inverse_cdf(0.975);
        assert!(
            rejections >= lo && rejections <= hi,
            "rejections {rejections} outside [{lo}, {hi}]"
        );
    }

    fn synthetic_records(
        seed: u64,
        slope: f64,
        level_shift: &dyn Fn(PromptStyle) -> f64,
    ) -> Vec<InstabilityRecord> {
        let mut r = rng::stream(seed, "test/inference/records");
        let mut out = Vec::new();
        for patient in 0..40u32 {
            let u = 0.3 * rng::standard_normal(&mut r);
            for style in PromptStyle::ALL {
                for t in 0..=10u8 {
                    let delta = if t == 0 {
                        None
                    } else {
                        Some(
                            (0.4 + slope * t as f64 + level_shift(style) + u
                                + 0.3 * rng::standard_normal(&mut r))
                            .abs(),
                        )
                    };
                    out.push(InstabilityRecord {
                        model: "mock-model".into(),
                        prompt: style,
                        patient_id: patient,
                        t,
                        mean_risk: 5.0,
                        delta,
                        n_valid_reps: 5,
                        rep_sd: 0.1,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn battery_has_exactly_eleven_results() {
        let records = synthetic_records(21, 0.1, &|_| 0.0);
        let battery = run_hypothesis_battery(&records, "mock-model").unwrap();
        assert_eq!(battery.results.len(), BATTERY_SIZE);
        let count = |f: HypothesisFamily| battery.results.iter().filter(|r| r.family == f).count();
        assert_eq!(count(HypothesisFamily::H1), 4);
        assert_eq!(count(HypothesisFamily::H2), 1);
        assert_eq!(count(HypothesisFamily::H3), 3);
        assert_eq!(count(HypothesisFamily::H4), 3);
        assert_eq!(battery.basic_fits.len(), 4);
        assert_eq!(battery.complex_fit.columns.len(), 8);
    }

    #[test]
    fn missing_stratum_names_the_gap() {
        let records: Vec<InstabilityRecord> = synthetic_records(22, 0.1, &|_| 0.0)
            .into_iter()
            .filter(|r| r.prompt != PromptStyle::Logical)
            .collect();
        match run_hypothesis_battery(&records, "mock-model") {
            Err(AuditError::Inference(msg)) => {
                assert!(msg.contains("logical"), "{msg}");
                assert!(msg.contains("mock-model"), "{msg}");
            }
            other => panic!("expected inference error, got {other:?}"),
        }
    }

    #[test]
    fn star_legend_fixtures() {
        assert_eq!(stars(0.0005), "***");
        assert_eq!(stars(0.002), "\u{25C7}");
        assert_eq!(stars(0.0044), "\u{25C7}");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.03), "*");
        assert_eq!(stars(0.2), "");
        assert!((ALPHA_CORR - 0.004545454545454546).abs() < 1e-15);
    }

    #[test]
    fn table_marks_neutral_reference() {
        let records = synthetic_records(23, 0.1, &|_| 0.0);
        let battery = run_hypothesis_battery(&records, "mock-model").unwrap();
        let table = format_battery_table(&[battery]);
        let neutral_row = table
            .lines()
            .find(|l| l.contains("Neutral"))
            .expect("neutral row present");
        assert_eq!(neutral_row.matches('\u{2014}').count(), 2, "{neutral_row}");
        assert!(table.contains("0.05/11"));
        assert!(table.contains("*** p < 0.001; \u{25C7} p < 0.004; ** p < 0.01; * p < 0.05"));
    }
}
