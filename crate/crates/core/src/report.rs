//! Deterministic report artifacts: per-model instability curves with
//! confidence ribbons, a model × prompt × level heatmap, and a parse-quality
//! appendix. Figures are hand-emitted SVG so identical inputs yield
//! byte-identical files.

use crate::metrics::CurvePoint;
use crate::prompting::PromptStyle;
use crate::provider::{GenerationOutcome, GenerationRecord};
use crate::parsing::ParseMode;
use std::collections::BTreeMap;
use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 56.0;

fn prompt_color(style: PromptStyle) -> &'static str {
    match style {
        PromptStyle::Neutral => "#4878a8",
        PromptStyle::Logical => "#c05040",
        PromptStyle::HumanImpact => "#48a060",
        PromptStyle::ClinicalJudgment => "#9060b0",
    }
}

fn fnum(v: f64) -> String {
    format!("{v:.2}")
}

/// Instability-vs-level curves for one model, one line per prompt with a 95%
/// CI ribbon. Points lacking a CI (single patient) are drawn without a
/// ribbon and called out in the legend.
pub fn curve_svg(model: &str, points: &[CurvePoint]) -> String {
    let pts: Vec<&CurvePoint> = points.iter().filter(|p| p.model == model).collect();
    let t_max = pts.iter().map(|p| p.t).max().unwrap_or(10).max(1) as f64;
    let mut y_max = 0.0f64;
    for p in &pts {
        y_max = y_max.max(p.mean_delta).max(p.ci_high.unwrap_or(p.mean_delta));
    }
    if y_max <= 0.0 {
        y_max = 1.0;
    }
    y_max *= 1.1;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |t: f64| MARGIN_LEFT + plot_w * t / t_max;
    let sy = |d: f64| MARGIN_TOP + plot_h * (1.0 - d / y_max);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    );
    let _ = write!(
        svg,
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n\
         <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">Mean instability with 95% CI — {}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        xml_escape(model)
    );

    // axes and gridlines
    let _ = write!(
        svg,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#333333\"/>\n\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#333333\"/>\n",
        l = MARGIN_LEFT,
        r = MARGIN_LEFT + plot_w,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h
    );
    for i in 0..=(t_max as u32) {
        let x = sx(i as f64);
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            fnum(x),
            fnum(MARGIN_TOP + plot_h + 18.0),
            i
        );
    }
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = sy(v);
        let _ = write!(
            svg,
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{lx}\" y=\"{ty}\" font-size=\"11\" text-anchor=\"end\">{v}</text>\n",
            l = MARGIN_LEFT,
            r = MARGIN_LEFT + plot_w,
            y = fnum(y),
            lx = fnum(MARGIN_LEFT - 8.0),
            ty = fnum(y + 4.0),
            v = fnum(v)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">perturbation level t</text>\n",
        fnum(MARGIN_LEFT + plot_w / 2.0),
        fnum(HEIGHT - 12.0)
    );

    let mut ribbonless = Vec::new();
    for style in PromptStyle::ALL {
        let mut series: Vec<&CurvePoint> = pts.iter().filter(|p| p.prompt == style).copied().collect();
        series.sort_by_key(|p| p.t);
        if series.is_empty() {
            continue;
        }
        let color = prompt_color(style);
        // ribbon over the contiguous points that have a CI
        let with_ci: Vec<&&CurvePoint> = series.iter().filter(|p| p.ci_low.is_some()).collect();
        if with_ci.len() >= 2 {
            let mut d = String::from("M");
            for p in &with_ci {
                let _ = write!(d, " {} {}", fnum(sx(p.t as f64)), fnum(sy(p.ci_high.unwrap().max(0.0))));
            }
            for p in with_ci.iter().rev() {
                let _ = write!(d, " L {} {}", fnum(sx(p.t as f64)), fnum(sy(p.ci_low.unwrap().max(0.0))));
            }
            d.push_str(" Z");
            let _ = write!(
                svg,
                "<path d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n"
            );
        }
        if with_ci.len() < series.len() {
            ribbonless.push(style);
        }
        let mut d = String::new();
        for (i, p) in series.iter().enumerate() {
            let _ = write!(
                d,
                "{}{} {}",
                if i == 0 { "M" } else { " L " },
                fnum(sx(p.t as f64)),
                fnum(sy(p.mean_delta))
            );
        }
        let _ = write!(
            svg,
            "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n"
        );
        for p in &series {
            let _ = write!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                fnum(sx(p.t as f64)),
                fnum(sy(p.mean_delta))
            );
        }
    }

    // legend
    let lx = MARGIN_LEFT + plot_w + 16.0;
    let mut ly = MARGIN_TOP + 8.0;
    for style in PromptStyle::ALL {
        let _ = write!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            fnum(lx),
            fnum(ly),
            prompt_color(style),
            fnum(lx + 18.0),
            fnum(ly + 10.0),
            style.label()
        );
        ly += 20.0;
    }
    if !ribbonless.is_empty() {
        ly += 8.0;
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"#666666\">ribbon omitted (single patient):</text>\n",
            fnum(lx),
            fnum(ly + 10.0)
        );
        ly += 16.0;
        for style in &ribbonless {
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"#666666\">{}</text>\n",
                fnum(lx),
                fnum(ly + 10.0),
                style.label()
            );
            ly += 14.0;
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap of mean instability: one row per (model, prompt), one column per
/// level, colored from white (0) to dark red (maximum).
pub fn heatmap_svg(points: &[CurvePoint]) -> String {
    let mut models: Vec<String> = points.iter().map(|p| p.model.clone()).collect();
    models.sort();
    models.dedup();
    let mut levels: Vec<u8> = points.iter().map(|p| p.t).collect();
    levels.sort_unstable();
    levels.dedup();

    let mut cells: BTreeMap<(String, PromptStyle, u8), f64> = BTreeMap::new();
    let mut v_max = 0.0f64;
    for p in points {
        cells.insert((p.model.clone(), p.prompt, p.t), p.mean_delta);
        v_max = v_max.max(p.mean_delta);
    }
    if v_max <= 0.0 {
        v_max = 1.0;
    }

    let rows: Vec<(String, PromptStyle)> = models
        .iter()
        .flat_map(|m| PromptStyle::ALL.into_iter().map(move |s| (m.clone(), s)))
        .collect();

    let cell_w = 44.0;
    let cell_h = 22.0;
    let left = 240.0;
    let top = 56.0;
    let width = left + cell_w * levels.len() as f64 + 120.0;
    let height = top + cell_h * rows.len() as f64 + 48.0;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>\n\
         <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">Mean instability by model, prompt, and perturbation level</text>\n",
        width / 2.0
    );
    for (j, t) in levels.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">t={}</text>\n",
            fnum(left + cell_w * (j as f64 + 0.5)),
            fnum(top - 8.0),
            t
        );
    }
    for (i, (model, style)) in rows.iter().enumerate() {
        let y = top + cell_h * i as f64;
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{} / {}</text>\n",
            fnum(left - 8.0),
            fnum(y + cell_h / 2.0 + 3.0),
            xml_escape(model),
            style.label()
        );
        for (j, t) in levels.iter().enumerate() {
            let x = left + cell_w * j as f64;
            match cells.get(&(model.clone(), *style, *t)) {
                Some(v) => {
                    let frac = (v / v_max).clamp(0.0, 1.0);
                    let r = 255.0 - 113.0 * frac;
                    let g = 255.0 - 203.0 * frac;
                    let b = 255.0 - 215.0 * frac;
                    let _ = write!(
                        svg,
                        "<rect x=\"{}\" y=\"{}\" width=\"{cell_w}\" height=\"{cell_h}\" \
                         fill=\"rgb({},{},{})\" stroke=\"#cccccc\"/>\n\
                         <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\"{}>{}</text>\n",
                        fnum(x),
                        fnum(y),
                        r.round() as u32,
                        g.round() as u32,
                        b.round() as u32,
                        fnum(x + cell_w / 2.0),
                        fnum(y + cell_h / 2.0 + 3.0),
                        if frac > 0.6 { " fill=\"#ffffff\"" } else { "" },
                        fnum(*v)
                    );
                }
                None => {
                    let _ = write!(
                        svg,
                        "<rect x=\"{}\" y=\"{}\" width=\"{cell_w}\" height=\"{cell_h}\" \
                         fill=\"#f4f4f4\" stroke=\"#cccccc\"/>\n",
                        fnum(x),
                        fnum(y)
                    );
                }
            }
        }
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"#666666\">cell value = mean |Δ| over patients; scale 0 (white) to {} (dark)</text>\n",
        fnum(left),
        fnum(height - 16.0),
        fnum(v_max)
    );
    svg.push_str("</svg>\n");
    svg
}

/// Parse-quality appendix: per (model, prompt) counts by outcome and parse
/// mode, as a CSV-formatted table.
pub fn parse_quality_csv(records: &[GenerationRecord]) -> String {
    #[derive(Default)]
    struct Tally {
        total: usize,
        ok_structured: usize,
        ok_fallback: usize,
        parse_failed: usize,
        refused: usize,
        transport_failed: usize,
        clamped: usize,
        sum_flagged: usize,
    }
    let mut tallies: BTreeMap<(String, PromptStyle), Tally> = BTreeMap::new();
    for r in records {
        let t = tallies.entry((r.model.clone(), r.style)).or_default();
        t.total += 1;
        match r.outcome {
            GenerationOutcome::Ok => match r.parsed.as_ref().map(|p| p.parse_mode) {
                Some(ParseMode::Structured) => t.ok_structured += 1,
                Some(ParseMode::Fallback) => t.ok_fallback += 1,
                None => {}
            },
            GenerationOutcome::ParseFailed => t.parse_failed += 1,
            GenerationOutcome::Refused => t.refused += 1,
            GenerationOutcome::TransportFailed => t.transport_failed += 1,
        }
        if let Some(p) = &r.parsed {
            if p.clamped {
                t.clamped += 1;
            }
            if p.sum_flagged {
                t.sum_flagged += 1;
            }
        }
    }
    let mut out = String::from(
        "model,prompt,total,ok_structured,ok_fallback,parse_failed,refused,transport_failed,clamped,sum_flagged,failure_rate\n",
    );
    for ((model, style), t) in &tallies {
        let failures = t.parse_failed + t.refused + t.transport_failed;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{:.6}",
            model,
            style.key(),
            t.total,
            t.ok_structured,
            t.ok_fallback,
            t.parse_failed,
            t.refused,
            t.transport_failed,
            t.clamped,
            t.sum_flagged,
            failures as f64 / t.total.max(1) as f64
        );
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(model: &str, prompt: PromptStyle, t: u8, delta: f64, n: usize) -> CurvePoint {
        let (lo, hi) = if n >= 2 {
            (Some(delta - 0.2), Some(delta + 0.2))
        } else {
            (None, None)
        };
        CurvePoint {
            model: model.into(),
            prompt,
            t,
            mean_delta: delta,
            ci_low: lo,
            ci_high: hi,
            n_patients: n,
        }
    }

    fn sample_points() -> Vec<CurvePoint> {
        let mut pts = Vec::new();
        for style in PromptStyle::ALL {
            for t in 1..=10u8 {
                pts.push(point("model-a", style, t, 0.1 * t as f64, 10));
            }
        }
        pts
    }

    #[test]
    fn curve_svg_is_deterministic_and_well_formed() {
        let pts = sample_points();
        let a = curve_svg("model-a", &pts);
        let b = curve_svg("model-a", &pts);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<path").count(), 8); // 4 ribbons + 4 lines
        assert!(a.contains("model-a"));
    }

    #[test]
    fn flat_zero_curves_render() {
        let pts: Vec<CurvePoint> = (1..=10u8)
            .map(|t| point("m", PromptStyle::Neutral, t, 0.0, 5))
            .collect();
        let svg = curve_svg("m", &pts);
        assert!(svg.contains("<path"));
        // all points sit on the baseline gridline (y for Δ = 0)
        assert!(svg.contains("cy=\"384.00\""));
    }

    #[test]
    fn single_patient_omits_ribbon_with_note() {
        let pts: Vec<CurvePoint> = (1..=10u8)
            .map(|t| point("m", PromptStyle::Logical, t, 0.3, 1))
            .collect();
        let svg = curve_svg("m", &pts);
        assert_eq!(svg.matches("<path").count(), 1); // line only, no ribbon
        assert!(svg.contains("ribbon omitted (single patient)"));
    }

    #[test]
    fn heatmap_covers_model_prompt_grid() {
        let pts = sample_points();
        let svg = heatmap_svg(&pts);
        assert_eq!(svg.matches("<rect").count(), 1 + 4 * 10); // canvas + cells
        assert!(svg.contains("model-a / Clinical Judgement"));
        assert_eq!(heatmap_svg(&pts), svg);
    }

    #[test]
    fn parse_quality_counts_modes() {
        use crate::parsing::ParsedAssessment;
        let mk = |mode: ParseMode, outcome: GenerationOutcome| GenerationRecord {
            model: "m".into(),
            style: PromptStyle::Neutral,
            patient_id: 0,
            t: 1,
            rep: 0,
            prompt_fingerprint: String::new(),
            prompt_text: String::new(),
            temperature: 1.0,
            raw_response: String::new(),
            outcome,
            attempts: 1,
            requested_at_unix_ms: 0,
            completed_at_unix_ms: 0,
            parsed: (outcome == GenerationOutcome::Ok).then(|| ParsedAssessment {
                score: 5.0,
                attributions: vec![],
                sum_residual: None,
                sum_flagged: false,
                parse_mode: mode,
                clamped: false,
            }),
            failure_reason: None,
        };
        let records = vec![
            mk(ParseMode::Structured, GenerationOutcome::Ok),
            mk(ParseMode::Structured, GenerationOutcome::Ok),
            mk(ParseMode::Fallback, GenerationOutcome::Ok),
            mk(ParseMode::Structured, GenerationOutcome::ParseFailed),
        ];
        let csv = parse_quality_csv(&records);
        assert!(csv.contains("m,neutral,4,2,1,1,0,0,0,0,0.250000"));
    }
}
