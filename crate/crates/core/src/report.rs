//! Evaluation report of a trained run and its figures.
//!
//! Figures are hand-written SVG with every coordinate printed at fixed
//! precision, so the same report always renders to the same bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::action::{ActionTriple, Setting, LEVELS};
use crate::config::EvaluationSettings;
use crate::error::{DacError, Result};
use crate::evaluation::{
    action_histograms, dose_difference, estimated_mortality, return_vs_mortality, wis, CalibrationCurve,
    DoseDifferenceCurve, ReturnCurve, WeightedTrajectory,
};
use crate::experiment::AdaptationPoint;
use crate::model::PreparedPatient;
use crate::nn::argmax;
use crate::pipeline::{
    acc_of, clone_recommendations, dac_recommendations, logged_behavior_probs, oracle_of, recommendation_wis,
    PreparedCohort, Pretrained,
};
use crate::rewards::step_reward;
use crate::synthetic::SyntheticGroundTruth;
use crate::trainer::DacModel;

pub const REPORT_FORMAT: &str = "dac-evaluation";
const RETURN_GROUPS: usize = 10;

/// Headline metrics of one policy on the test folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: String,
    pub em: f64,
    pub wis: f64,
    /// Oracle agreement, known only for simulated cohorts.
    pub acc3: Option<f64>,
    pub acc1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHistogram {
    pub policy: String,
    /// Rows: tidal volume, PEEP, FiO2; columns: levels 1..=7.
    pub levels: [[f64; LEVELS as usize]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseDifference {
    pub policy: String,
    pub setting: String,
    pub curve: DoseDifferenceCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub run_id: String,
    pub config_hash: String,
    pub test_patients: usize,
    pub test_steps: usize,
    pub rows: Vec<PolicyRow>,
    pub histograms: Vec<PolicyHistogram>,
    pub dose_difference: Vec<DoseDifference>,
    /// Fitted on the validation folds from the policy's mortality head.
    pub calibration: CalibrationCurve,
    /// Test mortality by decile of the policy's initial expected return.
    pub return_curve: ReturnCurve,
}

/// Score the policy, the behavior clone and the logged clinician actions on
/// the test folds.
pub fn evaluate_run(
    cohort: &PreparedCohort,
    pre: &Pretrained,
    model: &DacModel,
    truth: Option<&SyntheticGroundTruth>,
    gamma: f64,
    settings: &EvaluationSettings,
) -> Result<EvalReport> {
    let test = cohort.subset(&cohort.test);
    if test.is_empty() {
        return Err(DacError::validation("no test patients to evaluate"));
    }
    let validation = cohort.subset(&cohort.validation);
    let (mut predicted, mut died) = (Vec::new(), Vec::new());
    for p in &validation {
        for (t, out) in model.evaluate(p)?.iter().enumerate() {
            predicted.push(out.mortality[p.actions[t]]);
            died.push(p.outcome == 1);
        }
    }
    let calibration = CalibrationCurve::fit(
        &predicted,
        &died,
        settings.calibration_width,
        settings.calibration_min_count,
    )?;

    let outputs = test.iter().map(|p| model.evaluate(p)).collect::<Result<Vec<_>>>()?;
    let logged: Vec<Vec<usize>> = test.iter().map(|p| p.actions.clone()).collect();
    let policies = [
        ("policy", dac_recommendations(model, &test)?),
        ("clone", clone_recommendations(&pre.clone, &test)?),
        ("clinician", logged.clone()),
    ];
    let behavior = logged_behavior_probs(&pre.clone, &test)?;
    let oracle = truth.map(|t| oracle_of(t, &test)).transpose()?;

    let mut rows = Vec::new();
    let mut histograms = Vec::new();
    for (name, recs) in &policies {
        let risks: Vec<f64> = recs
            .iter()
            .zip(&outputs)
            .flat_map(|(r, o)| r.iter().zip(o).map(|(&a, out)| out.mortality[a]))
            .collect();
        let value = if *name == "clinician" {
            clinician_wis(&test, gamma)?
        } else {
            recommendation_wis(recs, &test, &behavior, gamma)?
        };
        let acc = oracle.as_ref().map(|o| acc_of(recs, o)).transpose()?;
        rows.push(PolicyRow {
            policy: name.to_string(),
            em: estimated_mortality(&risks, &calibration)?,
            wis: value,
            acc3: acc.map(|a| a.0),
            acc1: acc.map(|a| a.1),
        });
        histograms.push(PolicyHistogram {
            policy: name.to_string(),
            levels: action_histograms(&triples(recs)?),
        });
    }

    let actual = triples(&logged)?;
    let step_died: Vec<bool> = test.iter().flat_map(|p| std::iter::repeat(p.outcome == 1).take(p.len())).collect();
    let mut dose = Vec::new();
    for (name, recs) in &policies[..2] {
        let rec = triples(recs)?;
        for (i, setting) in Setting::ALL.iter().enumerate() {
            dose.push(DoseDifference {
                policy: name.to_string(),
                setting: setting.name().to_string(),
                curve: dose_difference(&rec, &actual, &step_died, i)?,
            });
        }
    }

    let initial: Vec<f64> = outputs
        .iter()
        .map(|o| o[0].long_term[argmax(&o[0].policy)])
        .collect();
    let patient_died: Vec<bool> = test.iter().map(|p| p.outcome == 1).collect();
    let return_curve = return_vs_mortality(&initial, &patient_died, RETURN_GROUPS.min(test.len()))?;

    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        run_id: String::new(),
        config_hash: String::new(),
        test_patients: test.len(),
        test_steps: actual.len(),
        rows,
        histograms,
        dose_difference: dose,
        calibration,
        return_curve,
    })
}

/// WIS of the logged actions against themselves: every ratio is exactly one.
fn clinician_wis(patients: &[&PreparedPatient], gamma: f64) -> Result<f64> {
    let trajs = patients
        .iter()
        .map(|p| {
            Ok(WeightedTrajectory {
                ratios: vec![1.0; p.len()],
                rewards: (0..p.len()).map(|t| step_reward(p.outcome, t, p.len())).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    wis(&trajs, gamma)
}

fn triples(recs: &[Vec<usize>]) -> Result<Vec<ActionTriple>> {
    recs.iter().flatten().map(|&a| ActionTriple::from_flat_index(a)).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Plain-text table of the headline metrics.
pub fn headline_table(report: &EvalReport) -> String {
    let mut out = format!(
        "run {}  ({} test patients, {} steps)\n{:<10} {:>7} {:>8} {:>7} {:>7}\n",
        report.run_id, report.test_patients, report.test_steps, "policy", "EM", "WIS", "ACC-3", "ACC-1"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:<10} {:>7.3} {:>8.3} {:>7} {:>7}\n",
            r.policy,
            r.em,
            r.wis,
            cell(r.acc3),
            cell(r.acc1)
        ));
    }
    out
}

// ── figures ─────────────────────────────────────────────────────────────

const PALETTE: [&str; 4] = ["#1b6ca8", "#d1495b", "#66a182", "#edae49"];
const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(panels: usize, provenance: &str) -> Self {
        let width = panels as f64 * (PANEL_W + MARGIN) + MARGIN;
        let height = PANEL_H + 2.5 * MARGIN;
        let mut body = String::new();
        let _ = writeln!(body, "<!-- {} -->", provenance.replace("--", "- -"));
        Self { body, width, height }
    }

    fn text(&mut self, x: f64, y: f64, size: u32, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axes of one panel; maps data coordinates into the panel's pixel box.
struct Panel {
    x0: f64,
    y0: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn new(svg: &mut Svg, index: usize, title: &str, xr: (f64, f64), yr: (f64, f64)) -> Self {
        let x0 = MARGIN + index as f64 * (PANEL_W + MARGIN);
        let y0 = 1.5 * MARGIN;
        let xr = if xr.1 > xr.0 { xr } else { (xr.0 - 1.0, xr.0 + 1.0) };
        let yr = if yr.1 > yr.0 { yr } else { (yr.0 - 1.0, yr.0 + 1.0) };
        let _ = writeln!(
            svg.body,
            r##"<rect x="{x0:.2}" y="{y0:.2}" width="{PANEL_W:.2}" height="{PANEL_H:.2}" fill="none" stroke="#444"/>"##
        );
        svg.text(x0 + PANEL_W / 2.0, y0 - 8.0, 13, "middle", title);
        for (v, anchor_y) in [(yr.0, y0 + PANEL_H), (yr.1, y0 + 10.0)] {
            svg.text(x0 - 4.0, anchor_y, 10, "end", &format!("{v:.2}"));
        }
        for (v, anchor_x) in [(xr.0, x0), (xr.1, x0 + PANEL_W)] {
            svg.text(anchor_x, y0 + PANEL_H + 14.0, 10, "middle", &format!("{v:.2}"));
        }
        Self { x0, y0, xr, yr }
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * PANEL_W
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + PANEL_H - (y - self.yr.0) / (self.yr.1 - self.yr.0) * PANEL_H
    }

    fn polyline(&self, svg: &mut Svg, points: &[(f64, f64)], color: &str, dashed: bool) {
        if points.is_empty() {
            return;
        }
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            svg.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            coords.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(
                svg.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                self.px(x),
                self.py(y)
            );
        }
    }

    fn bar(&self, svg: &mut Svg, x: f64, width: f64, y: f64, color: &str) {
        let top = self.py(y);
        let _ = writeln!(
            svg.body,
            r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            self.px(x),
            self.px(x + width) - self.px(x),
            self.py(self.yr.0) - top
        );
    }
}

fn legend(svg: &mut Svg, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let x = MARGIN + i as f64 * 110.0;
        let y = svg.height - 0.4 * MARGIN;
        let _ = writeln!(
            svg.body,
            r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        svg.text(x + 14.0, y, 11, "start", label);
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Per-setting level histograms of every policy, grouped bars.
pub fn histogram_svg(report: &EvalReport, provenance: &str) -> String {
    let mut svg = Svg::new(3, provenance);
    let n = report.histograms.len().max(1) as f64;
    let ymax = report
        .histograms
        .iter()
        .flat_map(|h| h.levels.iter().flatten().copied())
        .fold(0.0, f64::max)
        .max(1e-9);
    for (i, setting) in Setting::ALL.iter().enumerate() {
        let panel = Panel::new(&mut svg, i, setting.name(), (0.5, 7.5), (0.0, ymax));
        for (j, h) in report.histograms.iter().enumerate() {
            for (l, &mass) in h.levels[i].iter().enumerate() {
                let x = l as f64 + 0.6 + j as f64 * 0.8 / n;
                panel.bar(&mut svg, x, 0.8 / n, mass, PALETTE[j % PALETTE.len()]);
            }
        }
    }
    let labels: Vec<&str> = report.histograms.iter().map(|h| h.policy.as_str()).collect();
    legend(&mut svg, &labels);
    svg.finish()
}

/// Mortality by recommended-minus-actual level difference, per setting.
pub fn dose_svg(report: &EvalReport, provenance: &str) -> String {
    let mut svg = Svg::new(3, provenance);
    let policies: Vec<&str> = {
        let mut p: Vec<&str> = Vec::new();
        for d in &report.dose_difference {
            if !p.contains(&d.policy.as_str()) {
                p.push(&d.policy);
            }
        }
        p
    };
    for (i, setting) in Setting::ALL.iter().enumerate() {
        let panel = Panel::new(&mut svg, i, setting.name(), (-6.0, 6.0), (0.0, 1.0));
        for d in report.dose_difference.iter().filter(|d| d.setting == setting.name()) {
            let j = policies.iter().position(|p| *p == d.policy).unwrap_or(0);
            let points: Vec<(f64, f64)> = d
                .curve
                .offsets
                .iter()
                .zip(&d.curve.mortality)
                .filter_map(|(&o, m)| m.map(|m| (f64::from(o), m)))
                .collect();
            panel.polyline(&mut svg, &points, PALETTE[j % PALETTE.len()], false);
        }
    }
    legend(&mut svg, &policies);
    svg.finish()
}

/// Calibration curve against the identity, and mortality by expected return.
pub fn calibration_svg(report: &EvalReport, provenance: &str) -> String {
    let mut svg = Svg::new(2, provenance);
    let panel = Panel::new(&mut svg, 0, "observed vs predicted mortality", (0.0, 1.0), (0.0, 1.0));
    panel.polyline(&mut svg, &[(0.0, 0.0), (1.0, 1.0)], "#999", true);
    let c = &report.calibration;
    let points: Vec<(f64, f64)> = c.centers.iter().copied().zip(c.rates.iter().copied()).collect();
    panel.polyline(&mut svg, &points, PALETTE[0], false);

    let r = &report.return_curve;
    let panel = Panel::new(
        &mut svg,
        1,
        "mortality by expected return",
        range(r.mean_return.iter().copied()),
        (0.0, 1.0),
    );
    let points: Vec<(f64, f64)> = r.mean_return.iter().copied().zip(r.mortality.iter().copied()).collect();
    panel.polyline(&mut svg, &points, PALETTE[1], false);
    legend(&mut svg, &["calibration", "return curve"]);
    svg.finish()
}

/// Target-cohort WIS of the adapted, zero-shot and scratch policies by fraction.
pub fn adaptation_svg(points: &[AdaptationPoint], provenance: &str) -> String {
    let mut svg = Svg::new(1, provenance);
    let values = points
        .iter()
        .flat_map(|p| [Some(p.adapted), Some(p.zero_shot), p.scratch])
        .flatten();
    let panel = Panel::new(
        &mut svg,
        0,
        "target WIS by training fraction",
        range(points.iter().map(|p| p.fraction)),
        range(values),
    );
    let series: [Vec<(f64, f64)>; 3] = [
        points.iter().map(|p| (p.fraction, p.adapted)).collect(),
        points.iter().map(|p| (p.fraction, p.zero_shot)).collect(),
        points.iter().filter_map(|p| p.scratch.map(|s| (p.fraction, s))).collect(),
    ];
    for (j, s) in series.iter().enumerate() {
        panel.polyline(&mut svg, s, PALETTE[j], j == 1);
    }
    legend(&mut svg, &["adapted", "zero-shot", "scratch"]);
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_report() -> EvalReport {
        EvalReport {
            format: REPORT_FORMAT.into(),
            run_id: "r".into(),
            config_hash: "h".into(),
            test_patients: 2,
            test_steps: 4,
            rows: vec![PolicyRow {
                policy: "policy".into(),
                em: 0.25,
                wis: 1.5,
                acc3: None,
                acc1: Some(0.5),
            }],
            histograms: vec![PolicyHistogram {
                policy: "policy".into(),
                levels: [[1.0 / 7.0; 7]; 3],
            }],
            dose_difference: vec![],
            calibration: CalibrationCurve::from_points(&[(0.1, 0.2), (0.5, 0.6)]).unwrap(),
            return_curve: ReturnCurve {
                mean_return: vec![-1.0, 2.0],
                mortality: vec![0.6, 0.1],
                counts: vec![1, 1],
            },
        }
    }

    #[test]
    fn table_marks_unknown_accuracy() {
        let table = headline_table(&tiny_report());
        assert!(table.contains("policy"));
        assert!(table.lines().nth(2).unwrap().contains(" - "));
        assert!(table.contains("0.500"));
    }

    #[test]
    fn figures_are_deterministic_and_stamped() {
        let r = tiny_report();
        let a = histogram_svg(&r, "run r config h");
        assert_eq!(a, histogram_svg(&r, "run r config h"));
        assert!(a.starts_with("<svg") && a.contains("<!-- run r config h -->"));
        assert!(calibration_svg(&r, "x").contains("polyline"));
    }

    #[test]
    fn provenance_cannot_close_the_comment() {
        let s = histogram_svg(&tiny_report(), "a -- b -->");
        assert_eq!(s.matches("-->").count(), 1);
    }
}
