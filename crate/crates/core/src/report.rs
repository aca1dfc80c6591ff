//! Comparison tables and chart data over measured reports and published
//! baseline fixtures.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evaluate::{
    rank_rows, render_grid, ComparisonRow, ComparisonTable, Metric, MetricValues, TABLE_COLUMNS,
};

const BUNDLED_BASELINES: &str = include_str!("../fixtures/baselines.json");

/// Display precision for every number in tables and chart data.
pub const DECIMALS: i32 = 4;

/// Tolerance for flagging an F-score that is not the harmonic mean of the
/// shown precision and recall (four-decimal rounding allows ~5e-5).
const F1_CONSISTENCY_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("cannot read baselines {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid baselines file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("baseline {name}: {field} = {value} is outside [0, 1]")]
    OutOfRange {
        name: String,
        field: &'static str,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineFixture {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citation: Option<String>,
}

impl BaselineFixture {
    pub fn validate(&self) -> Result<(), ReportError> {
        for (field, v) in [
            ("auc", self.auc),
            ("accuracy", self.accuracy),
            ("f1", self.f1),
        ] {
            if let Some(value) = v.filter(|v| !(0.0..=1.0).contains(v)) {
                return Err(ReportError::OutOfRange {
                    name: self.name.clone(),
                    field,
                    value,
                });
            }
        }
        Ok(())
    }

    fn values(&self) -> SeriesValues {
        SeriesValues {
            auc: self.auc.map(round4),
            precision: None,
            recall: None,
            accuracy: self.accuracy.map(round4),
            f1: self.f1.map(round4),
        }
    }
}

#[derive(Debug, Deserialize)]
struct BaselineFile {
    #[allow(dead_code)]
    version: u32,
    #[allow(dead_code)]
    #[serde(default)]
    description: String,
    baselines: Vec<BaselineFixture>,
}

pub fn parse_baselines(text: &str) -> Result<Vec<BaselineFixture>, ReportError> {
    let file: BaselineFile = serde_json::from_str(text)?;
    for b in &file.baselines {
        b.validate()?;
    }
    Ok(file.baselines)
}

/// The baseline set shipped with the crate.
pub fn bundled_baselines() -> Vec<BaselineFixture> {
    parse_baselines(BUNDLED_BASELINES).expect("bundled baselines are valid")
}

pub fn load_baselines(path: &Path) -> Result<Vec<BaselineFixture>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_baselines(&text)
}

pub fn round4(v: f64) -> f64 {
    let scale = 10f64.powi(DECIMALS);
    (v * scale).round() / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    Measured,
    Fixture,
}

/// Rounded values of one series; `None` renders blank / `null`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SeriesValues {
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

impl SeriesValues {
    fn from_metrics(m: &MetricValues) -> Self {
        let r = |m: Metric| m.value().map(round4);
        Self {
            auc: r(m.auc),
            precision: r(m.precision),
            recall: r(m.recall),
            accuracy: r(m.accuracy),
            f1: r(m.f1),
        }
    }

    fn get(&self, metric: ChartMetric) -> Option<f64> {
        match metric {
            ChartMetric::Auc => self.auc,
            ChartMetric::Precision => self.precision,
            ChartMetric::Recall => self.recall,
            ChartMetric::Accuracy => self.accuracy,
            ChartMetric::F1 => self.f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartMetric {
    Auc,
    Precision,
    Recall,
    Accuracy,
    F1,
}

impl ChartMetric {
    pub const ALL: [ChartMetric; 5] = [
        Self::Auc,
        Self::Precision,
        Self::Recall,
        Self::Accuracy,
        Self::F1,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Auc => "AUC",
            Self::Precision => "Precision",
            Self::Recall => "Recall",
            Self::Accuracy => "Accuracy",
            Self::F1 => "F-score",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSeries {
    pub name: String,
    pub kind: SeriesKind,
    pub values: SeriesValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartBar {
    pub name: String,
    pub kind: SeriesKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartGroup {
    pub metric: ChartMetric,
    pub label: String,
    pub bars: Vec<ChartBar>,
}

/// Bar-chart data: one series per row, and the same numbers grouped per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartData {
    pub series: Vec<ChartSeries>,
    pub groups: Vec<ChartGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Measured rows, ranked.
    pub table: ComparisonTable,
    pub fixtures: Vec<BaselineFixture>,
    pub notes: Vec<String>,
    pub chart: ChartData,
}

/// Ranks measured reports (AUC, then F1, descending; undefined last),
/// appends fixtures, and derives chart data plus consistency notes.
pub fn render_comparison(
    reports: &[(String, MetricValues)],
    fixtures: &[BaselineFixture],
) -> Comparison {
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|(model, metrics)| ComparisonRow {
            model: model.clone(),
            metrics: *metrics,
        })
        .collect();
    rank_rows(&mut rows);
    let mut series: Vec<ChartSeries> = rows
        .iter()
        .map(|r| ChartSeries {
            name: r.model.clone(),
            kind: SeriesKind::Measured,
            values: SeriesValues::from_metrics(&r.metrics),
        })
        .collect();
    series.extend(fixtures.iter().map(|f| ChartSeries {
        name: f.name.clone(),
        kind: SeriesKind::Fixture,
        values: f.values(),
    }));
    let groups = ChartMetric::ALL
        .iter()
        .map(|&metric| ChartGroup {
            metric,
            label: metric.label().to_string(),
            bars: series
                .iter()
                .filter_map(|s| {
                    s.values.get(metric).map(|value| ChartBar {
                        name: s.name.clone(),
                        kind: s.kind,
                        value,
                    })
                })
                .collect(),
        })
        .filter(|g| !g.bars.is_empty())
        .collect();
    let notes = series.iter().filter_map(f1_note).collect();
    Comparison {
        table: ComparisonTable { rows },
        fixtures: fixtures.to_vec(),
        notes,
        chart: ChartData { series, groups },
    }
}

fn f1_note(s: &ChartSeries) -> Option<String> {
    let v = &s.values;
    let (p, r, f1) = (v.precision?, v.recall?, v.f1?);
    if p + r <= 0.0 {
        return None;
    }
    let harmonic = 2.0 * p * r / (p + r);
    ((f1 - harmonic).abs() > F1_CONSISTENCY_TOL).then(|| {
        format!(
            "{}: F-score {f1:.4} is not the harmonic mean of precision {p:.4} and recall {r:.4} ({harmonic:.4})",
            s.name
        )
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl Comparison {
    /// Plain-text report: ranked measured table, fixture table, notes.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if !self.table.rows.is_empty() {
            out.push_str(&self.table.render_text());
        }
        if !self.fixtures.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str("Published baselines (fixtures, display only)\n");
            let rows: Vec<[String; 6]> = self
                .chart
                .series
                .iter()
                .filter(|s| s.kind == SeriesKind::Fixture)
                .map(|s| {
                    let v = &s.values;
                    [
                        s.name.clone(),
                        cell(v.auc),
                        cell(v.precision),
                        cell(v.recall),
                        cell(v.accuracy),
                        cell(v.f1),
                    ]
                })
                .collect();
            out.push_str(&render_grid(&TABLE_COLUMNS.map(String::from), &rows));
            for f in self.fixtures.iter().filter(|f| f.citation.is_some()) {
                let _ = writeln!(
                    out,
                    "  {}: {}",
                    f.name,
                    f.citation.as_deref().unwrap_or_default()
                );
            }
        }
        if !self.notes.is_empty() {
            out.push_str("\nNotes\n");
            for n in &self.notes {
                let _ = writeln!(out, "  - {n}");
            }
        }
        out
    }
}

const SVG_PALETTE: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#7f7f7f",
];

/// Grouped bar chart, one group per metric; fixture bars are hatched-light.
pub fn render_svg(chart: &ChartData) -> String {
    let (bar_w, gap, group_gap, plot_h, top, left) = (18.0, 2.0, 28.0, 240.0, 30.0, 50.0);
    let n_series = chart.series.len().max(1);
    let group_w = n_series as f64 * (bar_w + gap) + group_gap;
    let legend_h = 18.0 * chart.series.len() as f64;
    let width = left + group_w * chart.groups.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 40.0 + legend_h + 10.0;
    let y = |v: f64| top + plot_h * (1.0 - v);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{x2:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{v:.1}</text>"##,
            yy = y(v),
            x2 = width - 20.0,
            tx = left - 6.0,
            ty = y(v) + 4.0
        );
    }
    let color = |name: &str| {
        let i = chart
            .series
            .iter()
            .position(|c| c.name == name)
            .unwrap_or(0);
        SVG_PALETTE[i % SVG_PALETTE.len()]
    };
    for (gi, g) in chart.groups.iter().enumerate() {
        let x0 = left + group_gap / 2.0 + gi as f64 * group_w;
        for (bi, b) in g.bars.iter().enumerate() {
            let x = x0 + bi as f64 * (bar_w + gap);
            let opacity = if b.kind == SeriesKind::Fixture {
                0.45
            } else {
                1.0
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{yy:.1}" width="{bar_w}" height="{h:.1}" fill="{c}" fill-opacity="{opacity}"><title>{name}: {v:.4}</title></rect>"#,
                yy = y(b.value),
                h = plot_h * b.value,
                c = color(&b.name),
                name = xml_escape(&b.name),
                v = b.value
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="middle">{label}</text>"#,
            cx = x0 + g.bars.len() as f64 * (bar_w + gap) / 2.0,
            ly = top + plot_h + 16.0,
            label = xml_escape(&g.label)
        );
    }
    for (i, sr) in chart.series.iter().enumerate() {
        let ly = top + plot_h + 36.0 + 18.0 * i as f64;
        let opacity = if sr.kind == SeriesKind::Fixture {
            0.45
        } else {
            1.0
        };
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{ry:.1}" width="12" height="12" fill="{c}" fill-opacity="{opacity}"/><text x="{tx}" y="{ty:.1}">{name} ({kind})</text>"#,
            ry = ly - 10.0,
            c = color(&sr.name),
            tx = left + 18.0,
            ty = ly,
            name = xml_escape(&sr.name),
            kind = match sr.kind {
                SeriesKind::Measured => "measured",
                SeriesKind::Fixture => "fixture",
            }
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(auc: f64, f1: f64) -> MetricValues {
        MetricValues {
            auc: Metric::Defined(auc),
            precision: Metric::Defined(0.5),
            recall: Metric::Defined(0.5),
            accuracy: Metric::Defined(0.5),
            f1: Metric::Defined(f1),
        }
    }

    #[test]
    fn bundled_baselines_parse() {
        let b = bundled_baselines();
        assert_eq!(b.len(), 2);
        assert_eq!(
            (b[0].auc, b[0].accuracy, b[0].f1),
            (Some(0.96), Some(0.92), Some(0.94))
        );
        assert_eq!(
            (b[1].auc, b[1].accuracy, b[1].f1),
            (Some(0.92), Some(0.89), None)
        );
    }

    #[test]
    fn out_of_range_fixture_is_rejected() {
        let text = r#"{"version": 1, "baselines": [{"name": "x", "auc": 1.2}]}"#;
        assert!(matches!(
            parse_baselines(text),
            Err(ReportError::OutOfRange { field: "auc", .. })
        ));
    }

    #[test]
    fn fixtures_only_table() {
        let c = render_comparison(&[], &bundled_baselines());
        assert!(c.table.rows.is_empty());
        assert_eq!(c.chart.series.len(), 2);
        assert!(c.chart.series.iter().all(|s| s.kind == SeriesKind::Fixture));
        let text = c.render_text();
        assert!(!text.contains("ConvNeXT"));
        assert!(text.contains("0.9600"));
    }

    #[test]
    fn fixture_missing_values_render_blank() {
        let f = BaselineFixture {
            name: "auc only".into(),
            auc: Some(0.8),
            accuracy: None,
            f1: None,
            citation: None,
        };
        let c = render_comparison(&[], &[f]);
        let text = c.render_text();
        let row = text.lines().find(|l| l.starts_with("auc only")).unwrap();
        assert_eq!(
            row.split_whitespace().collect::<Vec<_>>(),
            ["auc", "only", "0.8000"]
        );
        assert_eq!(c.chart.groups.len(), 1);
        assert_eq!(c.chart.groups[0].metric, ChartMetric::Auc);
    }

    #[test]
    fn undefined_auc_sorts_last_without_error() {
        let mut undefined = values(0.5, 0.5);
        undefined.auc = Metric::Undefined;
        let c = render_comparison(
            &[("u".into(), undefined), ("a".into(), values(0.7, 0.1))],
            &[],
        );
        assert_eq!(c.table.rows[0].model, "a");
        assert_eq!(c.chart.series[1].values.auc, None);
    }

    #[test]
    fn inconsistent_f1_is_noted() {
        let mut v = values(0.9, 0.5);
        v.f1 = Metric::Defined(0.6);
        let c = render_comparison(&[("m".into(), v), ("ok".into(), values(0.8, 0.5))], &[]);
        assert_eq!(c.notes.len(), 1);
        assert!(c.notes[0].starts_with("m: F-score 0.6000"));
        assert!(c.notes[0].ends_with("(0.5000)"));
    }

    #[test]
    fn svg_has_one_bar_per_value() {
        let c = render_comparison(&[("m".into(), values(0.9, 0.5))], &bundled_baselines());
        let svg = render_svg(&c.chart);
        let bars: usize = c.chart.groups.iter().map(|g| g.bars.len()).sum();
        assert_eq!(svg.matches("<title>").count(), bars);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
