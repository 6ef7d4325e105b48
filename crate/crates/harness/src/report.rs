//! SVG figures from an analysis file: coverage against width per level, and
//! coverage / width against shift level per shift type.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::analyze::Analysis;
use crate::svg::{Plot, Series};
use crate::{write_file, HarnessError, Outcome, Result};

/// Nominal coverage drawn as the reference line.
pub const NOMINAL: f64 = 0.95;

fn slug(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Every figure as (file name, plot), in a fixed order.
pub fn plots(analysis: &Analysis) -> Vec<(String, Plot)> {
    let mut out = Vec::new();
    for level in &analysis.levels {
        let mut by_method: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for p in &level.points {
            by_method.entry(&p.method).or_default().push((p.width, p.coverage));
        }
        out.push((
            format!("coverage_width_{}.svg", slug(&level.level)),
            Plot {
                title: format!("Coverage vs. width, level {}", level.level),
                x_label: "width".into(),
                y_label: "coverage".into(),
                series: by_method
                    .into_iter()
                    .map(|(m, points)| Series {
                        name: m.into(),
                        points,
                        connect: false,
                    })
                    .collect(),
                reference_y: vec![NOMINAL],
                lines: vec![(level.intercept, level.slope)],
            },
        ));
    }
    let mut by_shift: BTreeMap<&str, Vec<&crate::analyze::ShiftSeries>> = BTreeMap::new();
    for s in &analysis.series {
        by_shift.entry(&s.shift).or_default().push(s);
    }
    for (shift, series) in by_shift {
        for (metric, reference) in [("coverage", vec![NOMINAL]), ("width", vec![])] {
            out.push((
                format!("{metric}_{}.svg", slug(shift)),
                Plot {
                    title: format!("{metric} under {shift} shift"),
                    x_label: format!("{shift} level"),
                    y_label: metric.into(),
                    series: series
                        .iter()
                        .map(|s| Series {
                            name: s.method.clone(),
                            points: s
                                .points
                                .iter()
                                .map(|p| (p.level, if metric == "coverage" { p.coverage } else { p.width }))
                                .collect(),
                            connect: true,
                        })
                        .collect(),
                    reference_y: reference,
                    lines: Vec::new(),
                },
            ));
        }
    }
    out
}

pub fn cmd_report(input: &Path, out_dir: &Path) -> Result<Outcome> {
    let text =
        std::fs::read_to_string(input).map_err(|e| HarnessError::Input(format!("{}: {e}", input.display())))?;
    let analysis: Analysis =
        serde_json::from_str(&text).map_err(|e| HarnessError::Input(format!("{}: {e}", input.display())))?;
    let files = plots(&analysis)
        .into_iter()
        .map(|(name, plot)| write_file(&out_dir.join(name), plot.render()))
        .collect::<Result<Vec<PathBuf>>>()?;
    Ok(Outcome {
        files,
        failed_cells: 0,
    })
}
