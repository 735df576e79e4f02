use std::collections::HashSet;

use super::{MetricsReport, SynthesisSource};
use crate::error::{Error, Result};

/// Reference full-scale values, by row label: (label, dice, iou).
pub const REFERENCE_ARRANGEMENTS: [(&str, f64, f64); 6] = [
    ("Real only (350)", 0.9459, 0.8974),
    ("Combined (704)", 0.9467, 0.8989),
    ("Combined (1064)", 0.9524, 0.9091),
    ("Combined (1384)", 0.9485, 0.9020),
    ("Combined (1837)", 0.9475, 0.9002),
    ("Combined (2400)", 0.9505, 0.9058),
];

pub const REFERENCE_ABLATION: [(&str, f64, f64); 2] = [
    ("Real images only (350)", 0.9459, 0.8974),
    ("Combined (1064) Real+Synthetic", 0.9460, 0.8976),
];

const FIRST_COLUMN: &str = "Number of training images (MRI)";

/// Row label of an arrangement: `Real only (N)` or `Combined (N)`.
pub fn arrangement_label(n_real: usize, n_synthetic: usize) -> String {
    if n_synthetic == 0 {
        format!("Real only ({n_real})")
    } else {
        format!("Combined ({})", n_real + n_synthetic)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tables {
    pub arrangements_csv: String,
    pub arrangements_text: String,
    /// Present when at least one report comes from a plain cycle GAN.
    pub ablation_csv: Option<String>,
    pub ablation_text: Option<String>,
}

struct Row {
    label: String,
    dice: f64,
    iou: f64,
    reference: Option<(f64, f64)>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn to_csv(rows: &[Row]) -> String {
    let mut out = format!("{},Dice,IoU\n", csv_field(FIRST_COLUMN));
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4}\n", csv_field(&r.label), r.dice, r.iou));
    }
    out
}

fn to_text(rows: &[Row]) -> String {
    let with_ref = rows.iter().any(|r| r.reference.is_some());
    let mut header = vec![FIRST_COLUMN.to_string(), "Dice".into(), "IoU".into()];
    if with_ref {
        header.extend(["Reference Dice".to_string(), "Reference IoU".to_string()]);
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.label.clone(), format!("{:.4}", r.dice), format!("{:.4}", r.iou)];
            if with_ref {
                match r.reference {
                    Some((d, i)) => cells.extend([format!("{d:.4}"), format!("{i:.4}")]),
                    None => cells.extend(["-".to_string(), "-".to_string()]),
                }
            }
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
    }
    out
}

fn reference(table: &[(&str, f64, f64)], label: &str) -> Option<(f64, f64)> {
    table.iter().find(|(l, _, _)| *l == label).map(|&(_, d, i)| (d, i))
}

fn check_unique(rows: &[Row], table: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for r in rows {
        if !seen.insert(r.label.as_str()) {
            return Err(Error::Evaluation(format!("duplicate arrangement `{}` in {table}", r.label)));
        }
    }
    Ok(())
}

fn label_of(r: &MetricsReport) -> String {
    if r.arrangement.is_empty() {
        arrangement_label(r.n_real, r.n_synthetic)
    } else {
        r.arrangement.clone()
    }
}

/// Builds the arrangement table (every report not from a plain cycle GAN,
/// ordered by training-set size) and, when cycle-GAN reports exist, the
/// ablation table pairing them with the real-only rows.
pub fn reproduce_tables(reports: &[MetricsReport]) -> Result<Tables> {
    if reports.is_empty() {
        return Err(Error::Evaluation("no reports to tabulate".into()));
    }
    let mut main: Vec<&MetricsReport> = reports
        .iter()
        .filter(|r| r.synthesis != SynthesisSource::Cyclegan)
        .collect();
    main.sort_by_key(|r| (r.n_synthetic > 0, r.n_real + r.n_synthetic));
    let arrangement_rows: Vec<Row> = main
        .iter()
        .map(|r| {
            let label = label_of(r);
            Row {
                reference: reference(&REFERENCE_ARRANGEMENTS, &label),
                label,
                dice: r.dice,
                iou: r.iou,
            }
        })
        .collect();
    check_unique(&arrangement_rows, "the arrangement table")?;

    let ablated: Vec<&MetricsReport> = reports
        .iter()
        .filter(|r| r.synthesis == SynthesisSource::Cyclegan)
        .collect();
    let (ablation_csv, ablation_text) = if ablated.is_empty() {
        (None, None)
    } else {
        let real_only = main.iter().filter(|r| r.n_synthetic == 0);
        let ablation_rows: Vec<Row> = real_only
            .map(|r| (format!("Real images only ({})", r.n_real + r.n_synthetic), *r))
            .chain(
                ablated
                    .iter()
                    .map(|r| (format!("Combined ({}) Real+Synthetic", r.n_real + r.n_synthetic), *r)),
            )
            .map(|(label, r)| Row {
                reference: reference(&REFERENCE_ABLATION, &label),
                label,
                dice: r.dice,
                iou: r.iou,
            })
            .collect();
        check_unique(&ablation_rows, "the ablation table")?;
        (Some(to_csv(&ablation_rows)), Some(to_text(&ablation_rows)))
    };
    Ok(Tables {
        arrangements_csv: if arrangement_rows.is_empty() { format!("{},Dice,IoU\n", csv_field(FIRST_COLUMN)) } else { to_csv(&arrangement_rows) },
        arrangements_text: to_text(&arrangement_rows),
        ablation_csv,
        ablation_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::ConfusionCounts;

    fn report(n_real: usize, n_synth: usize, synthesis: SynthesisSource, dice: f64) -> MetricsReport {
        MetricsReport {
            run_id: "r".into(),
            arrangement: arrangement_label(n_real, n_synth),
            synthesis,
            n_real,
            n_synthetic: n_synth,
            threshold: 0.5,
            dice,
            iou: dice / (2.0 - dice),
            auc: None,
            counts: ConfusionCounts::default(),
            per_image: vec![],
        }
    }

    #[test]
    fn six_arrangements_match_reference_labels() {
        let reports: Vec<MetricsReport> = [0, 354, 714, 1034, 1487, 2050]
            .iter()
            .rev()
            .map(|&n| report(350, n, if n == 0 { SynthesisSource::None } else { SynthesisSource::Essnet }, 0.9))
            .collect();
        let t = reproduce_tables(&reports).unwrap();
        let labels: Vec<&str> = t.arrangements_csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        let expect: Vec<&str> = REFERENCE_ARRANGEMENTS.iter().map(|r| r.0).collect();
        assert_eq!(labels, expect);
        assert!(t.ablation_csv.is_none());
        assert!(t.arrangements_text.contains("Reference Dice"));
    }

    #[test]
    fn single_report_single_row() {
        let t = reproduce_tables(&[report(8, 0, SynthesisSource::None, 0.5)]).unwrap();
        assert_eq!(t.arrangements_csv.lines().count(), 2);
        assert_eq!(t.arrangements_text.lines().count(), 3);
    }

    #[test]
    fn ablation_pair_gives_two_row_table() {
        let t = reproduce_tables(&[
            report(350, 0, SynthesisSource::None, 0.9459),
            report(350, 714, SynthesisSource::Cyclegan, 0.946),
        ])
        .unwrap();
        let csv = t.ablation_csv.unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("Real images only (350),0.9459"));
        assert!(csv.contains("Combined (1064) Real+Synthetic,0.9460"));
    }

    #[test]
    fn duplicates_and_empty_rejected() {
        let r = report(8, 0, SynthesisSource::None, 0.5);
        assert!(reproduce_tables(&[r.clone(), r]).is_err());
        assert!(reproduce_tables(&[]).is_err());
    }
}
