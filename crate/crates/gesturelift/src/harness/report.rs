//! CSV and Markdown rendering of a [`MetricReport`]. The CSV is the
//! machine-readable artifact and is byte-identical across reruns of the
//! same config and master seed; wall-clock time lives only in the
//! metadata JSON.

use std::path::Path;

use super::{ExperimentConfig, HarnessError, MetricReport, MetricRow, Setting, Space};

pub const CSV_HEADER: &str =
    "setting,space,fgd,bc,diversity,mpjpe,n_diversity,bc_sigma,beat_threshold,encoder_sha,seed";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn render_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{:.6},{},{:.6},{},{},{:.6},{:.6},{},{}\n",
            row.setting.name(),
            row.space.name(),
            row.fgd,
            fmt_opt(row.bc),
            row.diversity,
            fmt_opt(row.mpjpe),
            row.n_diversity,
            row.bc_sigma,
            row.beat_threshold,
            row.encoder_sha,
            row.seed,
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>, HarnessError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::Report("empty CSV".into()))?;
    if header != CSV_HEADER {
        return Err(HarnessError::Report(format!("unexpected CSV header: {header}")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(HarnessError::Report(format!(
                "line {}: expected 11 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let setting = Setting::parse(fields[0])
            .ok_or_else(|| HarnessError::Report(format!("unknown setting `{}`", fields[0])))?;
        let space = match fields[1] {
            "3d" => Space::ThreeD,
            "2d" => Space::TwoD,
            other => return Err(HarnessError::Report(format!("unknown space `{other}`"))),
        };
        let num = |s: &str, name: &str| -> Result<f64, HarnessError> {
            s.parse::<f64>()
                .map_err(|e| HarnessError::Report(format!("bad {name} `{s}`: {e}")))
        };
        let opt = |s: &str, name: &str| -> Result<Option<f64>, HarnessError> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, name).map(Some)
            }
        };
        rows.push(MetricRow {
            setting,
            space,
            fgd: num(fields[2], "fgd")?,
            bc: opt(fields[3], "bc")?,
            diversity: num(fields[4], "diversity")?,
            mpjpe: opt(fields[5], "mpjpe")?,
            n_diversity: fields[6]
                .parse()
                .map_err(|e| HarnessError::Report(format!("bad n_diversity: {e}")))?,
            bc_sigma: num(fields[7], "bc_sigma")?,
            beat_threshold: num(fields[8], "beat_threshold")?,
            encoder_sha: fields[9].to_string(),
            seed: fields[10]
                .parse()
                .map_err(|e| HarnessError::Report(format!("bad seed: {e}")))?,
        });
    }
    Ok(rows)
}

/// Published full-scale reference results on TED Gesture-3D, shown as
/// context in report footnotes. They are not desk-scale targets.
const REFERENCE_ROWS: &[(&str, &str, &str, &str)] = &[
    ("Ground Truth 3D", "0", "0.702", "102.339"),
    ("DiffGesture 3D", "1.370", "0.659", "102.586"),
    ("DiffGesture 2D + VP3D", "9.833", "0.571", "92.136"),
    ("Ground Truth 2D", "0", "0.689", "112.76"),
    ("DiffGesture 3D->2D", "1.722", "0.645", "110.649"),
    ("DiffGesture 2D", "3.279", "0.643", "112.165"),
    ("Uncond. DiffGesture 3D", "3.288", "0.683", "98.905"),
    ("Uncond. DiffGesture 2D + VP3D", "10.009", "0.595", "93.945"),
    ("Uncond. DiffGesture 3D->2D", "5.529", "0.667", "111.599"),
    ("Uncond. DiffGesture 2D", "1.757", "0.653", "113.304"),
];

fn md_metric_cell(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.3}"))
}

fn md_block(out: &mut String, title: &str, rows: &[&MetricRow]) {
    if rows.is_empty() {
        return;
    }
    out.push_str(&format!("## {title}\n\n"));
    out.push_str("| Setting | FGD ↓ | BC ↑ | Diversity ↑ | MPJPE |\n");
    out.push_str("|---|---|---|---|---|\n");
    for row in rows {
        out.push_str(&format!(
            "| {} | {:.3} | {} | {:.3} | {} |\n",
            row.setting.display_name(),
            row.fgd,
            md_metric_cell(row.bc),
            row.diversity,
            md_metric_cell(row.mpjpe),
        ));
    }
    out.push('\n');
}

pub fn render_markdown(report: &MetricReport, config: &ExperimentConfig) -> String {
    let mut out = String::new();
    out.push_str("# Gesture generation comparison\n\n");
    out.push_str(&format!(
        "Synthetic corpus: {} sequences of {} frames at {} fps, ambiguity mode `{:?}`, \
         {} generated samples per setting, master seed {}.\n\n",
        config.corpus.num_sequences,
        config.corpus.seq_len,
        config.corpus.fps,
        config.corpus.ambiguity_mode,
        config.eval_samples,
        config.master_seed,
    ));
    out.push_str(&format!(
        "FGD variant: `{}`. Config hash `{}`.\n\n",
        config.fgd_variant.as_str(),
        report.metadata.config_hash,
    ));

    let pick = |settings: &[Setting]| -> Vec<&MetricRow> {
        settings
            .iter()
            .filter_map(|s| report.rows.iter().find(|r| r.setting == *s))
            .collect()
    };
    md_block(
        &mut out,
        "Evaluation on the 3D gesture space",
        &pick(&[Setting::Gt3d, Setting::Gen3d, Setting::Gen2dLift]),
    );
    md_block(
        &mut out,
        "Evaluation on the 2D gesture space",
        &pick(&[Setting::Gt2d, Setting::Gen3dTo2d, Setting::Gen2d]),
    );
    md_block(
        &mut out,
        "Speech-condition ablation, 3D gesture space",
        &pick(&[Setting::Gt3d, Setting::UncondGen3d, Setting::UncondGen2dLift]),
    );
    md_block(
        &mut out,
        "Speech-condition ablation, 2D gesture space",
        &pick(&[Setting::Gt2d, Setting::UncondGen3dTo2d, Setting::UncondGen2d]),
    );

    out.push_str("## Notes\n\n");
    out.push_str(
        "- Scores are comparable only within one evaluation space: each space has its own \
         retrained encoder (see `encoder_sha` in the CSV).\n",
    );
    out.push_str(&format!(
        "- Beat consistency uses sigma = {} s and a kinematic threshold of {} rad/frame; \
         diversity uses two disjoint subsets of N = {}.\n",
        config.metric.bc_sigma, config.metric.beat_threshold, config.metric.diversity_n
    ));
    if let Some(mpjpe) = report.metadata.lifter_validation_mpjpe {
        out.push_str(&format!(
            "- Lifter held-out MPJPE (unit-bone directional space): {mpjpe:.4}.\n",
        ));
    }
    out.push_str(
        "\n### Full-scale reference results\n\nPublished results on the 97-hour TED Gesture-3D \
         corpus, for context only; desk-scale synthetic runs reproduce orderings, never these \
         absolute values.\n\n",
    );
    out.push_str("| Setting | FGD ↓ | BC ↑ | Diversity ↑ |\n|---|---|---|---|\n");
    for (name, fgd, bc, div) in REFERENCE_ROWS {
        out.push_str(&format!("| {name} | {fgd} | {bc} | {div} |\n"));
    }
    out
}

/// Writes `metrics.csv`, `report.md` and `metadata.json` into `dir`.
pub fn write_report_files(
    report: &MetricReport,
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), render_csv(&report.rows))?;
    std::fs::write(dir.join("report.md"), render_markdown(report, config))?;
    let metadata = serde_json::to_string_pretty(&report.metadata)
        .map_err(|e| HarnessError::Report(e.to_string()))?;
    std::fs::write(dir.join("metadata.json"), metadata + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row() -> MetricRow {
        MetricRow {
            setting: Setting::Gen2dLift,
            space: Space::ThreeD,
            fgd: 3.141593,
            bc: Some(0.654321),
            diversity: 1.25,
            mpjpe: Some(0.043),
            n_diversity: 64,
            bc_sigma: 0.1,
            beat_threshold: 0.05,
            encoder_sha: "abc123".into(),
            seed: 42,
        }
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![
            sample_row(),
            MetricRow {
                setting: Setting::Gt2d,
                space: Space::TwoD,
                bc: None,
                mpjpe: None,
                ..sample_row()
            },
        ];
        let text = render_csv(&rows);
        let parsed = parse_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].setting, Setting::Gen2dLift);
        assert!((parsed[0].fgd - 3.141593).abs() < 1e-9);
        assert_eq!(parsed[1].bc, None);
        assert_eq!(parsed[1].mpjpe, None);
        // bad header rejected
        assert!(parse_csv("nope\n1,2,3").is_err());
    }

    #[test]
    fn markdown_contains_blocks_and_reference_footnote() {
        let report = MetricReport {
            rows: vec![sample_row()],
            metadata: super::super::RunMetadata::default(),
        };
        let config = ExperimentConfig::default();
        let md = render_markdown(&report, &config);
        assert!(md.contains("Evaluation on the 3D gesture space"));
        assert!(md.contains("DiffGesture 2D + VP3D"));
        assert!(md.contains("Full-scale reference results"));
        assert!(md.contains("9.833"));
    }
}
