//! Console table over saved reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::report::ReportFile;
use crate::CliError;

pub fn read_report(path: &Path) -> Result<ReportFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::CorruptReport {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Pass/fail/inconclusive table over the given report files.
pub fn emit_summary(paths: &[PathBuf]) -> Result<String, CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage(
            "summary needs at least one report path".into(),
        ));
    }
    let reports = paths
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows: Vec<[String; 4]> = Vec::new();
    for r in &reports {
        for s in &r.summary {
            rows.push([
                r.kind.name().to_string(),
                s.check.clone(),
                s.status.label().to_string(),
                s.detail.clone(),
            ]);
        }
    }
    let head = ["experiment", "check", "status", "detail"];
    let width = |i: usize| {
        rows.iter()
            .map(|r| r[i].chars().count())
            .chain([head[i].len()])
            .max()
            .unwrap_or(0)
    };
    let w = [width(0), width(1), width(2)];
    let mut out = String::new();
    for (p, r) in paths.iter().zip(&reports) {
        writeln!(
            out,
            "# {}: {} seed={} config_sha256={}",
            p.display(),
            r.kind.name(),
            r.seed,
            r.config_sha256
        )
        .unwrap();
    }
    let line = |out: &mut String, c: [&str; 4]| {
        let mut s = String::new();
        for i in 0..3 {
            s.push_str(c[i]);
            s.extend(std::iter::repeat(' ').take(w[i] - c[i].chars().count() + 2));
        }
        s.push_str(c[3]);
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&mut out, head);
    let rule: Vec<String> = (0..4)
        .map(|i| "-".repeat(if i < 3 { w[i] } else { head[3].len() }))
        .collect();
    line(&mut out, [&rule[0], &rule[1], &rule[2], &rule[3]]);
    for r in &rows {
        line(&mut out, [&r[0], &r[1], &r[2], &r[3]]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentKind;
    use crate::report::{Status, SummaryRow};

    #[test]
    fn empty_list_is_a_usage_error() {
        let err = emit_summary(&[]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn corrupt_and_missing_reports_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{not json").unwrap();
        assert!(matches!(
            emit_summary(&[bad]),
            Err(CliError::CorruptReport { .. })
        ));
        assert!(matches!(
            emit_summary(&[dir.path().join("none.json")]),
            Err(CliError::Io { .. })
        ));
    }

    #[test]
    fn table_lists_every_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = ReportFile {
            kind: ExperimentKind::Velocity,
            config_sha256: "ab".into(),
            seed: 4,
            tool_version: "0".into(),
            summary: vec![
                SummaryRow::new("velocity vs λ", Status::Pass, "ok"),
                SummaryRow::info("velocity", "v = 0.1"),
            ],
            files: vec![],
            result: serde_json::Value::Null,
        };
        fs::write(&path, serde_json::to_string(&r).unwrap()).unwrap();
        let t = emit_summary(&[path]).unwrap();
        assert!(t.contains("velocity vs λ  PASS"), "{t}");
        assert!(t.contains("v = 0.1"));
        assert!(t.contains("seed=4"));
    }
}
