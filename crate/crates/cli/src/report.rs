//! `steklov report`: collects finished runs into a markdown summary. Only
//! artifacts already on disk are read; nothing is recomputed.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use crate::output::{RunManifest, MANIFEST};
use crate::CliError;

/// Tables rendered per run, in this order, with their section titles.
const SECTIONS: [(&str, &str); 11] = [
    ("groups.csv", "Eigenvalue groups"),
    ("spectrum.csv", "Spectrum"),
    ("oracle.csv", "Oracle comparison"),
    ("lemma.csv", "Pullback derivative check"),
    ("eigen_fd.csv", "Eigenvalue finite differences"),
    ("split_fd.csv", "Splitting finite differences"),
    ("spectrum_after.csv", "Spectrum after the splitting step"),
    ("trajectory.csv", "Simplification trajectory"),
    ("wscan_summary.csv", "W scan summary"),
    ("minmax.json", "Min-max check"),
    ("trace.json", "Simplification steps"),
];

/// Rows beyond this are elided from a rendered table.
const MAX_ROWS: usize = 40;

fn run_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !root.is_dir() {
        return Err(CliError::config(format!("{} is not a directory", root.display())));
    }
    let mut dirs = Vec::new();
    if root.join(MANIFEST).is_file() {
        dirs.push(root.to_path_buf());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::config(format!("cannot list {}: {e}", root.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    children.sort();
    dirs.extend(children);
    if dirs.is_empty() {
        return Err(CliError::config(format!("no {MANIFEST} found under {}", root.display())));
    }
    Ok(dirs)
}

fn csv_table(path: &Path) -> Result<String, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    let mut total = 0;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        total += 1;
        if total <= MAX_ROWS {
            let cells: Vec<&str> = record.iter().collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
    }
    if total > MAX_ROWS {
        let _ = writeln!(out, "\n_{} further rows in `{}`._", total - MAX_ROWS, file_name(path));
    }
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn minmax_section(v: &serde_json::Value) -> String {
    let mut out = String::from("| level | bound | max observed |\n|---|---|---|\n");
    for level in v["levels"].as_array().into_iter().flatten() {
        let _ = writeln!(out, "| {} | {} | {} |", level["level"], level["bound"], level["max_observed"]);
    }
    let violations = v["violations"].as_array().map_or(0, Vec::len);
    let _ = writeln!(out, "\nTrials: {}, violations: {violations}.", v["trials"]);
    out
}

fn trace_section(v: &serde_json::Value) -> String {
    let mut out = String::from("| step | budget | target | t | applied norm |\n|---|---|---|---|---|\n");
    for s in v["steps"].as_array().into_iter().flatten() {
        let target: Vec<String> = s["target"].as_array().into_iter().flatten().map(|x| x.to_string()).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            s["level"],
            s["budget"],
            target.join(" "),
            s["t"],
            s["applied_norm"]
        );
    }
    let _ = writeln!(out, "\nTermination: {}.", v["termination"]);
    out
}

fn run_section(dir: &Path) -> Result<String, CliError> {
    let manifest: RunManifest = serde_json::from_value(read_json(&dir.join(MANIFEST))?)
        .map_err(|e| CliError::config(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut out = String::new();
    let _ = writeln!(out, "## `{}` in `{}`\n", manifest.command, dir.display());
    let _ = writeln!(out, "- status: {} (exit {})", manifest.status, manifest.exit_code);
    if let Some(err) = &manifest.error {
        let _ = writeln!(out, "- error: {err}");
    }
    let _ = writeln!(out, "- input hash: `{}`", manifest.input_hash);
    let _ = writeln!(out, "- finished: {}", manifest.finished);
    for (k, v) in &manifest.summary {
        let _ = writeln!(out, "- {k}: {v}");
    }
    out.push('\n');
    for (name, title) in SECTIONS {
        if !manifest.files.iter().any(|f| f.path == name) {
            continue;
        }
        let path = dir.join(name);
        if !path.is_file() {
            let _ = writeln!(out, "### {title}\n\n_`{name}` is listed in the manifest but missing._\n");
            continue;
        }
        let body = match name {
            "minmax.json" => minmax_section(&read_json(&path)?),
            "trace.json" => trace_section(&read_json(&path)?),
            _ => csv_table(&path)?,
        };
        let _ = writeln!(out, "### {title}\n\n{body}");
    }
    if manifest.files.iter().any(|f| f.path == "trajectory.svg") {
        let _ = writeln!(out, "![trajectory](trajectory.svg)\n");
    }
    Ok(out)
}

/// Writes `summary.md` into `root` and returns the number of runs included.
pub fn write_report(root: &Path) -> Result<usize, CliError> {
    let dirs = run_dirs(root)?;
    let mut doc = String::from("# Run summary\n\n");
    for dir in &dirs {
        doc.push_str(&run_section(dir)?);
    }
    fs::write(root.join("summary.md"), doc)
        .map_err(|e| CliError::numeric(format!("cannot write summary: {e}")))?;
    Ok(dirs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_report(dir.path()).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn long_tables_are_elided() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut text = String::from("a,b\n");
        for i in 0..(MAX_ROWS + 5) {
            text.push_str(&format!("{i},{}\n", i * i));
        }
        fs::write(&path, text).unwrap();
        let table = csv_table(&path).unwrap();
        assert!(table.starts_with("| a | b |\n|---|---|\n| 0 | 0 |"));
        assert!(table.contains("5 further rows"));
    }
}
