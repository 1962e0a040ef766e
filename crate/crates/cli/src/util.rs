use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Serialize;

/// Bad invocation, as opposed to a failure of the stage itself. Exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

/// Clears the way for the outputs of one run. Without `force`, any existing
/// output is a refusal and nothing is touched.
pub fn claim_outputs(paths: &[&Path], force: bool) -> Result<()> {
    let existing: Vec<&Path> = paths.iter().copied().filter(|p| p.symlink_metadata().is_ok()).collect();
    if existing.is_empty() {
        return Ok(());
    }
    if !force {
        bail!("{} already exists; pass --force to overwrite", existing[0].display());
    }
    for p in existing {
        if p.is_dir() {
            fs::remove_dir_all(p).with_context(|| format!("removing {}", p.display()))?;
        } else {
            fs::remove_file(p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

/// `report.json` -> `report.<suffix>` beside it.
pub fn companion(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Comma-separated list, e.g. `1,2,4,8`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|x| x.trim().parse::<T>().map_err(|e| format!("{x:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

/// `lo,hi` inclusive pair.
pub fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let List(v) = s.parse::<List<usize>>()?;
    match v[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err(format!("expected lo,hi, got {s:?}")),
    }
}

pub fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let List(v) = s.parse::<List<f64>>()?;
    v.try_into().map_err(|_| format!("expected three ratios, got {s:?}"))
}

/// `7200`, `90s`, `2h`, `1h 30m`.
pub fn parse_duration_s(s: &str) -> Result<f64, String> {
    if let Ok(v) = s.trim().parse::<f64>() {
        return Ok(v);
    }
    humantime::parse_duration(s).map(|d| d.as_secs_f64()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsers() {
        assert_eq!(parse_pair("10,400"), Ok((10, 400)));
        assert!(parse_pair("1,2,3").is_err());
        assert_eq!(parse_ratios("0.8,0.1,0.1"), Ok([0.8, 0.1, 0.1]));
        assert_eq!(parse_duration_s("2h"), Ok(7200.0));
        assert_eq!(parse_duration_s("90"), Ok(90.0));
        assert!(parse_duration_s("soon").is_err());
        assert_eq!("1, 2,4".parse::<List<usize>>().unwrap().0, vec![1, 2, 4]);
    }

    #[test]
    fn companion_names() {
        assert_eq!(companion(Path::new("out/report.json"), "phases.csv"), Path::new("out/report.phases.csv"));
        assert_eq!(companion(Path::new("h.jsonl"), "samples"), Path::new("h.samples"));
    }

    #[test]
    fn refuses_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let f = tmp.path().join("x");
        fs::write(&f, "keep").unwrap();
        assert!(claim_outputs(&[&f], false).is_err());
        assert_eq!(fs::read_to_string(&f).unwrap(), "keep");
        claim_outputs(&[&f], true).unwrap();
        assert!(!f.exists());
    }
}
