//! Counts files, JSON sidecars and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twinbeam_core::sim::{CountsDataset, DatasetMetadata, SettingCounts};

use crate::error::{CliError, CliResult};

/// Fixed header of a counts file.
pub const COUNTS_HEADER: [&str; 8] = ["eta", "trials", "c0_yes", "c0_no", "c1_yes", "c1_no", "c2_yes", "c2_no"];

pub const TOOL_NAME: &str = "twinbeam";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        Self {
            name: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
        }
    }
}

/// Provenance written next to every counts file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub tool: ToolInfo,
    pub seed: u64,
    pub config_hash: String,
    pub noiseless: bool,
    pub schedule: Vec<f64>,
    pub metadata: DatasetMetadata,
}

/// `counts.csv` -> `counts.meta.json`.
pub fn sidecar_path(counts: &Path) -> PathBuf {
    counts.with_extension("meta.json")
}

/// Writes via a temporary file in the target directory and renames it into
/// place, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Serializes counts in the fixed schema with LF line endings.
pub fn counts_to_csv(dataset: &CountsDataset) -> CliResult<Vec<u8>> {
    if dataset.n_outcomes() != 3 {
        return Err(twinbeam_core::Error::InvalidInput(format!(
            "the counts schema holds 3 outcomes, dataset has {}",
            dataset.n_outcomes()
        ))
        .into());
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Format {
        path: PathBuf::from("<counts>"),
        message: e.to_string(),
    };
    w.write_record(COUNTS_HEADER).map_err(fail)?;
    for s in dataset.settings() {
        let mut row = vec![s.eta.to_string(), s.trials.to_string()];
        for n in 0..3 {
            row.push(s.yes[n].to_string());
            row.push(s.no[n].to_string());
        }
        w.write_record(&row).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Format {
        path: PathBuf::from("<counts>"),
        message: e.to_string(),
    })
}

/// Parses a counts file. `name` labels diagnostics.
pub fn parse_counts(bytes: &[u8], name: &str) -> CliResult<Vec<SettingCounts>> {
    let bad = |line: u64, column: &str, message: String| CliError::Input {
        path: name.to_string(),
        line,
        column: column.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(bad(1, "-", "empty file".into())),
        Some(r) => r.map_err(|e| bad(1, "-", e.to_string()))?,
    };
    if header.iter().ne(COUNTS_HEADER.iter().copied()) {
        return Err(bad(
            1,
            "-",
            format!("header must be `{}`, found `{}`", COUNTS_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut settings = Vec::new();
    let mut prev_eta = 0.0;
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            bad(line, "-", e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != COUNTS_HEADER.len() {
            return Err(bad(
                line,
                "-",
                format!("expected {} fields, found {}", COUNTS_HEADER.len(), record.len()),
            ));
        }
        let eta: f64 = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(line, "eta", format!("`{}` is not a number", &record[0])))?;
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(bad(line, "eta", format!("{eta} is outside (0, 1]")));
        }
        if eta <= prev_eta {
            return Err(bad(line, "eta", format!("{eta} does not increase on {prev_eta}")));
        }
        prev_eta = eta;
        let mut ints = [0u64; 7];
        for (k, slot) in ints.iter_mut().enumerate() {
            let field = &record[k + 1];
            *slot = field
                .trim()
                .parse()
                .map_err(|_| bad(line, COUNTS_HEADER[k + 1], format!("`{field}` is not a non-negative integer")))?;
        }
        let trials = ints[0];
        let yes = vec![ints[1], ints[3], ints[5]];
        let no = vec![ints[2], ints[4], ints[6]];
        let total = yes.iter().chain(&no).try_fold(0u64, |acc, &c| acc.checked_add(c));
        if total != Some(trials) {
            return Err(bad(
                line,
                "trials",
                format!("cells sum to {} but trials = {trials}", total.map_or("overflow".into(), |t| t.to_string())),
            ));
        }
        settings.push(SettingCounts { eta, trials, yes, no });
    }
    if settings.is_empty() {
        return Err(bad(2, "-", "no data rows".into()));
    }
    Ok(settings)
}

/// Writes the counts file and its sidecar.
pub fn write_counts(path: &Path, dataset: &CountsDataset, sidecar: &Sidecar) -> CliResult<()> {
    atomic_write(path, &counts_to_csv(dataset)?)?;
    write_json(&sidecar_path(path), sidecar)
}

/// Reads a counts file, attaching sidecar metadata when one is present.
pub fn read_counts(path: &Path) -> CliResult<(CountsDataset, Option<Sidecar>)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let settings = parse_counts(&bytes, &path.display().to_string())?;
    let meta_path = sidecar_path(path);
    let sidecar: Option<Sidecar> = if meta_path.exists() {
        Some(read_json(&meta_path)?)
    } else {
        None
    };
    let metadata = sidecar.as_ref().map(|s| s.metadata.clone()).unwrap_or_default();
    Ok((CountsDataset::new(settings, metadata)?, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "eta,trials,c0_yes,c0_no,c1_yes,c1_no,c2_yes,c2_no\n0.1,10,1,2,1,2,1,3\n0.2,5,0,0,0,0,0,5\n";

    #[test]
    fn parses_and_reserializes_identically() {
        let settings = parse_counts(GOOD.as_bytes(), "t.csv").unwrap();
        assert_eq!(settings[0].yes, vec![1, 1, 1]);
        assert_eq!(settings[0].no, vec![2, 2, 3]);
        let ds = CountsDataset::new(settings, DatasetMetadata::default()).unwrap();
        assert_eq!(counts_to_csv(&ds).unwrap(), GOOD.as_bytes());
    }

    fn located(text: &str) -> (u64, String) {
        match parse_counts(text.as_bytes(), "t.csv").unwrap_err() {
            CliError::Input { line, column, .. } => (line, column),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_rows_are_located() {
        let bad_int = GOOD.replace("0.2,5,0,0,0,0,0,5", "0.2,5,0,x,0,0,0,5");
        assert_eq!(located(&bad_int), (3, "c0_no".into()));
        let bad_sum = GOOD.replace("0.1,10", "0.1,11");
        assert_eq!(located(&bad_sum), (2, "trials".into()));
        let short = GOOD.replace("0.2,5,0,0,0,0,0,5", "0.2,5,0,0");
        assert_eq!(located(&short).0, 3);
        let order = GOOD.replace("0.2,5", "0.05,5");
        assert_eq!(located(&order), (3, "eta".into()));
        let header = GOOD.replace("c2_no", "c2_off");
        assert_eq!(located(&header).0, 1);
        assert_eq!(located("").0, 1);
    }
}
