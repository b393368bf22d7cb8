//! Corpus persistence: JSONL files for catalog, jobs, and runs, plus a JSON
//! fleet file. Serialization is byte-stable, so equal datasets produce equal
//! directories.

use super::{ClusterConfig, CorpusError, HistoryDataset, JobScript, RunTrace, TableMeta};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

const CATALOG_FILE: &str = "catalog.jsonl";
const JOBS_FILE: &str = "jobs.jsonl";
const RUNS_FILE: &str = "runs.jsonl";
const FLEET_FILE: &str = "fleet.json";

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|source| CorpusError::Decode {
            path: path.display().to_string(),
            line: idx + 1,
            source,
        })?);
    }
    Ok(items)
}

/// Writes `catalog.jsonl`, `jobs.jsonl`, `runs.jsonl`, and `fleet.json`.
pub fn save_corpus(dataset: &HistoryDataset, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir)?;
    write_jsonl::<TableMeta>(&dir.join(CATALOG_FILE), &dataset.catalog)?;
    write_jsonl::<JobScript>(&dir.join(JOBS_FILE), &dataset.jobs)?;
    write_jsonl::<RunTrace>(&dir.join(RUNS_FILE), &dataset.runs)?;
    let fleet = serde_json::to_string_pretty(&dataset.fleet).map_err(std::io::Error::other)?;
    fs::write(dir.join(FLEET_FILE), fleet + "\n")?;
    Ok(())
}

/// Reads a corpus directory back and validates it.
pub fn load_corpus(dir: &Path) -> Result<HistoryDataset, CorpusError> {
    let catalog: Vec<TableMeta> = read_jsonl(&dir.join(CATALOG_FILE))?;
    let jobs: Vec<JobScript> = read_jsonl(&dir.join(JOBS_FILE))?;
    let runs: Vec<RunTrace> = read_jsonl(&dir.join(RUNS_FILE))?;
    let fleet: Vec<ClusterConfig> = {
        let text = fs::read_to_string(dir.join(FLEET_FILE))?;
        serde_json::from_str(&text).map_err(|source| CorpusError::Decode {
            path: dir.join(FLEET_FILE).display().to_string(),
            line: 1,
            source,
        })?
    };
    let dataset = HistoryDataset {
        catalog,
        fleet,
        jobs,
        runs,
    };
    dataset.validate()?;
    Ok(dataset)
}
