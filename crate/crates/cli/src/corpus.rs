//! Corpus directories: `vocab.txt`, `pg/<id>.fkpg`, `refs.txt` (id\ttranscript),
//! optional `lm_text.txt`, and a `config.toml` snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asrfuse::Posteriorgram;

pub const PG_DIR: &str = "pg";
pub const PG_EXT: &str = "fkpg";
pub const REFS: &str = "refs.txt";

pub fn pg_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(PG_DIR).join(format!("{id}.{PG_EXT}"))
}

/// `id\ttext` lines; blank lines are skipped, ids must be unique.
pub fn read_keyed(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line.split_once('\t').unwrap_or((line.trim(), ""));
        if out.insert(id.to_string(), body.to_string()).is_some() {
            bail!("{}:{}: duplicate id {id:?}", path.display(), n + 1);
        }
    }
    Ok(out)
}

pub fn write_keyed<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
    let mut text = String::new();
    for (id, body) in rows {
        text.push_str(id);
        text.push('\t');
        text.push_str(body);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// References of a corpus, if it has any.
pub fn refs(dir: &Path) -> Result<Option<BTreeMap<String, String>>> {
    let p = dir.join(REFS);
    if p.exists() {
        read_keyed(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Utterance ids: the reference ids when present, else every posteriorgram
/// file; sorted either way.
pub fn utterance_ids(dir: &Path) -> Result<Vec<String>> {
    if let Some(r) = refs(dir)? {
        return Ok(r.into_keys().collect());
    }
    let pg_dir = dir.join(PG_DIR);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&pg_dir).with_context(|| format!("listing {}", pg_dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == PG_EXT) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no posteriorgrams in {}", pg_dir.display());
    }
    Ok(ids)
}

pub fn read_pg(dir: &Path, id: &str) -> Result<Posteriorgram> {
    let p = pg_path(dir, id);
    Posteriorgram::read(&p).with_context(|| format!("utterance {id}: reading {}", p.display()))
}
