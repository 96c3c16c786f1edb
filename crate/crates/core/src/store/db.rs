//! The item database: one `item` line per valid path, batches closed by an
//! `ok` sentinel line. Lines after the last sentinel belong to an interrupted
//! write and are ignored (and cut off by the next append).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use super::{StoreConfig, StoreError, StorePath};

const SENTINEL: &str = "ok";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemRecord {
    pub path: StorePath,
    /// Hex SHA-256 of the item's canonical archive bytes.
    pub content_digest: String,
    pub references: BTreeSet<StorePath>,
    /// Digest of the derivation that produced the item.
    pub deriver: Option<String>,
    /// Position of the record in registration order, starting at 1.
    pub registered_at: u64,
}

#[derive(Debug, Default)]
pub(crate) struct Db {
    pub(crate) items: BTreeMap<StorePath, ItemRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Byte offset just past the last sentinel line, or 0.
fn committed_len(text: &str) -> usize {
    let mut end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        offset += line.len();
        if line.trim_end_matches('\n') == SENTINEL && line.ends_with('\n') {
            end = offset;
        }
    }
    end
}

pub(crate) fn format_record(config: &StoreConfig, rec: &ItemRecord) -> String {
    let mut line = format!(
        "item {} {} {} {}",
        config.render(&rec.path),
        rec.content_digest,
        rec.deriver.as_deref().unwrap_or("-"),
        rec.references.len()
    );
    for r in &rec.references {
        line.push(' ');
        line.push_str(&config.render(r));
    }
    line.push('\n');
    line
}

pub(crate) fn load(config: &StoreConfig) -> Result<Db, StoreError> {
    let path = &config.db_path;
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Db::default()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let committed = &text[..committed_len(&text)];
    let mut db = Db::default();
    let mut seq = 0;
    for (lineno, line) in committed.lines().enumerate() {
        if line == SENTINEL || line.is_empty() {
            continue;
        }
        let corrupt = |reason: &str| StoreError::CorruptDb {
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < 5 || fields[0] != "item" {
            return Err(corrupt("expected `item <path> <digest> <deriver> <count> <refs>`"));
        }
        let item = config
            .parse_rendered(fields[1])
            .map_err(|_| corrupt("bad item path"))?;
        let count: usize = fields[4].parse().map_err(|_| corrupt("bad reference count"))?;
        if fields.len() != 5 + count {
            return Err(corrupt("reference count does not match"));
        }
        let references = fields[5..]
            .iter()
            .map(|r| config.parse_rendered(r))
            .collect::<Result<BTreeSet<_>, _>>()
            .map_err(|_| corrupt("bad reference path"))?;
        seq += 1;
        let deriver = (fields[3] != "-").then(|| fields[3].to_string());
        db.items.insert(
            item.clone(),
            ItemRecord {
                path: item,
                content_digest: fields[2].to_string(),
                references,
                deriver,
                registered_at: seq,
            },
        );
    }
    Ok(db)
}

/// Appends one committed batch.
pub(crate) fn append(config: &StoreConfig, records: &[ItemRecord]) -> Result<(), StoreError> {
    let path = &config.db_path;
    let existing = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    let keep = committed_len(&existing);
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(path)
        .map_err(io_err(path))?;
    if keep != existing.len() {
        file.set_len(keep as u64).map_err(io_err(path))?;
    }
    let mut batch = String::new();
    for rec in records {
        batch.push_str(&format_record(config, rec));
    }
    batch.push_str(SENTINEL);
    batch.push('\n');
    use std::io::Seek;
    file.seek(io::SeekFrom::Start(keep as u64)).map_err(io_err(path))?;
    file.write_all(batch.as_bytes()).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))?;
    Ok(())
}

/// Replaces the database with `records` in their registration order.
pub(crate) fn rewrite(config: &StoreConfig, records: &[&ItemRecord]) -> Result<(), StoreError> {
    let path = &config.db_path;
    let tmp = path.with_extension("tmp");
    let mut text = String::new();
    for rec in records {
        text.push_str(&format_record(config, rec));
    }
    text.push_str(SENTINEL);
    text.push('\n');
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}
