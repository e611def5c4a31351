//! Table corpus ingestion and storage.
//!
//! Parses line-delimited table records, validates them, and materializes every
//! table in an embedded SQLite database under a sanitized physical name. The
//! manifest (table_id -> physical name, titles, columns) lives in a `_manifest`
//! table inside the same database, so a corpus database is self-describing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// One corpus table: the unit of retrieval and SQL loading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRecord {
    pub table_id: String,
    pub page_title: String,
    pub section_title: String,
    #[serde(default)]
    pub caption: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// A question with its gold answer, tagged with the dataset split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question_id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub split: Split,
    #[serde(default)]
    pub gold_table_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Corpus-level counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_tables: usize,
    pub questions_train: usize,
    pub questions_valid: usize,
    pub questions_test: usize,
}

impl CorpusStats {
    pub fn total_questions(&self) -> usize {
        self.questions_train + self.questions_valid + self.questions_test
    }
}

/// Manifest entry for one ingested table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMeta {
    pub table_id: String,
    pub physical_name: String,
    pub page_title: String,
    pub section_title: String,
    pub caption: String,
    /// Original header cells, in order.
    pub header: Vec<String>,
    /// Sanitized column names actually used in the physical table, in order.
    pub columns: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate table_id {table_id:?} at lines {first} and {second}")]
    DuplicateTableId {
        table_id: String,
        first: usize,
        second: usize,
    },
    #[error("table {table_id:?}: row {row_index} has {got} cells, header has {expected}")]
    RowLengthMismatch {
        table_id: String,
        row_index: usize,
        got: usize,
        expected: usize,
    },
    #[error("table {table_id:?}: header is empty")]
    EmptyHeader { table_id: String },
    #[error("line {line}: question {question_id:?}: {reason}")]
    MalformedQuestion {
        line: usize,
        question_id: String,
        reason: String,
    },
    #[error("unknown table_id {0:?}")]
    UnknownTableId(String),
    #[error("sqlite error: {0}")]
    Sqlite(#[from] rusqlite::Error),
}

/// Sanitize a raw name into a SQL identifier matching `[A-Za-z_][A-Za-z0-9_]*`.
///
/// Lowercases, replaces every run of non-alphanumeric characters with a single
/// underscore, trims underscores at both ends, and prefixes `t_` when the
/// result would not start with a letter or underscore (`t` when the result is
/// empty). Deterministic; collisions are handled by [`sanitize_unique`].
pub fn sanitize_identifier(raw: &str) -> String {
    let mut base = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.to_lowercase().chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_sep && !base.is_empty() {
                base.push('_');
            }
            pending_sep = false;
            base.push(ch);
        } else {
            // Everything else (punctuation, whitespace, non-ASCII) separates.
            pending_sep = true;
        }
    }
    if base.is_empty() {
        return "t".to_string();
    }
    let first = base.as_bytes()[0];
    if first.is_ascii_alphabetic() || first == b'_' {
        base
    } else {
        format!("t_{base}")
    }
}

/// Sanitize a sequence of raw names, disambiguating collisions with stable
/// numeric suffixes in first-come order: `base`, `base_2`, `base_3`, ...
pub fn sanitize_unique<S: AsRef<str>>(raws: &[S]) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut taken: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        let base = sanitize_identifier(raw.as_ref());
        let seen = counts.entry(base.clone()).or_insert(0);
        *seen += 1;
        let mut candidate = if *seen == 1 {
            base.clone()
        } else {
            format!("{base}_{seen}")
        };
        // A literal name like "x_2" may already occupy a suffixed slot.
        while taken.contains(&candidate) {
            let n = counts.get_mut(&base).unwrap();
            *n += 1;
            candidate = format!("{base}_{n}");
        }
        taken.insert(candidate.clone());
        out.push(candidate);
    }
    out
}

/// Flatten a table into the text that gets indexed for retrieval:
/// page title, section title, caption, header cells, then all body cells,
/// space-joined in that order. Empty fields contribute nothing.
pub fn flatten_document(t: &TableRecord) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for s in [&t.page_title, &t.section_title, &t.caption] {
        if !s.is_empty() {
            parts.push(s);
        }
    }
    parts.extend(t.header.iter().map(|s| s.as_str()));
    for row in &t.rows {
        parts.extend(row.iter().map(|s| s.as_str()));
    }
    parts.join(" ")
}

/// Parse a line-delimited corpus file into validated records.
pub fn parse_corpus_file(path: &Path) -> Result<Vec<TableRecord>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut first_line_of: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TableRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        if record.header.is_empty() {
            return Err(CorpusError::EmptyHeader {
                table_id: record.table_id,
            });
        }
        for (row_index, row) in record.rows.iter().enumerate() {
            if row.len() != record.header.len() {
                return Err(CorpusError::RowLengthMismatch {
                    table_id: record.table_id.clone(),
                    row_index,
                    got: row.len(),
                    expected: record.header.len(),
                });
            }
        }
        if let Some(&first) = first_line_of.get(&record.table_id) {
            return Err(CorpusError::DuplicateTableId {
                table_id: record.table_id,
                first,
                second: line_no,
            });
        }
        first_line_of.insert(record.table_id.clone(), line_no);
        records.push(record);
    }
    Ok(records)
}

/// Parse a line-delimited QA file.
pub fn load_qa(path: &Path) -> Result<Vec<QaExample>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let qa: QaExample =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        if qa.answers.is_empty() {
            return Err(CorpusError::MalformedQuestion {
                line: line_no,
                question_id: qa.question_id,
                reason: "answers list is empty".to_string(),
            });
        }
        out.push(qa);
    }
    Ok(out)
}

/// A read-only handle over an ingested corpus.
///
/// Ingestion is single-writer; afterwards the handle only opens read-only
/// SQLite sessions, so it is safe to share across threads.
#[derive(Debug)]
pub struct Corpus {
    db_path: PathBuf,
    manifest: Vec<TableMeta>,
    by_table_id: BTreeMap<String, usize>,
    by_physical: BTreeMap<String, usize>,
}

impl Corpus {
    /// Ingest a corpus file into a fresh SQLite database at `db_path`.
    ///
    /// Re-ingesting the same file is idempotent: the database is rebuilt from
    /// scratch, so physical names and content come out identical.
    pub fn ingest(corpus_path: &Path, db_path: &Path) -> Result<Corpus, CorpusError> {
        let records = parse_corpus_file(corpus_path)?;
        Corpus::ingest_records(&records, db_path)
    }

    /// Ingest already-parsed records (used by tests and the CLI).
    pub fn ingest_records(records: &[TableRecord], db_path: &Path) -> Result<Corpus, CorpusError> {
        if db_path.exists() {
            std::fs::remove_file(db_path).map_err(|source| CorpusError::Io {
                path: db_path.to_path_buf(),
                source,
            })?;
        }
        let mut conn = Connection::open(db_path)?;
        conn.execute_batch(
            "CREATE TABLE _manifest (
                 ord INTEGER PRIMARY KEY,
                 table_id TEXT NOT NULL UNIQUE,
                 physical_name TEXT NOT NULL UNIQUE,
                 page_title TEXT NOT NULL,
                 section_title TEXT NOT NULL,
                 caption TEXT NOT NULL,
                 header_json TEXT NOT NULL,
                 columns_json TEXT NOT NULL
             );",
        )?;

        let ids: Vec<&str> = records.iter().map(|r| r.table_id.as_str()).collect();
        let physical_names = sanitize_unique(&ids);

        let mut manifest = Vec::with_capacity(records.len());
        let tx = conn.transaction()?;
        for (ord, (record, physical)) in records.iter().zip(&physical_names).enumerate() {
            let columns = sanitize_unique(&record.header);
            let col_defs: Vec<String> = columns.iter().map(|c| format!("\"{c}\" TEXT")).collect();
            tx.execute_batch(&format!(
                "CREATE TABLE \"{physical}\" ({});",
                col_defs.join(", ")
            ))?;
            let placeholders = vec!["?"; columns.len()].join(", ");
            let mut stmt = tx.prepare(&format!(
                "INSERT INTO \"{physical}\" VALUES ({placeholders})"
            ))?;
            for row in &record.rows {
                stmt.execute(rusqlite::params_from_iter(row.iter()))?;
            }
            drop(stmt);
            tx.execute(
                "INSERT INTO _manifest
                 (ord, table_id, physical_name, page_title, section_title, caption, header_json, columns_json)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
                rusqlite::params![
                    ord as i64,
                    record.table_id,
                    physical,
                    record.page_title,
                    record.section_title,
                    record.caption,
                    serde_json::to_string(&record.header).expect("header serializes"),
                    serde_json::to_string(&columns).expect("columns serialize"),
                ],
            )?;
            manifest.push(TableMeta {
                table_id: record.table_id.clone(),
                physical_name: physical.clone(),
                page_title: record.page_title.clone(),
                section_title: record.section_title.clone(),
                caption: record.caption.clone(),
                header: record.header.clone(),
                columns,
            });
        }
        tx.commit()?;
        drop(conn);
        Ok(Corpus::assemble(db_path.to_path_buf(), manifest))
    }

    /// Open an existing corpus database and load its manifest.
    pub fn open(db_path: &Path) -> Result<Corpus, CorpusError> {
        let conn =
            Connection::open_with_flags(db_path, rusqlite::OpenFlags::SQLITE_OPEN_READ_ONLY)?;
        let mut stmt = conn.prepare(
            "SELECT table_id, physical_name, page_title, section_title, caption,
                    header_json, columns_json
             FROM _manifest ORDER BY ord",
        )?;
        let manifest: Vec<TableMeta> = stmt
            .query_map([], |row| {
                let header_json: String = row.get(5)?;
                let columns_json: String = row.get(6)?;
                Ok(TableMeta {
                    table_id: row.get(0)?,
                    physical_name: row.get(1)?,
                    page_title: row.get(2)?,
                    section_title: row.get(3)?,
                    caption: row.get(4)?,
                    header: serde_json::from_str(&header_json).unwrap_or_default(),
                    columns: serde_json::from_str(&columns_json).unwrap_or_default(),
                })
            })?
            .collect::<Result<_, _>>()?;
        drop(stmt);
        drop(conn);
        Ok(Corpus::assemble(db_path.to_path_buf(), manifest))
    }

    fn assemble(db_path: PathBuf, manifest: Vec<TableMeta>) -> Corpus {
        let mut by_table_id = BTreeMap::new();
        let mut by_physical = BTreeMap::new();
        for (i, m) in manifest.iter().enumerate() {
            by_table_id.insert(m.table_id.clone(), i);
            by_physical.insert(m.physical_name.clone(), i);
        }
        Corpus {
            db_path,
            manifest,
            by_table_id,
            by_physical,
        }
    }

    pub fn db_path(&self) -> &Path {
        &self.db_path
    }

    pub fn num_tables(&self) -> usize {
        self.manifest.len()
    }

    pub fn manifest(&self) -> &[TableMeta] {
        &self.manifest
    }

    pub fn meta(&self, table_id: &str) -> Option<&TableMeta> {
        self.by_table_id.get(table_id).map(|&i| &self.manifest[i])
    }

    pub fn meta_by_physical(&self, physical: &str) -> Option<&TableMeta> {
        self.by_physical.get(physical).map(|&i| &self.manifest[i])
    }

    /// Open a fresh read-only session against the corpus database.
    pub fn read_only_session(&self) -> Result<Connection, CorpusError> {
        let conn =
            Connection::open_with_flags(&self.db_path, rusqlite::OpenFlags::SQLITE_OPEN_READ_ONLY)?;
        conn.pragma_update(None, "query_only", true)?;
        Ok(conn)
    }

    /// Reconstruct the ingested records, rows in insertion order.
    pub fn export_records(&self) -> Result<Vec<TableRecord>, CorpusError> {
        let conn = self.read_only_session()?;
        let mut out = Vec::with_capacity(self.manifest.len());
        for meta in &self.manifest {
            let cols = meta
                .columns
                .iter()
                .map(|c| format!("\"{c}\""))
                .collect::<Vec<_>>()
                .join(", ");
            let mut stmt = conn.prepare(&format!(
                "SELECT {cols} FROM \"{}\" ORDER BY rowid",
                meta.physical_name
            ))?;
            let ncols = meta.columns.len();
            let rows: Vec<Vec<String>> = stmt
                .query_map([], |row| {
                    let mut cells = Vec::with_capacity(ncols);
                    for i in 0..ncols {
                        cells.push(row.get::<_, String>(i)?);
                    }
                    Ok(cells)
                })?
                .collect::<Result<_, _>>()?;
            out.push(TableRecord {
                table_id: meta.table_id.clone(),
                page_title: meta.page_title.clone(),
                section_title: meta.section_title.clone(),
                caption: meta.caption.clone(),
                header: meta.header.clone(),
                rows,
            });
        }
        Ok(out)
    }

    /// Content digest over the manifest and every table's rows, used to detect
    /// any mutation of the corpus.
    pub fn digest(&self) -> Result<String, CorpusError> {
        let mut hasher = Sha256::new();
        for record in self.export_records()? {
            hasher.update(serde_json::to_vec(&record).expect("record serializes"));
            hasher.update([0u8]);
        }
        Ok(hex_string(&hasher.finalize()))
    }

    /// Corpus statistics, combined with QA split counts.
    pub fn stats(&self, qa: &[QaExample]) -> CorpusStats {
        let mut stats = CorpusStats {
            num_tables: self.num_tables(),
            questions_train: 0,
            questions_valid: 0,
            questions_test: 0,
        };
        for q in qa {
            match q.split {
                Split::Train => stats.questions_train += 1,
                Split::Valid => stats.questions_valid += 1,
                Split::Test => stats.questions_test += 1,
            }
        }
        stats
    }
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}
