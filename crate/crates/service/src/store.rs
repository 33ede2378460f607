//! File-backed annotation store with optimistic versioning.
//!
//! Every accepted edit is first appended to a JSON-lines log (one full
//! document per line, fsynced), then written atomically to
//! `<dir>/<image_id>.json`. Opening the store replays the log over the
//! files, so an edit interrupted between the two writes is either fully
//! present or fully absent.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use mammoseg_core::ingest::{read_annotation, write_annotation, IngestError};
use mammoseg_core::AnnotationDocument;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("VersionConflict: {image_id} is at version {current}, edit was based on {base}")]
    VersionConflict { image_id: String, current: u64, base: u64 },
    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("CorruptLog: {path} line {line}: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Latest document per image according to the log. A final line without a
/// terminating newline is an interrupted append and is ignored.
pub fn replay_log(path: &Path) -> Result<BTreeMap<String, AnnotationDocument>, StoreError> {
    let mut out: BTreeMap<String, AnnotationDocument> = BTreeMap::new();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: AnnotationDocument = serde_json::from_str(line).map_err(|e| StoreError::CorruptLog {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        match out.get(&doc.image_id) {
            Some(prev) if prev.version >= doc.version => {}
            _ => {
                out.insert(doc.image_id.clone(), doc);
            }
        }
    }
    Ok(out)
}

/// Cuts an interrupted final line so later appends start on a fresh line.
fn drop_torn_tail(path: &Path) -> Result<(), StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    if bytes.last().is_none_or(|&b| b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    file.set_len(keep as u64).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

pub struct AnnotationStore {
    dir: PathBuf,
    log_path: PathBuf,
    docs: RwLock<HashMap<String, AnnotationDocument>>,
    log: Mutex<File>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AnnotationStore {
    /// Loads `<dir>/*.json`, then applies newer versions found in the log
    /// and rewrites the affected files.
    pub fn open(dir: &Path, log_path: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut docs = HashMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let doc = read_annotation(&path)?;
            docs.insert(doc.image_id.clone(), doc);
        }
        for (id, doc) in replay_log(log_path)? {
            if docs.get(&id).is_none_or(|d| d.version < doc.version) {
                write_annotation(&dir.join(format!("{id}.json")), &doc)?;
                docs.insert(id, doc);
            }
        }
        if let Some(parent) = log_path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        drop_torn_tail(log_path)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(io_err(log_path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log_path: log_path.to_path_buf(),
            docs: RwLock::new(docs),
            log: Mutex::new(log),
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn get(&self, image_id: &str) -> Option<AnnotationDocument> {
        self.docs.read().expect("store lock").get(image_id).cloned()
    }

    /// Current version; 0 for an image that was never annotated.
    pub fn version(&self, image_id: &str) -> u64 {
        self.get(image_id).map_or(0, |d| d.version)
    }

    fn image_lock(&self, image_id: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table")
            .entry(image_id.to_string())
            .or_default()
            .clone()
    }

    /// Accepts `doc` if `doc.version` equals the current version and stores
    /// it as the next version. Writes to one image are serialized.
    pub fn put(&self, mut doc: AnnotationDocument) -> Result<AnnotationDocument, StoreError> {
        let lock = self.image_lock(&doc.image_id);
        let _guard = lock.lock().expect("image lock");
        let current = self.version(&doc.image_id);
        if doc.version != current {
            return Err(StoreError::VersionConflict {
                image_id: doc.image_id,
                current,
                base: doc.version,
            });
        }
        doc.version = current + 1;
        let mut line = serde_json::to_vec(&doc).expect("annotation serializes");
        line.push(b'\n');
        {
            let mut log = self.log.lock().expect("log lock");
            log.write_all(&line).map_err(io_err(&self.log_path))?;
            log.sync_data().map_err(io_err(&self.log_path))?;
        }
        write_annotation(&self.dir.join(format!("{}.json", doc.image_id)), &doc)?;
        self.docs
            .write()
            .expect("store lock")
            .insert(doc.image_id.clone(), doc.clone());
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mammoseg_core::{DensityClass, Laterality, Point, Polygon, Structures, View};

    fn doc(id: &str, version: u64, shift: f64) -> AnnotationDocument {
        let tri = |s: f64| {
            Polygon::new(vec![Point::new(s, 0.0), Point::new(s + 4.0, 0.0), Point::new(s, 4.0)]).unwrap()
        };
        AnnotationDocument {
            image_id: id.into(),
            exam_id: "e".into(),
            view: View::Cc,
            laterality: Laterality::R,
            pixel_spacing_mm: 0.1,
            density: DensityClass::Nd,
            version,
            structures: Structures {
                fatty: tri(shift),
                fibroglandular: tri(shift + 1.0),
                pectoral: None,
                nipple: tri(shift + 2.0),
            },
        }
    }

    #[test]
    fn put_bumps_version_and_rejects_stale_base() {
        let tmp = tempfile::tempdir().unwrap();
        let store = AnnotationStore::open(&tmp.path().join("ann"), &tmp.path().join("edits.jsonl")).unwrap();
        assert_eq!(store.version("a"), 0);
        assert_eq!(store.put(doc("a", 0, 0.0)).unwrap().version, 1);
        assert_eq!(store.put(doc("a", 1, 1.0)).unwrap().version, 2);
        assert!(matches!(
            store.put(doc("a", 1, 2.0)),
            Err(StoreError::VersionConflict { current: 2, base: 1, .. })
        ));
        assert_eq!(store.get("a").unwrap(), doc("a", 2, 1.0));
    }

    #[test]
    fn log_replays_to_current_state() {
        let tmp = tempfile::tempdir().unwrap();
        let (dir, log) = (tmp.path().join("ann"), tmp.path().join("edits.jsonl"));
        {
            let store = AnnotationStore::open(&dir, &log).unwrap();
            store.put(doc("a", 0, 0.0)).unwrap();
            store.put(doc("b", 0, 3.0)).unwrap();
            store.put(doc("a", 1, 5.0)).unwrap();
        }
        let replayed = replay_log(&log).unwrap();
        let reopened = AnnotationStore::open(&dir, &log).unwrap();
        for id in ["a", "b"] {
            assert_eq!(replayed.get(id), reopened.get(id).as_ref());
        }
        assert_eq!(reopened.version("a"), 2);
    }

    #[test]
    fn interrupted_edit_yields_old_or_new_version() {
        let tmp = tempfile::tempdir().unwrap();
        let (dir, log) = (tmp.path().join("ann"), tmp.path().join("edits.jsonl"));
        let store = AnnotationStore::open(&dir, &log).unwrap();
        store.put(doc("a", 0, 0.0)).unwrap();
        drop(store);
        let next = serde_json::to_string(&doc("a", 2, 7.0)).unwrap();

        // Crash while appending: half a line in the log, file untouched.
        let before = fs::read(&log).unwrap();
        let mut torn = before.clone();
        torn.extend_from_slice(&next.as_bytes()[..next.len() / 2]);
        fs::write(&log, &torn).unwrap();
        let store = AnnotationStore::open(&dir, &log).unwrap();
        assert_eq!(store.get("a").unwrap(), doc("a", 1, 0.0));
        drop(store);

        // Crash after the log append, before the file write.
        let mut appended = before;
        appended.extend_from_slice(next.as_bytes());
        appended.push(b'\n');
        fs::write(&log, &appended).unwrap();
        let store = AnnotationStore::open(&dir, &log).unwrap();
        assert_eq!(store.get("a").unwrap(), doc("a", 2, 7.0));
        assert_eq!(read_annotation(&dir.join("a.json")).unwrap(), doc("a", 2, 7.0));
    }

    #[test]
    fn edits_after_a_torn_append_stay_readable() {
        let tmp = tempfile::tempdir().unwrap();
        let (dir, log) = (tmp.path().join("ann"), tmp.path().join("edits.jsonl"));
        AnnotationStore::open(&dir, &log).unwrap().put(doc("a", 0, 0.0)).unwrap();
        let mut bytes = fs::read(&log).unwrap();
        bytes.extend_from_slice(b"{\"image_id\":\"a\",\"ver");
        fs::write(&log, bytes).unwrap();
        AnnotationStore::open(&dir, &log).unwrap().put(doc("a", 1, 9.0)).unwrap();
        assert_eq!(replay_log(&log).unwrap()["a"], doc("a", 2, 9.0));
        assert_eq!(AnnotationStore::open(&dir, &log).unwrap().version("a"), 2);
    }
}
