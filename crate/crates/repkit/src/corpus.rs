//! Multi-stream corpora and the on-disk manifest.
//!
//! A corpus groups annotated streams by exercise and subject together with
//! per-exercise metadata, and round-trips through a `manifest.csv` listing
//! one stream file per line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::signal::{
    labeled_windows, load_stream, save_stream, ExerciseMeta, SignalStream, Window,
};

/// One recorded set within a corpus.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub stream: SignalStream,
    pub set_index: usize,
}

/// A collection of annotated streams with per-exercise metadata.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub metas: Vec<ExerciseMeta>,
}

impl Corpus {
    pub fn meta(&self, exercise_id: &str) -> Option<&ExerciseMeta> {
        self.metas.iter().find(|m| m.exercise_id == exercise_id)
    }

    /// Exercise ids in first-seen order.
    pub fn exercise_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for m in &self.metas {
            if !ids.contains(&m.exercise_id) {
                ids.push(m.exercise_id.clone());
            }
        }
        ids
    }

    /// Subject ids recorded for one exercise, sorted.
    pub fn subjects_for(&self, exercise_id: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.stream.exercise_id == exercise_id)
            .map(|e| e.stream.subject_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Entries of one (exercise, subject) pair ordered by set index.
    pub fn sets_of(&self, exercise_id: &str, subject_id: &str) -> Vec<&CorpusEntry> {
        let mut sets: Vec<&CorpusEntry> = self
            .entries
            .iter()
            .filter(|e| e.stream.exercise_id == exercise_id && e.stream.subject_id == subject_id)
            .collect();
        sets.sort_by_key(|e| e.set_index);
        sets
    }

    pub fn entries_excluding(&self, exercise_id: &str) -> Vec<&CorpusEntry> {
        self.entries
            .iter()
            .filter(|e| e.stream.exercise_id != exercise_id)
            .collect()
    }

    /// Slide + label every entry of the given exercises using each
    /// exercise's own window parameters, padding all windows to `t_max`.
    pub fn windows_for_entries(
        &self,
        entries: &[&CorpusEntry],
        t_max: usize,
        overlap_ratio: f64,
    ) -> Result<Vec<Window>> {
        let mut out = Vec::new();
        for entry in entries {
            let meta = self.meta(&entry.stream.exercise_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no metadata for exercise '{}'",
                    entry.stream.exercise_id
                ))
            })?;
            let params = meta.window_params()?;
            out.extend(labeled_windows(
                &entry.stream,
                &params,
                t_max,
                overlap_ratio,
            )?);
        }
        Ok(out)
    }
}

/// Write every stream plus a `manifest.csv` under `dir`.
///
/// Manifest format: a `#corpus_manifest,version=1` header, a column header,
/// then `path,exercise,subject,set,duration_s` per stream. Paths are
/// relative to the manifest's directory.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let stream_dir = dir.join("streams");
    std::fs::create_dir_all(&stream_dir)?;

    let durations: BTreeMap<&str, f64> = corpus
        .metas
        .iter()
        .map(|m| (m.exercise_id.as_str(), m.mean_rep_duration_s))
        .collect();

    let mut manifest = String::from("#corpus_manifest,version=1\npath,exercise,subject,set,duration_s\n");
    for entry in &corpus.entries {
        let name = format!(
            "{}_{}_set{}.csv",
            entry.stream.exercise_id, entry.stream.subject_id, entry.set_index
        );
        save_stream(&entry.stream, stream_dir.join(&name))?;
        let duration = durations
            .get(entry.stream.exercise_id.as_str())
            .copied()
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no metadata for exercise '{}'",
                    entry.stream.exercise_id
                ))
            })?;
        manifest.push_str(&format!(
            "streams/{name},{},{},{},{}\n",
            entry.stream.exercise_id,
            entry.stream.subject_id,
            entry.set_index,
            crate::signal::format_sig9(duration),
        ));
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Load a corpus from its manifest file.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Corpus> {
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest_path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.starts_with("#corpus_manifest") => {}
        _ => return Err(Error::parse(1, "not a corpus manifest")),
    }
    match lines.next() {
        Some((_, cols)) if cols == "path,exercise,subject,set,duration_s" => {}
        _ => return Err(Error::parse(2, "bad manifest column header")),
    }

    let mut corpus = Corpus::default();
    let mut seen_meta: BTreeMap<String, f64> = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                lineno,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let stream = load_stream(base.join(fields[0]))?;
        if stream.exercise_id != fields[1] || stream.subject_id != fields[2] {
            return Err(Error::parse(
                lineno,
                format!(
                    "manifest ids ({},{}) disagree with stream header ({},{})",
                    fields[1], fields[2], stream.exercise_id, stream.subject_id
                ),
            ));
        }
        let set_index: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad set index '{}'", fields[3])))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad duration '{}'", fields[4])))?;
        if let Some(&prev) = seen_meta.get(&stream.exercise_id) {
            if prev != duration {
                return Err(Error::parse(
                    lineno,
                    format!(
                        "duration {duration} disagrees with earlier {prev} for '{}'",
                        stream.exercise_id
                    ),
                ));
            }
        } else {
            seen_meta.insert(stream.exercise_id.clone(), duration);
            corpus.metas.push(ExerciseMeta::new(
                stream.exercise_id.clone(),
                stream.exercise_id.clone(),
                duration,
            )?);
        }
        corpus.entries.push(CorpusEntry { stream, set_index });
    }
    if corpus.entries.is_empty() {
        return Err(Error::Validation("manifest lists no streams".into()));
    }
    Ok(corpus)
}
