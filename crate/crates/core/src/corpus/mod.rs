//! Labeled text corpora: loading, sampling, length statistics and the
//! synthetic domain generator.

pub mod bench;
mod stats;
mod synth;

pub use stats::{compute_length_stats, emit_histogram, length_stats, stats_table, Histogram, LengthStats};
pub use synth::{generate_synthetic_corpus, LengthDist, SyntheticDomainSpec};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dataset identifier: a small integer plus its registry name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub id: u16,
    pub name: String,
}

impl Label {
    pub fn new(id: u16, name: impl Into<String>) -> Self {
        Label { id, name: name.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSequence {
    pub text: String,
    pub label: u16,
    pub source_id: String,
}

/// An ordered, labeled collection of sequences. The per-label manifest is
/// maintained on every insertion.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    name: String,
    labels: BTreeMap<u16, String>,
    sequences: Vec<TextSequence>,
    manifest: BTreeMap<u16, usize>,
}

impl Corpus {
    pub fn new(name: impl Into<String>) -> Self {
        Corpus {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn register(&mut self, label: &Label) -> Result<()> {
        match self.labels.get(&label.id) {
            Some(existing) if existing != &label.name => Err(Error::InvalidArgument(format!(
                "label id {} already registered as {existing:?}, not {:?}",
                label.id, label.name
            ))),
            _ => {
                self.labels.insert(label.id, label.name.clone());
                Ok(())
            }
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.labels.iter().map(|(&id, n)| Label::new(id, n.clone()))
    }

    pub fn label_name(&self, id: u16) -> Option<&str> {
        self.labels.get(&id).map(String::as_str)
    }

    pub fn push(&mut self, seq: TextSequence) -> Result<()> {
        if !self.labels.contains_key(&seq.label) {
            return Err(Error::InvalidArgument(format!("label {} is not registered", seq.label)));
        }
        *self.manifest.entry(seq.label).or_default() += 1;
        self.sequences.push(seq);
        Ok(())
    }

    pub fn sequences(&self) -> &[TextSequence] {
        &self.sequences
    }

    pub fn manifest(&self) -> &BTreeMap<u16, usize> {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Texts with the given label, in corpus order.
    pub fn texts_of(&self, label: u16) -> impl Iterator<Item = &str> {
        self.sequences
            .iter()
            .filter(move |s| s.label == label)
            .map(|s| s.text.as_str())
    }

    /// Concatenate corpora, merging label registries.
    pub fn merge(name: impl Into<String>, parts: &[&Corpus]) -> Result<Corpus> {
        let mut out = Corpus::new(name);
        for p in parts {
            for l in p.labels() {
                out.register(&l)?;
            }
            for s in &p.sequences {
                out.push(s.clone())?;
            }
        }
        Ok(out)
    }

    /// Deterministic split: the first `n_first` sequences of every label go
    /// to the first corpus, the rest to the second.
    pub fn split_per_label(&self, n_first: usize) -> (Corpus, Corpus) {
        let mut a = Corpus::new(format!("{}-a", self.name));
        let mut b = Corpus::new(format!("{}-b", self.name));
        a.labels = self.labels.clone();
        b.labels = self.labels.clone();
        let mut seen: BTreeMap<u16, usize> = BTreeMap::new();
        for s in &self.sequences {
            let k = seen.entry(s.label).or_default();
            let dst = if *k < n_first { &mut a } else { &mut b };
            *k += 1;
            dst.push(s.clone()).expect("labels copied");
        }
        (a, b)
    }

    /// Write as line-delimited JSON records `{text, label, source_id}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for s in &self.sequences {
            let rec = serde_json::json!({
                "text": s.text,
                "label": self.label_name(s.label).unwrap_or_default(),
                "source_id": s.source_id,
            });
            writeln!(w, "{rec}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// One JSON object per line; the document is in `text` (or the given field).
    JsonlText { field: String },
    /// A directory where each file is one document.
    OneDocPerFile,
    /// One document per line.
    PlainLines,
}

impl Default for CorpusFormat {
    fn default() -> Self {
        CorpusFormat::JsonlText { field: "text".into() }
    }
}

/// Bookkeeping from [`load_corpus`]: skipped empty documents and malformed
/// records (line number and reason).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped_empty: usize,
    pub malformed: Vec<(usize, String)>,
}

pub fn load_corpus(path: &Path, format: &CorpusFormat, label: &Label) -> Result<(Corpus, LoadReport)> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut corpus = Corpus::new(name);
    corpus.register(label)?;
    let mut report = LoadReport::default();
    let add = |corpus: &mut Corpus, report: &mut LoadReport, text: String, source_id: String| {
        if text.trim().is_empty() {
            report.skipped_empty += 1;
            return;
        }
        report.loaded += 1;
        corpus
            .push(TextSequence {
                text,
                label: label.id,
                source_id,
            })
            .expect("label registered above");
    };
    match format {
        CorpusFormat::OneDocPerFile => {
            let mut files: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
                match String::from_utf8(bytes) {
                    Ok(text) => add(&mut corpus, &mut report, text, f.display().to_string()),
                    Err(_) => report.malformed.push((0, format!("{}: not valid UTF-8", f.display()))),
                }
            }
        }
        CorpusFormat::JsonlText { field } if field.is_empty() => {
            return Err(Error::InvalidArgument("jsonl format needs a non-empty text field name".into()))
        }
        CorpusFormat::JsonlText { .. } | CorpusFormat::PlainLines => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let reader = BufReader::new(file);
            for (i, line) in reader.split(b'\n').enumerate() {
                let lineno = i + 1;
                let mut bytes = line.map_err(|e| Error::io(path, e))?;
                if bytes.last() == Some(&b'\r') {
                    bytes.pop();
                }
                let line = match String::from_utf8(bytes) {
                    Ok(l) => l,
                    Err(_) => {
                        report.malformed.push((lineno, "not valid UTF-8".into()));
                        continue;
                    }
                };
                let source_id = format!("{}:{lineno}", path.display());
                match format {
                    CorpusFormat::PlainLines => add(&mut corpus, &mut report, line, source_id),
                    CorpusFormat::JsonlText { field } => {
                        if line.trim().is_empty() {
                            continue;
                        }
                        match parse_record(&line, field) {
                            Ok(text) => add(&mut corpus, &mut report, text, source_id),
                            Err(msg) => {
                                log::warn!("{}:{lineno}: {msg}", path.display());
                                report.malformed.push((lineno, msg));
                            }
                        }
                    }
                    CorpusFormat::OneDocPerFile => unreachable!(),
                }
            }
        }
    }
    Ok((corpus, report))
}

fn parse_record(line: &str, field: &str) -> std::result::Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    match v.get(field) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("field {field:?} is not a string")),
        None => Err(format!("missing field {field:?}")),
    }
}

/// Uniform sample of `n` sequences without replacement.
pub fn sample_sequences(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus> {
    if n > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} sequences from a corpus of {}",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, corpus.len(), n);
    let mut out = Corpus::new(format!("{}-sample{n}", corpus.name));
    out.labels = corpus.labels.clone();
    for i in picks.iter() {
        out.push(corpus.sequences[i].clone())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn lbl() -> Label {
        Label::new(0, "c4")
    }

    #[test]
    fn three_records_three_sequences() {
        let f = write_tmp("{\"text\":\"a\"}\n{\"text\":\"b\"}\n{\"text\":\"c\"}\n");
        let (c, r) = load_corpus(f.path(), &CorpusFormat::default(), &lbl()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.manifest().get(&0), Some(&3));
        assert_eq!(r.skipped_empty, 0);
    }

    #[test]
    fn empty_record_is_skipped_and_counted() {
        let f = write_tmp("{\"text\":\"hello\"}\n{\"text\":\"\"}\n");
        let (c, r) = load_corpus(f.path(), &CorpusFormat::default(), &lbl()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(r.skipped_empty, 1);
    }

    #[test]
    fn malformed_records_report_line_and_continue() {
        let f = write_tmp("{\"text\":\"ok\"}\nnot json\n{\"other\":1}\n{\"text\":\"fine\"}\n");
        let (c, r) = load_corpus(f.path(), &CorpusFormat::default(), &lbl()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(r.malformed.iter().map(|m| m.0).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_corpus(Path::new("/nonexistent/x.jsonl"), &CorpusFormat::default(), &lbl()).unwrap_err();
        assert_eq!(err.kind(), "io");
    }

    #[test]
    fn plain_lines_and_directories() {
        let f = write_tmp("one\n\ntwo\n");
        let (c, r) = load_corpus(f.path(), &CorpusFormat::PlainLines, &lbl()).unwrap();
        assert_eq!((c.len(), r.skipped_empty), (2, 1));

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "second doc").unwrap();
        std::fs::write(dir.path().join("a.txt"), "first doc").unwrap();
        std::fs::write(dir.path().join("c.txt"), "  ").unwrap();
        let (c, r) = load_corpus(dir.path(), &CorpusFormat::OneDocPerFile, &lbl()).unwrap();
        assert_eq!(c.sequences()[0].text, "first doc");
        assert_eq!((c.len(), r.skipped_empty), (2, 1));
    }

    #[test]
    fn unregistered_label_rejected() {
        let mut c = Corpus::new("x");
        let err = c.push(TextSequence {
            text: "a".into(),
            label: 3,
            source_id: String::new(),
        });
        assert!(err.is_err());
    }

    fn numbered(n: usize) -> Corpus {
        let mut c = Corpus::new("n");
        c.register(&Label::new(0, "a")).unwrap();
        c.register(&Label::new(1, "b")).unwrap();
        for i in 0..n {
            c.push(TextSequence {
                text: format!("doc {i}"),
                label: (i % 2) as u16,
                source_id: i.to_string(),
            })
            .unwrap();
        }
        c
    }

    #[test]
    fn full_sample_is_a_permutation() {
        let c = numbered(50);
        let s = sample_sequences(&c, 50, 7).unwrap();
        let mut a: Vec<_> = c.sequences().iter().map(|s| s.text.clone()).collect();
        let mut b: Vec<_> = s.sequences().iter().map(|s| s.text.clone()).collect();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(s.manifest(), c.manifest());
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let c = numbered(100);
        assert_eq!(sample_sequences(&c, 10, 3).unwrap(), sample_sequences(&c, 10, 3).unwrap());
        assert!(sample_sequences(&c, 101, 3).is_err());
    }
}
