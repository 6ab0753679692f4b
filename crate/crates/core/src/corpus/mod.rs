//! Corpus ingestion and paragraph construction.
//!
//! Documents are split on `"\n"`; short neighbouring lines are merged while
//! the merged paragraph stays below `min_merge` tokens, and paragraphs above
//! `max_len` tokens are dropped. The surviving paragraphs get dense ids in
//! document order.

mod tokenizer;

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tokenizer::{
    count_tokens, split_pieces, Tokenizer, TokenizerBuilder, TokenizerKind, DOC_ID, DOC_TOKEN, NEWLINE_ID,
    NEWLINE_TOKEN, UNK_ID, UNK_TOKEN,
};

pub const DEFAULT_MIN_MERGE: usize = 128;
pub const DEFAULT_MAX_LEN: usize = 500;
/// Width of the token-length histogram buckets in [`CorpusManifest`].
pub const HISTOGRAM_BUCKET: u32 = 50;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed JSON on line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("document on line {line} has an empty id")]
    EmptyId { line: usize },
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub id: u64,
    pub doc_id: String,
    pub ordinal: u32,
    pub text: String,
    pub token_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Plain,
}

/// Streaming document reader. Empty documents are skipped and counted.
pub struct DocumentReader<R> {
    lines: io::Lines<R>,
    format: InputFormat,
    source: String,
    line_no: usize,
    next_plain: usize,
    skipped_empty: usize,
    done: bool,
}

impl DocumentReader<BufReader<File>> {
    pub fn open(path: &Path, format: InputFormat) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let tag = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::new(BufReader::new(file), format, tag))
    }
}

impl<R: BufRead> DocumentReader<R> {
    pub fn new(reader: R, format: InputFormat, source: impl Into<String>) -> Self {
        Self {
            lines: reader.lines(),
            format,
            source: source.into(),
            line_no: 0,
            next_plain: 0,
            skipped_empty: 0,
            done: false,
        }
    }

    pub fn skipped_empty(&self) -> usize {
        self.skipped_empty
    }

    fn io_err(&self, source: io::Error) -> CorpusError {
        CorpusError::Io {
            path: PathBuf::from(&self.source),
            source,
        }
    }

    fn next_jsonl(&mut self) -> Option<Result<Document, CorpusError>> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            text: String,
            #[serde(default)]
            source: Option<String>,
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(self.io_err(e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = match serde_json::from_str(&line) {
                Ok(p) => p,
                Err(e) => {
                    return Some(Err(CorpusError::MalformedLine {
                        line: self.line_no,
                        message: e.to_string(),
                    }))
                }
            };
            if parsed.id.is_empty() {
                return Some(Err(CorpusError::EmptyId { line: self.line_no }));
            }
            if parsed.text.trim().is_empty() {
                self.skipped_empty += 1;
                continue;
            }
            return Some(Ok(Document {
                id: parsed.id,
                text: parsed.text,
                source: parsed.source.unwrap_or_else(|| self.source.clone()),
            }));
        }
    }

    fn next_plain(&mut self) -> Option<Result<Document, CorpusError>> {
        if self.done {
            return None;
        }
        let mut block: Vec<String> = Vec::new();
        loop {
            match self.lines.next() {
                None => {
                    self.done = true;
                    break;
                }
                Some(Err(e)) => return Some(Err(self.io_err(e))),
                Some(Ok(l)) => {
                    self.line_no += 1;
                    if l.trim().is_empty() {
                        if block.is_empty() {
                            // blank line with no preceding text: an empty document
                            if self.line_no > 1 {
                                self.skipped_empty += 1;
                            }
                            continue;
                        }
                        break;
                    }
                    block.push(l);
                }
            }
        }
        if block.is_empty() {
            return None;
        }
        let id = format!("doc-{}", self.next_plain);
        self.next_plain += 1;
        Some(Ok(Document {
            id,
            text: block.join("\n"),
            source: self.source.clone(),
        }))
    }
}

impl<R: BufRead> Iterator for DocumentReader<R> {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.format {
            InputFormat::Jsonl => self.next_jsonl(),
            InputFormat::Plain => self.next_plain(),
        }
    }
}

/// Read every document from `path`. Returns the documents and the number of
/// skipped empty documents.
pub fn ingest(path: &Path, format: InputFormat) -> Result<(Vec<Document>, usize), CorpusError> {
    let mut reader = DocumentReader::open(path, format)?;
    let docs = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((docs, reader.skipped_empty()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitParams {
    pub min_merge: usize,
    pub max_len: usize,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            min_merge: DEFAULT_MIN_MERGE,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub ordinal: u32,
    pub text: String,
    pub token_count: u32,
    pub dropped: bool,
}

/// Split one document into merged segments, in document order. Segments
/// flagged `dropped` exceeded `max_len` and must not be stored.
pub fn split_and_merge(doc: &Document, tokenizer: &Tokenizer, params: SplitParams) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    let mut buffer: Option<(String, usize)> = None;
    let emit = |text: String, n: usize, out: &mut Vec<Segment>| {
        out.push(Segment {
            ordinal: out.len() as u32,
            token_count: n as u32,
            dropped: n > params.max_len,
            text,
        });
    };
    for line in doc.text.split('\n') {
        let n = tokenizer.count(line);
        if n == 0 {
            continue;
        }
        buffer = match buffer.take() {
            None => Some((line.to_string(), n)),
            // the joining newline is itself one token
            Some((buf, bn)) if bn + 1 + n < params.min_merge => Some((format!("{buf}\n{line}"), bn + 1 + n)),
            Some((buf, bn)) => {
                emit(buf, bn, &mut out);
                Some((line.to_string(), n))
            }
        };
    }
    if let Some((buf, bn)) = buffer {
        emit(buf, bn, &mut out);
    }
    out
}

/// Finalized, id-addressable paragraph collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParagraphStore {
    paragraphs: Vec<Paragraph>,
    n_docs: u64,
    dropped_overlong: u64,
}

impl ParagraphStore {
    /// Build a store from documents. Splitting runs in parallel; ids are
    /// assigned afterwards in document order.
    pub fn build(docs: &[Document], tokenizer: &Tokenizer, params: SplitParams) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for d in docs {
            if !seen.insert(d.id.as_str()) {
                return Err(CorpusError::DuplicateDocId(d.id.clone()));
            }
        }
        let shards: Vec<Vec<Segment>> = docs
            .par_iter()
            .map(|d| split_and_merge(d, tokenizer, params))
            .collect();
        let mut store = ParagraphStore {
            n_docs: docs.len() as u64,
            ..Default::default()
        };
        for (doc, segs) in docs.iter().zip(shards) {
            for s in segs {
                if s.dropped {
                    store.dropped_overlong += 1;
                    continue;
                }
                let id = store.paragraphs.len() as u64;
                store.paragraphs.push(Paragraph {
                    id,
                    doc_id: doc.id.clone(),
                    ordinal: s.ordinal,
                    text: s.text,
                    token_count: s.token_count,
                });
            }
        }
        Ok(store)
    }

    /// Wrap already-built paragraphs. Ids must be dense `0..n` in order.
    pub fn from_paragraphs(paragraphs: Vec<Paragraph>, n_docs: u64, dropped_overlong: u64) -> Self {
        debug_assert!(paragraphs.iter().enumerate().all(|(i, p)| p.id == i as u64));
        Self {
            paragraphs,
            n_docs,
            dropped_overlong,
        }
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Paragraph> {
        self.paragraphs.get(usize::try_from(id).ok()?)
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn ids(&self) -> Vec<u64> {
        self.paragraphs.iter().map(|p| p.id).collect()
    }

    pub fn n_docs(&self) -> u64 {
        self.n_docs
    }

    pub fn dropped_overlong(&self) -> u64 {
        self.dropped_overlong
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        for p in &self.paragraphs {
            let line = serde_json::to_string(p).expect("paragraph serializes");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Read a paragraph store written by [`ParagraphStore::write_jsonl`].
    /// Document and drop counts come from the manifest.
    pub fn read_jsonl(path: &Path, manifest: &CorpusManifest) -> Result<Self, CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut paragraphs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Paragraph = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
            if p.id != paragraphs.len() as u64 {
                return Err(CorpusError::MalformedLine {
                    line: i + 1,
                    message: format!("paragraph ids must be dense, expected {}", paragraphs.len()),
                });
            }
            paragraphs.push(p);
        }
        Ok(Self::from_paragraphs(paragraphs, manifest.n_docs, manifest.dropped_overlong))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lo: u32,
    pub hi: u32,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub n_docs: u64,
    pub n_paragraphs: u64,
    pub mean_paragraph_tokens: f64,
    pub token_histogram: Vec<HistogramBucket>,
    pub dropped_overlong: u64,
}

pub fn corpus_stats(store: &ParagraphStore) -> Result<CorpusManifest, CorpusError> {
    if store.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let max_tokens = store.paragraphs().iter().map(|p| p.token_count).max().unwrap_or(1);
    let n_buckets = max_tokens.saturating_sub(1) / HISTOGRAM_BUCKET + 1;
    let mut token_histogram: Vec<HistogramBucket> = (0..n_buckets)
        .map(|b| HistogramBucket {
            lo: b * HISTOGRAM_BUCKET + 1,
            hi: (b + 1) * HISTOGRAM_BUCKET,
            count: 0,
        })
        .collect();
    let mut total: u64 = 0;
    for p in store.paragraphs() {
        total += u64::from(p.token_count);
        let b = (p.token_count.max(1) - 1) / HISTOGRAM_BUCKET;
        token_histogram[b as usize].count += 1;
    }
    Ok(CorpusManifest {
        n_docs: store.n_docs(),
        n_paragraphs: store.len() as u64,
        mean_paragraph_tokens: total as f64 / store.len() as f64,
        token_histogram,
        dropped_overlong: store.dropped_overlong(),
    })
}

/// Build a tokenizer over the documents' text.
pub fn build_tokenizer(docs: &[Document], lowercase: bool, max_vocab: Option<usize>, min_count: u64) -> Tokenizer {
    let mut b = TokenizerBuilder::new(lowercase);
    for d in docs {
        b.feed(&d.text);
    }
    b.build(max_vocab, min_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize, w: &str) -> String {
        vec![w; n].join(" ")
    }

    fn tok() -> Tokenizer {
        TokenizerBuilder::new(true).build(None, 1)
    }

    fn doc(text: &str) -> Document {
        Document {
            id: "d".into(),
            text: text.into(),
            source: String::new(),
        }
    }

    #[test]
    fn jsonl_line_maps_fields() {
        let r = DocumentReader::new(io::Cursor::new("{\"id\":\"a\",\"text\":\"x\\ny\"}\n"), InputFormat::Jsonl, "t");
        let docs: Vec<_> = r.collect::<Result<_, _>>().unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].id, "a");
        assert_eq!(docs[0].text, "x\ny");
        assert_eq!(docs[0].source, "t");
    }

    #[test]
    fn plain_documents_split_on_blank_lines() {
        let r = DocumentReader::new(io::Cursor::new("p1\n\np2"), InputFormat::Plain, "t");
        let docs: Vec<_> = r.collect::<Result<_, _>>().unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["doc-0", "doc-1"]);
        assert_eq!(docs[1].text, "p2");
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let input = "{\"id\":\"a\",\"text\":\"x\"}\n{bad\n";
        let mut r = DocumentReader::new(io::Cursor::new(input), InputFormat::Jsonl, "t");
        assert!(r.next().unwrap().is_ok());
        match r.next().unwrap() {
            Err(CorpusError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_documents_are_skipped_and_counted() {
        let input = "{\"id\":\"a\",\"text\":\"  \"}\n{\"id\":\"b\",\"text\":\"x\"}\n";
        let mut r = DocumentReader::new(io::Cursor::new(input), InputFormat::Jsonl, "t");
        let docs: Vec<_> = r.by_ref().collect::<Result<_, _>>().unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(r.skipped_empty(), 1);
    }

    #[test]
    fn short_lines_merge_until_threshold() {
        let text = [words(50, "a"), words(60, "b"), words(200, "c")].join("\n");
        let segs = split_and_merge(&doc(&text), &tok(), SplitParams::default());
        let counts: Vec<_> = segs.iter().map(|s| s.token_count).collect();
        // 50 + newline + 60
        assert_eq!(counts, [111, 200]);
        assert!(segs[0].text.contains('\n'));
        assert!(segs.iter().all(|s| !s.dropped));
    }

    #[test]
    fn overlong_paragraph_is_dropped() {
        let store = ParagraphStore::build(&[doc(&words(600, "x"))], &tok(), SplitParams::default()).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.dropped_overlong(), 1);
    }

    #[test]
    fn mid_length_paragraph_passes_through() {
        let text = words(300, "y");
        let segs = split_and_merge(&doc(&text), &tok(), SplitParams::default());
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].text, text);
        assert_eq!(segs[0].token_count, 300);
    }

    #[test]
    fn trailing_short_buffer_is_kept() {
        let text = [words(200, "a"), words(5, "b")].join("\n");
        let segs = split_and_merge(&doc(&text), &tok(), SplitParams::default());
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].token_count, 5);
    }

    #[test]
    fn split_is_idempotent_and_conserves_text() {
        let text = "alpha beta\n\ngamma\n".to_string() + &words(520, "z") + "\ndelta epsilon\n" + &words(140, "w");
        let d = doc(&text);
        let a = split_and_merge(&d, &tok(), SplitParams::default());
        let b = split_and_merge(&d, &tok(), SplitParams::default());
        assert_eq!(a, b);
        let rebuilt: Vec<&str> = a.iter().map(|s| s.text.as_str()).collect();
        let original: Vec<&str> = text.split('\n').filter(|l| count_tokens(l) > 0).collect();
        assert_eq!(rebuilt.join("\n"), original.join("\n"));
        assert!(a.iter().any(|s| s.dropped));
    }

    #[test]
    fn stats_mean_and_empty_error() {
        let docs = vec![
            Document { id: "a".into(), text: words(100, "a"), source: String::new() },
            Document { id: "b".into(), text: words(200, "b"), source: String::new() },
        ];
        let store = ParagraphStore::build(&docs, &tok(), SplitParams::default()).unwrap();
        let m = corpus_stats(&store).unwrap();
        assert_eq!(m.mean_paragraph_tokens, 150.0);
        assert_eq!(m.n_paragraphs, 2);
        assert!(matches!(corpus_stats(&ParagraphStore::default()), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn duplicate_doc_ids_are_rejected() {
        let d = doc("x");
        assert!(matches!(
            ParagraphStore::build(&[d.clone(), d], &tok(), SplitParams::default()),
            Err(CorpusError::DuplicateDocId(_))
        ));
    }
}
