//! Parsed-document loading and chunking.
//!
//! Parser output (text, table, image-caption and formula blocks in reading
//! order) is normalized into [`Chunk`]s. Text blocks of a document are joined
//! into a single token stream and cut into overlapping windows; every other
//! block becomes exactly one standalone chunk.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{tokenize, tokenize_with_spans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Table,
    Image,
    Formula,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Table => "table",
            Modality::Image => "image",
            Modality::Formula => "formula",
        }
    }
}

/// One layout block emitted by a document parser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub block_type: Modality,
    pub page: u32,
    pub content: String,
    #[serde(default)]
    pub media_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsedDocument {
    pub doc_id: String,
    pub title: String,
    pub blocks: Vec<Block>,
}

impl ParsedDocument {
    fn validate(&self) -> Result<()> {
        if self.doc_id.is_empty() {
            return Err(Error::MalformedInput("doc_id must be nonempty".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::EmptyDocument(self.doc_id.clone()));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if block.page < 1 {
                return Err(Error::MalformedInput(format!("block {i}: page must be >= 1")));
            }
            let captionless_image =
                block.block_type == Modality::Image && block.media_path.is_some();
            if block.content.is_empty() && !captionless_image {
                return Err(Error::MalformedInput(format!("block {i}: empty content")));
            }
        }
        Ok(())
    }
}

/// Parse a document from its JSON representation.
pub fn parse_document(json: &str) -> Result<ParsedDocument> {
    let doc: ParsedDocument =
        serde_json::from_str(json).map_err(|e| Error::MalformedInput(e.to_string()))?;
    doc.validate()?;
    Ok(doc)
}

pub fn load_parsed_document(path: &Path) -> Result<ParsedDocument> {
    let text = fs::read_to_string(path)?;
    parse_document(&text).map_err(|e| match e {
        Error::MalformedInput(msg) => Error::MalformedInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// The unified evidence unit shared by every store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub page_span: (u32, u32),
    pub modality: Modality,
    pub text: String,
    pub media_path: Option<String>,
    pub token_count: usize,
    /// Token range within the document's text stream. Non-text chunks carry
    /// the empty range at the stream position where they occur.
    pub parent_span: (usize, usize),
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkPolicy {
    pub window: usize,
    pub overlap: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        ChunkPolicy {
            window: 512,
            overlap: 64,
        }
    }
}

impl ChunkPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.window <= self.overlap {
            return Err(Error::InvalidPolicy {
                window: self.window,
                overlap: self.overlap,
            });
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        self.window - self.overlap
    }
}

/// Half-open token windows `[start, end)` covering `n` tokens.
pub fn window_spans(n: usize, policy: ChunkPolicy) -> Result<Vec<(usize, usize)>> {
    policy.validate()?;
    let mut spans = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + policy.window).min(n);
        spans.push((start, end));
        if end == n {
            break;
        }
        start += policy.stride();
    }
    Ok(spans)
}

struct StreamToken {
    byte_start: usize,
    byte_end: usize,
    page: u32,
}

pub fn chunk_document(doc: &ParsedDocument, policy: ChunkPolicy) -> Result<Vec<Chunk>> {
    policy.validate()?;

    // Join text blocks with a newline so tokens never fuse across blocks.
    let mut stream = String::new();
    let mut tokens: Vec<StreamToken> = Vec::new();
    // (stream position, block index) for every non-text block.
    let mut standalone: Vec<(usize, usize)> = Vec::new();
    for (i, block) in doc.blocks.iter().enumerate() {
        if block.block_type == Modality::Text {
            if !stream.is_empty() {
                stream.push('\n');
            }
            let offset = stream.len();
            stream.push_str(&block.content);
            tokens.extend(tokenize_with_spans(&block.content).into_iter().map(|t| {
                StreamToken {
                    byte_start: offset + t.span.start,
                    byte_end: offset + t.span.end,
                    page: block.page,
                }
            }));
        } else {
            standalone.push((tokens.len(), i));
        }
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("title".to_string(), doc.title.clone());

    // (sort position, tiebreak, chunk without id)
    let mut pending: Vec<(usize, u8, Chunk)> = Vec::new();
    for (start, end) in window_spans(tokens.len(), policy)? {
        let first = &tokens[start];
        let last = &tokens[end - 1];
        let text = stream[first.byte_start..last.byte_end].to_string();
        let pages = tokens[start..end].iter().map(|t| t.page);
        let page_span = (pages.clone().min().unwrap_or(1), pages.max().unwrap_or(1));
        pending.push((
            start,
            1,
            Chunk {
                chunk_id: String::new(),
                doc_id: doc.doc_id.clone(),
                page_span,
                modality: Modality::Text,
                token_count: end - start,
                text,
                media_path: None,
                parent_span: (start, end),
                metadata: metadata.clone(),
            },
        ));
    }
    for (pos, i) in standalone {
        let block = &doc.blocks[i];
        pending.push((
            pos,
            0,
            Chunk {
                chunk_id: String::new(),
                doc_id: doc.doc_id.clone(),
                page_span: (block.page, block.page),
                modality: block.block_type,
                token_count: tokenize(&block.content).len(),
                text: block.content.clone(),
                media_path: block.media_path.clone(),
                parent_span: (pos, pos),
                metadata: metadata.clone(),
            },
        ));
    }
    // A non-text block sorts before a window that starts at the same position
    // because it precedes those tokens in reading order. Sorting is stable, so
    // standalone blocks at the same position keep file order.
    pending.sort_by_key(|(pos, tiebreak, _)| (*pos, *tiebreak));

    Ok(pending
        .into_iter()
        .enumerate()
        .map(|(ordinal, (_, _, mut chunk))| {
            chunk.chunk_id = chunk_id(&doc.doc_id, ordinal);
            chunk
        })
        .collect())
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}:{ordinal:04}")
}

/// Chunk every document, rejecting duplicate doc_ids.
pub fn chunk_corpus(docs: &[ParsedDocument], policy: ChunkPolicy) -> Result<Vec<Chunk>> {
    policy.validate()?;
    let mut seen = HashSet::new();
    for doc in docs {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(Error::DuplicateDocId(doc.doc_id.clone()));
        }
    }
    let mut out = Vec::new();
    for doc in docs {
        out.extend(chunk_document(doc, policy)?);
    }
    Ok(out)
}

/// Write chunks as JSON Lines.
pub fn write_corpus<W: Write>(chunks: &[Chunk], mut out: W) -> Result<()> {
    for chunk in chunks {
        serde_json::to_writer(&mut out, chunk)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Chunk `docs` and write the resulting corpus file. Returns the chunk count.
pub fn build_corpus(docs: &[ParsedDocument], policy: ChunkPolicy, path: &Path) -> Result<usize> {
    let chunks = chunk_corpus(docs, policy)?;
    let mut buf = Vec::new();
    write_corpus(&chunks, &mut buf)?;
    fs::write(path, buf)?;
    Ok(chunks.len())
}

/// Load every `*.json` document in `dir`, sorted by file name.
pub fn load_document_dir(dir: &Path) -> Result<Vec<ParsedDocument>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_parsed_document(p)).collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<Chunk>> {
    let file = fs::File::open(path)?;
    let mut chunks = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: Chunk = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedInput(format!("corpus line {}: {e}", lineno + 1)))?;
        chunks.push(chunk);
    }
    Ok(chunks)
}

/// In-memory corpus with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(chunks: Vec<Chunk>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(chunks.len());
        for (i, c) in chunks.iter().enumerate() {
            if by_id.insert(c.chunk_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(c.chunk_id.clone()));
            }
        }
        Ok(Corpus { chunks, by_id })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Corpus::new(read_corpus(path)?)
    }

    pub fn get(&self, chunk_id: &str) -> Option<&Chunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.by_id.contains_key(chunk_id)
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Chunks of one document in corpus order.
    pub fn document_chunks<'a>(&'a self, doc_id: &'a str) -> impl Iterator<Item = &'a Chunk> + 'a {
        self.chunks.iter().filter(move |c| c.doc_id == doc_id)
    }
}
