//! Corpus cache layout:
//!
//! ```text
//! "DEISICORP1" | u64 LE header length | JSON header
//! | train arrays | test arrays
//! ```
//!
//! Each split stores four little-endian `u32` arrays back to back: origins,
//! targets, prefix lengths (one entry per example) and the concatenated
//! prefix items.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, CorpusStats, Example, Session, SessionCorpus, Vocabulary};

pub const CORPUS_MAGIC: &[u8; 10] = b"DEISICORP1";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    examples: usize,
    prefix_items: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    version: u32,
    vocabulary: Vec<String>,
    stats: CorpusStats,
    train: SplitHeader,
    test: SplitHeader,
}

fn split_header(examples: &[Example]) -> SplitHeader {
    SplitHeader {
        examples: examples.len(),
        prefix_items: examples.iter().map(|e| e.prefix.len()).sum(),
    }
}

fn put_u32s(out: &mut Vec<u8>, values: impl Iterator<Item = usize>) {
    for v in values {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

fn encode_split(out: &mut Vec<u8>, examples: &[Example]) {
    put_u32s(out, examples.iter().map(|e| e.origin));
    put_u32s(out, examples.iter().map(|e| e.target));
    put_u32s(out, examples.iter().map(|e| e.prefix.len()));
    put_u32s(out, examples.iter().flat_map(|e| e.prefix.items.iter().copied()));
}

pub fn encode(corpus: &SessionCorpus) -> Result<Vec<u8>, CorpusError> {
    let header = CacheHeader {
        version: CACHE_VERSION,
        vocabulary: corpus.vocabulary.ids().to_vec(),
        stats: corpus.stats.clone(),
        train: split_header(&corpus.train),
        test: split_header(&corpus.test),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CorpusError::InvalidCache(e.to_string()))?;
    let mut out = Vec::with_capacity(CORPUS_MAGIC.len() + 8 + json.len());
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    encode_split(&mut out, &corpus.train);
    encode_split(&mut out, &corpus.test);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorpusError> {
        let end = self.pos.checked_add(n).ok_or(CorpusError::TruncatedCache)?;
        let chunk = self.bytes.get(self.pos..end).ok_or(CorpusError::TruncatedCache)?;
        self.pos = end;
        Ok(chunk)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>, CorpusError> {
        let raw = self.take(n.checked_mul(4).ok_or(CorpusError::TruncatedCache)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect())
    }
}

fn decode_split(r: &mut Reader<'_>, h: &SplitHeader, num_items: usize) -> Result<Vec<Example>, CorpusError> {
    let origins = r.u32s(h.examples)?;
    let targets = r.u32s(h.examples)?;
    let lens = r.u32s(h.examples)?;
    let flat = r.u32s(h.prefix_items)?;
    if lens.iter().sum::<usize>() != flat.len() {
        return Err(CorpusError::InvalidCache("prefix lengths disagree with item count".into()));
    }
    if targets.iter().chain(&flat).any(|&i| i >= num_items) {
        return Err(CorpusError::InvalidCache("item index outside vocabulary".into()));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(h.examples);
    for i in 0..h.examples {
        if lens[i] == 0 {
            return Err(CorpusError::InvalidCache("empty prefix".into()));
        }
        out.push(Example {
            prefix: Session::new(flat[offset..offset + lens[i]].to_vec()),
            target: targets[i],
            origin: origins[i],
        });
        offset += lens[i];
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<SessionCorpus, CorpusError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CORPUS_MAGIC.len()).map_err(|_| CorpusError::InvalidCache("bad magic".into()))? != CORPUS_MAGIC {
        return Err(CorpusError::InvalidCache("bad magic".into()));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: CacheHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| CorpusError::InvalidCache(format!("header: {e}")))?;
    if header.version != CACHE_VERSION {
        return Err(CorpusError::InvalidCache(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let vocabulary = Vocabulary::from_ids(header.vocabulary)?;
    let train = decode_split(&mut r, &header.train, vocabulary.len())?;
    let test = decode_split(&mut r, &header.test, vocabulary.len())?;
    if r.pos != bytes.len() {
        return Err(CorpusError::InvalidCache("trailing bytes".into()));
    }
    Ok(SessionCorpus {
        vocabulary,
        train,
        test,
        stats: header.stats,
    })
}

pub fn write_cache(corpus: &SessionCorpus, path: &Path) -> Result<(), CorpusError> {
    fs::write(path, encode(corpus)?).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_cache(path: &Path) -> Result<SessionCorpus, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
