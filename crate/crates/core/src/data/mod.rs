//! Corpus ingestion and batching.
//!
//! Text is tokenized at the byte level: byte `b` becomes id `b`, and a
//! separator id (256) is placed between documents, for a vocabulary of 257.
//! The last `val_frac` of the token stream is held out for validation.
//!
//! Training windows are drawn by a counter-based generator keyed on
//! `(seed, step, slot)`, so any batch can be recomputed independently.
//!
//! # Cache file
//!
//! ```text
//! magic     8 bytes  "QPTCORP1"
//! version   u32 LE   (1)
//! vocab     u32 LE
//! total     u64 LE   number of tokens
//! train     u64 LE   number of training tokens (validation = total - train)
//! val_frac  f64 LE
//! digest    32 bytes SHA-256 of the source documents
//! body      total x u16 LE token ids
//! ```

pub mod synthetic;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenBlock;

pub const VOCAB_SIZE: usize = 257;
pub const SEPARATOR: u32 = 256;
pub const DEFAULT_VAL_FRAC: f64 = 0.005;

const MAGIC: &[u8; 8] = b"QPTCORP1";
const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCorpus {
    ids: Vec<u32>,
    vocab_size: usize,
    train_len: usize,
    val_frac: f64,
    digest: [u8; 32],
}

impl TokenizedCorpus {
    /// Tokenizes in-memory documents.
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D], val_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_frac) {
            return Err(Error::InvalidConfig(format!("val_frac {val_frac} outside [0, 1)")));
        }
        let total: usize = docs.iter().map(|d| d.as_ref().len()).sum();
        if total == 0 {
            return Err(Error::Data("corpus is empty".into()));
        }
        let mut ids = Vec::with_capacity(total + docs.len());
        let mut hasher = Sha256::new();
        for (i, doc) in docs.iter().enumerate() {
            let bytes = doc.as_ref();
            if i > 0 {
                ids.push(SEPARATOR);
            }
            ids.extend(bytes.iter().map(|&b| b as u32));
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(bytes);
        }
        let val_len = (ids.len() as f64 * val_frac).round() as usize;
        let train_len = ids.len() - val_len;
        Ok(Self {
            ids,
            vocab_size: VOCAB_SIZE,
            train_len,
            val_frac,
            digest: hasher.finalize().into(),
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn train(&self) -> &[u32] {
        &self.ids[..self.train_len]
    }

    pub fn val(&self) -> &[u32] {
        &self.ids[self.train_len..]
    }

    pub fn train_len(&self) -> usize {
        self.train_len
    }

    pub fn val_frac(&self) -> f64 {
        self.val_frac
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    /// `batch` training windows of `seq + 1` tokens for optimizer step `step`.
    ///
    /// Window `slot` starts at a position drawn from a ChaCha stream keyed by
    /// `seed`, positioned by `(step, slot)`; the result depends on nothing else.
    pub fn batch(&self, step: u64, seed: u64, batch: usize, seq: usize) -> Result<TokenBlock> {
        let window = seq + 1;
        if self.train_len < window {
            return Err(Error::Data(format!(
                "training split has {} tokens, need more than {seq}",
                self.train_len
            )));
        }
        let starts = self.train_len - window + 1;
        let mut ids = Vec::with_capacity(batch * window);
        for slot in 0..batch {
            let start = window_start(seed, step, slot as u64, starts);
            ids.extend_from_slice(&self.ids[start..start + window]);
        }
        TokenBlock::new(batch, window, ids)
    }

    /// Consecutive non-overlapping validation windows of `seq + 1` tokens, at most `max`.
    pub fn val_windows(&self, seq: usize, max: usize) -> Vec<&[u32]> {
        self.val().chunks_exact(seq + 1).take(max).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        header.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        header.extend_from_slice(&(self.train_len as u64).to_le_bytes());
        header.extend_from_slice(&self.val_frac.to_le_bytes());
        header.extend_from_slice(&self.digest);
        w.write_all(&header).map_err(|e| Error::io(path, e))?;
        for &id in &self.ids {
            w.write_all(&(id as u16).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("not a corpus cache"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(8) != CACHE_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let vocab_size = u32_at(12) as usize;
        let total = u64_at(16) as usize;
        let train_len = u64_at(24) as usize;
        let val_frac = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let digest: [u8; 32] = bytes[40..72].try_into().unwrap();
        let body = &bytes[HEADER_LEN..];
        if body.len() != total * 2 || train_len > total {
            return Err(corrupt("length fields do not match body"));
        }
        let ids: Vec<u32> = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect();
        if ids.iter().any(|&id| id as usize >= vocab_size) {
            return Err(corrupt("token id out of vocabulary"));
        }
        Ok(Self {
            ids,
            vocab_size,
            train_len,
            val_frac,
            digest,
        })
    }
}

/// Reads and tokenizes files, one document per file.
pub fn prepare<P: AsRef<Path>>(paths: &[P], val_frac: f64) -> Result<TokenizedCorpus> {
    if paths.is_empty() {
        return Err(Error::Data("no corpus files given".into()));
    }
    let docs = paths
        .iter()
        .map(|p| fs::read(p.as_ref()).map_err(|e| Error::io(p.as_ref(), e)))
        .collect::<Result<Vec<_>>>()?;
    TokenizedCorpus::from_documents(&docs, val_frac)
}

fn window_start(seed: u64, step: u64, slot: u64, starts: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.set_word_pos(slot as u128 * 2);
    let x = rng.next_u64();
    ((x as u128 * starts as u128) >> 64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_ids() {
        let c = TokenizedCorpus::from_documents(&["ab"], 0.0).unwrap();
        assert_eq!(c.ids(), &[97, 98]);
        assert_eq!(c.vocab_size(), 257);
    }

    #[test]
    fn separator_between_documents() {
        let c = TokenizedCorpus::from_documents(&["ab", "c"], 0.0).unwrap();
        assert_eq!(c.ids(), &[97, 98, SEPARATOR, 99]);
    }

    #[test]
    fn empty_corpus_is_error() {
        let docs: [&str; 2] = ["", ""];
        assert!(matches!(TokenizedCorpus::from_documents(&docs, 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn digest_tracks_content() {
        let a = TokenizedCorpus::from_documents(&["hello", "world"], 0.1).unwrap();
        let b = TokenizedCorpus::from_documents(&["hello", "world"], 0.1).unwrap();
        let c = TokenizedCorpus::from_documents(&["hello", "worle"], 0.1).unwrap();
        let d = TokenizedCorpus::from_documents(&["hellow", "orld"], 0.1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.digest(), c.digest());
        assert_ne!(a.digest(), d.digest());
    }

    #[test]
    fn split_is_tail_fraction() {
        let text = vec![b'x'; 1000];
        let c = TokenizedCorpus::from_documents(&[text], 0.005).unwrap();
        assert_eq!(c.val().len(), 5);
        assert_eq!(c.train().len(), 995);
    }

    #[test]
    fn batch_is_pure_and_shaped() {
        let text: Vec<u8> = (0..5000u32).map(|i| (i % 251) as u8).collect();
        let c = TokenizedCorpus::from_documents(&[text], 0.1).unwrap();
        let a = c.batch(7, 42, 4, 16).unwrap();
        let b = c.batch(7, 42, 4, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.batch, a.cols), (4, 17));
        assert_ne!(a, c.batch(8, 42, 4, 16).unwrap());
        assert_ne!(a, c.batch(7, 43, 4, 16).unwrap());
        // slot k of a larger batch equals slot k of a smaller one
        let wide = c.batch(7, 42, 6, 16).unwrap();
        assert_eq!(&wide.ids[..a.ids.len()], a.ids.as_slice());
    }

    #[test]
    fn windows_stay_inside_train_split() {
        // train tokens are < 100, validation tokens are >= 200
        let mut text: Vec<u8> = (0..900u32).map(|i| (i % 100) as u8).collect();
        text.extend(std::iter::repeat_n(250u8, 100));
        let c = TokenizedCorpus::from_documents(&[text], 0.1).unwrap();
        assert_eq!(c.train_len(), 900);
        for step in 0..500 {
            let b = c.batch(step, 1, 8, 31).unwrap();
            assert!(b.ids.iter().all(|&id| id < 100));
        }
    }

    #[test]
    fn too_short_corpus_is_error() {
        let c = TokenizedCorpus::from_documents(&["abc"], 0.0).unwrap();
        assert!(c.batch(0, 0, 1, 3).is_err());
        assert!(c.batch(0, 0, 1, 2).is_ok());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = TokenizedCorpus::from_documents(&["some text", "more"], 0.2).unwrap();
        c.save(&path).unwrap();
        assert_eq!(TokenizedCorpus::load(&path).unwrap(), c);
        let len = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, HEADER_LEN + 2 * c.len());

        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(TokenizedCorpus::load(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn prepare_names_missing_path() {
        let err = prepare(&["/definitely/not/here.txt"], 0.1).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.txt"));
    }
}
