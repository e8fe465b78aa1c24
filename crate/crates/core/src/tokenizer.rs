//! Byte-level BPE tokenizer.
//!
//! Ids `0..256` are raw bytes, merges follow in rank order, and the specials
//! BOS, EOS and PAD take the last three ids. Pretokens are maximal runs of
//! non-whitespace bytes; every ASCII whitespace byte is a pretoken of its own.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_SPECIALS: usize = 3;
const GENERAL_TEXT: &str = include_str!("../data/general.txt");

type Pair = (u32, u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, u32>,
    /// Byte expansion of every non-special id.
    symbols: Vec<Vec<u8>>,
}

/// Pretokens of `text` as byte slices.
pub fn pretokenize(text: &str) -> impl Iterator<Item = &[u8]> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    std::iter::from_fn(move || {
        if pos >= bytes.len() {
            return None;
        }
        let start = pos;
        if bytes[pos].is_ascii_whitespace() {
            pos += 1;
        } else {
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        Some(&bytes[start..pos])
    })
}

impl TokenizerModel {
    /// The untrained tokenizer: bytes plus specials.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges is always valid")
    }

    fn from_merges(merges: Vec<Pair>) -> Result<Self> {
        let mut symbols: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let avail = symbols.len() as u32;
            if a >= avail || b >= avail {
                return Err(Error::InvalidArgument(format!(
                    "merge {rank} references an unavailable symbol"
                )));
            }
            let mut s = symbols[a as usize].clone();
            s.extend_from_slice(&symbols[b as usize]);
            symbols.push(s);
            ranks.insert((a, b), rank as u32);
        }
        Ok(TokenizerModel {
            merges,
            ranks,
            symbols,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + NUM_SPECIALS
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn bos(&self) -> u32 {
        self.symbols.len() as u32
    }

    pub fn eos(&self) -> u32 {
        self.bos() + 1
    }

    pub fn pad(&self) -> u32 {
        self.bos() + 2
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.bos()
    }

    /// Merges as byte-string pairs, in rank order.
    pub fn merges(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.merges
            .iter()
            .map(|&(a, b)| (self.symbols[a as usize].clone(), self.symbols[b as usize].clone()))
            .collect()
    }

    /// Byte expansion of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.symbols.get(id as usize).map(Vec::as_slice)
    }

    /// Greedy BPE training.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(Error::Empty("tokenizer corpus is empty".into()));
        }
        if vocab_size <= 256 + NUM_SPECIALS {
            return Err(Error::InvalidArgument(format!(
                "vocab_size must exceed {} (256 bytes + {NUM_SPECIALS} specials), got {vocab_size}",
                256 + NUM_SPECIALS
            )));
        }
        let mut word_counts: HashMap<&[u8], u64> = HashMap::new();
        for text in corpus {
            for pt in pretokenize(text.as_ref()) {
                *word_counts.entry(pt).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> = word_counts
            .into_iter()
            .filter(|(w, _)| w.len() > 1)
            .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
            .collect();
        words.sort();

        let budget = vocab_size - 256 - NUM_SPECIALS;
        let mut merges = Vec::with_capacity(budget);
        let mut symbols: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut pair_counts: HashMap<Pair, u64> = HashMap::new();
        while merges.len() < budget {
            pair_counts.clear();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pair_counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                        let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                        // smaller pair wins ties
                        kb.cmp(&ka).then_with(|| pb.cmp(pa))
                    })
                })
                .map(|(p, _)| *p);
            let Some(pair) = best else { break };
            let new_id = symbols.len() as u32;
            let mut s = symbols[pair.0 as usize].clone();
            s.extend_from_slice(&symbols[pair.1 as usize]);
            symbols.push(s);
            merges.push(pair);
            for (w, _) in &mut words {
                merge_in_place(w, pair, new_id);
            }
            words.retain(|(w, _)| w.len() > 1);
        }
        Self::from_merges(merges)
    }

    fn encode_pretoken(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_in_place(&mut ids, pair, 256 + rank);
        }
        out.extend_from_slice(&ids);
    }

    pub fn encode(&self, text: &str, add_specials: bool) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2 + 2);
        if add_specials {
            out.push(self.bos());
        }
        for pt in pretokenize(text) {
            self.encode_pretoken(pt, &mut out);
        }
        if add_specials {
            out.push(self.eos());
        }
        out
    }

    /// Concatenated byte expansions of non-special tokens. Invalid UTF-8 (from a
    /// sequence cut mid-codepoint) is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.vocab_size(),
                });
            }
            if let Some(s) = self.symbols.get(id as usize) {
                bytes.extend_from_slice(s);
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Encoded tokens (no specials) per UTF-8 byte.
    pub fn compression<S: AsRef<str>>(&self, corpus: &[S]) -> Result<f64> {
        let bytes: usize = corpus.iter().map(|s| s.as_ref().len()).sum();
        if bytes == 0 {
            return Err(Error::Empty("compression of an empty corpus".into()));
        }
        let tokens: usize = corpus.iter().map(|s| self.encode(s.as_ref(), false).len()).sum();
        Ok(tokens as f64 / bytes as f64)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("bpe-v1\n");
        let _ = writeln!(s, "vocab_size={} specials=BOS,EOS,PAD", self.vocab_size());
        for (a, b) in self.merges() {
            let _ = writeln!(s, "{} {}", hex::encode(a), hex::encode(b));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines();
        if lines.next() != Some("bpe-v1") {
            return Err(err(1, "expected header `bpe-v1`".into()));
        }
        let header = lines.next().ok_or_else(|| err(2, "missing vocab line".into()))?;
        let mut declared = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("vocab_size", n)) => {
                    declared = Some(n.parse::<usize>().map_err(|e| err(2, format!("vocab_size: {e}")))?)
                }
                Some(("specials", "BOS,EOS,PAD")) => {}
                _ => return Err(err(2, format!("unexpected field {field:?}"))),
            }
        }
        let declared = declared.ok_or_else(|| err(2, "missing vocab_size".into()))?;
        let mut by_bytes: HashMap<Vec<u8>, u32> =
            (0..=255u8).map(|b| (vec![b], b as u32)).collect();
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 3;
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| err(lineno, "expected two hex byte strings".into()))?;
            let decode = |h: &str| hex::decode(h).map_err(|e| err(lineno, format!("bad hex {h:?}: {e}")));
            let (a, b) = (decode(a)?, decode(b)?);
            let lookup = |s: &[u8]| {
                by_bytes
                    .get(s)
                    .copied()
                    .ok_or_else(|| err(lineno, format!("merge part {} not yet in vocabulary", hex::encode(s))))
            };
            let pair = (lookup(&a)?, lookup(&b)?);
            let mut joined = a;
            joined.extend_from_slice(&b);
            by_bytes.entry(joined).or_insert(256 + merges.len() as u32);
            merges.push(pair);
        }
        let actual = 256 + merges.len() + NUM_SPECIALS;
        if declared != actual {
            return Err(err(
                text.lines().count() + 1,
                format!("declared vocab_size {declared} but file defines {actual} (truncated?)"),
            ));
        }
        Self::from_merges(merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Short content hash of the serialized model.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    /// A tokenizer trained on the bundled general-English sample.
    pub fn generic(vocab_size: usize) -> Result<Self> {
        Self::train(&[GENERAL_TEXT], vocab_size)
    }
}

fn merge_in_place(ids: &mut Vec<u32>, pair: Pair, new_id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < ids.len() {
        if r + 1 < ids.len() && ids[r] == pair.0 && ids[r + 1] == pair.1 {
            ids[w] = new_id;
            r += 2;
        } else {
            ids[w] = ids[r];
            r += 1;
        }
        w += 1;
    }
    ids.truncate(w);
}
