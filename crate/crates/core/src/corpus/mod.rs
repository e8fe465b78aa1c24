//! Domain corpora: ingestion, cleaning, instruct synthesis, balancing and splits.

mod instruct;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::TokenizerModel;

pub use instruct::{
    extract_ingredients, recipe_prompt, story_prompt, synthesize_instruct, synthesize_all,
    Lexicon, PartOfSpeech,
};
pub use synth::{content_words, synth_corpus, FUNCTION_WORDS};
pub(crate) use instruct::{is_numbered_step, is_unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Story,
    Recipe,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Story, Domain::Recipe];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Story => "story",
            Domain::Recipe => "recipe",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "story" => Ok(Domain::Story),
            "recipe" => Ok(Domain::Recipe),
            other => Err(Error::InvalidArgument(format!(
                "unknown domain {other:?} (expected story or recipe)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub domain: Domain,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructExample {
    pub id: String,
    pub domain: Domain,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub token_count: usize,
    pub byte_count: usize,
}

/// Anything that can live in a corpus.
pub trait Document: Clone {
    fn id(&self) -> &str;
    fn domain(&self) -> Domain;
    /// Text segments as they are fed to the tokenizer.
    fn segments(&self) -> Vec<&str>;

    fn token_count(&self, tok: &TokenizerModel) -> usize {
        self.segments().iter().map(|s| tok.encode(s, false).len()).sum()
    }
}

impl Document for RawDocument {
    fn id(&self) -> &str {
        &self.id
    }
    fn domain(&self) -> Domain {
        self.domain
    }
    fn segments(&self) -> Vec<&str> {
        vec![&self.body]
    }
}

impl Document for InstructExample {
    fn id(&self) -> &str {
        &self.id
    }
    fn domain(&self) -> Domain {
        self.domain
    }
    fn segments(&self) -> Vec<&str> {
        vec![&self.prompt, &self.completion]
    }
}

pub fn stats<D: Document>(docs: &[D], tok: &TokenizerModel) -> CorpusStats {
    CorpusStats {
        doc_count: docs.len(),
        token_count: docs.iter().map(|d| d.token_count(tok)).sum(),
        byte_count: docs
            .iter()
            .map(|d| d.segments().iter().map(|s| s.len()).sum::<usize>())
            .sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub docs: Vec<RawDocument>,
    pub malformed: usize,
}

#[derive(Deserialize)]
struct JsonLine {
    id: Option<String>,
    domain: Option<Domain>,
    prompt: Option<String>,
    completion: Option<String>,
    body: Option<String>,
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a JSONL corpus. Lines that fail to parse, lack an id or text, or name
/// a different domain are counted as malformed.
pub fn ingest(path: impl AsRef<Path>, domain: Domain) -> Result<Ingested> {
    let path = path.as_ref();
    let text = read_lines(path)?;
    let mut docs = Vec::new();
    let mut malformed = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match serde_json::from_str::<JsonLine>(line) {
            Ok(p) => p,
            Err(_) => {
                malformed += 1;
                continue;
            }
        };
        match (parsed.id, parsed.body.or(parsed.completion)) {
            (Some(id), Some(body)) if parsed.domain.is_none_or(|d| d == domain) => {
                docs.push(RawDocument { id, domain, body })
            }
            _ => malformed += 1,
        }
    }
    if docs.is_empty() {
        return Err(Error::NoValidLines {
            path: path.to_owned(),
            malformed,
        });
    }
    Ok(Ingested { docs, malformed })
}

/// Reads instruct examples (`id`, `domain`, `prompt`, `completion`). Lines without a
/// prompt are raw documents and get a synthesized prompt; documents that cannot
/// be synthesized are skipped and counted.
pub fn load_examples(
    path: impl AsRef<Path>,
    lexicon: &Lexicon,
    seed: u64,
) -> Result<(Vec<InstructExample>, usize)> {
    let path = path.as_ref();
    let text = read_lines(path)?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Ok(parsed) = serde_json::from_str::<JsonLine>(line) else {
            skipped += 1;
            continue;
        };
        let (Some(id), Some(domain)) = (parsed.id, parsed.domain) else {
            skipped += 1;
            continue;
        };
        match (parsed.prompt, parsed.completion.or(parsed.body)) {
            (Some(prompt), Some(completion)) if !completion.is_empty() => {
                out.push(InstructExample {
                    id,
                    domain,
                    prompt,
                    completion,
                })
            }
            (None, Some(body)) => {
                let doc = RawDocument { id, domain, body };
                match synthesize_instruct(&doc, seed, lexicon) {
                    Ok(ex) => out.push(ex),
                    Err(_) => skipped += 1,
                }
            }
            _ => skipped += 1,
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidLines {
            path: path.to_owned(),
            malformed: skipped,
        });
    }
    Ok((out, skipped))
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("corpus items serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn clean_body(body: &str) -> String {
    let stripped: String = body
        .chars()
        .filter(|&c| c == '\n' || !c.is_control())
        .collect();
    let normalized: String = stripped.nfc().collect();
    normalized.trim().to_owned()
}

/// Strips control characters (except newline), NFC-normalizes, trims, drops empty
/// documents and exact duplicate bodies. Survivors keep their order.
pub fn clean(docs: &[RawDocument]) -> Vec<RawDocument> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(docs.len());
    for doc in docs {
        let body = clean_body(&doc.body);
        if body.is_empty() || !seen.insert(body.clone()) {
            continue;
        }
        out.push(RawDocument {
            id: doc.id.clone(),
            domain: doc.domain,
            body,
        });
    }
    out
}

/// Equalizes document counts (keeping the smallest ids), then trims the corpus
/// with more tokens from its end until the relative token gap is within
/// `tolerance`.
pub fn balance<D: Document>(
    a: &[D],
    b: &[D],
    tok: &TokenizerModel,
    tolerance: f64,
) -> Result<(Vec<D>, Vec<D>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("balance requires two non-empty corpora".into()));
    }
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must lie in (0, 1), got {tolerance}"
        )));
    }
    let keep = a.len().min(b.len());
    let sorted = |docs: &[D]| {
        let mut v = docs.to_vec();
        v.sort_by(|x, y| x.id().cmp(y.id()));
        v.truncate(keep);
        v
    };
    let mut a = sorted(a);
    let mut b = sorted(b);
    let counts = |docs: &[D]| docs.iter().map(|d| d.token_count(tok)).collect::<Vec<_>>();
    let mut ca = counts(&a);
    let mut cb = counts(&b);
    let mut ta: usize = ca.iter().sum();
    let mut tb: usize = cb.iter().sum();
    let within = |x: usize, y: usize| {
        let hi = x.max(y);
        hi == 0 || (x.abs_diff(y) as f64) / (hi as f64) <= tolerance
    };
    while !within(ta, tb) {
        let (docs, c, t) = if ta > tb {
            (&mut a, &mut ca, &mut ta)
        } else {
            (&mut b, &mut cb, &mut tb)
        };
        if docs.len() <= 1 {
            return Err(Error::BalanceUnreachable { tolerance });
        }
        docs.pop();
        *t -= c.pop().expect("counts track documents");
    }
    Ok((a, b))
}

/// Seeded shuffle; the last `ceil(val_fraction * n)` documents become validation.
pub fn split<D: Document>(corpus: &[D], val_fraction: f64, seed: u64) -> Result<(Vec<D>, Vec<D>)> {
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument(
            "split needs at least 2 documents".into(),
        ));
    }
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in (0, 0.5), got {val_fraction}"
        )));
    }
    let mut docs = corpus.to_vec();
    rng::shuffle(&mut docs, &mut rng::stream(seed, "split"));
    let n_val = (val_fraction * docs.len() as f64).ceil() as usize;
    let val = docs.split_off(docs.len() - n_val);
    Ok((docs, val))
}

/// Multiset union of two id-disjoint corpora, shuffled by `seed`.
pub fn merge_shuffle<D: Document>(a: &[D], b: &[D], seed: u64) -> Result<Vec<D>> {
    let mut ids = HashSet::with_capacity(a.len() + b.len());
    for d in a.iter().chain(b) {
        if !ids.insert(d.id()) {
            return Err(Error::IdCollision(d.id().to_owned()));
        }
    }
    let mut out: Vec<D> = a.iter().chain(b).cloned().collect();
    rng::shuffle(&mut out, &mut rng::stream(seed, "merge"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, body: &str) -> RawDocument {
        RawDocument {
            id: id.into(),
            domain: Domain::Story,
            body: body.into(),
        }
    }

    fn bodies(docs: &[RawDocument]) -> Vec<&str> {
        docs.iter().map(|d| d.body.as_str()).collect()
    }

    #[test]
    fn ingest_reads_lines_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(
            &p,
            "{\"id\":\"a\",\"domain\":\"story\",\"body\":\"one\"}\n\
             {\"id\":\"b\",\"body\":\"two\"}\n\
             {\"id\":\"c\",\"domain\":\"story\",\"completion\":\"three\"}\n",
        )
        .unwrap();
        let got = ingest(&p, Domain::Story).unwrap();
        assert_eq!(bodies(&got.docs), ["one", "two", "three"]);
        assert_eq!(got.malformed, 0);
    }

    #[test]
    fn ingest_empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "").unwrap();
        let err = ingest(&p, Domain::Story).unwrap_err();
        assert!(err.to_string().contains("zero valid lines"), "{err}");
    }

    #[test]
    fn ingest_counts_malformed_lines() {
        let fixture = "{\"id\":\"a\",\"body\":\"x\"}\n{not json\n{\"id\":\"b\",\"body\":\"y\"}\n";
        // line-by-line oracle: a line is valid iff it parses and has id + body
        let oracle_valid = fixture
            .lines()
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .is_some_and(|v| v.get("id").is_some() && v.get("body").is_some())
            })
            .count();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, fixture).unwrap();
        let got = ingest(&p, Domain::Recipe).unwrap();
        assert_eq!(got.docs.len(), oracle_valid);
        assert_eq!(got.docs.len(), 2);
        assert_eq!(got.malformed, 1);
    }

    #[test]
    fn ingest_rejects_other_domain_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"id\":\"a\",\"domain\":\"recipe\",\"body\":\"x\"}\n{\"id\":\"b\",\"body\":\"y\"}\n",
        )
        .unwrap();
        let got = ingest(&p, Domain::Story).unwrap();
        assert_eq!(got.docs.len(), 1);
        assert_eq!(got.malformed, 1);
    }

    #[test]
    fn clean_removes_duplicates_and_trims() {
        let out = clean(&[doc("1", "abc"), doc("2", "abc"), doc("3", "def")]);
        assert_eq!(bodies(&out), ["abc", "def"]);
        assert_eq!(out[1].id, "3");
        let out = clean(&[doc("1", " hi \t")]);
        assert_eq!(bodies(&out), ["hi"]);
        let out = clean(&[doc("1", "a\u{7}b\r\nc"), doc("2", " \u{0} ")]);
        assert_eq!(bodies(&out), ["ab\nc"]);
    }

    #[test]
    fn clean_normalizes_to_nfc() {
        let out = clean(&[doc("1", "sau\u{0074}e\u{0301}"), doc("2", "saut\u{e9}")]);
        assert_eq!(bodies(&out), ["saut\u{e9}"]);
    }

    #[test]
    fn clean_matches_set_based_oracle() {
        let mut docs = Vec::new();
        for i in 0..83 {
            docs.push(doc(&format!("u{i}"), &format!("unique body {i}")));
        }
        for k in 0..17 {
            let pos = (k * 7 + 3) % docs.len();
            let dup = docs[k * 4].body.clone();
            docs.insert(pos.max(k * 4 + 1), doc(&format!("d{k}"), &dup));
        }
        assert_eq!(docs.len(), 100);
        let mut seen = HashSet::new();
        let oracle: Vec<&RawDocument> = docs.iter().filter(|d| seen.insert(&d.body)).collect();
        let out = clean(&docs);
        assert_eq!(out.len(), 83);
        assert_eq!(
            out.iter().map(|d| &d.id).collect::<Vec<_>>(),
            oracle.iter().map(|d| &d.id).collect::<Vec<_>>()
        );
    }

    fn byte_doc(id: String, len: usize) -> RawDocument {
        doc(&id, &"x".repeat(len))
    }

    #[test]
    fn balance_identical_corpora_unchanged() {
        let tok = TokenizerModel::bytes_only();
        let a: Vec<_> = (0..5).map(|i| byte_doc(format!("d{i}"), 10 + i)).collect();
        let (x, y) = balance(&a, &a, &tok, 0.05).unwrap();
        assert_eq!(x, a);
        assert_eq!(y, a);
    }

    #[test]
    fn balance_equalizes_counts() {
        let tok = TokenizerModel::bytes_only();
        let a: Vec<_> = (0..12).map(|i| byte_doc(format!("a{i:02}"), 10)).collect();
        let b: Vec<_> = (0..10).map(|i| byte_doc(format!("b{i:02}"), 10)).collect();
        let (x, y) = balance(&a, &b, &tok, 0.05).unwrap();
        assert_eq!((x.len(), y.len()), (10, 10));
        assert_eq!(x[9].id, "a09");
    }

    #[test]
    fn balance_drop_policy_matches_simulation() {
        let tok = TokenizerModel::bytes_only();
        let a: Vec<_> = (0..10).map(|i| byte_doc(format!("a{i}"), 148)).collect();
        let b: Vec<_> = (0..10).map(|i| byte_doc(format!("b{i}"), 99)).collect();
        // simulate: drop 148-token docs from a's end until within 5%
        let (mut ta, tb, mut kept) = (1480usize, 990usize, 10usize);
        while (ta - tb) as f64 / ta as f64 > 0.05 {
            ta -= 148;
            kept -= 1;
        }
        let (x, y) = balance(&a, &b, &tok, 0.05).unwrap();
        assert_eq!(x.len(), kept);
        assert_eq!(kept, 7);
        assert_eq!(y.len(), 10);
        let recount = |d: &[RawDocument]| stats(d, &tok).token_count;
        let (ra, rb) = (recount(&x), recount(&y));
        assert!(ra.abs_diff(rb) as f64 / ra.max(rb) as f64 <= 0.05);
    }

    #[test]
    fn balance_unreachable_errors() {
        let tok = TokenizerModel::bytes_only();
        let a = vec![byte_doc("a".into(), 100)];
        let b = vec![byte_doc("b".into(), 10)];
        assert!(matches!(
            balance(&a, &b, &tok, 0.1),
            Err(Error::BalanceUnreachable { .. })
        ));
    }

    fn numbered(n: usize) -> Vec<RawDocument> {
        (0..n).map(|i| doc(&format!("{i:04}"), "b")).collect()
    }

    #[test]
    fn split_cardinality_and_determinism() {
        let c = numbered(10);
        let (t, v) = split(&c, 0.2, 3).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        assert_eq!(split(&c, 0.2, 3).unwrap(), (t, v));
        assert!(split(&numbered(1), 0.2, 0).is_err());
        assert!(split(&c, 0.5, 0).is_err());
    }

    /// Fisher-Yates written directly against the ChaCha8 word stream.
    fn reference_shuffle(n: usize, seed: u64, label: &str) -> Vec<usize> {
        use rand::{RngCore, SeedableRng};
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ h);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut i = n;
        while i > 1 {
            i -= 1;
            let j = ((r.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
            idx.swap(i, j);
        }
        idx
    }

    #[test]
    fn split_membership_matches_reference_shuffle() {
        let c = numbered(1000);
        let (t, v) = split(&c, 0.1, 42).unwrap();
        let order = reference_shuffle(1000, 42, "split");
        let want_val: Vec<String> = order[900..].iter().map(|i| format!("{i:04}")).collect();
        assert_eq!(v.iter().map(|d| d.id.clone()).collect::<Vec<_>>(), want_val);
        assert_eq!(t.len(), 900);
    }

    #[test]
    fn merge_shuffle_contracts() {
        let a: Vec<_> = (0..50).map(|i| doc(&format!("s{i}"), "x")).collect();
        let b: Vec<_> = (0..50)
            .map(|i| RawDocument {
                id: format!("r{i}"),
                domain: Domain::Recipe,
                body: "y".into(),
            })
            .collect();
        let m = merge_shuffle(&a, &b, 9).unwrap();
        assert_eq!(m.len(), 100);
        assert!(m.iter().any(|d| d.domain == Domain::Story));
        assert!(m.iter().any(|d| d.domain == Domain::Recipe));
        let order = reference_shuffle(100, 9, "merge");
        let concat: Vec<_> = a.iter().chain(&b).collect();
        let want: Vec<_> = order.iter().map(|&i| concat[i].id.clone()).collect();
        assert_eq!(m.iter().map(|d| d.id.clone()).collect::<Vec<_>>(), want);

        let only_b = merge_shuffle(&[], &b, 9).unwrap();
        let mut ids: Vec<_> = only_b.iter().map(|d| d.id.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = b.iter().map(|d| d.id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);

        assert!(matches!(merge_shuffle(&a, &a[..1], 0), Err(Error::IdCollision(_))));
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(bodies in proptest::collection::vec("\\PC{0,12}|[ \t\r\n\u{0}\u{301}a-c]{0,8}", 0..12)) {
            let docs: Vec<_> = bodies.iter().enumerate().map(|(i, b)| doc(&i.to_string(), b)).collect();
            let once = clean(&docs);
            prop_assert_eq!(clean(&once), once);
        }

        #[test]
        fn split_partitions_input(n in 2usize..200, frac in 0.01f64..0.49, seed in any::<u64>()) {
            let c = numbered(n);
            let (t, v) = split(&c, frac, seed).unwrap();
            prop_assert_eq!(t.len() + v.len(), n);
            let mut all: Vec<_> = t.iter().chain(&v).map(|d| d.id.clone()).collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }
}
