//! Instruct-prompt synthesis from a bundled part-of-speech lexicon.

use std::collections::HashMap;

use crate::corpus::{Domain, InstructExample, RawDocument};
use crate::error::{Error, Result};
use crate::rng;

const BUNDLED_LEXICON: &str = include_str!("../../data/lexicon.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartOfSpeech {
    Verb,
    Noun,
    Adjective,
}

impl PartOfSpeech {
    fn name(self) -> &'static str {
        match self {
            PartOfSpeech::Verb => "verb",
            PartOfSpeech::Noun => "noun",
            PartOfSpeech::Adjective => "adjective",
        }
    }
}

/// Surface word → (part of speech, lemma) entries.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<(PartOfSpeech, String)>>,
}

impl Lexicon {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is well-formed")
    }

    /// Tab-separated `word pos [lemma]` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: HashMap<String, Vec<(PartOfSpeech, String)>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let word = cols.next().unwrap_or_default();
            let pos = match cols.next() {
                Some("verb") => PartOfSpeech::Verb,
                Some("noun") => PartOfSpeech::Noun,
                Some("adj") => PartOfSpeech::Adjective,
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("bad part of speech {other:?}"),
                    })
                }
            };
            let lemma = cols.next().unwrap_or(word);
            entries
                .entry(word.to_lowercase())
                .or_default()
                .push((pos, lemma.to_owned()));
        }
        Ok(Lexicon { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, word: &str) -> &[(PartOfSpeech, String)] {
        self.entries
            .get(&word.to_lowercase())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Distinct lemmas of `pos` in order of first appearance in `text`.
    fn hits(&self, text: &str, pos: PartOfSpeech) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for word in text.split(|c: char| !c.is_alphabetic()) {
            for (p, lemma) in self.lookup(word) {
                if *p == pos && !out.contains(lemma) {
                    out.push(lemma.clone());
                }
            }
        }
        out
    }
}

pub fn story_prompt(verb: &str, noun: &str, adjective: &str) -> String {
    format!(
        "Write a story. In the story, try to use the verb \"{verb}\", the noun \"{noun}\" and the adjective \"{adjective}\". Possible story:"
    )
}

pub fn recipe_prompt(ingredients: &[&str]) -> String {
    format!("Write a recipe with ingredients: {}.", ingredients.join(", "))
}

const UNITS: &[&str] = &[
    "cup", "cups", "teaspoon", "teaspoons", "tsp", "tablespoon", "tablespoons", "tbsp", "gram",
    "grams", "g", "kg", "ml", "l", "liter", "liters", "ounce", "ounces", "oz", "pound", "pounds",
    "lb", "lbs", "pinch", "pinches", "clove", "cloves", "can", "cans",
];

pub(crate) fn is_unit(word: &str) -> bool {
    UNITS.contains(&word.to_lowercase().as_str())
}

pub(crate) fn is_numbered_step(line: &str) -> bool {
    let line = line.trim_start();
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    digits > 0 && matches!(line.as_bytes().get(digits), Some(b'.') | Some(b')'))
}

fn ingredient_name(line: &str) -> Option<String> {
    let line = line.trim().trim_start_matches(['-', '*', '•']).trim();
    if line.is_empty() || line.ends_with(':') {
        return None;
    }
    let line = line.split([',', '(']).next().unwrap_or_default();
    let mut words = line.split_whitespace().peekable();
    while let Some(w) = words.peek() {
        let quantity = w.chars().any(|c| c.is_ascii_digit() || "½¼¾⅓⅔/".contains(c));
        if quantity || is_unit(w) || *w == "of" {
            words.next();
        } else {
            break;
        }
    }
    let name = words.collect::<Vec<_>>().join(" ");
    (!name.is_empty()).then_some(name)
}

/// Ingredient names from the run of lines before the first numbered step.
pub fn extract_ingredients(body: &str) -> Option<Vec<String>> {
    let lines: Vec<&str> = body.lines().collect();
    let first_step = lines.iter().position(|l| is_numbered_step(l))?;
    let names: Vec<String> = lines[..first_step]
        .iter()
        .filter_map(|l| ingredient_name(l))
        .collect();
    (!names.is_empty()).then_some(names)
}

pub fn synthesize_instruct(doc: &RawDocument, seed: u64, lexicon: &Lexicon) -> Result<InstructExample> {
    let skipped = |reason: &str| Error::Skipped {
        id: doc.id.clone(),
        reason: reason.to_owned(),
    };
    let prompt = match doc.domain {
        Domain::Story => {
            let mut rng = rng::stream(seed, &format!("instruct:{}", doc.id));
            let mut chosen: Vec<String> = Vec::with_capacity(3);
            for pos in [PartOfSpeech::Verb, PartOfSpeech::Noun, PartOfSpeech::Adjective] {
                let all = lexicon.hits(&doc.body, pos);
                if all.is_empty() {
                    return Err(skipped(&format!("missing {}", pos.name())));
                }
                let fresh: Vec<&String> = all.iter().filter(|w| !chosen.contains(w)).collect();
                let pick = if fresh.is_empty() {
                    all[rng::below(&mut rng, all.len())].clone()
                } else {
                    fresh[rng::below(&mut rng, fresh.len())].clone()
                };
                chosen.push(pick);
            }
            story_prompt(&chosen[0], &chosen[1], &chosen[2])
        }
        Domain::Recipe => {
            let names = extract_ingredients(&doc.body).ok_or_else(|| skipped("no ingredient section"))?;
            let first: Vec<&str> = names.iter().take(3).map(String::as_str).collect();
            recipe_prompt(&first)
        }
    };
    Ok(InstructExample {
        id: doc.id.clone(),
        domain: doc.domain,
        prompt,
        completion: doc.body.clone(),
    })
}

/// Synthesizes every document, returning the examples and the skip reasons.
pub fn synthesize_all(
    docs: &[RawDocument],
    seed: u64,
    lexicon: &Lexicon,
) -> (Vec<InstructExample>, Vec<Error>) {
    let mut ok = Vec::with_capacity(docs.len());
    let mut skipped = Vec::new();
    for d in docs {
        match synthesize_instruct(d, seed, lexicon) {
            Ok(e) => ok.push(e),
            Err(e) => skipped.push(e),
        }
    }
    (ok, skipped)
}
