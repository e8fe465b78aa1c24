//! Template generators for the two desk-scale domains.
//!
//! Story and recipe templates draw from disjoint content-word lists; only the
//! closed set of function words in [`FUNCTION_WORDS`] may appear in both.

use std::collections::BTreeSet;

use rand::RngCore;

use crate::corpus::{Domain, RawDocument};
use crate::rng;

pub const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "and", "but", "or", "to", "of", "in", "on", "at", "for", "with", "into",
    "until", "was", "were", "is", "it", "they", "them", "their", "then", "that", "this", "very",
    "all", "up", "down", "from", "by", "so", "as", "be", "he", "she", "his", "her", "we", "us",
    "let", "each", "about",
];

const NAMES: &[&str] = &[
    "Lily", "Tom", "Mia", "Ben", "Sara", "Max", "Zoe", "Leo", "Ella", "Finn", "Ruby", "Jack",
    "Nora", "Sam", "Ivy", "Owen",
];
const CHARACTERS: &[&str] = &[
    "girl", "boy", "dragon", "princess", "knight", "fox", "rabbit", "bear", "owl", "wizard",
    "king", "queen", "mouse", "puppy", "kitten", "bird", "giant", "fairy", "turtle", "squirrel",
];
const STORY_ADJECTIVES: &[&str] = &[
    "brave", "clever", "kind", "shy", "curious", "happy", "little", "gentle", "tiny", "lonely",
    "cheerful", "bright", "silly", "proud", "quiet", "friendly", "sleepy", "bold",
];
const SETTINGS: &[&str] = &[
    "forest", "castle", "village", "meadow", "cave", "kingdom", "hill", "river", "tower",
    "island", "valley", "pond", "jungle", "mountain",
];
const OBJECTS: &[&str] = &[
    "clock", "key", "map", "lantern", "feather", "stone", "crown", "ball", "kite", "book", "ring",
    "shell", "star", "toy", "drum", "sword",
];
const FINDS: &[&str] = &["found", "saw", "discovered", "noticed", "spotted"];
const PLAYS: &[&str] = &[
    "play", "climb", "explore", "dance", "sing", "hide", "swim", "fly", "eat",
];
const SPEAKS: &[&str] = &["whispered", "shouted", "laughed", "giggled", "cried"];
const PLACES: &[&str] = &["an old tree", "a mossy rock", "a sleepy bush", "a shady hedge"];
const ENDINGS: &[&str] = &[
    "From that day on, they were best friends.",
    "And they lived happily ever after.",
    "{name} smiled, because it was a wonderful adventure.",
    "They laughed together until the stars came out.",
];

const INGREDIENTS: &[(&str, bool)] = &[
    // (name, counted in whole units)
    ("eggs", true),
    ("tomato", true),
    ("onions", true),
    ("carrots", true),
    ("potatoes", true),
    ("lemon", true),
    ("flour", false),
    ("sugar", false),
    ("butter", false),
    ("milk", false),
    ("garlic", false),
    ("rice", false),
    ("cheese", false),
    ("chicken", false),
    ("beans", false),
    ("honey", false),
    ("spinach", false),
    ("mushrooms", false),
    ("oats", false),
    ("yogurt", false),
    ("basil", false),
    ("ginger", false),
    ("noodles", false),
    ("cream", false),
    ("celery", false),
    ("lentils", false),
];
const UNITS: &[&str] = &["cups", "teaspoons", "tablespoons", "grams", "ounces"];
const STEPS_WITH_INGREDIENT: &[&str] = &[
    "Whisk the {i} in a large bowl.",
    "Chop the {i} into small pieces.",
    "Sauté the {i} in a pan for {n} minutes.",
    "Stir in the {i} and mix well.",
    "Add the {i} and simmer until tender.",
    "Slice the {i} thinly.",
];
const OPENING_STEPS: &[&str] = &[
    "Preheat the oven to {t} degrees.",
    "Heat a pan over medium heat.",
    "Bring a pot of salted water to a boil.",
];
const CLOSING_STEPS: &[&str] = &[
    "Bake for {n} minutes until golden.",
    "Season with salt and pepper to taste.",
    "Serve warm and garnish with fresh herbs.",
    "Cover and cook for {n} minutes.",
];

fn pick<'a, R: RngCore>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[rng::below(rng, items.len())]
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn story<R: RngCore>(rng: &mut R) -> String {
    let name = pick(rng, NAMES);
    let adj = pick(rng, STORY_ADJECTIVES);
    let who = pick(rng, CHARACTERS);
    let setting_adj = pick(rng, STORY_ADJECTIVES);
    let setting = pick(rng, SETTINGS);
    let object = pick(rng, OBJECTS);
    let friend = pick(rng, CHARACTERS);
    let verb = pick(rng, PLAYS);
    let mut s = format!(
        "Once upon a time, there was {} {adj} {who} named {name}. ",
        article(adj)
    );
    s += &format!(
        "{name} lived in {} {setting_adj} {setting}. ",
        article(setting_adj)
    );
    s += &format!(
        "One day, {name} {} {} {object} near {}. ",
        pick(rng, FINDS),
        article(object),
        pick(rng, PLACES)
    );
    s += &format!(
        "{} {friend} {}, \"Let us {verb} with the {object}!\" ",
        capitalize(article(friend)),
        pick(rng, SPEAKS)
    );
    s += &pick(rng, ENDINGS).replace("{name}", name);
    s
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn recipe<R: RngCore>(rng: &mut R) -> String {
    let n_ingredients = 3 + rng::below(rng, 3);
    let mut chosen: Vec<(&str, bool)> = Vec::with_capacity(n_ingredients);
    while chosen.len() < n_ingredients {
        let cand = INGREDIENTS[rng::below(rng, INGREDIENTS.len())];
        if !chosen.iter().any(|c| c.0 == cand.0) {
            chosen.push(cand);
        }
    }
    let mut s = String::from("Ingredients:\n");
    for &(name, whole) in &chosen {
        let qty = 1 + rng::below(rng, 4);
        if whole {
            s += &format!("- {qty} {name}\n");
        } else {
            s += &format!("- {qty} {} {name}\n", pick(rng, UNITS));
        }
    }
    s += "Steps:\n";
    let fill = |t: &str, rng: &mut R, ing: &str| {
        t.replace("{i}", ing)
            .replace("{n}", &(5 + 5 * rng::below(rng, 6)).to_string())
            .replace("{t}", &(160 + 10 * rng::below(rng, 5)).to_string())
    };
    let mut steps = vec![fill(pick(rng, OPENING_STEPS), rng, "")];
    for &(name, _) in chosen.iter().take(2) {
        let t = pick(rng, STEPS_WITH_INGREDIENT);
        steps.push(fill(t, rng, name));
    }
    steps.push(fill(pick(rng, CLOSING_STEPS), rng, ""));
    for (i, step) in steps.iter().enumerate() {
        s += &format!("{}. {step}", i + 1);
        if i + 1 < steps.len() {
            s.push('\n');
        }
    }
    s
}

/// `n` template documents with ids `<domain>-<index>`; document `i` depends only
/// on `(domain, seed, i)`.
pub fn synth_corpus(domain: Domain, n: usize, seed: u64) -> Vec<RawDocument> {
    (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, &format!("synth:{domain}:{i}"));
            let body = match domain {
                Domain::Story => story(&mut rng),
                Domain::Recipe => recipe(&mut rng),
            };
            RawDocument {
                id: format!("{domain}-{i:06}"),
                domain,
                body,
            }
        })
        .collect()
}

/// Lowercased alphabetic words of `text` that are not function words.
pub fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !FUNCTION_WORDS.contains(&w.as_str()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::instruct::{is_numbered_step, Lexicon};
    use crate::corpus::synthesize_instruct;

    #[test]
    fn story_has_narrative_markers_only() {
        let d = &synth_corpus(Domain::Story, 1, 0)[0];
        assert!(d.body.starts_with("Once upon a time"));
        assert!(!d.body.lines().any(is_numbered_step));
        for marker in ["preheat", "teaspoon", "minutes", "ingredients"] {
            assert!(!d.body.to_lowercase().contains(marker));
        }
    }

    #[test]
    fn recipe_has_ingredients_and_numbered_steps() {
        let d = &synth_corpus(Domain::Recipe, 1, 0)[0];
        assert!(d.body.starts_with("Ingredients:\n- "));
        assert!(d.body.contains("\n1. "));
        assert!(d.body.contains("\n2. "));
    }

    fn vocab(domain: Domain, seed: u64) -> BTreeSet<String> {
        synth_corpus(domain, 500, seed)
            .iter()
            .flat_map(|d| content_words(&d.body))
            .collect()
    }

    #[test]
    fn domain_vocabularies_are_disjoint() {
        for seed in [0, 1, 77] {
            let s = vocab(Domain::Story, seed);
            let r = vocab(Domain::Recipe, seed);
            let both: Vec<_> = s.intersection(&r).collect();
            assert!(both.is_empty(), "shared content words: {both:?}");
        }
    }

    #[test]
    fn every_synthetic_doc_gets_a_prompt() {
        let lex = Lexicon::bundled();
        for domain in Domain::ALL {
            for d in synth_corpus(domain, 300, 3) {
                synthesize_instruct(&d, 3, &lex).unwrap();
            }
        }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = synth_corpus(Domain::Recipe, 20, 4);
        let b = synth_corpus(Domain::Recipe, 10, 4);
        assert_eq!(&a[..10], &b[..]);
    }
}
