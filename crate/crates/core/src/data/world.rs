// SPDX-License-Identifier: Apache-2.0

//! Synthetic knowledge worlds and their rendering into a training corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab};
use crate::error::{KneError, Result};

const RELATION_WORDS: [&str; 8] = [
    "capital", "leader", "color", "sport", "language", "currency", "founder", "river",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// A set of functional facts over `n_entities × n_relations` keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub n_entities: usize,
    pub n_relations: usize,
    pub density: f64,
    pub seed: u64,
    pub triples: Vec<Triple>,
}

impl SyntheticWorld {
    pub fn entity_name(&self, e: usize) -> String {
        entity_name(e)
    }

    /// The second surface name of an entity, used for portability probes.
    pub fn alias_name(&self, e: usize) -> String {
        alias_name(e)
    }

    pub fn relation_word(&self, r: usize) -> String {
        relation_word(r)
    }

    pub fn object_of(&self, subject: usize, relation: usize) -> Option<usize> {
        self.triples
            .binary_search_by_key(&(subject, relation), |t| (t.subject, t.relation))
            .ok()
            .map(|i| self.triples[i].object)
    }
}

pub fn entity_name(e: usize) -> String {
    format!("ent{e:02}")
}

pub fn alias_name(e: usize) -> String {
    format!("alt{e:02}")
}

pub fn relation_word(r: usize) -> String {
    RELATION_WORDS
        .get(r)
        .map_or_else(|| format!("relation{r}"), |w| (*w).to_owned())
}

/// Draws `⌊density · n_entities · n_relations⌋` distinct `(subject, relation)`
/// keys and a uniformly random object for each. Triples are sorted by key.
pub fn generate_world(
    n_entities: usize,
    n_relations: usize,
    density: f64,
    seed: u64,
) -> Result<SyntheticWorld> {
    if n_entities < 2 || n_relations == 0 {
        return Err(KneError::Config(format!(
            "world needs at least 2 entities and 1 relation, got {n_entities} and {n_relations}"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(KneError::Config(format!("density {density} not in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<(usize, usize)> = (0..n_entities)
        .flat_map(|s| (0..n_relations).map(move |r| (s, r)))
        .collect();
    let count = ((density * keys.len() as f64) + 1e-9).floor() as usize;
    keys.shuffle(&mut rng);
    keys.truncate(count);
    keys.sort_unstable();
    let triples = keys
        .into_iter()
        .map(|(subject, relation)| Triple {
            subject,
            relation,
            object: rng.gen_range(0..n_entities),
        })
        .collect();
    Ok(SyntheticWorld {
        n_entities,
        n_relations,
        density,
        seed,
        triples,
    })
}

/// Surface templates for one relation. Every pattern contains `{subject}`
/// and `{object}`, with the object slot last apart from trailing punctuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationTemplates {
    pub primary: String,
    pub rephrase: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub relations: Vec<RelationTemplates>,
    /// Also render every triple under the primary template with the
    /// subject's alias, so alias-substitution probes have trained support.
    pub alias_sentences: bool,
}

impl Templates {
    /// One primary and one rephrase template per relation.
    pub fn default_for(n_relations: usize) -> Self {
        let relations = (0..n_relations)
            .map(|r| {
                let w = relation_word(r);
                RelationTemplates {
                    primary: format!("the {w} of {{subject}} is {{object}} ."),
                    rephrase: vec![format!("in short the {w} of {{subject}} is {{object}} .")],
                }
            })
            .collect();
        Templates {
            relations,
            alias_sentences: true,
        }
    }

    pub fn for_relation(&self, r: usize) -> Result<&RelationTemplates> {
        self.relations
            .get(r)
            .ok_or_else(|| KneError::Config(format!("no templates for relation {r}")))
    }
}

/// Fills `{subject}` and `{object}` in `pattern`; any other `{slot}` is an error.
pub fn render(pattern: &str, subject: &str, object: &str) -> Result<String> {
    check_slots(pattern)?;
    Ok(pattern
        .replace("{subject}", subject)
        .replace("{object}", object))
}

/// The prompt part of `pattern`: everything before `{object}`.
pub fn render_prompt(pattern: &str, subject: &str) -> Result<String> {
    check_slots(pattern)?;
    let cut = pattern
        .find("{object}")
        .ok_or_else(|| KneError::Config(format!("template `{pattern}` has no {{object}} slot")))?;
    Ok(pattern[..cut]
        .replace("{subject}", subject)
        .trim()
        .to_owned())
}

fn check_slots(pattern: &str) -> Result<()> {
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let close = rest[open..].find('}').ok_or_else(|| {
            KneError::Config(format!("unterminated slot in template `{pattern}`"))
        })?;
        let slot = &rest[open + 1..open + close];
        if slot != "subject" && slot != "object" {
            return Err(KneError::Config(format!(
                "template `{pattern}` references unknown slot `{slot}`"
            )));
        }
        rest = &rest[open + close + 1..];
    }
    Ok(())
}

/// Rendered training sentences plus their closed vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub texts: Vec<String>,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn tokenized(&self) -> Result<Vec<Vec<TokenId>>> {
        self.texts.iter().map(|t| self.vocab.encode(t)).collect()
    }
}

/// Renders every triple under every template of its relation (and, when
/// enabled, once more under the primary template with the subject alias).
pub fn world_to_corpus(world: &SyntheticWorld, templates: &Templates) -> Result<Corpus> {
    let mut texts = Vec::new();
    for t in &world.triples {
        let rt = templates.for_relation(t.relation)?;
        if rt.rephrase.is_empty() {
            return Err(KneError::Config(format!(
                "relation {} needs a primary and at least one rephrase template",
                t.relation
            )));
        }
        let (s, o) = (world.entity_name(t.subject), world.entity_name(t.object));
        for pattern in std::iter::once(&rt.primary).chain(&rt.rephrase) {
            texts.push(render(pattern, &s, &o)?);
        }
        if templates.alias_sentences {
            texts.push(render(&rt.primary, &world.alias_name(t.subject), &o)?);
        }
    }
    let vocab = Vocab::from_texts(texts.iter().map(String::as_str));
    Ok(Corpus { texts, vocab })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn full_density_covers_every_key() {
        let w = generate_world(7, 3, 1.0, 1).unwrap();
        assert_eq!(w.triples.len(), 21);
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(
            generate_world(40, 8, 0.8, 9).unwrap(),
            generate_world(40, 8, 0.8, 9).unwrap()
        );
        assert_ne!(
            generate_world(40, 8, 0.8, 9).unwrap(),
            generate_world(40, 8, 0.8, 10).unwrap()
        );
    }

    #[test]
    fn keys_are_unique_over_many_worlds() {
        for seed in 0..100 {
            let w = generate_world(13, 5, 0.7, seed).unwrap();
            assert_eq!(w.triples.len(), (0.7f64 * 65.0).floor() as usize);
            let keys: HashSet<_> = w.triples.iter().map(|t| (t.subject, t.relation)).collect();
            assert_eq!(keys.len(), w.triples.len());
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_world(1, 3, 0.5, 0).is_err());
        assert!(generate_world(4, 3, 0.0, 0).is_err());
        assert!(generate_world(4, 3, 1.5, 0).is_err());
    }

    fn single_triple_world() -> SyntheticWorld {
        SyntheticWorld {
            n_entities: 2,
            n_relations: 1,
            density: 0.5,
            seed: 0,
            triples: vec![Triple {
                subject: 0,
                relation: 0,
                object: 1,
            }],
        }
    }

    #[test]
    fn one_triple_two_templates_two_sequences() {
        let mut templates = Templates::default_for(1);
        templates.alias_sentences = false;
        let corpus = world_to_corpus(&single_triple_world(), &templates).unwrap();
        assert_eq!(corpus.texts.len(), 2);
        let distinct: HashSet<&str> = corpus
            .texts
            .iter()
            .flat_map(|t| t.split_whitespace())
            .collect();
        assert_eq!(corpus.vocab.len(), distinct.len());
    }

    #[test]
    fn corpus_detokenizes_to_rendered_text() {
        let w = generate_world(10, 4, 0.9, 2).unwrap();
        let corpus = world_to_corpus(&w, &Templates::default_for(4)).unwrap();
        for (text, ids) in corpus.texts.iter().zip(corpus.tokenized().unwrap()) {
            assert_eq!(&corpus.vocab.decode(&ids), text);
        }
    }

    #[test]
    fn unknown_slot_is_rejected() {
        let mut templates = Templates::default_for(1);
        templates.relations[0].primary = "the {relation} of {subject} is {object}".into();
        assert!(world_to_corpus(&single_triple_world(), &templates).is_err());
        assert_eq!(
            render_prompt("the color of {subject} is {object} .", "ent01").unwrap(),
            "the color of ent01 is"
        );
    }
}
