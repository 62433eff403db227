// SPDX-License-Identifier: Apache-2.0

//! Edit records, synthetic edit-set construction and the KnowEdit-style
//! JSONL format.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::{TokenId, Vocab};
use super::world::{render_prompt, SyntheticWorld, Templates};
use crate::error::{KneError, Result};
use crate::model::AnswerQuery;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub prompt: String,
    pub answer: String,
}

/// One requested change `(s, r, o) → (s, r, o*)` with its evaluation probes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub prompt: String,
    pub subject: String,
    pub target_new: String,
    pub ground_truth: String,
    #[serde(rename = "rephrase")]
    pub rephrase_prompts: Vec<String>,
    pub portability: Vec<Probe>,
    pub locality: Vec<Probe>,
}

impl EditRecord {
    pub fn tokenize(&self, vocab: &Vocab) -> Result<TokenizedEdit> {
        let probe = |p: &Probe| -> Result<AnswerQuery> {
            Ok(AnswerQuery::new(
                vocab.encode(&p.prompt)?,
                vocab.encode(&p.answer)?,
            ))
        };
        let target = vocab.encode(&self.target_new)?;
        Ok(TokenizedEdit {
            request: AnswerQuery::new(vocab.encode(&self.prompt)?, target.clone()),
            rephrase: self
                .rephrase_prompts
                .iter()
                .map(|p| Ok(AnswerQuery::new(vocab.encode(p)?, target.clone())))
                .collect::<Result<_>>()?,
            portability: self.portability.iter().map(probe).collect::<Result<_>>()?,
            locality: self.locality.iter().map(probe).collect::<Result<_>>()?,
        })
    }
}

/// Token-level view of an [`EditRecord`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedEdit {
    /// Edit prompt with the new target answer.
    pub request: AnswerQuery,
    pub rephrase: Vec<AnswerQuery>,
    pub portability: Vec<AnswerQuery>,
    pub locality: Vec<AnswerQuery>,
}

impl TokenizedEdit {
    pub fn target(&self) -> &[TokenId] {
        &self.request.answer
    }
}

pub fn tokenize_all(records: &[EditRecord], vocab: &Vocab) -> Result<Vec<TokenizedEdit>> {
    records.iter().map(|r| r.tokenize(vocab)).collect()
}

/// Builds `n_edits` counterfactual edits from distinct world triples.
///
/// Each edit moves the object to a uniformly drawn different entity, asks the
/// rephrase templates as paraphrases, probes the subject alias for
/// portability, and carries `locality_per_record` probes on triples that no
/// edit in the set touches.
pub fn make_edit_set(
    world: &SyntheticWorld,
    templates: &Templates,
    n_edits: usize,
    locality_per_record: usize,
    seed: u64,
) -> Result<Vec<EditRecord>> {
    if n_edits > world.triples.len() {
        return Err(KneError::Config(format!(
            "requested {n_edits} edits but the world has only {} triples",
            world.triples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = index::sample(&mut rng, world.triples.len(), n_edits).into_vec();
    let edited: HashSet<(usize, usize)> = picked
        .iter()
        .map(|&i| (world.triples[i].subject, world.triples[i].relation))
        .collect();
    let untouched: Vec<usize> = (0..world.triples.len())
        .filter(|&i| !edited.contains(&(world.triples[i].subject, world.triples[i].relation)))
        .collect();
    if n_edits > 0 && untouched.len() < locality_per_record {
        return Err(KneError::Config(format!(
            "only {} untouched triples for {locality_per_record} locality probes per edit",
            untouched.len()
        )));
    }

    let mut records = Vec::with_capacity(n_edits);
    for &i in &picked {
        let t = world.triples[i];
        let rt = templates.for_relation(t.relation)?;
        let subject = world.entity_name(t.subject);
        let mut new_object = rng.gen_range(0..world.n_entities - 1);
        if new_object >= t.object {
            new_object += 1;
        }
        let target_new = world.entity_name(new_object);

        let rephrase_prompts = rt
            .rephrase
            .iter()
            .map(|p| render_prompt(p, &subject))
            .collect::<Result<_>>()?;
        let portability = if templates.alias_sentences {
            vec![Probe {
                prompt: render_prompt(&rt.primary, &world.alias_name(t.subject))?,
                answer: target_new.clone(),
            }]
        } else {
            Vec::new()
        };
        let locality = untouched
            .choose_multiple(&mut rng, locality_per_record)
            .map(|&j| {
                let u = world.triples[j];
                let pattern = &templates.for_relation(u.relation)?.primary;
                Ok(Probe {
                    prompt: render_prompt(pattern, &world.entity_name(u.subject))?,
                    answer: world.entity_name(u.object),
                })
            })
            .collect::<Result<_>>()?;

        records.push(EditRecord {
            prompt: render_prompt(&rt.primary, &subject)?,
            subject,
            target_new,
            ground_truth: world.entity_name(t.object),
            rephrase_prompts,
            portability,
            locality,
        });
    }
    Ok(records)
}

pub fn save_edits_jsonl(path: &Path, records: &[EditRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| KneError::io(path, e))?;
    f.write_all(&out).map_err(|e| KneError::io(path, e))
}

/// Reads one edit per line. `prompt` and `target_new` are mandatory; probe
/// lists may be absent, a flat list of `{prompt, answer}` objects, or a map
/// from probe family to such lists (answers may also be given as
/// `ground_truth`, or as lists whose first string is used).
pub fn load_knowedit_jsonl(path: &Path) -> Result<Vec<EditRecord>> {
    let text = fs::read_to_string(path).map_err(|e| KneError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| KneError::MalformedLine {
            path: path.to_owned(),
            line: line_no,
            msg,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("expected a JSON object".into()))?;
        let required = |field: &'static str| -> Result<String> {
            obj.get(field)
                .and_then(first_string)
                .ok_or_else(|| KneError::MissingField {
                    path: path.to_owned(),
                    line: line_no,
                    field,
                })
        };
        let prompt = required("prompt")?;
        let target_new = required("target_new")?;
        let optional = |field: &str| obj.get(field).and_then(first_string).unwrap_or_default();
        let rephrase_prompts = match obj.get("rephrase") {
            Some(Value::String(s)) => vec![s.clone()],
            Some(Value::Array(items)) => items.iter().filter_map(first_string).collect(),
            _ => Vec::new(),
        };
        records.push(EditRecord {
            prompt,
            subject: optional("subject"),
            target_new,
            ground_truth: optional("ground_truth"),
            rephrase_prompts,
            portability: probes(obj.get("portability")).map_err(malformed)?,
            locality: probes(obj.get("locality")).map_err(malformed)?,
        });
    }
    Ok(records)
}

fn first_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => items.iter().find_map(first_string),
        _ => None,
    }
}

fn probes(v: Option<&Value>) -> std::result::Result<Vec<Probe>, String> {
    let mut out = Vec::new();
    collect_probes(v, &mut out)?;
    Ok(out)
}

fn collect_probes(v: Option<&Value>, out: &mut Vec<Probe>) -> std::result::Result<(), String> {
    match v {
        None | Some(Value::Null) => Ok(()),
        Some(Value::Array(items)) => {
            for item in items {
                collect_probes(Some(item), out)?;
            }
            Ok(())
        }
        Some(Value::Object(map)) if map.contains_key("prompt") => {
            let prompt = map.get("prompt").and_then(first_string);
            let answer = map
                .get("answer")
                .or_else(|| map.get("ground_truth"))
                .and_then(first_string);
            match (prompt, answer) {
                (Some(prompt), Some(answer)) => {
                    out.push(Probe { prompt, answer });
                    Ok(())
                }
                _ => Err("probe needs string `prompt` and `answer`".into()),
            }
        }
        Some(Value::Object(map)) => {
            for family in map.values() {
                collect_probes(Some(family), out)?;
            }
            Ok(())
        }
        Some(other) => Err(format!("unexpected probe value {other}")),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::world::generate_world;

    fn world() -> (SyntheticWorld, Templates) {
        (
            generate_world(40, 8, 0.8, 7).unwrap(),
            Templates::default_for(8),
        )
    }

    #[test]
    fn zero_edits_is_empty() {
        let (w, t) = world();
        assert!(make_edit_set(&w, &t, 0, 5, 1).unwrap().is_empty());
    }

    #[test]
    fn too_many_edits_is_an_error() {
        let (w, t) = world();
        assert!(make_edit_set(&w, &t, w.triples.len() + 1, 5, 1).is_err());
    }

    #[test]
    fn records_flip_the_object_and_carry_probes() {
        let (w, t) = world();
        let edits = make_edit_set(&w, &t, 10, 5, 3).unwrap();
        assert_eq!(edits.len(), 10);
        for e in &edits {
            assert_ne!(e.target_new, e.ground_truth);
            assert_eq!(e.rephrase_prompts.len(), 1);
            assert!(e.locality.len() >= 5);
            assert!(!e.portability.is_empty());
            assert_eq!(e.portability[0].answer, e.target_new);
        }
        assert_eq!(edits, make_edit_set(&w, &t, 10, 5, 3).unwrap());
    }

    #[test]
    fn locality_probes_avoid_edited_keys() {
        for seed in 0..100 {
            let w = generate_world(20, 4, 0.8, seed).unwrap();
            let t = Templates::default_for(4);
            let edits = make_edit_set(&w, &t, 8, 5, seed).unwrap();
            let edited: HashSet<&str> = edits.iter().map(|e| e.prompt.as_str()).collect();
            for e in &edits {
                for p in &e.locality {
                    assert!(
                        !edited.contains(p.prompt.as_str()),
                        "seed {seed}: {}",
                        p.prompt
                    );
                }
            }
        }
    }

    #[test]
    fn jsonl_round_trip_uses_exact_field_names() {
        let (w, t) = world();
        let edits = make_edit_set(&w, &t, 3, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edits.jsonl");
        save_edits_jsonl(&path, &edits).unwrap();
        let first: Value =
            serde_json::from_str(fs::read_to_string(&path).unwrap().lines().next().unwrap())
                .unwrap();
        for field in [
            "prompt",
            "subject",
            "target_new",
            "ground_truth",
            "rephrase",
            "portability",
            "locality",
        ] {
            assert!(first.get(field).is_some(), "missing {field}");
        }
        assert_eq!(load_knowedit_jsonl(&path).unwrap(), edits);
    }

    #[test]
    fn loader_tolerates_missing_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_knowedit_jsonl(&empty).unwrap().is_empty());

        let minimal = dir.path().join("min.jsonl");
        fs::write(
            &minimal,
            r#"{"prompt": "the river of ent01 is", "target_new": "ent02"}"#,
        )
        .unwrap();
        let r = &load_knowedit_jsonl(&minimal).unwrap()[0];
        assert_eq!(r.target_new, "ent02");
        assert!(r.rephrase_prompts.is_empty() && r.portability.is_empty() && r.locality.is_empty());
    }

    #[test]
    fn loader_reads_nested_knowedit_probe_maps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested.jsonl");
        let line = r#"{"prompt": "p", "target_new": ["t"], "ground_truth": ["g"], "rephrase": "r",
            "portability": {"Subject_Aliasing": [{"prompt": "pa", "ground_truth": ["t"]}]},
            "locality": {"Relation_Specificity": [{"prompt": "pl", "ground_truth": [["x"]]}]}}"#
            .replace('\n', " ");
        fs::write(&path, line).unwrap();
        let r = &load_knowedit_jsonl(&path).unwrap()[0];
        assert_eq!(r.target_new, "t");
        assert_eq!(r.rephrase_prompts, vec!["r".to_owned()]);
        assert_eq!(
            r.portability,
            vec![Probe {
                prompt: "pa".into(),
                answer: "t".into()
            }]
        );
        assert_eq!(
            r.locality,
            vec![Probe {
                prompt: "pl".into(),
                answer: "x".into()
            }]
        );
    }

    #[test]
    fn malformed_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"prompt\": \"a\", \"target_new\": \"b\"}\n{\"prompt\": \"a\", \n{\"prompt\": \"c\", \"target_new\": \"d\"}\n",
        )
        .unwrap();
        match load_knowedit_jsonl(&path) {
            Err(KneError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line error, got {other:?}"),
        }
    }

    #[test]
    fn missing_mandatory_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing.jsonl");
        fs::write(&path, "{\"prompt\": \"a\"}\n").unwrap();
        match load_knowedit_jsonl(&path) {
            Err(KneError::MissingField { field, line, .. }) => {
                assert_eq!((field, line), ("target_new", 1))
            }
            other => panic!("expected missing field error, got {other:?}"),
        }
    }
}
