//! Deterministic offline stand-in for the description-generating LLM.

use sha2::{Digest, Sha256};

use super::{contains_token, CorpusError, DescriptionCorpus, StepDescriptionSet};
use super::parse::parse_llm_response;

const BEFORE_QUALITIES: [&str; 6] = [
    "untouched",
    "unchanged",
    "in its original condition",
    "awaiting handling",
    "in the prior arrangement",
    "as found",
];

const AFTER_QUALITIES: [&str; 6] = [
    "transformed",
    "rearranged",
    "in the new condition",
    "fully handled",
    "in the target arrangement",
    "settled",
];

/// Short stable fingerprint of (task, step, seed); makes sentences for
/// different steps textually distinct even when their objects coincide.
fn code(task: &str, step: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(task.as_bytes());
    h.update([0x1f]);
    h.update(step.as_bytes());
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    digest[..3].iter().map(|b| format!("{b:02x}")).collect()
}

/// The step text minus its verb tokens; what the sentences talk about.
fn object_of(step: &str, verb: &str) -> String {
    let obj: Vec<&str> = step
        .split_whitespace()
        .filter(|tok| !tok.eq_ignore_ascii_case(verb))
        .collect();
    if obj.is_empty() {
        "items".to_string()
    } else {
        obj.join(" ")
    }
}

/// Replaces any standalone occurrence of `verb` so state sentences obey the
/// avoidance instruction even when the object itself contains the verb.
fn scrub(sentence: &str, verb: &str) -> String {
    if !contains_token(sentence, verb) {
        return sentence.to_string();
    }
    let replacement = if verb.eq_ignore_ascii_case("handled") {
        "managed"
    } else {
        "handled"
    };
    sentence
        .split(' ')
        .map(|w| {
            let core: String = w.chars().filter(|c| c.is_alphanumeric()).collect();
            if core.eq_ignore_ascii_case(verb) {
                w.replace(&core, replacement)
            } else {
                w.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic response text in the standard block format. Same inputs give
/// identical bytes; different (task, step) give different sentences; the verb
/// never appears in before/after sentences.
pub fn mock_llm_generate(task: &str, step: &str, verb: &str, k: usize, seed: u64) -> String {
    let object = object_of(step, verb);
    let code = code(task, step, seed);
    let mut out = String::new();
    out.push_str(&format!("[verb]: {verb}\n"));
    out.push_str("Description:\n");
    out.push_str(&format!(
        "{}{} the {object} to progress {task}\n",
        verb.chars().next().map(|c| c.to_ascii_uppercase()).unwrap_or('D'),
        &verb[verb.chars().next().map_or(0, char::len_utf8)..],
    ));
    out.push_str("Before:\n");
    for j in 0..k {
        let q = BEFORE_QUALITIES[j % BEFORE_QUALITIES.len()];
        out.push_str(&scrub(
            &format!("- The {object} is still {q} (state {code}, facet {}).\n", j + 1),
            verb,
        ));
    }
    out.push_str("After:\n");
    for j in 0..k {
        let q = AFTER_QUALITIES[j % AFTER_QUALITIES.len()];
        out.push_str(&scrub(
            &format!("- The {object} is now {q} (state {code}, facet {}).\n", j + 1),
            verb,
        ));
    }
    out
}

/// Builds a whole corpus through the mock generator. `classes[i]` is the
/// (task, step, verb) triple for class id `i`.
pub fn mock_corpus(
    classes: &[(String, String, String)],
    k: usize,
    seed: u64,
) -> Result<DescriptionCorpus, CorpusError> {
    let mut entries = Vec::with_capacity(classes.len());
    for (task, step, verb) in classes {
        let raw = mock_llm_generate(task, step, verb, k, seed);
        let parsed = parse_llm_response(&raw, k)?;
        entries.push(parsed.into_set(task, step));
    }
    DescriptionCorpus::new(k, entries)
}

/// Convenience used by tests and the offline describe path.
pub fn mock_set(task: &str, step: &str, verb: &str, k: usize, seed: u64) -> Result<StepDescriptionSet, CorpusError> {
    let raw = mock_llm_generate(task, step, verb, k, seed);
    Ok(parse_llm_response(&raw, k)?.into_set(task, step))
}
