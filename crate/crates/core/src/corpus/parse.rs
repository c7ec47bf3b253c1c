//! Parsing of `[verb]`/`Description`/`Before`/`After` response blocks.

use super::{CorpusError, StepDescriptionSet};

/// The parsed body of one response, before it is attached to a (task, step).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub verb: String,
    pub description: String,
    pub before: Vec<String>,
    pub after: Vec<String>,
}

impl ParsedResponse {
    pub fn into_set(self, task: &str, step: &str) -> StepDescriptionSet {
        StepDescriptionSet {
            task: task.to_string(),
            step: step.to_string(),
            verb: self.verb,
            step_description: self.description,
            before: self.before,
            after: self.after,
        }
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Expects, in order: a `[verb]: ...` line, a `Description:` section, a
/// `Before:` section with exactly `k` `- ` bullets, and an `After:` section
/// with exactly `k` bullets. Blank lines and surrounding whitespace are
/// ignored; bullet text is whitespace-normalized.
pub fn parse_llm_response(raw: &str, k: usize) -> Result<ParsedResponse, CorpusError> {
    let lines: Vec<&str> = raw.lines().map(str::trim_end).collect();
    let mut i = 0;
    let skip_blank = |i: &mut usize| {
        while *i < lines.len() && lines[*i].trim().is_empty() {
            *i += 1;
        }
    };

    skip_blank(&mut i);
    let verb = match lines.get(i).map(|l| l.trim()) {
        Some(l) if l.to_ascii_lowercase().starts_with("[verb]:") => {
            normalize_ws(&l["[verb]:".len()..])
        }
        _ => return Err(CorpusError::MissingSection { section: "[verb]" }),
    };
    i += 1;

    skip_blank(&mut i);
    match lines.get(i).map(|l| l.trim()) {
        Some(l) if l.eq_ignore_ascii_case("description:") => i += 1,
        _ => {
            return Err(CorpusError::MissingSection {
                section: "Description",
            })
        }
    }
    let mut description_parts = Vec::new();
    while i < lines.len() {
        let l = lines[i].trim();
        if l.eq_ignore_ascii_case("before:") {
            break;
        }
        if !l.is_empty() {
            description_parts.push(normalize_ws(l));
        }
        i += 1;
    }
    if i >= lines.len() {
        return Err(CorpusError::MissingSection { section: "Before" });
    }
    i += 1; // past "Before:"

    let take_bullets = |i: &mut usize, stop: Option<&str>| -> Vec<String> {
        let mut out = Vec::new();
        while *i < lines.len() {
            let l = lines[*i].trim();
            if let Some(stop) = stop {
                if l.eq_ignore_ascii_case(stop) {
                    break;
                }
            }
            if let Some(rest) = l.strip_prefix("- ").or_else(|| l.strip_prefix('-')) {
                out.push(normalize_ws(rest));
            } else if !l.is_empty() {
                break;
            }
            *i += 1;
        }
        out
    };

    let before = take_bullets(&mut i, Some("after:"));
    skip_blank(&mut i);
    match lines.get(i).map(|l| l.trim()) {
        Some(l) if l.eq_ignore_ascii_case("after:") => i += 1,
        _ => return Err(CorpusError::MissingSection { section: "After" }),
    }
    let after = take_bullets(&mut i, None);

    if before.len() != k {
        return Err(CorpusError::BulletCount {
            section: "before",
            expected: k,
            got: before.len(),
        });
    }
    if after.len() != k {
        return Err(CorpusError::BulletCount {
            section: "after",
            expected: k,
            got: after.len(),
        });
    }
    Ok(ParsedResponse {
        verb,
        description: description_parts.join(" "),
        before,
        after,
    })
}
