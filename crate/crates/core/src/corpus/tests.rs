use proptest::prelude::*;
use tempfile::tempdir;

use super::*;

#[test]
fn prompt_has_template_exemplars_and_query() {
    let p = build_prompt("Make Banana Ice Cream", "cut banana", &default_exemplars(), 3);
    assert!(p.starts_with("First, describe the details of [step] for [goal] with one verb."));
    assert!(p.contains(
        "Second, use 3 sentences to describe the status changes of objects before and after [step], avoiding using [verb]."
    ));
    assert!(p.contains("[goal]: Grill steak"));
    assert!(p.contains("[step]: season steak"));
    assert!(p.contains("- The steak is unseasoned."));
    assert!(p.contains("[goal]: Make Kimchi Fried Rice"));
    assert!(p.contains("- The diced ham is blended with the fried rice."));
    assert!(p.ends_with("[goal]: Make Banana Ice Cream\n[step]: cut banana"));
}

#[test]
fn prompt_without_exemplars_is_template_plus_query() {
    let p = build_prompt("T", "do s", &[], 3);
    assert!(p.starts_with("First, describe"));
    assert!(!p.contains("[verb]:"));
    assert!(p.ends_with("[goal]: T\n[step]: do s"));
}

#[test]
fn prompt_is_pure() {
    let a = build_prompt("T", "s", &default_exemplars(), 3);
    let b = build_prompt("T", "s", &default_exemplars(), 3);
    assert_eq!(a, b);
}

const SAMPLE_RESPONSE: &str = "\
[verb]: cut
Description:
Cut banana into small pieces
Before:
- The banana is a whole.
- The banana is uncut.
- The banana is in one piece.
After:
- The banana is in small pieces.
- The banana is cut into pieces.
- The banana is divided into multiple parts.
";

#[test]
fn parse_extracts_all_sections() {
    let r = parse_llm_response(SAMPLE_RESPONSE, 3).unwrap();
    assert_eq!(r.verb, "cut");
    assert_eq!(r.description, "Cut banana into small pieces");
    assert_eq!(r.before[1], "The banana is uncut.");
    assert_eq!(r.after.len(), 3);
    assert_eq!(r.after[2], "The banana is divided into multiple parts.");
}

#[test]
fn parse_ignores_trailing_blank_lines() {
    let padded = format!("{SAMPLE_RESPONSE}\n\n\n");
    assert_eq!(
        parse_llm_response(&padded, 3).unwrap(),
        parse_llm_response(SAMPLE_RESPONSE, 3).unwrap()
    );
}

#[test]
fn parse_reports_wrong_bullet_count_with_section() {
    let two_after = "\
[verb]: cut
Description:
Cut it
Before:
- a
- b
- c
After:
- x
- y
";
    let err = parse_llm_response(two_after, 3).unwrap_err();
    assert_eq!(err.to_string(), "after: expected 3, got 2");
}

#[test]
fn parse_reports_missing_sections() {
    let err = parse_llm_response("Description:\nfoo\n", 3).unwrap_err();
    assert!(err.to_string().contains("[verb]"));
    let err = parse_llm_response("[verb]: x\nBefore:\n- a\n", 3).unwrap_err();
    assert!(err.to_string().contains("Description"));
    let err = parse_llm_response("[verb]: x\nDescription:\nd\nBefore:\n- a\n- b\n- c\n", 3)
        .unwrap_err();
    assert!(err.to_string().contains("After"));
}

#[test]
fn mock_is_deterministic_and_parses() {
    let a = mock_llm_generate("Make Tea", "boil water", "boil", 3, 11);
    let b = mock_llm_generate("Make Tea", "boil water", "boil", 3, 11);
    assert_eq!(a, b);
    let set = parse_llm_response(&a, 3).unwrap().into_set("Make Tea", "boil water");
    assert!(set.violations(3).is_empty(), "{:?}", set.violations(3));
}

#[test]
fn mock_distinguishes_steps_and_avoids_verb() {
    let a = mock_llm_generate("Make Tea", "boil water", "boil", 3, 0);
    let b = mock_llm_generate("Make Tea", "pour water", "pour", 3, 0);
    let pa = parse_llm_response(&a, 3).unwrap();
    let pb = parse_llm_response(&b, 3).unwrap();
    for (x, y) in pa.before.iter().zip(&pb.before) {
        assert_ne!(x, y);
    }
    // Same object, different verbs: the code token still separates them.
    for s in pa.before.iter().chain(&pa.after) {
        assert!(!contains_token(s, "boil"), "verb leaked into {s:?}");
    }
    // A step whose object repeats the verb word is scrubbed.
    let c = mock_llm_generate("Saw Things", "saw the saw", "saw", 2, 0);
    let pc = parse_llm_response(&c, 2).unwrap();
    for s in pc.before.iter().chain(&pc.after) {
        assert!(!contains_token(s, "saw"), "verb leaked into {s:?}");
    }
}

#[test]
fn mock_sentences_are_distinct_within_a_side() {
    let raw = mock_llm_generate("Task", "fix chair", "fix", 6, 1);
    let p = parse_llm_response(&raw, 6).unwrap();
    for side in [&p.before, &p.after] {
        let mut seen = std::collections::HashSet::new();
        for s in side {
            assert!(seen.insert(s.clone()), "duplicate sentence {s:?}");
        }
    }
}

fn tiny_corpus() -> DescriptionCorpus {
    mock_corpus(
        &[
            ("Make Tea".into(), "boil water".into(), "boil".into()),
            ("Make Tea".into(), "pour water".into(), "pour".into()),
        ],
        3,
        5,
    )
    .unwrap()
}

#[test]
fn corpus_round_trip() {
    let corpus = tiny_corpus();
    let dir = tempdir().unwrap();
    let path = dir.path().join("corpus.json");
    corpus.save(&path).unwrap();
    let loaded = DescriptionCorpus::load(&path).unwrap();
    assert_eq!(corpus, loaded);
}

#[test]
fn corpus_load_rejects_gaps() {
    let corpus = tiny_corpus();
    let dir = tempdir().unwrap();
    let path = dir.path().join("corpus.json");
    corpus.save(&path).unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["classes"][1]["id"] = serde_json::json!(5);
    std::fs::write(&path, v.to_string()).unwrap();
    let err = DescriptionCorpus::load(&path).unwrap_err();
    assert_eq!(err.to_string(), "missing step classes: [1]");
}

#[test]
fn corpus_wrong_count_names_class_and_section() {
    let mut entries = Vec::new();
    let set = mock_set("T", "do thing", "do", 3, 0).unwrap();
    let mut bad = set.clone();
    bad.after.pop();
    entries.push(set);
    entries.push(bad);
    let err = DescriptionCorpus::new(3, entries).unwrap_err();
    assert_eq!(err.to_string(), "class 1 after: expected 3 sentences, got 2");
}

#[test]
fn memory_layout_and_index() {
    let corpus = tiny_corpus();
    let feats = embed_corpus(&corpus, &HashedBow::new(16, 0)).unwrap();
    assert_eq!(feats.num_state_rows(), 12); // 2 * C(=2) * K(=3)
    assert_eq!(feats.row(1, StateSide::After, 2), 11);
    assert_eq!(feats.row(0, StateSide::Before, 0), 0);
    assert_eq!(feats.row(1, StateSide::Before, 0), 3);
    assert_eq!(feats.row(0, StateSide::After, 0), 6);
    assert_eq!(feats.step_rows.len(), 2 * 16);
}

#[test]
fn embedding_is_insertion_order_independent() {
    // Same classes featurized twice → identical matrices (canonical order is
    // by class id, not by any map iteration order).
    let corpus = tiny_corpus();
    let f = HashedBow::new(32, 3);
    let a = embed_corpus(&corpus, &f).unwrap();
    let b = embed_corpus(&corpus, &f).unwrap();
    assert_eq!(a.state_rows, b.state_rows);
}

#[test]
fn hashed_bow_is_pure_and_unit_norm() {
    let f = HashedBow::new(64, 9);
    let a = f.feature(0, DescKind::Step, "The pan contains ham.").unwrap();
    let b = f.feature(0, DescKind::Step, "The pan contains ham.").unwrap();
    assert_eq!(a, b);
    let n: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
    let c = f.feature(0, DescKind::Step, "The pan contains rice.").unwrap();
    assert_ne!(a, c);
}

#[test]
fn precomputed_features_and_missing_key() {
    let corpus = tiny_corpus();
    let mut f = Precomputed::new(4);
    for (class, set) in corpus.iter() {
        for j in 0..3 {
            f.insert(class, DescKind::Before(j), vec![class as f32; 4]).unwrap();
            f.insert(class, DescKind::After(j), vec![class as f32 + 0.5; 4]).unwrap();
        }
        let _ = set;
    }
    // Step rows missing → embed_corpus reports which key.
    let err = embed_corpus(&corpus, &f).unwrap_err();
    assert!(err.to_string().contains("class 0 (step)"), "{err}");
    for class in 0..2 {
        f.insert(class, DescKind::Step, vec![0.0; 4]).unwrap();
    }
    let feats = embed_corpus(&corpus, &f).unwrap();
    let r = feats.row(1, StateSide::After, 0);
    assert_eq!(&feats.state_rows[r * 4..r * 4 + 4], &[1.5; 4]);

    let err = f.insert(0, DescKind::Step, vec![0.0; 3]).unwrap_err();
    assert!(err.to_string().contains("expected 4, got 3"));
}

#[test]
fn mock_backend_client_round_trip_with_cache() {
    let dir = tempdir().unwrap();
    let config = LlmClientConfig {
        cache_dir: Some(dir.path().to_path_buf()),
        model: "mock".into(),
        ..LlmClientConfig::default()
    };
    let client = LlmClient::new(config, MockBackend { k: 3, seed: 4 });
    let prompt = build_prompt("Make Tea", "boil water", &default_exemplars(), 3);
    let (set, violations) = client.describe("Make Tea", "boil water", &prompt, 3).unwrap();
    assert!(violations.is_empty());
    assert_eq!(set.verb, "boil");

    // Second call hits the cache: one file, same bytes back.
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 1);
    let (set2, _) = client.describe("Make Tea", "boil water", &prompt, 3).unwrap();
    assert_eq!(set, set2);
}

struct FlakyBackend {
    fail_first: std::cell::Cell<u32>,
}

impl CompletionBackend for FlakyBackend {
    fn complete(&self, _prompt: &str, _config: &LlmClientConfig) -> Result<String, CorpusError> {
        if self.fail_first.get() > 0 {
            self.fail_first.set(self.fail_first.get() - 1);
            return Err(CorpusError::Endpoint("transient".into()));
        }
        Ok(mock_llm_generate("T", "fix chair", "fix", 3, 0))
    }
}

#[test]
fn client_retries_transient_failures() {
    let config = LlmClientConfig {
        max_retries: 2,
        ..LlmClientConfig::default()
    };
    let client = LlmClient::new(config, FlakyBackend { fail_first: 2.into() });
    assert!(client.complete("p").is_ok());

    let config = LlmClientConfig {
        max_retries: 1,
        ..LlmClientConfig::default()
    };
    let client = LlmClient::new(config, FlakyBackend { fail_first: 5.into() });
    assert!(client.complete("p").is_err());
}

struct BadOutputBackend;

impl CompletionBackend for BadOutputBackend {
    fn complete(&self, _prompt: &str, _config: &LlmClientConfig) -> Result<String, CorpusError> {
        // Parses fine but violates verb avoidance.
        Ok("[verb]: cut\nDescription:\nCut it\nBefore:\n- It is cut soon.\n- b\n- c\nAfter:\n- x\n- y\n- z\n".into())
    }

    fn is_authoritative(&self) -> bool {
        true
    }
}

#[test]
fn authoritative_backend_gets_hard_validation_gate() {
    let client = LlmClient::new(LlmClientConfig::default(), BadOutputBackend);
    let err = client.describe("T", "cut thing", "p", 3).unwrap_err();
    assert!(matches!(err, CorpusError::Validation(_)), "{err}");
}

proptest! {
    #[test]
    fn mock_round_trips_for_arbitrary_names(
        task in "[A-Za-z][A-Za-z ]{0,20}",
        object in "[a-z][a-z]{1,10}",
        verb in "[a-z][a-z]{1,10}",
        k in 1usize..6,
        seed in 0u64..1000,
    ) {
        let step = format!("{verb} {object}");
        let raw = mock_llm_generate(&task, &step, &verb, k, seed);
        let parsed = parse_llm_response(&raw, k).unwrap();
        let set = parsed.into_set(&task, &step);
        prop_assert!(set.violations(k).is_empty(), "{:?}", set.violations(k));
    }

    #[test]
    fn corpus_save_load_round_trip_prop(
        n in 1usize..6,
        k in 1usize..5,
        seed in 0u64..100,
    ) {
        let classes: Vec<(String, String, String)> = (0..n)
            .map(|i| (format!("task{}", i / 2), format!("act{i} obj{i}"), format!("act{i}")))
            .collect();
        let corpus = mock_corpus(&classes, k, seed).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.json");
        corpus.save(&path).unwrap();
        prop_assert_eq!(DescriptionCorpus::load(&path).unwrap(), corpus);
    }
}
