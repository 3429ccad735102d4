mod common;

use std::collections::BTreeMap;

use circuitscope::prompts::{make_dataset, Family, NameRegistry, TemplateLibrary};
use circuitscope::Error;
use common::{gpt2_tokenizer, parity_fixture};
use proptest::prelude::*;

fn library() -> &'static TemplateLibrary {
    static LIB: std::sync::OnceLock<TemplateLibrary> = std::sync::OnceLock::new();
    LIB.get_or_init(TemplateLibrary::builtin)
}

#[test]
fn name_lists_tokenize_as_declared() {
    let names = NameRegistry::builtin();
    names.validate(gpt2_tokenizer()).unwrap();
    assert_eq!(names.male.len(), 100);
    assert_eq!(names.female.len(), 100);
    let bad = NameRegistry {
        male: vec!["Bartholomew".into()],
        female: vec![],
        anchor: vec![],
    };
    assert!(matches!(bad.validate(gpt2_tokenizer()), Err(Error::Vocab(_))));
}

#[test]
fn every_template_answer_is_a_single_token() {
    let tok = gpt2_tokenizer();
    for t in &library().templates {
        let prompts = make_dataset(t, 3.min(t.capacity() as usize), 1).unwrap();
        for p in prompts {
            p.answer_pair(tok).unwrap_or_else(|e| panic!("{}: {e}", t.name));
        }
    }
}

#[test]
fn shipped_fl_pairs_are_aligned() {
    let tok = gpt2_tokenizer();
    let pairs = library().pair("gender-credit").unwrap().shipped_pairs(tok, true).unwrap();
    assert_eq!(pairs.len(), 4);
    for p in &pairs {
        assert_eq!(p.clean_tokens.len(), 61, "{}", p.clean_text);
        assert_eq!(p.corrupted_tokens.len(), 61);
        assert_eq!(p.diff_positions, vec![22, 29, 42, 43, 44, 45]);
        assert_eq!(p.slot_positions["X"], vec![22]);
        assert_eq!(p.slot_positions["P"], vec![29]);
        assert_eq!(p.slot_positions["Y"], vec![42]);
        assert_eq!(p.slot_positions["Z"], vec![44, 45]);
        assert_eq!(tok.decode(&p.clean_tokens.ids[54..55]).unwrap(), " gender");
        assert_eq!(p.answers.correct_id, 3363);
        assert_eq!(p.answers.incorrect_id, 1400);
    }
    let first = &pairs[0];
    assert!(first.clean_text.starts_with("Dwayne's credit score is 600."));
    assert!(first.clean_text.contains("Mary's credit score is 800. She was"));
    assert!(first.corrupted_text.contains("John's credit score is 800. He was"));
    assert!(first.clean_text.contains("Mary and Dwayne have"));
    assert!(first.corrupted_text.contains("Dwayne and John have"));
}

#[test]
fn fl_pair_rejects_unlisted_or_multi_token_names() {
    let tok = gpt2_tokenizer();
    let lib = library();
    assert!(matches!(lib.make_fl_pair("Dwayne", "John", "Mary", tok, true), Err(Error::Vocab(_))));
    let pair = lib.pair("gender-credit").unwrap();
    let roles = ["Dwayne".to_string(), "Bartholomewina".to_string(), "John".to_string()];
    assert!(matches!(pair.make_pair(&roles, tok, true), Err(Error::Alignment(_))));
}

#[test]
fn fixture_prompts_match_rendered_templates() {
    let tok = gpt2_tokenizer();
    let fixture = parity_fixture();
    let lib = library();
    let fl = lib.pair("gender-credit").unwrap().make_pair(
        &["Dwayne".into(), "Mary".into(), "John".into()],
        tok,
        true,
    )
    .unwrap();
    let canonical = lib.template("canonical").unwrap().render(&BTreeMap::new()).unwrap();
    let texts: Vec<&str> = fixture.prompts.iter().map(|p| p.text.as_str()).collect();
    assert!(texts.contains(&fl.clean_text.as_str()));
    assert!(texts.contains(&fl.corrupted_text.as_str()));
    assert!(texts.contains(&canonical.as_str()));
    for p in &fixture.prompts {
        assert_eq!(tok.encode(&p.text, fixture.bos).unwrap().ids, p.ids);
    }
}

#[test]
fn random_fl_pairs_are_seeded() {
    let tok = gpt2_tokenizer();
    let a = library().random_pairs("gender-credit", 10, 3, tok, true).unwrap();
    let b = library().random_pairs("gender-credit", 10, 3, tok, true).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|p| p.clean_tokens.len() == 61));
}

#[test]
fn families_are_populated() {
    for f in [Family::Fl, Family::Tcpa, Family::Udaap, Family::Ioi] {
        assert!(!library().family(f).is_empty(), "{f}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn any_listed_names_give_an_aligned_pair(ai in 0usize..112, bi in 0usize..100, ci in 0usize..100) {
        let lib = library();
        let names = &lib.names;
        let a = if ai < names.anchor.len() { &names.anchor[ai] } else { &names.male[ai - names.anchor.len()] };
        let b = &names.female[bi];
        let c = &names.male[ci];
        prop_assume!(a != c);
        let pair = lib.make_fl_pair(a, b, c, gpt2_tokenizer(), true).unwrap();
        prop_assert_eq!(pair.clean_tokens.len(), pair.corrupted_tokens.len());
        let first = pair.slot_positions["X"][0];
        let last = *pair.slot_positions["Z"].last().unwrap();
        prop_assert_eq!(pair.diff_positions.first().copied(), Some(first));
        prop_assert!(pair.diff_positions.iter().all(|p| *p <= last));
        prop_assert!(pair.diff_positions.contains(&pair.slot_positions["P"][0]));
    }

    #[test]
    fn datasets_are_distinct_and_reproducible(n in 1usize..40, seed in any::<u64>()) {
        let t = library().template("abc").unwrap();
        let a = make_dataset(t, n, seed).unwrap();
        prop_assert_eq!(&a, &make_dataset(t, n, seed).unwrap());
        let texts: std::collections::HashSet<_> = a.iter().map(|p| p.text.clone()).collect();
        prop_assert_eq!(texts.len(), n);
    }
}
