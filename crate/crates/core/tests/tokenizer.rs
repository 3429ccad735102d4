mod common;

use circuitscope::tokenizer::{BOS_ID, END_OF_TEXT};
use proptest::prelude::*;
use tiktoken_rs::CoreBPE;

use common::gpt2_tokenizer;

fn reference() -> &'static CoreBPE {
    static BPE: std::sync::OnceLock<CoreBPE> = std::sync::OnceLock::new();
    BPE.get_or_init(|| tiktoken_rs::r50k_base().unwrap())
}

fn reference_ids(text: &str) -> Vec<u32> {
    reference().encode_ordinary(text).into_iter().map(|id| id as u32).collect()
}

#[test]
fn hello_world_matches_reference_ids() {
    let tok = gpt2_tokenizer();
    let seq = tok.encode("Hello world", false).unwrap();
    // ids produced by the Hugging Face `tokenizers` byte-level BPE on the same files
    assert_eq!(seq.ids, vec![15496, 995]);
    assert_eq!(seq.ids, reference_ids("Hello world"));
}

#[test]
fn answer_words_are_single_tokens() {
    let tok = gpt2_tokenizer();
    assert_eq!(tok.encode(" Yes", false).unwrap().ids, vec![3363]);
    assert_eq!(tok.encode(" No", false).unwrap().ids, vec![1400]);
    assert_eq!(tok.single_token_id("Mary"), Some(5335));
}

#[test]
fn empty_text_with_bos_is_just_bos() {
    let tok = gpt2_tokenizer();
    assert_eq!(tok.encode("", true).unwrap().ids, vec![BOS_ID]);
    assert_eq!(tok.decode(&[]).unwrap(), "");
}

#[test]
fn end_of_text_decodes_to_its_literal() {
    assert_eq!(gpt2_tokenizer().decode(&[BOS_ID]).unwrap(), END_OF_TEXT);
    assert_eq!(gpt2_tokenizer().vocab_size(), 50257);
}

#[test]
fn out_of_range_id_is_rejected() {
    assert!(gpt2_tokenizer().decode(&[50257]).is_err());
}

#[test]
fn round_trip_on_prompt_text() {
    let tok = gpt2_tokenizer();
    let s = "The customer says on the phone";
    assert_eq!(tok.decode(&tok.encode(s, false).unwrap().ids).unwrap(), s);
}

#[test]
fn single_token_words() {
    let tok = gpt2_tokenizer();
    assert!(tok.is_single_token("Mary"));
    assert!(!tok.is_single_token(""));
    assert!(!tok.is_single_token("antidisestablishmentarianism"));
    assert_eq!(reference_ids(" antidisestablishmentarianism").len(), 5);
}

#[test]
fn tricky_whitespace_and_contractions_match_reference() {
    let tok = gpt2_tokenizer();
    for s in [
        "I'm on unemployment.  It's   fine\n\n  ok",
        "$80,000. He's 30 days overdue!!",
        "LGBTQ+-owned   \t business?",
        "naïve café — 東京 🙂",
        "   leading and trailing   ",
    ] {
        assert_eq!(tok.encode(s, false).unwrap().ids, reference_ids(s), "{s:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_and_reference_agreement(s in "[ -~\\n\\t]{0,60}") {
        let tok = gpt2_tokenizer();
        let ids = tok.encode(&s, false).unwrap().ids;
        prop_assert_eq!(tok.decode(&ids).unwrap(), s.clone());
        prop_assert_eq!(ids, reference_ids(&s));
    }

    #[test]
    fn round_trip_unicode(s in "\\PC{0,24}") {
        let tok = gpt2_tokenizer();
        let ids = tok.encode(&s, false).unwrap().ids;
        prop_assert_eq!(tok.decode(&ids).unwrap(), s);
    }
}
