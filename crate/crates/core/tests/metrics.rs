mod common;

use circuitscope::metrics::{logit_diff_row, prob_ratio_row, prob_row, token_rank_row, AnswerPair};
use proptest::prelude::*;

fn pair() -> AnswerPair {
    AnswerPair::new(2, 5, ["c".into(), "i".into()]).unwrap()
}

proptest! {
    #[test]
    fn logit_diff_is_shift_invariant(row in prop::collection::vec(-20.0f32..20.0, 8), shift in -50.0f32..50.0) {
        let shifted: Vec<f32> = row.iter().map(|x| x + shift).collect();
        let a = logit_diff_row(&row, &pair());
        let b = logit_diff_row(&shifted, &pair());
        prop_assert!((a - b).abs() <= 1e-4 * (1.0 + shift.abs()));
    }

    #[test]
    fn ratio_is_exp_of_diff(row in prop::collection::vec(-20.0f32..20.0, 8)) {
        let d = logit_diff_row(&row, &pair()) as f64;
        let r = prob_ratio_row(&row, &pair()) as f64;
        prop_assert!((r - d.exp()).abs() <= 1e-6 * d.exp());
        let from_probs = prob_row(&row, 2) as f64 / prob_row(&row, 5) as f64;
        prop_assert!((from_probs - r).abs() <= 1e-5 * r);
    }

    #[test]
    fn argmax_has_rank_one(row in prop::collection::vec(-5.0f32..5.0, 1..64)) {
        let best = common::argmax(&row) as u32;
        prop_assert_eq!(token_rank_row(&row, best), 1);
    }
}

#[test]
fn answer_words_are_single_tokens_with_a_leading_space() {
    let tok = common::gpt2_tokenizer();
    let yes_no = AnswerPair::parse(tok, "Yes,No").unwrap();
    assert_eq!((yes_no.correct_id, yes_no.incorrect_id), (3363, 1400));
    assert_eq!(yes_no.labels, ["Yes".to_owned(), "No".to_owned()]);
    assert!(AnswerPair::parse(tok, "Yes").is_err());
    assert!(AnswerPair::from_words(tok, "antidisestablishmentarianism", "No").is_err());
    assert_eq!(yes_no.swapped().correct_id, 1400);
}
