use dcim_core::autodiff::Tape;
use dcim_core::ctc::{ctc_loss, ctc_loss_value, edit_distance, greedy_decode, wer, LabelSequence};
use dcim_core::verify::ctc_oracle::random_log_probs;
use dcim_core::verify::enumerate_loss;
use dcim_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn dp_matches_enumeration(seed in 0u64..10_000, t in 1usize..6, v in 2usize..4, u in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logp = random_log_probs(t, v, &mut rng);
        let tokens: Vec<usize> = (0..u).map(|i| 1 + (seed as usize + i) % (v - 1)).collect();
        let labels = LabelSequence::new(tokens.clone(), v).unwrap();
        let dp = ctc_loss_value(&logp, &labels).unwrap();
        let bf = enumerate_loss(&logp, &tokens);
        if bf.is_infinite() {
            prop_assert!(dp.is_infinite());
        } else {
            prop_assert!((dp - bf).abs() <= 1e-9, "dp {} enum {}", dp, bf);
            prop_assert!(dp >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_rows_sum_to_zero_in_logit_space(seed in 0u64..1000) {
        // d loss / d logits = softmax - posterior, whose rows sum to zero
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_log_probs(5, 4, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(z);
        let lp = tape.log_softmax(x, 1).unwrap();
        let labels = LabelSequence::new(vec![1, 2], 4).unwrap();
        let loss = ctc_loss(&tape, lp, &labels).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap();
        for r in 0..5 {
            let s: f64 = gx.row(r).iter().sum();
            prop_assert!(s.abs() < 1e-12);
        }
    }
}

#[test]
fn greedy_decoding_of_a_confident_path() {
    // path 1 1 0 1 2 2 collapses to 1 1 2
    let path = [1, 1, 0, 1, 2, 2];
    let logp = Tensor::from_fn(&[6, 3], |i| if i % 3 == path[i / 3] { 0.0 } else { -20.0 });
    assert_eq!(greedy_decode(&logp), vec![1, 1, 2]);
    let labels = LabelSequence::new(vec![1, 1, 2], 3).unwrap();
    assert!(ctc_loss_value(&logp, &labels).unwrap() < 1e-6);
}

#[test]
fn wer_is_pooled_over_utterances() {
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
    let refs = vec![vec![1, 2, 3], vec![4]];
    let hyps = vec![vec![1, 3], vec![4, 4]];
    assert!((wer(&refs, &hyps).unwrap() - 0.5).abs() < 1e-12);
    assert!(wer(&refs, &hyps[..1]).is_err());
}
