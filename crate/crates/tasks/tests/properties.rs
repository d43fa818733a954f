use glauber_core::{stream, Token};
use glauber_net::ReverseBackend;
use glauber_tasks::eval::{bon_eval, sudoku_puzzles, zebra_puzzles, Puzzle};
use glauber_tasks::hmm::HmmCorpus;
use glauber_tasks::pipeline::SudokuCorpus;
use glauber_tasks::sudoku::{decode_task, encode_solved, gen_minimal_sudoku, gen_sudoku};
use glauber_tasks::zebra::{gen_zebra_fitting, solve_zebra, ZebraCodec};
use proptest::prelude::*;

/// Uniform over the vocabulary in both modes.
struct Flat(usize);

impl ReverseBackend for Flat {
    fn vocab(&self) -> usize {
        self.0
    }
    fn causal_batch(&self, xs: &[Vec<Token>], _: usize, _: &[Vec<usize>]) -> glauber_net::Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0 / self.0 as f64; self.0]; xs.len()])
    }
    fn infill_batch(&self, xs: &[Vec<Token>], _: usize, _: usize, _: &[Vec<usize>]) -> glauber_net::Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0 / self.0 as f64; self.0]; xs.len()])
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sudoku_instances_are_unique_and_round_trip(seed in any::<u64>(), clues in 4usize..12, minimal in any::<bool>()) {
        let inst = if minimal { gen_minimal_sudoku(4, seed).unwrap() } else { gen_sudoku(4, clues, seed).unwrap() };
        prop_assert!(inst.is_uniquely_solvable().unwrap());
        prop_assert!(inst.accepts(&inst.solution));
        prop_assert_eq!(decode_task(4, &encode_solved(&inst)).unwrap(), inst);
    }

    #[test]
    fn corpus_draws_are_unique(seed in any::<u64>()) {
        let inst = SudokuCorpus::desk().instance(seed);
        prop_assert!(inst.is_uniquely_solvable().unwrap());
        prop_assert!(inst.clues.len() <= 8);
    }

    #[test]
    fn zebra_instances_are_unique_and_round_trip(seed in any::<u64>(), m in 2usize..4, categories in 2usize..4) {
        let codec = ZebraCodec { m, categories, max_clues: 12 };
        let inst = gen_zebra_fitting(&codec, seed).unwrap();
        prop_assert_eq!(solve_zebra(&inst).unwrap(), vec![inst.solution.clone()]);
        let (tokens, frozen) = codec.encode_solved(&inst).unwrap();
        prop_assert_eq!(frozen.len(), codec.preamble_len());
        prop_assert_eq!(codec.decode(&tokens).unwrap(), inst.clone());
        let pz = Puzzle::Zebra { codec, instance: inst };
        prop_assert!(pz.solved(&tokens));
        prop_assert_eq!(pz.violations(&tokens), 0);
    }

    #[test]
    fn hmm_likelihood_matches_enumeration(seed in any::<u64>(), hidden in 1usize..4, vocab in 2usize..4, len in 1usize..9, alpha in 0.2f64..2.0) {
        let hmm = HmmCorpus::random(hidden, vocab, len, alpha, seed).unwrap();
        let x = hmm.sample(&mut stream(seed, 5));
        let exact = hmm.likelihood_by_paths(&x);
        prop_assert!((hmm.log_likelihood(&x).unwrap().exp() - exact).abs() < 1e-10);
    }

    #[test]
    fn best_of_n_ledger_balances(seed in any::<u64>(), k in 1usize..4, window in 1usize..4, zebra in any::<bool>()) {
        let (pz, vocab) = if zebra {
            let codec = ZebraCodec { m: 3, categories: 2, max_clues: 6 };
            let inst = (0..3).map(|i| gen_zebra_fitting(&codec, seed.wrapping_add(i)).unwrap()).collect();
            (zebra_puzzles(codec, inst), codec.vocab())
        } else {
            (sudoku_puzzles((0..3).map(|i| gen_sudoku(4, 6, seed.wrapping_add(i)).unwrap()).collect()), 4)
        };
        let rep = bon_eval(&Flat(vocab), &Flat(vocab), &pz, k, seed, window, seed).unwrap();
        prop_assert!(rep.ledger.balanced());
        prop_assert_eq!(rep.ledger.ar_candidates, 2 * rep.ledger.glauber_candidates);
    }
}
