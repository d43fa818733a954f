use glauber_core::{stream, Token, UpdateSchedule};
use glauber_net::optim::{AdamConfig, AdamW};
use glauber_net::{generate, probabilities, GenerationSpec, LrSchedule, Mode, ModelParams, NetBackend, NetConfig, Query, TimeConfig};
use proptest::prelude::*;
use rand::SeedableRng;

fn config(vocab: usize, len: usize) -> NetConfig {
    let mut c = NetConfig::new(vocab, len);
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 16;
    c.n_layers = 1;
    c
}

fn base(vocab: usize, len: usize, seed: u64) -> ModelParams<f64> {
    ModelParams::init_base(config(vocab, len), &mut rand::rngs::StdRng::seed_from_u64(seed)).unwrap()
}

fn tokens(len: usize, vocab: usize, seed: u64) -> Vec<Token> {
    use rand::Rng;
    let mut r = stream(seed, 99);
    (0..len).map(|_| r.gen_range(0..vocab as Token)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fresh_time_conditioning_is_the_identity(seed in any::<u64>(), len in 2usize..7, t in 0.0f64..40.0, infill in any::<bool>()) {
        let p = base(3, len, seed);
        let aug = p.augment_time(TimeConfig::new(40), &mut rand::rngs::StdRng::seed_from_u64(seed ^ 1)).unwrap();
        let mode = if infill { Mode::MaskInfill } else { Mode::CausalGen };
        let q = Query { tokens: tokens(len, 3, seed), mode, time: t, positions: (0..len).collect() };
        let a = probabilities(&p, std::slice::from_ref(&q)).unwrap();
        let b = probabilities(&aug, &[q]).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_inputs_identical_outputs(seed in any::<u64>(), len in 2usize..7) {
        let q = Query { tokens: tokens(len, 3, seed), mode: Mode::MaskInfill, time: 0.0, positions: vec![len - 1] };
        let a = probabilities(&base(3, len, seed), std::slice::from_ref(&q)).unwrap();
        let b = probabilities(&base(3, len, seed), &[q]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn generation_respects_frozen_cells_and_schedule(
        seed in any::<u64>(),
        len in 2usize..7,
        rounds in 1usize..4,
        mask in any::<u8>(),
    ) {
        let frozen: Vec<usize> = (0..len).filter(|j| mask >> j & 1 == 1).collect();
        let p = base(3, len, seed).augment_time(TimeConfig::new(len * rounds), &mut rand::rngs::StdRng::seed_from_u64(seed)).unwrap();
        let backend = NetBackend::new(&p).unwrap();
        let mut spec = GenerationSpec::new(UpdateSchedule::build(len, rounds, seed).unwrap());
        spec.frozen = frozen.clone();
        let init = tokens(len, 3, seed ^ 2);
        let rep = generate(&backend, &init, &spec, &mut stream(seed, 0)).unwrap();
        for &j in &frozen {
            prop_assert_eq!(rep.output[j], init[j]);
        }
        prop_assert_eq!(rep.invocations.total(), (rounds + 1) * (len - frozen.len()));
        prop_assert_eq!(rep.invocations.total(), spec.expected_invocations());
        let mut expect: Vec<usize> = spec.schedule.forward_order().into_iter().filter(|j| !frozen.contains(j)).collect();
        expect.reverse();
        prop_assert_eq!(rep.visited, expect);
    }

    #[test]
    fn zero_gradient_step_is_a_no_op(seed in any::<u64>(), steps in 1usize..5, lr in 1e-5f64..1e-1) {
        let mut p = base(3, 4, seed);
        let before = p.clone();
        let mut opt = AdamW::<f64>::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }, &p);
        let zeros: Vec<Vec<f64>> = p.values.iter().map(|v| vec![0.0; v.len()]).collect();
        for _ in 0..steps {
            opt.step(&mut p, &zeros, lr).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn warmup_meets_the_cosine(warmup in 1usize..500, extra in 0usize..1000, peak in 1e-5f64..1e-1) {
        let s = LrSchedule { warmup_steps: warmup, total_steps: warmup + extra, peak_lr: peak, floor_lr: 0.0 };
        let ramp_end = s.peak_lr * warmup as f64 / warmup as f64;
        prop_assert!((s.lr_at(warmup) - ramp_end).abs() < 1e-12);
        prop_assert!((s.lr_at(warmup) - s.lr_at(warmup - 1) - peak / warmup as f64).abs() < 1e-12);
    }
}
