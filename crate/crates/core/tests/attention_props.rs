//! Coverage attention invariants over multi-step decodes.

use densebam::attention::{AttentionConfig, AttentionState, CoverageAttention};
use densebam::autograd::Tape;
use densebam::data::Vocabulary;
use densebam::decoder::{CellKind, DecoderState};
use densebam::encoder::FeatureGrid;
use densebam::model::{Model, ModelConfig};
use densebam::nn::{Ctx, Mode, ParamStore};
use densebam::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct StepCheck {
    alpha_sum_err: f64,
    beta_exact: bool,
    context_in_range: bool,
}

/// Per-channel [min, max] over the positions of an L×C matrix.
fn channel_ranges(positions: &Tensor) -> Vec<(f64, f64)> {
    let (l, c) = (positions.shape()[0], positions.shape()[1]);
    (0..c)
        .map(|j| {
            (0..l).map(|i| positions.get(&[i, j])).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

fn check_step(beta_old: &Tensor, beta_new: &Tensor, alpha: &Tensor, context: &Tensor, ranges: &[(f64, f64)]) -> StepCheck {
    let beta_exact = beta_old.data().iter().zip(alpha.data()).zip(beta_new.data()).all(|((&b, &a), &n)| n == b + a);
    let context_in_range = context.data().iter().zip(ranges).all(|(&v, &(lo, hi))| v >= lo - 1e-12 && v <= hi + 1e-12);
    StepCheck {
        alpha_sum_err: (alpha.sum() - 1.0).abs(),
        beta_exact,
        context_in_range,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn twenty_steps_of_attention(
        c in 1usize..6, h in 1usize..5, w in 1usize..7, hidden in 1usize..6,
        kernel in prop::sample::select(vec![1usize, 3, 5]), scale in 0.1f64..20.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { dim: 5, coverage_channels: 3, coverage_kernel: kernel };
        let att = CoverageAttention::new(&mut store, &cfg, hidden, c, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let feats = Tensor::uniform(&[1, c, h, w], scale, &mut rng);
        let grid = FeatureGrid::from_tensor(&ctx, &feats).unwrap();
        let ranges = channel_ranges(&tape.value(grid.positions));
        let prep = att.prepare(&ctx, &grid).unwrap();
        let mut state = AttentionState::initial(&ctx, &grid);
        prop_assert!(tape.value(state.beta).data().iter().all(|&b| b == 0.0));
        for _ in 0..20 {
            let hp = tape.constant(Tensor::uniform(&[hidden], 3.0, &mut rng));
            let out = att.attend(&ctx, hp, &grid, &prep, state).unwrap();
            let chk = check_step(
                &tape.value(state.beta), &tape.value(out.state.beta),
                &tape.value(out.alpha), &tape.value(out.context), &ranges,
            );
            prop_assert!(chk.alpha_sum_err <= 1e-9);
            prop_assert!(chk.beta_exact);
            prop_assert!(chk.context_in_range);
            state = out.state;
        }
        // After T steps the coverage holds T units of attention.
        prop_assert!((tape.value(state.beta).sum() - 20.0).abs() < 1e-9);
    }
}

#[test]
fn twenty_decoder_steps_keep_attention_invariants() {
    let vocab = Vocabulary::synthetic();
    for cell in [CellKind::Gru, CellKind::GiGru] {
        let mut cfg = ModelConfig::default();
        cfg.decoder.cell = cell;
        let model = Model::new(&cfg, vocab.clone(), 5).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Tensor::new(&[1, 1, 64, 96], (0..64 * 96).map(|_| f64::from(rng.random_bool(0.2) as u8)).collect()).unwrap();
        let feats = model.encode(&ctx, &img).unwrap();
        let grid = FeatureGrid::from_batch(&ctx, feats, 0).unwrap();
        let ranges = channel_ranges(&tape.value(grid.positions));
        let prep = model.attention.prepare(&ctx, &grid).unwrap();
        let mut state = DecoderState::initial(&ctx, cfg.decoder.hidden);
        let mut attn = AttentionState::initial(&ctx, &grid);
        for _ in 0..20 {
            let prev = rng.random_range(0..vocab.len());
            let out = model.decoder.step(&ctx, &model.attention, &grid, &prep, prev, state, attn).unwrap();
            let alpha = tape.value(out.alpha);
            let context = tape.matvec(tape.transpose(grid.positions).unwrap(), out.alpha).unwrap();
            let chk = check_step(&tape.value(attn.beta), &tape.value(out.attention.beta), &alpha, &tape.value(context), &ranges);
            assert!(chk.alpha_sum_err <= 1e-9, "{cell:?}");
            assert!(chk.beta_exact, "{cell:?}");
            assert!(chk.context_in_range, "{cell:?}");
            state = out.state;
            attn = out.attention;
        }
    }
}
