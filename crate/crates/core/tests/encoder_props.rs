//! Encoder structure and bottleneck attention bounds.

use densebam::autograd::Tape;
use densebam::encoder::{Bam, Encoder, EncoderConfig};
use densebam::nn::{Ctx, Mode, ParamId, ParamStore};
use densebam::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dense_connectivity_of_the_6_12_24_preset() {
    let cfg = EncoderConfig::densenet121();
    assert_eq!(cfg.layers_per_block, [6, 12, 24]);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    // Each layer sees the block input concatenated with every earlier layer's
    // k new maps; transitions halve the channel count.
    let k = cfg.growth_rate;
    let mut c0 = cfg.stem_channels;
    let mut expected_blocks = Vec::new();
    for (b, &layers) in [6usize, 12, 24].iter().enumerate() {
        let inputs: Vec<usize> = (0..layers).map(|l| c0 + l * k).collect();
        let out = c0 + layers * k;
        expected_blocks.push((inputs, out));
        c0 = if b < 2 { out / 2 } else { out };
    }
    assert_eq!(expected_blocks[0].1, 64 + 6 * 32);
    assert_eq!(expected_blocks[2].1, 1024);

    let blocks: Vec<_> = enc.blocks().collect();
    assert_eq!(blocks.len(), 3);
    for (block, (inputs, out)) in blocks.iter().zip(&expected_blocks) {
        let got: Vec<usize> = block.layers.iter().map(|l| l.in_channels).collect();
        assert_eq!(&got, inputs);
        assert_eq!(block.out_channels, *out);
    }
    let plan = cfg.plan();
    for (bp, (inputs, out)) in plan.blocks.iter().zip(&expected_blocks) {
        assert_eq!(&bp.layer_inputs, inputs);
        assert_eq!(bp.out_channels, *out);
    }
    assert_eq!(enc.out_channels(), 1024);
    let sites: Vec<(usize, usize)> = plan.bam_sites().iter().map(|s| (s.block, s.channels)).collect();
    assert_eq!(sites, [(2, 256), (3, 1024)]);
}

#[test]
fn desk_preset_yields_a_4x4_grid_for_64x64_images() {
    let cfg = EncoderConfig::desk();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let img = Tensor::uniform(&[2, 1, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let out = enc.forward(&ctx, tape.constant(img)).unwrap();
    assert_eq!(tape.shape(out), [2, enc.out_channels(), 4, 4]);
    assert_eq!(enc.output_extent(64, 240).unwrap(), (4, 15));
    assert!(enc.output_extent(4, 4).is_err());
}

fn bam(channels: usize, seed: u64) -> (ParamStore, Bam) {
    let mut store = ParamStore::new();
    let b = Bam::new(&mut store, "bam", channels, 2, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, b)
}

fn zero(store: &mut ParamStore, id: ParamId) {
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, Tensor::zeros(&shape)).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bam_output_lies_between_one_and_two_times_the_input(
        n in 2usize..4, h in 3usize..8, w in 3usize..8, eval in any::<bool>(), seed in any::<u64>(),
    ) {
        let (store, b) = bam(4, seed);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, if eval { Mode::Eval } else { Mode::Train });
        let x = Tensor::uniform(&[n, 4, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).map(f64::abs);
        let y = b.forward(&ctx, tape.constant(x.clone())).unwrap();
        for (&xi, &yi) in x.data().iter().zip(tape.value(y).data()) {
            prop_assert!(yi >= xi && yi <= 2.0 * xi, "x={xi} y={yi}");
        }
    }
}

#[test]
fn zeroed_logit_branches_scale_by_exactly_one_and_a_half() {
    for mode in [Mode::Train, Mode::Eval] {
        let (mut store, b) = bam(4, 3);
        zero(&mut store, b.channel.fc2.weight);
        zero(&mut store, b.channel.fc2.bias);
        zero(&mut store, b.spatial.project.weight);
        if let Some(bias) = b.spatial.project.bias {
            zero(&mut store, bias);
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, mode);
        let x = Tensor::uniform(&[2, 4, 5, 5], 3.0, &mut ChaCha8Rng::seed_from_u64(4));
        let y = b.forward(&ctx, tape.constant(x.clone())).unwrap();
        for (&xi, &yi) in x.data().iter().zip(tape.value(y).data()) {
            assert_eq!(yi, 1.5 * xi, "{mode:?}");
        }
    }
}
