use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssgan_core::data::ImageSet;
use ssgan_core::fewshot::{evaluate, EpisodeConfig};
use ssgan_core::nn::NetConfig;
use ssgan_core::tensor::Tensor;
use ssgan_core::trainer::{
    load_checkpoint, load_discriminator, load_generator, run_training, HyperParams, Preset, RunOptions, TrainState,
    LOSS_CSV_HEADER,
};
use ssgan_core::Error;

fn net() -> NetConfig {
    NetConfig {
        image_size: 16,
        channels: 1,
        base_width: 4,
        d: 8,
        blocks: 2,
        ..NetConfig::default()
    }
}

fn hp(preset: Preset) -> HyperParams {
    let mut hp = HyperParams {
        t1: 3,
        t2: 2,
        batch_stage1: 4,
        batch_stage2: 2,
        patch_size: 4,
        seed: 21,
        ..HyperParams::desk().with_preset(preset)
    };
    hp.prior.d = 8;
    hp
}

/// Four classes of noisy images, each a different brightness ramp.
fn data(per: usize) -> ImageSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4 * per;
    let images = Tensor::from_fn(&[n, 1, 16, 16], |i| {
        let (img, px) = (i / 256, i % 256);
        let ramp = match img % 4 {
            0 => (px % 16) as f32 / 16.0,
            1 => (px / 16) as f32 / 16.0,
            2 => 1.0 - (px % 16) as f32 / 16.0,
            _ => 1.0 - (px / 16) as f32 / 16.0,
        };
        (2.0 * ramp - 1.0 + rng.random_range(-0.1..0.1)).clamp(-1.0, 1.0)
    });
    ImageSet::new(images, (0..n).map(|i| i % 4).collect()).unwrap()
}

#[test]
fn two_stage_run_writes_log_and_checkpoint_then_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let set = data(6);
    let mut s = TrainState::<f32>::new(net(), hp(Preset::GdBT2)).unwrap();
    let opts = RunOptions { checkpoint_every: 2, ..RunOptions::new(dir.path()) };
    let mut seen = Vec::new();
    let path = run_training(&mut s, &set, &opts, |r| seen.push((r.iter, r.stage))).unwrap();
    assert_eq!(seen, vec![(1, 1), (2, 1), (3, 1), (4, 2), (5, 2)]);

    let csv = fs::read_to_string(opts.loss_path()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
    assert_eq!(lines.count(), 5);

    let ckpt = load_checkpoint(&path).unwrap();
    assert!(ckpt.meta.has_snapshot);
    assert_eq!(ckpt.meta.counters.stage2_iters, 2);
    let d = load_discriminator::<f32>(&ckpt).unwrap();
    load_generator::<f32>(&ckpt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = EpisodeConfig { n_way: 2, k_shot: 1, queries: 3 };
    let r = evaluate(&d, &set, cfg, 30, &mut rng).unwrap();
    assert!((0.0..=1.0).contains(&r.mean));
    assert_eq!(r.accuracies.len(), 30);
}

#[test]
fn same_seed_reproduces_the_loss_log() {
    let set = data(4);
    let logs: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut s = TrainState::<f32>::new(net(), hp(Preset::GdBT1)).unwrap();
            let opts = RunOptions::new(dir.path());
            run_training(&mut s, &set, &opts, |_| {}).unwrap();
            fs::read_to_string(opts.loss_path()).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn triplet_only_checkpoint_has_no_generator() {
    let dir = tempfile::tempdir().unwrap();
    let set = data(4);
    let mut s = TrainState::<f32>::new(net(), hp(Preset::T)).unwrap();
    let path = run_training(&mut s, &set, &RunOptions::new(dir.path()), |r| assert_eq!(r.loss_g_adv, None)).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert!(matches!(load_generator::<f32>(&ckpt), Err(Error::MissingGenerator)));
    load_discriminator::<f64>(&ckpt).unwrap();
}

#[test]
fn every_preset_trains_a_few_iterations() {
    let set = data(4);
    for preset in Preset::ALL {
        let mut s = TrainState::<f32>::new(net(), hp(preset)).unwrap();
        let mut n = 0;
        while let Some(r) = s.next_iteration(&set).unwrap() {
            assert!(r.total.is_finite(), "{preset:?}");
            n += 1;
        }
        let expected = if hp(preset).two_stage() { 5 } else { 3 };
        assert_eq!(n, expected, "{preset:?}");
    }
}
