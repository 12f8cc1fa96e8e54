mod common;

use p2i_core::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
use p2i_core::dataset::{Setting, SplitPlan, TrajectoryDataset};
use p2i_core::losses::LossWeights;
use p2i_core::networks::{Ablation, ModelBundle};
use p2i_core::objective::{discriminator_pass, param_hash, DTermWeights};
use p2i_core::pose::encode_pose;
use p2i_core::tensor::Tensor;
use p2i_core::trainer::{init_bundle, train_phase1, train_phase2, Outputs, TrainConfig};
use p2i_core::Error;

fn setup(dir: &std::path::Path) -> (TrajectoryDataset, SplitPlan) {
    let ds = common::circle_dataset(dir, 8, 12, &[1.0]);
    let frames = &ds.sequences[0].frames;
    let split = SplitPlan {
        setting: Setting::A,
        n: 1,
        train: frames[..10].iter().map(|f| (0, f.frame_id)).collect(),
        test: frames[10..].iter().map(|f| (0, f.frame_id)).collect(),
    };
    (ds, split)
}

fn cfg(steps1: usize, steps2: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps_phase1: steps1,
        steps_phase2: steps2,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn seeded_runs_reproduce_loss_traces() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    let run = || {
        let c = cfg(6, 4);
        let mut b = init_bundle(&common::tiny_config(), &c, &ds).unwrap();
        let r1 = train_phase1(&mut b, &ds, &split, &c, &Outputs::default()).unwrap();
        let r2 = train_phase2(&mut b, &ds, &split, &c, &Outputs::default()).unwrap();
        let trace: Vec<_> = r1.records.iter().chain(&r2.records).map(|r| r.losses()).collect();
        (trace, param_hash::<f32>(&[&b.g]))
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn zero_steps_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    let c = cfg(0, 0);
    let mut b = init_bundle(&common::tiny_config(), &c, &ds).unwrap();
    let before = b.clone();
    let r = train_phase1(&mut b, &ds, &split, &c, &Outputs::default()).unwrap();
    assert!(r.records.is_empty());
    assert_eq!(b.phase, 1);
    assert_eq!(b.step, 0);
    let mut same = true;
    b.components(&mut |name, m| {
        let mut other = None;
        before.components(&mut |n2, m2| {
            if n2 == name {
                other = Some(param_hash::<f32>(&[m2]));
            }
        });
        same &= other == Some(param_hash::<f32>(&[m]));
    });
    assert!(same);
}

#[test]
fn phase_two_freezes_generator_and_lowers_enhancer_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    let c = TrainConfig {
        debug_alternation: true,
        ..cfg(3, 60)
    };
    let mut b = init_bundle(&common::tiny_config(), &c, &ds).unwrap();
    assert!(matches!(
        train_phase2(&mut b, &ds, &split, &c, &Outputs::default()),
        Err(Error::State(_))
    ));
    train_phase1(&mut b, &ds, &split, &c, &Outputs::default()).unwrap();
    assert_eq!(b.phase, 2);
    assert!(matches!(
        train_phase1(&mut b, &ds, &split, &c, &Outputs::default()),
        Err(Error::State(_))
    ));
    let g = param_hash::<f32>(&[&b.g]);
    let r = train_phase2(&mut b, &ds, &split, &c, &Outputs::default()).unwrap();
    assert_eq!(g, param_hash::<f32>(&[&b.g]));
    let l: Vec<f64> = r.records.iter().filter_map(|r| r.l_enet).collect();
    let (head, tail) = p2i_core::trainer::head_tail_means(&l, 0.2).unwrap();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn no_enet_skips_phase_two() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    let c = TrainConfig {
        ablation: Ablation {
            no_enet: true,
            ..Ablation::default()
        },
        ..cfg(2, 5)
    };
    let mut b = init_bundle(&common::tiny_config(), &c, &ds).unwrap();
    assert!(b.enet.is_none());
    train_phase1(&mut b, &ds, &split, &c, &Outputs::default()).unwrap();
    let r = train_phase2(&mut b, &ds, &split, &c, &Outputs::default()).unwrap();
    assert!(r.records.is_empty());
    let y = encode_pose(&ds.sequences[0].frames[0].pose, &b.scene.bounds).unwrap();
    let y = Tensor::<f32>::from_f64(&[1, 7], &y);
    let (rgb, raw) = b.synthesize(&y, true).unwrap();
    assert_eq!(rgb, raw.leading_channels(3));
}

#[test]
fn ablation_breakdown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = setup(dir.path());
    let frames: Vec<_> = ds.sequences[0].frames[..2].iter().collect();
    let w = LossWeights::default();
    let run = |ab: Ablation| {
        let mut b: ModelBundle<f64> =
            ModelBundle::new(ab.apply(&common::tiny_config()), p2i_core::trainer::scene_meta(&ds), 1).unwrap();
        let ch = b.config.in_channels;
        let y: Vec<f64> = frames.iter().flat_map(|f| encode_pose(&f.pose, &b.scene.bounds).unwrap()).collect();
        let y = Tensor::<f64>::from_f64(&[2, 7], &y);
        let real: Vec<f64> = frames
            .iter()
            .flat_map(|f| {
                let t = p2i_core::dataset::normalize_frame(f, ds.depth_max);
                t.data()[..ch * 64].iter().map(|v| *v as f64).collect::<Vec<_>>()
            })
            .collect();
        let real = Tensor::<f64>::from_f64(&[2, ch, 8, 8], &real);
        let fake = b.g.forward(&y);
        discriminator_pass(&mut b, &y, &real, &fake, &w, DTermWeights::total(&w), None).unwrap()
    };
    let full = run(Ablation::default());
    assert!(full.l_pe_real.is_some() && full.l_pe_fake.is_some() && full.gamma.is_some());
    assert!(full.proj_term != 0.0);
    let no_hd = run(Ablation {
        no_hd_match: true,
        ..Ablation::default()
    });
    assert_eq!(no_hd.proj_term, 0.0);
    let no_ld = run(Ablation {
        no_ld_match: true,
        ..Ablation::default()
    });
    assert!(no_ld.l_pe_real.is_none() && no_ld.l_pe_fake.is_none() && no_ld.gamma.is_none());
    assert_eq!(no_ld.total, -no_ld.l_pro);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, split) = setup(dir.path());
    let c = cfg(2, 2);
    let mut b = init_bundle(&common::tiny_config(), &c, &ds).unwrap();
    train_phase1(&mut b, &ds, &split, &c, &Outputs::default()).unwrap();
    let ck = dir.path().join("ck");
    let m = save_checkpoint(&b, &ck).unwrap();
    let (loaded, m2) = load_checkpoint::<f32>(&ck, Some(&b.config)).unwrap();
    assert_eq!(m, m2);
    let y = Tensor::<f32>::from_f64(&[2, 7], &[0.1, -0.2, 0.3, 0.9, 0.1, -0.3, 0.2, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(b.synthesize(&y, true).unwrap(), loaded.synthesize(&y, true).unwrap());
    assert_eq!((loaded.phase, loaded.step), (b.phase, b.step));

    let mut other = b.config.clone();
    other.latent_dim = 8;
    assert!(matches!(load_checkpoint::<f32>(&ck, Some(&other)), Err(Error::Config(_))));

    let blob = ck.join(&m.blobs["g"].file);
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&ck, None), Err(Error::Checksum(_))));

    std::fs::remove_file(ck.join(MANIFEST)).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&ck, None), Err(Error::Format(_))));
}
