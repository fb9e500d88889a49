//! Scripted-expert demonstrations and the dataset file.

use kcgg_core::demos::{classify_style, generate_dataset, scripted_expert, DemoSet, ExpertParams, Style};
use kcgg_core::kinematics::{ArmSpec, ArmState};
use kcgg_core::sim::{execute_plan, standard_episodes, EpisodeOptions, TableSpec};

fn dataset(n: usize, seed: u64) -> DemoSet {
    generate_dataset(&TableSpec::default(), &ArmSpec::default(), &ExpertParams::default(), &EpisodeOptions::default(), n, seed)
        .unwrap()
        .0
}

#[test]
fn every_demo_replays_to_a_block_within_limits() {
    let set = dataset(25, 4);
    let options = EpisodeOptions::default();
    for demo in &set.demos {
        let t = &demo.trajectory;
        assert_eq!(t.rows(), options.horizon + 1);
        for row in 0..t.rows() {
            let state = ArmState { q: t.positions(row).to_vec(), qdot: t.velocities(row).to_vec() };
            assert!(set.arm.within_limits(&state, 1e-9));
            for (v, lim) in t.velocities(row).iter().zip(&set.arm.velocity_limits) {
                assert!(v.abs() <= lim + 1e-9);
            }
        }
        assert!(execute_plan(&set.table, &set.arm, t, demo.puck, &options).unwrap().blocked);
    }
}

#[test]
fn styles_separate_by_elbow_sign() {
    let set = dataset(25, 5);
    for demo in &set.demos {
        assert_eq!(classify_style(&demo.trajectory), demo.style);
    }
    // on a shared launch the two styles take opposite elbows
    let (table, arm, options) = (TableSpec::default(), ArmSpec::default(), EpisodeOptions::default());
    let params = ExpertParams::default();
    let mut shared = 0;
    for puck in standard_episodes(&table, 40, 2) {
        let low = scripted_expert(&table, &arm, &params, puck, Style::SweepLow, &options, 1);
        let high = scripted_expert(&table, &arm, &params, puck, Style::SweepHigh, &options, 1);
        if let (Ok(l), Ok(h)) = (low, high) {
            let mid = l.rows() / 2;
            assert!(l.positions(mid)[1] < 0.0 && h.positions(mid)[1] > 0.0);
            shared += 1;
        }
    }
    assert!(shared >= 10, "only {shared} launches accepted both styles");
}

#[test]
fn default_size_and_exact_balance() {
    let set = dataset(50, 0);
    assert_eq!(set.demos.len(), 100);
    assert_eq!(set.counts(), vec![50, 50]);
    assert_eq!(dataset(3, 9).counts(), vec![3, 3]);
}

#[test]
fn generation_is_deterministic_and_round_trips() {
    let a = dataset(5, 11);
    assert_eq!(a, dataset(5, 11));
    assert_ne!(a, dataset(5, 12));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.kcgg");
    a.save(&path).unwrap();
    let b = DemoSet::load(&path).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.demos.iter().zip(&b.demos) {
        assert!(x.trajectory.data().iter().zip(y.trajectory.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    // corrupt or truncated files are format errors
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(DemoSet::load(&path).is_err());
    std::fs::write(&path, b"garbage!garbage!").unwrap();
    assert!(DemoSet::load(&path).is_err());
}

#[test]
fn hopeless_launch_distribution_aborts() {
    let arm = ArmSpec { link_lengths: vec![0.1, 0.1, 0.1], ..ArmSpec::default() };
    let r = generate_dataset(&TableSpec::default(), &arm, &ExpertParams::default(), &EpisodeOptions::default(), 5, 0);
    let err = r.unwrap_err();
    assert!(err.to_string().contains("rejected"), "{err}");
    assert!(generate_dataset(&TableSpec::default(), &ArmSpec::default(), &ExpertParams::default(), &EpisodeOptions::default(), 0, 0).is_err());
}
