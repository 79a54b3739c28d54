mod common;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecse_core::backbones::{Backbone, MlpBackbone, MlpShape, Pet, PetShape, Trainable};
use ecse_core::smoothmath::CutoffParams;
use ecse_core::structures::Structure;
use ecse_core::training::{
    bag_of_atoms, loss, make_toy_dataset, random_rotation, train_toy, LossState, SelfContributions,
    SyntheticPotential, ToyKind, TrainOptions,
};
use ecse_core::Error;

fn cut() -> CutoffParams {
    CutoffParams::new(3.5, 0.5).unwrap()
}

fn mlp(seed: u64) -> MlpBackbone {
    MlpBackbone::new(MlpShape::new(vec![1, 6, 8], cut()), seed)
}

fn quick(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn haar_rotations_have_zero_mean_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1_000_000;
    let sum: f64 = (0..n)
        .map(|_| random_rotation(&mut rng).matrix().trace())
        .sum();
    let mean = sum / n as f64;
    assert!(mean.abs() < 0.01, "mean trace {mean}");
}

#[test]
fn synthetic_forces_match_richardson_differences() {
    let pot = SyntheticPotential::toy();
    let data = make_toy_dataset(ToyKind::Ch4Like, 5, 21).unwrap();
    for s in data {
        let f = s.forces.clone().unwrap();
        for i in 0..s.len() {
            for c in 0..3 {
                let central = |h: f64| {
                    let mut p = s.clone();
                    p.positions[i][c] += h;
                    let mut m = s.clone();
                    m.positions[i][c] -= h;
                    -(pot.energy(&p).unwrap() - pot.energy(&m).unwrap()) / (2.0 * h)
                };
                let h = 2e-4;
                let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
                assert!(
                    (fd - f[i][c]).abs() < 1e-10,
                    "atom {i} axis {c}: {fd} vs {}",
                    f[i][c]
                );
            }
        }
    }
}

#[test]
fn dimer_sweep_crosses_the_cutoff_seam_smoothly() {
    let d = make_toy_dataset(ToyKind::DimerSweep, 200, 1).unwrap();
    let pot = SyntheticPotential::toy();
    let rc = pot.cutoff.r_c();
    let r: Vec<f64> = d
        .iter()
        .map(|s| (s.positions[1] - s.positions[0]).norm())
        .collect();
    assert!(r.iter().any(|&x| x < rc - pot.cutoff.delta()) && r.iter().any(|&x| x > rc));
    for (s, &x) in d.iter().zip(&r) {
        if x >= rc {
            assert_eq!(s.energy, Some(0.0));
        }
    }
}

#[test]
fn self_contributions_on_exactly_linear_data() {
    let data = common::linear_dataset(40, 2);
    let sc = SelfContributions::fit(&data).unwrap();
    assert_eq!(sc.species, vec![1, 6, 8]);
    let residual = sc.remove(&data).unwrap();
    for (r, s) in residual.iter().zip(&data) {
        assert!(r.energy.unwrap().abs() <= 1e-8);
        let back = sc.add_back(s, r.energy.unwrap()).unwrap();
        assert!((back - s.energy.unwrap()).abs() <= 1e-12 * s.energy.unwrap().abs().max(1.0));
    }
}

#[test]
fn self_contribution_residuals_are_orthogonal_to_counts() {
    let data = make_toy_dataset(ToyKind::Ch4Like, 30, 5)
        .unwrap()
        .into_iter()
        .chain(common::linear_dataset(30, 6).into_iter().map(|mut s| {
            s.energy = Some(s.energy.unwrap() + s.positions[0].x);
            s
        }))
        .collect::<Vec<_>>();
    let sc = SelfContributions::fit(&data).unwrap();
    let res = sc.remove(&data).unwrap();
    let mut dots = vec![0.0; sc.species.len() + 1];
    for s in &res {
        let e = s.energy.unwrap();
        dots[0] += e;
        for (k, c) in bag_of_atoms(s, &sc.species).iter().enumerate() {
            dots[k + 1] += e * c;
        }
    }
    assert!(dots.iter().all(|d| d.abs() < 1e-8), "{dots:?}");
}

#[test]
fn self_contributions_need_energies() {
    let mut s = common::linear_dataset(3, 1);
    s.iter_mut().for_each(|x| x.energy = None);
    assert!(matches!(
        SelfContributions::fit(&s),
        Err(Error::MissingTargets(_))
    ));
    let sc = SelfContributions::fit(&common::linear_dataset(10, 1)).unwrap();
    let odd = Structure::new(vec![Vector3::zeros()], vec![26]).unwrap();
    assert!(matches!(sc.predict(&odd), Err(Error::UnknownSpecies(_))));
}

#[test]
fn loss_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let st = LossState::new(0.7, 1.3, 0.1, 0.9).unwrap();
    for _ in 0..50 {
        let n = rng.random_range(1..8);
        let pf: Vec<Vector3<f64>> = (0..n).map(|_| common::in_ball(&mut rng, 3.0)).collect();
        let tf: Vec<Vector3<f64>> = (0..n).map(|_| common::in_ball(&mut rng, 3.0)).collect();
        let r = random_rotation(&mut rng);
        let rot = |v: &[Vector3<f64>]| v.iter().map(|x| r.matrix() * x).collect::<Vec<_>>();
        let a = loss(1.5, -0.5, &pf, &tf, n, &st, false).unwrap();
        let b = loss(1.5, -0.5, &rot(&pf), &rot(&tf), n, &st, false).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = make_toy_dataset(ToyKind::Ch4Like, 30, 1).unwrap();
    let mut m = mlp(4);
    let before = m.params().to_vec();
    let opts = TrainOptions {
        lr: 0.0,
        ..quick(3)
    };
    let out = train_toy(&mut m, &data[..20], &data[20..], &opts).unwrap();
    assert_eq!(m.params(), &before[..]);
    assert_eq!(out.history.records.len(), 4);
    assert!(out
        .history
        .records
        .windows(2)
        .all(|w| w[0].val_e_rmse == w[1].val_e_rmse));
}

#[test]
fn same_seed_gives_identical_histories() {
    let data = make_toy_dataset(ToyKind::Ch4Like, 40, 2).unwrap();
    let run = |seed| {
        let mut m = mlp(1);
        let out = train_toy(
            &mut m,
            &data[..30],
            &data[30..],
            &TrainOptions { seed, ..quick(4) },
        )
        .unwrap();
        (out.history.to_csv(), m.params().to_vec())
    };
    let a = run(9);
    assert_eq!(a, run(9));
    assert_ne!(a.0, run(10).0);
}

#[test]
fn history_csv_layout() {
    let data = make_toy_dataset(ToyKind::Ch4Like, 20, 3).unwrap();
    let mut m = mlp(2);
    let opts = TrainOptions {
        val_forces: true,
        ..quick(2)
    };
    let out = train_toy(&mut m, &data[..15], &data[15..], &opts).unwrap();
    let csv = out.history.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,lr,train_loss,val_E_rmse,val_F_rmse")
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r.len() == 5 && r.iter().all(|x| x.is_finite())));
    assert_eq!(rows[0][0], 0.0);
}

#[test]
fn removal_path_matches_manual_baseline_subtraction() {
    let data: Vec<Structure> = common::linear_dataset(30, 7)
        .into_iter()
        .enumerate()
        .map(|(k, mut s)| {
            s.energy = Some(s.energy.unwrap() + 0.1 * (k as f64).sin());
            s
        })
        .collect();
    let (train, val) = data.split_at(24);
    let sc = SelfContributions::fit(train).unwrap();

    let mut a = mlp(6);
    let out = train_toy(&mut a, train, val, &quick(3)).unwrap();
    assert_eq!(out.self_contributions.as_ref(), Some(&sc));

    let mut b = mlp(6);
    let opts = TrainOptions {
        remove_self_contributions: false,
        ..quick(3)
    };
    train_toy(
        &mut b,
        &sc.remove(train).unwrap(),
        &sc.remove(val).unwrap(),
        &opts,
    )
    .unwrap();
    for s in &data {
        let ta = sc
            .add_back(s, a.eval_structure(s).unwrap().value())
            .unwrap();
        let tb = b.eval_structure(s).unwrap().value() + sc.predict(s).unwrap();
        assert!((ta - tb).abs() <= 1e-8, "{ta} vs {tb}");
    }
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = make_toy_dataset(ToyKind::Ch4Like, 20, 4).unwrap();
    let mut m = mlp(3);
    let opts = TrainOptions {
        lr: 1e200,
        ..quick(5)
    };
    assert!(matches!(
        train_toy(&mut m, &data[..15], &data[15..], &opts),
        Err(Error::Diverged { .. })
    ));
}

#[test]
fn missing_targets_are_rejected() {
    let mut data = make_toy_dataset(ToyKind::Ch4Like, 10, 4).unwrap();
    data[2].forces = None;
    let mut m = mlp(3);
    let opts = TrainOptions {
        fit_forces: true,
        ..quick(1)
    };
    assert!(matches!(
        train_toy(&mut m, &data[..8], &data[8..], &opts),
        Err(Error::MissingTargets("forces"))
    ));
}

#[test]
fn force_training_runs_and_improves() {
    let data = make_toy_dataset(ToyKind::Ch4Like, 40, 6).unwrap();
    let mut m = mlp(5);
    let opts = TrainOptions {
        fit_forces: true,
        fd_step: 1e-3,
        ..quick(6)
    };
    let out = train_toy(&mut m, &data[..30], &data[30..], &opts).unwrap();
    let r = &out.history.records;
    assert!(r.iter().all(|x| x.val_f_rmse.is_finite()));
    assert!(r.last().unwrap().train_loss < 0.8 * r[0].train_loss);
}

#[test]
fn augmented_training_reduces_rotation_discrepancy() {
    let data = make_toy_dataset(ToyKind::Ch4Like, 120, 13).unwrap();
    let mut pet = Pet::new(PetShape::micro(vec![1, 6], cut()), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probes: Vec<(Structure, Structure)> = data[100..]
        .iter()
        .flat_map(|s| {
            (0..5)
                .map(|_| (s.clone(), s.rotated(&random_rotation(&mut rng))))
                .collect::<Vec<_>>()
        })
        .collect();
    let discrepancy = |m: &Pet| {
        probes
            .iter()
            .map(|(a, b)| {
                (m.eval_structure(a).unwrap().value() - m.eval_structure(b).unwrap().value()).abs()
            })
            .sum::<f64>()
    };
    let before = discrepancy(&pet);
    train_toy(&mut pet, &data[..100], &data[100..], &quick(8)).unwrap();
    let after = discrepancy(&pet);
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn options_round_trip_and_reject_bad_values() {
    let o = TrainOptions {
        epochs: 7,
        lr: 2.5e-4,
        fit_forces: true,
        ..Default::default()
    };
    assert_eq!(TrainOptions::from_kv(&o.to_kv()).unwrap(), o);
    let bad = ecse_core::kv::KvMap::parse("ema_decay = 1.0").unwrap();
    assert!(TrainOptions::from_kv(&bad).is_err());
    let bad = ecse_core::kv::KvMap::parse("learning_rate = 1").unwrap();
    assert!(TrainOptions::from_kv(&bad).is_err());
}

#[test]
fn collinear_family_kind_parses() {
    assert_eq!(
        "collinear_family".parse::<ToyKind>().unwrap(),
        ToyKind::CollinearFamily
    );
    assert!("ch5".parse::<ToyKind>().is_err());
    assert!(make_toy_dataset(ToyKind::Ch4Like, 0, 1).is_err());
}
