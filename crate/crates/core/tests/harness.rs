mod common;

use std::sync::Arc;

use nalgebra::Vector3;

use common::Synthetic;
use ecse_core::backbones::{
    Backbone, ConstantBackbone, Locality, OutputKind, Pet, PetShape, Prediction,
};
use ecse_core::ecse::{EcseConfig, PoolMode, Symmetrized};
use ecse_core::harness::{
    fd_forces, net_force, richardson_ratio, sweep_csv, sweep_tradeoff, verify_equivariance,
    verify_smoothness, SweepOptions, RICHARDSON_STEP,
};
use ecse_core::smoothmath::CutoffParams;
use ecse_core::structures::{AtomicEnvironment, Structure};
use ecse_core::training::{make_toy_dataset, SyntheticPotential, ToyKind};
use ecse_core::{Error, Result};

/// Sum of all coordinates: a linear response to any displacement.
struct Linear;

impl Backbone for Linear {
    fn output_kind(&self) -> OutputKind {
        OutputKind::SCALAR
    }

    fn locality(&self) -> Locality {
        Locality::Global
    }

    fn cutoff(&self) -> f64 {
        3.5
    }

    fn eval_env(&self, _env: &AtomicEnvironment) -> Result<Prediction> {
        Err(Error::ShapeMismatch("structure-level model".into()))
    }

    fn eval_structure(&self, s: &Structure) -> Result<Prediction> {
        Ok(Prediction::scalar(
            s.positions.iter().map(|p| p.sum()).sum(),
        ))
    }
}

fn pet() -> Arc<dyn Backbone> {
    Arc::new(
        Pet::new(
            PetShape::micro(vec![1, 6], CutoffParams::new(3.5, 0.5).unwrap()),
            3,
        )
        .unwrap(),
    )
}

fn aux() -> Arc<dyn Backbone> {
    Arc::new(
        Pet::new(
            PetShape::two_body(vec![1, 6], CutoffParams::new(3.5, 0.5).unwrap()),
            5,
        )
        .unwrap(),
    )
}

fn global(cfg: EcseConfig) -> EcseConfig {
    EcseConfig {
        mode: PoolMode::GlobalPool,
        ..cfg
    }
}

fn molecules(n: usize) -> Vec<Structure> {
    make_toy_dataset(ToyKind::Ch4Like, n, 11).unwrap()
}

#[test]
fn linear_model_has_unit_slope() {
    let r = verify_smoothness(&Linear, &molecules(3), &[1e-6, 1e-5, 1e-4, 1e-3], 8, 0).unwrap();
    assert!((r.slope - 1.0).abs() <= 0.05, "slope {}", r.slope);
    assert!(r.spikes.is_empty() && r.trend_violations.is_empty());
    assert!(r.passes(0.95, 1.05));
}

#[test]
fn zero_amplitude_gives_zero_deltas() {
    let r = verify_smoothness(&Linear, &molecules(2), &[0.0, 1e-4], 3, 1).unwrap();
    assert!(r
        .rows
        .iter()
        .filter(|x| x.sigma == 0.0)
        .all(|x| x.delta == 0.0));
    assert_eq!(r.rows.len(), 2 * 2 * 3);
}

#[test]
fn smoothness_is_reproducible_and_validates_input() {
    let s = molecules(2);
    let a = verify_smoothness(&Linear, &s, &[1e-5, 1e-4], 4, 9).unwrap();
    let b = verify_smoothness(&Linear, &s, &[1e-5, 1e-4], 4, 9).unwrap();
    assert_eq!(a, b);
    assert!(verify_smoothness(&Linear, &s, &[1e-4, 1e-5], 4, 9).is_err());
    assert!(verify_smoothness(&Linear, &s, &[-1.0], 4, 9).is_err());
    assert!(matches!(
        verify_smoothness(&Linear, &[], &[1e-4], 4, 9),
        Err(Error::EmptyInput(_))
    ));
    assert!(a
        .to_csv()
        .starts_with("structure_id,sigma,perturbation_id,abs_delta\n"));
}

#[test]
fn symmetrized_constant_is_exactly_equivariant() {
    let c: Arc<dyn Backbone> = Arc::new(ConstantBackbone::scalar(2.5, 3.5));
    let m = Symmetrized::new(c, Some(aux()), EcseConfig::loose()).unwrap();
    let r = verify_equivariance(&m, &molecules(3), 4, 0, Some(1e-12)).unwrap();
    assert!(r.max_relative <= 1e-14, "{}", r.max_relative);
    assert_eq!(r.passed, Some(true));
    assert_eq!(r.cases.len(), 12);
}

#[test]
fn raw_backbone_is_a_reference_run() {
    let r = verify_equivariance(pet().as_ref(), &molecules(3), 4, 0, None).unwrap();
    assert!(r.max_relative > 1e-6, "{}", r.max_relative);
    assert_eq!(r.passed, None);
    assert!(r.fraction_above(1e-6) > 0.0);
    assert_eq!(r.to_csv().lines().count(), 13);
}

#[test]
fn symmetrized_pet_is_equivariant() {
    let m = Symmetrized::new(pet(), Some(aux()), global(EcseConfig::tight())).unwrap();
    let r = verify_equivariance(&m, &molecules(3), 3, 2, Some(1e-10)).unwrap();
    assert_eq!(r.passed, Some(true), "{}", r.max_relative);
}

#[test]
fn fd_forces_match_analytic_morse() {
    let pot = SyntheticPotential::toy();
    for s in molecules(4) {
        let (_, f) = pot.energy_and_forces(&s).unwrap();
        let fd = fd_forces(&Synthetic(pot.clone()), &s, 1e-5).unwrap();
        for (a, b) in f.iter().zip(&fd) {
            assert!((a - b).norm() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn isolated_atom_feels_no_force() {
    let s = Structure::new(vec![Vector3::new(0.3, -0.2, 1.0)], vec![6]).unwrap();
    let m = Symmetrized::new(pet(), Some(aux()), global(EcseConfig::loose())).unwrap();
    let f = fd_forces(&m, &s, 1e-4).unwrap();
    assert_eq!(f.len(), 1);
    assert!(f[0].norm() <= 1e-8, "{}", f[0]);
}

#[test]
fn symmetrized_forces_sum_to_zero() {
    let m = Symmetrized::new(pet(), Some(aux()), global(EcseConfig::loose())).unwrap();
    for s in molecules(2) {
        let f = fd_forces(&m, &s, 1e-5).unwrap();
        assert!(net_force(&f).norm() <= 1e-6, "{}", net_force(&f));
    }
}

#[test]
fn richardson_ratio_is_near_four() {
    let pot = SyntheticPotential::toy();
    let s = &molecules(1)[0];
    let q = richardson_ratio(&Synthetic(pot), s, RICHARDSON_STEP).unwrap();
    assert!((3.5..=4.5).contains(&q), "{q}");
}

#[test]
fn symmetrized_fd_forces_converge_quadratically() {
    let m = Symmetrized::new(pet(), Some(aux()), global(EcseConfig::loose())).unwrap();
    for s in molecules(2) {
        let q = richardson_ratio(&m, &s, RICHARDSON_STEP).unwrap();
        assert!((3.5..=4.5).contains(&q), "{q}");
    }
}

#[test]
fn fd_forces_reject_bad_input() {
    let s = &molecules(1)[0];
    assert!(fd_forces(&Linear, s, 0.0).is_err());
    let mut shape = PetShape::micro(vec![1, 6], CutoffParams::new(3.5, 0.5).unwrap());
    shape.out = OutputKind::tensor(1);
    let vector = Pet::new(shape, 0).unwrap();
    assert!(matches!(
        fd_forces(&vector, s, 1e-4),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn tight_preset_uses_fewer_frames() {
    let presets = vec![
        ("loose".to_string(), global(EcseConfig::loose())),
        ("tight".to_string(), global(EcseConfig::tight())),
    ];
    let opts = SweepOptions {
        amplitudes: vec![1e-5, 1e-4, 1e-3],
        n_perturbations: 2,
        n_rotations: 2,
        ..SweepOptions::default()
    };
    let rows = sweep_tradeoff(pet(), Some(aux()), &molecules(2), &presets, &opts).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].mean_frames <= rows[0].mean_frames);
    assert!(rows.iter().all(|r| r.equivariant));
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("loose,"));
    assert!(sweep_tradeoff(pet(), Some(aux()), &molecules(1), &presets[..1], &opts).is_err());
}
