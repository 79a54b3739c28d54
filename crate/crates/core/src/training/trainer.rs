use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{loss, random_rotation, update_normalizers, LossState, SelfContributions};
use crate::autodiff::with_tape;
use crate::backbones::{OutputKind, Trainable};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::structures::Structure;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Epochs without a new best validation loss before stopping; 0 disables.
    pub patience: usize,
    pub w_e: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Adds the force term, with model forces and their parameter gradients
    /// taken by central differences.
    pub fit_forces: bool,
    /// Computes the validation force RMSE every epoch.
    pub val_forces: bool,
    pub per_atom_energy: bool,
    pub fd_step: f64,
    pub remove_self_contributions: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            batch_size: 10,
            lr: 1e-3,
            lr_step: 50,
            lr_gamma: 0.5,
            patience: 20,
            w_e: 0.1,
            ema_decay: 0.9,
            seed: 0,
            fit_forces: false,
            val_forces: false,
            per_atom_energy: false,
            fd_step: 1e-4,
            remove_self_contributions: true,
        }
    }
}

const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "lr_step",
    "lr_gamma",
    "patience",
    "w_e",
    "ema_decay",
    "seed",
    "fit_forces",
    "val_forces",
    "per_atom_energy",
    "fd_step",
    "remove_self_contributions",
];

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_step == 0 {
            return Err(Error::Config(
                "epochs, batch_size and lr_step must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config(format!(
                "lr_gamma must lie in (0, 1], got {}",
                self.lr_gamma
            )));
        }
        if !(self.w_e >= 0.0) {
            return Err(Error::Config(format!(
                "w_e must be non-negative, got {}",
                self.w_e
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config(format!(
                "fd_step must be positive, got {}",
                self.fd_step
            )));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let d = Self::default();
        let o = TrainOptions {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            lr_step: kv.get_or("lr_step", d.lr_step)?,
            lr_gamma: kv.get_or("lr_gamma", d.lr_gamma)?,
            patience: kv.get_or("patience", d.patience)?,
            w_e: kv.get_or("w_e", d.w_e)?,
            ema_decay: kv.get_or("ema_decay", d.ema_decay)?,
            seed: kv.get_or("seed", d.seed)?,
            fit_forces: kv.get_or("fit_forces", d.fit_forces)?,
            val_forces: kv.get_or("val_forces", d.val_forces)?,
            per_atom_energy: kv.get_or("per_atom_energy", d.per_atom_energy)?,
            fd_step: kv.get_or("fd_step", d.fd_step)?,
            remove_self_contributions: kv
                .get_or("remove_self_contributions", d.remove_self_contributions)?,
        };
        o.validate()?;
        Ok(o)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("lr_step", self.lr_step);
        kv.set("lr_gamma", self.lr_gamma);
        kv.set("patience", self.patience);
        kv.set("w_e", self.w_e);
        kv.set("ema_decay", self.ema_decay);
        kv.set("seed", self.seed);
        kv.set("fit_forces", self.fit_forces);
        kv.set("val_forces", self.val_forces);
        kv.set("per_atom_energy", self.per_atom_energy);
        kv.set("fd_step", self.fd_step);
        kv.set("remove_self_contributions", self.remove_self_contributions);
        kv
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::parse(&std::fs::read_to_string(path)?)?)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi(((epoch - 1) / self.lr_step) as i32)
    }
}

/// One row of the training history. Epoch 0 is the initial model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_e_rmse: f64,
    /// NaN unless validation forces are computed.
    pub val_f_rmse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_E_rmse,val_F_rmse\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                r.epoch, r.lr, r.train_loss, r.val_e_rmse, r.val_f_rmse
            );
        }
        out
    }

    pub fn initial(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .min_by(|a, b| a.val_e_rmse.total_cmp(&b.val_e_rmse))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    /// Baseline subtracted from the targets; the model predicts the rest.
    pub self_contributions: Option<SelfContributions>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn check_scalar(model: &dyn Trainable) -> Result<()> {
    if model.output_kind() != OutputKind::SCALAR {
        return Err(Error::ShapeMismatch(
            "training needs a scalar energy model".into(),
        ));
    }
    Ok(())
}

/// Energy of `s` and its gradient with respect to the parameters.
fn energy_and_grad(model: &dyn Trainable, s: &Structure) -> Result<(f64, Vec<f64>)> {
    with_tape(model.params(), |t| {
        let out = model.record(t, s)?;
        let e = t.sum_rows(out);
        let mut g = vec![0.0; model.params().len()];
        t.backward(&[(e, &[1.0])], &mut g);
        Ok((t.scalar(e), g))
    })
}

fn energy(model: &dyn Trainable, s: &Structure) -> Result<f64> {
    Ok(model.eval_structure(s)?.value())
}

fn displaced(s: &Structure, i: usize, c: usize, h: f64) -> Structure {
    let mut d = s.clone();
    d.positions[i][c] += h;
    d
}

/// Central-difference forces of the model energy.
fn model_forces(model: &dyn Trainable, s: &Structure, h: f64) -> Result<Vec<Vector3<f64>>> {
    let mut f = vec![Vector3::zeros(); s.len()];
    for i in 0..s.len() {
        for c in 0..3 {
            let ep = energy(model, &displaced(s, i, c, h))?;
            let em = energy(model, &displaced(s, i, c, -h))?;
            f[i][c] = -(ep - em) / (2.0 * h);
        }
    }
    Ok(f)
}

/// Loss of one sample and its parameter gradient.
fn sample_loss_grad(
    model: &dyn Trainable,
    s: &Structure,
    state: &LossState,
    opts: &TrainOptions,
) -> Result<(f64, Vec<f64>)> {
    let n = s.len() as f64;
    let target = s.energy.ok_or(Error::MissingTargets("energy"))?;
    let (e, ge) = energy_and_grad(model, s)?;
    let scale = if opts.per_atom_energy { 1.0 / n } else { 1.0 };
    let de = (e - target) * scale;
    let mut grad: Vec<f64> = ge
        .iter()
        .map(|g| 2.0 * state.w_e * de * scale / state.mse_e * g)
        .collect();
    if !opts.fit_forces {
        let l = loss(e, target, &[], &[], s.len(), state, opts.per_atom_energy)?;
        return Ok((l, grad));
    }
    let targets = s.forces.as_ref().ok_or(Error::MissingTargets("forces"))?;
    let h = opts.fd_step;
    let mut pred = vec![Vector3::zeros(); s.len()];
    let coef = 2.0 / (3.0 * n * state.mse_f);
    for i in 0..s.len() {
        for c in 0..3 {
            let (ep, gp) = energy_and_grad(model, &displaced(s, i, c, h))?;
            let (em, gm) = energy_and_grad(model, &displaced(s, i, c, -h))?;
            let f = -(ep - em) / (2.0 * h);
            pred[i][c] = f;
            let r = coef * (f - targets[i][c]);
            for (g, (a, b)) in grad.iter_mut().zip(gp.iter().zip(&gm)) {
                *g -= r * (a - b) / (2.0 * h);
            }
        }
    }
    let l = loss(
        e,
        target,
        &pred,
        targets,
        s.len(),
        state,
        opts.per_atom_energy,
    )?;
    Ok((l, grad))
}

/// Root mean square energy error of `model` on `data`.
pub fn energy_rmse(model: &dyn Trainable, data: &[Structure]) -> Result<f64> {
    let sq: Vec<f64> = data
        .par_iter()
        .map(|s| {
            let t = s.energy.ok_or(Error::MissingTargets("energy"))?;
            Ok((energy(model, s)? - t).powi(2))
        })
        .collect::<Result<_>>()?;
    Ok((sq.iter().sum::<f64>() / data.len() as f64).sqrt())
}

struct Metrics {
    mse_e: f64,
    mse_f: f64,
}

fn validation_metrics(
    model: &dyn Trainable,
    val: &[Structure],
    opts: &TrainOptions,
) -> Result<Metrics> {
    let rows: Vec<(f64, f64, usize)> = val
        .par_iter()
        .map(|s| {
            let t = s.energy.ok_or(Error::MissingTargets("energy"))?;
            let mut de = energy(model, s)? - t;
            if opts.per_atom_energy {
                de /= s.len() as f64;
            }
            let (fsq, fn_) = if opts.val_forces || opts.fit_forces {
                let targets = s.forces.as_ref().ok_or(Error::MissingTargets("forces"))?;
                let f = model_forces(model, s, opts.fd_step)?;
                (
                    f.iter()
                        .zip(targets)
                        .map(|(a, b)| (a - b).norm_squared())
                        .sum(),
                    3 * s.len(),
                )
            } else {
                (0.0, 0)
            };
            Ok((de * de, fsq, fn_))
        })
        .collect::<Result<_>>()?;
    let mse_e = rows.iter().map(|r| r.0).sum::<f64>() / val.len() as f64;
    let n_f: usize = rows.iter().map(|r| r.2).sum();
    let mse_f = if n_f == 0 {
        f64::NAN
    } else {
        rows.iter().map(|r| r.1).sum::<f64>() / n_f as f64
    };
    Ok(Metrics { mse_e, mse_f })
}

fn mean_train_loss(
    model: &dyn Trainable,
    train: &[Structure],
    state: &LossState,
    opts: &TrainOptions,
) -> Result<f64> {
    let ls: Vec<f64> = train
        .par_iter()
        .map(|s| {
            let t = s.energy.ok_or(Error::MissingTargets("energy"))?;
            let e = energy(model, s)?;
            if opts.fit_forces {
                let targets = s.forces.as_ref().ok_or(Error::MissingTargets("forces"))?;
                let f = model_forces(model, s, opts.fd_step)?;
                loss(e, t, &f, targets, s.len(), state, opts.per_atom_energy)
            } else {
                loss(e, t, &[], &[], s.len(), state, opts.per_atom_energy)
            }
        })
        .collect::<Result<_>>()?;
    Ok(ls.iter().sum::<f64>() / train.len() as f64)
}

/// Mean of the squared targets, floored so the normalizers stay positive.
fn initial_normalizers(train: &[Structure], opts: &TrainOptions) -> LossState {
    let mut se = 0.0;
    let mut sf = 0.0;
    let mut nf = 0usize;
    for s in train {
        let mut e = s.energy.unwrap_or(0.0);
        if opts.per_atom_energy {
            e /= s.len() as f64;
        }
        se += e * e;
        if let Some(f) = &s.forces {
            sf += f.iter().map(|v| v.norm_squared()).sum::<f64>();
            nf += 3 * f.len();
        }
    }
    let mse_e = (se / train.len() as f64).max(1e-12);
    let mse_f = if nf == 0 {
        1.0
    } else {
        (sf / nf as f64).max(1e-12)
    };
    LossState {
        mse_e,
        mse_f,
        w_e: opts.w_e,
        ema_decay: opts.ema_decay,
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fits `model` to the energies (and optionally forces) of `train` with Adam,
/// rotating every sample by a fresh random rotation each epoch. The parameters
/// of the epoch with the best validation loss are restored at the end.
pub fn train_toy(
    model: &mut dyn Trainable,
    train: &[Structure],
    val: &[Structure],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    opts.validate()?;
    check_scalar(model)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("train_toy"));
    }
    let need_forces = opts.fit_forces || opts.val_forces;
    for s in train.iter().chain(val) {
        if s.energy.is_none() {
            return Err(Error::MissingTargets("energy"));
        }
        if need_forces && s.forces.is_none() {
            return Err(Error::MissingTargets("forces"));
        }
    }
    let (self_contributions, train, val) = if opts.remove_self_contributions {
        let sc = SelfContributions::fit(train)?;
        let t = sc.remove(train)?;
        let v = sc.remove(val)?;
        (Some(sc), t, v)
    } else {
        (None, train.to_vec(), val.to_vec())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = initial_normalizers(&train, opts);
    let frozen = state;
    let val_loss = |m: &Metrics| {
        let mut l = frozen.w_e * m.mse_e / frozen.mse_e;
        if opts.fit_forces {
            l += m.mse_f / frozen.mse_f;
        }
        l
    };

    let mut history = History::default();
    let m0 = validation_metrics(model, &val, opts)?;
    history.records.push(EpochRecord {
        epoch: 0,
        lr: opts.lr,
        train_loss: mean_train_loss(model, &train, &state, opts)?,
        val_e_rmse: m0.mse_e.sqrt(),
        val_f_rmse: m0.mse_f.sqrt(),
    });
    let mut best = (val_loss(&m0), 0usize, model.params().to_vec());
    let mut adam = Adam::new(model.params().len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=opts.epochs {
        let lr = opts.lr_at(epoch);
        order.shuffle(&mut rng);
        let rotated: Vec<Structure> = order
            .iter()
            .map(|&k| train[k].rotated(&random_rotation(&mut rng)))
            .collect();
        let mut epoch_loss = 0.0;
        for batch in rotated.chunks(opts.batch_size) {
            let shared: &dyn Trainable = model;
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|s| sample_loss_grad(shared, s, &state, opts))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; shared.params().len()];
            for (l, g) in &parts {
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        msg: format!("non-finite sample loss {l} at lr {lr:e}"),
                    });
                }
                epoch_loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if lr > 0.0 {
                adam.step(model.params_mut(), &grad, lr);
            }
        }
        let m = validation_metrics(model, &val, opts)?;
        if !m.mse_e.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("validation energy error is {}", m.mse_e),
            });
        }
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / train.len() as f64,
            val_e_rmse: m.mse_e.sqrt(),
            val_f_rmse: m.mse_f.sqrt(),
        });
        let vl = val_loss(&m);
        if vl < best.0 {
            best = (vl, epoch, model.params().to_vec());
        }
        // Validation errors can be exactly zero on trivial data; the
        // normalizers then keep their value.
        let new_f = if opts.fit_forces {
            m.mse_f
        } else {
            state.mse_f
        };
        if m.mse_e > 0.0 && new_f > 0.0 {
            state = update_normalizers(&state, m.mse_e, new_f)?;
        }
        if opts.patience > 0 && epoch - best.1 >= opts.patience {
            stopped_early = true;
            break;
        }
    }
    model.params_mut().copy_from_slice(&best.2);
    Ok(TrainOutcome {
        history,
        self_contributions,
        best_epoch: best.1,
        stopped_early,
    })
}
