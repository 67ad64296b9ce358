use std::fs;
use std::path::{Path, PathBuf};

use mswt_core::config::{DataSource, RunConfig};
use mswt_core::datagen::{generate_dataset, synthetic_advection, AdvectionConfig, GeneratedData};
use mswt_core::io::{
    fmt_f64, read_checkpoint, read_trajectory, write_atomic, write_checkpoint, write_climatology,
    write_csv, write_loss_csv, write_metrics_csv, write_spectrum_csv, write_trajectory, Checkpoint,
    MetricsRow, TrainingState,
};
use mswt_core::metrics::{
    ensemble_mean_climatology, rel_l2_metric, spectrum_mae, spectrum_mlr, SpectralError,
};
use mswt_core::rollout::{rollout, Trajectory};
use mswt_core::spectral::{
    default_k_max, energy_spectrum_to, enstrophy_spectrum_to, max_shell, spectrum_of_vorticity,
    velocity_from_vorticity, SpectrumKind, SpectrumSeries,
};
use mswt_core::training::{PairDataset, Surrogate, Trainer};
use mswt_core::{Error, Mswt, Result, Tensor};
use serde::Serialize;

use crate::{Cli, Command, GlobalArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.mswc";
pub const LOSS_FILE: &str = "loss.csv";

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenerateData { out } => generate(g, out.as_deref()),
        Command::Train {
            data,
            out,
            resume,
            stop_after,
        } => train(g, data.as_deref(), out.as_deref(), *resume, *stop_after),
        Command::Rollout {
            checkpoint,
            initial,
            steps,
            out,
        } => rollout_cmd(checkpoint, initial, *steps, out),
        Command::Evaluate {
            pred,
            truth,
            steps,
            out,
            spectra_dir,
        } => evaluate(pred, truth, steps, out, spectra_dir.as_deref()),
        Command::Spectrum {
            trajectory,
            step,
            kind,
            channel,
            all_shells,
            out,
        } => spectrum(trajectory, *step, *kind, *channel, *all_shells, out),
        Command::Climatology {
            models,
            reference,
            out,
        } => climatology_cmd(models, reference, out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::invalid(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn trajectory_name(i: usize) -> String {
    format!("traj_{i:04}.mswf")
}

#[derive(Serialize)]
struct Manifest<'a> {
    source: DataSource,
    grid: usize,
    dt: f64,
    snapshots_per_trajectory: usize,
    train_trajectories: usize,
    test_trajectories: usize,
    pairs: usize,
    retries: usize,
    max_cfl: f64,
    train_seeds: &'a [u64],
    test_seeds: &'a [u64],
}

fn generate_data(cfg: &RunConfig) -> Result<GeneratedData> {
    match cfg.data.source {
        DataSource::Ckf => generate_dataset(
            &cfg.solver,
            cfg.data.train_trajectories,
            cfg.data.test_trajectories,
        ),
        DataSource::Advection => synthetic_advection(&AdvectionConfig {
            train_trajectories: cfg.data.train_trajectories,
            test_trajectories: cfg.data.test_trajectories,
            ..cfg.data.advection.clone()
        }),
    }
}

fn generate(g: &GlobalArgs, out: Option<&Path>) -> Result<()> {
    let cfg = g.run_config()?;
    let out = out.map_or_else(|| cfg.paths.data_dir.clone(), Path::to_path_buf);
    let data = generate_data(&cfg)?;
    for (split, trajs) in [("train", &data.train), ("test", &data.test)] {
        let dir = out.join(split);
        create_dir(&dir)?;
        for (i, t) in trajs.iter().enumerate() {
            write_trajectory(&dir.join(trajectory_name(i)), t)?;
        }
    }
    let rows = data
        .pairs
        .pair_index()
        .iter()
        .enumerate()
        .map(|(i, (tr, t))| vec![i.to_string(), trajectory_name(*tr), t.to_string()]);
    write_csv(&out.join("pairs.csv"), &["pair", "trajectory", "t"], rows)?;
    write_atomic(
        &out.join("normalization.json"),
        &to_json(data.pairs.normalization())?,
    )?;
    let first = &data.train[0];
    let manifest = Manifest {
        source: cfg.data.source,
        grid: first.states[0].shape()[0],
        dt: first.dt,
        snapshots_per_trajectory: first.len(),
        train_trajectories: data.train.len(),
        test_trajectories: data.test.len(),
        pairs: data.pairs.len(),
        retries: data.report.retries,
        max_cfl: data.report.max_cfl,
        train_seeds: &data.report.train_seeds,
        test_seeds: &data.report.test_seeds,
    };
    write_atomic(&out.join("manifest.json"), &to_json(&manifest)?)?;
    println!(
        "train: {} trajectories x {} pairs = {} pairs",
        data.train.len(),
        first.len() - 1,
        data.pairs.len()
    );
    println!(
        "test: {} trajectories of {} snapshots",
        data.test.len(),
        first.len()
    );
    println!(
        "max CFL {}, {} retries",
        fmt_f64(data.report.max_cfl),
        data.report.retries
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Trajectories of one split directory in file-name order.
pub fn read_split(dir: &Path) -> Result<Vec<Trajectory>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mswf"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!(
            "no .mswf trajectories in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| read_trajectory(p)).collect()
}

fn checkpoint_of(t: &Trainer, data: &PairDataset) -> Checkpoint {
    Checkpoint {
        model: t.model.clone(),
        normalization: data.normalization().clone(),
        training: Some(TrainingState {
            config: t.config.clone(),
            optimizer: t.optimizer.clone(),
            rng: t.rng_state(),
            history: t.history.clone(),
        }),
    }
}

fn resume_trainer(path: &Path, cfg: &RunConfig, data: &PairDataset) -> Result<Trainer> {
    let ck = read_checkpoint(path)?;
    let st = ck
        .training
        .ok_or_else(|| Error::config(format!("{} holds no optimizer state", path.display())))?;
    if ck.model.config != cfg.model {
        return Err(Error::config(
            "checkpoint model differs from the configured model",
        ));
    }
    if st.config != cfg.train {
        return Err(Error::config(
            "checkpoint training settings differ from the configuration",
        ));
    }
    if ck.normalization != *data.normalization() {
        return Err(Error::config(
            "training data differs from the data the checkpoint was trained on",
        ));
    }
    Trainer::resume(ck.model, st.config, st.optimizer, st.rng, st.history)
}

fn train(
    g: &GlobalArgs,
    data: Option<&Path>,
    out: Option<&Path>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<()> {
    let cfg = g.run_config()?;
    let data_dir = data.map_or_else(|| cfg.paths.data_dir.clone(), Path::to_path_buf);
    let run_dir = out.map_or_else(|| cfg.paths.run_dir.clone(), Path::to_path_buf);
    let dataset = PairDataset::from_trajectories(&read_split(&data_dir.join("train"))?)?;
    let ck_path = run_dir.join(CHECKPOINT_FILE);
    let loss_path = run_dir.join(LOSS_FILE);
    let mut trainer = if resume {
        resume_trainer(&ck_path, &cfg, &dataset)?
    } else {
        Trainer::new(
            Mswt::init(cfg.model.clone(), cfg.model_seed)?,
            cfg.train.clone(),
        )?
    };
    create_dir(&run_dir)?;
    let until = stop_after.map_or(cfg.train.iterations, |s| s.min(cfg.train.iterations));
    let every = cfg.train.checkpoint_every;
    let save = |t: &Trainer| -> Result<()> {
        write_checkpoint(&ck_path, &checkpoint_of(t, &dataset))?;
        write_loss_csv(&loss_path, &t.history)
    };
    let outcome = trainer.run_until(&dataset, until, |t| {
        if every > 0 && t.iteration % every == 0 {
            save(t)?;
        }
        Ok(())
    });
    if let Err(e) = outcome {
        if matches!(e, Error::NonFinite(_)) && ck_path.exists() {
            eprintln!(
                "training diverged; last good checkpoint kept at {}",
                ck_path.display()
            );
        }
        return Err(e);
    }
    save(&trainer)?;
    let last = trainer.history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained to iteration {} of {}, last loss {}",
        trainer.iteration,
        cfg.train.iterations,
        fmt_f64(last)
    );
    println!("wrote {}", ck_path.display());
    Ok(())
}

fn rollout_cmd(checkpoint: &Path, initial: &Path, steps: usize, out: &Path) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let init = read_trajectory(initial)?;
    let op = Surrogate {
        model: ck.model,
        norm: ck.normalization,
    };
    let traj = rollout(&op, &init.states[0], &init.coords, steps, init.dt)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_trajectory(out, &traj)?;
    if let Some(k) = traj.unstable_at {
        return Err(Error::Unstable {
            step: k,
            detail: format!(
                "prediction became non-finite; wrote {} states to {}",
                traj.len(),
                out.display()
            ),
        });
    }
    println!("wrote {} states to {}", traj.len(), out.display());
    Ok(())
}

fn vorticity(state: &Tensor, channel: usize) -> Result<Tensor> {
    let (_, _, c) = state.hwc()?;
    if channel >= c {
        return Err(Error::invalid(format!(
            "channel {channel} out of range for {c} channels"
        )));
    }
    state.channel_slice(channel, 1)
}

fn ke_spectrum(omega: &Tensor) -> Result<SpectrumSeries> {
    spectrum_of_vorticity(omega, SpectrumKind::KineticEnergy)
}

fn mlr_cell(r: Result<SpectralError>) -> Result<Option<f64>> {
    match r {
        Ok(e) => Ok(Some(e.value)),
        Err(Error::InvalidArgument(_)) => Ok(Some(f64::INFINITY)),
        Err(e) => Err(e),
    }
}

fn evaluate(
    pred: &Path,
    truth: &Path,
    steps: &[usize],
    out: &Path,
    spectra_dir: Option<&Path>,
) -> Result<()> {
    let p = read_trajectory(pred)?;
    let t = read_trajectory(truth)?;
    if p.states[0].shape() != t.states[0].shape() {
        return Err(Error::shape(format!(
            "prediction states are {:?}, truth states are {:?}",
            p.states[0].shape(),
            t.states[0].shape()
        )));
    }
    if let Some(d) = spectra_dir {
        create_dir(d)?;
    }
    let mut rows = Vec::with_capacity(steps.len());
    for &s in steps {
        let truth_state = t.state(s).ok_or_else(|| {
            Error::invalid(format!(
                "step {s} is beyond the truth trajectory ({} snapshots)",
                t.len()
            ))
        })?;
        let Some(pred_state) = p.state(s) else {
            if p.unstable_at.is_some_and(|u| s >= u) {
                rows.push(MetricsRow {
                    step: s,
                    rel_l2: None,
                    smae: None,
                    smlr: None,
                    emae: None,
                    emlr: None,
                });
                continue;
            }
            return Err(Error::invalid(format!(
                "step {s} is beyond the prediction ({} snapshots)",
                p.len()
            )));
        };
        let (wp, wt) = (vorticity(pred_state, 0)?, vorticity(truth_state, 0)?);
        let (ep, et) = (ke_spectrum(&wp)?, ke_spectrum(&wt)?);
        let k = default_k_max(wp.shape()[0], wp.shape()[1]);
        let (zp, zt) = (
            enstrophy_spectrum_to(&wp, k)?,
            enstrophy_spectrum_to(&wt, k)?,
        );
        if let Some(d) = spectra_dir {
            for (series, who) in [(&ep, "pred"), (&et, "truth"), (&zp, "pred"), (&zt, "truth")] {
                write_spectrum_csv(
                    &d.join(format!("step_{s}_{}_{who}.csv", series.kind)),
                    series,
                )?;
            }
        }
        rows.push(MetricsRow {
            step: s,
            rel_l2: Some(rel_l2_metric(pred_state, truth_state)?),
            smae: Some(spectrum_mae(&ep, &et)?.value),
            smlr: mlr_cell(spectrum_mlr(&ep, &et))?,
            emae: Some(spectrum_mae(&zp, &zt)?.value),
            emlr: mlr_cell(spectrum_mlr(&zp, &zt))?,
        });
    }
    write_metrics_csv(out, &rows)?;
    for r in &rows {
        match r.rel_l2 {
            Some(v) => println!("step {}: rel L2 {}", r.step, fmt_f64(v)),
            None => println!("step {}: prediction unstable", r.step),
        }
    }
    Ok(())
}

fn spectrum(
    path: &Path,
    step: usize,
    kind: SpectrumKind,
    channel: usize,
    all_shells: bool,
    out: &Path,
) -> Result<()> {
    let traj = read_trajectory(path)?;
    let state = traj.state(step).ok_or_else(|| {
        Error::invalid(format!(
            "step {step} is beyond the trajectory ({} snapshots)",
            traj.len()
        ))
    })?;
    let omega = vorticity(state, channel)?;
    let (h, w) = (omega.shape()[0], omega.shape()[1]);
    let k = if all_shells {
        max_shell(h, w)
    } else {
        default_k_max(h, w)
    };
    let series = match kind {
        SpectrumKind::Enstrophy => enstrophy_spectrum_to(&omega, k)?,
        SpectrumKind::KineticEnergy => {
            let (ux, uy) = velocity_from_vorticity(&omega)?;
            energy_spectrum_to(&ux, &uy, k)?
        }
    };
    write_spectrum_csv(out, &series)?;
    println!(
        "{kind} spectrum, shells 0..={k}, total {}",
        fmt_f64(series.total())
    );
    Ok(())
}

fn climatology_cmd(models: &[PathBuf], reference: &Path, out: &Path) -> Result<()> {
    let members = models
        .iter()
        .map(|p| read_trajectory(p))
        .collect::<Result<Vec<_>>>()?;
    let reference = read_trajectory(reference)?;
    let report = ensemble_mean_climatology(&members, &reference)?;
    create_dir(out)?;
    write_climatology(out, &report)?;
    for (c, ch) in report.channels.iter().enumerate() {
        println!(
            "channel {c}: bias min {} max {} mean {}, rmse {}",
            fmt_f64(ch.min_bias),
            fmt_f64(ch.max_bias),
            fmt_f64(ch.mean_bias),
            fmt_f64(ch.rmse)
        );
    }
    Ok(())
}
