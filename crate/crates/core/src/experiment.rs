//! End-to-end runs of an [`ExperimentConfig`]: data, training, evaluation and
//! the artifacts each stage leaves in an output directory.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ExperimentConfig, Stream};
use crate::data::{gen_ring_mixture, load_idx, make_split, write_csv, LabeledSplit, RingMixtureSpec};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::eval::{
    classify_error, conditional_generate, energy_grid, interpolate, mode_coverage, ClassifyReport, EnergyGrid,
    ModeReport,
};
use crate::nets::{argmax, EnergyModel, Generator, NormMode};
use crate::train::{confident_loss, mean_log_z, sample_joint, train, LogRow, TrainRngs, ENERGY_FILE, GENERATOR_FILE};

/// Tag written next to every set of artifacts.
pub const VERSION_TAG: &str = concat!("jrf ", env!("CARGO_PKG_VERSION"));

pub const CONFIG_FILE: &str = "config.json";
pub const VERSION_FILE: &str = "VERSION";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAIN_DATA_FILE: &str = "train.csv";
pub const TEST_DATA_FILE: &str = "test.csv";

/// Training data, optional labeled test data and, for synthetic data, the mode centers.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: LabeledSplit,
    pub test: Option<(Tensor, Vec<usize>)>,
    pub centers: Option<(Tensor, Vec<usize>)>,
}

fn first_rows(x: Tensor, labels: Vec<usize>, limit: Option<usize>) -> (Tensor, Vec<usize>) {
    match limit {
        Some(n) if n < labels.len() => {
            let idx: Vec<usize> = (0..n).collect();
            (x.select_rows(&idx), labels[..n].to_vec())
        }
        _ => (x, labels),
    }
}

/// Materializes the configured data from the `data` seed stream.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut rng = cfg.streams().rng(Stream::Data);
    match &cfg.data {
        DataConfig::Rings {
            spec,
            labels_per_class,
            test_samples,
        } => {
            let s = gen_ring_mixture(spec, &mut rng)?;
            let train = if *labels_per_class > 0 {
                make_split(s.x, s.labels, *labels_per_class, &mut rng)?
            } else {
                LabeledSplit {
                    x: s.x,
                    labels: Some(s.labels),
                    labeled_idx: Vec::new(),
                }
            };
            let test = if *test_samples > 0 {
                let t = gen_ring_mixture(
                    &RingMixtureSpec {
                        n_samples: *test_samples,
                        ..spec.clone()
                    },
                    &mut rng,
                )?;
                Some((t.x, t.labels))
            } else {
                None
            };
            Ok(Dataset {
                train,
                test,
                centers: Some(spec.centers()),
            })
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
            labels_per_class,
        } => {
            let tr = load_idx(train_images, train_labels)?;
            let labels = tr.labels.ok_or_else(|| Error::Data("training labels missing".into()))?;
            let (x, labels) = first_rows(tr.x, labels, *train_limit);
            let train = make_split(x, labels, *labels_per_class, &mut rng)?;
            let te = load_idx(test_images, test_labels)?;
            let labels = te.labels.ok_or_else(|| Error::Data("test labels missing".into()))?;
            Ok(Dataset {
                train,
                test: Some(first_rows(te.x, labels, *test_limit)),
                centers: None,
            })
        }
    }
}

/// Freshly initialized models from the `init` stream.
pub fn build_models(cfg: &ExperimentConfig) -> Result<(EnergyModel, Generator)> {
    cfg.nets.build(&mut cfg.streams().rng(Stream::Init))
}

pub fn train_rngs(cfg: &ExperimentConfig) -> TrainRngs {
    let s = cfg.streams();
    TrainRngs {
        batch: s.rng(Stream::Batch),
        proposal: s.rng(Stream::Proposal),
        revision: s.rng(Stream::Revision),
    }
}

/// Trained models and their log.
pub struct Trained {
    pub energy: EnergyModel,
    pub generator: Generator,
    pub log: Vec<LogRow>,
}

pub fn train_models(cfg: &ExperimentConfig, data: &Dataset, out: Option<&Path>) -> Result<Trained> {
    let (mut energy, mut generator) = build_models(cfg)?;
    let log = train(
        cfg.mode,
        &mut energy,
        &mut generator,
        &data.train,
        &cfg.train_config(),
        &mut train_rngs(cfg),
        out,
    )?;
    Ok(Trained { energy, generator, log })
}

/// Grid statistics for one potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub class: Option<usize>,
    /// Nodes whose min-max normalized value is at least 0.9.
    pub top_nodes: usize,
    /// Fraction of those nodes within the coverage threshold of a matching mode center.
    pub top_near_modes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalReport {
    pub class: usize,
    pub returned: usize,
    pub proposed: usize,
    pub yield_rate: f64,
    /// Every returned sample is still classified as `class` after revision.
    pub all_match: bool,
    pub energy_before_mean: f64,
    pub energy_after_mean: f64,
}

/// Everything an evaluation measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub recipe: String,
    pub seed: u64,
    pub version: String,
    pub generated: Option<ModeReport>,
    pub revised: Option<ModeReport>,
    /// Mean marginal potential of a proposal batch before and after revision.
    pub energy_proposed_mean: f64,
    pub energy_revised_mean: f64,
    /// Mean marginal potential at mode centers minus that at off-mode points.
    pub center_margin: Option<f64>,
    pub grids: Vec<GridReport>,
    pub classification: Option<ClassifyReport>,
    /// Mean `log Z(x)` over the test inputs.
    pub test_mean_log_z: Option<f64>,
    /// Mean class-posterior entropy over the test inputs.
    pub test_entropy: Option<f64>,
    pub conditional: Vec<ConditionalReport>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn near_fraction(points: &Tensor, centers: &Tensor, threshold: f64) -> f64 {
    if points.rows() == 0 {
        return 0.0;
    }
    let near = (0..points.rows())
        .filter(|&i| {
            let p = points.row(i);
            (0..centers.rows()).any(|k| {
                let c = centers.row(k);
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() < threshold
            })
        })
        .count();
    near as f64 / points.rows() as f64
}

fn grid_report(g: &EnergyGrid, centers: &Tensor, threshold: f64) -> GridReport {
    let top = g.nodes_above(0.9);
    GridReport {
        class: g.class,
        top_nodes: top.rows(),
        top_near_modes: near_fraction(&top, centers, threshold),
    }
}

/// Uniform points inside the grid box that are at least `3 · threshold` from every center.
fn off_mode_points<R: Rng + ?Sized>(
    centers: &Tensor,
    x_range: (f64, f64),
    y_range: (f64, f64),
    threshold: f64,
    n: usize,
    rng: &mut R,
) -> Tensor {
    let mut pts = Vec::with_capacity(2 * n);
    while pts.len() < 2 * n {
        let p = [rng.random_range(x_range.0..x_range.1), rng.random_range(y_range.0..y_range.1)];
        let far = (0..centers.rows()).all(|k| {
            let c = centers.row(k);
            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() >= 3.0 * threshold
        });
        if far {
            pts.extend_from_slice(&p);
        }
    }
    Tensor::new([n, 2], pts).expect("two columns")
}

/// Runs the configured evaluation protocol, writing artifacts to `out` when given.
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    energy: &EnergyModel,
    gen: &Generator,
    out: Option<&Path>,
) -> Result<Summary> {
    let ev = &cfg.eval;
    let rev = cfg.eval_revision();
    let noise = ev.generate_with_noise;
    let mut rng = cfg.streams().rng(Stream::Eval);

    let joint = sample_joint(energy, gen, ev.energy_batch, &rev, &mut rng, noise)?;
    if let Some(dir) = out {
        write_csv(&dir.join("samples_generated.csv"), &joint.x_prop, None)?;
        write_csv(&dir.join("samples_revised.csv"), &joint.x_rev, None)?;
    }
    let mut summary = Summary {
        recipe: cfg.recipe.clone(),
        seed: cfg.seed,
        version: VERSION_TAG.into(),
        generated: None,
        revised: None,
        energy_proposed_mean: mean(&joint.energy_before),
        energy_revised_mean: mean(&joint.energy_after),
        center_margin: None,
        grids: Vec::new(),
        classification: None,
        test_mean_log_z: None,
        test_entropy: None,
        conditional: Vec::new(),
    };

    if let Some((centers, center_labels)) = &data.centers {
        let thr = ev.coverage_threshold;
        let generated = mode_coverage(
            |n, r| Ok(gen.clone().generate(n, r, noise, NormMode::Inference)?.1),
            centers,
            thr,
            ev.repetitions,
            ev.samples_per_rep,
            &mut rng,
        )?;
        let revised = mode_coverage(
            |n, r| Ok(sample_joint(energy, gen, n, &rev, r, noise)?.x_rev),
            centers,
            thr,
            ev.repetitions,
            ev.samples_per_rep,
            &mut rng,
        )?;
        summary.generated = Some(generated);
        summary.revised = Some(revised);

        if let Some(grid) = &ev.grid {
            let g = energy_grid(energy, grid.x_range, grid.y_range, grid.resolution, None)?;
            summary.grids.push(grid_report(&g, centers, thr));
            if let Some(dir) = out {
                g.write_csv(&dir.join("energy_grid.csv"))?;
                g.write_pgm(&dir.join("energy_grid.pgm"))?;
            }
            if energy.classes() > 1 {
                for c in 0..energy.classes() {
                    let gc = energy_grid(energy, grid.x_range, grid.y_range, grid.resolution, Some(c))?;
                    let idx: Vec<usize> = (0..center_labels.len()).filter(|&k| center_labels[k] == c).collect();
                    summary.grids.push(grid_report(&gc, &centers.select_rows(&idx), thr));
                    if let Some(dir) = out {
                        gc.write_csv(&dir.join(format!("energy_grid_class{c}.csv")))?;
                        gc.write_pgm(&dir.join(format!("energy_grid_class{c}.pgm")))?;
                    }
                }
            }
            let off = off_mode_points(centers, grid.x_range, grid.y_range, thr, centers.rows().max(100), &mut rng);
            summary.center_margin =
                Some(mean(&energy.energy_marginal(centers)?) - mean(&energy.energy_marginal(&off)?));
        }
    }

    if let Some((tx, ty)) = &data.test {
        if energy.classes() > 1 {
            let report = classify_error(energy, tx, ty)?;
            if let Some(dir) = out {
                let pred = energy.predict(tx)?;
                let mut w = csv::Writer::from_path(dir.join("predictions.csv"))?;
                w.write_record(["y", "pred"])?;
                for (y, p) in ty.iter().zip(&pred) {
                    w.write_record([y.to_string(), p.to_string()])?;
                }
                w.flush()?;
            }
            summary.classification = Some(report);
            summary.test_mean_log_z = Some(mean_log_z(energy, tx)?);
            summary.test_entropy = Some(confident_loss(energy, tx)?);
        }
    }

    if ev.conditional_samples > 0 && energy.classes() > 1 {
        for c in 0..energy.classes() {
            let cond = conditional_generate(energy, gen, c, ev.conditional_samples, ev.conditional_cap, &rev, &mut rng)?;
            let joint = energy.energy_joint(&cond.joint.x_rev)?;
            let all_match = (0..joint.rows()).all(|i| argmax(joint.row(i)) == c);
            if let Some(dir) = out {
                write_csv(&dir.join(format!("conditional_class{c}.csv")), &cond.joint.x_rev, None)?;
            }
            summary.conditional.push(ConditionalReport {
                class: c,
                returned: cond.joint.len(),
                proposed: cond.proposed,
                yield_rate: cond.yield_rate,
                all_match,
                energy_before_mean: mean(&cond.joint.energy_before),
                energy_after_mean: mean(&cond.joint.energy_after),
            });
        }
    }

    if let Some(dir) = out {
        let l = gen.latent_dim();
        let ends: Vec<f64> = (0..2 * l).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let path = interpolate(gen, &ends[..l], &ends[l..], ev.interpolation_steps)?;
        write_csv(&dir.join("interpolation.csv"), &path, None)?;
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

/// Writes the resolved config and version tag into `dir`.
pub fn write_provenance(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json()? + "\n")?;
    fs::write(dir.join(VERSION_FILE), format!("{VERSION_TAG}\n"))?;
    Ok(())
}

/// Writes the training (and test) data as CSV.
pub fn export_data(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join(TRAIN_DATA_FILE), &data.train.x, data.train.labels.as_deref())?;
    if let Some((x, y)) = &data.test {
        write_csv(&dir.join(TEST_DATA_FILE), x, Some(y))?;
    }
    Ok(())
}

/// Data, training and evaluation in one go, with every artifact under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    cfg.validate()?;
    write_provenance(cfg, out)?;
    let data = load_data(cfg)?;
    if matches!(cfg.data, DataConfig::Rings { .. }) {
        export_data(&data, out)?;
    }
    let t = train_models(cfg, &data, Some(out))?;
    evaluate(cfg, &data, &t.energy, &t.generator, Some(out))
}

/// Loads the models a previous run left in `dir`.
pub fn load_models(dir: &Path) -> Result<(EnergyModel, Generator)> {
    Ok((
        EnergyModel::load(&dir.join(ENERGY_FILE))?,
        Generator::load(&dir.join(GENERATOR_FILE))?,
    ))
}
