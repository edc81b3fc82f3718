//! Evaluation: mode coverage, potential grids, classification error, latent
//! interpolation and class-conditional generation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{logsumexp_row, Tensor};
use crate::error::{Error, Result};
use crate::mcmc::{revise_proposal, JointSample, RevisionConfig};
use crate::nets::{argmax, EnergyModel, Generator, NormMode};

/// Mode coverage statistics over repeated sample draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub covered_modes_mean: f64,
    pub covered_modes_std: f64,
    pub realistic_ratio_mean: f64,
    pub realistic_ratio_std: f64,
    pub threshold: f64,
    pub repetitions: usize,
    pub samples_per_rep: usize,
    pub total_modes: usize,
}

/// Covered-mode count and realistic-sample count for one sample set.
///
/// A mode is covered when some sample lies strictly closer than `threshold`;
/// a sample is realistic when it covers some mode.
pub fn coverage_counts(samples: &Tensor, modes: &Tensor, threshold: f64) -> Result<(usize, usize)> {
    if samples.cols() != modes.cols() {
        return Err(Error::dim("mode coverage", samples.shape(), modes.shape()));
    }
    let mut covered = vec![false; modes.rows()];
    let mut realistic = 0;
    for i in 0..samples.rows() {
        let s = samples.row(i);
        let mut hit = false;
        for (k, c) in covered.iter_mut().enumerate() {
            let d2: f64 = s.iter().zip(modes.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2.sqrt() < threshold {
                *c = true;
                hit = true;
            }
        }
        realistic += hit as usize;
    }
    Ok((covered.iter().filter(|&&c| c).count(), realistic))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Draws `reps` sample sets of `n_per_rep` from `source` and reports coverage.
/// Standard deviations use the `n − 1` denominator.
pub fn mode_coverage<R, F>(
    mut source: F,
    modes: &Tensor,
    threshold: f64,
    reps: usize,
    n_per_rep: usize,
    rng: &mut R,
) -> Result<ModeReport>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &mut R) -> Result<Tensor>,
{
    if modes.rows() == 0 {
        return Err(Error::Contract("mode coverage needs at least one mode".into()));
    }
    if !(threshold > 0.0) || reps == 0 || n_per_rep == 0 {
        return Err(Error::Contract(format!(
            "mode coverage needs threshold > 0 and reps, samples >= 1 (got {threshold}, {reps}, {n_per_rep})"
        )));
    }
    let mut covered = Vec::with_capacity(reps);
    let mut ratio = Vec::with_capacity(reps);
    for _ in 0..reps {
        let s = source(n_per_rep, rng)?;
        if s.rows() != n_per_rep {
            return Err(Error::dim("mode coverage source", &[s.rows()], &[n_per_rep]));
        }
        let (c, r) = coverage_counts(&s, modes, threshold)?;
        covered.push(c as f64);
        ratio.push(r as f64 / n_per_rep as f64);
    }
    let (cm, cs) = mean_std(&covered);
    let (rm, rs) = mean_std(&ratio);
    Ok(ModeReport {
        covered_modes_mean: cm,
        covered_modes_std: cs,
        realistic_ratio_mean: rm,
        realistic_ratio_std: rs,
        threshold,
        repetitions: reps,
        samples_per_rep: n_per_rep,
        total_modes: modes.rows(),
    })
}

/// Potential evaluated on a regular 2-D lattice, stored row-major with `y`
/// as the slow index.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: (usize, usize),
    pub class: Option<usize>,
    pub values: Vec<f64>,
}

fn lattice(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    if i + 1 == n {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

impl EnergyGrid {
    pub fn node(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            lattice(self.x_range.0, self.x_range.1, self.resolution.0, ix),
            lattice(self.y_range.0, self.y_range.1, self.resolution.1, iy),
        ]
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.resolution.0 + ix]
    }

    /// All nodes as an `(nx·ny) × 2` tensor in storage order.
    pub fn nodes(&self) -> Tensor {
        let (nx, ny) = self.resolution;
        let mut xy = Vec::with_capacity(2 * nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                xy.extend_from_slice(&self.node(ix, iy));
            }
        }
        Tensor::new([nx * ny, 2], xy).expect("two columns")
    }

    /// Values min-max scaled to `[0, 1]`; a constant grid maps to all ones.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            self.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; self.values.len()]
        }
    }

    /// Nodes whose normalized value is at least `level`.
    pub fn nodes_above(&self, level: f64) -> Tensor {
        let all = self.nodes();
        let idx: Vec<usize> = self
            .normalized()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v >= level)
            .map(|(i, _)| i)
            .collect();
        all.select_rows(&idx)
    }

    /// `x,y,u` triples with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "u"])?;
        let (nx, ny) = self.resolution;
        for iy in 0..ny {
            for ix in 0..nx {
                let [x, y] = self.node(ix, iy);
                w.write_record([x.to_string(), y.to_string(), self.value(ix, iy).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary 8-bit PGM, top row at the largest `y`; white marks low energy,
    /// i.e. the highest potential.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let (nx, ny) = self.resolution;
        let norm = self.normalized();
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{nx} {ny}\n255\n")?;
        for iy in (0..ny).rev() {
            let row: Vec<u8> = (0..nx).map(|ix| (norm[iy * nx + ix] * 255.0).round() as u8).collect();
            w.write_all(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates the marginal potential, or `u(x, class)`, on a lattice that
/// includes the region's corners.
pub fn energy_grid(
    m: &EnergyModel,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: (usize, usize),
    class: Option<usize>,
) -> Result<EnergyGrid> {
    if m.input_dim() != 2 {
        return Err(Error::dim("energy grid", &[m.input_dim()], &[2]));
    }
    if resolution.0 < 2 || resolution.1 < 2 {
        return Err(Error::Contract(format!("grid resolution must be >= 2 per axis, got {resolution:?}")));
    }
    let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 < r.1;
    if !ok(x_range) || !ok(y_range) {
        return Err(Error::Contract(format!("degenerate grid region {x_range:?} x {y_range:?}")));
    }
    if let Some(c) = class {
        if c >= m.classes() {
            return Err(Error::Data(format!("class {c} out of range for {} classes", m.classes())));
        }
    }
    let mut grid = EnergyGrid {
        x_range,
        y_range,
        resolution,
        class,
        values: Vec::new(),
    };
    let joint = m.energy_joint(&grid.nodes())?;
    grid.values = (0..joint.rows())
        .map(|i| match class {
            Some(c) => joint.row(i)[c],
            None => logsumexp_row(joint.row(i)),
        })
        .collect();
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "energy_grid" });
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub errors: usize,
    pub total: usize,
    pub error_rate: f64,
}

/// Fraction of rows whose most probable class differs from the label.
pub fn classify_error(m: &EnergyModel, x: &Tensor, y: &[usize]) -> Result<ClassifyReport> {
    if x.rows() != y.len() {
        return Err(Error::dim("classify_error", &[x.rows()], &[y.len()]));
    }
    let joint = m.energy_joint(x)?;
    let errors = (0..joint.rows()).filter(|&i| argmax(joint.row(i)) != y[i]).count();
    Ok(ClassifyReport {
        errors,
        total: y.len(),
        error_rate: if y.is_empty() { 0.0 } else { errors as f64 / y.len() as f64 },
    })
}

/// Noise-free decodes of `(1 − t) h_a + t h_b` for `steps` evenly spaced `t ∈ [0, 1]`.
pub fn interpolate(g: &Generator, h_a: &[f64], h_b: &[f64], steps: usize) -> Result<Tensor> {
    let l = g.latent_dim();
    if h_a.len() != l || h_b.len() != l {
        return Err(Error::dim("interpolate", &[h_a.len(), h_b.len()], &[l, l]));
    }
    if steps < 2 {
        return Err(Error::Contract(format!("interpolate needs steps >= 2, got {steps}")));
    }
    let mut h = Vec::with_capacity(steps * l);
    for s in 0..steps {
        let t = s as f64 / (steps - 1) as f64;
        h.extend(h_a.iter().zip(h_b).map(|(a, b)| (1.0 - t) * a + t * b));
    }
    g.decode(&Tensor::new([steps, l], h)?, NormMode::Inference)
}

/// Result of class-conditional generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditional {
    pub joint: JointSample,
    /// Proposals drawn in total.
    pub proposed: usize,
    /// Fraction of proposals classified as the requested class.
    pub yield_rate: f64,
}

/// Proposes unconditionally (noise-free, running statistics), keeps the
/// proposals classified as `class`, and revises them under `u(x, class)`.
/// Stops once `n` keepers are found or `cap` proposals have been drawn.
pub fn conditional_generate<R: Rng + ?Sized>(
    m: &EnergyModel,
    g: &Generator,
    class: usize,
    n: usize,
    cap: usize,
    cfg: &RevisionConfig,
    rng: &mut R,
) -> Result<Conditional> {
    if class >= m.classes() {
        return Err(Error::Data(format!("class {class} out of range for {} classes", m.classes())));
    }
    if n == 0 {
        return Err(Error::Contract("conditional_generate needs n >= 1".into()));
    }
    let mut g = g.clone();
    let batch = (n * m.classes()).max(n);
    let (mut hs, mut xs) = (Vec::new(), Vec::new());
    let (mut kept, mut proposed, mut matched) = (0, 0, 0);
    while kept < n && proposed < cap {
        let size = batch.min(cap - proposed);
        let (h, x) = g.generate(size, rng, false, NormMode::Inference)?;
        proposed += size;
        let joint = m.energy_joint(&x)?;
        for i in 0..size {
            if argmax(joint.row(i)) == class {
                matched += 1;
                if kept < n {
                    hs.extend_from_slice(h.row(i));
                    xs.extend_from_slice(x.row(i));
                    kept += 1;
                }
            }
        }
    }
    if kept == 0 {
        return Err(Error::Yield { class, cap });
    }
    let h = Tensor::new([kept, g.latent_dim()], hs)?;
    let x = Tensor::new([kept, g.output_dim()], xs)?;
    let joint = revise_proposal(m, h, x, cfg, rng, Some(class))?;
    Ok(Conditional {
        joint,
        proposed,
        yield_rate: matched as f64 / proposed as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RingMixtureSpec;
    use crate::nets::{Activation, Layer, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn brute_force(samples: &Tensor, modes: &Tensor, t: f64) -> (usize, usize) {
        let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let covered = (0..modes.rows())
            .filter(|&k| (0..samples.rows()).any(|i| dist(samples.row(i), modes.row(k)) < t))
            .count();
        let realistic = (0..samples.rows())
            .filter(|&i| (0..modes.rows()).any(|k| dist(samples.row(i), modes.row(k)) < t))
            .count();
        (covered, realistic)
    }

    #[test]
    fn centers_cover_everything() {
        let (c, _) = RingMixtureSpec::toy32().centers();
        let rep = mode_coverage(|_, _| Ok(c.clone()), &c, 0.15, 5, 32, &mut rng(0)).unwrap();
        assert_eq!(rep.covered_modes_mean, 32.0);
        assert_eq!(rep.realistic_ratio_mean, 1.0);
        assert_eq!(rep.covered_modes_std, 0.0);
    }

    #[test]
    fn one_center_covers_one_mode() {
        let (c, _) = RingMixtureSpec::toy32().centers();
        let one = c.select_rows(&[3; 10]);
        let rep = mode_coverage(|_, _| Ok(one.clone()), &c, 0.15, 2, 10, &mut rng(0)).unwrap();
        assert_eq!(rep.covered_modes_mean, 1.0);
        assert_eq!(rep.realistic_ratio_mean, 1.0);
    }

    #[test]
    fn matches_brute_force_on_a_handmade_set() {
        let (c, _) = RingMixtureSpec::toy32().centers();
        let s = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![1.1, 0.05],
            vec![0.0, 2.14],
            vec![0.0, 2.16],
            vec![-3.0, 0.1],
            vec![2.5, 2.5],
            vec![0.0, 0.0],
            vec![4.0, 0.0],
            vec![-4.0, -0.149],
            vec![2.0f64.sqrt(), 2.0f64.sqrt()],
        ])
        .unwrap();
        assert_eq!(coverage_counts(&s, &c, 0.15).unwrap(), brute_force(&s, &c, 0.15));
        assert_eq!(coverage_counts(&s, &c, 0.15).unwrap(), (6, 7));
    }

    #[test]
    fn empty_modes_is_contract_error() {
        let e = Tensor::zeros([0, 2]);
        let r = mode_coverage(|n, _| Ok(Tensor::zeros([n, 2])), &e, 0.1, 1, 1, &mut rng(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn realistic_ratio_grows_with_threshold() {
        let (c, _) = RingMixtureSpec::toy32().centers();
        let mut r = rng(1);
        let s = Tensor::new([200, 2], (0..400).map(|_| r.random_range(-4.5..4.5)).collect()).unwrap();
        let mut prev = (0, 0);
        for t in [0.05, 0.1, 0.2, 0.4, 0.8] {
            let cur = coverage_counts(&s, &c, t).unwrap();
            assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
    }

    fn zero_model(k: usize) -> EnergyModel {
        let mut m = EnergyModel::mlp(2, &[8], k, Activation::LEAKY_RELU, &mut rng(2)).unwrap();
        for l in &mut m.net.layers {
            if let Layer::Dense(d) = l {
                d.gain.as_mut().unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        m
    }

    #[test]
    fn zero_model_grid_is_constant_log_k() {
        let g = energy_grid(&zero_model(4), (-1.0, 1.0), (-2.0, 2.0), (5, 7), None).unwrap();
        assert!(g.values.iter().all(|v| (v - 4f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_grid_is_the_corners() {
        let g = energy_grid(&zero_model(1), (-1.3, 0.7), (0.1, 2.9), (2, 2), None).unwrap();
        let nodes = g.nodes();
        assert_eq!(nodes.data(), &[-1.3, 0.1, 0.7, 0.1, -1.3, 2.9, 0.7, 2.9]);
    }

    #[test]
    fn marginal_grid_is_logsumexp_of_class_grids() {
        let m = EnergyModel::mlp(2, &[16], 3, Activation::LEAKY_RELU, &mut rng(3)).unwrap();
        let region = ((-4.0, 4.0), (-3.0, 5.0), (9, 11));
        let marg = energy_grid(&m, region.0, region.1, region.2, None).unwrap();
        let per: Vec<EnergyGrid> = (0..3).map(|c| energy_grid(&m, region.0, region.1, region.2, Some(c)).unwrap()).collect();
        for i in 0..marg.values.len() {
            let v: Vec<f64> = per.iter().map(|g| g.values[i]).collect();
            let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            assert!((marg.values[i] - lse).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_regions_are_rejected() {
        let m = zero_model(1);
        assert!(matches!(energy_grid(&m, (1.0, 1.0), (0.0, 1.0), (3, 3), None), Err(Error::Contract(_))));
        assert!(matches!(energy_grid(&m, (0.0, 1.0), (0.0, 1.0), (1, 3), None), Err(Error::Contract(_))));
    }

    #[test]
    fn pgm_maps_high_potential_to_white() {
        let dir = tempfile::tempdir().unwrap();
        let g = EnergyGrid {
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            resolution: (2, 2),
            class: None,
            values: vec![0.0, 1.0, 2.0, 4.0],
        };
        let p = dir.path().join("g.pgm");
        g.write_pgm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[11..], &[128, 255, 0, 64]);
    }

    fn linear(k: usize, w: Vec<f64>, b: Vec<f64>) -> EnergyModel {
        let mut m = EnergyModel::from_specs(
            &[LayerSpec::Dense {
                input: 2,
                output: k,
                weight_norm: false,
                activation: Activation::Identity,
            }],
            &mut rng(0),
        )
        .unwrap();
        let Layer::Dense(d) = &mut m.net.layers[0] else { unreachable!() };
        d.weight.data_mut().copy_from_slice(&w);
        d.bias.data_mut().copy_from_slice(&b);
        m
    }

    #[test]
    fn classify_error_extremes() {
        // class 1 iff x0 > 0
        let m = linear(2, vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0]);
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 3.0], vec![2.0, -1.0]]).unwrap();
        let pred = m.predict(&x).unwrap();
        assert_eq!(classify_error(&m, &x, &pred).unwrap().error_rate, 0.0);
        let flipped: Vec<usize> = pred.iter().map(|p| 1 - p).collect();
        let r = classify_error(&m, &x, &flipped).unwrap();
        assert_eq!((r.errors, r.error_rate), (3, 1.0));
    }

    fn linear_generator() -> Generator {
        let mut g = Generator::from_specs(
            &[LayerSpec::Dense {
                input: 2,
                output: 3,
                weight_norm: false,
                activation: Activation::Identity,
            }],
            0.1,
            &mut rng(4),
        )
        .unwrap();
        let Layer::Dense(d) = &mut g.net.layers[0] else { unreachable!() };
        d.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
        g
    }

    #[test]
    fn interpolation_properties() {
        let g = linear_generator();
        let same = interpolate(&g, &[0.3, -1.0], &[0.3, -1.0], 5).unwrap();
        assert!((1..5).all(|i| same.row(i) == same.row(0)));
        let (a, b) = ([1.0, 2.0], [-3.0, 0.5]);
        let ends = interpolate(&g, &a, &b, 2).unwrap();
        let da = g.decode(&Tensor::new([1, 2], a.to_vec()).unwrap(), NormMode::Inference).unwrap();
        let db = g.decode(&Tensor::new([1, 2], b.to_vec()).unwrap(), NormMode::Inference).unwrap();
        assert_eq!(ends.row(0), da.row(0));
        assert_eq!(ends.row(1), db.row(0));
        let path = interpolate(&g, &a, &b, 9).unwrap();
        for i in 0..9 {
            let t = i as f64 / 8.0;
            for j in 0..3 {
                let lin = (1.0 - t) * da.row(0)[j] + t * db.row(0)[j];
                assert!((path.row(i)[j] - lin).abs() < 1e-12);
            }
        }
        assert!(interpolate(&g, &a, &b, 1).is_err());
        assert!(matches!(interpolate(&g, &[1.0], &b, 3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_class_conditional_keeps_everything() {
        let m = EnergyModel::mlp(2, &[8], 1, Activation::LEAKY_RELU, &mut rng(5)).unwrap();
        let g = Generator::mlp(2, &[8], 2, Activation::Softplus, Activation::Identity, 0.05, &mut rng(6)).unwrap();
        let cfg = RevisionConfig::sgld(5, 0.01, 0.0);
        let out = conditional_generate(&m, &g, 0, 25, 1000, &cfg, &mut rng(7)).unwrap();
        assert_eq!(out.joint.len(), 25);
        assert_eq!(out.proposed, 25);
        assert_eq!(out.yield_rate, 1.0);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&out.joint.energy_after) > mean(&out.joint.energy_before));
    }

    #[test]
    fn unreachable_class_is_a_yield_error() {
        // class 1 never wins
        let m = linear(2, vec![0.0; 4], vec![0.0, -1.0]);
        let g = Generator::mlp(2, &[8], 2, Activation::Softplus, Activation::Identity, 0.05, &mut rng(8)).unwrap();
        let cfg = RevisionConfig::sgld(1, 0.01, 0.0);
        let r = conditional_generate(&m, &g, 1, 5, 40, &cfg, &mut rng(9));
        assert!(matches!(r, Err(Error::Yield { class: 1, cap: 40 })));
    }
}
