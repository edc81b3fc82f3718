//! Datasets: Gaussian ring mixtures, class-balanced label splits, IDX image
//! files and the CSV interchange format.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// One circle of equally spaced mixture modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circle {
    pub radius: f64,
    pub modes: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingMixtureSpec {
    pub circles: Vec<Circle>,
    pub component_std: f64,
    pub n_samples: usize,
}

impl RingMixtureSpec {
    /// 32 modes: 8 on each of the circles of radius 1, 2, 3 and 4.
    pub fn toy32() -> Self {
        RingMixtureSpec {
            circles: (1..=4)
                .map(|r| Circle {
                    radius: r as f64,
                    modes: 8,
                    label: 0,
                })
                .collect(),
            component_std: 0.05,
            n_samples: 1600,
        }
    }

    /// 16 modes on circles of radius 2 and 4; the class is the circle.
    pub fn toy2circ() -> Self {
        RingMixtureSpec {
            circles: vec![
                Circle {
                    radius: 2.0,
                    modes: 8,
                    label: 0,
                },
                Circle {
                    radius: 4.0,
                    modes: 8,
                    label: 1,
                },
            ],
            component_std: 0.1,
            n_samples: 800,
        }
    }

    pub fn total_modes(&self) -> usize {
        self.circles.iter().map(|c| c.modes).sum()
    }

    pub fn classes(&self) -> usize {
        self.circles.iter().map(|c| c.label + 1).max().unwrap_or(0)
    }

    /// Mode centers (one row each) and their class labels.
    pub fn centers(&self) -> (Tensor, Vec<usize>) {
        let mut xy = Vec::with_capacity(2 * self.total_modes());
        let mut labels = Vec::with_capacity(self.total_modes());
        for c in &self.circles {
            for k in 0..c.modes {
                let a = 2.0 * PI * k as f64 / c.modes as f64;
                xy.push(c.radius * a.cos());
                xy.push(c.radius * a.sin());
                labels.push(c.label);
            }
        }
        let n = labels.len();
        (Tensor::new([n, 2], xy).expect("two columns"), labels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_modes() == 0 {
            return Err(Error::Config("ring mixture has zero modes".into()));
        }
        if !(self.component_std >= 0.0 && self.component_std.is_finite()) {
            return Err(Error::Config(format!(
                "component_std must be >= 0, got {}",
                self.component_std
            )));
        }
        if self.circles.iter().any(|c| !(c.radius.is_finite() && c.radius >= 0.0)) {
            return Err(Error::Config("circle radius must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Samples from a ring mixture with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RingSamples {
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Index of the mode each sample was drawn from.
    pub modes: Vec<usize>,
    pub centers: Tensor,
    pub center_labels: Vec<usize>,
}

/// Picks a mode uniformly per sample and adds isotropic Gaussian noise.
pub fn gen_ring_mixture<R: Rng + ?Sized>(spec: &RingMixtureSpec, rng: &mut R) -> Result<RingSamples> {
    spec.validate()?;
    let (centers, center_labels) = spec.centers();
    let k = center_labels.len();
    let mut x = Vec::with_capacity(2 * spec.n_samples);
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut modes = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let m = rng.random_range(0..k);
        for c in centers.row(m) {
            let e: f64 = rng.sample(StandardNormal);
            x.push(c + spec.component_std * e);
        }
        labels.push(center_labels[m]);
        modes.push(m);
    }
    Ok(RingSamples {
        x: Tensor::new([spec.n_samples, 2], x)?,
        labels,
        modes,
        centers,
        center_labels,
    })
}

/// Observations with (possibly absent) labels and the indices whose labels
/// may be used for training.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
    pub labeled_idx: Vec<usize>,
}

impl LabeledSplit {
    pub fn unlabeled(x: Tensor) -> Self {
        LabeledSplit {
            x,
            labels: None,
            labeled_idx: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows outside the labeled subset, ascending.
    pub fn unlabeled_idx(&self) -> Vec<usize> {
        let mut mark = vec![false; self.len()];
        for &i in &self.labeled_idx {
            mark[i] = true;
        }
        (0..self.len()).filter(|&i| !mark[i]).collect()
    }

    /// The labeled rows and their labels.
    pub fn labeled(&self) -> Result<(Tensor, Vec<usize>)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))?;
        Ok((
            self.x.select_rows(&self.labeled_idx),
            self.labeled_idx.iter().map(|&i| labels[i]).collect(),
        ))
    }
}

/// Chooses `per_class` rows of every class uniformly at random.
pub fn make_split<R: Rng + ?Sized>(x: Tensor, labels: Vec<usize>, per_class: usize, rng: &mut R) -> Result<LabeledSplit> {
    if labels.len() != x.rows() {
        return Err(Error::dim("make_split", &[x.rows()], &[labels.len()]));
    }
    let classes = labels.iter().map(|l| l + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut labeled_idx = Vec::with_capacity(per_class * classes);
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::Data(format!(
                "class {c} has {} members, {per_class} labels requested",
                members.len()
            )));
        }
        members.shuffle(rng);
        labeled_idx.extend_from_slice(&members[..per_class]);
    }
    labeled_idx.sort_unstable();
    Ok(LabeledSplit {
        x,
        labels: Some(labels),
        labeled_idx,
    })
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                offset: 0,
                detail: format!("{}: bad gzip stream: {e}", path.display()),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset: at as u64,
            detail: format!("truncated {what}"),
        })
}

/// Parses IDX image and label buffers (already decompressed).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledSplit> {
    let magic = be_u32(images, 0, "image magic")?;
    if magic != 0x0803 {
        return Err(Error::Format {
            offset: 0,
            detail: format!("image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let n = be_u32(images, 4, "image count")? as usize;
    let rows = be_u32(images, 8, "row count")? as usize;
    let cols = be_u32(images, 12, "column count")? as usize;
    let d = rows * cols;
    let body = &images[16..];
    if body.len() != n * d {
        return Err(Error::Format {
            offset: 16 + body.len().min(n * d) as u64,
            detail: format!("image payload is {} bytes, header implies {}", body.len(), n * d),
        });
    }
    let magic = be_u32(labels, 0, "label magic")?;
    if magic != 0x0801 {
        return Err(Error::Format {
            offset: 0,
            detail: format!("label magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let m = be_u32(labels, 4, "label count")? as usize;
    if m != n {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{m} labels for {n} images"),
        });
    }
    let lbody = &labels[8..];
    if lbody.len() != n {
        return Err(Error::Format {
            offset: 8 + lbody.len().min(n) as u64,
            detail: format!("label payload is {} bytes, header implies {n}", lbody.len()),
        });
    }
    if let Some(pos) = lbody.iter().position(|&l| l >= 10) {
        return Err(Error::Format {
            offset: 8 + pos as u64,
            detail: format!("label {} out of range", lbody[pos]),
        });
    }
    let x = body.iter().map(|&p| p as f64 / 255.0).collect();
    Ok(LabeledSplit {
        x: Tensor::new([n, d], x)?,
        labels: Some(lbody.iter().map(|&l| l as usize).collect()),
        labeled_idx: Vec::new(),
    })
}

/// Loads an IDX image/label file pair; gzip-compressed files are accepted.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledSplit> {
    parse_idx(&open_maybe_gz(images)?, &open_maybe_gz(labels)?)
}

/// Writes rows as CSV with columns `x0..x{d-1}` and, when given, `y`.
pub fn write_csv(path: &Path, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = x.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("y".into());
    }
    w.write_record(&header)?;
    for i in 0..x.rows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`]; a final column named `y` holds labels.
pub fn read_csv(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let has_y = header.iter().next_back() == Some("y");
    let d = header.len() - has_y as usize;
    if d == 0 {
        return Err(Error::Data(format!("{}: no feature columns", path.display())));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Data(format!("{}: row {}: {what}", path.display(), line + 1));
        for j in 0..d {
            let v: f64 = rec[j].trim().parse().map_err(|_| bad(&format!("bad number {:?}", &rec[j])))?;
            x.push(v);
        }
        if has_y {
            y.push(rec[d].trim().parse().map_err(|_| bad(&format!("bad label {:?}", &rec[d])))?);
        }
    }
    let n = x.len() / d;
    Ok((Tensor::new([n, d], x)?, has_y.then_some(y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_std_puts_samples_on_centers() {
        let mut spec = RingMixtureSpec::toy32();
        spec.component_std = 0.0;
        spec.n_samples = 200;
        let s = gen_ring_mixture(&spec, &mut rng(1)).unwrap();
        for i in 0..200 {
            assert_eq!(s.x.row(i), s.centers.row(s.modes[i]));
        }
    }

    #[test]
    fn toy32_mode_counts_are_multinomial() {
        let s = gen_ring_mixture(&RingMixtureSpec::toy32(), &mut rng(2)).unwrap();
        assert_eq!(s.centers.rows(), 32);
        let mut counts = [0usize; 32];
        s.modes.iter().for_each(|&m| counts[m] += 1);
        let sd = (1600.0 * (1.0 / 32.0) * (31.0 / 32.0) as f64).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 50.0).abs() <= 4.0 * sd), "{counts:?}");
    }

    #[test]
    fn toy2circ_labels_are_circles() {
        let spec = RingMixtureSpec::toy2circ();
        let s = gen_ring_mixture(&spec, &mut rng(3)).unwrap();
        assert_eq!(spec.total_modes(), 16);
        assert_eq!(spec.classes(), 2);
        for i in 0..s.x.rows() {
            let c = s.centers.row(s.modes[i]);
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            assert_eq!(s.labels[i], if (r - 2.0).abs() < 1e-12 { 0 } else { 1 });
        }
    }

    #[test]
    fn sample_mean_approaches_center_centroid() {
        let mut spec = RingMixtureSpec::toy32();
        spec.n_samples = 100_000;
        let s = gen_ring_mixture(&spec, &mut rng(4)).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..spec.n_samples).map(|i| s.x.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            let se = (var / col.len() as f64).sqrt();
            // centers are symmetric, so their centroid is the origin
            assert!(mean.abs() <= 3.0 * se, "mean {mean} se {se}");
        }
    }

    #[test]
    fn zero_modes_is_rejected() {
        let spec = RingMixtureSpec {
            circles: vec![],
            component_std: 0.1,
            n_samples: 5,
        };
        assert!(matches!(gen_ring_mixture(&spec, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_balanced_and_partitions_rows() {
        let s = gen_ring_mixture(&RingMixtureSpec::toy2circ(), &mut rng(5)).unwrap();
        let a = make_split(s.x.clone(), s.labels.clone(), 4, &mut rng(6)).unwrap();
        let b = make_split(s.x.clone(), s.labels.clone(), 4, &mut rng(7)).unwrap();
        assert_eq!(a.labeled_idx.len(), 8);
        assert_eq!(a.unlabeled_idx().len(), 792);
        assert_ne!(a.labeled_idx, b.labeled_idx);
        for split in [&a, &b] {
            let (_, y) = split.labeled().unwrap();
            assert_eq!(y.iter().filter(|&&l| l == 0).count(), 4);
            let mut all: Vec<usize> = split.labeled_idx.iter().copied().chain(split.unlabeled_idx()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..800).collect::<Vec<_>>());
        }
        let again = make_split(s.x.clone(), s.labels.clone(), 4, &mut rng(6)).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn split_with_every_member_is_fully_labeled() {
        let x = Tensor::zeros([6, 1]);
        let s = make_split(x, vec![0, 1, 0, 1, 0, 1], 3, &mut rng(8)).unwrap();
        assert!(s.unlabeled_idx().is_empty());
        assert!(matches!(
            make_split(Tensor::zeros([2, 1]), vec![0, 1], 2, &mut rng(8)),
            Err(Error::Data(_))
        ));
    }

    fn idx_images(n: u32, fill: u8) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for v in [n, 28, 28] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, n as usize * 784));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 1];
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_parsing() {
        let empty = parse_idx(&idx_images(0, 0), &idx_labels(&[])).unwrap();
        assert!(empty.is_empty());
        let one = parse_idx(&idx_images(1, 255), &idx_labels(&[7])).unwrap();
        assert_eq!(one.x.shape(), &[1, 784]);
        assert!(one.x.data().iter().all(|v| *v == 1.0));
        assert_eq!(one.labels, Some(vec![7]));
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let mut bad = idx_images(1, 0);
        bad[3] = 1;
        assert!(matches!(parse_idx(&bad, &idx_labels(&[0])), Err(Error::Format { offset: 0, .. })));
        let mut short = idx_images(2, 0);
        short.truncate(16 + 784 + 10);
        assert!(matches!(
            parse_idx(&short, &idx_labels(&[0, 1])),
            Err(Error::Format { offset: 810, .. })
        ));
        assert!(matches!(
            parse_idx(&idx_images(1, 0), &idx_labels(&[0, 1])),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(matches!(
            parse_idx(&idx_images(1, 0), &idx_labels(&[12])),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn gzipped_idx_files_load() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let gz = |bytes: &[u8], name: &str| {
            let p = dir.path().join(name);
            let mut e = GzEncoder::new(File::create(&p).unwrap(), flate2::Compression::default());
            e.write_all(bytes).unwrap();
            e.finish().unwrap();
            p
        };
        let i = gz(&idx_images(2, 51), "i.gz");
        let l = gz(&idx_labels(&[3, 4]), "l.gz");
        let s = load_idx(&i, &l).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.x.data().iter().all(|v| (*v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let s = gen_ring_mixture(&RingMixtureSpec::toy2circ(), &mut rng(9)).unwrap();
        write_csv(&p, &s.x, Some(&s.labels)).unwrap();
        let (x, y) = read_csv(&p).unwrap();
        assert_eq!(x, s.x);
        assert_eq!(y.unwrap(), s.labels);
        write_csv(&p, &s.centers, None).unwrap();
        let (c, none) = read_csv(&p).unwrap();
        assert_eq!(c, s.centers);
        assert!(none.is_none());
    }
}
