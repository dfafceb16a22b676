//! Seeded scenario generators, the IDX loader and scenario files.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distribution::{KnownDistribution, TruncatedNormal};
use crate::error::{invalid, FflError, Result};
use crate::model::{DataPoint, LocalDataset, LossModel, Scenario, WeightScheme};
use crate::rng::{child_seed, stream};

fn default_noise_sd() -> f64 {
    2.0
}

fn default_trunc() -> (f64, f64) {
    (-3.0, 3.0)
}

fn default_reg() -> f64 {
    0.1
}

/// Two agents with `y = -2x + 1 + kappa`, `x ~ U[0, 1]` and truncated
/// normal noise; agent 1's noise is shifted by `mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoAgentRegressionSpec {
    pub n1: usize,
    pub n2: usize,
    pub mean: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    #[serde(default = "default_trunc")]
    pub trunc: (f64, f64),
    #[serde(default = "default_reg")]
    pub reg: f64,
    #[serde(default)]
    pub weights: WeightScheme,
    #[serde(default)]
    pub seed: u64,
}

impl TwoAgentRegressionSpec {
    pub fn new(n1: usize, n2: usize, mean: f64, seed: u64) -> Self {
        Self {
            n1,
            n2,
            mean,
            noise_sd: default_noise_sd(),
            trunc: default_trunc(),
            reg: default_reg(),
            weights: WeightScheme::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(invalid("both agents need at least one sample"));
        }
        let (lo, hi) = self.trunc;
        if !(lo < hi) {
            return Err(invalid(format!("invalid truncation interval [{lo}, {hi}]")));
        }
        if !(self.mean >= lo && self.mean <= hi && 0.0 >= lo && 0.0 <= hi) {
            return Err(invalid("truncation interval must contain both noise means"));
        }
        Ok(())
    }

    /// Generating distributions of both agents.
    pub fn distributions(&self) -> Result<[KnownDistribution; 2]> {
        let (lo, hi) = self.trunc;
        let mk = |m: f64| -> Result<KnownDistribution> {
            let d = KnownDistribution {
                x_lo: 0.0,
                x_hi: 1.0,
                dx: 1,
                slope: vec![-2.0],
                intercept: 1.0,
                noise: TruncatedNormal::new(m, self.noise_sd, lo, hi)?,
            };
            d.validate()?;
            Ok(d)
        };
        Ok([mk(self.mean)?, mk(0.0)?])
    }
}

pub fn gen_two_agent_regression(spec: &TwoAgentRegressionSpec) -> Result<Scenario> {
    spec.validate()?;
    let dists = spec.distributions()?;
    let counts = [spec.n1, spec.n2];
    let mut datasets = Vec::with_capacity(2);
    for (k, dist) in dists.iter().enumerate() {
        let mut rng = stream(spec.seed, "datagen/agent", k as u64);
        let points = (0..counts[k]).map(|_| dist.sample(&mut rng)).collect::<Result<_>>()?;
        datasets.push(LocalDataset::new(k, points));
    }
    Scenario::new(
        datasets,
        spec.weights.weights(&counts),
        LossModel::ridge(1, spec.reg, true),
        Some(dists.to_vec()),
    )
}

/// Heterogeneous linear-regression agents with bounded features.
///
/// Agent `k` draws `x` uniformly from `[-r, r]^dx` with `r = feature_radius / sqrt(dx)`
/// and labels `y = <theta + heterogeneity z_k, x> + kappa`, where `theta` has norm
/// `signal`, `z_k ~ N(0, I)` and `kappa` is normal noise truncated at three
/// standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRidgeSpec {
    pub num_agents: usize,
    /// Inclusive range of per-agent sample counts.
    pub samples: (usize, usize),
    pub dx: usize,
    pub reg: f64,
    pub feature_radius: f64,
    pub signal: f64,
    pub heterogeneity: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub intercept: bool,
    #[serde(default)]
    pub weights: WeightScheme,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticRidgeSpec {
    pub fn new(num_agents: usize, seed: u64) -> Self {
        Self {
            num_agents,
            samples: (20, 60),
            dx: 3,
            reg: 0.1,
            feature_radius: 1.0,
            signal: 1.0,
            heterogeneity: 0.3,
            noise_sd: 0.2,
            intercept: true,
            weights: WeightScheme::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 || self.dx == 0 {
            return Err(invalid("need at least one agent and one feature"));
        }
        if self.samples.0 == 0 || self.samples.0 > self.samples.1 {
            return Err(invalid("sample range must be nonempty and start at 1 or more"));
        }
        if !(self.reg > 0.0 && self.feature_radius > 0.0) {
            return Err(invalid("regularisation and feature radius must be positive"));
        }
        if !(self.signal >= 0.0 && self.heterogeneity >= 0.0 && self.noise_sd >= 0.0) {
            return Err(invalid("signal, heterogeneity and noise must be nonnegative"));
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn gen_synthetic_ridge(spec: &SyntheticRidgeSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut global = stream(spec.seed, "datagen/mixture", 0);
    let mut theta = gaussian_vec(&mut global, spec.dx);
    let tn = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut theta {
        *v *= spec.signal / tn.max(f64::MIN_POSITIVE);
    }
    let r = spec.feature_radius / (spec.dx as f64).sqrt();
    let noise = if spec.noise_sd > 0.0 {
        Some(TruncatedNormal::new(0.0, spec.noise_sd, -3.0 * spec.noise_sd, 3.0 * spec.noise_sd)?)
    } else {
        None
    };
    let mut datasets = Vec::with_capacity(spec.num_agents);
    for k in 0..spec.num_agents {
        let mut rng = stream(spec.seed, "datagen/agent", k as u64);
        let n = rng.random_range(spec.samples.0..=spec.samples.1);
        let shift = gaussian_vec(&mut rng, spec.dx);
        let wk: Vec<f64> = theta.iter().zip(&shift).map(|(t, z)| t + spec.heterogeneity * z).collect();
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..spec.dx).map(|_| rng.random_range(-r..=r)).collect();
            let mut y: f64 = x.iter().zip(&wk).map(|(a, b)| a * b).sum();
            if let Some(tn) = &noise {
                y += tn.sample(&mut rng)?;
            }
            points.push(DataPoint::new(x, y));
        }
        datasets.push(LocalDataset::new(k, points));
    }
    let counts: Vec<usize> = datasets.iter().map(LocalDataset::len).collect();
    Scenario::new(
        datasets,
        spec.weights.weights(&counts),
        LossModel::ridge(spec.dx, spec.reg, spec.intercept),
        None,
    )
}

/// Labelled feature vectors with classes `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationData {
    pub points: Vec<DataPoint>,
    pub num_classes: usize,
    pub dx: usize,
}

impl ClassificationData {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() || self.num_classes < 2 {
            return Err(invalid("classification data needs samples and at least two classes"));
        }
        for p in &self.points {
            if p.x.len() != self.dx {
                return Err(FflError::DimensionMismatch {
                    expected: self.dx,
                    got: p.x.len(),
                });
            }
            let c = p.y as usize;
            if p.y < 0.0 || p.y.fract() != 0.0 || c >= self.num_classes {
                return Err(FflError::ClassOutOfRange {
                    class: p.y,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for p in &self.points {
            c[p.y as usize] += 1;
        }
        c
    }
}

/// Isotropic Gaussian class clusters around random centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub num_classes: usize,
    pub dx: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Norm of each class centre.
    pub separation: f64,
    /// Norm scale of the within-class spread.
    pub spread: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GaussianMixtureSpec {
    pub fn new(train_samples: usize, test_samples: usize, seed: u64) -> Self {
        Self {
            num_classes: 10,
            dx: 20,
            train_samples,
            test_samples,
            separation: 1.0,
            spread: 0.7,
            seed,
        }
    }
}

/// Train and test sets with classes drawn uniformly.
pub fn gen_gaussian_mixture(spec: &GaussianMixtureSpec) -> Result<(ClassificationData, ClassificationData)> {
    if spec.num_classes < 2 || spec.dx == 0 || spec.train_samples == 0 {
        return Err(invalid("mixture needs two classes, one feature and training samples"));
    }
    if !(spec.separation >= 0.0 && spec.spread >= 0.0) {
        return Err(invalid("separation and spread must be nonnegative"));
    }
    let mut crng = stream(spec.seed, "datagen/mixture", 0);
    let centres: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v = gaussian_vec(&mut crng, spec.dx);
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|a| a * spec.separation / n).collect()
        })
        .collect();
    let per_coord = spec.spread / (spec.dx as f64).sqrt();
    let draw = |count: usize, index: u64| -> ClassificationData {
        let mut rng = stream(spec.seed, "datagen/mixture", index);
        let points = (0..count)
            .map(|_| {
                let c = rng.random_range(0..spec.num_classes);
                let x = centres[c]
                    .iter()
                    .map(|m| m + per_coord * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                DataPoint::new(x, c as f64)
            })
            .collect();
        ClassificationData {
            points,
            num_classes: spec.num_classes,
            dx: spec.dx,
        }
    };
    Ok((draw(spec.train_samples, 1), draw(spec.test_samples, 2)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSkewSpec {
    pub num_agents: usize,
    /// Probability that a sample stays with its label's home agent.
    pub delta: f64,
    #[serde(default = "default_reg")]
    pub reg: f64,
    #[serde(default)]
    pub intercept: bool,
    #[serde(default)]
    pub weights: WeightScheme,
    #[serde(default)]
    pub seed: u64,
}

impl LabelSkewSpec {
    pub fn new(num_agents: usize, delta: f64, seed: u64) -> Self {
        Self {
            num_agents,
            delta,
            reg: default_reg(),
            intercept: false,
            weights: WeightScheme::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 {
            return Err(invalid("need at least one agent"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(invalid(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        Ok(())
    }
}

/// Regeneration attempts before an empty agent becomes an error.
pub const LABEL_SKEW_ATTEMPTS: u64 = 100;

/// Agents whose index ends in the label; labels wrap modulo `K` when `K` is
/// smaller than the number of classes.
fn home_agents(label: usize, k: usize, num_classes: usize) -> Vec<usize> {
    if k < num_classes {
        vec![label % k]
    } else {
        (0..k).filter(|a| a % num_classes == label).collect()
    }
}

fn allocate(data: &ClassificationData, spec: &LabelSkewSpec, domain_index: u64) -> Result<Vec<Vec<DataPoint>>> {
    let k = spec.num_agents;
    let homes: Vec<Vec<usize>> = (0..data.num_classes).map(|c| home_agents(c, k, data.num_classes)).collect();
    let mut last_empty = 0;
    for attempt in 0..LABEL_SKEW_ATTEMPTS {
        let seed = child_seed(spec.seed, "datagen/alloc", attempt);
        let mut rng = stream(seed, "datagen/alloc", domain_index);
        let mut parts = vec![Vec::new(); k];
        for p in &data.points {
            let h = &homes[p.y as usize];
            let mut owner = if h.is_empty() {
                rng.random_range(0..k)
            } else {
                h[rng.random_range(0..h.len())]
            };
            if rng.random::<f64>() >= spec.delta {
                owner = rng.random_range(0..k);
            }
            parts[owner].push(p.clone());
        }
        match parts.iter().position(Vec::is_empty) {
            None => return Ok(parts),
            Some(a) => last_empty = a,
        }
    }
    Err(FflError::EmptyDataset { agent: last_empty })
}

fn skew_scenario(parts: Vec<Vec<DataPoint>>, data: &ClassificationData, spec: &LabelSkewSpec) -> Result<Scenario> {
    let datasets: Vec<LocalDataset> = parts
        .into_iter()
        .enumerate()
        .map(|(k, pts)| LocalDataset::new(k, pts))
        .collect();
    let counts: Vec<usize> = datasets.iter().map(LocalDataset::len).collect();
    Scenario::new(
        datasets,
        spec.weights.weights(&counts),
        LossModel::softmax(data.dx, data.num_classes, spec.reg, spec.intercept),
        None,
    )
}

pub fn gen_label_skew(spec: &LabelSkewSpec, source: &ClassificationData) -> Result<Scenario> {
    spec.validate()?;
    source.validate()?;
    let parts = allocate(source, spec, 0)?;
    skew_scenario(parts, source, spec)
}

/// Training scenario plus per-agent test sets allocated by the same rule.
pub fn gen_label_skew_split(
    spec: &LabelSkewSpec,
    train: &ClassificationData,
    test: &ClassificationData,
) -> Result<(Scenario, Vec<LocalDataset>)> {
    spec.validate()?;
    train.validate()?;
    test.validate()?;
    if train.dx != test.dx || train.num_classes != test.num_classes {
        return Err(invalid("train and test sets disagree on shape"));
    }
    let scenario = skew_scenario(allocate(train, spec, 0)?, train, spec)?;
    let tests = allocate(test, spec, 1)?
        .into_iter()
        .enumerate()
        .map(|(k, pts)| LocalDataset::new(k, pts))
        .collect();
    Ok((scenario, tests))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FflError::Idx(format!("{what}: truncated header")))
}

/// Parse IDX image and label buffers; pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<ClassificationData> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(FflError::Idx(format!("images: bad magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(FflError::Idx(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let nl = be_u32(labels, 4, "labels")? as usize;
    if n != nl {
        return Err(FflError::Idx(format!("{n} images but {nl} labels")));
    }
    let dx = rows * cols;
    let pix = &images[16..];
    if pix.len() < n * dx {
        return Err(FflError::Idx(format!("images: expected {} bytes of pixels, found {}", n * dx, pix.len())));
    }
    let lab = &labels[8..];
    if lab.len() < n {
        return Err(FflError::Idx(format!("labels: expected {n} bytes, found {}", lab.len())));
    }
    let num_classes = lab[..n].iter().copied().max().map_or(0, |m| m as usize + 1).max(2);
    let points = (0..n)
        .map(|i| {
            let x = pix[i * dx..(i + 1) * dx].iter().map(|&b| b as f64 / 255.0).collect();
            DataPoint::new(x, lab[i] as f64)
        })
        .collect();
    Ok(ClassificationData { points, num_classes, dx })
}

pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<ClassificationData> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Scenario file: the generated scenario with the spec and seed that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDocument {
    pub generator: String,
    pub seed: u64,
    pub spec: serde_json::Value,
    pub scenario: Scenario,
}

pub fn save_scenario(path: &Path, doc: &ScenarioDocument) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(doc)?)?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<ScenarioDocument> {
    let doc: ScenarioDocument = serde_json::from_str(&fs::read_to_string(path)?)?;
    doc.scenario.validate()?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::l1_distance;

    #[test]
    fn two_agent_shape_and_determinism() {
        let spec = TwoAgentRegressionSpec::new(50, 400, 0.1, 3);
        let s = gen_two_agent_regression(&spec).unwrap();
        assert_eq!(s.total_samples(), 450);
        assert_eq!(s.sample_counts(), vec![50, 400]);
        assert_eq!(s, gen_two_agent_regression(&spec).unwrap());
        let same = TwoAgentRegressionSpec::new(5, 5, 0.0, 1).distributions().unwrap();
        assert!(l1_distance(&same[0], &same[1]).unwrap() < 1e-12);
        let mut bad = spec.clone();
        bad.trunc = (1.0, -1.0);
        assert!(gen_two_agent_regression(&bad).is_err());
    }

    #[test]
    fn two_agent_noise_mean() {
        let spec = TwoAgentRegressionSpec::new(50, 10, 2.0, 11);
        let s = gen_two_agent_regression(&spec).unwrap();
        let tn = TruncatedNormal::new(2.0, 2.0, -3.0, 3.0).unwrap();
        let m = s.datasets[0].points.iter().map(|p| p.y - (1.0 - 2.0 * p.x[0])).sum::<f64>() / 50.0;
        assert!((m - tn.analytic_mean()).abs() <= 3.0 * 2.0 / 50f64.sqrt());
    }

    #[test]
    fn label_skew_extremes() {
        let (train, _) = gen_gaussian_mixture(&GaussianMixtureSpec::new(3000, 10, 5)).unwrap();
        let full = gen_label_skew(&LabelSkewSpec::new(10, 1.0, 1), &train).unwrap();
        for ds in &full.datasets {
            assert!(ds.points.iter().all(|p| p.y as usize == ds.owner));
        }
        let total: usize = full.sample_counts().iter().sum();
        assert_eq!(total, 3000);

        let uni = gen_label_skew(&LabelSkewSpec::new(10, 0.0, 1), &train).unwrap();
        let counts = train.label_counts();
        for ds in &uni.datasets {
            let n = ds.len() as f64;
            for (c, &cnt) in counts.iter().enumerate() {
                let p = cnt as f64 / 3000.0;
                let obs = ds.points.iter().filter(|q| q.y as usize == c).count() as f64;
                assert!((obs - n * p).abs() <= 5.0 * (n * p * (1.0 - p)).sqrt());
            }
        }
        let mut labels: Vec<i64> = uni.datasets.iter().flat_map(|d| d.points.iter().map(|p| p.y as i64)).collect();
        let mut orig: Vec<i64> = train.points.iter().map(|p| p.y as i64).collect();
        labels.sort_unstable();
        orig.sort_unstable();
        assert_eq!(labels, orig);
    }

    #[test]
    fn label_skew_empty_agent() {
        let data = ClassificationData {
            points: vec![DataPoint::new(vec![0.0], 0.0), DataPoint::new(vec![1.0], 1.0)],
            num_classes: 2,
            dx: 1,
        };
        assert!(matches!(
            gen_label_skew(&LabelSkewSpec::new(4, 1.0, 0), &data),
            Err(FflError::EmptyDataset { .. })
        ));
    }

    fn idx_fixture(n: u32, magic: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = magic.to_be_bytes().to_vec();
        for v in [n, 2, 2] {
            img.extend(v.to_be_bytes());
        }
        img.extend((0..n * 4).map(|i| (i * 17 % 256) as u8));
        let mut lab = IDX_LABELS.to_be_bytes().to_vec();
        lab.extend(n.to_be_bytes());
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_parsing() {
        let (img, lab) = idx_fixture(10, IDX_IMAGES);
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!(d.points.len(), 10);
        assert_eq!(d.dx, 4);
        assert!(d.points.iter().all(|p| p.x.iter().all(|v| (0.0..=1.0).contains(v))));
        let (bad, lab2) = idx_fixture(10, 0x0000_0802);
        assert!(matches!(parse_idx(&bad, &lab2), Err(FflError::Idx(_))));
        assert!(parse_idx(&img[..40], &lab).is_err());
        let (img3, _) = idx_fixture(9, IDX_IMAGES);
        assert!(parse_idx(&img3, &lab).is_err());
    }

    #[test]
    fn scenario_roundtrip() {
        let spec = SyntheticRidgeSpec::new(3, 4);
        let s = gen_synthetic_ridge(&spec).unwrap();
        let doc = ScenarioDocument {
            generator: "synthetic_ridge".into(),
            seed: 4,
            spec: serde_json::to_value(&spec).unwrap(),
            scenario: s,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_scenario(&p, &doc).unwrap();
        assert_eq!(load_scenario(&p).unwrap(), doc);
    }
}
