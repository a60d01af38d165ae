//! Grouped benchmark datasets with controlled label and feature noise.
//!
//! Groups are `(label, spurious attribute)` pairs. The spurious attribute is
//! "consistent" with a row when it equals the label, so the spurious noise of a
//! dataset is the fraction of rows where the two differ.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::model::Environment;
use crate::rng::{self, label};

/// Attempts at drawing block flips whose observed class counts agree.
pub const MATCH_RETRIES: usize = 10_000;

/// Group index order used when breaking rounding ties.
pub const TIE_ORDER: [(u8, u8); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("group ({label}, {spurious}) has {available} unflipped rows, {need} required")]
    Infeasible { label: u8, spurious: u8, need: usize, available: usize },
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error("could not pair block labels after {attempts} attempts")]
    InsufficientMatches { attempts: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed csv: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NoiseError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupedDataset {
    pub x: DMatrix<f64>,
    pub y_obs: Vec<u8>,
    pub y_true: Vec<u8>,
    pub spurious_attr: Vec<u8>,
    pub flip_mask: Vec<bool>,
}

impl GroupedDataset {
    pub fn new(x: DMatrix<f64>, y_obs: Vec<u8>, y_true: Vec<u8>, spurious_attr: Vec<u8>) -> Result<Self> {
        let n = x.nrows();
        if y_obs.len() != n || y_true.len() != n || spurious_attr.len() != n {
            return Err(NoiseError::InvalidInput(format!(
                "{n} rows but {} / {} / {} labels",
                y_obs.len(),
                y_true.len(),
                spurious_attr.len()
            )));
        }
        if y_obs.iter().chain(&y_true).chain(&spurious_attr).any(|&v| v > 1) {
            return Err(NoiseError::InvalidInput("labels and attributes must be 0 or 1".into()));
        }
        let flip_mask = y_obs.iter().zip(&y_true).map(|(a, b)| a != b).collect();
        Ok(GroupedDataset { x, y_obs, y_true, spurious_attr, flip_mask })
    }

    pub fn len(&self) -> usize {
        self.y_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_obs.is_empty()
    }

    /// `(label, spurious)` per row, with true or observed labels.
    pub fn groups(&self, use_true_labels: bool) -> Vec<(u8, u8)> {
        let y = if use_true_labels { &self.y_true } else { &self.y_obs };
        y.iter().zip(&self.spurious_attr).map(|(&l, &s)| (l, s)).collect()
    }

    /// Group id `2 * label + spurious` on observed labels.
    pub fn group_ids(&self) -> Vec<u8> {
        self.y_obs.iter().zip(&self.spurious_attr).map(|(&l, &s)| 2 * l + s).collect()
    }

    pub fn select(&self, rows: &[usize]) -> GroupedDataset {
        GroupedDataset {
            x: self.x.select_rows(rows.iter()),
            y_obs: rows.iter().map(|&i| self.y_obs[i]).collect(),
            y_true: rows.iter().map(|&i| self.y_true[i]).collect(),
            spurious_attr: rows.iter().map(|&i| self.spurious_attr[i]).collect(),
            flip_mask: rows.iter().map(|&i| self.flip_mask[i]).collect(),
        }
    }

    /// Writes `f0..f{k}, label, spurious, group, y_true, flip`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let f = self.x.ncols();
        let mut header: Vec<String> = (0..f).map(|j| format!("f{j}")).collect();
        header.extend(["label", "spurious", "group", "y_true", "flip"].map(String::from));
        w.write_record(&header)?;
        let groups = self.group_ids();
        for i in 0..self.len() {
            let mut rec: Vec<String> = (0..f).map(|j| self.x[(i, j)].to_string()).collect();
            rec.push(self.y_obs[i].to_string());
            rec.push(self.spurious_attr[i].to_string());
            rec.push(groups[i].to_string());
            rec.push(self.y_true[i].to_string());
            rec.push(u8::from(self.flip_mask[i]).to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads the schema of [`GroupedDataset::write_csv`]. `y_true` and `flip`
    /// are optional; without them observed labels are taken as true.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let features: Vec<usize> = (0..).map_while(|j| col(&format!("f{j}"))).collect();
        if features.is_empty() {
            return Err(NoiseError::Format("no feature columns f0..".into()));
        }
        let label_col = col("label").ok_or_else(|| NoiseError::Format("missing column label".into()))?;
        let spu_col = col("spurious").ok_or_else(|| NoiseError::Format("missing column spurious".into()))?;
        let true_col = col("y_true");
        let flip_col = col("flip");

        let parse_bit = |s: &str, line: usize| -> Result<u8> {
            match s.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(NoiseError::Format(format!("line {line}: expected 0 or 1, got {other:?}"))),
            }
        };
        let mut data = Vec::new();
        let (mut y_obs, mut y_true, mut spu, mut flips) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            for &j in &features {
                let v: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| NoiseError::Format(format!("line {line}: bad number {:?}", &rec[j])))?;
                data.push(v);
            }
            let yo = parse_bit(&rec[label_col], line)?;
            y_obs.push(yo);
            spu.push(parse_bit(&rec[spu_col], line)?);
            y_true.push(match true_col {
                Some(c) => parse_bit(&rec[c], line)?,
                None => yo,
            });
            if let Some(c) = flip_col {
                flips.push(parse_bit(&rec[c], line)? == 1);
            }
        }
        let n = y_obs.len();
        let x = DMatrix::from_row_slice(n, features.len(), &data);
        let ds = GroupedDataset::new(x, y_obs, y_true, spu)?;
        if flip_col.is_some() && flips != ds.flip_mask {
            return Err(NoiseError::Format("flip column disagrees with label != y_true".into()));
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupStats {
    pub n: usize,
    /// Row counts in [`TIE_ORDER`] order.
    pub counts: [usize; 4],
    pub p0: f64,
    pub p1: f64,
    /// Fraction of rows whose spurious attribute equals the label.
    pub s: f64,
    pub eta_spu: f64,
    /// Fraction of rows whose observed label differs from the true label.
    pub eta_core: f64,
}

fn tie_index(g: (u8, u8)) -> usize {
    TIE_ORDER.iter().position(|&t| t == g).expect("binary group")
}

/// Exact counting statistics; `use_true_labels` selects the label that
/// defines classes and spurious agreement.
pub fn group_statistics(ds: &GroupedDataset, use_true_labels: bool) -> GroupStats {
    let n = ds.len();
    let mut counts = [0usize; 4];
    for g in ds.groups(use_true_labels) {
        counts[tie_index(g)] += 1;
    }
    let nf = n.max(1) as f64;
    let class0 = counts[tie_index((0, 0))] + counts[tie_index((0, 1))];
    let agree = counts[tie_index((0, 0))] + counts[tie_index((1, 1))];
    let flipped = ds.flip_mask.iter().filter(|&&f| f).count();
    let p0 = class0 as f64 / nf;
    let s = agree as f64 / nf;
    GroupStats {
        n,
        counts,
        p0,
        p1: (n - class0) as f64 / nf,
        s,
        eta_spu: (n - agree) as f64 / nf,
        eta_core: flipped as f64 / nf,
    }
}

/// Integer counts summing to `total` with each within one of its quota;
/// remainders are ranked descending, ties by index.
pub fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = quotas.iter().map(|q| q.max(0.0).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Class-conditional Gaussian feature block.
pub trait BlockSampler: Sync {
    fn dim(&self) -> usize;
    fn sample<R: Rng>(&self, label: u8, rng: &mut R, out: &mut [f64]);
}

/// Isotropic blobs with means `±(separation/2)·u`, `u` the normalized all-ones
/// direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct BlobSampler {
    pub dim: usize,
    pub separation: f64,
    pub std: f64,
}

impl Default for BlobSampler {
    /// Six standard deviations between class means: Bayes error about 0.13%.
    fn default() -> Self {
        BlobSampler { dim: 4, separation: 6.0, std: 1.0 }
    }
}

impl BlockSampler for BlobSampler {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample<R: Rng>(&self, label: u8, rng: &mut R, out: &mut [f64]) {
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let mean = sign * 0.5 * self.separation / (self.dim as f64).sqrt();
        for v in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = mean + self.std * z;
        }
    }
}

fn check_rate(name: &str, eta: f64) -> Result<()> {
    if !(0.0..0.5).contains(&eta) {
        return Err(NoiseError::InvalidInput(format!("{name} = {eta} outside [0, 0.5)")));
    }
    Ok(())
}

/// Balanced true labels with exactly `flips` of them flipped at random.
fn noisy_block<R: Rng>(n: usize, flips: usize, rng: &mut R) -> (Vec<u8>, Vec<u8>) {
    let mut truth: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
    truth.shuffle(rng);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut obs = truth.clone();
    for &i in &idx[..flips] {
        obs[i] = 1 - obs[i];
    }
    (truth, obs)
}

/// Dominoes-style dataset: a core block and a spurious block, each with
/// `round(eta n)` flipped labels, joined on equal observed labels (train) or
/// at random (test). `y_obs` is the core block's observed label and
/// `spurious_attr` the spurious block's true class.
pub fn make_dominoes<C: BlockSampler, S: BlockSampler>(
    core: &C,
    spurious: &S,
    n: usize,
    eta_core: f64,
    eta_spu: f64,
    env: Environment,
    seed: u64,
) -> Result<GroupedDataset> {
    check_rate("eta_core", eta_core)?;
    check_rate("eta_spu", eta_spu)?;
    if n == 0 || n % 2 != 0 {
        return Err(NoiseError::InvalidInput(format!("n = {n} must be positive and even")));
    }
    let mut rng = rng::stream(seed, &[label::DOMINOES]);
    let kc = (eta_core * n as f64).round() as usize;
    let ks = (eta_spu * n as f64).round() as usize;
    let zeros = |v: &[u8]| v.iter().filter(|&&l| l == 0).count();

    let mut attempt = 0;
    let (core_true, core_obs, spu_true, spu_obs) = loop {
        if attempt == MATCH_RETRIES {
            return Err(NoiseError::InsufficientMatches { attempts: attempt });
        }
        attempt += 1;
        let (ct, co) = noisy_block(n, kc, &mut rng);
        let (st, so) = noisy_block(n, ks, &mut rng);
        if env == Environment::Test || zeros(&co) == zeros(&so) {
            break (ct, co, st, so);
        }
    };

    // spurious row paired with each core row
    let mut partner = vec![0usize; n];
    match env {
        Environment::Train => {
            for l in 0..2u8 {
                let cs: Vec<usize> = (0..n).filter(|&i| core_obs[i] == l).collect();
                let mut ss: Vec<usize> = (0..n).filter(|&i| spu_obs[i] == l).collect();
                ss.shuffle(&mut rng);
                for (c, s) in cs.into_iter().zip(ss) {
                    partner[c] = s;
                }
            }
        }
        Environment::Test => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            partner.copy_from_slice(&perm);
        }
    }

    let (fc, fs) = (core.dim(), spurious.dim());
    let mut x = DMatrix::zeros(n, fc + fs);
    let mut buf_c = vec![0.0; fc];
    let mut buf_s = vec![0.0; fs];
    for i in 0..n {
        core.sample(core_true[i], &mut rng, &mut buf_c);
        spurious.sample(spu_true[partner[i]], &mut rng, &mut buf_s);
        for (j, &v) in buf_c.iter().chain(&buf_s).enumerate() {
            x[(i, j)] = v;
        }
    }
    let spu_attr = partner.iter().map(|&p| spu_true[p]).collect();
    GroupedDataset::new(x, core_obs, core_true, spu_attr)
}

/// Adds core noise with the four label flows of the flip table, which leave
/// the observed spurious noise unchanged: `(p0/2) eta` of the rows leave each
/// of the label-0 groups and `(p1/2) eta` each of the label-1 groups, where
/// `eta` is the increase from the current core noise. Only unflipped rows move.
pub fn flip_core_noise(ds: &GroupedDataset, eta_core_target: f64, seed: u64) -> Result<GroupedDataset> {
    if !(0.0..=1.0).contains(&eta_core_target) {
        return Err(NoiseError::InvalidInput(format!("eta_core target {eta_core_target}")));
    }
    let stats = group_statistics(ds, false);
    let n = stats.n;
    let current = (ds.flip_mask.iter().filter(|&&f| f).count()) as f64;
    let total = (eta_core_target * n as f64).round() as f64 - current;
    if total < 0.0 {
        return Err(NoiseError::Unreachable(format!(
            "core noise already {} above target {eta_core_target}",
            stats.eta_core
        )));
    }
    if total == 0.0 {
        return Ok(ds.clone());
    }
    let eta = total / n as f64;
    let quotas: Vec<f64> =
        TIE_ORDER.iter().map(|&(l, _)| if l == 0 { stats.p0 } else { stats.p1 } * 0.5 * eta * n as f64).collect();
    let outflow = largest_remainder(&quotas, total as usize);

    let groups = ds.groups(false);
    let mut rng = rng::stream(seed, &[label::FLIP]);
    let mut out = ds.clone();
    for (gi, &g) in TIE_ORDER.iter().enumerate() {
        let mut eligible: Vec<usize> = (0..n).filter(|&i| groups[i] == g && !ds.flip_mask[i]).collect();
        if eligible.len() < outflow[gi] {
            return Err(NoiseError::Infeasible {
                label: g.0,
                spurious: g.1,
                need: outflow[gi],
                available: eligible.len(),
            });
        }
        eligible.shuffle(&mut rng);
        for &i in &eligible[..outflow[gi]] {
            out.y_obs[i] = 1 - out.y_obs[i];
            out.flip_mask[i] = out.y_obs[i] != out.y_true[i];
        }
    }
    Ok(out)
}

/// Removes rows from the largest inconsistent group (`spurious != label`,
/// observed labels) until the spurious noise is within `1/n` of the target.
pub fn drop_to_spurious_target(ds: &GroupedDataset, target_eta_spu: f64, seed: u64) -> Result<GroupedDataset> {
    if !(0.0..1.0).contains(&target_eta_spu) {
        return Err(NoiseError::Unreachable(format!("target {target_eta_spu} outside [0, 1)")));
    }
    let stats = group_statistics(ds, false);
    let n = stats.n as f64;
    let mismatched = stats.counts[tie_index((1, 0))] + stats.counts[tie_index((0, 1))];
    let drop = ((mismatched as f64 - target_eta_spu * n) / (1.0 - target_eta_spu)).round();
    if drop == 0.0 {
        return Ok(ds.clone());
    }
    if drop < 0.0 {
        return Err(NoiseError::Unreachable(format!(
            "spurious noise {} is already below {target_eta_spu}",
            stats.eta_spu
        )));
    }
    let designated = if stats.counts[tie_index((0, 1))] >= stats.counts[tie_index((1, 0))] { (0, 1) } else { (1, 0) };
    let groups = ds.groups(false);
    let mut members: Vec<usize> = (0..ds.len()).filter(|&i| groups[i] == designated).collect();
    let drop = drop as usize;
    if drop > members.len() {
        return Err(NoiseError::Unreachable(format!(
            "need to drop {drop} rows from group {designated:?} of size {}",
            members.len()
        )));
    }
    let mut rng = rng::stream(seed, &[label::DROP]);
    members.shuffle(&mut rng);
    let mut removed = vec![false; ds.len()];
    for &i in &members[..drop] {
        removed[i] = true;
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| !removed[i]).collect();
    let out = ds.select(&keep);
    let after = group_statistics(&out, false);
    if (after.eta_spu - target_eta_spu).abs() > 1.0 / after.n as f64 {
        return Err(NoiseError::Unreachable(format!("reached {} instead of {target_eta_spu}", after.eta_spu)));
    }
    Ok(out)
}
