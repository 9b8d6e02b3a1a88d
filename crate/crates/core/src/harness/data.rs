//! Synthetic blobs, CSV ingestion and non-IID partitioning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::config::{CsvSource, SyntheticTask};
use crate::bayes::Dataset;
use crate::error::{Error, Result};

const MAX_REDRAWS: usize = 10;

/// Splits `total` into parts proportional to `weights` by largest remainder.
/// Ties in the remainder go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        out[k] += 1;
    }
    out
}

/// Gaussian blobs: class c is centered at `separation` along axis c.
/// Class counts are equal up to largest-remainder rounding.
pub fn synthesize_task<R: Rng + ?Sized>(task: &SyntheticTask, rng: &mut R) -> Result<(Dataset, Dataset)> {
    task.validate()?;
    let equal = vec![1.0; task.classes];
    let draw = |n: usize, rng: &mut R| -> Result<Dataset> {
        let counts = largest_remainder(n, &equal);
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
        for (c, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let x: Vec<f64> = (0..task.features)
                    .map(|f| {
                        let centre = if f == c { task.separation } else { 0.0 };
                        let z: f64 = StandardNormal.sample(rng);
                        centre + task.noise_std * z
                    })
                    .collect();
                rows.push((x, c));
            }
        }
        rows.shuffle(rng);
        let (xs, ys) = rows.into_iter().unzip();
        Dataset::new(xs, ys, task.classes)
    };
    let train = draw(task.train_samples, rng)?;
    let test = draw(task.test_samples, rng)?;
    Ok((train, test))
}

/// Reads a CSV with a header; labels are mapped to `0..N` in sorted order of
/// their original values. The last `test_fraction` of rows form the test set.
pub fn load_csv(source: &CsvSource) -> Result<(Dataset, Dataset)> {
    load_csv_path(&source.path, &source.label_column, source.test_fraction)
}

pub fn load_csv_path(path: &Path, label_column: &str, test_fraction: f64) -> Result<(Dataset, Dataset)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("label column '{label_column}' not found")))?;
    let mut xs = Vec::new();
    let mut raw_labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let mut x = Vec::with_capacity(rec.len().saturating_sub(1));
        for (k, field) in rec.iter().enumerate() {
            if k == label_idx {
                raw_labels.push(field.trim().to_string());
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("row {}: column '{}' is not numeric", line + 2, &headers[k])))?;
                x.push(v);
            }
        }
        xs.push(x);
    }
    let mut classes: BTreeMap<String, usize> = BTreeMap::new();
    let mut sorted: Vec<&String> = raw_labels.iter().collect();
    sorted.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal),
        _ => a.cmp(b),
    });
    for l in sorted {
        let next = classes.len();
        classes.entry(l.clone()).or_insert(next);
    }
    let labels: Vec<usize> = raw_labels.iter().map(|l| classes[l]).collect();
    let n = xs.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Config(format!("dataset with {n} rows cannot be split at {test_fraction}")));
    }
    let k = classes.len().max(2);
    let split = n - n_test;
    let test = Dataset::new(xs.split_off(split), labels[split..].to_vec(), k)?;
    let train = Dataset::new(xs, labels[..split].to_vec(), k)?;
    Ok((train, test))
}

/// Dirichlet(concentration) class proportions for one device.
pub fn dirichlet_draw<R: Rng + ?Sized>(classes: usize, concentration: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    loop {
        let g: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 {
            return Ok(g.iter().map(|v| v / total).collect());
        }
    }
}

/// Non-IID split: device i draws class proportions β_i; each class's samples
/// are dealt to devices in proportion to their β values for that class.
/// Redraws when some device ends up empty.
pub fn dirichlet_partition<R: Rng + ?Sized>(data: &Dataset, devices: usize, concentration: f64, rng: &mut R) -> Result<Vec<Dataset>> {
    if devices == 0 {
        return Err(Error::Partition("no devices".into()));
    }
    if !(concentration > 0.0) {
        return Err(Error::Partition(format!("concentration must be positive (got {concentration})")));
    }
    if devices == 1 {
        return Ok(vec![data.clone()]);
    }
    let classes = data.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for n in 0..data.len() {
        by_class[data.label(n)].push(n);
    }
    for _ in 0..MAX_REDRAWS {
        let beta: Vec<Vec<f64>> = (0..devices)
            .map(|_| dirichlet_draw(classes, concentration, rng))
            .collect::<Result<_>>()?;
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); devices];
        for (c, members) in by_class.iter().enumerate() {
            let mut members = members.clone();
            members.shuffle(rng);
            let weights: Vec<f64> = beta.iter().map(|b| b[c]).collect();
            let counts = largest_remainder(members.len(), &weights);
            let mut it = members.into_iter();
            for (shard, count) in shards.iter_mut().zip(counts) {
                shard.extend(it.by_ref().take(count));
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return shards
                .into_iter()
                .map(|mut s| {
                    s.sort_unstable();
                    data.subset(&s)
                })
                .collect();
        }
    }
    Err(Error::Partition(format!("a device received no samples after {MAX_REDRAWS} draws")))
}
