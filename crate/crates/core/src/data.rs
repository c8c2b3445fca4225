//! Synthetic data generation and the shard-based non-IID partition.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::model::{Dataset, Matrix};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_clients: usize,
    pub num_classes: usize,
    pub num_features: usize,
    pub samples_per_class: usize,
    pub shards_per_client: usize,
    pub removed_classes_per_shard: usize,
    pub reference_fraction: f64,
    pub reference_size_per_client: usize,
    pub train_test_ratio: f64,
    /// Expected distance between two class means, in units of the per-feature noise std.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            num_classes: 10,
            num_features: 20,
            samples_per_class: 400,
            shards_per_client: 2,
            removed_classes_per_shard: 1,
            reference_fraction: 0.2,
            reference_size_per_client: 50,
            train_test_ratio: 0.7,
            class_separation: 3.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn pool_size(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn repository_size(&self) -> usize {
        (self.pool_size() as f64 * self.reference_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(config("num_clients must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(config("num_classes must be at least 2"));
        }
        if self.num_features == 0 || self.samples_per_class == 0 || self.shards_per_client == 0 {
            return Err(config("num_features, samples_per_class and shards_per_client must be positive"));
        }
        if self.removed_classes_per_shard >= self.num_classes {
            return Err(config("removed_classes_per_shard must leave at least one class per shard"));
        }
        if !(self.reference_fraction > 0.0 && self.reference_fraction < 1.0) {
            return Err(config("reference_fraction must lie in (0, 1)"));
        }
        if !(self.train_test_ratio > 0.0 && self.train_test_ratio < 1.0) {
            return Err(config("train_test_ratio must lie in (0, 1)"));
        }
        if self.reference_size_per_client == 0 {
            return Err(config("reference_size_per_client must be positive"));
        }
        if self.reference_size_per_client * self.num_clients > self.repository_size() {
            return Err(config(format!(
                "repository of {} samples cannot supply {} disjoint reference sets of {}",
                self.repository_size(),
                self.num_clients,
                self.reference_size_per_client
            )));
        }
        let shards = self.num_clients * self.shards_per_client;
        if self.pool_size() - self.repository_size() < shards {
            return Err(config(format!("pool too small for {shards} shards")));
        }
        if !self.class_separation.is_finite() || self.class_separation < 0.0 {
            return Err(config("class_separation must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One client's local and reference data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub local_train: Dataset,
    pub local_test: Dataset,
    pub reference: Dataset,
}

/// Pool indices behind a [`ClientData`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientIndices {
    pub local_train: Vec<usize>,
    pub local_test: Vec<usize>,
    pub reference: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<ClientData>,
    pub indices: Vec<ClientIndices>,
}

/// Gaussian class clusters: one mean per class, unit-variance noise around it.
pub fn generate_synthetic(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Synthetic, 0);
    let f = cfg.num_features;
    let tau = cfg.class_separation / (2.0 * f as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            (0..f)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    tau * z
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let n = cfg.pool_size();
    let mut data = Vec::with_capacity(n * f);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            for m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + z);
            }
            labels.push(class);
        }
    }
    Dataset::new(Matrix::from_vec(n, f, data)?, labels, cfg.num_classes)
}

/// Splits `pool` into a shared reference repository and non-IID client shards.
pub fn partition_non_iid(pool: &Dataset, cfg: &DataConfig) -> Result<Partition> {
    cfg.validate()?;
    if pool.len() != cfg.pool_size() {
        return Err(config(format!("pool has {} samples, config expects {}", pool.len(), cfg.pool_size())));
    }
    let mut rng: ChaCha8Rng = stream(cfg.seed, Stream::Partition, 0);

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let repo_size = cfg.repository_size();
    let (repository, rest) = order.split_at(repo_size);

    let num_shards = cfg.num_clients * cfg.shards_per_client;
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(num_shards);
    let base = rest.len() / num_shards;
    let extra = rest.len() % num_shards;
    let mut start = 0;
    let classes: Vec<usize> = (0..cfg.num_classes).collect();
    for s in 0..num_shards {
        let len = base + usize::from(s < extra);
        let chunk = &rest[start..start + len];
        start += len;
        let removed: Vec<usize> = classes.choose_multiple(&mut rng, cfg.removed_classes_per_shard).copied().collect();
        let kept: Vec<usize> = chunk.iter().copied().filter(|&i| !removed.contains(&pool.labels[i])).collect();
        if kept.is_empty() {
            return Err(config(format!("shard {s} is empty after class removal")));
        }
        shards.push(kept);
    }

    let mut repo: Vec<usize> = repository.to_vec();
    repo.shuffle(&mut rng);

    let mut clients = Vec::with_capacity(cfg.num_clients);
    let mut indices = Vec::with_capacity(cfg.num_clients);
    for c in 0..cfg.num_clients {
        let mut local: Vec<usize> = shards[c * cfg.shards_per_client..(c + 1) * cfg.shards_per_client].concat();
        local.shuffle(&mut rng);
        let n_train = (local.len() as f64 * cfg.train_test_ratio).round() as usize;
        if n_train == 0 || n_train == local.len() {
            return Err(config(format!("client {c} cannot be split into non-empty train and test sets")));
        }
        let test = local.split_off(n_train);
        let r = cfg.reference_size_per_client;
        let reference = repo[c * r..(c + 1) * r].to_vec();
        clients.push(ClientData {
            local_train: pool.subset(&local),
            local_test: pool.subset(&test),
            reference: pool.subset(&reference),
        });
        indices.push(ClientIndices { local_train: local, local_test: test, reference });
    }
    Ok(Partition { clients, indices })
}

fn write_split(out: &mut String, client: usize, tag: &str, ds: &Dataset) {
    for i in 0..ds.len() {
        let _ = write!(out, "{client},{tag},{}", ds.labels[i]);
        for v in ds.features.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
}

/// Line format: `client,split,label,f0,f1,...` with split in {train, test, ref}.
pub fn export_partition(clients: &[ClientData]) -> String {
    let mut out = String::new();
    for (c, data) in clients.iter().enumerate() {
        write_split(&mut out, c, "train", &data.local_train);
        write_split(&mut out, c, "test", &data.local_test);
        write_split(&mut out, c, "ref", &data.reference);
    }
    out
}

/// Parses the output of [`export_partition`].
pub fn import_partition(text: &str, num_classes: usize) -> Result<Vec<ClientData>> {
    #[derive(Default)]
    struct Acc {
        rows: [Vec<Vec<f64>>; 3],
        labels: [Vec<usize>; 3],
    }
    let mut acc: Vec<Acc> = Vec::new();
    let perr = |line: usize, detail: String| Error::Parse { line, detail };
    for (ln, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let client: usize =
            parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| perr(ln, "bad client id".into()))?;
        let split = match parts.next() {
            Some("train") => 0,
            Some("test") => 1,
            Some("ref") => 2,
            other => return Err(perr(ln, format!("unknown split tag {other:?}"))),
        };
        let label: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| perr(ln, "bad label".into()))?;
        let features = parts
            .map(|s| s.parse::<f64>().map_err(|e| perr(ln, format!("bad feature {s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if acc.len() <= client {
            acc.resize_with(client + 1, Acc::default);
        }
        acc[client].rows[split].push(features);
        acc[client].labels[split].push(label);
    }
    acc.into_iter()
        .map(|a| {
            let [tr, te, rf] = a.rows;
            let [ltr, lte, lrf] = a.labels;
            Ok(ClientData {
                local_train: Dataset::new(Matrix::from_rows(&tr)?, ltr, num_classes)?,
                local_test: Dataset::new(Matrix::from_rows(&te)?, lte, num_classes)?,
                reference: Dataset::new(Matrix::from_rows(&rf)?, lrf, num_classes)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashSet};

    fn small() -> DataConfig {
        DataConfig { samples_per_class: 100, reference_size_per_client: 20, ..DataConfig::default() }
    }

    #[test]
    fn synthetic_counts() {
        let cfg = DataConfig {
            num_classes: 2,
            samples_per_class: 10,
            num_clients: 2,
            shards_per_client: 1,
            reference_size_per_client: 1,
            ..DataConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 10);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 10);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = small();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = DataConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn conservation_without_removal() {
        let cfg = DataConfig {
            samples_per_class: 100,
            reference_size_per_client: 20,
            removed_classes_per_shard: 0,
            ..DataConfig::default()
        };
        let pool = generate_synthetic(&cfg).unwrap();
        let part = partition_non_iid(&pool, &cfg).unwrap();
        // 1000 samples, 200 to the repository, 800 over 10 clients
        for c in &part.clients {
            assert_eq!(c.local_train.len() + c.local_test.len(), 80);
        }
    }

    #[test]
    fn shards_miss_removed_classes() {
        let cfg = DataConfig { shards_per_client: 1, ..small() };
        let pool = generate_synthetic(&cfg).unwrap();
        let part = partition_non_iid(&pool, &cfg).unwrap();
        for c in &part.clients {
            let labels: BTreeSet<usize> = c.local_train.labels.iter().chain(&c.local_test.labels).copied().collect();
            assert!(labels.len() <= 9);
        }
    }

    #[test]
    fn reference_sets_disjoint_and_separate_from_local() {
        let cfg = small();
        let pool = generate_synthetic(&cfg).unwrap();
        let part = partition_non_iid(&pool, &cfg).unwrap();
        let mut seen = HashSet::new();
        for ix in &part.indices {
            for &i in &ix.reference {
                assert!(seen.insert(i), "reference index {i} reused");
            }
        }
        assert_eq!(seen.len(), cfg.num_clients * cfg.reference_size_per_client);
        let mut local = HashSet::new();
        for ix in &part.indices {
            let train: HashSet<_> = ix.local_train.iter().collect();
            assert!(ix.local_test.iter().all(|i| !train.contains(i)));
            for &i in ix.local_train.iter().chain(&ix.local_test) {
                assert!(local.insert(i));
                assert!(!seen.contains(&i));
            }
        }
    }

    #[test]
    fn partition_depends_only_on_seed() {
        let cfg = small();
        let pool = generate_synthetic(&cfg).unwrap();
        assert_eq!(partition_non_iid(&pool, &cfg).unwrap(), partition_non_iid(&pool, &cfg).unwrap());
    }

    #[test]
    fn infeasible_plans_rejected() {
        let cfg = DataConfig { reference_size_per_client: 100, ..small() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = DataConfig { train_test_ratio: 1.0, ..small() };
        assert!(cfg.validate().is_err());
        // two-class shards of a single class each become empty once that class is removed
        let cfg = DataConfig {
            num_classes: 2,
            samples_per_class: 1,
            num_clients: 2,
            shards_per_client: 1,
            removed_classes_per_shard: 1,
            reference_fraction: 0.5,
            reference_size_per_client: 0,
            ..DataConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn export_import_roundtrip() {
        let cfg = DataConfig {
            num_clients: 3,
            samples_per_class: 20,
            reference_size_per_client: 5,
            num_features: 4,
            ..DataConfig::default()
        };
        let pool = generate_synthetic(&cfg).unwrap();
        let part = partition_non_iid(&pool, &cfg).unwrap();
        let text = export_partition(&part.clients);
        assert!(text.lines().next().unwrap().starts_with("0,train,"));
        assert_eq!(import_partition(&text, cfg.num_classes).unwrap(), part.clients);
        assert!(matches!(import_partition("0,dev,1,0.5", 2), Err(Error::Parse { line: 1, .. })));
    }
}
