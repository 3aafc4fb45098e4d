//! Client datasets: synthetic generation, label-shard partitioning, splits
//! and a plain-text table loader.

use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feat_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(feat_dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if feat_dim == 0 {
            return Err(Error::InvalidInput("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * feat_dim {
            return Err(Error::InvalidInput(format!(
                "{} feature values for {} labels of dimension {}",
                features.len(),
                labels.len(),
                feat_dim
            )));
        }
        Ok(Self {
            feat_dim,
            features,
            labels,
        })
    }

    pub fn empty(feat_dim: usize) -> Self {
        Self {
            feat_dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        debug_assert_eq!(row.len(), self.feat_dim);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.feat_dim);
        out.features.reserve(indices.len() * self.feat_dim);
        out.labels.reserve(indices.len());
        for &i in indices {
            out.push(self.row(i), self.label(i));
        }
        out
    }

    pub fn extend(&mut self, other: &Dataset) {
        debug_assert_eq!(other.feat_dim, self.feat_dim);
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Sorted list of the distinct labels present.
    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }
}

/// One participant: its local data, aggregation weight `p_i`, transmit
/// power cap `P_i` and (optionally) a dissimilarity constant `κ_i`.
#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub id: usize,
    pub data: Dataset,
    pub weight: f64,
    pub power_cap: f64,
    pub kappa: Option<f64>,
}

impl ClientRecord {
    pub fn num_samples(&self) -> usize {
        self.data.len()
    }
}

/// Set `p_i = |D_i| / Σ_j |D_j|` on every record.
pub fn assign_weights(records: &mut [ClientRecord]) {
    let total: usize = records.iter().map(|r| r.data.len()).sum();
    for r in records.iter_mut() {
        r.weight = r.data.len() as f64 / total as f64;
    }
}

/// Total number of training samples `|D|`.
pub fn total_samples(records: &[ClientRecord]) -> usize {
    records.iter().map(|r| r.data.len()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Iid,
    /// Each client only sees a fixed random subset of the classes.
    LabelShard,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Partition::Iid),
            "label_shard" => Ok(Partition::LabelShard),
            other => Err(Error::InvalidConfig(format!("unknown partition mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub clients: usize,
    /// Inclusive range for per-client sample counts.
    pub n_range: (usize, usize),
    pub feat_dim: usize,
    pub classes: usize,
    pub mode: Partition,
    pub shards_per_client: usize,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidConfig("need at least one client".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.feat_dim == 0 {
            return Err(Error::InvalidConfig("feature dimension must be positive".into()));
        }
        let (lo, hi) = self.n_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("bad sample-count range ({lo}, {hi})")));
        }
        if self.mode == Partition::LabelShard
            && (self.shards_per_client == 0 || self.shards_per_client > self.classes)
        {
            return Err(Error::InvalidConfig(format!(
                "cannot give each client {} of {} classes",
                self.shards_per_client, self.classes
            )));
        }
        Ok(())
    }
}

/// Ground-truth linear labeller shared by every client of a dataset.
struct Teacher {
    weights: Vec<f64>,
    bias: Vec<f64>,
    feat_dim: usize,
    classes: usize,
}

impl Teacher {
    fn new(seed: u64, feat_dim: usize, classes: usize) -> Self {
        let mut rng = stream(seed, Domain::DataModel, 0, 0);
        let weights = (0..classes * feat_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let bias = (0..classes).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            weights,
            bias,
            feat_dim,
            classes,
        }
    }

    fn label(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let w = &self.weights[c * self.feat_dim..(c + 1) * self.feat_dim];
            let score = self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        best
    }
}

/// Generate `spec.clients` synthetic client datasets.
///
/// Features are standard normal; labels come from the argmax of a random
/// linear teacher drawn from `seed`. In label-shard mode each client is
/// assigned `shards_per_client` classes and its samples are rejection-drawn
/// from the same generative model restricted to those classes.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<ClientRecord>> {
    spec.validate()?;
    let teacher = Teacher::new(seed, spec.feat_dim, spec.classes);
    let mut records = Vec::with_capacity(spec.clients);
    let mut x = vec![0.0; spec.feat_dim];

    for id in 0..spec.clients {
        let mut rng = stream(seed, Domain::DataClient, id as u64, 0);
        let n = rng.random_range(spec.n_range.0..=spec.n_range.1);
        let allowed: Option<Vec<bool>> = match spec.mode {
            Partition::Iid => None,
            Partition::LabelShard => {
                let mut classes: Vec<usize> = (0..spec.classes).collect();
                classes.shuffle(&mut rng);
                let mut mask = vec![false; spec.classes];
                for &c in &classes[..spec.shards_per_client] {
                    mask[c] = true;
                }
                Some(mask)
            }
        };

        let mut data = Dataset::empty(spec.feat_dim);
        let max_attempts = n.saturating_mul(spec.classes).saturating_mul(1000);
        let mut attempts = 0usize;
        while data.len() < n {
            if attempts >= max_attempts {
                return Err(Error::InvalidConfig(format!(
                    "client {id}: assigned classes are (nearly) never produced by the generator"
                )));
            }
            attempts += 1;
            for v in x.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let y = teacher.label(&x);
            if allowed.as_ref().is_none_or(|m| m[y]) {
                data.push(&x, y);
            }
        }

        records.push(ClientRecord {
            id,
            data,
            weight: 0.0,
            power_cap: 1.0,
            kappa: None,
        });
    }
    assign_weights(&mut records);
    Ok(records)
}

/// Split every client into train/test, stratified by label.
///
/// Each client holds out `round(n · test_frac)` samples chosen by systematic
/// sampling over its label-sorted (shuffled within label) index list. The
/// held-out samples of all clients form the global test set. Weights are
/// recomputed from the training counts.
pub fn train_test_split(
    records: &[ClientRecord],
    test_frac: f64,
    seed: u64,
) -> Result<(Vec<ClientRecord>, Dataset)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::InvalidConfig(format!("test fraction {test_frac} not in (0, 1)")));
    }
    let feat_dim = records
        .first()
        .map(|r| r.data.feat_dim())
        .ok_or_else(|| Error::InvalidConfig("no clients to split".into()))?;
    let mut test = Dataset::empty(feat_dim);
    let mut train = Vec::with_capacity(records.len());

    for r in records {
        let n = r.data.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = stream(seed, Domain::Split, r.id as u64, 0);
        idx.shuffle(&mut rng);
        idx.sort_by_key(|&i| r.data.label(i));

        let n_test = (n as f64 * test_frac).round() as usize;
        if n_test >= n {
            return Err(Error::InvalidConfig(format!(
                "client {} has no training samples left after the split",
                r.id
            )));
        }
        let mut is_test = vec![false; n];
        for k in 0..n_test {
            let pos = ((k as f64 + 0.5) * n as f64 / n_test as f64).floor() as usize;
            is_test[pos.min(n - 1)] = true;
        }
        let mut test_idx = Vec::with_capacity(n_test);
        let mut train_idx = Vec::with_capacity(n - n_test);
        for (p, &i) in idx.iter().enumerate() {
            if is_test[p] {
                test_idx.push(i);
            } else {
                train_idx.push(i);
            }
        }
        test.extend(&r.data.subset(&test_idx));
        train.push(ClientRecord {
            id: r.id,
            data: r.data.subset(&train_idx),
            weight: 0.0,
            power_cap: r.power_cap,
            kappa: r.kappa,
        });
    }
    assign_weights(&mut train);
    Ok((train, test))
}

/// Read a delimited table with rows `label,f1,...,fn`.
///
/// A first line whose leading field is not an integer is treated as a
/// header. Blank lines are skipped; every data row must have the same width.
pub fn load_table<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut feat_dim: Option<usize> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let head = fields.next().unwrap_or("");
        let label: usize = match head.parse() {
            Ok(l) => l,
            Err(_) if lineno == 0 => continue,
            Err(_) => {
                return Err(Error::Parse(format!("line {}: bad label `{head}`", lineno + 1)));
            }
        };
        let start = features.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad value `{f}`", lineno + 1)))?;
            features.push(v);
        }
        let width = features.len() - start;
        match feat_dim {
            None => feat_dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::Parse(format!(
                    "line {}: expected {d} features, found {width}",
                    lineno + 1
                )));
            }
            _ => {}
        }
        labels.push(label);
    }
    let feat_dim = feat_dim.ok_or_else(|| Error::Parse("table has no data rows".into()))?;
    Dataset::new(feat_dim, features, labels)
}

/// Distribute a loaded dataset over `clients` participants.
///
/// In i.i.d. mode rows are shuffled and dealt into contiguous chunks whose
/// sizes differ by at most one. In label-shard mode every client draws
/// `shards_per_client` classes and each class is divided evenly among the
/// clients holding it.
pub fn partition_dataset(
    data: &Dataset,
    clients: usize,
    mode: Partition,
    shards_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientRecord>> {
    if clients == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    let mut rng = stream(seed, Domain::DataClient, u64::MAX, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clients];
    match mode {
        Partition::Iid => {
            for (k, &i) in order.iter().enumerate() {
                members[k * clients / order.len().max(1)].push(i);
            }
        }
        Partition::LabelShard => {
            let classes = data.distinct_labels();
            if shards_per_client == 0 || shards_per_client > classes.len() {
                return Err(Error::InvalidConfig(format!(
                    "cannot give each client {} of {} classes",
                    shards_per_client,
                    classes.len()
                )));
            }
            let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
            for c in 0..clients {
                let mut cs: Vec<usize> = (0..classes.len()).collect();
                cs.shuffle(&mut rng);
                for &k in &cs[..shards_per_client] {
                    holders[k].push(c);
                }
            }
            for (k, &label) in classes.iter().enumerate() {
                if holders[k].is_empty() {
                    continue;
                }
                let rows: Vec<usize> = order.iter().copied().filter(|&i| data.label(i) == label).collect();
                for (j, &i) in rows.iter().enumerate() {
                    members[holders[k][j % holders[k].len()]].push(i);
                }
            }
        }
    }

    let mut records = Vec::with_capacity(clients);
    for (id, idx) in members.into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::InvalidConfig(format!("client {id} received no samples")));
        }
        records.push(ClientRecord {
            id,
            data: data.subset(&idx),
            weight: 0.0,
            power_cap: 1.0,
            kappa: None,
        });
    }
    assign_weights(&mut records);
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: Partition) -> SyntheticSpec {
        SyntheticSpec {
            clients: 6,
            n_range: (40, 90),
            feat_dim: 8,
            classes: 10,
            mode,
            shards_per_client: 5,
        }
    }

    #[test]
    fn label_shard_limits_classes() {
        let recs = gen_synthetic(&spec(Partition::LabelShard), 3).unwrap();
        for r in &recs {
            assert!(r.data.distinct_labels().len() <= 5);
            assert!(!r.data.is_empty());
        }
    }

    #[test]
    fn single_iid_client_has_unit_weight() {
        let mut s = spec(Partition::Iid);
        s.clients = 1;
        let recs = gen_synthetic(&s, 1).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].weight, 1.0);
    }

    #[test]
    fn weights_are_sample_proportions() {
        let recs = gen_synthetic(&spec(Partition::Iid), 9).unwrap();
        let total: usize = recs.iter().map(|r| r.data.len()).sum();
        let mut sum = 0.0;
        for r in &recs {
            assert_eq!(r.weight, r.data.len() as f64 / total as f64);
            sum += r.weight;
        }
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = gen_synthetic(&spec(Partition::LabelShard), 11).unwrap();
        let b = gen_synthetic(&spec(Partition::LabelShard), 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn bad_shard_count_rejected() {
        let mut s = spec(Partition::LabelShard);
        s.shards_per_client = 11;
        assert!(matches!(gen_synthetic(&s, 0), Err(Error::InvalidConfig(_))));
        s.shards_per_client = 0;
        assert!(matches!(gen_synthetic(&s, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn split_counts_and_disjointness() {
        let mut s = spec(Partition::Iid);
        s.n_range = (100, 100);
        let recs = gen_synthetic(&s, 5).unwrap();
        let (train, test) = train_test_split(&recs, 0.2, 5).unwrap();
        for t in &train {
            assert!((79..=81).contains(&t.data.len()));
        }
        assert_eq!(test.len() + train.iter().map(|t| t.data.len()).sum::<usize>(), 600);

        // Rows are continuous random vectors, so equality means the same sample.
        for t in &train {
            for i in 0..t.data.len() {
                for j in 0..test.len() {
                    assert_ne!(t.data.row(i), test.row(j));
                }
            }
        }
        let (train2, test2) = train_test_split(&recs, 0.2, 5).unwrap();
        assert_eq!(test, test2);
        assert_eq!(train[0].data, train2[0].data);
    }

    #[test]
    fn split_rejects_bad_fraction_and_empty_client() {
        let recs = gen_synthetic(&spec(Partition::Iid), 5).unwrap();
        assert!(train_test_split(&recs, 0.0, 1).is_err());
        assert!(train_test_split(&recs, 1.0, 1).is_err());
        let tiny = vec![ClientRecord {
            id: 0,
            data: Dataset::new(1, vec![0.5], vec![1]).unwrap(),
            weight: 1.0,
            power_cap: 1.0,
            kappa: None,
        }];
        assert!(train_test_split(&tiny, 0.6, 1).is_err());
    }

    #[test]
    fn table_loader_with_and_without_header() {
        let text = "label,a,b\n1,0.5,-2.25\n0,1e-3,3\n\n";
        let d = load_table(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.row(0), &[0.5, -2.25]);
        assert_eq!(d.row(1), &[1e-3, 3.0]);
        let d2 = load_table("1,0.5,-2.25\n0,1e-3,3\n".as_bytes()).unwrap();
        assert_eq!(d, d2);
        assert!(load_table("1,0.5\n0,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn partition_loaded_table() {
        let recs = gen_synthetic(&spec(Partition::Iid), 2).unwrap();
        let mut all = Dataset::empty(8);
        for r in &recs {
            all.extend(&r.data);
        }
        let parts = partition_dataset(&all, 4, Partition::LabelShard, 5, 7).unwrap();
        assert!(parts.iter().map(|p| p.data.len()).sum::<usize>() <= all.len());
        for p in &parts {
            assert!(p.data.distinct_labels().len() <= 5);
        }
        let iid = partition_dataset(&all, 4, Partition::Iid, 0, 7).unwrap();
        assert_eq!(iid.iter().map(|p| p.data.len()).sum::<usize>(), all.len());
    }
}
