//! Random forests over binary fingerprint features: per-target models and a
//! global model with a one-hot target block.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Dataset, DatasetError};
use crate::evalkit::{EvalError, MetricBundle};
use crate::fingerprint::{morgan_fingerprint, Fingerprint, FingerprintError, DEFAULT_NBITS, DEFAULT_RADIUS};

pub const FOREST_MAGIC: &[u8; 5] = b"NDRF1";

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no training data")]
    EmptyData,
    #[error("training labels contain a single class")]
    OneClassOnly,
    #[error("feature width mismatch: model expects {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("target {target} has {actives} training actives, at least {required} required")]
    InsufficientData { target: u32, actives: usize, required: usize },
    #[error("invalid forest config: {0}")]
    Config(String),
    #[error("malformed forest file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Row-major bit matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryFeatures {
    width: usize,
    words: usize,
    data: Vec<u64>,
}

impl BinaryFeatures {
    pub fn new(width: usize) -> BinaryFeatures {
        BinaryFeatures {
            width,
            words: width.div_ceil(64),
            data: Vec::new(),
        }
    }

    pub fn push_row(&mut self, ones: impl IntoIterator<Item = usize>) -> Result<(), BaselineError> {
        let start = self.data.len();
        self.data.resize(start + self.words, 0);
        for b in ones {
            if b >= self.width {
                self.data.truncate(start);
                return Err(BaselineError::Shape { expected: self.width, got: b + 1 });
            }
            self.data[start + b / 64] |= 1 << (b % 64);
        }
        Ok(())
    }

    /// Fingerprint bits, optionally followed by a one-hot block of
    /// `n_contexts` columns.
    pub fn from_fingerprints(fps: &[Fingerprint], one_hot: Option<(&[usize], usize)>) -> Result<BinaryFeatures, BaselineError> {
        let nbits = fps.first().map_or(0, Fingerprint::nbits);
        let extra = one_hot.map_or(0, |(_, n)| n);
        let mut x = BinaryFeatures::new(nbits + extra);
        for (i, fp) in fps.iter().enumerate() {
            if fp.nbits() != nbits {
                return Err(BaselineError::Shape { expected: nbits, got: fp.nbits() });
            }
            let ctx = match one_hot {
                Some((idx, n)) => {
                    let c = *idx.get(i).ok_or(BaselineError::Shape { expected: fps.len(), got: idx.len() })?;
                    if c >= n {
                        return Err(BaselineError::Shape { expected: n, got: c + 1 });
                    }
                    Some(nbits + c)
                }
                None => None,
            };
            x.push_row(fp.ones().chain(ctx))?;
        }
        Ok(x)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        if self.words == 0 {
            0
        } else {
            self.data.len() / self.words
        }
    }

    pub fn get(&self, row: usize, feature: usize) -> bool {
        self.data[row * self.words + feature / 64] >> (feature % 64) & 1 == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per node as a fraction of the width; `None` means √F.
    pub feature_fraction: Option<f64>,
    pub seed: u64,
    pub threads: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 200,
            max_depth: 20,
            min_leaf: 2,
            feature_fraction: None,
            seed: 0,
            threads: 1,
        }
    }
}

impl ForestConfig {
    fn features_per_node(&self, width: usize) -> usize {
        let k = match self.feature_fraction {
            Some(f) => (f * width as f64).round() as usize,
            None => (width as f64).sqrt().round() as usize,
        };
        k.clamp(1, width.max(1))
    }

    fn validate(&self) -> Result<(), BaselineError> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(BaselineError::Config("n_trees and min_leaf must be >= 1".into()));
        }
        if let Some(f) = self.feature_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(BaselineError::Config(format!("feature fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Flat node arrays; `feature < 0` marks a leaf. Samples with the feature bit
/// unset go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<i32>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Positive-class probability at each node.
    pub value: Vec<f64>,
}

impl DecisionTree {
    pub fn predict_row(&self, x: &BinaryFeatures, row: usize) -> f64 {
        let mut n = 0;
        while self.feature[n] >= 0 {
            n = if x.get(row, self.feature[n] as usize) {
                self.right[n]
            } else {
                self.left[n]
            } as usize;
        }
        self.value[n]
    }

    pub fn len(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, n: usize) -> usize {
            if t.feature[n] < 0 {
                0
            } else {
                1 + walk(t, t.left[n] as usize).max(walk(t, t.right[n] as usize))
            }
        }
        walk(self, 0)
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Grower<'a> {
    x: &'a BinaryFeatures,
    y: &'a [bool],
    cfg: &'a ForestConfig,
    k: usize,
    rng: ChaCha8Rng,
    tree: DecisionTree,
}

impl Grower<'_> {
    fn leaf(&mut self, pos: usize, n: usize) -> usize {
        self.tree.feature.push(-1);
        self.tree.left.push(0);
        self.tree.right.push(0);
        self.tree.value.push(pos as f64 / n as f64);
        self.tree.feature.len() - 1
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let n = rows.len();
        let pos = rows.iter().filter(|&&r| self.y[r]).count();
        if depth >= self.cfg.max_depth || n < 2 * self.cfg.min_leaf || pos == 0 || pos == n {
            return self.leaf(pos, n);
        }
        let mut features = sample(&mut self.rng, self.x.width(), self.k).into_vec();
        features.sort_unstable();
        let parent = gini(pos, n);
        let mut best: Option<(f64, usize)> = None;
        for &f in &features {
            let (mut rn, mut rp) = (0, 0);
            for &r in &rows {
                if self.x.get(r, f) {
                    rn += 1;
                    rp += usize::from(self.y[r]);
                }
            }
            let ln = n - rn;
            if ln < self.cfg.min_leaf || rn < self.cfg.min_leaf {
                continue;
            }
            let w = (ln as f64 * gini(pos - rp, ln) + rn as f64 * gini(rp, rn)) / n as f64;
            if w < parent - 1e-12 && best.map_or(true, |(b, _)| w < b) {
                best = Some((w, f));
            }
        }
        let Some((_, f)) = best else {
            return self.leaf(pos, n);
        };
        let node = self.leaf(pos, n);
        self.tree.feature[node] = f as i32;
        let (right, left): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&r| self.x.get(r, f));
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.tree.left[node] = l as u32;
        self.tree.right[node] = r as u32;
        node
    }
}

fn fit_tree(x: &BinaryFeatures, y: &[bool], cfg: &ForestConfig, index: usize) -> DecisionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let n = y.len();
    let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let mut g = Grower {
        x,
        y,
        cfg,
        k: cfg.features_per_node(x.width()),
        rng,
        tree: DecisionTree {
            feature: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
        },
    };
    g.grow(rows, 0);
    g.tree
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub config: ForestConfig,
    pub width: usize,
    pub trees: Vec<DecisionTree>,
}

/// Bagged Gini trees; tree `i` draws its bootstrap sample and feature subsets
/// from seed + i, so the forest is identical for any thread count.
pub fn fit_forest(x: &BinaryFeatures, y: &[bool], cfg: &ForestConfig) -> Result<ForestModel, BaselineError> {
    cfg.validate()?;
    if x.rows() != y.len() {
        return Err(BaselineError::Shape { expected: x.rows(), got: y.len() });
    }
    if y.len() < 2 {
        return Err(BaselineError::EmptyData);
    }
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(BaselineError::OneClassOnly);
    }
    let threads = cfg.threads.clamp(1, cfg.n_trees);
    let trees = if threads == 1 {
        (0..cfg.n_trees).map(|i| fit_tree(x, y, cfg, i)).collect()
    } else {
        let mut slots: Vec<Option<DecisionTree>> = vec![None; cfg.n_trees];
        std::thread::scope(|s| {
            for (t, chunk) in slots.chunks_mut(cfg.n_trees.div_ceil(threads)).enumerate() {
                let base = t * cfg.n_trees.div_ceil(threads);
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(fit_tree(x, y, cfg, base + j));
                    }
                });
            }
        });
        slots.into_iter().map(|t| t.expect("every tree fitted")).collect()
    };
    Ok(ForestModel {
        config: cfg.clone(),
        width: x.width(),
        trees,
    })
}

impl ForestModel {
    /// Mean positive-class leaf probability across trees.
    pub fn predict_proba(&self, x: &BinaryFeatures) -> Result<Vec<f64>, BaselineError> {
        if x.width() != self.width {
            return Err(BaselineError::Shape { expected: self.width, got: x.width() });
        }
        let nt = self.trees.len() as f64;
        Ok((0..x.rows())
            .map(|r| self.trees.iter().map(|t| t.predict_row(x, r)).sum::<f64>() / nt)
            .collect())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), BaselineError> {
        let header = serde_json::to_vec(&serde_json::json!({ "config": self.config, "width": self.width }))
            .map_err(|e| BaselineError::Format(e.to_string()))?;
        w.write_all(FOREST_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.trees.len() as u32).to_le_bytes())?;
        for t in &self.trees {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            for i in 0..t.len() {
                w.write_all(&t.feature[i].to_le_bytes())?;
                w.write_all(&t.left[i].to_le_bytes())?;
                w.write_all(&t.right[i].to_le_bytes())?;
                w.write_all(&t.value[i].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<ForestModel, BaselineError> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], BaselineError> {
            let mut b = [0u8; N];
            r.read_exact(&mut b).map_err(|e| BaselineError::Format(e.to_string()))?;
            Ok(b)
        }
        if &take::<5>(&mut r)? != FOREST_MAGIC {
            return Err(BaselineError::Format("bad magic".into()));
        }
        let len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(|e| BaselineError::Format(e.to_string()))?;
        #[derive(Deserialize)]
        struct Header {
            config: ForestConfig,
            width: usize,
        }
        let h: Header = serde_json::from_slice(&header).map_err(|e| BaselineError::Format(e.to_string()))?;
        let n_trees = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let n = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut t = DecisionTree {
                feature: Vec::new(),
                left: Vec::new(),
                right: Vec::new(),
                value: Vec::new(),
            };
            for _ in 0..n {
                t.feature.push(i32::from_le_bytes(take(&mut r)?));
                t.left.push(u32::from_le_bytes(take(&mut r)?));
                t.right.push(u32::from_le_bytes(take(&mut r)?));
                t.value.push(f64::from_le_bytes(take(&mut r)?));
            }
            let bad = t.is_empty()
                || (0..n).any(|i| {
                    t.feature[i] >= h.width as i32
                        || (t.feature[i] >= 0 && (t.left[i] as usize >= n || t.right[i] as usize >= n))
                        || !(0.0..=1.0).contains(&t.value[i])
                });
            if bad {
                return Err(BaselineError::Format("invalid node arrays".into()));
            }
            trees.push(t);
        }
        Ok(ForestModel {
            config: h.config,
            width: h.width,
            trees,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfExperimentConfig {
    pub forest: ForestConfig,
    pub radius: u32,
    pub nbits: usize,
    pub min_actives: usize,
}

impl Default for RfExperimentConfig {
    fn default() -> Self {
        RfExperimentConfig {
            forest: ForestConfig::default(),
            radius: DEFAULT_RADIUS,
            nbits: DEFAULT_NBITS,
            min_actives: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfExperimentResult {
    pub target: u32,
    pub n_train: usize,
    pub n_train_actives: usize,
    pub n_test: usize,
    pub metrics: MetricBundle,
}

pub fn fingerprints(ds: &Dataset, radius: u32, nbits: usize) -> Result<Vec<Fingerprint>, BaselineError> {
    ds.graphs()?
        .iter()
        .map(|g| morgan_fingerprint(g, radius, nbits).map_err(BaselineError::from))
        .collect()
}

/// Trains on the target's own records of `train` and scores its records of
/// `test`.
pub fn per_target_rf_experiment(
    train: &Dataset,
    test: &Dataset,
    target: u32,
    cfg: &RfExperimentConfig,
) -> Result<RfExperimentResult, BaselineError> {
    let tr = train.for_target(target);
    let te = test.for_target(target);
    let y = tr.labels();
    let actives = y.iter().filter(|&&l| l).count();
    if actives < cfg.min_actives {
        return Err(BaselineError::InsufficientData {
            target,
            actives,
            required: cfg.min_actives,
        });
    }
    let x = BinaryFeatures::from_fingerprints(&fingerprints(&tr, cfg.radius, cfg.nbits)?, None)?;
    let forest = fit_forest(&x, &y, &cfg.forest)?;
    let xt = BinaryFeatures::from_fingerprints(&fingerprints(&te, cfg.radius, cfg.nbits)?, None)?;
    let xt = if te.is_empty() { BinaryFeatures::new(x.width()) } else { xt };
    let scores = forest.predict_proba(&xt)?;
    Ok(RfExperimentResult {
        target,
        n_train: tr.len(),
        n_train_actives: actives,
        n_test: te.len(),
        metrics: MetricBundle::classification(&scores, &te.labels())?,
    })
}

/// One forest over all targets with a one-hot target block appended to the
/// fingerprint bits.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalForest {
    pub forest: ForestModel,
    pub targets: BTreeMap<u32, usize>,
    pub radius: u32,
    pub nbits: usize,
}

impl GlobalForest {
    pub fn fit(train: &Dataset, cfg: &RfExperimentConfig) -> Result<GlobalForest, BaselineError> {
        let targets: BTreeMap<u32, usize> = train.target_ids().into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        let x = Self::features(train, &targets, cfg.radius, cfg.nbits)?;
        Ok(GlobalForest {
            forest: fit_forest(&x, &train.labels(), &cfg.forest)?,
            targets,
            radius: cfg.radius,
            nbits: cfg.nbits,
        })
    }

    fn features(ds: &Dataset, targets: &BTreeMap<u32, usize>, radius: u32, nbits: usize) -> Result<BinaryFeatures, BaselineError> {
        let fps = fingerprints(ds, radius, nbits)?;
        let mut x = BinaryFeatures::new(nbits + targets.len());
        for (fp, r) in fps.iter().zip(&ds.records) {
            let ctx = targets.get(&r.target_id).map(|&i| nbits + i);
            x.push_row(fp.ones().chain(ctx))?;
        }
        Ok(x)
    }

    /// Probabilities for `ds`; unseen targets get an all-zero context block.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<f64>, BaselineError> {
        self.forest.predict_proba(&Self::features(ds, &self.targets, self.radius, self.nbits)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump_data() -> (BinaryFeatures, Vec<bool>) {
        let mut x = BinaryFeatures::new(8);
        let mut y = Vec::new();
        for i in 0..40 {
            let on = i % 2 == 0;
            x.push_row(if on { vec![3, (i % 4) + 4] } else { vec![(i % 4) + 4] }).unwrap();
            y.push(on);
        }
        (x, y)
    }

    #[test]
    fn predictive_bit_gives_stumps() {
        let (x, y) = stump_data();
        let cfg = ForestConfig {
            n_trees: 10,
            feature_fraction: Some(1.0),
            ..ForestConfig::default()
        };
        let f = fit_forest(&x, &y, &cfg).unwrap();
        for t in &f.trees {
            assert_eq!(t.depth(), 1);
            assert_eq!(t.feature[0], 3);
        }
        let p = f.predict_proba(&x).unwrap();
        assert_eq!(crate::evalkit::roc_auc(&p, &y).unwrap(), 1.0);
    }

    #[test]
    fn duplicated_tree_keeps_mean() {
        let (x, y) = stump_data();
        let cfg = ForestConfig {
            n_trees: 1,
            feature_fraction: Some(1.0),
            ..ForestConfig::default()
        };
        let mut f = fit_forest(&x, &y, &cfg).unwrap();
        let a = f.predict_proba(&x).unwrap();
        f.trees.push(f.trees[0].clone());
        assert_eq!(a, f.predict_proba(&x).unwrap());
    }

    #[test]
    fn thread_count_does_not_change_forest() {
        let (x, y) = stump_data();
        let one = fit_forest(&x, &y, &ForestConfig { n_trees: 7, ..ForestConfig::default() }).unwrap();
        let many = fit_forest(&x, &y, &ForestConfig { n_trees: 7, threads: 3, ..ForestConfig::default() }).unwrap();
        assert_eq!(one.trees, many.trees);
    }

    #[test]
    fn fit_errors() {
        let (x, _) = stump_data();
        assert!(matches!(fit_forest(&x, &[true; 40], &ForestConfig::default()), Err(BaselineError::OneClassOnly)));
        let mut one = BinaryFeatures::new(8);
        one.push_row([1]).unwrap();
        assert!(matches!(fit_forest(&one, &[true], &ForestConfig::default()), Err(BaselineError::EmptyData)));
        let f = fit_forest(&x, &stump_data().1, &ForestConfig { n_trees: 2, ..ForestConfig::default() }).unwrap();
        assert!(matches!(f.predict_proba(&BinaryFeatures::new(9)), Err(BaselineError::Shape { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (x, y) = stump_data();
        let f = fit_forest(&x, &y, &ForestConfig { n_trees: 5, ..ForestConfig::default() }).unwrap();
        let mut buf = Vec::new();
        f.save(&mut buf).unwrap();
        assert_eq!(&buf[..5], FOREST_MAGIC);
        assert_eq!(ForestModel::load(&buf[..]).unwrap(), f);
        assert!(ForestModel::load(&buf[..20]).is_err());
    }
}
