use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitPlan {
    Folds { k: usize, assignment: Vec<usize> },
    Temporal(TemporalSplit),
}

impl SplitPlan {
    /// (train, test) row indices for fold `f` of a K-fold plan.
    pub fn fold(&self, f: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            SplitPlan::Folds { k, assignment } if f < *k => {
                let (test, train): (Vec<usize>, Vec<usize>) = (0..assignment.len()).partition(|&i| assignment[i] == f);
                Some((train, test))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub cutoff_year: i32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Test rows by year.
    pub buckets: BTreeMap<i32, Vec<usize>>,
    pub warning: Option<String>,
}

/// Shuffles each class with the seed and deals rows round-robin so that every
/// fold holds floor or ceil of each class's share.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<SplitPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::Parameter("k must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.len() < k || neg.len() < k {
        return Err(EvalError::TooFewSamples(format!(
            "{} positives and {} negatives for {k} folds",
            pos.len(),
            neg.len()
        )));
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut assignment = vec![0; labels.len()];
    for (j, &i) in pos.iter().chain(neg.iter()).enumerate() {
        assignment[i] = j % k;
    }
    Ok(SplitPlan::Folds { k, assignment })
}

/// Train on rows dated at or before the cutoff, test on later rows.
pub fn temporal_split(years: &[Option<i32>], cutoff_year: i32) -> Result<TemporalSplit, EvalError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut buckets: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, y) in years.iter().enumerate() {
        let y = y.ok_or(EvalError::MissingYear(i))?;
        if y <= cutoff_year {
            train.push(i);
        } else {
            test.push(i);
            buckets.entry(y).or_default().push(i);
        }
    }
    let warning = test
        .is_empty()
        .then(|| format!("no rows after cutoff year {cutoff_year}; test set is empty"));
    Ok(TemporalSplit {
        cutoff_year,
        train,
        test,
        buckets,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_folds() {
        let labels: Vec<bool> = (0..100).map(|i| i < 50).collect();
        let plan = stratified_kfold(&labels, 5, 3).unwrap();
        for f in 0..5 {
            let (train, test) = plan.fold(f).unwrap();
            assert_eq!(test.len(), 20);
            assert_eq!(test.iter().filter(|&&i| labels[i]).count(), 10);
            assert_eq!(train.len() + test.len(), 100);
        }
        assert_eq!(plan, stratified_kfold(&labels, 5, 3).unwrap());
        assert!(matches!(stratified_kfold(&labels[..53], 5, 3), Err(EvalError::TooFewSamples(_))));
    }

    #[test]
    fn temporal_buckets() {
        let years: Vec<Option<i32>> = (2018..=2024).map(Some).collect();
        let s = temporal_split(&years, 2020).unwrap();
        assert_eq!(s.buckets.keys().copied().collect::<Vec<_>>(), vec![2021, 2022, 2023, 2024]);
        assert!(s.train.iter().all(|i| !s.test.contains(i)));
        let s = temporal_split(&[Some(2019); 3], 2020).unwrap();
        assert!(s.test.is_empty() && s.warning.is_some());
        assert_eq!(temporal_split(&[Some(2019), None], 2020), Err(EvalError::MissingYear(1)));
    }
}
