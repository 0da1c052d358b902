//! Evaluation: ratio of observational discrimination, latent/sensitive
//! dependence diagnostics, and a naive Bayes reference classifier with AUC.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ci_tests::{chi_square_table, DEFAULT_SIGNIFICANCE};
use crate::dataset::{Dataset, Role, RoleSpec};
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::stats::{nmi_codes, strata_of, ContingencyTable};

pub const DEFAULT_ROD_SMOOTHING: f64 = 0.5;
/// Additive smoothing of the reference classifier.
pub const LAPLACE: f64 = 1.0;

/// `|ln ROD|`: for every ordered pair of sensitive groups, the odds ratio of
/// a positive prediction averaged over admissible strata holding both groups;
/// ROD is the largest such average.
///
/// `sensitive` and `admissible` hold one group / stratum id per record.
pub fn rod(preds: &[bool], sensitive: &[u32], admissible: &[u32], smoothing: f64) -> Result<f64> {
    if preds.len() != sensitive.len() || preds.len() != admissible.len() {
        return Err(Error::Config("prediction and attribute lengths differ".into()));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::Config(format!("smoothing must be >= 0, got {smoothing}")));
    }
    // (stratum, group) -> [negatives, positives]
    let mut counts: BTreeMap<(u32, u32), [f64; 2]> = BTreeMap::new();
    for ((&p, &s), &a) in preds.iter().zip(sensitive).zip(admissible) {
        counts.entry((a, s)).or_default()[usize::from(p)] += 1.0;
    }
    let groups: Vec<u32> = {
        let mut g: Vec<u32> = sensitive.to_vec();
        g.sort_unstable();
        g.dedup();
        g
    };
    if groups.len() < 2 {
        return Err(Error::UndefinedRod);
    }
    let mut strata: BTreeMap<u32, BTreeMap<u32, [f64; 2]>> = BTreeMap::new();
    for (&(a, s), &c) in &counts {
        strata.entry(a).or_default().insert(s, c);
    }
    let odds = |c: &[f64; 2]| (c[1] + smoothing) / (c[0] + smoothing);
    let mut best: Option<f64> = None;
    for &s0 in &groups {
        for &s1 in &groups {
            if s0 == s1 {
                continue;
            }
            let mut sum = 0.0;
            let mut used = 0usize;
            for by_group in strata.values() {
                let (Some(c0), Some(c1)) = (by_group.get(&s0), by_group.get(&s1)) else {
                    continue;
                };
                let ratio = odds(c0) / odds(c1);
                if ratio.is_finite() && ratio > 0.0 {
                    sum += ratio;
                    used += 1;
                }
            }
            if used > 0 {
                let avg = sum / used as f64;
                best = Some(best.map_or(avg, |b: f64| b.max(avg)));
            }
        }
    }
    best.map(|r| r.ln().abs()).ok_or(Error::UndefinedRod)
}

/// [`rod`] with groups and strata taken from the roles' sensitive and
/// admissible attributes of `ds`.
pub fn rod_for(preds: &[bool], ds: &Dataset, roles: &RoleSpec, smoothing: f64) -> Result<f64> {
    let s = roles.in_schema_order(ds, &[Role::Sensitive]);
    if s.is_empty() {
        return Err(Error::UndefinedRod);
    }
    let a = roles.in_schema_order(ds, &[Role::Admissible]);
    let (groups, _) = strata_of(ds, &s)?;
    let (strata, _) = strata_of(ds, &a)?;
    rod(preds, &groups, &strata, smoothing)
}

/// Dependence between the latent column and one sensitive grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDependence {
    pub nmi: f64,
    pub chi2_statistic: f64,
    pub chi2_dof: u64,
    pub chi2_p: f64,
}

fn dependence(latent: &[u32], tau: usize, codes: &[u32], k: usize) -> LatentDependence {
    let table = ContingencyTable::from_columns(&[latent, codes], &[tau, k]);
    let t = chi_square_table(&table, DEFAULT_SIGNIFICANCE);
    LatentDependence {
        nmi: nmi_codes(latent, tau, codes, k),
        chi2_statistic: t.statistic,
        chi2_dof: t.dof,
        chi2_p: t.p_value,
    }
}

/// Name of the joint sensitive grouping in diagnostics.
pub fn joint_name(sensitive: &[String]) -> String {
    sensitive.join("*")
}

/// NMI and chi-square p-value between `latent` and every sensitive attribute,
/// plus their joint configuration when there is more than one.
pub fn latent_sensitive_diagnostics(
    latent: &[u32],
    tau: usize,
    ds: &Dataset,
    sensitive: &[String],
) -> Result<BTreeMap<String, LatentDependence>> {
    if latent.len() != ds.n_records() {
        return Err(Error::Config("latent column length differs from the dataset".into()));
    }
    if let Some(&bad) = latent.iter().find(|&&l| l as usize >= tau) {
        return Err(Error::Config(format!("latent state {bad} out of range for tau = {tau}")));
    }
    let mut out = BTreeMap::new();
    for name in sensitive {
        let i = ds.index_of(name)?;
        let dep = dependence(latent, tau, ds.column_at(i), ds.domain_at(i).size());
        out.insert(name.clone(), dep);
    }
    if sensitive.len() > 1 {
        let (ids, k) = strata_of(ds, sensitive)?;
        out.insert(joint_name(sensitive), dependence(latent, tau, &ids, k));
    }
    Ok(out)
}

/// Area under the ROC curve by the rank statistic, ties sharing their mean
/// rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config("score and label lengths differ".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Config("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let pos = order[i..=j].iter().filter(|&&r| labels[r]).count();
        rank_sum += mean_rank * pos as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Categorical naive Bayes over every non-label attribute. Categories are
/// matched by label text, so train and test may be encoded separately.
#[derive(Debug, Clone)]
pub struct NaiveBayes {
    features: Vec<String>,
    /// Per feature: category label -> [ln P(v | neg), ln P(v | pos)].
    tables: Vec<BTreeMap<String, [f64; 2]>>,
    log_prior: [f64; 2],
    pub positive_label: String,
    pub negative_label: String,
}

/// Positive and negative class labels: the label domain must be binary, and
/// the lexicographically larger label is positive.
fn class_labels(ds: &Dataset, label: &str) -> Result<(String, String)> {
    let dom = ds.domain(label)?;
    if dom.size() != 2 {
        return Err(Error::DegenerateLabel {
            name: label.to_owned(),
            size: dom.size(),
        });
    }
    Ok((dom.label(1).to_owned(), dom.label(0).to_owned()))
}

impl NaiveBayes {
    pub fn fit(train: &Dataset, label: &str) -> Result<Self> {
        let (positive_label, negative_label) = class_labels(train, label)?;
        let y = train.column(label)?;
        let n_pos = y.iter().filter(|&&v| v == 1).count() as f64;
        let n_neg = y.len() as f64 - n_pos;
        let n = y.len() as f64;
        let log_prior = [
            ((n_neg + LAPLACE) / (n + 2.0 * LAPLACE)).ln(),
            ((n_pos + LAPLACE) / (n + 2.0 * LAPLACE)).ln(),
        ];
        let features: Vec<String> = train.names().filter(|n| *n != label).map(str::to_owned).collect();
        let tables = features
            .iter()
            .map(|f| {
                let i = train.index_of(f).expect("feature exists");
                let dom = train.domain_at(i);
                let k = dom.size();
                let mut c = vec![[0.0f64; 2]; k];
                for (&v, &cls) in train.column_at(i).iter().zip(y) {
                    c[v as usize][cls as usize] += 1.0;
                }
                let denom = [n_neg + LAPLACE * k as f64, n_pos + LAPLACE * k as f64];
                (0..k)
                    .map(|v| {
                        let lp = [
                            ((c[v][0] + LAPLACE) / denom[0]).ln(),
                            ((c[v][1] + LAPLACE) / denom[1]).ln(),
                        ];
                        (dom.label(v as u32).to_owned(), lp)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            features,
            tables,
            log_prior,
            positive_label,
            negative_label,
        })
    }

    /// P(positive | record) for every record of `test`. Unseen categories
    /// contribute equally to both classes.
    pub fn score(&self, test: &Dataset) -> Result<Vec<f64>> {
        let mut log_odds = vec![self.log_prior[1] - self.log_prior[0]; test.n_records()];
        for (f, table) in self.features.iter().zip(&self.tables) {
            let i = test.index_of(f)?;
            let dom = test.domain_at(i);
            let by_code: Vec<f64> = dom
                .labels()
                .iter()
                .map(|l| table.get(l).map_or(0.0, |lp| lp[1] - lp[0]))
                .collect();
            for (acc, &v) in log_odds.iter_mut().zip(test.column_at(i)) {
                *acc += by_code[v as usize];
            }
        }
        Ok(log_odds.into_iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
    }

    /// True labels of `test` as positives.
    pub fn truth(&self, test: &Dataset, label: &str) -> Result<Vec<bool>> {
        let i = test.index_of(label)?;
        let dom = test.domain_at(i);
        let map: Vec<bool> = dom
            .labels()
            .iter()
            .map(|l| {
                if *l == self.positive_label {
                    Ok(true)
                } else if *l == self.negative_label {
                    Ok(false)
                } else {
                    Err(Error::Config(format!("test label `{l}` unseen in training")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(test.column_at(i).iter().map(|&v| map[v as usize]).collect())
    }
}

/// Classifier output on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Classified {
    pub auc: f64,
    pub scores: Vec<f64>,
    pub predictions: Vec<bool>,
    pub truth: Vec<bool>,
}

/// Fits the reference classifier on `train` and scores `test`.
pub fn train_eval_reference_classifier(
    train: &Dataset,
    test: &Dataset,
    roles: &RoleSpec,
) -> Result<Classified> {
    let model = NaiveBayes::fit(train, &roles.label)?;
    let scores = model.score(test)?;
    let truth = model.truth(test, &roles.label)?;
    let auc = auc(&scores, &truth)?;
    let predictions = scores.iter().map(|&s| s >= 0.5).collect();
    Ok(Classified {
        auc,
        scores,
        predictions,
        truth,
    })
}

/// Seeded `k`-fold assignment: a shuffled record order dealt round-robin.
pub fn kfold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("cannot split {n} records into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(seed, "folds"));
    let mut fold = vec![0; n];
    for (pos, &r) in order.iter().enumerate() {
        fold[r] = pos % k;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub seed: u64,
    pub folds: Option<usize>,
    pub fold_sizes: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub rod_smoothing: f64,
    pub positive_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rod_abs_log: f64,
    pub auc: f64,
    pub auc_by_fold: Vec<f64>,
    pub nmi_by_sensitive: BTreeMap<String, f64>,
    pub chi2_p_by_sensitive: BTreeMap<String, f64>,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub fn attach_latent(&mut self, diag: &BTreeMap<String, LatentDependence>) {
        for (name, d) in diag {
            self.nmi_by_sensitive.insert(name.clone(), d.nmi);
            self.chi2_p_by_sensitive.insert(name.clone(), d.chi2_p);
        }
    }
}

/// Train on `train`, test on `test`; ROD is measured on the test
/// predictions.
pub fn evaluate_split(
    train: &Dataset,
    test: &Dataset,
    roles: &RoleSpec,
    rod_smoothing: f64,
    seed: u64,
) -> Result<EvalReport> {
    let out = train_eval_reference_classifier(train, test, roles)?;
    let rod_abs_log = rod_for(&out.predictions, test, roles, rod_smoothing)?;
    Ok(EvalReport {
        rod_abs_log,
        auc: out.auc,
        auc_by_fold: Vec::new(),
        nmi_by_sensitive: BTreeMap::new(),
        chi2_p_by_sensitive: BTreeMap::new(),
        metadata: EvalMetadata {
            seed,
            folds: None,
            fold_sizes: Vec::new(),
            n_train: train.n_records(),
            n_test: test.n_records(),
            rod_smoothing,
            positive_label: class_labels(train, &roles.label)?.0,
        },
    })
}

/// Seeded `k`-fold cross-validation on one dataset. AUC is averaged over
/// folds; ROD uses the pooled out-of-fold predictions.
pub fn cross_validate(
    ds: &Dataset,
    roles: &RoleSpec,
    folds: usize,
    rod_smoothing: f64,
    seed: u64,
) -> Result<EvalReport> {
    let assign = kfold_assignment(ds.n_records(), folds, seed)?;
    let mut predictions = vec![false; ds.n_records()];
    let mut auc_by_fold = Vec::with_capacity(folds);
    let mut fold_sizes = Vec::with_capacity(folds);
    for f in 0..folds {
        let (test_rows, train_rows): (Vec<usize>, Vec<usize>) =
            (0..ds.n_records()).partition(|&r| assign[r] == f);
        let out = train_eval_reference_classifier(
            &ds.take_rows(&train_rows),
            &ds.take_rows(&test_rows),
            roles,
        )?;
        for (&r, &p) in test_rows.iter().zip(&out.predictions) {
            predictions[r] = p;
        }
        auc_by_fold.push(out.auc);
        fold_sizes.push(test_rows.len());
    }
    let auc = auc_by_fold.iter().sum::<f64>() / folds as f64;
    Ok(EvalReport {
        rod_abs_log: rod_for(&predictions, ds, roles, rod_smoothing)?,
        auc,
        auc_by_fold,
        nmi_by_sensitive: BTreeMap::new(),
        chi2_p_by_sensitive: BTreeMap::new(),
        metadata: EvalMetadata {
            seed,
            folds: Some(folds),
            fold_sizes,
            n_train: ds.n_records(),
            n_test: ds.n_records(),
            rod_smoothing,
            positive_label: class_labels(ds, &roles.label)?.0,
        },
    })
}
