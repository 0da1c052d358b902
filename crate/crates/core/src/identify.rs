//! Finds the inadmissible attributes with a direct edge into the label.
//!
//! Each inadmissible attribute is first tested for marginal independence from
//! the label; survivors are then tested conditionally on every subset of the
//! other attributes of size `1..=alpha`, and dropped at the first subset that
//! renders them independent.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ci_tests::{chi_square_test, g_test_conditional, DEFAULT_SIGNIFICANCE};
use crate::dataset::{Dataset, RoleSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    /// Largest conditioning-set size.
    pub alpha: usize,
    pub significance: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            alpha: 2,
            significance: DEFAULT_SIGNIFICANCE,
        }
    }
}

/// Why an attribute was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub attribute: String,
    /// Conditioning set that separated it from the label (empty for the
    /// marginal test).
    pub given: Vec<String>,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyOutcome {
    /// Surviving attributes, in schema order.
    pub ic: Vec<String>,
    pub removed: Vec<Removal>,
    /// Tests executed per inadmissible attribute.
    pub tests_by_attribute: BTreeMap<String, usize>,
    /// G-tests whose strata were all too sparse (counted as dependence).
    pub insufficient_tests: usize,
}

impl IdentifyOutcome {
    pub fn tests_run(&self) -> usize {
        self.tests_by_attribute.values().sum()
    }
}

/// Size-`m` subsets of `items`, lexicographic by position.
pub fn combinations<T: Clone>(items: &[T], m: usize) -> Vec<Vec<T>> {
    let n = items.len();
    if m > n {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i].clone()).collect());
        let mut k = m;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if idx[k] != k + n - m {
                break;
            }
            if k == 0 {
                return out;
            }
        }
        idx[k] += 1;
        for j in k + 1..m {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Upper bound on tests for one surviving attribute among `d` attributes.
pub fn test_count_bound(d: usize, alpha: usize) -> usize {
    let pool = d.saturating_sub(2);
    (0..=alpha).map(|m| binomial(pool, m)).sum()
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

enum Verdict {
    Keep,
    Drop(Removal),
}

struct AttributeRun {
    verdict: Verdict,
    tests: usize,
    insufficient: usize,
}

fn test_attribute(
    ds: &Dataset,
    x: &str,
    label: &str,
    m: usize,
    cfg: &IdentifyConfig,
) -> Result<AttributeRun> {
    if m == 0 {
        let r = chi_square_test(ds, x, label, cfg.significance)?;
        let verdict = if r.independent {
            Verdict::Drop(Removal {
                attribute: x.to_owned(),
                given: Vec::new(),
                p_value: r.p_value,
            })
        } else {
            Verdict::Keep
        };
        return Ok(AttributeRun {
            verdict,
            tests: 1,
            insufficient: 0,
        });
    }
    let pool: Vec<&str> = ds.names().filter(|n| *n != x && *n != label).collect();
    let mut run = AttributeRun {
        verdict: Verdict::Keep,
        tests: 0,
        insufficient: 0,
    };
    for z in combinations(&pool, m) {
        run.tests += 1;
        match g_test_conditional(ds, x, label, &z, cfg.significance) {
            Ok(r) if r.independent => {
                run.verdict = Verdict::Drop(Removal {
                    attribute: x.to_owned(),
                    given: z.iter().map(|s| (*s).to_owned()).collect(),
                    p_value: r.p_value,
                });
                break;
            }
            Ok(_) => {}
            Err(Error::InsufficientData { .. }) => run.insufficient += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

/// Inadmissible attributes that remain dependent on the label under every
/// conditioning set of size at most `cfg.alpha`.
pub fn identify_ic(ds: &Dataset, roles: &RoleSpec, cfg: &IdentifyConfig) -> Result<IdentifyOutcome> {
    roles.validate(ds)?;
    let mut ic: Vec<String> = roles.in_schema_order(ds, &[crate::dataset::Role::Inadmissible]);
    let mut outcome = IdentifyOutcome {
        ic: Vec::new(),
        removed: Vec::new(),
        tests_by_attribute: ic.iter().map(|n| (n.clone(), 0)).collect(),
        insufficient_tests: 0,
    };
    for m in 0..=cfg.alpha {
        if ic.is_empty() {
            break;
        }
        // Attributes are tested independently at a given level.
        let runs: Vec<Result<AttributeRun>> = ic
            .par_iter()
            .map(|x| test_attribute(ds, x, &roles.label, m, cfg))
            .collect();
        let mut next = Vec::with_capacity(ic.len());
        for (x, run) in ic.into_iter().zip(runs) {
            let run = run?;
            *outcome.tests_by_attribute.get_mut(&x).unwrap() += run.tests;
            outcome.insufficient_tests += run.insufficient;
            match run.verdict {
                Verdict::Keep => next.push(x),
                Verdict::Drop(r) => {
                    log::debug!("dropped `{}` given {:?} (p = {:.4})", x, r.given, r.p_value);
                    outcome.removed.push(r);
                }
            }
        }
        ic = next;
    }
    outcome.ic = ic;
    Ok(outcome)
}
