//! Bipartition of the label's inadmissible parents into two blocks with
//! small cross dependence given the context attributes.
//!
//! The cross dependence of a candidate split is approximated by the sum of
//! pairwise conditional mutual informations, read from a matrix computed once
//! up front. A seeded random split is improved by the best single move, or,
//! when no move improves, by the best swap, until the relative gain drops
//! below `epsilon`.

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::stats::{cmi_codes, strata_of};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Latent-state count; also the minimum block size.
    pub tau: usize,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub left: Vec<String>,
    pub right: Vec<String>,
    /// Pairwise-CMI cross objective of the returned split, in bits.
    pub objective: f64,
    /// Block-size floor actually enforced (smaller than the requested tau
    /// when there were too few attributes).
    pub effective_tau: usize,
}

impl Partition {
    pub fn tau_reduced(&self, requested: usize) -> bool {
        self.effective_tau < requested
    }
}

/// Objective values of the starting split and of every accepted update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionTrace {
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

/// `max(1, floor(m / 2))` when `m < 2·tau`, else `tau`.
pub fn effective_tau(m: usize, tau: usize) -> usize {
    if m < 2 * tau {
        (m / 2).max(1)
    } else {
        tau
    }
}

/// Loop cap `10·ceil((1/ε)·ln(1/ε))`.
pub fn iteration_cap(epsilon: f64) -> usize {
    (10.0 * ((1.0 / epsilon) * (1.0 / epsilon).ln()).ceil()).max(10.0) as usize
}

/// Pairwise conditional mutual information I(a;b|Z) for every ordered pair of
/// attributes; the diagonal is zero.
#[derive(Debug, Clone)]
pub struct CmiMatrix {
    pub names: Vec<String>,
    values: Vec<f64>,
}

impl CmiMatrix {
    pub fn compute<S: AsRef<str>>(ds: &Dataset, attrs: &[String], z: &[S]) -> Result<Self> {
        let m = attrs.len();
        let idx = ds.indices_of(attrs)?;
        let (strata, nz) = strata_of(ds, z)?;
        let values: Vec<f64> = (0..m * m)
            .into_par_iter()
            .map(|cell| {
                let (i, j) = (cell / m, cell % m);
                if i == j {
                    return 0.0;
                }
                let (a, b) = (idx[i], idx[j]);
                cmi_codes(
                    ds.column_at(a),
                    ds.domain_at(a).size(),
                    ds.column_at(b),
                    ds.domain_at(b).size(),
                    &strata,
                    nz,
                )
            })
            .collect();
        Ok(Self {
            names: attrs.to_vec(),
            values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.names.len() + j]
    }

    /// Σ_{i left} Σ_{j right} M[i][j], both in attribute order.
    pub fn cross(&self, in_left: &[bool]) -> f64 {
        let m = self.names.len();
        let mut total = 0.0;
        for i in (0..m).filter(|&i| in_left[i]) {
            for j in (0..m).filter(|&j| !in_left[j]) {
                total += self.get(i, j);
            }
        }
        total
    }
}

fn sizes(in_left: &[bool]) -> (usize, usize) {
    let l = in_left.iter().filter(|&&b| b).count();
    (l, in_left.len() - l)
}

/// Hill-climbing split of `ic` given the context `z`.
pub fn partition_ic<S: AsRef<str>>(
    ds: &Dataset,
    ic: &[String],
    z: &[S],
    cfg: &PartitionConfig,
) -> Result<Partition> {
    partition_ic_traced(ds, ic, z, cfg).map(|(p, _)| p)
}

pub fn partition_ic_traced<S: AsRef<str>>(
    ds: &Dataset,
    ic: &[String],
    z: &[S],
    cfg: &PartitionConfig,
) -> Result<(Partition, PartitionTrace)> {
    if cfg.tau == 0 {
        return Err(Error::Config("tau must be at least 1".into()));
    }
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(Error::Config(format!(
            "epsilon must lie in (0, 1), got {}",
            cfg.epsilon
        )));
    }
    let m = ic.len();
    if m < 2 {
        return Err(Error::Partition(format!(
            "need at least 2 attributes, got {m}"
        )));
    }
    if let Some(bad) = z.iter().find(|n| ic.iter().any(|a| a == n.as_ref())) {
        return Err(Error::Overlap(format!(
            "`{}` is both partitioned and conditioned on",
            bad.as_ref()
        )));
    }
    let tau = effective_tau(m, cfg.tau);
    if tau < cfg.tau {
        log::warn!(
            "only {m} attributes to split; latent-state floor reduced from {} to {tau}",
            cfg.tau
        );
    }
    if m < 2 * tau {
        return Err(Error::Partition(format!(
            "{m} attributes cannot form two blocks of size {tau}"
        )));
    }
    let matrix = CmiMatrix::compute(ds, ic, z)?;
    let (in_left, trace) = hill_climb(&matrix, tau, cfg.epsilon, cfg.seed);
    let objective = matrix.cross(&in_left);
    let pick = |side: bool| -> Vec<String> {
        ic.iter()
            .zip(&in_left)
            .filter(|(_, &l)| l == side)
            .map(|(n, _)| n.clone())
            .collect()
    };
    Ok((
        Partition {
            left: pick(true),
            right: pick(false),
            objective,
            effective_tau: tau,
        },
        trace,
    ))
}

/// Seeded random split repaired to the size floor.
pub fn initial_split(m: usize, tau: usize, seed: u64) -> Vec<bool> {
    let mut rng = stage_rng(seed, "partition");
    let mut in_left: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
    loop {
        let (l, r) = sizes(&in_left);
        if l >= tau && r >= tau {
            return in_left;
        }
        let from_left = l > r;
        let candidates: Vec<usize> = (0..m).filter(|&i| in_left[i] == from_left).collect();
        let &v = candidates.choose(&mut rng).expect("larger side is nonempty");
        in_left[v] = !from_left;
    }
}

/// Runs the move/swap search on a precomputed matrix.
pub fn hill_climb(matrix: &CmiMatrix, tau: usize, epsilon: f64, seed: u64) -> (Vec<bool>, PartitionTrace) {
    let m = matrix.names.len();
    let mut in_left = initial_split(m, tau, seed);
    let mut current = matrix.cross(&in_left);
    let start = current;
    let mut trace = PartitionTrace {
        objectives: vec![current],
        iterations: 0,
    };
    let cap = iteration_cap(epsilon);
    while trace.iterations < cap {
        trace.iterations += 1;
        let mut best_gain = 0.0;
        let mut best: Option<(Vec<bool>, f64)> = None;
        let feasible = |cand: &[bool]| {
            let (l, r) = sizes(cand);
            l >= tau && r >= tau
        };

        for v in 0..m {
            let mut cand = in_left.clone();
            cand[v] = !cand[v];
            if !feasible(&cand) {
                continue;
            }
            let value = matrix.cross(&cand);
            let gain = current - value;
            if gain > best_gain {
                best_gain = gain;
                best = Some((cand, value));
            }
        }

        if best.is_none() {
            for u in (0..m).filter(|&u| in_left[u]) {
                for v in (0..m).filter(|&v| !in_left[v]) {
                    let mut cand = in_left.clone();
                    cand[u] = false;
                    cand[v] = true;
                    if !feasible(&cand) {
                        continue;
                    }
                    let value = matrix.cross(&cand);
                    let gain = current - value;
                    if gain > best_gain {
                        best_gain = gain;
                        best = Some((cand, value));
                    }
                }
            }
        }

        if best_gain < epsilon * current || current <= epsilon * start {
            break;
        }
        let Some((cand, value)) = best else { break };
        in_left = cand;
        current = value;
        trace.objectives.push(current);
    }
    (in_left, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CategoricalDomain;
    use crate::stats::pairwise_cmi_objective;
    use rand::SeedableRng;

    fn random_ds(seed: u64, n: usize, names: &[&str]) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<u32>> = Vec::new();
        for k in 0..names.len() {
            // Each column copies its predecessor with some probability, so
            // neighbours are dependent.
            let col: Vec<u32> = (0..n)
                .map(|r| {
                    if k > 0 && rng.random_bool(0.6) {
                        cols[k - 1][r]
                    } else {
                        rng.random_range(0..3)
                    }
                })
                .collect();
            cols.push(col);
        }
        let doms = names
            .iter()
            .map(|n| CategoricalDomain::numbered(*n, 3).unwrap())
            .collect();
        Dataset::new(cols, doms).unwrap()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn two_attributes_split_trivially() {
        let ds = random_ds(1, 500, &["a", "b", "z"]);
        for seed in 0..5 {
            let p = partition_ic(
                &ds,
                &names(&["a", "b"]),
                &["z"],
                &PartitionConfig { tau: 1, epsilon: 1e-5, seed },
            )
            .unwrap();
            let mut sides = vec![p.left.clone(), p.right.clone()];
            sides.sort();
            assert_eq!(sides, vec![names(&["a"]), names(&["b"])]);
            let expected = crate::stats::cond_mutual_info(&ds, "a", "b", &["z"]).unwrap();
            assert!((p.objective - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let ds = random_ds(1, 100, &["a", "b", "z"]);
        let cfg = PartitionConfig { tau: 1, epsilon: 1e-5, seed: 0 };
        assert!(matches!(
            partition_ic(&ds, &names(&["a"]), &["z"], &cfg),
            Err(Error::Partition(_))
        ));
        assert!(partition_ic(&ds, &names(&["a", "b"]), &["a"], &cfg).is_err());
        let bad = PartitionConfig { epsilon: 0.0, ..cfg };
        assert!(partition_ic(&ds, &names(&["a", "b"]), &["z"], &bad).is_err());
    }

    #[test]
    fn tau_is_reduced_when_too_few_attributes() {
        assert_eq!(effective_tau(5, 3), 2);
        assert_eq!(effective_tau(3, 2), 1);
        assert_eq!(effective_tau(6, 3), 3);
        let ds = random_ds(2, 300, &["a", "b", "c", "z"]);
        let p = partition_ic(
            &ds,
            &names(&["a", "b", "c"]),
            &["z"],
            &PartitionConfig { tau: 3, epsilon: 1e-5, seed: 0 },
        )
        .unwrap();
        assert_eq!(p.effective_tau, 1);
        assert!(p.tau_reduced(3));
    }

    #[test]
    fn output_respects_floor_and_matches_objective() {
        let all = ["a", "b", "c", "d", "e", "f", "g", "z"];
        let ds = random_ds(3, 2_000, &all);
        let ic = names(&all[..7]);
        for seed in 0..10 {
            let cfg = PartitionConfig { tau: 2, epsilon: 1e-5, seed };
            let (p, trace) = partition_ic_traced(&ds, &ic, &["z"], &cfg).unwrap();
            assert!(p.left.len() >= 2 && p.right.len() >= 2);
            assert_eq!(p.left.len() + p.right.len(), 7);
            let direct = pairwise_cmi_objective(&ds, &p.left, &p.right, &names(&["z"])).unwrap();
            assert!((p.objective - direct).abs() < 1e-12);
            assert!(trace.objectives.windows(2).all(|w| w[1] < w[0]));
            assert!(trace.iterations <= iteration_cap(1e-5));
            let again = partition_ic(&ds, &ic, &["z"], &cfg).unwrap();
            assert_eq!(p, again);
        }
    }

    #[test]
    fn initial_split_is_feasible() {
        for seed in 0..50 {
            let s = initial_split(7, 3, seed);
            let (l, r) = sizes(&s);
            assert!(l >= 3 && r >= 3);
        }
    }
}
