//! Synthetic categorical data from a causal DAG.
//!
//! Records are drawn by ancestral sampling, each from its own random
//! substream, so output does not depend on the number of worker threads.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoricalDomain, Dataset, RoleSpec};
use crate::error::{Error, Result};
use crate::rng::{stage_rng, stage_seed, substream, StreamRng};

/// Smallest CPT cell before renormalization.
pub const CPT_FLOOR: f64 = 0.02;
/// In-degree cap for non-label nodes of random graphs.
pub const MAX_PARENTS: usize = 3;
/// In-degree cap for the label of random graphs, unless more direct
/// inadmissible parents are requested.
pub const MAX_LABEL_PARENTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub domain_size: usize,
    pub parents: Vec<String>,
    /// One row per parent configuration, row-major over `parents` (last
    /// parent varies fastest).
    pub cpt: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalDagSpec {
    pub nodes: Vec<NodeSpec>,
}

impl CausalDagSpec {
    fn index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect()
    }

    /// Checks names, CPT shapes and normalization; returns a topological
    /// order (stable with respect to declaration order).
    pub fn validate(&self) -> Result<Vec<usize>> {
        let idx = self.index();
        if idx.len() != self.nodes.len() {
            return Err(Error::Spec("duplicate node names".into()));
        }
        let mut parent_ids = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            if node.domain_size == 0 {
                return Err(Error::Spec(format!("`{}` has an empty domain", node.name)));
            }
            let mut ids = Vec::with_capacity(node.parents.len());
            let mut rows = 1usize;
            for p in &node.parents {
                let &j = idx
                    .get(p.as_str())
                    .ok_or_else(|| Error::Spec(format!("`{}` has unknown parent `{p}`", node.name)))?;
                ids.push(j);
                rows = rows
                    .checked_mul(self.nodes[j].domain_size)
                    .ok_or_else(|| Error::Spec(format!("CPT of `{}` too large", node.name)))?;
            }
            if node.cpt.len() != rows {
                return Err(Error::Spec(format!(
                    "`{}` has {} CPT rows, expected {rows}",
                    node.name,
                    node.cpt.len()
                )));
            }
            for row in &node.cpt {
                let sum: f64 = row.iter().sum();
                if row.len() != node.domain_size
                    || row.iter().any(|p| !(*p >= 0.0))
                    || (sum - 1.0).abs() > 1e-12
                {
                    return Err(Error::Spec(format!("malformed CPT row for `{}`", node.name)));
                }
            }
            parent_ids.push(ids);
        }
        // Kahn's algorithm, always taking the earliest ready node.
        let n = self.nodes.len();
        let mut indegree: Vec<usize> = parent_ids.iter().map(Vec::len).collect();
        let mut children = vec![Vec::new(); n];
        for (i, ps) in parent_ids.iter().enumerate() {
            for &p in ps {
                children[p].push(i);
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Spec("parent lists contain a cycle".into()));
        }
        Ok(order)
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn draw(row: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // Rounding left `u` past the total: take the last possible state.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

/// Ancestral sample of `n` records.
pub fn generate(spec: &CausalDagSpec, n: usize, seed: u64) -> Result<Dataset> {
    let order = spec.validate()?;
    let idx = spec.index();
    let parents: Vec<Vec<usize>> = spec
        .nodes
        .iter()
        .map(|node| node.parents.iter().map(|p| idx[p.as_str()]).collect())
        .collect();
    let sizes: Vec<usize> = spec.nodes.iter().map(|n| n.domain_size).collect();
    let base = stage_seed(seed, "synth");
    let width = spec.nodes.len();
    let mut flat = vec![0u32; n * width];
    flat.par_chunks_mut(width.max(1))
        .enumerate()
        .for_each(|(r, row)| {
            let mut rng = substream(base, r as u64);
            for &i in &order {
                let cfg = parents[i]
                    .iter()
                    .fold(0usize, |acc, &p| acc * sizes[p] + row[p] as usize);
                let u: f64 = rng.random();
                row[i] = draw(&spec.nodes[i].cpt[cfg], u);
            }
        });
    let columns = (0..width)
        .map(|c| (0..n).map(|r| flat[r * width + c]).collect())
        .collect();
    let domains = spec
        .nodes
        .iter()
        .map(|node| CategoricalDomain::numbered(node.name.as_str(), node.domain_size))
        .collect::<Result<Vec<_>>>()?;
    Dataset::with_len(columns, domains, Some(n))
}

/// Dirichlet(1) row with the cell floor applied and renormalized.
pub fn dirichlet_row(k: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut row: Vec<f64> = (0..k).map(|_| rng.sample(Exp1)).collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p = (*p / total).max(CPT_FLOOR));
    normalize(&mut row);
    row
}

fn normalize(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    // Push the rounding residue into the largest cell.
    let residue = 1.0 - row.iter().sum::<f64>();
    if let Some(m) = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])) {
        row[m] += residue;
    }
}

fn random_cpt(domain: usize, parent_sizes: &[usize], rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let rows: usize = parent_sizes.iter().product();
    (0..rows).map(|_| dirichlet_row(domain, rng)).collect()
}

/// Role layout of a generated graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RolesTemplate {
    /// Seven nodes: S = {V0}, I = {V2, V4}, A = {V1, V3, V5}, label Y with
    /// parents V2, V3, V4, V5.
    Fig9,
    /// V0 sensitive, `inadmissible` random inadmissible nodes (`direct` of
    /// them label parents when edges are allowed), `additional` random
    /// additional nodes, the rest admissible; label last.
    Random {
        inadmissible: usize,
        additional: usize,
        #[serde(default = "default_direct")]
        direct: usize,
    },
}

fn default_direct() -> usize {
    2
}

/// Node names of an `n_attrs`-node graph: `V0..` then the label `Y`.
fn node_names(n_attrs: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..n_attrs - 1).map(|i| format!("V{i}")).collect();
    names.push("Y".into());
    names
}

fn build_spec(
    names: &[String],
    sizes: &[usize],
    parents: &[Vec<usize>],
    rng: &mut StreamRng,
) -> CausalDagSpec {
    let nodes = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let psizes: Vec<usize> = parents[i].iter().map(|&p| sizes[p]).collect();
            NodeSpec {
                name: name.clone(),
                domain_size: sizes[i],
                parents: parents[i].iter().map(|&p| names[p].clone()).collect(),
                cpt: random_cpt(sizes[i], &psizes, rng),
            }
        })
        .collect();
    CausalDagSpec { nodes }
}

/// Random DAG with Dirichlet CPTs and a role assignment. The label is
/// always binary; other nodes take `domain_size` values.
pub fn random_spec(
    n_attrs: usize,
    domain_size: usize,
    edge_density: f64,
    template: &RolesTemplate,
    seed: u64,
) -> Result<(CausalDagSpec, RoleSpec)> {
    if n_attrs < 4 {
        return Err(Error::Spec(format!("need at least 4 attributes, got {n_attrs}")));
    }
    if domain_size < 2 {
        return Err(Error::Spec("domain size must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&edge_density) {
        return Err(Error::Spec(format!("edge density {edge_density} outside [0, 1]")));
    }
    let mut rng = stage_rng(seed, "synth-spec");
    let names = node_names(n_attrs);
    let label = n_attrs - 1;
    let mut sizes = vec![domain_size; n_attrs];
    sizes[label] = 2;
    let v = |i: usize| names[i].clone();

    match template {
        RolesTemplate::Fig9 => {
            if n_attrs != 7 {
                return Err(Error::Spec("the fixed template has exactly 7 attributes".into()));
            }
            let parents = vec![
                vec![],
                vec![0],
                vec![0, 1],
                vec![1],
                vec![0, 3],
                vec![3],
                vec![2, 3, 4, 5],
            ];
            let spec = build_spec(&names, &sizes, &parents, &mut rng);
            let roles = RoleSpec {
                sensitive: vec![v(0)],
                inadmissible: vec![v(2), v(4)],
                admissible: vec![v(1), v(3), v(5)],
                additional: vec![],
                label: v(label),
            };
            Ok((spec, roles))
        }
        RolesTemplate::Random {
            inadmissible,
            additional,
            direct,
        } => {
            let pool = n_attrs - 2;
            if inadmissible + additional > pool {
                return Err(Error::Spec(format!(
                    "{inadmissible} inadmissible + {additional} additional exceed {pool} free attributes"
                )));
            }
            if *direct < 2 {
                return Err(Error::Spec("at least two direct label parents are required".into()));
            }
            if edge_density > 0.0 && inadmissible < direct {
                return Err(Error::Spec(format!(
                    "{direct} direct label parents need as many inadmissible attributes, got {inadmissible}"
                )));
            }
            let mut free: Vec<usize> = (1..=pool).collect();
            free.shuffle(&mut rng);
            let mut inad: Vec<usize> = free[..*inadmissible].to_vec();
            let mut addl: Vec<usize> = free[*inadmissible..inadmissible + additional].to_vec();
            let mut adm: Vec<usize> = free[inadmissible + additional..].to_vec();
            inad.sort_unstable();
            addl.sort_unstable();
            adm.sort_unstable();

            let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n_attrs];
            for (i, ps) in parents.iter_mut().enumerate().take(label) {
                let mut cands: Vec<usize> = (0..i).filter(|_| rng.random_bool(edge_density)).collect();
                cands.shuffle(&mut rng);
                cands.truncate(MAX_PARENTS);
                cands.sort_unstable();
                *ps = cands;
            }
            if edge_density > 0.0 {
                let forced: Vec<usize> = inad.choose_multiple(&mut rng, *direct).copied().collect();
                let mut others: Vec<usize> = (0..label)
                    .filter(|i| !forced.contains(i) && rng.random_bool(edge_density))
                    .collect();
                others.shuffle(&mut rng);
                others.truncate(MAX_LABEL_PARENTS.saturating_sub(forced.len()));
                let mut ps = forced;
                ps.extend(others);
                ps.sort_unstable();
                parents[label] = ps;
            }
            let spec = build_spec(&names, &sizes, &parents, &mut rng);
            let roles = RoleSpec {
                sensitive: vec![v(0)],
                inadmissible: inad.into_iter().map(v).collect(),
                admissible: adm.into_iter().map(v).collect(),
                additional: addl.into_iter().map(v).collect(),
                label: v(label),
            };
            Ok((spec, roles))
        }
    }
}
