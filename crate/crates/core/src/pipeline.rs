//! End-to-end repair: identify the label's inadmissible parents, split them,
//! fit the latent model, and resample a dataset of the same size from it with
//! the latent column marginalized out.
//!
//! Sampling order per record: a bootstrap row supplies every attribute
//! outside the two blocks and the label; then the latent state, both blocks,
//! and the label are drawn from the fitted conditionals.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoricalDomain, Dataset, Role, RoleSpec};
use crate::error::{Error, Result};
use crate::identify::{identify_ic, IdentifyConfig, IdentifyOutcome};
use crate::latent_em::{self, EmConfig, PolicyParams, SparseCpt};
use crate::partition::{partition_ic, Partition, PartitionConfig, DEFAULT_EPSILON};
use crate::rng::{stage_seed, substream, StreamRng};

/// Name of the latent column kept by `keep_latent`.
pub const LATENT_COLUMN: &str = "_latent";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub identify: IdentifyConfig,
    pub tau: usize,
    pub epsilon: f64,
    pub n_iter: usize,
    pub eta: f64,
    pub smoothing: f64,
    pub seed: u64,
    pub restarts: usize,
    /// Fail instead of lowering tau when the split cannot support it.
    pub strict_tau: bool,
    /// Append the sampled latent state as a final column.
    pub keep_latent: bool,
    /// Record wall-clock stage timings in the report.
    pub timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            identify: IdentifyConfig::default(),
            tau: 2,
            epsilon: DEFAULT_EPSILON,
            n_iter: latent_em::DEFAULT_MAX_ITER,
            eta: latent_em::DEFAULT_ETA,
            smoothing: latent_em::DEFAULT_SMOOTHING,
            seed: 0,
            restarts: 1,
            strict_tau: false,
            keep_latent: false,
            timings: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.identify.significance > 0.0 && self.identify.significance < 1.0) {
            return bad(format!("significance {} outside (0, 1)", self.identify.significance));
        }
        if self.tau == 0 {
            return Err(Error::TauBound { tau: 0, bound: 0 });
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon {} outside (0, 1)", self.epsilon));
        }
        if self.n_iter == 0 {
            return bad("n_iter must be at least 1".into());
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return bad(format!("smoothing must be >= 0, got {}", self.smoothing));
        }
        Ok(())
    }

    pub fn em_config(&self, tau: usize) -> EmConfig {
        EmConfig {
            tau,
            max_iter: self.n_iter,
            eta: self.eta,
            seed: stage_seed(self.seed, "em"),
            smoothing: self.smoothing,
            restarts: self.restarts,
        }
    }

    pub fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            tau: self.tau,
            epsilon: self.epsilon,
            seed: stage_seed(self.seed, "partition"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSummary {
    pub tau: usize,
    pub iterations_run: usize,
    pub final_loglik: f64,
    pub loglik_trace: Vec<f64>,
}

/// Machine-readable record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub n_records: usize,
    pub identify: IdentifyOutcome,
    pub partition: Partition,
    pub requested_tau: usize,
    pub em: EmSummary,
    /// Factor lookups during sampling that used the latent-only backoff.
    pub fallbacks: usize,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

pub struct PipelineOutput {
    pub data: Dataset,
    pub params: PolicyParams,
    pub report: RunReport,
}

struct Timer {
    on: bool,
    stages: BTreeMap<String, f64>,
    start: Instant,
}

impl Timer {
    fn new(on: bool) -> Self {
        Self { on, stages: BTreeMap::new(), start: Instant::now() }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages
            .insert(stage.to_owned(), (now - self.start).as_secs_f64() * 1e3);
        self.start = now;
    }

    fn finish(self) -> Option<BTreeMap<String, f64>> {
        self.on.then_some(self.stages)
    }
}

/// Splits `ic` into two blocks; fewer than two attributes yield a single
/// (possibly empty) left block and no latent states.
pub fn split_ic(
    ds: &Dataset,
    roles: &RoleSpec,
    ic: &[String],
    cfg: &PipelineConfig,
    warnings: &mut Vec<String>,
) -> Result<Partition> {
    let part = if ic.len() < 2 {
        let msg = match ic.len() {
            0 => "no inadmissible parent of the label; refitting the label only".to_owned(),
            _ => format!("single inadmissible parent `{}`; latent state disabled", ic[0]),
        };
        log::warn!("{msg}");
        warnings.push(msg);
        Partition {
            left: ic.to_vec(),
            right: Vec::new(),
            objective: 0.0,
            effective_tau: 1,
        }
    } else {
        let z: Vec<String> = ds
            .names()
            .filter(|n| {
                matches!(
                    roles.role_of(n),
                    Some(Role::Sensitive | Role::Admissible | Role::Inadmissible)
                ) && !ic.iter().any(|a| a == n)
            })
            .map(str::to_owned)
            .collect();
        partition_ic(ds, ic, &z, &cfg.partition_config())?
    };
    if part.tau_reduced(cfg.tau) {
        if cfg.strict_tau {
            return Err(Error::TauBound {
                tau: cfg.tau,
                bound: part.left.len().min(part.right.len()),
            });
        }
        let msg = format!(
            "{} label parents support at most {} latent states; using {} instead of {}",
            ic.len(),
            part.effective_tau,
            part.effective_tau,
            cfg.tau
        );
        warnings.push(msg);
    }
    Ok(part)
}

/// Runs the full repair and returns the resampled dataset.
pub fn preprocess(ds: &Dataset, roles: &RoleSpec, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    roles.validate(ds)?;
    if ds.n_records() == 0 {
        return Err(Error::Empty("dataset has no records".into()));
    }
    if cfg.keep_latent && ds.index_of(LATENT_COLUMN).is_ok() {
        return Err(Error::Config(format!("input already has a `{LATENT_COLUMN}` column")));
    }
    let mut timer = Timer::new(cfg.timings);
    let mut warnings = Vec::new();

    let outcome = identify_ic(ds, roles, &cfg.identify)?;
    timer.lap("identify");
    log::info!("label parents among inadmissibles: {:?}", outcome.ic);

    let part = split_ic(ds, roles, &outcome.ic, cfg, &mut warnings)?;
    timer.lap("partition");

    let params = latent_em::estimate(ds, &part, roles, &cfg.em_config(part.effective_tau))?;
    timer.lap("estimate");
    log::info!(
        "EM: tau = {}, {} iterations, average log-likelihood {:.6}",
        params.tau,
        params.iterations_run,
        params.final_loglik
    );

    let (data, fallbacks) = sample(ds, &params, cfg.seed, cfg.keep_latent)?;
    timer.lap("sample");
    if fallbacks > 0 {
        let msg = format!("{fallbacks} sampling lookups used the latent-only backoff");
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let report = RunReport {
        version: REPORT_VERSION,
        seed: cfg.seed,
        n_records: data.n_records(),
        identify: outcome,
        partition: part,
        requested_tau: cfg.tau,
        em: EmSummary {
            tau: params.tau,
            iterations_run: params.iterations_run,
            final_loglik: params.final_loglik,
            loglik_trace: params.loglik_trace.clone(),
        },
        fallbacks,
        warnings,
        timings_ms: timer.finish(),
    };
    Ok(PipelineOutput { data, params, report })
}

fn draw_from(weights: impl Iterator<Item = (u32, f64)>, u: f64) -> Option<u32> {
    let mut acc = 0.0;
    let mut last = None;
    for (id, p) in weights {
        acc += p;
        if p > 0.0 {
            last = Some(id);
        }
        if u < acc {
            return Some(id);
        }
    }
    last
}

/// Draws a child configuration; returns its codes and whether the backoff was
/// used.
fn sample_child<'a>(
    cpt: &'a SparseCpt,
    parent: &[u32],
    state: usize,
    rng: &mut StreamRng,
) -> (&'a [u32], bool) {
    let u: f64 = rng.random();
    let (id, backoff) = match cpt.parent_id(parent) {
        Some(p) => (draw_from(cpt.conditional(p, state), u), false),
        None => (draw_from(cpt.backoff_conditional(state), u), true),
    };
    (cpt.child_codes(id.expect("conditionals are non-empty")), backoff)
}

fn draw_state(theta: &[f64], u: f64) -> usize {
    draw_from(theta.iter().copied().enumerate().map(|(l, p)| (l as u32, p)), u)
        .expect("theta is non-empty") as usize
}

/// Samples `|ds|` records from the fitted model. Returns the dataset and the
/// number of backoff lookups.
pub fn sample(
    ds: &Dataset,
    params: &PolicyParams,
    seed: u64,
    keep_latent: bool,
) -> Result<(Dataset, usize)> {
    let n = ds.n_records();
    let width = ds.n_attributes();
    let s = &params.structure;
    let x_cols = ds.indices_of(&params.x_block)?;
    let c1_cols = ds.indices_of(&s.block1)?;
    let c2_cols = ds.indices_of(&s.block2)?;
    let ctx_cols = ds.indices_of(&s.context)?;
    let lp_cols = ds.indices_of(&s.label_parents)?;
    let y_col = ds.index_of(&s.label)?;
    let row_width = width + usize::from(keep_latent);
    let base = stage_seed(seed, "sample");

    let mut flat = vec![0u32; n * row_width];
    let fallbacks: usize = flat
        .par_chunks_mut(row_width)
        .enumerate()
        .map(|(r, row)| {
            let mut rng = substream(base, r as u64);
            let src = rng.random_range(0..n);
            for &c in &x_cols {
                row[c] = ds.column_at(c)[src];
            }
            let state = draw_state(&params.theta_l, rng.random());
            let ctx: Vec<u32> = ctx_cols.iter().map(|&c| row[c]).collect();
            let mut used = 0;
            for (cpt, cols) in [(&params.cpt_c1, &c1_cols), (&params.cpt_c2, &c2_cols)] {
                let (codes, backoff) = sample_child(cpt, &ctx, state, &mut rng);
                used += usize::from(backoff);
                for (&c, &v) in cols.iter().zip(codes) {
                    row[c] = v;
                }
            }
            let lp: Vec<u32> = lp_cols.iter().map(|&c| row[c]).collect();
            let (codes, backoff) = sample_child(&params.cpt_y, &lp, state, &mut rng);
            used += usize::from(backoff);
            row[y_col] = codes[0];
            if keep_latent {
                row[width] = state as u32;
            }
            used
        })
        .sum();

    let mut columns: Vec<Vec<u32>> = (0..row_width)
        .map(|c| (0..n).map(|r| flat[r * row_width + c]).collect())
        .collect();
    let mut domains = ds.domains().to_vec();
    if keep_latent {
        domains.push(CategoricalDomain::numbered(LATENT_COLUMN, params.tau)?);
    }
    // Schema contract: same header and order as the input.
    debug_assert!(ds.names().eq(domains.iter().take(width).map(|d| d.attribute_name.as_str())));
    columns.shrink_to_fit();
    Ok((Dataset::with_len(columns, domains, Some(n))?, fallbacks))
}

/// Splits off the latent column added by `keep_latent`.
pub fn split_latent(ds: &Dataset) -> Result<(Dataset, Vec<u32>)> {
    let idx = ds.index_of(LATENT_COLUMN)?;
    let latent = ds.column_at(idx).to_vec();
    let keep: Vec<&str> = ds.names().filter(|n| *n != LATENT_COLUMN).collect();
    Ok((ds.project(&keep)?, latent))
}
