//! Plug-in information measures over encoded columns. All results are in bits.

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Dense count tensor over a tuple of categorical attributes, row-major with
/// the last dimension varying fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub dims: Vec<usize>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ContingencyTable {
    pub fn from_columns(columns: &[&[u32]], dims: &[usize]) -> Self {
        assert_eq!(columns.len(), dims.len());
        let cells: usize = dims.iter().product();
        let mut counts = vec![0u64; cells];
        let n = columns.first().map_or(0, |c| c.len());
        for r in 0..n {
            let mut idx = 0usize;
            for (col, &d) in columns.iter().zip(dims) {
                idx = idx * d + col[r] as usize;
            }
            counts[idx] += 1;
        }
        Self {
            dims: dims.to_vec(),
            total: n as u64,
            counts,
        }
    }

    /// Two-way table from explicit rows of counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let counts: Vec<u64> = rows.iter().flatten().copied().collect();
        assert_eq!(counts.len(), r * c, "ragged table");
        Self {
            dims: vec![r, c],
            total: counts.iter().sum(),
            counts,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.dims[1] + j]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        let c = self.dims[1];
        self.counts.chunks(c).map(|row| row.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let c = self.dims[1];
        let mut sums = vec![0u64; c];
        for row in self.counts.chunks(c) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }
}

fn require_records(ds: &Dataset) -> Result<()> {
    if ds.n_records() == 0 {
        Err(Error::Empty("dataset has no records".into()))
    } else {
        Ok(())
    }
}

/// Entropy in bits of a count vector; zero counts contribute nothing.
pub fn entropy_of_counts(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn entropy_of_codes(codes: &[u32], k: usize) -> f64 {
    let mut counts = vec![0u64; k];
    for &c in codes {
        counts[c as usize] += 1;
    }
    entropy_of_counts(&counts)
}

pub fn entropy(ds: &Dataset, attr: &str) -> Result<f64> {
    require_records(ds)?;
    let i = ds.index_of(attr)?;
    Ok(entropy_of_codes(ds.column_at(i), ds.domain_at(i).size()))
}

/// H(X | Y).
pub fn cond_entropy(ds: &Dataset, x: &str, y: &str) -> Result<f64> {
    require_records(ds)?;
    let (xi, yi) = (ds.index_of(x)?, ds.index_of(y)?);
    let (kx, ky) = (ds.domain_at(xi).size(), ds.domain_at(yi).size());
    let t = ContingencyTable::from_columns(&[ds.column_at(yi), ds.column_at(xi)], &[ky, kx]);
    let n = t.total as f64;
    let h: f64 = t
        .counts
        .chunks(kx)
        .map(|row| {
            let ny: u64 = row.iter().sum();
            ny as f64 / n * entropy_of_counts(row)
        })
        .sum();
    Ok(h.max(0.0))
}

const DENSE_CELL_LIMIT: usize = 1 << 22;

/// Plug-in I(X;Y|Z) from coded columns, with `strata` holding dense ids
/// `0..n_strata` of the realized Z configurations.
///
/// Terms are summed stratum by stratum, then by x, then by y, so the result
/// does not depend on how the counts were gathered.
pub fn cmi_codes(
    x: &[u32],
    kx: usize,
    y: &[u32],
    ky: usize,
    strata: &[u32],
    n_strata: usize,
) -> f64 {
    let n = x.len();
    debug_assert!(y.len() == n && strata.len() == n);
    if n == 0 {
        return 0.0;
    }
    let mut n_z = vec![0u64; n_strata];
    let mut n_xz = vec![0u64; n_strata * kx];
    let mut n_yz = vec![0u64; n_strata * ky];
    for r in 0..n {
        let z = strata[r] as usize;
        n_z[z] += 1;
        n_xz[z * kx + x[r] as usize] += 1;
        n_yz[z * ky + y[r] as usize] += 1;
    }
    let term = |z: usize, xv: usize, yv: usize, c: u64| -> f64 {
        let c = c as f64;
        c * ((n_z[z] as f64 * c) / (n_xz[z * kx + xv] as f64 * n_yz[z * ky + yv] as f64)).log2()
    };
    let kxy = kx * ky;
    let mut sum = 0.0;
    if n_strata.saturating_mul(kxy) <= DENSE_CELL_LIMIT {
        let mut n_xyz = vec![0u64; n_strata * kxy];
        for r in 0..n {
            n_xyz[strata[r] as usize * kxy + x[r] as usize * ky + y[r] as usize] += 1;
        }
        for (cell, &c) in n_xyz.iter().enumerate() {
            if c > 0 {
                sum += term(cell / kxy, (cell % kxy) / ky, cell % ky, c);
            }
        }
    } else {
        let mut keys: Vec<u64> = (0..n)
            .map(|r| strata[r] as u64 * kxy as u64 + x[r] as u64 * ky as u64 + y[r] as u64)
            .collect();
        keys.sort_unstable();
        let mut i = 0;
        while i < keys.len() {
            let k = keys[i];
            let mut j = i;
            while j < keys.len() && keys[j] == k {
                j += 1;
            }
            let cell = k as usize;
            sum += term(cell / kxy, (cell % kxy) / ky, cell % ky, (j - i) as u64);
            i = j;
        }
    }
    (sum / n as f64).max(0.0)
}

/// Dense stratum ids for the realized joint values of `z` (all zero when `z`
/// is empty).
pub fn strata_of<S: AsRef<str>>(ds: &Dataset, z: &[S]) -> Result<(Vec<u32>, usize)> {
    if z.is_empty() {
        return Ok((vec![0; ds.n_records()], 1));
    }
    let cols = ds.indices_of(z)?;
    let jc = ds.realized_configs(&cols);
    let n = jc.len();
    Ok((jc.ids, n))
}

fn check_disjoint<S: AsRef<str>>(groups: &[(&str, &[S])]) -> Result<()> {
    let mut seen: Vec<(&str, &str)> = Vec::new();
    for (label, names) in groups {
        for n in names.iter() {
            let n = n.as_ref();
            if let Some((other, _)) = seen.iter().find(|(_, s)| *s == n) {
                return Err(Error::Overlap(format!(
                    "`{n}` appears in both {other} and {label}"
                )));
            }
            seen.push((label, n));
        }
    }
    Ok(())
}

/// Plug-in I(X;Y|Z) for single attributes `x`, `y` and a conditioning set `z`.
pub fn cond_mutual_info<S: AsRef<str>>(ds: &Dataset, x: &str, y: &str, z: &[S]) -> Result<f64> {
    cond_mutual_info_sets(ds, &[x], &[y], z)
}

pub fn mutual_info(ds: &Dataset, x: &str, y: &str) -> Result<f64> {
    cond_mutual_info::<&str>(ds, x, y, &[])
}

/// Plug-in I(X;Y|Z) where `xs` and `ys` are attribute sets treated as joint
/// variables.
pub fn cond_mutual_info_sets<A: AsRef<str>, B: AsRef<str>, C: AsRef<str>>(
    ds: &Dataset,
    xs: &[A],
    ys: &[B],
    z: &[C],
) -> Result<f64> {
    require_records(ds)?;
    let xs: Vec<&str> = xs.iter().map(AsRef::as_ref).collect();
    let ys: Vec<&str> = ys.iter().map(AsRef::as_ref).collect();
    let zs: Vec<&str> = z.iter().map(AsRef::as_ref).collect();
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Config("mutual information needs nonempty arguments".into()));
    }
    check_disjoint(&[("x", xs.as_slice()), ("y", ys.as_slice()), ("z", zs.as_slice())])?;
    let (xc, kx) = joint_codes(ds, &xs)?;
    let (yc, ky) = joint_codes(ds, &ys)?;
    let (strata, nz) = strata_of(ds, &zs)?;
    Ok(cmi_codes(&xc, kx, &yc, ky, &strata, nz))
}

/// Raw column for one attribute, interned joint ids for several.
fn joint_codes(ds: &Dataset, attrs: &[&str]) -> Result<(Vec<u32>, usize)> {
    if let [single] = attrs {
        let i = ds.index_of(single)?;
        return Ok((ds.column_at(i).to_vec(), ds.domain_at(i).size()));
    }
    let cols = ds.indices_of(attrs)?;
    let jc = ds.realized_configs(&cols);
    let k = jc.len();
    Ok((jc.ids, k))
}

/// Σ_{a∈left} Σ_{b∈right} I(a;b|Z), summed in argument order.
pub fn pairwise_cmi_objective<S: AsRef<str>>(
    ds: &Dataset,
    left: &[S],
    right: &[S],
    z: &[S],
) -> Result<f64> {
    if left.is_empty() || right.is_empty() {
        return Err(Error::Config("pairwise objective needs nonempty sides".into()));
    }
    check_disjoint(&[("left", left), ("right", right), ("z", z)])?;
    require_records(ds)?;
    let (strata, nz) = strata_of(ds, z)?;
    let mut total = 0.0;
    for a in left {
        let ai = ds.index_of(a.as_ref())?;
        for b in right {
            let bi = ds.index_of(b.as_ref())?;
            total += cmi_codes(
                ds.column_at(ai),
                ds.domain_at(ai).size(),
                ds.column_at(bi),
                ds.domain_at(bi).size(),
                &strata,
                nz,
            );
        }
    }
    Ok(total)
}

/// I(X;Y) / sqrt(H(X)·H(Y)), or 0 when either entropy is 0.
pub fn nmi_codes(x: &[u32], kx: usize, y: &[u32], ky: usize) -> f64 {
    let hx = entropy_of_codes(x, kx);
    let hy = entropy_of_codes(y, ky);
    if hx <= 0.0 || hy <= 0.0 {
        return 0.0;
    }
    let strata = vec![0u32; x.len()];
    let mi = cmi_codes(x, kx, y, ky, &strata, 1);
    (mi / (hx * hy).sqrt()).clamp(0.0, 1.0)
}

pub fn nmi(ds: &Dataset, x: &str, y: &str) -> Result<f64> {
    require_records(ds)?;
    let (xi, yi) = (ds.index_of(x)?, ds.index_of(y)?);
    Ok(nmi_codes(
        ds.column_at(xi),
        ds.domain_at(xi).size(),
        ds.column_at(yi),
        ds.domain_at(yi).size(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CategoricalDomain;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ds_from(cols: Vec<(&str, usize, Vec<u32>)>) -> Dataset {
        let (doms, cols): (Vec<_>, Vec<_>) = cols
            .into_iter()
            .map(|(n, k, c)| (CategoricalDomain::numbered(n, k).unwrap(), c))
            .unzip();
        Dataset::new(cols, doms).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let ds = ds_from(vec![
            ("const", 2, vec![1; 8]),
            ("fair", 2, vec![0, 1, 0, 1, 0, 1, 0, 1]),
            ("skew", 2, vec![0, 1, 1, 1, 0, 1, 1, 1]),
        ]);
        assert_eq!(entropy(&ds, "const").unwrap(), 0.0);
        assert!((entropy(&ds, "fair").unwrap() - 1.0).abs() < 1e-15);
        // -(0.25 log2 0.25 + 0.75 log2 0.75), evaluated directly.
        assert!((entropy(&ds, "skew").unwrap() - 0.811_278_124_459_132_9).abs() < 1e-6);
    }

    #[test]
    fn entropy_of_empty_dataset_errors() {
        let ds = ds_from(vec![("a", 2, vec![])]);
        assert!(matches!(entropy(&ds, "a"), Err(Error::Empty(_))));
    }

    #[test]
    fn mi_examples() {
        let ds = ds_from(vec![
            ("x", 2, vec![0, 0, 1, 1]),
            ("y", 2, vec![0, 1, 0, 1]),
            ("w", 2, vec![0, 1, 1, 0]),
            ("xc", 2, vec![0, 0, 1, 1]),
        ]);
        assert_eq!(mutual_info(&ds, "x", "y").unwrap(), 0.0);
        assert!((mutual_info(&ds, "x", "xc").unwrap() - 1.0).abs() < 1e-15);
        // XOR: x, y independent marginally, fully dependent given w.
        assert!((cond_mutual_info(&ds, "x", "y", &["w"]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cmi_argument_errors() {
        let ds = ds_from(vec![("x", 2, vec![0, 1]), ("y", 2, vec![1, 0])]);
        assert!(matches!(
            cond_mutual_info(&ds, "x", "x", &[] as &[&str]),
            Err(Error::Overlap(_))
        ));
        assert!(matches!(
            cond_mutual_info(&ds, "x", "y", &["x"]),
            Err(Error::Overlap(_))
        ));
    }

    #[test]
    fn pairwise_objective_is_termwise_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let mut col = |k: u32| (0..n).map(|_| rng.random_range(0..k)).collect::<Vec<u32>>();
        let ds = ds_from(vec![
            ("a", 3, col(3)),
            ("b", 2, col(2)),
            ("c", 4, col(4)),
            ("z", 2, col(2)),
        ]);
        let single = pairwise_cmi_objective(&ds, &["a"], &["c"], &["z"]).unwrap();
        assert_eq!(single, cond_mutual_info(&ds, "a", "c", &["z"]).unwrap());
        let two = pairwise_cmi_objective(&ds, &["a", "b"], &["c"], &["z"]).unwrap();
        let terms = cond_mutual_info(&ds, "a", "c", &["z"]).unwrap()
            + cond_mutual_info(&ds, "b", "c", &["z"]).unwrap();
        assert!((two - terms).abs() < 1e-15);
        assert!(pairwise_cmi_objective(&ds, &["a"], &["a"], &["z"]).is_err());
    }

    #[test]
    fn nmi_examples() {
        let ds = ds_from(vec![
            ("x", 3, vec![0, 1, 2, 0, 1, 2]),
            ("x2", 3, vec![0, 1, 2, 0, 1, 2]),
            ("c", 2, vec![1; 6]),
        ]);
        assert!((nmi(&ds, "x", "x2").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&ds, "x", "c").unwrap(), 0.0);
    }

    #[test]
    fn nmi_independent_large_sample() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let x: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        assert!(nmi_codes(&x, 2, &y, 2) < 1e-3);
    }

    #[test]
    fn dense_and_sorted_paths_agree() {
        // Force the sorted path with enough strata and compare with a dense
        // computation over the same data split into smaller domains.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 50_000;
        let x: Vec<u32> = (0..n).map(|_| rng.random_range(0..40)).collect();
        let y: Vec<u32> = (0..n).map(|_| rng.random_range(0..40)).collect();
        let z: Vec<u32> = (0..n).map(|_| rng.random_range(0..3000)).collect();
        let sorted = cmi_codes(&x, 40, &y, 40, &z, 3000);
        assert!(3000 * 1600 > DENSE_CELL_LIMIT);
        // Reference: H(XZ) + H(YZ) - H(XYZ) - H(Z) from hash counts.
        use std::collections::HashMap;
        let h = |keys: Vec<u64>| {
            let mut m: HashMap<u64, u64> = HashMap::new();
            for k in keys {
                *m.entry(k).or_default() += 1;
            }
            let mut v: Vec<u64> = m.into_values().collect();
            v.sort_unstable();
            entropy_of_counts(&v)
        };
        let k = |f: &dyn Fn(usize) -> u64| (0..n).map(f).collect::<Vec<u64>>();
        let reference = h(k(&|r| z[r] as u64 * 64 + x[r] as u64))
            + h(k(&|r| z[r] as u64 * 64 + y[r] as u64))
            - h(k(&|r| (z[r] as u64 * 64 + x[r] as u64) * 64 + y[r] as u64))
            - h(k(&|r| z[r] as u64));
        assert!((sorted - reference.max(0.0)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn information_inequalities(
            rows in prop::collection::vec((0u32..3, 0u32..4, 0u32..2, 0u32..3), 1..200)
        ) {
            let ds = ds_from(vec![
                ("x", 3, rows.iter().map(|r| r.0).collect()),
                ("y", 4, rows.iter().map(|r| r.1).collect()),
                ("z", 2, rows.iter().map(|r| r.2).collect()),
                ("w", 3, rows.iter().map(|r| r.3).collect()),
            ]);
            let a = cond_mutual_info(&ds, "x", "y", &["z", "w"]).unwrap();
            let b = cond_mutual_info(&ds, "y", "x", &["z", "w"]).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12);
            let hx = entropy(&ds, "x").unwrap();
            let hxy = cond_entropy(&ds, "x", "y").unwrap();
            prop_assert!(hxy <= hx + 1e-12);
            let v = nmi(&ds, "x", "y").unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
