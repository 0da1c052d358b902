//! Library measures against independent brute-force computations.

use std::collections::HashMap;

use proptest::prelude::*;

use fairlatent::ci_tests::chi_square_sf;
use fairlatent::metrics::{auc, rod};
use fairlatent::stats::{cond_mutual_info, cond_mutual_info_sets};
use fairlatent::{CategoricalDomain, Dataset};

fn table(cols: Vec<Vec<u32>>, sizes: &[usize]) -> Dataset {
    let doms = sizes
        .iter()
        .enumerate()
        .map(|(i, &k)| CategoricalDomain::numbered(format!("x{i}"), k).unwrap())
        .collect();
    Dataset::new(cols, doms).unwrap()
}

fn entropy(ds: &Dataset, attrs: &[&str]) -> f64 {
    let cols: Vec<&[u32]> = attrs.iter().map(|a| ds.column(a).unwrap()).collect();
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for r in 0..ds.n_records() {
        *counts.entry(cols.iter().map(|c| c[r]).collect()).or_default() += 1;
    }
    let n = ds.n_records() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn brute_cmi(ds: &Dataset, x: &[&str], y: &[&str], z: &[&str]) -> f64 {
    let join = |parts: &[&[&str]]| -> Vec<String> {
        parts.iter().flat_map(|p| p.iter().map(|s| (*s).to_owned())).collect()
    };
    let h = |v: Vec<String>| entropy(ds, &v.iter().map(String::as_str).collect::<Vec<_>>());
    h(join(&[x, z])) + h(join(&[y, z])) - h(join(&[x, y, z])) - h(join(&[z]))
}

fn dataset_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<u32>>)> {
    (prop::collection::vec(2usize..5, 3..=5), 1usize..400).prop_flat_map(|(sizes, n)| {
        let cols: Vec<_> = sizes
            .iter()
            .map(|&k| prop::collection::vec(0..k as u32, n))
            .collect();
        (Just(sizes), cols)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cmi_matches_entropy_identity((sizes, cols) in dataset_strategy()) {
        let m = sizes.len();
        let ds = table(cols, &sizes);
        let names: Vec<String> = ds.names().map(str::to_owned).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let z = &names[2..];
        let got = cond_mutual_info(&ds, names[0], names[1], z).unwrap();
        prop_assert!((got - brute_cmi(&ds, &names[..1], &names[1..2], z)).abs() <= 1e-9);
        if m >= 4 {
            let got = cond_mutual_info_sets(&ds, &names[..2], &names[2..3], &names[3..]).unwrap();
            prop_assert!((got - brute_cmi(&ds, &names[..2], &names[2..3], &names[3..])).abs() <= 1e-9);
        }
        prop_assert!(got >= -1e-12);
    }

    #[test]
    fn auc_matches_pair_count(
        raw in prop::collection::vec((0u32..20, any::<bool>()), 2..300)
    ) {
        let mut scores: Vec<f64> = raw.iter().map(|r| f64::from(r.0) / 7.0).collect();
        let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
        labels[0] = true;
        labels[1] = false;
        scores.rotate_left(1);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((auc(&scores, &labels).unwrap() - num / den).abs() <= 1e-12);
    }
}

/// Trapezoid-free check: Simpson on the density after t = u², normalized
/// by the same quadrature over the whole support.
fn quadrature_sf(x: f64, k: i32) -> f64 {
    let g = |u: f64| u.powi(k - 1) * (-u * u / 2.0).exp();
    let simpson = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = g(a) + g(b);
        for i in 1..n {
            s += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    simpson(x.sqrt(), 60.0) / simpson(0.0, 60.0)
}

#[test]
fn survival_function_matches_quadrature() {
    for k in 1..=20 {
        for x in [0.0, 0.3, 1.0, 2.5, 7.0, 13.0, 25.0, 40.0, 60.0] {
            let got = chi_square_sf(x, k as f64);
            let want = quadrature_sf(x, k);
            assert!((got - want).abs() <= 1e-6, "dof {k} x {x}: {got} vs {want}");
        }
    }
}

#[test]
fn rod_hand_example() {
    // Group 0 has 8/10 positives, group 1 has 5/10: odds 4 vs 1.
    let preds: Vec<bool> = (0..20).map(|i| if i < 10 { i < 8 } else { i < 15 }).collect();
    let groups: Vec<u32> = (0..20).map(|i| u32::from(i >= 10)).collect();
    let got = rod(&preds, &groups, &[0; 20], 0.0).unwrap();
    assert!((got - 4f64.ln()).abs() <= 1e-12);
}
