use num_bigint::BigUint;
use props_core::par::ExecMode;
use props_core::theory::{
    mc_coverage_oracle, p_unique, round2, stirling2, theory_table, TheoryTable, GRID_NS, GRID_TKS, PUBLISHED_GRID,
};

/// Counts set partitions of `{0..n}` into exactly `k` blocks by walking
/// restricted growth strings.
fn brute_partitions(n: usize, k: usize) -> u64 {
    fn walk(i: usize, n: usize, used: usize, k: usize) -> u64 {
        if i == n {
            return u64::from(used == k);
        }
        if used + (n - i) < k {
            return 0;
        }
        let mut total = 0;
        for b in 0..=used {
            if b < k {
                total += walk(i + 1, n, used.max(b + 1), k);
            }
        }
        total
    }
    if n == 0 {
        return u64::from(k == 0);
    }
    walk(0, n, 0, k)
}

/// Counts surjections `{0..n} -> {0..tk}` directly.
fn brute_surjection_fraction(n: usize, tk: usize) -> f64 {
    let total = tk.pow(n as u32);
    let full = (1usize << tk) - 1;
    let hits = (0..total)
        .filter(|&code| {
            let (mut c, mut seen) = (code, 0usize);
            for _ in 0..n {
                seen |= 1 << (c % tk);
                c /= tk;
            }
            seen == full
        })
        .count();
    hits as f64 / total as f64
}

#[test]
fn stirling_matches_partition_enumeration() {
    for n in 0..=10 {
        for k in 0..=n {
            assert_eq!(stirling2(n, k), BigUint::from(brute_partitions(n, k)), "S({n},{k})");
        }
    }
    assert_eq!(stirling2(12, 4), BigUint::from(611_501u32));
    for n in 1..=12 {
        assert_eq!(stirling2(n, 1), BigUint::from(1u32));
    }
}

#[test]
fn coverage_probability_matches_surjection_count() {
    for n in 1..=8 {
        for tk in 1..=5 {
            let want = brute_surjection_fraction(n, tk);
            assert!((p_unique(n, 1, tk) - want).abs() < 1e-15, "N={n} Tk={tk}");
        }
    }
    assert_eq!(p_unique(7, 2, 2), p_unique(7, 1, 4));
    assert_eq!(p_unique(5, 3, 2), 0.0);
}

#[test]
fn coverage_spot_values() {
    let one_minus = |n, tk| 1.0 - p_unique(n, 1, tk);
    let exact = 1.0 - 24.0 * 611_501.0 / 16_777_216.0;
    assert!((one_minus(12, 4) - exact).abs() < 1e-15);
    assert_eq!(round2(one_minus(12, 4)), 0.13);
    assert_eq!(round2(one_minus(12, 6)), 0.56);
    assert_eq!(round2(one_minus(12, 8)), 0.91);
    assert_eq!(round2(one_minus(16, 10)), 0.93);
    assert_eq!(one_minus(9, 1), 0.0);
    let big = p_unique(64, 1, 40);
    assert!(big > 0.0 && big < 1.0);
}

#[test]
fn monte_carlo_oracle_agrees_with_closed_form() {
    assert_eq!(mc_coverage_oracle(5, 1, 1000, 1, ExecMode::Parallel), 1.0);
    assert_eq!(mc_coverage_oracle(3, 4, 1000, 1, ExecMode::Parallel), 0.0);
    let est = mc_coverage_oracle(12, 4, 1_000_000, 42, ExecMode::Parallel);
    assert!((est - 0.875).abs() < 0.002, "{est}");
    let p = p_unique(12, 1, 4);
    let se = (p * (1.0 - p) / 1e6).sqrt();
    assert!((est - p).abs() < 3.0 * se, "{est} vs {p}");
}

#[test]
fn monte_carlo_is_independent_of_execution_mode() {
    let a = mc_coverage_oracle(13, 6, 50_000, 9, ExecMode::Sequential);
    let b = mc_coverage_oracle(13, 6, 50_000, 9, ExecMode::Parallel);
    assert_eq!(a, b);
}

#[test]
fn grid_is_monotone_and_matches_published_cells() {
    let t = TheoryTable::default_grid();
    for j in 0..GRID_TKS.len() {
        for i in 1..GRID_NS.len() {
            assert!(t.cells[i][j] <= t.cells[i - 1][j]);
        }
    }
    for row in &t.cells {
        assert!(row.windows(2).all(|w| w[0] <= w[1]));
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let mut mismatched = Vec::new();
    for (i, row) in t.cells.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if round2(*v) != PUBLISHED_GRID[i][j] {
                mismatched.push((GRID_NS[i], GRID_TKS[j]));
            }
        }
    }
    assert_eq!(mismatched, [(13, 10)]);
    assert_eq!(t, theory_table(&GRID_NS, &GRID_TKS));
}

#[test]
fn table_exports() {
    let t = theory_table(&[12], &[4, 6]);
    let csv = t.to_csv();
    assert!(csv.starts_with("N,Tk=4,Tk=6\n12,0.12"));
    let text = t.to_text();
    assert!(text.lines().nth(1).unwrap().contains("0.13"));
    assert!(text.lines().nth(1).unwrap().contains("0.56"));
}
