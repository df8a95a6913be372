//! Shared oracles for unit tests: dense matrix arithmetic kept deliberately
//! independent of the closed-form production paths it checks.

/// Dense product `M_n · … · M_1` of column-stochastic matrices given in
/// application order (`mats[0]` applied first).
pub(crate) fn dense_product(mats: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = mats[0].len();
    let mut acc: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for m in mats {
        let mut next = vec![vec![0.0; n]; n];
        for (i, row) in next.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..n).map(|l| m[i][l] * acc[l][j]).sum();
            }
        }
        acc = next;
    }
    acc
}

pub(crate) fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}
