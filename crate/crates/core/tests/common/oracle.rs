//! Plaintext double-precision references for the statistics.

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn linear(beta: &[f64], row: &[f64]) -> f64 {
    beta[0] + row[..row.len() - 1].iter().zip(&beta[1..]).map(|(x, b)| x * b).sum::<f64>()
}

/// Σ log-likelihood of a logistic model over `[x.., y]` rows.
pub fn plaintext_loglik(beta: &[f64], rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .map(|r| {
            let p = sigmoid(linear(beta, r));
            if r[r.len() - 1] == 1.0 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

pub fn plaintext_accuracy(beta: &[f64], rows: &[Vec<f64>]) -> (usize, usize) {
    let correct = rows
        .iter()
        .filter(|r| {
            let pred = if linear(beta, r) >= 0.0 { 1.0 } else { 0.0 };
            pred == r[r.len() - 1]
        })
        .count();
    (correct, rows.len())
}

/// Newton–Raphson logistic fit restricted to the features in `active`
/// (intercept always fitted). Coefficients of inactive features stay zero.
pub fn fit_logistic(rows: &[Vec<f64>], active: &[usize]) -> Vec<f64> {
    let m = rows[0].len() - 1;
    let cols: Vec<usize> = std::iter::once(0).chain(active.iter().map(|&j| j + 1)).collect();
    let design = |r: &Vec<f64>, c: usize| if c == 0 { 1.0 } else { r[c - 1] };
    let mut beta = vec![0.0; m + 1];
    for _ in 0..50 {
        let p = cols.len();
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for r in rows {
            let mu = sigmoid(linear(&beta, r));
            let y = r[m];
            let w = mu * (1.0 - mu);
            for (a, &ca) in cols.iter().enumerate() {
                grad[a] += (y - mu) * design(r, ca);
                for (b, &cb) in cols.iter().enumerate() {
                    hess[a][b] += w * design(r, ca) * design(r, cb);
                }
            }
        }
        let step = solve(hess, grad);
        let mut max_step: f64 = 0.0;
        for (a, &ca) in cols.iter().enumerate() {
            beta[ca] += step[a];
            max_step = max_step.max(step[a].abs());
        }
        if max_step < 1e-12 {
            break;
        }
    }
    beta
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let pivot = a[col].clone();
            for (x, p) in a[row][col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}
