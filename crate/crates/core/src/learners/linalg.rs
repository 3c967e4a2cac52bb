/// Solves the symmetric positive semi-definite system `a x = b` (row-major
/// `p x p`) by Cholesky, processing columns in order and dropping any column
/// whose pivot falls below `tol` times its diagonal. Dropped columns are
/// linearly dependent on earlier ones; their solution entries are zero.
pub(crate) fn solve_psd_aliased(a: &[f64], b: &[f64], p: usize, tol: f64) -> (Vec<f64>, Vec<bool>) {
    let mut l = vec![0.0; p * p];
    let mut aliased = vec![false; p];
    for j in 0..p {
        let ajj = a[j * p + j];
        let mut d = ajj;
        for k in 0..j {
            if !aliased[k] {
                d -= l[j * p + k] * l[j * p + k];
            }
        }
        if !(ajj > 1e-300) || d <= tol * ajj {
            aliased[j] = true;
            continue;
        }
        let djj = d.sqrt();
        l[j * p + j] = djj;
        for i in (j + 1)..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                if !aliased[k] {
                    s -= l[i * p + k] * l[j * p + k];
                }
            }
            l[i * p + j] = s / djj;
        }
    }
    // forward: L z = b
    let mut z = vec![0.0; p];
    for i in 0..p {
        if aliased[i] {
            continue;
        }
        let mut s = b[i];
        for k in 0..i {
            if !aliased[k] {
                s -= l[i * p + k] * z[k];
            }
        }
        z[i] = s / l[i * p + i];
    }
    // backward: Lᵀ x = z
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        if aliased[i] {
            continue;
        }
        let mut s = z[i];
        for k in (i + 1)..p {
            if !aliased[k] {
                s -= l[k * p + i] * x[k];
            }
        }
        x[i] = s / l[i * p + i];
    }
    (x, aliased)
}
