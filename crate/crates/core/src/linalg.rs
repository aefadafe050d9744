//! Dense routines for the small symmetric systems solved once per
//! (node, group) or (group, item) in the EM loop. Matrices are row-major
//! `n x n` slices; these run in the innermost loops, so nothing allocates.

/// Lower Cholesky factor, in place. Returns `false` if `a` is not
/// numerically positive definite. The strict upper triangle is zeroed.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    true
}

/// Solves `L L^T x = b` in place given the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Inverse of `L L^T`, written to `out` (full symmetric).
pub fn cholesky_inverse(l: &[f64], n: usize, out: &mut [f64]) {
    for j in 0..n {
        let col = &mut out[j * n..(j + 1) * n];
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        cholesky_solve(l, n, col);
    }
    // rows were filled as columns; symmetrize the rounding
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = m;
            out[j * n + i] = m;
        }
    }
}

/// `ln det(L L^T)`.
pub fn cholesky_logdet(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Solves the symmetric positive definite system `a x = b`; on failure
/// retries once with `ridge` added to the diagonal. `a` is overwritten.
pub fn spd_solve_with_ridge(a: &mut [f64], n: usize, b: &mut [f64], ridge: f64) -> SolveStatus {
    let backup: smallbuf::Buf = smallbuf::Buf::from_slice(a);
    if cholesky_in_place(a, n) {
        cholesky_solve(a, n, b);
        return SolveStatus::Ok;
    }
    backup.copy_to(a);
    for i in 0..n {
        a[i * n + i] += ridge;
    }
    if cholesky_in_place(a, n) {
        cholesky_solve(a, n, b);
        SolveStatus::Ridged
    } else {
        SolveStatus::Singular
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Ok,
    Ridged,
    Singular,
}

mod smallbuf {
    /// Stack copy for matrices up to 16x16, heap beyond.
    pub enum Buf {
        Stack([f64; 256], usize),
        Heap(Vec<f64>),
    }

    impl Buf {
        pub fn from_slice(s: &[f64]) -> Self {
            if s.len() <= 256 {
                let mut a = [0.0; 256];
                a[..s.len()].copy_from_slice(s);
                Buf::Stack(a, s.len())
            } else {
                Buf::Heap(s.to_vec())
            }
        }

        pub fn copy_to(&self, out: &mut [f64]) {
            match self {
                Buf::Stack(a, n) => out.copy_from_slice(&a[..*n]),
                Buf::Heap(v) => out.copy_from_slice(v),
            }
        }
    }
}
