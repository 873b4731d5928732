//! Small dense helpers on `f64` slices. Matrices are row-major.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `out += scale * m * v` for an `out.len() x v.len()` matrix `m`.
#[inline]
pub fn mat_vec_acc(m: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
    let cols = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        *o += scale * dot(row, v);
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}
