//! Equal-weight empirical measures and the quadratic Wasserstein distance.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist_sq, dot, norm_sq};

/// Above this count, multi-dimensional W2 falls back to the sliced estimate.
pub const EXACT_ASSIGNMENT_MAX: usize = 256;
pub const SLICED_DIRECTIONS: usize = 64;
const SLICED_SEED: u64 = 0x5EED_0FD1_4EC7;

/// Equal-weight atoms in `R^dim`, stored row-major. Mean and second moment
/// are computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    dim: usize,
    points: Vec<f64>,
    mean: Vec<f64>,
    second_moment: f64,
}

impl ParticleCloud {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("cloud dimension must be positive"));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::input(format!(
                "cloud needs at least one point and a length divisible by {dim}, got {}",
                points.len()
            )));
        }
        let count = points.len() / dim;
        let mut mean = vec![0.0; dim];
        let mut sm = 0.0;
        for p in points.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
            sm += norm_sq(p);
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        Ok(ParticleCloud {
            dim,
            points,
            mean,
            second_moment: sm / count as f64,
        })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::input("all cloud points must share one dimension"));
        }
        Self::new(dim, points.concat())
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        Self::new(x.len(), x.to_vec()).expect("nonempty point")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn raw(&self) -> &[f64] {
        &self.points
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `(1/count) sum |x_i|^2`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    pub fn translated(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.dim {
            return Err(Error::input("translation dimension mismatch"));
        }
        let pts = self
            .points
            .chunks_exact(self.dim)
            .flat_map(|p| p.iter().zip(v).map(|(a, b)| a + b))
            .collect();
        Self::new(self.dim, pts)
    }

    pub fn digest(&self) -> CloudDigest {
        CloudDigest {
            mean: self.mean.iter().map(|&m| round_sig(m, 6)).collect(),
            second_moment: round_sig(self.second_moment, 6),
        }
    }

    /// One point per row, no header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for p in self.points() {
            wtr.write_record(p.iter().map(|v| v.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::io("<cloud csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::input(format!("bad cloud coordinate {f:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_points(&rows)
    }
}

/// First two moments rounded to six significant digits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudDigest {
    pub mean: Vec<f64>,
    pub second_moment: f64,
}

pub fn round_sig(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let mag = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits - 1 - mag);
    (v * scale).round() / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Method {
    Sorted,
    Assignment,
    /// Sliced approximation; not the exact distance.
    Sliced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Estimate {
    pub value: f64,
    pub method: W2Method,
}

impl W2Estimate {
    pub fn is_exact(&self) -> bool {
        self.method != W2Method::Sliced
    }
}

pub fn second_moment(c: &ParticleCloud) -> f64 {
    c.second_moment()
}

pub fn w2_distance(a: &ParticleCloud, b: &ParticleCloud) -> Result<f64> {
    Ok(w2_estimate(a, b)?.value)
}

pub fn w2_estimate(a: &ParticleCloud, b: &ParticleCloud) -> Result<W2Estimate> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!(
            "cloud dimensions differ ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    if a.count() != b.count() {
        return Err(Error::input(format!(
            "cloud counts differ ({} vs {}); resample upstream",
            a.count(),
            b.count()
        )));
    }
    if a.dim() == 1 {
        return Ok(W2Estimate {
            value: sorted_w2_sq(a.raw(), b.raw()).sqrt(),
            method: W2Method::Sorted,
        });
    }
    if a.count() <= EXACT_ASSIGNMENT_MAX {
        let n = a.count();
        let cost: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| dist_sq(a.point(i), b.point(j)))
            .collect();
        let (_, total) = hungarian(&cost, n);
        return Ok(W2Estimate {
            value: (total.max(0.0) / n as f64).sqrt(),
            method: W2Method::Assignment,
        });
    }
    Ok(W2Estimate {
        value: sliced_w2(a, b, SLICED_DIRECTIONS),
        method: W2Method::Sliced,
    })
}

fn sorted_w2_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / sa.len() as f64
}

fn sliced_w2(a: &ParticleCloud, b: &ParticleCloud, directions: usize) -> f64 {
    use rand::Rng;
    let mut rng = crate::rng::stream(SLICED_SEED, a.dim() as u64, 0, crate::rng::StreamRole::Sampler);
    let mut acc = 0.0;
    let mut dir = vec![0.0; a.dim()];
    for _ in 0..directions {
        crate::rng::fill_normal(&mut rng, 1.0, &mut dir);
        let nrm = norm_sq(&dir).sqrt();
        if nrm == 0.0 {
            dir.iter_mut().for_each(|d| *d = rng.random::<f64>());
            continue;
        }
        dir.iter_mut().for_each(|d| *d /= nrm);
        let pa: Vec<f64> = a.points().map(|p| dot(p, &dir)).collect();
        let pb: Vec<f64> = b.points().map(|p| dot(p, &dir)).collect();
        acc += sorted_w2_sq(&pa, &pb);
    }
    (acc / directions as f64).sqrt()
}

/// Minimum-cost perfect assignment on a dense `n x n` row-major cost matrix
/// (shortest augmenting paths with potentials). Returns the column assigned
/// to each row and the total cost.
pub fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based indexing with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1(v: &[f64]) -> ParticleCloud {
        ParticleCloud::new(1, v.to_vec()).unwrap()
    }

    #[test]
    fn single_atoms() {
        assert_eq!(w2_distance(&c1(&[0.0]), &c1(&[3.0])).unwrap(), 3.0);
    }

    #[test]
    fn identical_clouds() {
        assert_eq!(w2_distance(&c1(&[0.0, 1.0]), &c1(&[1.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn two_point_clouds_match_brute_force() {
        // Both pairings: {0->1, 2->3} costs (1+1)/2 = 1, {0->3, 2->1} costs (9+1)/2 = 5.
        let best = f64::min((1.0 + 1.0) / 2.0, (9.0 + 1.0) / 2.0);
        let w = w2_distance(&c1(&[0.0, 2.0]), &c1(&[1.0, 3.0])).unwrap();
        assert!((w - best.sqrt()).abs() < 1e-15);
        assert_eq!(w, 1.0);
    }

    #[test]
    fn second_moments() {
        assert_eq!(second_moment(&ParticleCloud::dirac(&[0.0])), 0.0);
        assert_eq!(second_moment(&ParticleCloud::dirac(&[3.0, 4.0])), 25.0);
        assert_eq!(second_moment(&c1(&[-1.0, 1.0])), 1.0);
    }

    #[test]
    fn mismatches_are_input_errors() {
        let a = ParticleCloud::new(2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(w2_distance(&a, &c1(&[0.0])), Err(Error::Input(_))));
        assert!(matches!(w2_distance(&c1(&[0.0]), &c1(&[0.0, 1.0])), Err(Error::Input(_))));
        assert!(ParticleCloud::new(2, vec![1.0]).is_err());
        assert!(ParticleCloud::new(1, vec![]).is_err());
    }

    #[test]
    fn large_multi_d_clouds_use_sliced_path() {
        let n = EXACT_ASSIGNMENT_MAX + 1;
        let a = ParticleCloud::new(2, (0..2 * n).map(|i| i as f64 * 0.01).collect()).unwrap();
        let b = a.translated(&[1.0, 0.0]).unwrap();
        let est = w2_estimate(&a, &b).unwrap();
        assert_eq!(est.method, W2Method::Sliced);
        assert!(!est.is_exact());
        // Sliced W2 of a pure translation is |v| / sqrt(dim) on average.
        assert!(est.value > 0.4 && est.value < 1.0, "{}", est.value);
    }

    #[test]
    fn hungarian_small_known_case() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let (a, total) = hungarian(&cost, 3);
        assert_eq!(total, 5.0);
        assert_eq!(a, vec![1, 0, 2]);
    }

    #[test]
    fn digest_rounds_to_six_significant_digits() {
        let c = c1(&[1.23456789, 1.23456789]);
        assert_eq!(c.digest().mean, vec![1.23457]);
        assert_eq!(round_sig(-0.000123456789, 6), -0.000123457);
    }

    #[test]
    fn csv_round_trip() {
        let c = ParticleCloud::new(2, vec![0.5, -1.25, 3.0, 1e-7]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = ParticleCloud::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert!(ParticleCloud::read_csv("1,2\n3\n".as_bytes()).is_err());
        assert!(ParticleCloud::read_csv("nan\n".as_bytes()).is_err());
    }
}
