//! Constructive check of the residual worst-case bound.
//!
//! For a finite point set `S` with width-Chebyshev radius
//! `R_w = ½ min_c max_x w(x - c)` (where `w(z) = max z - min z`), an
//! l-infinity `ε`-net with `ε = ρ R_w` gives every point a pattern `p(x)`
//! with `w(x - p(x)) <= 2 ε`, so the residual worst-case bound is at most
//! `ρ` times the direct one. The net here is the set of occupied cells of an
//! axis-aligned grid with pitch `2ε` clipped to the bounding box.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::quant::{max_code, validate_bits};
use crate::tensor::{min_max, Matrix};

/// Relative slack for rounding in the grid arithmetic.
const BOUND_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveringReport {
    pub points: usize,
    pub dim: usize,
    pub rho: f64,
    pub bits: u8,
    /// `R_w*` over the candidate centers.
    pub width_radius: f64,
    pub center: Vec<f64>,
    pub epsilon: f64,
    /// Occupied grid cells, i.e. the net actually used.
    pub net_size: usize,
    /// Cells in the full clipped grid.
    pub full_grid_size: f64,
    /// `(1 + 2 R_inf / ε)^d` with `R_inf = max_x ||x - center||_inf`.
    pub covering_estimate: f64,
    pub max_linf_to_net: f64,
    pub u_raw: f64,
    pub u_res: f64,
    pub bound_holds: bool,
}

/// `w(x - c)`.
pub fn width(x: &[f64], c: &[f64]) -> f64 {
    let diffs: Vec<f64> = x.iter().zip(c).map(|(a, b)| a - b).collect();
    min_max(&diffs).map_or(0.0, |(lo, hi)| hi - lo)
}

fn linf(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn max_width(points: &Matrix, c: &[f64]) -> f64 {
    points.iter_rows().map(|x| width(x, c)).fold(0.0, f64::max)
}

/// Candidate centers: per-dimension midpoint, coordinate mean and every
/// point of the set. Returns the best center and `R_w`.
pub fn width_chebyshev_radius(points: &Matrix) -> (Vec<f64>, f64) {
    let d = points.cols();
    let n = points.rows() as f64;
    let midpoint: Vec<f64> = (0..d)
        .map(|j| {
            let (lo, hi) = min_max(&points.column(j)).expect("non-empty");
            0.5 * (lo + hi)
        })
        .collect();
    let mean: Vec<f64> = (0..d).map(|j| points.column(j).iter().sum::<f64>() / n).collect();
    let mut best = (midpoint.clone(), max_width(points, &midpoint));
    let candidates = std::iter::once(mean).chain(points.iter_rows().map(<[f64]>::to_vec));
    for c in candidates {
        let w = max_width(points, &c);
        if w < best.1 {
            best = (c, w);
        }
    }
    (best.0, 0.5 * best.1)
}

/// Build the grid net for `points` at contraction `rho` and verify
/// `U_res <= ρ U_raw` with groups of `d` elements at `bits` bits.
pub fn covering_bound_check(points: &Matrix, rho: f64, bits: u8) -> Result<CoveringReport> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::usage(format!("rho must lie in (0, 1), got {rho}")));
    }
    validate_bits(bits)?;
    if points.is_empty() || points.cols() == 0 {
        return Err(Error::usage("covering check needs a non-empty point set"));
    }
    check_finite(points.as_slice())?;

    let d = points.cols();
    let (center, r_w) = width_chebyshev_radius(points);
    let epsilon = rho * r_w;
    let scale = (d as f64).sqrt() / 2.0 / f64::from(max_code(bits));
    let u_raw = scale * 2.0 * r_w;
    let r_inf = points.iter_rows().map(|x| linf(x, &center)).fold(0.0, f64::max);

    let (net, full_grid_size) = if epsilon > 0.0 {
        build_grid_net(points, epsilon)
    } else {
        // every point is a constant shift of the center: zero width already
        (vec![center.clone()], 1.0)
    };

    let mut u_res: f64 = 0.0;
    let mut max_linf: f64 = 0.0;
    for x in points.iter_rows() {
        let p = net
            .iter()
            .min_by(|a, b| linf(x, a).total_cmp(&linf(x, b)))
            .expect("net is non-empty");
        max_linf = max_linf.max(linf(x, p));
        u_res = u_res.max(scale * width(x, p));
    }
    let covering_estimate = if epsilon > 0.0 {
        (1.0 + 2.0 * r_inf / epsilon).powi(d as i32)
    } else {
        1.0
    };

    Ok(CoveringReport {
        points: points.rows(),
        dim: d,
        rho,
        bits,
        width_radius: r_w,
        center,
        epsilon,
        net_size: net.len(),
        full_grid_size,
        covering_estimate,
        max_linf_to_net: max_linf,
        u_raw,
        u_res,
        bound_holds: u_res <= rho * u_raw * (1.0 + BOUND_REL_TOL),
    })
}

fn build_grid_net(points: &Matrix, epsilon: f64) -> (Vec<Vec<f64>>, f64) {
    let d = points.cols();
    let pitch = 2.0 * epsilon;
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|j| min_max(&points.column(j)).expect("non-empty"))
        .collect();
    let cells: Vec<usize> = bounds
        .iter()
        .map(|&(lo, hi)| (((hi - lo) / pitch).ceil() as usize).max(1))
        .collect();
    let full: f64 = cells.iter().map(|&c| c as f64).product();

    let mut occupied: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for x in points.iter_rows() {
        let key: Vec<usize> = x
            .iter()
            .zip(&bounds)
            .zip(&cells)
            .map(|((&v, &(lo, _)), &n)| (((v - lo) / pitch).floor() as usize).min(n - 1))
            .collect();
        occupied.entry(key).or_insert_with_key(|key| {
            key.iter()
                .zip(&bounds)
                .map(|(&i, &(lo, hi))| (lo + (2 * i + 1) as f64 * epsilon).min(hi))
                .collect()
        });
    }
    (occupied.into_values().collect(), full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_vertices() {
        let pts = Matrix::from_rows(&[[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]]).unwrap();
        let r = covering_bound_check(&pts, 0.5, 2).unwrap();
        assert_eq!(r.width_radius, 1.0);
        assert_eq!(r.epsilon, 0.5);
        assert!(r.net_size <= 9);
        assert!(r.max_linf_to_net <= 0.5);
        assert!(r.bound_holds);
    }

    #[test]
    fn single_point() {
        let pts = Matrix::from_rows(&[[3.0, -2.0, 7.0]]).unwrap();
        let r = covering_bound_check(&pts, 0.25, 4).unwrap();
        assert_eq!(r.width_radius, 0.0);
        assert_eq!(r.u_raw, 0.0);
        assert_eq!(r.u_res, 0.0);
        assert!(r.bound_holds);
    }

    #[test]
    fn diagonal_set_has_zero_width() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]]).unwrap();
        let r = covering_bound_check(&pts, 0.5, 2).unwrap();
        assert_eq!(r.width_radius, 0.0);
        assert!(r.bound_holds);
    }

    #[test]
    fn unit_cube_net_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let r = covering_bound_check(&Matrix::from_rows(&rows).unwrap(), 0.5, 2).unwrap();
        assert!(r.bound_holds);
        assert!(r.net_size <= 27, "net {}", r.net_size);
        assert!(r.net_size as f64 <= r.covering_estimate);
    }

    #[test]
    fn rho_validated() {
        let pts = Matrix::from_rows(&[[0.0]]).unwrap();
        for bad in [0.0, 1.0, -0.5, 1.5] {
            assert!(covering_bound_check(&pts, bad, 2).is_err());
        }
    }
}
