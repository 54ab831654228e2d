//! Flattening gate for V vectors.
//!
//! Quantizing a residual instead of the raw vector only pays off when the
//! residual range is sufficiently smaller than the raw range. With step sizes
//! `Δ = R / (2^n - 1)` and the uniform in-bin error model, the per-dimension
//! squared-error gain `D` has
//!
//! ```text
//! E[D]   = (Δ_raw² - Δ_flat²) / 12
//! Var(D) = (Δ_raw⁴ + Δ_flat⁴) / (180 d)
//! ```
//!
//! and a one-sided z-test at level `α` rejects `E[D] <= 0` exactly when the
//! contraction ratio `ρ = R_flat / R_raw` satisfies
//! `1 - ρ² >= 2 z_{1-α} / sqrt(5 d) * sqrt(1 + ρ⁴)`, i.e. `ρ <= ρ*(d, α)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{max_code, validate_bits};

pub const DEFAULT_ALPHA: f64 = 0.05;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 0.5 {
        Ok(())
    } else {
        Err(Error::usage(format!(
            "significance level {alpha} outside (0, 0.5]"
        )))
    }
}

/// Standard normal quantile `z_{1-α}` for `α ∈ (0, 0.5]`.
///
/// Acklam's rational approximation (relative error below 1.2e-9) on the
/// lower tail, reflected.
pub fn z_quantile(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if alpha == 0.5 {
        return Ok(0.0);
    }
    Ok(-inverse_normal_cdf(alpha))
}

fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// `1 - ρ² - c·sqrt(1 + ρ⁴)` with `c = 2z / sqrt(5d)`. Strictly decreasing
/// on `[0, 1]`.
fn criterion_margin(rho: f64, c: f64) -> f64 {
    let r2 = rho * rho;
    1.0 - r2 - c * (1.0 + r2 * r2).sqrt()
}

fn threshold_coefficient(d: usize, z: f64) -> f64 {
    2.0 * z / (5.0 * d as f64).sqrt()
}

/// Largest contraction ratio the gate accepts for head dimension `d`.
///
/// Bisection on the equality; iterates until the bracket stops shrinking, so
/// the result is within a couple of ulps of the root.
pub fn solve_rho_star(d: usize, alpha: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::usage("head dimension must be >= 1"));
    }
    let z = z_quantile(alpha)?;
    if z == 0.0 {
        return Ok(1.0);
    }
    let c = threshold_coefficient(d, z);
    // margin(0) = 1 - c; no positive ratio passes when c >= 1
    if criterion_margin(0.0, c) <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if criterion_margin(mid, c) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Gate parameters for one head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub alpha: f64,
    pub head_dim: usize,
    pub z_quantile: f64,
    pub rho_star: f64,
}

impl GateConfig {
    pub fn new(head_dim: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            alpha,
            head_dim,
            z_quantile: z_quantile(alpha)?,
            rho_star: solve_rho_star(head_dim, alpha)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub flatten: bool,
    pub rho: f64,
    pub r_raw: f64,
    pub r_flat: f64,
}

/// Flatten when `r_flat / r_raw <= ρ*`. A zero raw range is already exact
/// under plain quantization and is never flattened.
pub fn decide(r_raw: f64, r_flat: f64, config: &GateConfig) -> Result<GateDecision> {
    if r_raw.is_nan() || r_flat.is_nan() || r_raw < 0.0 || r_flat < 0.0 {
        return Err(Error::usage(format!(
            "ranges must be non-negative, got r_raw={r_raw}, r_flat={r_flat}"
        )));
    }
    if r_raw == 0.0 {
        let rho = if r_flat == 0.0 { 0.0 } else { f64::INFINITY };
        return Ok(GateDecision {
            flatten: false,
            rho,
            r_raw,
            r_flat,
        });
    }
    let rho = r_flat / r_raw;
    Ok(GateDecision {
        flatten: rho <= config.rho_star,
        rho,
        r_raw,
        r_flat,
    })
}

/// Mean and variance of the squared-error gain `D` under the high-resolution
/// model. Diagnostic only; [`decide`] is what the cache uses.
pub fn expected_gain_stats(r_raw: f64, r_flat: f64, bits: u8, d: usize) -> Result<(f64, f64)> {
    validate_bits(bits)?;
    if r_raw.is_nan() || r_flat.is_nan() || r_raw < 0.0 || r_flat < 0.0 {
        return Err(Error::usage("ranges must be non-negative"));
    }
    if d == 0 {
        return Err(Error::usage("head dimension must be >= 1"));
    }
    let levels = f64::from(max_code(bits));
    let step_raw = r_raw / levels;
    let step_flat = r_flat / levels;
    let mean = (step_raw.powi(2) - step_flat.powi(2)) / 12.0;
    let var = (step_raw.powi(4) + step_flat.powi(4)) / (180.0 * d as f64);
    Ok((mean, var))
}

/// Rejection region of the one-sided z-test, evaluated directly from the
/// moments of `D`.
pub fn z_test_rejects(r_raw: f64, r_flat: f64, bits: u8, config: &GateConfig) -> Result<bool> {
    let (mean, var) = expected_gain_stats(r_raw, r_flat, bits, config.head_dim)?;
    if var == 0.0 {
        return Ok(false);
    }
    Ok(mean / var.sqrt() >= config.z_quantile)
}
