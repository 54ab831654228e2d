//! Self-check suites run on fresh random instances.
//!
//! Every instance draws from its own RNG seeded by `(seed, check, instance)`,
//! so a failure can be replayed from the reproducer line alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{covering_bound_check, decompose};
use crate::engine::head_seed;
use crate::error::{Error, Result};
use crate::gate::{decide, solve_rho_star, z_test_rejects, GateConfig};
use crate::patterns::{
    generate_decode_pattern, kmeans, match_pattern, mm_distance, PatternOrigin, PatternSet,
};
use crate::quant::{
    dequantize_group, max_code, pack_codes, quantize_group, unpack_codes, GroupLayout, SUPPORTED_BITS,
};
use crate::tensor::{range, Matrix};

pub const SUITES: [&str; 5] = ["quant", "patterns", "gate", "variance", "covering"];

const INSTANCES: usize = 200;
const COVERING_INSTANCES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// `seed=<s> check=<c> instance=<i>: <detail>` for the first failure.
    pub reproducer: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }
}

type Instance = fn(&mut ChaCha8Rng, usize) -> std::result::Result<(), String>;

struct Runner {
    seed: u64,
    checks: Vec<CheckOutcome>,
}

impl Runner {
    fn run(&mut self, name: &str, instances: usize, f: Instance) {
        let check = self.checks.len();
        let mut outcome = CheckOutcome {
            name: name.to_string(),
            instances,
            failures: 0,
            reproducer: None,
        };
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(head_seed(self.seed, check, i));
            if let Err(detail) = f(&mut rng, i) {
                outcome.failures += 1;
                outcome.reproducer.get_or_insert_with(|| {
                    format!("seed={} check={check} instance={i}: {detail}", self.seed)
                });
            }
        }
        self.checks.push(outcome);
    }
}

/// Run one named suite. Unknown names are usage errors.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let mut r = Runner {
        seed,
        checks: Vec::new(),
    };
    match name {
        "quant" => {
            r.run("round trip within half a step", INSTANCES, quant_round_trip);
            r.run("codes monotone in value", INSTANCES, quant_monotone);
            r.run("group extremes are exact", INSTANCES, quant_extremes);
            r.run("packing is a bijection", INSTANCES, quant_packing);
        }
        "patterns" => {
            r.run("kmeans objective non-increasing", INSTANCES / 4, kmeans_monotone);
            r.run(
                "window midpoint minimizes max l-inf",
                INSTANCES,
                chebyshev_optimal,
            );
            r.run("match is the exhaustive argmin", INSTANCES, match_is_argmin);
            r.run("mm distance is shift invariant", INSTANCES, mm_shift_invariant);
        }
        "gate" => {
            r.run("rho* increases with head dim", INSTANCES, rho_monotone_in_dim);
            r.run("gate agrees with the z-test", INSTANCES, gate_matches_z_test);
            r.run("gate is scale invariant", INSTANCES, gate_scale_invariant);
        }
        "variance" => {
            r.run("total = intra + inter", INSTANCES, variance_identity);
        }
        "covering" => {
            r.run(
                "residual bound within rho of raw",
                COVERING_INSTANCES,
                covering_bound,
            );
        }
        other => {
            return Err(Error::usage(format!(
                "unknown suite {other:?}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    }
    Ok(SuiteReport {
        suite: name.to_string(),
        seed,
        checks: r.checks,
    })
}

fn pick_bits(rng: &mut ChaCha8Rng) -> u8 {
    SUPPORTED_BITS[rng.random_range(0..SUPPORTED_BITS.len())]
}

/// A group whose values sit within a few ranges of zero. Every tenth
/// instance is constant.
fn random_group(rng: &mut ChaCha8Rng, instance: usize) -> Vec<f64> {
    let len = rng.random_range(1..=256);
    if instance.is_multiple_of(10) {
        let c = rng.random_range(-50.0..50.0);
        return vec![c; len];
    }
    let width = 10f64.powf(rng.random_range(-3.0..3.0));
    let lo = rng.random_range(-width..width);
    (0..len).map(|_| lo + rng.random_range(0.0..=width)).collect()
}

fn err(e: Error) -> String {
    e.to_string()
}

fn quant_round_trip(rng: &mut ChaCha8Rng, instance: usize) -> std::result::Result<(), String> {
    let bits = pick_bits(rng);
    let values = random_group(rng, instance);
    let g = quantize_group(&values, bits, GroupLayout::PerToken).map_err(err)?;
    let deq = dequantize_group(&g).map_err(err)?;
    let r = range(&values);
    if r == 0.0 {
        if deq != values {
            return Err("constant group did not round-trip exactly".into());
        }
        return Ok(());
    }
    let tol = g.params.scale / 2.0 + 1e-12 * r.max(1.0);
    for (i, (a, b)) in values.iter().zip(&deq).enumerate() {
        if (a - b).abs() > tol {
            return Err(format!("bits={bits} element {i}: |{a} - {b}| > {tol}"));
        }
    }
    Ok(())
}

fn quant_monotone(rng: &mut ChaCha8Rng, instance: usize) -> std::result::Result<(), String> {
    let bits = pick_bits(rng);
    let values = random_group(rng, instance);
    let codes = quantize_group(&values, bits, GroupLayout::PerChannel)
        .and_then(|g| g.codes())
        .map_err(err)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    for w in order.windows(2) {
        if codes[w[0]] > codes[w[1]] {
            return Err(format!(
                "bits={bits}: value {} coded above {}",
                values[w[0]], values[w[1]]
            ));
        }
    }
    Ok(())
}

fn quant_extremes(rng: &mut ChaCha8Rng, instance: usize) -> std::result::Result<(), String> {
    let bits = pick_bits(rng);
    let values = random_group(rng, instance);
    let g = quantize_group(&values, bits, GroupLayout::PerToken).map_err(err)?;
    let codes = g.codes().map_err(err)?;
    let deq = dequantize_group(&g).map_err(err)?;
    let r = range(&values);
    let (lo_i, hi_i) = (0..values.len()).fold((0, 0), |(lo, hi), i| {
        (
            if values[i] < values[lo] { i } else { lo },
            if values[i] > values[hi] { i } else { hi },
        )
    });
    let tol = 1e-12 * r.max(values[lo_i].abs()).max(1.0);
    if codes[lo_i] != 0 || (deq[lo_i] - values[lo_i]).abs() > tol {
        return Err(format!("minimum {} decoded to {}", values[lo_i], deq[lo_i]));
    }
    if r > 0.0 && (codes[hi_i] != max_code(bits) || (deq[hi_i] - values[hi_i]).abs() > tol) {
        return Err(format!("maximum {} decoded to {}", values[hi_i], deq[hi_i]));
    }
    Ok(())
}

fn quant_packing(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let bits = pick_bits(rng);
    let len = rng.random_range(0..1024);
    let codes: Vec<u32> = (0..len).map(|_| rng.random_range(0..=max_code(bits))).collect();
    let packed = pack_codes(&codes, bits).map_err(err)?;
    let back = unpack_codes(&packed, len, bits).map_err(err)?;
    if back != codes {
        return Err(format!("bits={bits} len={len}: unpack(pack(c)) != c"));
    }
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-spread..spread))
        .collect();
    Matrix::new(rows, cols, data).expect("shape matches")
}

fn kmeans_monotone(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let n = rng.random_range(2..200);
    let d = rng.random_range(1..16);
    let k = rng.random_range(1..12);
    let x = random_matrix(rng, n, d, 5.0);
    let fit = kmeans(&x, k, rng.random()).map_err(err)?;
    for w in fit.objective_history.windows(2) {
        if w[1] > w[0] * (1.0 + 1e-12) {
            return Err(format!("n={n} d={d} k={k}: objective rose {} -> {}", w[0], w[1]));
        }
    }
    if fit.centroids.len() > k {
        return Err(format!("{} centroids for k={k}", fit.centroids.len()));
    }
    Ok(())
}

fn max_linf(x: &Matrix, c: &[f64]) -> f64 {
    x.iter_rows()
        .flat_map(|r| r.iter().zip(c).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

fn chebyshev_optimal(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let n = rng.random_range(1..64);
    let d = rng.random_range(1..32);
    let x = random_matrix(rng, n, d, 3.0);
    let c = generate_decode_pattern(&x).map_err(err)?;
    let best = max_linf(&x, &c);
    for _ in 0..20 {
        let other: Vec<f64> = c.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        if max_linf(&x, &other) < best - 1e-12 {
            return Err(format!("n={n} d={d}: perturbed center beats the midpoint"));
        }
    }
    Ok(())
}

fn match_is_argmin(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let d = rng.random_range(1..24);
    let m = rng.random_range(1..20);
    let mut set = PatternSet::new(d, m);
    for _ in 0..m {
        // coarse values so ties actually happen
        let p = (0..d).map(|_| f64::from(rng.random_range(-3i32..=3))).collect();
        set.push(p, PatternOrigin::PrefillMined).map_err(err)?;
    }
    let x: Vec<f64> = (0..d).map(|_| f64::from(rng.random_range(-3i32..=3))).collect();
    let got = match_pattern(&x, &set).map_err(err)?;
    let mut expect = 0;
    let mut best = f64::INFINITY;
    for i in 0..set.len() {
        let p = set.get(i).expect("in range");
        let r: Vec<f64> = x.iter().zip(p).map(|(a, b)| a - b).collect();
        let dist = range(&r);
        if dist < best {
            best = dist;
            expect = i;
        }
    }
    if got.pattern_index != expect || got.mm_distance != best {
        return Err(format!(
            "matched {} at {}, exhaustive search gives {expect} at {best}",
            got.pattern_index, got.mm_distance
        ));
    }
    Ok(())
}

fn mm_shift_invariant(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let d = rng.random_range(1..64);
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
    let m: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
    let a = rng.random_range(-100.0..100.0);
    let b = rng.random_range(-100.0..100.0);
    let base = mm_distance(&x, &m).map_err(err)?;
    let xs: Vec<f64> = x.iter().map(|v| v + a).collect();
    let ms: Vec<f64> = m.iter().map(|v| v + b).collect();
    let shifted = mm_distance(&xs, &ms).map_err(err)?;
    if (base - shifted).abs() > 1e-9 * (1.0 + base) {
        return Err(format!("d={d}: {base} vs {shifted} after shifting by {a}, {b}"));
    }
    Ok(())
}

fn rho_monotone_in_dim(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let alpha = rng.random_range(0.001..0.499);
    let d1 = rng.random_range(1..512);
    let d2 = d1 + rng.random_range(1..512);
    let r1 = solve_rho_star(d1, alpha).map_err(err)?;
    let r2 = solve_rho_star(d2, alpha).map_err(err)?;
    if r1 > r2 {
        return Err(format!("alpha={alpha}: rho*({d1})={r1} > rho*({d2})={r2}"));
    }
    Ok(())
}

fn gate_matches_z_test(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let d = rng.random_range(1..256);
    let alpha = rng.random_range(0.001..0.499);
    let cfg = GateConfig::new(d, alpha).map_err(err)?;
    let bits = pick_bits(rng);
    let r_raw = 10f64.powf(rng.random_range(-3.0..3.0));
    let rho = rng.random_range(0.0..1.5);
    if (rho - cfg.rho_star).abs() < 1e-9 {
        return Ok(());
    }
    let r_flat = rho * r_raw;
    let gate = decide(r_raw, r_flat, &cfg).map_err(err)?.flatten;
    let test = z_test_rejects(r_raw, r_flat, bits, &cfg).map_err(err)?;
    if gate != test {
        return Err(format!(
            "d={d} alpha={alpha} rho={rho} rho*={}: gate {gate}, z-test {test}",
            cfg.rho_star
        ));
    }
    Ok(())
}

fn gate_scale_invariant(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let cfg = GateConfig::new(rng.random_range(1..256), 0.05).map_err(err)?;
    let r_raw = rng.random_range(0.01..10.0);
    let r_flat = rng.random_range(0.0..10.0);
    // keep clear of the threshold so the scaled ratio rounds the same way
    if (r_flat / r_raw - cfg.rho_star).abs() < 1e-9 {
        return Ok(());
    }
    let c = 10f64.powf(rng.random_range(-4.0..4.0));
    let a = decide(r_raw, r_flat, &cfg).map_err(err)?.flatten;
    let b = decide(c * r_raw, c * r_flat, &cfg).map_err(err)?.flatten;
    if a != b {
        return Err(format!("scale {c} flipped the decision for {r_flat}/{r_raw}"));
    }
    Ok(())
}

fn variance_identity(rng: &mut ChaCha8Rng, _: usize) -> std::result::Result<(), String> {
    let n = rng.random_range(1..300);
    let d = rng.random_range(1..32);
    let groups = rng.random_range(1..16);
    let x = random_matrix(rng, n, d, 4.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups)).collect();
    let report = decompose(&x, &labels, groups).map_err(err)?;
    let e = report.identity_error();
    if e > 1e-9 {
        return Err(format!("n={n} d={d} groups={groups}: relative gap {e}"));
    }
    Ok(())
}

fn covering_bound(rng: &mut ChaCha8Rng, instance: usize) -> std::result::Result<(), String> {
    let rho = [0.25, 0.5, 0.75][instance % 3];
    let n = rng.random_range(2..64);
    let d = rng.random_range(1..5);
    let bits = pick_bits(rng);
    let x = random_matrix(rng, n, d, 2.0);
    let report = covering_bound_check(&x, rho, bits).map_err(err)?;
    if !report.bound_holds {
        return Err(format!(
            "n={n} d={d} rho={rho}: U_res={} > rho*U_raw={}",
            report.u_res,
            rho * report.u_raw
        ));
    }
    Ok(())
}
