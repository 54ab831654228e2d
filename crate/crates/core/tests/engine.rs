use patternkv::analysis::{generate_synthetic_stream, SyntheticStreamSpec};
use patternkv::engine::{
    replay_head, run_scheme_comparison, with_raw_baseline, CacheKind, EngineConfig, HeadCacheState, Scheme,
    Toggles,
};
use patternkv::quant::{dequantize_group, quantize_group, GroupLayout};
use patternkv::{Error, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn small_config() -> EngineConfig {
    EngineConfig {
        pattern_count: 8,
        group_size: 16,
        residual_window: 16,
        ..EngineConfig::default()
    }
}

#[test]
fn short_prompt_stays_in_window() {
    let k = random(100, 8, 1);
    let v = random(100, 8, 2);
    let s = HeadCacheState::prefill(&k, &v, &EngineConfig::default()).unwrap();
    assert_eq!(s.committed_tokens(), 0);
    assert_eq!(s.window_tokens(), 100);
    assert!(s.k.blocks.is_empty() && s.v.blocks.is_empty());
    assert_eq!(s.k.patterns.len(), 32);
    assert_eq!(s.v.patterns.len(), 32);
}

#[test]
fn prefill_256_commits_one_block() {
    let k = random(256, 16, 3);
    let v = random(256, 16, 4);
    let s = HeadCacheState::prefill(&k, &v, &EngineConfig::default()).unwrap();
    assert_eq!(s.committed_tokens(), 128);
    assert_eq!(s.window_tokens(), 128);
    assert_eq!(s.k.blocks.len(), 1);
    assert_eq!(s.k.blocks[0].groups.len(), 16);
    assert!(s.k.blocks[0]
        .groups
        .iter()
        .all(|g| g.layout == GroupLayout::PerChannel && g.len == 128));
    assert_eq!(s.v.blocks[0].groups.len(), 128);
    assert!(s.v.blocks[0]
        .groups
        .iter()
        .all(|g| g.layout == GroupLayout::PerToken && g.len == 16));
}

#[test]
fn unaligned_prefill_keeps_remainder_in_window() {
    let s =
        HeadCacheState::prefill(&random(300, 4, 5), &random(300, 4, 6), &EngineConfig::default()).unwrap();
    assert_eq!(s.committed_tokens(), 128);
    assert_eq!(s.window_tokens(), 172);
}

#[test]
fn exact_pattern_tokens_reconstruct_exactly() {
    // dyadic values keep centroid means exact
    let protos = [
        [1.0, -2.0, 0.5, 3.0],
        [-4.0, 0.25, 2.0, -1.5],
        [0.0, 8.0, -0.75, 1.0],
    ];
    let rows: Vec<[f64; 4]> = (0..64).map(|i| protos[i % 3]).collect();
    let m = Matrix::from_rows(&rows).unwrap();
    let s = HeadCacheState::prefill(&m, &m, &small_config()).unwrap();
    assert_eq!(s.k.patterns.len(), 3);
    assert_eq!(s.committed_tokens(), 48);
    for t in 0..s.token_count() {
        let (k, v) = s.reconstruct_token(t).unwrap();
        assert_eq!(k, m.row(t));
        assert_eq!(v, m.row(t));
    }
}

#[test]
fn window_fill_and_flush() {
    let d = 8;
    let k = random(400, d, 7);
    let v = random(400, d, 8);
    let mut s = HeadCacheState::prefill(
        &k.slice_rows(0, 256),
        &v.slice_rows(0, 256),
        &EngineConfig::default(),
    )
    .unwrap();
    let (pk, pv) = (s.k.patterns.len(), s.v.patterns.len());
    for t in 256..383 {
        s.append_decode_token(k.row(t), v.row(t)).unwrap();
    }
    assert_eq!(s.flushes(), 0);
    assert_eq!(s.window_tokens(), 255);
    s.append_decode_token(k.row(383), v.row(383)).unwrap();
    assert_eq!(s.flushes(), 1);
    assert_eq!(s.window_tokens(), 128);
    assert_eq!(s.committed_tokens(), 256);
    assert_eq!(s.k.patterns.len(), pk + 1);
    assert_eq!(s.v.patterns.len(), pv + 1);
    assert_eq!(s.token_count(), 384);
}

#[test]
fn no_pattern_growth_when_disabled() {
    let config = EngineConfig {
        toggles: Toggles {
            generate_new_patterns: false,
            ..Toggles::default()
        },
        ..small_config()
    };
    let k = random(200, 4, 9);
    let v = random(200, 4, 10);
    let head = patternkv::HeadStream {
        layer: 0,
        head: 0,
        k,
        v,
    };
    let s = replay_head(&head, 40, &config).unwrap();
    assert!(s.flushes() > 0);
    assert_eq!(s.k.patterns.len(), s.prefill_pattern_counts().0);
    assert_eq!(s.v.patterns.len(), s.prefill_pattern_counts().1);
}

#[test]
fn window_tokens_are_bit_exact() {
    let k = random(300, 8, 11);
    let v = random(300, 8, 12);
    let head = patternkv::HeadStream {
        layer: 0,
        head: 0,
        k: k.clone(),
        v: v.clone(),
    };
    let s = replay_head(&head, 100, &small_config()).unwrap();
    for t in s.committed_tokens()..s.token_count() {
        let (kr, vr) = s.reconstruct_token(t).unwrap();
        assert_eq!(kr, k.row(t));
        assert_eq!(vr, v.row(t));
    }
}

/// Per-element error bound of every committed token: half the step of the
/// group that holds the element.
fn check_committed_bound(s: &HeadCacheState, k: &Matrix, v: &Matrix) {
    let g = s.config().group_size;
    for t in 0..s.committed_tokens() {
        let (kr, vr) = s.reconstruct_token(t).unwrap();
        let kb = &s.k.blocks[t / g];
        for (c, (a, b)) in kr.iter().zip(k.row(t)).enumerate() {
            let step = kb.groups[c].params.scale;
            assert!(
                (a - b).abs() <= step / 2.0 + 1e-12 * (1.0 + b.abs()),
                "K token {t} ch {c}"
            );
        }
        let vb = &s.v.blocks[t / g];
        let step = vb.groups[t % g].params.scale;
        for (a, b) in vr.iter().zip(v.row(t)) {
            assert!(
                (a - b).abs() <= step / 2.0 + 1e-12 * (1.0 + b.abs()),
                "V token {t}"
            );
        }
    }
}

#[test]
fn committed_error_within_half_step() {
    for bits in [2, 4, 8] {
        let k = random(400, 16, 13);
        let v = random(400, 16, 14);
        let head = patternkv::HeadStream {
            layer: 0,
            head: 0,
            k: k.clone(),
            v: v.clone(),
        };
        let config = EngineConfig {
            bits,
            ..small_config()
        };
        let s = replay_head(&head, 64, &config).unwrap();
        assert!(s.committed_tokens() >= 320);
        check_committed_bound(&s, &k, &v);
    }
}

#[test]
fn gated_off_v_matches_plain_quantization() {
    let spec = SyntheticStreamSpec {
        layers: 1,
        heads: 1,
        head_dim: 16,
        prefill_len: 128,
        decode_len: 256,
        v_cluster_std: 3.0,
        ..Default::default()
    };
    let stream = generate_synthetic_stream(&spec).unwrap().stream;
    let head = &stream.heads[0];
    let s = replay_head(head, 128, &small_config()).unwrap();
    let g = s.config().group_size;
    let mut raw_tokens = 0;
    for t in 0..s.committed_tokens() {
        let block = &s.v.blocks[t / g];
        if block.pattern_indices[t % g].is_some() {
            continue;
        }
        raw_tokens += 1;
        let direct = quantize_group(head.v.row(t), s.config().bits, GroupLayout::PerToken).unwrap();
        assert_eq!(
            s.reconstruct_token(t).unwrap().1,
            dequantize_group(&direct).unwrap()
        );
    }
    assert!(raw_tokens > 0, "fixture should produce gated-off tokens");
}

#[test]
fn gate_decisions_are_safe() {
    let stream = generate_synthetic_stream(&SyntheticStreamSpec {
        layers: 1,
        heads: 2,
        v_cluster_std: 2.0,
        ..Default::default()
    })
    .unwrap()
    .stream;
    for h in &stream.heads {
        let s = replay_head(h, stream.prefill_len, &EngineConfig::default()).unwrap();
        let rho_star = s.gate_config().rho_star;
        let mut gated = 0;
        for r in &s.v.records {
            let d = r.gate.expect("V gate on");
            gated += 1;
            if d.flatten {
                assert!(d.r_flat <= rho_star * d.r_raw);
            }
            assert_eq!(d.flatten, r.flattened);
        }
        assert_eq!(gated, s.committed_tokens());
        assert!(s.k.records.iter().all(|r| r.gate.is_none() && r.flattened));
    }
}

#[test]
fn conservation_and_pattern_growth() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..5 {
        let prefill = rng.random_range(1..120);
        let appends = rng.random_range(0..200);
        let k = random(prefill + appends, 6, 100 + trial);
        let v = random(prefill + appends, 6, 200 + trial);
        let head = patternkv::HeadStream {
            layer: 0,
            head: 0,
            k,
            v,
        };
        let s = replay_head(&head, prefill, &small_config()).unwrap();
        assert_eq!(s.token_count(), prefill + appends);
        assert_eq!(s.committed_tokens() + s.window_tokens(), s.token_count());
        let (pk, pv) = s.prefill_pattern_counts();
        assert_eq!(s.k.patterns.len(), pk + s.flushes());
        assert_eq!(s.v.patterns.len(), pv + s.flushes());
        for t in 0..s.token_count() {
            s.reconstruct_token(t).unwrap();
        }
        assert!(s.reconstruct_token(s.token_count()).unwrap_err().is_usage());
    }
}

#[test]
fn pattern_toggles_off_equal_raw_baseline() {
    let stream = generate_synthetic_stream(&SyntheticStreamSpec {
        layers: 1,
        heads: 2,
        head_dim: 16,
        ..Default::default()
    })
    .unwrap()
    .stream;
    let off = EngineConfig {
        toggles: Toggles {
            use_k_patterns: false,
            use_v_patterns: false,
            ..Toggles::default()
        },
        ..EngineConfig::default()
    };
    let raw = off.raw_baseline();
    for h in &stream.heads {
        let a = replay_head(h, stream.prefill_len, &off).unwrap();
        let b = replay_head(h, stream.prefill_len, &raw).unwrap();
        for t in 0..a.token_count() {
            assert_eq!(a.reconstruct_token(t).unwrap(), b.reconstruct_token(t).unwrap());
        }
    }
    let results =
        run_scheme_comparison(&stream, &[Scheme::new("off", off), Scheme::new("raw", raw)]).unwrap();
    assert_eq!(results[0].metrics, results[1].metrics);
    assert_eq!(results[0].heads, results[1].heads);
}

#[test]
fn replay_is_deterministic() {
    let stream = generate_synthetic_stream(&SyntheticStreamSpec {
        layers: 2,
        heads: 2,
        head_dim: 16,
        prefill_len: 200,
        decode_len: 300,
        ..Default::default()
    })
    .unwrap()
    .stream;
    let scheme = Scheme::new("patternkv", EngineConfig::default());
    let twice = run_scheme_comparison(&stream, &[scheme.clone(), scheme]).unwrap();
    assert_eq!(twice[0].metrics, twice[1].metrics);
    assert_eq!(twice[0].heads, twice[1].heads);

    let a = replay_head(&stream.heads[3], 200, &EngineConfig::default()).unwrap();
    let b = replay_head(&stream.heads[3], 200, &EngineConfig::default()).unwrap();
    assert_eq!(a.k.patterns, b.k.patterns);
    assert_eq!(a.v.blocks, b.v.blocks);
}

#[test]
fn eight_bit_mse_below_step_bound() {
    let stream = generate_synthetic_stream(&SyntheticStreamSpec {
        layers: 1,
        heads: 2,
        head_dim: 32,
        ..Default::default()
    })
    .unwrap()
    .stream;
    let results = run_scheme_comparison(
        &stream,
        &with_raw_baseline(vec![Scheme::new("patternkv", EngineConfig::with_bits(8))]),
    )
    .unwrap();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for h in &stream.heads {
        for &x in h.k.as_slice().iter().chain(h.v.as_slice()) {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let bound = ((hi - lo) / 255.0).powi(2) / 4.0;
    assert_eq!(results.len(), 2);
    for r in &results {
        assert!(r.metrics.mse < bound, "{}: {} >= {bound}", r.name, r.metrics.mse);
    }
}

#[test]
fn metrics_shape() {
    let stream = generate_synthetic_stream(&SyntheticStreamSpec {
        layers: 1,
        heads: 1,
        head_dim: 16,
        ..Default::default()
    })
    .unwrap()
    .stream;
    let results = run_scheme_comparison(
        &stream,
        &with_raw_baseline(vec![Scheme::new("patternkv", EngineConfig::default())]),
    )
    .unwrap();
    let pkv = &results[0].metrics;
    let raw = &results[1].metrics;
    assert_eq!(results[1].name, "raw");
    assert!((0.0..=1.0).contains(&pkv.v_gate_acceptance_rate));
    assert_eq!(pkv.v.gate_violations, 0);
    assert_eq!(raw.v.gate_acceptance_rate, None);
    assert_eq!(raw.v.pattern_utilization, 0.0);
    assert_eq!(pkv.committed_tokens, raw.committed_tokens);
    assert!(pkv.k.rho.is_some() && raw.k.rho.is_none());
    assert!(pkv.bits_per_token > raw.bits_per_token);
}

#[test]
fn input_errors() {
    let k = random(10, 4, 16);
    let mut s = HeadCacheState::prefill(&k, &k, &small_config()).unwrap();
    assert!(s
        .append_decode_token(&[0.0; 3], &[0.0; 4])
        .unwrap_err()
        .is_usage());
    let err = s
        .append_decode_token(&[0.0, f64::NAN, 0.0, 0.0], &[0.0; 4])
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    assert_eq!(err.exit_code(), 2);
    assert_eq!(s.token_count(), 10);

    let bad = EngineConfig {
        residual_window: 8,
        ..small_config()
    };
    assert!(HeadCacheState::prefill(&k, &k, &bad).unwrap_err().is_usage());
    assert!(HeadCacheState::prefill(&k, &random(10, 5, 0), &small_config())
        .unwrap_err()
        .is_usage());
    assert!(
        HeadCacheState::prefill(&Matrix::empty(4), &Matrix::empty(4), &small_config())
            .unwrap_err()
            .is_usage()
    );
}

#[test]
fn stream_accessor() {
    let k = random(40, 4, 17);
    let s = HeadCacheState::prefill(&k, &k, &small_config()).unwrap();
    assert_eq!(s.stream(CacheKind::K).layout, GroupLayout::PerChannel);
    assert_eq!(s.stream(CacheKind::V).layout, GroupLayout::PerToken);
}
