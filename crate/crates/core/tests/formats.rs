use half::f16;
use proptest::prelude::*;

use patternkv::analysis::{generate_synthetic_stream, SyntheticStreamSpec};
use patternkv::engine::{run_scheme_comparison, EngineConfig, Scheme};
use patternkv::report::{InputEcho, RunReport, REPORT_SCHEMA_VERSION};
use patternkv::trace::{read_header, read_trace, write_trace, TraceDtype, TRACE_HEADER_LEN};
use patternkv::{Error, HeadStream, KvStream, Matrix};

fn stream_from(
    values: &[f64],
    layers: usize,
    heads: usize,
    d: usize,
    prefill: usize,
    decode: usize,
) -> KvStream {
    let total = prefill + decode;
    let mut it = values.iter().cycle();
    let mut hs = Vec::new();
    for layer in 0..layers {
        for head in 0..heads {
            let k = Matrix::new(total, d, (0..total * d).map(|_| *it.next().unwrap()).collect()).unwrap();
            let v = Matrix::new(total, d, (0..total * d).map(|_| *it.next().unwrap()).collect()).unwrap();
            hs.push(HeadStream { layer, head, k, v });
        }
    }
    KvStream {
        num_layers: layers,
        num_heads: heads,
        head_dim: d,
        prefill_len: prefill,
        decode_len: decode,
        heads: hs,
        token_ids: None,
    }
}

// Hand-rolled header, independent of the writer.
fn header_bytes(layers: u32, heads: u32, d: u32, dtype: u8, prefill: u32, decode: u32) -> Vec<u8> {
    let mut b = b"KVTR".to_vec();
    for x in [1u32, layers, heads, d] {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b.push(dtype);
    b.extend_from_slice(&prefill.to_le_bytes());
    b.extend_from_slice(&decode.to_le_bytes());
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_round_trip_matches_narrowing(
        layers in 1usize..3, heads in 1usize..3, d in 1usize..6,
        prefill in 1usize..5, decode in 0usize..4,
        values in prop::collection::vec(-1.0e4f64..1.0e4, 1..64),
        half_precision in any::<bool>(),
    ) {
        let s = stream_from(&values, layers, heads, d, prefill, decode);
        let dtype = if half_precision { TraceDtype::F16 } else { TraceDtype::F32 };
        let bytes = write_trace(&s, dtype).unwrap();
        let expected_len = TRACE_HEADER_LEN + 2 * layers * heads * d * (prefill + decode) * dtype.size();
        prop_assert_eq!(bytes.len(), expected_len);
        prop_assert_eq!(
            &bytes[..TRACE_HEADER_LEN],
            &header_bytes(layers as u32, heads as u32, d as u32, dtype.code(), prefill as u32, decode as u32)[..]
        );

        let (_, back) = read_trace(&bytes).unwrap();
        prop_assert_eq!(back.prefill_len, prefill);
        prop_assert_eq!(back.decode_len, decode);
        for (a, b) in s.heads.iter().zip(&back.heads) {
            prop_assert_eq!((a.layer, a.head), (b.layer, b.head));
            for (m, n) in [(&a.k, &b.k), (&a.v, &b.v)] {
                for t in 0..m.rows() {
                    for c in 0..d {
                        let x = m.row(t)[c];
                        let want = if half_precision { f16::from_f64(x).to_f64() } else { x as f32 as f64 };
                        prop_assert_eq!(n.row(t)[c], want);
                    }
                }
            }
        }
    }
}

#[test]
fn hand_built_trace_loads() {
    // 1 layer, 1 head, d=2, prefill 1, decode 1
    let mut b = header_bytes(1, 1, 2, 2, 1, 1);
    for x in [1.0f32, 2.0, -1.0, -2.0, 3.0, 4.0, -3.0, -4.0] {
        b.extend_from_slice(&x.to_le_bytes());
    }
    let (h, s) = read_trace(&b).unwrap();
    assert_eq!(h, read_header(&b).unwrap());
    assert_eq!(h.dtype, TraceDtype::F32);
    let head = &s.heads[0];
    assert_eq!(head.k.row(0), &[1.0, 2.0]);
    assert_eq!(head.v.row(0), &[-1.0, -2.0]);
    assert_eq!(head.k.row(1), &[3.0, 4.0]);
    assert_eq!(head.v.row(1), &[-3.0, -4.0]);
}

#[test]
fn header_field_errors_name_offsets() {
    let good = header_bytes(1, 1, 2, 1, 1, 0);
    let mut bad = good.clone();
    bad[20] = 7;
    assert!(matches!(read_header(&bad), Err(Error::Format { offset: 20, .. })));

    let zero_dim = header_bytes(1, 1, 0, 1, 1, 0);
    assert!(matches!(
        read_header(&zero_dim),
        Err(Error::Format { offset: 16, .. })
    ));

    // header says 8 body bytes; 6 are present
    let mut short = good;
    short.extend_from_slice(&[0; 6]);
    match read_trace(&short) {
        Err(e @ Error::Format { .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("unexpected {other:?}"),
    }
}

fn small_report() -> RunReport {
    let spec = SyntheticStreamSpec {
        layers: 1,
        heads: 1,
        head_dim: 8,
        prefill_len: 40,
        decode_len: 40,
        ..Default::default()
    };
    let stream = generate_synthetic_stream(&spec).unwrap().stream;
    let config = EngineConfig {
        pattern_count: 4,
        group_size: 16,
        residual_window: 16,
        ..EngineConfig::default()
    };
    let schemes = [
        Scheme::new("patternkv", config.clone()),
        Scheme::new("raw", config.raw_baseline()),
    ];
    let results = run_scheme_comparison(&stream, &schemes).unwrap();
    RunReport::new(3, InputEcho::Synthetic { spec }, results, 12)
}

#[test]
fn report_round_trip_and_unknown_fields() {
    let report = small_report();
    let text = report.to_json().unwrap();
    let back = RunReport::from_json(&text).unwrap();
    assert_eq!(back, report);
    assert!(back.scheme("raw").is_some());

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["added_later"] = serde_json::json!({"anything": [1, 2]});
    value["schemes"][0]["extra"] = serde_json::json!(true);
    let back = RunReport::from_json(&value.to_string()).unwrap();
    assert_eq!(back, report);

    value["schema_version"] = serde_json::json!(REPORT_SCHEMA_VERSION + 1);
    let err = RunReport::from_json(&value.to_string()).unwrap_err();
    assert!(matches!(err, Error::Version { .. }));
    assert_eq!(err.exit_code(), 2);
}
