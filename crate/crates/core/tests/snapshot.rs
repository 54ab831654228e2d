use patternkv::analysis::{generate_synthetic_stream, SyntheticStreamSpec};
use patternkv::engine::snapshot::{read_snapshot, write_snapshot, SnapshotHead, SNAPSHOT_MAGIC};
use patternkv::engine::{replay_head, EngineConfig, Toggles};
use patternkv::Error;

fn fixture(config: &EngineConfig) -> Vec<SnapshotHead> {
    let stream = generate_synthetic_stream(&SyntheticStreamSpec {
        layers: 1,
        heads: 2,
        head_dim: 8,
        prefill_len: 100,
        decode_len: 150,
        v_cluster_std: 1.5,
        ..Default::default()
    })
    .unwrap()
    .stream;
    stream
        .heads
        .iter()
        .map(|h| SnapshotHead {
            layer: h.layer,
            head: h.head,
            state: replay_head(h, stream.prefill_len, config).unwrap(),
        })
        .collect()
}

fn config() -> EngineConfig {
    EngineConfig {
        pattern_count: 6,
        group_size: 32,
        residual_window: 32,
        toggles: Toggles {
            use_k_gate: true,
            ..Toggles::default()
        },
        ..EngineConfig::default()
    }
}

#[test]
fn round_trip_preserves_every_token() {
    let config = config();
    let heads = fixture(&config);
    let bytes = write_snapshot(&config, &heads).unwrap();
    assert_eq!(&bytes[..4], SNAPSHOT_MAGIC);
    let back = read_snapshot(&bytes).unwrap();
    assert_eq!(back.config, config);
    assert_eq!(back.heads.len(), heads.len());
    for (a, b) in heads.iter().zip(&back.heads) {
        assert_eq!((a.layer, a.head), (b.layer, b.head));
        let (sa, sb) = (&a.state, &b.state);
        assert_eq!(sa.config(), sb.config());
        assert_eq!(sa.token_count(), sb.token_count());
        assert_eq!(sa.flushes(), sb.flushes());
        assert_eq!(sa.prefill_pattern_counts(), sb.prefill_pattern_counts());
        assert_eq!(sa.k.patterns, sb.k.patterns);
        assert_eq!(sa.v.blocks, sb.v.blocks);
        assert!(sa
            .v
            .blocks
            .iter()
            .flat_map(|b| &b.pattern_indices)
            .any(Option::is_none));
        for t in 0..sa.token_count() {
            assert_eq!(sa.reconstruct_token(t).unwrap(), sb.reconstruct_token(t).unwrap());
        }
    }
    // a restored state keeps decoding
    let mut s = back.heads[0].state.clone();
    for _ in 0..40 {
        s.append_decode_token(&[0.5; 8], &[0.25; 8]).unwrap();
    }
    assert!(s.flushes() > heads[0].state.flushes());
    assert_eq!(write_snapshot(&config, &back.heads).unwrap(), bytes);
}

#[test]
fn rejects_bad_input() {
    let config = config();
    let bytes = write_snapshot(&config, &fixture(&config)).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        read_snapshot(&bad),
        Err(Error::Format { offset: 0, .. })
    ));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        read_snapshot(&bad),
        Err(Error::Version {
            expected: 1,
            found: 9,
            ..
        })
    ));

    let cut = bytes.len() - 5;
    match read_snapshot(&bytes[..cut]) {
        Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
        other => panic!("expected format error, got {other:?}"),
    }

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(read_snapshot(&long), Err(Error::Format { .. })));

    // bits byte of the config block
    let mut bad = bytes;
    bad[8] = 3;
    assert!(matches!(read_snapshot(&bad), Err(Error::Format { .. })));
}
