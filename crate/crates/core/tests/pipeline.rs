//! Ingestion to sharding to training, through the text and binary codecs.

use std::io::Cursor;

use nomad_core::data::{generate_synthetic, parse_text, read_binary, write_binary, IndexBase, SyntheticSpec};
use nomad_core::nomad::{run_hybrid, run_nomad, HybridConfig, NomadConfig};
use nomad_core::transport::{connect_mesh, MeshConfig};
use nomad_core::{partition_rows, Budget, CheckpointInterval, HyperParams, RunControl, ShardedRatings};

#[test]
fn text_binary_shard_roundtrip_preserves_entries() {
    let spec = SyntheticSpec {
        n_users: 60,
        n_items: 30,
        ..SyntheticSpec::preset(2)
    };
    let spec = SyntheticSpec {
        degrees: nomad_core::data::DegreeModel::PowerLaw { nnz: 600, exponent: 5.0 },
        ..spec
    };
    let syn = generate_synthetic(&spec).unwrap();
    let text: String = syn
        .entries
        .iter()
        .map(|r| format!("{} {} {:?}\n", r.user + 1, r.item + 1, r.value))
        .collect();
    let (meta, parsed) = parse_text(Cursor::new(format!("# header\n%%meta 60 30 {}\n{text}", syn.entries.len())), IndexBase::One, "syn").unwrap();
    assert_eq!((meta.m, meta.n), (60, 30));
    assert_eq!(parsed, syn.entries);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("syn.bin");
    write_binary(&path, &meta, &parsed).unwrap();
    let (meta2, back) = read_binary(&path).unwrap();
    assert_eq!((meta2.m, meta2.n, meta2.nnz), (meta.m, meta.n, meta.nnz));

    let sharded = ShardedRatings::new(60, 30, &back, partition_rows(60, 3).unwrap()).unwrap();
    let mut a: Vec<_> = sharded.ratings().iter().map(|r| (r.user, r.item, r.value.to_bits())).collect();
    let mut b: Vec<_> = syn.entries.iter().map(|r| (r.user, r.item, r.value.to_bits())).collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
}

#[test]
fn tcp_mesh_in_threads_matches_engine_quality() {
    let spec = SyntheticSpec {
        n_users: 200,
        n_items: 60,
        k_true: 3,
        degrees: nomad_core::data::DegreeModel::PowerLaw { nnz: 4000, exponent: 5.0 },
        ..SyntheticSpec::preset(9)
    };
    let syn = generate_synthetic(&spec).unwrap();
    let (train, test) = nomad_core::data::split_train_test(&syn.entries, 0.1, 9);
    let data = ShardedRatings::new(200, 60, &train, partition_rows(200, 4).unwrap()).unwrap();
    let params = HyperParams::new(3, 0.01, 0.02, 0.01).unwrap();
    let control = RunControl::new(Budget::epochs(20.0), CheckpointInterval::Updates(20_000));

    let hosts: Vec<String> = (0..2)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string())
        .collect();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..2)
            .map(|rank| {
                let (hosts, data, params, control, test) = (hosts.clone(), &data, &params, &control, &test);
                s.spawn(move || {
                    let cfg = MeshConfig {
                        rank,
                        hosts,
                        k: 3,
                        timeout: std::time::Duration::from_secs(20),
                    };
                    let endpoint = connect_mesh(&cfg).unwrap();
                    let config = HybridConfig {
                        threads: 2,
                        ..HybridConfig::default()
                    };
                    run_hybrid(data, params, &config, control, 5, test, endpoint).unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let root = &results[0];
    assert!(root.aborted.is_none());
    assert!(root.checkpoints.iter().all(|c| c.parcels == 60));
    assert!(root.log.records.len() >= 3);
    let hybrid_rmse = root.log.final_rmse().unwrap();

    let single = run_nomad(&data, &params, &NomadConfig::default(), &control, 5, &test).unwrap();
    let engine_rmse = single.log.final_rmse().unwrap();
    assert!((hybrid_rmse - engine_rmse).abs() < 0.05, "{hybrid_rmse} vs {engine_rmse}");
    assert!(results[1].model.is_none());
}
