use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gfm_core::container::{write_container, ContainerReader, Group};
use gfm_core::preprocess::{generate_synthetic, SyntheticConfig};
use gfm_core::GraphRecord;
use gfm_runtime::ddstore::{
    build_ownership, deal, epoch_permutation, epoch_schedule, DDStore, Endpoint, LocalStore, TcpTransport,
};
use gfm_runtime::launch::{run_thread_ranks, store_layout, DataSource, StoreOptions};
use proptest::prelude::*;

fn records(n: usize, seed: u64) -> Vec<GraphRecord> {
    generate_synthetic(&SyntheticConfig { count: n, n_atoms_range: (3, 8), seed, ..Default::default() }).unwrap()
}

fn train_only(recs: Vec<GraphRecord>) -> BTreeMap<Group, Vec<GraphRecord>> {
    BTreeMap::from([(Group::Train, recs)])
}

/// Every index exactly once across all ranks' batches, batch sizes bounded by B.
fn assert_exactly_once(n: usize, p: usize, b: usize, seed: u64, epoch: u64) {
    let s = epoch_schedule(n, p, b, seed, epoch);
    let mut seen = vec![0u32; n];
    for r in 0..p {
        for (k, batch) in s.per_rank[r].iter().enumerate() {
            assert!(!batch.is_empty() && batch.len() <= b);
            if k + 1 < s.per_rank[r].len() {
                assert_eq!(batch.len(), b, "only the final batch may be short");
            }
            for &i in batch {
                seen[i] += 1;
            }
        }
    }
    assert!(seen.iter().all(|&c| c == 1), "N={n} P={p} B={b}: coverage {:?}", &seen[..seen.len().min(16)]);
    let max = s.per_rank.iter().map(|q| q.iter().map(Vec::len).sum::<usize>()).max().unwrap();
    let min = s.per_rank.iter().map(|q| q.iter().map(Vec::len).sum::<usize>()).min().unwrap();
    assert!(max - min <= 1);
}

#[test]
fn exhaustive_coverage_of_reference_cases() {
    for (n, p, b) in [(8, 2, 2), (1003, 4, 16), (10000, 8, 64)] {
        for epoch in 0..3 {
            assert_exactly_once(n, p, b, 42, epoch);
        }
    }
}

#[test]
fn identity_permutation_is_dealt_round_robin() {
    let perm: Vec<usize> = (0..8).collect();
    let d = deal(&perm, 2, 2);
    assert_eq!(d[0], vec![vec![0, 2], vec![4, 6]]);
    assert_eq!(d[1], vec![vec![1, 3], vec![5, 7]]);
}

#[test]
fn all_ranks_derive_the_same_permutation() {
    let a: Vec<_> = (0..4).map(|_| epoch_permutation(1000, 9, 3)).collect();
    assert!(a.windows(2).all(|w| w[0] == w[1]));
    let e0 = epoch_permutation(50, 9, 0);
    assert!((1..=5).any(|e| epoch_permutation(50, 9, e) != e0));
}

#[test]
fn large_even_split() {
    let own = build_ownership(1_000_000, 7, 1).unwrap();
    let sizes = own.chunk_sizes();
    assert_eq!(sizes.iter().sum::<usize>(), 1_000_000);
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    let rep = build_ownership(10, 4, 2).unwrap();
    assert_eq!(rep.chunk_sizes(), vec![5, 5]);
    assert!(build_ownership(10, 4, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coverage_holds_for_arbitrary_shapes(n in 1usize..3000, p in 1usize..17, b in 1usize..130, seed: u64, epoch in 0u64..50) {
        assert_exactly_once(n, p, b, seed, epoch);
    }

    #[test]
    fn ownership_is_a_contiguous_partition(n in 0usize..5000, groups in 1usize..9, r in 1usize..4) {
        let own = build_ownership(n, groups * r, r).unwrap();
        for g in 0..r {
            let mut all = Vec::new();
            for rank in (g * groups)..((g + 1) * groups) {
                let o = own.owned(rank);
                prop_assert!(o.windows(2).all(|w| w[1] == w[0] + 1));
                for &i in &o {
                    prop_assert_eq!(own.owner(i, rank), rank);
                }
                all.extend(o);
            }
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn remote_fetch_matches_owner_copy() {
    let recs = records(203, 1);
    let data = train_only(recs.clone());
    let opts = StoreOptions { groups: vec![Group::Train], ..Default::default() };
    let out = run_thread_ranks(&DataSource::Records(&data), 4, &opts, |env| {
        let before = env.network.messages();
        let own = env.store.ownership(Group::Train).unwrap().owned(env.store.rank());
        for &i in &own {
            assert_eq!(env.store.fetch(Group::Train, i).unwrap(), recs[i]);
        }
        // owned fetches never touch the network (other ranks may, concurrently)
        let local = env.store.stats.local.load(std::sync::atomic::Ordering::Relaxed);
        assert_eq!(local as usize, own.len());
        let mut remote = 0;
        for (i, r) in recs.iter().enumerate() {
            let got = env.store.fetch(Group::Train, i).unwrap();
            assert_eq!(got.encode(), r.encode(), "index {i}");
            if !own.contains(&i) {
                remote += 1;
            }
        }
        assert!(env.network.messages() >= before + remote as u64);
        (env.store.local().resident(Group::Train), env.store.stats.remote.load(std::sync::atomic::Ordering::Relaxed))
    })
    .unwrap();
    assert_eq!(out.iter().map(|o| o.0).sum::<usize>(), 203);
    for (resident, remote) in out {
        assert_eq!(remote as usize, 203 - resident);
    }
}

#[test]
fn replicated_store_holds_every_record_per_group() {
    let data = train_only(records(50, 2));
    let opts = StoreOptions { groups: vec![Group::Train], replication: 2, ..Default::default() };
    let resident =
        run_thread_ranks(&DataSource::Records(&data), 4, &opts, |env| env.store.local().resident(Group::Train)).unwrap();
    assert_eq!(resident.iter().sum::<usize>(), 2 * 50);
}

#[test]
fn out_of_range_is_an_error() {
    let data = train_only(records(10, 3));
    let opts = StoreOptions { groups: vec![Group::Train], ..Default::default() };
    let r = run_thread_ranks(&DataSource::Records(&data), 2, &opts, |env| env.store.fetch(Group::Train, 10).is_err())
        .unwrap();
    assert!(r.iter().all(|&e| e));
}

#[test]
fn tcp_transport_is_byte_identical() {
    let recs = records(40, 4);
    let data = train_only(recs.clone());
    let opts = StoreOptions { groups: vec![Group::Train], ..Default::default() };
    let layout = store_layout(&DataSource::Records(&data), 2, &opts).unwrap();
    let endpoints: Vec<Endpoint> = (0..2).map(|_| Endpoint::bind("127.0.0.1:0").unwrap()).collect();
    let mut stores = Vec::new();
    for (rank, ep) in endpoints.iter().enumerate() {
        let local = Arc::new(LocalStore::from_records(&data, &layout, rank).unwrap());
        ep.serve_store(local.clone());
        stores.push(local);
    }
    let peers: Vec<_> = endpoints.iter().map(Endpoint::local_addr).collect();
    for rank in 0..2 {
        let transport = Arc::new(TcpTransport::new(peers.clone(), Duration::from_secs(5)));
        let store = DDStore::new(rank, layout.clone(), stores[rank].clone(), transport);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(store.fetch(Group::Train, i).unwrap().encode(), r.encode());
        }
        assert_eq!(store.stats.remote.load(std::sync::atomic::Ordering::Relaxed), 20);
    }
}

#[test]
fn unreachable_owner_times_out() {
    let data = train_only(records(4, 5));
    let opts = StoreOptions { groups: vec![Group::Train], ..Default::default() };
    let layout = store_layout(&DataSource::Records(&data), 2, &opts).unwrap();
    let ep = Endpoint::bind("127.0.0.1:0").unwrap();
    let dead = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let local = Arc::new(LocalStore::from_records(&data, &layout, 0).unwrap());
    let transport = Arc::new(TcpTransport::new(vec![ep.local_addr(), dead], Duration::from_millis(300)));
    let store = DDStore::new(0, layout, local, transport);
    let t = Instant::now();
    assert!(store.fetch(Group::Train, 3).is_err());
    assert!(t.elapsed() < Duration::from_secs(5));
}

fn write_fixture(dir: &std::path::Path, n: usize) -> ContainerReader {
    let mut m = BTreeMap::new();
    let recs = records(n, 6);
    let n_val = n / 10;
    m.insert(Group::Val, recs[..n_val].to_vec());
    m.insert(Group::Train, recs[n_val..].to_vec());
    write_container(&m, 4, dir).unwrap();
    ContainerReader::open(dir).unwrap()
}

#[test]
fn no_file_reads_after_load() {
    let tmp = tempfile::tempdir().unwrap();
    let reader = write_fixture(&tmp.path().join("c"), 400);
    let opts = StoreOptions::default();
    let counts = run_thread_ranks(&DataSource::Container(&reader), 3, &opts, |env| {
        let after_load = reader.record_reads();
        for g in [Group::Train, Group::Val] {
            for i in 0..env.store.len(g) {
                env.store.fetch(g, i).unwrap();
            }
        }
        (after_load, reader.record_reads())
    })
    .unwrap();
    for (loaded, end) in counts {
        assert_eq!(loaded, 400);
        assert_eq!(end, 400);
    }
}

#[test]
fn local_copy_equals_container_record() {
    let tmp = tempfile::tempdir().unwrap();
    let reader = write_fixture(&tmp.path().join("c"), 60);
    let opts = StoreOptions::default();
    let layout = store_layout(&DataSource::Container(&reader), 2, &opts).unwrap();
    let local = LocalStore::load(&reader, &layout, 1).unwrap();
    for i in local.resident_indices(Group::Train) {
        assert_eq!(local.get(Group::Train, i).unwrap(), &reader.read_record(Group::Train, i).unwrap());
    }
    let own = layout[&Group::Train].owned(1);
    assert_eq!(local.resident_indices(Group::Train), own);
}

/// Mean per-fetch latency through the store versus direct per-record reads.
#[test]
fn in_memory_fetch_beats_file_reads() {
    let tmp = tempfile::tempdir().unwrap();
    let reader = write_fixture(&tmp.path().join("c"), 11_112);
    let n = reader.manifest().record_count(Group::Train);
    assert!(n >= 10_000);
    let opts = StoreOptions::default();
    let (mem, remote) = run_thread_ranks(&DataSource::Container(&reader), 2, &opts, |env| {
        if env.store.rank() != 0 {
            return (0.0, 0.0);
        }
        let owned = env.store.ownership(Group::Train).unwrap().owned(0);
        let t = Instant::now();
        for i in 0..10_000 {
            std::hint::black_box(env.store.fetch(Group::Train, owned[i % owned.len()]).unwrap());
        }
        let mem = t.elapsed().as_secs_f64() / 10_000.0;
        let t = Instant::now();
        for i in 0..10_000 {
            std::hint::black_box(env.store.fetch(Group::Train, i).unwrap());
        }
        (mem, t.elapsed().as_secs_f64() / 10_000.0)
    })
    .unwrap()[0];
    let t = Instant::now();
    for i in 0..10_000 {
        std::hint::black_box(reader.read_record(Group::Train, i).unwrap());
    }
    let file = t.elapsed().as_secs_f64() / 10_000.0;
    println!("mean latency: in-memory {mem:.3e} s, mixed local/remote {remote:.3e} s, file {file:.3e} s");
    assert!(mem < file, "in-memory {mem} vs file {file}");
}
