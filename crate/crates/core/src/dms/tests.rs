// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use super::*;
use crate::catalog::{NodeKind, Protocol, ProvenanceRecord};
use crate::clock::{ManualClock, SharedClock};
use crate::registration::register_dataset;
use crate::repository::{MockDataset, MockProvider, RetryPolicy};

struct Fixture {
    catalog: Arc<Catalog>,
    providers: Arc<ProviderRegistry>,
    mock: Arc<MockProvider>,
    dms: Arc<Dms>,
    clock: Arc<ManualClock>,
    folder: NodeId,
}

fn a_bytes() -> Vec<u8> {
    b"0123456789".to_vec()
}

fn fixture(capacity: u64) -> Fixture {
    let clock = Arc::new(ManualClock::epoch());
    let shared: SharedClock = clock.clone();
    let catalog = Arc::new(Catalog::in_memory(shared.clone()));
    let providers = Arc::new(ProviderRegistry::with_retry(RetryPolicy::none()));
    let mock = Arc::new(MockProvider::new("mock"));
    mock.insert(
        "ds1",
        MockDataset::new("dataA")
            .file("a.csv", a_bytes())
            .file("sub/b.csv", vec![9u8; 20]),
    );
    providers.register_provider(mock.clone()).unwrap();
    let home = catalog.create_collection("home").unwrap();
    let report = register_dataset(&catalog, &providers, "mock:ds1", &home.id, &mut |_, _| {}).unwrap();
    let dms = Arc::new(
        Dms::in_memory(
            catalog.clone(),
            providers.clone(),
            StorageConfig::with_capacity(capacity),
            shared,
        )
        .unwrap(),
    );
    Fixture {
        catalog,
        providers,
        mock,
        dms,
        clock,
        folder: report.folder,
    }
}

fn transferred(f: &Fixture) -> u64 {
    f.providers.binding("mock").unwrap().transfer_counter()
}

#[test]
fn session_mirrors_catalog_without_transfer() {
    let f = fixture(1 << 20);
    let s = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    let paths: Vec<&String> = s.mount_table.keys().collect();
    assert_eq!(paths, ["/dataA/a.csv", "/dataA/sub/b.csv"]);
    assert_eq!(transferred(&f), 0);

    let root = f.catalog.get(&f.folder).unwrap();
    let empty = f.catalog.create_folder(root.parent.as_ref().unwrap(), "empty").unwrap();
    let s2 = f.dms.create_session(&[empty.id], None).unwrap();
    assert!(s2.mount_table.is_empty());

    assert!(matches!(
        f.dms.create_session(&[NodeId::generate()], None),
        Err(DmsError::Catalog(CatalogError::UnknownNode(_)))
    ));
}

#[test]
fn open_transfers_once() {
    let f = fixture(1 << 20);
    let s = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    let h1 = f.dms.open(&s.id, "/dataA/a.csv").unwrap();
    assert_eq!(transferred(&f), 10);
    let h2 = f.dms.open(&s.id, "/dataA/a.csv").unwrap();
    assert_eq!(transferred(&f), 10);
    assert_eq!(f.dms.cache().entry(&h1.key).unwrap().lock_count, 2);
    assert!(matches!(f.dms.open(&s.id, "/missing"), Err(DmsError::NoSuchPath(_))));
    assert!(matches!(f.dms.open(&s.id, "/dataA"), Err(DmsError::IsADirectory(_))));
    f.dms.close(&h2).unwrap();
    assert_eq!(f.dms.cache().entry(&h1.key).unwrap().lock_count, 1);
    f.dms.close(&h1).unwrap();
    let e = f.dms.cache().entry(&h1.key).unwrap();
    assert_eq!((e.lock_count, e.state), (0, EntryState::Present));
    assert!(matches!(f.dms.close(&h1), Err(DmsError::StaleHandle(_))));
}

#[test]
fn read_matches_fixture() {
    let f = fixture(1 << 20);
    let s = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    let h = f.dms.open(&s.id, "/dataA/a.csv").unwrap();
    assert_eq!(f.dms.read(&h, 0, 10).unwrap(), a_bytes());
    assert_eq!(f.dms.read(&h, 3, 4).unwrap(), a_bytes()[3..7]);
    assert_eq!(f.dms.read(&h, 8, 100).unwrap(), a_bytes()[8..]);
    assert!(f.dms.read(&h, 10, 5).unwrap().is_empty());
    f.dms.close(&h).unwrap();
    assert!(matches!(f.dms.read(&h, 0, 1), Err(DmsError::StaleHandle(_))));
}

#[test]
fn stat_and_list_are_metadata_only() {
    let f = fixture(1 << 20);
    let s = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    let root = f.dms.list(&s.id, "/").unwrap();
    assert_eq!(root.len(), 1);
    assert_eq!((root[0].name.as_str(), root[0].kind), ("dataA", FileKind::Directory));
    let a = f.dms.stat(&s.id, "/dataA/a.csv").unwrap();
    assert_eq!((a.kind, a.size), (FileKind::File, 10));
    let names: Vec<_> = f
        .dms
        .list(&s.id, "/dataA")
        .unwrap()
        .into_iter()
        .map(|e| e.name)
        .collect();
    assert_eq!(names, ["a.csv", "sub"]);
    assert!(matches!(f.dms.stat(&s.id, "/nope"), Err(DmsError::NoSuchPath(_))));
    assert_eq!(transferred(&f), 0);
}

#[test]
fn renames_after_session_creation_do_not_change_it() {
    let f = fixture(1 << 20);
    let s = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    let item = f.catalog.resolve_path("/home/dataA/a.csv").unwrap();
    f.catalog.rename_node(&item.id, "input.csv").unwrap();
    assert!(f.dms.stat(&s.id, "/dataA/a.csv").is_ok());
    let s2 = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    assert!(s2.file("/dataA/input.csv").is_some());
}

fn present(cache: &Cache, url: &str) -> bool {
    cache
        .entries()
        .iter()
        .any(|e| e.key.source_url.ends_with(url) && e.state == EntryState::Present)
}

/// Builds a cache over ad-hoc files in their own folder, returns the
/// session and a helper to open by name.
fn flat(capacity: u64, sizes: &[(&str, usize)]) -> (Fixture, SessionId) {
    let f = fixture(capacity);
    let mut ds = MockDataset::new("flat");
    for (name, size) in sizes {
        ds = ds.generated_file(name, *size);
    }
    f.mock.insert("flat", ds);
    let home = f.catalog.resolve_path("/home").unwrap();
    let rep = register_dataset(&f.catalog, &f.providers, "mock:flat", &home.id, &mut |_, _| {}).unwrap();
    let s = f.dms.create_session(&[rep.folder], None).unwrap();
    (f, s.id)
}

#[test]
fn evict_skips_locked_entries() {
    let (f, s) = flat(100, &[("A", 60), ("B", 30)]);
    let a = f.dms.open(&s, "/flat/A").unwrap();
    let b = f.dms.open(&s, "/flat/B").unwrap();
    f.dms.close(&b).unwrap();
    assert!(f.dms.evict(0).unwrap().is_empty());
    let evicted = f.dms.evict(20).unwrap();
    assert_eq!(evicted.len(), 1);
    assert!(evicted[0].source_url.ends_with("/B"));
    assert!(present(f.dms.cache(), "/A"));
    assert!(matches!(f.dms.evict(50), Err(DmsError::EvictionImpossible { .. })));
    f.dms.close(&a).unwrap();
}

#[test]
fn open_fails_when_room_cannot_be_made() {
    let (f, s) = flat(100, &[("A", 60), ("B", 50), ("C", 101)]);
    let _a = f.dms.open(&s, "/flat/A").unwrap();
    assert!(matches!(
        f.dms.open(&s, "/flat/B"),
        Err(DmsError::EvictionImpossible { .. })
    ));
    assert!(matches!(
        f.dms.open(&s, "/flat/C"),
        Err(DmsError::EvictionImpossible { .. })
    ));
    assert_eq!(f.dms.cache().stats().used, 60);
}

#[test]
fn open_evicts_unlocked_to_admit() {
    let (f, s) = flat(100, &[("A", 60), ("B", 50)]);
    let a = f.dms.open(&s, "/flat/A").unwrap();
    f.dms.close(&a).unwrap();
    let b = f.dms.open(&s, "/flat/B").unwrap();
    assert!(!present(f.dms.cache(), "/A"));
    assert!(present(f.dms.cache(), "/B"));
    f.dms.close(&b).unwrap();
    // usage statistics survive eviction
    let a2 = f.dms.open(&s, "/flat/A").unwrap();
    assert_eq!(f.dms.cache().entry(&a2.key).unwrap().usage_count, 2);
}

#[test]
fn gc_sweep_cases() {
    let (f, s) = flat(100, &[("A", 40), ("B", 30), ("C", 30)]);
    for name in ["A", "B", "C"] {
        let h = f.dms.open(&s, &format!("/flat/{name}")).unwrap();
        f.dms.close(&h).unwrap();
        f.clock.advance_secs(10);
    }
    assert!(f.dms.gc_sweep().evicted.is_empty());

    // shrink to 10% below current use: 100 used, capacity 90
    f.dms.cache().set_capacity(90).unwrap();
    let report = f.dms.gc_sweep();
    assert!(report.bytes_freed >= 10);
    assert!(f.dms.cache().stats().used <= 90);

    // everything left locked and over capacity
    let handles: Vec<_> = ["A", "B", "C"]
        .iter()
        .filter_map(|n| f.dms.open(&s, &format!("/flat/{n}")).ok())
        .collect();
    let used = f.dms.cache().stats().used;
    f.dms.cache().set_capacity(used / 2).unwrap();
    let report = f.dms.gc_sweep();
    assert!(report.evicted.is_empty());
    assert!(report.warning.is_some());
    assert_eq!(f.dms.cache().warnings().len(), 1);
    for h in handles {
        f.dms.close(&h).unwrap();
    }
}

#[test]
fn lru_weights_evict_oldest_first() {
    let names = ["A", "B", "C", "D", "E"];
    let (f, s) = flat(1000, &names.iter().map(|n| (*n, 10)).collect::<Vec<_>>());
    f.dms
        .cache()
        .set_scorer(Arc::new(WeightedObjective(EvictionWeights::lru())));
    // access order: C, A, E, B, D
    for n in ["C", "A", "E", "B", "D"] {
        let h = f.dms.open(&s, &format!("/flat/{n}")).unwrap();
        f.dms.close(&h).unwrap();
        f.clock.advance_secs(3);
    }
    f.dms.cache().set_capacity(50).unwrap();
    let evicted = f.dms.evict(50).unwrap();
    let order: Vec<_> = evicted
        .iter()
        .map(|k| k.source_url.rsplit('/').next().unwrap().to_string())
        .collect();
    assert_eq!(order, ["C", "A", "E", "B", "D"]);
}

#[test]
fn default_objective_prefers_keeping_hot_entries() {
    let (f, s) = flat(1000, &[("hot", 10), ("cold", 10)]);
    for _ in 0..5 {
        let h = f.dms.open(&s, "/flat/hot").unwrap();
        f.dms.close(&h).unwrap();
    }
    let h = f.dms.open(&s, "/flat/cold").unwrap();
    f.dms.close(&h).unwrap();
    f.dms.cache().set_capacity(10).unwrap();
    let report = f.dms.gc_sweep();
    assert_eq!(report.evicted.len(), 1);
    assert!(report.evicted[0].source_url.ends_with("/cold"));
}

#[test]
fn frequency_decays_with_half_life() {
    let (f, s) = flat(1000, &[("x", 1)]);
    let h = f.dms.open(&s, "/flat/x").unwrap();
    let e = f.dms.cache().entry(&h.key).unwrap();
    let half_life = StorageConfig::default().frequency_half_life;
    let now = e.frequency_at;
    let later = now + chrono::Duration::hours(1);
    let ratio = e.frequency_at(later, half_life) / e.frequency_at(now, half_life);
    assert!((ratio - 0.5).abs() < 1e-9);
    f.dms.close(&h).unwrap();
}

#[test]
fn suspend_releases_and_resume_relocks_lazily() {
    let f = fixture(1 << 20);
    let s = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    let h = f.dms.open(&s.id, "/dataA/a.csv").unwrap();
    assert_eq!(f.dms.cache().lock_total(), 1);
    f.dms.suspend_session(&s.id).unwrap();
    assert_eq!(f.dms.cache().lock_total(), 0);
    assert!(matches!(f.dms.read(&h, 0, 1), Err(DmsError::SessionSuspended(_))));
    assert!(matches!(
        f.dms.open(&s.id, "/dataA/a.csv"),
        Err(DmsError::SessionSuspended(_))
    ));
    f.dms.resume_session(&s.id).unwrap();
    assert_eq!(f.dms.cache().lock_total(), 0);
    assert_eq!(f.dms.read(&h, 0, 3).unwrap(), b"012");
    assert_eq!(f.dms.cache().lock_total(), 1);
    f.dms.delete_session(&s.id).unwrap();
    assert_eq!(f.dms.cache().lock_total(), 0);
    assert!(matches!(f.dms.read(&h, 0, 1), Err(DmsError::StaleHandle(_))));
}

#[test]
fn checksum_mismatch_leaves_entry_absent() {
    let f = fixture(1 << 20);
    let s = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    f.mock.corrupt("ds1", "a.csv", b"XXXXXXXXXX".to_vec());
    let err = f.dms.open(&s.id, "/dataA/a.csv").unwrap_err();
    assert_eq!(err.code(), "ChecksumMismatch");
    assert_eq!(f.dms.cache().stats().used, 0);
    assert_eq!(f.dms.cache().lock_total(), 0);
}

#[test]
fn concurrent_opens_share_one_transfer() {
    let (f, s) = flat(1 << 20, &[("big", 64 * 1024)]);
    let f = Arc::new(f);
    let threads: Vec<_> = (0..8)
        .map(|_| {
            let f = f.clone();
            let s = s.clone();
            std::thread::spawn(move || f.dms.open(&s, "/flat/big").unwrap())
        })
        .collect();
    let handles: Vec<_> = threads.into_iter().map(|t| t.join().unwrap()).collect();
    assert_eq!(transferred(&f), 64 * 1024);
    assert_eq!(f.dms.cache().lock_total(), 8);
    for h in handles {
        f.dms.close(&h).unwrap();
    }
}

#[test]
fn multi_file_items_become_directories() {
    let f = fixture(1 << 20);
    let root = f.catalog.get(&f.folder).unwrap();
    let item = f.catalog.create_item(&root.id, "bundle").unwrap();
    for n in ["x.dat", "y.dat"] {
        let p = ProvenanceRecord {
            source_url: format!("mock://elsewhere/{n}"),
            protocol: Protocol::Mock,
            provider: "mock".into(),
            identifier: "mock:elsewhere".into(),
            original_name: n.into(),
            checksum: None,
        };
        f.catalog.add_file(&item.id, p, 1).unwrap();
    }
    f.catalog.create_item(&root.id, "nothing").unwrap();
    let s = f.dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
    assert!(s.file("/dataA/bundle/x.dat").is_some());
    assert!(s.file("/dataA/bundle/y.dat").is_some());
    assert!(matches!(s.stat("/dataA/nothing"), Err(DmsError::NoSuchPath(_))));
    assert_eq!(f.catalog.get(&item.id).unwrap().kind, NodeKind::Item);
}

#[test]
fn cache_directory_survives_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture(1 << 20);
    let make = || {
        Dms::with_store(
            f.catalog.clone(),
            f.providers.clone(),
            Arc::new(DirBlobStore::new(tmp.path().join("cache")).unwrap()),
            StorageConfig::with_capacity(1 << 20),
            Arc::new(Store::open(tmp.path().join("journal")).unwrap()),
            f.clock.clone(),
        )
        .unwrap()
    };
    let session_id = {
        let dms = make();
        let s = dms.create_session(std::slice::from_ref(&f.folder), None).unwrap();
        let h = dms.open(&s.id, "/dataA/a.csv").unwrap();
        dms.close(&h).unwrap();
        s.id
    };
    assert_eq!(transferred(&f), 10);
    let dms = make();
    assert_eq!(dms.cache().stats().used, 10);
    let h = dms.open(&session_id, "/dataA/a.csv").unwrap();
    assert_eq!(dms.read(&h, 0, 10).unwrap(), a_bytes());
    assert_eq!(transferred(&f), 10);
    assert_eq!(dms.cache().entry(&h.key).unwrap().usage_count, 2);
}

#[test]
fn background_gc_restores_capacity() {
    let (f, s) = flat(100, &[("A", 60), ("B", 30)]);
    for n in ["A", "B"] {
        let h = f.dms.open(&s, &format!("/flat/{n}")).unwrap();
        f.dms.close(&h).unwrap();
    }
    f.dms.cache().set_capacity(50).unwrap();
    let task = f.dms.spawn_gc(Duration::from_millis(5));
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    while f.dms.cache().stats().used > 50 && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    drop(task);
    assert!(f.dms.cache().stats().used <= 50);
}

mod properties {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::repository::generated_content;

    #[derive(Debug, Clone)]
    enum Op {
        Open(usize),
        Close(usize),
        Read(usize, u64, u64),
        Evict(u64),
        Gc,
        Advance(u64),
    }

    fn op(files: usize) -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (0..files).prop_map(Op::Open),
            3 => any::<usize>().prop_map(Op::Close),
            2 => (any::<usize>(), 0u64..300, 1u64..300).prop_map(|(h, o, l)| Op::Read(h, o, l)),
            1 => (0u64..400).prop_map(Op::Evict),
            1 => Just(Op::Gc),
            2 => (1u64..120).prop_map(Op::Advance),
        ]
    }

    /// Independent reference: which files are resident, how many locks they
    /// hold and when each was last opened. Eviction order is oldest access
    /// first, ties by name.
    #[derive(Default)]
    struct Model {
        capacity: u64,
        sizes: Vec<u64>,
        present: BTreeMap<usize, u64>,
        locks: BTreeMap<usize, u32>,
        last: BTreeMap<usize, u64>,
    }

    impl Model {
        fn used(&self) -> u64 {
            self.present.keys().map(|i| self.sizes[*i]).sum()
        }

        fn lru_victims(&self, needed: u64) -> Option<Vec<usize>> {
            let free = self.capacity as i128 - self.used() as i128;
            if free >= needed as i128 {
                return Some(Vec::new());
            }
            let mut cands: Vec<usize> = self
                .present
                .keys()
                .copied()
                .filter(|i| self.locks.get(i).copied().unwrap_or(0) == 0)
                .collect();
            cands.sort_by_key(|i| (self.last[i], format!("{i:03}")));
            let total: u64 = cands.iter().map(|i| self.sizes[*i]).sum();
            if (free + total as i128) < needed as i128 {
                return None;
            }
            let mut out = Vec::new();
            let mut free = free;
            for i in cands {
                if free >= needed as i128 {
                    break;
                }
                free += self.sizes[i] as i128;
                out.push(i);
            }
            Some(out)
        }

        fn apply_evict(&mut self, victims: &[usize]) {
            for v in victims {
                self.present.remove(v);
            }
        }
    }

    fn index_of(key: &CacheKey) -> usize {
        key.source_url.rsplit('/').next().unwrap().parse().unwrap()
    }

    fn run(sizes: Vec<u64>, capacity: u64, ops: Vec<Op>) -> Result<(), TestCaseError> {
        let named: Vec<(String, usize)> = sizes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("{i:03}"), *s as usize))
            .collect();
        let refs: Vec<(&str, usize)> = named.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        let (f, s) = flat(capacity, &refs);
        f.dms
            .cache()
            .set_scorer(Arc::new(WeightedObjective(EvictionWeights::lru())));
        let mut model = Model {
            capacity,
            sizes: sizes.clone(),
            ..Model::default()
        };
        let mut handles: Vec<(usize, FileHandle)> = Vec::new();
        let mut tick = 0u64;

        for op in ops {
            match op {
                Op::Open(i) => {
                    let path = format!("/flat/{i:03}");
                    let was_present = model.present.contains_key(&i);
                    let expected = if was_present {
                        Some(Vec::new())
                    } else if sizes[i] > capacity {
                        None
                    } else {
                        model.lru_victims(sizes[i])
                    };
                    match (f.dms.open(&s, &path), expected) {
                        (Ok(h), Some(victims)) => {
                            model.apply_evict(&victims);
                            model.present.insert(i, sizes[i]);
                            *model.locks.entry(i).or_default() += 1;
                            model.last.insert(i, tick);
                            handles.push((i, h));
                        }
                        (Err(DmsError::EvictionImpossible { .. }), None) => {}
                        (got, want) => {
                            return Err(TestCaseError::fail(format!("open {i}: got {got:?}, model {want:?}")))
                        }
                    }
                }
                Op::Close(n) => {
                    if handles.is_empty() {
                        continue;
                    }
                    let (i, h) = handles.remove(n % handles.len());
                    f.dms.close(&h).unwrap();
                    *model.locks.get_mut(&i).unwrap() -= 1;
                }
                Op::Read(n, off, len) => {
                    if handles.is_empty() {
                        continue;
                    }
                    let (i, h) = &handles[n % handles.len()];
                    let data = f.dms.read(h, off, len).unwrap();
                    let truth = generated_content(&format!("{i:03}"), sizes[*i] as usize);
                    let start = (off as usize).min(truth.len());
                    let end = (start + len as usize).min(truth.len());
                    prop_assert_eq!(&data[..], &truth[start..end]);
                }
                Op::Evict(needed) => {
                    let expected = model.lru_victims(needed);
                    match (f.dms.evict(needed), expected) {
                        (Ok(keys), Some(victims)) => {
                            let got: Vec<usize> = keys.iter().map(index_of).collect();
                            prop_assert_eq!(&got, &victims);
                            model.apply_evict(&victims);
                        }
                        (Err(DmsError::EvictionImpossible { .. }), None) => {}
                        (got, want) => {
                            return Err(TestCaseError::fail(format!(
                                "evict {needed}: got {got:?}, model {want:?}"
                            )))
                        }
                    }
                }
                Op::Gc => {
                    let r = f.dms.gc_sweep();
                    prop_assert!(r.evicted.is_empty() && r.warning.is_none());
                }
                Op::Advance(secs) => {
                    f.clock.advance_secs(secs as i64);
                    tick += 1;
                    continue;
                }
            }
            tick += 1;
            f.clock.advance_secs(1);

            let stats = f.dms.cache().stats();
            prop_assert!(stats.used <= capacity);
            prop_assert_eq!(stats.used, model.used());
            for (_, h) in &handles {
                let e = f.dms.cache().entry(&h.key).unwrap();
                prop_assert_eq!(e.state, EntryState::Present);
                prop_assert!(e.lock_count > 0);
            }
            prop_assert_eq!(f.dms.cache().lock_total(), handles.len() as u64);
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cache_agrees_with_lru_model(
            sizes in prop::collection::vec(1u64..200, 2..12),
            capacity in 100u64..600,
            ops in prop::collection::vec(op(12), 1..80),
        ) {
            let n = sizes.len();
            let ops = ops
                .into_iter()
                .map(|o| match o { Op::Open(i) => Op::Open(i % n), o => o })
                .collect();
            run(sizes, capacity, ops)?;
        }
    }
}
