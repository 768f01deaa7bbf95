// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use super::*;
use crate::catalog::Protocol;
use crate::clock;
use crate::jobs::JobStatus;
use crate::registration::register_dataset;
use crate::repository::{MockDataset, MockProvider, RetryPolicy};

struct Fx {
    catalog: Arc<Catalog>,
    mock: Arc<MockProvider>,
    tales: TaleService,
    folder: NodeId,
}

fn fx(delay_ms: u64) -> Fx {
    let clock = clock::system();
    let catalog = Arc::new(Catalog::in_memory(clock.clone()));
    let providers = Arc::new(ProviderRegistry::with_retry(RetryPolicy::none()));
    let mock = Arc::new(MockProvider::new("mock"));
    mock.insert(
        "ds1",
        MockDataset::new("dataA")
            .file("a.csv", b"0123456789".to_vec())
            .file("b.csv", b"abc".to_vec()),
    );
    providers.register_provider(mock.clone()).unwrap();
    let home = catalog.create_collection("home").unwrap();
    let rep = register_dataset(&catalog, &providers, "mock:ds1", &home.id, &mut |_, _| {}).unwrap();
    let tales = TaleService::in_memory(
        catalog.clone(),
        providers,
        Arc::new(SimulatedBuilder::new(Duration::from_millis(delay_ms))),
        clock,
    );
    Fx {
        catalog,
        mock,
        tales,
        folder: rep.folder,
    }
}

fn recipe(t: &TaleService, config: &[(&str, &str)]) -> Recipe {
    let cfg = config.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    t.create_recipe("jupyter-base", "https://git.example/env", "abc123", cfg, None)
        .unwrap()
}

fn ready_image(t: &TaleService) -> Image {
    let r = recipe(t, &[]);
    let img = t.build_image(&r.id, None).unwrap();
    let img = t.wait_image(&img.id, Duration::from_secs(5)).unwrap();
    assert_eq!(img.status, ImageStatus::Ready);
    img
}

#[test]
fn recipes_dedup_and_validate() {
    let f = fx(0);
    let a = recipe(&f.tales, &[]);
    let b = recipe(&f.tales, &[]);
    assert_eq!(a.id, b.id);
    let c = recipe(&f.tales, &[("memory", "2g")]);
    assert_ne!(a.id, c.id);
    assert!(matches!(
        f.tales
            .create_recipe("x", "https://git.example/env", "", BTreeMap::new(), None),
        Err(TaleError::EmptyCommit)
    ));
    assert!(matches!(
        f.tales.create_recipe("x", "not a url", "abc", BTreeMap::new(), None),
        Err(TaleError::InvalidUrl(_))
    ));
    assert!(config_from_json(&serde_json::json!({"a": "b"})).is_ok());
    assert!(matches!(
        config_from_json(&serde_json::json!({"a": {"b": "c"}})),
        Err(TaleError::InvalidConfig(_))
    ));
    assert!(matches!(
        config_from_json(&serde_json::json!({"a": 1})),
        Err(TaleError::InvalidConfig(_))
    ));
}

#[test]
fn builds_are_deterministic() {
    let f = fx(0);
    let r = recipe(&f.tales, &[]);
    let one = f.tales.build_image(&r.id, None).unwrap();
    let two = f.tales.build_image(&r.id, None).unwrap();
    let one = f.tales.wait_image(&one.id, Duration::from_secs(5)).unwrap();
    let two = f.tales.wait_image(&two.id, Duration::from_secs(5)).unwrap();
    assert_eq!(one.status, ImageStatus::Ready);
    assert_eq!(one.digest, two.digest);
    assert_eq!(
        one.digest.unwrap(),
        simulated_digest(&r.repo_url, &r.commit_id, &r.config)
    );
    let job = f.tales.jobs().get(two.job.as_ref().unwrap()).unwrap();
    assert_eq!((job.status, job.progress), (JobStatus::Done, 100));
}

#[test]
fn failing_build_reports_log() {
    let f = fx(0);
    let r = recipe(&f.tales, &[("fail", "true")]);
    let img = f.tales.build_image(&r.id, None).unwrap();
    let img = f.tales.wait_image(&img.id, Duration::from_secs(5)).unwrap();
    assert_eq!(img.status, ImageStatus::Failed);
    assert!(img.digest.is_none());
    assert!(!img.build_log.is_empty());
    let job = f.tales.jobs().get(img.job.as_ref().unwrap()).unwrap();
    assert_eq!(job.status, JobStatus::Failed);
    assert!(matches!(
        f.tales.build_image("nope", None),
        Err(TaleError::UnknownRecipe(_))
    ));
}

#[test]
fn building_status_is_observable() {
    let f = fx(200);
    let r = recipe(&f.tales, &[]);
    let img = f.tales.build_image(&r.id, None).unwrap();
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(f.tales.image(&img.id).unwrap().status, ImageStatus::Building);
    let done = f.tales.wait_image(&img.id, Duration::from_secs(5)).unwrap();
    assert_eq!(done.status, ImageStatus::Ready);
}

#[test]
fn build_pool_runs_two_at_a_time() {
    let f = fx(150);
    let r = recipe(&f.tales, &[]);
    let imgs: Vec<_> = (0..4).map(|_| f.tales.build_image(&r.id, None).unwrap()).collect();
    std::thread::sleep(Duration::from_millis(75));
    let building = imgs
        .iter()
        .filter(|i| f.tales.image(&i.id).unwrap().status == ImageStatus::Building)
        .count();
    assert_eq!(building, 2);
    for i in imgs {
        assert_eq!(
            f.tales.wait_image(&i.id, Duration::from_secs(5)).unwrap().status,
            ImageStatus::Ready
        );
    }
}

#[test]
fn tale_creation_rules() {
    let f = fx(0);
    let img = ready_image(&f.tales);
    let meta = TaleMetadata {
        title: "Glass ML".into(),
        ..TaleMetadata::default()
    };
    let t = f.tales.create_tale(&img.id, &f.folder, meta.clone(), None).unwrap();
    assert_eq!(t.metadata.publication_status, PublicationStatus::Private);
    let published = TaleMetadata {
        publication_status: PublicationStatus::Published,
        ..meta.clone()
    };
    assert!(matches!(
        f.tales.create_tale(&img.id, &f.folder, published, None),
        Err(TaleError::ValidationFailed(_))
    ));
    assert!(matches!(
        f.tales.create_tale(&img.id, &NodeId::generate(), meta.clone(), None),
        Err(TaleError::UnknownFolder(_))
    ));
    assert!(matches!(
        f.tales.create_tale("nope", &f.folder, meta, None),
        Err(TaleError::UnknownImage(_))
    ));
}

#[test]
fn license_gate_blocks_publication() {
    let f = fx(0);
    let img = ready_image(&f.tales);
    let meta = TaleMetadata {
        title: "Glass ML".into(),
        authors: vec!["A. Researcher".into()],
        licenses: Licenses {
            environment: Some("BSD-3-Clause".into()),
            data: Some("CC-BY-4.0".into()),
            scripts: None,
        },
        ..TaleMetadata::default()
    };
    let t = f.tales.create_tale(&img.id, &f.folder, meta.clone(), None).unwrap();
    let err = f.tales.publish(&t.id, None).unwrap_err();
    assert!(err.to_string().contains("scripts"));
    assert_eq!(
        f.tales.tale(&t.id).unwrap().metadata.publication_status,
        PublicationStatus::Private
    );
    let mut fixed = meta;
    fixed.licenses.scripts = Some("MIT".into());
    f.tales.update_metadata(&t.id, fixed).unwrap();
    let p = f.tales.publish(&t.id, Some("doi:10.5072/example".into())).unwrap();
    assert_eq!(p.metadata.publication_status, PublicationStatus::Published);
    assert_eq!(p.metadata.identifier.as_deref(), Some("doi:10.5072/example"));
}

#[test]
fn export_lists_folder_files() {
    let f = fx(0);
    let img = ready_image(&f.tales);
    let t = f
        .tales
        .create_tale(&img.id, &f.folder, TaleMetadata::default(), None)
        .unwrap();
    let m = f.tales.export_tale(&t.id).unwrap();
    let paths: Vec<_> = m.data.iter().map(|d| (d.posix_path.as_str(), d.size)).collect();
    assert_eq!(paths, [("dataA/a.csv", 10), ("dataA/b.csv", 3)]);
    assert_eq!(m.environment.repo_url, "https://git.example/env");
    assert!(m
        .data
        .iter()
        .all(|d| d.protocol == Protocol::Mock && d.identifier == "mock:ds1"));
    let text = m.to_canonical_string();
    assert!(!text.contains(t.id.as_str()));
    assert!(!text.contains(f.folder.as_str()));
    assert!(matches!(f.tales.export_tale("nope"), Err(TaleError::UnknownTale(_))));
}

#[test]
fn round_trip_is_a_fixpoint() {
    let f = fx(0);
    // a renamed item and a multi-file item
    let a = f.catalog.resolve_path("/home/dataA/a.csv").unwrap();
    f.catalog.rename_node(&a.id, "input.csv").unwrap();
    let bundle = f.catalog.create_item(&f.folder, "bundle").unwrap();
    let b = f.catalog.resolve_path("/home/dataA/b.csv").unwrap();
    let bref = f.catalog.files(&b.id).unwrap().remove(0);
    f.catalog
        .add_file(&bundle.id, bref.provenance.clone(), bref.size)
        .unwrap();
    let aref = f.catalog.files(&a.id).unwrap().remove(0);
    f.catalog.add_file(&bundle.id, aref.provenance, aref.size).unwrap();

    let img = ready_image(&f.tales);
    let t = f
        .tales
        .create_tale(&img.id, &f.folder, TaleMetadata::default(), None)
        .unwrap();
    let first = f.tales.export_tale(&t.id).unwrap();
    let text = first.to_canonical_string();
    let imported = f
        .tales
        .import_tale(&Manifest::parse(&text).unwrap(), "imported", None)
        .unwrap();
    assert_eq!(imported.state, TaleState::Ok);
    let second = f.tales.export_tale(&imported.id).unwrap();
    assert_eq!(second.to_canonical_string(), text);
    let img2 = f.tales.wait_image(&imported.image_id, Duration::from_secs(5)).unwrap();
    assert_eq!(img2.digest, img.digest);
}

#[test]
fn retracted_identifier_degrades_import() {
    let f = fx(0);
    let img = ready_image(&f.tales);
    let t = f
        .tales
        .create_tale(&img.id, &f.folder, TaleMetadata::default(), None)
        .unwrap();
    let mut m = f.tales.export_tale(&t.id).unwrap();
    m.data[1].identifier = "mock:retracted".into();
    let imported = f.tales.import_tale(&m, "imported", None).unwrap();
    assert_eq!(imported.state, TaleState::Degraded);
    assert_eq!(imported.flagged.len(), 1);
    assert_eq!(imported.flagged[0].code, "UnknownIdentifier");

    f.mock.remove("ds1");
    let gone = f
        .tales
        .import_tale(&f.tales.export_tale(&t.id).unwrap(), "imported", None)
        .unwrap();
    assert_eq!(gone.flagged.len(), 2);
}

#[test]
fn unsupported_version_is_rejected() {
    let f = fx(0);
    let img = ready_image(&f.tales);
    let t = f
        .tales
        .create_tale(&img.id, &f.folder, TaleMetadata::default(), None)
        .unwrap();
    let mut v = serde_json::to_value(f.tales.export_tale(&t.id).unwrap()).unwrap();
    v["wholetale_manifest_version"] = "99".into();
    assert!(matches!(Manifest::from_value(v), Err(TaleError::SchemaInvalid(_))));
}

#[test]
fn state_survives_reopen_and_requeues_builds() {
    let dir = tempfile::tempdir().unwrap();
    let clock = clock::system();
    let catalog = Arc::new(Catalog::in_memory(clock.clone()));
    let providers = Arc::new(ProviderRegistry::new());
    let home = catalog.create_collection("home").unwrap();
    let open = |delay: u64| {
        let store = Arc::new(Store::open(dir.path().join("j")).unwrap());
        TaleService::open(
            catalog.clone(),
            providers.clone(),
            Arc::new(JobRegistry::open(store.clone(), clock.clone()).unwrap()),
            Arc::new(SimulatedBuilder::new(Duration::from_millis(delay))),
            TaleConfig::default(),
            store,
            clock.clone(),
        )
        .unwrap()
    };
    let (pending, tale) = {
        let svc = open(10_000);
        let r = svc
            .create_recipe("env", "https://git.example/env", "c1", BTreeMap::new(), None)
            .unwrap();
        let img = svc.build_image(&r.id, None).unwrap();
        let tale = svc
            .create_tale(&img.id, &home.id, TaleMetadata::default(), None)
            .unwrap();
        let pending = svc.build_image(&r.id, None).unwrap();
        std::mem::forget(svc);
        (pending, tale)
    };
    let svc = open(0);
    assert_eq!(svc.tale(&tale.id).unwrap(), tale);
    let done = svc.wait_image(&pending.id, Duration::from_secs(5)).unwrap();
    assert_eq!(done.status, ImageStatus::Ready);
}
