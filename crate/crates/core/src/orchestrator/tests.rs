// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use super::*;
use crate::auth::{Acl, Credentials, LocalIdentityProvider, Token};
use crate::catalog::Catalog;
use crate::clock::{self, SharedClock};
use crate::dms::StorageConfig;
use crate::registration::register_dataset;
use crate::repository::{MockDataset, MockProvider, ProviderRegistry, RetryPolicy};
use crate::tale::{SimulatedBuilder, TaleMetadata};

struct Fx {
    orch: Arc<Orchestrator>,
    sim: Arc<SimulatedRuntime>,
    dms: Arc<Dms>,
    auth: Arc<AuthService>,
    tales: Arc<TaleService>,
    token: Token,
    tale: String,
}

fn fx() -> Fx {
    let clock: SharedClock = clock::system();
    let catalog = Arc::new(Catalog::in_memory(clock.clone()));
    let providers = Arc::new(ProviderRegistry::with_retry(RetryPolicy::none()));
    let mock = Arc::new(MockProvider::new("mock"));
    mock.insert(
        "ds1",
        MockDataset::new("dataA")
            .file("a.csv", b"0123456789".to_vec())
            .file("b.csv", b"xy".to_vec()),
    );
    providers.register_provider(mock).unwrap();
    let home = catalog.create_collection("home").unwrap();
    let rep = register_dataset(&catalog, &providers, "mock:ds1", &home.id, &mut |_, _| {}).unwrap();
    let dms = Arc::new(
        Dms::in_memory(
            catalog.clone(),
            providers.clone(),
            StorageConfig::with_capacity(1 << 20),
            clock.clone(),
        )
        .unwrap(),
    );
    let tales = Arc::new(TaleService::in_memory(
        catalog,
        providers,
        Arc::new(SimulatedBuilder::new(Duration::ZERO)),
        clock.clone(),
    ));
    let auth = Arc::new(AuthService::in_memory(clock.clone()));
    auth.register_provider(Arc::new(
        LocalIdentityProvider::new("local")
            .with_user("alice", "pw")
            .with_user("bob", "pw"),
    ))
    .unwrap();
    let token = auth
        .authenticate(&Credentials::new("local", "alice", "pw"), None)
        .unwrap();
    let recipe = tales
        .create_recipe("env", "https://git.example/env", "abc", Default::default(), None)
        .unwrap();
    let image = tales.build_image(&recipe.id, None).unwrap();
    tales.wait_image(&image.id, Duration::from_secs(5)).unwrap();
    let tale = tales
        .create_tale(&image.id, &rep.folder, TaleMetadata::default(), None)
        .unwrap();
    auth.set_acl(&tale_resource(&tale.id), Acl::owned_by(&token.subject))
        .unwrap();
    let sim = Arc::new(SimulatedRuntime::new(7, clock.clone()));
    let orch = Arc::new(
        Orchestrator::open(
            dms.clone(),
            tales.clone(),
            auth.clone(),
            sim.clone(),
            Arc::new(SingleHostScheduler::default()),
            Arc::new(Store::in_memory()),
            clock,
        )
        .unwrap(),
    );
    Fx {
        orch,
        sim,
        dms,
        auth,
        tales,
        token,
        tale: tale.id,
    }
}

fn names(inst: &Instance) -> Vec<StepName> {
    inst.audit.iter().map(|s| s.name).collect()
}

#[test]
fn launch_runs_seven_steps() {
    let f = fx();
    let inst = f.orch.launch_instance(&f.tale, &f.token.value).unwrap();
    assert_eq!(inst.state, InstanceState::Running);
    assert_eq!(names(&inst), StepName::SEQUENCE);
    assert!(inst.audit.iter().all(|s| s.outcome == StepOutcome::Ok));
    assert_eq!(
        inst.audit.iter().map(|s| s.index).collect::<Vec<_>>(),
        [1, 2, 3, 4, 5, 6, 7]
    );
    assert_eq!(inst.route_path, format!("/instance/{}", inst.id));
    let ep = f.orch.route_lookup(&inst.route_path).unwrap();
    let ctr = inst.container_id.as_deref().unwrap();
    let view = f.sim.container(ctr).unwrap();
    assert!(view.running);
    assert_eq!(ep.internal_port, view.info.internal_port);
    assert_eq!(view.mountpoints, [DATA_MOUNTPOINT]);
    let fs = f.sim.mounted(ctr, DATA_MOUNTPOINT).unwrap();
    assert_eq!(fs.list("/dataA").unwrap().len(), 2);
    assert_eq!(fs.read_to_end("/dataA/a.csv").unwrap(), b"0123456789");
    assert!(!f.sim.policy().intra_container_comm);

    let ops: Vec<String> = f
        .sim
        .events()
        .iter()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["op"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ops, ["create_volume", "create_container", "mount", "start"]);
}

#[test]
fn unauthorized_launch_has_no_side_effects() {
    let f = fx();
    let narrow = f
        .auth
        .authenticate(
            &Credentials::new("local", "alice", "pw"),
            Some(BTreeSet::from([Scope::DataRead])),
        )
        .unwrap();
    assert!(matches!(
        f.orch.launch_instance(&f.tale, &narrow.value),
        Err(OrchestratorError::Unauthorized(DenyReason::InsufficientScope))
    ));
    let bob = f
        .auth
        .authenticate(&Credentials::new("local", "bob", "pw"), None)
        .unwrap();
    assert!(matches!(
        f.orch.launch_instance(&f.tale, &bob.value),
        Err(OrchestratorError::Unauthorized(DenyReason::Forbidden))
    ));
    assert!(matches!(
        f.orch.launch_instance(&f.tale, "garbage"),
        Err(OrchestratorError::Unauthorized(DenyReason::UnknownToken))
    ));
    assert!(f.orch.instances().is_empty());
    assert!(f.sim.events().is_empty());
    assert!(f.dms.sessions().is_empty());
}

#[test]
fn image_must_be_ready() {
    let f = fx();
    let r = f
        .tales
        .create_recipe(
            "broken",
            "https://git.example/env",
            "bad",
            [("fail".to_string(), "true".to_string())].into(),
            None,
        )
        .unwrap();
    let img = f.tales.build_image(&r.id, None).unwrap();
    f.tales.wait_image(&img.id, Duration::from_secs(5)).unwrap();
    let folder = f.tales.tale(&f.tale).unwrap().folder_id;
    let t = f
        .tales
        .create_tale(&img.id, &folder, TaleMetadata::default(), None)
        .unwrap();
    f.auth
        .set_acl(&tale_resource(&t.id), Acl::owned_by(&f.token.subject))
        .unwrap();
    assert!(matches!(
        f.orch.launch_instance(&t.id, &f.token.value),
        Err(OrchestratorError::ImageNotReady(_))
    ));
}

#[test]
fn failure_at_each_step_rolls_back() {
    for (op, step) in [
        (RuntimeOp::CreateVolume, 2u8),
        (RuntimeOp::CreateContainer, 3),
        (RuntimeOp::Mount, 4),
        (RuntimeOp::Start, 5),
    ] {
        let f = fx();
        f.sim.inject_fault(op, 1);
        let err = f.orch.launch_instance(&f.tale, &f.token.value).unwrap_err();
        let OrchestratorError::StepFailed { step: s, instance, .. } = err else {
            panic!("expected StepFailed, got {err:?}");
        };
        assert_eq!(s, step);
        let inst = f.orch.instance(&instance).unwrap();
        assert_eq!(inst.state, InstanceState::Error);
        assert_eq!(inst.audit.len(), step as usize);
        assert_eq!(inst.audit.last().unwrap().outcome, StepOutcome::Failed);
        assert_eq!(names(&inst), StepName::SEQUENCE[..step as usize]);
        assert_eq!(f.sim.volume_count(), 0);
        assert_eq!(f.sim.container_count(), 0);
        assert!(f.orch.proxy().is_empty());
        assert!(f.dms.sessions().is_empty());
        f.orch.delete_instance(&instance).unwrap();
        assert!(matches!(
            f.orch.instance(&instance),
            Err(OrchestratorError::UnknownInstance(_))
        ));
    }
}

#[test]
fn suspend_resume_delete() {
    let f = fx();
    let inst = f.orch.launch_instance(&f.tale, &f.token.value).unwrap();
    let ctr = inst.container_id.clone().unwrap();
    let fs = f.sim.mounted(&ctr, DATA_MOUNTPOINT).unwrap();
    let h = fs.open("/dataA/a.csv").unwrap();
    assert_eq!(f.dms.cache().lock_total(), 1);

    let s = f.orch.suspend_instance(&inst.id).unwrap();
    assert_eq!(s.state, InstanceState::Suspended);
    assert!(matches!(
        f.orch.route_lookup(&inst.route_path),
        Err(OrchestratorError::NoRoute(_))
    ));
    assert_eq!(f.dms.cache().lock_total(), 0);
    assert!(!f.sim.container(&ctr).unwrap().running);
    assert!(matches!(
        f.orch.suspend_instance(&inst.id),
        Err(OrchestratorError::InvalidState { .. })
    ));

    let r = f.orch.resume_instance(&inst.id).unwrap();
    assert_eq!(r.state, InstanceState::Running);
    assert!(f.orch.route_lookup(&inst.route_path).is_ok());
    assert_eq!(fs.read(&h, 0, 4).unwrap(), b"0123");
    assert_eq!(f.dms.cache().lock_total(), 1);
    assert!(matches!(
        f.orch.resume_instance(&inst.id),
        Err(OrchestratorError::InvalidState { .. })
    ));

    f.orch.delete_instance(&inst.id).unwrap();
    assert_eq!(f.dms.cache().lock_total(), 0);
    assert_eq!((f.sim.volume_count(), f.sim.container_count()), (0, 0));
    assert!(f.orch.proxy().is_empty());
    assert!(matches!(
        f.orch.delete_instance(&inst.id),
        Err(OrchestratorError::UnknownInstance(_))
    ));
    assert!(matches!(
        f.orch.route_lookup("/instance/unknown"),
        Err(OrchestratorError::NoRoute(_))
    ));

    let again = f.orch.launch_instance(&f.tale, &f.token.value).unwrap();
    f.orch.suspend_instance(&again.id).unwrap();
    f.orch.delete_instance(&again.id).unwrap();
}

#[test]
fn concurrent_launches_get_distinct_routes() {
    let f = fx();
    let threads: Vec<_> = (0..16)
        .map(|_| {
            let orch = f.orch.clone();
            let tale = f.tale.clone();
            let token = f.token.value.clone();
            std::thread::spawn(move || orch.launch_instance(&tale, &token).unwrap())
        })
        .collect();
    let insts: Vec<Instance> = threads.into_iter().map(|t| t.join().unwrap()).collect();
    let routes: BTreeSet<_> = insts.iter().map(|i| i.route_path.clone()).collect();
    assert_eq!(routes.len(), 16);
    assert_eq!(f.orch.proxy().routes().into_iter().collect::<BTreeSet<_>>(), routes);
    let ports: BTreeSet<_> = insts.iter().map(|i| i.internal_port.unwrap()).collect();
    assert_eq!(ports.len(), 16);
    for i in insts {
        f.orch.delete_instance(&i.id).unwrap();
    }
    assert_eq!(
        (f.sim.volume_count(), f.sim.container_count(), f.orch.proxy().len()),
        (0, 0, 0)
    );
}

#[test]
fn simulated_runtime_is_deterministic() {
    let run = || {
        let sim = SimulatedRuntime::new(42, clock::system());
        (0..5)
            .map(|_| {
                let v = sim.create_volume().unwrap();
                sim.create_container("sha256:x", &v).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn state_machine_edges() {
    use InstanceState::*;
    let all = [Launching, Running, Suspended, Deleted, Error];
    let allowed: BTreeSet<(u8, u8)> = [(0, 1), (0, 4), (1, 2), (2, 1), (1, 3), (2, 3), (4, 3)].into();
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate() {
            assert_eq!(
                a.can_become(*b),
                allowed.contains(&(i as u8, j as u8)),
                "{a:?} -> {b:?}"
            );
        }
    }
}

#[test]
fn restart_restores_instances() {
    let f = fx();
    let store = Arc::new(Store::in_memory());
    let open = |sim: Arc<SimulatedRuntime>| {
        Orchestrator::open(
            f.dms.clone(),
            f.tales.clone(),
            f.auth.clone(),
            sim,
            Arc::new(SingleHostScheduler::default()),
            store.clone(),
            clock::system(),
        )
        .unwrap()
    };
    let (running, suspended) = {
        let o = open(f.sim.clone());
        let a = o.launch_instance(&f.tale, &f.token.value).unwrap().id;
        let b = o.launch_instance(&f.tale, &f.token.value).unwrap().id;
        o.suspend_instance(&b).unwrap();
        (a, b)
    };
    let fresh = Arc::new(SimulatedRuntime::new(8, clock::system()));
    let o = open(fresh.clone());
    let a = o.instance(&running).unwrap();
    assert_eq!(a.state, InstanceState::Running);
    assert_eq!(o.proxy().routes(), std::slice::from_ref(&a.route_path));
    let fs = fresh
        .mounted(a.container_id.as_deref().unwrap(), DATA_MOUNTPOINT)
        .unwrap();
    assert_eq!(fs.read_to_end("/dataA/b.csv").unwrap(), b"xy");

    assert_eq!(o.instance(&suspended).unwrap().state, InstanceState::Suspended);
    let b = o.resume_instance(&suspended).unwrap();
    assert_eq!(b.state, InstanceState::Running);
    assert_eq!(o.proxy().len(), 2);
    o.delete_instance(&running).unwrap();
    o.delete_instance(&suspended).unwrap();
    assert_eq!((fresh.volume_count(), fresh.container_count()), (0, 0));
}

#[test]
fn persistent_runtime_keeps_containers_across_restart() {
    let f = fx();
    let store = Arc::new(Store::in_memory());
    let rt_store = Arc::new(Store::in_memory());
    let open = |sim: Arc<SimulatedRuntime>| {
        Orchestrator::open(
            f.dms.clone(),
            f.tales.clone(),
            f.auth.clone(),
            sim,
            Arc::new(SingleHostScheduler::default()),
            store.clone(),
            clock::system(),
        )
        .unwrap()
    };
    let (before, suspended) = {
        let sim = Arc::new(SimulatedRuntime::persistent(3, clock::system(), rt_store.clone()).unwrap());
        let o = open(sim);
        let a = o.launch_instance(&f.tale, &f.token.value).unwrap();
        let b = o.launch_instance(&f.tale, &f.token.value).unwrap().id;
        o.suspend_instance(&b).unwrap();
        (o.instance(&a.id).unwrap(), b)
    };
    let sim = Arc::new(SimulatedRuntime::persistent(3, clock::system(), rt_store.clone()).unwrap());
    assert_eq!(sim.container_count(), 2);
    let o = open(sim.clone());
    let after = o.instance(&before.id).unwrap();
    assert_eq!(after, before);
    let fs = sim
        .mounted(after.container_id.as_deref().unwrap(), DATA_MOUNTPOINT)
        .unwrap();
    assert_eq!(fs.read_to_end("/dataA/b.csv").unwrap(), b"xy");

    let b = o.resume_instance(&suspended).unwrap();
    assert_eq!(sim.container_count(), 2);
    let next = sim.create_volume().unwrap();
    assert!(!sim.has_container(&next));
    assert_ne!(Some(next), b.volume_id);
}
