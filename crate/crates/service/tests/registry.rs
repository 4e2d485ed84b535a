mod common;

use std::time::Duration;

use rcms_client::RegistryClient;
use rcms_core::fsm;
use rcms_core::registry::ServiceRecord;
use rcms_core::wire::{Services, REGISTRY_PATH};
use rcms_service::registry::RegistryService;

async fn registry(ttl: Duration) -> (RegistryClient, rcms_service::server::ServerHandle) {
    let svc = RegistryService::new(ttl);
    let server = svc.spawn("127.0.0.1:0").await.unwrap();
    (RegistryClient::new(common::caller("test"), server.url()), server)
}

#[tokio::test]
async fn lookup_returns_instances_in_registration_order() {
    let (reg, _server) = registry(Duration::from_secs(10)).await;
    for i in ["b", "a", "c"] {
        reg.register(&ServiceRecord::new("ims", i, format!("http://127.0.0.1:1/{i}")))
            .await
            .unwrap();
    }
    reg.register(&ServiceRecord::new("log", "x", "http://127.0.0.1:2")).await.unwrap();
    let ids: Vec<String> = reg.lookup("ims").await.unwrap().into_iter().map(|r| r.instance_id).collect();
    assert_eq!(ids, ["b", "a", "c"]);
    // Re-registering keeps the original place.
    reg.register(&ServiceRecord::new("ims", "b", "http://127.0.0.1:1/b")).await.unwrap();
    let ids: Vec<String> = reg.lookup("ims").await.unwrap().into_iter().map(|r| r.instance_id).collect();
    assert_eq!(ids, ["b", "a", "c"]);
}

#[tokio::test]
async fn unknown_name_is_empty() {
    let (reg, _server) = registry(Duration::from_secs(10)).await;
    assert!(reg.lookup("nosuch").await.unwrap().is_empty());
}

#[tokio::test]
async fn deregister_removes_the_instance() {
    let (reg, _server) = registry(Duration::from_secs(10)).await;
    reg.register(&ServiceRecord::new("ims", "a", "http://127.0.0.1:1")).await.unwrap();
    reg.deregister("ims", "a").await.unwrap();
    assert!(reg.lookup("ims").await.unwrap().is_empty());
    // Removing twice is harmless.
    reg.deregister("ims", "a").await.unwrap();
}

#[tokio::test]
async fn records_expire_without_heartbeat() {
    let (reg, _server) = registry(Duration::from_secs(2)).await;
    reg.register(&ServiceRecord::new("ims", "quiet", "http://127.0.0.1:1")).await.unwrap();
    let _beat = reg
        .heartbeat(
            ServiceRecord::new("ims", "alive", "http://127.0.0.1:2"),
            Duration::from_millis(500),
        )
        .await
        .unwrap();
    assert_eq!(reg.lookup("ims").await.unwrap().len(), 2);
    tokio::time::sleep(Duration::from_millis(2600)).await;
    let ids: Vec<String> = reg.lookup("ims").await.unwrap().into_iter().map(|r| r.instance_id).collect();
    assert_eq!(ids, ["alive"]);
}

#[tokio::test]
async fn plain_http_lookup() {
    let (reg, server) = registry(Duration::from_secs(10)).await;
    reg.register(&ServiceRecord::new("ims", "a", "http://127.0.0.1:1")).await.unwrap();
    let client = reqwest::Client::builder().no_proxy().build().unwrap();
    let body = client
        .get(format!("{}{REGISTRY_PATH}?name=ims", server.url()))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    let services: Services = serde_json::from_slice(&body).unwrap();
    assert_eq!(services.records.len(), 1);
    assert_eq!(services.records[0].url, "http://127.0.0.1:1");
}

#[tokio::test]
async fn fsm_table_is_served() {
    let (_reg, server) = registry(Duration::from_secs(10)).await;
    let table = common::caller("test").fsm_table(&server.url()).await.unwrap();
    assert_eq!(table.transitions, fsm::transition_table());
    assert_eq!(table.states, fsm::FsmState::LEAF);
    assert_eq!(table.states.len() * table.verbs.len(), 48);
}
