use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::{Query, State};
use axum::routing::post;
use axum::{Json, Router};
use rcms_core::registry::{Clock, ServiceRegistry, DEFAULT_TTL};
use rcms_core::wire::{Ack, Body, Envelope, FsmTable, Kind, ProbeOk, Services, ENVELOPE_PATH, REGISTRY_PATH};
use serde::Deserialize;

use crate::server::{serve_on, EnvelopeHandler, Reply, ServerHandle};

pub struct RegistryService {
    registry: ServiceRegistry,
}

impl RegistryService {
    pub fn new(ttl: Duration) -> Arc<Self> {
        Arc::new(Self {
            registry: ServiceRegistry::new(ttl),
        })
    }

    pub fn with_clock(ttl: Duration, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Self {
            registry: ServiceRegistry::with_clock(ttl, clock),
        })
    }

    pub fn registry(&self) -> &ServiceRegistry {
        &self.registry
    }

    pub fn router(self: &Arc<Self>) -> Router {
        let handler: Arc<dyn EnvelopeHandler> = self.clone();
        Router::new()
            .route(ENVELOPE_PATH, post(crate::server::envelope_endpoint))
            .route(REGISTRY_PATH, post(crate::server::envelope_endpoint).get(lookup_get))
            .with_state(handler)
    }

    pub async fn spawn(self: &Arc<Self>, addr: &str) -> std::io::Result<ServerHandle> {
        serve_on(crate::server::bind(addr).await?, self.router())
    }
}

impl Default for RegistryService {
    fn default() -> Self {
        Self {
            registry: ServiceRegistry::new(DEFAULT_TTL),
        }
    }
}

#[derive(Deserialize)]
struct LookupParams {
    name: String,
}

/// Plain JSON lookup for browsers: `GET /rcms/v1/registry?name=ims`.
async fn lookup_get(State(h): State<Arc<dyn EnvelopeHandler>>, Query(p): Query<LookupParams>) -> Json<Services> {
    let reply = h
        .handle(Envelope::new(
            Kind::Lookup,
            "http",
            "registry",
            rcms_core::wire::Lookup { name: p.name },
        ))
        .await;
    match reply.env.map(|e| e.body) {
        Some(Body::Services(s)) => Json(s),
        _ => Json(Services { records: Vec::new() }),
    }
}

#[async_trait]
impl EnvelopeHandler for RegistryService {
    fn name(&self) -> String {
        "registry".into()
    }

    async fn handle(&self, env: Envelope) -> Reply {
        let me = "registry";
        match (&env.kind, &env.body) {
            (Kind::Register, Body::ServiceRecord(rec)) => {
                self.registry.register(rec.clone());
                Reply::to(&env, me, Kind::Ack, Ack::default())
            }
            (Kind::Lookup, Body::Lookup(l)) => {
                let records = self.registry.lookup(&l.name);
                Reply::to(&env, me, Kind::Result, Services { records })
            }
            (Kind::Command, Body::Deregister(d)) => {
                let removed = self.registry.deregister(&d.name, &d.instance_id);
                let note = (!removed).then(|| "not registered".to_string());
                Reply::to(&env, me, Kind::Ack, Ack { note })
            }
            (Kind::Query, Body::Probe(_)) => Reply::to(&env, me, Kind::Result, ProbeOk { service: me.into() }),
            (Kind::Query, Body::FsmTableQuery(_)) => Reply::to(&env, me, Kind::Result, FsmTable::current()),
            _ => Reply::unsupported(&env, me),
        }
    }
}
