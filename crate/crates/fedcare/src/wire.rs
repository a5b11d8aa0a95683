//! Loopback HTTP network for the scenario harness.

use crate::client::HttpTransport;
use crate::cloud_api;
use fedcare_core::cloud::Cloud;
use fedcare_core::protocol::CloudTransport;
use fedcare_core::sim::Network;
use fedcare_core::{Error, Result};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use tokio::runtime::Runtime;

/// Serves each cloud the harness connects to on 127.0.0.1 with an
/// ephemeral port. Servers stop when the network is dropped.
pub struct Wire {
    runtime: Runtime,
    client: reqwest::blocking::Client,
    servers: Vec<(Arc<Mutex<Cloud>>, String)>,
}

impl Wire {
    pub fn new() -> Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| Error::Storage(e.to_string()))?;
        let client = reqwest::blocking::Client::builder().build().map_err(|e| Error::Unreachable(e.to_string()))?;
        Ok(Self { runtime, client, servers: Vec::new() })
    }

    fn base_url(&mut self, cloud: &Arc<Mutex<Cloud>>) -> Result<String> {
        if let Some((_, url)) = self.servers.iter().find(|(c, _)| Arc::ptr_eq(c, cloud)) {
            return Ok(url.clone());
        }
        let listener = TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let url = format!("http://{}", listener.local_addr()?);
        let app = cloud_api::router(cloud.clone());
        let _guard = self.runtime.enter();
        let listener = tokio::net::TcpListener::from_std(listener)?;
        self.runtime.spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                log::error!("loopback cloud server stopped: {e}");
            }
        });
        self.servers.push((cloud.clone(), url.clone()));
        Ok(url)
    }
}

impl Network for Wire {
    fn name(&self) -> &str {
        "wire"
    }

    fn connect(&mut self, cloud: &Arc<Mutex<Cloud>>, _edge_id: &str) -> Result<Box<dyn CloudTransport>> {
        let url = self.base_url(cloud)?;
        Ok(Box::new(HttpTransport::with_client(&url, self.client.clone())?))
    }
}
