//! Blocking HTTP implementation of the edge-to-cloud transport.

use fedcare_core::protocol::{ApiError, CloudRequest, CloudResponse, CloudTransport};
use fedcare_core::{Error, Result};
use reqwest::blocking::Client;
use reqwest::{Method, Url};
use serde_json::{Map, Value};
use std::time::Duration;

/// Where a request goes on the wire: method, path segments and JSON body.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub method: Method,
    pub segments: Vec<String>,
    pub body: Option<Value>,
}

/// Splits a request into path parameters and a body. The body is the
/// request's JSON form minus the `op` tag and whatever went into the path.
pub fn route(request: &CloudRequest) -> Result<Route> {
    let Value::Object(mut body) = serde_json::to_value(request)? else {
        return Err(Error::Protocol("request did not serialize to an object".into()));
    };
    body.remove("op");
    let mut take = |field: &str| -> Result<String> {
        match body.remove(field) {
            Some(Value::String(s)) => Ok(s),
            _ => Err(Error::Protocol(format!("request lacks `{field}`"))),
        }
    };
    let seg = |parts: &[&str]| parts.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let (method, segments, has_body) = match request {
        CloudRequest::Register { .. } => (Method::POST, seg(&["edges"]), true),
        CloudRequest::Deregister { .. } => (Method::DELETE, seg(&["edges", &take("edge_id")?]), false),
        CloudRequest::Declare { .. } => (Method::POST, seg(&["federation", &take("model_key")?, "declare"]), true),
        CloudRequest::Update { .. } => (Method::POST, seg(&["federation", &take("model_key")?, "update"]), true),
        CloudRequest::FetchModels { .. } => (Method::GET, seg(&["models", &take("model_key")?]), false),
        CloudRequest::UploadEncrypted { .. } => (Method::POST, seg(&["he", "datasets"]), true),
        CloudRequest::SubmitInference { .. } => (Method::POST, seg(&["he", "inference"]), true),
        CloudRequest::PollInference { .. } => (Method::GET, seg(&["he", "inference", &take("request_id")?]), false),
        CloudRequest::Surrogate { .. } => (Method::POST, seg(&["surrogates", &take("model_key")?]), true),
        CloudRequest::PollTasks => (Method::GET, seg(&["tasks"]), false),
    };
    Ok(Route { method, segments, body: has_body.then_some(Value::Object(body)) })
}

/// Rebuilds a request from its operation name, path parameters and body.
pub fn unroute(op: &str, params: &[(&str, String)], body: &[u8]) -> Result<CloudRequest> {
    let mut obj = if body.iter().all(u8::is_ascii_whitespace) {
        Map::new()
    } else {
        match serde_json::from_slice(body)? {
            Value::Object(m) => m,
            _ => return Err(Error::Decode("request body must be a JSON object".into())),
        }
    };
    obj.insert("op".into(), Value::String(op.into()));
    for (k, v) in params {
        obj.insert((*k).into(), Value::String(v.clone()));
    }
    Ok(serde_json::from_value(Value::Object(obj))?)
}

pub struct HttpTransport {
    base: Url,
    client: Client,
}

impl HttpTransport {
    pub fn new(base_url: &str) -> Result<Self> {
        let client = Client::builder().timeout(Duration::from_secs(60)).build().map_err(|e| Error::Unreachable(e.to_string()))?;
        Self::with_client(base_url, client)
    }

    /// Shares one connection pool across transports.
    pub fn with_client(base_url: &str, client: Client) -> Result<Self> {
        let base = Url::parse(base_url).map_err(|e| Error::Validation(format!("bad cloud url `{base_url}`: {e}")))?;
        if base.cannot_be_a_base() {
            return Err(Error::Validation(format!("bad cloud url `{base_url}`")));
        }
        Ok(Self { base, client })
    }

    fn url(&self, segments: &[String]) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut().expect("base url checked").pop_if_empty().extend(segments);
        url
    }
}

impl CloudTransport for HttpTransport {
    fn send(&mut self, token: Option<&str>, request: &CloudRequest) -> Result<CloudResponse> {
        let route = route(request)?;
        let mut req = self.client.request(route.method, self.url(&route.segments));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(body) = &route.body {
            req = req.header(reqwest::header::CONTENT_TYPE, "application/json").body(serde_json::to_vec(body)?);
        }
        let resp = req.send().map_err(|e| Error::Unreachable(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| Error::Unreachable(e.to_string()))?;
        if status.is_success() {
            return Ok(serde_json::from_slice(&bytes)?);
        }
        match serde_json::from_slice::<ApiError>(&bytes) {
            Ok(api) => Err(api.into()),
            Err(_) => Err(Error::Protocol(format!("HTTP {status}"))),
        }
    }
}
