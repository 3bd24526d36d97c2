// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-delimited JSON request/response over TCP, used by the external
//! entailment scorer and the external model backend.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Environment variable naming the external scorer/backend endpoint
/// (`host:port`).
pub const ENDPOINT_ENV: &str = "VALSTEER_ENDPOINT";

pub fn endpoint_from_env() -> Option<String> {
    std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.trim().is_empty())
}

/// One connection per request; one JSON object per line each way.
#[derive(Debug, Clone)]
pub struct LineClient {
    endpoint: String,
    timeout: Duration,
}

impl LineClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        LineClient {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn request<Req: Serialize, Resp: DeserializeOwned>(&self, req: &Req) -> Result<Resp> {
        let backend_err = |e: std::io::Error| Error::Backend(format!("{}: {e}", self.endpoint));
        let mut stream = TcpStream::connect(&self.endpoint).map_err(backend_err)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(backend_err)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(backend_err)?;

        let mut line = serde_json::to_string(req).map_err(|e| Error::parse("request", e))?;
        line.push('\n');
        stream.write_all(line.as_bytes()).map_err(backend_err)?;
        stream.flush().map_err(backend_err)?;

        let mut reader = BufReader::new(stream);
        let mut reply = String::new();
        reader.read_line(&mut reply).map_err(backend_err)?;
        if reply.trim().is_empty() {
            return Err(Error::Backend(format!("{}: empty response", self.endpoint)));
        }
        serde_json::from_str(&reply).map_err(|e| Error::parse(&self.endpoint, e))
    }
}
