//! HTTP client for a running daemon.

use std::io::{BufRead, BufReader};

use ureq::Agent;

use crate::api::ApiRequest;

pub struct Client {
    base: String,
    token: Option<String>,
    agent: Agent,
}

/// Status and raw body of a response.
pub struct RawResponse {
    pub status: u16,
    pub body: String,
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent: Agent = Agent::config_builder().http_status_as_error(false).build().into();
        Client {
            base: base.trim_end_matches('/').to_string(),
            token,
            agent,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn auth(&self) -> Option<String> {
        self.token.as_ref().map(|t| format!("Bearer {t}"))
    }

    pub fn send(&self, req: &ApiRequest) -> Result<RawResponse, ureq::Error> {
        let form = req.http();
        let url = format!("{}{}", self.base, form.path);
        let mut resp = match form.method {
            "GET" | "DELETE" => {
                let mut r = if form.method == "GET" { self.agent.get(&url) } else { self.agent.delete(&url) };
                for (k, v) in &form.query {
                    r = r.query(k, v);
                }
                if let Some(a) = self.auth() {
                    r = r.header("Authorization", a);
                }
                r.call()?
            }
            _ => {
                let mut r = if form.method == "PATCH" { self.agent.patch(&url) } else { self.agent.post(&url) };
                for (k, v) in &form.query {
                    r = r.query(k, v);
                }
                if let Some(a) = self.auth() {
                    r = r.header("Authorization", a);
                }
                match &form.body {
                    Some(b) => r.send_json(b)?,
                    None => r.send_empty()?,
                }
            }
        };
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string()?;
        Ok(RawResponse { status, body })
    }

    /// Streams `GET /events`, calling `each` per line until it returns false
    /// or the stream ends.
    pub fn events(&self, since: Option<u64>, follow: bool, mut each: impl FnMut(&str) -> bool) -> Result<u16, ureq::Error> {
        let mut r = self.agent.get(format!("{}/events", self.base));
        if let Some(s) = since {
            r = r.query("since", s.to_string());
        }
        if !follow {
            r = r.query("follow", "false");
        }
        if let Some(a) = self.auth() {
            r = r.header("Authorization", a);
        }
        let resp = r.call()?;
        let status = resp.status().as_u16();
        let reader = BufReader::new(resp.into_body().into_reader());
        for line in reader.lines() {
            let line = line?;
            if !each(&line) {
                break;
            }
        }
        Ok(status)
    }
}
