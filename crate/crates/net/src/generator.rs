use std::time::Duration;

use reqwest::blocking::Client;

use kgrid_core::harness::{parse_generation, Generation, GenerationRequest, Generator, GeneratorError};

/// Posts each generation request to a URL and reads one candidate (or
/// `{"stop": true}`) back.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    url: String,
    http: Client,
}

impl HttpGenerator {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, GeneratorError> {
        let http = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GeneratorError::Failed(e.to_string()))?;
        Ok(Self { url: url.into(), http })
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, GeneratorError> {
        let resp = self
            .http
            .post(&self.url)
            .json(request)
            .send()
            .map_err(|e| GeneratorError::Failed(format!("POST {}: {e}", self.url)))?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| GeneratorError::Failed(e.to_string()))?;
        if !status.is_success() {
            return Err(GeneratorError::Failed(format!(
                "{} answered {status}: {}",
                self.url,
                String::from_utf8_lossy(&body).trim()
            )));
        }
        parse_generation(&body)
    }
}
