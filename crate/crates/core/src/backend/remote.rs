//! Generation-only backend for hosted chat-completions style APIs.
//!
//! Frames are sent as PNG data URIs alongside the prompt. Training,
//! checkpointing and attention export are declared unsupported.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{Backend, BackendError, Capabilities, GenerationParams, Tokenizer};
use crate::fusion::FrameClip;

pub const TOKEN_ENV: &str = "RBFT_API_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Endpoint root, e.g. `https://host/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    pub timeout_s: u64,
}

#[derive(Debug)]
pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s)))
            .build()
            .into();
        Self { cfg, agent }
    }

    fn frame_uris(clip: &FrameClip) -> Result<Vec<String>, BackendError> {
        clip.frames
            .iter()
            .map(|f| {
                let mut png = Vec::new();
                f.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
                    .map_err(|e| BackendError::InvalidInput(format!("frame encoding failed: {e}")))?;
                Ok(format!(
                    "data:image/png;base64,{}",
                    base64::engine::general_purpose::STANDARD.encode(png)
                ))
            })
            .collect()
    }
}

impl Backend for RemoteBackend {
    fn model_id(&self) -> String {
        format!("remote:{}@{}", self.cfg.model, self.cfg.base_url)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            generate: true,
            train: false,
            attention: false,
        }
    }

    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        None
    }

    fn config_values(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("remote.base_url".to_string(), self.cfg.base_url.clone()),
            ("remote.model".to_string(), self.cfg.model.clone()),
            ("remote.timeout_s".to_string(), self.cfg.timeout_s.to_string()),
        ])
    }

    fn generate(&self, clip: &FrameClip, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        params.validate()?;
        let token = std::env::var(TOKEN_ENV)
            .map_err(|_| BackendError::Unavailable(format!("{TOKEN_ENV} is not set")))?;
        let mut content = vec![json!({"type": "text", "text": prompt})];
        for uri in Self::frame_uris(clip)? {
            content.push(json!({"type": "image_url", "image_url": {"url": uri}}));
        }
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "seed": params.seed,
        });
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {token}"))
            .send_json(&body)
            .map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        let reply: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Unavailable(format!("{url}: unreadable response: {e}")))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Unavailable(format!("{url}: response has no message content")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remote_declares_generation_only() {
        let b = RemoteBackend::new(RemoteConfig {
            base_url: "http://127.0.0.1:9".into(),
            model: "m".into(),
            timeout_s: 1,
        });
        assert_eq!(
            b.capabilities(),
            Capabilities {
                generate: true,
                train: false,
                attention: false
            }
        );
        let clip_err = b.export_parameters().unwrap_err();
        assert!(matches!(clip_err, BackendError::Unsupported(_)));
    }
}
