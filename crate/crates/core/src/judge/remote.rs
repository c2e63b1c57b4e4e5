use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, JudgeRequest};

/// Environment variable holding the bearer token for the remote judge.
pub const API_KEY_ENV: &str = "EMOCUE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of a chat-completions style endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_max_tokens() -> u32 {
    64
}

fn default_timeout() -> u64 {
    60
}

/// Sends each prompt as a single user message:
///
/// ```text
/// POST {endpoint}
/// {"model": ..., "messages": [{"role": "user", "content": prompt}],
///  "temperature": 0, "max_tokens": ...}
/// ```
///
/// and reads `choices[0].message.content` from the reply. 429 and 5xx
/// responses and transport errors are transient; other statuses are fatal.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        RemoteBackend {
            config,
            agent,
            api_key: std::env::var(API_KEY_ENV).ok(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "max_tokens": self.config.max_tokens,
        })
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

impl Backend for RemoteBackend {
    fn complete(&self, request: &JudgeRequest<'_>) -> Result<String, BackendError> {
        let mut call = self
            .agent
            .post(&self.config.endpoint)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        match call.send_json(self.request_body(request.prompt)) {
            Ok(resp) => {
                let body: Completion = resp
                    .into_json()
                    .map_err(|e| BackendError::Transient(format!("bad response body: {e}")))?;
                body.choices
                    .into_iter()
                    .next()
                    .map(|c| c.message.content)
                    .ok_or_else(|| BackendError::Transient("response has no choices".into()))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", text.chars().take(200).collect::<String>());
                if code == 429 || code >= 500 {
                    Err(BackendError::Transient(msg))
                } else {
                    Err(BackendError::Fatal(msg))
                }
            }
            Err(e) => Err(BackendError::Transient(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::judge::{Judge, JudgeError, RetryPolicy, VerdictCache, VerdictValue};

    /// Serves one canned (status, body) per connection and records each
    /// request's headers and body.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    head.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(format!("{head}\n{}", String::from_utf8_lossy(&buf)));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen)
    }

    fn completion(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn judge(url: String, attempts: u32) -> Judge {
        let backend = RemoteBackend::new(RemoteConfig {
            endpoint: url,
            model: "judge-model".into(),
            max_tokens: 8,
            timeout_secs: 5,
        })
        .with_api_key(Some("secret".into()));
        Judge::new(
            Arc::new(backend),
            VerdictCache::in_memory(),
            RetryPolicy {
                max_attempts: attempts,
                backoff_base_ms: 1,
            },
            "t",
        )
    }

    fn request<'a>() -> JudgeRequest<'a> {
        JudgeRequest {
            classifier_id: "pet_name",
            prompt: "Is there a pet name?",
            unit_text: "hi sweetie",
            fingerprint: "fp",
        }
    }

    #[test]
    fn retries_transient_status_then_parses() {
        let (url, seen) = serve(vec![
            (503, "{}".into()),
            (429, "{}".into()),
            (200, completion("Yes, it does.")),
        ]);
        let j = judge(url, 3);
        let v = j.classify(&request()).unwrap();
        assert_eq!(v.value, VerdictValue::Yes);
        assert_eq!(j.backend_calls(), 3);
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen[2].to_ascii_lowercase().contains("authorization: bearer secret"));
        let body: serde_json::Value = serde_json::from_str(seen[2].split("\n\n").last().unwrap()).unwrap();
        assert_eq!(body["model"], "judge-model");
        assert_eq!(body["messages"][0]["content"], "Is there a pet name?");
        assert_eq!(body["max_tokens"], 8);
        // cached
        j.classify(&request()).unwrap();
        assert_eq!(j.backend_calls(), 3);
    }

    #[test]
    fn client_error_is_fatal() {
        let (url, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let err = judge(url, 3).classify(&request()).unwrap_err();
        assert!(matches!(err, JudgeError::Backend(_)), "{err:?}");
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn attempts_run_out() {
        let (url, _) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
        let err = judge(url, 2).classify(&request()).unwrap_err();
        assert!(matches!(err, JudgeError::Exhausted { attempts: 2, .. }), "{err:?}");
    }

    #[test]
    fn malformed_body_is_transient() {
        let (url, _) = serve(vec![(200, "{\"choices\": []}".into()), (200, completion("no"))]);
        let v = judge(url, 2).classify(&request()).unwrap();
        assert_eq!(v.value, VerdictValue::No);
    }
}
