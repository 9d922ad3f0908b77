//! JSON bodies exchanged with model services.
//!
//! Chat follows the widely deployed completion-server shape (`messages`,
//! `max_tokens`, `logprobs` + `top_logprobs`), so standard inference servers
//! plug in unchanged. Images travel inline as base64 data URLs.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image { mime: String, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn user(parts: Vec<Part>) -> Self {
        Message { role: Role::User, parts }
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &[u8]> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image { data, .. } => Some(data.as_slice()),
            Part::Text(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    /// Filled from the backend's model name when empty.
    pub model: String,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub logprobs: bool,
    pub top_logprobs: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>, max_tokens: u32) -> Self {
        ChatRequest {
            model: String::new(),
            messages,
            max_tokens,
            temperature: 0.0,
            logprobs: false,
            top_logprobs: None,
        }
    }

    /// Concatenated text of all messages.
    pub fn text(&self) -> String {
        self.messages.iter().map(Message::text).collect::<Vec<_>>().join("\n")
    }

    pub fn has_image(&self) -> bool {
        self.messages.iter().any(|m| m.images().next().is_some())
    }

    pub fn to_wire(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let content: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => json!({"type": "text", "text": t}),
                        Part::Image { mime, data } => json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{mime};base64,{}", B64.encode(data))},
                        }),
                    })
                    .collect();
                json!({"role": m.role, "content": content})
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        });
        if self.logprobs {
            body["logprobs"] = json!(true);
            if let Some(n) = self.top_logprobs {
                body["top_logprobs"] = json!(n);
            }
        }
        body
    }

    pub fn from_wire(v: &Value) -> Result<Self, String> {
        let messages = v["messages"]
            .as_array()
            .ok_or("missing messages")?
            .iter()
            .map(|m| {
                let role: Role = serde_json::from_value(m["role"].clone()).map_err(|e| e.to_string())?;
                let parts = match &m["content"] {
                    Value::String(s) => vec![Part::Text(s.clone())],
                    Value::Array(items) => items.iter().map(part_from_wire).collect::<Result<_, _>>()?,
                    _ => return Err("content must be a string or array".to_string()),
                };
                Ok(Message { role, parts })
            })
            .collect::<Result<_, String>>()?;
        Ok(ChatRequest {
            model: v["model"].as_str().unwrap_or_default().to_string(),
            messages,
            max_tokens: v["max_tokens"].as_u64().ok_or("missing max_tokens")? as u32,
            temperature: v["temperature"].as_f64().unwrap_or(1.0),
            logprobs: v["logprobs"].as_bool().unwrap_or(false),
            top_logprobs: v["top_logprobs"].as_u64().map(|n| n as u32),
        })
    }
}

fn part_from_wire(p: &Value) -> Result<Part, String> {
    match p["type"].as_str() {
        Some("text") => Ok(Part::Text(p["text"].as_str().ok_or("text part without text")?.to_string())),
        Some("image_url") => {
            let url = p["image_url"]["url"].as_str().ok_or("image part without url")?;
            let rest = url.strip_prefix("data:").ok_or("only inline data URLs are supported")?;
            let (mime, data) = rest.split_once(";base64,").ok_or("data URL is not base64")?;
            Ok(Part::Image { mime: mime.to_string(), data: B64.decode(data).map_err(|e| e.to_string())? })
        }
        other => Err(format!("unknown content part type {other:?}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub content: String,
    /// Top alternatives for the first generated token, when requested.
    pub alternatives: Option<Vec<TokenAlternative>>,
    pub finish_reason: Option<String>,
}

impl ChatResponse {
    pub fn to_wire(&self) -> Value {
        let mut choice = json!({
            "index": 0,
            "message": {"role": "assistant", "content": self.content},
            "finish_reason": self.finish_reason,
        });
        if let Some(alts) = &self.alternatives {
            let first = alts.first().cloned().unwrap_or(TokenAlternative { token: String::new(), logprob: 0.0 });
            choice["logprobs"] = json!({
                "content": [{"token": first.token, "logprob": first.logprob, "top_logprobs": alts}],
            });
        }
        json!({"object": "chat.completion", "choices": [choice]})
    }

    pub fn from_wire(v: &Value) -> Result<Self, String> {
        let choice = v["choices"].get(0).ok_or("response has no choices")?;
        let content = match &choice["message"]["content"] {
            Value::String(s) => s.clone(),
            Value::Null => String::new(),
            _ => return Err("message content is not a string".into()),
        };
        let alternatives = match choice["logprobs"]["content"].get(0) {
            Some(tok) => {
                let alts: Vec<TokenAlternative> =
                    serde_json::from_value(tok["top_logprobs"].clone()).map_err(|e| format!("top_logprobs: {e}"))?;
                Some(alts)
            }
            None => None,
        };
        Ok(ChatResponse { content, alternatives, finish_reason: choice["finish_reason"].as_str().map(String::from) })
    }
}

/// One box as returned by a detector service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
}

pub fn detect_request_body(image: &[u8], categories: &[String], threshold: f64) -> Value {
    json!({
        "image": B64.encode(image),
        "categories": categories,
        "score_threshold": threshold,
    })
}

pub fn scorer_request_body(image: &[u8]) -> Value {
    json!({ "image": B64.encode(image) })
}

pub fn decode_image_field(v: &Value) -> Result<Vec<u8>, String> {
    let s = v["image"].as_str().ok_or("missing image field")?;
    B64.decode(s).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_request_round_trip() {
        let mut req = ChatRequest::new(
            vec![Message::user(vec![
                Part::Image { mime: "image/png".into(), data: vec![1, 2, 3] },
                Part::Text("Does this image show a cat?".into()),
            ])],
            1,
        );
        req.model = "m".into();
        req.logprobs = true;
        req.top_logprobs = Some(20);
        let wire = req.to_wire();
        assert_eq!(wire["top_logprobs"], 20);
        assert_eq!(wire["temperature"], 0.0);
        assert_eq!(wire["messages"][0]["content"][0]["image_url"]["url"], "data:image/png;base64,AQID");
        assert_eq!(ChatRequest::from_wire(&wire).unwrap(), req);
    }

    #[test]
    fn chat_response_round_trip() {
        let resp = ChatResponse {
            content: "Yes".into(),
            alternatives: Some(vec![
                TokenAlternative { token: "Yes".into(), logprob: -0.1 },
                TokenAlternative { token: "No".into(), logprob: -2.5 },
            ]),
            finish_reason: Some("length".into()),
        };
        assert_eq!(ChatResponse::from_wire(&resp.to_wire()).unwrap(), resp);
    }

    #[test]
    fn plain_string_content_accepted() {
        let v = json!({"choices": [{"message": {"content": "hi"}, "finish_reason": "stop"}]});
        let r = ChatResponse::from_wire(&v).unwrap();
        assert_eq!(r.content, "hi");
        assert!(r.alternatives.is_none());
    }
}
