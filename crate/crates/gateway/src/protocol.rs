//! Wire format: JSON text messages over one WebSocket.

use base64::Engine;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use conrft_core::intervention::StepReport;
use conrft_core::types::Image;

use crate::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub success_rate_20: f64,
    pub intervention_rate_20: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub episode: usize,
    pub step: usize,
    /// Base64 PNG of the first camera.
    pub image: String,
    pub proprio: Vec<f64>,
    pub policy_action: Vec<f64>,
    pub intervening: bool,
    pub metrics: FrameMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame(Frame),
    Pong,
    Error { message: String },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

/// A parsed console message. Types this server does not know are kept so
/// the caller can log them.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Takeover { on: bool },
    Action { a: Vec<f64> },
    Ping,
    Unknown(String),
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Known {
    Takeover { on: bool },
    Action { a: Vec<f64> },
    Ping,
}

/// Anything that is not a JSON object with a string `type`, or a known type
/// with the wrong fields, is malformed.
pub fn parse_client(text: &str) -> Result<ClientMessage, GatewayError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| GatewayError::Malformed("missing string field `type`".into()))?;
    if !matches!(kind, "takeover" | "action" | "ping") {
        return Ok(ClientMessage::Unknown(kind.to_string()));
    }
    let known: Known = serde_json::from_value(value).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    Ok(match known {
        Known::Takeover { on } => ClientMessage::Takeover { on },
        Known::Action { a } => ClientMessage::Action { a },
        Known::Ping => ClientMessage::Ping,
    })
}

/// 8-bit PNG of a float image in `[0, 1]`.
pub fn encode_png(img: &Image) -> Result<Vec<u8>, GatewayError> {
    let color = match img.channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        4 => ExtendedColorType::Rgba8,
        c => return Err(GatewayError::Channels(c)),
    };
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(&bytes, img.width as u32, img.height as u32, color)?;
    Ok(out)
}

pub fn frame_message(r: &StepReport<'_>) -> Result<ServerMessage, GatewayError> {
    let png = encode_png(r.image)?;
    Ok(ServerMessage::Frame(Frame {
        episode: r.episode,
        step: r.step,
        image: base64::engine::general_purpose::STANDARD.encode(png),
        proprio: r.proprio.to_vec(),
        policy_action: r.policy_action.0.clone(),
        intervening: r.intervening,
        metrics: FrameMetrics {
            success_rate_20: r.success_rate_20,
            intervention_rate_20: r.intervention_rate_20,
        },
    }))
}
