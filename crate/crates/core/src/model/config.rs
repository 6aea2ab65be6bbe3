use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

/// How per-antenna, per-time features are pooled into one vector per joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Aggregator {
    /// Softmax reweighting over time, then over antennas.
    Ltsa,
    /// Uniform mean over time and antennas.
    Gap,
    /// Per-joint self-attention over antenna×time tokens, then mean pooling.
    PjMhsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Graph,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub antennas: usize,
    pub subcarriers: usize,
    pub frames: usize,
    pub joints: usize,
    /// Encoder output channels (D1).
    pub encoder_channels: usize,
    /// Channels after antenna fusion (D2).
    pub fused_channels: usize,
    /// Width of the graph latent (D3).
    pub graph_channels: usize,
    /// Compressed temporal length (W).
    pub compressed_frames: usize,
    /// Chebyshev order K (number of polynomial terms).
    pub cheb_order: usize,
    /// Number of graph-attention blocks (N).
    pub blocks: usize,
    pub heads: usize,
    pub aggregator: Aggregator,
    pub head: HeadKind,
    pub cheb_bias: bool,
    /// Network outputs are multiplied by this to obtain millimeters.
    pub output_unit_mm: f64,
    /// Hidden width of the MLP head; derived from parameter parity when absent.
    pub mlp_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            antennas: 3,
            subcarriers: 114,
            frames: 10,
            joints: 17,
            encoder_channels: 128,
            fused_channels: 64,
            graph_channels: 128,
            compressed_frames: 5,
            cheb_order: 2,
            blocks: 4,
            heads: 4,
            aggregator: Aggregator::Ltsa,
            head: HeadKind::Graph,
            cheb_bias: true,
            output_unit_mm: 1000.0,
            mlp_hidden: None,
        }
    }
}

pub const MIN_SUBCARRIERS: usize = 32;
pub const MIN_FRAMES: usize = 4;

impl ModelConfig {
    /// Reduced widths for single-CPU runs on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            encoder_channels: 16,
            fused_channels: 16,
            graph_channels: 32,
            ..Self::default()
        }
    }

    /// The smallest configuration used for finite-difference audits.
    pub fn tiny() -> Self {
        Self {
            antennas: 2,
            subcarriers: 32,
            frames: 4,
            joints: 5,
            encoder_channels: 8,
            fused_channels: 8,
            graph_channels: 16,
            compressed_frames: 2,
            cheb_order: 2,
            blocks: 1,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("antennas", self.antennas),
            ("subcarriers", self.subcarriers),
            ("frames", self.frames),
            ("joints", self.joints),
            ("encoder_channels", self.encoder_channels),
            ("fused_channels", self.fused_channels),
            ("graph_channels", self.graph_channels),
            ("compressed_frames", self.compressed_frames),
            ("cheb_order", self.cheb_order),
            ("heads", self.heads),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.head == HeadKind::Graph && !(1..=8).contains(&self.blocks) {
            return Err(ModelError::Config(format!("blocks must be in 1..=8, got {}", self.blocks)));
        }
        if self.subcarriers < MIN_SUBCARRIERS || self.frames < MIN_FRAMES {
            return Err(ModelError::Config(format!(
                "encoder needs at least {MIN_SUBCARRIERS} subcarriers and {MIN_FRAMES} frames, got {}x{}",
                self.subcarriers, self.frames
            )));
        }
        if self.joints > self.subcarriers || self.compressed_frames > self.frames {
            return Err(ModelError::Config(format!(
                "cannot pool {}x{} input to {} joints x {} steps",
                self.subcarriers, self.frames, self.joints, self.compressed_frames
            )));
        }
        if self.head == HeadKind::Graph && self.graph_channels % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "graph_channels {} not divisible by heads {}",
                self.graph_channels, self.heads
            )));
        }
        if self.aggregator == Aggregator::PjMhsa && self.fused_channels % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "fused_channels {} not divisible by heads {}",
                self.fused_channels, self.heads
            )));
        }
        if !(self.output_unit_mm > 0.0 && self.output_unit_mm.is_finite()) {
            return Err(ModelError::Config("output_unit_mm must be positive".into()));
        }
        Ok(())
    }

    /// Channel widths of the encoder stem and its three residual blocks.
    pub fn encoder_widths(&self) -> [usize; 4] {
        let d = self.encoder_channels;
        let q = (d / 4).max(1);
        [q, q, (d / 2).max(1), d]
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the architecture.
    pub fn digest(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
