use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TopologyKind {
    /// One encoder arm, one decoder arm.
    Siso,
    /// Two encoder arms fused into one decoder arm.
    Miso,
    /// Two encoder arms feeding two decoder arms.
    Mimo,
}

impl TopologyKind {
    pub fn in_arms(self) -> usize {
        match self {
            TopologyKind::Siso => 1,
            TopologyKind::Miso | TopologyKind::Mimo => 2,
        }
    }

    pub fn out_arms(self) -> usize {
        match self {
            TopologyKind::Siso | TopologyKind::Miso => 1,
            TopologyKind::Mimo => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TopologyKind::Siso => 0,
            TopologyKind::Miso => 1,
            TopologyKind::Mimo => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TopologyKind::Siso),
            1 => Some(TopologyKind::Miso),
            2 => Some(TopologyKind::Mimo),
            _ => None,
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::Siso => "siso",
            TopologyKind::Miso => "miso",
            TopologyKind::Mimo => "mimo",
        })
    }
}

impl FromStr for TopologyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "siso" => Ok(TopologyKind::Siso),
            "miso" => Ok(TopologyKind::Miso),
            "mimo" => Ok(TopologyKind::Mimo),
            other => Err(format!("unknown topology '{other}' (expected siso, miso or mimo)")),
        }
    }
}

/// Which encoder feature maps a MIMO decoder arm concatenates at each level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkipWiring {
    /// Both encoders' matched maps.
    Both,
    /// Only the encoder arm with the same index as the decoder arm.
    Matched,
}

impl fmt::Display for SkipWiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipWiring::Both => "both",
            SkipWiring::Matched => "matched",
        })
    }
}

impl FromStr for SkipWiring {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "both" => Ok(SkipWiring::Both),
            "matched" => Ok(SkipWiring::Matched),
            other => Err(format!("unknown skip wiring '{other}' (expected both or matched)")),
        }
    }
}

/// Shape of the encoder-decoder graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub kind: TopologyKind,
    /// Number of encoder blocks per arm (and decoder blocks per arm).
    pub depth: usize,
    /// Encoder output width per level, shallow to deep.
    pub channels: Vec<usize>,
    /// Width of the shallowest decoder block, which feeds the 1×1 synthesis head.
    pub head_width: usize,
    /// Channels of each input image.
    pub in_channels: usize,
    /// Channels synthesized by each head.
    pub out_channels: usize,
    /// Encoder arm whose pooling indices drive the shared MISO decoder.
    pub miso_index_arm: usize,
    pub mimo_skip: SkipWiring,
}

impl Default for Topology {
    fn default() -> Self {
        Topology::new(TopologyKind::Siso)
    }
}

impl Topology {
    pub const DEFAULT_DEPTH: usize = 3;
    pub const DEFAULT_CHANNELS: [usize; 3] = [32, 64, 64];
    pub const DEFAULT_HEAD_WIDTH: usize = 64;

    pub fn new(kind: TopologyKind) -> Self {
        Topology {
            kind,
            depth: Self::DEFAULT_DEPTH,
            channels: Self::DEFAULT_CHANNELS.to_vec(),
            head_width: Self::DEFAULT_HEAD_WIDTH,
            in_channels: 1,
            out_channels: 1,
            miso_index_arm: 0,
            mimo_skip: SkipWiring::Both,
        }
    }

    /// Replaces depth and widths in one go.
    pub fn with_widths(mut self, channels: &[usize], head_width: usize) -> Self {
        self.depth = channels.len();
        self.channels = channels.to_vec();
        self.head_width = head_width;
        self
    }

    pub fn in_arms(&self) -> usize {
        self.kind.in_arms()
    }

    pub fn out_arms(&self) -> usize {
        self.kind.out_arms()
    }

    /// Spatial size must be a multiple of this.
    pub fn spatial_factor(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Param("topology depth must be at least 1".into()));
        }
        if self.depth > 16 {
            return Err(Error::Param(format!("topology depth {} is too large", self.depth)));
        }
        if self.channels.len() != self.depth {
            return Err(Error::Param(format!(
                "topology has depth {} but {} channel widths",
                self.depth,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.head_width == 0 {
            return Err(Error::Param("channel widths must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Param("image channel counts must be positive".into()));
        }
        if self.miso_index_arm >= 2 {
            return Err(Error::Param(format!(
                "miso_index_arm must be 0 or 1, got {}",
                self.miso_index_arm
            )));
        }
        Ok(())
    }

    /// Output width of the decoder block at `level`.
    ///
    /// Above level 0 it must equal the encoder width one level up, because the
    /// next decoder unpools it with that encoder's per-channel indices.
    pub fn decoder_width(&self, level: usize) -> usize {
        if level == 0 {
            self.head_width
        } else {
            self.channels[level - 1]
        }
    }

    /// Encoder arms whose level maps are concatenated into decoder arm `arm`.
    pub fn skip_arms(&self, arm: usize) -> Vec<usize> {
        match self.kind {
            TopologyKind::Siso => vec![0],
            TopologyKind::Miso => vec![0, 1],
            TopologyKind::Mimo => match self.mimo_skip {
                SkipWiring::Both => vec![0, 1],
                SkipWiring::Matched => vec![arm],
            },
        }
    }

    /// Encoder arm whose pooling indices decoder arm `arm` unpools with.
    pub fn index_arm(&self, arm: usize) -> usize {
        match self.kind {
            TopologyKind::Siso => 0,
            TopologyKind::Miso => self.miso_index_arm,
            TopologyKind::Mimo => arm,
        }
    }

    /// Input width of the decoder block at `level`.
    pub fn decoder_in_width(&self, level: usize, arm: usize) -> usize {
        let below = if level + 1 == self.depth {
            self.channels[self.depth - 1]
        } else {
            self.decoder_width(level + 1)
        };
        below + self.skip_arms(arm).len() * self.channels[level]
    }
}
