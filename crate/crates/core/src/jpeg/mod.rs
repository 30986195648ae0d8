//! Pinned baseline JPEG codec (sequential DCT, Huffman, 8-bit).
//!
//! The encoder uses the Annex K tables with linear quality scaling, a 64-bit
//! floating-point DCT, box-filter chroma downsampling and edge replication to
//! the MCU boundary. The decoder upsamples chroma by replication. Every step
//! is local to one MCU, so residuals of MCU-aligned content do not depend on
//! what surrounds it.

mod dct;
mod decoder;
mod encoder;
pub mod tables;

use serde::{Deserialize, Serialize};

pub use decoder::decode;
pub use encoder::encode;

use crate::error::Result;
use crate::imaging::ImageBuffer;

/// Chroma sampling layout of the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subsampling {
    /// Chroma halved in both directions (16×16 MCU).
    #[default]
    #[serde(rename = "4:2:0")]
    S420,
    /// Full-resolution chroma (8×8 MCU).
    #[serde(rename = "4:4:4")]
    S444,
}

impl Subsampling {
    pub fn mcu_size(self) -> usize {
        match self {
            Subsampling::S420 => 16,
            Subsampling::S444 => 8,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Subsampling::S420 => "4:2:0",
            Subsampling::S444 => "4:4:4",
        }
    }
}

impl std::str::FromStr for Subsampling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "4:2:0" | "420" => Ok(Subsampling::S420),
            "4:4:4" | "444" => Ok(Subsampling::S444),
            _ => Err(format!("unknown chroma subsampling '{s}' (expected 4:2:0 or 4:4:4)")),
        }
    }
}

/// Encodes at `quality` and decodes the result.
pub fn roundtrip(img: &ImageBuffer, quality: u8, subsampling: Subsampling) -> Result<ImageBuffer> {
    decode(&encode(img, quality, subsampling)?)
}
