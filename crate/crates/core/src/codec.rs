//! Fixed-width token stream files.
//!
//! Layout (multi-byte integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | `MGVQ` |
//! | 1 | version (1) |
//! | 2 | `G` |
//! | 4 | `K` |
//! | 2 + 2 | grid height, width |
//! | 2 + 2 | original image height, width |
//! | .. | indices, group-major then row-major, `ceil(log2 K)` bits each, MSB first, zero-padded |

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::{read_image, Image};
use crate::mgq::TokenMap;
use crate::pipeline::Tokenizer;

pub const STREAM_MAGIC: &[u8; 4] = b"MGVQ";
pub const STREAM_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 19;

/// `ceil(log2 k)`; zero for `k <= 1`.
pub fn bits_per_index(k: u32) -> u32 {
    if k <= 1 {
        0
    } else {
        32 - (k - 1).leading_zeros()
    }
}

/// Payload length in bytes for a `groups x grid_h x grid_w` token map.
pub fn payload_len(groups: usize, grid_h: usize, grid_w: usize, k: u32) -> usize {
    (groups * grid_h * grid_w * bits_per_index(k) as usize).div_ceil(8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub groups: u16,
    pub codebook_size: u32,
    pub grid_h: u16,
    pub grid_w: u16,
    pub orig_h: u16,
    pub orig_w: u16,
}

impl StreamHeader {
    pub fn payload_len(&self) -> usize {
        payload_len(
            self.groups as usize,
            self.grid_h as usize,
            self.grid_w as usize,
            self.codebook_size,
        )
    }

    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut b = [0u8; HEADER_BYTES];
        b[..4].copy_from_slice(STREAM_MAGIC);
        b[4] = STREAM_VERSION;
        b[5..7].copy_from_slice(&self.groups.to_le_bytes());
        b[7..11].copy_from_slice(&self.codebook_size.to_le_bytes());
        b[11..13].copy_from_slice(&self.grid_h.to_le_bytes());
        b[13..15].copy_from_slice(&self.grid_w.to_le_bytes());
        b[15..17].copy_from_slice(&self.orig_h.to_le_bytes());
        b[17..19].copy_from_slice(&self.orig_w.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let fmt = |message: String| Error::Format {
            what: "token stream",
            message,
        };
        if b.len() < HEADER_BYTES {
            return Err(fmt(format!(
                "{} bytes is shorter than the {HEADER_BYTES}-byte header",
                b.len()
            )));
        }
        if &b[..4] != STREAM_MAGIC {
            return Err(fmt(format!("bad magic {:?}, expected \"MGVQ\"", &b[..4])));
        }
        if b[4] != STREAM_VERSION {
            return Err(Error::Version {
                what: "token stream",
                found: b[4],
                supported: STREAM_VERSION,
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let h = Self {
            groups: u16_at(5),
            codebook_size: u32::from_le_bytes(b[7..11].try_into().unwrap()),
            grid_h: u16_at(11),
            grid_w: u16_at(13),
            orig_h: u16_at(15),
            orig_w: u16_at(17),
        };
        if h.groups == 0 || h.codebook_size == 0 {
            return Err(fmt(format!(
                "header has G={} K={}",
                h.groups, h.codebook_size
            )));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub header: StreamHeader,
    pub payload: Vec<u8>,
}

impl TokenStream {
    pub fn new(
        tokens: &TokenMap,
        codebook_size: u32,
        orig_h: usize,
        orig_w: usize,
    ) -> Result<Self> {
        let narrow = |v: usize, what: &str| {
            u16::try_from(v)
                .map_err(|_| Error::invalid(format!("{what} {v} does not fit in 16 bits")))
        };
        let header = StreamHeader {
            groups: narrow(tokens.groups(), "group count")?,
            codebook_size,
            grid_h: narrow(tokens.grid_h, "grid height")?,
            grid_w: narrow(tokens.grid_w, "grid width")?,
            orig_h: narrow(orig_h, "image height")?,
            orig_w: narrow(orig_w, "image width")?,
        };
        Ok(Self {
            header,
            payload: pack_indices(tokens, codebook_size)?,
        })
    }

    pub fn tokens(&self) -> Result<TokenMap> {
        unpack_indices(&self.payload, &self.header)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = StreamHeader::from_bytes(bytes)?;
        let payload = bytes[HEADER_BYTES..].to_vec();
        if payload.len() != header.payload_len() {
            return Err(Error::Format {
                what: "token stream",
                message: format!(
                    "payload is {} bytes, header implies {}",
                    payload.len(),
                    header.payload_len()
                ),
            });
        }
        Ok(Self { header, payload })
    }
}

/// MSB-first bit accumulator.
struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn new(capacity: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(capacity),
            acc: 0,
            filled: 0,
        }
    }

    fn put(&mut self, value: u32, bits: u32) {
        if bits == 0 {
            return;
        }
        self.acc = (self.acc << bits) | value as u64;
        self.filled += bits;
        while self.filled >= 8 {
            self.filled -= 8;
            self.bytes.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push((self.acc << (8 - self.filled)) as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn get(&mut self, bits: u32) -> u32 {
        let mut v = 0u32;
        for _ in 0..bits {
            let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        v
    }
}

pub fn pack_indices(tokens: &TokenMap, k: u32) -> Result<Vec<u8>> {
    tokens.validate(k as usize)?;
    let bits = bits_per_index(k);
    let mut w = BitWriter::new(payload_len(
        tokens.groups(),
        tokens.grid_h,
        tokens.grid_w,
        k,
    ));
    for grid in &tokens.indices {
        for &i in grid {
            w.put(i, bits);
        }
    }
    Ok(w.finish())
}

pub fn unpack_indices(payload: &[u8], header: &StreamHeader) -> Result<TokenMap> {
    if payload.len() != header.payload_len() {
        return Err(Error::Format {
            what: "token stream",
            message: format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                header.payload_len()
            ),
        });
    }
    let bits = bits_per_index(header.codebook_size);
    let (gh, gw) = (header.grid_h as usize, header.grid_w as usize);
    let mut r = BitReader {
        bytes: payload,
        pos: 0,
    };
    let indices: Vec<Vec<u32>> = (0..header.groups)
        .map(|_| (0..gh * gw).map(|_| r.get(bits)).collect())
        .collect();
    let tokens = TokenMap {
        grid_h: gh,
        grid_w: gw,
        indices,
    };
    // widths that are not powers of two can encode values >= K
    tokens.validate(header.codebook_size as usize)?;
    Ok(tokens)
}

/// Sizes reported by [`encode_image`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EncodeSummary {
    pub orig_h: usize,
    pub orig_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// 8-bit RGB size of the encoded (cropped) region.
    pub raw_bytes: usize,
    pub payload_bytes: usize,
    pub file_bytes: usize,
}

impl EncodeSummary {
    pub fn compression_ratio(&self) -> f64 {
        self.raw_bytes as f64 / self.payload_bytes.max(1) as f64
    }
}

/// Tokenizes an in-memory image, center-cropping to a multiple of the
/// downsampling factor first.
pub fn encode_to_stream(image: &Image, tok: &Tokenizer) -> Result<TokenStream> {
    let cropped = image.crop_to_multiple(tok.model.downsample)?;
    let tokens = tok.encode_tokens(&cropped)?;
    TokenStream::new(
        &tokens,
        tok.codebook_size() as u32,
        image.height,
        image.width,
    )
}

pub fn encode_image(
    input: impl AsRef<Path>,
    tok: &Tokenizer,
    output: impl AsRef<Path>,
) -> Result<EncodeSummary> {
    let image = read_image(input)?;
    let stream = encode_to_stream(&image, tok)?;
    let bytes = stream.to_bytes();
    let output = output.as_ref();
    std::fs::write(output, &bytes).map_err(|e| Error::io(output, e))?;
    let h = stream.header;
    let summary = EncodeSummary {
        orig_h: image.height,
        orig_w: image.width,
        grid_h: h.grid_h as usize,
        grid_w: h.grid_w as usize,
        raw_bytes: h.grid_h as usize * h.grid_w as usize * tok.model.downsample.pow(2) * 3,
        payload_bytes: stream.payload.len(),
        file_bytes: bytes.len(),
    };
    log::info!(
        "{}x{} -> {} payload bytes, {:.1}:1",
        summary.orig_h,
        summary.orig_w,
        summary.payload_bytes,
        summary.compression_ratio()
    );
    Ok(summary)
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<TokenStream> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TokenStream::from_bytes(&bytes)
}

/// Reconstructs the cropped region from a stream; `keep` limits decoding to
/// the first `keep` groups.
pub fn decode_stream(stream: &TokenStream, tok: &Tokenizer, keep: Option<usize>) -> Result<Image> {
    let h = stream.header;
    if h.groups as usize != tok.groups() || h.codebook_size as usize != tok.codebook_size() {
        return Err(Error::Mismatch(format!(
            "stream has G={} K={}, checkpoint has G={} K={}",
            h.groups,
            h.codebook_size,
            tok.groups(),
            tok.codebook_size()
        )));
    }
    tok.decode_tokens(&stream.tokens()?, keep)
}

pub fn decode_tokens(
    input: impl AsRef<Path>,
    tok: &Tokenizer,
    keep: Option<usize>,
    output: impl AsRef<Path>,
) -> Result<Image> {
    let img = decode_stream(&read_stream(input)?, tok, keep)?;
    img.save_png(output)?;
    Ok(img)
}
