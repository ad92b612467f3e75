//! Typed artifacts and their canonical encodings.
//!
//! Every value that flows along a pipeline edge is an [`Artifact`]: an
//! immutable payload tagged with an [`ArtifactType`] and identified by the
//! SHA-256 digest of its canonical byte sequence.
//!
//! Canonical hash input per payload kind:
//!
//! * rasters: `width ‖ height ‖ channel_count ‖ pixels`, the three dimensions
//!   as 8-byte big-endian integers followed by row-major 8-bit samples;
//! * text: the UTF-8 bytes, untouched;
//! * landmarks and alignment sessions: compact JSON with sorted keys and
//!   shortest round-trip decimal floats.
//!
//! Rasters travel as PNG on disk and on the wire, but hashing and equality
//! always operate on decoded pixels.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::face_align::AlignSession;

/// Number of points in a facial landmark set.
pub const LANDMARK_COUNT: usize = 68;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArtifactError {
    #[error("malformed {artifact_type} payload: {reason}")]
    MalformedPayload {
        artifact_type: ArtifactType,
        reason: String,
    },
    #[error("payload kind does not match artifact type {0}")]
    KindMismatch(ArtifactType),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),
}

/// Semantic type of an artifact or a port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArtifactType {
    PersonImage,
    GarmentRef,
    MakeupRef,
    ObjectRef,
    BackgroundSpec,
    FaceCrop,
    LandmarkSet,
    AlignSession,
}

/// How an artifact type's payload is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Raster,
    Text,
    Landmarks,
    Session,
}

impl ArtifactType {
    pub const ALL: [ArtifactType; 8] = [
        ArtifactType::PersonImage,
        ArtifactType::GarmentRef,
        ArtifactType::MakeupRef,
        ArtifactType::ObjectRef,
        ArtifactType::BackgroundSpec,
        ArtifactType::FaceCrop,
        ArtifactType::LandmarkSet,
        ArtifactType::AlignSession,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArtifactType::PersonImage => "PersonImage",
            ArtifactType::GarmentRef => "GarmentRef",
            ArtifactType::MakeupRef => "MakeupRef",
            ArtifactType::ObjectRef => "ObjectRef",
            ArtifactType::BackgroundSpec => "BackgroundSpec",
            ArtifactType::FaceCrop => "FaceCrop",
            ArtifactType::LandmarkSet => "LandmarkSet",
            ArtifactType::AlignSession => "AlignSession",
        }
    }

    pub fn kind(self) -> PayloadKind {
        match self {
            ArtifactType::PersonImage
            | ArtifactType::GarmentRef
            | ArtifactType::MakeupRef
            | ArtifactType::ObjectRef
            | ArtifactType::FaceCrop => PayloadKind::Raster,
            ArtifactType::BackgroundSpec => PayloadKind::Text,
            ArtifactType::LandmarkSet => PayloadKind::Landmarks,
            ArtifactType::AlignSession => PayloadKind::Session,
        }
    }

    /// File extension used by the artifact store and run directories.
    pub fn extension(self) -> &'static str {
        match self.kind() {
            PayloadKind::Raster => "png",
            PayloadKind::Text => "txt",
            PayloadKind::Landmarks => "landmarks.json",
            PayloadKind::Session => "align.json",
        }
    }

    pub fn content_type(self) -> &'static str {
        match self.kind() {
            PayloadKind::Raster => "image/png",
            PayloadKind::Text => "text/plain; charset=utf-8",
            PayloadKind::Landmarks | PayloadKind::Session => "application/json",
        }
    }
}

impl fmt::Display for ArtifactType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArtifactType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArtifactType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown artifact type `{s}`"))
    }
}

/// A SHA-256 content digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    Rgb,
    Rgba,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Rgb => 3,
            Channels::Rgba => 4,
        }
    }

    pub fn has_alpha(self) -> bool {
        matches!(self, Channels::Rgba)
    }
}

/// An 8-bit RGB or RGBA image, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: Channels,
    pixels: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Raster {
    pub fn new(
        width: u32,
        height: u32,
        channels: Channels,
        pixels: Vec<u8>,
    ) -> Result<Self, ArtifactError> {
        if width == 0 || height == 0 {
            return Err(ArtifactError::InvalidRaster(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * channels.count();
        if pixels.len() != expected {
            return Err(ArtifactError::InvalidRaster(format!(
                "expected {expected} bytes for {width}x{height}x{}, got {}",
                channels.count(),
                pixels.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// A raster with every pixel set to `pixel` (whose length selects RGB or RGBA).
    pub fn filled(width: u32, height: u32, pixel: &[u8]) -> Self {
        let channels = match pixel.len() {
            3 => Channels::Rgb,
            4 => Channels::Rgba,
            n => panic!("pixel must have 3 or 4 channels, got {n}"),
        };
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let pixels = pixel.repeat(width as usize * height as usize);
        Raster {
            width,
            height,
            channels,
            pixels,
        }
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        channels: Channels,
        mut f: impl FnMut(u32, u32) -> [u8; 4],
    ) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let n = channels.count();
        let mut pixels = Vec::with_capacity(width as usize * height as usize * n);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y)[..n]);
            }
        }
        Raster {
            width,
            height,
            channels,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels.count()
    }

    /// Channel slice of pixel `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let o = self.offset(x, y);
        &self.pixels[o..o + self.channels.count()]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let o = self.offset(x, y);
        let n = self.channels.count();
        &mut self.pixels[o..o + n]
    }

    /// Pixel as RGBA; RGB rasters report alpha 255.
    #[inline]
    pub fn rgba(&self, x: u32, y: u32) -> [u8; 4] {
        let p = self.pixel(x, y);
        [p[0], p[1], p[2], if p.len() == 4 { p[3] } else { 255 }]
    }

    /// Bytes fed to the content hash.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.pixels.len());
        out.extend_from_slice(&u64::from(self.width).to_be_bytes());
        out.extend_from_slice(&u64::from(self.height).to_be_bytes());
        out.extend_from_slice(&(self.channels.count() as u64).to_be_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width, self.height);
            enc.set_color(match self.channels {
                Channels::Rgb => png::ColorType::Rgb,
                Channels::Rgba => png::ColorType::Rgba,
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory png header");
            writer
                .write_image_data(&self.pixels)
                .expect("in-memory png data");
        }
        buf
    }

    /// Decodes any 8/16-bit PNG into RGB or RGBA samples.
    pub fn decode_png(bytes: &[u8]) -> Result<Self, String> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| "png too large".to_string())?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        buf.truncate(info.buffer_size());
        let (channels, pixels) = match info.color_type {
            png::ColorType::Rgb => (Channels::Rgb, buf),
            png::ColorType::Rgba => (Channels::Rgba, buf),
            png::ColorType::Grayscale => (
                Channels::Rgb,
                buf.iter().flat_map(|&g| [g, g, g]).collect(),
            ),
            png::ColorType::GrayscaleAlpha => (
                Channels::Rgba,
                buf.chunks_exact(2)
                    .flat_map(|c| [c[0], c[0], c[0], c[1]])
                    .collect(),
            ),
            png::ColorType::Indexed => return Err("unexpanded palette image".into()),
        };
        Raster::new(info.width, info.height, channels, pixels).map_err(|e| e.to_string())
    }
}

/// Exactly 68 finite `(x, y)` points in image pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct LandmarkDoc {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self, ArtifactError> {
        if points.len() != LANDMARK_COUNT {
            return Err(ArtifactError::InvalidLandmarks(format!(
                "expected {LANDMARK_COUNT} points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(ArtifactError::InvalidLandmarks(format!(
                "point {i} is not finite"
            )));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&LandmarkDoc {
            points: self.points.clone(),
        })
        .expect("finite floats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ArtifactError> {
        let doc: LandmarkDoc = serde_json::from_str(text)
            .map_err(|e| ArtifactError::InvalidLandmarks(e.to_string()))?;
        LandmarkSet::new(doc.points)
    }
}

/// Decoded payload of an artifact.
#[derive(Debug, Clone, PartialEq)]
pub enum ArtifactData {
    Raster(Raster),
    Text(String),
    Landmarks(LandmarkSet),
    Session(Box<AlignSession>),
}

impl ArtifactData {
    pub fn kind(&self) -> PayloadKind {
        match self {
            ArtifactData::Raster(_) => PayloadKind::Raster,
            ArtifactData::Text(_) => PayloadKind::Text,
            ArtifactData::Landmarks(_) => PayloadKind::Landmarks,
            ArtifactData::Session(_) => PayloadKind::Session,
        }
    }

    fn hash_bytes(&self) -> Vec<u8> {
        match self {
            ArtifactData::Raster(r) => r.canonical_bytes(),
            ArtifactData::Text(t) => t.as_bytes().to_vec(),
            ArtifactData::Landmarks(l) => l.to_json().into_bytes(),
            ArtifactData::Session(s) => s.to_canonical_json().into_bytes(),
        }
    }
}

/// An immutable, typed, content-hashed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    artifact_type: ArtifactType,
    data: ArtifactData,
    content_hash: Digest,
    producer: Option<String>,
}

impl Artifact {
    pub fn new(artifact_type: ArtifactType, data: ArtifactData) -> Result<Self, ArtifactError> {
        if data.kind() != artifact_type.kind() {
            return Err(ArtifactError::KindMismatch(artifact_type));
        }
        let content_hash = Digest::of(&data.hash_bytes());
        Ok(Artifact {
            artifact_type,
            data,
            content_hash,
            producer: None,
        })
    }

    pub fn raster(artifact_type: ArtifactType, raster: Raster) -> Result<Self, ArtifactError> {
        Artifact::new(artifact_type, ArtifactData::Raster(raster))
    }

    pub fn text(text: impl Into<String>) -> Self {
        Artifact::new(ArtifactType::BackgroundSpec, ArtifactData::Text(text.into()))
            .expect("text kind matches BackgroundSpec")
    }

    pub fn landmarks(set: LandmarkSet) -> Self {
        Artifact::new(ArtifactType::LandmarkSet, ArtifactData::Landmarks(set))
            .expect("landmark kind matches LandmarkSet")
    }

    pub fn session(session: AlignSession) -> Self {
        Artifact::new(
            ArtifactType::AlignSession,
            ArtifactData::Session(Box::new(session)),
        )
        .expect("session kind matches AlignSession")
    }

    /// Same content, tagged with the node that produced it.
    pub fn with_producer(mut self, node_id: impl Into<String>) -> Self {
        self.producer = Some(node_id.into());
        self
    }

    pub fn artifact_type(&self) -> ArtifactType {
        self.artifact_type
    }

    pub fn data(&self) -> &ArtifactData {
        &self.data
    }

    pub fn content_hash(&self) -> Digest {
        self.content_hash
    }

    pub fn producer(&self) -> Option<&str> {
        self.producer.as_deref()
    }

    pub fn as_raster(&self) -> Option<&Raster> {
        match &self.data {
            ArtifactData::Raster(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.data {
            ArtifactData::Text(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_landmarks(&self) -> Option<&LandmarkSet> {
        match &self.data {
            ArtifactData::Landmarks(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_session(&self) -> Option<&AlignSession> {
        match &self.data {
            ArtifactData::Session(s) => Some(s),
            _ => None,
        }
    }

    /// Canonical payload bytes: PNG for rasters, UTF-8 text, or canonical JSON.
    pub fn encode_payload(&self) -> Vec<u8> {
        match &self.data {
            ArtifactData::Raster(r) => r.encode_png(),
            other => other.hash_bytes(),
        }
    }

    pub fn decode(artifact_type: ArtifactType, payload: &[u8]) -> Result<Self, ArtifactError> {
        let malformed = |reason: String| ArtifactError::MalformedPayload {
            artifact_type,
            reason,
        };
        let data = match artifact_type.kind() {
            PayloadKind::Raster => ArtifactData::Raster(Raster::decode_png(payload).map_err(malformed)?),
            PayloadKind::Text => ArtifactData::Text(
                String::from_utf8(payload.to_vec()).map_err(|e| malformed(e.to_string()))?,
            ),
            PayloadKind::Landmarks => {
                let text = std::str::from_utf8(payload).map_err(|e| malformed(e.to_string()))?;
                ArtifactData::Landmarks(
                    LandmarkSet::from_json(text).map_err(|e| malformed(e.to_string()))?,
                )
            }
            PayloadKind::Session => {
                let text = std::str::from_utf8(payload).map_err(|e| malformed(e.to_string()))?;
                ArtifactData::Session(Box::new(
                    AlignSession::from_json(text).map_err(malformed)?,
                ))
            }
        };
        Artifact::new(artifact_type, data)
    }
}

/// Digest of an encoded payload, computed over its decoded canonical form.
pub fn content_hash(payload: &[u8], artifact_type: ArtifactType) -> Result<Digest, ArtifactError> {
    Artifact::decode(artifact_type, payload).map(|a| a.content_hash())
}
