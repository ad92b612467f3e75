//! Deterministic stand-ins for the four generative capabilities.
//!
//! All arithmetic is integer with floor division so results are bit-exact
//! in any language.

use serde_json::Value;

use super::{Algorithm, AlgorithmDescriptor, BackendError, ParamType, Params, PortMap};
use crate::artifact::{Artifact, ArtifactType, Raster};
use crate::registry::Capability;

pub const TRYON_ID: &str = "mock_tryon";
pub const MAKEUP_ID: &str = "mock_makeup";
pub const BACKGROUND_ID: &str = "mock_background";
pub const OBJECT_ID: &str = "mock_object";

/// 32-bit FNV-1a.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811c_9dc5u32, |h, &b| {
        (h ^ u32::from(b)).wrapping_mul(0x0100_0193)
    })
}

/// Background colour for a prompt: low 24 bits of FNV-1a, big-endian.
pub fn background_color(spec: &str) -> [u8; 3] {
    let [_, r, g, b] = fnv1a32(spec.as_bytes()).to_be_bytes();
    [r, g, b]
}

/// Lower half blended 50/50 with the garment stretched over it.
pub fn mock_tryon(person: &Raster, garment: &Raster) -> Result<Raster, BackendError> {
    let (w, h) = (person.width(), person.height());
    if h < 2 {
        return Err(BackendError::MalformedInput(format!(
            "tryon needs a person at least 2 pixels tall, got {h}"
        )));
    }
    let top = h / 2;
    let lower = h - top;
    let (gw, gh) = (garment.width(), garment.height());
    let mut out = person.clone();
    for y in top..h {
        let gy = ((u64::from(y - top) * u64::from(gh)) / u64::from(lower)) as u32;
        for x in 0..w {
            let gx = ((u64::from(x) * u64::from(gw)) / u64::from(w)) as u32;
            let g = garment.rgba(gx, gy);
            let px = out.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = ((u16::from(px[c]) + u16::from(g[c])) / 2) as u8;
            }
        }
    }
    Ok(out)
}

/// Per-channel floor mean over the colour channels.
pub fn floor_mean(r: &Raster) -> [u8; 3] {
    let mut sums = [0u64; 3];
    let n = u64::from(r.width()) * u64::from(r.height());
    for y in 0..r.height() {
        for x in 0..r.width() {
            let p = r.rgba(x, y);
            for c in 0..3 {
                sums[c] += u64::from(p[c]);
            }
        }
    }
    sums.map(|s| (s / n) as u8)
}

/// 80/20 tint of every pixel toward the reference mean colour.
pub fn mock_makeup(person: &Raster, makeup_ref: &Raster) -> Result<Raster, BackendError> {
    let m = floor_mean(makeup_ref);
    let mut out = person.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let px = out.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = ((4 * u16::from(px[c]) + u16::from(m[c])) / 5) as u8;
            }
        }
    }
    Ok(out)
}

/// Fills transparent pixels, or paints a border frame on opaque images.
pub fn mock_background(person: &Raster, spec: &str) -> Result<Raster, BackendError> {
    let c = background_color(spec);
    let (w, h) = (person.width(), person.height());
    let mut out = person.clone();
    let has_alpha = person.channels().has_alpha();
    let b = (w.min(h) / 8).max(1);
    for y in 0..h {
        for x in 0..w {
            let px = out.pixel_mut(x, y);
            if has_alpha {
                if px[3] == 0 {
                    px[..3].copy_from_slice(&c);
                    px[3] = 255;
                }
            } else if x < b || y < b || x >= w - b || y >= h - b {
                px[..3].copy_from_slice(&c);
            }
        }
    }
    Ok(out)
}

/// Composites a quarter-size copy of the object at the bottom-right corner.
///
/// Straight (non-premultiplied) alpha-over with floor division; an RGB
/// object counts as fully opaque.
pub fn mock_object(person: &Raster, object_ref: &Raster) -> Result<Raster, BackendError> {
    let (w, h) = (person.width(), person.height());
    if w < 4 || h < 4 {
        return Err(BackendError::MalformedInput(format!(
            "object interaction needs a person at least 4x4, got {w}x{h}"
        )));
    }
    let (ow, oh) = (w / 4, h / 4);
    let (sw, sh) = (object_ref.width(), object_ref.height());
    let (ax, ay) = (w - ow, h - oh);
    let has_alpha = person.channels().has_alpha();
    let mut out = person.clone();
    for j in 0..oh {
        let sy = ((u64::from(j) * u64::from(sh)) / u64::from(oh)) as u32;
        for i in 0..ow {
            let sx = ((u64::from(i) * u64::from(sw)) / u64::from(ow)) as u32;
            let o = object_ref.rgba(sx, sy);
            let a = u32::from(o[3]);
            let px = out.pixel_mut(ax + i, ay + j);
            for c in 0..3 {
                px[c] = ((a * u32::from(o[c]) + (255 - a) * u32::from(px[c])) / 255) as u8;
            }
            if has_alpha {
                px[3] = (a + (255 - a) * u32::from(px[3]) / 255) as u8;
            }
        }
    }
    Ok(out)
}

fn raster_input<'a>(inputs: &'a PortMap, port: &str) -> Result<&'a Raster, BackendError> {
    inputs
        .get(port)
        .and_then(Artifact::as_raster)
        .ok_or_else(|| BackendError::MalformedInput(format!("`{port}` must be a raster")))
}

fn image_output(r: Raster) -> Result<PortMap, BackendError> {
    let a = Artifact::raster(ArtifactType::PersonImage, r)
        .map_err(|e| BackendError::Fault { code: "INTERNAL".into(), message: e.to_string() })?;
    Ok(PortMap::from([("image".to_string(), a)]))
}

fn mock_descriptor(id: &str, capability: Capability) -> AlgorithmDescriptor {
    // `seed` is accepted so callers can pass it through; the mocks ignore it.
    AlgorithmDescriptor::new(id, capability).with_param("seed", ParamType::Int, Value::from(0))
}

macro_rules! raster_mock {
    ($name:ident, $id:expr, $cap:expr, $port:literal, $f:ident) => {
        pub struct $name {
            descriptor: AlgorithmDescriptor,
        }

        impl $name {
            pub fn new() -> Self {
                $name { descriptor: mock_descriptor($id, $cap) }
            }
        }

        impl Default for $name {
            fn default() -> Self {
                Self::new()
            }
        }

        impl Algorithm for $name {
            fn descriptor(&self) -> &AlgorithmDescriptor {
                &self.descriptor
            }

            fn run(&self, inputs: &PortMap, _params: &Params) -> Result<PortMap, BackendError> {
                let person = raster_input(inputs, "person")?;
                let other = raster_input(inputs, $port)?;
                image_output($f(person, other)?)
            }
        }
    };
}

raster_mock!(MockTryon, TRYON_ID, Capability::Tryon, "garment", mock_tryon);
raster_mock!(MockMakeup, MAKEUP_ID, Capability::Makeup, "makeup_ref", mock_makeup);
raster_mock!(MockObject, OBJECT_ID, Capability::ObjectInteraction, "object_ref", mock_object);

pub struct MockBackground {
    descriptor: AlgorithmDescriptor,
}

impl MockBackground {
    pub fn new() -> Self {
        MockBackground { descriptor: mock_descriptor(BACKGROUND_ID, Capability::Background) }
    }
}

impl Default for MockBackground {
    fn default() -> Self {
        Self::new()
    }
}

impl Algorithm for MockBackground {
    fn descriptor(&self) -> &AlgorithmDescriptor {
        &self.descriptor
    }

    fn run(&self, inputs: &PortMap, _params: &Params) -> Result<PortMap, BackendError> {
        let person = raster_input(inputs, "person")?;
        let spec = inputs
            .get("background_spec")
            .and_then(Artifact::as_text)
            .ok_or_else(|| BackendError::MalformedInput("`background_spec` must be text".into()))?;
        image_output(mock_background(person, spec)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::Channels;

    fn rgb(w: u32, h: u32, v: u8) -> Raster {
        Raster::filled(w, h, &[v, v, v])
    }

    #[test]
    fn tryon_blend_150() {
        let out = mock_tryon(&rgb(3, 4, 100), &rgb(5, 5, 200)).unwrap();
        for y in 0..4 {
            for x in 0..3 {
                let want = if y < 2 { 100 } else { 150 };
                assert_eq!(out.pixel(x, y), &[want; 3]);
            }
        }
        assert!(mock_tryon(&rgb(3, 1, 0), &rgb(1, 1, 0)).is_err());
    }

    #[test]
    fn tryon_three_by_two_single_garment_pixel() {
        let person = Raster::from_fn(3, 2, Channels::Rgb, |x, y| {
            let v = (10 * x + 100 * y) as u8;
            [v, v + 1, v + 3, 255]
        });
        let out = mock_tryon(&person, &Raster::filled(1, 1, &[7, 8, 9])).unwrap();
        // row 0 is copied; row 1 is ⌊(p + g) / 2⌋
        assert_eq!(out.pixel(0, 0), person.pixel(0, 0));
        assert_eq!(out.pixel(0, 1), &[53, 54, 56]);
        assert_eq!(out.pixel(1, 1), &[58, 59, 61]);
        assert_eq!(out.pixel(2, 1), &[63, 64, 66]);
    }

    #[test]
    fn makeup_tint_90_and_floor_mean() {
        let out = mock_makeup(&rgb(2, 2, 100), &rgb(3, 3, 50)).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 90));
        let two = Raster::from_fn(2, 1, Channels::Rgb, |x, _| [if x == 0 { 0 } else { 255 }; 4]);
        assert_eq!(floor_mean(&two), [127, 127, 127]);
        let fixed = rgb(4, 4, 77);
        assert_eq!(mock_makeup(&fixed, &rgb(1, 1, 77)).unwrap(), fixed);
    }

    #[test]
    fn background_colours() {
        assert_eq!(fnv1a32(b""), 0x811c_9dc5);
        assert_eq!(background_color("beach"), [0xb2, 0xc8, 0x48]);
        let out = mock_background(&rgb(16, 16, 0), "beach").unwrap();
        // frame width ⌊16/8⌋ = 2
        assert_eq!(out.pixel(1, 8), &[0xb2, 0xc8, 0x48]);
        assert_eq!(out.pixel(2, 8), &[0, 0, 0]);
        let opaque = Raster::filled(4, 4, &[1, 2, 3, 255]);
        assert_eq!(mock_background(&opaque, "x").unwrap(), opaque);
    }

    #[test]
    fn object_corner_pixel() {
        let red = Raster::filled(1, 1, &[255, 0, 0]);
        let out = mock_object(&rgb(4, 4, 9), &red).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want: &[u8] = if (x, y) == (3, 3) { &[255, 0, 0] } else { &[9, 9, 9] };
                assert_eq!(out.pixel(x, y), want);
            }
        }
        let clear = Raster::filled(2, 2, &[255, 0, 0, 0]);
        let person = rgb(8, 8, 40);
        assert_eq!(mock_object(&person, &clear).unwrap(), person);
        assert!(mock_object(&rgb(3, 8, 0), &red).is_err());
    }
}
