//! Deterministic sample inputs for demos, tests and benchmarks.

use std::collections::BTreeMap;

use crate::artifact::{Artifact, ArtifactType, Channels, LandmarkSet, Raster};
use crate::face_align::{LandmarkTemplate, SimilarityTransform};

/// One artifact per external input role.
#[derive(Debug, Clone)]
pub struct SampleInputs {
    pub identity: Artifact,
    pub garment: Artifact,
    pub makeup_ref: Artifact,
    pub background_spec: Artifact,
    pub object_ref: Artifact,
    pub landmarks: Artifact,
}

pub const IDENTITY_SIZE: u32 = 96;

fn raster(t: ArtifactType, r: Raster) -> Artifact {
    Artifact::raster(t, r).expect("raster type")
}

/// Smooth person-like gradient with a brighter disc for the face.
pub fn identity_raster(size: u32) -> Raster {
    let c = f64::from(size) / 2.0;
    Raster::from_fn(size, size, Channels::Rgb, |x, y| {
        let d = (f64::from(x) - c).hypot(f64::from(y) - c * 0.7);
        let face = if d < c * 0.35 { 60 } else { 0 };
        [
            (40 + x * 120 / size + face) as u8,
            (30 + y * 100 / size + face) as u8,
            (90 + (x + y) * 60 / (2 * size)) as u8,
            255,
        ]
    })
}

/// Default template placed over the face disc of [`identity_raster`].
pub fn identity_landmarks(size: u32) -> LandmarkSet {
    let template = LandmarkTemplate::default_256();
    let s = f64::from(size) / 2.0;
    // crop → image: shrink the 256 crop to 0.7 of the face disc, tilt by 0.1 rad
    let crop_to_image = SimilarityTransform::new(0.7 * s * 0.7 / 128.0, 0.1, 0.0, 0.0)
        .expect("valid transform");
    let centre = crop_to_image.apply([128.0, 128.0]);
    let shift = SimilarityTransform::new(1.0, 0.0, s - centre[0], s * 0.7 - centre[1])
        .expect("valid transform");
    let t = crop_to_image.then(&shift);
    LandmarkSet::new(template.points.iter().map(|&p| t.apply(p)).collect()).expect("68 finite points")
}

impl SampleInputs {
    pub fn generate() -> Self {
        SampleInputs {
            identity: raster(ArtifactType::PersonImage, identity_raster(IDENTITY_SIZE)),
            garment: raster(
                ArtifactType::GarmentRef,
                Raster::from_fn(32, 32, Channels::Rgb, |x, y| {
                    let stripe = if (x / 4) % 2 == 0 { 200 } else { 60 };
                    [stripe, (y * 6) as u8, 120, 255]
                }),
            ),
            makeup_ref: raster(
                ArtifactType::MakeupRef,
                Raster::from_fn(16, 16, Channels::Rgb, |x, y| [(180 + x) as u8, (80 + y) as u8, 110, 255]),
            ),
            background_spec: Artifact::text("beach at sunset"),
            object_ref: raster(
                ArtifactType::ObjectRef,
                Raster::from_fn(16, 16, Channels::Rgba, |x, y| {
                    let inside = (x as i32 - 8).pow(2) + (y as i32 - 8).pow(2) < 49;
                    [220, 40, 40, if inside { 255 } else { 0 }]
                }),
            ),
            landmarks: Artifact::landmarks(identity_landmarks(IDENTITY_SIZE)),
        }
    }

    /// Inputs keyed by the query role names.
    pub fn by_role(&self) -> BTreeMap<&'static str, &Artifact> {
        BTreeMap::from([
            ("identity", &self.identity),
            ("garment", &self.garment),
            ("makeup_ref", &self.makeup_ref),
            ("background_spec", &self.background_spec),
            ("object_ref", &self.object_ref),
            ("landmarks", &self.landmarks),
        ])
    }

    /// The sample of a given type, if there is one.
    pub fn for_type(&self, t: ArtifactType) -> Option<Artifact> {
        self.by_role()
            .into_values()
            .find(|a| a.artifact_type() == t)
            .cloned()
    }
}
