//! Face alignment exposed as services.

use serde_json::Value;

use super::{Algorithm, AlgorithmDescriptor, BackendError, ParamType, Params, PortMap};
use crate::artifact::{Artifact, ArtifactType};
use crate::face_align::{self, LandmarkTemplate, DEFAULT_FEATHER};
use crate::registry::Capability;

pub const ALIGN_ID: &str = "face_extract_align";
pub const REINTEGRATE_ID: &str = "face_reintegrate";

fn malformed(e: impl std::fmt::Display) -> BackendError {
    BackendError::MalformedInput(e.to_string())
}

/// Crops the face to the template pose. The session carries the original
/// image so reintegration needs only the processed face and the session.
pub struct FaceExtractAlign {
    descriptor: AlgorithmDescriptor,
    template: LandmarkTemplate,
}

impl FaceExtractAlign {
    pub fn new(template: LandmarkTemplate) -> Self {
        FaceExtractAlign {
            descriptor: AlgorithmDescriptor::new(ALIGN_ID, Capability::FaceExtractAlign),
            template,
        }
    }
}

impl Algorithm for FaceExtractAlign {
    fn descriptor(&self) -> &AlgorithmDescriptor {
        &self.descriptor
    }

    fn run(&self, inputs: &PortMap, _params: &Params) -> Result<PortMap, BackendError> {
        let person = inputs
            .get("person")
            .and_then(Artifact::as_raster)
            .ok_or_else(|| malformed("`person` must be a raster"))?;
        let landmarks = inputs
            .get("landmarks")
            .and_then(Artifact::as_landmarks)
            .ok_or_else(|| malformed("`landmarks` must be a landmark set"))?;
        let (crop, mut session) =
            face_align::align_face(person, landmarks, &self.template).map_err(malformed)?;
        session.original = Some(person.clone());
        let face = Artifact::raster(ArtifactType::PersonImage, crop).map_err(malformed)?;
        Ok(PortMap::from([
            ("face".to_string(), face),
            ("session".to_string(), Artifact::session(session)),
        ]))
    }
}

pub struct FaceReintegrate {
    descriptor: AlgorithmDescriptor,
}

impl FaceReintegrate {
    pub fn new() -> Self {
        FaceReintegrate {
            descriptor: AlgorithmDescriptor::new(REINTEGRATE_ID, Capability::FaceReintegrate)
                .with_param("feather", ParamType::Int, Value::from(DEFAULT_FEATHER)),
        }
    }
}

impl Default for FaceReintegrate {
    fn default() -> Self {
        Self::new()
    }
}

impl Algorithm for FaceReintegrate {
    fn descriptor(&self) -> &AlgorithmDescriptor {
        &self.descriptor
    }

    fn run(&self, inputs: &PortMap, params: &Params) -> Result<PortMap, BackendError> {
        let face = inputs
            .get("face")
            .and_then(Artifact::as_raster)
            .ok_or_else(|| malformed("`face` must be a raster"))?;
        let session = inputs
            .get("session")
            .and_then(Artifact::as_session)
            .ok_or_else(|| malformed("`session` must be an align session"))?;
        let original = session
            .original
            .as_ref()
            .ok_or_else(|| malformed("session does not carry the original image"))?;
        let feather = self
            .descriptor
            .param(params, "feather")
            .and_then(Value::as_u64)
            .and_then(|f| u32::try_from(f).ok())
            .ok_or_else(|| BackendError::BadParams("`feather` must be a non-negative integer".into()))?;
        let image = face_align::reintegrate(face, session, original, feather).map_err(malformed)?;
        let image = Artifact::raster(ArtifactType::PersonImage, image).map_err(malformed)?;
        Ok(PortMap::from([("image".to_string(), image)]))
    }
}
