mod common;

use std::sync::Arc;

use common::*;
use kolflow_core::face_align::{align_face, reintegrate, DEFAULT_FEATHER};
use kolflow_core::samples::{identity_landmarks, identity_raster};
use kolflow_core::{
    synthesize_pipeline, ArtifactType, Capability, CapabilityQuery, DefaultBackend, ExecOptions,
    LandmarkTemplate, RunStatus,
};

#[test]
fn untouched_crop_reintegrates_to_nearly_the_original() {
    let image = identity_raster(96);
    let template = LandmarkTemplate::default_256();
    let (crop, session) = align_face(&image, &identity_landmarks(96), &template).unwrap();
    assert_eq!((crop.width(), crop.height()), template.crop_size);
    let back = reintegrate(&crop, &session, &image, DEFAULT_FEATHER).unwrap();
    let worst = image
        .pixels()
        .iter()
        .zip(back.pixels())
        .map(|(a, b)| a.abs_diff(*b))
        .max()
        .unwrap();
    // Upsampling then resampling a piecewise image is lossy only near edges.
    assert!(worst <= 64, "worst channel difference {worst}");
}

#[test]
fn size_mismatch_is_rejected() {
    let image = identity_raster(96);
    let (_, session) = align_face(&image, &identity_landmarks(96), &LandmarkTemplate::default_256()).unwrap();
    assert!(reintegrate(&rgb(10, 10, [0; 3]), &session, &image, 0).is_err());
}

#[test]
fn aligned_makeup_only_touches_the_face_region() {
    let (_dir, exec) = executor_with(Arc::new(DefaultBackend::new(catalog())));
    let refs = store_samples(exec.store());
    let q = CapabilityQuery::new([Capability::Makeup])
        .with_input("identity", refs["identity"])
        .with_input("makeup_ref", refs["makeup_ref"])
        .with_input("landmarks", refs["landmarks"])
        .aligned();
    let reg = registry();
    let spec = synthesize_pipeline(&q, &reg).unwrap();
    let record = exec.execute_run(&spec, &reg, ExecOptions::default()).unwrap();
    assert_eq!(record.status, RunStatus::Succeeded);

    let original = exec.store().load(&refs["identity"], ArtifactType::PersonImage).unwrap();
    let out_ref = record.outputs("face_reintegrate").unwrap()["image"];
    let out = exec.store().load(&out_ref, ArtifactType::PersonImage).unwrap();
    let (a, b) = (original.as_raster().unwrap(), out.as_raster().unwrap());
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    assert_ne!(a.pixels(), b.pixels(), "the face region changed");
    // Corners lie outside the face crop and must be untouched.
    for (x, y) in [(0, 0), (a.width() - 1, 0), (0, a.height() - 1), (a.width() - 1, a.height() - 1)] {
        assert_eq!(a.pixel(x, y), b.pixel(x, y));
    }
}
