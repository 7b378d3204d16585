//! Synthetic anechoic scenes for a linear microphone array.

mod geometry;
mod manifest;
mod scene;
mod speech;

pub use geometry::{render_source, steering_vector, ArrayGeometry, SteeringVector};
pub use manifest::{
    generate_manifest, load_manifest, save_manifest, AngleBucket, ManifestEntry, SceneWavs,
    SPEAKER_COUNTS,
};
pub use scene::{mix_scene, synthesize_scene, white_noise, Scene, SceneSpec, SimConfig, REFERENCE_MIC};
pub use speech::pseudo_speech;
