//! Annotations, feature construction and synthetic pretraining data.

mod annotation;
mod features;
mod synth;

pub use annotation::{load_dataset, parse_dataset, save_dataset, write_dataset, Annotation, LEVEL_MAX};
pub use features::{
    build_features, concat_features, encoder_hash, pseudo_encode, read_feature_file,
    write_feature_file, EncoderKind, FeatureBundle, FeaturePart, FeatureSource,
};
pub use synth::{
    generate_synthetic, record_to_annotation, Embeddable, Frame, StubEmbedder, SynthOptions,
    SyntheticRecord,
};
