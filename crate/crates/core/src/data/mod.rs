pub mod container;
pub mod dataset;
pub mod synth;

pub use container::{
    decode_features, decode_sections, encode_features, encode_sections, load_features, read_sections, round_f32,
    write_features, write_sections, Dtype, Section,
};
pub use dataset::{load_manifest, queries_by_video, write_dataset, Dataset, Manifest, QueryRecord, Split, VideoRecord};
pub use synth::{gen_synthetic, EventCount, PlantedEvent, SynthConfig, SyntheticData};
