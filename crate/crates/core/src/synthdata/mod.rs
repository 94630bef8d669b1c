//! Procedural multimodal pedestrian data: attribute profiles, rendered
//! images, key-word captions, and the dataset builder with controllable
//! per-domain style.

pub mod dataset;
pub mod render;
pub mod vocab;

pub use dataset::{
    build_dataset, load_captions, load_images, read_png, write_png, DataConfig, DatasetManifest,
    SampleRecord, Split, SplitConfig, TestSplitConfig,
};
pub use render::{render_image, render_reference, DomainStyle, PersonImage};
pub use vocab::{
    caption_of, gen_identities, gen_identities_with, AttributeProfile, Caption, Taxonomy, Vocabulary,
    CAPTION_LEN, NUM_BACKGROUND, NUM_FOREGROUND, PAD_ID,
};
