//! Annotations, image IO, mask/VOC conversion, augmentation, splits and the
//! synthetic scene generator.

pub mod augment;
pub mod boxes;
pub mod dataset;
pub mod io;
pub mod mask;
pub mod split;
pub mod synth;
pub mod voc;

pub use augment::{flip_augment, flip_boxes, flip_image, FlipAxis};
pub use boxes::{Annotation, BBox, Detection};
pub use dataset::{load_split, Sample};
pub use io::{read_png, write_png16, write_png8, write_rgb_png, IrImage};
pub use mask::{mask_to_boxes, otsu_bin, otsu_threshold, soft_mask_to_boxes, BinaryMask};
pub use split::{dataset_split, read_manifest, write_manifest};
pub use synth::{
    synth_scene, write_synth_dataset, SynthDatasetConfig, SynthScene, SynthSceneConfig,
};
pub use voc::{
    read_voc_str, read_voc_xml, write_voc_string, write_voc_xml, VocDocument, VocObject,
};
