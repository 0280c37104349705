//! File I/O: PNG images, masks and label maps; the training dataset;
//! checkpoints.
//!
//! RGB bytes map to training values by `v * 2 / 255 - 1`, matching the
//! generator's tanh head, and back by `round((x + 1) * 255 / 2)`.

mod checkpoint;
mod dataset;
mod png;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_generator_config, save_checkpoint,
    store_generator_config, MAGIC, VERSION,
};
pub use dataset::{batch_tensor, procedural_sample, Dataset, DatasetSource, DatasetSpec, Sample};
pub use png::{
    byte_to_unit, load_gray16, load_gray8, load_instance_map, load_mask, load_rgb, rgb_to_tensor,
    save_gray16, save_gray8, save_instance_map, save_mask, save_rgb, tensor_to_rgb, unit_to_byte,
    GrayImage, RgbImage,
};
