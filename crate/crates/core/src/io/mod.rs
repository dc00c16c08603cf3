//! On-disk formats: the tensor checkpoint container and PPM frame folders.

pub mod checkpoint;
pub mod ppm;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_model, read_checkpoint, save_model, write_checkpoint};
pub use ppm::{decode_ppm, encode_ppm, read_video_dir, write_video_dir};
