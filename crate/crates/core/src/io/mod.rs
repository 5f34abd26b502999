//! On-disk formats and the synthetic video source.

mod bytes;
mod frames;
mod model;
mod synth;

pub use frames::{
    decode_frames, encode_frames, load_frames, save_frames, FrameSequence, FRAMES_MAGIC,
    FRAMES_VERSION,
};
pub use model::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use synth::{gen_synthetic, SceneSpec, SyntheticVideo, SQUARE_INTENSITY};
