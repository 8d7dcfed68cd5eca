//! Files: WAV audio, binary weights, run configuration and paired datasets.

mod config;
mod dataset;
mod wav;
mod weights;

pub use config::RunConfig;
pub use dataset::dataset_load;
pub use wav::{wav_read, wav_write};
pub use weights::{decode_weights, encode_weights, load_weights, load_weights_for, save_weights, MAGIC, VERSION};
