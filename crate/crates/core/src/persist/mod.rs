//! Files: the versioned key-value config format, the binary checkpoint
//! container shared by both models, and code grid files.

mod checkpoint;
mod codes;
mod kv;

pub use checkpoint::{
    load_quantizer, load_synthesizer, quantizer_checkpoint, quantizer_from_checkpoint, save_quantizer,
    save_synthesizer, synthesizer_checkpoint, synthesizer_from_checkpoint, write_atomic, Checkpoint, QUANTIZER_TAG,
    SYNTHESIZER_TAG,
};
pub use codes::{code_grid_from_bytes, code_grid_to_bytes, load_code_grid, save_code_grid};
pub use kv::{KvReader, KvValue, KvWriter, Section, FORMAT_VERSION};
