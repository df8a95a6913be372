//! File formats: WAV audio plus the binary artifact formats that live
//! next to their types (`TokenGrid`, `CodebookSet`, checkpoints).

pub mod wav;

pub use wav::{read_wav, write_wav};
