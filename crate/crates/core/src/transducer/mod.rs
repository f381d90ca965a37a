//! The recurrent sequence transducer: layer-normalized LSTM cells, the
//! bidirectional encoder, additive attention and the input-feeding decoder.

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod lstm;
pub mod model;
pub mod vocab;

pub use attention::{Attention, AttentionMemory};
pub use decoder::{Decoder, DecoderState, StepOutput};
pub use encoder::{Encoder, EncoderOutput};
pub use lstm::{LstmCell, LN_EPS};
pub use model::{unroll, DecodeState, EncodedLine, Model, ModelConfig, TargetBatch};
pub use vocab::{CharVocab, EOS, PAD, SOS, SPECIALS};
