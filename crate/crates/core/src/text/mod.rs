//! Caption branch: tokenizer, transformer codec, MI estimator and training.

pub mod mine;
pub mod model;
pub mod train;
pub mod vocab;

pub use mine::{mi_estimate, MineNet};
pub use model::{loss_ce, Decoded, TextArch, TextCodec};
pub use train::{sentence_accuracy, train_text_link, TextTrainConfig, TrainedText};
pub use vocab::{TokenSequence, Vocabulary};
