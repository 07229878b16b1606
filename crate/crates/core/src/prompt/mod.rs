//! Task-specific prompts: vocabulary and tokenizer, the `{Z, Y, X}` layout,
//! and decoding generated ids back to labels.

mod answer;
mod sequence;
mod vocab;

pub use answer::{decode_label, edit_distance, AnswerSet, Decoded};
pub use sequence::{
    answer_span, build_prompt, resegment, task_label_space, ModalSegment, Modality, PromptSequence, PromptSpans,
};
pub use vocab::{Vocab, ANS_CLOSE, ANS_OPEN, BOS, DEFAULT_SPEAKER_SLOTS, EOS, MASK, PAD, SEP, UNK};
