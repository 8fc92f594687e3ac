//! Synthetic token-level tasks, their file format, heads and metrics.

mod dataset;
mod generate;
mod head;
mod metrics;

pub use dataset::{
    corpus_from_text, corpus_to_text, SpanQaDataset, SpanQaItem, Split, TaggedSequence, TaggingDataset, TaggingMeta,
    TaskData,
};
pub use generate::{
    class_names, gen_spanqa_corpus, gen_tagging_corpus, gen_unlabelled_corpus, pattern_search_oracle, Language,
    LanguageParams, SequenceOrder, SpanQaParams, TagScheme, TaggingParams,
};
pub use head::{argmax_rows, decode_span, SpanDecoding, TaskHead, TaskKind, MAX_ANSWER_LEN};
pub use metrics::{span_token_f1, spanqa_metrics, tagging_metrics, ClassCounts, MetricsReport, SpanCounts, TaggingCounts};

pub const MASK_TOKEN: u32 = 0;
pub const CLS_TOKEN: u32 = 1;
pub const SEP_TOKEN: u32 = 2;
pub const FIRST_CONTENT_TOKEN: u32 = 3;
