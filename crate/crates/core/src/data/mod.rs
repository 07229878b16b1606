//! Unified sentiment records: the dataset registry, corpus I/O, polarity
//! mapping and the polarity pools used by stage-one pre-training.

mod corpus;
mod pools;
mod registry;
mod types;

pub use corpus::{
    load_corpora, load_corpus, read_sidecar, record_to_json, validate_record, write_corpus, write_sidecar,
    SIDECAR_MAGIC,
};
pub use pools::{build_pools, combine_queries, to_polarity, DataPool};
pub use registry::{DatasetSpec, MetricKind, Registry};
pub use types::{
    msa_bin_labels, render_bin, render_score, score_bin, ContextTurn, FeatureMatrix, LabelValue, Polarity,
    SaevalRecord, TaskType,
};
