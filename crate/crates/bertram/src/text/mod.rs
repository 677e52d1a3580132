//! Corpus ingestion, vocabulary construction, wordpiece tokenization,
//! character n-grams, frequency bucketing and context collection.

pub mod corpus;
pub mod ngram;
pub mod vocab;

pub use corpus::{collect_contexts, frequency_bucket, Bucket, Corpus, Sentence};
pub use ngram::{extract_ngrams, NGramSet};
pub use vocab::Vocabulary;
