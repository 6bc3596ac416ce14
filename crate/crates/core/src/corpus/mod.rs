//! Synthetic multi-label image/report corpus, weak label extraction and
//! label-similarity targets.

mod augment;
mod extract;
mod generate;
mod similarity;
mod vocab;

pub use augment::{augment, augment_with, hflip, AugmentParams};
pub use extract::{extract_labels, sentence_filter, split_sentences, words, NEGATION_CUES, NEGATION_WINDOW};
pub use generate::{
    cell_bounds, compose_report, draw_findings, generate_all, generate_corpus, generate_sample, generate_split,
    load_corpus, motif_bbox, render_image, sample_seed, splitmix64, template_texts, CorpusConfig, CorpusMeta, SampleRecord, Split,
    BACKGROUND, CORPUS_META, GRID, MANIFEST,
};
pub use similarity::{gt_similarity, GtTargets};
pub use vocab::{
    base_classes, unseen_classes, LabelVector, Motif, Observation, ObservationVocabulary, Shape, NO_FINDING,
    NUM_OBSERVATIONS, UNSEEN_CLASSES,
};

/// Minimum whitespace tokens for a report sentence to be used in pretraining.
pub const MIN_SENTENCE_TOKENS: usize = 4;
