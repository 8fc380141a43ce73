//! Cognitive-state analysis of multichannel EEG: preprocessing, spectral
//! bands, Pearson connectivity, workload labelling, a small neural-network
//! engine, cross-validated evaluation and a synthetic cohort generator.

pub mod connectivity;
pub mod dataset;
pub mod eval;
pub mod io;
pub mod labeling;
pub mod montage;
pub mod neural;
pub mod pipeline;
pub mod preprocess;
pub mod recording;
pub mod rng;
pub mod spectral;
pub mod synth;

// The guide's snippets run as doc-tests, one module per chapter so a failure
// points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/filtering.md")]
    mod filtering {}
    #[doc = include_str!("../../../book/src/connectivity.md")]
    mod connectivity {}
    #[doc = include_str!("../../../book/src/labeling.md")]
    mod labeling {}
    #[doc = include_str!("../../../book/src/neural.md")]
    mod neural {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/artifacts.md")]
    mod artifacts {}
}
