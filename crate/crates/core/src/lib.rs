//! Retrieval-augmented Japanese→Chinese translation.
//!
//! Each sentence is analysed (NMCC type and likely error risks), similar
//! translation pairs are retrieved from a knowledge base, the evidence is
//! rendered into a four-block prompt, and the model's output is scored with
//! character-level sentence BLEU. [`harness::Engine::sweep`] runs the whole
//! pipeline across nested knowledge-base sizes.

pub mod analysis;
pub mod bleu;
pub mod config;
pub mod corpus;
pub mod generation;
pub mod harness;
pub mod llm;
pub mod promptgen;
pub mod retrieval;
pub mod text;

// The guide's chapters are compiled here so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/bleu.md")]
    mod bleu {}
    #[doc = include_str!("../../../book/src/sweep.md")]
    mod sweep {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/workbench.md")]
    mod workbench {}
}
