// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locate and correct attention heads that carry spurious or class signal in
//! CLIP-style vision encoders, working on the direct effects each head writes
//! into the final image embedding.

pub mod correct;
pub mod error;
pub mod interpret;
pub mod locate;
pub mod metrics;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use correct::{apply_ltc, classify, CorrectionPlan, LtcMode, Prediction};
pub use error::{Error, ErrorKind, Result};
pub use locate::{ContributionMap, GroupedSample, HeadSet, HeadSetKind, Localization, Subgroup};
pub use metrics::GroupMetrics;
pub use store::{
    read_store, write_store, ActivationRecord, BankKind, DatasetManifest, LoadedStore, ModelSpec,
    ReadOptions, SampleMeta, Split, TextBank,
};
pub use synth::{generate, SynthConfig, SynthDataset};
pub use tensor::{HeadTensor, Position, TokenTensor};
