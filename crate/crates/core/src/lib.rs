//! Re-captioning pipeline for open-vocabulary, instance-grounded image
//! annotation: curate → describe → summarize → detect → resample →
//! cross-check → finalize.

pub mod crosscheck;
pub mod curation;
pub mod datamodel;
pub mod detect;
pub mod fixtures;
pub mod gateway;
pub mod geometry;
pub mod pipeline;
pub mod recaption;
pub mod resample;
pub mod stats;
pub mod validate;
