//! Multiview vision-language joint embedding for 3D/4D facial expression
//! recognition: synthetic face corpora, multiview depth and dynamic images,
//! mixed view augmentation, prompt banks, small image/text encoders trained
//! with a contrastive + triplet objective with a learnable margin,
//! data-parallel training and subject-independent cross-validation.

pub mod affectloss;
pub mod classify;
pub mod datagen;
pub mod dynimg;
pub mod emotion;
pub mod encoders;
pub mod error;
pub mod mixaug;
pub mod optim;
pub mod prompts;
pub mod rng;
pub mod trainer;
pub mod views;

pub use emotion::{Emotion, NUM_EMOTIONS};
pub use error::{Error, Result};
