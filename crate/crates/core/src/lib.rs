//! Multi-atlas segmentation toolkit.
//!
//! The pipeline segments a target image by deforming labelled atlas images
//! onto it and fusing their candidate segmentations. Fusion is either
//! classical (majority voting, similarity-weighted voting, joint label
//! fusion) or learned: a weighted-voting network predicts per-atlas,
//! per-label weight maps, the weighted votes are averaged, and a second
//! network refines the averaged votes into the final segmentation. Both
//! networks are trained end to end through a small reverse-mode autodiff
//! engine built for exactly the operator set they need.

pub mod classicfusion;
pub mod dlf;
mod elastic;
pub mod error;
pub mod evalkit;
pub mod gridnet;
pub mod synthlab;
pub mod trainer;
pub mod unet;
pub mod volcore;

pub use error::{Error, Result};
