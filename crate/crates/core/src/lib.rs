//! Omni-prompt referring image segmentation at desk scale.
//!
//! A target image is segmented according to a text expression, a reference
//! image with a mask/box/scribble prompt, or both. The crate contains the
//! synthetic benchmark generator, the model, its training regime and the
//! evaluation protocol.

pub mod maskgeo;
pub mod synthref;
pub mod omnimodel;
pub mod objective;
pub mod trainer;
pub mod evalkit;
