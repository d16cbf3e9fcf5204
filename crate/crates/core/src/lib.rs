//! Joint time-of-capture and geo-location retrieval over precomputed image
//! embeddings.
//!
//! Images, GPS coordinates and capture times are embedded into one shared
//! space. Location and time encoders are random Fourier features followed by
//! small MLPs; the image encoder is an MLP over frozen backbone vectors.
//! Training combines an image-location contrastive loss with a queue of past
//! locations and a soft-target time loss on the month/hour torus. Predictions
//! are nearest-neighbour lookups in galleries of embedded labels.
//!
//! Modules, bottom up: [`geotime`] (calendar, torus and geodesy), [`diffnet`]
//! (tensors, layers, gradients, Adam), [`encoders`], [`objectives`],
//! [`datastore`], [`retrieval`] and [`trainer`].

pub mod datastore;
pub mod diffnet;
pub mod encoders;
pub mod error;
pub mod geotime;
pub mod objectives;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
