//! Region geometry, vocabulary and tokenization, and sequence packing.
//! The embedding step lives with the model parameters in [`crate::backbone`]
//! and is re-exported here.

mod packing;
mod region;
mod vocab;

pub use packing::{pack_sequence, Boundaries, DialogTurn, TokenSequence};
pub use region::{compute_location_vector, BoundingBox, VisualRegion, LOCATION_DIM};
pub use vocab::{BasicTokenizer, TokenId, Tokenizer, Vocabulary, RESERVED};
pub use crate::backbone::embed;
