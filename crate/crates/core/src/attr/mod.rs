//! Attribute schema, structured rationales, and the synthetic dataset.

pub mod data;
pub mod map;
pub mod schema;

pub use data::{Dataset, GenConfig, ProductRecord, Selector, Split, Triplet};
pub use map::{parse, serialize, AttributeMap, FormatFailure, ParseFailure};
pub use schema::{AttrKey, Schema};
