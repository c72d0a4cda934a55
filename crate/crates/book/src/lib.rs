//! Guide listings run as doctests.

#[doc = include_str!("../../../book/src/volumes.md")]
pub mod volumes {}

#[doc = include_str!("../../../book/src/engine.md")]
pub mod engine {}

#[doc = include_str!("../../../book/src/categories.md")]
pub mod categories {}

#[doc = include_str!("../../../book/src/ensembles.md")]
pub mod ensembles {}

#[doc = include_str!("../../../book/src/froc.md")]
pub mod froc {}

#[doc = include_str!("../../../book/src/phantom.md")]
pub mod phantom {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
