//! On-disk formats. Every writer is deterministic: the same inputs give
//! byte-identical files.

pub mod bundle;
pub mod camera;
pub mod config;
pub mod fmap;
pub mod kv;
pub mod lock;
pub mod plot;
pub mod pnm;
pub mod report;
pub mod rois;
