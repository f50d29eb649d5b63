//! Sciunit namespaces, the deterministic archive format, container
//! commit/materialize against the chunk store, and bundle transport.

pub mod archive;
pub mod bundle;
mod manifest;
mod sciunit;

pub use archive::{archive_tree, mirror_of, normalize_absolute, scan_tree, unarchive, ArchiveEntry, EntryKind};
pub use bundle::{
    export_bundle, export_bundle_bytes, import_bundle, import_bundle_into_root, stage_bundle, BundleHeader,
    BundleSummary,
};
pub use manifest::{compute_execution_id, provenance_ref_for, Annotation, Manifest};
pub use sciunit::{list_sciunits, validate_name, CommitOutcome, CommitRequest, ExecutionSummary, Sciunit, SciunitMeta};
pub(crate) use sciunit::digest_file;
