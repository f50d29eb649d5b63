//! Content-defined chunking and the deduplicating block store.

mod chunker;
mod rolling;
mod store;

pub use chunker::{chunk_bytes, chunk_stream, chunk_stream_with_buffer, ChunkBoundary, Chunker};
pub use rolling::{direct_hash, is_prime, roll_hash, RollingHashParams, RollingHasher, MERSENNE_61};
pub use store::{
    ChunkList, ChunkListReader, ChunkStore, ChunkingSink, PutOutcome, SinkOutcome, StoreLock, StoreStats,
    StoreWriter, STORE_FORMAT_VERSION,
};
pub(crate) use store::{read_file, write_atomic};
