//! Content-defined chunking driven by the rolling hash.

use std::io::{self, Read};

use serde::{Deserialize, Serialize};

use super::rolling::{RollingHashParams, RollingHasher};
use crate::error::{IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkBoundary {
    pub offset: u64,
    pub length: u64,
}

/// Streaming boundary detector.
///
/// The hash runs continuously over the whole stream (it is not reset at
/// chunk boundaries), so boundaries depend only on content and on the
/// distance to the previous boundary, never on how input is split across
/// calls to [`Chunker::next_boundary`].
#[derive(Debug, Clone)]
pub struct Chunker {
    hasher: RollingHasher,
    mask: u64,
    threshold: u64,
    min_chunk: usize,
    max_chunk: usize,
    window: Vec<u8>,
    cursor: usize,
    filled: usize,
    hash: u64,
    chunk_len: usize,
}

impl Chunker {
    pub fn new(params: &RollingHashParams) -> Result<Self> {
        params.validate()?;
        Ok(Chunker {
            hasher: RollingHasher::new(params),
            mask: params.mask(),
            threshold: params.threshold,
            min_chunk: params.min_chunk,
            max_chunk: params.max_chunk,
            window: vec![0; params.window_len],
            cursor: 0,
            filled: 0,
            hash: 0,
            chunk_len: 0,
        })
    }

    /// Consumes bytes from `data` until a chunk ends. Returns the number of
    /// bytes consumed if the current chunk ends inside `data`, or `None` if
    /// all of `data` belongs to a still-open chunk.
    pub fn next_boundary(&mut self, data: &[u8]) -> Option<usize> {
        let n = self.window.len();
        for (i, &byte) in data.iter().enumerate() {
            let outgoing = self.window[self.cursor];
            self.hash = if self.filled < n {
                self.filled += 1;
                self.hasher.push(self.hash, byte)
            } else {
                self.hasher.roll(self.hash, byte, outgoing)
            };
            self.window[self.cursor] = byte;
            self.cursor += 1;
            if self.cursor == n {
                self.cursor = 0;
            }
            self.chunk_len += 1;

            let at_max = self.chunk_len >= self.max_chunk;
            let content_cut = self.filled == n
                && self.chunk_len >= self.min_chunk
                && self.hash & self.mask == self.threshold;
            if at_max || content_cut {
                self.chunk_len = 0;
                return Some(i + 1);
            }
        }
        None
    }

    /// Length of the trailing chunk still open at end of stream.
    pub fn pending_len(&self) -> usize {
        self.chunk_len
    }
}

/// Splits a readable stream into content-defined chunks.
pub fn chunk_stream<R: Read>(reader: R, params: &RollingHashParams) -> Result<Vec<ChunkBoundary>> {
    chunk_stream_with_buffer(reader, params, 64 * 1024)
}

/// As [`chunk_stream`], reading through a buffer of `buffer_len` bytes.
pub fn chunk_stream_with_buffer<R: Read>(
    mut reader: R,
    params: &RollingHashParams,
    buffer_len: usize,
) -> Result<Vec<ChunkBoundary>> {
    let mut chunker = Chunker::new(params)?;
    let mut buf = vec![0u8; buffer_len.max(1)];
    let mut out = Vec::new();
    let mut start = 0u64;
    let mut pos = 0u64;
    loop {
        let got = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e).ctx(|| "reading chunk stream".into()),
        };
        let mut slice = &buf[..got];
        while let Some(used) = chunker.next_boundary(slice) {
            pos += used as u64;
            out.push(ChunkBoundary {
                offset: start,
                length: pos - start,
            });
            start = pos;
            slice = &slice[used..];
        }
        pos += slice.len() as u64;
    }
    if pos > start {
        out.push(ChunkBoundary {
            offset: start,
            length: pos - start,
        });
    }
    Ok(out)
}

/// Chunk boundaries of an in-memory buffer.
pub fn chunk_bytes(data: &[u8], params: &RollingHashParams) -> Result<Vec<ChunkBoundary>> {
    chunk_stream_with_buffer(data, params, data.len().max(1))
}
