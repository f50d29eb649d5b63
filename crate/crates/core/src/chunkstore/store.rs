use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::chunker::Chunker;
use super::rolling::RollingHashParams;
use crate::digest::Digest;
use crate::error::{Error, IoContext, Result};

pub const STORE_FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "store.meta";
const LOCK_FILE: &str = "store.lock";
const OBJECTS_DIR: &str = "objects";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreMeta {
    format_version: u32,
    params: RollingHashParams,
}

/// Ordered list of chunk digests making up one stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkList {
    pub digests: Vec<Digest>,
    pub total_length: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub chunks: u64,
    pub bytes: u64,
}

/// Content-addressed block store shared by every container of a sciunit.
///
/// Layout: `objects/<2 hex>/<62 hex>` holding raw payload bytes, plus
/// `store.meta`. Many readers may use a store at once; writers go through a
/// [`StoreWriter`], which holds the on-disk lock file.
#[derive(Debug, Clone)]
pub struct ChunkStore {
    root: PathBuf,
    params: RollingHashParams,
}

impl ChunkStore {
    /// Opens the store at `root`, initializing it with `params` if empty.
    pub fn open_or_create(root: impl Into<PathBuf>, params: RollingHashParams) -> Result<Self> {
        let root = root.into();
        if root.join(META_FILE).exists() {
            return Self::open(root);
        }
        params.validate()?;
        fs::create_dir_all(root.join(OBJECTS_DIR)).ctx(|| format!("creating {}", root.display()))?;
        let meta = StoreMeta {
            format_version: STORE_FORMAT_VERSION,
            params,
        };
        let bytes = serde_json::to_vec_pretty(&meta).expect("store meta serializes");
        write_atomic(&root.join(META_FILE), &bytes)?;
        Ok(ChunkStore { root, params })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let meta_path = root.join(META_FILE);
        let bytes = match fs::read(&meta_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("no chunk store at {}", root.display())))
            }
            Err(e) => return Err(Error::storage(format!("reading {}", meta_path.display()), e)),
        };
        let meta: StoreMeta = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Corruption(format!("{}: {e}", meta_path.display())))?;
        if meta.format_version != STORE_FORMAT_VERSION {
            return Err(Error::Corruption(format!(
                "unsupported store format version {}",
                meta.format_version
            )));
        }
        meta.params.validate()?;
        Ok(ChunkStore {
            root,
            params: meta.params,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn params(&self) -> &RollingHashParams {
        &self.params
    }

    pub fn object_path(&self, digest: &Digest) -> PathBuf {
        let hex = digest.to_hex();
        self.root.join(OBJECTS_DIR).join(&hex[..2]).join(&hex[2..])
    }

    /// Takes the single-writer lock.
    pub fn writer(&self) -> Result<StoreWriter<'_>> {
        let lock = StoreLock::acquire(&self.root)?;
        Ok(StoreWriter { store: self, _lock: lock })
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.object_path(digest).is_file()
    }

    pub fn get_chunk(&self, digest: &Digest) -> Result<Vec<u8>> {
        let path = self.object_path(digest);
        let payload = match fs::read(&path) {
            Ok(p) => p,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("chunk {digest}")))
            }
            Err(e) => return Err(Error::storage(format!("reading {}", path.display()), e)),
        };
        let actual = Digest::of(&payload);
        if actual != *digest {
            return Err(Error::Corruption(format!(
                "chunk {digest} hashes to {actual} on disk"
            )));
        }
        Ok(payload)
    }

    pub fn chunk_len(&self, digest: &Digest) -> Result<u64> {
        let path = self.object_path(digest);
        match fs::metadata(&path) {
            Ok(m) => Ok(m.len()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(Error::NotFound(format!("chunk {digest}"))),
            Err(e) => Err(Error::storage(format!("stat {}", path.display()), e)),
        }
    }

    /// Digests referenced by `list` that are absent from the store.
    pub fn missing(&self, list: &ChunkList) -> Vec<Digest> {
        let mut seen = std::collections::BTreeSet::new();
        list.digests
            .iter()
            .filter(|d| seen.insert(**d) && !self.contains(d))
            .copied()
            .collect()
    }

    /// Reader over the concatenation of the chunks in `list`, verifying each.
    pub fn reader<'a>(&'a self, list: &'a ChunkList) -> ChunkListReader<'a> {
        ChunkListReader {
            store: self,
            list,
            next: 0,
            current: Vec::new(),
            pos: 0,
            produced: 0,
        }
    }

    pub fn stats(&self) -> Result<StoreStats> {
        let mut stats = StoreStats::default();
        let objects = self.root.join(OBJECTS_DIR);
        for prefix in fs::read_dir(&objects).ctx(|| format!("listing {}", objects.display()))? {
            let prefix = prefix.ctx(|| "listing objects".into())?;
            if !prefix.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                continue;
            }
            for entry in fs::read_dir(prefix.path()).ctx(|| "listing objects".into())? {
                let entry = entry.ctx(|| "listing objects".into())?;
                let name = entry.file_name();
                if name.len() != 62 || name.to_string_lossy().starts_with('.') {
                    continue;
                }
                stats.chunks += 1;
                stats.bytes += entry.metadata().ctx(|| "stat object".into())?.len();
            }
        }
        Ok(stats)
    }
}

/// Write access to a [`ChunkStore`]; the lock is released on drop.
#[derive(Debug)]
pub struct StoreWriter<'a> {
    store: &'a ChunkStore,
    _lock: StoreLock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutOutcome {
    pub digest: Digest,
    /// False when the chunk was already present and nothing was written.
    pub inserted: bool,
}

impl<'a> StoreWriter<'a> {
    pub fn store(&self) -> &'a ChunkStore {
        self.store
    }

    pub fn put_chunk(&self, payload: &[u8]) -> Result<Digest> {
        self.put(payload).map(|o| o.digest)
    }

    pub fn put(&self, payload: &[u8]) -> Result<PutOutcome> {
        let digest = Digest::of(payload);
        let path = self.store.object_path(&digest);
        if path.is_file() {
            return Ok(PutOutcome { digest, inserted: false });
        }
        write_atomic(&path, payload)?;
        Ok(PutOutcome { digest, inserted: true })
    }

    /// Inserts a payload whose digest the caller has already verified.
    pub(crate) fn put_verified_file(&self, digest: &Digest, src: &Path) -> Result<bool> {
        let path = self.store.object_path(digest);
        if path.is_file() {
            return Ok(false);
        }
        let parent = path.parent().expect("object path has parent");
        fs::create_dir_all(parent).ctx(|| format!("creating {}", parent.display()))?;
        if fs::rename(src, &path).is_err() {
            let bytes = fs::read(src).ctx(|| format!("reading {}", src.display()))?;
            write_atomic(&path, &bytes)?;
        }
        Ok(true)
    }

    /// Returns a sink that chunks everything written to it into the store.
    pub fn chunking_sink(&self) -> Result<ChunkingSink<'_, 'a>> {
        Ok(ChunkingSink {
            writer: self,
            chunker: Chunker::new(&self.store.params)?,
            pending: Vec::with_capacity(self.store.params.max_chunk),
            list: ChunkList::default(),
            new_chunks: 0,
            new_bytes: 0,
            error: None,
        })
    }
}

/// Result of chunking one stream into the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkOutcome {
    pub list: ChunkList,
    pub new_chunks: u64,
    pub new_bytes: u64,
}

/// `io::Write` adapter that splits the byte stream into chunks as it arrives
/// and persists each finished chunk.
pub struct ChunkingSink<'w, 'a> {
    writer: &'w StoreWriter<'a>,
    chunker: Chunker,
    pending: Vec<u8>,
    list: ChunkList,
    new_chunks: u64,
    new_bytes: u64,
    error: Option<Error>,
}

impl ChunkingSink<'_, '_> {
    fn flush_chunk(&mut self) -> io::Result<()> {
        match self.writer.put(&self.pending) {
            Ok(outcome) => {
                if outcome.inserted {
                    self.new_chunks += 1;
                    self.new_bytes += self.pending.len() as u64;
                }
                self.list.digests.push(outcome.digest);
                self.list.total_length += self.pending.len() as u64;
                self.pending.clear();
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                self.error = Some(e);
                Err(io::Error::other(msg))
            }
        }
    }

    pub fn finish(mut self) -> Result<SinkOutcome> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if !self.pending.is_empty() && self.flush_chunk().is_err() {
            return Err(self.error.take().expect("error recorded"));
        }
        Ok(SinkOutcome {
            list: self.list,
            new_chunks: self.new_chunks,
            new_bytes: self.new_bytes,
        })
    }
}

impl Write for ChunkingSink<'_, '_> {
    fn write(&mut self, mut buf: &[u8]) -> io::Result<usize> {
        let len = buf.len();
        while let Some(used) = self.chunker.next_boundary(buf) {
            self.pending.extend_from_slice(&buf[..used]);
            self.flush_chunk()?;
            buf = &buf[used..];
        }
        self.pending.extend_from_slice(buf);
        Ok(len)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Sequential reader over a chunk list.
pub struct ChunkListReader<'a> {
    store: &'a ChunkStore,
    list: &'a ChunkList,
    next: usize,
    current: Vec<u8>,
    pos: usize,
    produced: u64,
}

impl Read for ChunkListReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.current.len() {
            if self.next == self.list.digests.len() {
                if self.produced != self.list.total_length {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!(
                            "chunk list yields {} bytes, manifest records {}",
                            self.produced, self.list.total_length
                        ),
                    ));
                }
                return Ok(0);
            }
            let digest = self.list.digests[self.next];
            self.current = self
                .store
                .get_chunk(&digest)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            self.next += 1;
            self.pos = 0;
        }
        let n = buf.len().min(self.current.len() - self.pos);
        buf[..n].copy_from_slice(&self.current[self.pos..self.pos + n]);
        self.pos += n;
        self.produced += n as u64;
        Ok(n)
    }
}

/// On-disk single-writer lock. A lock left by a dead process is reclaimed.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        Self::acquire_file(dir.join(LOCK_FILE))
    }

    /// Takes the lock represented by the file at `path`.
    pub fn acquire_file(path: PathBuf) -> Result<Self> {
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(StoreLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    let pid = holder.trim().parse::<u32>().ok();
                    if pid.is_some_and(|p| !process_alive(p)) {
                        let _ = fs::remove_file(&path);
                        continue;
                    }
                    return Err(Error::Busy(format!(
                        "{} held by pid {}",
                        path.display(),
                        holder.trim()
                    )));
                }
                Err(e) => return Err(Error::storage(format!("creating {}", path.display()), e)),
            }
        }
        Err(Error::Busy(format!("{} could not be reclaimed", path.display())))
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn process_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new("/proc").join(pid.to_string()).exists()
    } else {
        true
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).ctx(|| format!("creating {}", parent.display()))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(parent)
        .ctx(|| format!("creating temp file in {}", parent.display()))?;
    tmp.write_all(bytes).ctx(|| format!("writing {}", path.display()))?;
    tmp.persist(path)
        .map_err(|e| Error::storage(format!("renaming into {}", path.display()), e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::storage(format!("opening {}", path.display()), e),
    })?;
    let mut out = Vec::new();
    f.read_to_end(&mut out).ctx(|| format!("reading {}", path.display()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store() -> (tempfile::TempDir, ChunkStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = ChunkStore::open_or_create(dir.path().join("s"), RollingHashParams::default()).unwrap();
        (dir, s)
    }

    #[test]
    fn put_is_idempotent() {
        let (_d, s) = store();
        let w = s.writer().unwrap();
        let a = w.put_chunk(b"hello").unwrap();
        let before = s.stats().unwrap();
        let again = w.put(b"hello").unwrap();
        assert_eq!(again, PutOutcome { digest: a, inserted: false });
        assert_eq!(s.stats().unwrap(), before);
        assert_ne!(w.put_chunk(b"world").unwrap(), a);
        assert_eq!(s.get_chunk(&a).unwrap(), b"hello");
    }

    #[test]
    fn distinct_count_matches_store() {
        let (_d, s) = store();
        let w = s.writer().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut payloads: Vec<Vec<u8>> = (0..700)
            .map(|_| {
                let mut p = vec![0u8; 4096];
                rng.fill(&mut p[..]);
                p
            })
            .collect();
        for i in 0..300 {
            payloads.push(payloads[(i * 7) % 700].clone());
        }
        let distinct: std::collections::HashSet<_> = payloads.iter().cloned().collect();
        for p in &payloads {
            w.put_chunk(p).unwrap();
        }
        assert_eq!(distinct.len(), 700);
        assert_eq!(s.stats().unwrap().chunks, 700);
    }

    #[test]
    fn unknown_digest_is_not_found() {
        let (_d, s) = store();
        let err = s.get_chunk(&Digest::of(b"nope")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn bit_flip_is_detected() {
        let (_d, s) = store();
        let d = s.writer().unwrap().put_chunk(b"precious bytes").unwrap();
        let path = s.object_path(&d);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x10;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(s.get_chunk(&d).unwrap_err(), Error::Corruption(_)));
    }

    #[test]
    fn second_writer_is_busy() {
        let (_d, s) = store();
        let w = s.writer().unwrap();
        assert!(matches!(s.writer().unwrap_err(), Error::Busy(_)));
        drop(w);
        s.writer().unwrap();
    }

    #[test]
    fn stale_lock_is_reclaimed() {
        let (_d, s) = store();
        // pid 0 never names a live process under /proc.
        fs::write(s.root().join(LOCK_FILE), "0\n").unwrap();
        s.writer().unwrap();
    }

    #[test]
    fn sink_round_trips_and_dedups() {
        let (_d, s) = store();
        let mut data = vec![0u8; 300_000];
        ChaCha8Rng::seed_from_u64(11).fill(&mut data[..]);
        let w = s.writer().unwrap();
        let mut sink = w.chunking_sink().unwrap();
        sink.write_all(&data).unwrap();
        let first = sink.finish().unwrap();
        assert_eq!(first.list.total_length, data.len() as u64);
        assert_eq!(first.new_bytes, data.len() as u64);

        let mut sink = w.chunking_sink().unwrap();
        for piece in data.chunks(999) {
            sink.write_all(piece).unwrap();
        }
        let second = sink.finish().unwrap();
        assert_eq!(second.list, first.list);
        assert_eq!(second.new_bytes, 0);

        let mut back = Vec::new();
        s.reader(&first.list).read_to_end(&mut back).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn reopen_keeps_params() {
        let dir = tempfile::tempdir().unwrap();
        let params = RollingHashParams {
            boundary_bits: 13,
            threshold: 5,
            ..RollingHashParams::default()
        };
        ChunkStore::open_or_create(dir.path(), params).unwrap();
        let reopened = ChunkStore::open_or_create(dir.path(), RollingHashParams::default()).unwrap();
        assert_eq!(*reopened.params(), params);
    }
}
