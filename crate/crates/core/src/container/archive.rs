//! Deterministic single-file archive of a directory tree.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[4] entry_count:u64
//! repeated entry_count times:
//!   path_len:u32 path[path_len] kind:u8 mode:u32 size:u64 content[size]
//! ```
//!
//! Entries are sorted by path bytes. Paths are relative, `/`-separated and
//! never contain `.` or `..` segments. Symlink content is the link target.
//! No timestamps or ownership are recorded.

use std::collections::BTreeSet;
use std::ffi::OsStr;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{symlink, MetadataExt, PermissionsExt};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"SUA1";
pub const BUNDLE_MAGIC: [u8; 4] = *b"SUB1";

const MAX_PATH_LEN: u32 = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Directory,
    Symlink,
}

impl EntryKind {
    fn code(self) -> u8 {
        match self {
            EntryKind::File => 0,
            EntryKind::Directory => 1,
            EntryKind::Symlink => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(EntryKind::File),
            1 => Some(EntryKind::Directory),
            2 => Some(EntryKind::Symlink),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub path: PathBuf,
    pub kind: EntryKind,
    pub mode: u32,
    pub size: u64,
    pub link_target: Option<PathBuf>,
}

impl ArchiveEntry {
    pub fn file(path: impl Into<PathBuf>, mode: u32, size: u64) -> Self {
        ArchiveEntry {
            path: path.into(),
            kind: EntryKind::File,
            mode,
            size,
            link_target: None,
        }
    }
}

/// Checks that `path` is relative, non-empty and free of `.`/`..` segments.
pub fn validate_entry_path(path: &Path) -> Result<()> {
    let bytes = path.as_os_str().as_bytes();
    let ok = !bytes.is_empty()
        && !bytes.starts_with(b"/")
        && !bytes.ends_with(b"/")
        && bytes
            .split(|&b| b == b'/')
            .all(|seg| !seg.is_empty() && seg != b"." && seg != b"..")
        && !bytes.contains(&0);
    if ok {
        Ok(())
    } else {
        Err(Error::Corruption(format!("invalid archive path {:?}", path)))
    }
}

/// Streaming archive writer; entries must be appended in sorted order.
pub struct ArchiveWriter<W: Write> {
    out: W,
    remaining: u64,
    last: Option<Vec<u8>>,
    written: u64,
}

impl<W: Write> ArchiveWriter<W> {
    pub fn new(mut out: W, magic: [u8; 4], entry_count: u64) -> Result<Self> {
        out.write_all(&magic).ctx(|| "writing archive header".into())?;
        out.write_all(&entry_count.to_le_bytes()).ctx(|| "writing archive header".into())?;
        Ok(ArchiveWriter {
            out,
            remaining: entry_count,
            last: None,
            written: 12,
        })
    }

    /// Appends one entry; `content` must yield exactly `entry.size` bytes.
    pub fn append(&mut self, entry: &ArchiveEntry, content: impl Read) -> Result<()> {
        validate_entry_path(&entry.path)?;
        let path = entry.path.as_os_str().as_bytes();
        if self.remaining == 0 {
            return Err(Error::Internal("archive entry count exceeded".into()));
        }
        if self.last.as_deref().is_some_and(|prev| prev >= path) {
            return Err(Error::Internal(format!("archive entries out of order at {:?}", entry.path)));
        }
        let mut header = Vec::with_capacity(path.len() + 17);
        header.extend_from_slice(&(path.len() as u32).to_le_bytes());
        header.extend_from_slice(path);
        header.push(entry.kind.code());
        header.extend_from_slice(&entry.mode.to_le_bytes());
        header.extend_from_slice(&entry.size.to_le_bytes());
        self.out.write_all(&header).ctx(|| "writing archive entry".into())?;
        let copied = io::copy(&mut content.take(entry.size), &mut self.out)
            .map_err(|e| Error::AuditIncomplete(format!("{}: {e}", entry.path.display())))?;
        if copied != entry.size {
            return Err(Error::AuditIncomplete(format!(
                "{} changed size while archiving ({} of {} bytes)",
                entry.path.display(),
                copied,
                entry.size
            )));
        }
        self.written += header.len() as u64 + copied;
        self.remaining -= 1;
        self.last = Some(path.to_vec());
        Ok(())
    }

    pub fn finish(mut self) -> Result<(W, u64)> {
        if self.remaining != 0 {
            return Err(Error::Internal(format!("{} archive entries never written", self.remaining)));
        }
        self.out.flush().ctx(|| "flushing archive".into())?;
        Ok((self.out, self.written))
    }
}

/// A tree entry together with where its bytes come from on disk.
#[derive(Debug, Clone)]
pub struct ScannedEntry {
    pub entry: ArchiveEntry,
    pub source: PathBuf,
}

/// Lists `root` in archive order. Special files (sockets, devices, FIFOs)
/// are skipped with a warning.
pub fn scan_tree(root: &Path) -> Result<Vec<ScannedEntry>> {
    let meta = fs::metadata(root).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::NotFound(root.display().to_string()),
        _ => Error::AuditIncomplete(format!("{}: {e}", root.display())),
    })?;
    if !meta.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    for item in walkdir::WalkDir::new(root).min_depth(1).follow_links(false) {
        let item = item.map_err(|e| {
            let p = e.path().map(|p| p.display().to_string()).unwrap_or_default();
            Error::AuditIncomplete(format!("{p}: {e}"))
        })?;
        let rel = item.path().strip_prefix(root).expect("walk stays under root").to_path_buf();
        let md = item
            .path()
            .symlink_metadata()
            .map_err(|e| Error::AuditIncomplete(format!("{}: {e}", item.path().display())))?;
        let ft = md.file_type();
        let mode = md.mode() & 0o7777;
        let entry = if ft.is_symlink() {
            let target = fs::read_link(item.path())
                .map_err(|e| Error::AuditIncomplete(format!("{}: {e}", item.path().display())))?;
            ArchiveEntry {
                path: rel,
                kind: EntryKind::Symlink,
                mode,
                size: target.as_os_str().len() as u64,
                link_target: Some(target),
            }
        } else if ft.is_dir() {
            ArchiveEntry {
                path: rel,
                kind: EntryKind::Directory,
                mode,
                size: 0,
                link_target: None,
            }
        } else if ft.is_file() {
            ArchiveEntry::file(rel, mode, md.len())
        } else {
            log::warn!("skipping special file {}", item.path().display());
            continue;
        };
        out.push(ScannedEntry {
            entry,
            source: item.path().to_path_buf(),
        });
    }
    out.sort_by(|a, b| a.entry.path.as_os_str().as_bytes().cmp(b.entry.path.as_os_str().as_bytes()));
    Ok(out)
}

/// Writes the deterministic archive of `root` to `out`; returns bytes written.
pub fn archive_tree<W: Write>(root: &Path, out: W) -> Result<u64> {
    let entries = scan_tree(root)?;
    let mut w = ArchiveWriter::new(out, ARCHIVE_MAGIC, entries.len() as u64)?;
    for s in &entries {
        match s.entry.kind {
            EntryKind::File => {
                let f = File::open(&s.source)
                    .map_err(|e| Error::AuditIncomplete(format!("{}: {e}", s.source.display())))?;
                w.append(&s.entry, f)?;
            }
            EntryKind::Directory => w.append(&s.entry, io::empty())?,
            EntryKind::Symlink => {
                let target = s.entry.link_target.as_ref().expect("symlink has target");
                w.append(&s.entry, target.as_os_str().as_bytes())?;
            }
        }
    }
    Ok(w.finish()?.1)
}

/// Pull-style archive reader.
pub struct ArchiveReader<R: Read> {
    input: R,
    remaining: u64,
    last: Option<Vec<u8>>,
    unread: u64,
}

impl<R: Read> ArchiveReader<R> {
    pub fn new(mut input: R, magic: [u8; 4]) -> Result<Self> {
        let mut header = [0u8; 12];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::Corruption(format!("archive header: {e}")))?;
        if header[..4] != magic {
            return Err(Error::Corruption(format!(
                "bad archive magic {:?}, expected {:?}",
                String::from_utf8_lossy(&header[..4]),
                String::from_utf8_lossy(&magic)
            )));
        }
        let count = u64::from_le_bytes(header[4..].try_into().expect("8 bytes"));
        Ok(ArchiveReader {
            input,
            remaining: count,
            last: None,
            unread: 0,
        })
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    /// Reads the next entry header. Any unread content of the previous entry
    /// is skipped.
    pub fn next_entry(&mut self) -> Result<Option<ArchiveEntry>> {
        self.skip_content()?;
        if self.remaining == 0 {
            return Ok(None);
        }
        let corrupt = |e: io::Error| Error::Corruption(format!("truncated archive: {e}"));
        let mut len = [0u8; 4];
        self.input.read_exact(&mut len).map_err(corrupt)?;
        let len = u32::from_le_bytes(len);
        if len == 0 || len > MAX_PATH_LEN {
            return Err(Error::Corruption(format!("archive path length {len}")));
        }
        let mut path = vec![0u8; len as usize];
        self.input.read_exact(&mut path).map_err(corrupt)?;
        let mut rest = [0u8; 13];
        self.input.read_exact(&mut rest).map_err(corrupt)?;
        let kind = EntryKind::from_code(rest[0])
            .ok_or_else(|| Error::Corruption(format!("unknown entry kind {}", rest[0])))?;
        let mode = u32::from_le_bytes(rest[1..5].try_into().expect("4 bytes"));
        let size = u64::from_le_bytes(rest[5..13].try_into().expect("8 bytes"));
        if self.last.as_deref().is_some_and(|prev| prev >= &path[..]) {
            return Err(Error::Corruption("archive entries not strictly sorted".into()));
        }
        let path_buf = PathBuf::from(OsStr::from_bytes(&path));
        validate_entry_path(&path_buf)?;
        if kind == EntryKind::Directory && size != 0 {
            return Err(Error::Corruption(format!("directory {path_buf:?} has content")));
        }
        let mut entry = ArchiveEntry {
            path: path_buf,
            kind,
            mode,
            size,
            link_target: None,
        };
        self.last = Some(path);
        self.remaining -= 1;
        self.unread = size;
        if kind == EntryKind::Symlink {
            let mut target = Vec::new();
            self.content().read_to_end(&mut target).map_err(corrupt)?;
            if target.len() as u64 != size || target.is_empty() {
                return Err(Error::Corruption(format!("bad symlink target for {:?}", entry.path)));
            }
            entry.link_target = Some(PathBuf::from(OsStr::from_bytes(&target)));
        }
        Ok(Some(entry))
    }

    /// Content of the entry most recently returned by [`Self::next_entry`].
    pub fn content(&mut self) -> ContentReader<'_, R> {
        ContentReader { archive: self }
    }

    fn skip_content(&mut self) -> Result<()> {
        if self.unread > 0 {
            let n = io::copy(&mut self.content(), &mut io::sink())
                .map_err(|e| Error::Corruption(format!("truncated archive: {e}")))?;
            if self.unread != 0 {
                return Err(Error::Corruption(format!("archive truncated, {n} bytes short")));
            }
        }
        Ok(())
    }

    /// Confirms nothing follows the last entry.
    pub fn finish(mut self) -> Result<()> {
        self.skip_content()?;
        if self.remaining != 0 {
            return Err(Error::Corruption(format!("{} entries missing", self.remaining)));
        }
        let mut probe = [0u8; 1];
        match self.input.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Corruption("trailing bytes after archive".into())),
            Err(e) => Err(Error::Corruption(format!("reading archive tail: {e}"))),
        }
    }
}

pub struct ContentReader<'a, R: Read> {
    archive: &'a mut ArchiveReader<R>,
}

impl<R: Read> Read for ContentReader<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.archive.unread == 0 {
            return Ok(0);
        }
        let want = buf.len().min(self.archive.unread.min(usize::MAX as u64) as usize);
        let n = self.archive.input.read(&mut buf[..want])?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "archive content truncated"));
        }
        self.archive.unread -= n as u64;
        Ok(n)
    }
}

/// Recreates the tree stored in an archive under `dest`, which must be empty
/// or absent. Returns the entries written.
pub fn unarchive<R: Read>(input: R, dest: &Path) -> Result<Vec<ArchiveEntry>> {
    let mut reader = ArchiveReader::new(input, ARCHIVE_MAGIC)?;
    if dest.exists() {
        let mut it = fs::read_dir(dest).ctx(|| format!("reading {}", dest.display()))?;
        if it.next().is_some() {
            return Err(Error::InvalidArgument(format!("{} is not empty", dest.display())));
        }
    } else {
        fs::create_dir_all(dest).ctx(|| format!("creating {}", dest.display()))?;
    }
    let mut entries = Vec::new();
    let mut links: BTreeSet<PathBuf> = BTreeSet::new();
    let mut dirs: Vec<(PathBuf, u32)> = Vec::new();
    while let Some(entry) = reader.next_entry()? {
        if entry.path.ancestors().skip(1).any(|a| links.contains(a)) {
            return Err(Error::Corruption(format!(
                "{} would be written through a symlink",
                entry.path.display()
            )));
        }
        let target = dest.join(&entry.path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).ctx(|| format!("creating {}", parent.display()))?;
        }
        match entry.kind {
            EntryKind::Directory => {
                fs::create_dir_all(&target).ctx(|| format!("creating {}", target.display()))?;
                dirs.push((target, entry.mode));
            }
            EntryKind::File => {
                let mut f = File::create(&target).ctx(|| format!("creating {}", target.display()))?;
                let n = io::copy(&mut reader.content(), &mut f)
                    .map_err(|e| Error::Corruption(format!("{}: {e}", entry.path.display())))?;
                debug_assert_eq!(n, entry.size);
                drop(f);
                fs::set_permissions(&target, fs::Permissions::from_mode(entry.mode))
                    .ctx(|| format!("chmod {}", target.display()))?;
            }
            EntryKind::Symlink => {
                let link = entry.link_target.as_ref().expect("reader fills symlink targets");
                symlink(link, &target).ctx(|| format!("symlink {}", target.display()))?;
                links.insert(entry.path.clone());
            }
        }
        entries.push(entry);
    }
    reader.finish()?;
    // Children first so read-only directories do not block their contents.
    for (dir, mode) in dirs.into_iter().rev() {
        fs::set_permissions(&dir, fs::Permissions::from_mode(mode)).ctx(|| format!("chmod {}", dir.display()))?;
    }
    Ok(entries)
}

/// Lexically normalizes an absolute path, dropping `.` and resolving `..`.
pub fn normalize_absolute(path: &Path) -> PathBuf {
    let mut out = PathBuf::from("/");
    for c in path.components() {
        match c {
            Component::Normal(s) => out.push(s),
            Component::ParentDir => {
                out.pop();
            }
            Component::RootDir | Component::CurDir | Component::Prefix(_) => {}
        }
    }
    out
}

/// `root` joined with absolute `path` (path mirroring).
pub fn mirror_of(root: &Path, path: &Path) -> PathBuf {
    let norm = normalize_absolute(path);
    root.join(norm.strip_prefix("/").expect("normalized path is absolute"))
}
