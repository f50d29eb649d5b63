//! Self-contained single-file transport of executions.
//!
//! A bundle uses the archive layout with magic `SUB1`. Entries:
//! `sciunit.json`, then either `manifest.json` + `log.ndjson` (one
//! execution) or `executions/<id>/{manifest.json,log.ndjson}` (several),
//! then `objects/<2 hex>/<62 hex>` holding each distinct chunk once.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::archive::{ArchiveEntry, ArchiveReader, ArchiveWriter, EntryKind, BUNDLE_MAGIC};
use super::manifest::{Annotation, Manifest};
use super::sciunit::Sciunit;
use crate::chunkstore::RollingHashParams;
use crate::digest::{Digest, Hasher};
use crate::error::{Error, IoContext, Result};
use crate::json::to_canonical_file;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub name: String,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BundleSummary {
    pub executions: Vec<String>,
    pub chunks: u64,
    pub chunk_bytes: u64,
    pub bundle_bytes: u64,
}

/// Writes a bundle of `ids` (at least one) to `out`.
pub fn export_bundle<W: Write>(sciunit: &Sciunit, ids: &[String], out: W) -> Result<BundleSummary> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no executions to export".into()));
    }
    let mut unique = BTreeSet::new();
    let mut docs: Vec<(String, Vec<u8>)> = Vec::new();
    let mut objects: BTreeSet<Digest> = BTreeSet::new();
    let header = BundleHeader {
        name: sciunit.name().to_string(),
        annotations: sciunit.annotations().to_vec(),
    };
    docs.push(("sciunit.json".into(), to_canonical_file(&header)));
    for id in ids {
        if !unique.insert(id.clone()) {
            continue;
        }
        let manifest = sciunit.manifest(id)?;
        let log = sciunit.log_bytes(id)?;
        let missing = sciunit.store().missing(&manifest.chunk_list);
        if !missing.is_empty() {
            return Err(Error::Corruption(format!("{id} references {} missing chunk(s)", missing.len())));
        }
        objects.extend(manifest.chunk_list.digests.iter().copied());
        let prefix = if ids.len() == 1 { String::new() } else { format!("executions/{id}/") };
        docs.push((format!("{prefix}manifest.json"), to_canonical_file(&manifest)));
        docs.push((format!("{prefix}log.ndjson"), log));
    }
    docs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut object_entries = Vec::with_capacity(objects.len());
    let mut chunk_bytes = 0;
    for d in &objects {
        let len = sciunit.store().chunk_len(d)?;
        chunk_bytes += len;
        let hex = d.to_hex();
        object_entries.push((ArchiveEntry::file(format!("objects/{}/{}", &hex[..2], &hex[2..]), 0o644, len), *d));
    }
    // "executions/" and "manifest.json"/"log.ndjson" all sort before "objects/";
    // "sciunit.json" sorts after it.
    let (before, after): (Vec<_>, Vec<_>) = docs.into_iter().partition(|(name, _)| name.as_str() < "objects/");

    let total = (before.len() + object_entries.len() + after.len()) as u64;
    let mut w = ArchiveWriter::new(out, BUNDLE_MAGIC, total)?;
    for (name, bytes) in &before {
        w.append(&ArchiveEntry::file(name, 0o644, bytes.len() as u64), &bytes[..])?;
    }
    for (entry, digest) in &object_entries {
        let f = File::open(sciunit.store().object_path(digest)).ctx(|| format!("opening chunk {digest}"))?;
        w.append(entry, f)?;
    }
    for (name, bytes) in &after {
        w.append(&ArchiveEntry::file(name, 0o644, bytes.len() as u64), &bytes[..])?;
    }
    let (_, bundle_bytes) = w.finish()?;
    Ok(BundleSummary {
        executions: unique.into_iter().collect(),
        chunks: objects.len() as u64,
        chunk_bytes,
        bundle_bytes,
    })
}

/// A bundle whose every chunk has been verified and spooled to disk.
#[derive(Debug)]
pub struct StagedBundle {
    pub header: BundleHeader,
    pub executions: Vec<(Manifest, Vec<u8>)>,
    pub objects: BTreeMap<Digest, PathBuf>,
    _spool: tempfile::TempDir,
}

const MAX_DOC_BYTES: u64 = 256 * 1024 * 1024;

/// Parses and verifies a bundle, spooling chunks under `spool_parent`.
///
/// Every chunk is re-hashed against its object name, every manifest id is
/// recomputed from its content, and every log is checked against its
/// manifest's provenance reference. Any mismatch rejects the whole bundle.
pub fn stage_bundle<R: Read>(input: R, spool_parent: &Path) -> Result<StagedBundle> {
    let spool = tempfile::Builder::new()
        .prefix("import-")
        .tempdir_in(spool_parent)
        .ctx(|| format!("creating spool in {}", spool_parent.display()))?;
    let mut reader = ArchiveReader::new(input, BUNDLE_MAGIC)?;
    let mut header = None;
    let mut manifests: BTreeMap<String, Manifest> = BTreeMap::new();
    let mut logs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut objects = BTreeMap::new();

    while let Some(entry) = reader.next_entry()? {
        if entry.kind != EntryKind::File {
            return Err(Error::Corruption(format!("unexpected bundle entry {}", entry.path.display())));
        }
        let name = entry.path.to_string_lossy().into_owned();
        let parts: Vec<&str> = name.split('/').collect();
        match parts.as_slice() {
            ["objects", a, b] if a.len() == 2 && b.len() == 62 => {
                let digest: Digest = format!("{a}{b}")
                    .parse()
                    .map_err(|_| Error::Corruption(format!("bad object name {name}")))?;
                let dest = spool.path().join(digest.to_hex());
                let mut file = File::create(&dest).ctx(|| format!("spooling {name}"))?;
                let mut hasher = Hasher::new();
                let mut buf = vec![0u8; 64 * 1024];
                let mut content = reader.content();
                loop {
                    let n = content
                        .read(&mut buf)
                        .map_err(|e| Error::Corruption(format!("{name}: {e}")))?;
                    if n == 0 {
                        break;
                    }
                    hasher.update(&buf[..n]);
                    file.write_all(&buf[..n]).ctx(|| format!("spooling {name}"))?;
                }
                let actual = hasher.finish();
                if actual != digest {
                    return Err(Error::Corruption(format!("chunk {digest} in bundle hashes to {actual}")));
                }
                objects.insert(digest, dest);
            }
            ["sciunit.json"] => {
                let bytes = read_doc(&mut reader, &entry)?;
                header = Some(
                    serde_json::from_slice::<BundleHeader>(&bytes)
                        .map_err(|e| Error::Corruption(format!("sciunit.json: {e}")))?,
                );
            }
            ["manifest.json"] | ["executions", _, "manifest.json"] => {
                let bytes = read_doc(&mut reader, &entry)?;
                let m: Manifest =
                    serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("{name}: {e}")))?;
                m.verify()?;
                if let ["executions", id, _] = parts.as_slice() {
                    if *id != m.execution_id {
                        return Err(Error::Corruption(format!("{name} holds execution {}", m.execution_id)));
                    }
                }
                manifests.insert(slot(&parts), m);
            }
            ["log.ndjson"] | ["executions", _, "log.ndjson"] => {
                let bytes = read_doc(&mut reader, &entry)?;
                logs.insert(slot(&parts), bytes);
            }
            _ => return Err(Error::Corruption(format!("unexpected bundle entry {name}"))),
        }
    }
    reader.finish()?;

    let header = header.ok_or_else(|| Error::Corruption("bundle has no sciunit.json".into()))?;
    if manifests.is_empty() {
        return Err(Error::Corruption("bundle holds no manifest".into()));
    }
    let mut executions = Vec::new();
    for (key, manifest) in manifests {
        let log = logs
            .remove(&key)
            .ok_or_else(|| Error::Corruption(format!("no interaction log for {}", manifest.execution_id)))?;
        manifest.verify_log(&log)?;
        executions.push((manifest, log));
    }
    if let Some(extra) = logs.keys().next() {
        return Err(Error::Corruption(format!("log without manifest in slot {extra:?}")));
    }
    Ok(StagedBundle {
        header,
        executions,
        objects,
        _spool: spool,
    })
}

fn slot(parts: &[&str]) -> String {
    if parts.len() == 3 {
        parts[1].to_string()
    } else {
        String::new()
    }
}

fn read_doc<R: Read>(reader: &mut ArchiveReader<R>, entry: &ArchiveEntry) -> Result<Vec<u8>> {
    if entry.size > MAX_DOC_BYTES {
        return Err(Error::Corruption(format!("{} is implausibly large", entry.path.display())));
    }
    let mut bytes = Vec::with_capacity(entry.size as usize);
    reader
        .content()
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Corruption(format!("{}: {e}", entry.path.display())))?;
    Ok(bytes)
}

/// Verifies a bundle and records its executions in `sciunit`.
pub fn import_bundle<R: Read>(sciunit: &mut Sciunit, input: R) -> Result<Vec<Manifest>> {
    let spool = sciunit.scratch_dir("bundle-")?;
    let staged = stage_bundle(input, spool.path())?;
    import_staged(sciunit, staged)
}

pub fn import_staged(sciunit: &mut Sciunit, staged: StagedBundle) -> Result<Vec<Manifest>> {
    sciunit.set_annotations_if_empty(&staged.header.annotations)?;
    sciunit.register_verified(staged.executions, &staged.objects)
}

/// Imports a bundle into the sciunit it names under `root`, creating it if needed.
pub fn import_bundle_into_root<R: Read>(
    root: &Path,
    input: R,
    params: RollingHashParams,
) -> Result<(Sciunit, Vec<Manifest>)> {
    std::fs::create_dir_all(root).ctx(|| format!("creating {}", root.display()))?;
    let spool = tempfile::Builder::new()
        .prefix(".bundle-")
        .tempdir_in(root)
        .ctx(|| format!("creating spool in {}", root.display()))?;
    let staged = stage_bundle(input, spool.path())?;
    let mut sciunit = Sciunit::open_or_create(root, &staged.header.name, params)?;
    let manifests = import_staged(&mut sciunit, staged)?;
    Ok((sciunit, manifests))
}

/// Serializes a bundle in memory and returns it with its SHA-256.
pub fn export_bundle_bytes(sciunit: &Sciunit, ids: &[String]) -> Result<(Vec<u8>, Digest, BundleSummary)> {
    let mut bytes = Vec::new();
    let summary = export_bundle(sciunit, ids, &mut bytes)?;
    let digest = Digest::of(&bytes);
    Ok((bytes, digest, summary))
}

pub fn digest_reader<R: Read>(mut r: R) -> io::Result<Digest> {
    let mut h = Hasher::new();
    io::copy(&mut r, &mut h)?;
    Ok(h.finish())
}
