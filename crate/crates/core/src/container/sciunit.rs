use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::archive::{archive_tree, mirror_of, unarchive};
use super::manifest::{compute_execution_id, provenance_ref_for, Annotation, Manifest};
use crate::chunkstore::{read_file, write_atomic, ChunkStore, RollingHashParams, StoreWriter};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, IoContext, Result};
use crate::json::to_canonical_file;

const META_FILE: &str = "sciunit.json";
const MANIFESTS_DIR: &str = "manifests";
const LOGS_DIR: &str = "logs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SciunitMeta {
    pub name: String,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub executions: Vec<String>,
    /// Paths added by hand with `deps add`, folded into the next package.
    #[serde(default)]
    pub extra_deps: Vec<PathBuf>,
}

/// Everything needed to commit one audited sandbox.
#[derive(Debug, Clone)]
pub struct CommitRequest {
    pub sandbox_root: PathBuf,
    pub command: Vec<String>,
    pub environment: BTreeMap<String, String>,
    pub working_dir: PathBuf,
    /// Interaction log as NDJSON trace events.
    pub log: Vec<u8>,
    /// Absolute (pre-mirroring) paths of files the execution wrote.
    pub outputs: Vec<PathBuf>,
    pub missing: Vec<PathBuf>,
    pub external: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CommitOutcome {
    pub manifest: Manifest,
    pub ordinal: usize,
    pub archive_bytes: u64,
    pub new_chunks: u64,
    pub new_bytes: u64,
    /// The same content was already committed; nothing new was recorded.
    pub already_present: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExecutionSummary {
    pub ordinal: usize,
    pub alias: String,
    pub execution_id: String,
    pub command: Vec<String>,
    pub created_at: u64,
    pub archive_bytes: u64,
    pub annotations: Vec<Annotation>,
}

/// A named research object: annotations, container versions, one chunk store.
///
/// On disk: `<root>/<name>/{sciunit.json, manifests/<id>.json,
/// logs/<id>.ndjson, objects/..., store.meta}`.
#[derive(Debug, Clone)]
pub struct Sciunit {
    meta: SciunitMeta,
    dir: PathBuf,
    store: ChunkStore,
}

pub fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b"_.-".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("invalid sciunit name {name:?}")))
    }
}

/// Names of the sciunits under `root`.
pub fn list_sciunits(root: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(names),
        Err(e) => return Err(Error::storage(format!("listing {}", root.display()), e)),
    };
    for entry in entries {
        let entry = entry.ctx(|| format!("listing {}", root.display()))?;
        if entry.path().join(META_FILE).is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

impl Sciunit {
    pub fn create(root: &Path, name: &str, params: RollingHashParams) -> Result<Self> {
        validate_name(name)?;
        let dir = root.join(name);
        if dir.join(META_FILE).exists() {
            return Err(Error::InvalidArgument(format!("sciunit {name} already exists")));
        }
        fs::create_dir_all(dir.join(MANIFESTS_DIR)).ctx(|| format!("creating {}", dir.display()))?;
        fs::create_dir_all(dir.join(LOGS_DIR)).ctx(|| format!("creating {}", dir.display()))?;
        let store = ChunkStore::open_or_create(&dir, params)?;
        let meta = SciunitMeta {
            name: name.to_string(),
            annotations: Vec::new(),
            executions: Vec::new(),
            extra_deps: Vec::new(),
        };
        let s = Sciunit { meta, dir, store };
        let _w = s.store.writer()?;
        s.save_meta()?;
        Ok(s)
    }

    pub fn open(root: &Path, name: &str) -> Result<Self> {
        validate_name(name)?;
        let dir = root.join(name);
        if !dir.join(META_FILE).is_file() {
            return Err(Error::NotFound(format!("sciunit {name}")));
        }
        let store = ChunkStore::open(&dir)?;
        let meta = Self::load_meta(&dir)?;
        Ok(Sciunit { meta, dir, store })
    }

    pub fn open_or_create(root: &Path, name: &str, params: RollingHashParams) -> Result<Self> {
        match Self::open(root, name) {
            Err(Error::NotFound(_)) => Self::create(root, name, params),
            other => other,
        }
    }

    fn load_meta(dir: &Path) -> Result<SciunitMeta> {
        let bytes = read_file(&dir.join(META_FILE))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("{}/{META_FILE}: {e}", dir.display())))
    }

    fn save_meta(&self) -> Result<()> {
        write_atomic(&self.dir.join(META_FILE), &to_canonical_file(&self.meta))
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &SciunitMeta {
        &self.meta
    }

    pub fn store(&self) -> &ChunkStore {
        &self.store
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.meta.annotations
    }

    pub fn executions(&self) -> &[String] {
        &self.meta.executions
    }

    /// Runs `f` on freshly loaded metadata while holding the writer lock,
    /// then persists the result.
    fn mutate<T>(&mut self, f: impl FnOnce(&mut SciunitMeta, &StoreWriter<'_>) -> Result<T>) -> Result<T> {
        let writer = self.store.writer()?;
        let mut meta = Self::load_meta(&self.dir)?;
        let out = f(&mut meta, &writer)?;
        write_atomic(&self.dir.join(META_FILE), &to_canonical_file(&meta))?;
        drop(writer);
        self.meta = meta;
        Ok(out)
    }

    pub fn annotate(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() {
            return Err(Error::InvalidArgument("annotation key is empty".into()));
        }
        self.mutate(|meta, _| {
            meta.annotations.push(Annotation {
                key: key.to_string(),
                value: value.to_string(),
            });
            Ok(())
        })
    }

    pub fn add_extra_dep(&mut self, path: &Path) -> Result<()> {
        if !path.is_absolute() {
            return Err(Error::InvalidArgument(format!("{} is not absolute", path.display())));
        }
        self.mutate(|meta, _| {
            if !meta.extra_deps.iter().any(|p| p == path) {
                meta.extra_deps.push(path.to_path_buf());
            }
            Ok(())
        })
    }

    pub fn clear_extra_deps(&mut self) -> Result<()> {
        self.mutate(|meta, _| {
            meta.extra_deps.clear();
            Ok(())
        })
    }

    /// Archives the sandbox, chunks it into the store and records a manifest.
    pub fn commit_container(&mut self, req: CommitRequest) -> Result<CommitOutcome> {
        let dir = self.dir.clone();
        self.mutate(|meta, writer| {
            let mut sink = writer.chunking_sink()?;
            let archive_bytes = archive_tree(&req.sandbox_root, &mut sink)?;
            let chunked = sink.finish()?;
            let execution_id = compute_execution_id(&chunked.list.digests, &req.command, &req.working_dir);

            let manifest_path = dir.join(MANIFESTS_DIR).join(format!("{execution_id}.json"));
            if manifest_path.is_file() {
                let manifest = read_manifest(&manifest_path)?;
                let ordinal = ordinal_in(meta, &execution_id).unwrap_or_else(|| {
                    meta.executions.push(execution_id.clone());
                    meta.executions.len()
                });
                return Ok(CommitOutcome {
                    manifest,
                    ordinal,
                    archive_bytes,
                    new_chunks: chunked.new_chunks,
                    new_bytes: chunked.new_bytes,
                    already_present: true,
                });
            }

            let mut outputs = BTreeMap::new();
            for path in &req.outputs {
                let local = mirror_of(&req.sandbox_root, path);
                if local.symlink_metadata().map(|m| m.is_file()).unwrap_or(false) {
                    outputs.insert(path.clone(), digest_file(&local)?);
                }
            }
            let manifest = Manifest {
                execution_id: execution_id.clone(),
                command: req.command,
                environment: req.environment,
                working_dir: req.working_dir,
                chunk_list: chunked.list,
                provenance_ref: provenance_ref_for(&req.log),
                created_at: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                annotations: Vec::new(),
                outputs,
                missing: req.missing,
                external: req.external,
            };
            write_atomic(&dir.join(LOGS_DIR).join(format!("{execution_id}.ndjson")), &req.log)?;
            write_atomic(&manifest_path, &to_canonical_file(&manifest))?;
            meta.executions.push(execution_id);
            Ok(CommitOutcome {
                manifest,
                ordinal: meta.executions.len(),
                archive_bytes,
                new_chunks: chunked.new_chunks,
                new_bytes: chunked.new_bytes,
                already_present: false,
            })
        })
    }

    /// Resolves `e<N>`, a full execution id, or an unambiguous id prefix.
    pub fn resolve(&self, reference: &str) -> Result<String> {
        let execs = &self.meta.executions;
        if let Some(n) = reference.strip_prefix('e').and_then(|n| n.parse::<usize>().ok()) {
            return n
                .checked_sub(1)
                .and_then(|i| execs.get(i))
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("execution {reference} in sciunit {}", self.name())));
        }
        if reference.len() >= 4 && reference.bytes().all(|b| b.is_ascii_hexdigit()) {
            let hits: Vec<&String> = execs.iter().filter(|id| id.starts_with(reference)).collect();
            match hits.as_slice() {
                [one] => return Ok((*one).clone()),
                [] => {}
                _ => return Err(Error::InvalidArgument(format!("execution prefix {reference} is ambiguous"))),
            }
        }
        Err(Error::NotFound(format!("execution {reference:?} in sciunit {}", self.name())))
    }

    pub fn ordinal_of(&self, id: &str) -> Option<usize> {
        ordinal_in(&self.meta, id)
    }

    pub fn manifest(&self, id: &str) -> Result<Manifest> {
        let path = self.dir.join(MANIFESTS_DIR).join(format!("{id}.json"));
        if !path.is_file() {
            return Err(Error::NotFound(format!("execution {id}")));
        }
        read_manifest(&path)
    }

    /// Raw NDJSON interaction log of an execution, checked against its manifest.
    pub fn log_bytes(&self, id: &str) -> Result<Vec<u8>> {
        let manifest = self.manifest(id)?;
        let bytes = read_file(&self.dir.join(LOGS_DIR).join(format!("{id}.ndjson")))?;
        manifest.verify_log(&bytes)?;
        Ok(bytes)
    }

    pub fn list(&self) -> Result<Vec<ExecutionSummary>> {
        self.meta
            .executions
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let m = self.manifest(id)?;
                Ok(ExecutionSummary {
                    ordinal: i + 1,
                    alias: format!("e{}", i + 1),
                    execution_id: id.clone(),
                    command: m.command,
                    created_at: m.created_at,
                    archive_bytes: m.chunk_list.total_length,
                    annotations: m.annotations,
                })
            })
            .collect()
    }

    /// Rebuilds the committed sandbox tree of `id` under `destination`.
    pub fn materialize_container(&self, id: &str, destination: &Path) -> Result<PathBuf> {
        let manifest = self.manifest(id)?;
        let missing = self.store.missing(&manifest.chunk_list);
        if !missing.is_empty() {
            let names: Vec<String> = missing.iter().map(|d| d.to_hex()).collect();
            return Err(Error::Corruption(format!("missing chunks: {}", names.join(", "))));
        }
        unarchive(self.store.reader(&manifest.chunk_list), destination)?;
        Ok(destination.to_path_buf())
    }

    /// Records an already-verified manifest and its log.
    pub(crate) fn register_verified(
        &mut self,
        staged: Vec<(Manifest, Vec<u8>)>,
        objects: &BTreeMap<Digest, PathBuf>,
    ) -> Result<Vec<Manifest>> {
        let dir = self.dir.clone();
        self.mutate(|meta, writer| {
            for (digest, path) in objects {
                writer.put_verified_file(digest, path)?;
            }
            let mut out = Vec::new();
            for (manifest, log) in staged {
                let id = manifest.execution_id.clone();
                let missing = writer.store().missing(&manifest.chunk_list);
                if !missing.is_empty() {
                    return Err(Error::Corruption(format!(
                        "bundle lacks {} chunk(s) referenced by {id}",
                        missing.len()
                    )));
                }
                let manifest_path = dir.join(MANIFESTS_DIR).join(format!("{id}.json"));
                if !manifest_path.is_file() {
                    write_atomic(&dir.join(LOGS_DIR).join(format!("{id}.ndjson")), &log)?;
                    write_atomic(&manifest_path, &to_canonical_file(&manifest))?;
                }
                if ordinal_in(meta, &id).is_none() {
                    meta.executions.push(id);
                }
                out.push(manifest);
            }
            Ok(out)
        })
    }

    pub(crate) fn set_annotations_if_empty(&mut self, annotations: &[Annotation]) -> Result<()> {
        if annotations.is_empty() || !self.meta.annotations.is_empty() {
            return Ok(());
        }
        self.mutate(|meta, _| {
            meta.annotations = annotations.to_vec();
            Ok(())
        })
    }

    /// Scratch directory inside the sciunit, on the same filesystem as the store.
    pub fn scratch_dir(&self, prefix: &str) -> Result<tempfile::TempDir> {
        let base = self.dir.join("tmp");
        fs::create_dir_all(&base).ctx(|| format!("creating {}", base.display()))?;
        tempfile::Builder::new()
            .prefix(prefix)
            .tempdir_in(&base)
            .ctx(|| format!("creating scratch dir in {}", base.display()))
    }
}

fn ordinal_in(meta: &SciunitMeta, id: &str) -> Option<usize> {
    meta.executions.iter().position(|e| e == id).map(|i| i + 1)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let m: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))?;
    m.verify()?;
    Ok(m)
}

pub(crate) fn digest_file(path: &Path) -> Result<Digest> {
    let mut f = fs::File::open(path).ctx(|| format!("opening {}", path.display()))?;
    let mut h = Hasher::new();
    io::copy(&mut f, &mut h).ctx(|| format!("reading {}", path.display()))?;
    Ok(h.finish())
}
