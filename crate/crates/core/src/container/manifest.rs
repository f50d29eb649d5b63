use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::chunkstore::ChunkList;
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::json::to_canonical_vec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub key: String,
    pub value: String,
}

/// One container version inside a sciunit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub execution_id: String,
    pub command: Vec<String>,
    pub environment: BTreeMap<String, String>,
    pub working_dir: PathBuf,
    pub chunk_list: ChunkList,
    /// `sha256:<hex>` of the stored interaction log.
    pub provenance_ref: String,
    /// Seconds since the Unix epoch; not part of the id.
    pub created_at: u64,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    /// Audited content digests of every file the execution wrote.
    #[serde(default)]
    pub outputs: BTreeMap<PathBuf, Digest>,
    /// Dependencies that vanished before they could be copied.
    #[serde(default)]
    pub missing: Vec<PathBuf>,
    /// Dependencies left on the host by the data policy.
    #[serde(default)]
    pub external: Vec<PathBuf>,
}

/// SHA-256 over the canonical JSON of chunk digests, command and working dir.
pub fn compute_execution_id(chunks: &[Digest], command: &[String], working_dir: &std::path::Path) -> String {
    #[derive(Serialize)]
    struct IdInput<'a> {
        chunks: &'a [Digest],
        command: &'a [String],
        working_dir: String,
    }
    let bytes = to_canonical_vec(&IdInput {
        chunks,
        command,
        working_dir: working_dir.to_string_lossy().into_owned(),
    });
    let mut h = Hasher::new();
    h.update(&bytes);
    h.finish().to_hex()
}

pub fn provenance_ref_for(log: &[u8]) -> String {
    format!("sha256:{}", Digest::of(log))
}

impl Manifest {
    pub fn recompute_id(&self) -> String {
        compute_execution_id(&self.chunk_list.digests, &self.command, &self.working_dir)
    }

    /// Checks that the stored id matches the content it claims to identify.
    pub fn verify(&self) -> Result<()> {
        let expected = self.recompute_id();
        if expected != self.execution_id {
            return Err(Error::Corruption(format!(
                "manifest id {} does not match its content ({expected})",
                self.execution_id
            )));
        }
        Ok(())
    }

    pub fn verify_log(&self, log: &[u8]) -> Result<()> {
        let actual = provenance_ref_for(log);
        if actual != self.provenance_ref {
            return Err(Error::Corruption(format!(
                "interaction log for {} hashes to {actual}, manifest records {}",
                self.execution_id, self.provenance_ref
            )));
        }
        Ok(())
    }
}
