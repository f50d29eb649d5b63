//! Path-mirrored sandbox construction from a dependency set.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::Read;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ingest::{DependencySet, Role};
use crate::container::{digest_file, mirror_of, normalize_absolute};
use crate::digest::Digest;
use crate::error::{IoContext, Result};

const MAX_LINK_HOPS: usize = 40;
const PSEUDO_ROOTS: [&str; 3] = ["/proc", "/sys", "/dev"];

/// Which read-only inputs are copied into the sandbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DataPolicy {
    #[default]
    IncludeAll,
    /// Read-only regular files of at least `min_size` bytes that are neither
    /// executable nor ELF objects stay outside the sandbox.
    ExcludeData { min_size: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SandboxReport {
    /// Dependency paths mirrored into the sandbox, including symlink targets.
    pub copied: BTreeSet<PathBuf>,
    /// Dependencies that no longer existed when the sandbox was built.
    pub missing: BTreeSet<PathBuf>,
    /// Dependencies deliberately left out (data policy, devices, pseudo files).
    pub external: BTreeSet<PathBuf>,
    /// Digests of written files as captured.
    pub outputs: BTreeMap<PathBuf, Digest>,
}

/// True if the file starts with the ELF magic.
pub fn is_elf(path: &Path) -> bool {
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| &magic == b"\x7fELF")
        .unwrap_or(false)
}

fn is_pseudo(path: &Path) -> bool {
    PSEUDO_ROOTS.iter().any(|r| path.starts_with(r))
}

fn excluded_as_data(policy: DataPolicy, role: Role, host: &Path, meta: &fs::Metadata) -> bool {
    match policy {
        DataPolicy::IncludeAll => false,
        DataPolicy::ExcludeData { min_size } => {
            role == Role::Read
                && meta.is_file()
                && meta.len() >= min_size
                && meta.permissions().mode() & 0o111 == 0
                && !is_elf(host)
        }
    }
}

enum Outcome {
    Copied,
    Missing,
    External,
}

struct Mirror<'a> {
    host_root: &'a Path,
    sandbox_root: &'a Path,
    report: SandboxReport,
    dir_modes: BTreeMap<PathBuf, u32>,
}

impl Mirror<'_> {
    fn host(&self, logical: &Path) -> PathBuf {
        mirror_of(self.host_root, logical)
    }

    fn ensure_dir(&mut self, logical: &Path, host: &Path) -> Result<()> {
        let target = mirror_of(self.sandbox_root, logical);
        if !target.is_dir() {
            fs::create_dir_all(&target).ctx(|| format!("creating {}", target.display()))?;
        }
        if let Ok(meta) = fs::metadata(host) {
            self.dir_modes.insert(target, meta.permissions().mode() & 0o7777);
        }
        Ok(())
    }

    /// Mirrors `path`, following symlinks component by component so that
    /// every link on the way and its eventual target are reproduced.
    fn mirror(&mut self, path: &Path, role: Role, policy: DataPolicy) -> Result<Outcome> {
        let mut pending: Vec<OsString> = normalize_absolute(path)
            .components()
            .filter_map(|c| match c {
                Component::Normal(s) => Some(s.to_os_string()),
                _ => None,
            })
            .rev()
            .collect();
        let mut logical = PathBuf::from("/");
        let mut hops = 0;
        while let Some(name) = pending.pop() {
            logical.push(&name);
            let host = self.host(&logical);
            let meta = match fs::symlink_metadata(&host) {
                Ok(m) => m,
                Err(_) => return Ok(Outcome::Missing),
            };
            let is_last = pending.is_empty();
            if meta.file_type().is_symlink() {
                hops += 1;
                if hops > MAX_LINK_HOPS {
                    return Ok(Outcome::Missing);
                }
                let target = fs::read_link(&host).ctx(|| format!("reading link {}", host.display()))?;
                let link = mirror_of(self.sandbox_root, &logical);
                if fs::symlink_metadata(&link).is_err() {
                    symlink(&target, &link).ctx(|| format!("creating link {}", link.display()))?;
                }
                self.report.copied.insert(logical.clone());
                logical.pop();
                let resolved = normalize_absolute(&logical.join(&target));
                let mut rest: Vec<OsString> = resolved
                    .components()
                    .filter_map(|c| match c {
                        Component::Normal(s) => Some(s.to_os_string()),
                        _ => None,
                    })
                    .collect();
                rest.reverse();
                pending.extend(rest);
                logical = PathBuf::from("/");
                continue;
            }
            if meta.is_dir() {
                self.ensure_dir(&logical, &host)?;
                if is_last {
                    self.report.copied.insert(logical.clone());
                }
                continue;
            }
            if !is_last {
                return Ok(Outcome::Missing);
            }
            if !meta.is_file() || is_pseudo(&logical) {
                return Ok(Outcome::External);
            }
            if excluded_as_data(policy, role, &host, &meta) {
                return Ok(Outcome::External);
            }
            let dest = mirror_of(self.sandbox_root, &logical);
            if fs::symlink_metadata(&dest).is_err() {
                fs::copy(&host, &dest).ctx(|| format!("copying {}", host.display()))?;
                fs::set_permissions(&dest, fs::Permissions::from_mode(meta.permissions().mode() & 0o7777))
                    .ctx(|| format!("chmod {}", dest.display()))?;
            }
            self.report.copied.insert(logical.clone());
            if role == Role::Written {
                self.report.outputs.insert(normalize_absolute(path), digest_file(&dest)?);
            }
            return Ok(Outcome::Copied);
        }
        // The root directory itself.
        Ok(Outcome::Copied)
    }
}

/// Copies every dependency to `sandbox_root` ++ its absolute path.
///
/// `host_root` is the directory the recorded paths are relative to: `/` for
/// a live audit, or a captured tree for a replayed trace. Paths that vanished
/// are reported as missing rather than failing the build.
pub fn build_sandbox(
    deps: &DependencySet,
    policy: DataPolicy,
    host_root: &Path,
    sandbox_root: &Path,
) -> Result<SandboxReport> {
    fs::create_dir_all(sandbox_root).ctx(|| format!("creating {}", sandbox_root.display()))?;
    let mut m = Mirror {
        host_root,
        sandbox_root,
        report: SandboxReport::default(),
        dir_modes: BTreeMap::new(),
    };
    for (path, role) in deps.iter() {
        if is_pseudo(path) {
            m.report.external.insert(path.clone());
            continue;
        }
        match m.mirror(path, role, policy)? {
            Outcome::Copied => {}
            Outcome::Missing => {
                log::warn!("audit incomplete: {} was not available to copy", path.display());
                m.report.missing.insert(path.clone());
            }
            Outcome::External => {
                m.report.external.insert(path.clone());
            }
        }
    }
    for (dir, mode) in m.dir_modes.iter().rev() {
        fs::set_permissions(dir, fs::Permissions::from_mode(*mode)).ctx(|| format!("chmod {}", dir.display()))?;
    }
    Ok(m.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deps(entries: &[(&str, Role)]) -> DependencySet {
        let mut d = DependencySet::new();
        for (p, r) in entries {
            d.insert(PathBuf::from(p), *r);
        }
        d
    }

    fn write(root: &Path, rel: &str, content: &[u8]) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, content).unwrap();
    }

    #[test]
    fn mirrors_paths() {
        let host = tempfile::tempdir().unwrap();
        let sb = tempfile::tempdir().unwrap();
        write(host.path(), "usr/lib/x.so", b"lib");
        let r = build_sandbox(&deps(&[("/usr/lib/x.so", Role::Read)]), DataPolicy::IncludeAll, host.path(), sb.path())
            .unwrap();
        assert_eq!(fs::read(sb.path().join("usr/lib/x.so")).unwrap(), b"lib");
        assert!(r.copied.contains(Path::new("/usr/lib/x.so")));
        assert!(r.missing.is_empty());
    }

    #[test]
    fn vanished_file_is_missing() {
        let host = tempfile::tempdir().unwrap();
        let sb = tempfile::tempdir().unwrap();
        let r = build_sandbox(&deps(&[("/gone/file", Role::Read)]), DataPolicy::IncludeAll, host.path(), sb.path())
            .unwrap();
        assert_eq!(r.missing.iter().collect::<Vec<_>>(), vec![Path::new("/gone/file")]);
    }

    #[test]
    fn symlinks_copy_link_and_target() {
        let host = tempfile::tempdir().unwrap();
        let sb = tempfile::tempdir().unwrap();
        write(host.path(), "opt/real/tool.sh", b"#!/bin/sh\n");
        fs::create_dir_all(host.path().join("usr/bin")).unwrap();
        symlink("../../opt/real/tool.sh", host.path().join("usr/bin/tool")).unwrap();
        // A directory link with an absolute target.
        symlink("/opt/real", host.path().join("opt/current")).unwrap();
        let d = deps(&[("/usr/bin/tool", Role::Executed), ("/opt/current/tool.sh", Role::Read)]);
        let r = build_sandbox(&d, DataPolicy::IncludeAll, host.path(), sb.path()).unwrap();
        let link = sb.path().join("usr/bin/tool");
        assert!(fs::symlink_metadata(&link).unwrap().file_type().is_symlink());
        assert_eq!(fs::read_link(&link).unwrap(), Path::new("../../opt/real/tool.sh"));
        assert_eq!(fs::read(&link).unwrap(), b"#!/bin/sh\n");
        assert!(fs::symlink_metadata(sb.path().join("opt/current")).unwrap().file_type().is_symlink());
        assert!(r.copied.contains(Path::new("/opt/real/tool.sh")));
        assert!(r.copied.contains(Path::new("/usr/bin/tool")));
    }

    #[test]
    fn exclude_data_policy() {
        let host = tempfile::tempdir().unwrap();
        let sb = tempfile::tempdir().unwrap();
        write(host.path(), "data/big.bin", &[7u8; 4096]);
        write(host.path(), "data/small.txt", b"x");
        write(host.path(), "bin/tool", &[7u8; 4096]);
        fs::set_permissions(host.path().join("bin/tool"), fs::Permissions::from_mode(0o755)).unwrap();
        let d = deps(&[
            ("/data/big.bin", Role::Read),
            ("/data/small.txt", Role::Read),
            ("/bin/tool", Role::Read),
        ]);
        let r = build_sandbox(&d, DataPolicy::ExcludeData { min_size: 1024 }, host.path(), sb.path()).unwrap();
        assert_eq!(r.external.iter().collect::<Vec<_>>(), vec![Path::new("/data/big.bin")]);
        assert!(!sb.path().join("data/big.bin").exists());
        assert!(sb.path().join("data/small.txt").exists());
        assert!(sb.path().join("bin/tool").exists());
    }

    #[test]
    fn outputs_are_digested_and_modes_kept() {
        let host = tempfile::tempdir().unwrap();
        let sb = tempfile::tempdir().unwrap();
        write(host.path(), "w/out.txt", b"result");
        fs::set_permissions(host.path().join("w/out.txt"), fs::Permissions::from_mode(0o640)).unwrap();
        let r = build_sandbox(&deps(&[("/w/out.txt", Role::Written)]), DataPolicy::IncludeAll, host.path(), sb.path())
            .unwrap();
        assert_eq!(r.outputs[Path::new("/w/out.txt")], Digest::of(b"result"));
        let mode = fs::metadata(sb.path().join("w/out.txt")).unwrap().permissions().mode() & 0o777;
        assert_eq!(mode, 0o640);
    }

    #[test]
    fn pseudo_files_are_external() {
        let sb = tempfile::tempdir().unwrap();
        let r = build_sandbox(&deps(&[("/dev/null", Role::Written)]), DataPolicy::IncludeAll, Path::new("/"), sb.path())
            .unwrap();
        assert!(r.external.contains(Path::new("/dev/null")));
    }
}
