//! Checkpoints: concatenated tensor snapshots plus a plain-text manifest.
//!
//! `<path>` holds one snapshot per tensor in store order; `<path>.manifest`
//! (extension replaced) lists `name<TAB>shape<TAB>trainable` per line. Both
//! files are written to a temporary sibling first and then renamed.

use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::ParamStore;
use crate::tensor::Tensor;
use crate::{file_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest")
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = std::fs::File::create(&tmp).map_err(file_err(&tmp))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush().map_err(file_err(&tmp))?;
    w.get_ref().sync_all().map_err(file_err(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(file_err(path))
}

/// Writes every tensor of `store`, plus `extra` named tensors appended after them.
pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, extra: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    let entries = store
        .params()
        .iter()
        .map(|p| (&p.name, &p.value, p.trainable))
        .chain(extra.iter().map(|(n, t)| (n, t, false)));
    let entries: Vec<_> = entries.collect();
    write_atomic(path, |w| {
        for (_, t, _) in &entries {
            t.write_snapshot(w)?;
        }
        Ok(())
    })?;
    let mpath = manifest_path(path);
    write_atomic(&mpath, |w| {
        for (n, t, tr) in &entries {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "{n}\t{}\t{tr}", shape.join("x")).map_err(file_err(&mpath))?;
        }
        Ok(())
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let mpath = manifest_path(path.as_ref());
    let text = std::fs::read_to_string(&mpath).map_err(file_err(&mpath))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: mpath.clone(),
        msg: format!("line {}: {msg}", line + 1),
    };
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let [name, shape, trainable] = f[..] else {
                return Err(bad(i, "expected three tab-separated fields"));
            };
            let shape = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(i, "bad extent")))
                    .collect::<Result<_>>()?
            };
            Ok(ManifestEntry {
                name: name.to_string(),
                shape,
                trainable: trainable.parse().map_err(|_| bad(i, "bad trainable flag"))?,
            })
        })
        .collect()
}

/// Loads tensors into `store` by name and returns the entries that the store
/// does not hold (the `extra` tensors of [`save_checkpoint`]).
///
/// `stage` names the checkpoint in the error raised when the file is absent.
pub fn load_checkpoint(path: impl AsRef<Path>, stage: &str, store: &mut ParamStore) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    if !path.exists() || !manifest_path(path).exists() {
        return Err(Error::MissingCheckpoint {
            name: stage.to_string(),
            path: path.to_path_buf(),
        });
    }
    let manifest = read_manifest(path)?;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let file = std::fs::File::open(path).map_err(file_err(path))?;
    let mut r = BufReader::new(file);
    let mut extra = Vec::new();
    let mut seen = vec![false; store.len()];
    for e in &manifest {
        let t = Tensor::read_snapshot(&mut r).map_err(|err| fmt(format!("tensor {}: {err}", e.name)))?;
        if t.shape() != e.shape {
            return Err(fmt(format!("tensor {} disagrees with the manifest", e.name)));
        }
        match store.position(&e.name) {
            Some(i) => {
                if store.params()[i].value.shape() != t.shape() {
                    return Err(fmt(format!(
                        "{} has shape {:?} but the network expects {:?}",
                        e.name,
                        t.shape(),
                        store.params()[i].value.shape()
                    )));
                }
                store.set_at(i, t);
                seen[i] = true;
            }
            None => extra.push((e.name.clone(), t)),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(fmt(format!("missing tensor {}", store.params()[i].name)));
    }
    Ok(extra)
}
