//! Named parameter storage, per-step binding into the graph, and the
//! checkpoint file format.
//!
//! Checkpoint layout: an ASCII header followed by the raw payload.
//!
//! ```text
//! WEAKSIG-CHECKPOINT 1
//! meta <key>=<value>                 (any number, in order)
//! param <name> <d0,d1,..> <0|1>      (one per record, in order; 1 = trainable)
//! sha256 <hex digest of the payload>
//! end
//! <payload: every record's values as little-endian f64, in record order>
//! ```

use std::cell::RefCell;
use std::io::{BufRead, Write};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

const MAGIC: &str = "WEAKSIG-CHECKPOINT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new entry. Names must be unique, non-empty and free of
    /// whitespace.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> ParamId {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "invalid parameter name {name:?}"
        );
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        assert_eq!(data.len(), numel(shape), "data does not fill {shape:?} for {name}");
        self.entries.push(ParamEntry { name: name.to_string(), shape: shape.to_vec(), data, trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..numel(shape)).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, shape, data, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, shape, vec![value; numel(shape)], true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, shape, vec![value; numel(shape)], false)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Binds every entry as a graph leaf. Trainable entries require
    /// gradients only when `training` is set.
    pub fn session(&self, training: bool) -> Session {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if training && e.trainable {
                    Tensor::param(e.data.clone(), &e.shape)
                } else {
                    Tensor::new(e.data.clone(), &e.shape)
                }
                .expect("entries are shape-consistent")
            })
            .collect();
        Session { vars, training, updates: RefCell::new(Vec::new()) }
    }

    /// Writes back buffer values recorded during a forward pass.
    pub fn absorb_updates(&mut self, session: &Session) {
        for (id, data) in session.updates.borrow_mut().drain(..) {
            self.entries[id.0].data = data;
        }
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            for v in &e.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, w: &mut impl Write, meta: &[(String, String)]) -> Result<()> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(TensorError::Checkpoint(format!("unencodable meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k}={v}\n"));
        }
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("param {} {} {}\n", e.name, dims.join(","), u8::from(e.trainable)));
        }
        header.push_str(&format!("sha256 {}\nend\n", self.digest()));
        w.write_all(header.as_bytes())?;
        for e in &self.entries {
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl BufRead) -> Result<(ParamStore, Vec<(String, String)>)> {
        let bad = |m: String| TensorError::Checkpoint(m);
        let mut line = String::new();
        let mut next = |line: &mut String| -> Result<String> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(bad("truncated header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next(&mut line)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut meta = Vec::new();
        let mut specs: Vec<(String, Vec<usize>, bool)> = Vec::new();
        let digest = loop {
            let l = next(&mut line)?;
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad(format!("bad meta line {l:?}")))?;
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("param ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad(format!("bad param line {l:?}")));
                }
                let shape = if parts[1].is_empty() {
                    Vec::new()
                } else {
                    parts[1]
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dims in {l:?}"))))
                        .collect::<Result<Vec<_>>>()?
                };
                specs.push((parts[0].to_string(), shape, parts[2] == "1"));
            } else if let Some(rest) = l.strip_prefix("sha256 ") {
                let d = rest.to_string();
                if next(&mut line)? != "end" {
                    return Err(bad("missing end marker".into()));
                }
                break d;
            } else {
                return Err(bad(format!("unexpected header line {l:?}")));
            }
        };
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for (name, shape, trainable) in specs {
            let mut data = Vec::with_capacity(numel(&shape));
            for _ in 0..numel(&shape) {
                r.read_exact(&mut buf).map_err(|_| bad(format!("payload truncated in {name}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.entries.push(ParamEntry { name, shape, data, trainable });
        }
        if r.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes after payload".into()));
        }
        if store.digest() != digest {
            return Err(bad("checksum mismatch".into()));
        }
        Ok((store, meta))
    }

    /// Copies values from `other` for every entry with the same name and shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {}", e.name)))?;
            if src.shape != e.shape {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name, src.shape, e.shape
                )));
            }
            e.data.clone_from(&src.data);
        }
        Ok(())
    }
}

/// Parameters bound as graph leaves for one forward/backward pass.
pub struct Session {
    vars: Vec<Tensor>,
    training: bool,
    updates: RefCell<Vec<(ParamId, Vec<f64>)>>,
}

impl Session {
    pub fn var(&self, id: ParamId) -> &Tensor {
        &self.vars[id.0]
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Queues a new value for a buffer, applied by [`ParamStore::absorb_updates`].
    pub fn record_update(&self, id: ParamId, data: Vec<f64>) {
        self.updates.borrow_mut().push((id, data));
    }

    /// Gradient per entry, `None` where nothing flowed.
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}
