//! Named parameter registry and the versioned checkpoint format.
//!
//! Checkpoints store the architecture config as a key=value text block
//! followed by named f64 tensors, so an f32 training run and an f64
//! verification run read the same files. A pure-GPT checkpoint (no `enc.` /
//! `cca.` tensors) is a valid subset loadable into a retro model.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{ModelError, RetroConfig};
use crate::io::{self, FileError};
use crate::numerics::{Array, Scalar};

const MAGIC: &[u8; 4] = b"RTCK";
const VERSION: u32 = 1;

/// Ordered name -> tensor map; iteration order is insertion order and is the
/// contract between model leasing and optimizer state.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    entries: Vec<(String, Array<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> &Array<T> {
        let slot = self.index[name];
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array<T> {
        let slot = self.index[name];
        &mut self.entries[slot].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn at(&self, slot: usize) -> &Array<T> {
        &self.entries[slot].1
    }

    pub fn at_mut(&mut self, slot: usize) -> &mut Array<T> {
        &mut self.entries[slot].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn values_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, a)| a.len())
            .sum()
    }

    /// Bit-exact fingerprint of every tensor whose name starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, arr) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in arr.data() {
                for b in v.to_double().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_f64(&self) -> ParamSet<f64> {
        let mut out = ParamSet::new();
        for (n, a) in &self.entries {
            out.insert(n, a.to_f64());
        }
        out
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &RetroConfig,
    params: &ParamSet<T>,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path).map_err(FileError::from)?);
    io::write_magic(&mut w, MAGIC, VERSION)?;
    io::write_string(&mut w, &config.to_kv())?;
    io::write_u32(&mut w, params.len() as u32)?;
    for (name, arr) in params.iter() {
        io::write_string(&mut w, name)?;
        io::write_u32(&mut w, arr.rank() as u32)?;
        for &d in arr.shape() {
            io::write_u32(&mut w, d as u32)?;
        }
        for v in arr.data() {
            io::write_f64(&mut w, v.to_double())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RetroConfig, ParamSet<f64>), ModelError> {
    let mut r = BufReader::new(File::open(path).map_err(FileError::from)?);
    io::check_magic(&mut r, MAGIC, VERSION)?;
    let config = RetroConfig::from_kv(&io::read_string(&mut r)?)?;
    let count = io::read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = io::read_string(&mut r)?;
        let rank = io::read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(io::read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(io::read_f64(&mut r)?);
        }
        params.insert(&name, Array::from_vec(&shape, data));
    }
    Ok((config, params))
}
