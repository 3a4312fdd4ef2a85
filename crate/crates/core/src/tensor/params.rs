//! Named parameter storage and the binary checkpoint container.
//!
//! Checkpoint layout (all header lines are UTF-8, `\n`-terminated):
//!
//! ```text
//! NEURALMD-PARAMS
//! format_version 1
//! seed <u64>
//! meta <key> <value...>          (zero or more)
//! tensors <count>
//! tensor <name> <ndim> <d0> <d1> ...   (count lines, in payload order)
//! payload <byte count>
//! <little-endian f64 values, tensors concatenated in header order>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &str = "NEURALMD-PARAMS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named tensors plus the seed used to initialize them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    seed: u64,
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Inserts a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.chars().any(char::is_whitespace) || name.is_empty() {
            return Err(Error::Config(format!("invalid parameter name `{name}`")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    /// Uniform in ±sqrt(1/fan_in).
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Registers every tensor as a gradient-requiring leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), g.leaf(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Registers every tensor as a constant of `g` (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), g.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients held by `g` for the bound leaves.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (name, var) in &bound.vars {
            if !g.requires_grad(*var) {
                continue;
            }
            self.accumulate_grad(name, &g.grad(*var));
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) {
        if let Some(p) = self.params.get_mut(name) {
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(grad.clone()),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(k, p)| p.grad.clone().map(|g| (k.clone(), g)))
            .collect()
    }

    /// All parameter values concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::InvalidTensor(format!(
                "expected {} values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in self.params.values_mut() {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        Checkpoint {
            params: self.clone(),
            meta: BTreeMap::new(),
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Checkpoint::from_bytes(bytes)?.params)
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of all bound leaves after `g.backward(..)`.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), g.grad(*v)))
            .collect()
    }
}

/// A [`ParamSet`] plus free-form string metadata, stored as one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(CHECKPOINT_MAGIC);
        head.push('\n');
        head.push_str(&format!("format_version {CHECKPOINT_VERSION}\n"));
        head.push_str(&format!("seed {}\n", self.params.seed));
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k} {}\n", v.replace('\n', " ")));
        }
        head.push_str(&format!("tensors {}\n", self.params.len()));
        for (name, p) in &self.params.params {
            let shape = p.value.shape();
            head.push_str(&format!("tensor {name} {}", shape.len()));
            for d in shape {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        let n = self.params.num_scalars();
        head.push_str(&format!("payload {}\n", n * 8));
        let mut out = head.into_bytes();
        out.reserve(n * 8);
        for p in self.params.params.values() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "checkpoint";
        let mut pos = 0usize;
        let mut line_no = 0usize;
        let mut next_line = |pos: &mut usize| -> Result<String> {
            line_no += 1;
            let rest = &bytes[*pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| {
                Error::parse(ctx, format!("byte {}", *pos), "unterminated header line")
            })?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|e| Error::parse(ctx, format!("line {line_no}"), e.to_string()))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        let bad = |what: &str, line: &str| Error::parse(ctx, format!("header `{line}`"), what.to_string());

        let magic = next_line(&mut pos)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("missing magic", &magic));
        }
        let ver_line = next_line(&mut pos)?;
        let version: u32 = ver_line
            .strip_prefix("format_version ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected format_version", &ver_line))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let seed_line = next_line(&mut pos)?;
        let seed: u64 = seed_line
            .strip_prefix("seed ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected seed", &seed_line))?;

        let mut meta = BTreeMap::new();
        let count = loop {
            let line = next_line(&mut pos)?;
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensors ") {
                break rest.parse::<usize>().map_err(|_| bad("bad tensor count", &line))?;
            } else {
                return Err(bad("expected meta or tensors", &line));
            }
        };
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line(&mut pos)?;
            let mut it = line.split(' ');
            if it.next() != Some("tensor") {
                return Err(bad("expected tensor", &line));
            }
            let name = it.next().ok_or_else(|| bad("missing name", &line))?.to_string();
            let ndim: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad ndim", &line))?;
            let dims: Vec<usize> = it
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad dims", &line))?;
            if dims.len() != ndim {
                return Err(bad("dimension count mismatch", &line));
            }
            specs.push((name, dims));
        }
        let pl = next_line(&mut pos)?;
        let payload: usize = pl
            .strip_prefix("payload ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected payload", &pl))?;
        let expected: usize = specs.iter().map(|(_, d)| d.iter().product::<usize>() * 8).sum();
        if payload != expected || bytes.len() - pos != payload {
            return Err(Error::parse(
                ctx,
                format!("byte {pos}"),
                format!(
                    "payload holds {} bytes, header declares {payload}, shapes require {expected}",
                    bytes.len() - pos
                ),
            ));
        }
        let mut params = ParamSet::new(seed);
        for (name, dims) in specs {
            let n: usize = dims.iter().product();
            let data = bytes[pos..pos + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos += n * 8;
            params.insert(name, Tensor::new(dims, data)?)?;
        }
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
