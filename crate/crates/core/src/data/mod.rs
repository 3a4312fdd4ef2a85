//! Complex records, their file formats and synthetic ground-truth systems.
//!
//! A record holds one ligand (initial state), one rigid protein and the
//! ligand's trajectory. Two containers are supported and chosen by extension:
//!
//! * `.nmd` is line-oriented text, meant to be read and diffed by hand.
//! * `.nmdb` is a packed little-endian binary variant for long trajectories.
//!
//! Text layout (lengths in Å, time in snapshot intervals):
//!
//! ```text
//! NEURALMD-COMPLEX 1
//! id 1abc
//! units length=angstrom time=snapshot-interval
//! counts atoms=2 residues=4 snapshots=100 velocities=yes
//! meta kind harmonic-tether
//! ligand
//! atom C 0.75 0 0 0.01 0 0          # element, x y z, vx vy vz
//! protein
//! residue ALA nx ny nz cax cay caz cx cy cz
//! snapshot 0
//! 0.75 0 0 0.01 0 0                  # x y z, then vx vy vz when velocities=yes
//! end
//! ```
//!
//! Numbers are written in Rust's shortest round-trip form, so a save/load
//! cycle reproduces every `f64` exactly.

mod binary;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bindingnet::vocab::{atomic_number, element_symbol, residue_code, residue_index};
use crate::bindingnet::{LigandState, ProteinStructure};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub use synthetic::{generate_synthetic, ForceFieldKind, SyntheticSpec, SyntheticSystem};

pub const FORMAT_VERSION: u32 = 1;
pub const TEXT_EXTENSION: &str = "nmd";
pub const BINARY_EXTENSION: &str = "nmdb";
/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "NEURALMD_DATA_DIR";

/// Ligand coordinates over time, with optional velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<Vec<Vec3>>,
    pub velocities: Option<Vec<Vec<Vec3>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Snapshots `range` as a new trajectory.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            positions: self.positions[range.clone()].to_vec(),
            velocities: self.velocities.as_ref().map(|v| v[range].to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexRecord {
    pub id: String,
    /// Ligand at the first snapshot.
    pub ligand: LigandState,
    pub protein: ProteinStructure,
    pub trajectory: Trajectory,
    pub metadata: BTreeMap<String, String>,
}

impl ComplexRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("record id {:?} must be a non-empty word", self.id)));
        }
        self.ligand.validate()?;
        self.protein.validate()?;
        let n = self.ligand.len();
        if let Some((k, s)) = self.trajectory.positions.iter().enumerate().find(|(_, s)| s.len() != n) {
            return Err(Error::Config(format!("snapshot {k} has {} atoms, ligand has {n}", s.len())));
        }
        if let Some(v) = &self.trajectory.velocities {
            if v.len() != self.trajectory.len() || v.iter().any(|s| s.len() != n) {
                return Err(Error::Config("velocity snapshots must match position snapshots".into()));
            }
        }
        for (key, value) in &self.metadata {
            if key.is_empty() || key.chars().any(char::is_whitespace) || value.contains('\n') {
                return Err(Error::Config(format!("metadata entry {key:?} is not representable")));
            }
        }
        Ok(())
    }

    /// Ligand state at snapshot `t`, with recorded velocities when present.
    pub fn ligand_at(&self, t: usize) -> Result<LigandState> {
        let x = self.trajectory.positions.get(t).ok_or(Error::IndexOutOfRange {
            op: "ligand_at",
            index: t,
            len: self.trajectory.len(),
        })?;
        let mut lig = self.ligand.clone();
        lig.positions = x.clone();
        lig.velocities = match &self.trajectory.velocities {
            Some(v) => v[t].clone(),
            None => vec![Vec3::zeros(); x.len()],
        };
        Ok(lig)
    }

    pub fn has_velocities(&self) -> bool {
        self.trajectory.velocities.is_some()
    }
}

fn fmt_vec(out: &mut String, v: &Vec3) {
    let _ = write!(out, " {} {} {}", v.x, v.y, v.z);
}

/// Serializes a record in the text container.
pub fn to_text(record: &ComplexRecord) -> Result<String> {
    record.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "NEURALMD-COMPLEX {FORMAT_VERSION}");
    let _ = writeln!(out, "id {}", record.id);
    let _ = writeln!(out, "units length=angstrom time=snapshot-interval");
    let _ = writeln!(
        out,
        "counts atoms={} residues={} snapshots={} velocities={}",
        record.ligand.len(),
        record.protein.len(),
        record.trajectory.len(),
        if record.has_velocities() { "yes" } else { "no" }
    );
    for (k, v) in &record.metadata {
        let _ = writeln!(out, "meta {k} {v}");
    }
    out.push_str("ligand\n");
    for i in 0..record.ligand.len() {
        let _ = write!(out, "atom {}", element_symbol(record.ligand.atomic_numbers[i])?);
        fmt_vec(&mut out, &record.ligand.positions[i]);
        fmt_vec(&mut out, &record.ligand.velocities[i]);
        out.push('\n');
    }
    out.push_str("protein\n");
    for k in 0..record.protein.len() {
        let _ = write!(out, "residue {}", residue_code(record.protein.residue_types[k])?);
        fmt_vec(&mut out, &record.protein.n[k]);
        fmt_vec(&mut out, &record.protein.ca[k]);
        fmt_vec(&mut out, &record.protein.c[k]);
        out.push('\n');
    }
    for (t, snap) in record.trajectory.positions.iter().enumerate() {
        let _ = writeln!(out, "snapshot {t}");
        for (i, x) in snap.iter().enumerate() {
            let _ = write!(out, "{} {} {}", x.x, x.y, x.z);
            if let Some(v) = &record.trajectory.velocities {
                fmt_vec(&mut out, &v[t][i]);
            }
            out.push('\n');
        }
    }
    out.push_str("end\n");
    Ok(out)
}

struct Lines<'a> {
    context: &'a str,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::parse(self.context, format!("line {}", self.line_no), message)
    }

    fn next_line(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.iter.next() {
                Some((i, line)) => {
                    self.line_no = i + 1;
                    let line = line.trim();
                    if !line.is_empty() && !line.starts_with('#') {
                        return Ok(line);
                    }
                }
                None => {
                    self.line_no += 1;
                    return Err(self.err(format!("unexpected end of file, expected {what}")));
                }
            }
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line(kw)?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(k) if k == kw => Ok(parts.collect()),
            Some(k) => Err(self.err(format!("expected `{kw}`, found `{k}`"))),
            None => Err(self.err(format!("expected `{kw}`"))),
        }
    }

    fn floats(&self, fields: &[&str], field: &str) -> Result<Vec<f64>> {
        fields
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .map_err(|_| self.err(format!("{field} value {} is not a number: `{s}`", i + 1)))
            })
            .collect()
    }

    fn vecs(&self, fields: &[&str], count: usize, field: &str) -> Result<Vec<Vec3>> {
        if fields.len() != 3 * count {
            return Err(self.err(format!("{field} needs {} numbers, found {}", 3 * count, fields.len())));
        }
        let f = self.floats(fields, field)?;
        Ok(f.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }
}

fn count_field(lines: &Lines, parts: &[&str], key: &str) -> Result<String> {
    parts
        .iter()
        .find_map(|p| p.strip_prefix(&format!("{key}=")))
        .map(String::from)
        .ok_or_else(|| lines.err(format!("counts line is missing `{key}=`")))
}

fn parse_count(lines: &Lines, parts: &[&str], key: &str) -> Result<usize> {
    count_field(lines, parts, key)?
        .parse()
        .map_err(|_| lines.err(format!("`{key}` is not a non-negative integer")))
}

/// Parses the text container. `context` names the source in error messages.
pub fn from_text(text: &str, context: &str) -> Result<ComplexRecord> {
    let mut lines = Lines {
        context,
        iter: text.lines().enumerate(),
        line_no: 0,
    };
    let header = lines.next_line("header")?;
    let version = header
        .strip_prefix("NEURALMD-COMPLEX ")
        .ok_or_else(|| lines.err("missing `NEURALMD-COMPLEX` header"))?
        .trim()
        .parse::<u32>()
        .map_err(|_| lines.err("format version is not an integer"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let id = lines.keyword("id")?;
    if id.len() != 1 {
        return Err(lines.err("id must be a single word"));
    }
    let id = id[0].to_string();
    let units = lines.keyword("units")?;
    if units != ["length=angstrom", "time=snapshot-interval"] {
        return Err(lines.err(format!("unsupported units `{}`", units.join(" "))));
    }
    let counts = lines.keyword("counts")?;
    let atoms = parse_count(&lines, &counts, "atoms")?;
    let residues = parse_count(&lines, &counts, "residues")?;
    let snapshots = parse_count(&lines, &counts, "snapshots")?;
    let with_v = match count_field(&lines, &counts, "velocities")?.as_str() {
        "yes" => true,
        "no" => false,
        other => return Err(lines.err(format!("velocities must be yes or no, found `{other}`"))),
    };

    let mut metadata = BTreeMap::new();
    loop {
        let line = lines.next_line("ligand")?;
        if line == "ligand" {
            break;
        }
        let rest = line
            .strip_prefix("meta ")
            .ok_or_else(|| lines.err(format!("expected `meta` or `ligand`, found `{line}`")))?;
        let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
        metadata.insert(k.to_string(), v.trim().to_string());
    }

    let mut z = Vec::with_capacity(atoms);
    let mut pos = Vec::with_capacity(atoms);
    let mut vel = Vec::with_capacity(atoms);
    for _ in 0..atoms {
        let f = lines.keyword("atom")?;
        let (symbol, nums) = f.split_first().ok_or_else(|| lines.err("atom line needs an element"))?;
        z.push(atomic_number(symbol).map_err(|e| lines.err(e.to_string()))?);
        let v = lines.vecs(nums, 2, "atom")?;
        pos.push(v[0]);
        vel.push(v[1]);
    }
    let ligand = LigandState::new(z, pos)
        .and_then(|l| l.with_velocities(vel))
        .map_err(|e| lines.err(e.to_string()))?;

    let p = lines.keyword("protein")?;
    if !p.is_empty() {
        return Err(lines.err("`protein` takes no arguments"));
    }
    let (mut types, mut n, mut ca, mut c) = (vec![], vec![], vec![], vec![]);
    for _ in 0..residues {
        let f = lines.keyword("residue")?;
        let (code, nums) = f.split_first().ok_or_else(|| lines.err("residue line needs a code"))?;
        types.push(residue_index(code).map_err(|e| lines.err(e.to_string()))?);
        let v = lines.vecs(nums, 3, "residue")?;
        n.push(v[0]);
        ca.push(v[1]);
        c.push(v[2]);
    }
    let protein = ProteinStructure::new(types, n, ca, c).map_err(|e| lines.err(e.to_string()))?;

    let mut positions = Vec::with_capacity(snapshots);
    let mut velocities = Vec::with_capacity(if with_v { snapshots } else { 0 });
    for t in 0..snapshots {
        let s = lines.keyword("snapshot")?;
        if s != [t.to_string().as_str()] {
            return Err(lines.err(format!("expected `snapshot {t}`")));
        }
        let mut xs = Vec::with_capacity(atoms);
        let mut vs = Vec::with_capacity(atoms);
        for _ in 0..atoms {
            let line = lines.next_line("coordinates")?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let v = lines.vecs(&fields, if with_v { 2 } else { 1 }, "snapshot row")?;
            xs.push(v[0]);
            if with_v {
                vs.push(v[1]);
            }
        }
        positions.push(xs);
        if with_v {
            velocities.push(vs);
        }
    }
    let end = lines.next_line("end")?;
    if end != "end" {
        return Err(lines.err(format!("expected `end`, found `{end}`")));
    }
    let record = ComplexRecord {
        id,
        ligand,
        protein,
        trajectory: Trajectory {
            positions,
            velocities: with_v.then_some(velocities),
        },
        metadata,
    };
    record.validate().map_err(|e| lines.err(e.to_string()))?;
    Ok(record)
}

pub use binary::{from_binary, to_binary};

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == BINARY_EXTENSION)
}

/// Writes a record; the container is chosen from the file extension.
pub fn save_complex(record: &ComplexRecord, path: &Path) -> Result<()> {
    let bytes = if is_binary(path) {
        to_binary(record)?
    } else {
        to_text(record)?.into_bytes()
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_complex(path: &Path) -> Result<ComplexRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    if is_binary(path) {
        from_binary(&bytes, &context)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::parse(&context, format!("byte {}", e.valid_up_to()), "file is not UTF-8"))?;
        from_text(text, &context)
    }
}

/// Every complex file directly inside `dir`, sorted by file name.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file()
            && path
                .extension()
                .is_some_and(|e| e == TEXT_EXTENSION || e == BINARY_EXTENSION)
        {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads all complexes in `dir`, or a single file when `dir` is a file.
pub fn load_dataset(path: &Path) -> Result<Vec<ComplexRecord>> {
    if path.is_file() {
        return Ok(vec![load_complex(path)?]);
    }
    let files = dataset_files(path)?;
    if files.is_empty() {
        return Err(Error::EmptyInput("no .nmd or .nmdb files in the data directory"));
    }
    files.iter().map(|f| load_complex(f)).collect()
}

/// Data directory from [`DATA_DIR_ENV`], if set.
pub fn default_data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}
