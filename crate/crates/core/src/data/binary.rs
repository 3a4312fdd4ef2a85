//! Packed little-endian container.
//!
//! Layout: magic `NMDB`, `u32` version, length-prefixed id, `u32` atom,
//! residue and snapshot counts, `u8` velocity flag, `u32` metadata count with
//! length-prefixed key/value pairs, then per atom `u8` Z and six `f64`, per
//! residue `u8` type and nine `f64`, and per snapshot `3n` position `f64`
//! followed by `3n` velocity `f64` when the flag is set.

use std::collections::BTreeMap;

use super::{ComplexRecord, Trajectory, FORMAT_VERSION};
use crate::bindingnet::{LigandState, ProteinStructure};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

const MAGIC: &[u8; 4] = b"NMDB";

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_vec(out: &mut Vec<u8>, v: &Vec3) {
    for c in v.iter() {
        out.extend(c.to_le_bytes());
    }
}

pub fn to_binary(record: &ComplexRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let n = record.ligand.len();
    let mut out = Vec::with_capacity(64 + record.trajectory.len() * n * 48);
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &record.id);
    for c in [n, record.protein.len(), record.trajectory.len()] {
        out.extend((c as u32).to_le_bytes());
    }
    out.push(u8::from(record.has_velocities()));
    out.extend((record.metadata.len() as u32).to_le_bytes());
    for (k, v) in &record.metadata {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    for i in 0..n {
        out.push(record.ligand.atomic_numbers[i]);
        put_vec(&mut out, &record.ligand.positions[i]);
        put_vec(&mut out, &record.ligand.velocities[i]);
    }
    let p = &record.protein;
    for k in 0..p.len() {
        out.push(p.residue_types[k] as u8);
        for v in [p.n[k], p.ca[k], p.c[k]] {
            put_vec(&mut out, &v);
        }
    }
    for (t, snap) in record.trajectory.positions.iter().enumerate() {
        snap.iter().for_each(|x| put_vec(&mut out, x));
        if let Some(v) = &record.trajectory.velocities {
            v[t].iter().for_each(|x| put_vec(&mut out, x));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::parse(self.context, format!("byte {}", self.offset), message)
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < len {
            return Err(self.err(format!("file truncated while reading {what}")));
        }
        let s = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn vec3(&mut self, what: &str) -> Result<Vec3> {
        Ok(Vec3::new(self.f64(what)?, self.f64(what)?, self.f64(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(format!("{what} is not UTF-8")))
    }
}

pub fn from_binary(bytes: &[u8], context: &str) -> Result<ComplexRecord> {
    let mut r = Reader {
        bytes,
        offset: 0,
        context,
    };
    if r.take(4, "magic")? != MAGIC {
        r.offset = 0;
        return Err(r.err("missing NMDB magic"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let id = r.string("id")?;
    let atoms = r.u32("atom count")? as usize;
    let residues = r.u32("residue count")? as usize;
    let snapshots = r.u32("snapshot count")? as usize;
    let with_v = match r.u8("velocity flag")? {
        0 => false,
        1 => true,
        f => return Err(r.err(format!("velocity flag must be 0 or 1, found {f}"))),
    };
    let mut metadata = BTreeMap::new();
    for _ in 0..r.u32("metadata count")? {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        metadata.insert(k, v);
    }
    let mut z = Vec::with_capacity(atoms);
    let mut pos = Vec::with_capacity(atoms);
    let mut vel = Vec::with_capacity(atoms);
    for _ in 0..atoms {
        z.push(r.u8("atomic number")?);
        pos.push(r.vec3("atom position")?);
        vel.push(r.vec3("atom velocity")?);
    }
    let at = r.offset;
    let ligand = LigandState::new(z, pos)
        .and_then(|l| l.with_velocities(vel))
        .map_err(|e| Error::parse(context, format!("byte {at}"), e.to_string()))?;
    let (mut types, mut n, mut ca, mut c) = (vec![], vec![], vec![], vec![]);
    for _ in 0..residues {
        types.push(r.u8("residue type")? as usize);
        n.push(r.vec3("N")?);
        ca.push(r.vec3("CA")?);
        c.push(r.vec3("C")?);
    }
    let at = r.offset;
    let protein = ProteinStructure::new(types, n, ca, c)
        .map_err(|e| Error::parse(context, format!("byte {at}"), e.to_string()))?;
    let mut positions = Vec::with_capacity(snapshots);
    let mut velocities = Vec::new();
    for _ in 0..snapshots {
        positions.push((0..atoms).map(|_| r.vec3("snapshot position")).collect::<Result<Vec<_>>>()?);
        if with_v {
            velocities.push((0..atoms).map(|_| r.vec3("snapshot velocity")).collect::<Result<Vec<_>>>()?);
        }
    }
    if r.offset != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.offset)));
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
    record.validate()?;
    Ok(record)
}
