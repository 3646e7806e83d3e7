//! Binary persistence for [`RecordStore`].
//!
//! Layout, all little-endian: an 8-byte magic, format version (u32), system
//! signature (u64), element and species counts (u32 each), record count
//! (u64), then the records as fixed-width numeric fields in store order.
//! Matrices are written column-major. The optional blocks (sensitivities,
//! activity tangent) are gated by a per-record flags byte. Only records are
//! persisted; search configuration and session counters stay with the
//! process.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chemsys::ChemicalSystem;
use crate::equilibrium::Sensitivities;

use super::{ActivityTangent, EquilibriumRecord, RecordStore, SearchConfig};

const MAGIC: [u8; 8] = *b"CEQSTORE";
const FORMAT_VERSION: u32 = 1;
const FLAG_SENS: u8 = 1;
const FLAG_ACT: u8 = 2;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a record store file")]
    BadMagic,
    #[error("unsupported store format version {found}")]
    Version { found: u32 },
    #[error("store was written for a different chemical system (signature {found:#018x}, expected {expected:#018x})")]
    Signature { found: u64, expected: u64 },
    #[error("store dimensions ({elements} elements, {species} species) do not match the system")]
    Dimensions { elements: u32, species: u32 },
    #[error("store file is truncated")]
    Truncated,
    #[error("store file is corrupt: {0}")]
    Corrupt(&'static str),
}

impl RecordStore {
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        put_u32(&mut w, FORMAT_VERSION)?;
        put_u64(&mut w, self.signature)?;
        put_u32(&mut w, (self.weights.len() - 2) as u32)?;
        put_u32(&mut w, self.n_species as u32)?;
        put_u64(&mut w, self.records.len() as u64)?;
        for rec in &self.records {
            put_record(&mut w, rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a store saved for `system`; refuses files written for any other
    /// system. The search configuration is supplied by the caller, not the
    /// file, and counters start at zero.
    pub fn load(
        path: &Path,
        system: &ChemicalSystem,
        config: SearchConfig,
    ) -> Result<RecordStore, StoreError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        fill(&mut r, &mut magic)?;
        if magic != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(StoreError::Version { found: version });
        }
        let signature = get_u64(&mut r)?;
        if signature != system.signature() {
            return Err(StoreError::Signature {
                found: signature,
                expected: system.signature(),
            });
        }
        let ne = get_u32(&mut r)?;
        let nsp = get_u32(&mut r)?;
        if ne as usize != system.n_elements() || nsp as usize != system.n_species() {
            return Err(StoreError::Dimensions {
                elements: ne,
                species: nsp,
            });
        }
        let count = get_u64(&mut r)?;

        let mut store = RecordStore::new(system, config);
        for idx in 0..count {
            let rec = get_record(&mut r, ne as usize, nsp as usize)?;
            if rec.id as u64 != idx {
                return Err(StoreError::Corrupt("record ids out of order"));
            }
            store.push(rec);
        }
        if r.read(&mut [0u8])? != 0 {
            return Err(StoreError::Corrupt("trailing data after the last record"));
        }
        store.rebuild();
        Ok(store)
    }
}

fn put_record<W: Write>(w: &mut W, rec: &EquilibriumRecord) -> Result<(), StoreError> {
    put_u64(w, rec.id as u64)?;
    put_f64(w, rec.t)?;
    put_f64(w, rec.p)?;
    put_slice(w, rec.b.as_slice())?;
    put_slice(w, rec.n.as_slice())?;
    put_slice(w, rec.mu.as_slice())?;
    put_slice(w, rec.ln_a.as_slice())?;
    put_slice(w, rec.dmu_dt.as_slice())?;
    put_slice(w, rec.dmu_dp.as_slice())?;
    put_slice(w, rec.dmu_dn.as_slice())?;
    let mut flags = 0u8;
    if rec.sens.is_some() {
        flags |= FLAG_SENS;
    }
    if rec.act.is_some() {
        flags |= FLAG_ACT;
    }
    w.write_all(&[flags])?;
    if let Some(sens) = &rec.sens {
        put_slice(w, sens.dn_dt.as_slice())?;
        put_slice(w, sens.dn_dp.as_slice())?;
        put_slice(w, sens.dn_db.as_slice())?;
        let stable: Vec<u8> = sens.stable.iter().map(|&s| u8::from(s)).collect();
        w.write_all(&stable)?;
    }
    if let Some(act) = &rec.act {
        put_slice(w, act.dlna_dt.as_slice())?;
        put_slice(w, act.dlna_dp.as_slice())?;
        put_slice(w, act.dlna_dn.as_slice())?;
    }
    Ok(())
}

fn get_record<R: Read>(r: &mut R, ne: usize, nsp: usize) -> Result<EquilibriumRecord, StoreError> {
    let id = get_u64(r)? as usize;
    let t = get_f64(r)?;
    let p = get_f64(r)?;
    let b = get_vec(r, ne)?;
    let n = get_vec(r, nsp)?;
    let mu = get_vec(r, nsp)?;
    let ln_a = get_vec(r, nsp)?;
    let dmu_dt = get_vec(r, nsp)?;
    let dmu_dp = get_vec(r, nsp)?;
    let dmu_dn = get_mat(r, nsp, nsp)?;
    let mut flags = [0u8];
    fill(r, &mut flags)?;
    if flags[0] & !(FLAG_SENS | FLAG_ACT) != 0 {
        return Err(StoreError::Corrupt("unknown record flags"));
    }
    let sens = if flags[0] & FLAG_SENS != 0 {
        let dn_dt = get_vec(r, nsp)?;
        let dn_dp = get_vec(r, nsp)?;
        let dn_db = get_mat(r, nsp, ne)?;
        let mut raw = vec![0u8; nsp];
        fill(r, &mut raw)?;
        let mut stable = Vec::with_capacity(nsp);
        for byte in raw {
            match byte {
                0 => stable.push(false),
                1 => stable.push(true),
                _ => return Err(StoreError::Corrupt("stability flags must be 0 or 1")),
            }
        }
        Some(Sensitivities {
            dn_dt,
            dn_dp,
            dn_db,
            stable,
        })
    } else {
        None
    };
    let act = if flags[0] & FLAG_ACT != 0 {
        Some(ActivityTangent {
            dlna_dt: get_vec(r, nsp)?,
            dlna_dp: get_vec(r, nsp)?,
            dlna_dn: get_mat(r, nsp, nsp)?,
        })
    } else {
        None
    };
    Ok(EquilibriumRecord {
        id,
        t,
        p,
        b,
        n,
        mu,
        ln_a,
        dmu_dt,
        dmu_dp,
        dmu_dn,
        sens,
        act,
    })
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StoreError::Truncated
        } else {
            StoreError::Io(e)
        }
    })
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<(), StoreError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<(), StoreError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<(), StoreError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_slice<W: Write>(w: &mut W, values: &[f64]) -> Result<(), StoreError> {
    for &v in values {
        put_f64(w, v)?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, StoreError> {
    let mut buf = [0u8; 4];
    fill(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64, StoreError> {
    let mut buf = [0u8; 8];
    fill(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64, StoreError> {
    let mut buf = [0u8; 8];
    fill(r, &mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn get_vec<R: Read>(r: &mut R, len: usize) -> Result<DVector<f64>, StoreError> {
    let mut v = DVector::zeros(len);
    for i in 0..len {
        v[i] = get_f64(r)?;
    }
    Ok(v)
}

fn get_mat<R: Read>(r: &mut R, nrows: usize, ncols: usize) -> Result<DMatrix<f64>, StoreError> {
    let mut m = DMatrix::zeros(nrows, ncols);
    // storage is column-major, matching the writer's iteration order
    for c in 0..ncols {
        for row in 0..nrows {
            m[(row, c)] = get_f64(r)?;
        }
    }
    Ok(m)
}
