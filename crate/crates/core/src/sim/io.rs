//! Ensemble export: columnar CSV and a little-endian binary dump.
//!
//! Binary layout (all integers `u64`, all reals `f64`, little-endian):
//!
//! ```text
//! "FLOWLAB1"  d  n_paths  n_anchors  n_record
//! anchors:      n_anchors × (s, x[0..d])
//! record times: n_record
//! states:       n_paths × n_anchors × n_record × d
//! exit times:   n_paths × n_anchors      (+inf when the path stayed in the domain)
//! ```

use std::io::{Read, Write};

use crate::error::{FlowError, Result};
use crate::sim::PathEnsemble;

pub const MAGIC: &[u8; 8] = b"FLOWLAB1";

/// Writes one row per (path, anchor, record time).
pub fn write_csv<W: Write>(ensemble: &PathEnsemble, out: W) -> Result<()> {
    let d = ensemble.dim_state;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["path".to_string(), "anchor".into(), "anchor_s".into()];
    header.extend((0..d).map(|i| format!("anchor_x{i}")));
    header.push("t".into());
    header.extend((0..d).map(|i| format!("state{i}")));
    header.push("exited".into());
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for path in 0..ensemble.n_paths {
        for (a, anchor) in ensemble.anchors.iter().enumerate() {
            let exit = ensemble.exit_time(path, a);
            for (rec, t) in ensemble.record_times.iter().enumerate() {
                row.clear();
                row.push(path.to_string());
                row.push(a.to_string());
                row.push(anchor.s.to_string());
                row.extend(anchor.x.iter().map(f64::to_string));
                row.push(t.to_string());
                row.extend(ensemble.state(path, a, rec).iter().map(f64::to_string));
                row.push(exit.is_some_and(|e| e <= *t).to_string());
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// In-memory image of a binary dump.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryDump {
    pub dim_state: usize,
    pub n_paths: usize,
    pub anchors: Vec<(f64, Vec<f64>)>,
    pub record_times: Vec<f64>,
    pub states: Vec<f64>,
    pub exit_times: Vec<f64>,
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_binary<W: Write>(ensemble: &PathEnsemble, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u64(&mut w, ensemble.dim_state as u64)?;
    put_u64(&mut w, ensemble.n_paths as u64)?;
    put_u64(&mut w, ensemble.anchors.len() as u64)?;
    put_u64(&mut w, ensemble.record_times.len() as u64)?;
    for a in &ensemble.anchors {
        put_f64s(&mut w, &[a.s])?;
        put_f64s(&mut w, &a.x)?;
    }
    put_f64s(&mut w, &ensemble.record_times)?;
    put_f64s(&mut w, ensemble.raw_states())?;
    put_f64s(&mut w, ensemble.raw_exit_times())?;
    w.flush()?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn read_binary<R: Read>(mut r: R) -> Result<BinaryDump> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FlowError::Config("not a FLOWLAB1 dump".into()));
    }
    let d = get_u64(&mut r)? as usize;
    let n_paths = get_u64(&mut r)? as usize;
    let n_anchors = get_u64(&mut r)? as usize;
    let n_record = get_u64(&mut r)? as usize;
    let mut anchors = Vec::with_capacity(n_anchors);
    for _ in 0..n_anchors {
        let s = get_f64s(&mut r, 1)?[0];
        anchors.push((s, get_f64s(&mut r, d)?));
    }
    let record_times = get_f64s(&mut r, n_record)?;
    let states = get_f64s(&mut r, n_paths * n_anchors * n_record * d)?;
    let exit_times = get_f64s(&mut r, n_paths * n_anchors)?;
    Ok(BinaryDump { dim_state: d, n_paths, anchors, record_times, states, exit_times })
}
