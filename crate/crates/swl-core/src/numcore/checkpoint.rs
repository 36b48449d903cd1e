//! Flat checkpoint container: `SWLCKPT v1` header, then per parameter a name
//! line, a shape line, and raw little-endian f64 bytes. Round trips bit-exact.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::array::Array;
use super::params::ParamStore;
use super::NumError;

const MAGIC: &str = "SWLCKPT v1";

pub fn save(params: &ParamStore, path: &Path) -> Result<(), NumError> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| NumError::Invalid(format!("create {}: {e}", path.display())))?;
    write(params, &mut f)
}

pub fn write<W: Write>(params: &ParamStore, w: &mut W) -> Result<(), NumError> {
    let io = |e: std::io::Error| NumError::Invalid(format!("checkpoint write: {e}"));
    writeln!(w, "{MAGIC}").map_err(io)?;
    for (name, arr) in params.iter() {
        writeln!(w, "{name}").map_err(io)?;
        let shape = arr
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "{shape}").map_err(io)?;
        for v in arr.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, NumError> {
    let f = std::fs::File::open(path)
        .map_err(|e| NumError::Invalid(format!("open {}: {e}", path.display())))?;
    read(&mut BufReader::new(f))
}

pub fn read<R: BufRead>(r: &mut R) -> Result<ParamStore, NumError> {
    let io = |e: std::io::Error| NumError::Invalid(format!("checkpoint read: {e}"));
    let mut header = String::new();
    r.read_line(&mut header).map_err(io)?;
    if header.trim_end() != MAGIC {
        return Err(NumError::Invalid(format!(
            "bad checkpoint header: {:?}",
            header.trim_end()
        )));
    }
    let mut params = ParamStore::new();
    loop {
        let mut name = String::new();
        if r.read_line(&mut name).map_err(io)? == 0 {
            break;
        }
        let name = name.trim_end().to_string();
        let mut shape_line = String::new();
        r.read_line(&mut shape_line).map_err(io)?;
        let shape: Vec<usize> = shape_line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| NumError::Invalid(format!("bad shape token {t:?} for '{name}'")))
            })
            .collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(io)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(&name, Array::from_vec(&shape, data)?);
    }
    Ok(params)
}
