//! HPF1 binary array format and artifact bundles.
//!
//! Layout: magic bytes "HPF1", three little-endian u32 words (rank, dim0,
//! dim1), then the payload as little-endian IEEE-754 f64 in declared order.
//! Complex arrays interleave (re, im) pairs and set the flag bit on the rank
//! word. Fields store rank 2 with dim0 = nz, dim1 = nx (z-major rows).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::grid::{Field, Grid2D};
use crate::psido::LowRankSymbol;

const MAGIC: &[u8; 4] = b"HPF1";
const COMPLEX_FLAG: u32 = 0x8000_0000;

fn write_header(out: &mut impl Write, rank: u32, dim0: u32, dim1: u32) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&rank.to_le_bytes())?;
    out.write_all(&dim0.to_le_bytes())?;
    out.write_all(&dim1.to_le_bytes())?;
    Ok(())
}

fn read_header(data: &[u8]) -> Result<(u32, u32, u32)> {
    if data.len() < 16 || &data[0..4] != MAGIC {
        return Err(CoreError::Format("missing HPF1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(data[i..i + 4].try_into().unwrap());
    Ok((word(4), word(8), word(12)))
}

pub fn write_real_array(path: &Path, dim0: usize, dim1: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), dim0 * dim1);
    let mut buf = Vec::with_capacity(16 + data.len() * 8);
    let rank = if dim1 == 1 && dim0 != 1 { 1 } else { 2 };
    write_header(&mut buf, rank, dim0 as u32, dim1 as u32)?;
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_complex_array(path: &Path, dim0: usize, dim1: usize, data: &[Complex64]) -> Result<()> {
    assert_eq!(data.len(), dim0 * dim1);
    let mut buf = Vec::with_capacity(16 + data.len() * 16);
    let rank = if dim1 == 1 && dim0 != 1 { 1 } else { 2 };
    write_header(&mut buf, rank | COMPLEX_FLAG, dim0 as u32, dim1 as u32)?;
    for v in data {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub enum Array {
    Real {
        dim0: usize,
        dim1: usize,
        data: Vec<f64>,
    },
    Complex {
        dim0: usize,
        dim1: usize,
        data: Vec<Complex64>,
    },
}

pub fn read_array(path: &Path) -> Result<Array> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (rank_word, dim0, dim1) = read_header(&data)?;
    let complex = rank_word & COMPLEX_FLAG != 0;
    let n = dim0 as usize * dim1 as usize;
    let payload = &data[16..];
    let want = n * if complex { 16 } else { 8 };
    if payload.len() != want {
        return Err(CoreError::Format(format!(
            "payload length {} does not match {}x{} ({} expected)",
            payload.len(),
            dim0,
            dim1,
            want
        )));
    }
    let f64_at = |i: usize| f64::from_le_bytes(payload[i * 8..i * 8 + 8].try_into().unwrap());
    if complex {
        let data = (0..n)
            .map(|i| Complex64::new(f64_at(2 * i), f64_at(2 * i + 1)))
            .collect();
        Ok(Array::Complex {
            dim0: dim0 as usize,
            dim1: dim1 as usize,
            data,
        })
    } else {
        Ok(Array::Real {
            dim0: dim0 as usize,
            dim1: dim1 as usize,
            data: (0..n).map(f64_at).collect(),
        })
    }
}

pub fn write_field(path: &Path, f: &Field) -> Result<()> {
    write_real_array(path, f.grid.nz, f.grid.nx, &f.values)
}

pub fn read_field(path: &Path, grid: Grid2D) -> Result<Field> {
    match read_array(path)? {
        Array::Real { dim0, dim1, data } => {
            if dim0 != grid.nz || dim1 != grid.nx {
                return Err(CoreError::Format(format!(
                    "field dims {dim1}x{dim0} do not match grid {}x{}",
                    grid.nx, grid.nz
                )));
            }
            Field::from_values(grid, data)
        }
        Array::Complex { .. } => Err(CoreError::Format("expected a real field".into())),
    }
}

pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    write_real_array(path, v.len(), 1, v)
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    match read_array(path)? {
        Array::Real { data, .. } => Ok(data),
        Array::Complex { .. } => Err(CoreError::Format("expected a real vector".into())),
    }
}

/// Persists a low-rank symbol as one HPF1 file per factor plus a JSON
/// manifest carrying the rank, grid dims and spacings.
pub fn save_symbol(dir: &Path, name: &str, sym: &LowRankSymbol) -> Result<()> {
    fs::create_dir_all(dir)?;
    let grid = sym.grid();
    let manifest = serde_json::json!({
        "rank": sym.rank(),
        "nx": grid.nx,
        "nz": grid.nz,
        "dx": grid.dx,
        "dz": grid.dz,
    });
    fs::write(
        dir.join(format!("{name}.manifest.json")),
        serde_json::to_string_pretty(&manifest).expect("static structure"),
    )?;
    for (k, a) in sym.spatial_factors().iter().enumerate() {
        write_field(&dir.join(format!("{name}.a{k}.hpf")), a)?;
    }
    for (k, b) in sym.frequency_factors().iter().enumerate() {
        write_complex_array(&dir.join(format!("{name}.b{k}.hpf")), grid.nz, grid.nx, b)?;
    }
    Ok(())
}

pub fn load_symbol(dir: &Path, name: &str) -> Result<LowRankSymbol> {
    let manifest_path = dir.join(format!("{name}.manifest.json"));
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|_| CoreError::MissingArtifacts(manifest_path.display().to_string()))?,
    )
    .map_err(|e| CoreError::Format(format!("manifest: {e}")))?;
    let get = |k: &str| -> Result<f64> {
        manifest[k]
            .as_f64()
            .ok_or_else(|| CoreError::Format(format!("manifest missing {k}")))
    };
    let grid = Grid2D::new(
        get("nx")? as usize,
        get("nz")? as usize,
        get("dx")?,
        get("dz")?,
    )?;
    let rank = get("rank")? as usize;
    let mut spatial = Vec::with_capacity(rank);
    let mut freq = Vec::with_capacity(rank);
    for k in 0..rank {
        spatial.push(read_field(&dir.join(format!("{name}.a{k}.hpf")), grid)?);
        match read_array(&dir.join(format!("{name}.b{k}.hpf")))? {
            Array::Complex { data, .. } => freq.push(data),
            Array::Real { .. } => {
                return Err(CoreError::Format("frequency factor must be complex".into()))
            }
        }
    }
    LowRankSymbol::new(grid, spatial, freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn field_round_trip_and_header_layout() {
        let dir = std::env::temp_dir().join("psido_io_test_field");
        fs::create_dir_all(&dir).unwrap();
        let g = Grid2D::new(6, 4, 0.5, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Field {
            grid: g,
            values: (0..g.n()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let path = dir.join("f.hpf");
        write_field(&path, &f).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"HPF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4); // nz
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6); // nx
        assert_eq!(bytes.len(), 16 + 24 * 8);

        let back = read_field(&path, g).unwrap();
        assert_eq!(back.values, f.values);
        // Dim mismatch rejected.
        let wrong = Grid2D::new(4, 6, 0.5, 2.0).unwrap();
        assert!(read_field(&path, wrong).is_err());
    }

    #[test]
    fn complex_array_sets_flag_bit_and_round_trips() {
        let dir = std::env::temp_dir().join("psido_io_test_cplx");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.hpf");
        let data: Vec<Complex64> = (0..12)
            .map(|i| Complex64::new(i as f64, -(i as f64) / 3.0))
            .collect();
        write_complex_array(&path, 3, 4, &data).unwrap();
        let bytes = fs::read(&path).unwrap();
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        assert_eq!(rank & 0x8000_0000, 0x8000_0000);
        assert_eq!(rank & 0x7fff_ffff, 2);
        match read_array(&path).unwrap() {
            Array::Complex { dim0, dim1, data: back } => {
                assert_eq!((dim0, dim1), (3, 4));
                assert_eq!(back, data);
            }
            _ => panic!("expected complex"),
        }
    }

    #[test]
    fn symbol_bundle_round_trip() {
        let dir = std::env::temp_dir().join("psido_io_test_sym");
        let _ = fs::remove_dir_all(&dir);
        let g = Grid2D::new(8, 8, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Field {
            grid: g,
            values: (0..g.n()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let b: Vec<Complex64> = (0..g.n())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let sym = LowRankSymbol::new(g, vec![a], vec![b]).unwrap();
        save_symbol(&dir, "test", &sym).unwrap();
        let back = load_symbol(&dir, "test").unwrap();
        assert_eq!(back.rank(), 1);
        assert_eq!(back.spatial_factors()[0].values, sym.spatial_factors()[0].values);
        assert_eq!(back.frequency_factors()[0], sym.frequency_factors()[0]);
        // Re-saving produces byte-identical files.
        let before = fs::read(dir.join("test.a0.hpf")).unwrap();
        save_symbol(&dir, "test", &sym).unwrap();
        let after = fs::read(dir.join("test.a0.hpf")).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn vector_and_missing_file_paths() {
        let dir = std::env::temp_dir().join("psido_io_test_vec");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v.hpf");
        let v = vec![1.0, -2.0, 3.5];
        write_vector(&path, &v).unwrap();
        assert_eq!(read_vector(&path).unwrap(), v);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert!(load_symbol(&dir, "absent").is_err());
    }
}
