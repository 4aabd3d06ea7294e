//! CKPT1 checkpoint files: magic `CKPT1`, u32 tensor count, then per tensor
//! u32 name length, UTF-8 name, u32 rank, u32 dims, f32 data (all
//! little-endian).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::tensor::{HasParams, Param, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"CKPT1";

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R, source: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let fmt = |reason: String| Error::Format {
        path: source.to_string(),
        reason,
    };
    let io = |e: std::io::Error| fmt(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(fmt("missing CKPT1 magic".into()));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if len > 4096 {
            return Err(fmt(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if rank > 8 {
            return Err(fmt(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(io)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

/// Every parameter and buffer of `model`, in visiting order.
pub fn collect_tensors<M: HasParams<f32> + ?Sized>(model: &mut M) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p: &mut Param<f32>| out.push((p.name.clone(), p.value.clone())));
    out
}

pub fn save_checkpoint<M: HasParams<f32> + ?Sized>(path: &Path, model: &mut M) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), &collect_tensors(model)).map_err(|e| Error::io(path, e))
}

/// Copies named tensors into `model`. Every model tensor must be present
/// with a matching shape and no extra names are allowed.
pub fn apply_tensors<M: HasParams<f32> + ?Sized>(model: &mut M, tensors: Vec<(String, Tensor<f32>)>, source: &str) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, t) in tensors {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Format {
                path: source.into(),
                reason: format!("duplicate tensor `{name}`"),
            });
        }
    }
    let mut err: Option<Error> = None;
    model.visit_params(&mut |p: &mut Param<f32>| {
        if err.is_some() {
            return;
        }
        match by_name.remove(&p.name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t;
                p.momentum.fill(0.0);
                p.zero_grad();
            }
            Some(t) => {
                err = Some(Error::shape(
                    format!("checkpoint tensor `{}`", p.name),
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", t.shape()),
                ))
            }
            None => {
                err = Some(Error::Format {
                    path: source.into(),
                    reason: format!("missing tensor `{}`", p.name),
                })
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format {
            path: source.into(),
            reason: format!("unexpected tensor `{extra}` (model config differs?)"),
        });
    }
    Ok(())
}

pub fn load_checkpoint<M: HasParams<f32> + ?Sized>(path: &Path, model: &mut M) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let tensors = read_checkpoint(BufReader::new(f), &source)?;
    apply_tensors(model, tensors, &source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bytes() {
        let t = vec![
            ("a.weight".to_string(), Tensor::from_vec(&[2, 1, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap()),
            ("b".to_string(), Tensor::from_vec(&[1], vec![4.0]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &t).unwrap();
        assert_eq!(&buf[..5], b"CKPT1");
        assert_eq!(read_checkpoint(buf.as_slice(), "mem").unwrap(), t);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let t = vec![("a".to_string(), Tensor::full(&[4], 1.0))];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice(), "mem"), Err(Error::Format { .. })));
    }
}
