//! Binary checkpoint container shared by every model.
//!
//! Layout: the magic `RGVAE1\n`, then records of
//! `name_len: u32 | name: utf-8 | rank: u32 | dims: u32 * rank | f32 * numel`
//! (all little-endian, payload row-major). A record with an empty name ends
//! the file. The record named `config` carries `key=value` lines, one byte
//! per payload element.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::dense::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"RGVAE1\n";
pub const CONFIG_RECORD: &str = "config";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        if !self.config.is_empty() {
            let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
            let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
            let t = Tensor::new([bytes.len()], bytes)?;
            write_record(w, CONFIG_RECORD, &t)?;
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name == CONFIG_RECORD {
                return Err(Error::Format(format!("reserved record name {name:?}")));
            }
            write_record(w, name, t)?;
        }
        w.write_all(&0u32.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut ck = Checkpoint::default();
        loop {
            let name_len = read_u32(r)? as usize;
            if name_len == 0 {
                break;
            }
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("record name not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let mut buf = vec![0u8; numel * 4];
            read_exact(r, &mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(dims, data)?;
            if name == CONFIG_RECORD {
                let bytes: Vec<u8> = t.data().iter().map(|&x| x as u8).collect();
                let text =
                    String::from_utf8(bytes).map_err(|_| Error::Format("config record not UTF-8".into()))?;
                ck.config = text
                    .lines()
                    .filter_map(|l| l.split_once('='))
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect();
            } else {
                ck.tensors.push((name, t));
            }
        }
        Ok(ck)
    }
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated record".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
