//! Flat parameter files.
//!
//! Layout: an ASCII header, then the raw values.
//!
//! ```text
//! srd-checkpoint 1
//! tensors <count>
//! <name> <d0>x<d1>...
//! end
//! <little-endian f64 values of every tensor, in header order>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "srd-checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: String, tensor: &Tensor) {
        self.entries.push((name, tensor.shape().to_vec(), tensor.to_vec()));
    }

    pub fn push_raw(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) {
        self.entries.push((name, shape, values));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (_, s, v) = self
            .entries
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))?;
        if s != shape {
            return Err(Error::Shape {
                op: "checkpoint",
                left: s.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(v)
    }

    pub fn load_into(&self, name: &str, tensor: &Tensor) -> Result<()> {
        tensor.set_values(self.get(name, tensor.shape())?)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = format!("{MAGIC}\ntensors {}\n", self.entries.len());
        for (name, shape, _) in &self.entries {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("{name} {}\n", dims.join("x")));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, _, values) in &self.entries {
            let mut buf = Vec::with_capacity(values.len() * 8);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated checkpoint header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let count: usize = next_line(&mut r)?
            .strip_prefix("tensors ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Format("bad tensor count line".into()))?;
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let (name, dims) = l
                .rsplit_once(' ')
                .ok_or_else(|| Error::Format(format!("bad tensor line {l:?}")))?;
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Format(format!("bad shape in {l:?}")))?
            };
            specs.push((name.to_string(), shape));
        }
        if next_line(&mut r)? != "end" {
            return Err(Error::Format("missing end of checkpoint header".into()));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Format(format!("truncated data for {name}")))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((name, shape, values));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint data".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}
