//! Binary and CSV encodings of [`Tensor`].
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! b"GTN0" | rank: u8 | dims: rank × u64 | payload: len × f64
//! ```
//!
//! CSV: a first line `# shape=AxBx...`, then one line per leading-axis entry
//! (a single line for rank ≤ 1) with the remaining values comma-separated.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"GTN0";

impl Tensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 8 * self.rank() + 8 * self.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.rank() as u8);
        for &d in self.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in self.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let bad = |msg: &str| Error::Format(format!("tensor payload: {msg}"));
        if bytes.len() < 5 || &bytes[..4] != TENSOR_MAGIC {
            return Err(bad("missing GTN0 magic"));
        }
        let rank = bytes[4] as usize;
        let header = 5 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let shape: Vec<usize> = bytes[5..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len.ok_or_else(|| bad("shape overflows"))?;
        if bytes.len() - header != len * 8 {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                len * 8,
                bytes.len() - header
            )));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn to_csv(&self) -> String {
        let shape: Vec<String> = self.shape().iter().map(usize::to_string).collect();
        let mut out = format!("# shape={}\n", shape.join("x"));
        let width = if self.rank() >= 2 { self.row_len() } else { self.len() };
        for row in self.data().chunks(width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Tensor> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# shape="))
            .ok_or_else(|| Error::Format("csv tensor: missing '# shape=' header".into()))?;
        let shape = header
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("csv tensor shape: {e}")))?;
        let mut data = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            for cell in line.split(',') {
                data.push(
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("csv tensor value {cell:?}: {e}")))?,
                );
            }
        }
        Tensor::new(shape, data)
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_csv(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, t.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_csv(&text)
}
