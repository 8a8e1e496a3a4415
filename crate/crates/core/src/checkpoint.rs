//! Model checkpoint file.
//!
//! Layout (little-endian):
//!
//! | size      | field                                           |
//! |-----------|-------------------------------------------------|
//! | 8         | magic `SE3FLOWM`                                |
//! | 4         | format version (u32, currently 1)               |
//! | 1         | flow stage (0 initialized, 1 flow 1, 2 flow 2)  |
//! | 1         | twist convention (0 spatial, 1 body)            |
//! | 1         | task code, `0xFF` when untagged                 |
//! | 1         | flags, bit 0 set for a linear skip path         |
//! | 4 + 4·n   | layer count n (u32), then n layer sizes (u32)   |
//! | 4 + 8·m   | frequency count m (u32), then m f64 frequencies |
//! | 4 + k     | config echo length k (u32), then UTF-8 text     |
//! | 8 + 8·p   | parameter count p (u64), then p f64 parameters  |

use std::fs;
use std::path::Path;

use crate::drift::{DriftModel, FlowStage};
use crate::error::{Error, Result};
use crate::integrator::Convention;
use crate::tasks::Task;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SE3FLOWM";
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_TASK: u8 = 0xFF;

pub fn to_bytes(model: &DriftModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(model.stage.code());
    out.push(model.convention().code());
    out.push(model.task.map_or(NO_TASK, Task::code));
    out.push(u8::from(model.linear_skip()));
    out.extend_from_slice(&(model.layer_sizes().len() as u32).to_le_bytes());
    for &s in model.layer_sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.time_embed_freqs().len() as u32).to_le_bytes());
    for f in model.time_embed_freqs() {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&(model.config_echo.len() as u32).to_le_bytes());
    out.extend_from_slice(model.config_echo.as_bytes());
    out.extend_from_slice(&(model.n_params() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: at as u64,
            msg: msg.into(),
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<DriftModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.err(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(8, format!("unsupported version {version}")));
    }
    let stage = r.u8("stage")?;
    let stage =
        FlowStage::from_code(stage).ok_or_else(|| r.err(12, format!("unknown stage {stage}")))?;
    let conv = r.u8("convention")?;
    let convention = Convention::from_code(conv)
        .ok_or_else(|| r.err(13, format!("unknown convention {conv}")))?;
    let task = match r.u8("task")? {
        NO_TASK => None,
        c => Some(Task::from_code(c).ok_or_else(|| r.err(14, format!("unknown task code {c}")))?),
    };
    let flags = r.u8("flags")?;
    if flags > 1 {
        return Err(r.err(15, format!("unknown flags {flags:#04x}")));
    }

    let n_sizes = r.u32("layer count")? as usize;
    if n_sizes > 1024 {
        return Err(r.err(r.pos - 4, format!("implausible layer count {n_sizes}")));
    }
    let sizes = (0..n_sizes)
        .map(|_| r.u32("layer size").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let n_freqs = r.u32("frequency count")? as usize;
    if n_freqs > 1024 {
        return Err(r.err(r.pos - 4, format!("implausible frequency count {n_freqs}")));
    }
    let freqs = (0..n_freqs)
        .map(|_| r.f64("frequency"))
        .collect::<Result<Vec<_>>>()?;
    let echo_len = r.u32("echo length")? as usize;
    let echo_at = r.pos;
    let echo = std::str::from_utf8(r.take(echo_len, "config echo")?)
        .map_err(|_| r.err(echo_at, "config echo is not UTF-8"))?
        .to_owned();
    let n_params = r.u64("parameter count")? as usize;
    let params_at = r.pos;
    if (bytes.len() - r.pos) / 8 < n_params {
        return Err(r.err(
            bytes.len(),
            format!("truncated: header promises {n_params} parameters"),
        ));
    }
    let params = (0..n_params)
        .map(|_| r.f64("parameter"))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut model = DriftModel::from_parts(sizes, freqs, convention, flags == 1, params)
        .map_err(|e| r.err(params_at, e.to_string()))?;
    model.stage = stage;
    model.task = task;
    model.config_echo = echo;
    Ok(model)
}

pub fn save(model: &DriftModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DriftModel> {
    from_bytes(&fs::read(path)?)
}
