//! Binary checkpoints of a model and, optionally, its gradient projection
//! memory.
//!
//! Layout (all integers little-endian `u64` unless noted, floats as raw
//! little-endian `f64` bits so a round trip is exact):
//!
//! ```text
//! magic "SSCLCKPT" | version u32 | seed | task
//! input_dim | n_hidden | widths... | batchnorm u8 | dropout f64 | mode u8
//! n_tensors | (rows | cols | data...)...
//! n_running | (len | mean... | var...)...
//! has_gpm u8 | [mode u8 | energy f64 | max_rank (u64::MAX = none)
//!               | n_groups | (dim | rank | data...)...]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::gpm::{GpmMode, GpmStore};
use crate::model::{Architecture, Mode, ModelParams};

pub const MAGIC: &[u8; 8] = b"SSCLCKPT";
pub const VERSION: u32 = 2;

/// What a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Index of the last task trained before saving.
    pub task: usize,
    pub model: ModelParams,
    pub gpm: Option<GpmStore>,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn usize(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn floats<'a>(&mut self, it: impl IntoIterator<Item = &'a f64>) -> Result<()> {
        for v in it {
            self.f64(*v)?;
        }
        Ok(())
    }
    fn matrix(&mut self, m: &Array2<f64>) -> Result<()> {
        self.usize(m.nrows())?;
        self.usize(m.ncols())?;
        self.floats(m.iter())
    }
}

struct Reader<R: Read>(R);

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Io(e)
    }
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    /// A length or index, bounded so corrupt input cannot request huge
    /// allocations.
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (1 << 40) {
            return Err(Error::Checkpoint(format!("implausible size {v}")));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let data = self.floats(rows * cols)?;
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer(out);
    w.0.write_all(MAGIC)?;
    w.0.write_all(&VERSION.to_le_bytes())?;
    let model = &ckpt.model;
    let arch = model.architecture();
    w.u64(model.seed())?;
    w.usize(ckpt.task)?;
    w.usize(arch.input_dim)?;
    w.usize(arch.hidden.len())?;
    for &h in &arch.hidden {
        w.usize(h)?;
    }
    w.u8(arch.batchnorm as u8)?;
    w.f64(arch.dropout)?;
    w.u8(match model.mode() {
        Mode::Train => 0,
        Mode::Eval => 1,
    })?;
    w.usize(model.tensors().len())?;
    for t in model.tensors() {
        w.matrix(t)?;
    }
    let n_running = if arch.batchnorm { arch.hidden.len() } else { 0 };
    w.usize(n_running)?;
    for layer in 0..n_running {
        let (mean, var) = model.running_stats(layer).expect("layer has batchnorm");
        w.usize(mean.len())?;
        w.floats(mean.iter())?;
        w.floats(var.iter())?;
    }
    match &ckpt.gpm {
        None => w.u8(0)?,
        Some(g) => {
            w.u8(1)?;
            w.u8(match g.mode() {
                GpmMode::Layerwise => 0,
                GpmMode::Global => 1,
            })?;
            w.f64(g.energy())?;
            w.u64(g.max_rank().map_or(u64::MAX, |r| r as u64))?;
            match g.tracked() {
                None => w.u8(0)?,
                Some(mask) => {
                    w.u8(1)?;
                    w.usize(mask.len())?;
                    for &t in mask {
                        w.u8(u8::from(t))?;
                    }
                }
            }
            w.usize(g.group_dims().len())?;
            for (i, &dim) in g.group_dims().iter().enumerate() {
                let b = g.basis(i);
                w.usize(dim)?;
                w.usize(b.nrows())?;
                w.floats(b.iter())?;
            }
        }
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader(input);
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let task = r.usize()?;
    let input_dim = r.usize()?;
    let n_hidden = r.usize()?;
    let hidden = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let batchnorm = r.u8()? != 0;
    let dropout = r.f64()?;
    let mode = match r.u8()? {
        0 => Mode::Train,
        1 => Mode::Eval,
        m => return Err(Error::Checkpoint(format!("unknown mode tag {m}"))),
    };
    let n_tensors = r.usize()?;
    let params = (0..n_tensors).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
    let n_running = r.usize()?;
    let mut running = Vec::with_capacity(n_running);
    for _ in 0..n_running {
        let len = r.usize()?;
        let mean = Array1::from(r.floats(len)?);
        let var = Array1::from(r.floats(len)?);
        running.push((mean, var));
    }
    let arch = Architecture {
        input_dim,
        hidden,
        batchnorm,
        dropout,
    };
    let model = ModelParams::from_parts(arch, seed, params, running, mode)?;
    let gpm = match r.u8()? {
        0 => None,
        1 => {
            let mode = match r.u8()? {
                0 => GpmMode::Layerwise,
                1 => GpmMode::Global,
                m => return Err(Error::Checkpoint(format!("unknown gpm mode tag {m}"))),
            };
            let energy = r.f64()?;
            let max_rank = match r.u64()? {
                u64::MAX => None,
                v => Some(v as usize),
            };
            let tracked = match r.u8()? {
                0 => None,
                1 => {
                    let n = r.usize()?;
                    Some((0..n).map(|_| Ok(r.u8()? != 0)).collect::<Result<Vec<bool>>>()?)
                }
                t => return Err(Error::Checkpoint(format!("unknown tracked flag {t}"))),
            };
            let n_groups = r.usize()?;
            let mut dims = Vec::with_capacity(n_groups);
            let mut bases = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                let dim = r.usize()?;
                let rank = r.usize()?;
                let data = r.floats(dim * rank)?;
                dims.push(dim);
                bases.push(
                    Array2::from_shape_vec((rank, dim), data)
                        .map_err(|e| Error::Checkpoint(e.to_string()))?,
                );
            }
            let mut store = GpmStore::with_dims(mode, energy, dims)
                .with_max_rank(max_rank)
                .with_tracked(tracked);
            for (i, b) in bases.into_iter().enumerate() {
                store.set_basis(i, b);
            }
            Some(store)
        }
        t => return Err(Error::Checkpoint(format!("unknown gpm flag {t}"))),
    };
    let mut trailing = [0u8; 1];
    if r.0.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { task, model, gpm })
}

/// Writes to a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial checkpoint behind.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    let result = (|| {
        let file = std::fs::File::create(&tmp)?;
        write_checkpoint(std::io::BufWriter::new(file), ckpt)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
