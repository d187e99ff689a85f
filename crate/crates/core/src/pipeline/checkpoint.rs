use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{PipelineError, RunConfig};
use crate::tensor::{AdamConfig, Moments, OptimizerState, ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"AFSK";
const VERSION: u8 = 1;

/// SHA-256 of a canonical architecture text (or of any content).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of(text: &str) -> Self {
        Self::of_bytes(text.as_bytes())
    }

    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    /// All 32 bytes as lowercase hex; `Display` shows the first 8.
    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0[..8].iter().try_for_each(|b| write!(f, "{b:02x}"))
    }
}

/// Parameters of one or more components plus what is needed to rebuild them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical architecture text; the fingerprint covers exactly this.
    pub architecture: String,
    /// Run settings in config-file form.
    pub run: String,
    /// Position in the learning-rate schedule.
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&self.architecture)
    }

    pub fn run_config(&self) -> Result<RunConfig, PipelineError> {
        RunConfig::parse(&self.run)
    }
}

/// Layout, all little-endian: magic `AFSK`, version byte, 32-byte
/// fingerprint, architecture and run texts (u32 length plus UTF-8), step
/// (u64), parameter count (u32), then per parameter its name, rank (u32),
/// dimensions (u64 each) and f64 values; finally an optimizer flag byte
/// followed, when set, by the Adam step, betas, epsilon and per-parameter
/// first and second moments.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&ckpt.fingerprint().0)?;
    write_str(&mut w, &ckpt.architecture)?;
    write_str(&mut w, &ckpt.run)?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for (name, t) in ckpt.params.iter() {
        write_str(&mut w, name)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(&mut w, t.data())?;
    }
    match &ckpt.optimizer {
        None => w.write_all(&[0])?,
        Some(opt) => {
            w.write_all(&[1])?;
            w.write_all(&opt.step.to_le_bytes())?;
            for x in [opt.config.beta1, opt.config.beta2, opt.config.eps] {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&(opt.moments.len() as u32).to_le_bytes())?;
            for (name, m) in &opt.moments {
                write_str(&mut w, name)?;
                w.write_all(&(m.m.len() as u64).to_le_bytes())?;
                write_f64s(&mut w, &m.m)?;
                write_f64s(&mut w, &m.v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    xs.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], PipelineError> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => PipelineError::Truncated,
            _ => PipelineError::Io(e),
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize, PipelineError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, PipelineError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PipelineError> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String, PipelineError> {
        let n = self.u32()?;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b).map_err(|_| PipelineError::Truncated)?;
        String::from_utf8(b).map_err(|_| PipelineError::Corrupt("string is not UTF-8".into()))
    }
}

/// Reads a checkpoint. When `expected` is given and differs from the stored
/// fingerprint the load is refused unless `force` is set.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<Fingerprint>,
    force: bool,
) -> Result<Checkpoint, PipelineError> {
    let mut r = Reader(BufReader::new(File::open(path.as_ref())?));
    if &r.bytes::<4>()? != MAGIC {
        return Err(PipelineError::BadMagic);
    }
    let [version] = r.bytes::<1>()?;
    if version != VERSION {
        return Err(PipelineError::UnsupportedVersion(version));
    }
    let stored = Fingerprint(r.bytes()?);
    let architecture = r.string()?;
    if Fingerprint::of(&architecture) != stored {
        return Err(PipelineError::Corrupt(
            "fingerprint does not match the stored architecture".into(),
        ));
    }
    if let Some(exp) = expected {
        if exp != stored && !force {
            return Err(PipelineError::FingerprintMismatch {
                expected: exp,
                found: stored,
            });
        }
    }
    let run = r.string()?;
    let step = r.u64()?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().product();
        let t = Tensor::new(shape, r.f64s(len)?).map_err(|e| PipelineError::Corrupt(e.to_string()))?;
        params.insert(name, t);
    }
    let optimizer = match r.bytes::<1>()? {
        [0] => None,
        [1] => {
            let step = r.u64()?;
            let config = AdamConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut moments = BTreeMap::new();
            for _ in 0..r.u32()? {
                let name = r.string()?;
                let n = r.u64()? as usize;
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                moments.insert(name, Moments { m, v });
            }
            Some(OptimizerState { config, step, moments })
        }
        [other] => return Err(PipelineError::Corrupt(format!("optimizer flag {other}"))),
    };
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest)? != 0 {
        return Err(PipelineError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        architecture,
        run,
        step,
        params,
        optimizer,
    })
}

/// Element-wise mean of the parameters. Values are summed in sorted order
/// as offsets from their minimum, so the result ignores input order and
/// averaging identical checkpoints returns them unchanged. Optimizer state
/// is dropped; the run text and step come from the last input.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint, PipelineError> {
    let first = ckpts.first().ok_or(PipelineError::NothingToAverage)?;
    for c in &ckpts[1..] {
        if c.architecture != first.architecture {
            return Err(PipelineError::FingerprintMismatch {
                expected: first.fingerprint(),
                found: c.fingerprint(),
            });
        }
    }
    let sets: Vec<BTreeSet<&str>> = ckpts.iter().map(|c| c.params.names().collect()).collect();
    let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
    let diff: Vec<String> = union
        .iter()
        .filter(|n| !sets.iter().all(|s| s.contains(*n)))
        .map(|n| n.to_string())
        .collect();
    if !diff.is_empty() {
        return Err(PipelineError::NameMismatch(diff));
    }
    let k = ckpts.len() as f64;
    let mut params = ParamStore::new();
    let mut column = Vec::with_capacity(ckpts.len());
    for (name, t) in first.params.iter() {
        let tensors: Vec<&Tensor> = ckpts.iter().map(|c| c.params.get(name).expect("same names")).collect();
        if tensors.iter().any(|x| x.shape() != t.shape()) {
            return Err(PipelineError::ShapeMismatch(name.to_string()));
        }
        let data = (0..t.len())
            .map(|i| {
                column.clear();
                column.extend(tensors.iter().map(|x| x.data()[i]));
                column.sort_by(f64::total_cmp);
                let lo = column[0];
                lo + column.iter().map(|x| x - lo).sum::<f64>() / k
            })
            .collect();
        params.insert(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    let last = ckpts.last().expect("non-empty");
    Ok(Checkpoint {
        architecture: first.architecture.clone(),
        run: last.run.clone(),
        step: last.step,
        params,
        optimizer: None,
    })
}
