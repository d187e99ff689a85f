use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::FrontendError;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AFSC";
const VERSION: u8 = 1;

/// Ground truth for one synthetic frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameLabel {
    Silence,
    Token(usize),
}

impl FrameLabel {
    pub fn is_silence(self) -> bool {
        self == FrameLabel::Silence
    }
}

/// One `(X, Y, Z)` training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: u64,
    /// Frames by feature dimension.
    pub x: Tensor,
    /// Transcript.
    pub y: Vec<usize>,
    /// Translation.
    pub z: Vec<usize>,
    pub labels: Option<Vec<FrameLabel>>,
}

impl CorpusRecord {
    pub fn frames(&self) -> usize {
        self.x.shape().first().copied().unwrap_or(0)
    }

    pub fn silence_frames(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().filter(|f| f.is_silence()).count())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// Token vocabulary size, special ids included.
    pub vocab_size: usize,
    pub dim: usize,
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fraction of labelled frames that are silence.
    pub fn silence_fraction(&self) -> Option<f64> {
        let mut total = 0;
        let mut silent = 0;
        for r in &self.records {
            silent += r.silence_frames()?;
            total += r.frames();
        }
        (total > 0).then(|| silent as f64 / total as f64)
    }
}

/// Layout, all little-endian: magic `AFSC`, version byte, vocab size (u32),
/// frame dimension (u32), record count (u64); then per record the id (u64),
/// frame count (u32), frames as f64, transcript and translation each as a
/// u32 length plus u32 ids, and a label flag byte followed, when set, by one
/// u32 per frame (0 for silence, otherwise the token id).
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), FrontendError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(corpus.vocab_size as u32).to_le_bytes())?;
    w.write_all(&(corpus.dim as u32).to_le_bytes())?;
    w.write_all(&(corpus.records.len() as u64).to_le_bytes())?;
    for r in &corpus.records {
        if r.frames() > 0 && r.x.cols() != corpus.dim {
            return Err(FrontendError::Corrupt(format!(
                "record {} has width {}, corpus width {}",
                r.id,
                r.x.cols(),
                corpus.dim
            )));
        }
        w.write_all(&r.id.to_le_bytes())?;
        w.write_all(&(r.frames() as u32).to_le_bytes())?;
        for v in r.x.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for seq in [&r.y, &r.z] {
            w.write_all(&(seq.len() as u32).to_le_bytes())?;
            for &t in seq.iter() {
                w.write_all(&(t as u32).to_le_bytes())?;
            }
        }
        match &r.labels {
            None => w.write_all(&[0])?,
            Some(labels) => {
                w.write_all(&[1])?;
                for l in labels {
                    let v = match l {
                        FrameLabel::Silence => 0u32,
                        FrameLabel::Token(t) => *t as u32,
                    };
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], FrontendError> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => FrontendError::Truncated,
            _ => FrontendError::Io(e),
        })?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8, FrontendError> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<usize, FrontendError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64, FrontendError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, FrontendError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn ids(&mut self) -> Result<Vec<usize>, FrontendError> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, FrontendError> {
    let mut r = Reader(BufReader::new(File::open(path.as_ref())?));
    if &r.bytes::<4>()? != MAGIC {
        return Err(FrontendError::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(FrontendError::UnsupportedVersion(version));
    }
    let vocab_size = r.u32()?;
    let dim = r.u32()?;
    let count = r.u64()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let id = r.u64()?;
        let frames = r.u32()?;
        let data = (0..frames * dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let x = Tensor::new(vec![frames, dim], data)?;
        let y = r.ids()?;
        let z = r.ids()?;
        let labels = match r.u8()? {
            0 => None,
            1 => Some(
                (0..frames)
                    .map(|_| {
                        r.u32().map(|v| match v {
                            0 => FrameLabel::Silence,
                            t => FrameLabel::Token(t),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            other => return Err(FrontendError::Corrupt(format!("label flag {other}"))),
        };
        if let Some(&t) = y.iter().chain(&z).find(|&&t| t >= vocab_size) {
            return Err(FrontendError::Corrupt(format!(
                "record {id}: token {t} outside vocabulary {vocab_size}"
            )));
        }
        records.push(CorpusRecord { id, x, y, z, labels });
    }
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest)? != 0 {
        return Err(FrontendError::Corrupt("trailing bytes".into()));
    }
    Ok(Corpus {
        vocab_size,
        dim,
        records,
    })
}

/// `corpus.afsc` -> `corpus.afsc.manifest`.
pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Human-readable summary: a header line, then one tab-separated line per
/// record.
pub fn write_manifest(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), FrontendError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "id\tframes\tdim\ty_len\tz_len\tsilence_frames\ty")?;
    for r in &corpus.records {
        let silence = r.silence_frames().map_or_else(|| "-".to_string(), |s| s.to_string());
        let y: Vec<String> = r.y.iter().map(ToString::to_string).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            r.frames(),
            corpus.dim,
            r.y.len(),
            r.z.len(),
            silence,
            y.join(" ")
        )?;
    }
    w.flush()?;
    Ok(())
}
