//! Binary dataset file.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic          8 bytes   "SCLDSET\0"
//! version        u32       FORMAT_VERSION
//! regime         u8        0 = single, 1 = multi
//! seed           u64
//! image_side     u32
//! channels       u32
//! caption_len    u32
//! token_vocab    u32
//! label_count    u32
//!   per label:   u32 byte length, UTF-8 name
//! n_train        u64
//! n_test         u64
//! records        (n_train + n_test) ×
//!   split        u8        0 = train, 1 = test
//!   n_labels     u32
//!   labels       u32 × n_labels
//!   tokens       u32 × caption_len
//!   pixels       f64 × image_side² · channels
//! crc32          u32       over every preceding byte
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{DataError, Dataset, DatasetManifest, LabelSet, LabeledExample, Regime, Split};
use crate::models::TextInput;

pub const MAGIC: &[u8; 8] = b"SCLDSET\0";
pub const FORMAT_VERSION: u32 = 1;

struct CrcWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct CrcReader<R> {
    inner: R,
    hasher: crc32fast::Hasher,
}

impl<R: Read> CrcReader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &'static str) -> Result<(), DataError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DataError::Truncated { what },
            _ => DataError::Io(e),
        })?;
        self.hasher.update(buf);
        Ok(())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DataError> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DataError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, DataError> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    dataset.validate()?;
    let file = File::create(path)?;
    let mut w = CrcWriter {
        inner: BufWriter::new(file),
        hasher: crc32fast::Hasher::new(),
    };
    let m = &dataset.manifest;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[match m.regime {
        Regime::Single => 0,
        Regime::Multi => 1,
    }])?;
    w.write_all(&m.seed.to_le_bytes())?;
    for v in [m.image_side, m.channels, m.caption_len, m.token_vocab] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(m.label_names.len() as u32).to_le_bytes())?;
    for name in &m.label_names {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    w.write_all(&m.n_train.to_le_bytes())?;
    w.write_all(&m.n_test.to_le_bytes())?;
    for ex in &dataset.examples {
        w.write_all(&[match ex.split {
            Split::Train => 0,
            Split::Test => 1,
        }])?;
        w.write_all(&(ex.labels.len() as u32).to_le_bytes())?;
        for l in ex.labels.iter() {
            w.write_all(&l.to_le_bytes())?;
        }
        for &t in ex.caption.tokens() {
            w.write_all(&t.to_le_bytes())?;
        }
        for p in &ex.image {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    let crc = w.hasher.clone().finalize();
    let mut inner = w.inner;
    inner.write_all(&crc.to_le_bytes())?;
    inner.flush()?;
    Ok(())
}

/// Reads and validates a whole dataset file.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let reader = DatasetReader::open(path)?;
    let manifest = reader.manifest().clone();
    let examples = reader.collect::<Result<Vec<_>, _>>()?;
    let dataset = Dataset { manifest, examples };
    dataset.validate()?;
    Ok(dataset)
}

/// Record-at-a-time reader. [`DatasetReader::open`] verifies the checksum
/// in a streaming pre-pass, so a corrupted file is rejected before any
/// record is handed out.
pub struct DatasetReader<R> {
    src: CrcReader<R>,
    manifest: DatasetManifest,
    remaining: u64,
    finished: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let mut file = File::open(path.as_ref())?;
        let len = file.metadata()?.len();
        if len == 0 {
            return Err(DataError::EmptyManifest);
        }
        check_preamble(&mut file)?;
        verify_checksum(&mut file, len)?;
        file.seek(SeekFrom::Start(0))?;
        Self::new(BufReader::new(file))
    }
}

fn check_preamble(file: &mut File) -> Result<(), DataError> {
    let mut head = [0u8; 12];
    file.read_exact(&mut head).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DataError::Truncated { what: "header" },
        _ => DataError::Io(e),
    })?;
    if &head[..8] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    file.seek(SeekFrom::Start(0))?;
    Ok(())
}

fn verify_checksum(file: &mut File, len: u64) -> Result<(), DataError> {
    if len < 4 {
        return Err(DataError::Truncated { what: "checksum" });
    }
    let mut hasher = crc32fast::Hasher::new();
    let mut body = BufReader::new(&mut *file).take(len - 4);
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = body.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let mut stored = [0u8; 4];
    file.seek(SeekFrom::Start(len - 4))?;
    file.read_exact(&mut stored)?;
    let stored = u32::from_le_bytes(stored);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(DataError::Checksum { stored, computed });
    }
    Ok(())
}

impl<R: Read> DatasetReader<R> {
    /// Parses the header from an arbitrary stream. The checksum is then
    /// only checked after the last record.
    pub fn new(inner: R) -> Result<Self, DataError> {
        let mut src = CrcReader {
            inner,
            hasher: crc32fast::Hasher::new(),
        };
        let mut magic = [0u8; 8];
        src.exact(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = src.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(DataError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let regime = match src.u8("regime")? {
            0 => Regime::Single,
            1 => Regime::Multi,
            other => return Err(DataError::Invalid(format!("unknown regime tag {other}"))),
        };
        let seed = src.u64("seed")?;
        let image_side = src.u32("image side")?;
        let channels = src.u32("channels")?;
        let caption_len = src.u32("caption length")?;
        let token_vocab = src.u32("token vocabulary")?;
        let label_count = src.u32("label count")?;
        if label_count > 1 << 16 || image_side > 1 << 12 || caption_len > 1 << 12 {
            return Err(DataError::Invalid("implausible manifest sizes".into()));
        }
        let mut label_names = Vec::with_capacity(label_count as usize);
        for _ in 0..label_count {
            let len = src.u32("label name length")?;
            if len > 1 << 12 {
                return Err(DataError::Invalid("implausible label name length".into()));
            }
            let mut bytes = vec![0u8; len as usize];
            src.exact(&mut bytes, "label name")?;
            label_names.push(
                String::from_utf8(bytes).map_err(|_| DataError::Invalid("label name is not UTF-8".into()))?,
            );
        }
        let n_train = src.u64("train count")?;
        let n_test = src.u64("test count")?;
        if n_train + n_test == 0 {
            return Err(DataError::EmptyManifest);
        }
        let manifest = DatasetManifest {
            regime,
            label_names,
            token_vocab,
            caption_len,
            image_side,
            channels,
            n_train,
            n_test,
            seed,
            version,
        };
        Ok(Self {
            src,
            remaining: n_train + n_test,
            manifest,
            finished: false,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn record(&mut self) -> Result<LabeledExample, DataError> {
        let src = &mut self.src;
        let split = match src.u8("record split")? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(DataError::Invalid(format!("unknown split tag {other}"))),
        };
        let n_labels = src.u32("label count")?;
        if n_labels as usize > self.manifest.label_names.len() {
            return Err(DataError::Invalid(format!("record claims {n_labels} labels")));
        }
        let mut labels = Vec::with_capacity(n_labels as usize);
        for _ in 0..n_labels {
            labels.push(src.u32("label id")?);
        }
        let mut tokens = Vec::with_capacity(self.manifest.caption_len as usize);
        for _ in 0..self.manifest.caption_len {
            tokens.push(src.u32("caption token")?);
        }
        let pixels = (self.manifest.image_side * self.manifest.image_side * self.manifest.channels) as usize;
        let mut raw = vec![0u8; pixels * 8];
        src.exact(&mut raw, "pixels")?;
        let image = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(LabeledExample {
            image,
            caption: TextInput::new(tokens, self.manifest.token_vocab)
                .map_err(|e| DataError::Invalid(e.to_string()))?,
            labels: LabelSet::new(labels)?,
            split,
        })
    }

    fn finish(&mut self) -> Result<(), DataError> {
        let computed = self.src.hasher.clone().finalize();
        let mut stored = [0u8; 4];
        self.src.inner.read_exact(&mut stored).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DataError::Truncated { what: "checksum" },
            _ => DataError::Io(e),
        })?;
        let stored = u32::from_le_bytes(stored);
        if stored != computed {
            return Err(DataError::Checksum { stored, computed });
        }
        let trailing = io::copy(&mut self.src.inner, &mut io::sink())?;
        if trailing > 0 {
            return Err(DataError::TrailingData(trailing));
        }
        Ok(())
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<LabeledExample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.remaining == 0 {
            self.finished = true;
            return match self.finish() {
                Ok(()) => None,
                Err(e) => Some(Err(e)),
            };
        }
        self.remaining -= 1;
        let rec = self.record();
        if rec.is_err() {
            self.finished = true;
        }
        Some(rec)
    }
}
