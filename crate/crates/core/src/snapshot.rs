//! Versioned binary container for checkpoints and state snapshots.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! "SAMSNAP\0"  u32 version  u32 section-count
//! per section: u16 name-len, name (utf-8), u8 kind, u64 element-count, payload
//! u64 FNV-1a hash of every preceding byte
//! ```
//!
//! Kinds: 0 = raw bytes, 1 = `f64`, 2 = `u64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::la::DenseMatrix;
use crate::memory::{MemoryConfig, MemoryState, Usage, UsageRing};

const MAGIC: &[u8; 8] = b"SAMSNAP\0";
pub const VERSION: u32 = 1;
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Bytes(Vec<u8>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    sections: Vec<(String, Section)>,
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Writer that hashes what passes through it.
struct Hashing<W> {
    inner: W,
    hash: Fnv,
}

impl<W: Write> Hashing<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.hash.update(bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }
}

struct Reading<R> {
    inner: R,
    hash: Fnv,
}

impl<R: Read> Reading<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        self.hash.update(&b);
        Ok(b)
    }

    /// Grows the buffer as bytes arrive, so a corrupt length cannot force
    /// a huge allocation up front.
    fn take_vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut v)?;
        if v.len() != n {
            return Err(Error::Format("truncated snapshot".into()));
        }
        self.hash.update(&v);
        Ok(v)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated snapshot".into())
    } else {
        Error::Io(e)
    }
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    /// Adds or replaces a section.
    pub fn put(&mut self, name: &str, section: Section) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some((_, s)) => *s = section,
            None => self.sections.push((name.to_string(), section)),
        }
    }

    pub fn put_bytes(&mut self, name: &str, v: Vec<u8>) {
        self.put(name, Section::Bytes(v));
    }

    pub fn put_f64(&mut self, name: &str, v: Vec<f64>) {
        self.put(name, Section::F64(v));
    }

    pub fn put_u64(&mut self, name: &str, v: Vec<u64>) {
        self.put(name, Section::U64(v));
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    fn missing(name: &str) -> Error {
        Error::Format(format!("missing or mistyped section `{name}`"))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Section::Bytes(v)) => Ok(v),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(Section::F64(v)) => Ok(v),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Section::U64(v)) => Ok(v),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Hashing {
            inner: out,
            hash: Fnv::new(),
        };
        w.put(MAGIC)?;
        w.put(&VERSION.to_le_bytes())?;
        w.put(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, s) in &self.sections {
            if name.len() > u16::MAX as usize {
                return Err(Error::Format("section name too long".into()));
            }
            w.put(&(name.len() as u16).to_le_bytes())?;
            w.put(name.as_bytes())?;
            match s {
                Section::Bytes(v) => {
                    w.put(&[0])?;
                    w.put(&(v.len() as u64).to_le_bytes())?;
                    w.put(v)?;
                }
                Section::F64(v) => {
                    w.put(&[1])?;
                    w.put(&(v.len() as u64).to_le_bytes())?;
                    let buf: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                    w.put(&buf)?;
                }
                Section::U64(v) => {
                    w.put(&[2])?;
                    w.put(&(v.len() as u64).to_le_bytes())?;
                    let buf: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                    w.put(&buf)?;
                }
            }
        }
        let h = w.hash.0;
        w.inner.write_all(&h.to_le_bytes())?;
        w.inner.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reading {
            inner: input,
            hash: Fnv::new(),
        };
        if &r.take::<8>()? != MAGIC {
            return Err(Error::Format("not a snapshot".into()));
        }
        let version = u32::from_le_bytes(r.take()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let count = u32::from_le_bytes(r.take()?);
        let mut snap = Snapshot::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take()?) as usize;
            let name = String::from_utf8(r.take_vec(len)?)
                .map_err(|_| Error::Format("section name is not utf-8".into()))?;
            let [kind] = r.take::<1>()?;
            let n = u64::from_le_bytes(r.take()?);
            if n > MAX_ELEMENTS {
                return Err(Error::Format(format!("section `{name}` too large")));
            }
            let n = n as usize;
            let section = match kind {
                0 => Section::Bytes(r.take_vec(n)?),
                1 => Section::F64(
                    r.take_vec(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                2 => Section::U64(
                    r.take_vec(n * 8)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                k => return Err(Error::Format(format!("unknown section kind {k}"))),
            };
            snap.sections.push((name, section));
        }
        let expect = r.hash.0;
        let mut tail = [0u8; 8];
        r.inner.read_exact(&mut tail).map_err(truncated)?;
        if u64::from_le_bytes(tail) != expect {
            return Err(Error::Format("snapshot checksum mismatch".into()));
        }
        Ok(snap)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

impl MemoryState {
    /// Stores config, rows, usage, ring order and step under `prefix`.
    pub fn write_snapshot(&self, snap: &mut Snapshot, prefix: &str) -> Result<()> {
        let cfg = serde_json::to_vec(self.config())
            .map_err(|e| Error::Format(format!("memory config: {e}")))?;
        snap.put_bytes(&format!("{prefix}.config"), cfg);
        snap.put_f64(&format!("{prefix}.rows"), self.memory().data().to_vec());
        snap.put_u64(&format!("{prefix}.step"), vec![self.step()]);
        match self.usage() {
            Usage::Discounted(u) => snap.put_f64(&format!("{prefix}.usage"), u.clone()),
            Usage::Lru { last_access, ring } => {
                snap.put_u64(&format!("{prefix}.usage"), last_access.clone());
                snap.put_u64(&format!("{prefix}.ring"), ring.iter().map(|s| s as u64).collect());
            }
        }
        Ok(())
    }

    /// Inverse of [`MemoryState::write_snapshot`]. The index is rebuilt from
    /// the rows, so approximate backends may differ in internal layout.
    pub fn read_snapshot(snap: &Snapshot, prefix: &str) -> Result<Self> {
        let config: MemoryConfig = serde_json::from_slice(snap.bytes(&format!("{prefix}.config"))?)
            .map_err(|e| Error::Format(format!("memory config: {e}")))?;
        let rows = snap.f64s(&format!("{prefix}.rows"))?.to_vec();
        let memory = DenseMatrix::from_vec(config.slots, config.word_size, rows)
            .map_err(|_| Error::Format("memory rows do not match config".into()))?;
        let step = *snap
            .u64s(&format!("{prefix}.step"))?
            .first()
            .ok_or_else(|| Error::Format("empty step section".into()))?;
        let usage = match snap.get(&format!("{prefix}.usage")) {
            Some(Section::F64(u)) => Usage::Discounted(u.clone()),
            Some(Section::U64(a)) => {
                let order: Vec<usize> = snap
                    .u64s(&format!("{prefix}.ring"))?
                    .iter()
                    .map(|&s| s as usize)
                    .collect();
                let ring = UsageRing::from_order(&order)
                    .ok_or_else(|| Error::Format("ring is not a permutation".into()))?;
                Usage::Lru {
                    last_access: a.clone(),
                    ring,
                }
            }
            _ => return Err(Snapshot::missing(&format!("{prefix}.usage"))),
        };
        MemoryState::from_parts(config, memory, usage, step)
    }
}
