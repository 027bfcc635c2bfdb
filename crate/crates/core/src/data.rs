//! Paired `(y_m, h_m)` datasets and their binary file format.
//!
//! File layout (all little endian):
//!
//! ```text
//! "XLMU" | version u32 | kind u8 | N, N1, N2, M, P, N_RF u32 | f_c, B, d f64
//! | split u8 | levels u32 | SNR f64 x levels | samples u64 | root seed u64
//! | config hash [u8; 32] | records
//! ```
//!
//! A record is one realization: `M` observation rows of `P·N_RF` complex
//! values followed by `M` channel rows of `N` complex values, each complex
//! value stored as two `f32`. Records are grouped by SNR level, the same
//! number per level, so a record's SNR follows from its index.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_paths, synthesize_channel, ArrayGeometry, ArrayKind, PathSampling};
use crate::error::{Error, Result};
use crate::measurement::{make_combiner, noise_power, observe_with_noise_power, Combiner};
use crate::rng::stream;
use crate::scalar::Real;
use crate::unrolled::SplitBatch;

pub const DATASET_MAGIC: &[u8; 4] = b"XLMU";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Split::ALL.get(c as usize).copied().ok_or_else(|| Error::Format(format!("unknown split code {c}")))
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub geometry: ArrayGeometry,
    pub pilots: usize,
    pub rf_chains: usize,
    pub snr_db: Vec<f64>,
    pub split: Split,
    /// Realizations in the file.
    pub samples: usize,
    pub root_seed: u64,
    pub config_hash: [u8; 32],
}

impl DatasetHeader {
    pub fn measurements(&self) -> usize {
        self.pilots * self.rf_chains
    }

    pub fn byte_len(&self) -> usize {
        4 + 4 + 1 + 6 * 4 + 3 * 8 + 1 + 4 + 8 * self.snr_db.len() + 8 + 8 + 32
    }

    pub fn record_len(&self) -> usize {
        self.geometry.subcarriers * (self.measurements() + self.geometry.antennas) * 8
    }

    pub fn per_level(&self) -> usize {
        self.samples / self.snr_db.len().max(1)
    }

    /// SNR of record `i`.
    pub fn snr_of(&self, i: usize) -> f64 {
        self.snr_db[(i / self.per_level().max(1)).min(self.snr_db.len() - 1)]
    }

    /// The shared combiner, regenerated from the root seed.
    pub fn combiner<T: Real>(&self) -> Result<Combiner<T>> {
        make_combiner(self.geometry.antennas, self.pilots, self.rf_chains, &mut stream(self.root_seed, "combiner", 0))
    }

    fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let g = &self.geometry;
        let (kind, n1, n2) = match g.kind {
            ArrayKind::Ula => (0u8, g.antennas, 1),
            ArrayKind::Upa { n1, n2 } => (1u8, n1, n2),
        };
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&[kind])?;
        for v in [g.antennas, n1, n2, g.subcarriers, self.pilots, self.rf_chains] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in [g.carrier, g.bandwidth, g.spacing] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.split.code()])?;
        w.write_all(&(self.snr_db.len() as u32).to_le_bytes())?;
        for s in &self.snr_db {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&(self.samples as u64).to_le_bytes())?;
        w.write_all(&self.root_seed.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        Ok(())
    }

    fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not an XLMU dataset".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let kind = read_u8(r)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let [antennas, n1, n2, subcarriers, pilots, rf_chains] = dims;
        let (carrier, bandwidth, spacing) = (read_f64(r)?, read_f64(r)?, read_f64(r)?);
        let kind = match kind {
            0 => ArrayKind::Ula,
            1 => ArrayKind::Upa { n1, n2 },
            k => return Err(Error::Format(format!("unknown geometry kind {k}"))),
        };
        let geometry = ArrayGeometry::new(kind, antennas, spacing, carrier, bandwidth, subcarriers)
            .map_err(|e| Error::Format(format!("dataset geometry: {e}")))?;
        let split = Split::from_code(read_u8(r)?)?;
        let levels = read_u32(r)? as usize;
        let snr_db = (0..levels).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let samples = read_u64(r)? as usize;
        let root_seed = read_u64(r)?;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        if levels == 0 || samples % levels != 0 {
            return Err(Error::Format(format!("{samples} records do not split evenly over {levels} SNR levels")));
        }
        Ok(DatasetHeader {
            geometry,
            pilots,
            rf_chains,
            snr_db,
            split,
            samples,
            root_seed,
            config_hash,
        })
    }
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// In-memory realizations. Row `(r, m)` of `h` is the channel of
/// realization `r` at subcarrier `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet<T> {
    pub antennas: usize,
    pub measurements: usize,
    pub subcarriers: usize,
    pub h: Vec<Complex<T>>,
    pub y: Vec<Complex<T>>,
    pub snr_db: Vec<f64>,
}

impl<T: Real> PairSet<T> {
    pub fn empty(antennas: usize, measurements: usize, subcarriers: usize) -> Self {
        PairSet {
            antennas,
            measurements,
            subcarriers,
            h: Vec::new(),
            y: Vec::new(),
            snr_db: Vec::new(),
        }
    }

    pub fn realizations(&self) -> usize {
        self.snr_db.len()
    }

    pub fn pairs(&self) -> usize {
        self.realizations() * self.subcarriers
    }

    pub fn h_row(&self, r: usize, m: usize) -> &[Complex<T>] {
        let n = self.antennas;
        &self.h[(r * self.subcarriers + m) * n..][..n]
    }

    pub fn y_row(&self, r: usize, m: usize) -> &[Complex<T>] {
        let p = self.measurements;
        &self.y[(r * self.subcarriers + m) * p..][..p]
    }

    pub fn push(&mut self, h: &[Complex<T>], y: &[Complex<T>], snr_db: f64) -> Result<()> {
        if h.len() != self.subcarriers * self.antennas || y.len() != self.subcarriers * self.measurements {
            return Err(Error::shape("realization", self.subcarriers * self.antennas, h.len()));
        }
        self.h.extend_from_slice(h);
        self.y.extend_from_slice(y);
        self.snr_db.push(snr_db);
        Ok(())
    }

    /// All subcarriers of the listed realizations, realization-major.
    pub fn batch(&self, realizations: &[usize]) -> Result<(SplitBatch<T>, SplitBatch<T>)> {
        let keys: Vec<(usize, usize)> = realizations.iter().flat_map(|&r| (0..self.subcarriers).map(move |m| (r, m))).collect();
        let y = SplitBatch::from_complex(self.measurements, keys.iter().map(|&(r, m)| self.y_row(r, m)))?;
        let h = SplitBatch::from_complex(self.antennas, keys.iter().map(|&(r, m)| self.h_row(r, m)))?;
        Ok((y, h))
    }

    /// Mean `‖h_m‖²` over all pairs.
    pub fn mean_energy(&self) -> f64 {
        self.h.iter().map(|z| z.norm_sqr().as_f64()).sum::<f64>() / self.pairs().max(1) as f64
    }
}

/// Draws one realization: channel rows then noisy observations.
pub fn realize<T: Real>(
    geom: &ArrayGeometry,
    sampling: &PathSampling,
    a: &Combiner<T>,
    snr_db: f64,
    root: u64,
    domain: &str,
    index: u64,
) -> Result<(Vec<Complex<T>>, Vec<Complex<T>>, T)> {
    let paths = sample_paths::<T, _>(geom, sampling, &mut stream(root, &format!("paths/{domain}"), index))?;
    let h = synthesize_channel(geom, &paths)?;
    let sigma2 = noise_power(&h, a, snr_db);
    let obs = observe_with_noise_power(&h, a, sigma2, &mut stream(root, &format!("noise/{domain}"), index))?;
    Ok((h.values, obs.y, sigma2))
}

/// Generates `per_level` realizations at every SNR level of `header`,
/// in parallel, each from its own RNG stream.
pub fn generate<T: Real>(header: &DatasetHeader, sampling: &PathSampling) -> Result<PairSet<T>> {
    header.geometry.validate()?;
    sampling.validate()?;
    let a = header.combiner::<T>()?;
    let domain = header.split.name();
    let records: Vec<_> = (0..header.samples)
        .into_par_iter()
        .map(|i| realize(&header.geometry, sampling, &a, header.snr_of(i), header.root_seed, domain, i as u64))
        .collect::<Result<_>>()?;
    let mut set = PairSet::empty(header.geometry.antennas, header.measurements(), header.geometry.subcarriers);
    for (i, (h, y, _)) in records.into_iter().enumerate() {
        set.push(&h, &y, header.snr_of(i))?;
    }
    Ok(set)
}

pub fn write_dataset<T: Real>(path: &Path, header: &DatasetHeader, set: &PairSet<T>) -> Result<()> {
    if set.realizations() != header.samples {
        return Err(Error::shape("dataset records", header.samples, set.realizations()));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    header.write(&mut w)?;
    let put = |w: &mut BufWriter<std::fs::File>, z: &Complex<T>| -> Result<()> {
        w.write_all(&(z.re.as_f64() as f32).to_le_bytes())?;
        w.write_all(&(z.im.as_f64() as f32).to_le_bytes())?;
        Ok(())
    };
    let (mp, mn) = (set.subcarriers * set.measurements, set.subcarriers * set.antennas);
    for r in 0..set.realizations() {
        for z in &set.y[r * mp..(r + 1) * mp] {
            put(&mut w, z)?;
        }
        for z in &set.h[r * mn..(r + 1) * mn] {
            put(&mut w, z)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    DatasetHeader::read(&mut BufReader::new(std::fs::File::open(path)?))
}

pub fn read_dataset<T: Real>(path: &Path) -> Result<(DatasetHeader, PairSet<T>)> {
    let file = std::fs::File::open(path)?;
    let size = file.metadata()?.len() as usize;
    let mut r = BufReader::new(file);
    let header = DatasetHeader::read(&mut r)?;
    let want = header.byte_len() + header.samples * header.record_len();
    if size != want {
        return Err(Error::Format(format!(
            "{}: expected {want} bytes for {} records, found {size}",
            path.display(),
            header.samples
        )));
    }
    let (m, p, n) = (header.geometry.subcarriers, header.measurements(), header.geometry.antennas);
    let mut set = PairSet::empty(n, p, m);
    let mut buf = vec![0u8; header.record_len()];
    let decode = |b: &[u8]| -> Vec<Complex<T>> {
        b.chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex::new(T::lit(re as f64), T::lit(im as f64))
            })
            .collect()
    };
    for i in 0..header.samples {
        r.read_exact(&mut buf)?;
        let (yb, hb) = buf.split_at(m * p * 8);
        set.push(&decode(hb), &decode(yb), header.snr_of(i))?;
    }
    Ok((header, set))
}
