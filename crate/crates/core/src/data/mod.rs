//! Datasets, on-disk formats and run configuration.

mod config;
mod embedding_file;
mod synth;

pub use config::{
    DataConfig, DiagnosticsConfig, EvalConfig, RunConfig, ScoringConfig, Variant,
};
pub use embedding_file::{read_embeddings, write_embeddings, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use synth::{rotate90, rotmix_canonical, synth_dataset, SynthKind};

use std::io::{Read, Write};

use crate::error::{NsaError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"NSAD";
pub const DATASET_VERSION: u32 = 1;

/// `N×C×H×W` block of `u8` pixels with one class label per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: u16,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        [channels, height, width]: [usize; 3],
        class_count: u16,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(NsaError::config(format!(
                "images must be at least 8x8, got {height}x{width}"
            )));
        }
        if channels == 0 {
            return Err(NsaError::config("images need at least one channel"));
        }
        let per = channels * height * width;
        if pixels.len() != per * labels.len() {
            return Err(NsaError::dim(format!(
                "{} pixels for {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(NsaError::config(format!(
                "label {bad} not below class count {class_count}"
            )));
        }
        Ok(ImageDataset {
            name: name.into(),
            channels,
            height,
            width,
            class_count,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn indices_of_class(&self, class: u16) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// SHA-256 of the serialized form.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        format!("{:x}", Sha256::digest(&buf))
    }

    /// `NSAD` | version u32 | N u64 | C,H,W u16 | class_count u16 | pixels | labels u16, all LE.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let dim16 = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| NsaError::config(format!("{what} {v} exceeds u16")))
        };
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&dim16(self.channels, "channels")?.to_le_bytes())?;
        w.write_all(&dim16(self.height, "height")?.to_le_bytes())?;
        w.write_all(&dim16(self.width, "width")?.to_le_bytes())?;
        w.write_all(&self.class_count.to_le_bytes())?;
        w.write_all(&self.pixels)?;
        let mut labels = Vec::with_capacity(self.labels.len() * 2);
        for l in &self.labels {
            labels.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&labels)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, name: impl Into<String>) -> Result<Self> {
        let mut rd = ByteReader::new(r);
        let magic = rd.array::<4>("magic")?;
        if &magic != DATASET_MAGIC {
            return Err(NsaError::format(0, format!("bad magic {magic:?}, expected NSAD")));
        }
        let version = rd.u32("version")?;
        if version != DATASET_VERSION {
            return Err(NsaError::format(4, format!("unsupported version {version}")));
        }
        let n = rd.u64("image count")? as usize;
        let c = rd.u16("channels")? as usize;
        let h = rd.u16("height")? as usize;
        let w = rd.u16("width")? as usize;
        let classes = rd.u16("class count")?;
        let pixels = rd.bytes(n * c * h * w, "pixel payload")?;
        let raw = rd.bytes(n * 2, "labels")?;
        let labels = raw
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        ImageDataset::new(name, [c, h, w], classes, pixels, labels)
    }
}

/// Little-endian reader that reports the byte offset of truncation.
pub(crate) struct ByteReader<'a, R: Read> {
    inner: &'a mut R,
    pub offset: u64,
}

impl<'a, R: Read> ByteReader<'a, R> {
    pub fn new(inner: &'a mut R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(n.min(1 << 28));
        let got = self.inner.by_ref().take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(NsaError::format(
                self.offset + got as u64,
                format!("truncated {what}: expected {n} bytes, found {got}"),
            ));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let v = self.bytes(N, what)?;
        Ok(v.try_into().expect("length checked"))
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}
