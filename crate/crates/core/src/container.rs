//! Binary container for covariance images and single planes.
//!
//! Layout (little-endian):
//!
//! | field   | type          |
//! |---------|---------------|
//! | magic   | `b"MULG"`     |
//! | version | `u16` (= 1)   |
//! | flags   | `u8`, bit 0: calibration sidecar present |
//! | width   | `u32`         |
//! | height  | `u32`         |
//! | dim     | `u8`          |
//! | looks   | `f64`         |
//! | payload | `D^2` planes of `width * height` `f64`: the `D` diagonal planes, then `(re, im)` plane pairs for the upper entries in superdiagonal order |
//! | sidecar | optional: `A` (`D^2 x D^2`, row-major), `b` (`D^2`), `Phi` (`D^2`) as `f64` |
//!
//! Single real planes (used by the external denoiser protocol) are stored
//! with `dim = 1` and `looks = 0`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::channelizer::ChannelBasis;
use crate::error::{Error, Result};
use crate::hermitian::HermStack;
use crate::image::{CovarianceImage, Plane};

pub const MAGIC: &[u8; 4] = b"MULG";
pub const VERSION: u16 = 1;
const FLAG_SIDECAR: u8 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 1 + 8;

/// Contents of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub image: CovarianceImage,
    pub looks: f64,
    pub basis: Option<ChannelBasis>,
}

impl Container {
    pub fn new(image: CovarianceImage, looks: f64) -> Self {
        Container {
            image,
            looks,
            basis: None,
        }
    }

    pub fn with_basis(mut self, basis: ChannelBasis) -> Self {
        self.basis = Some(basis);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let img = &self.image;
        let d = img.dim();
        if d == 0 || d > u8::MAX as usize {
            return Err(Error::Format(format!("dimension {d} cannot be stored")));
        }
        let (w, h) = (to_u32(img.width())?, to_u32(img.height())?);
        if let Some(b) = &self.basis {
            if b.dim() != d {
                return Err(Error::Format(format!(
                    "sidecar basis has D = {} for a D = {d} image",
                    b.dim()
                )));
            }
        }
        let n = img.len();
        let mut out = Vec::with_capacity(HEADER_LEN + d * d * n * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(if self.basis.is_some() {
            FLAG_SIDECAR
        } else {
            0
        });
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        out.push(d as u8);
        out.extend_from_slice(&self.looks.to_le_bytes());
        for plane in img.stack().planes() {
            for v in plane {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(b) = &self.basis {
            for v in b.a().iter().chain(b.b()).chain(b.phi()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic (not a MULG container)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let flags = r.take(1)?[0];
        if flags & !FLAG_SIDECAR != 0 {
            return Err(Error::Format(format!("unknown flags {flags:#04x}")));
        }
        let w = u32::from_le_bytes(r.array()?) as usize;
        let h = u32::from_le_bytes(r.array()?) as usize;
        let d = r.take(1)?[0] as usize;
        if d == 0 {
            return Err(Error::Format("dimension 0".into()));
        }
        let looks = f64::from_le_bytes(r.array()?);
        if !(looks >= 0.0 && looks.is_finite()) {
            return Err(Error::Format(format!("invalid number of looks {looks}")));
        }
        let n = w
            .checked_mul(h)
            .ok_or_else(|| Error::Format("image size overflows".into()))?;
        let payload = n
            .checked_mul(d * d * 8)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let nc = d * d;
        let sidecar = if flags & FLAG_SIDECAR != 0 {
            (nc * nc + 2 * nc) * 8
        } else {
            0
        };
        let expected = HEADER_LEN + payload + sidecar;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes for {w}x{h} D={d}, found {}",
                bytes.len()
            )));
        }
        let planes: Vec<Vec<f64>> = (0..nc).map(|_| r.f64s(n)).collect::<Result<_>>()?;
        let image = CovarianceImage::new(w, h, HermStack::from_planes(d, planes)?)?;
        let basis = if sidecar > 0 {
            let a = r.f64s(nc * nc)?;
            let b = r.f64s(nc)?;
            let phi = r.f64s(nc)?;
            Some(
                ChannelBasis::new(d, a, b, phi)
                    .map_err(|e| Error::Format(format!("sidecar: {e}")))?,
            )
        } else {
            None
        };
        Ok(Container {
            image,
            looks,
            basis,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("size {v} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Writes a single real plane (`dim = 1`, `looks = 0`).
pub fn write_plane(path: &Path, plane: &Plane) -> Result<()> {
    Container::new(CovarianceImage::from_intensity(plane), 0.0).write(path)
}

/// Reads a single real plane written by [`write_plane`] or any `dim = 1` container.
pub fn read_plane(path: &Path) -> Result<Plane> {
    let c = Container::read(path)?;
    if c.image.dim() != 1 {
        return Err(Error::Format(format!(
            "expected a single plane, found D = {}",
            c.image.dim()
        )));
    }
    Ok(c.image.plane(0))
}
