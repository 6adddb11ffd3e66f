//! The `.ldc` stream container.
//!
//! All multi-byte fields are little-endian.
//!
//! | offset    | size | field                                         |
//! |-----------|------|-----------------------------------------------|
//! | 0         | 4    | magic `LDC1`                                  |
//! | 4         | 1    | version (1)                                   |
//! | 5         | 1    | flags: bit 0 context model, bit 1 rescaling   |
//! | 6         | 4    | image height H                                |
//! | 10        | 4    | image width W                                 |
//! | 14        | 1    | latent channels C                             |
//! | 15        | 1    | downsampling factor f                         |
//! | 16        | 1    | schedule kind                                 |
//! | 17        | 2    | T_max                                         |
//! | 19        | 8    | beta_start (f64)                              |
//! | 27        | 8    | beta_end (f64)                                |
//! | 35        | 2    | timestep t                                    |
//! | 37        | 1    | lambda index (`0xFF` = not a trained value)   |
//! | 38        | 2    | symbol bound K                                |
//! | 40        | 4    | model id                                      |
//! | 44        | 8C   | C pairs (log_scale f32, offset f32)           |
//! | 44 + 8C   | 4    | hyper payload length                          |
//! | 48 + 8C   | 4    | main payload length                           |
//! | 52 + 8C   | 4    | CRC-32 of hyper payload followed by main      |
//! | 56 + 8C   |      | hyper payload, then main payload              |

use crate::error::{Error, Result};
use crate::quantization::QuantParams;
use crate::schedule::{ScheduleKind, ScheduleParams};

pub const MAGIC: [u8; 4] = *b"LDC1";
pub const VERSION: u8 = 1;
pub const FILE_EXTENSION: &str = "ldc";

pub const FLAG_CONTEXT: u8 = 1;

/// `lambda_index` value for a weight outside the trained set.
pub const CUSTOM_LAMBDA: u8 = 0xFF;

const FIXED_HEADER: usize = 44;
const LENGTHS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub flags: u8,
    pub height: u32,
    pub width: u32,
    pub channels: u8,
    pub factor: u8,
    pub schedule: ScheduleParams,
    pub timestep: u16,
    pub lambda_index: u8,
    pub symbol_bound: u16,
    /// Identifies the weights the stream was produced with.
    pub model_id: u32,
    pub gamma: QuantParams,
}

impl StreamHeader {
    /// Serialized size including payload lengths and checksum.
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER + 8 * self.channels as usize + LENGTHS
    }

    pub fn context_model(&self) -> bool {
        self.flags & FLAG_CONTEXT != 0
    }

    /// Latent size `(h, w)` after padding to a multiple of `f`.
    pub fn latent_shape(&self) -> (usize, usize) {
        let f = self.factor as usize;
        ((self.height as usize).div_ceil(f), (self.width as usize).div_ceil(f))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBitstream {
    pub header: StreamHeader,
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

impl CompressedBitstream {
    pub fn len(&self) -> usize {
        self.header.encoded_len() + self.hyper.len() + self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Total stream bits per image pixel.
    pub fn bpp(&self) -> f64 {
        self.len() as f64 * 8.0 / (self.header.height as f64 * self.header.width as f64)
    }
}

fn payload_crc(hyper: &[u8], main: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(hyper);
    h.update(main);
    h.finalize()
}

fn validate(header: &StreamHeader) -> Result<()> {
    if header.height == 0 || header.width == 0 {
        return Err(Error::InvalidParameter("image dimensions must be positive".into()));
    }
    if header.channels == 0 || header.factor == 0 {
        return Err(Error::InvalidParameter("channels and factor must be positive".into()));
    }
    if header.gamma.channels() != header.channels as usize {
        return Err(Error::ShapeMismatch(format!(
            "{} quantization pairs for {} channels",
            header.gamma.channels(),
            header.channels
        )));
    }
    if header.schedule.t_max > u16::MAX as usize {
        return Err(Error::InvalidParameter("T_max exceeds 16 bits".into()));
    }
    Ok(())
}

pub fn serialize(stream: &CompressedBitstream) -> Result<Vec<u8>> {
    let h = &stream.header;
    validate(h)?;
    let hyper_len = u32::try_from(stream.hyper.len()).map_err(|_| Error::LengthOverrun("hyper payload".into()))?;
    let main_len = u32::try_from(stream.main.len()).map_err(|_| Error::LengthOverrun("main payload".into()))?;
    let mut out = Vec::with_capacity(stream.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(h.flags);
    out.extend_from_slice(&h.height.to_le_bytes());
    out.extend_from_slice(&h.width.to_le_bytes());
    out.push(h.channels);
    out.push(h.factor);
    out.push(h.schedule.kind.code());
    out.extend_from_slice(&(h.schedule.t_max as u16).to_le_bytes());
    out.extend_from_slice(&h.schedule.beta_start.to_le_bytes());
    out.extend_from_slice(&h.schedule.beta_end.to_le_bytes());
    out.extend_from_slice(&h.timestep.to_le_bytes());
    out.push(h.lambda_index);
    out.extend_from_slice(&h.symbol_bound.to_le_bytes());
    out.extend_from_slice(&h.model_id.to_le_bytes());
    for (s, b) in h.gamma.log_scale.iter().zip(&h.gamma.offset) {
        out.extend_from_slice(&s.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    out.extend_from_slice(&hyper_len.to_le_bytes());
    out.extend_from_slice(&main_len.to_le_bytes());
    out.extend_from_slice(&payload_crc(&stream.hyper, &stream.main).to_le_bytes());
    out.extend_from_slice(&stream.hyper);
    out.extend_from_slice(&stream.main);
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::LengthOverrun(format!("stream ends inside {what}")))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}

pub fn parse(bytes: &[u8]) -> Result<CompressedBitstream> {
    let mut r = Reader { data: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    r.pos = 4;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = r.u8("flags")?;
    let height = r.u32("height")?;
    let width = r.u32("width")?;
    let channels = r.u8("channels")?;
    let factor = r.u8("factor")?;
    let kind_code = r.u8("schedule kind")?;
    let kind = ScheduleKind::from_code(kind_code)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown schedule kind {kind_code}")))?;
    let t_max = r.u16("T_max")? as usize;
    let beta_start = r.f64("beta_start")?;
    let beta_end = r.f64("beta_end")?;
    let timestep = r.u16("timestep")?;
    let lambda_index = r.u8("lambda index")?;
    let symbol_bound = r.u16("symbol bound")?;
    let model_id = r.u32("model id")?;
    let mut log_scale = Vec::with_capacity(channels as usize);
    let mut offset = Vec::with_capacity(channels as usize);
    for _ in 0..channels {
        log_scale.push(r.f32("quantization parameters")?);
        offset.push(r.f32("quantization parameters")?);
    }
    let gamma = QuantParams::new(log_scale, offset)?;
    let hyper_len = r.u32("payload lengths")? as usize;
    let main_len = r.u32("payload lengths")? as usize;
    let crc = r.u32("checksum")?;
    let hyper = r.take(hyper_len, "hyper payload")?.to_vec();
    let main = r.take(main_len, "main payload")?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::LengthOverrun(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if payload_crc(&hyper, &main) != crc {
        return Err(Error::ChecksumMismatch);
    }
    let header = StreamHeader {
        flags,
        height,
        width,
        channels,
        factor,
        schedule: ScheduleParams {
            kind,
            t_max,
            beta_start,
            beta_end,
        },
        timestep,
        lambda_index,
        symbol_bound,
        model_id,
        gamma,
    };
    validate(&header)?;
    Ok(CompressedBitstream { header, hyper, main })
}
