//! Binary file formats. All integers and floats are little-endian.
//!
//! Histogram (`QFNLOSH\0`), 68-byte header:
//!
//! ```text
//! 0  magic[8]   8  version u32   12 nx u32       16 ny u32      20 nt u32
//! 24 pitch f64  32 origin_x f64  40 origin_y f64 48 bin_length f64
//! 56 falloff_k u32  60 dtype u32 (0 = f32, 1 = f64)  64 layout u32
//! 68 payload: layout 0 = [x][y][t], layout 1 = [t][x][y]
//! ```
//!
//! Events (`QFNLOSE\0`), 56-byte header then 16-byte records:
//!
//! ```text
//! 0  magic[8]   8  version u32   12 nx u32   16 ny u32
//! 20 pitch f64  28 origin_x f64  36 origin_y f64  44 falloff_k u32  48 event_count u64
//! record: pixel_i u32, pixel_j u32, tof_path f64
//! ```
//!
//! Complex field (`QFNLOSF\0`), 60-byte header, payload interleaved (re, im) row-major:
//!
//! ```text
//! 0  magic[8]   8  version u32   12 nx u32   16 ny u32
//! 20 pitch f64  28 origin_x f64  36 origin_y f64  44 s f64
//! 52 falloff_k u32 (0 when not applicable)  56 dtype u32
//! ```
//!
//! Reconstruction (`QFNLOSR\0`), 44-byte header (grid as in the field header),
//! then albedo f64[n], depth f64[n], valid u8[n].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex;

use crate::aggregate::BinSliceStream;
use crate::error::{Error, Result};
use crate::model::{
    from_c64, to_c64, AggregatedField, Falloff, ModulatedAlbedo, PhotonEvent, PhotonEventList, Real, Reconstruction,
    TransientHistogram, WallGrid,
};

pub const FORMAT_VERSION: u32 = 1;
pub const HISTOGRAM_MAGIC: [u8; 8] = *b"QFNLOSH\0";
pub const EVENT_MAGIC: [u8; 8] = *b"QFNLOSE\0";
pub const FIELD_MAGIC: [u8; 8] = *b"QFNLOSF\0";
pub const RECONSTRUCTION_MAGIC: [u8; 8] = *b"QFNLOSR\0";

pub const HISTOGRAM_HEADER_LEN: u64 = 68;
pub const EVENT_HEADER_LEN: u64 = 56;
pub const EVENT_RECORD_LEN: u64 = 16;
pub const FIELD_HEADER_LEN: u64 = 60;
pub const RECONSTRUCTION_HEADER_LEN: u64 = 44;

const STREAM_CHUNK: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            Dtype::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64,
            Dtype::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

/// Histogram payload ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// `[x][y][t]`, pixel-major.
    #[default]
    PixelMajor,
    /// `[t][x][y]`, time-major; required for streaming.
    TimeMajor,
}

impl Layout {
    pub fn code(self) -> u32 {
        match self {
            Layout::PixelMajor => 0,
            Layout::TimeMajor => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HistogramWriteOptions {
    pub dtype: Dtype,
    pub layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramFileHeader {
    pub grid: WallGrid,
    pub nt: usize,
    pub bin_length: f64,
    pub falloff: Falloff,
    pub dtype: Dtype,
    pub layout: Layout,
}

impl HistogramFileHeader {
    pub fn payload_bytes(&self) -> u64 {
        (self.grid.len() * self.nt * self.dtype.size()) as u64
    }
}

fn io_err(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> Error {
    let ctx = format!("{}: {what}", path.display());
    move |e| Error::io(ctx, e)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(io_err(path, "cannot create"))
}

fn file_len(path: &Path, file: &File) -> Result<u64> {
    Ok(file.metadata().map_err(io_err(path, "cannot stat"))?.len())
}

/// Little-endian header cursor that remembers offsets for error messages.
struct HeaderCursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        HeaderCursor { path, bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N]
            .try_into()
            .expect("header length checked");
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }

    fn magic(&mut self, expected: [u8; 8]) -> Result<()> {
        let found: [u8; 8] = self.take();
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                offset: 0,
                expected,
                found,
            });
        }
        let offset = self.offset();
        let version = self.u32();
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: self.path.to_path_buf(),
                offset,
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        Ok(())
    }

    fn bad(&self, offset: u64, field: &'static str, reason: impl Into<String>) -> Error {
        Error::Header {
            path: self.path.to_path_buf(),
            offset,
            field,
            reason: reason.into(),
        }
    }

    fn count(&mut self, field: &'static str) -> Result<usize> {
        let offset = self.offset();
        let v = self.u32();
        if v == 0 {
            return Err(self.bad(offset, field, "must be >= 1"));
        }
        Ok(v as usize)
    }

    /// nx, ny, pitch, origin_x, origin_y.
    fn grid(&mut self) -> Result<WallGrid> {
        let nx = self.count("nx")?;
        let ny = self.count("ny")?;
        let offset = self.offset();
        let pitch = self.f64();
        let ox = self.f64();
        let oy = self.f64();
        WallGrid::new(nx, ny, pitch, [ox, oy]).map_err(|e| self.bad(offset, "pitch/origin", e.to_string()))
    }

    fn falloff(&mut self) -> Result<Falloff> {
        let offset = self.offset();
        let k = self.u32();
        Falloff::from_exponent(k).map_err(|_| self.bad(offset, "falloff_k", format!("must be 2 or 4, got {k}")))
    }

    fn dtype(&mut self) -> Result<Dtype> {
        let offset = self.offset();
        let code = self.u32();
        Dtype::from_code(code).ok_or_else(|| Error::UnknownDtype {
            path: self.path.to_path_buf(),
            offset,
            found: code,
        })
    }
}

fn read_header(path: &Path, file: &mut File, len: u64) -> Result<(Vec<u8>, u64)> {
    let actual = file_len(path, file)?;
    if actual < len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: 0,
            expected: len,
            actual,
        });
    }
    let mut buf = vec![0u8; len as usize];
    file.read_exact(&mut buf).map_err(io_err(path, "cannot read header"))?;
    Ok((buf, actual))
}

fn check_total(path: &Path, header_len: u64, payload: u64, actual: u64) -> Result<()> {
    let expected = header_len + payload;
    if actual < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: header_len,
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(())
}

fn open_with(path: &Path) -> Result<File> {
    File::open(path).map_err(io_err(path, "cannot open"))
}

fn put_grid(out: &mut Vec<u8>, grid: &WallGrid) {
    out.extend_from_slice(&(grid.nx() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.ny() as u32).to_le_bytes());
    out.extend_from_slice(&grid.pitch().to_le_bytes());
    out.extend_from_slice(&grid.origin()[0].to_le_bytes());
    out.extend_from_slice(&grid.origin()[1].to_le_bytes());
}

fn u32_dim(name: &'static str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::param(name, format!("{v} does not fit the u32 header field")))
}

fn histogram_header_bytes(h: &HistogramFileHeader) -> Result<Vec<u8>> {
    u32_dim("nx", h.grid.nx())?;
    u32_dim("ny", h.grid.ny())?;
    let nt = u32_dim("nt", h.nt)?;
    let mut out = Vec::with_capacity(HISTOGRAM_HEADER_LEN as usize);
    out.extend_from_slice(&HISTOGRAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.grid.nx() as u32).to_le_bytes());
    out.extend_from_slice(&(h.grid.ny() as u32).to_le_bytes());
    out.extend_from_slice(&nt.to_le_bytes());
    out.extend_from_slice(&h.grid.pitch().to_le_bytes());
    out.extend_from_slice(&h.grid.origin()[0].to_le_bytes());
    out.extend_from_slice(&h.grid.origin()[1].to_le_bytes());
    out.extend_from_slice(&h.bin_length.to_le_bytes());
    out.extend_from_slice(&(h.falloff.exponent() as u32).to_le_bytes());
    out.extend_from_slice(&h.dtype.code().to_le_bytes());
    out.extend_from_slice(&h.layout.code().to_le_bytes());
    debug_assert_eq!(out.len() as u64, HISTOGRAM_HEADER_LEN);
    Ok(out)
}

/// Writes a histogram with the requested dtype and payload layout.
pub fn write_histogram_with(path: &Path, hist: &TransientHistogram, opts: HistogramWriteOptions) -> Result<()> {
    let header = HistogramFileHeader {
        grid: *hist.grid(),
        nt: hist.nt(),
        bin_length: hist.bin_length(),
        falloff: hist.falloff(),
        dtype: opts.dtype,
        layout: opts.layout,
    };
    let mut w = create(path)?;
    let err = io_err(path, "write failed");
    let mut buf = histogram_header_bytes(&header)?;
    let nt = hist.nt();
    let data = hist.data();
    match opts.layout {
        Layout::PixelMajor => {
            for chunk in data.chunks(STREAM_CHUNK) {
                for &v in chunk {
                    opts.dtype.encode(v, &mut buf);
                }
                w.write_all(&buf).map_err(io_err(path, "write failed"))?;
                buf.clear();
            }
        }
        Layout::TimeMajor => {
            for n in 0..nt {
                for &v in data.iter().skip(n).step_by(nt) {
                    opts.dtype.encode(v, &mut buf);
                }
                w.write_all(&buf).map_err(io_err(path, "write failed"))?;
                buf.clear();
            }
        }
    }
    w.write_all(&buf).map_err(io_err(path, "write failed"))?;
    w.flush().map_err(err)
}

/// Writes `[x][y][t]` f64, the default format.
pub fn write_histogram(path: &Path, hist: &TransientHistogram) -> Result<()> {
    write_histogram_with(path, hist, HistogramWriteOptions::default())
}

fn parse_histogram_header(path: &Path, bytes: &[u8]) -> Result<HistogramFileHeader> {
    let mut c = HeaderCursor::new(path, bytes);
    c.magic(HISTOGRAM_MAGIC)?;
    let nx = c.count("nx")?;
    let ny = c.count("ny")?;
    let nt = c.count("nt")?;
    let goff = c.offset();
    let pitch = c.f64();
    let ox = c.f64();
    let oy = c.f64();
    let grid = WallGrid::new(nx, ny, pitch, [ox, oy]).map_err(|e| c.bad(goff, "pitch/origin", e.to_string()))?;
    let boff = c.offset();
    let bin_length = c.f64();
    if !(bin_length.is_finite() && bin_length > 0.0) {
        return Err(c.bad(boff, "bin_length", format!("must be > 0, got {bin_length}")));
    }
    let falloff = c.falloff()?;
    let dtype = c.dtype()?;
    let loff = c.offset();
    let layout = match c.u32() {
        0 => Layout::PixelMajor,
        1 => Layout::TimeMajor,
        other => return Err(c.bad(loff, "layout", format!("must be 0 or 1, got {other}"))),
    };
    Ok(HistogramFileHeader {
        grid,
        nt,
        bin_length,
        falloff,
        dtype,
        layout,
    })
}

/// Reads and validates a histogram header against the file length.
pub fn read_histogram_header(path: &Path) -> Result<HistogramFileHeader> {
    let mut file = open_with(path)?;
    let (bytes, actual) = read_header(path, &mut file, HISTOGRAM_HEADER_LEN)?;
    let header = parse_histogram_header(path, &bytes)?;
    check_total(path, HISTOGRAM_HEADER_LEN, header.payload_bytes(), actual)?;
    Ok(header)
}

/// Reads a histogram in either layout into `[x][y][t]` memory order.
pub fn read_histogram(path: &Path) -> Result<TransientHistogram> {
    let mut file = open_with(path)?;
    let (bytes, actual) = read_header(path, &mut file, HISTOGRAM_HEADER_LEN)?;
    let h = parse_histogram_header(path, &bytes)?;
    check_total(path, HISTOGRAM_HEADER_LEN, h.payload_bytes(), actual)?;
    let mut raw = Vec::with_capacity(h.payload_bytes() as usize);
    BufReader::new(file)
        .read_to_end(&mut raw)
        .map_err(io_err(path, "cannot read payload"))?;
    let size = h.dtype.size();
    let values = raw.chunks_exact(size).map(|b| h.dtype.decode(b));
    let data = match h.layout {
        Layout::PixelMajor => values.collect(),
        Layout::TimeMajor => {
            let (np, nt) = (h.grid.len(), h.nt);
            let mut data = vec![0.0; np * nt];
            for (idx, v) in values.enumerate() {
                let (n, p) = (idx / np, idx % np);
                data[p * nt + n] = v;
            }
            data
        }
    };
    TransientHistogram::new(h.grid, h.nt, h.bin_length, h.falloff, data)
}

/// Rewrites a histogram file in time-major order so it can be streamed.
/// The dtype is preserved. The source is loaded in full.
pub fn transpose_histogram_file(src: &Path, dst: &Path) -> Result<()> {
    let header = read_histogram_header(src)?;
    let hist = read_histogram(src)?;
    write_histogram_with(
        dst,
        &hist,
        HistogramWriteOptions {
            dtype: header.dtype,
            layout: Layout::TimeMajor,
        },
    )
}

/// Streams time-bin slices from a time-major histogram file.
#[derive(Debug)]
pub struct FileBinStream {
    path: PathBuf,
    header: HistogramFileHeader,
    reader: BufReader<File>,
    chunk: Vec<u8>,
    next: usize,
}

impl FileBinStream {
    pub fn header(&self) -> &HistogramFileHeader {
        &self.header
    }
}

/// Opens a layout-1 histogram for slice-by-slice reading.
pub fn open_bin_stream(path: &Path) -> Result<FileBinStream> {
    let mut file = open_with(path)?;
    let (bytes, actual) = read_header(path, &mut file, HISTOGRAM_HEADER_LEN)?;
    let header = parse_histogram_header(path, &bytes)?;
    check_total(path, HISTOGRAM_HEADER_LEN, header.payload_bytes(), actual)?;
    if header.layout != Layout::TimeMajor {
        return Err(Error::NotStreamable {
            path: path.to_path_buf(),
        });
    }
    let chunk_values = STREAM_CHUNK / header.dtype.size();
    Ok(FileBinStream {
        path: path.to_path_buf(),
        header,
        reader: BufReader::with_capacity(STREAM_CHUNK, file),
        chunk: vec![0u8; chunk_values * header.dtype.size()],
        next: 0,
    })
}

impl BinSliceStream for FileBinStream {
    fn grid(&self) -> &WallGrid {
        &self.header.grid
    }

    fn nt(&self) -> usize {
        self.header.nt
    }

    fn bin_length(&self) -> f64 {
        self.header.bin_length
    }

    fn falloff(&self) -> Falloff {
        self.header.falloff
    }

    fn next_slice(&mut self, slice: &mut Vec<f64>) -> Result<bool> {
        if self.next >= self.header.nt {
            return Ok(false);
        }
        let size = self.header.dtype.size();
        let np = self.header.grid.len();
        slice.clear();
        let mut remaining = np;
        while remaining > 0 {
            let take = remaining.min(self.chunk.len() / size);
            let bytes = &mut self.chunk[..take * size];
            self.reader
                .read_exact(bytes)
                .map_err(|e| Error::Stream(format!("{}: reading slice {}: {e}", self.path.display(), self.next)))?;
            for b in bytes.chunks_exact(size) {
                let v = self.header.dtype.decode(b);
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Data(format!(
                        "{}: slice {} holds invalid value {v}",
                        self.path.display(),
                        self.next
                    )));
                }
                slice.push(v);
            }
            remaining -= take;
        }
        self.next += 1;
        Ok(true)
    }

    fn buffer_bytes(&self) -> usize {
        self.reader.capacity() + self.chunk.len()
    }
}

fn event_header_bytes(grid: &WallGrid, falloff: Falloff, count: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVENT_HEADER_LEN as usize);
    out.extend_from_slice(&EVENT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_grid(&mut out, grid);
    out.extend_from_slice(&(falloff.exponent() as u32).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    debug_assert_eq!(out.len() as u64, EVENT_HEADER_LEN);
    out
}

fn event_record(ev: &PhotonEvent) -> [u8; 16] {
    let mut rec = [0u8; 16];
    rec[..4].copy_from_slice(&ev.pixel.0.to_le_bytes());
    rec[4..8].copy_from_slice(&ev.pixel.1.to_le_bytes());
    rec[8..].copy_from_slice(&ev.tof_path.to_le_bytes());
    rec
}

pub fn write_events(path: &Path, events: &PhotonEventList) -> Result<()> {
    write_event_stream(
        path,
        events.grid(),
        events.falloff(),
        events.len() as u64,
        events.events().iter().copied(),
    )
}

/// Writes `count` events from an iterator; errors if the iterator yields a different number.
pub fn write_event_stream(
    path: &Path,
    grid: &WallGrid,
    falloff: Falloff,
    count: u64,
    events: impl IntoIterator<Item = PhotonEvent>,
) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&event_header_bytes(grid, falloff, count))
        .map_err(io_err(path, "write failed"))?;
    let mut written = 0u64;
    for (idx, ev) in events.into_iter().enumerate() {
        crate::model::check_event(grid, idx, &ev)?;
        w.write_all(&event_record(&ev)).map_err(io_err(path, "write failed"))?;
        written += 1;
    }
    if written != count {
        return Err(Error::Data(format!(
            "{}: header promises {count} events, iterator produced {written}",
            path.display()
        )));
    }
    w.flush().map_err(io_err(path, "write failed"))
}

/// Sequential reader over an event file; validates length at open.
#[derive(Debug)]
pub struct EventFileReader {
    path: PathBuf,
    grid: WallGrid,
    falloff: Falloff,
    count: u64,
    read: u64,
    reader: BufReader<File>,
}

impl EventFileReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = open_with(path)?;
        let (bytes, actual) = read_header(path, &mut file, EVENT_HEADER_LEN)?;
        let mut c = HeaderCursor::new(path, &bytes);
        c.magic(EVENT_MAGIC)?;
        let grid = c.grid()?;
        let falloff = c.falloff()?;
        let count = c.u64();
        let payload = count.checked_mul(EVENT_RECORD_LEN).ok_or_else(|| Error::Header {
            path: path.to_path_buf(),
            offset: 48,
            field: "event_count",
            reason: format!("{count} overflows the file size"),
        })?;
        check_total(path, EVENT_HEADER_LEN, payload, actual)?;
        Ok(EventFileReader {
            path: path.to_path_buf(),
            grid,
            falloff,
            count,
            read: 0,
            reader: BufReader::with_capacity(STREAM_CHUNK, file),
        })
    }

    pub fn grid(&self) -> &WallGrid {
        &self.grid
    }

    pub fn falloff(&self) -> Falloff {
        self.falloff
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn buffer_bytes(&self) -> usize {
        self.reader.capacity()
    }

    fn next_event(&mut self) -> Result<PhotonEvent> {
        let mut rec = [0u8; 16];
        self.reader
            .read_exact(&mut rec)
            .map_err(|e| Error::io(format!("{}: event {}", self.path.display(), self.read), e))?;
        let ev = PhotonEvent {
            pixel: (
                u32::from_le_bytes(rec[..4].try_into().expect("4 bytes")),
                u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes")),
            ),
            tof_path: f64::from_le_bytes(rec[8..].try_into().expect("8 bytes")),
        };
        crate::model::check_event(&self.grid, self.read as usize, &ev)?;
        self.read += 1;
        Ok(ev)
    }
}

impl Iterator for EventFileReader {
    type Item = Result<PhotonEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.count {
            return None;
        }
        Some(self.next_event())
    }
}

pub fn read_events(path: &Path) -> Result<PhotonEventList> {
    let reader = EventFileReader::open(path)?;
    let (grid, falloff) = (*reader.grid(), reader.falloff());
    let events = reader.collect::<Result<Vec<_>>>()?;
    PhotonEventList::new(grid, falloff, events)
}

/// Contents of a complex field file.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub grid: WallGrid,
    pub s: f64,
    pub falloff: Option<Falloff>,
    pub dtype: Dtype,
    pub data: Vec<Complex<f64>>,
}

impl FieldFile {
    pub fn into_aggregated<T: Real>(self) -> Result<AggregatedField<T>> {
        let falloff = self
            .falloff
            .ok_or_else(|| Error::Data("field file has no falloff exponent; not an aggregated field".into()))?;
        AggregatedField::new(
            self.grid,
            self.s,
            falloff,
            self.data.into_iter().map(from_c64).collect(),
        )
    }

    pub fn into_modulated<T: Real>(self) -> Result<ModulatedAlbedo<T>> {
        ModulatedAlbedo::new(self.grid, self.s, self.data.into_iter().map(from_c64).collect())
    }
}

fn write_field_raw<T: Real>(
    path: &Path,
    grid: &WallGrid,
    s: f64,
    falloff: Option<Falloff>,
    data: &[Complex<T>],
) -> Result<()> {
    let dtype = if T::BYTES == 4 { Dtype::F32 } else { Dtype::F64 };
    let mut out = Vec::with_capacity(FIELD_HEADER_LEN as usize + data.len() * 2 * dtype.size());
    out.extend_from_slice(&FIELD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_grid(&mut out, grid);
    out.extend_from_slice(&s.to_le_bytes());
    out.extend_from_slice(&falloff.map_or(0u32, |f| f.exponent() as u32).to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    for z in data {
        let z = to_c64(*z);
        dtype.encode(z.re, &mut out);
        dtype.encode(z.im, &mut out);
    }
    let mut w = create(path)?;
    w.write_all(&out).map_err(io_err(path, "write failed"))?;
    w.flush().map_err(io_err(path, "write failed"))
}

/// Writes φ; dtype follows the field's storage type.
pub fn write_field<T: Real>(path: &Path, field: &AggregatedField<T>) -> Result<()> {
    write_field_raw(path, field.grid(), field.s(), Some(field.falloff()), field.data())
}

/// Writes ψ (falloff stored as 0).
pub fn write_modulated<T: Real>(path: &Path, field: &ModulatedAlbedo<T>) -> Result<()> {
    write_field_raw(path, field.grid(), field.s(), None, field.data())
}

pub fn read_field(path: &Path) -> Result<FieldFile> {
    let mut file = open_with(path)?;
    let (bytes, actual) = read_header(path, &mut file, FIELD_HEADER_LEN)?;
    let mut c = HeaderCursor::new(path, &bytes);
    c.magic(FIELD_MAGIC)?;
    let grid = c.grid()?;
    let soff = c.offset();
    let s = c.f64();
    if !(s.is_finite() && s > 0.0) {
        return Err(c.bad(soff, "s", format!("must be > 0, got {s}")));
    }
    let koff = c.offset();
    let falloff = match c.u32() {
        0 => None,
        k => Some(
            Falloff::from_exponent(k).map_err(|_| c.bad(koff, "falloff_k", format!("must be 0, 2 or 4, got {k}")))?,
        ),
    };
    let dtype = c.dtype()?;
    let payload = (grid.len() * 2 * dtype.size()) as u64;
    check_total(path, FIELD_HEADER_LEN, payload, actual)?;
    let mut raw = Vec::with_capacity(payload as usize);
    file.read_to_end(&mut raw)
        .map_err(io_err(path, "cannot read payload"))?;
    let size = dtype.size();
    let data = raw
        .chunks_exact(2 * size)
        .map(|b| Complex::new(dtype.decode(&b[..size]), dtype.decode(&b[size..])))
        .collect();
    Ok(FieldFile {
        grid,
        s,
        falloff,
        dtype,
        data,
    })
}

pub fn write_reconstruction(path: &Path, rec: &Reconstruction) -> Result<()> {
    let n = rec.grid.len();
    let mut out = Vec::with_capacity(RECONSTRUCTION_HEADER_LEN as usize + n * 17);
    out.extend_from_slice(&RECONSTRUCTION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_grid(&mut out, &rec.grid);
    for v in rec.albedo.iter().chain(&rec.depth) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(rec.valid.iter().map(|&b| b as u8));
    let mut w = create(path)?;
    w.write_all(&out).map_err(io_err(path, "write failed"))?;
    w.flush().map_err(io_err(path, "write failed"))
}

pub fn read_reconstruction(path: &Path) -> Result<Reconstruction> {
    let mut file = open_with(path)?;
    let (bytes, actual) = read_header(path, &mut file, RECONSTRUCTION_HEADER_LEN)?;
    let mut c = HeaderCursor::new(path, &bytes);
    c.magic(RECONSTRUCTION_MAGIC)?;
    let grid = c.grid()?;
    let n = grid.len();
    check_total(path, RECONSTRUCTION_HEADER_LEN, (n * 17) as u64, actual)?;
    let mut raw = Vec::with_capacity(n * 17);
    file.read_to_end(&mut raw)
        .map_err(io_err(path, "cannot read payload"))?;
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    let albedo = raw[..8 * n].chunks_exact(8).map(f).collect();
    let depth = raw[8 * n..16 * n].chunks_exact(8).map(f).collect();
    let valid = raw[16 * n..].iter().map(|&b| b != 0).collect();
    Reconstruction::new(grid, albedo, depth, valid)
}

/// Intensity scaling for image previews.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    Max,
    /// Values at or above the nearest-rank `p`-th percentile saturate.
    Percentile(f64),
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::Percentile(99.0)
    }
}

fn normalization_level(map: &[f64], norm: Normalization) -> Result<f64> {
    let finite: Vec<f64> = map.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Ok(0.0);
    }
    match norm {
        Normalization::Max => Ok(finite.iter().copied().fold(f64::MIN, f64::max)),
        Normalization::Percentile(p) => {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::param("percentile", format!("must lie in (0, 100], got {p}")));
            }
            let mut sorted = finite;
            sorted.sort_by(f64::total_cmp);
            let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
            Ok(sorted[rank.clamp(1, sorted.len()) - 1])
        }
    }
}

/// 16-bit binary PGM: width `nx`, height `ny`, row `j` holds pixels `(0..nx, j)`.
pub fn encode_pgm(map: &[f64], grid: &WallGrid, norm: Normalization) -> Result<Vec<u8>> {
    if map.len() != grid.len() {
        return Err(Error::Data("image map does not match grid".into()));
    }
    let level = normalization_level(map, norm)?;
    let mut out = format!("P5\n{} {}\n65535\n", grid.nx(), grid.ny()).into_bytes();
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let v = map[grid.index(i, j)];
            let q = if level > 0.0 && v.is_finite() {
                ((v / level).clamp(0.0, 1.0) * 65535.0).round() as u16
            } else {
                0
            };
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn write_image_pgm(path: &Path, map: &[f64], grid: &WallGrid, norm: Normalization) -> Result<()> {
    let bytes = encode_pgm(map, grid, norm)?;
    let mut w = create(path)?;
    w.write_all(&bytes).map_err(io_err(path, "write failed"))?;
    w.flush().map_err(io_err(path, "write failed"))
}
