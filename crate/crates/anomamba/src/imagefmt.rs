//! Minimal image codecs: binary PPM/PGM, and 8-bit non-interlaced PNG
//! (gray, gray+alpha, RGB, RGBA; alpha is dropped on decode). PNG output
//! uses stored deflate blocks, so files are large but valid everywhere.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pixels {
    Gray(Vec<u8>),
    Rgb(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Pixels,
}

impl Image {
    pub fn channels(&self) -> usize {
        match self.pixels {
            Pixels::Gray(_) => 1,
            Pixels::Rgb(_) => 3,
        }
    }

    /// Interleaved RGB bytes; gray replicates into all three channels.
    pub fn to_rgb(&self) -> Vec<u8> {
        match &self.pixels {
            Pixels::Rgb(d) => d.clone(),
            Pixels::Gray(d) => d.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// Single-channel bytes; RGB takes the first channel.
    pub fn to_gray(&self) -> Vec<u8> {
        match &self.pixels {
            Pixels::Gray(d) => d.clone(),
            Pixels::Rgb(d) => d.chunks_exact(3).map(|p| p[0]).collect(),
        }
    }
}

fn bad(m: impl Into<String>) -> Error {
    Error::Image(m.into())
}

/// Decodes a file by magic bytes: P5/P6 netpbm or PNG.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let img = match bytes.get(..2) {
        Some(b"P5") | Some(b"P6") => decode_pnm(&bytes),
        _ if bytes.starts_with(PNG_SIGNATURE) => decode_png(&bytes),
        _ => Err(bad("unrecognized format (want P5/P6 netpbm or PNG)")),
    };
    img.map_err(|e| bad(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- netpbm

fn pnm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while matches!(bytes.get(*pos), Some(c) if c.is_ascii_digit()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad("expected integer in netpbm header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("integer out of range in netpbm header"))
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let gray = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P6") => false,
        _ => return Err(bad("not a binary netpbm file")),
    };
    let mut pos = 2;
    let width = pnm_token(bytes, &mut pos)?;
    let height = pnm_token(bytes, &mut pos)?;
    let maxval = pnm_token(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("unsupported netpbm maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !matches!(bytes.get(pos), Some(c) if c.is_ascii_whitespace()) {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(if gray { 1 } else { 3 }))
        .ok_or_else(|| bad("image dimensions overflow"))?;
    let data = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated netpbm raster"))?;
    let pixels =
        if gray { Pixels::Gray(data.to_vec()) } else { Pixels::Rgb(data.to_vec()) };
    Ok(Image { width, height, pixels })
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn save_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(bad("pgm payload does not match dimensions"));
    }
    write_pnm(path, "P5", width, height, data)
}

pub fn save_ppm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height * 3 {
        return Err(bad("ppm payload does not match dimensions"));
    }
    write_pnm(path, "P6", width, height, data)
}

// ------------------------------------------------------------------- PNG

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = (crc >> 1) ^ (0xedb8_8320 & (crc & 1).wrapping_neg());
        }
    }
    !crc
}

fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for chunk in data.chunks(5552) {
        for &x in chunk {
            a += x as u32;
            b += a;
        }
        a %= 65521;
        b %= 65521;
    }
    (b << 16) | a
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(PNG_SIGNATURE) {
        return Err(bad("not a PNG file"));
    }
    let mut pos = PNG_SIGNATURE.len();
    let mut header: Option<(usize, usize, u8)> = None;
    let mut idat = Vec::new();
    loop {
        let len_bytes = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated chunk header"))?;
        let len = u32::from_be_bytes(len_bytes[..4].try_into().unwrap()) as usize;
        let kind = &len_bytes[4..8];
        let data =
            bytes.get(pos + 8..pos + 8 + len).ok_or_else(|| bad("truncated chunk data"))?;
        let stored_crc = bytes
            .get(pos + 8 + len..pos + 12 + len)
            .ok_or_else(|| bad("truncated chunk crc"))?;
        if crc32(&bytes[pos + 4..pos + 8 + len]) != u32::from_be_bytes(stored_crc.try_into().unwrap())
        {
            return Err(bad("chunk crc mismatch"));
        }
        pos += 12 + len;
        match kind {
            b"IHDR" => {
                if data.len() != 13 {
                    return Err(bad("bad IHDR length"));
                }
                let width = u32::from_be_bytes(data[0..4].try_into().unwrap()) as usize;
                let height = u32::from_be_bytes(data[4..8].try_into().unwrap()) as usize;
                let (depth, color, interlace) = (data[8], data[9], data[12]);
                if depth != 8 {
                    return Err(bad(format!("unsupported bit depth {depth} (only 8)")));
                }
                if interlace != 0 {
                    return Err(bad("interlaced PNG not supported"));
                }
                if !matches!(color, 0 | 2 | 4 | 6) {
                    return Err(bad(format!("unsupported color type {color}")));
                }
                if width == 0 || height == 0 {
                    return Err(bad("zero-sized PNG"));
                }
                header = Some((width, height, color));
            }
            b"IDAT" => idat.extend_from_slice(data),
            b"IEND" => break,
            _ => {} // ancillary chunks ignored
        }
    }
    let (width, height, color) = header.ok_or_else(|| bad("missing IHDR"))?;
    let channels = match color {
        0 => 1,
        2 => 3,
        4 => 2,
        _ => 4,
    };
    let raw = zlib_decompress(&idat)?;
    let stride = width * channels;
    if raw.len() != (stride + 1) * height {
        return Err(bad(format!(
            "decompressed length {} does not match {}x{} with {} channels",
            raw.len(),
            width,
            height,
            channels
        )));
    }
    let mut pix = vec![0u8; stride * height];
    for row in 0..height {
        let filter = raw[row * (stride + 1)];
        let line = &raw[row * (stride + 1) + 1..(row + 1) * (stride + 1)];
        let (cur, prev) = {
            let (head, tail) = pix.split_at_mut(row * stride);
            let prev = if row == 0 { &[][..] } else { &head[(row - 1) * stride..] };
            (&mut tail[..stride], prev)
        };
        unfilter_row(filter, channels, line, prev, cur)?;
    }
    let pixels = match color {
        0 => Pixels::Gray(pix),
        2 => Pixels::Rgb(pix),
        4 => Pixels::Gray(pix.chunks_exact(2).map(|p| p[0]).collect()),
        _ => Pixels::Rgb(pix.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
    };
    Ok(Image { width, height, pixels })
}

fn unfilter_row(
    filter: u8,
    bpp: usize,
    line: &[u8],
    prev: &[u8],
    cur: &mut [u8],
) -> Result<()> {
    let up = |i: usize| if prev.is_empty() { 0 } else { prev[i] };
    match filter {
        0 => cur.copy_from_slice(line),
        1 => {
            for i in 0..line.len() {
                let left = if i >= bpp { cur[i - bpp] } else { 0 };
                cur[i] = line[i].wrapping_add(left);
            }
        }
        2 => {
            for i in 0..line.len() {
                cur[i] = line[i].wrapping_add(up(i));
            }
        }
        3 => {
            for i in 0..line.len() {
                let left = if i >= bpp { cur[i - bpp] as u16 } else { 0 };
                cur[i] = line[i].wrapping_add(((left + up(i) as u16) / 2) as u8);
            }
        }
        4 => {
            for i in 0..line.len() {
                let a = if i >= bpp { cur[i - bpp] } else { 0 };
                let b = up(i);
                let c = if i >= bpp { up(i - bpp) } else { 0 };
                cur[i] = line[i].wrapping_add(paeth(a, b, c));
            }
        }
        other => return Err(bad(format!("unknown filter type {other}"))),
    }
    Ok(())
}

fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let (ai, bi, ci) = (a as i16, b as i16, c as i16);
    let p = ai + bi - ci;
    let (pa, pb, pc) = ((p - ai).abs(), (p - bi).abs(), (p - ci).abs());
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

// -------------------------------------------------------------- inflate

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    bitbuf: u32,
    bitcnt: u32,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        BitReader { data, pos: 0, bitbuf: 0, bitcnt: 0 }
    }

    fn bit(&mut self) -> Result<u32> {
        if self.bitcnt == 0 {
            self.bitbuf =
                *self.data.get(self.pos).ok_or_else(|| bad("deflate stream truncated"))? as u32;
            self.pos += 1;
            self.bitcnt = 8;
        }
        let b = self.bitbuf & 1;
        self.bitbuf >>= 1;
        self.bitcnt -= 1;
        Ok(b)
    }

    fn bits(&mut self, n: u32) -> Result<u32> {
        let mut v = 0;
        for i in 0..n {
            v |= self.bit()? << i;
        }
        Ok(v)
    }

    fn align_and_take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.bitbuf = 0;
        self.bitcnt = 0;
        let s = self.data.get(self.pos..self.pos + n).ok_or_else(|| bad("stored block truncated"))?;
        self.pos += n;
        Ok(s)
    }
}

/// Canonical Huffman table decoded one bit at a time.
struct Huffman {
    counts: [u16; 16],
    symbols: Vec<u16>,
}

impl Huffman {
    fn new(lengths: &[u8]) -> Result<Huffman> {
        let mut counts = [0u16; 16];
        for &l in lengths {
            counts[l as usize] += 1;
        }
        counts[0] = 0;
        // reject over-subscribed code sets
        let mut left = 1i32;
        for l in 1..16 {
            left = (left << 1) - counts[l] as i32;
            if left < 0 {
                return Err(bad("over-subscribed huffman code"));
            }
        }
        let mut offsets = [0u16; 16];
        for l in 1..15 {
            offsets[l + 1] = offsets[l] + counts[l];
        }
        let mut symbols = vec![0u16; lengths.iter().filter(|&&l| l != 0).count()];
        for (sym, &l) in lengths.iter().enumerate() {
            if l != 0 {
                symbols[offsets[l as usize] as usize] = sym as u16;
                offsets[l as usize] += 1;
            }
        }
        Ok(Huffman { counts, symbols })
    }

    fn decode(&self, r: &mut BitReader) -> Result<u16> {
        let (mut code, mut first, mut index) = (0usize, 0usize, 0usize);
        for len in 1..16 {
            code |= r.bit()? as usize;
            let count = self.counts[len] as usize;
            if code < first + count {
                return Ok(self.symbols[index + code - first]);
            }
            index += count;
            first = (first + count) << 1;
            code <<= 1;
        }
        Err(bad("invalid huffman code"))
    }
}

const LENGTH_BASE: [u16; 29] = [
    3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31, 35, 43, 51, 59, 67, 83, 99, 115,
    131, 163, 195, 227, 258,
];
const LENGTH_EXTRA: [u32; 29] =
    [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0];
const DIST_BASE: [u16; 30] = [
    1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193, 257, 385, 513, 769, 1025, 1537,
    2049, 3073, 4097, 6145, 8193, 12289, 16385, 24577,
];
const DIST_EXTRA: [u32; 30] = [
    0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12,
    13, 13,
];
const CLEN_ORDER: [usize; 19] =
    [16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15];

fn zlib_decompress(data: &[u8]) -> Result<Vec<u8>> {
    if data.len() < 6 {
        return Err(bad("zlib stream too short"));
    }
    let (cmf, flg) = (data[0], data[1]);
    if cmf & 0x0f != 8 {
        return Err(bad("zlib: not deflate"));
    }
    if (cmf as u16 * 256 + flg as u16) % 31 != 0 {
        return Err(bad("zlib header check failed"));
    }
    if flg & 0x20 != 0 {
        return Err(bad("zlib preset dictionary not supported"));
    }
    let body = &data[2..data.len() - 4];
    let out = inflate(body)?;
    let expect = u32::from_be_bytes(data[data.len() - 4..].try_into().unwrap());
    if adler32(&out) != expect {
        return Err(bad("zlib adler32 mismatch"));
    }
    Ok(out)
}

fn inflate(data: &[u8]) -> Result<Vec<u8>> {
    let mut r = BitReader::new(data);
    let mut out = Vec::new();
    loop {
        let last = r.bit()? == 1;
        match r.bits(2)? {
            0 => {
                let head = r.align_and_take(4)?;
                let len = u16::from_le_bytes(head[..2].try_into().unwrap());
                let nlen = u16::from_le_bytes(head[2..].try_into().unwrap());
                if len != !nlen {
                    return Err(bad("stored block length check failed"));
                }
                out.extend_from_slice(r.align_and_take(len as usize)?);
            }
            1 => {
                let mut lit_lengths = [8u8; 288];
                lit_lengths[144..256].iter_mut().for_each(|l| *l = 9);
                lit_lengths[256..280].iter_mut().for_each(|l| *l = 7);
                let lit = Huffman::new(&lit_lengths)?;
                let dist = Huffman::new(&[5u8; 30])?;
                inflate_block(&mut r, &lit, &dist, &mut out)?;
            }
            2 => {
                let hlit = r.bits(5)? as usize + 257;
                let hdist = r.bits(5)? as usize + 1;
                let hclen = r.bits(4)? as usize + 4;
                let mut clen = [0u8; 19];
                for &slot in CLEN_ORDER.iter().take(hclen) {
                    clen[slot] = r.bits(3)? as u8;
                }
                let cl = Huffman::new(&clen)?;
                let mut lengths = vec![0u8; hlit + hdist];
                let mut i = 0;
                while i < lengths.len() {
                    match cl.decode(&mut r)? {
                        sym @ 0..=15 => {
                            lengths[i] = sym as u8;
                            i += 1;
                        }
                        16 => {
                            if i == 0 {
                                return Err(bad("length repeat with no previous code"));
                            }
                            let n = 3 + r.bits(2)? as usize;
                            let v = lengths[i - 1];
                            for _ in 0..n {
                                *lengths.get_mut(i).ok_or_else(|| bad("length overrun"))? = v;
                                i += 1;
                            }
                        }
                        sym => {
                            let n = if sym == 17 {
                                3 + r.bits(3)? as usize
                            } else {
                                11 + r.bits(7)? as usize
                            };
                            if i + n > lengths.len() {
                                return Err(bad("length overrun"));
                            }
                            i += n;
                        }
                    }
                }
                let lit = Huffman::new(&lengths[..hlit])?;
                let dist = Huffman::new(&lengths[hlit..])?;
                inflate_block(&mut r, &lit, &dist, &mut out)?;
            }
            _ => return Err(bad("reserved deflate block type")),
        }
        if last {
            return Ok(out);
        }
    }
}

fn inflate_block(
    r: &mut BitReader,
    lit: &Huffman,
    dist: &Huffman,
    out: &mut Vec<u8>,
) -> Result<()> {
    loop {
        match lit.decode(r)? {
            sym @ 0..=255 => out.push(sym as u8),
            256 => return Ok(()),
            sym => {
                let idx = sym as usize - 257;
                if idx >= 29 {
                    return Err(bad("invalid length symbol"));
                }
                let len = LENGTH_BASE[idx] as usize + r.bits(LENGTH_EXTRA[idx])? as usize;
                let dsym = dist.decode(r)? as usize;
                if dsym >= 30 {
                    return Err(bad("invalid distance symbol"));
                }
                let d = DIST_BASE[dsym] as usize + r.bits(DIST_EXTRA[dsym])? as usize;
                if d > out.len() {
                    return Err(bad("distance past start of output"));
                }
                let start = out.len() - d;
                // byte-at-a-time: ranges may overlap (run-length encoding)
                for k in 0..len {
                    let b = out[start + k];
                    out.push(b);
                }
            }
        }
    }
}

// ----------------------------------------------------------- PNG output

fn png_chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let crc_start = out.len();
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    let crc = crc32(&out[crc_start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

fn zlib_stored(raw: &[u8]) -> Vec<u8> {
    // deflate stored blocks: no compression, always valid
    let mut out = vec![0x78, 0x01];
    let mut chunks = raw.chunks(0xffff).peekable();
    if raw.is_empty() {
        out.extend_from_slice(&[0x01, 0x00, 0x00, 0xff, 0xff]);
    }
    while let Some(c) = chunks.next() {
        out.push(if chunks.peek().is_none() { 1 } else { 0 });
        out.extend_from_slice(&(c.len() as u16).to_le_bytes());
        out.extend_from_slice(&(!(c.len() as u16)).to_le_bytes());
        out.extend_from_slice(c);
    }
    out.extend_from_slice(&adler32(raw).to_be_bytes());
    out
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (channels, color, data) = match &img.pixels {
        Pixels::Gray(d) => (1usize, 0u8, d),
        Pixels::Rgb(d) => (3, 2, d),
    };
    if data.len() != img.width * img.height * channels {
        return Err(bad("payload does not match dimensions"));
    }
    let stride = img.width * channels;
    let mut raw = Vec::with_capacity((stride + 1) * img.height);
    for row in data.chunks_exact(stride.max(1)) {
        raw.push(0); // filter: none
        raw.extend_from_slice(row);
    }
    let mut out = PNG_SIGNATURE.to_vec();
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(img.width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(img.height as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, color, 0, 0, 0]);
    png_chunk(&mut out, b"IHDR", &ihdr);
    png_chunk(&mut out, b"IDAT", &zlib_stored(&raw));
    png_chunk(&mut out, b"IEND", &[]);
    Ok(out)
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_png(img)?).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(width: usize, height: usize) -> Image {
        let data = (0..width * height).map(|i| (i * 37 % 256) as u8).collect();
        Image { width, height, pixels: Pixels::Gray(data) }
    }

    fn rgb_image(width: usize, height: usize) -> Image {
        let data = (0..width * height * 3).map(|i| (i * 101 % 256) as u8).collect();
        Image { width, height, pixels: Pixels::Rgb(data) }
    }

    #[test]
    fn crc32_and_adler32_known_vectors() {
        assert_eq!(crc32(b"123456789"), 0xcbf4_3926);
        assert_eq!(adler32(b"123456789"), 0x091e_01de);
        assert_eq!(adler32(b""), 1);
    }

    #[test]
    fn pnm_round_trip_is_bitwise() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let img = gray_image(7, 5);
        let p = dir.join("g.pgm");
        save_pgm(&p, 7, 5, img.to_gray().as_slice()).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
        let img = rgb_image(4, 6);
        let p = dir.join("c.ppm");
        save_ppm(&p, 4, 6, img.to_rgb().as_slice()).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let mut bytes = b"P5 # comment\n# another\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.to_gray(), vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn pnm_rejects_wide_maxval_and_truncation() {
        assert!(decode_pnm(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").is_err());
        assert!(decode_pnm(b"P5\n4 4\n255\n\0\0").is_err());
    }

    #[test]
    fn png_round_trip_gray_and_rgb() {
        for img in [gray_image(13, 9), rgb_image(16, 1), gray_image(1, 17), rgb_image(2, 2)] {
            let encoded = encode_png(&img).unwrap();
            assert_eq!(decode_png(&encoded).unwrap(), img);
        }
    }

    #[test]
    fn png_rejects_unsupported_headers() {
        let img = gray_image(4, 4);
        let mut encoded = encode_png(&img).unwrap();
        // IHDR data starts at offset 16; depth byte at +8, interlace at +12
        let depth16 = {
            let mut e = encoded.clone();
            e[16 + 8] = 16;
            patch_ihdr_crc(&mut e);
            e
        };
        assert!(decode_png(&depth16).unwrap_err().to_string().contains("bit depth"));
        let palette = {
            let mut e = encoded.clone();
            e[16 + 9] = 3;
            patch_ihdr_crc(&mut e);
            e
        };
        assert!(decode_png(&palette).unwrap_err().to_string().contains("color type"));
        let interlaced = {
            let mut e = encoded.clone();
            e[16 + 12] = 1;
            patch_ihdr_crc(&mut e);
            e
        };
        assert!(decode_png(&interlaced).unwrap_err().to_string().contains("interlaced"));
        // flip one payload byte without fixing the crc
        encoded[16] ^= 1;
        assert!(decode_png(&encoded).unwrap_err().to_string().contains("crc"));
    }

    fn patch_ihdr_crc(e: &mut [u8]) {
        let crc = crc32(&e[12..12 + 17]);
        e[29..33].copy_from_slice(&crc.to_be_bytes());
    }

    #[test]
    fn stored_zlib_round_trip() {
        for n in [0usize, 1, 100, 0xffff, 0x10000, 0x18001] {
            let raw: Vec<u8> = (0..n).map(|i| (i % 251) as u8).collect();
            assert_eq!(zlib_decompress(&zlib_stored(&raw)).unwrap(), raw);
        }
    }

    #[test]
    fn all_filter_types_unfilter_correctly() {
        // craft a 3x3 gray PNG with one row per filter type against a
        // hand-computed expectation
        let width = 3usize;
        let raw = vec![
            0, 10, 20, 30, // none
            1, 5, 5, 5, // sub: running sum
            2, 1, 1, 1, // up: previous row + 1
        ];
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for row in 0..3 {
            let filter = raw[row * (width + 1)];
            let line = raw[row * (width + 1) + 1..(row + 1) * (width + 1)].to_vec();
            let prev = if row == 0 { vec![] } else { rows[row - 1].clone() };
            let mut cur = vec![0u8; width];
            unfilter_row(filter, 1, &line, &prev, &mut cur).unwrap();
            rows.push(cur);
        }
        assert_eq!(rows[0], vec![10, 20, 30]);
        assert_eq!(rows[1], vec![5, 10, 15]);
        assert_eq!(rows[2], vec![6, 11, 16]);
        // average and paeth are exercised through the decoder in the
        // format oracle tests against a reference encoder
    }
}
