use super::dct;
use super::tables::ZIGZAG;
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

fn err(msg: impl Into<String>) -> Error {
    Error::Jpeg(msg.into())
}

#[derive(Clone)]
struct HuffTable {
    maxcode: [i32; 18],
    valptr: [i32; 17],
    mincode: [i32; 17],
    values: Vec<u8>,
}

impl HuffTable {
    fn new(bits: &[u8; 16], values: Vec<u8>) -> Result<Self> {
        let total: usize = bits.iter().map(|&b| usize::from(b)).sum();
        if total != values.len() || total > 256 {
            return Err(err("malformed Huffman table"));
        }
        let mut t = HuffTable {
            maxcode: [-1; 18],
            valptr: [0; 17],
            mincode: [0; 17],
            values,
        };
        let mut code = 0i32;
        let mut k = 0i32;
        for len in 1..=16 {
            let count = i32::from(bits[len - 1]);
            if count > 0 {
                t.valptr[len] = k;
                t.mincode[len] = code;
                code += count;
                k += count;
                t.maxcode[len] = code - 1;
            }
            code <<= 1;
        }
        t.maxcode[17] = i32::MAX;
        Ok(t)
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
    hit_marker: bool,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8], pos: usize) -> Self {
        BitReader {
            data,
            pos,
            acc: 0,
            nbits: 0,
            hit_marker: false,
        }
    }

    fn fill_byte(&mut self) -> u8 {
        if self.hit_marker || self.pos >= self.data.len() {
            return 0;
        }
        let b = self.data[self.pos];
        if b == 0xff {
            match self.data.get(self.pos + 1) {
                Some(0x00) => {
                    self.pos += 2;
                    0xff
                }
                _ => {
                    self.hit_marker = true;
                    0
                }
            }
        } else {
            self.pos += 1;
            b
        }
    }

    fn bit(&mut self) -> u32 {
        if self.nbits == 0 {
            self.acc = u32::from(self.fill_byte());
            self.nbits = 8;
        }
        self.nbits -= 1;
        (self.acc >> self.nbits) & 1
    }

    fn bits(&mut self, n: u8) -> u32 {
        (0..n).fold(0, |v, _| (v << 1) | self.bit())
    }

    fn decode(&mut self, t: &HuffTable) -> Result<u8> {
        let mut code = self.bit() as i32;
        let mut len = 1;
        while code > t.maxcode[len] {
            code = (code << 1) | self.bit() as i32;
            len += 1;
            if len > 16 {
                return Err(err("invalid Huffman code"));
            }
        }
        let idx = t.valptr[len] + code - t.mincode[len];
        t.values.get(idx as usize).copied().ok_or_else(|| err("Huffman index out of range"))
    }

    /// Consumes an RSTn marker at the current position, discarding partial bits.
    fn restart(&mut self) -> Result<()> {
        self.nbits = 0;
        self.hit_marker = false;
        match self.data.get(self.pos..self.pos + 2) {
            Some([0xff, m]) if (0xd0..=0xd7).contains(m) => {
                self.pos += 2;
                Ok(())
            }
            _ => Err(err("expected restart marker")),
        }
    }

    /// Position of the marker that ended the entropy-coded segment.
    fn end(&self) -> usize {
        let mut p = self.pos;
        while p + 1 < self.data.len() && !(self.data[p] == 0xff && self.data[p + 1] != 0x00) {
            p += 1;
        }
        p
    }
}

fn extend(v: u32, size: u8) -> i32 {
    if size == 0 {
        return 0;
    }
    let v = v as i32;
    if v < 1 << (size - 1) {
        v - (1 << size) + 1
    } else {
        v
    }
}

#[derive(Clone)]
struct Component {
    id: u8,
    h: usize,
    v: usize,
    tq: usize,
    td: usize,
    ta: usize,
    plane: Vec<u8>,
    plane_w: usize,
}

/// Decodes a baseline (SOF0/SOF1, Huffman, 8-bit) JPEG stream into RGB.
///
/// Chroma is upsampled by sample replication and converted with the JFIF
/// equations.
pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.get(..2) != Some(&[0xff, 0xd8]) {
        return Err(err("missing SOI marker"));
    }
    let mut pos = 2;
    let mut qt = [[0u16; 64]; 4];
    let mut dc_tables: [Option<HuffTable>; 4] = Default::default();
    let mut ac_tables: [Option<HuffTable>; 4] = Default::default();
    let mut comps: Vec<Component> = Vec::new();
    let (mut width, mut height) = (0usize, 0usize);
    let mut restart_interval = 0usize;
    let mut scanned = false;

    loop {
        while bytes.get(pos) == Some(&0xff) && bytes.get(pos + 1) == Some(&0xff) {
            pos += 1;
        }
        let (Some(&0xff), Some(&code)) = (bytes.get(pos), bytes.get(pos + 1)) else {
            return Err(err("truncated stream: expected marker"));
        };
        pos += 2;
        if code == 0xd9 {
            break;
        }
        if (0xd0..=0xd7).contains(&code) || code == 0x01 {
            continue;
        }
        let len = bytes
            .get(pos..pos + 2)
            .map(|b| usize::from(u16::from_be_bytes([b[0], b[1]])))
            .ok_or_else(|| err("truncated segment length"))?;
        let seg = bytes.get(pos + 2..pos + len).ok_or_else(|| err("truncated segment"))?;
        pos += len;
        match code {
            0xdb => {
                let mut s = seg;
                while !s.is_empty() {
                    let (pq, tq) = (s[0] >> 4, usize::from(s[0] & 0x0f));
                    if tq > 3 {
                        return Err(err("quantization table id out of range"));
                    }
                    let size = if pq == 0 { 64 } else { 128 };
                    let body = s.get(1..1 + size).ok_or_else(|| err("truncated DQT"))?;
                    for (k, &z) in ZIGZAG.iter().enumerate() {
                        qt[tq][z] = if pq == 0 {
                            u16::from(body[k])
                        } else {
                            u16::from_be_bytes([body[2 * k], body[2 * k + 1]])
                        };
                    }
                    s = &s[1 + size..];
                }
            }
            0xc4 => {
                let mut s = seg;
                while !s.is_empty() {
                    let (class, id) = (s[0] >> 4, usize::from(s[0] & 0x0f));
                    let bits: [u8; 16] = s
                        .get(1..17)
                        .ok_or_else(|| err("truncated DHT"))?
                        .try_into()
                        .expect("16 bytes");
                    let n: usize = bits.iter().map(|&b| usize::from(b)).sum();
                    let values = s.get(17..17 + n).ok_or_else(|| err("truncated DHT"))?.to_vec();
                    if id > 3 || class > 1 {
                        return Err(err("Huffman table id out of range"));
                    }
                    let table = Some(HuffTable::new(&bits, values)?);
                    if class == 0 {
                        dc_tables[id] = table;
                    } else {
                        ac_tables[id] = table;
                    }
                    s = &s[17 + n..];
                }
            }
            0xdd => {
                restart_interval = seg
                    .get(..2)
                    .map(|b| usize::from(u16::from_be_bytes([b[0], b[1]])))
                    .ok_or_else(|| err("truncated DRI"))?;
            }
            0xc0 | 0xc1 => {
                if seg.len() < 6 || seg[0] != 8 {
                    return Err(err("only 8-bit baseline frames are supported"));
                }
                height = usize::from(u16::from_be_bytes([seg[1], seg[2]]));
                width = usize::from(u16::from_be_bytes([seg[3], seg[4]]));
                let n = usize::from(seg[5]);
                if width == 0 || height == 0 {
                    return Err(err("zero image dimension"));
                }
                if n != 1 && n != 3 {
                    return Err(err(format!("unsupported component count {n}")));
                }
                comps = (0..n)
                    .map(|i| {
                        let c = seg.get(6 + 3 * i..9 + 3 * i).ok_or_else(|| err("truncated SOF"))?;
                        let (h, v) = (usize::from(c[1] >> 4), usize::from(c[1] & 0x0f));
                        if !(1..=4).contains(&h) || !(1..=4).contains(&v) || c[2] > 3 {
                            return Err(err("invalid sampling factors"));
                        }
                        Ok(Component {
                            id: c[0],
                            h,
                            v,
                            tq: usize::from(c[2]),
                            td: 0,
                            ta: 0,
                            plane: Vec::new(),
                            plane_w: 0,
                        })
                    })
                    .collect::<Result<_>>()?;
                if n == 1 {
                    comps[0].h = 1;
                    comps[0].v = 1;
                }
            }
            0xc2 | 0xc3 | 0xc5..=0xc7 | 0xc9..=0xcb | 0xcd..=0xcf => {
                return Err(err("progressive, lossless and arithmetic JPEG are not supported"));
            }
            0xda => {
                if comps.is_empty() {
                    return Err(err("scan before frame header"));
                }
                let ns = usize::from(*seg.first().ok_or_else(|| err("empty SOS"))?);
                if ns != comps.len() {
                    return Err(err("only single interleaved scans are supported"));
                }
                for i in 0..ns {
                    let s = seg.get(1 + 2 * i..3 + 2 * i).ok_or_else(|| err("truncated SOS"))?;
                    let c = comps
                        .iter_mut()
                        .find(|c| c.id == s[0])
                        .ok_or_else(|| err("scan references unknown component"))?;
                    c.td = usize::from(s[1] >> 4);
                    c.ta = usize::from(s[1] & 0x0f);
                }
                let end = decode_scan(bytes, pos, width, height, &mut comps, &qt, &dc_tables, &ac_tables, restart_interval)?;
                pos = end;
                scanned = true;
            }
            _ => {}
        }
    }
    if !scanned {
        return Err(err("no scan data"));
    }
    Ok(assemble(width, height, &comps))
}

#[allow(clippy::too_many_arguments)]
fn decode_scan(
    bytes: &[u8],
    start: usize,
    width: usize,
    height: usize,
    comps: &mut [Component],
    qt: &[[u16; 64]; 4],
    dc_tables: &[Option<HuffTable>; 4],
    ac_tables: &[Option<HuffTable>; 4],
    restart_interval: usize,
) -> Result<usize> {
    let hmax = comps.iter().map(|c| c.h).max().expect("components");
    let vmax = comps.iter().map(|c| c.v).max().expect("components");
    let mcux = width.div_ceil(8 * hmax);
    let mcuy = height.div_ceil(8 * vmax);
    for c in comps.iter_mut() {
        c.plane_w = mcux * c.h * 8;
        c.plane = vec![0; c.plane_w * mcuy * c.v * 8];
    }
    let mut reader = BitReader::new(bytes, start);
    let mut pred = vec![0i32; comps.len()];
    let total = mcux * mcuy;
    for m in 0..total {
        if restart_interval > 0 && m > 0 && m % restart_interval == 0 {
            reader.restart()?;
            pred.iter_mut().for_each(|p| *p = 0);
        }
        let (mx, my) = (m % mcux, m / mcux);
        for (ci, c) in comps.iter_mut().enumerate() {
            let dc = dc_tables[c.td].as_ref().ok_or_else(|| err("missing DC table"))?;
            let ac = ac_tables[c.ta].as_ref().ok_or_else(|| err("missing AC table"))?;
            for by in 0..c.v {
                for bx in 0..c.h {
                    let mut zz = [0i32; 64];
                    let size = reader.decode(dc)?;
                    if size > 11 {
                        return Err(err("DC magnitude out of range"));
                    }
                    pred[ci] += extend(reader.bits(size), size);
                    zz[0] = pred[ci];
                    let mut k = 1;
                    while k < 64 {
                        let rs = reader.decode(ac)?;
                        let (run, size) = (usize::from(rs >> 4), rs & 0x0f);
                        if size == 0 {
                            if run == 15 {
                                k += 16;
                                continue;
                            }
                            break;
                        }
                        k += run;
                        if k > 63 {
                            return Err(err("AC coefficient index out of range"));
                        }
                        zz[k] = extend(reader.bits(size), size);
                        k += 1;
                    }
                    let mut coef = [0.0; 64];
                    for (k, &z) in ZIGZAG.iter().enumerate() {
                        coef[z] = f64::from(zz[k]) * f64::from(qt[c.tq][z]);
                    }
                    let samples = dct::inverse(&coef);
                    let x0 = (mx * c.h + bx) * 8;
                    let y0 = (my * c.v + by) * 8;
                    for y in 0..8 {
                        for x in 0..8 {
                            c.plane[(y0 + y) * c.plane_w + x0 + x] =
                                (samples[y * 8 + x] + 128.0).round().clamp(0.0, 255.0) as u8;
                        }
                    }
                }
            }
        }
    }
    Ok(reader.end())
}

fn assemble(width: usize, height: usize, comps: &[Component]) -> ImageBuffer {
    let hmax = comps.iter().map(|c| c.h).max().expect("components");
    let vmax = comps.iter().map(|c| c.v).max().expect("components");
    let sample = |c: &Component, x: usize, y: usize| -> f64 {
        f64::from(c.plane[(y * c.v / vmax) * c.plane_w + x * c.h / hmax])
    };
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            if comps.len() == 1 {
                let g = comps[0].plane[y * comps[0].plane_w + x];
                pixels.extend_from_slice(&[g, g, g]);
                continue;
            }
            let yy = sample(&comps[0], x, y);
            let cb = sample(&comps[1], x, y) - 128.0;
            let cr = sample(&comps[2], x, y) - 128.0;
            let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
            pixels.push(to_u8(yy + 1.402 * cr));
            pixels.push(to_u8(yy - 0.344_136 * cb - 0.714_136 * cr));
            pixels.push(to_u8(yy + 1.772 * cb));
        }
    }
    ImageBuffer::new(width, height, pixels).expect("decoded geometry")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extend_recovers_signed_values() {
        assert_eq!(extend(0, 1), -1);
        assert_eq!(extend(1, 1), 1);
        assert_eq!(extend(2, 3), -5);
        assert_eq!(extend(5, 3), 5);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(&[0x00, 0x01, 0x02]).is_err());
        assert!(decode(&[0xff, 0xd8, 0xff, 0xd9]).is_err());
        assert!(decode(&[0xff, 0xd8, 0xff, 0xc2, 0x00, 0x02]).is_err());
    }
}
