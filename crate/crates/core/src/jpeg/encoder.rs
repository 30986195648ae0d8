use super::dct;
use super::tables::{
    huffman_codes, scaled_table, AC_CHROMA_BITS, AC_CHROMA_VALUES, AC_LUMA_BITS, AC_LUMA_VALUES,
    CHROMA_QUANT, DC_CHROMA_BITS, DC_LUMA_BITS, DC_VALUES, LUMA_QUANT, ZIGZAG,
};
use super::Subsampling;
use crate::error::{config_err, dim_err, Result};
use crate::imaging::ImageBuffer;

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn new(out: Vec<u8>) -> Self {
        BitWriter { out, acc: 0, nbits: 0 }
    }

    fn put(&mut self, len: u8, code: u16) {
        for i in (0..len).rev() {
            self.acc = (self.acc << 1) | u32::from((code >> i) & 1);
            self.nbits += 1;
            if self.nbits == 8 {
                self.emit();
            }
        }
    }

    fn emit(&mut self) {
        let byte = self.acc as u8;
        self.out.push(byte);
        if byte == 0xff {
            self.out.push(0x00);
        }
        self.acc = 0;
        self.nbits = 0;
    }

    /// Pads the final partial byte with 1-bits.
    fn finish(mut self) -> Vec<u8> {
        while self.nbits != 0 {
            self.put(1, 1);
        }
        self.out
    }
}

/// Magnitude category and appended bits of a DPCM/AC value.
fn category(v: i32) -> (u8, u16) {
    let mag = v.unsigned_abs();
    let size = 32 - mag.leading_zeros();
    let bits = if v < 0 { (v - 1) as u32 & ((1 << size) - 1) } else { v as u32 };
    (size as u8, bits as u16)
}

struct Plane {
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    fn block(&self, bx: usize, by: usize) -> [f64; 64] {
        let mut b = [0.0; 64];
        for y in 0..8 {
            let row = (by * 8 + y) * self.width + bx * 8;
            for x in 0..8 {
                b[y * 8 + x] = self.data[row + x] - 128.0;
            }
        }
        b
    }
}

fn marker(out: &mut Vec<u8>, code: u8, payload: &[u8]) {
    out.extend_from_slice(&[0xff, code]);
    out.extend_from_slice(&((payload.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(payload);
}

fn dht_payload(class_id: u8, bits: &[u8; 16], values: &[u8]) -> Vec<u8> {
    let mut p = vec![class_id];
    p.extend_from_slice(bits);
    p.extend_from_slice(values);
    p
}

/// Encodes an RGB image as a baseline sequential JFIF stream.
pub fn encode(img: &ImageBuffer, quality: u8, subsampling: Subsampling) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(config_err!("JPEG quality must be in 1..=100, got {}", quality));
    }
    let (w, h) = (img.width(), img.height());
    if w > 0xffff || h > 0xffff {
        return Err(dim_err!("image {}x{} exceeds JPEG limits", w, h));
    }
    let mcu = match subsampling {
        Subsampling::S420 => 16,
        Subsampling::S444 => 8,
    };
    let pw = w.div_ceil(mcu) * mcu;
    let ph = h.div_ceil(mcu) * mcu;

    // Color conversion on the edge-replicated padded canvas.
    let mut planes: Vec<Plane> = (0..3)
        .map(|_| Plane {
            width: pw,
            data: vec![0.0; pw * ph],
        })
        .collect();
    for y in 0..ph {
        for x in 0..pw {
            let [r, g, b] = img.pixel(x.min(w - 1), y.min(h - 1)).map(f64::from);
            let i = y * pw + x;
            planes[0].data[i] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1].data[i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
            planes[2].data[i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
        }
    }
    if subsampling == Subsampling::S420 {
        for plane in planes.iter_mut().skip(1) {
            let (cw, ch) = (pw / 2, ph / 2);
            let mut data = vec![0.0; cw * ch];
            for y in 0..ch {
                for x in 0..cw {
                    let at = |dx: usize, dy: usize| plane.data[(2 * y + dy) * pw + 2 * x + dx];
                    data[y * cw + x] = (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4.0;
                }
            }
            *plane = Plane {
                width: cw,
                data,
            };
        }
    }

    let qt = [scaled_table(&LUMA_QUANT, quality), scaled_table(&CHROMA_QUANT, quality)];
    let dc_codes = [huffman_codes(&DC_LUMA_BITS, &DC_VALUES), huffman_codes(&DC_CHROMA_BITS, &DC_VALUES)];
    let ac_codes = [
        huffman_codes(&AC_LUMA_BITS, &AC_LUMA_VALUES),
        huffman_codes(&AC_CHROMA_BITS, &AC_CHROMA_VALUES),
    ];

    let mut out = vec![0xff, 0xd8];
    marker(&mut out, 0xe0, &[b'J', b'F', b'I', b'F', 0, 1, 1, 0, 0, 1, 0, 1, 0, 0]);
    let mut dqt = Vec::with_capacity(130);
    for (id, table) in qt.iter().enumerate() {
        dqt.push(id as u8);
        dqt.extend(ZIGZAG.iter().map(|&z| table[z] as u8));
    }
    marker(&mut out, 0xdb, &dqt);
    let luma_sampling = match subsampling {
        Subsampling::S420 => 0x22,
        Subsampling::S444 => 0x11,
    };
    let mut sof = vec![8];
    sof.extend_from_slice(&(h as u16).to_be_bytes());
    sof.extend_from_slice(&(w as u16).to_be_bytes());
    sof.extend_from_slice(&[3, 1, luma_sampling, 0, 2, 0x11, 1, 3, 0x11, 1]);
    marker(&mut out, 0xc0, &sof);
    let mut dht = dht_payload(0x00, &DC_LUMA_BITS, &DC_VALUES);
    dht.extend(dht_payload(0x10, &AC_LUMA_BITS, &AC_LUMA_VALUES));
    dht.extend(dht_payload(0x01, &DC_CHROMA_BITS, &DC_VALUES));
    dht.extend(dht_payload(0x11, &AC_CHROMA_BITS, &AC_CHROMA_VALUES));
    marker(&mut out, 0xc4, &dht);
    marker(&mut out, 0xda, &[3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0]);

    let mut bw = BitWriter::new(out);
    let mut pred = [0i32; 3];
    let luma_blocks = mcu / 8;
    for my in 0..ph / mcu {
        for mx in 0..pw / mcu {
            for comp in 0..3 {
                let t = usize::from(comp != 0);
                let n = if comp == 0 { luma_blocks } else { 1 };
                for by in 0..n {
                    for bx in 0..n {
                        let coef = dct::forward(&planes[comp].block(mx * n + bx, my * n + by));
                        let mut zz = [0i32; 64];
                        for (k, &z) in ZIGZAG.iter().enumerate() {
                            let limit = if k == 0 { 2047.0 } else { 1023.0 };
                            zz[k] = (coef[z] / f64::from(qt[t][z])).round().clamp(-limit, limit) as i32;
                        }
                        encode_block(&mut bw, &zz, &mut pred[comp], &dc_codes[t], &ac_codes[t]);
                    }
                }
            }
        }
    }
    let mut out = bw.finish();
    out.extend_from_slice(&[0xff, 0xd9]);
    Ok(out)
}

fn encode_block(bw: &mut BitWriter, zz: &[i32; 64], pred: &mut i32, dc: &[(u8, u16); 256], ac: &[(u8, u16); 256]) {
    let diff = zz[0] - *pred;
    *pred = zz[0];
    let (size, bits) = category(diff);
    let (len, code) = dc[size as usize];
    bw.put(len, code);
    bw.put(size, bits);

    let mut run = 0u8;
    for &v in &zz[1..] {
        if v == 0 {
            run += 1;
            continue;
        }
        while run >= 16 {
            let (len, code) = ac[0xf0];
            bw.put(len, code);
            run -= 16;
        }
        let (size, bits) = category(v);
        let (len, code) = ac[usize::from((run << 4) | size)];
        bw.put(len, code);
        bw.put(size, bits);
        run = 0;
    }
    if run > 0 {
        let (len, code) = ac[0x00];
        bw.put(len, code);
    }
}
