//! Binary parameter checkpoints.
//!
//! Layout (all integers u32/u64 little-endian, all reals f64 little-endian):
//!
//! ```text
//! magic      8 bytes  "MCFPCKPT"
//! version    u32      1
//! n_sizes    u32      number of layer sizes L+1 (>= 2)
//! sizes      u32 * n_sizes
//! flags      u32      bit 0: optimizer state present
//! for each layer l: weights (out x in, row-major), then biases (out)
//! if flags & 1:
//!   step u64, beta1, beta2, epsilon, lr_base, lr_decay_factor, lr_decay_every u64
//!   first moments (same order as the parameters), then second moments
//! ```
//!
//! Trailing bytes after the last field are rejected.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::{AdamState, GradBuffer, LrSchedule, MlpParams};

pub const MAGIC: &[u8; 8] = b"MCFPCKPT";
pub const VERSION: u32 = 1;
const FLAG_ADAM: u32 = 1;
// Guards allocation when decoding untrusted input.
const MAX_LAYERS: usize = 1024;
const MAX_WIDTH: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub adam: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_buffers(out: &mut Vec<u8>, weights: &[Array2<f64>], biases: &[Array1<f64>]) {
    for (w, b) in weights.iter().zip(biases) {
        // iter() on a standard-layout array is row-major
        put_f64s(out, w.iter());
        put_f64s(out, b.iter());
    }
}

pub fn encode(params: &MlpParams, adam: Option<&AdamState>) -> Vec<u8> {
    let sizes = params.layer_sizes();
    let mut out = Vec::with_capacity(32 + 8 * params.n_params() * if adam.is_some() { 3 } else { 1 });
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, sizes.len() as u32);
    for &s in sizes {
        put_u32(&mut out, s as u32);
    }
    put_u32(&mut out, if adam.is_some() { FLAG_ADAM } else { 0 });
    put_buffers(&mut out, params.weights(), params.biases());
    if let Some(s) = adam {
        out.extend_from_slice(&s.step.to_le_bytes());
        put_f64s(&mut out, &[s.beta1, s.beta2, s.epsilon, s.schedule.base, s.schedule.decay_factor]);
        out.extend_from_slice(&s.schedule.decay_every.to_le_bytes());
        put_buffers(&mut out, &s.m.weights, &s.m.biases);
        put_buffers(&mut out, &s.v.weights, &s.v.biases);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn buffers(&mut self, sizes: &[usize], what: &str) -> Result<(Vec<Array2<f64>>, Vec<Array1<f64>>)> {
        let mut ws = Vec::with_capacity(sizes.len() - 1);
        let mut bs = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = self.f64s(n_in * n_out, what)?;
            ws.push(Array2::from_shape_vec((n_out, n_in), w).expect("length checked"));
            bs.push(Array1::from(self.f64s(n_out, what)?));
        }
        Ok((ws, bs))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let n = r.u32("layer count")? as usize;
    if !(2..=MAX_LAYERS).contains(&n) {
        r.pos -= 4;
        return Err(r.err(format!("layer count {n} out of range")));
    }
    let mut sizes = Vec::with_capacity(n);
    for _ in 0..n {
        let s = r.u32("layer size")? as usize;
        if s == 0 || s > MAX_WIDTH {
            r.pos -= 4;
            return Err(r.err(format!("layer size {s} out of range")));
        }
        sizes.push(s);
    }
    if sizes[n - 1] != 1 {
        return Err(r.err("output width must be 1"));
    }
    let flags = r.u32("flags")?;
    if flags & !FLAG_ADAM != 0 {
        r.pos -= 4;
        return Err(r.err(format!("unknown flags {flags:#x}")));
    }
    // Reject impossible lengths before allocating.
    let n_params: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let copies = if flags & FLAG_ADAM != 0 { 3 } else { 1 };
    if (buf.len() - r.pos) / 8 < n_params * copies {
        return Err(r.err("truncated: payload shorter than layer sizes require"));
    }
    let (w, b) = r.buffers(&sizes, "parameters")?;
    let params = MlpParams::from_parts(sizes.clone(), w, b).map_err(|e| r.err(e.to_string()))?;
    let adam = if flags & FLAG_ADAM != 0 {
        let step = r.u64("adam step")?;
        let beta1 = r.f64("beta1")?;
        let beta2 = r.f64("beta2")?;
        let epsilon = r.f64("epsilon")?;
        let base = r.f64("lr base")?;
        let decay_factor = r.f64("lr decay factor")?;
        let decay_every = r.u64("lr decay period")?;
        let (mw, mb) = r.buffers(&sizes, "first moments")?;
        let (vw, vb) = r.buffers(&sizes, "second moments")?;
        Some(AdamState {
            m: GradBuffer { weights: mw, biases: mb },
            v: GradBuffer { weights: vw, biases: vb },
            step,
            beta1,
            beta2,
            epsilon,
            schedule: LrSchedule {
                base,
                decay_factor,
                decay_every,
            },
        })
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { params, adam })
}

pub fn save(path: impl AsRef<Path>, params: &MlpParams, adam: Option<&AdamState>) -> Result<()> {
    std::fs::write(path, encode(params, adam))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adam_step, mlp_init};

    fn trained_state() -> (MlpParams, AdamState) {
        let mut p = mlp_init(&[3, 5, 4, 1], 11).unwrap();
        let mut s = AdamState::new(
            &p,
            LrSchedule {
                base: 1e-3,
                decay_factor: 0.5,
                decay_every: 7,
            },
        );
        let xs = ndarray::array![[0.1, 0.2, 0.3], [-0.5, 0.0, 0.25]];
        for _ in 0..3 {
            let g = p.backward(xs.view(), &[1.0, -2.0]).unwrap();
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        (p, s)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (p, s) = trained_state();
        let bytes = encode(&p, Some(&s));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.adam.as_ref(), Some(&s));
        let plain = decode(&encode(&p, None)).unwrap();
        assert_eq!(plain.params, p);
        assert!(plain.adam.is_none());
    }

    #[test]
    fn header_layout() {
        let p = mlp_init(&[2, 3, 1], 0).unwrap();
        let bytes = encode(&p, None);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 8 + 4 + 4 + 12 + 4 + 8 * p.n_params());
        let w00 = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        assert_eq!(w00, p.weights()[0][[0, 0]]);
        let w01 = f64::from_le_bytes(bytes[40..48].try_into().unwrap());
        assert_eq!(w01, p.weights()[0][[0, 1]]);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let (p, s) = trained_state();
        let bytes = encode(&p, Some(&s));
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let p = mlp_init(&[2, 3, 1], 0).unwrap();
        let good = encode(&p, None);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint { offset: 8, .. })));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(Error::Checkpoint { .. })));
        let mut bad = good.clone();
        bad[24..28].copy_from_slice(&2u32.to_le_bytes());
        assert!(decode(&bad).is_err());
        let mut bad = good;
        bad[28] = 0x80;
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn files_round_trip() {
        let (p, s) = trained_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.ckpt");
        save(&path, &p, Some(&s)).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params, p);
        assert!(matches!(load(dir.path().join("missing")), Err(Error::Io(_))));
    }
}
