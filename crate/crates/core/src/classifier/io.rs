//! Binary model container.
//!
//! ```text
//! "ECVLRTR1"
//! payload:
//!   u32 format_version
//!   u8 variant tag + variant sizes
//!   scenario: u16 name len, name, f64 mes, alpha, beta, gamma
//!   f64 tau (NaN when uncalibrated)
//!   u32 text dim, u32 image dim, u8 mask bits
//!   normalizer: 7 × f64 mean, 7 × f64 std
//!   u32 epochs, then (u32 epoch, f64 loss, f64 tau, f64 rcs) each
//!   u32 tensors, then (u16 name len, name, u32 rank, u32 dims.., f32 data) each
//! u32 CRC32 of the payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{Architecture, InputDims, Network};
use super::{EpochRecord, RouterModel, RouterState};
use crate::error::{Error, Result};
use crate::features::{ModalityMask, Normalizer, STATS_DIM};
use crate::rsd::ScenarioConfig;

pub const MODEL_MAGIC: &[u8; 8] = b"ECVLRTR1";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("size fits in u32"));
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("name fits in u16"));
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::invalid("model payload ends early"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::invalid(format!("bad UTF-8 name: {e}")))
    }
}

fn write_arch(w: &mut Writer, arch: &Architecture) {
    match arch {
        Architecture::Transformer {
            layers,
            model_dim,
            heads,
            ffn_dim,
            dropout,
        } => {
            w.u8(0);
            w.usize(*layers);
            w.usize(*model_dim);
            w.usize(*heads);
            w.usize(*ffn_dim);
            w.f64(*dropout);
        }
        Architecture::Mlp { model_dim, hidden } => {
            w.u8(1);
            w.usize(*model_dim);
            w.usize(hidden.len());
            for h in hidden {
                w.usize(*h);
            }
        }
        Architecture::BilinearMf { model_dim, rank } => {
            w.u8(2);
            w.usize(*model_dim);
            w.usize(*rank);
        }
    }
}

fn read_arch(r: &mut Reader<'_>) -> Result<Architecture> {
    Ok(match r.u8()? {
        0 => Architecture::Transformer {
            layers: r.usize()?,
            model_dim: r.usize()?,
            heads: r.usize()?,
            ffn_dim: r.usize()?,
            dropout: r.f64()?,
        },
        1 => {
            let model_dim = r.usize()?;
            let n = r.usize()?;
            if n > 1024 {
                return Err(Error::invalid(format!("implausible hidden layer count {n}")));
            }
            let hidden = (0..n).map(|_| r.usize()).collect::<Result<_>>()?;
            Architecture::Mlp { model_dim, hidden }
        }
        2 => Architecture::BilinearMf {
            model_dim: r.usize()?,
            rank: r.usize()?,
        },
        t => return Err(Error::Version(format!("unknown variant tag {t}"))),
    })
}

pub fn state_to_bytes(state: &RouterState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(state.format_version);
    write_arch(&mut w, &state.model.arch);
    let s = &state.scenario;
    w.str(&s.name);
    for v in [s.mes, s.alpha, s.beta, s.gamma] {
        w.f64(v);
    }
    w.f64(state.tau.unwrap_or(f64::NAN));
    w.usize(state.model.dims.text);
    w.usize(state.model.dims.image);
    w.u8(state.mask.bits());
    for v in state.normalizer.mean.iter().chain(state.normalizer.std.iter()) {
        w.f64(*v);
    }
    w.usize(state.history.len());
    for h in &state.history {
        w.usize(h.epoch);
        w.f64(h.loss);
        w.f64(h.tau);
        w.f64(h.rcs);
    }
    let params = state.model.net.params();
    w.usize(params.len());
    for (name, t) in &params {
        w.str(name);
        w.usize(t.ndim());
        for &d in t.shape() {
            w.usize(d);
        }
        for &v in t.iter() {
            w.f32(v);
        }
    }
    let payload = w.0;
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

/// CRC32 of the payload as stored in the trailer.
pub fn model_checksum(bytes: &[u8]) -> Result<u32> {
    verify_container(bytes).map(|(_, crc)| crc)
}

fn verify_container(bytes: &[u8]) -> Result<(&[u8], u32)> {
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(Error::Version("not a router model file (bad magic)".into()));
    }
    if bytes.len() < MODEL_MAGIC.len() + 4 {
        return Err(Error::Checksum("file truncated before checksum".into()));
    }
    let (payload, trailer) = bytes[MODEL_MAGIC.len()..].split_at(bytes.len() - MODEL_MAGIC.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Checksum(format!(
            "stored {stored:08x}, computed {actual:08x} (file truncated or corrupt)"
        )));
    }
    Ok((payload, stored))
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<RouterState> {
    let (payload, _) = verify_container(bytes)?;
    let mut r = Reader { buf: payload, pos: 0 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let arch = read_arch(&mut r)?;
    arch.validate()?;
    let name = r.str()?;
    let scenario = ScenarioConfig {
        name,
        mes: r.f64()?,
        alpha: r.f64()?,
        beta: r.f64()?,
        gamma: r.f64()?,
    };
    let tau = r.f64()?;
    let tau = if tau.is_nan() { None } else { Some(tau) };
    let dims = InputDims {
        text: r.usize()?,
        image: r.usize()?,
    };
    let mask = ModalityMask::from_bits(r.u8()?);
    let mut normalizer = Normalizer::identity();
    for i in 0..STATS_DIM {
        normalizer.mean[i] = r.f64()?;
    }
    for i in 0..STATS_DIM {
        normalizer.std[i] = r.f64()?;
    }
    let n_hist = r.usize()?;
    let mut history = Vec::with_capacity(n_hist.min(10_000));
    for _ in 0..n_hist {
        history.push(EpochRecord {
            epoch: r.usize()?,
            loss: r.f64()?,
            tau: r.f64()?,
            rcs: r.f64()?,
        });
    }

    let mut net: Network<f32> = Network::new(&arch, dims, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n_tensors = r.usize()?;
    {
        let mut slots = net.params_mut();
        if n_tensors != slots.len() {
            return Err(Error::invalid(format!(
                "model file has {n_tensors} tensors, architecture expects {}",
                slots.len()
            )));
        }
        for (expected_name, slot) in slots.iter_mut() {
            let name = r.str()?;
            if &name != expected_name {
                return Err(Error::invalid(format!("expected tensor {expected_name}, found {name}")));
            }
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {name}: stored shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            for v in slot.iter_mut() {
                *v = r.f32()?;
            }
        }
    }
    if r.pos != payload.len() {
        return Err(Error::invalid("trailing bytes in model payload"));
    }
    Ok(RouterState {
        model: RouterModel { arch, dims, net },
        tau,
        scenario,
        mask,
        normalizer,
        history,
        format_version: version,
    })
}

pub fn save_state(state: &RouterState, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &state_to_bytes(state))
}

pub fn load_state(path: &Path) -> Result<RouterState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    state_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureBundle, ModalityMask};

    fn tiny_state(arch: Architecture) -> RouterState {
        let dims = InputDims { text: 5, image: 3 };
        let model = RouterModel::new(arch, dims, 17).unwrap();
        let mut norm = Normalizer::identity();
        norm.mean[0] = 12.5;
        norm.std[3] = 0.25;
        let mut s = RouterState::new(model, ScenarioConfig::rcs2(6.0), ModalityMask::new(true, false, true), norm);
        s.tau = Some(0.65);
        s.history.push(EpochRecord {
            epoch: 0,
            loss: 0.69,
            tau: 0.65,
            rcs: 0.58,
        });
        s
    }

    fn probes() -> Vec<FeatureBundle> {
        (0..10)
            .map(|i| FeatureBundle {
                query_id: format!("p{i}"),
                text: Some((0..5).map(|j| (i as f32 - j as f32) / 3.0).collect()),
                image: Some(vec![0.1 * i as f32; 3]),
                stats: std::array::from_fn(|j| (i * j) as f32 / 10.0 - 1.0),
                mask: ModalityMask::ALL,
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for arch in [
            Architecture::Transformer {
                layers: 1,
                model_dim: 8,
                heads: 2,
                ffn_dim: 8,
                dropout: 0.3,
            },
            Architecture::Mlp {
                model_dim: 4,
                hidden: vec![6, 5],
            },
            Architecture::BilinearMf { model_dim: 4, rank: 2 },
        ] {
            let s = tiny_state(arch);
            let bytes = state_to_bytes(&s);
            let back = state_from_bytes(&bytes).unwrap();
            assert_eq!(back, s);
            let pb = probes();
            let refs: Vec<&FeatureBundle> = pb.iter().collect();
            let a = s.model.predict(&refs).unwrap();
            let b = back.model.predict(&refs).unwrap();
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn uncalibrated_tau_survives() {
        let mut s = tiny_state(Architecture::bilinear_mf());
        s.tau = None;
        assert_eq!(state_from_bytes(&state_to_bytes(&s)).unwrap().tau, None);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = state_to_bytes(&tiny_state(Architecture::bilinear_mf()));
        let err = state_from_bytes(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(matches!(err, Error::Checksum(_)), "{err}");
        let mut flipped = bytes.clone();
        flipped[40] ^= 0xff;
        assert!(matches!(state_from_bytes(&flipped), Err(Error::Checksum(_))));
    }

    #[test]
    fn wrong_magic_or_version_is_version_error() {
        let mut bytes = state_to_bytes(&tiny_state(Architecture::bilinear_mf()));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(state_from_bytes(&bad), Err(Error::Version(_))));

        // Bump the version and re-seal the checksum.
        let n = bytes.len();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes[8..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(state_from_bytes(&bytes), Err(Error::Version(_))));
    }
}
