//! Bit-reproducible checkpointing.
//!
//! Little-endian binary layout (version 1):
//!
//! ```text
//! magic            8 bytes  "GRCLCKPT"
//! version          u32
//! epoch            u32
//! config_digest    u32 length + utf-8 bytes
//! parameters       u32 count, then per record:
//!                    u32 name length + utf-8 name
//!                    u32 ndim, u32 dims[ndim]
//!                    f64 data[prod(dims)]
//! running stats    same record layout
//! optimizer        f64 lr, f64 momentum, f64 weight_decay,
//!                  u32 buffer count, then (name, ndim=1 record) each
//! rng              4 x u64 state words
//! ```
//!
//! `load` parses and validates the whole file before anything touches the
//! network, so a malformed checkpoint never applies partial state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grcl::network::Network;
use crate::rng::Rng;
use crate::trainer::optim::{OptimizerState, SgdHyper};

const MAGIC: &[u8; 8] = b"GRCLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

type Record = (String, Vec<usize>, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: u32,
    pub config_digest: String,
    pub params: Vec<Record>,
    pub stats: Vec<Record>,
    pub hyper: SgdHyper,
    pub buffers: Vec<(String, Vec<f64>)>,
    pub rng_state: [u64; 4],
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { bytes: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }
    fn record(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        self.str(name);
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
        for &v in data {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "truncated file: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::CheckpointFormat(format!(
                "implausible string length {len}"
            )));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::CheckpointFormat(format!("non-utf8 name: {e}")))
    }
    fn record(&mut self) -> Result<Record> {
        let name = self.str()?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CheckpointFormat(format!(
                "{name}: implausible rank {ndim}"
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        if len > 1 << 28 {
            return Err(Error::CheckpointFormat(format!(
                "{name}: implausible element count {len}"
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Ok((name, dims, data))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} trailing bytes after checkpoint payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

impl Checkpoint {
    /// Snapshot the full training state.
    pub fn capture(net: &Network, opt: &OptimizerState, rng: &Rng, epoch: u32) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch,
            config_digest: net.config.digest(),
            params: net.export_params(),
            stats: net.export_stats(),
            hyper: opt.hyper,
            buffers: opt
                .buffers()
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            rng_state: rng.state(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.bytes.extend_from_slice(MAGIC);
        w.u32(self.version);
        w.u32(self.epoch);
        w.str(&self.config_digest);
        w.u32(self.params.len() as u32);
        for (name, dims, data) in &self.params {
            w.record(name, dims, data);
        }
        w.u32(self.stats.len() as u32);
        for (name, dims, data) in &self.stats {
            w.record(name, dims, data);
        }
        w.f64(self.hyper.lr);
        w.f64(self.hyper.momentum);
        w.f64(self.hyper.weight_decay);
        w.u32(self.buffers.len() as u32);
        for (name, data) in &self.buffers {
            w.record(name, &[data.len()], data);
        }
        for word in self.rng_state {
            w.u64(word);
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, &w.bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(&bytes);
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "bad magic {:?} in {}",
                &magic[..8.min(magic.len())],
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let epoch = r.u32()?;
        let config_digest = r.str()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(r.record()?);
        }
        let n_stats = r.u32()? as usize;
        let mut stats = Vec::with_capacity(n_stats);
        for _ in 0..n_stats {
            stats.push(r.record()?);
        }
        let hyper = SgdHyper {
            lr: r.f64()?,
            momentum: r.f64()?,
            weight_decay: r.f64()?,
        };
        let n_buffers = r.u32()? as usize;
        let mut buffers = Vec::with_capacity(n_buffers);
        for _ in 0..n_buffers {
            let (name, dims, data) = r.record()?;
            if dims.len() != 1 {
                return Err(Error::CheckpointFormat(format!(
                    "optimizer buffer {name} must be rank 1"
                )));
            }
            buffers.push((name, data));
        }
        let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        r.done()?;
        Ok(Checkpoint {
            version,
            epoch,
            config_digest,
            params,
            stats,
            hyper,
            buffers,
            rng_state,
        })
    }

    /// Apply the checkpoint to a freshly built network of the same
    /// architecture. Everything is validated before any mutation, so a
    /// mismatch leaves the network untouched.
    pub fn restore(&self, net: &mut Network) -> Result<(OptimizerState, Rng, u32)> {
        let digest = net.config.digest();
        if self.config_digest != digest {
            return Err(Error::CheckpointShape(format!(
                "config digest mismatch: checkpoint built for '{}', network is '{digest}'",
                self.config_digest
            )));
        }
        net.import_params(&self.params)?;
        net.import_stats(&self.stats)?;
        let mut opt = OptimizerState::new(self.hyper);
        let buffers: BTreeMap<String, Vec<f64>> = self.buffers.iter().cloned().collect();
        opt.restore_buffers(buffers);
        Ok((opt, Rng::from_state(self.rng_state), self.epoch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grcl::network::{build_grcnn, BlockSpec, GrcnnConfig};
    use crate::kernels::batchnorm::Phase;
    use crate::tensor::Tensor;

    fn micro_config() -> GrcnnConfig {
        GrcnnConfig {
            input_channels: 2,
            class_count: 3,
            stem: [2, 3],
            blocks: vec![BlockSpec {
                channels: 3,
                downsample: true,
                t_steps: 2,
                tie_weights: true,
            }],
            kernel: (3, 3),
        }
    }

    #[test]
    fn save_load_restores_bitwise_identical_forward() {
        let mut rng = Rng::seed_from_u64(300);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let opt = OptimizerState::new(SgdHyper::default());
        let ckpt = Checkpoint::capture(&net, &opt, &rng, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let mut net2 = build_grcnn(&micro_config(), &mut Rng::seed_from_u64(999)).unwrap();
        let (_, rng2, epoch) = loaded.restore(&mut net2).unwrap();
        assert_eq!(epoch, 5);
        assert_eq!(rng2.state(), rng.state());

        let batch = Tensor::from_fn([2, 2, 8, 8], || {
            let mut r = Rng::seed_from_u64(4);
            r.next_f64()
        });
        let (a, _) = net.forward(&batch, Phase::Eval).unwrap();
        let (b, _) = net2.forward(&batch, Phase::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupted_magic_is_a_format_error_with_no_partial_state() {
        let mut rng = Rng::seed_from_u64(301);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let opt = OptimizerState::new(SgdHyper::default());
        let ckpt = Checkpoint::capture(&net, &opt, &rng, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::CheckpointFormat(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut rng = Rng::seed_from_u64(302);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let opt = OptimizerState::new(SgdHyper::default());
        let ckpt = Checkpoint::capture(&net, &opt, &rng, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn wrong_version_is_a_version_error() {
        let mut rng = Rng::seed_from_u64(303);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let opt = OptimizerState::new(SgdHyper::default());
        let ckpt = Checkpoint::capture(&net, &opt, &rng, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99; // version field follows the magic
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }

    #[test]
    fn architecture_mismatch_is_a_shape_error() {
        let mut rng = Rng::seed_from_u64(304);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let opt = OptimizerState::new(SgdHyper::default());
        let ckpt = Checkpoint::capture(&net, &opt, &rng, 0);
        let mut other = build_grcnn(&GrcnnConfig::tiny(), &mut rng).unwrap();
        assert!(matches!(
            ckpt.restore(&mut other),
            Err(Error::CheckpointShape(_))
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut rng = Rng::seed_from_u64(305);
        let net = build_grcnn(&micro_config(), &mut rng).unwrap();
        let opt = OptimizerState::new(SgdHyper::default());
        let ckpt = Checkpoint::capture(&net, &opt, &rng, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointFormat(_))
        ));
    }
}
