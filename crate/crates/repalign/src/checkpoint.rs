//! RPAC checkpoint format: a self-describing little-endian container with
//! the run config embedded verbatim, the training step, and a named tensor
//! table holding live parameters, their EMA shadows, and both Adam moments.
//! Round trips are bit-exact, which is what makes resumed runs
//! indistinguishable from uninterrupted ones.

use crate::config::fnv1a;
use anyhow::{bail, Context, Result};
use repalign_core::numerics::optim::{EmaState, OptimState, ParamSet};
use repalign_core::numerics::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RPAC";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config_json: String,
    pub step: u64,
    pub params: ParamSet,
    pub opt: OptimState,
    pub ema: EmaState,
}

struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    elems: u64,
}

fn push_tensor(table: &mut Vec<TableEntry>, blob: &mut Vec<u8>, name: String, t: &Tensor) {
    let offset = blob.len() as u64;
    for &v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    table.push(TableEntry { name, shape: t.shape().to_vec(), offset, elems: t.numel() as u64 });
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut table = Vec::new();
    let mut blob = Vec::new();
    for (i, p) in state.params.iter().enumerate() {
        push_tensor(&mut table, &mut blob, format!("param/{}", p.name), &p.value);
        push_tensor(&mut table, &mut blob, format!("ema/{}", p.name), &state.ema.shadow[i]);
        push_tensor(&mut table, &mut blob, format!("opt_m/{}", p.name), &state.opt.m[i]);
        push_tensor(&mut table, &mut blob, format!("opt_v/{}", p.name), &state.opt.v[i]);
    }

    let cfg = state.config_json.as_bytes();
    let mut out = Vec::with_capacity(blob.len() + cfg.len() + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a(cfg).to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.opt.step.to_le_bytes());
    out.extend_from_slice(&state.ema.decay.to_le_bytes());
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for e in &table {
        let nb = e.name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&e.offset.to_le_bytes());
        out.extend_from_slice(&e.elems.to_le_bytes());
    }
    out.extend_from_slice(&blob);

    let tmp = path.with_extension("rpac.tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&out))
        .with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            bail!(
                "{what}: needs bytes {}..{} but file has {}",
                self.pos,
                self.pos + n,
                self.bytes.len()
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("reading {}", path.display()))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        bail!("not an RPAC file (bad magic at byte 0)");
    }
    let version = c.u32("version")?;
    if version != VERSION {
        bail!("unsupported RPAC version {version}, want {VERSION}");
    }
    let digest = c.u64("config digest")?;
    let cfg_len = c.u32("config length")? as usize;
    let cfg_bytes = c.take(cfg_len, "config body")?;
    if fnv1a(cfg_bytes) != digest {
        bail!("config digest mismatch: checkpoint is corrupt");
    }
    let config_json = String::from_utf8(cfg_bytes.to_vec()).context("config is not utf-8")?;
    let step = c.u64("train step")?;
    let opt_step = c.u64("optimizer step")?;
    let ema_decay = c.f32("ema decay")?;
    let count = c.u32("tensor count")? as usize;

    let mut table = Vec::with_capacity(count);
    for i in 0..count {
        let nl = c.u16("name length")? as usize;
        let name = String::from_utf8(c.take(nl, "tensor name")?.to_vec())
            .with_context(|| format!("tensor {i} name is not utf-8"))?;
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dim")? as usize);
        }
        let offset = c.u64("offset")?;
        let elems = c.u64("elems")?;
        table.push(TableEntry { name, shape, offset, elems });
    }
    let blob = &bytes[c.pos..];

    let read_tensor = |e: &TableEntry| -> Result<Tensor> {
        let start = e.offset as usize;
        let end = start + e.elems as usize * 4;
        if blob.len() < end {
            bail!("tensor {} data: blob ends at {} but needs {end}", e.name, blob.len());
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(&e.shape, data).map_err(|err| anyhow::anyhow!("tensor {}: {err}", e.name))
    };

    if !count.is_multiple_of(4) {
        bail!("tensor table must hold 4 entries per parameter, got {count}");
    }
    let mut params = ParamSet::new();
    let (mut shadow, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for group in table.chunks(4) {
        let base = group[0]
            .name
            .strip_prefix("param/")
            .with_context(|| format!("expected param/ entry, got {}", group[0].name))?
            .to_string();
        for (entry, prefix) in group.iter().zip(["param/", "ema/", "opt_m/", "opt_v/"]) {
            if entry.name != format!("{prefix}{base}") {
                bail!("tensor table out of order at {}", entry.name);
            }
        }
        params.push(base, read_tensor(&group[0])?);
        shadow.push(read_tensor(&group[1])?);
        m.push(read_tensor(&group[2])?);
        v.push(read_tensor(&group[3])?);
    }
    Ok(TrainState {
        config_json,
        step,
        params,
        opt: OptimState { m, v, step: opt_step },
        ema: EmaState { decay: ema_decay, shadow },
    })
}

/// Read just the embedded config and its digest (cheap drift check).
pub fn peek_config(path: &Path) -> Result<(u64, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("reading {}", path.display()))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        bail!("not an RPAC file (bad magic at byte 0)");
    }
    let _version = c.u32("version")?;
    let digest = c.u64("config digest")?;
    let cfg_len = c.u32("config length")? as usize;
    let cfg = String::from_utf8(c.take(cfg_len, "config body")?.to_vec())
        .context("config is not utf-8")?;
    Ok((digest, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use repalign_core::numerics::rng::{Rng, Stream};

    fn random_state(seed: u64) -> TrainState {
        let mut rng = Rng::for_counter(seed, Stream::Test, 0);
        let mut params = ParamSet::new();
        params.push("blocks/0/attn/qkv/weight", Tensor::randn(&[4, 12], &mut rng));
        params.push("final/linear/bias", Tensor::randn(&[16], &mut rng));
        let mut opt = OptimState::new(&params);
        opt.step = 41;
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            *t = Tensor::randn(t.shape(), &mut rng);
        }
        let mut ema = EmaState::new(&params, 0.999);
        for t in ema.shadow.iter_mut() {
            *t = Tensor::randn(t.shape(), &mut rng);
        }
        TrainState {
            config_json: crate::config::RunConfig::default().to_json(),
            step: 41,
            params,
            opt,
            ema,
        }
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpac");
        let state = random_state(3);
        save_checkpoint(&path, &state).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 41);
        assert_eq!(back.opt.step, 41);
        assert_eq!(back.config_json, state.config_json);
        assert_eq!(back.ema.decay.to_bits(), state.ema.decay.to_bits());
        for (a, b) in state.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        for i in 0..state.opt.m.len() {
            assert_eq!(bits(&state.opt.m[i]), bits(&back.opt.m[i]));
            assert_eq!(bits(&state.opt.v[i]), bits(&back.opt.v[i]));
            assert_eq!(bits(&state.ema.shadow[i]), bits(&back.ema.shadow[i]));
        }
        // Save the loaded state again: identical file bytes.
        let path2 = dir.path().join("m2.rpac");
        save_checkpoint(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpac");
        save_checkpoint(&path, &random_state(4)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Flip a config byte: digest check must fire.
        bytes[20] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("digest"), "{err}");

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn peek_reads_config_without_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpac");
        let state = random_state(5);
        save_checkpoint(&path, &state).unwrap();
        let (digest, cfg) = peek_config(&path).unwrap();
        assert_eq!(cfg, state.config_json);
        assert_eq!(digest, fnv1a(cfg.as_bytes()));
    }
}
