//! Checkpoint container: magic `CBCK`, a version, the model config as
//! canonical text, a metadata text block, the named tensor table and the
//! optimizer moments.

use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::{Best, EpochLog, TrainState};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::dump::{decode_body, encode_body};
use crate::tensor::{DType, Scalar, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"CBCK";
pub const CKPT_VERSION: u32 = 1;

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn text(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.block()?).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let (t, used) = decode_body(&self.bytes[self.pos..])?;
        self.pos += used;
        Ok(t)
    }
}

/// Everything besides tensors, as `key=value` lines.
fn meta_text<T: Scalar>(s: &TrainState<T>) -> String {
    let n = &s.normalization;
    let mut out = format!(
        "classes={}\nnorm_mean={:?},{:?},{:?}\nnorm_std={:?},{:?},{:?}\nepoch={}\nseed={}\n\
         adam_t={}\nadam_lr={:?}\nbeta1={:?}\nbeta2={:?}\neps={:?}\n",
        s.classes.join(","),
        n.mean[0],
        n.mean[1],
        n.mean[2],
        n.std[0],
        n.std[1],
        n.std[2],
        s.epoch,
        s.seed,
        s.opt.t,
        s.opt.lr,
        s.opt.config.beta1,
        s.opt.config.beta2,
        s.opt.config.eps,
    );
    if let Some(b) = s.best {
        out.push_str(&format!("best_acc={:?}\nbest_epoch={}\n", b.val_acc, b.epoch));
    }
    for l in &s.log {
        out.push_str(&format!(
            "log={},{:?},{:?},{:?},{:?},{:?}\n",
            l.epoch, l.lr, l.train_loss, l.train_acc, l.val_loss, l.val_acc
        ));
    }
    out
}

pub fn encode_checkpoint<T: Scalar>(s: &TrainState<T>) -> Vec<u8> {
    let mut out = CKPT_MAGIC.to_vec();
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    put_block(&mut out, s.model.config.to_canonical().as_bytes());
    put_block(&mut out, meta_text(s).as_bytes());
    let entries = s.model.store.entries();
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        put_block(&mut out, e.name.as_bytes());
        encode_body(&e.value, &mut out);
    }
    out.extend_from_slice(&(s.opt.m.len() as u64).to_le_bytes());
    for (m, v) in s.opt.m.iter().zip(&s.opt.v) {
        encode_body(m, &mut out);
        encode_body(v, &mut out);
    }
    out
}

/// Decoded checkpoint contents, not yet bound to a model.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub moments: Vec<(Tensor<T>, Tensor<T>)>,
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let code = r.take(1)?[0];
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint holds {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let config = ModelConfig::from_canonical(r.text()?)?;
    let meta = r
        .text()?
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = String::from_utf8(r.block()?.to_vec()).map_err(|_| Error::Format("bad tensor name".into()))?;
        tensors.push((name, r.tensor()?));
    }
    let moments_n = r.u64()? as usize;
    let mut moments = Vec::with_capacity(moments_n.min(1 << 16));
    for _ in 0..moments_n {
        let m = r.tensor()?;
        let v = r.tensor()?;
        moments.push((m, v));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        config,
        meta,
        tensors,
        moments,
    })
}

impl<T: Scalar> Checkpoint<T> {
    fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {key}")))
    }

    fn num<N: std::str::FromStr>(&self, key: &str) -> Result<N> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint metadata {key} is malformed")))
    }

    fn triple(&self, key: &str) -> Result<[f32; 3]> {
        let v: Vec<f32> = self
            .get(key)?
            .split(',')
            .map(|x| x.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("checkpoint metadata {key} is malformed")))?;
        v.try_into()
            .map_err(|_| Error::Format(format!("checkpoint metadata {key} needs 3 values")))
    }

    /// Rebuilds the training state. With `expect`, the stored architecture
    /// must equal it exactly.
    pub fn into_state(self, expect: Option<&ModelConfig>) -> Result<TrainState<T>> {
        if let Some(cfg) = expect {
            if *cfg != self.config {
                return Err(Error::Config(format!(
                    "checkpoint architecture ({} variant) does not match the requested {} model",
                    self.config.variant, cfg.variant
                )));
            }
        }
        let seed: u64 = self.num("seed")?;
        let mut model = Model::build(&self.config, seed)?;
        let adam_cfg = AdamConfig {
            beta1: self.num("beta1")?,
            beta2: self.num("beta2")?,
            eps: self.num("eps")?,
        };
        let best = match (self.get("best_acc"), self.get("best_epoch")) {
            (Ok(_), Ok(_)) => Some(Best {
                val_acc: self.num("best_acc")?,
                epoch: self.num("best_epoch")?,
            }),
            _ => None,
        };
        let mut log = Vec::new();
        for (k, v) in &self.meta {
            if k == "log" {
                log.push(EpochLog::parse_record(v)?);
            }
        }
        let classes: Vec<String> = self.get("classes")?.split(',').map(String::from).collect();
        let normalization = Normalization {
            mean: self.triple("norm_mean")?,
            std: self.triple("norm_std")?,
        };
        let epoch = self.num("epoch")?;
        let t = self.num("adam_t")?;
        let lr = self.num("adam_lr")?;
        let mut opt = AdamState::new(&model.store, adam_cfg, lr)?;
        if opt.m.len() != self.moments.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} moment pairs, model has {} trainable tensors",
                self.moments.len(),
                opt.m.len()
            )));
        }
        for (k, (m, v)) in self.moments.into_iter().enumerate() {
            if m.shape() != opt.m[k].shape() || v.shape() != opt.m[k].shape() {
                return Err(Error::Format("optimizer moment shape mismatch".into()));
            }
            opt.m[k] = m;
            opt.v[k] = v;
        }
        opt.t = t;
        model.store.load_named(self.tensors)?;
        Ok(TrainState {
            model,
            opt,
            epoch,
            seed,
            best,
            log,
            classes,
            normalization,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(s: &TrainState<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(s)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expect: Option<&ModelConfig>) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_state(expect)
}

/// Replaces the model weights of `model` from a checkpoint; the stored
/// architecture must match and nothing changes on error.
pub fn load_weights_into<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint<T> = decode_checkpoint(&bytes)?;
    if ck.config != model.config {
        return Err(Error::Config(format!(
            "checkpoint architecture ({}) does not match the model ({})",
            ck.config.variant, model.config.variant
        )));
    }
    model.store.load_named(ck.tensors)
}
