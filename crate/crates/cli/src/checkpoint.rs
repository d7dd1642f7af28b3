//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `ADASEGCK`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every tensor as
//! little-endian `f32` in header order: model stores, optimiser moments
//! (`m` then `v` per entry), and the teacher's stores when present.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use adaseg_core::autograd::ParamKey;
use adaseg_core::codespace::prebuild_inference_codes;
use adaseg_core::losses::Teacher;
use adaseg_core::networks::Model;
use adaseg_core::optim::{Adam, Moments};
use adaseg_core::params::ParamStore;
use adaseg_core::tensor::Tensor;
use adaseg_core::training::{BestRecord, ModelState, Phase};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"ADASEGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    id: u16,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct MomentMeta {
    store: u16,
    index: u32,
    step: u64,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct BestMeta {
    score: f64,
    iteration: u64,
    phase: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    iteration: u64,
    phase: String,
    learning_rate: f64,
    best: Option<BestMeta>,
    stores: Vec<StoreMeta>,
    adam: [f64; 3],
    moments: Vec<MomentMeta>,
    teacher: bool,
    payload_values: usize,
    payload_fnv: String,
}

/// A training state together with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: ModelState<f32>,
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn phase_name(p: Phase) -> String {
    p.as_str().to_string()
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "joint" => Ok(Phase::Joint),
        "self" => Ok(Phase::SelfSup),
        _ => Err(invalid(format!("unknown phase {s:?}"))),
    }
}

fn invalid(m: String) -> CliError {
    adaseg_core::Error::InvalidCheckpoint(m).into()
}

fn store_meta(s: &ParamStore<f32>) -> StoreMeta {
    StoreMeta {
        id: s.id(),
        tensors: s
            .names()
            .iter()
            .zip(s.tensors())
            .map(|(n, t)| TensorMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

pub fn encode(config: &RunConfig, state: &ModelState<f32>) -> Vec<u8> {
    let mut payload: Vec<f32> = Vec::new();
    let stores: Vec<StoreMeta> = state.model.stores().iter().map(|s| store_meta(s)).collect();
    for s in state.model.stores() {
        s.tensors()
            .iter()
            .for_each(|t| payload.extend_from_slice(t.data()));
    }
    let mut moments = Vec::new();
    for (k, m) in state.optimizer.state() {
        moments.push(MomentMeta {
            store: k.store,
            index: k.index,
            step: m.step,
            len: m.m.len(),
        });
        payload.extend_from_slice(&m.m);
        payload.extend_from_slice(&m.v);
    }
    if let Some(t) = &state.teacher {
        for s in t.model.stores() {
            s.tensors()
                .iter()
                .for_each(|t| payload.extend_from_slice(t.data()));
        }
    }
    let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = Header {
        version: FORMAT_VERSION,
        config: config.clone(),
        iteration: state.iteration,
        phase: phase_name(state.phase),
        learning_rate: state.learning_rate,
        best: state.best.map(|b| BestMeta {
            score: b.score,
            iteration: b.iteration,
            phase: phase_name(b.phase),
        }),
        stores,
        adam: [
            state.optimizer.beta1,
            state.optimizer.beta2,
            state.optimizer.eps,
        ],
        moments,
        teacher: state.teacher.is_some(),
        payload_values: payload.len(),
        payload_fnv: format!("{:016x}", fnv(&bytes)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f32>> {
        let end = self.pos + n * 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| invalid("payload is truncated".into()))?;
        self.pos = end;
        Ok(chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn store(&mut self, meta: &StoreMeta, dst: &mut ParamStore<f32>) -> Result<()> {
        if meta.id % 16 != dst.id() % 16 || meta.tensors.len() != dst.len() {
            return Err(invalid(format!(
                "store {} does not match the configured architecture",
                meta.id
            )));
        }
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for t in &meta.tensors {
            let n = t.shape.iter().product();
            tensors.push(Tensor::new(&t.shape, self.take(n)?)?);
        }
        dst.load(tensors)?;
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(invalid("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(invalid(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| invalid("header is truncated".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| invalid(format!("header: {e}")))?;
    if header.version != version {
        return Err(invalid("header and file versions disagree".into()));
    }
    let payload = &bytes[20 + hlen..];
    if payload.len() != header.payload_values * 4
        || format!("{:016x}", fnv(payload)) != header.payload_fnv
    {
        return Err(invalid("payload is corrupted".into()));
    }
    header.config.validate()?;
    let cfg = header.config.model();
    let hp = header.config.hyper_params();
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let mut model = Model::<f32>::new(&cfg, hp.seed)?;
    if header.stores.len() != 5 {
        return Err(invalid(format!(
            "{} stores, expected 5",
            header.stores.len()
        )));
    }
    for (meta, dst) in header.stores.iter().zip(model.stores_mut()) {
        r.store(meta, dst)?;
    }
    let mut moments = BTreeMap::new();
    for m in &header.moments {
        let mm = r.take(m.len)?;
        let vv = r.take(m.len)?;
        moments.insert(
            ParamKey {
                store: m.store,
                index: m.index,
            },
            Moments {
                step: m.step,
                m: mm,
                v: vv,
            },
        );
    }
    let [b1, b2, eps] = header.adam;
    let mut optimizer = Adam::new(b1, b2, eps);
    optimizer.set_state(moments);
    let teacher = if header.teacher {
        let mut tm = Model::<f32>::new(&cfg, hp.seed)?;
        for (meta, dst) in header.stores.iter().zip(tm.stores_mut()) {
            r.store(meta, dst)?;
        }
        let codes = prebuild_inference_codes(&tm, hp.prebuild_samples, hp.seed)?;
        Some(Teacher::new(&tm, codes))
    } else {
        None
    };
    if r.pos != payload.len() {
        return Err(invalid("payload length does not match the header".into()));
    }
    let best = header
        .best
        .map(|b| {
            Ok::<_, CliError>(BestRecord {
                score: b.score,
                iteration: b.iteration,
                phase: parse_phase(&b.phase)?,
            })
        })
        .transpose()?;
    let state = ModelState {
        model,
        optimizer,
        iteration: header.iteration,
        learning_rate: header.learning_rate,
        best,
        phase: parse_phase(&header.phase)?,
        teacher,
    };
    Ok(Checkpoint {
        config: header.config,
        state,
    })
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save(path: &Path, config: &RunConfig, state: &ModelState<f32>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).at(&tmp)?;
    f.write_all(&encode(config, state)).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes).map_err(|e| match e {
        CliError::Core(adaseg_core::Error::InvalidCheckpoint(m)) => {
            invalid(format!("{}: {m}", path.display()))
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> RunConfig {
        let mut c = RunConfig::desk();
        (
            c.img_size,
            c.width,
            c.max_width,
            c.n_down,
            c.n_mid,
            c.mlp_hidden,
        ) = (8, 8, 16, 2, 1, 8);
        c.prebuild_samples = 3;
        c
    }

    #[test]
    fn round_trip_preserves_state() {
        let c = micro();
        let mut st = ModelState::<f32>::new(&c.model(), &c.hyper_params()).unwrap();
        st.iteration = 17;
        st.best = Some(BestRecord {
            score: 0.5,
            iteration: 10,
            phase: Phase::Joint,
        });
        let codes = prebuild_inference_codes(&st.model, 3, c.seed).unwrap();
        st.teacher = Some(Teacher::new(&st.model, codes));
        let back = decode(&encode(&c, &st)).unwrap();
        assert_eq!(back.config, c);
        assert_eq!(back.state.model.fingerprint(), st.model.fingerprint());
        assert_eq!(back.state.iteration, 17);
        assert_eq!(back.state.best, st.best);
        let (a, b) = (back.state.teacher.unwrap(), st.teacher.unwrap());
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn version_mismatch_and_corruption_fail() {
        let c = micro();
        let st = ModelState::<f32>::new(&c.model(), &c.hyper_params()).unwrap();
        let mut bytes = encode(&c, &st);
        let mut other = bytes.clone();
        other[8] = 2;
        let e = decode(&other).unwrap_err();
        assert!(e.to_string().contains("version 2"), "{e}");
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("corrupted"));
        assert!(decode(&bytes[..n / 2]).is_err());
    }
}
