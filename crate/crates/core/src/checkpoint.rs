//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BNCK" | version u32 | spec_len u32 | spec (TOML) | meta_len u32 | meta (TOML)
//!        | count u32 | count × blob | SHA-256 of everything before it (32 bytes)
//! blob = name_len u16 | name | dtype u8 (0 = f32) | shape 4 × u32 | data (f32 LE)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::SelectionReport;
use crate::error::{Error, Result};
use crate::metrics::EpochMetrics;
use crate::network::{BranchState, NetworkSpec, ParamRole, Params, Student, Teacher};
use crate::tensor::Tensor;
use crate::train::{Optimizer, OptimizerKind, Slot, TrainState};

pub const MAGIC: &[u8; 4] = b"BNCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchMeta {
    pub block: usize,
    pub branch: usize,
    pub state: String,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub weight_decay: f32,
    /// Update count per parameter slot.
    pub steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub epochs_done: usize,
    pub step: u64,
    #[serde(default)]
    pub branches: Vec<BranchMeta>,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
    #[serde(default)]
    pub selection: Option<SelectionReport>,
    #[serde(default)]
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub meta: CheckpointMeta,
    /// `param:<name>`, `buffer:<name>`, `opt.m:<name>`, `opt.v:<name>`.
    pub tensors: BTreeMap<String, Tensor>,
}

fn collect_model<P: Params + ?Sized>(model: &P, tensors: &mut BTreeMap<String, Tensor>) {
    model.visit(&mut |m, t| {
        tensors.insert(format!("param:{}", m.name), t.clone());
    });
    model.visit_buffers(&mut |name, t| {
        tensors.insert(format!("buffer:{name}"), t.clone());
    });
}

fn base_meta(kind: ModelKind, state: Option<&TrainState>, tensors: &mut BTreeMap<String, Tensor>) -> CheckpointMeta {
    let optimizer = state.map(|s| {
        let mut steps = BTreeMap::new();
        for (name, slot) in &s.optimizer.slots {
            steps.insert(name.clone(), slot.steps);
            tensors.insert(format!("opt.m:{name}"), slot.m.clone());
            tensors.insert(format!("opt.v:{name}"), slot.v.clone());
        }
        OptimizerMeta {
            kind: s.optimizer.kind,
            weight_decay: s.optimizer.weight_decay,
            steps,
        }
    });
    CheckpointMeta {
        kind,
        epochs_done: state.map_or(0, |s| s.epochs_done),
        step: state.map_or(0, |s| s.step),
        branches: Vec::new(),
        optimizer,
        selection: None,
        history: state.map(|s| s.history.clone()).unwrap_or_default(),
    }
}

impl Checkpoint {
    pub fn from_teacher(teacher: &Teacher, state: Option<&TrainState>) -> Self {
        let mut tensors = BTreeMap::new();
        collect_model(teacher, &mut tensors);
        let meta = base_meta(ModelKind::Teacher, state, &mut tensors);
        Checkpoint {
            spec: teacher.spec.clone(),
            meta,
            tensors,
        }
    }

    pub fn from_student(student: &Student, state: Option<&TrainState>, selection: Option<&SelectionReport>) -> Self {
        let mut tensors = BTreeMap::new();
        collect_model(student, &mut tensors);
        let mut meta = base_meta(ModelKind::Student, state, &mut tensors);
        meta.branches = student
            .branches()
            .map(|(i, k, b)| BranchMeta {
                block: i,
                branch: k,
                state: b.state.as_str().to_string(),
                selected: b.selected.clone(),
            })
            .collect();
        meta.selection = selection.cloned();
        Checkpoint {
            spec: student.spec.clone(),
            meta,
            tensors,
        }
    }

    /// Errors unless the checkpoint was written for exactly `spec`.
    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        if &self.spec != spec {
            return Err(Error::config(format!(
                "checkpoint network {:?} ({} shortcut branches) does not match requested network {:?} ({} shortcut branches)",
                self.spec.name,
                self.spec.num_shortcuts(),
                spec.name,
                spec.num_shortcuts()
            )));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::config(format!(
                "checkpoint holds a {:?}, expected a {kind:?}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    fn fill<P: Params + ?Sized>(&self, model: &mut P) -> Result<()> {
        let mut used = BTreeSet::new();
        let mut err = None;
        model.visit_mut(&mut |m, t| {
            let key = format!("param:{}", m.name);
            match self.tensors.get(&key) {
                Some(v) => {
                    // shortcut tensors are resized by selection; all others are fixed by the spec
                    let resizable = matches!(m.role, ParamRole::Shortcut { .. });
                    if !resizable && v.shape() != t.shape() {
                        err.get_or_insert(Error::config(format!(
                            "checkpoint tensor {} has shape {:?}, network expects {:?}",
                            m.name,
                            v.shape(),
                            t.shape()
                        )));
                    }
                    *t = v.clone();
                    used.insert(key);
                }
                None => {
                    err.get_or_insert(Error::config(format!("checkpoint lacks parameter {}", m.name)));
                }
            }
        });
        model.visit_buffers_mut(&mut |name, t| {
            let key = format!("buffer:{name}");
            match self.tensors.get(&key) {
                Some(v) if v.shape() == t.shape() => {
                    *t = v.clone();
                    used.insert(key);
                }
                _ => {
                    err.get_or_insert(Error::config(format!("checkpoint lacks a matching buffer {name}")));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let extra: Vec<&String> = self
            .tensors
            .keys()
            .filter(|k| (k.starts_with("param:") || k.starts_with("buffer:")) && !used.contains(*k))
            .collect();
        if !extra.is_empty() {
            return Err(Error::config(format!(
                "checkpoint has tensors the network does not: {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn to_teacher(&self) -> Result<Teacher> {
        self.expect_kind(ModelKind::Teacher)?;
        let mut t = Teacher::new(&self.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.fill(&mut t)?;
        Ok(t)
    }

    pub fn to_student(&self) -> Result<Student> {
        self.expect_kind(ModelKind::Student)?;
        let mut s = Student::new(&self.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = s.branches().count();
        if self.meta.branches.len() != expected {
            return Err(Error::config(format!(
                "checkpoint describes {} shortcut branches, network has {expected}",
                self.meta.branches.len()
            )));
        }
        for bm in &self.meta.branches {
            let block = s
                .blocks
                .get_mut(bm.block)
                .and_then(|b| b.shortcuts.get_mut(bm.branch))
                .ok_or_else(|| Error::Corruption(format!("branch ({}, {}) not in network", bm.block, bm.branch)))?;
            block.state = BranchState::parse(&bm.state)?;
            block.selected = bm.selected.clone();
            match block.state {
                BranchState::Selected | BranchState::Sparsified => {
                    block.interaction = Some(Tensor::zeros([1, 1, 1, 1]))
                }
                BranchState::Dead => block.interaction = None,
                BranchState::Dense => {}
            }
        }
        self.fill(&mut s)?;
        for (i, k, b) in s.branches() {
            let sz = b.selected.len();
            let ok = b.gamma.shape()[0] == sz
                && b.omega.shape() == [1, sz, 1, 1]
                && b.interaction.as_ref().is_none_or(|t| t.shape() == [sz, b.c_out, 1, 1])
                && b.selected.iter().all(|&c| c < b.c_out);
            if !ok {
                return Err(Error::Corruption(format!(
                    "block {i} shortcut {k}: tensors inconsistent with {sz} selected channels"
                )));
            }
        }
        Ok(s)
    }

    /// Optimizer and progress stored with the checkpoint, or a fresh state.
    pub fn train_state(&self, kind: OptimizerKind, weight_decay: f32) -> TrainState {
        let optimizer = match &self.meta.optimizer {
            Some(o) => Optimizer {
                kind: o.kind,
                weight_decay: o.weight_decay,
                slots: o
                    .steps
                    .iter()
                    .filter_map(|(name, &steps)| {
                        let m = self.tensors.get(&format!("opt.m:{name}"))?;
                        let v = self.tensors.get(&format!("opt.v:{name}"))?;
                        Some((
                            name.clone(),
                            Slot {
                                steps,
                                m: m.clone(),
                                v: v.clone(),
                            },
                        ))
                    })
                    .collect(),
            },
            None => Optimizer::new(kind, weight_decay),
        };
        TrainState {
            optimizer,
            epochs_done: self.meta.epochs_done,
            step: self.meta.step,
            history: self.meta.history.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for doc in [
            self.spec.to_toml(),
            toml::to_string(&self.meta).expect("checkpoint meta serialises"),
        ] {
            out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
            out.extend_from_slice(doc.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + CHECKSUM_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Corruption("not a checkpoint (bad magic or too short)".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Corruption("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let spec_len = r.u32()? as usize;
        let spec = NetworkSpec::from_toml(r.str(spec_len)?).map_err(|e| Error::Corruption(format!("spec: {e}")))?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            toml::from_str(r.str(meta_len)?).map_err(|e| Error::Corruption(format!("meta: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.str(name_len)?.to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Corruption(format!("tensor {name}: unknown dtype {dtype}")));
            }
            let shape = [
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
            ];
            let n = shape.iter().product::<usize>();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Corruption("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::from_parts(shape, data));
        }
        if r.pos != body.len() {
            return Err(Error::Corruption(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { spec, meta, tensors })
    }

    /// SHA-256 of the encoded checkpoint (its trailing 32 bytes).
    pub fn checksum(&self) -> [u8; 32] {
        let bytes = self.encode();
        bytes[bytes.len() - CHECKSUM_LEN..].try_into().expect("32-byte digest")
    }

    /// Writes atomically: a temporary sibling file renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingData(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary file next to `path` and renames it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Corruption(format!("invalid utf-8 at byte {at}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{select_channels, SelectionPolicy};

    fn student(k: usize) -> Student {
        Student::new(&NetworkSpec::toy().with_shortcuts(k), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn student_round_trip_is_bit_exact() {
        let mut s = student(2);
        let report = select_channels(&mut s, &SelectionPolicy::global(0.3)).unwrap();
        let ck = Checkpoint::from_student(&s, None, Some(&report));
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_student().unwrap(), s);
        assert_eq!(back.meta.selection.as_ref(), Some(&report));
    }

    #[test]
    fn dead_branches_round_trip() {
        let mut s = student(1);
        select_channels(&mut s, &SelectionPolicy::global(0.0)).unwrap();
        assert!(s.branches().all(|(_, _, b)| b.state == BranchState::Dead));
        let back = Checkpoint::decode(&Checkpoint::from_student(&s, None, None).encode())
            .unwrap()
            .to_student()
            .unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn teacher_round_trip_keeps_logits() {
        let spec = NetworkSpec::toy();
        let mut t = Teacher::new(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::normal([2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut back = Checkpoint::decode(&Checkpoint::from_teacher(&t, None).encode())
            .unwrap()
            .to_teacher()
            .unwrap();
        assert!(t.features(&x).unwrap().1.bit_eq(&back.features(&x).unwrap().1));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let bytes = Checkpoint::from_student(&student(1), None, None).encode();
        for at in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x10;
            assert!(
                matches!(Checkpoint::decode(&bad), Err(Error::Corruption(_))),
                "byte {at}"
            );
        }
    }

    #[test]
    fn newer_version_is_reported() {
        let mut bytes = Checkpoint::from_student(&student(0), None, None).encode();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - CHECKSUM_LEN;
        let sum = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&sum);
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::UnsupportedVersion { found: 7, supported: 1 })
        ));
    }

    #[test]
    fn k1_checkpoint_rejects_k0_spec() {
        let ck = Checkpoint::from_student(&student(1), None, None);
        assert!(matches!(ck.check_spec(&NetworkSpec::toy()), Err(Error::Config(_))));
        let mut wrong = ck.clone();
        wrong.spec = NetworkSpec::toy();
        wrong.meta.branches.clear();
        assert!(matches!(wrong.to_student(), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_kind_is_config_error() {
        let ck = Checkpoint::from_student(&student(0), None, None);
        assert!(matches!(ck.to_teacher(), Err(Error::Config(_))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_student(&student(1), None, None);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("nope")),
            Err(Error::MissingData(_))
        ));
    }
}
