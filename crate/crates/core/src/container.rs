//! Little-endian binary containers.
//!
//! Every file opens with a 4-byte magic and a `u32` format version.
//!
//! Scene sets (`GGMM`):
//!
//! ```text
//! magic "GGMM" | version u32 | classes u32 | raw_dim u32 | height u32 | width u32 | scenes u32
//! per scene: split u8 (0 source, 1 target, 2 held-out) | id u64
//!            features f32 x (height * width * raw_dim), pixel-major
//!            labels (kind u8, class u8) x (height * width)
//!            truth u16 x (height * width)
//! ```
//!
//! Label kinds: 0 unlabeled, 1 full, 2 point, 3 coarse, 4 noisy.
//!
//! Mixture banks (`GGMB`):
//!
//! ```text
//! magic "GGMB" | version u32 | classes u32 | components u32 | dim u32
//! per class: present u8
//!            [weights f64 x M | means f64 x M*D | variances f64 x M*D | starved u32 x M]
//!            queue length u32 | entries f64 x D each, oldest first
//! ```
//!
//! Target state (`GGMT`):
//!
//! ```text
//! magic "GGMT" | version u32 | classes u32 | dim u32
//! source prior f64 x C | target prior f64 x C
//! per class: present u8 [prototype f64 x D] | queue length u32 | entries f64 x D each
//! ```
//!
//! Checkpoints (`GGMK`) hold the run and training configs as length-prefixed
//! JSON, the step counters, the sampling RNG position, student, teacher and
//! optimizer velocity as flat `f64` parameter vectors, and a nested bank and
//! target container, each prefixed by its byte length (`u64`).

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gmm::{ClassGmm, GmmBank};
use crate::model::{Model, ModelShape, TeacherStudent};
use crate::synth::Dataset;
use crate::target::TargetState;
use crate::trainer::TrainConfig;
use crate::types::{Domain, LabelState, RunConfig, Scene};

pub const FORMAT_VERSION: u32 = 1;

const SCENES_MAGIC: &[u8; 4] = b"GGMM";
const BANK_MAGIC: &[u8; 4] = b"GGMB";
const TARGET_MAGIC: &[u8; 4] = b"GGMT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"GGMK";

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn header(magic: &[u8; 4]) -> Self {
        let mut e = Self::default();
        e.0.extend_from_slice(magic);
        e.u32(FORMAT_VERSION);
        e
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn blob(&mut self, bytes: &[u8]) {
        self.u64(bytes.len() as u64);
        self.0.extend_from_slice(bytes);
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut d = Self { buf, pos: 0 };
        let found = d.take(4)?;
        if found != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(found)
            )));
        }
        let version = d.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        // checks the length before allocating
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Format("blob too large".into()))?;
        self.take(n)
    }

    fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

fn queue_encode(e: &mut Encoder, queue: &VecDeque<Vec<f64>>) -> Result<()> {
    e.len(queue.len())?;
    for entry in queue {
        e.f64s(entry);
    }
    Ok(())
}

fn queue_decode(d: &mut Decoder, dim: usize) -> Result<VecDeque<Vec<f64>>> {
    let n = d.len()?;
    (0..n).map(|_| d.f64s(dim)).collect()
}

/// Split tags of the scene container.
const SPLITS: [(u8, Domain); 3] = [(0, Domain::Source), (1, Domain::Target), (2, Domain::Target)];

pub fn encode_dataset(data: &Dataset, num_classes: usize) -> Result<Vec<u8>> {
    if num_classes == 0 || num_classes > 256 {
        return Err(Error::Format(format!("{num_classes} classes do not fit the u8 label encoding")));
    }
    let splits = [&data.source, &data.target, &data.heldout];
    let first = splits
        .iter()
        .find_map(|s| s.first())
        .ok_or_else(|| Error::Format("dataset has no scenes".into()))?;
    let (h, w, d) = (first.height(), first.width(), first.raw_dim());
    let count: usize = splits.iter().map(|s| s.len()).sum();
    let mut e = Encoder::header(SCENES_MAGIC);
    for v in [num_classes, d, h, w, count] {
        e.len(v)?;
    }
    for (scenes, (tag, _)) in splits.iter().zip(SPLITS) {
        for scene in scenes.iter() {
            if (scene.height(), scene.width(), scene.raw_dim()) != (h, w, d) {
                return Err(Error::Format(format!("scene {} has a different grid or raw_dim", scene.id())));
            }
            e.u8(tag);
            e.u64(scene.id() as u64);
            for &v in scene.raw_features() {
                e.f32(v);
            }
            for &label in scene.labels() {
                e.u8(label.kind_byte());
                e.u8(label.class().unwrap_or(0) as u8);
            }
            for &t in scene.ground_truth() {
                e.u16(t);
            }
        }
    }
    Ok(e.0)
}

/// Returns the dataset and its class count.
pub fn decode_dataset(bytes: &[u8]) -> Result<(Dataset, usize)> {
    let mut d = Decoder::open(bytes, SCENES_MAGIC)?;
    let classes = d.len()?;
    let (raw_dim, h, w, count) = (d.len()?, d.len()?, d.len()?, d.len()?);
    let pixels = h * w;
    let mut data = Dataset {
        source: Vec::new(),
        target: Vec::new(),
        heldout: Vec::new(),
    };
    for _ in 0..count {
        let tag = d.u8()?;
        let id = d.u64()? as usize;
        let features = d
            .take(pixels * raw_dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut labels = Vec::with_capacity(pixels);
        for _ in 0..pixels {
            let (kind, class) = (d.u8()?, d.u8()?);
            let label = LabelState::from_bytes(kind, class)
                .ok_or_else(|| Error::Format(format!("unknown label kind {kind} in scene {id}")))?;
            if label.class().is_some_and(|c| c >= classes) {
                return Err(Error::Format(format!("label class {class} out of range in scene {id}")));
            }
            labels.push(label);
        }
        let truth: Vec<u16> = (0..pixels).map(|_| d.u16()).collect::<Result<_>>()?;
        if truth.iter().any(|&t| t as usize >= classes) {
            return Err(Error::Format(format!("true class out of range in scene {id}")));
        }
        let (_, domain) = SPLITS
            .iter()
            .find(|(t, _)| *t == tag)
            .ok_or_else(|| Error::Format(format!("unknown split tag {tag}")))?;
        let scene = Scene::new(id, *domain, h, w, raw_dim, features, labels, truth)?;
        match tag {
            0 => data.source.push(scene),
            1 => data.target.push(scene),
            _ => data.heldout.push(scene),
        }
    }
    d.finish()?;
    Ok((data, classes))
}

pub fn encode_bank(bank: &GmmBank) -> Result<Vec<u8>> {
    let mut e = Encoder::header(BANK_MAGIC);
    e.len(bank.num_classes())?;
    e.len(bank.components())?;
    e.len(bank.dim())?;
    for c in 0..bank.num_classes() {
        match bank.gmm(c) {
            Some(g) => {
                e.u8(1);
                e.f64s(g.weights());
                g.means().iter().for_each(|m| e.f64s(m));
                g.variances().iter().for_each(|v| e.f64s(v));
                g.starved().iter().for_each(|&s| e.u32(s));
            }
            None => e.u8(0),
        }
        queue_encode(&mut e, bank.queue(c))?;
    }
    Ok(e.0)
}

/// Restores a bank for `cfg`, whose class count, components and embedding
/// size must match the stored ones.
pub fn decode_bank(bytes: &[u8], cfg: &RunConfig) -> Result<GmmBank> {
    let mut d = Decoder::open(bytes, BANK_MAGIC)?;
    let (c, m, dim) = (d.len()?, d.len()?, d.len()?);
    if (c, m, dim) != (cfg.num_classes, cfg.components, cfg.embed_dim) {
        return Err(Error::Format(format!(
            "bank shape {c}x{m}x{dim} does not match the config ({}x{}x{})",
            cfg.num_classes, cfg.components, cfg.embed_dim
        )));
    }
    let mut gmms = Vec::with_capacity(c);
    let mut queues = Vec::with_capacity(c);
    for class in 0..c {
        let gmm = match d.u8()? {
            0 => None,
            1 => {
                let weights = d.f64s(m)?;
                let means = (0..m).map(|_| d.f64s(dim)).collect::<Result<_>>()?;
                let variances = (0..m).map(|_| d.f64s(dim)).collect::<Result<_>>()?;
                let starved = (0..m).map(|_| d.u32()).collect::<Result<_>>()?;
                Some(ClassGmm::from_stored(class, weights, means, variances, cfg.var_floor, starved)?)
            }
            flag => return Err(Error::Format(format!("bad presence flag {flag}"))),
        };
        gmms.push(gmm);
        queues.push(queue_decode(&mut d, dim)?);
    }
    d.finish()?;
    let mut bank = GmmBank::new(cfg);
    bank.restore_parts(gmms, queues)?;
    Ok(bank)
}

pub fn encode_target(state: &TargetState) -> Result<Vec<u8>> {
    let mut e = Encoder::header(TARGET_MAGIC);
    e.len(state.num_classes())?;
    e.len(state.dim())?;
    e.f64s(state.source_prior());
    e.f64s(state.target_prior());
    for c in 0..state.num_classes() {
        match state.prototype(c) {
            Some(p) => {
                e.u8(1);
                e.f64s(p);
            }
            None => e.u8(0),
        }
        queue_encode(&mut e, state.queue(c))?;
    }
    Ok(e.0)
}

pub fn decode_target(bytes: &[u8], cfg: &RunConfig) -> Result<TargetState> {
    let mut d = Decoder::open(bytes, TARGET_MAGIC)?;
    let (c, dim) = (d.len()?, d.len()?);
    if (c, dim) != (cfg.num_classes, cfg.embed_dim) {
        return Err(Error::Format(format!("target state shape {c}x{dim} does not match the config")));
    }
    let source_prior = d.f64s(c)?;
    let target_prior = d.f64s(c)?;
    let mut prototypes = Vec::with_capacity(c);
    let mut queues = Vec::with_capacity(c);
    for _ in 0..c {
        prototypes.push(match d.u8()? {
            0 => None,
            1 => Some(d.f64s(dim)?),
            flag => return Err(Error::Format(format!("bad presence flag {flag}"))),
        });
        queues.push(queue_decode(&mut d, dim)?);
    }
    d.finish()?;
    let mut state = TargetState::new(cfg);
    state.restore_parts(prototypes, queues, source_prior, target_prior)?;
    Ok(state)
}

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub train: TrainConfig,
    pub iteration: usize,
    pub teacher_updates: u64,
    pub rng: RngState,
    pub pair: TeacherStudent,
    pub velocity: Model,
    pub bank: GmmBank,
    pub target: TargetState,
}

fn json_blob<T: serde::Serialize>(e: &mut Encoder, value: &T) -> Result<()> {
    e.blob(&serde_json::to_vec(value)?);
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut e = Encoder::header(CHECKPOINT_MAGIC);
    json_blob(&mut e, &ck.run)?;
    json_blob(&mut e, &ck.train)?;
    e.u64(ck.iteration as u64);
    e.u64(ck.teacher_updates);
    e.0.extend_from_slice(&ck.rng.seed);
    e.u64(ck.rng.stream);
    e.0.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    let shape = ck.pair.student.shape();
    for v in [shape.raw_dim, shape.hidden, shape.embed, shape.classes] {
        e.len(v)?;
    }
    for model in [&ck.pair.student, &ck.pair.teacher, &ck.velocity] {
        e.f64s(&model.to_flat());
    }
    e.blob(&encode_bank(&ck.bank)?);
    e.blob(&encode_target(&ck.target)?);
    Ok(e.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut d = Decoder::open(bytes, CHECKPOINT_MAGIC)?;
    let run: RunConfig = serde_json::from_slice(d.blob()?)?;
    let train: TrainConfig = serde_json::from_slice(d.blob()?)?;
    let iteration = d.u64()? as usize;
    let teacher_updates = d.u64()?;
    let rng = RngState {
        seed: d.array()?,
        stream: d.u64()?,
        word_pos: u128::from_le_bytes(d.array()?),
    };
    let shape = ModelShape {
        raw_dim: d.len()?,
        hidden: d.len()?,
        embed: d.len()?,
        classes: d.len()?,
    };
    if shape.embed != run.embed_dim || shape.classes != run.num_classes || shape.hidden != train.hidden_dim {
        return Err(Error::Format("model shape does not match the stored config".into()));
    }
    let mut models = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut m = Model::zeros(shape);
        m.set_flat(&d.f64s(m.num_params())?);
        models.push(m);
    }
    let velocity = models.pop().expect("three models");
    let teacher = models.pop().expect("three models");
    let student = models.pop().expect("three models");
    let bank = decode_bank(d.blob()?, &run)?;
    let target = decode_target(d.blob()?, &run)?;
    d.finish()?;
    Ok(Checkpoint {
        run,
        train,
        iteration,
        teacher_updates,
        rng,
        pair: TeacherStudent { student, teacher },
        velocity,
        bank,
        target,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::from)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::from)
}
