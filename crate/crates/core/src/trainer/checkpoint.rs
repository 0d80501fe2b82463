//! On-disk checkpoints: a JSON manifest next to one flat little-endian
//! `f32` blob.
//!
//! Tensor names carry a component prefix (`encoder.`, `head.`, `critic.`,
//! `target.`, `classifier.`). Saving the same state twice produces
//! byte-identical files.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::consistency::{ConsistencyHead, DiffusionSchedule};
use crate::critic::CriticEnsemble;
use crate::encoder::{EncoderBackbone, EncoderConfig};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Parameters};
use crate::reward::SuccessClassifier;
use crate::types::{TrainConfig, REWARD_STEP, REWARD_SUCCESS};

use super::Agent;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "conrft";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Offline,
    Online,
    Sft,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Offline => "offline",
            Stage::Online => "online",
            Stage::Sft => "sft",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

/// A policy with everything needed to run or resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub env: EnvKind,
    pub stage: Stage,
    pub config: TrainConfig,
    pub backbone: EncoderBackbone,
    pub agent: Agent,
}

fn hidden_dims(mlp: &Mlp<f32>) -> Vec<usize> {
    let d = mlp.dims();
    d[1..d.len() - 1].to_vec()
}

type Group<'a> = (&'static str, Vec<(String, Vec<usize>, &'a [f32])>);

fn write_bundle(dir: &Path, mut manifest: Value, groups: Vec<Group<'_>>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (prefix, tensors) in groups {
        for (name, shape, data) in tensors {
            let offset = blob.len();
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                shape,
                dtype: "f32".into(),
                offset,
                nbytes: blob.len() - offset,
            });
        }
    }
    manifest["format"] = json!(FORMAT);
    manifest["version"] = json!(VERSION);
    manifest["tensors"] = serde_json::to_value(&entries)?;
    fs::write(dir.join(PARAMS_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

struct Bundle {
    manifest: Value,
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

fn read_bundle(dir: &Path) -> Result<Bundle> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("manifest is not valid JSON: {e}")))?;
    if manifest["format"] != FORMAT {
        return Err(Error::Checkpoint(format!("unrecognized manifest format {}", manifest["format"])));
    }
    if manifest["version"] != VERSION {
        return Err(Error::Checkpoint(format!("unsupported manifest version {}", manifest["version"])));
    }
    let entries: Vec<TensorEntry> = serde_json::from_value(manifest["tensors"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad tensor table: {e}")))?;
    let blob = fs::read(dir.join(PARAMS_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(PARAMS_FILE).display())))?;
    Ok(Bundle { manifest, entries, blob })
}

impl Bundle {
    fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        serde_json::from_value(self.manifest[key].clone())
            .map_err(|e| Error::Checkpoint(format!("manifest field `{key}`: {e}")))
    }

    /// Copies the `prefix.*` tensors into `p`, checking names, shapes and
    /// byte ranges against the model.
    fn fill<P: Parameters<f32>>(&self, prefix: &str, p: &mut P) -> Result<()> {
        let wanted: Vec<(String, Vec<usize>)> =
            p.tensors().into_iter().map(|(n, s, _)| (format!("{prefix}.{n}"), s)).collect();
        for ((name, shape), dst) in wanted.into_iter().zip(p.tensors_mut()) {
            let e = self
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is missing")))?;
            if e.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} in the manifest but the model expects {shape:?}",
                    e.shape
                )));
            }
            if e.dtype != "f32" || e.nbytes != 4 * dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` declares {} bytes of {}, expected {} bytes of f32",
                    e.nbytes,
                    e.dtype,
                    4 * dst.len()
                )));
            }
            let end = e.offset.saturating_add(e.nbytes);
            if end > self.blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` at offset {} needs {} bytes but {PARAMS_FILE} has {}",
                    e.offset,
                    e.nbytes,
                    self.blob.len()
                )));
            }
            for (v, b) in dst.iter_mut().zip(self.blob[e.offset..end].chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        Ok(())
    }

    fn backbone(&self) -> Result<EncoderBackbone> {
        let config: EncoderConfig = self.field("encoder_config")?;
        let mut b = EncoderBackbone::new(config, 0)?;
        self.fill("encoder", &mut b)?;
        let want: String = self.field("encoder_fingerprint")?;
        let got = b.fingerprint();
        if want != got {
            return Err(Error::Checkpoint(format!(
                "encoder fingerprint mismatch: manifest says {want}, weights hash to {got}"
            )));
        }
        Ok(b)
    }
}

fn backbone_meta(b: &EncoderBackbone) -> Value {
    json!({
        "encoder_config": b.config,
        "encoder_fingerprint": b.fingerprint(),
    })
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let a = &self.agent;
        let mut meta = backbone_meta(&self.backbone);
        meta["kind"] = json!("policy");
        meta["env"] = json!(self.env);
        meta["stage"] = json!(self.stage);
        meta["train_config"] = serde_json::to_value(&self.config)?;
        meta["schedule"] = serde_json::to_value(&a.schedule)?;
        meta["action_dim"] = json!(a.head.action_dim);
        meta["embed_dim"] = json!(a.head.embed_dim);
        meta["proprio_dim"] = json!(a.critic.proprio_dim);
        meta["head_hidden"] = json!(hidden_dims(&a.head.net));
        meta["critic_members"] = json!(a.critic.len());
        meta["critic_hidden"] = json!(hidden_dims(&a.critic.members[0]));
        meta["critic_layer_norm"] = json!(a.critic.layer_norm());
        write_bundle(
            dir,
            meta,
            vec![
                ("encoder", self.backbone.tensors()),
                ("head", a.head.tensors()),
                ("critic", a.critic.members.tensors()),
                ("target", a.critic.targets.tensors()),
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let b = read_bundle(dir)?;
        if b.manifest["kind"] != "policy" {
            return Err(Error::Checkpoint(format!("{} is not a policy checkpoint", dir.display())));
        }
        let backbone = b.backbone()?;
        let schedule: DiffusionSchedule = b.field::<DiffusionSchedule>("schedule")?.rebuilt()?;
        let (a, e, p): (usize, usize, usize) =
            (b.field("action_dim")?, b.field("embed_dim")?, b.field("proprio_dim")?);
        if e != backbone.embed_dim() {
            return Err(Error::Checkpoint(format!(
                "head expects {e}-dimensional embeddings, encoder produces {}",
                backbone.embed_dim()
            )));
        }
        let head_hidden: Vec<usize> = b.field("head_hidden")?;
        let critic_hidden: Vec<usize> = b.field("critic_hidden")?;
        let members: usize = b.field("critic_members")?;
        // weights are overwritten below; the generator only shapes them
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut head = ConsistencyHead::with_dims(a, e, &head_hidden, &schedule, &mut rng);
        let mut critic =
            CriticEnsemble::new(members, e, p, a, &critic_hidden, &mut rng).with_layer_norm(b.field("critic_layer_norm")?);
        b.fill("head", &mut head)?;
        b.fill("critic", &mut critic.members)?;
        b.fill("target", &mut critic.targets)?;
        Ok(Self {
            env: b.field("env")?,
            stage: b.field("stage")?,
            config: b.field("train_config")?,
            backbone,
            agent: Agent { head, critic, schedule },
        })
    }
}

pub fn save_backbone(backbone: &EncoderBackbone, dir: &Path) -> Result<()> {
    let mut meta = backbone_meta(backbone);
    meta["kind"] = json!("encoder");
    write_bundle(dir, meta, vec![("encoder", backbone.tensors())])
}

/// Loads the encoder of any bundle that carries one.
pub fn load_backbone(dir: &Path) -> Result<EncoderBackbone> {
    read_bundle(dir)?.backbone()
}

/// The classifier is stored with the fingerprint of the encoder it was
/// trained on.
pub fn save_classifier(c: &SuccessClassifier, backbone: &EncoderBackbone, dir: &Path) -> Result<()> {
    let meta = json!({
        "kind": "classifier",
        "encoder_fingerprint": backbone.fingerprint(),
        "dims": c.net.dims(),
        "threshold": c.threshold,
        "reward_success": c.reward_success,
        "reward_step": c.reward_step,
    });
    write_bundle(dir, meta, vec![("classifier", c.net.tensors())])
}

/// Fails unless `backbone` is the encoder the classifier was trained on.
pub fn load_classifier(dir: &Path, backbone: &EncoderBackbone) -> Result<SuccessClassifier> {
    let b = read_bundle(dir)?;
    if b.manifest["kind"] != "classifier" {
        return Err(Error::Checkpoint(format!("{} is not a classifier bundle", dir.display())));
    }
    let want: String = b.field("encoder_fingerprint")?;
    if want != backbone.fingerprint() {
        return Err(Error::Checkpoint(
            "classifier was trained on a different encoder (fingerprint mismatch)".into(),
        ));
    }
    let dims: Vec<usize> = b.field("dims")?;
    if dims.len() < 2 || dims[0] != backbone.embed_dim() || dims[dims.len() - 1] != 1 {
        return Err(Error::Checkpoint(format!("classifier has unusable layer sizes {dims:?}")));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = Mlp::new(&dims, &mut rng);
    b.fill("classifier", &mut net)?;
    Ok(SuccessClassifier {
        net,
        threshold: b.field("threshold")?,
        reward_success: b.field::<Option<f64>>("reward_success")?.unwrap_or(REWARD_SUCCESS),
        reward_step: b.field::<Option<f64>>("reward_step")?.unwrap_or(REWARD_STEP),
    })
}
