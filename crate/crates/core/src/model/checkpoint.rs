//! Versioned binary checkpoint container.
//!
//! Layout: `b"TTCKPT\0\0"`, little-endian `u32` version, then the bincode
//! body (config, vocabulary, named parameters, training metadata, optional
//! dataset manifest text).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, Policy, PolicyConfig, Result, Vocabulary};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TTCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// `init`, `pretrain`, `pretrain2` or `finetune`.
    pub phase: String,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Body {
    config: PolicyConfig,
    vocab: Vocabulary,
    params: Vec<(String, Tensor<f32>)>,
    meta: TrainingMeta,
    manifest: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub policy: Policy,
    pub meta: TrainingMeta,
    /// Asset manifest of the data the policy was trained on.
    pub manifest: Option<String>,
}

impl Checkpoint {
    pub fn new(policy: Policy, meta: TrainingMeta, manifest: Option<String>) -> Self {
        Self { policy, meta, manifest }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = Body {
            config: self.policy.config.clone(),
            vocab: self.policy.vocab.clone(),
            params: self
                .policy
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            meta: self.meta.clone(),
            manifest: self.manifest.clone(),
        };
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend(bincode::serialize(&body).expect("checkpoint body serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let body: Body = bincode::deserialize(&bytes[12..]).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let policy = Policy::from_parts(body.config, body.vocab, body.params)?;
        Ok(Self {
            policy,
            meta: body.meta,
            manifest: body.manifest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::policy::tests::{tiny_policy_config, tiny_task_config};
    use crate::model::PromptMode;
    use crate::tasks::{Level, TaskSuite, TaskType};

    fn checkpoint() -> Checkpoint {
        let cfg = tiny_task_config();
        let policy = Policy::new(tiny_policy_config(cfg.sim), Vocabulary::standard(&cfg.sim), 9).unwrap();
        let meta = TrainingMeta {
            phase: "init".into(),
            step: 0,
            seed: 9,
        };
        Checkpoint::new(policy, meta, Some("level = L1\n".into()))
    }

    #[test]
    fn reload_preserves_forward_bitwise() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.policy.params, ck.policy.params);
        let suite = TaskSuite::new(tiny_task_config()).unwrap();
        let inst = suite.generate(TaskType::PutInto, Level::L1, 3).unwrap();
        let a = ck.policy.prompt_encode(&inst.prompt, PromptMode::LmPlusRc).unwrap();
        let b = back.policy.prompt_encode(&inst.prompt, PromptMode::LmPlusRc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn digest_is_stable_and_matches_file() {
        let ck = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        ck.save(&p1).unwrap();
        Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
        let (f1, f2) = (fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(f1, f2);
        // independent hash of the file bytes
        let oracle: String = Sha256::digest(&f1).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(ck.digest(), oracle);
    }

    #[test]
    fn rejects_unknown_version_and_garbage() {
        let mut bytes = checkpoint().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::Version { found: 7, .. })));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(ModelError::Corrupt(_))));
        let mut cut = checkpoint().to_bytes();
        cut.truncate(cut.len() / 2);
        assert!(matches!(Checkpoint::from_bytes(&cut), Err(ModelError::Corrupt(_))));
    }
}
