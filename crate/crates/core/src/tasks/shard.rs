//! Dataset shard container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! b"TTSHARD\0" | u32 version | u32 manifest_len | manifest (key = value text)
//! u64 record_count | { u64 len | bincode(Record) } * record_count
//! ```
//!
//! Records are written in canonical `(task, level, seed)` order so identical
//! content always produces identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Level, Result, TaskError, TaskInstance, TaskSplit, TaskType, Trajectory};
use crate::sim::{AssetKind, SimConfig};

pub const SHARD_MAGIC: &[u8; 8] = b"TTSHARD\0";
pub const SHARD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub level: Level,
    pub split: TaskSplit,
    pub sim: SimConfig,
    pub shapes: Vec<u16>,
    pub textures: Vec<u16>,
    /// Allowed `(shape, texture)` pairs.
    pub combos: Vec<(u16, u16)>,
    pub tasks: Vec<TaskType>,
    pub seed: u64,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn split_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| format!("bad list entry `{x}`")))
        .collect()
}

impl Manifest {
    /// One `key = value` line per field.
    pub fn to_text(&self) -> String {
        let s = &self.sim;
        let mut out = String::new();
        let combos: Vec<String> = self.combos.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        for (k, v) in [
            ("format_version", SHARD_VERSION.to_string()),
            ("level", self.level.to_string()),
            ("split", self.split.name().to_string()),
            ("board_width", s.width.to_string()),
            ("board_height", s.height.to_string()),
            ("patch", s.patch.to_string()),
            ("rotations", s.rotations.to_string()),
            ("num_shapes", s.shapes.to_string()),
            ("num_textures", s.textures.to_string()),
            ("shapes", join(&self.shapes)),
            ("textures", join(&self.textures)),
            ("combos", combos.join(",")),
            ("tasks", tasks.join(",")),
            ("seed", self.seed.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("malformed line `{line}`"))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| format!("missing key `{k}`"));
        let num = |k: &str| -> std::result::Result<usize, String> {
            get(k)?.parse().map_err(|_| format!("bad value for `{k}`"))
        };
        let combos = split_list::<String>(&get("combos")?)?
            .iter()
            .map(|c| {
                let (a, b) = c.split_once(':').ok_or_else(|| format!("bad combo `{c}`"))?;
                Ok((a.parse().map_err(|_| "bad combo")?, b.parse().map_err(|_| "bad combo")?))
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(Self {
            level: get("level")?.parse()?,
            split: get("split")?.parse()?,
            sim: SimConfig {
                width: num("board_width")?,
                height: num("board_height")?,
                patch: num("patch")?,
                rotations: num("rotations")?,
                shapes: num("num_shapes")?,
                textures: num("num_textures")?,
            },
            shapes: split_list(&get("shapes")?)?,
            textures: split_list(&get("textures")?)?,
            combos,
            tasks: split_list(&get("tasks")?)?,
            seed: get("seed")?.parse().map_err(|_| "bad seed".to_string())?,
        })
    }

    /// Whether every object asset and receptacle texture of `instance` is
    /// covered by the manifest pools.
    pub fn covers(&self, instance: &TaskInstance) -> bool {
        let objects_ok = instance.object_assets().iter().all(|p| self.combos.contains(p));
        let receptacles_ok = instance.scene.receptacles.iter().all(|r| self.textures.contains(&r.texture))
            && instance
                .prompt
                .images()
                .flat_map(|i| &i.views)
                .filter(|v| v.asset.kind == AssetKind::Receptacle)
                .all(|v| self.textures.contains(&v.asset.texture));
        objects_ok && receptacles_ok && self.tasks.contains(&instance.task)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub instance: TaskInstance,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard {
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

impl DatasetShard {
    /// Validates manifest coverage and replay validity, then sorts records
    /// canonically.
    pub fn new(manifest: Manifest, mut records: Vec<Record>) -> Result<Self> {
        for r in &records {
            if !manifest.covers(&r.instance) {
                return Err(TaskError::Corrupt(format!(
                    "record {} seed {} uses assets or tasks outside the manifest",
                    r.instance.task, r.instance.seed
                )));
            }
            if !r.trajectory.replay_valid(&manifest.sim) || r.trajectory.scenes[0] != r.instance.scene {
                return Err(TaskError::Corrupt(format!(
                    "record {} seed {} does not replay",
                    r.instance.task, r.instance.seed
                )));
            }
        }
        records.sort_by_key(|r| (r.instance.task, r.instance.level, r.instance.seed));
        Ok(Self { manifest, records })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        let text = self.manifest.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            let bytes = bincode::serialize(r).map_err(|e| TaskError::Corrupt(e.to_string()))?;
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8, "magic")? != SHARD_MAGIC {
            return Err(TaskError::Corrupt("bad magic bytes (not a shard file)".into()));
        }
        let version = cur.u32("version")?;
        if version != SHARD_VERSION {
            return Err(TaskError::Version {
                found: version,
                expected: SHARD_VERSION,
            });
        }
        let len = cur.u32("manifest length")? as usize;
        let text = std::str::from_utf8(cur.take(len, "manifest")?)
            .map_err(|_| TaskError::Corrupt("manifest is not UTF-8".into()))?;
        let manifest = Manifest::from_text(text).map_err(|e| TaskError::Corrupt(format!("manifest: {e}")))?;
        let count = cur.u64("record count")?;
        let mut records = Vec::new();
        for i in 0..count {
            let len = cur.u64("record length")? as usize;
            let body = cur.take(len, "record")?;
            let r: Record =
                bincode::deserialize(body).map_err(|e| TaskError::Corrupt(format!("record {i}: {e}")))?;
            records.push(r);
        }
        if cur.pos != bytes.len() {
            return Err(TaskError::Corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Self::new(manifest, records)
    }

    /// One JSON object per line: the manifest first, then each record.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", serde_json::to_string(&self.manifest).expect("serializable"));
        for r in &self.records {
            let _ = writeln!(out, "{}", serde_json::to_string(r).expect("serializable"));
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TaskError::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn write_shard(shard: &DatasetShard, path: &Path) -> Result<()> {
    let bytes = shard.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<DatasetShard> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    DatasetShard::from_bytes(&bytes)
}
