//! Directory checkpoints: `manifest.json` plus one TNSR blob per tensor,
//! each pinned by SHA-256.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{create_dir, load_json, load_tensor, save_json, save_tensor};
use crate::error::{Error, Result};
use crate::net::{Conv, TaskConfig, TaskModel};
use crate::recon::{Autoencoder, Member, ReconSuite};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Blob {
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct TaskManifest {
    format: u32,
    kind: String,
    config: TaskConfig,
    trained: bool,
    train_seed: u64,
    epochs: usize,
    checksum: String,
    blobs: Vec<Blob>,
}

#[derive(Serialize, Deserialize)]
struct AutoencoderManifest {
    input_shape: [usize; 3],
    trained: bool,
    blobs: Vec<Blob>,
}

#[derive(Serialize, Deserialize)]
struct SuiteManifest {
    format: u32,
    kind: String,
    task_layers: usize,
    checksum: String,
    members: BTreeMap<String, AutoencoderManifest>,
}

fn check_format(found: u32) -> Result<()> {
    if found != CHECKPOINT_FORMAT {
        return Err(Error::Version { found, expected: CHECKPOINT_FORMAT });
    }
    Ok(())
}

fn save_convs(dir: &Path, prefix: &str, params: &[Conv]) -> Result<Vec<Blob>> {
    let mut blobs = Vec::new();
    for (i, p) in params.iter().enumerate() {
        for (part, t) in [("weight", &p.weight), ("bias", &p.bias)] {
            let file = format!("{prefix}{i:02}_{part}.tnsr");
            let sha256 = save_tensor(&dir.join(&file), t)?;
            blobs.push(Blob { file, sha256 });
        }
    }
    Ok(blobs)
}

fn load_convs(dir: &Path, blobs: &[Blob]) -> Result<Vec<Conv>> {
    if blobs.len() % 2 != 0 {
        return Err(Error::Corrupt { path: dir.join("manifest.json"), detail: "odd blob count".into() });
    }
    blobs
        .chunks(2)
        .map(|pair| {
            Ok(Conv {
                weight: load_tensor(&dir.join(&pair[0].file), Some(&pair[0].sha256))?,
                bias: load_tensor(&dir.join(&pair[1].file), Some(&pair[1].sha256))?,
            })
        })
        .collect()
}

pub fn save_task(model: &TaskModel, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let blobs = save_convs(dir, "layer", model.params())?;
    save_json(
        &dir.join("manifest.json"),
        &TaskManifest {
            format: CHECKPOINT_FORMAT,
            kind: "task".into(),
            config: model.config().clone(),
            trained: model.is_trained(),
            train_seed: model.train_seed(),
            epochs: model.epochs(),
            checksum: model.checksum(),
            blobs,
        },
    )
}

pub fn load_task(dir: &Path) -> Result<TaskModel> {
    let m: TaskManifest = load_json(&dir.join("manifest.json"))?;
    check_format(m.format)?;
    if m.kind != "task" {
        return Err(Error::ArchitectureMismatch(format!("expected a task checkpoint, found `{}`", m.kind)));
    }
    let params = load_convs(dir, &m.blobs)?;
    let model = TaskModel::from_parts(m.config, params, m.trained, m.train_seed, m.epochs)?;
    if model.checksum() != m.checksum {
        return Err(Error::HashMismatch { path: dir.join("manifest.json") });
    }
    Ok(model)
}

fn member_key(m: Member) -> String {
    m.to_string()
}

pub fn save_suite(suite: &ReconSuite, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut members = BTreeMap::new();
    for m in suite.members() {
        let ae = suite.member(m)?;
        if ae.is_passthrough() {
            return Err(Error::InvalidArgument("passthrough members cannot be saved".into()));
        }
        let sub = dir.join(member_key(m));
        create_dir(&sub)?;
        let blobs = save_convs(&sub, "conv", ae.params())?
            .into_iter()
            .map(|b| Blob { file: format!("{}/{}", member_key(m), b.file), ..b })
            .collect();
        members.insert(
            member_key(m),
            AutoencoderManifest { input_shape: ae.input_shape(), trained: suite.is_trained(m), blobs },
        );
    }
    save_json(
        &dir.join("manifest.json"),
        &SuiteManifest {
            format: CHECKPOINT_FORMAT,
            kind: "recon-suite".into(),
            task_layers: suite.task_layers(),
            checksum: suite.checksum(),
            members,
        },
    )
}

/// Loads a suite and checks it against the task it will monitor.
pub fn load_suite(dir: &Path, task: &TaskModel) -> Result<ReconSuite> {
    let m: SuiteManifest = load_json(&dir.join("manifest.json"))?;
    check_format(m.format)?;
    if m.kind != "recon-suite" {
        return Err(Error::ArchitectureMismatch(format!("expected a suite checkpoint, found `{}`", m.kind)));
    }
    if m.task_layers != task.depth_count() {
        return Err(Error::ArchitectureMismatch(format!(
            "suite was trained for a {}-layer task, this task has {}",
            m.task_layers,
            task.depth_count()
        )));
    }
    let reference = ReconSuite::new(task, 0)?;
    let mut trained = BTreeMap::new();
    let mut load = |member: Member| -> Result<Autoencoder> {
        let entry = m.members.get(&member_key(member)).ok_or_else(|| Error::Corrupt {
            path: dir.join("manifest.json"),
            detail: format!("missing member {member}"),
        })?;
        if entry.input_shape != reference.member(member)?.input_shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "member {member} expects {:?}, task provides {:?}",
                entry.input_shape,
                reference.member(member)?.input_shape()
            )));
        }
        if entry.trained {
            trained.insert(member, true);
        }
        Autoencoder::from_parts(entry.input_shape, load_convs(dir, &entry.blobs)?)
    };
    let input = load(Member::Input)?;
    let levels = (1..=task.levels()).map(|i| load(Member::Level(i))).collect::<Result<Vec<_>>>()?;
    let output = load(Member::Output)?;
    let suite = ReconSuite::from_parts(m.task_layers, input, levels, output, trained);
    if suite.checksum() != m.checksum {
        return Err(Error::HashMismatch { path: dir.join("manifest.json") });
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn task(layers: usize) -> TaskModel {
        let mut t = TaskModel::new(TaskConfig { layers, base_channels: 4, image_size: 16, io_channels: 1, input_skip: false }, 3).unwrap();
        t.trained = true;
        t
    }

    #[test]
    fn task_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let t = task(7);
        save_task(&t, dir.path()).unwrap();
        let back = load_task(dir.path()).unwrap();
        assert_eq!(back.checksum(), t.checksum());
        assert_eq!(back.params(), t.params());
        assert!(back.is_trained());
    }

    #[test]
    fn suite_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let t = task(7);
        let s = ReconSuite::new(&t, 4).unwrap();
        save_suite(&s, dir.path()).unwrap();
        let back = load_suite(dir.path(), &t).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.checksum(), s.checksum());
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_task(&task(5), dir.path()).unwrap();
        let blob = dir.path().join("layer00_weight.tnsr");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_task(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn tampered_blob_fails_hash() {
        let dir = tempfile::tempdir().unwrap();
        save_task(&task(5), dir.path()).unwrap();
        let blob = dir.path().join("layer01_bias.tnsr");
        let mut bytes = fs::read(&blob).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_task(dir.path()), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        save_task(&task(5), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"format\": 1", "\"format\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_task(dir.path()), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn suite_for_other_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t7 = task(7);
        save_suite(&ReconSuite::new(&t7, 1).unwrap(), dir.path()).unwrap();
        assert!(matches!(load_suite(dir.path(), &task(5)), Err(Error::ArchitectureMismatch(_))));
        assert!(matches!(load_suite(dir.path(), &task(9)), Err(Error::ArchitectureMismatch(_))));
    }
}
