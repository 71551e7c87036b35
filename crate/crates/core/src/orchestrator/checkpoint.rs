//! Checkpoints are directories: `manifest.json` (format version and network
//! shapes), `state.json` (everything but the replay contents) and
//! `replay.bin`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::ReplayBuffer;
use crate::error::{Error, Result};

use super::trainer::Trainer;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub episodes: u64,
    pub replay_len: usize,
    pub labels: usize,
    /// `(out, in)` per layer for every network.
    pub networks: BTreeMap<String, Vec<(usize, usize)>>,
}

impl Manifest {
    pub fn describe(t: &Trainer) -> Self {
        let mut networks = BTreeMap::new();
        networks.insert("actor".to_string(), t.agent.actor.shapes());
        for (i, c) in t.agent.bank.critics.iter().enumerate() {
            networks.insert(format!("critic_{i}"), c.shapes());
        }
        networks.insert("state_encoder".to_string(), t.discriminator.state_enc.shapes());
        networks.insert("skill_encoder".to_string(), t.discriminator.skill_enc.shapes());
        for (i, m) in t.ensemble.members().iter().enumerate() {
            networks.insert(format!("scorer_{i}"), m.shapes());
        }
        Manifest {
            format_version: FORMAT_VERSION,
            step: t.step(),
            episodes: t.episodes(),
            replay_len: t.buffer.len(),
            labels: t.dataset.len(),
            networks,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn save(trainer: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&Manifest::describe(trainer))?)?;
    write_file(&dir.join("state.json"), &serde_json::to_vec(trainer)?)?;
    let mut w = BufWriter::new(File::create(dir.join("replay.bin"))?);
    trainer.buffer.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Trainer> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut trainer: Trainer = serde_json::from_slice(&fs::read(dir.join("state.json"))?)?;
    let buffer = ReplayBuffer::read_from(&mut BufReader::new(File::open(dir.join("replay.bin"))?))?;
    trainer.restore_buffer(buffer);
    let found = Manifest::describe(&trainer);
    if found != manifest {
        return Err(Error::Checkpoint("manifest does not match the stored state".into()));
    }
    Ok(trainer)
}
