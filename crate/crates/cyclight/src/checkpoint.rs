//! Binary checkpoints for trained controllers.
//!
//! A checkpoint is a single file: an eight-byte magic tag, a format
//! version, a JSON metadata block, and then every learner's four
//! parameter sets (online and target copies of critic and actor) as
//! named little-endian `f64` tensors. Loading verifies the magic, the
//! version, and an FNV-1a hash of the tensor layout, so a file written
//! by a differently shaped network is rejected instead of silently
//! misread. Tensor bytes are written verbatim from memory, which makes
//! a save → load → save round trip bit-exact, and the exploration
//! stream positions are stored so resumed training draws the same
//! noise it would have drawn without the interruption.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{Fleet, PdqnSettings};
use crate::nn::{AttentionNet, ParamSet};
use crate::rng::{fnv1a, fnv1a_extend};
use crate::{Error, Result};

/// File tag; a reader that sees anything else should stop immediately.
pub const MAGIC: [u8; 8] = *b"CYLTCKPT";

/// Bump when the byte layout changes incompatibly.
pub const FORMAT_VERSION: u32 = 1;

/// Per-learner section suffixes, in the order they are written.
pub const NET_NAMES: [&str; 4] = ["critic", "critic_target", "actor", "actor_target"];

/// Everything about a run that is not a tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// FNV-1a over every section's layout schema; must match the
    /// running configuration on load.
    pub arch_hash: u64,
    /// Training episodes completed when the file was written.
    pub episode: u32,
    /// Master seed of the run that produced the parameters.
    pub master_seed: u64,
    /// Seed the next evaluation episode should use.
    pub eval_seed: u64,
    /// One parameter set for all intersections, or one per intersection.
    pub shared: bool,
    /// Intersections the fleet controls.
    pub agents: usize,
    /// Per-learner action counts (drive the exploration schedule).
    pub decisions: Vec<u64>,
    /// Per-learner gradient-step counts.
    pub updates: Vec<u64>,
    /// Per-learner positions of the exploration noise streams.
    pub rng_word_pos: Vec<u64>,
    /// Learner shape and rates, so the file is self-describing.
    pub settings: PdqnSettings,
    /// Free-form slot for the caller (e.g. the experiment config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Hash the concatenated layout schemas of the given parameter sets.
///
/// Order matters: the same sets in a different order hash differently,
/// which is what we want — section order is part of the format.
pub fn architecture_hash(sections: &[&ParamSet]) -> u64 {
    let mut h = fnv1a(b"layout/v1");
    for set in sections {
        h = fnv1a_extend(h, set.schema().as_bytes());
        h = fnv1a_extend(h, b";");
    }
    h
}

fn fleet_sections(fleet: &Fleet) -> Vec<(String, &ParamSet)> {
    let mut out = Vec::with_capacity(fleet.learners.len() * 4);
    for (i, learner) in fleet.learners.iter().enumerate() {
        let sets = [
            &learner.critic.params,
            &learner.critic_target.params,
            &learner.actor.params,
            &learner.actor_target.params,
        ];
        for (name, set) in NET_NAMES.iter().zip(sets) {
            out.push((format!("{i}/{name}"), set));
        }
    }
    out
}

fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!("name too long: {name}")));
    }
    write_u16(w, bytes.len() as u16)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("name not UTF-8: {e}")))
}

/// Write metadata plus named parameter sections to `path`.
///
/// The low-level entry point; [`save_fleet`] packages a whole fleet
/// through it.
pub fn write_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    sections: &[(String, &ParamSet)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;

    let meta_json = serde_json::to_vec(meta)?;
    write_u32(&mut w, meta_json.len() as u32)?;
    w.write_all(&meta_json)?;

    write_u32(&mut w, sections.len() as u32)?;
    for (name, set) in sections {
        write_name(&mut w, name)?;
        write_u32(&mut w, set.tensors.len() as u32)?;
        for t in &set.tensors {
            write_name(&mut w, &t.name)?;
            write_u32(&mut w, t.rows as u32)?;
            write_u32(&mut w, t.cols as u32)?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back; the inverse of [`write_checkpoint`].
///
/// Verifies the magic, the format version, and that the stored
/// architecture hash matches the tensors actually present (a mismatch
/// there means the file was corrupted or hand-edited).
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ParamSet)>)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint file (magic {:02x?})",
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion { expected: FORMAT_VERSION, got: version });
    }

    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;

    let n_sections = read_u32(&mut r)? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let section = read_name(&mut r)?;
        let n_tensors = read_u32(&mut r)? as usize;
        let mut set = ParamSet::default();
        for _ in 0..n_tensors {
            let name = read_name(&mut r)?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = vec![0.0f64; rows * cols];
            let mut b = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            if set.index(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            set.push(&name, rows, cols, data);
        }
        sections.push((section, set));
    }

    let stored = {
        let refs: Vec<&ParamSet> = sections.iter().map(|(_, s)| s).collect();
        architecture_hash(&refs)
    };
    if stored != meta.arch_hash {
        return Err(Error::Checkpoint(format!(
            "tensor layout hash {stored:#018x} does not match metadata {:#018x} (file damaged?)",
            meta.arch_hash
        )));
    }
    Ok((meta, sections))
}

/// Snapshot a fleet's networks, counters, and noise positions to `path`.
pub fn save_fleet(
    path: &Path,
    fleet: &Fleet,
    episode: u32,
    master_seed: u64,
    eval_seed: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let mut rng_word_pos = Vec::with_capacity(fleet.learners.len());
    for learner in &fleet.learners {
        let pos = u64::try_from(learner.rng_word_pos())
            .map_err(|_| Error::Checkpoint("noise stream position exceeds 64 bits".into()))?;
        rng_word_pos.push(pos);
    }
    let sections = fleet_sections(fleet);
    let meta = CheckpointMeta {
        arch_hash: architecture_hash(&sections.iter().map(|(_, s)| *s).collect::<Vec<_>>()),
        episode,
        master_seed,
        eval_seed,
        shared: fleet.shared,
        agents: fleet.agents(),
        decisions: fleet.learners.iter().map(|l| l.decisions).collect(),
        updates: fleet.learners.iter().map(|l| l.updates).collect(),
        rng_word_pos,
        settings: fleet.learners[0].settings.clone(),
        extra,
    };
    write_checkpoint(path, &meta, &sections)
}

/// Rebuild a fleet from a checkpoint.
///
/// The networks are shaped from the settings stored in the file; the
/// architecture hash of the running shapes must match the stored one,
/// otherwise [`Error::ArchitectureMismatch`] is returned. Replay
/// buffers start empty — stored experience is not part of a
/// checkpoint — but parameters, counters, and noise positions are
/// restored exactly.
pub fn load_fleet(path: &Path) -> Result<(Fleet, CheckpointMeta)> {
    let (meta, sections) = read_checkpoint(path)?;
    let mut fleet = Fleet::new(meta.settings.clone(), meta.master_seed, meta.agents, meta.shared);

    let expected = {
        let probe = fleet_sections(&fleet);
        architecture_hash(&probe.iter().map(|(_, s)| *s).collect::<Vec<_>>())
    };
    if expected != meta.arch_hash {
        return Err(Error::ArchitectureMismatch { expected, got: meta.arch_hash });
    }
    let per_learner = [&meta.decisions, &meta.updates, &meta.rng_word_pos];
    if per_learner.iter().any(|v| v.len() != fleet.learners.len()) {
        return Err(Error::Checkpoint(format!(
            "counter lists do not cover {} learners",
            fleet.learners.len()
        )));
    }

    let mut by_name: std::collections::HashMap<String, ParamSet> = sections.into_iter().collect();
    let mut take = |name: String| {
        by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    };
    for (i, learner) in fleet.learners.iter_mut().enumerate() {
        let critic_dims = learner.settings.critic_dims();
        let actor_dims = learner.settings.actor_dims();
        learner.critic = AttentionNet::from_params(critic_dims, take(format!("{i}/critic"))?)?;
        learner.critic_target =
            AttentionNet::from_params(critic_dims, take(format!("{i}/critic_target"))?)?;
        learner.actor = AttentionNet::from_params(actor_dims, take(format!("{i}/actor"))?)?;
        learner.actor_target =
            AttentionNet::from_params(actor_dims, take(format!("{i}/actor_target"))?)?;
        learner.decisions = meta.decisions[i];
        learner.updates = meta.updates[i];
        learner.set_rng_word_pos(meta.rng_word_pos[i] as u128);
    }
    Ok((fleet, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pamdp::MultiAgentState;

    fn tiny_settings() -> PdqnSettings {
        PdqnSettings {
            embed: 6,
            heads: 2,
            attn: 4,
            head_out: 4,
            hidden: 8,
            replay_capacity: 32,
            ..PdqnSettings::default()
        }
    }

    fn tensors_identical(a: &ParamSet, b: &ParamSet) -> bool {
        a.tensors.len() == b.tensors.len()
            && a.tensors.iter().zip(&b.tensors).all(|(x, y)| {
                x.name == y.name
                    && x.rows == y.rows
                    && x.cols == y.cols
                    && x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut fleet = Fleet::new(tiny_settings(), 99, 3, false);
        fleet.learners[1].decisions = 1234;
        fleet.learners[2].updates = 567;
        save_fleet(&path, &fleet, 41, 99, 7, serde_json::json!({"note": "t"})).unwrap();

        let (restored, meta) = load_fleet(&path).unwrap();
        assert_eq!(meta.episode, 41);
        assert_eq!(meta.master_seed, 99);
        assert_eq!(meta.eval_seed, 7);
        assert_eq!(meta.agents, 3);
        assert!(!meta.shared);
        assert_eq!(meta.decisions, vec![0, 1234, 0]);
        assert_eq!(meta.updates, vec![0, 0, 567]);
        assert_eq!(meta.extra["note"], "t");
        assert_eq!(restored.learners.len(), 3);
        for (a, b) in restored.learners.iter().zip(&fleet.learners) {
            assert!(tensors_identical(&a.critic.params, &b.critic.params));
            assert!(tensors_identical(&a.critic_target.params, &b.critic_target.params));
            assert!(tensors_identical(&a.actor.params, &b.actor.params));
            assert!(tensors_identical(&a.actor_target.params, &b.actor_target.params));
            assert_eq!(a.decisions, b.decisions);
            assert_eq!(a.updates, b.updates);
        }
        assert_eq!(restored.param_hash(), fleet.param_hash());
    }

    #[test]
    fn restored_fleet_acts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut fleet = Fleet::new(tiny_settings(), 3, 2, true);
        save_fleet(&path, &fleet, 0, 3, 0, serde_json::Value::Null).unwrap();
        let (mut restored, _) = load_fleet(&path).unwrap();

        let state = MultiAgentState::solo(vec![0.25; crate::pamdp::LOCAL_STATE_DIM]);
        let (k_a, x_a, _) = fleet.select_action(1, &state, false);
        let (k_b, x_b, _) = restored.select_action(1, &state, false);
        assert_eq!(k_a, k_b);
        assert_eq!(x_a, x_b);
    }

    #[test]
    fn noise_stream_resumes_where_it_stopped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut fleet = Fleet::new(tiny_settings(), 11, 1, false);
        let state = MultiAgentState::solo(vec![0.3; crate::pamdp::LOCAL_STATE_DIM]);
        // Burn some exploration draws, then checkpoint mid-stream.
        for _ in 0..5 {
            fleet.select_action(0, &state, true);
        }
        save_fleet(&path, &fleet, 0, 11, 0, serde_json::Value::Null).unwrap();
        let (mut restored, meta) = load_fleet(&path).unwrap();
        assert!(meta.rng_word_pos[0] > 0);

        // Both copies must now draw the identical future.
        for _ in 0..20 {
            let (k_a, x_a, d_a) = fleet.select_action(0, &state, true);
            let (k_b, x_b, d_b) = restored.select_action(0, &state, true);
            assert_eq!(k_a, k_b);
            assert_eq!(x_a, x_b);
            assert_eq!(d_a.explored, d_b.explored);
        }
    }

    #[test]
    fn saving_twice_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let fleet = Fleet::new(tiny_settings(), 5, 2, false);
        save_fleet(&a, &fleet, 10, 5, 11, serde_json::Value::Null).unwrap();
        save_fleet(&b, &fleet, 10, 5, 11, serde_json::Value::Null).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        match read_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected magic rejection, got {other:?}"),
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.ckpt");
        let fleet = Fleet::new(tiny_settings(), 5, 1, false);
        save_fleet(&path, &fleet, 0, 5, 0, serde_json::Value::Null).unwrap();
        // Bump the version field in place (bytes 8..12, little-endian).
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match read_checkpoint(&path) {
            Err(Error::FormatVersion { expected, got }) => {
                assert_eq!(expected, FORMAT_VERSION);
                assert_eq!(got, FORMAT_VERSION + 1);
            }
            other => panic!("expected version rejection, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ckpt");
        let fleet = Fleet::new(tiny_settings(), 5, 1, false);
        save_fleet(&path, &fleet, 0, 5, 0, serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Io(_))));
    }

    #[test]
    fn reshaped_network_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shape.ckpt");
        let fleet = Fleet::new(tiny_settings(), 5, 1, false);
        save_fleet(&path, &fleet, 0, 5, 0, serde_json::Value::Null).unwrap();

        // Edit the stored settings so the loader builds wider networks
        // than the tensors in the file describe.
        let (mut meta, sections) = read_checkpoint(&path).unwrap();
        meta.settings.hidden *= 2;
        let refs: Vec<(String, &ParamSet)> =
            sections.iter().map(|(n, s)| (n.clone(), s)).collect();
        write_checkpoint(&path, &meta, &refs).unwrap();

        assert!(matches!(load_fleet(&path), Err(Error::ArchitectureMismatch { .. })));
    }

    #[test]
    fn layout_hash_is_order_sensitive() {
        let fleet = Fleet::new(tiny_settings(), 5, 1, false);
        let learner = &fleet.learners[0];
        let fwd = architecture_hash(&[&learner.critic.params, &learner.actor.params]);
        let rev = architecture_hash(&[&learner.actor.params, &learner.critic.params]);
        assert_ne!(fwd, rev);
        let again = architecture_hash(&[&learner.critic.params, &learner.actor.params]);
        assert_eq!(fwd, again);
    }
}
