//! Binary checkpoints.
//!
//! Layout: magic, `u32` format version, 32-byte config digest, `u32` length
//! of a JSON metadata block, the metadata, then every array as flat `f64`
//! little-endian values in the order listed by the metadata manifest, and
//! finally a SHA-256 of everything before it. The config itself is written
//! next to the file as `<path>.config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{differing_fields, ExperimentConfig};
use crate::env::StateNormalizer;
use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, Transition};
use crate::trainer::RunState;

const MAGIC: &[u8; 8] = b"LSDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    epoch: u64,
    rng: ChaCha8Rng,
    optimizer_steps: Vec<u64>,
    has_normalizer: bool,
    replay: Option<ReplayMeta>,
    manifest: Vec<(String, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReplayMeta {
    capacity: usize,
    inserted: u64,
    len: usize,
    row: [usize; 4],
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Named views of every float the run owns, in file order.
fn float_arrays(run: &RunState) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    let mut net = |prefix: &str, arrays: Vec<&[f64]>| {
        for (i, a) in arrays.into_iter().enumerate() {
            out.push((format!("{prefix}.{i}"), a.to_vec()));
        }
    };
    net("phi", run.phi.arrays());
    net("phi_opt", run.phi_opt.arrays());
    let names = ["policy", "q1", "q2", "q1_target", "q2_target"];
    for (name, n) in names.iter().zip(run.agent.networks()) {
        net(name, n.arrays());
    }
    let opt_names = ["policy_opt", "q1_opt", "q2_opt", "entropy_opt"];
    for (name, o) in opt_names.iter().zip(run.agent.optimizers()) {
        net(name, o.arrays());
    }
    if let Some(n) = &run.normalizer {
        out.push(("normalizer.mean".into(), n.mean.clone()));
        out.push(("normalizer.std".into(), n.std.clone()));
    }
    let a = &run.agent;
    let mut scalars = vec![a.log_entropy_coeff, a.target_entropy, a.gamma, a.tau];
    scalars.push(run.phi_opt.learning_rate);
    for o in a.optimizers() {
        scalars.extend([o.learning_rate, o.beta1, o.beta2, o.epsilon]);
    }
    out.push(("scalars".into(), scalars));
    if let Some(r) = &run.replay {
        let flat = r
            .iter_fifo()
            .flat_map(|t| {
                t.state
                    .iter()
                    .chain(&t.action)
                    .chain(&t.next_state)
                    .chain(&t.skill)
                    .copied()
                    .chain([t.intrinsic_reward, if t.done { 1.0 } else { 0.0 }])
                    .collect::<Vec<_>>()
            })
            .collect();
        out.push(("replay".into(), flat));
    }
    out
}

pub fn save_checkpoint(run: &RunState, path: &Path) -> Result<()> {
    let arrays = float_arrays(run);
    let mut steps = vec![run.phi_opt.step];
    steps.extend(run.agent.optimizers().iter().map(|o| o.step));
    let replay = run.replay.as_ref().map(|r| {
        let row = r.iter_fifo().next().map_or([0; 4], |t| {
            [t.state.len(), t.action.len(), t.next_state.len(), t.skill.len()]
        });
        ReplayMeta {
            capacity: r.capacity(),
            inserted: r.insertion_count(),
            len: r.len(),
            row,
        }
    });
    let meta = Meta {
        epoch: run.epoch,
        rng: run.rng.clone(),
        optimizer_steps: steps,
        has_normalizer: run.normalizer.is_some(),
        replay,
        manifest: arrays.iter().map(|(n, a)| (n.clone(), a.len())).collect(),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&digest_bytes(&run.config));
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    for (_, a) in &arrays {
        for x in a {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let trailer = Sha256::digest(&buf);
    buf.extend_from_slice(&trailer);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write to a temporary name first so a crash never leaves a half file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, run.config.to_json_pretty()).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

fn digest_bytes(config: &ExperimentConfig) -> [u8; 32] {
    let mut out = [0u8; 32];
    hex::decode_to_slice(config.digest(), &mut out).expect("digest is 32 hex bytes");
    out
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
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Loads a checkpoint. When `expected` is given, its digest must match the
/// one stored in the file; otherwise the sidecar config is used.
pub fn load_checkpoint(path: &Path, expected: Option<&ExperimentConfig>) -> Result<RunState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 32 + 4 + 32 {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let stored_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");

    let side = sidecar_path(path);
    let sidecar: Option<ExperimentConfig> = fs::read_to_string(&side)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let config = match expected {
        Some(cfg) => {
            if digest_bytes(cfg) != stored_digest {
                let fields = match &sidecar {
                    Some(stored) if digest_bytes(stored) == stored_digest => differing_fields(stored, cfg),
                    _ => vec!["<unknown: config sidecar missing or stale>".into()],
                };
                return Err(Error::DigestMismatch { fields });
            }
            cfg.clone()
        }
        None => match sidecar {
            Some(stored) if digest_bytes(&stored) == stored_digest => stored,
            Some(_) => {
                return Err(Error::DigestMismatch {
                    fields: vec!["<sidecar does not match checkpoint header>".into()],
                })
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "missing config sidecar {}",
                    side.display()
                )))
            }
        },
    };

    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;

    let mut run = RunState::new(config)?;
    let mut loaded: Vec<(String, Vec<f64>)> = Vec::with_capacity(meta.manifest.len());
    for (name, len) in &meta.manifest {
        loaded.push((name.clone(), r.f64s(*len)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the declared arrays".into()));
    }

    // Shape the target from the config, then fill it.
    if meta.has_normalizer != run.normalizer.is_some() {
        return Err(Error::Checkpoint("normalizer presence disagrees with config".into()));
    }
    let template = float_arrays(&run);
    let expected_fixed = template.iter().filter(|(n, _)| n != "replay").count();
    let fixed: Vec<&(String, Vec<f64>)> = loaded.iter().filter(|(n, _)| n != "replay").collect();
    if fixed.len() != expected_fixed {
        return Err(Error::Checkpoint(format!(
            "expected {expected_fixed} arrays, file declares {}",
            fixed.len()
        )));
    }
    for ((tn, ta), (ln, la)) in template.iter().filter(|(n, _)| n != "replay").zip(&fixed) {
        if tn != ln || ta.len() != la.len() {
            return Err(Error::Checkpoint(format!(
                "array `{ln}` ({}) does not fit `{tn}` ({})",
                la.len(),
                ta.len()
            )));
        }
    }
    let mut src = fixed.into_iter().map(|(_, a)| a.as_slice());
    let mut fill = |dst: Vec<&mut [f64]>| {
        for d in dst {
            d.copy_from_slice(src.next().expect("counted above"));
        }
    };
    fill(run.phi.arrays_mut());
    fill(run.phi_opt.arrays_mut());
    for n in run.agent.networks_mut() {
        fill(n.arrays_mut());
    }
    for o in run.agent.optimizers_mut() {
        fill(o.arrays_mut());
    }
    if let Some(n) = run.normalizer.as_mut() {
        let mean = src.next().expect("counted above").to_vec();
        let std = src.next().expect("counted above").to_vec();
        *n = StateNormalizer { mean, std };
    }
    let scalars = src.next().expect("counted above");
    run.agent.log_entropy_coeff = scalars[0];
    run.agent.target_entropy = scalars[1];
    run.agent.gamma = scalars[2];
    run.agent.tau = scalars[3];
    run.phi_opt.learning_rate = scalars[4];
    for (o, s) in run.agent.optimizers_mut().into_iter().zip(scalars[5..].chunks_exact(4)) {
        o.learning_rate = s[0];
        o.beta1 = s[1];
        o.beta2 = s[2];
        o.epsilon = s[3];
    }

    let steps = &meta.optimizer_steps;
    if steps.len() != 5 {
        return Err(Error::Checkpoint("expected 5 optimizer step counters".into()));
    }
    run.phi_opt.step = steps[0];
    for (o, s) in run.agent.optimizers_mut().into_iter().zip(&steps[1..]) {
        o.step = *s;
    }

    run.replay = match (meta.replay, loaded.iter().find(|(n, _)| n == "replay")) {
        (Some(rm), Some((_, flat))) => Some(restore_replay(&rm, flat)?),
        (Some(rm), None) if rm.len == 0 => Some(ReplayBuffer::restore(rm.capacity, Vec::new(), rm.inserted)?),
        (None, None) => None,
        _ => return Err(Error::Checkpoint("replay buffer metadata and data disagree".into())),
    };
    run.epoch = meta.epoch;
    run.rng = meta.rng;
    Ok(run)
}

fn restore_replay(rm: &ReplayMeta, flat: &[f64]) -> Result<ReplayBuffer> {
    let [s, a, ns, z] = rm.row;
    let width = s + a + ns + z + 2;
    if flat.len() != width * rm.len {
        return Err(Error::Checkpoint("replay array has the wrong length".into()));
    }
    let items = flat
        .chunks_exact(width.max(1))
        .map(|row| {
            let (state, rest) = row.split_at(s);
            let (action, rest) = rest.split_at(a);
            let (next_state, rest) = rest.split_at(ns);
            let (skill, rest) = rest.split_at(z);
            Transition {
                state: state.to_vec(),
                action: action.to_vec(),
                next_state: next_state.to_vec(),
                skill: skill.to_vec(),
                intrinsic_reward: rest[0],
                done: rest[1] != 0.0,
            }
        })
        .collect();
    ReplayBuffer::restore(rm.capacity, items, rm.inserted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::pointenv_lsd()
            .with_overrides(&[
                "network.hidden_width=8",
                "schedule.episodes_per_epoch=4",
                "schedule.minibatch_size=20",
            ])
            .unwrap()
    }

    fn same(a: &RunState, b: &RunState) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.rng, b.rng);
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.phi_opt, b.phi_opt);
        assert_eq!(a.agent, b.agent);
        assert_eq!(a.normalizer, b.normalizer);
    }

    #[test]
    fn round_trip_is_exact_and_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let mut run = RunState::new(small()).unwrap();
        run.train_epoch().unwrap();
        save_checkpoint(&run, &path).unwrap();
        let mut back = load_checkpoint(&path, None).unwrap();
        same(&run, &back);
        assert_eq!(run.train_epoch().unwrap(), back.train_epoch().unwrap());
        same(&run, &back);
    }

    #[test]
    fn replay_buffer_survives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        let cfg = small()
            .with_overrides(&["schedule.sac_data=\"replay\"", "schedule.replay_capacity=30"])
            .unwrap();
        let mut run = RunState::new(cfg.clone()).unwrap();
        run.train_epoch().unwrap();
        save_checkpoint(&run, &path).unwrap();
        let back = load_checkpoint(&path, Some(&cfg)).unwrap();
        let a: Vec<_> = run.replay.as_ref().unwrap().iter_fifo().cloned().collect();
        let b: Vec<_> = back.replay.as_ref().unwrap().iter_fifo().cloned().collect();
        assert_eq!(a, b);
        assert_eq!(
            run.replay.unwrap().insertion_count(),
            back.replay.unwrap().insertion_count()
        );
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&RunState::new(small()).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(_))));
        }
    }

    #[test]
    fn other_config_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        save_checkpoint(&RunState::new(small()).unwrap(), &path).unwrap();
        let other = small().with_overrides(&["phi_lr=0.001"]).unwrap();
        match load_checkpoint(&path, Some(&other)) {
            Err(Error::DigestMismatch { fields }) => assert_eq!(fields, vec!["phi_lr".to_string()]),
            other => panic!("expected digest mismatch, got {other:?}"),
        }
    }
}
