//! On-disk artifact containers.
//!
//! All binary formats are magic-tagged, versioned, and little-endian with
//! float32 payloads; floating-point fields therefore round-trip exactly at
//! storage precision (write∘read is idempotent after the first write).
//!
//! - `BAEX`: expert checkpoint (flat MLP weights + metadata).
//! - `BATF`: sequence-policy checkpoint (named parameter tensors).
//! - `BATJ`: trajectory file, one per (morphology, source), framed records.
//! - Morphology descriptors are versioned JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use molt_core::expert::{DestructMode, MlpPolicy};
use molt_core::math::Vec2;
use molt_core::morphology::Morphology;
use molt_core::physics::ModuleState;
use molt_core::policy::{tensor_layout, DecoderConfig, PolicyWeights, TokenLayout};
use molt_core::reward::RewardBreakdown;
use molt_core::trajectory::{Trajectory, TrajectoryStep, TrajectorySource};
use serde::{Deserialize, Serialize};

pub const MORPH_FORMAT_VERSION: u32 = 1;
pub const BAEX_VERSION: u16 = 1;
pub const BATF_VERSION: u16 = 1;
pub const BATJ_VERSION: u16 = 1;

// ---------------------------------------------------------------- morphology

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MorphologyFile {
    format_version: u32,
    /// Generator seed, recorded for provenance.
    seed: u64,
    morphology: Morphology,
}

pub fn write_morphology(path: &Path, m: &Morphology, seed: u64) -> Result<()> {
    let f = MorphologyFile {
        format_version: MORPH_FORMAT_VERSION,
        seed,
        morphology: m.clone(),
    };
    let text = serde_json::to_string_pretty(&f)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_morphology(path: &Path) -> Result<(Morphology, u64)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let f: MorphologyFile = serde_json::from_str(&text)?;
    if f.format_version != MORPH_FORMAT_VERSION {
        bail!("unsupported morphology format version {}", f.format_version);
    }
    f.morphology.validate().map_err(|e| anyhow::anyhow!("{e:?}"))?;
    Ok((f.morphology, f.seed))
}

// -------------------------------------------------------------------- helpers

fn write_magic(w: &mut impl Write, magic: &[u8; 4], version: u16) -> Result<()> {
    w.write_all(magic)?;
    w.write_u16::<LittleEndian>(version)?;
    Ok(())
}

fn read_magic(r: &mut impl Read, magic: &[u8; 4], max_version: u16) -> Result<u16> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        bail!(
            "bad magic: expected {:?}, got {:?}",
            core::str::from_utf8(magic),
            buf
        );
    }
    let v = r.read_u16::<LittleEndian>()?;
    if v == 0 || v > max_version {
        bail!("unsupported version {v}");
    }
    Ok(v)
}

fn write_hash(w: &mut impl Write, hash: &str) -> Result<()> {
    let bytes = hash.as_bytes();
    anyhow::ensure!(bytes.len() == 64, "config hash must be 64 hex chars");
    w.write_all(bytes)?;
    Ok(())
}

fn read_hash(r: &mut impl Read) -> Result<String> {
    let mut buf = [0u8; 64];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8(buf.to_vec())?)
}

fn write_f32s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for &v in vals {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.read_f32::<LittleEndian>()? as f64);
    }
    Ok(out)
}

fn mode_tag(m: DestructMode) -> u8 {
    match m {
        DestructMode::SelfDestruct => 0,
        DestructMode::NoDestruct => 1,
        DestructMode::RandomDestruct => 2,
    }
}

fn mode_from_tag(t: u8) -> Result<DestructMode> {
    Ok(match t {
        0 => DestructMode::SelfDestruct,
        1 => DestructMode::NoDestruct,
        2 => DestructMode::RandomDestruct,
        _ => bail!("bad destruct mode tag {t}"),
    })
}

// ----------------------------------------------------------------------- BAEX

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCheckpoint {
    pub morphology_seed: u64,
    pub mode: DestructMode,
    pub config_hash: String,
    pub policy: MlpPolicy,
}

pub fn write_expert(path: &Path, ck: &ExpertCheckpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, b"BAEX", BAEX_VERSION)?;
    write_hash(&mut w, &ck.config_hash)?;
    w.write_u64::<LittleEndian>(ck.morphology_seed)?;
    w.write_u8(mode_tag(ck.mode))?;
    w.write_u32::<LittleEndian>(ck.policy.obs_dim as u32)?;
    w.write_u32::<LittleEndian>(ck.policy.n_out as u32)?;
    w.write_f64::<LittleEndian>(ck.policy.out_scale)?;
    w.write_u32::<LittleEndian>(ck.policy.weights.len() as u32)?;
    write_f32s(&mut w, &ck.policy.weights)?;
    w.flush()?;
    Ok(())
}

pub fn read_expert(path: &Path) -> Result<ExpertCheckpoint> {
    let mut r = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    read_magic(&mut r, b"BAEX", BAEX_VERSION)?;
    let config_hash = read_hash(&mut r)?;
    let morphology_seed = r.read_u64::<LittleEndian>()?;
    let mode = mode_from_tag(r.read_u8()?)?;
    let obs_dim = r.read_u32::<LittleEndian>()? as usize;
    let n_out = r.read_u32::<LittleEndian>()? as usize;
    let out_scale = r.read_f64::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    anyhow::ensure!(
        n == MlpPolicy::n_params(obs_dim, n_out),
        "weight count mismatch"
    );
    let weights = read_f32s(&mut r, n)?;
    Ok(ExpertCheckpoint {
        morphology_seed,
        mode,
        config_hash,
        policy: MlpPolicy {
            weights,
            obs_dim,
            n_out,
            out_scale,
        },
    })
}

// ----------------------------------------------------------------------- BATF

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub config_hash: String,
    pub weights: PolicyWeights,
}

pub fn write_policy(path: &Path, ck: &PolicyCheckpoint) -> Result<()> {
    let w = &ck.weights;
    let mut f = BufWriter::new(File::create(path)?);
    write_magic(&mut f, b"BATF", BATF_VERSION)?;
    write_hash(&mut f, &ck.config_hash)?;
    f.write_u32::<LittleEndian>(w.cfg.embed_dim as u32)?;
    f.write_u32::<LittleEndian>(w.cfg.n_layers as u32)?;
    f.write_u32::<LittleEndian>(w.cfg.n_heads as u32)?;
    f.write_u32::<LittleEndian>(w.cfg.mlp_ratio as u32)?;
    f.write_f64::<LittleEndian>(w.cfg.dropout)?;
    f.write_u32::<LittleEndian>(w.layout.n_slots as u32)?;
    f.write_u32::<LittleEndian>(w.layout.context_steps as u32)?;
    let tensors = tensor_layout(&w.cfg, &w.layout);
    f.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, shape, off) in tensors {
        let len: usize = shape.iter().product();
        f.write_u16::<LittleEndian>(name.len() as u16)?;
        f.write_all(name.as_bytes())?;
        f.write_u8(shape.len() as u8)?;
        for d in &shape {
            f.write_u32::<LittleEndian>(*d as u32)?;
        }
        write_f32s(&mut f, &w.params[off..off + len])?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<PolicyCheckpoint> {
    let mut r = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    read_magic(&mut r, b"BATF", BATF_VERSION)?;
    let config_hash = read_hash(&mut r)?;
    let cfg = DecoderConfig {
        embed_dim: r.read_u32::<LittleEndian>()? as usize,
        n_layers: r.read_u32::<LittleEndian>()? as usize,
        n_heads: r.read_u32::<LittleEndian>()? as usize,
        mlp_ratio: r.read_u32::<LittleEndian>()? as usize,
        dropout: r.read_f64::<LittleEndian>()?,
    };
    let layout = TokenLayout {
        n_slots: r.read_u32::<LittleEndian>()? as usize,
        context_steps: r.read_u32::<LittleEndian>()? as usize,
    };
    let expected = tensor_layout(&cfg, &layout);
    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    anyhow::ensure!(n_tensors == expected.len(), "tensor count mismatch");
    let mut params = vec![0.0; molt_core::policy::n_params(&cfg, &layout)];
    for (name, shape, off) in expected {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; name_len];
        r.read_exact(&mut buf)?;
        let got = String::from_utf8(buf)?;
        anyhow::ensure!(got == name, "tensor order mismatch: {got} vs {name}");
        let ndim = r.read_u8()? as usize;
        anyhow::ensure!(ndim == shape.len(), "rank mismatch for {name}");
        let mut len = 1usize;
        for want in &shape {
            let d = r.read_u32::<LittleEndian>()? as usize;
            anyhow::ensure!(d == *want, "shape mismatch for {name}");
            len *= d;
        }
        let vals = read_f32s(&mut r, len)?;
        params[off..off + len].copy_from_slice(&vals);
    }
    Ok(PolicyCheckpoint {
        config_hash,
        weights: PolicyWeights {
            cfg,
            layout,
            params,
        },
    })
}

// ----------------------------------------------------------------------- BATJ

fn source_tag(s: TrajectorySource) -> u8 {
    match s {
        TrajectorySource::Expert => 0,
        TrajectorySource::ProxyOpenLoop => 1,
        TrajectorySource::Policy => 2,
    }
}

fn source_from_tag(t: u8) -> Result<TrajectorySource> {
    Ok(match t {
        0 => TrajectorySource::Expert,
        1 => TrajectorySource::ProxyOpenLoop,
        2 => TrajectorySource::Policy,
        _ => bail!("bad trajectory source tag {t}"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub config_hash: String,
    pub source: TrajectorySource,
    pub morphology_seed: u64,
    pub morphology: Morphology,
    pub trajectories: Vec<Trajectory>,
}

pub fn write_trajectories(path: &Path, tf: &TrajectoryFile) -> Result<()> {
    let n = tf.morphology.n_modules();
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, b"BATJ", BATJ_VERSION)?;
    write_hash(&mut w, &tf.config_hash)?;
    w.write_u8(source_tag(tf.source))?;
    w.write_u64::<LittleEndian>(tf.morphology_seed)?;
    let morph_json = serde_json::to_vec(&tf.morphology)?;
    w.write_u32::<LittleEndian>(morph_json.len() as u32)?;
    w.write_all(&morph_json)?;
    w.write_u32::<LittleEndian>(tf.trajectories.len() as u32)?;
    for t in &tf.trajectories {
        anyhow::ensure!(
            t.steps.iter().all(|s| s.module_states.len() == n
                && s.action.len() == n
                && s.mask.len() == tf.morphology.n_attachments()),
            "step field lengths do not match the morphology"
        );
        w.write_u64::<LittleEndian>(t.morphology_id)?;
        w.write_u64::<LittleEndian>(t.seed)?;
        w.write_u8(u8::from(t.truncated))?;
        w.write_u32::<LittleEndian>(t.steps.len() as u32)?;
        for s in &t.steps {
            let record_len = (n * 8 + n + 2 + 4) * 4 + s.mask.len();
            w.write_u32::<LittleEndian>(record_len as u32)?;
            for ms in &s.module_states {
                write_f32s(&mut w, &ms.to_array())?;
            }
            write_f32s(&mut w, &s.action)?;
            for &m in &s.mask {
                w.write_u8(u8::from(m))?;
            }
            write_f32s(&mut w, &[s.cluster_position.x, s.cluster_position.y])?;
            write_f32s(
                &mut w,
                &[s.reward.speed, s.reward.efficiency, s.reward.connection, s.reward.total],
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<TrajectoryFile> {
    let mut r = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    read_magic(&mut r, b"BATJ", BATJ_VERSION)?;
    let config_hash = read_hash(&mut r)?;
    let source = source_from_tag(r.read_u8()?)?;
    let morphology_seed = r.read_u64::<LittleEndian>()?;
    let mlen = r.read_u32::<LittleEndian>()? as usize;
    let mut mbuf = vec![0u8; mlen];
    r.read_exact(&mut mbuf)?;
    let morphology: Morphology = serde_json::from_slice(&mbuf)?;
    let n = morphology.n_modules();
    let n_att = morphology.n_attachments();
    let n_traj = r.read_u32::<LittleEndian>()? as usize;
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let morphology_id = r.read_u64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let truncated = r.read_u8()? != 0;
        let n_steps = r.read_u32::<LittleEndian>()? as usize;
        let mut steps = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let record_len = r.read_u32::<LittleEndian>()? as usize;
            anyhow::ensure!(
                record_len == (n * 8 + n + 2 + 4) * 4 + n_att,
                "unexpected step record length"
            );
            let mut module_states = Vec::with_capacity(n);
            for _ in 0..n {
                let a = read_f32s(&mut r, 8)?;
                module_states.push(ModuleState::from_array([
                    a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7],
                ]));
            }
            let action = read_f32s(&mut r, n)?;
            let mut mask = Vec::with_capacity(n_att);
            for _ in 0..n_att {
                mask.push(r.read_u8()? != 0);
            }
            let pos = read_f32s(&mut r, 2)?;
            let rew = read_f32s(&mut r, 4)?;
            steps.push(TrajectoryStep {
                module_states,
                action,
                mask,
                cluster_position: Vec2 { x: pos[0], y: pos[1] },
                reward: RewardBreakdown {
                    speed: rew[0],
                    efficiency: rew[1],
                    connection: rew[2],
                    total: rew[3],
                },
            });
        }
        trajectories.push(Trajectory {
            morphology_id,
            seed,
            source,
            steps,
            truncated,
        });
    }
    Ok(TrajectoryFile {
        config_hash,
        source,
        morphology_seed,
        morphology,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use molt_core::expert::{rollout, DestructMode, ExpertContext, MlpPolicy};
    use molt_core::morphology::sample_morphology;
    use molt_core::physics::SimParams;
    use molt_core::reward::RewardConfig;

    fn hash64() -> String {
        "ab".repeat(32)
    }

    #[test]
    fn morphology_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = sample_morphology(5, 4).unwrap();
        write_morphology(&p, &m, 5).unwrap();
        let (back, seed) = read_morphology(&p).unwrap();
        assert_eq!(m, back);
        assert_eq!(seed, 5);
    }

    #[test]
    fn expert_checkpoint_round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("e1.baex");
        let p2 = dir.path().join("e2.baex");
        let ck = ExpertCheckpoint {
            morphology_seed: 9,
            mode: DestructMode::RandomDestruct,
            config_hash: hash64(),
            policy: MlpPolicy::init(21, 4, 1.5707963, 3),
        };
        write_expert(&p1, &ck).unwrap();
        let once = read_expert(&p1).unwrap();
        assert_eq!(once.morphology_seed, 9);
        assert_eq!(once.mode, DestructMode::RandomDestruct);
        // Second round trip is exact (storage precision reached).
        write_expert(&p2, &once).unwrap();
        let twice = read_expert(&p2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn policy_checkpoint_round_trip_and_forward_identity() {
        use molt_core::policy::{forward, DecoderConfig, TokenLayout, Window, WindowStep, STATE_DIM};
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("p1.batf");
        let p2 = dir.path().join("p2.batf");
        let cfg = DecoderConfig {
            embed_dim: 16,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
        };
        let w = PolicyWeights::init(cfg, TokenLayout::default(), 4);
        write_policy(&p1, &PolicyCheckpoint { config_hash: hash64(), weights: w }).unwrap();
        let once = read_policy(&p1).unwrap();
        write_policy(&p2, &once).unwrap();
        let twice = read_policy(&p2).unwrap();
        assert_eq!(once, twice);
        let window = Window {
            steps: vec![WindowStep {
                states: vec![[0.25; STATE_DIM]; 4],
                slot_valid: vec![true; 4],
                cluster: vec![true; 4],
                action: None,
            }],
        };
        let (o1, _) = forward(&once.weights, &window);
        let (o2, _) = forward(&twice.weights, &window);
        assert_eq!(o1, o2);
    }

    #[test]
    fn trajectory_file_round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("t1.batj");
        let p2 = dir.path().join("t2.batj");
        let m = sample_morphology(2, 4).unwrap();
        let ctx = ExpertContext::new(
            m.clone(),
            DestructMode::SelfDestruct,
            0,
            SimParams::default(),
            RewardConfig::default(),
        );
        let pol = MlpPolicy::init(ctx.obs_dim(), 4, 1.5707963, 1);
        let trajs: Vec<_> = (0..3).map(|s| rollout(&pol, &ctx, s, 25)).collect();
        let tf = TrajectoryFile {
            config_hash: hash64(),
            source: TrajectorySource::Expert,
            morphology_seed: 2,
            morphology: m,
            trajectories: trajs,
        };
        write_trajectories(&p1, &tf).unwrap();
        let once = read_trajectories(&p1).unwrap();
        assert_eq!(once.trajectories.len(), 3);
        write_trajectories(&p2, &once).unwrap();
        let twice = read_trajectories(&p2).unwrap();
        assert_eq!(once, twice);
        for t in &once.trajectories {
            assert!(t.mask_monotone());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.baex");
        std::fs::write(&p, b"NOPE\x01\x00garbage").unwrap();
        assert!(read_expert(&p).is_err());
    }
}
