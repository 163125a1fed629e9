//! Demonstration datasets: expert rollouts serialized in a fixed binary
//! container, train/test split manifests, and deterministic batch iteration.
//!
//! Episodes are success-truncated expert runs. Every file replays exactly:
//! applying the stored actions to the stored initial condition through the
//! simulator reproduces the stored frames byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blockworld::{
    self, Color, Frame, Template, ThemeId, TokenizedInstruction, FRAME_BYTES, MAX_TASK_STEPS,
};
use crate::rngs;

/// Leading bytes of every episode file.
pub const EPISODE_MAGIC: &[u8; 4] = b"MOWM";
/// Container format version.
pub const EPISODE_VERSION: u32 = 1;
/// Steps recorded after the success condition first holds, so sequences end
/// at rest rather than mid-motion.
pub const SETTLE_STEPS: u32 = 2;
/// File name of the dataset index inside the dataset root.
pub const MANIFEST_NAME: &str = "manifest.json";
/// File name of the token table inside the dataset root.
pub const VOCABULARY_NAME: &str = "vocabulary.json";

/// Episode header, stored as compact JSON inside the container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub instruction_text: String,
    pub template: Template,
    pub target_color: Option<Color>,
    pub theme_id: ThemeId,
    pub seed: u64,
    pub t_total: u32,
}

/// One demonstration: `t_total + 1` frames and the `t_total` actions between
/// them, each action a `[dx, dy, grip]` triple in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub meta: EpisodeMeta,
    pub frames: Vec<Frame>,
    pub actions: Vec<[f32; 3]>,
}

impl EpisodeRecord {
    fn validate(&self) -> Result<()> {
        let t = self.meta.t_total as usize;
        if self.actions.len() != t {
            bail!("t_total is {t} but record holds {} actions", self.actions.len());
        }
        if self.frames.len() != t + 1 {
            bail!("{t} actions need {} frames, record holds {}", t + 1, self.frames.len());
        }
        if self.meta.t_total > MAX_TASK_STEPS {
            bail!("t_total {} exceeds the {MAX_TASK_STEPS}-step cap", self.meta.t_total);
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                bail!("action {i} is {a:?}, outside [-1, 1]");
            }
        }
        Ok(())
    }
}

/// Index of a generated dataset: the root directory, episode file names per
/// split, the token table location, and a hash of the generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub splits: BTreeMap<String, Vec<String>>,
    pub vocabulary: String,
    pub config_hash: String,
}

impl DatasetManifest {
    /// Absolute location of one episode file.
    pub fn episode_path(&self, split: &str, name: &str) -> PathBuf {
        self.root.join(split).join(name)
    }

    /// Write the manifest into its root directory and return the path.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Read a manifest file. The stored root is replaced by the manifest's
    /// own directory, so a dataset keeps working after being moved.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let json = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&json).with_context(|| format!("parsing {}", path.display()))?;
        manifest.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(manifest)
    }

    /// Check that splits are disjoint and every listed file parses.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (split, names) in &self.splits {
            for name in names {
                if !seen.insert(name.clone()) {
                    bail!("episode {name} appears in more than one split");
                }
                read_episode(&self.episode_path(split, name))?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Container format.
//
// Little-endian layout: magic "MOWM", version u32, meta_len u32, meta JSON,
// frames as raw u8 in (t, y, x, channel) order, actions as raw f32 rows.
// ---------------------------------------------------------------------------

/// Serialize a record to container bytes.
pub fn encode_episode(record: &EpisodeRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let meta = serde_json::to_vec(&record.meta).expect("meta serializes");
    let mut bytes =
        Vec::with_capacity(12 + meta.len() + record.frames.len() * FRAME_BYTES + record.actions.len() * 12);
    bytes.extend_from_slice(EPISODE_MAGIC);
    bytes.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta);
    for frame in &record.frames {
        bytes.extend_from_slice(frame);
    }
    for action in &record.actions {
        for v in action {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Parse container bytes back into a record. Errors name the byte offset at
/// which parsing failed.
pub fn parse_episode(bytes: &[u8]) -> Result<EpisodeRecord> {
    let need = |end: usize, what: &str| -> Result<()> {
        if bytes.len() < end {
            bail!("file truncated at offset {}: need {end} bytes through {what}", bytes.len());
        }
        Ok(())
    };
    need(4, "magic")?;
    if &bytes[0..4] != EPISODE_MAGIC {
        bail!("bad magic at offset 0: expected \"MOWM\"");
    }
    need(8, "version")?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EPISODE_VERSION {
        bail!("unsupported version {version} at offset 4: expected {EPISODE_VERSION}");
    }
    need(12, "meta length")?;
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(12 + meta_len, "meta")?;
    let meta: EpisodeMeta = serde_json::from_slice(&bytes[12..12 + meta_len])
        .map_err(|e| anyhow!("bad meta JSON at offset 12: {e}"))?;

    let t = meta.t_total as usize;
    let frames_off = 12 + meta_len;
    let actions_off = frames_off + (t + 1) * FRAME_BYTES;
    let end = actions_off + t * 12;
    need(actions_off, "frames")?;
    need(end, "actions")?;
    if bytes.len() != end {
        bail!("trailing bytes at offset {end}");
    }

    let mut frames = Vec::with_capacity(t + 1);
    for i in 0..=t {
        let off = frames_off + i * FRAME_BYTES;
        let mut frame = [0u8; FRAME_BYTES];
        frame.copy_from_slice(&bytes[off..off + FRAME_BYTES]);
        frames.push(frame);
    }
    let mut actions = Vec::with_capacity(t);
    for i in 0..t {
        let off = actions_off + i * 12;
        let mut row = [0f32; 3];
        for (j, v) in row.iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[off + j * 4..off + j * 4 + 4].try_into().unwrap());
        }
        actions.push(row);
    }
    let record = EpisodeRecord { meta, frames, actions };
    record.validate()?;
    Ok(record)
}

/// Write a record to disk in container format.
pub fn write_episode(record: &EpisodeRecord, path: &Path) -> Result<()> {
    let bytes = encode_episode(record)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Read a container file from disk.
pub fn read_episode(path: &Path) -> Result<EpisodeRecord> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_episode(&bytes).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------------------
// Dataset generation.
// ---------------------------------------------------------------------------

/// Stable file-name fragment for a task variant, e.g. "push_left_red".
pub fn variant_slug(template: Template, color: Option<Color>) -> String {
    let t = match template {
        Template::PushLeft => "push_left",
        Template::PushRight => "push_right",
        Template::Goto => "goto",
        Template::PressButton => "press_button",
    };
    match color {
        Some(c) => format!("{t}_{}", c.name()),
        None => t.to_string(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run the expert on one freshly reset task until success, keep going for the
/// settle steps, and package the trajectory.
fn roll_expert(
    theme_id: ThemeId,
    template: Template,
    color: Option<Color>,
    seed: u64,
) -> Result<EpisodeRecord> {
    let start = blockworld::reset(theme_id, seed)?;
    let mut task = blockworld::TaskSpec::new(template, color)?;
    task.bind(&start);

    let mut frames = vec![blockworld::render(&start)];
    let mut actions = Vec::new();
    let mut state = start;
    let mut success_at = None;
    for k in 1..=MAX_TASK_STEPS {
        let act = blockworld::expert_action(&state, &task);
        state = blockworld::step(&state, act);
        frames.push(blockworld::render(&state));
        actions.push([act.dxdy[0], act.dxdy[1], act.grip_cmd]);
        if success_at.is_none() && blockworld::check_success(&state, &task)? {
            success_at = Some(k);
        }
        if matches!(success_at, Some(s) if k >= s + SETTLE_STEPS) {
            break;
        }
    }
    if success_at.is_none() {
        bail!(
            "expert failed {} on theme {} with seed {seed} within {MAX_TASK_STEPS} steps",
            variant_slug(template, color),
            theme_id.name(),
        );
    }
    let meta = EpisodeMeta {
        instruction_text: task.instruction_text.clone(),
        template,
        target_color: color,
        theme_id,
        seed,
        t_total: actions.len() as u32,
    };
    Ok(EpisodeRecord { meta, frames, actions })
}

#[derive(Serialize)]
struct GenerationSettings<'a> {
    themes: Vec<&'a str>,
    episodes_per_task: u32,
    seed: u64,
}

/// Generate `episodes_per_task` expert demonstrations for every task variant
/// on every listed theme. Theme D episodes land in the test split, all other
/// themes in train. Writes episodes, the token table, and the manifest under
/// `root`, and is bit-deterministic in all of them.
pub fn generate_episodes(
    root: &Path,
    themes: &[ThemeId],
    episodes_per_task: u32,
    seed: u64,
) -> Result<DatasetManifest> {
    if episodes_per_task == 0 {
        bail!("episodes_per_task must be at least 1");
    }
    let mut seen = BTreeSet::new();
    let themes: Vec<ThemeId> = themes.iter().copied().filter(|t| seen.insert(*t)).collect();

    for split in ["train", "test"] {
        let dir = root.join(split);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut splits: BTreeMap<String, Vec<String>> =
        [("test".to_string(), Vec::new()), ("train".to_string(), Vec::new())].into();
    for &theme_id in &themes {
        let split = if theme_id == ThemeId::D { "test" } else { "train" };
        for (template, color) in blockworld::all_task_variants() {
            let slug = variant_slug(template, color);
            for index in 0..episodes_per_task {
                let ep_seed =
                    rngs::derive_seed(seed, &["episode", theme_id.name(), &slug], &[index as u64]);
                let record = roll_expert(theme_id, template, color, ep_seed)?;
                let name = format!("ep_{}_{}_{}.mowm", theme_id.name(), slug, index);
                write_episode(&record, &root.join(split).join(&name))?;
                splits.get_mut(split).expect("split exists").push(name);
            }
        }
    }
    for names in splits.values_mut() {
        names.sort();
    }

    let vocab_path = root.join(VOCABULARY_NAME);
    let vocab_json = serde_json::to_string_pretty(&blockworld::VOCABULARY.to_vec())
        .expect("vocabulary serializes");
    fs::write(&vocab_path, vocab_json).with_context(|| format!("writing {}", vocab_path.display()))?;

    let settings = GenerationSettings {
        themes: themes.iter().map(|t| t.name()).collect(),
        episodes_per_task,
        seed,
    };
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        splits,
        vocabulary: VOCABULARY_NAME.to_string(),
        config_hash: sha256_hex(serde_json::to_string(&settings).expect("settings serialize").as_bytes()),
    };
    manifest.save()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Training windows and batches.
// ---------------------------------------------------------------------------

/// One training window: a start frame, the tokenized instruction, and `T`
/// future steps. Windows reaching past the episode end repeat the final frame
/// with zero actions; `mask` marks the real steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x0: Frame,
    pub tokens: TokenizedInstruction,
    pub future_frames: Vec<Frame>,
    pub future_actions: Vec<[f32; 3]>,
    pub mask: Vec<bool>,
    pub start: usize,
}

/// Cut the length-`t` window starting at step `k`.
pub fn window_at(record: &EpisodeRecord, t: usize, k: usize) -> Window {
    let total = record.meta.t_total as usize;
    assert!(total >= 1, "cannot window an empty episode");
    assert!(k < total, "window start {k} out of range for {total} steps");
    let mut future_frames = Vec::with_capacity(t);
    let mut future_actions = Vec::with_capacity(t);
    let mut mask = Vec::with_capacity(t);
    for i in 0..t {
        if k + i < total {
            future_frames.push(record.frames[k + 1 + i]);
            future_actions.push(record.actions[k + i]);
            mask.push(true);
        } else {
            future_frames.push(record.frames[total]);
            future_actions.push([0.0; 3]);
            mask.push(false);
        }
    }
    let tokens =
        blockworld::tokenize(&record.meta.instruction_text).expect("stored instruction tokenizes");
    Window { x0: record.frames[k], tokens, future_frames, future_actions, mask, start: k }
}

/// Cut a window whose start index is drawn uniformly from the episode.
pub fn sample_window(record: &EpisodeRecord, t: usize, rng_seed: u64) -> Window {
    let mut rng = rngs::rng_from(rng_seed);
    let total = record.meta.t_total as usize;
    window_at(record, t, rng.gen_range(0..total))
}

/// A split loaded fully into memory. Episodes are small, so trainers keep the
/// whole split resident and reshuffle indices each epoch.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<EpisodeRecord>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, split: &str) -> Result<Dataset> {
        let names = manifest.splits.get(split).ok_or_else(|| {
            anyhow!(
                "unknown split {split:?}: manifest has {:?}",
                manifest.splits.keys().collect::<Vec<_>>()
            )
        })?;
        if names.is_empty() {
            bail!("split {split:?} is empty");
        }
        let mut records = Vec::with_capacity(names.len());
        for name in names {
            records.push(read_episode(&manifest.episode_path(split, name))?);
        }
        Ok(Dataset { records, names: names.clone() })
    }
}

/// Deterministic shuffled order of `n` items under an epoch seed.
pub fn epoch_order(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rngs::rng_from(epoch_seed));
    order
}

/// Shuffled index batches for one epoch; the final partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    epoch_order(n, epoch_seed).chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One shuffled pass over a split as materialized batches. Call again with a
/// fresh epoch seed for the next epoch.
pub fn iterate_batches(
    manifest: &DatasetManifest,
    split: &str,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<EpisodeRecord>>> {
    let dataset = Dataset::load(manifest, split)?;
    Ok(batch_indices(dataset.records.len(), batch_size, epoch_seed)
        .into_iter()
        .map(|ixs| ixs.into_iter().map(|i| dataset.records[i].clone()).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{check_success, render, reset, step, Action, TaskSpec};
    use tempfile::tempdir;

    /// A record with recognizable per-step fill patterns.
    fn patterned_record(t_total: u32) -> EpisodeRecord {
        let mut frames = Vec::new();
        for t in 0..=t_total {
            let mut f = [0u8; FRAME_BYTES];
            for (i, b) in f.iter_mut().enumerate() {
                *b = (t as u8).wrapping_mul(97).wrapping_add(i as u8);
            }
            frames.push(f);
        }
        let actions = (0..t_total)
            .map(|t| [0.1 * t as f32, -0.05 * t as f32, if t % 2 == 0 { 1.0 } else { -1.0 }])
            .collect();
        EpisodeRecord {
            meta: EpisodeMeta {
                instruction_text: "push red block left".to_string(),
                template: Template::PushLeft,
                target_color: Some(Color::Red),
                theme_id: ThemeId::A,
                seed: 42,
                t_total,
            },
            frames,
            actions,
        }
    }

    #[test]
    fn container_round_trip_is_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ep.mowm");
        let record = patterned_record(3);
        write_episode(&record, &path).unwrap();
        assert_eq!(read_episode(&path).unwrap(), record);

        let first = fs::read(&path).unwrap();
        write_episode(&record, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first, "encoding is deterministic");
    }

    #[test]
    fn parse_errors_name_offsets() {
        let good = encode_episode(&patterned_record(3)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        let err = parse_episode(&bad).unwrap_err().to_string();
        assert!(err.contains("bad magic at offset 0"), "{err}");

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = parse_episode(&bad).unwrap_err().to_string();
        assert!(err.contains("version 2 at offset 4"), "{err}");

        // Header claims three action rows but the file holds two.
        let bad = &good[..good.len() - 12];
        let err = parse_episode(bad).unwrap_err().to_string();
        assert!(err.contains("truncated at offset") && err.contains("actions"), "{err}");

        let mut bad = good.clone();
        bad.push(0);
        let err = parse_episode(&bad).unwrap_err().to_string();
        assert!(err.contains("trailing bytes"), "{err}");
    }

    #[test]
    fn invalid_records_are_rejected() {
        let mut record = patterned_record(2);
        record.actions[1] = [0.0, 2.0, 0.0];
        assert!(encode_episode(&record).unwrap_err().to_string().contains("outside"));

        let mut record = patterned_record(2);
        record.actions[0][2] = f32::NAN;
        assert!(encode_episode(&record).is_err());

        let mut record = patterned_record(2);
        record.frames.pop();
        assert!(encode_episode(&record).is_err());
    }

    #[test]
    fn window_padding_matches_index_arithmetic() {
        let record = patterned_record(5);
        let w = window_at(&record, 8, 3);
        assert_eq!(w.mask, vec![true, true, false, false, false, false, false, false]);
        assert_eq!(w.x0, record.frames[3]);
        assert_eq!(w.future_frames[0], record.frames[4]);
        assert_eq!(w.future_frames[1], record.frames[5]);
        assert_eq!(w.future_actions[0], record.actions[3]);
        assert_eq!(w.future_actions[1], record.actions[4]);
        for i in 2..8 {
            assert_eq!(w.future_frames[i], record.frames[5], "padding repeats the last frame");
            assert_eq!(w.future_actions[i], [0.0; 3], "padded actions are zero");
        }

        let full = window_at(&patterned_record(8), 8, 0);
        assert!(full.mask.iter().all(|&m| m), "no padding when the window fits");
    }

    #[test]
    fn sample_window_is_seed_deterministic_and_covers_starts() {
        let record = patterned_record(5);
        assert_eq!(sample_window(&record, 8, 7), sample_window(&record, 8, 7));
        let starts: BTreeSet<usize> =
            (0..200).map(|s| sample_window(&record, 8, s).start).collect();
        assert!(starts.iter().all(|&k| k < 5));
        assert!(starts.contains(&0) && starts.contains(&4), "uniform draw reaches both ends");
    }

    #[test]
    fn generated_dataset_replays_bit_exactly() {
        let dir = tempdir().unwrap();
        let manifest =
            generate_episodes(dir.path(), &[ThemeId::A, ThemeId::D], 1, 0).unwrap();
        assert_eq!(manifest.splits["train"].len(), 10);
        assert_eq!(manifest.splits["test"].len(), 10);
        manifest.validate().unwrap();

        for (split, names) in &manifest.splits {
            for name in names {
                let record = read_episode(&manifest.episode_path(split, name)).unwrap();
                let mut state = reset(record.meta.theme_id, record.meta.seed).unwrap();
                let mut task =
                    TaskSpec::new(record.meta.template, record.meta.target_color).unwrap();
                task.bind(&state);
                assert_eq!(task.instruction_text, record.meta.instruction_text);
                assert_eq!(render(&state), record.frames[0], "{name} frame 0");
                for (i, a) in record.actions.iter().enumerate() {
                    state = step(&state, Action::new(a[0], a[1], a[2]));
                    assert_eq!(render(&state), record.frames[i + 1], "{name} frame {}", i + 1);
                }
                assert!(check_success(&state, &task).unwrap(), "{name} ends in success");
            }
        }

        // Regeneration is byte-identical, files and manifest alike.
        let dir2 = tempdir().unwrap();
        generate_episodes(dir2.path(), &[ThemeId::A, ThemeId::D], 1, 0).unwrap();
        for (split, names) in &manifest.splits {
            for name in names {
                let a = fs::read(manifest.episode_path(split, name)).unwrap();
                let b = fs::read(dir2.path().join(split).join(name)).unwrap();
                assert_eq!(a, b, "{name} regenerates identically");
            }
        }

        let loaded = DatasetManifest::load(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(loaded.splits, manifest.splits);
        assert_eq!(loaded.config_hash, manifest.config_hash);
    }

    #[test]
    fn batches_shuffle_deterministically_and_respect_splits() {
        let dir = tempdir().unwrap();
        let manifest =
            generate_episodes(dir.path(), &[ThemeId::A, ThemeId::D], 2, 1).unwrap();
        assert_eq!(manifest.splits["train"].len(), 20);

        let batches = iterate_batches(&manifest, "train", 16, 0).unwrap();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 4]);
        for record in batches.iter().flatten() {
            assert_ne!(record.meta.theme_id, ThemeId::D, "held-out theme stays out of train");
        }

        let replay = iterate_batches(&manifest, "train", 16, 0).unwrap();
        assert_eq!(replay, batches, "same epoch seed, same order");

        let seeds = |bs: &[Vec<EpisodeRecord>]| -> Vec<u64> {
            bs.iter().flatten().map(|r| r.meta.seed).collect()
        };
        let other = iterate_batches(&manifest, "train", 16, 1).unwrap();
        assert_ne!(seeds(&other), seeds(&batches), "different epoch seed reshuffles");

        assert!(iterate_batches(&manifest, "val", 16, 0).is_err());
        let mut empty = manifest.clone();
        empty.splits.insert("train".to_string(), Vec::new());
        let err = Dataset::load(&empty, "train").unwrap_err().to_string();
        assert!(err.contains("empty"), "{err}");
    }
}
