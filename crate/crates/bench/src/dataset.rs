//! On-disk dataset layout: scenes as portable pixmaps, mask proposal sets as
//! run-length files, captions and questions as line-delimited JSON, all tied
//! together by a manifest carrying a content hash per file plus its own
//! integrity hash. Any single corrupted byte anywhere in the directory is
//! detectable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mgvt_core::masks::{add_background, read_masks, synth_proposals, write_masks, Jitter, MaskSet};
use mgvt_core::numerics::{Grid2D, Rng};
use mgvt_core::scene::{read_ppm, Scene, SceneSampler};
use mgvt_core::wire::fnv64;
use mgvt_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::qa::{caption, scene_questions, verify_item, QaItem, QaKind};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

// Child-stream tags so scene sampling, mask jitter, and question sampling
// draw from independent deterministic streams of the one dataset seed.
const STREAM_SCENE: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_QA: u64 = 3;

pub fn scene_rng(seed: u64, index: u64) -> Rng {
    Rng::from_seed(seed).child(STREAM_SCENE).child(index)
}

pub fn mask_rng(seed: u64, index: u64) -> Rng {
    Rng::from_seed(seed).child(STREAM_MASK).child(index)
}

pub fn qa_rng(seed: u64, index: u64) -> Rng {
    Rng::from_seed(seed).child(STREAM_QA).child(index)
}

/// Sample and render scene `index` of a dataset. Shared by dataset writing
/// and the in-memory experiment pipeline so both see identical scenes for a
/// given seed.
pub fn build_scene(seed: u64, index: usize) -> Result<Scene> {
    let mut rng = scene_rng(seed, index as u64);
    let spec = SceneSampler::default().sample(&mut rng)?;
    Ok(spec.render())
}

/// The oversampled proposal set for scene `index`: jittered object proposals
/// plus the exact background complement.
pub fn build_proposals(seed: u64, index: usize, scene: &Scene, proposals: usize) -> Result<MaskSet> {
    let mut rng = mask_rng(seed, index as u64);
    let set = synth_proposals(scene, proposals, Jitter::default(), &mut rng)?;
    Ok(add_background(&set))
}

/// The question set for scene `index`, with yes/no answers alternating by
/// index so existence questions stay balanced across the dataset.
pub fn build_questions(
    seed: u64,
    index: usize,
    scene: &Scene,
    qa_per_scene: usize,
) -> Result<Vec<QaItem>> {
    let mut rng = qa_rng(seed, index as u64);
    scene_questions(&scene.spec, index, qa_per_scene, index % 2 == 0, &mut rng)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestBody {
    version: u32,
    seed: u64,
    side: u32,
    scenes: u32,
    qa_per_scene: u32,
    proposals: u32,
    /// Relative path -> FNV-1a 64 hash of the file bytes, hex.
    files: BTreeMap<String, String>,
}

/// The manifest as stored: the body plus a hash of the body's canonical
/// (compact JSON) encoding, so edits to the manifest itself are caught too.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestFile {
    manifest: ManifestBody,
    integrity: String,
}

fn body_hash(body: &ManifestBody) -> Result<String> {
    let bytes = serde_json::to_vec(body)
        .map_err(|e| Error::Corrupt(format!("manifest encoding failed: {e}")))?;
    Ok(format!("{:016x}", fnv64(&bytes)))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(format!("{:016x}", fnv64(&fs::read(path)?)))
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub qa_per_scene: usize,
    pub proposals: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            scenes: 100,
            qa_per_scene: 4,
            proposals: 24,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        if self.qa_per_scene == 0 || self.qa_per_scene > QaKind::QUESTIONS.len() {
            return Err(Error::Config(format!(
                "qa_per_scene must be 1..={}, got {}",
                QaKind::QUESTIONS.len(),
                self.qa_per_scene
            )));
        }
        if self.proposals == 0 {
            return Err(Error::Config("proposal count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub scenes: usize,
    pub qa_items: usize,
    pub caption_items: usize,
    pub yes_items: usize,
    pub no_items: usize,
    pub files: usize,
}

fn scene_rel(i: usize) -> String {
    format!("scenes/scene_{i:05}.ppm")
}

fn mask_rel(i: usize) -> String {
    format!("masks/scene_{i:05}.mgvm")
}

fn jsonl(items: &[QaItem]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Corrupt(format!("record encoding failed: {e}")))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

fn parse_jsonl(bytes: &[u8], what: &str) -> Result<Vec<QaItem>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Corrupt(format!("{what} is not valid UTF-8")))?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: QaItem = serde_json::from_str(line)
            .map_err(|e| Error::Corrupt(format!("{what} line {}: {e}", n + 1)))?;
        items.push(item);
    }
    Ok(items)
}

/// Generate a dataset directory. Scene work (sampling, rendering, proposal
/// synthesis, question generation) runs in parallel with per-scene seed
/// streams; files are then written by this one thread.
pub fn gen_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<DatasetSummary> {
    use rayon::prelude::*;

    cfg.validate()?;
    fs::create_dir_all(dir.join("scenes"))?;
    fs::create_dir_all(dir.join("masks"))?;

    struct SceneRecord {
        scene: Scene,
        masks: MaskSet,
        questions: Vec<QaItem>,
        cap: QaItem,
    }

    let records: Vec<SceneRecord> = (0..cfg.scenes)
        .into_par_iter()
        .map(|i| {
            let scene = build_scene(cfg.seed, i)?;
            let masks = build_proposals(cfg.seed, i, &scene, cfg.proposals)?;
            let questions = build_questions(cfg.seed, i, &scene, cfg.qa_per_scene)?;
            let cap = caption(&scene.spec, i);
            // Never write a mislabeled record: re-derive every answer from
            // the scene spec before it reaches disk.
            for q in &questions {
                verify_item(&scene.spec, q)?;
            }
            verify_item(&scene.spec, &cap)?;
            Ok(SceneRecord {
                scene,
                masks,
                questions,
                cap,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut qa_items = Vec::new();
    let mut caption_items = Vec::new();
    let (mut yes_items, mut no_items) = (0usize, 0usize);
    let mut side = 0u32;

    for (i, rec) in records.iter().enumerate() {
        side = rec.scene.spec.side as u32;
        let scene_path = dir.join(scene_rel(i));
        rec.scene.write_ppm(&scene_path)?;
        files.insert(scene_rel(i), file_hash(&scene_path)?);

        let mask_path = dir.join(mask_rel(i));
        write_masks(&rec.masks, &mask_path)?;
        files.insert(mask_rel(i), file_hash(&mask_path)?);

        for q in &rec.questions {
            match (q.kind, q.answer.as_str()) {
                (QaKind::Existence, "yes") => yes_items += 1,
                (QaKind::Existence, _) => no_items += 1,
                _ => {}
            }
        }
        qa_items.extend(rec.questions.iter().cloned());
        caption_items.push(rec.cap.clone());
    }

    fs::write(dir.join("qa.jsonl"), jsonl(&qa_items)?)?;
    files.insert("qa.jsonl".into(), file_hash(&dir.join("qa.jsonl"))?);
    fs::write(dir.join("captions.jsonl"), jsonl(&caption_items)?)?;
    files.insert(
        "captions.jsonl".into(),
        file_hash(&dir.join("captions.jsonl"))?,
    );

    let body = ManifestBody {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        side,
        scenes: cfg.scenes as u32,
        qa_per_scene: cfg.qa_per_scene as u32,
        proposals: cfg.proposals as u32,
        files,
    };
    let integrity = body_hash(&body)?;
    let n_files = body.files.len() + 1;
    let mf = ManifestFile {
        manifest: body,
        integrity,
    };
    // Compact encoding: every byte of the manifest is semantic, so a byte
    // flip either breaks parsing or lands in a value the verifier checks.
    let bytes = serde_json::to_vec(&mf)
        .map_err(|e| Error::Corrupt(format!("manifest encoding failed: {e}")))?;
    fs::write(dir.join(MANIFEST_NAME), bytes)?;

    Ok(DatasetSummary {
        scenes: cfg.scenes,
        qa_items: qa_items.len(),
        caption_items: caption_items.len(),
        yes_items,
        no_items,
        files: n_files,
    })
}

fn read_manifest(dir: &Path) -> Result<ManifestBody> {
    let bytes = fs::read(dir.join(MANIFEST_NAME))?;
    let mf: ManifestFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corrupt(format!("manifest does not parse: {e}")))?;
    if body_hash(&mf.manifest)? != mf.integrity {
        return Err(Error::Corrupt(
            "manifest integrity hash does not match its content".into(),
        ));
    }
    if mf.manifest.version != MANIFEST_VERSION {
        return Err(Error::Corrupt(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            mf.manifest.version
        )));
    }
    Ok(mf.manifest)
}

/// Check every hash the manifest records, plus the manifest's own integrity
/// hash and the expected file census for the declared scene count.
pub fn verify_dataset(dir: &Path) -> Result<DatasetSummary> {
    let body = read_manifest(dir)?;
    let expected = body.scenes as usize * 2 + 2;
    if body.files.len() != expected {
        return Err(Error::Corrupt(format!(
            "manifest lists {} files, expected {expected} for {} scenes",
            body.files.len(),
            body.scenes
        )));
    }
    for i in 0..body.scenes as usize {
        for rel in [scene_rel(i), mask_rel(i)] {
            if !body.files.contains_key(&rel) {
                return Err(Error::Corrupt(format!("manifest is missing entry {rel}")));
            }
        }
    }
    for (rel, want) in &body.files {
        let got = file_hash(&dir.join(rel))?;
        if got != *want {
            return Err(Error::Corrupt(format!(
                "{rel}: content hash {got} does not match manifest {want}"
            )));
        }
    }
    // Hashes are byte-exact, so jsonl records still need a parse check (a
    // hash only proves the file is what the generator wrote).
    let qa = parse_jsonl(&fs::read(dir.join("qa.jsonl"))?, "qa.jsonl")?;
    let caps = parse_jsonl(&fs::read(dir.join("captions.jsonl"))?, "captions.jsonl")?;
    let (yes_items, no_items) = qa.iter().fold((0, 0), |(y, n), q| match q.kind {
        QaKind::Existence if q.answer == "yes" => (y + 1, n),
        QaKind::Existence => (y, n + 1),
        _ => (y, n),
    });
    Ok(DatasetSummary {
        scenes: body.scenes as usize,
        qa_items: qa.len(),
        caption_items: caps.len(),
        yes_items,
        no_items,
        files: body.files.len() + 1,
    })
}

/// One scene as loaded back from disk.
pub struct LoadedScene {
    pub pixels: Grid2D<[f64; 3]>,
    pub masks: MaskSet,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub side: usize,
    pub seed: u64,
    pub scenes: Vec<LoadedScene>,
    pub qa: Vec<QaItem>,
    pub captions: Vec<QaItem>,
}

/// Verify, then load the whole directory back into memory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    verify_dataset(dir)?;
    let body = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(body.scenes as usize);
    for i in 0..body.scenes as usize {
        let pixels = read_ppm(&dir.join(scene_rel(i)))?;
        let masks = read_masks(&dir.join(mask_rel(i)))?;
        if masks.side != body.side as usize || pixels.rows() != body.side as usize {
            return Err(Error::Corrupt(format!(
                "scene {i} geometry disagrees with manifest side {}",
                body.side
            )));
        }
        scenes.push(LoadedScene { pixels, masks });
    }
    let qa = parse_jsonl(&fs::read(dir.join("qa.jsonl"))?, "qa.jsonl")?;
    let captions = parse_jsonl(&fs::read(dir.join("captions.jsonl"))?, "captions.jsonl")?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        side: body.side as usize,
        seed: body.seed,
        scenes,
        qa,
        captions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            scenes: 6,
            qa_per_scene: 4,
            proposals: 6,
            seed: 42,
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generate_verify_load_round_trip() {
        let tmp = TempDir::new().unwrap();
        let summary = gen_dataset(tmp.path(), &small_cfg()).unwrap();
        assert_eq!(summary.scenes, 6);
        assert_eq!(summary.caption_items, 6);
        assert!(summary.qa_items >= 12);
        let verified = verify_dataset(tmp.path()).unwrap();
        assert_eq!(verified.qa_items, summary.qa_items);
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.scenes.len(), 6);
        assert_eq!(ds.side, 64);
        for s in &ds.scenes {
            assert_eq!(s.masks.member_count(), 7);
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_directories() {
        let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        gen_dataset(a.path(), &small_cfg()).unwrap();
        gen_dataset(b.path(), &small_cfg()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn existence_answers_are_balanced() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = small_cfg();
        cfg.scenes = 31;
        let summary = gen_dataset(tmp.path(), &cfg).unwrap();
        assert_eq!(summary.yes_items + summary.no_items, 31);
        assert!(summary.yes_items.abs_diff(summary.no_items) <= 1);
    }

    #[test]
    fn any_corrupted_file_is_detected() {
        let tmp = TempDir::new().unwrap();
        gen_dataset(tmp.path(), &small_cfg()).unwrap();
        let names = dir_bytes(tmp.path());
        let mut rng = Rng::from_seed(99);
        for (rel, original) in &names {
            let path = tmp.path().join(rel);
            let mut bytes = original.clone();
            let at = rng.int_in(0, bytes.len() - 1);
            bytes[at] ^= 1 << rng.int_in(0, 7);
            fs::write(&path, &bytes).unwrap();
            assert!(
                verify_dataset(tmp.path()).is_err(),
                "flip in {rel} went unnoticed"
            );
            fs::write(&path, original).unwrap();
        }
        verify_dataset(tmp.path()).unwrap();
    }

    #[test]
    fn manifest_census_mismatch_is_detected() {
        let tmp = TempDir::new().unwrap();
        gen_dataset(tmp.path(), &small_cfg()).unwrap();
        fs::remove_file(tmp.path().join(scene_rel(3))).unwrap();
        assert!(verify_dataset(tmp.path()).is_err());
    }

    #[test]
    fn zero_scene_config_is_rejected() {
        let cfg = DatasetConfig {
            scenes: 0,
            ..small_cfg()
        };
        assert!(cfg.validate().is_err());
    }
}
