//! Deterministic stand-in for the diffusion-based synthetic-data pipeline:
//! prompt bank, per-tier generation manifests, a line-delimited job file an
//! external generation worker can consume, and a procedural renderer that
//! honours the same contract (glass strictly confined to the conditioning
//! mask).

mod render;

pub use render::{render_procedural, render_rgb};

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::data::{GroundTruthMask, Split};
use crate::error::{Error, Result};

/// Placeholder token substituted by the object word.
pub const OBJECT_TOKEN: &str = "<object>";

/// Language prompt templates; each contains [`OBJECT_TOKEN`] exactly once.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub templates: Vec<String>,
    pub object_word: String,
}

impl Default for PromptBank {
    fn default() -> Self {
        // The first three templates are canonical; the remaining twenty are
        // neutral photographic variations.
        let templates = [
            "a photo of a clean <object>",
            "a close-up photo of the <object>",
            "a rendition of the <object>",
            "a photo of a <object>",
            "a photo of the <object>",
            "a bright photo of the <object>",
            "a dark photo of the <object>",
            "a cropped photo of the <object>",
            "a blurry photo of the <object>",
            "a photo of a large <object>",
            "a photo of a small <object>",
            "a photo of one <object>",
            "a photo of my <object>",
            "a good photo of the <object>",
            "a photo of a nice <object>",
            "a photo of the <object> in a room",
            "a photo of the <object> indoors",
            "a photo of the <object> outdoors",
            "a photo of the <object> in bright light",
            "a photo of the <object> in dim light",
            "a photo of the <object> by a wall",
            "a wide photo of the <object>",
            "a detailed photo of the <object>",
        ];
        PromptBank {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            object_word: "transparent glasses".to_string(),
        }
    }
}

impl PromptBank {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Invalid("prompt bank must hold at least one template".into()));
        }
        for t in &self.templates {
            if t.matches(OBJECT_TOKEN).count() != 1 {
                return Err(Error::Invalid(format!(
                    "template '{t}' must contain '{OBJECT_TOKEN}' exactly once"
                )));
            }
        }
        Ok(())
    }

    /// Template `i` (mod bank size) with the object word substituted.
    pub fn realize(&self, i: usize) -> String {
        let t = &self.templates[i % self.templates.len()];
        t.replace(OBJECT_TOKEN, &self.object_word)
    }
}

/// The four disjoint dataset scales, 1x/5x/10x/20x of the mask pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleTier {
    X1,
    X5,
    X10,
    X20,
}

impl ScaleTier {
    pub const ALL: [ScaleTier; 4] = [ScaleTier::X1, ScaleTier::X5, ScaleTier::X10, ScaleTier::X20];

    pub fn multiplier(self) -> usize {
        match self {
            ScaleTier::X1 => 1,
            ScaleTier::X5 => 5,
            ScaleTier::X10 => 10,
            ScaleTier::X20 => 20,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleTier::X1 => "x1",
            ScaleTier::X5 => "x5",
            ScaleTier::X10 => "x10",
            ScaleTier::X20 => "x20",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x1" => Ok(ScaleTier::X1),
            "x5" => Ok(ScaleTier::X5),
            "x10" => Ok(ScaleTier::X10),
            "x20" => Ok(ScaleTier::X20),
            other => Err(Error::Invalid(format!(
                "unknown tier '{other}' (expected x1|x5|x10|x20)"
            ))),
        }
    }
}

/// One image-generation job an external worker (or the procedural renderer)
/// fulfils by writing `images/<job_id>.png` beside `masks/<job_id>.png`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GenerationJob {
    pub job_id: String,
    pub conditioning_mask_id: String,
    pub source_split: Split,
    pub prompt: String,
    pub scale_tier: ScaleTier,
    pub seed: u64,
}

/// All jobs of one tier.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScaleManifest {
    pub tier: ScaleTier,
    pub jobs: Vec<GenerationJob>,
    pub target_count: usize,
}

/// Manifests for every requested tier, keyed and ordered by tier.
pub type ManifestSet = std::collections::BTreeMap<ScaleTier, ScaleManifest>;

/// Build per-tier manifests from a pool of conditioning masks.
///
/// Tier `xK` gets `K` jobs per mask with distinct seeds; prompts cycle
/// round-robin through the bank within each tier. The result is a pure
/// function of pool order, bank and `base_seed`. Any validation-split mask
/// in the pool is rejected.
pub fn build_manifests(
    mask_pool: &[(String, GroundTruthMask)],
    bank: &PromptBank,
    base_seed: u64,
    tiers: &[ScaleTier],
) -> Result<ManifestSet> {
    bank.validate()?;
    for (id, mask) in mask_pool {
        if mask.source_split != Split::Train {
            return Err(Error::ValLeakage { id: id.clone() });
        }
    }
    let mut out = ManifestSet::new();
    let mut next_seed = base_seed;
    let mut sorted = tiers.to_vec();
    sorted.sort();
    sorted.dedup();
    for tier in sorted {
        let mult = tier.multiplier();
        let mut jobs = Vec::with_capacity(mask_pool.len() * mult);
        let mut prompt_cursor = 0usize;
        for (mask_id, _) in mask_pool {
            for copy in 0..mult {
                jobs.push(GenerationJob {
                    job_id: format!("{}-{}-{:03}", tier.as_str(), mask_id, copy),
                    conditioning_mask_id: mask_id.clone(),
                    source_split: Split::Train,
                    prompt: bank.realize(prompt_cursor),
                    scale_tier: tier,
                    seed: next_seed,
                });
                prompt_cursor += 1;
                next_seed = next_seed.wrapping_add(1);
            }
        }
        let target_count = mask_pool.len() * mult;
        out.insert(
            tier,
            ScaleManifest {
                tier,
                jobs,
                target_count,
            },
        );
    }
    debug_assert!(manifest_job_ids_disjoint(&out));
    Ok(out)
}

fn manifest_job_ids_disjoint(set: &ManifestSet) -> bool {
    let mut seen = BTreeSet::new();
    for m in set.values() {
        for j in &m.jobs {
            if !seen.insert(j.job_id.clone()) {
                return false;
            }
        }
    }
    true
}

/// Write one JSON record per job, tiers in order. Round-trips losslessly.
pub fn export_jobs(set: &ManifestSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for manifest in set.values() {
        for job in &manifest.jobs {
            serde_json::to_writer(&mut buf, job)
                .map_err(|e| Error::Invalid(format!("job serialization: {e}")))?;
            buf.write_all(b"\n")
                .map_err(|e| Error::io(path, e))?;
        }
    }
    crate::util::write_atomic(path, &buf)
}

/// Read a job file back into per-tier manifests.
pub fn import_jobs(path: &Path) -> Result<ManifestSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = ManifestSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let job: GenerationJob = serde_json::from_str(&line).map_err(|e| {
            Error::Invalid(format!("{}:{}: bad job record: {e}", path.display(), lineno + 1))
        })?;
        let tier = job.scale_tier;
        out.entry(tier)
            .or_insert_with(|| ScaleManifest {
                tier,
                jobs: Vec::new(),
                target_count: 0,
            })
            .jobs
            .push(job);
    }
    for m in out.values_mut() {
        m.target_count = m.jobs.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn pool(n: usize, split: Split) -> Vec<(String, GroundTruthMask)> {
        (0..n)
            .map(|i| {
                (
                    format!("m{i:03}"),
                    GroundTruthMask {
                        mask: Array2::zeros((64, 64)),
                        source_split: split,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn default_bank_has_23_unique_templates() {
        let bank = PromptBank::default();
        bank.validate().unwrap();
        assert_eq!(bank.templates.len(), 23);
        let set: BTreeSet<_> = bank.templates.iter().collect();
        assert_eq!(set.len(), 23);
        assert_eq!(bank.templates[0], "a photo of a clean <object>");
        assert_eq!(bank.templates[1], "a close-up photo of the <object>");
        assert_eq!(bank.templates[2], "a rendition of the <object>");
        assert_eq!(bank.realize(0), "a photo of a clean transparent glasses");
    }

    #[test]
    fn tier_sizes_follow_multipliers() {
        let bank = PromptBank::default();
        let set = build_manifests(&pool(10, Split::Train), &bank, 7, &ScaleTier::ALL).unwrap();
        let sizes: Vec<usize> = ScaleTier::ALL.iter().map(|t| set[t].jobs.len()).collect();
        assert_eq!(sizes, vec![10, 50, 100, 200]);
        assert!(manifest_job_ids_disjoint(&set));
        // Seeds unique across all jobs.
        let seeds: BTreeSet<u64> = set
            .values()
            .flat_map(|m| m.jobs.iter().map(|j| j.seed))
            .collect();
        assert_eq!(seeds.len(), 360);
    }

    #[test]
    fn val_mask_in_pool_is_rejected() {
        let bank = PromptBank::default();
        let mut p = pool(3, Split::Train);
        p.push((
            "leaky".into(),
            GroundTruthMask {
                mask: Array2::zeros((64, 64)),
                source_split: Split::Val,
            },
        ));
        let err = build_manifests(&p, &bank, 0, &ScaleTier::ALL).unwrap_err();
        assert!(matches!(err, Error::ValLeakage { ref id } if id == "leaky"));
    }

    #[test]
    fn prompts_cover_bank_with_enough_jobs() {
        let bank = PromptBank::default();
        let set = build_manifests(&pool(23, Split::Train), &bank, 0, &[ScaleTier::X1]).unwrap();
        let prompts: BTreeSet<_> = set[&ScaleTier::X1].jobs.iter().map(|j| j.prompt.clone()).collect();
        assert_eq!(prompts.len(), 23);
    }

    #[test]
    fn manifests_are_pure_functions_of_inputs() {
        let bank = PromptBank::default();
        let a = build_manifests(&pool(4, Split::Train), &bank, 42, &ScaleTier::ALL).unwrap();
        let b = build_manifests(&pool(4, Split::Train), &bank, 42, &ScaleTier::ALL).unwrap();
        for tier in ScaleTier::ALL {
            assert_eq!(a[&tier].jobs, b[&tier].jobs);
        }
    }

    #[test]
    fn job_file_round_trip() {
        let bank = PromptBank::default();
        let set = build_manifests(&pool(3, Split::Train), &bank, 9, &ScaleTier::ALL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jobs.jsonl");
        export_jobs(&set, &path).unwrap();
        let back = import_jobs(&path).unwrap();
        assert_eq!(back.len(), 4);
        for tier in ScaleTier::ALL {
            assert_eq!(back[&tier].jobs, set[&tier].jobs);
            assert_eq!(back[&tier].target_count, set[&tier].jobs.len());
        }
        let total: usize = back.values().map(|m| m.jobs.len()).sum();
        assert_eq!(total, 3 + 15 + 30 + 60);
    }

    #[test]
    fn empty_manifest_exports_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jobs.jsonl");
        export_jobs(&ManifestSet::new(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(import_jobs(&path).unwrap().is_empty());
    }
}
