//! Named verification suites and golden-vector management.

use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::checks::{self, CheckResult};
use crate::error::{LsrmError, Result};
use crate::golden;
use crate::pipeline::{build_instance, sparse_stage_forward, stage_one, InstanceOptions, Model, ModelConfig};
use crate::scene::SceneFile;
use crate::tokenizer::ZeroFeatures;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Attention,
    Routing,
    Pipeline,
    Parallel,
    All,
}

impl FromStr for Suite {
    type Err = LsrmError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" => Suite::Attention,
            "routing" => Suite::Routing,
            "pipeline" => Suite::Pipeline,
            "parallel" => Suite::Parallel,
            "all" => Suite::All,
            _ => {
                return Err(LsrmError::config(format!(
                    "unknown suite {s:?} (attention, routing, pipeline, parallel, all)"
                )))
            }
        })
    }
}

impl Suite {
    pub const PARTS: [Suite; 4] = [Suite::Attention, Suite::Routing, Suite::Pipeline, Suite::Parallel];
}

/// Instance used by the parity checks and goldens: small enough for a
/// single core, large enough that every worker count owns several blocks.
pub const DESK_SCENE: &str = "small_sphere";
pub const GOLDEN_SEED: u64 = 13;

pub fn run_suite(suite: Suite) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    match suite {
        Suite::All => {
            for s in Suite::PARTS {
                out.extend(run_suite(s)?);
            }
        }
        Suite::Attention => {
            out.push(checks::sparse_attention_matches_dense(100, 1e-5)?);
            out.push(checks::saturated_gates_match_dense(20, 1e-4)?);
            out.push(checks::gqa_constraint());
        }
        Suite::Routing => {
            out.push(checks::sdf_agrees_with_oracle(2000));
            out.extend(checks::mask_matches_brute_force(&[16, 32, 96])?);
            out.push(checks::routing_matches_oracle(&["sphere", "box", "union"], &checks::test_rigs(), 48, 48)?);
        }
        Suite::Pipeline => {
            out.push(checks::residual_identity(1000, 1e-6, 5)?);
            out.extend(checks::geometry_primitives(10_000, 1e-6, 1e-6, 1e-5)?);
            out.push(checks::dense_stage_composes(3)?);
        }
        Suite::Parallel => {
            let cfg = ModelConfig::desk();
            let model = Model::random(&cfg, GOLDEN_SEED)?;
            let scene = SceneFile::preset(DESK_SCENE, cfg.views).build()?;
            out.extend(checks::parallel_parity(&model, &scene, &[1, 2, 3, 4, 8], 1e-6)?);
            let corpus = checks::scene_corpus(50, 7, 48, 24, 4)?;
            out.extend(checks::lpt_quality(&corpus, &[2, 3, 4, 8], 300)?);
            out.push(checks::block_aware_beats_naive(&corpus, 8, 0.9)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    /// First failing check and its first counterexample.
    pub first_failure: Option<String>,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn new(suite: Suite, checks: Vec<CheckResult>) -> Self {
        let first_failure = checks
            .iter()
            .find(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.first_failure.as_deref().unwrap_or("failed")));
        SuiteReport {
            suite,
            passed: first_failure.is_none(),
            first_failure,
            checks,
        }
    }
}

/// Golden files of the desk model with [`GOLDEN_SEED`] on the desk scene:
/// the token streams after each stage, plus the fine volume coordinates.
pub fn golden_set() -> Result<Vec<(&'static str, Vec<u8>)>> {
    let cfg = ModelConfig::desk();
    let model = Model::random(&cfg, GOLDEN_SEED)?;
    let scene = SceneFile::preset(DESK_SCENE, cfg.views).build()?;
    let s1 = stage_one(&model, &scene, &ZeroFeatures { dim: cfg.d_feat })?;
    let inst = build_instance(&model, &scene, &s1, &InstanceOptions::default())?;
    let (x_s, y_s) = sparse_stage_forward(&inst.x_up.features, &inst.y_up.features, &model.sparse_blocks, &inst.ctx)?;
    Ok(vec![
        ("dense_stage.gv", golden::encode(&[&s1.x_d, &s1.y_d])),
        ("sparse_stage.gv", golden::encode(&[&x_s, &y_s])),
        ("sparse_tokens.coords", golden::encode_coords(&inst.x_up.coords)),
    ])
}

pub fn write_goldens(dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (name, bytes) in golden_set()? {
        std::fs::write(dir.join(name), bytes)?;
        names.push(name.to_string());
    }
    Ok(names)
}

/// Byte comparison of freshly computed goldens with a frozen directory; the
/// first mismatch is reported with its file and byte offset.
pub fn check_goldens(dir: &Path) -> Result<CheckResult> {
    Ok(compare_golden_set(dir, &golden_set()?))
}

/// [`check_goldens`] against an already computed set.
pub fn compare_golden_set(dir: &Path, fresh: &[(&str, Vec<u8>)]) -> CheckResult {
    let mut first_failure = None;
    let mut bad = 0usize;
    for (name, bytes) in fresh {
        let path = dir.join(name);
        let diag = match std::fs::read(&path) {
            Err(e) => Some(format!("{name}: cannot read {}: {e}", path.display())),
            Ok(frozen) => golden::compare_bytes(&frozen, bytes).err().map(|e| format!("{name}: {e}")),
        };
        if let Some(d) = diag {
            bad += 1;
            first_failure.get_or_insert(d);
        }
    }
    CheckResult {
        name: "golden_vectors_stable".into(),
        passed: bad == 0,
        cases: fresh.len(),
        max_error: bad as f64,
        tolerance: 0.0,
        first_failure,
        detail: format!("{} files under {}", fresh.len(), dir.display()),
    }
}
