//! Visibility-aware merging of per-part splat clouds.
//!
//! Every splat of part `p` is tested, in order, against:
//!
//! 1. reliability: covered by at least `min_coverage` of its own part's views;
//! 2. redundancy: not well covered by the views of a more detailed part;
//! 3. salience: not more visible in the views of another part at the same detail level.
//!
//! The first rule that fails removes the splat and is recorded in the decision log. All
//! rules look at the original clouds, so the outcome does not depend on part order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::{splat_salience_with, view_coverage_with, CoverageMode, RenderConfig, SalienceMode};
use crate::types::{Camera, PartLabel, Splat, SplatCloud};

/// Canonical views per part: front, left, back, right.
pub const VIEWS_PER_PART: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionConfig {
    pub min_coverage_body: u32,
    pub min_coverage_head: u32,
    /// Views of a more detailed part needed to mark a coarser splat redundant.
    pub redundancy_coverage: u32,
    /// Salience below this is never treated as "more visible".
    pub salience_epsilon: f64,
    pub salience_rule: bool,
    /// Accept inputs with some parts absent; rules involving them are skipped.
    pub allow_missing_parts: bool,
    pub coverage_mode: CoverageMode,
    pub salience_mode: SalienceMode,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            // "more than 2" views
            min_coverage_body: 3,
            min_coverage_head: 4,
            redundancy_coverage: 3,
            salience_epsilon: 1e-8,
            salience_rule: true,
            allow_missing_parts: false,
            coverage_mode: CoverageMode::Center,
            salience_mode: SalienceMode::SumOfAbs,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        let max = VIEWS_PER_PART as u32;
        for (field, v) in [
            ("min_coverage_body", self.min_coverage_body),
            ("min_coverage_head", self.min_coverage_head),
            ("redundancy_coverage", self.redundancy_coverage),
        ] {
            if !(1..=max).contains(&v) {
                return Err(Error::validation(field, format!("{v} is outside 1..={max}")));
            }
        }
        if !(self.salience_epsilon >= 0.0) {
            return Err(Error::validation("salience_epsilon", "must be non-negative"));
        }
        Ok(())
    }

    fn min_coverage(&self, part: PartLabel) -> u32 {
        match part {
            PartLabel::Head => self.min_coverage_head,
            _ => self.min_coverage_body,
        }
    }
}

/// One part's canonical cameras and reconstructed cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PartInput {
    cameras: Vec<Camera>,
    cloud: SplatCloud,
}

impl PartInput {
    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn cloud(&self) -> &SplatCloud {
        &self.cloud
    }
}

/// Per-part inputs, keyed by label so storage order never matters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartViews {
    parts: BTreeMap<PartLabel, PartInput>,
}

impl PartViews {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a part. Requires exactly four cameras of one resolution; the cloud is
    /// relabeled to `part`.
    pub fn insert(&mut self, part: PartLabel, cameras: Vec<Camera>, cloud: SplatCloud) -> Result<()> {
        if cameras.len() != VIEWS_PER_PART {
            return Err(Error::validation(
                "cameras",
                format!("part `{part}` has {} cameras, expected {VIEWS_PER_PART}", cameras.len()),
            ));
        }
        let (w, h) = (cameras[0].width(), cameras[0].height());
        if cameras.iter().any(|c| c.width() != w || c.height() != h) {
            return Err(Error::validation(
                "cameras",
                format!("part `{part}` mixes camera resolutions"),
            ));
        }
        self.parts.insert(
            part,
            PartInput {
                cameras,
                cloud: cloud.relabeled(part),
            },
        );
        Ok(())
    }

    pub fn with(mut self, part: PartLabel, cameras: Vec<Camera>, cloud: SplatCloud) -> Result<Self> {
        self.insert(part, cameras, cloud)?;
        Ok(self)
    }

    pub fn get(&self, part: PartLabel) -> Option<&PartInput> {
        self.parts.get(&part)
    }

    pub fn parts(&self) -> impl Iterator<Item = (PartLabel, &PartInput)> {
        self.parts.iter().map(|(p, i)| (*p, i))
    }
}

/// The rule that removed a splat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Reliability,
    Redundancy,
    Salience,
}

/// One line of the decision log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub part: PartLabel,
    pub source_index: u32,
    pub kept: bool,
    pub rule: Option<Rule>,
    pub coverage_own: u32,
    /// Coverage under every other present part's views.
    pub coverage_by_part: BTreeMap<PartLabel, u32>,
    pub salience_own: f64,
    /// Largest salience under the views of a same-detail part, if one is present.
    pub salience_other: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composition {
    pub cloud: SplatCloud,
    /// In output order: parts in fixed order, then ascending `source_index`.
    pub log: Vec<Decision>,
}

fn check_parts(parts: &PartViews, allow_missing: bool) -> Result<()> {
    if allow_missing {
        return Ok(());
    }
    for p in PartLabel::ALL {
        if parts.get(p).is_none() {
            return Err(Error::MissingPart(p.name()));
        }
    }
    Ok(())
}

fn salience_under(cloud: &SplatCloud, cameras: &[Camera], cfg: &CompositionConfig) -> Result<Vec<f64>> {
    let (w, h) = (cameras[0].width(), cameras[0].height());
    splat_salience_with(cloud, cameras, w, h, &RenderConfig::default(), cfg.salience_mode)
}

/// Positions into `cloud.splats()` ordered by ascending source index.
fn by_source_index(cloud: &SplatCloud) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by_key(|&k| cloud.source_index()[k]);
    order
}

pub fn compose(parts: &PartViews, cfg: &CompositionConfig) -> Result<Composition> {
    cfg.validate()?;
    check_parts(parts, cfg.allow_missing_parts)?;

    let mut log = Vec::new();
    for (part, input) in parts.parts() {
        let cloud = &input.cloud;
        let detail = part.detail_level();
        let finer: Vec<(PartLabel, &PartInput)> =
            parts.parts().filter(|(q, _)| q.detail_level() > detail).collect();
        let peers: Vec<(PartLabel, &PartInput)> = parts
            .parts()
            .filter(|(q, _)| *q != part && q.detail_level() == detail)
            .collect();

        let salience_own = salience_under(cloud, &input.cameras, cfg)?;
        let salience_peers = peers
            .iter()
            .map(|(_, q)| salience_under(cloud, &q.cameras, cfg))
            .collect::<Result<Vec<_>>>()?;

        for k in by_source_index(cloud) {
            let splat = &cloud.splats()[k];
            let coverage = |cams: &[Camera]| view_coverage_with(splat, cams, cfg.coverage_mode) as u32;
            let coverage_own = coverage(&input.cameras);
            let coverage_by_part: BTreeMap<PartLabel, u32> = parts
                .parts()
                .filter(|(q, _)| *q != part)
                .map(|(q, qi)| (q, coverage(&qi.cameras)))
                .collect();
            let salience_other = salience_peers.iter().map(|s| s[k]).reduce(f64::max);

            let rule = if coverage_own < cfg.min_coverage(part) {
                Some(Rule::Reliability)
            } else if finer
                .iter()
                .any(|(q, _)| coverage_by_part[q] >= cfg.redundancy_coverage)
            {
                Some(Rule::Redundancy)
            } else if cfg.salience_rule
                && salience_other.is_some_and(|o| o > salience_own[k] && o > cfg.salience_epsilon)
            {
                Some(Rule::Salience)
            } else {
                None
            };

            log.push(Decision {
                part,
                source_index: cloud.source_index()[k],
                kept: rule.is_none(),
                rule,
                coverage_own,
                coverage_by_part,
                salience_own: salience_own[k],
                salience_other,
            });
        }
    }

    let cloud = replay(parts, &log)?;
    Ok(Composition { cloud, log })
}

/// Every splat of every present part, in fixed part order, unfiltered.
pub fn direct_union(parts: &PartViews) -> SplatCloud {
    let mut splats: Vec<Splat> = Vec::new();
    let mut normals = Vec::new();
    for (_, input) in parts.parts() {
        for k in by_source_index(&input.cloud) {
            splats.push(input.cloud.splats()[k]);
            normals.push(input.cloud.normals()[k]);
        }
    }
    SplatCloud::with_normals(PartLabel::Full, splats, normals).expect("dense indices by construction")
}

/// Rebuilds the composed cloud from a decision log: kept entries, in log order.
pub fn replay(parts: &PartViews, log: &[Decision]) -> Result<SplatCloud> {
    let lookup: BTreeMap<PartLabel, BTreeMap<u32, usize>> = parts
        .parts()
        .map(|(p, input)| {
            let idx = input
                .cloud
                .source_index()
                .iter()
                .enumerate()
                .map(|(k, &s)| (s, k))
                .collect();
            (p, idx)
        })
        .collect();
    let mut splats = Vec::new();
    let mut normals = Vec::new();
    for d in log.iter().filter(|d| d.kept) {
        let input = parts.get(d.part).ok_or(Error::MissingPart(d.part.name()))?;
        let k = *lookup[&d.part].get(&d.source_index).ok_or_else(|| {
            Error::validation(
                "decision log",
                format!("part `{}` has no splat with source index {}", d.part, d.source_index),
            )
        })?;
        splats.push(input.cloud.splats()[k]);
        normals.push(input.cloud.normals()[k]);
    }
    SplatCloud::with_normals(PartLabel::Full, splats, normals)
}

/// JSON-lines form of a decision log.
pub fn log_to_jsonl(log: &[Decision]) -> String {
    let mut out = String::new();
    for d in log {
        out.push_str(&serde_json::to_string(d).expect("decision serializes"));
        out.push('\n');
    }
    out
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<Decision>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::format("decision log", format!("line {}: {e}", n + 1)))
        })
        .collect()
}
