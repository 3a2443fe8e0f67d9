//! 68-point human face landmarks to 26-point anime face landmarks.
//!
//! Points are first merged by averaging source groups, then each facial
//! region gets its own linear transform about its centroid, then one global
//! similarity is applied. The default grouping lives in
//! `data/anime26_merge.json`; it is a reconstruction from the standard
//! 68-point semantic regions and can be replaced wholesale.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix2, Rotation2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HUMAN_POINTS: usize = 68;
pub const ANIME_POINTS: usize = 26;

const DEFAULT_TABLE: &str = include_str!("../data/anime26_merge.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Human68,
    Anime26,
}

impl Scheme {
    pub fn len(self) -> usize {
        match self {
            Scheme::Human68 => HUMAN_POINTS,
            Scheme::Anime26 => ANIME_POINTS,
        }
    }
}

/// Ordered `(x, y)` points, normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub scheme: Scheme,
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(scheme: Scheme, points: Vec<[f64; 2]>) -> Result<Self> {
        let set = Self { scheme, points };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.scheme.len() {
            return Err(Error::Landmark(format!(
                "{:?} needs {} points, got {}",
                self.scheme,
                self.scheme.len(),
                self.points.len()
            )));
        }
        if let Some(i) = self.points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Landmark(format!("point {i} is not finite")));
        }
        Ok(())
    }

    fn expect(&self, scheme: Scheme) -> Result<()> {
        if self.scheme != scheme {
            return Err(Error::Landmark(format!("expected {scheme:?} landmarks, got {:?}", self.scheme)));
        }
        self.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    FaceContour,
    LeftEye,
    RightEye,
    Mouth,
    Brows,
}

impl Region {
    pub const ALL: [Region; 5] = [Region::FaceContour, Region::LeftEye, Region::RightEye, Region::Mouth, Region::Brows];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEntry {
    pub target: usize,
    #[serde(default)]
    pub label: String,
    /// Region whose transform moves this point; `None` leaves it to the
    /// global similarity only.
    pub region: Option<Region>,
    pub sources: Vec<usize>,
}

/// Which anime points are averaged from which human points, plus the
/// upper/lower point pairs whose distance is an eye or mouth opening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTable {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub comment: String,
    pub entries: Vec<MergeEntry>,
    #[serde(default)]
    pub apertures: BTreeMap<Region, [usize; 2]>,
}

impl Default for MergeTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_TABLE).expect("bundled merge table is valid")
    }
}

impl MergeTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != ANIME_POINTS {
            return Err(Error::Landmark(format!("merge table has {} entries, needs {ANIME_POINTS}", self.entries.len())));
        }
        let mut seen = [false; ANIME_POINTS];
        for e in &self.entries {
            if e.target >= ANIME_POINTS || std::mem::replace(&mut seen[e.target], true) {
                return Err(Error::Landmark(format!("target {} out of range or repeated", e.target)));
            }
            if e.sources.is_empty() {
                return Err(Error::Landmark(format!("target {} has no sources", e.target)));
            }
            if let Some(s) = e.sources.iter().find(|&&s| s >= HUMAN_POINTS) {
                return Err(Error::Landmark(format!("target {} uses source {s} outside [0, {HUMAN_POINTS})", e.target)));
            }
        }
        for (region, pair) in &self.apertures {
            if pair.iter().any(|&i| i >= ANIME_POINTS) {
                return Err(Error::Landmark(format!("{region:?} aperture pair {pair:?} out of range")));
            }
        }
        Ok(())
    }

    fn region_of(&self) -> [Option<Region>; ANIME_POINTS] {
        let mut out = [None; ANIME_POINTS];
        for e in &self.entries {
            out[e.target] = e.region;
        }
        out
    }
}

/// Linear map plus offset, applied about the region centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionTransform {
    /// Row-major 2x2.
    #[serde(default = "identity_matrix")]
    pub matrix: [f64; 4],
    #[serde(default)]
    pub offset: [f64; 2],
}

fn identity_matrix() -> [f64; 4] {
    [1.0, 0.0, 0.0, 1.0]
}

impl Default for RegionTransform {
    fn default() -> Self {
        Self { matrix: identity_matrix(), offset: [0.0, 0.0] }
    }
}

impl RegionTransform {
    fn linear(&self) -> Matrix2<f64> {
        let m = self.matrix;
        Matrix2::new(m[0], m[1], m[2], m[3])
    }
}

/// `p -> scale R(rotation) p + translation`, rotation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: f64,
    pub translation: [f64; 2],
}

impl Default for Similarity {
    fn default() -> Self {
        Self { scale: 1.0, rotation: 0.0, translation: [0.0, 0.0] }
    }
}

impl Similarity {
    pub fn linear(&self) -> Matrix2<f64> {
        Rotation2::new(self.rotation).into_inner() * self.scale
    }
}

/// Per-character retargeting parameters, stored as TOML with a `[global]`
/// table and `[region.<name>]` tables. Missing regions are the identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionTransformParams {
    #[serde(default)]
    pub global: Similarity,
    #[serde(default)]
    pub region: BTreeMap<Region, RegionTransform>,
}

impl RegionTransformParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        let params: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (region, t) in &self.region {
            let det = t.linear().determinant();
            if !(det.abs() > 1e-9) || t.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::Landmark(format!("{region:?} transform is singular or non-finite (det {det:e})")));
            }
        }
        let g = &self.global;
        if !(g.scale.abs() > 1e-9) || !g.rotation.is_finite() || g.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Landmark("global similarity is singular or non-finite".into()));
        }
        Ok(())
    }

    fn transform(&self, region: Region) -> RegionTransform {
        self.region.get(&region).copied().unwrap_or_default()
    }
}

/// Average each source group into its anime point.
pub fn merge_points(src: &LandmarkSet, table: &MergeTable) -> Result<LandmarkSet> {
    src.expect(Scheme::Human68)?;
    table.validate()?;
    let mut points = vec![[0.0; 2]; ANIME_POINTS];
    for e in &table.entries {
        let n = e.sources.len() as f64;
        let (sx, sy) = e.sources.iter().fold((0.0, 0.0), |(x, y), &i| (x + src.points[i][0], y + src.points[i][1]));
        points[e.target] = [sx / n, sy / n];
    }
    Ok(LandmarkSet { scheme: Scheme::Anime26, points })
}

/// Region transforms about each region's centroid, then the global similarity.
pub fn apply_region_transforms(
    pts: &LandmarkSet,
    table: &MergeTable,
    params: &RegionTransformParams,
) -> Result<LandmarkSet> {
    pts.expect(Scheme::Anime26)?;
    params.validate()?;
    let regions = table.region_of();
    let mut out: Vec<Vector2<f64>> = pts.points.iter().map(|p| Vector2::new(p[0], p[1])).collect();
    for region in Region::ALL {
        let members: Vec<usize> = (0..ANIME_POINTS).filter(|&i| regions[i] == Some(region)).collect();
        if members.is_empty() {
            continue;
        }
        let t = params.transform(region);
        if t == RegionTransform::default() {
            continue;
        }
        let centroid = members.iter().map(|&i| out[i]).sum::<Vector2<f64>>() / members.len() as f64;
        let m = t.linear();
        let offset = Vector2::new(t.offset[0], t.offset[1]);
        for &i in &members {
            out[i] = m * (out[i] - centroid) + offset + centroid;
        }
    }
    let g = params.global.linear();
    let shift = Vector2::new(params.global.translation[0], params.global.translation[1]);
    let points = out.into_iter().map(|p| g * p + shift).map(|p| [p.x, p.y]).collect();
    Ok(LandmarkSet { scheme: Scheme::Anime26, points })
}

pub fn retarget(src: &LandmarkSet, table: &MergeTable, params: &RegionTransformParams) -> Result<LandmarkSet> {
    apply_region_transforms(&merge_points(src, table)?, table, params)
}

/// Distance between the paired points of `region`, if the table names a pair.
pub fn aperture(pts: &LandmarkSet, table: &MergeTable, region: Region) -> Option<f64> {
    let [a, b] = *table.apertures.get(&region)?;
    let (p, q) = (pts.points[a], pts.points[b]);
    Some(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
}
