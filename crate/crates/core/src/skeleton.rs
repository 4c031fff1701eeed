//! Airway centerline tree ("lung skeleton").
//!
//! Airways are straight-or-bent polylines in CT coordinates (mm). Every
//! airway's first centerline point is its parent's last point, so a
//! bifurcation is simply the distal point of an airway with children.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{Point3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row capacity used for observation matrices unless a tree says otherwise.
pub const DEFAULT_MAX_ROWS: usize = 500;

/// Shared bifurcation points must agree to this tolerance (mm).
const JOINT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AirwayId(pub usize);

impl AirwayId {
    pub const ROOT: AirwayId = AirwayId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for AirwayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Airway {
    pub id: AirwayId,
    pub parent: Option<AirwayId>,
    pub children: Vec<AirwayId>,
    /// Proximal end first, distal end last.
    pub centerline: Vec<Point3<f64>>,
    /// Lumen radius at each centerline point.
    pub radius: Vec<f64>,
}

impl Airway {
    pub fn proximal_point(&self) -> Point3<f64> {
        self.centerline[0]
    }

    /// The bifurcation point when the airway has children.
    pub fn distal_point(&self) -> Point3<f64> {
        *self.centerline.last().expect("centerline has at least two points")
    }

    pub fn length(&self) -> f64 {
        polyline_length(&self.centerline)
    }

    /// Unit tangent of the first segment.
    pub fn proximal_direction(&self) -> Vector3<f64> {
        (self.centerline[1] - self.centerline[0]).normalize()
    }

    /// Unit tangent of the last segment, pointing distally.
    pub fn distal_direction(&self) -> Vector3<f64> {
        let n = self.centerline.len();
        (self.centerline[n - 1] - self.centerline[n - 2]).normalize()
    }

    pub fn is_bifurcation(&self) -> bool {
        self.children.len() >= 2
    }
}

pub fn polyline_length(points: &[Point3<f64>]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Closest point on the tree's centerlines to a query point.
#[derive(Debug, Clone, Copy)]
pub struct CenterlineFoot {
    pub airway: AirwayId,
    pub point: Point3<f64>,
    pub distance: f64,
    /// Interpolated lumen radius at the foot point.
    pub radius: f64,
    /// Arc length from the root's proximal point to the foot point.
    pub insertion: f64,
}

/// Immutable airway tree. Airway IDs are dense indices `0..len()`.
#[derive(Debug, Clone)]
pub struct AirwayTree {
    airways: Vec<Airway>,
    root_id: AirwayId,
    max_rows: usize,
    depth: Vec<usize>,
    z_bif: Vec<f64>,
}

impl PartialEq for AirwayTree {
    fn eq(&self, other: &Self) -> bool {
        self.root_id == other.root_id && self.max_rows == other.max_rows && self.airways == other.airways
    }
}

impl AirwayTree {
    /// Validates and indexes a set of airways. The input order is irrelevant.
    pub fn new(root_id: AirwayId, max_rows: usize, airways: Vec<Airway>) -> Result<Self> {
        let n = airways.len();
        if n == 0 {
            return Err(Error::tree(None, "airways", "tree has no airways"));
        }
        if n > max_rows {
            return Err(Error::tree(
                None,
                "max_rows",
                format!("{n} airways exceed row capacity {max_rows}"),
            ));
        }

        let mut slots: Vec<Option<Airway>> = vec![None; n];
        for airway in airways {
            let id = airway.id;
            let slot = slots
                .get_mut(id.index())
                .ok_or_else(|| Error::tree(Some(id), "id", format!("ids must be dense in 0..{n}")))?;
            if slot.is_some() {
                return Err(Error::tree(Some(id), "id", "duplicated airway id"));
            }
            *slot = Some(airway);
        }
        let airways: Vec<Airway> = slots.into_iter().map(|a| a.expect("all slots filled")).collect();

        for a in &airways {
            validate_geometry(a)?;
        }

        let roots: Vec<AirwayId> = airways.iter().filter(|a| a.parent.is_none()).map(|a| a.id).collect();
        if roots != [root_id] {
            return Err(Error::tree(
                Some(root_id),
                "parent",
                format!("expected exactly one root {root_id}, found {roots:?}"),
            ));
        }

        for a in &airways {
            if let Some(p) = a.parent {
                let parent = airways
                    .get(p.index())
                    .ok_or_else(|| Error::tree(Some(a.id), "parent", format!("unknown parent {p}")))?;
                if !parent.children.contains(&a.id) {
                    return Err(Error::tree(
                        Some(a.id),
                        "parent",
                        format!("parent {p} does not list it as a child"),
                    ));
                }
                if (parent.distal_point() - a.proximal_point()).norm() > JOINT_TOLERANCE {
                    return Err(Error::tree(
                        Some(a.id),
                        "centerline",
                        format!("first point does not coincide with parent {p}'s distal point"),
                    ));
                }
            }
            for (k, &c) in a.children.iter().enumerate() {
                let child = airways
                    .get(c.index())
                    .ok_or_else(|| Error::tree(Some(a.id), "children", format!("unknown child {c}")))?;
                if child.parent != Some(a.id) {
                    return Err(Error::tree(
                        Some(a.id),
                        "children",
                        format!("child {c} has parent {:?}", child.parent.map(|p| p.0)),
                    ));
                }
                if a.children[..k].contains(&c) {
                    return Err(Error::tree(Some(a.id), "children", format!("child {c} listed twice")));
                }
            }
        }

        // Reachability from the root; also rules out cycles.
        let mut depth = vec![usize::MAX; n];
        let mut z_bif = vec![0.0; n];
        let mut queue = VecDeque::from([root_id]);
        depth[root_id.index()] = 0;
        z_bif[root_id.index()] = airways[root_id.index()].length();
        let mut visited = 1;
        while let Some(id) = queue.pop_front() {
            for &c in &airways[id.index()].children {
                if depth[c.index()] != usize::MAX {
                    return Err(Error::tree(Some(c), "children", "cycle in parent/child links"));
                }
                depth[c.index()] = depth[id.index()] + 1;
                z_bif[c.index()] = z_bif[id.index()] + airways[c.index()].length();
                visited += 1;
                queue.push_back(c);
            }
        }
        if visited != n {
            let orphan = depth.iter().position(|&d| d == usize::MAX).map(AirwayId);
            return Err(Error::tree(orphan, "parent", "airway not reachable from root"));
        }

        Ok(Self {
            airways,
            root_id,
            max_rows,
            depth,
            z_bif,
        })
    }

    pub fn len(&self) -> usize {
        self.airways.len()
    }

    pub fn is_empty(&self) -> bool {
        self.airways.is_empty()
    }

    pub fn root_id(&self) -> AirwayId {
        self.root_id
    }

    pub fn max_rows(&self) -> usize {
        self.max_rows
    }

    pub fn airways(&self) -> &[Airway] {
        &self.airways
    }

    pub fn ids(&self) -> impl Iterator<Item = AirwayId> + '_ {
        (0..self.airways.len()).map(AirwayId)
    }

    pub fn get(&self, id: AirwayId) -> Result<&Airway> {
        self.airways.get(id.index()).ok_or(Error::UnknownAirway(id))
    }

    /// Panicking accessor for IDs already known to be valid.
    pub fn airway(&self, id: AirwayId) -> &Airway {
        &self.airways[id.index()]
    }

    pub fn contains(&self, id: AirwayId) -> bool {
        id.index() < self.airways.len()
    }

    /// Generation of an airway; the root is generation 0.
    pub fn generation(&self, id: AirwayId) -> Result<usize> {
        self.depth.get(id.index()).copied().ok_or(Error::UnknownAirway(id))
    }

    /// Airways with at least two children.
    pub fn bifurcations(&self) -> impl Iterator<Item = AirwayId> + '_ {
        self.airways.iter().filter(|a| a.is_bifurcation()).map(|a| a.id)
    }

    pub fn leaves(&self) -> impl Iterator<Item = AirwayId> + '_ {
        self.airways.iter().filter(|a| a.children.is_empty()).map(|a| a.id)
    }

    /// Undirected hop distance between two airway nodes.
    pub fn generation_distance(&self, i: AirwayId, j: AirwayId) -> Result<usize> {
        let (mut a, mut b) = (i, j);
        let mut da = self.generation(a)?;
        let mut db = self.generation(b)?;
        let mut hops = 0;
        while da > db {
            a = self.airways[a.index()].parent.expect("non-root has parent");
            da -= 1;
            hops += 1;
        }
        while db > da {
            b = self.airways[b.index()].parent.expect("non-root has parent");
            db -= 1;
            hops += 1;
        }
        while a != b {
            a = self.airways[a.index()].parent.expect("non-root has parent");
            b = self.airways[b.index()].parent.expect("non-root has parent");
            hops += 2;
        }
        Ok(hops)
    }

    /// Centerline arc length from the root's proximal point to the distal
    /// point of airway `i`.
    pub fn insertion_length_to_bifurcation(&self, i: AirwayId) -> Result<f64> {
        self.z_bif.get(i.index()).copied().ok_or(Error::UnknownAirway(i))
    }

    /// Arc length from the root's proximal point to airway `i`'s proximal point.
    pub fn insertion_length_to_entry(&self, i: AirwayId) -> Result<f64> {
        Ok(self.insertion_length_to_bifurcation(i)? - self.airway(i).length())
    }

    /// Unique root-to-`target` path, root first.
    pub fn path_to(&self, target: AirwayId) -> Result<Vec<AirwayId>> {
        self.get(target)?;
        let mut path = vec![target];
        let mut cur = target;
        while let Some(p) = self.airways[cur.index()].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Ok(path)
    }

    /// Nearest point on any centerline segment.
    pub fn nearest_centerline(&self, q: &Point3<f64>) -> CenterlineFoot {
        let mut best: Option<CenterlineFoot> = None;
        for a in &self.airways {
            let mut arc = self.z_bif[a.id.index()] - a.length();
            for (k, w) in a.centerline.windows(2).enumerate() {
                let seg = w[1] - w[0];
                let len2 = seg.norm_squared();
                let t = ((q - w[0]).dot(&seg) / len2).clamp(0.0, 1.0);
                let foot = w[0] + seg * t;
                let d = (q - foot).norm();
                if best.map_or(true, |b| d < b.distance) {
                    let radius = a.radius[k] + (a.radius[k + 1] - a.radius[k]) * t;
                    best = Some(CenterlineFoot {
                        airway: a.id,
                        point: foot,
                        distance: d,
                        radius,
                        insertion: arc + len2.sqrt() * t,
                    });
                }
                arc += len2.sqrt();
            }
        }
        best.expect("tree is non-empty")
    }

    /// True if the point lies inside some airway's lumen.
    pub fn in_lumen(&self, q: &Point3<f64>) -> bool {
        for a in &self.airways {
            for (k, w) in a.centerline.windows(2).enumerate() {
                let seg = w[1] - w[0];
                let t = ((q - w[0]).dot(&seg) / seg.norm_squared()).clamp(0.0, 1.0);
                let radius = a.radius[k] + (a.radius[k + 1] - a.radius[k]) * t;
                if (q - (w[0] + seg * t)).norm() <= radius {
                    return true;
                }
            }
        }
        false
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&TreeFile::from(self)).expect("tree serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn validate_geometry(a: &Airway) -> Result<()> {
    if a.centerline.len() < 2 {
        return Err(Error::tree(Some(a.id), "centerline", "needs at least two points"));
    }
    if a.centerline.iter().any(|p| !p.coords.iter().all(|x| x.is_finite())) {
        return Err(Error::tree(Some(a.id), "centerline", "non-finite coordinate"));
    }
    if a.centerline.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::tree(Some(a.id), "centerline", "consecutive points coincide"));
    }
    if a.radius.len() != a.centerline.len() {
        return Err(Error::tree(
            Some(a.id),
            "radius",
            format!("{} radii for {} centerline points", a.radius.len(), a.centerline.len()),
        ));
    }
    if a.radius.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::tree(Some(a.id), "radius", "radii must be positive"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    root_id: AirwayId,
    max_rows: usize,
    airways: Vec<AirwayRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AirwayRecord {
    id: AirwayId,
    parent: Option<AirwayId>,
    children: Vec<AirwayId>,
    centerline: Vec<[f64; 3]>,
    radius: Vec<f64>,
}

impl From<&AirwayTree> for TreeFile {
    fn from(tree: &AirwayTree) -> Self {
        TreeFile {
            root_id: tree.root_id,
            max_rows: tree.max_rows,
            airways: tree
                .airways
                .iter()
                .map(|a| AirwayRecord {
                    id: a.id,
                    parent: a.parent,
                    children: a.children.clone(),
                    centerline: a.centerline.iter().map(|p| [p.x, p.y, p.z]).collect(),
                    radius: a.radius.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<TreeFile> for AirwayTree {
    type Error = Error;

    fn try_from(file: TreeFile) -> Result<Self> {
        let airways = file
            .airways
            .into_iter()
            .map(|r| Airway {
                id: r.id,
                parent: r.parent,
                children: r.children,
                centerline: r.centerline.into_iter().map(Point3::from).collect(),
                radius: r.radius,
            })
            .collect();
        AirwayTree::new(file.root_id, file.max_rows, airways)
    }
}

impl Serialize for AirwayTree {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TreeFile::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AirwayTree {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = TreeFile::deserialize(deserializer)?;
        AirwayTree::try_from(file).map_err(serde::de::Error::custom)
    }
}

pub fn tree_to_json(tree: &AirwayTree) -> String {
    serde_json::to_string_pretty(&TreeFile::from(tree)).expect("tree serializes")
}

pub fn tree_from_json(text: &str) -> Result<AirwayTree> {
    let file: TreeFile = serde_json::from_str(text)?;
    AirwayTree::try_from(file)
}

pub fn save_tree(tree: &AirwayTree, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tree_to_json(tree))?;
    Ok(())
}

pub fn load_tree(path: impl AsRef<Path>) -> Result<AirwayTree> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(Error::at(path))?;
    let file: TreeFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    AirwayTree::try_from(file)
}

// ---------------------------------------------------------------------------
// Procedural generation

/// Parameters for synthetic binary airway trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeGenConfig {
    /// Number of generations, root included.
    pub depth: usize,
    /// Angle between a child's direction and its parent's (rad). Siblings
    /// branch to opposite sides, so sibling separation is at least twice
    /// the lower bound.
    pub branch_angle_range: (f64, f64),
    /// Length of first-generation children (mm); deeper airways shrink by
    /// `length_decay` per generation.
    pub length_range: (f64, f64),
    pub root_length: f64,
    pub root_radius: f64,
    pub radius_decay: f64,
    pub length_decay: f64,
    /// Stop splitting (breadth first) once this many airways exist.
    pub max_airways: Option<usize>,
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for TreeGenConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            branch_angle_range: (0.35, 0.70),
            length_range: (24.0, 36.0),
            root_length: 60.0,
            root_radius: 8.0,
            radius_decay: 0.8,
            length_decay: 0.8,
            max_airways: None,
            max_rows: DEFAULT_MAX_ROWS,
            seed: 0,
        }
    }
}

impl TreeGenConfig {
    pub fn with_depth(depth: usize, seed: u64) -> Self {
        Self {
            depth,
            seed,
            ..Self::default()
        }
    }

    /// Minimum angle between sibling directions.
    pub fn min_sibling_angle(&self) -> f64 {
        2.0 * self.branch_angle_range.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("depth", "must be at least 1"));
        }
        let (a0, a1) = self.branch_angle_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 < std::f64::consts::FRAC_PI_2) {
            return Err(Error::config("branch_angle_range", "need 0 < lo <= hi < pi/2"));
        }
        let (l0, l1) = self.length_range;
        if !(l0 > 0.0 && l0 <= l1 && l1.is_finite()) {
            return Err(Error::config("length_range", "need 0 < lo <= hi"));
        }
        if !(self.root_length > 0.0 && self.root_radius > 0.0) {
            return Err(Error::config("root_length", "root length and radius must be positive"));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0) {
            return Err(Error::config("radius_decay", "must lie in (0, 1]"));
        }
        if !(self.length_decay > 0.0 && self.length_decay <= 1.0) {
            return Err(Error::config("length_decay", "must lie in (0, 1]"));
        }
        let capacity = self.max_airways.unwrap_or(usize::MAX).min(self.max_rows);
        let full = if self.depth >= usize::BITS as usize { usize::MAX } else { (1usize << self.depth) - 1 };
        if self.max_airways.is_none() && full > self.max_rows {
            return Err(Error::config(
                "depth",
                format!("a full tree of depth {} has {full} airways, more than max_rows {}", self.depth, self.max_rows),
            ));
        }
        if capacity == 0 {
            return Err(Error::config("max_airways", "must be at least 1"));
        }
        Ok(())
    }
}

struct Growth {
    id: AirwayId,
    generation: usize,
    /// Unit vector perpendicular to the airway, spanning its branching plane.
    plane: Vector3<f64>,
}

/// Builds a deterministic binary tree. The root starts at the origin and
/// points along +z.
pub fn generate_tree(cfg: &TreeGenConfig) -> Result<AirwayTree> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let limit = cfg.max_airways.unwrap_or(usize::MAX).min(cfg.max_rows);

    let root = Airway {
        id: AirwayId::ROOT,
        parent: None,
        children: Vec::new(),
        centerline: vec![Point3::origin(), Point3::new(0.0, 0.0, cfg.root_length)],
        radius: vec![cfg.root_radius; 2],
    };
    let mut airways = vec![root];
    let mut queue = VecDeque::from([Growth {
        id: AirwayId::ROOT,
        generation: 0,
        plane: Vector3::x(),
    }]);

    while let Some(node) = queue.pop_front() {
        if node.generation + 1 >= cfg.depth || airways.len() + 2 > limit {
            continue;
        }
        let parent = airways[node.id.index()].clone();
        let axis = parent.distal_direction();
        let start = parent.distal_point();
        let generation = node.generation + 1;
        let radius = cfg.root_radius * cfg.radius_decay.powi(generation as i32);
        let scale = cfg.length_decay.powi(generation as i32 - 1);

        // Rotate the branching plane about the parent axis: roughly
        // orthogonal to the grandparent's plane, plus jitter.
        let jitter: f64 = rng.gen_range(-0.25..=0.25);
        let plane = UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), jitter) * node.plane;
        let normal = axis.cross(&plane).normalize();

        for side in [1.0, -1.0] {
            let angle = rng.gen_range(cfg.branch_angle_range.0..=cfg.branch_angle_range.1);
            let length = rng.gen_range(cfg.length_range.0..=cfg.length_range.1) * scale;
            let dir = (axis * angle.cos() + plane * (side * angle.sin())).normalize();
            let id = AirwayId(airways.len());
            airways.push(Airway {
                id,
                parent: Some(parent.id),
                children: Vec::new(),
                centerline: vec![start, start + dir * length],
                radius: vec![radius; 2],
            });
            airways[node.id.index()].children.push(id);
            // Child's plane is perpendicular to the parent's plane.
            let child_plane = (normal - dir * normal.dot(&dir)).normalize();
            queue.push_back(Growth {
                id,
                generation,
                plane: child_plane,
            });
        }
    }

    AirwayTree::new(AirwayId::ROOT, cfg.max_rows, airways)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight(id: usize, parent: Option<usize>, children: &[usize], pts: &[[f64; 3]]) -> Airway {
        Airway {
            id: AirwayId(id),
            parent: parent.map(AirwayId),
            children: children.iter().copied().map(AirwayId).collect(),
            centerline: pts.iter().copied().map(Point3::from).collect(),
            radius: vec![5.0; pts.len()],
        }
    }

    /// Trachea 100 mm along z, two main bronchi of 40 mm.
    pub(crate) fn three_airway_tree() -> AirwayTree {
        AirwayTree::new(
            AirwayId(0),
            500,
            vec![
                straight(0, None, &[1, 2], &[[0.0, 0.0, 0.0], [0.0, 0.0, 100.0]]),
                straight(1, Some(0), &[], &[[0.0, 0.0, 100.0], [-40.0, 0.0, 100.0]]),
                straight(2, Some(0), &[], &[[0.0, 0.0, 100.0], [0.0, 40.0, 100.0]]),
            ],
        )
        .unwrap()
    }

    fn bfs_distance(tree: &AirwayTree, i: AirwayId, j: AirwayId) -> usize {
        let mut dist = vec![usize::MAX; tree.len()];
        let mut q = VecDeque::from([i]);
        dist[i.index()] = 0;
        while let Some(u) = q.pop_front() {
            let a = tree.airway(u);
            for v in a.children.iter().copied().chain(a.parent) {
                if dist[v.index()] == usize::MAX {
                    dist[v.index()] = dist[u.index()] + 1;
                    q.push_back(v);
                }
            }
        }
        dist[j.index()]
    }

    #[test]
    fn generation_distance_examples() {
        let t = three_airway_tree();
        assert_eq!(t.generation_distance(AirwayId(0), AirwayId(0)).unwrap(), 0);
        assert_eq!(t.generation_distance(AirwayId(0), AirwayId(1)).unwrap(), 1);
        assert_eq!(t.generation_distance(AirwayId(1), AirwayId(2)).unwrap(), bfs_distance(&t, AirwayId(1), AirwayId(2)));
        assert_eq!(t.generation_distance(AirwayId(1), AirwayId(2)).unwrap(), 2);
        assert!(matches!(
            t.generation_distance(AirwayId(0), AirwayId(9)),
            Err(Error::UnknownAirway(AirwayId(9)))
        ));
    }

    #[test]
    fn generation_distance_matches_bfs_on_generated_tree() {
        let t = generate_tree(&TreeGenConfig::with_depth(5, 3)).unwrap();
        for i in t.ids() {
            for j in t.ids() {
                assert_eq!(t.generation_distance(i, j).unwrap(), bfs_distance(&t, i, j));
            }
        }
    }

    #[test]
    fn insertion_length_examples() {
        let single = AirwayTree::new(
            AirwayId(0),
            500,
            vec![straight(0, None, &[], &[[0.0, 0.0, 0.0], [0.0, 0.0, 100.0]])],
        )
        .unwrap();
        assert_eq!(single.insertion_length_to_bifurcation(AirwayId(0)).unwrap(), 100.0);

        let t = three_airway_tree();
        assert_eq!(t.insertion_length_to_bifurcation(AirwayId(1)).unwrap(), 140.0);

        let bent = AirwayTree::new(
            AirwayId(0),
            500,
            vec![
                straight(0, None, &[1], &[[0.0, 0.0, 0.0], [0.0, 0.0, 100.0]]),
                straight(1, Some(0), &[], &[[0.0, 0.0, 100.0], [0.0, 0.0, 110.0], [15.0, 0.0, 110.0]]),
            ],
        )
        .unwrap();
        assert_relative_eq!(bent.insertion_length_to_bifurcation(AirwayId(1)).unwrap(), 125.0);
        assert!(bent.insertion_length_to_bifurcation(AirwayId(7)).is_err());
    }

    #[test]
    fn generated_tree_sizes() {
        assert_eq!(generate_tree(&TreeGenConfig::with_depth(1, 0)).unwrap().len(), 1);
        assert_eq!(generate_tree(&TreeGenConfig::with_depth(3, 0)).unwrap().len(), 7);
        let capped = TreeGenConfig {
            depth: 9,
            max_airways: Some(500),
            ..TreeGenConfig::default()
        };
        assert_eq!(generate_tree(&capped).unwrap().len(), 499);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = TreeGenConfig::with_depth(5, 42);
        assert_eq!(tree_to_json(&generate_tree(&cfg).unwrap()), tree_to_json(&generate_tree(&cfg).unwrap()));
        let other = TreeGenConfig::with_depth(5, 43);
        assert_ne!(generate_tree(&cfg).unwrap(), generate_tree(&other).unwrap());
    }

    #[test]
    fn siblings_respect_min_angle() {
        let cfg = TreeGenConfig::with_depth(6, 11);
        let t = generate_tree(&cfg).unwrap();
        for b in t.bifurcations() {
            let kids = &t.airway(b).children;
            let d0 = t.airway(kids[0]).proximal_direction();
            let d1 = t.airway(kids[1]).proximal_direction();
            assert!(d0.angle(&d1) >= cfg.min_sibling_angle() - 1e-9);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TreeGenConfig::with_depth(0, 0),
            TreeGenConfig {
                radius_decay: 0.0,
                ..TreeGenConfig::default()
            },
            TreeGenConfig {
                length_range: (10.0, 5.0),
                ..TreeGenConfig::default()
            },
            TreeGenConfig::with_depth(10, 0),
        ] {
            assert!(matches!(generate_tree(&cfg), Err(Error::InvalidConfig { .. })), "{cfg:?}");
        }
    }

    #[test]
    fn rejects_duplicate_id() {
        let err = AirwayTree::new(
            AirwayId(0),
            500,
            vec![
                straight(0, None, &[1], &[[0.0, 0.0, 0.0], [0.0, 0.0, 10.0]]),
                straight(0, Some(0), &[], &[[0.0, 0.0, 10.0], [0.0, 0.0, 20.0]]),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicated"), "{err}");
    }

    #[test]
    fn rejects_child_listing_ancestor() {
        let err = AirwayTree::new(
            AirwayId(0),
            500,
            vec![
                straight(0, None, &[1], &[[0.0, 0.0, 0.0], [0.0, 0.0, 10.0]]),
                straight(1, Some(0), &[0], &[[0.0, 0.0, 10.0], [0.0, 0.0, 20.0]]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidTree { field: "children", .. }), "{err}");
    }

    #[test]
    fn rejects_broken_geometry() {
        let detached = AirwayTree::new(
            AirwayId(0),
            500,
            vec![
                straight(0, None, &[1], &[[0.0, 0.0, 0.0], [0.0, 0.0, 10.0]]),
                straight(1, Some(0), &[], &[[0.0, 0.0, 11.0], [0.0, 0.0, 20.0]]),
            ],
        );
        assert!(detached.is_err());
        let repeated = AirwayTree::new(
            AirwayId(0),
            500,
            vec![straight(0, None, &[], &[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])],
        );
        assert!(repeated.is_err());
        let mut thin = straight(0, None, &[], &[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        thin.radius[1] = 0.0;
        assert!(AirwayTree::new(AirwayId(0), 500, vec![thin]).is_err());
        let over = AirwayTree::new(
            AirwayId(0),
            0,
            vec![straight(0, None, &[], &[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])],
        );
        assert!(over.is_err());
    }

    #[test]
    fn malformed_json_reports_location() {
        let err = tree_from_json("{\"root_id\": 0,\n \"max_rows\": \"x\"}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn nearest_centerline_foot() {
        let t = three_airway_tree();
        let foot = t.nearest_centerline(&Point3::new(2.0, 0.0, 50.0));
        assert_eq!(foot.airway, AirwayId(0));
        assert_relative_eq!(foot.distance, 2.0);
        assert_relative_eq!(foot.insertion, 50.0);
        let deep = t.nearest_centerline(&Point3::new(-20.0, 1.0, 100.0));
        assert_eq!(deep.airway, AirwayId(1));
        assert_relative_eq!(deep.insertion, 120.0);
        assert!(t.in_lumen(&Point3::new(4.0, 0.0, 50.0)));
        assert!(!t.in_lumen(&Point3::new(6.0, 0.0, 50.0)));
    }

    #[test]
    fn path_to_target() {
        let t = generate_tree(&TreeGenConfig::with_depth(3, 0)).unwrap();
        let leaf = t.airway(t.airway(AirwayId(0)).children[0]).children[0];
        let path = t.path_to(leaf).unwrap();
        assert_eq!(path.len(), 3);
        assert_eq!(path[0], AirwayId(0));
    }
}
