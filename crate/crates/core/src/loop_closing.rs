//! Place recognition and loop correction.
//!
//! Keyframe images are rescaled to 8 bits over a fixed temperature window
//! and described with oriented binary features quantized through a
//! hierarchical binary-word vocabulary. Candidate loops are gated by a
//! normalized similarity score and a common-word ratio, aligned in both
//! directions with a gain/bias model that absorbs slow scene-temperature
//! drift, cross-validated, and finally corrected through a keyframe pose
//! graph.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geom::{twist_ad, CameraIntrinsics, Pose, Twist};
use crate::imgproc::{Image8, Pyramid};
use crate::odom::{estimate_sigma, Frame, RobustWeight, PATTERN_MARGIN};

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor(pub [u8; 32]);

impl Descriptor {
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Detected corner with orientation (radians) and detector score.
#[derive(Debug, Clone, Copy)]
pub struct Keypoint {
    pub x: u32,
    pub y: u32,
    pub angle: f64,
    pub score: f64,
}

/// Sparse L1-normalized tf-idf vector over vocabulary words.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BowVector {
    /// (word id, weight), sorted by word id, weights positive, sum 1.
    pub entries: Vec<(u32, f64)>,
}

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.entries.len()
    }

    /// Count of word ids occurring in both vectors.
    pub fn common_words(&self, other: &BowVector) -> usize {
        let mut i = 0;
        let mut j = 0;
        let mut common = 0;
        while i < self.entries.len() && j < other.entries.len() {
            match self.entries[i].0.cmp(&other.entries[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    common += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        common
    }
}

/// Similarity `s = 1 - 0.5 * ||vc/|vc| - vq/|vq|||_1` of two L1-normalized
/// bag-of-words vectors; 0 when either is empty.
pub fn similarity(a: &BowVector, b: &BowVector) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut l1 = 0.0;
    let mut i = 0;
    let mut j = 0;
    while i < a.entries.len() || j < b.entries.len() {
        let wa = a.entries.get(i);
        let wb = b.entries.get(j);
        match (wa, wb) {
            (Some(&(ka, va)), Some(&(kb, vb))) => match ka.cmp(&kb) {
                std::cmp::Ordering::Less => {
                    l1 += va;
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    l1 += vb;
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    l1 += (va - vb).abs();
                    i += 1;
                    j += 1;
                }
            },
            (Some(&(_, va)), None) => {
                l1 += va;
                i += 1;
            }
            (None, Some(&(_, vb))) => {
                l1 += vb;
                j += 1;
            }
            (None, None) => break,
        }
    }
    (1.0 - 0.5 * l1).clamp(0.0, 1.0)
}

/// Features of one keyframe: raw descriptors plus the quantized bow vector.
#[derive(Debug, Clone, Default)]
pub struct DescriptorBag {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    pub bow: BowVector,
}

impl DescriptorBag {
    pub fn empty() -> Self {
        DescriptorBag::default()
    }
}

// ---------------------------------------------------------------------------
// FAST corners + oriented binary descriptors
// ---------------------------------------------------------------------------

/// Bresenham circle of radius 3 used by the segment test.
const FAST_CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Margin inside which corners are usable (orientation patch radius 15 plus
/// rounding slack).
const FEATURE_MARGIN: u32 = 16;

/// Radius of the orientation / descriptor patch.
const PATCH_RADIUS: i32 = 15;

fn is_fast_corner(img: &Image8, x: u32, y: u32, threshold: i32) -> bool {
    let c = img.get(x, y) as i32;
    let mut brighter = [false; 16];
    let mut darker = [false; 16];
    for (i, &(dx, dy)) in FAST_CIRCLE.iter().enumerate() {
        let v = img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32) as i32;
        brighter[i] = v > c + threshold;
        darker[i] = v < c - threshold;
    }
    let arc = |flags: &[bool; 16]| -> bool {
        for start in 0..16 {
            if (0..9).all(|k| flags[(start + k) % 16]) {
                return true;
            }
        }
        false
    };
    arc(&brighter) || arc(&darker)
}

fn fast_score(img: &Image8, x: u32, y: u32) -> f64 {
    let c = img.get(x, y) as i32;
    FAST_CIRCLE
        .iter()
        .map(|&(dx, dy)| {
            (img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32) as i32 - c).abs() as f64
        })
        .sum()
}

/// Orientation from the intensity centroid of a radius-15 disc.
fn corner_orientation(img: &Image8, x: u32, y: u32) -> f64 {
    let mut m10 = 0.0;
    let mut m01 = 0.0;
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            if dx * dx + dy * dy > PATCH_RADIUS * PATCH_RADIUS {
                continue;
            }
            let v = img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

/// One intensity-comparison test: a pair of patch offsets.
type TestPair = ((f64, f64), (f64, f64));

/// Fixed pseudo-random intensity-comparison pattern (pairs within radius 13
/// so any steering rotation stays inside the patch).
fn brief_pattern() -> &'static [TestPair; 256] {
    use std::sync::OnceLock;
    static PATTERN: OnceLock<[TestPair; 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0B1EF);
        let sample = |rng: &mut ChaCha8Rng| -> (f64, f64) {
            loop {
                // Box-Muller pairs, sigma = patch/5
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let r = (-2.0 * u1.ln()).sqrt() * 6.2;
                let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
                let p = (r * c, r * s);
                if (p.0 * p.0 + p.1 * p.1).sqrt() <= 13.0 {
                    return p;
                }
            }
        };
        let mut out = [((0.0, 0.0), (0.0, 0.0)); 256];
        for slot in &mut out {
            *slot = (sample(&mut rng), sample(&mut rng));
        }
        out
    })
}

fn steered_descriptor(img: &Image8, kp: &Keypoint) -> Descriptor {
    let (sin_t, cos_t) = kp.angle.sin_cos();
    let mut bits = [0u8; 32];
    let sample = |dx: f64, dy: f64| -> u8 {
        let rx = (dx * cos_t - dy * sin_t).round() as i32;
        let ry = (dx * sin_t + dy * cos_t).round() as i32;
        img.get((kp.x as i32 + rx) as u32, (kp.y as i32 + ry) as u32)
    };
    for (i, &(a, b)) in brief_pattern().iter().enumerate() {
        if sample(a.0, a.1) < sample(b.0, b.1) {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    Descriptor(bits)
}

/// Detects FAST corners with grid bucketing (strongest corner per cell first,
/// round-robin across cells up to `max_features`) and computes oriented
/// binary descriptors.
pub fn detect_and_describe(
    img: &Image8,
    fast_threshold: u8,
    max_features: usize,
) -> (Vec<Keypoint>, Vec<Descriptor>) {
    const CELL: u32 = 32;
    if img.width <= 2 * FEATURE_MARGIN || img.height <= 2 * FEATURE_MARGIN {
        return (Vec::new(), Vec::new());
    }
    let cells_x = img.width.div_ceil(CELL);
    let cells_y = img.height.div_ceil(CELL);
    let mut cells: Vec<Vec<Keypoint>> = vec![Vec::new(); (cells_x * cells_y) as usize];

    for y in FEATURE_MARGIN..img.height - FEATURE_MARGIN {
        for x in FEATURE_MARGIN..img.width - FEATURE_MARGIN {
            if !is_fast_corner(img, x, y, fast_threshold as i32) {
                continue;
            }
            let score = fast_score(img, x, y);
            // local non-max suppression against the 4 causal neighbors
            let kp = Keypoint {
                x,
                y,
                angle: 0.0,
                score,
            };
            cells[((y / CELL) * cells_x + x / CELL) as usize].push(kp);
        }
    }
    for cell in &mut cells {
        cell.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite scores")
                .then(a.y.cmp(&b.y))
                .then(a.x.cmp(&b.x))
        });
    }

    let mut keypoints = Vec::new();
    let mut round = 0usize;
    while keypoints.len() < max_features {
        let mut any = false;
        for cell in &cells {
            if let Some(kp) = cell.get(round) {
                keypoints.push(*kp);
                any = true;
                if keypoints.len() >= max_features {
                    break;
                }
            }
        }
        if !any {
            break;
        }
        round += 1;
    }

    let mut descriptors = Vec::with_capacity(keypoints.len());
    for kp in &mut keypoints {
        kp.angle = corner_orientation(img, kp.x, kp.y);
        descriptors.push(steered_descriptor(img, kp));
    }
    (keypoints, descriptors)
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct VocabNode {
    center: Descriptor,
    children: Vec<u32>,
    /// Leaf word id, `u32::MAX` for internal nodes.
    word_id: u32,
}

/// Hierarchical binary-word vocabulary: a k-ary tree of cluster centers with
/// per-word idf weights learned from the training corpus.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    branching: usize,
    levels: usize,
    nodes: Vec<VocabNode>,
    idf: Vec<f64>,
}

impl Vocabulary {
    pub fn word_count(&self) -> usize {
        self.idf.len()
    }

    /// Trains the tree by hierarchical binary k-medians over the corpus
    /// (one descriptor set per training image), then computes idf weights
    /// from per-image word occurrences.
    pub fn train(corpus: &[Vec<Descriptor>], branching: usize, levels: usize, seed: u64) -> Result<Self> {
        let all: Vec<Descriptor> = corpus.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(Error::InvalidVocabulary(
                "cannot train on an empty corpus".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = vec![VocabNode {
            center: all[0],
            children: Vec::new(),
            word_id: u32::MAX,
        }];

        // breadth-first splitting keeps the serialized layout simple
        let mut queue: Vec<(u32, Vec<u32>, usize)> =
            vec![(0, (0..all.len() as u32).collect(), 0)];
        while let Some((node_id, members, depth)) = queue.pop() {
            if depth >= levels || members.len() < branching * 2 {
                continue; // stays a leaf
            }
            let centers = k_medians(&all, &members, branching, &mut rng);
            // assign members to their nearest center
            let mut groups: Vec<Vec<u32>> = vec![Vec::new(); centers.len()];
            for &m in &members {
                let mut best = 0usize;
                let mut best_d = u32::MAX;
                for (ci, c) in centers.iter().enumerate() {
                    let d = all[m as usize].hamming(c);
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                groups[best].push(m);
            }
            for (c, group) in centers.into_iter().zip(groups) {
                if group.is_empty() {
                    continue;
                }
                let child_id = nodes.len() as u32;
                nodes.push(VocabNode {
                    center: c,
                    children: Vec::new(),
                    word_id: u32::MAX,
                });
                nodes[node_id as usize].children.push(child_id);
                queue.push((child_id, group, depth + 1));
            }
        }

        // leaves become words
        let mut word_count = 0u32;
        for node in &mut nodes {
            if node.children.is_empty() {
                node.word_id = word_count;
                word_count += 1;
            }
        }

        let mut vocab = Vocabulary {
            branching,
            levels,
            nodes,
            idf: vec![0.0; word_count as usize],
        };

        // idf over training images
        let mut docs_with_word = vec![0usize; word_count as usize];
        let mut docs = 0usize;
        for image in corpus {
            if image.is_empty() {
                continue;
            }
            docs += 1;
            let mut seen = vec![false; word_count as usize];
            for d in image {
                seen[vocab.quantize(d) as usize] = true;
            }
            for (count, s) in docs_with_word.iter_mut().zip(&seen) {
                if *s {
                    *count += 1;
                }
            }
        }
        for (idf, n_docs) in vocab.idf.iter_mut().zip(&docs_with_word) {
            *idf = if *n_docs > 0 {
                (docs as f64 / *n_docs as f64).ln()
            } else {
                0.0
            };
        }
        Ok(vocab)
    }

    /// Walks the tree to the nearest leaf word (ties break to the lowest
    /// child index, keeping quantization deterministic).
    pub fn quantize(&self, d: &Descriptor) -> u32 {
        let mut node = 0u32;
        loop {
            let n = &self.nodes[node as usize];
            if n.children.is_empty() {
                return n.word_id;
            }
            let mut best = n.children[0];
            let mut best_d = u32::MAX;
            for &c in &n.children {
                let dist = d.hamming(&self.nodes[c as usize].center);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            node = best;
        }
    }

    /// Quantizes a descriptor set into an L1-normalized tf-idf vector.
    pub fn transform(&self, descriptors: &[Descriptor]) -> BowVector {
        if descriptors.is_empty() {
            return BowVector::default();
        }
        let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
        for d in descriptors {
            *counts.entry(self.quantize(d)).or_insert(0) += 1;
        }
        let total = descriptors.len() as f64;
        let mut entries: Vec<(u32, f64)> = counts
            .into_iter()
            .map(|(w, c)| (w, c as f64 / total * self.idf[w as usize]))
            .filter(|&(_, v)| v > 0.0)
            .collect();
        let sum: f64 = entries.iter().map(|&(_, v)| v).sum();
        if sum > 0.0 {
            for e in &mut entries {
                e.1 /= sum;
            }
        } else {
            entries.clear();
        }
        BowVector { entries }
    }

    /// Binary serialization: versioned header, nodes breadth-first with
    /// parent links, then the idf table.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"TVOC");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.branching as u32).to_le_bytes());
        out.extend_from_slice(&(self.levels as u32).to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.idf.len() as u32).to_le_bytes());

        // parent of each node (root = MAX)
        let mut parents = vec![u32::MAX; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &c in &n.children {
                parents[c as usize] = i as u32;
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            out.extend_from_slice(&parents[i].to_le_bytes());
            out.extend_from_slice(&n.center.0);
            out.extend_from_slice(&n.word_id.to_le_bytes());
        }
        for w in &self.idf {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::data(path, format!("cannot read vocabulary: {e}")))?;
        let mut pos = 0usize;
        let take = |bytes: &[u8], pos: &mut usize, n: usize| -> Result<Vec<u8>> {
            if *pos + n > bytes.len() {
                return Err(Error::InvalidVocabulary(format!(
                    "truncated at byte {pos}"
                )));
            }
            let out = bytes[*pos..*pos + n].to_vec();
            *pos += n;
            Ok(out)
        };
        let u32_at = |bytes: &[u8], pos: &mut usize| -> Result<u32> {
            let b = take(bytes, pos, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };

        if take(&bytes, &mut pos, 4)? != b"TVOC" {
            return Err(Error::InvalidVocabulary("bad magic".into()));
        }
        let version = u32_at(&bytes, &mut pos)?;
        if version != 1 {
            return Err(Error::InvalidVocabulary(format!(
                "unsupported version {version}"
            )));
        }
        let branching = u32_at(&bytes, &mut pos)? as usize;
        let levels = u32_at(&bytes, &mut pos)? as usize;
        let node_count = u32_at(&bytes, &mut pos)? as usize;
        let word_count = u32_at(&bytes, &mut pos)? as usize;

        let mut nodes = Vec::with_capacity(node_count);
        let mut parents = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            let parent = u32_at(&bytes, &mut pos)?;
            let center_bytes = take(&bytes, &mut pos, 32)?;
            let mut center = [0u8; 32];
            center.copy_from_slice(&center_bytes);
            let word_id = u32_at(&bytes, &mut pos)?;
            parents.push(parent);
            nodes.push(VocabNode {
                center: Descriptor(center),
                children: Vec::new(),
                word_id,
            });
        }
        for (i, &p) in parents.iter().enumerate() {
            if p != u32::MAX {
                if p as usize >= nodes.len() {
                    return Err(Error::InvalidVocabulary(format!("bad parent {p}")));
                }
                nodes[p as usize].children.push(i as u32);
            }
        }
        let mut idf = Vec::with_capacity(word_count);
        for _ in 0..word_count {
            let b = take(&bytes, &mut pos, 8)?;
            idf.push(f64::from_le_bytes([
                b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
            ]));
        }
        Ok(Vocabulary {
            branching,
            levels,
            nodes,
            idf,
        })
    }
}

/// Seeded binary k-medians: greedy farthest-point init, majority-vote
/// center updates, nearest-center assignment (ties to the lowest index).
fn k_medians(
    all: &[Descriptor],
    members: &[u32],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Descriptor> {
    let k = k.min(members.len());
    let mut centers: Vec<Descriptor> = Vec::with_capacity(k);
    centers.push(all[members[rng.gen_range(0..members.len())] as usize]);
    while centers.len() < k {
        let mut best_m = members[0];
        let mut best_d = 0u32;
        for &m in members {
            let d = centers
                .iter()
                .map(|c| all[m as usize].hamming(c))
                .min()
                .expect("non-empty centers");
            if d > best_d {
                best_d = d;
                best_m = m;
            }
        }
        if best_d == 0 {
            break; // all remaining descriptors coincide with a center
        }
        centers.push(all[best_m as usize]);
    }

    let mut assignment = vec![usize::MAX; members.len()];
    for _ in 0..10 {
        let mut changed = false;
        for (mi, &m) in members.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = u32::MAX;
            for (ci, c) in centers.iter().enumerate() {
                let d = all[m as usize].hamming(c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assignment[mi] != best {
                assignment[mi] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // majority vote per bit
        for (ci, center) in centers.iter_mut().enumerate() {
            let mut ones = [0u32; 256];
            let mut count = 0u32;
            for (mi, &m) in members.iter().enumerate() {
                if assignment[mi] != ci {
                    continue;
                }
                count += 1;
                let d = &all[m as usize];
                for (bit, one) in ones.iter_mut().enumerate() {
                    if d.0[bit / 8] & (1 << (bit % 8)) != 0 {
                        *one += 1;
                    }
                }
            }
            if count == 0 {
                continue;
            }
            let mut bits = [0u8; 32];
            for bit in 0..256 {
                if 2 * ones[bit] >= count {
                    bits[bit / 8] |= 1 << (bit % 8);
                }
            }
            *center = Descriptor(bits);
        }
    }
    centers
}

/// Builds the descriptor bag of an 8-bit keyframe image. Fails when fewer
/// than `loop_min_features` corners survive (the keyframe is then excluded
/// from the loop database and the exclusion logged by the caller).
pub fn extract_features(
    img8: &Image8,
    vocab: &Vocabulary,
    cfg: &PipelineConfig,
) -> Result<DescriptorBag> {
    let (keypoints, descriptors) =
        detect_and_describe(img8, cfg.fast_threshold, cfg.loop_max_features);
    if descriptors.len() < cfg.loop_min_features {
        return Err(Error::KeyframeExcluded(format!(
            "{} features, need {}",
            descriptors.len(),
            cfg.loop_min_features
        )));
    }
    let bow = vocab.transform(&descriptors);
    Ok(DescriptorBag {
        keypoints,
        descriptors,
        bow,
    })
}

// ---------------------------------------------------------------------------
// Loop detection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DbEntry {
    pub kf_id: u64,
    pub timestamp_ns: i64,
    pub bow: BowVector,
}

/// Keyframe bow database for place recognition.
#[derive(Debug, Default)]
pub struct KeyframeDatabase {
    entries: Vec<DbEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoopCandidate {
    pub kf_id: u64,
    pub timestamp_ns: i64,
    pub eta: f64,
    pub similarity: f64,
    pub common_word_ratio: f64,
}

impl KeyframeDatabase {
    pub fn add(&mut self, entry: DbEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Finds the best loop candidate for the current keyframe.
    ///
    /// Keyframes within the recent window normalize the score (the best
    /// recent similarity normalizes the raw score); older keyframes are
    /// candidates. The argmax of the normalized score is accepted only when
    /// it passes both the score gate and the common-word-ratio gate.
    pub fn detect(
        &self,
        cur: &BowVector,
        cur_timestamp_ns: i64,
        cfg: &PipelineConfig,
    ) -> Option<LoopCandidate> {
        if cur.is_empty() {
            return None;
        }
        let recent_ns = (cfg.loop_recent_window_s * 1e9) as i64;
        let mut s1 = 0.0f64;
        let mut has_recent = false;
        for e in &self.entries {
            if (e.timestamp_ns - cur_timestamp_ns).abs() <= recent_ns {
                has_recent = true;
                s1 = s1.max(similarity(cur, &e.bow));
            }
        }
        // without a recent covisible keyframe the raw score stands alone
        let normalizer = if has_recent { s1.max(1e-3) } else { 1.0 };

        let mut best: Option<LoopCandidate> = None;
        for e in &self.entries {
            if (e.timestamp_ns - cur_timestamp_ns).abs() <= recent_ns {
                continue;
            }
            let s = similarity(cur, &e.bow);
            let eta = s / normalizer;
            let common = cur.common_words(&e.bow);
            let denom = cur.word_count().min(e.bow.word_count()).max(1);
            let ratio = common as f64 / denom as f64;
            let cand = LoopCandidate {
                kf_id: e.kf_id,
                timestamp_ns: e.timestamp_ns,
                eta,
                similarity: s,
                common_word_ratio: ratio,
            };
            if best.is_none_or(|b| cand.eta > b.eta) {
                best = Some(cand);
            }
        }
        let cand = best?;
        if cand.eta >= cfg.loop_eta_min && cand.common_word_ratio >= cfg.loop_common_word_ratio_min
        {
            Some(cand)
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Affine-compensated relative pose estimation
// ---------------------------------------------------------------------------

/// Gain/bias model absorbing the global temperature drift between two
/// temporally distant keyframes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineModel {
    pub a: f64,
    pub b: f64,
}

impl Default for AffineModel {
    fn default() -> Self {
        AffineModel { a: 1.0, b: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AffineAlignment {
    /// Relative pose mapping reference-frame coordinates into the target
    /// frame.
    pub t_rel: Pose,
    pub affine: AffineModel,
    pub inlier_ratio: f64,
    pub final_cost: f64,
    pub rounds: usize,
    /// Residual count supporting the estimate (pose-graph edge weight).
    pub support: usize,
}

struct AffineEquations {
    h: Matrix6<f64>,
    b: Vector6<f64>,
    cost: f64,
    valid: usize,
    total: usize,
    residuals: Vec<f64>,
    // weighted regression sums for the closed-form gain/bias update
    sw: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
}

#[allow(clippy::too_many_arguments)]
fn accumulate_affine(
    reference: &Frame,
    target_level: &crate::imgproc::FloatImage,
    kl: &CameraIntrinsics,
    level: usize,
    t_rel: &Pose,
    affine: &AffineModel,
    weight: Option<&RobustWeight>,
    min_depth: f64,
    with_jacobian: bool,
) -> AffineEquations {
    let mut out = AffineEquations {
        h: Matrix6::zeros(),
        b: Vector6::zeros(),
        cost: 0.0,
        valid: 0,
        total: 0,
        residuals: Vec::new(),
        sw: 0.0,
        sx: 0.0,
        sy: 0.0,
        sxx: 0.0,
        sxy: 0.0,
    };
    for point in &reference.points {
        let refs = &point.refs[level];
        if !refs.valid {
            continue;
        }
        out.total += refs.values.len();
        let q = t_rel.transform(&point.p_cam);
        let Some(uv) = kl.project_with(&q, min_depth, PATTERN_MARGIN) else {
            continue;
        };
        let inv_z = 1.0 / q.z;
        for (o, &(dx, dy)) in crate::odom::PATTERN_OFFSETS.iter().enumerate() {
            let Some((val, gx, gy)) = target_level.sample_with_gradient(uv.x + dx, uv.y + dy)
            else {
                continue;
            };
            let r = affine.a * val + affine.b - refs.values[o];
            out.valid += 1;
            out.residuals.push(r);
            let w = weight.map_or(1.0, |rw| rw.weight(r));
            out.cost += w * r * r;
            out.sw += w;
            out.sx += w * val;
            out.sy += w * refs.values[o];
            out.sxx += w * val * val;
            out.sxy += w * val * refs.values[o];
            if with_jacobian {
                let jp = Vector3::new(
                    gx * kl.fx * inv_z,
                    gy * kl.fy * inv_z,
                    -(gx * kl.fx * q.x + gy * kl.fy * q.y) * inv_z * inv_z,
                ) * affine.a;
                let jw = q.cross(&jp);
                let j = Vector6::new(jw.x, jw.y, jw.z, jp.x, jp.y, jp.z);
                out.h += j * j.transpose() * w;
                out.b += j * (w * r);
            }
        }
    }
    out
}

/// Estimates the relative pose between two keyframes together with the
/// gain/bias model, by alternating one damped Gauss-Newton step on the pose
/// with the closed-form weighted least-squares update of (a, b). Runs coarse
/// to fine; `estimate_affine = false` pins a = 1, b = 0, reducing the cost to
/// the plain thermographic residual.
pub fn align_affine(
    reference: &Frame,
    target: &Pyramid,
    k: &CameraIntrinsics,
    t_init: &Pose,
    cfg: &PipelineConfig,
    estimate_affine: bool,
) -> Result<AffineAlignment> {
    let mut t_rel = *t_init;
    let mut affine = AffineModel::default();
    let mut rounds_total = 0usize;

    for level in (0..cfg.pyramid_levels).rev() {
        let kl = k.at_level(level);
        let img = target.level(level);
        let mut lambda = 0.0f64;
        for _ in 0..50 {
            rounds_total += 1;
            let stats = accumulate_affine(
                reference,
                img,
                &kl,
                level,
                &t_rel,
                &affine,
                None,
                cfg.min_depth,
                false,
            );
            if stats.residuals.len() < 10 {
                break;
            }
            let sigma = estimate_sigma(&stats.residuals, cfg.nu, cfg.sigma_floor);
            let weight = RobustWeight::new(cfg.nu, sigma).expect("sigma floored");
            let eqs = accumulate_affine(
                reference,
                img,
                &kl,
                level,
                &t_rel,
                &affine,
                Some(&weight),
                cfg.min_depth,
                true,
            );

            // (1) one Gauss-Newton step on the pose at fixed (a, b)
            let mut delta_norm = 0.0;
            if eqs.b.norm() > 1e-14 {
                let mut accepted = false;
                for _ in 0..8 {
                    let mut damped = eqs.h;
                    for i in 0..6 {
                        damped[(i, i)] += lambda * eqs.h[(i, i)].max(1e-12);
                    }
                    let Some(chol) = nalgebra::Cholesky::new(damped) else {
                        lambda = (lambda * 10.0).max(1e-4);
                        continue;
                    };
                    let delta = chol.solve(&(-eqs.b));
                    let candidate = Pose::exp(&Twist::from_vector(&delta)).compose(&t_rel);
                    let trial = accumulate_affine(
                        reference,
                        img,
                        &kl,
                        level,
                        &candidate,
                        &affine,
                        Some(&weight),
                        cfg.min_depth,
                        false,
                    );
                    if trial.valid >= 10 && trial.cost <= eqs.cost {
                        t_rel = candidate;
                        delta_norm = delta.norm();
                        accepted = true;
                        lambda *= 0.25;
                        break;
                    }
                    lambda = (lambda * 10.0).max(1e-4);
                }
                if !accepted {
                    break;
                }
            }

            // (2) closed-form weighted least squares for (a, b) at fixed pose
            let mut da = 0.0;
            let mut db = 0.0;
            if estimate_affine {
                let s = accumulate_affine(
                    reference,
                    img,
                    &kl,
                    level,
                    &t_rel,
                    &affine,
                    Some(&weight),
                    cfg.min_depth,
                    false,
                );
                let denom = s.sw * s.sxx - s.sx * s.sx;
                if denom.abs() > 1e-9 && s.sw > 0.0 {
                    let a_new = (s.sw * s.sxy - s.sx * s.sy) / denom;
                    let b_new = (s.sy - a_new * s.sx) / s.sw;
                    if a_new <= 1e-3 {
                        return Err(Error::AlignmentFailed(format!(
                            "gain collapsed to {a_new:.4}"
                        )));
                    }
                    da = (a_new - affine.a).abs();
                    db = (b_new - affine.b).abs();
                    affine = AffineModel { a: a_new, b: b_new };
                }
            }

            if delta_norm < cfg.track_update_eps && da < 1e-6 && db < 1e-4 {
                break;
            }
        }
    }

    // final statistics on the finest level
    let kl = k.at_level(0);
    let img = target.level(0);
    let stats = accumulate_affine(
        reference,
        img,
        &kl,
        0,
        &t_rel,
        &affine,
        None,
        cfg.min_depth,
        false,
    );
    let sigma = estimate_sigma(&stats.residuals, cfg.nu, cfg.sigma_floor);
    let weight = RobustWeight::new(cfg.nu, sigma).expect("sigma floored");
    let final_stats = accumulate_affine(
        reference,
        img,
        &kl,
        0,
        &t_rel,
        &affine,
        Some(&weight),
        cfg.min_depth,
        false,
    );
    let inlier_ratio = if final_stats.total > 0 {
        final_stats.valid as f64 / final_stats.total as f64
    } else {
        0.0
    };
    if inlier_ratio < cfg.loop_min_inlier_ratio {
        return Err(Error::AlignmentFailed(format!(
            "inlier ratio {inlier_ratio:.2} below {}",
            cfg.loop_min_inlier_ratio
        )));
    }
    Ok(AffineAlignment {
        t_rel,
        affine,
        inlier_ratio,
        final_cost: final_stats.cost,
        rounds: rounds_total,
        support: final_stats.valid,
    })
}

/// Far-loop initialization: mutual-nearest-neighbor descriptor matches are
/// lifted to 3-D through each keyframe's tracked points, then a seeded
/// 3-point RANSAC rigid fit gives the initial relative pose (reference
/// frame coordinates into target frame coordinates). `None` when matching
/// or consensus fails; the caller then skips the candidate.
pub fn descriptor_ransac_init(
    reference: (&Frame, &DescriptorBag),
    target: (&Frame, &DescriptorBag),
    k: &CameraIntrinsics,
    seed: u64,
) -> Option<Pose> {
    const MAX_HAMMING: u32 = 64;
    const PIXEL_ASSOC_RADIUS: f64 = 8.0;
    const INLIER_DIST: f64 = 0.15;
    const MIN_INLIERS: usize = 6;

    // associate keypoints with tracked 3-D points by projection distance
    let lift = |frame: &Frame, bag: &DescriptorBag| -> Vec<(Descriptor, Vector3<f64>)> {
        let mut projected: Vec<(f64, f64, Vector3<f64>)> = Vec::new();
        for p in &frame.points {
            if let Some(uv) = k.project_with(&p.p_cam, 0.05, 0.0) {
                projected.push((uv.x, uv.y, p.p_cam));
            }
        }
        bag.keypoints
            .iter()
            .zip(&bag.descriptors)
            .filter_map(|(kp, d)| {
                let mut best: Option<(f64, Vector3<f64>)> = None;
                for &(u, v, p) in &projected {
                    let dist = ((u - kp.x as f64).powi(2) + (v - kp.y as f64).powi(2)).sqrt();
                    if dist <= PIXEL_ASSOC_RADIUS && best.is_none_or(|(bd, _)| dist < bd) {
                        best = Some((dist, p));
                    }
                }
                best.map(|(_, p)| (*d, p))
            })
            .collect()
    };
    let ref_lifted = lift(reference.0, reference.1);
    let tgt_lifted = lift(target.0, target.1);
    if ref_lifted.len() < MIN_INLIERS || tgt_lifted.len() < MIN_INLIERS {
        return None;
    }

    let nearest = |from: &[(Descriptor, Vector3<f64>)], to: &[(Descriptor, Vector3<f64>)]| {
        from.iter()
            .map(|(d, _)| {
                let mut best = (u32::MAX, usize::MAX);
                for (i, (t, _)) in to.iter().enumerate() {
                    let h = d.hamming(t);
                    if h < best.0 {
                        best = (h, i);
                    }
                }
                best
            })
            .collect::<Vec<_>>()
    };
    let fwd = nearest(&ref_lifted, &tgt_lifted);
    let bwd = nearest(&tgt_lifted, &ref_lifted);
    let matches: Vec<(Vector3<f64>, Vector3<f64>)> = fwd
        .iter()
        .enumerate()
        .filter(|&(i, &(h, j))| h <= MAX_HAMMING && j != usize::MAX && bwd[j].1 == i)
        .map(|(i, &(_, j))| (ref_lifted[i].1, tgt_lifted[j].1))
        .collect();
    if matches.len() < MIN_INLIERS {
        return None;
    }

    let rigid_fit = |pairs: &[(Vector3<f64>, Vector3<f64>)]| -> Option<Pose> {
        let n = pairs.len() as f64;
        let mu_src = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
        let mu_dst = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
        let mut cov = nalgebra::Matrix3::<f64>::zeros();
        for (s, d) in pairs {
            cov += (d - mu_dst) * (s - mu_src).transpose();
        }
        let svd = cov.svd(true, true);
        let u = svd.u?;
        let v_t = svd.v_t?;
        let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
        if (u * v_t).determinant() < 0.0 {
            s_diag.z = -1.0;
        }
        let r = u * nalgebra::Matrix3::from_diagonal(&s_diag) * v_t;
        Some(Pose::new(r, mu_dst - r * mu_src))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Pose)> = None;
    for _ in 0..200 {
        let i = rng.gen_range(0..matches.len());
        let j = rng.gen_range(0..matches.len());
        let l = rng.gen_range(0..matches.len());
        if i == j || j == l || i == l {
            continue;
        }
        let Some(model) = rigid_fit(&[matches[i], matches[j], matches[l]]) else {
            continue;
        };
        let inliers = matches
            .iter()
            .filter(|(s, d)| (model.transform(s) - d).norm() <= INLIER_DIST)
            .count();
        if best.as_ref().is_none_or(|(bi, _)| inliers > *bi) {
            best = Some((inliers, model));
        }
    }
    let (count, model) = best?;
    if count < MIN_INLIERS {
        return None;
    }
    let inlier_pairs: Vec<(Vector3<f64>, Vector3<f64>)> = matches
        .iter()
        .filter(|(s, d)| (model.transform(s) - d).norm() <= INLIER_DIST)
        .copied()
        .collect();
    rigid_fit(&inlier_pairs)
}

/// Consistency gate between the forward and reverse loop alignments:
/// accepts iff `||log(T_kf_to_c * T_c_to_kf)|| < eps`. Returns the twist
/// norm alongside the decision.
pub fn cross_validate(t_c_to_kf: &Pose, t_kf_to_c: &Pose, eps: f64) -> (bool, f64) {
    let closure = t_kf_to_c.compose(t_c_to_kf);
    match closure.log() {
        Ok(twist) => {
            let norm = twist.norm();
            (norm < eps, norm)
        }
        // a half-turn discrepancy is far beyond any sane gate
        Err(_) => (false, f64::INFINITY),
    }
}

// ---------------------------------------------------------------------------
// Pose graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

#[derive(Debug, Clone)]
pub struct PoseGraphEdge {
    pub from: usize,
    pub to: usize,
    /// Measured relative pose `Z = T_from^-1 * T_to`.
    pub measurement: Pose,
    /// Scalar information weight (identity information matrix scaled by the
    /// supporting residual count).
    pub weight: f64,
    pub kind: EdgeKind,
}

/// Keyframe pose graph with odometry and loop edges. The first node is the
/// gauge anchor.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub nodes: Vec<Pose>,
    pub edges: Vec<PoseGraphEdge>,
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PoseGraph {
    pub fn total_residual(&self) -> Result<f64> {
        let mut acc = 0.0;
        for e in &self.edges {
            acc += e.weight * self.edge_error(e)?.as_vector().norm_squared();
        }
        Ok(acc)
    }

    fn edge_error(&self, e: &PoseGraphEdge) -> Result<Twist> {
        let t_i = &self.nodes[e.from];
        let t_j = &self.nodes[e.to];
        e.measurement
            .inverse()
            .compose(&t_i.relative(t_j))
            .log()
    }

    /// Damped Gauss-Newton over all non-anchored poses with
    /// left-multiplicative twist updates. The returned report carries the
    /// residual before and after; the best iterate is kept, so the total
    /// residual never increases.
    pub fn optimize(&mut self, max_iterations: usize) -> Result<OptimizeReport> {
        let n = self.nodes.len();
        if n <= 1 || self.edges.is_empty() {
            let r = self.total_residual()?;
            return Ok(OptimizeReport {
                initial_residual: r,
                final_residual: r,
                iterations: 0,
                converged: true,
            });
        }
        let dof = 6 * (n - 1);
        let initial_residual = self.total_residual()?;
        let mut best_nodes = self.nodes.clone();
        let mut best_residual = initial_residual;
        let mut cost = initial_residual;
        let mut lambda = 1e-6f64;
        let mut iterations = 0usize;
        let mut converged = false;

        for _ in 0..max_iterations {
            iterations += 1;
            let mut h = DMatrix::<f64>::zeros(dof, dof);
            let mut b = DVector::<f64>::zeros(dof);
            for e in &self.edges {
                let err = self.edge_error(e)?;
                let err_v = err.as_vector();
                // J_j = Jl_inv(err) * Ad((T_i Z)^-1); J_i = -J_j
                let base = self.nodes[e.from].compose(&e.measurement).inverse();
                let ad = base.adjoint();
                let jl_inv = {
                    let a = twist_ad(&err);
                    Matrix6::identity() - a * 0.5 + (a * a) * (1.0 / 12.0)
                };
                let j_j = jl_inv * ad;

                let blocks: [(usize, f64); 2] = [(e.from, -1.0), (e.to, 1.0)];
                for (node, sign) in blocks {
                    if node == 0 {
                        continue;
                    }
                    let row0 = 6 * (node - 1);
                    let j_block = j_j * sign;
                    // b += w J^T e
                    let contrib = j_block.transpose() * err_v * e.weight;
                    for r in 0..6 {
                        b[row0 + r] += contrib[r];
                    }
                    for (other, sign2) in blocks {
                        if other == 0 {
                            continue;
                        }
                        let col0 = 6 * (other - 1);
                        let h_block = j_block.transpose() * (j_j * sign2) * e.weight;
                        for r in 0..6 {
                            for c in 0..6 {
                                h[(row0 + r, col0 + c)] += h_block[(r, c)];
                            }
                        }
                    }
                }
            }

            if b.norm() < 1e-12 {
                converged = true;
                break;
            }

            let mut accepted = false;
            for _ in 0..8 {
                let mut damped = h.clone();
                for i in 0..dof {
                    damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda = (lambda * 10.0).max(1e-6);
                    continue;
                };
                let delta = chol.solve(&(-&b));
                let mut candidate = self.nodes.clone();
                for (i, node) in candidate.iter_mut().enumerate().skip(1) {
                    let xi = Twist::from_vector(&Vector6::from_row_slice(
                        &delta.as_slice()[6 * (i - 1)..6 * i],
                    ));
                    *node = Pose::exp(&xi).compose(node);
                }
                let trial = PoseGraph {
                    nodes: candidate.clone(),
                    edges: self.edges.clone(),
                }
                .total_residual()?;
                if trial <= cost {
                    let decrease = cost - trial;
                    self.nodes = candidate;
                    cost = trial;
                    lambda = (lambda * 0.3).max(1e-9);
                    accepted = true;
                    if cost < best_residual {
                        best_residual = cost;
                        best_nodes = self.nodes.clone();
                    }
                    if delta.norm() < 1e-10 || decrease < 1e-14 {
                        converged = true;
                    }
                    break;
                }
                lambda = (lambda * 10.0).max(1e-6);
            }
            if !accepted || converged {
                converged = converged || !accepted;
                break;
            }
        }

        self.nodes = best_nodes;
        Ok(OptimizeReport {
            initial_residual,
            final_residual: best_residual,
            iterations,
            converged,
        })
    }
}
