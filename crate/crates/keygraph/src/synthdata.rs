//! Synthetic stick-figure dataset: articulated 7-joint figures rendered as
//! bright 3 px bones over flat or gradient backgrounds, with ground-truth
//! joint positions for evaluation only (training never sees them).
//!
//! Layout on disk, per split directory:
//!   <split>/images/%06d.png
//!   <split>/annotations.json   (array of {file, joints: [[x, y]; 7]})
//!
//! Sample i of the train split uses seed `base_seed + i`; the eval split is
//! offset by 1,000,000 so the splits can never share a figure.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffgeom::grid_coord;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const N_JOINTS: usize = 7;
pub const JOINT_NAMES: [&str; N_JOINTS] =
    ["head", "neck", "pelvis", "left_hand", "right_hand", "left_foot", "right_foot"];

/// Bones as (parent joint, child joint); the first is the torso.
pub const BONES: [(usize, usize); 6] = [(2, 1), (1, 0), (1, 3), (1, 4), (2, 5), (2, 6)];

/// Rest direction of each bone relative to its parent direction (the torso's
/// parent is the root frame pointing along +x). Radians, counterclockwise.
const REST_ANGLES: [f64; 6] = [
    std::f64::consts::FRAC_PI_2,         // pelvis -> neck: straight up
    0.0,                                 // neck -> head: continues the torso
    2.0 * std::f64::consts::FRAC_PI_3,   // neck -> left hand: down-left
    -2.0 * std::f64::consts::FRAC_PI_3,  // neck -> right hand: down-right
    5.0 * std::f64::consts::FRAC_PI_6,   // pelvis -> left foot
    -5.0 * std::f64::consts::FRAC_PI_6,  // pelvis -> right foot
];

const SEED_SPLIT_OFFSET: u64 = 1_000_000;
const JOINT_LIMIT: f64 = 0.9;
const BONE_HALF_WIDTH_PX: f64 = 1.5;
const NOISE_STD: f64 = 0.02;

/// Pose parameters drawn for one figure.
#[derive(Clone, Debug)]
pub struct PoseParams {
    /// Pelvis position in [-0.3, 0.3]^2.
    pub root: [f64; 2],
    /// Root rotation in [-pi, pi).
    pub rotation: f64,
    /// Per-bone length in [0.25, 0.45].
    pub bone_lengths: [f64; 6],
    /// Per-bone deviation from its rest direction, within +-75 degrees.
    pub joint_angles: [f64; 6],
}

#[derive(Clone, Debug)]
pub enum Background {
    Flat([f32; 3]),
    /// Linear gradient from `start` to `stop` along `dir` (unit vector).
    Gradient { start: [f32; 3], stop: [f32; 3], dir: [f64; 2] },
}

#[derive(Clone, Debug)]
pub struct Appearance {
    pub bone_color: [f32; 3],
    pub background: Background,
}

/// One generated figure: the rendered image, normalized joint coordinates,
/// and the parameters that produced them.
#[derive(Clone, Debug)]
pub struct StickFigureSample {
    pub seed: u64,
    pub image: Tensor<f32>,
    pub joints: [[f64; 2]; N_JOINTS],
    pub pose: PoseParams,
    pub appearance: Appearance,
}

/// Joint positions from pose parameters: every bone direction is its parent's
/// direction plus rest offset plus joint angle, scaled by its length.
pub fn forward_kinematics(pose: &PoseParams) -> [[f64; 2]; N_JOINTS] {
    let mut joints = [[0.0f64; 2]; N_JOINTS];
    joints[2] = pose.root;
    let torso_dir = pose.rotation + REST_ANGLES[0] + pose.joint_angles[0];
    let mut dirs = [0.0f64; 6];
    dirs[0] = torso_dir;
    for b in 1..6 {
        dirs[b] = torso_dir + REST_ANGLES[b] + pose.joint_angles[b];
    }
    for (b, &(parent, child)) in BONES.iter().enumerate() {
        let l = pose.bone_lengths[b];
        joints[child] = [
            joints[parent][0] + l * dirs[b].cos(),
            joints[parent][1] + l * dirs[b].sin(),
        ];
    }
    joints
}

fn sample_pose(rng: &mut ChaCha8Rng) -> (PoseParams, [[f64; 2]; N_JOINTS]) {
    let limit = 75.0f64.to_radians();
    for _ in 0..10_000 {
        let root = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
        let rotation = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let mut bone_lengths = [0.0; 6];
        for l in &mut bone_lengths {
            *l = rng.gen_range(0.25..0.45);
        }
        let mut joint_angles = [0.0; 6];
        for a in &mut joint_angles {
            *a = rng.gen_range(-limit..limit);
        }
        let pose = PoseParams { root, rotation, bone_lengths, joint_angles };
        let joints = forward_kinematics(&pose);
        if joints.iter().all(|j| j[0].abs() <= JOINT_LIMIT && j[1].abs() <= JOINT_LIMIT) {
            return (pose, joints);
        }
    }
    unreachable!("pose rejection cannot starve: the identity pose is admissible");
}

fn sample_appearance(rng: &mut ChaCha8Rng) -> Appearance {
    let mut bone_color = [0.0f32; 3];
    for c in &mut bone_color {
        *c = rng.gen_range(0.75..1.0);
    }
    let background = if rng.gen_bool(0.5) {
        let mut col = [0.0f32; 3];
        for c in &mut col {
            *c = rng.gen_range(0.0..0.5);
        }
        Background::Flat(col)
    } else {
        let mut start = [0.0f32; 3];
        let mut stop = [0.0f32; 3];
        for c in &mut start {
            *c = rng.gen_range(0.0..0.5);
        }
        for c in &mut stop {
            *c = rng.gen_range(0.0..0.5);
        }
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        Background::Gradient { start, stop, dir: [ang.cos(), ang.sin()] }
    };
    Appearance { bone_color, background }
}

/// Squared distance from point p to segment [a, b], all in pixel units.
fn seg_d2_px(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let vx = b[0] - a[0];
    let vy = b[1] - a[1];
    let ex = px - a[0];
    let ey = py - a[1];
    let vv = vx * vx + vy * vy;
    let t = if vv > 0.0 { ((ex * vx + ey * vy) / vv).clamp(0.0, 1.0) } else { 0.0 };
    let rx = ex - t * vx;
    let ry = ey - t * vy;
    rx * rx + ry * ry
}

fn render_figure(
    image_size: usize,
    joints: &[[f64; 2]; N_JOINTS],
    app: &Appearance,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let s = image_size;
    // Normalized [-1, 1] coordinates to pixel centers of the shared grid.
    let to_px = |v: f64| (v + 1.0) / 2.0 * (s - 1) as f64;
    let bones_px: Vec<([f64; 2], [f64; 2])> = BONES
        .iter()
        .map(|&(p, c)| {
            (
                [to_px(joints[p][0]), to_px(joints[p][1])],
                [to_px(joints[c][0]), to_px(joints[c][1])],
            )
        })
        .collect();
    let r2 = BONE_HALF_WIDTH_PX * BONE_HALF_WIDTH_PX;
    let mut data = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let on_bone = bones_px.iter().any(|&(a, b)| seg_d2_px(x as f64, y as f64, a, b) <= r2);
            let base = if on_bone {
                app.bone_color
            } else {
                match &app.background {
                    Background::Flat(c) => *c,
                    Background::Gradient { start, stop, dir } => {
                        // Project the normalized position onto dir; map the
                        // [-sqrt2, sqrt2] range of the projection to [0, 1].
                        let nx: f64 = grid_coord(x, s);
                        let ny: f64 = grid_coord(y, s);
                        let t = ((nx * dir[0] + ny * dir[1]) / (2.0 * 2.0f64.sqrt()) + 0.5)
                            .clamp(0.0, 1.0) as f32;
                        [
                            start[0] + (stop[0] - start[0]) * t,
                            start[1] + (stop[1] - start[1]) * t,
                            start[2] + (stop[2] - start[2]) * t,
                        ]
                    }
                }
            };
            for ch in 0..3 {
                let noise: f64 = rng.sample(StandardNormal);
                let v = base[ch] as f64 + NOISE_STD * noise;
                data[(ch * s + y) * s + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("image shape")
}

/// Generate the figure for `seed`. Fully deterministic in (seed, image_size).
pub fn generate_sample(seed: u64, image_size: usize) -> StickFigureSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pose, joints) = sample_pose(&mut rng);
    let appearance = sample_appearance(&mut rng);
    let image = render_figure(image_size, &joints, &appearance, &mut rng);
    StickFigureSample { seed, image, joints, pose, appearance }
}

/// One annotation record; `file` is relative to the split directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub joints: Vec<[f64; 2]>,
}

/// A loaded split: its directory and parsed annotations. Images are read on
/// demand via [`Dataset::load_image`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let ann = dir.join("annotations.json");
        let text = std::fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
        let entries: Vec<DatasetEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", ann.display())))?;
        if entries.is_empty() {
            return Err(Error::Dataset(format!("{}: no entries", ann.display())));
        }
        let n_joints = entries[0].joints.len();
        for (i, e) in entries.iter().enumerate() {
            if e.joints.len() != n_joints {
                return Err(Error::Dataset(format!(
                    "entry {i} ({}) has {} joints, expected {n_joints}",
                    e.file,
                    e.joints.len()
                )));
            }
            for (j, c) in e.joints.iter().enumerate() {
                if !c.iter().all(|v| v.is_finite() && v.abs() <= 1.0) {
                    return Err(Error::Dataset(format!(
                        "entry {i} ({}) joint {j} at ({}, {}) is outside [-1, 1]^2",
                        e.file, c[0], c[1]
                    )));
                }
            }
        }
        Ok(Dataset { root: dir.to_path_buf(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_joints(&self) -> usize {
        self.entries[0].joints.len()
    }

    /// Decode entry `idx` into a `[3, s, s]` float image in [0, 1].
    pub fn load_image(&self, idx: usize) -> Result<Tensor<f32>> {
        load_image_file(&self.root.join(&self.entries[idx].file))
    }

    /// Decode every image; the per-image tensors share the dataset ordering.
    pub fn load_all_images(&self) -> Result<Vec<Tensor<f32>>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }
}

/// Decode a PNG into a `[3, h, w]` float image in [0, 1].
pub fn load_image_file(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (y, x, pixel) in img.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p)) {
        for ch in 0..3 {
            data[(ch * h + y) * w + x] = pixel.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Encode a `[3, h, w]` float image (clamped to [0, 1]) as an 8-bit PNG.
pub fn save_image_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("save_image_file expects [3, h, w], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (xi, yi) = (x as usize, y as usize);
        for ch in 0..3 {
            let v = t.data()[(ch * h + yi) * w + xi].clamp(0.0, 1.0);
            p.0[ch] = (v * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn write_split(
    dir: &Path,
    image_size: usize,
    count: usize,
    seed0: u64,
) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let sample = generate_sample(seed0 + i as u64, image_size);
        let file = format!("images/{i:06}.png");
        save_image_file(&dir.join(&file), &sample.image)?;
        entries.push(DatasetEntry { file, joints: sample.joints.to_vec() });
    }
    let ann = dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&entries)
        .map_err(|e| Error::Dataset(format!("serializing annotations: {e}")))?;
    let mut f = std::fs::File::create(&ann).map_err(|e| Error::io(&ann, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&ann, e))?;
    Ok(())
}

/// Write `<root>/train` and `<root>/eval` splits. Regenerating with the same
/// arguments reproduces every byte.
pub fn generate_dataset(
    root: &Path,
    n_train: usize,
    n_eval: usize,
    base_seed: u64,
    image_size: usize,
) -> Result<()> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config(format!(
            "dataset needs positive split sizes, got train {n_train} and eval {n_eval}"
        )));
    }
    if n_train as u64 > SEED_SPLIT_OFFSET {
        return Err(Error::Config(format!(
            "train split of {n_train} would collide with the eval seed offset"
        )));
    }
    if image_size < 8 {
        return Err(Error::Config(format!("image size {image_size} is too small to draw on")));
    }
    write_split(&root.join("train"), image_size, n_train, base_seed)?;
    write_split(&root.join("eval"), image_size, n_eval, base_seed + SEED_SPLIT_OFFSET)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent FK recomputation with explicit rotation matrices.
    fn oracle_joint(pose: &PoseParams, bone: usize) -> [f64; 2] {
        let rot = |ang: f64, v: [f64; 2]| {
            [v[0] * ang.cos() - v[1] * ang.sin(), v[0] * ang.sin() + v[1] * ang.cos()]
        };
        let torso = pose.rotation + REST_ANGLES[0] + pose.joint_angles[0];
        let angle = if bone == 0 { torso } else { torso + REST_ANGLES[bone] + pose.joint_angles[bone] };
        let offset = rot(angle, [pose.bone_lengths[bone], 0.0]);
        let (parent, _) = BONES[bone];
        let parent_pos = if parent == 2 {
            pose.root
        } else {
            // neck = pelvis + torso offset
            let t = rot(torso, [pose.bone_lengths[0], 0.0]);
            [pose.root[0] + t[0], pose.root[1] + t[1]]
        };
        [parent_pos[0] + offset[0], parent_pos[1] + offset[1]]
    }

    #[test]
    fn forward_kinematics_matches_oracle() {
        for seed in 0..20 {
            let s = generate_sample(seed, 32);
            for (b, &(_, child)) in BONES.iter().enumerate() {
                let want = oracle_joint(&s.pose, b);
                let got = s.joints[child];
                assert!(
                    (want[0] - got[0]).abs() < 1e-12 && (want[1] - got[1]).abs() < 1e-12,
                    "seed {seed} bone {b}: {got:?} vs {want:?}"
                );
            }
        }
    }

    #[test]
    fn bone_lengths_are_respected() {
        let s = generate_sample(5, 32);
        for (b, &(p, c)) in BONES.iter().enumerate() {
            let dx = s.joints[p][0] - s.joints[c][0];
            let dy = s.joints[p][1] - s.joints[c][1];
            let l = (dx * dx + dy * dy).sqrt();
            assert!((l - s.pose.bone_lengths[b]).abs() < 1e-12);
            assert!((0.25..0.45).contains(&s.pose.bone_lengths[b]));
        }
    }

    #[test]
    fn joints_stay_inside_the_margin() {
        for seed in 0..50 {
            let s = generate_sample(seed, 16);
            for j in s.joints.iter() {
                assert!(j[0].abs() <= 0.9 && j[1].abs() <= 0.9, "seed {seed}: {j:?}");
            }
        }
    }

    #[test]
    fn samples_are_seed_deterministic() {
        let a = generate_sample(123, 64);
        let b = generate_sample(123, 64);
        let c = generate_sample(124, 64);
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a.joints, b.joints);
        assert!(!a.image.bit_eq(&c.image));
    }

    #[test]
    fn bones_are_bright_against_background() {
        for seed in [0, 1, 2, 3] {
            let s = generate_sample(seed, 64);
            // Probe the torso midpoint vs. an image corner (joints are
            // confined to [-0.9, 0.9], so the exact corner is background).
            let mid = [
                (s.joints[1][0] + s.joints[2][0]) / 2.0,
                (s.joints[1][1] + s.joints[2][1]) / 2.0,
            ];
            let to_px = |v: f64| ((v + 1.0) / 2.0 * 63.0).round() as usize;
            let (mx, my) = (to_px(mid[0]), to_px(mid[1]));
            let luma = |x: usize, y: usize| {
                (0..3).map(|c| s.image.data()[(c * 64 + y) * 64 + x]).sum::<f32>() / 3.0
            };
            assert!(
                luma(mx, my) > luma(0, 0) + 0.15,
                "seed {seed}: bone {} vs corner {}",
                luma(mx, my),
                luma(0, 0)
            );
        }
    }

    #[test]
    fn dataset_roundtrip_and_eval_offset() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 3, 2, 77, 32).unwrap();
        let train = Dataset::load(&dir.path().join("train")).unwrap();
        let eval = Dataset::load(&dir.path().join("eval")).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(eval.len(), 2);
        assert_eq!(train.n_joints(), N_JOINTS);

        // Eval sample 0 is the figure for seed 77 + 1,000,000.
        let want = generate_sample(77 + 1_000_000, 32);
        for (a, b) in eval.entries[0].joints.iter().zip(want.joints.iter()) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }

        // PNG round trip: decoded pixels within quantization distance.
        let img = train.load_image(0).unwrap();
        let src = generate_sample(77, 32);
        assert_eq!(img.shape(), &[3, 32, 32]);
        for (a, b) in img.data().iter().zip(src.image.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn dataset_regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(d1.path(), 2, 1, 9, 32).unwrap();
        generate_dataset(d2.path(), 2, 1, 9, 32).unwrap();
        for rel in ["train/annotations.json", "train/images/000001.png", "eval/images/000000.png"] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical generations");
        }
    }

    #[test]
    fn load_rejects_malformed_annotations() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("annotations.json"), b"not json").unwrap();
        assert!(Dataset::load(dir.path()).is_err());

        let bad = vec![DatasetEntry { file: "x.png".into(), joints: vec![[2.0, 0.0]] }];
        std::fs::write(
            dir.path().join("annotations.json"),
            serde_json::to_string(&bad).unwrap(),
        )
        .unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }
}
