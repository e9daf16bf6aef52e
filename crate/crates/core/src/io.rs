//! On-disk formats: 8-bit PNG images, COLMAP text exports, the dataset
//! directory layout, trajectory files and training checkpoints.
//!
//! Every writer goes through [`write_atomic`] (temp file, then rename).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::lie::{LieError, Pose, Rotation, TrajectoryKind, TrajectorySpline};
use crate::optim::TrainView;
use crate::projection::Intrinsics;
use crate::scene::GaussianScene;
use crate::synth::SynthDataset;

pub const CHECKPOINT_MAGIC: &str = "BLURSPLAT-CKPT-1";
pub const CAMERAS_FILE: &str = "cameras.txt";
pub const IMAGES_FILE: &str = "images.txt";
pub const POINTS_FILE: &str = "points3D.txt";
pub const TRAJ_INIT_FILE: &str = "traj_init.txt";
pub const TRAJ_GT_FILE: &str = "traj_gt.txt";
pub const META_FILE: &str = "dataset.txt";
pub const BLURRY_DIR: &str = "images";
pub const SHARP_DIR: &str = "sharp";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: unsupported camera model {model}", path.display())]
    UnsupportedCameraModel { path: PathBuf, line: usize, model: String },
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Inconsistent { path: PathBuf, message: String },
    #[error(transparent)]
    Lie(#[from] LieError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers see either the old or the new file, never a partial one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path)(e)
    })
}

pub fn load_png(path: &Path) -> Result<ImageBuffer, IoError> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => io_err(path)(source),
            other => IoError::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(ImageBuffer::from_vec(w, h, data).expect("rgb8 buffer has 3 channels"))
}

/// Quantizes to 8 bits (clamped to `[0, 1]`, rounded to nearest).
pub fn encode_png(img: &ImageBuffer) -> Vec<u8> {
    let raw = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let rgb = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer length matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut out, image::ImageFormat::Png).expect("in-memory png encoding");
    out.into_inner()
}

pub fn save_png(path: &Path, img: &ImageBuffer) -> Result<(), IoError> {
    write_atomic(path, &encode_png(img))
}

// Non-comment, non-blank lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    tokens: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn new(path: &'a Path, line: usize, text: &'a str) -> Self {
        Fields {
            path,
            line,
            tokens: text.split_whitespace().collect(),
        }
    }

    fn err(&self, message: impl Into<String>) -> IoError {
        IoError::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn min_len(&self, n: usize) -> Result<(), IoError> {
        if self.tokens.len() < n {
            return Err(self.err(format!("expected at least {n} fields, found {}", self.tokens.len())));
        }
        Ok(())
    }

    fn exact_len(&self, n: usize) -> Result<(), IoError> {
        if self.tokens.len() != n {
            return Err(self.err(format!("expected {n} fields, found {}", self.tokens.len())));
        }
        Ok(())
    }

    fn str(&self, i: usize) -> Result<&'a str, IoError> {
        self.tokens.get(i).copied().ok_or_else(|| self.err(format!("missing field {}", i + 1)))
    }

    fn parse<T: std::str::FromStr>(&self, i: usize) -> Result<T, IoError> {
        let s = self.str(i)?;
        s.parse().map_err(|_| self.err(format!("invalid value {s:?} in field {}", i + 1)))
    }

    fn f64(&self, i: usize) -> Result<f64, IoError> {
        let v: f64 = self.parse(i)?;
        if !v.is_finite() {
            return Err(self.err(format!("non-finite value in field {}", i + 1)));
        }
        Ok(v)
    }

    fn f64s<const N: usize>(&self, from: usize) -> Result<[f64; N], IoError> {
        let mut out = [0.0; N];
        for (k, v) in out.iter_mut().enumerate() {
            *v = self.f64(from + k)?;
        }
        Ok(out)
    }

    // qw qx qy qz tx ty tz
    fn pose(&self, from: usize) -> Result<Pose, IoError> {
        let v = self.f64s::<7>(from)?;
        if v[..4].iter().all(|c| *c == 0.0) {
            return Err(self.err("zero quaternion"));
        }
        Ok(Pose::new(Rotation::from_wxyz(v[0], v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6])))
    }
}

fn fmt_pose(out: &mut String, pose: &Pose) {
    let [w, x, y, z] = pose.rotation.wxyz();
    let t = pose.translation;
    let _ = write!(out, "{w:e} {x:e} {y:e} {z:e} {:e} {:e} {:e}", t.x, t.y, t.z);
}

/// A COLMAP registered image.
#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    pub camera_id: u32,
    /// World-to-camera.
    pub pose: Pose,
    pub name: String,
}

/// Contents of a COLMAP text export.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColmapModel {
    pub cameras: BTreeMap<u32, Intrinsics>,
    /// Sorted by id.
    pub images: Vec<ColmapImage>,
    pub points: Vec<Vector3<f64>>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<Vector3<f64>>,
}

impl ColmapModel {
    pub fn intrinsics_of(&self, image: &ColmapImage) -> Option<&Intrinsics> {
        self.cameras.get(&image.camera_id)
    }

    /// One trajectory per image with every knot at its registered pose.
    pub fn initial_trajectories(&self, kind: TrajectoryKind) -> Vec<(u32, TrajectorySpline)> {
        self.images.iter().map(|im| (im.id, TrajectorySpline::constant(kind, im.pose))).collect()
    }
}

pub fn parse_cameras(path: &Path, text: &str) -> Result<BTreeMap<u32, Intrinsics>, IoError> {
    let mut cameras = BTreeMap::new();
    for (line, l) in content_lines(text) {
        let f = Fields::new(path, line, l);
        f.min_len(4)?;
        let id: u32 = f.parse(0)?;
        let model = f.str(1)?;
        let (w, h): (usize, usize) = (f.parse(2)?, f.parse(3)?);
        let k = match model {
            "PINHOLE" => {
                f.exact_len(8)?;
                let [fx, fy, cx, cy] = f.f64s::<4>(4)?;
                Intrinsics::new(fx, fy, cx, cy, w, h)
            }
            "SIMPLE_PINHOLE" => {
                f.exact_len(7)?;
                let [fl, cx, cy] = f.f64s::<3>(4)?;
                Intrinsics::new(fl, fl, cx, cy, w, h)
            }
            other => {
                return Err(IoError::UnsupportedCameraModel {
                    path: path.to_path_buf(),
                    line,
                    model: other.to_string(),
                })
            }
        };
        if !k.is_valid() {
            return Err(f.err("focal lengths and image size must be positive"));
        }
        if cameras.insert(id, k).is_some() {
            return Err(f.err(format!("duplicate camera id {id}")));
        }
    }
    Ok(cameras)
}

/// Each image occupies two lines; the second (2D observations) may be
/// empty and is ignored.
pub fn parse_images(path: &Path, text: &str) -> Result<Vec<ColmapImage>, IoError> {
    let mut images: Vec<ColmapImage> = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    while let Some((line, l)) = lines.next() {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let f = Fields::new(path, line, l);
        f.exact_len(10)?;
        let id: u32 = f.parse(0)?;
        if images.iter().any(|im| im.id == id) {
            return Err(f.err(format!("duplicate image id {id}")));
        }
        images.push(ColmapImage {
            id,
            pose: f.pose(1)?,
            camera_id: f.parse(8)?,
            name: f.str(9)?.to_string(),
        });
        lines.next();
    }
    images.sort_by_key(|im| im.id);
    Ok(images)
}

pub fn parse_points(path: &Path, text: &str) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), IoError> {
    let (mut points, mut colors) = (Vec::new(), Vec::new());
    for (line, l) in content_lines(text) {
        let f = Fields::new(path, line, l);
        f.min_len(8)?;
        let _: u64 = f.parse(0)?;
        let [x, y, z] = f.f64s::<3>(1)?;
        let rgb: [u8; 3] = [f.parse(4)?, f.parse(5)?, f.parse(6)?];
        points.push(Vector3::new(x, y, z));
        colors.push(Vector3::from(rgb.map(|c| f64::from(c) / 255.0)));
    }
    Ok((points, colors))
}

pub fn load_colmap_text(dir: &Path) -> Result<ColmapModel, IoError> {
    let read = |name: &str| {
        let p = dir.join(name);
        read_text(&p).map(|t| (p, t))
    };
    let (cp, ct) = read(CAMERAS_FILE)?;
    let (ip, it) = read(IMAGES_FILE)?;
    let (pp, pt) = read(POINTS_FILE)?;
    let cameras = parse_cameras(&cp, &ct)?;
    let images = parse_images(&ip, &it)?;
    if let Some(im) = images.iter().find(|im| !cameras.contains_key(&im.camera_id)) {
        return Err(IoError::Inconsistent {
            path: ip,
            message: format!("image {} references unknown camera {}", im.id, im.camera_id),
        });
    }
    let (points, colors) = parse_points(&pp, &pt)?;
    Ok(ColmapModel {
        cameras,
        images,
        points,
        colors,
    })
}

pub fn write_colmap_text(dir: &Path, model: &ColmapModel) -> Result<(), IoError> {
    let mut cams = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    for (id, k) in &model.cameras {
        let _ = writeln!(
            cams,
            "{id} PINHOLE {} {} {:e} {:e} {:e} {:e}",
            k.width, k.height, k.fx, k.fy, k.cx, k.cy
        );
    }
    let mut imgs = String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for im in &model.images {
        let _ = write!(imgs, "{} ", im.id);
        fmt_pose(&mut imgs, &im.pose);
        let _ = writeln!(imgs, " {} {}\n", im.camera_id, im.name);
    }
    let mut pts = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[]\n");
    for (i, (p, c)) in model.points.iter().zip(&model.colors).enumerate() {
        let rgb = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        let _ = writeln!(pts, "{} {:e} {:e} {:e} {} {} {} 0", i + 1, p.x, p.y, p.z, rgb.x, rgb.y, rgb.z);
    }
    write_atomic(&dir.join(CAMERAS_FILE), cams.as_bytes())?;
    write_atomic(&dir.join(IMAGES_FILE), imgs.as_bytes())?;
    write_atomic(&dir.join(POINTS_FILE), pts.as_bytes())
}

/// Lines `image_id knot_index qw qx qy qz tx ty tz`, knots stored folded.
pub fn format_trajectories(trajs: &[(u32, TrajectorySpline)]) -> String {
    let mut out = String::from("# image_id knot_index qw qx qy qz tx ty tz\n");
    for (id, traj) in trajs {
        for (k, knot) in traj.effective_knots().iter().enumerate() {
            let _ = write!(out, "{id} {k} ");
            fmt_pose(&mut out, knot);
            out.push('\n');
        }
    }
    out
}

/// Inverse of [`format_trajectories`]; the kind follows the knot count.
pub fn parse_trajectories(path: &Path, text: &str) -> Result<Vec<(u32, TrajectorySpline)>, IoError> {
    let mut knots: BTreeMap<u32, Vec<(usize, Pose, usize)>> = BTreeMap::new();
    for (line, l) in content_lines(text) {
        let f = Fields::new(path, line, l);
        f.exact_len(9)?;
        let id: u32 = f.parse(0)?;
        let idx: usize = f.parse(1)?;
        knots.entry(id).or_default().push((idx, f.pose(2)?, line));
    }
    let mut out = Vec::with_capacity(knots.len());
    for (id, mut list) in knots {
        list.sort_by_key(|(k, _, _)| *k);
        let last_line = list.iter().map(|(_, _, l)| *l).max().unwrap_or(0);
        let err = |message: String| IoError::Parse {
            path: path.to_path_buf(),
            line: last_line,
            message,
        };
        if list.iter().enumerate().any(|(i, (k, _, _))| *k != i) {
            return Err(err(format!("image {id}: knot indices must be 0..n without gaps")));
        }
        let kind = TrajectoryKind::from_knot_count(list.len())
            .ok_or_else(|| err(format!("image {id}: {} knots is neither linear nor cubic", list.len())))?;
        out.push((id, TrajectorySpline::new(kind, list.into_iter().map(|(_, p, _)| p).collect())?));
    }
    Ok(out)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<(u32, TrajectorySpline)>, IoError> {
    parse_trajectories(path, &read_text(path)?)
}

pub fn save_trajectories(path: &Path, trajs: &[(u32, TrajectorySpline)]) -> Result<(), IoError> {
    write_atomic(path, format_trajectories(trajs).as_bytes())
}

/// Scene-level values that COLMAP files do not carry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub scene_extent: f64,
    pub background: [f64; 3],
}

impl DatasetMeta {
    /// Fallback when no meta file exists: the largest side of the point
    /// cloud's bounding box, black background.
    pub fn from_points(points: &[Vector3<f64>]) -> Self {
        let extent = points
            .iter()
            .fold(None::<(Vector3<f64>, Vector3<f64>)>, |acc, p| match acc {
                None => Some((*p, *p)),
                Some((lo, hi)) => Some((lo.inf(p), hi.sup(p))),
            })
            .map(|(lo, hi)| (hi - lo).max())
            .filter(|e| *e > 0.0)
            .unwrap_or(1.0);
        DatasetMeta {
            scene_extent: extent,
            background: [0.0; 3],
        }
    }

    fn to_text(self) -> String {
        let [r, g, b] = self.background;
        format!("scene_extent={:e}\nbackground={r:e},{g:e},{b:e}\n", self.scene_extent)
    }

    fn parse(path: &Path, text: &str) -> Result<Self, IoError> {
        let mut meta = DatasetMeta {
            scene_extent: 1.0,
            background: [0.0; 3],
        };
        for (line, l) in content_lines(text) {
            let err = |m: String| IoError::Parse {
                path: path.to_path_buf(),
                line,
                message: m,
            };
            let (key, value) = l.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            match key.trim() {
                "scene_extent" => {
                    meta.scene_extent = value.trim().parse().ok().filter(|v: &f64| *v > 0.0).ok_or_else(|| err(format!("invalid scene_extent {value:?}")))?
                }
                "background" => meta.background = parse_rgb(value).ok_or_else(|| err(format!("invalid background {value:?}")))?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        Ok(meta)
    }
}

/// `r,g,b` with each component in `[0, 1]`.
pub fn parse_rgb(s: &str) -> Option<[f64; 3]> {
    let v: Vec<f64> = s.split(',').map(|c| c.trim().parse().ok()).collect::<Option<_>>()?;
    let rgb: [f64; 3] = v.try_into().ok()?;
    rgb.iter().all(|c| (0.0..=1.0).contains(c)).then_some(rgb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub trajectories: Vec<TrajectorySpline>,
    pub sharp: Vec<ImageBuffer>,
}

/// A training dataset; all per-view vectors share one order (ascending id).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<TrainView>,
    pub names: Vec<String>,
    pub init_trajectories: Vec<TrajectorySpline>,
    pub points: Vec<Vector3<f64>>,
    pub point_colors: Vec<Vector3<f64>>,
    pub meta: DatasetMeta,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn ids(&self) -> Vec<u32> {
        self.views.iter().map(|v| v.id).collect()
    }

    pub fn from_synth(ds: &SynthDataset) -> Self {
        Dataset {
            views: ds.views.clone(),
            names: ds.ids().iter().map(|id| image_name(*id)).collect(),
            init_trajectories: ds.init_trajectories.clone(),
            points: ds.points.clone(),
            point_colors: ds.point_colors.clone(),
            meta: DatasetMeta {
                scene_extent: ds.scene_extent,
                background: ds.background,
            },
            ground_truth: Some(GroundTruth {
                trajectories: ds.gt_trajectories.clone(),
                sharp: ds.sharp.clone(),
            }),
        }
    }
}

pub fn image_name(id: u32) -> String {
    format!("{id:04}.png")
}

fn by_id(
    path: &Path,
    ids: &[u32],
    trajs: Vec<(u32, TrajectorySpline)>,
) -> Result<Vec<TrajectorySpline>, IoError> {
    let got: Vec<u32> = trajs.iter().map(|(id, _)| *id).collect();
    if got != ids {
        return Err(IoError::Inconsistent {
            path: path.to_path_buf(),
            message: format!("trajectory ids {got:?} do not match image ids {ids:?}"),
        });
    }
    Ok(trajs.into_iter().map(|(_, t)| t).collect())
}

/// Writes the directory layout read by [`load_dataset`].
///
/// `images.txt` carries each image's mid-exposure initial pose, the single
/// pose a structure-from-motion run would report for it.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), IoError> {
    let ids = ds.ids();
    let mut model = ColmapModel {
        points: ds.points.clone(),
        colors: ds.point_colors.clone(),
        ..Default::default()
    };
    for (i, view) in ds.views.iter().enumerate() {
        let camera_id = match model.cameras.iter().find(|(_, k)| **k == view.intrinsics) {
            Some((id, _)) => *id,
            None => {
                let id = model.cameras.len() as u32 + 1;
                model.cameras.insert(id, view.intrinsics);
                id
            }
        };
        model.images.push(ColmapImage {
            id: view.id,
            camera_id,
            pose: ds.init_trajectories[i].pose_at(0.5)?,
            name: ds.names[i].clone(),
        });
        save_png(&dir.join(BLURRY_DIR).join(&ds.names[i]), &view.image)?;
    }
    write_colmap_text(dir, &model)?;
    let pair = |trajs: &[TrajectorySpline]| ids.iter().copied().zip(trajs.iter().cloned()).collect::<Vec<_>>();
    save_trajectories(&dir.join(TRAJ_INIT_FILE), &pair(&ds.init_trajectories))?;
    write_atomic(&dir.join(META_FILE), ds.meta.to_text().as_bytes())?;
    if let Some(gt) = &ds.ground_truth {
        save_trajectories(&dir.join(TRAJ_GT_FILE), &pair(&gt.trajectories))?;
        for (name, img) in ds.names.iter().zip(&gt.sharp) {
            save_png(&dir.join(SHARP_DIR).join(name), img)?;
        }
    }
    Ok(())
}

/// Reads a dataset directory.
///
/// Initial trajectories come from `traj_init.txt` when present, otherwise
/// from the COLMAP poses; either way they are converted to `kind`. Ground
/// truth is loaded when `traj_gt.txt` exists, together with `sharp/`.
pub fn load_dataset(dir: &Path, kind: TrajectoryKind) -> Result<Dataset, IoError> {
    let model = load_colmap_text(dir)?;
    if model.images.is_empty() {
        return Err(IoError::Inconsistent {
            path: dir.join(IMAGES_FILE),
            message: "no images".into(),
        });
    }
    let ids: Vec<u32> = model.images.iter().map(|im| im.id).collect();
    let mut views = Vec::with_capacity(ids.len());
    for im in &model.images {
        let k = *model.intrinsics_of(im).expect("camera ids validated");
        let path = dir.join(BLURRY_DIR).join(&im.name);
        let image = load_png(&path)?;
        if image.width() != k.width || image.height() != k.height {
            return Err(IoError::Inconsistent {
                path,
                message: format!("image is {}x{}, camera says {}x{}", image.width(), image.height(), k.width, k.height),
            });
        }
        views.push(TrainView {
            id: im.id,
            image,
            intrinsics: k,
        });
    }
    let init_path = dir.join(TRAJ_INIT_FILE);
    let init = if init_path.exists() {
        by_id(&init_path, &ids, load_trajectories(&init_path)?)?
    } else {
        model.initial_trajectories(kind).into_iter().map(|(_, t)| t).collect()
    };
    let init_trajectories = init.iter().map(|t| t.to_kind(kind)).collect::<Result<_, _>>()?;
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        DatasetMeta::parse(&meta_path, &read_text(&meta_path)?)?
    } else {
        DatasetMeta::from_points(&model.points)
    };
    let gt_path = dir.join(TRAJ_GT_FILE);
    let ground_truth = if gt_path.exists() {
        let trajectories = by_id(&gt_path, &ids, load_trajectories(&gt_path)?)?;
        let sharp = model
            .images
            .iter()
            .map(|im| load_png(&dir.join(SHARP_DIR).join(&im.name)))
            .collect::<Result<_, _>>()?;
        Some(GroundTruth { trajectories, sharp })
    } else {
        None
    };
    Ok(Dataset {
        views,
        names: model.images.iter().map(|im| im.name.clone()).collect(),
        init_trajectories,
        points: model.points,
        point_colors: model.colors,
        meta,
        ground_truth,
    })
}

/// One camera of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointView {
    pub id: u32,
    pub intrinsics: Intrinsics,
    pub trajectory: TrajectorySpline,
}

/// Scene arrays, trajectories and iteration counter of a training run.
///
/// The text form prints every float in shortest round-trip notation, so
/// equal states produce byte-identical files and reloading is lossless for
/// everything except quaternions, which are renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub background: [f64; 3],
    pub scene: GaussianScene,
    pub views: Vec<CheckpointView>,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC}\niteration {}\n", self.iteration);
        let [r, g, b] = self.background;
        let _ = writeln!(out, "background {r:e} {g:e} {b:e}");
        let s = &self.scene;
        let _ = writeln!(out, "gaussians {}", s.len());
        for i in 0..s.len() {
            let vals = s.positions[i]
                .iter()
                .chain(&s.log_scales[i])
                .chain(&s.rotations[i])
                .chain(std::iter::once(&s.raw_opacities[i]))
                .chain(&s.colors[i])
                .chain(std::iter::once(&s.grad_accum[i]));
            out.push('g');
            for v in vals {
                let _ = write!(out, " {v:e}");
            }
            let _ = writeln!(out, " {}", s.grad_count[i]);
        }
        let _ = writeln!(out, "views {}", self.views.len());
        for v in &self.views {
            let k = &v.intrinsics;
            let _ = writeln!(
                out,
                "view {} {} {:e} {:e} {:e} {:e} {} {}",
                v.id,
                v.trajectory.kind().name(),
                k.fx,
                k.fy,
                k.cx,
                k.cy,
                k.width,
                k.height
            );
            for knot in v.trajectory.effective_knots() {
                out.push_str("knot ");
                fmt_pose(&mut out, &knot);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, IoError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| IoError::Parse {
                path: path.to_path_buf(),
                line: text.lines().count(),
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let (line, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Fields::new(path, line, magic).err(format!("not a checkpoint (expected header {CHECKPOINT_MAGIC})")));
        }
        let mut ckpt = Checkpoint {
            iteration: 0,
            background: [0.0; 3],
            scene: GaussianScene::new(),
            views: Vec::new(),
        };
        let (line, l) = next("iteration")?;
        let f = tag_fields(path, line, l, "iteration", 2)?;
        ckpt.iteration = f.parse(1)?;
        let (line, l) = next("background")?;
        let f = tag_fields(path, line, l, "background", 4)?;
        ckpt.background = f.f64s::<3>(1)?;
        let (line, l) = next("gaussians")?;
        let n: usize = tag_fields(path, line, l, "gaussians", 2)?.parse(1)?;
        for _ in 0..n {
            let (line, l) = next("gaussian")?;
            let f = tag_fields(path, line, l, "g", 17)?;
            let v = f.f64s::<15>(1)?;
            let s = &mut ckpt.scene;
            s.positions.push([v[0], v[1], v[2]]);
            s.log_scales.push([v[3], v[4], v[5]]);
            s.rotations.push([v[6], v[7], v[8], v[9]]);
            s.raw_opacities.push(v[10]);
            s.colors.push([v[11], v[12], v[13]]);
            s.grad_accum.push(v[14]);
            s.grad_count.push(f.parse(16)?);
        }
        let (line, l) = next("views")?;
        let n: usize = tag_fields(path, line, l, "views", 2)?.parse(1)?;
        for _ in 0..n {
            let (line, l) = next("view")?;
            let f = tag_fields(path, line, l, "view", 9)?;
            let kind: TrajectoryKind = f.str(2)?.parse().map_err(|_| f.err("unknown trajectory kind"))?;
            let [fx, fy, cx, cy] = f.f64s::<4>(3)?;
            let intrinsics = Intrinsics::new(fx, fy, cx, cy, f.parse(7)?, f.parse(8)?);
            let mut knots = Vec::with_capacity(kind.knot_count());
            for _ in 0..kind.knot_count() {
                let (line, l) = next("knot")?;
                knots.push(tag_fields(path, line, l, "knot", 8)?.pose(1)?);
            }
            ckpt.views.push(CheckpointView {
                id: f.parse(1)?,
                intrinsics,
                trajectory: TrajectorySpline::new(kind, knots)?,
            });
        }
        if let Some((line, l)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(Fields::new(path, line, l).err("trailing content"));
        }
        if let Err(m) = ckpt.scene.check_invariants() {
            return Err(IoError::Inconsistent {
                path: path.to_path_buf(),
                message: m,
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::parse(path, &read_text(path)?)
    }
}

fn tag_fields<'a>(path: &'a Path, line: usize, l: &'a str, tag: &str, len: usize) -> Result<Fields<'a>, IoError> {
    let f = Fields::new(path, line, l);
    if f.tokens.first() != Some(&tag) {
        return Err(f.err(format!("expected `{tag}` line")));
    }
    f.exact_len(len)?;
    Ok(f)
}
