use std::path::{Path, PathBuf};

use image::{ColorType, ImageDecoder, ImageReader};
use serde::{Deserialize, Serialize};

use super::{
    normalize_category, read_ply, require_file, CameraIntrinsics, CorpusError, FrameRecord,
    ObjectInstance, Pose, SceneRecord,
};

/// The JSON scene manifest as stored on disk. Asset paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scene_id: String,
    pub pose_convention: String,
    pub points: PathBuf,
    pub instances: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superpoints: Option<PathBuf>,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub frame_id: i64,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub pose_c2w: Pose,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceEntry {
    instance_id: i64,
    category: String,
    point_indices: Vec<u32>,
}

fn parse_json<T: serde::de::DeserializeOwned>(
    path: &Path,
    what: &str,
) -> Result<T, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let field = if at == "." { what.to_string() } else { format!("{what}.{at}") };
        CorpusError::schema(field, e.into_inner().to_string())
    })
}

fn probe_image(path: &Path) -> Result<((u32, u32), ColorType), CorpusError> {
    let image_err = |source| CorpusError::Image {
        path: path.to_path_buf(),
        source,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| CorpusError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CorpusError::io(path, e))?;
    let decoder = reader.into_decoder().map_err(image_err)?;
    Ok((decoder.dimensions(), decoder.color_type()))
}

/// Loads and validates one scene manifest.
pub fn load_manifest(manifest_path: &Path) -> Result<SceneRecord, CorpusError> {
    require_file("manifest", manifest_path)?;
    let manifest: Manifest = parse_json(manifest_path, "manifest")?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    if manifest.pose_convention != "c2w" {
        return Err(CorpusError::schema(
            "pose_convention",
            format!("expected \"c2w\", found {:?}", manifest.pose_convention),
        ));
    }

    let points_path = base.join(&manifest.points);
    require_file("points", &points_path)?;
    let points = read_ply(&points_path)?;

    let instances_path = base.join(&manifest.instances);
    require_file("instances", &instances_path)?;
    let entries: Vec<InstanceEntry> = parse_json(&instances_path, "instances")?;
    let instances = entries
        .into_iter()
        .map(|e| {
            let mut idx = e.point_indices;
            idx.sort_unstable();
            ObjectInstance {
                instance_id: e.instance_id,
                category: normalize_category(&e.category),
                point_indices: idx,
            }
        })
        .collect();

    let superpoint_ids = match &manifest.superpoints {
        Some(rel) => {
            let p = base.join(rel);
            require_file("superpoints", &p)?;
            Some(parse_json::<Vec<i64>>(&p, "superpoints")?)
        }
        None => None,
    };

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (k, f) in manifest.frames.iter().enumerate() {
        let rgb_path = base.join(&f.rgb);
        let depth_path = base.join(&f.depth);
        let rgb_field = format!("frames[{k}].rgb");
        let depth_field = format!("frames[{k}].depth");
        require_file(&rgb_field, &rgb_path)?;
        require_file(&depth_field, &depth_path)?;

        let want = (f.intrinsics.width, f.intrinsics.height);
        let (rgb_dims, _) = probe_image(&rgb_path)?;
        if rgb_dims != want {
            return Err(CorpusError::invariant(
                rgb_field,
                format!("image is {rgb_dims:?}, intrinsics say {want:?}"),
            ));
        }
        let (depth_dims, depth_color) = probe_image(&depth_path)?;
        if depth_color != ColorType::L16 {
            return Err(CorpusError::schema(
                "depth bit depth",
                format!("{} is {depth_color:?}, expected 16-bit grayscale", depth_path.display()),
            ));
        }
        if depth_dims != want {
            return Err(CorpusError::invariant(
                depth_field,
                format!("image is {depth_dims:?}, intrinsics say {want:?}"),
            ));
        }
        frames.push(FrameRecord {
            frame_id: f.frame_id,
            rgb_path,
            depth_path,
            intrinsics: f.intrinsics,
            pose_c2w: f.pose_c2w,
        });
    }

    let scene = SceneRecord {
        scene_id: manifest.scene_id,
        points,
        instances,
        frames,
        superpoint_ids,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes `manifest.json`, the PLY cloud and the instance table into `dir`.
/// Frame images must already exist at the paths recorded in `manifest`.
pub fn write_manifest(
    dir: &Path,
    manifest: &Manifest,
    scene: &SceneRecord,
) -> Result<PathBuf, CorpusError> {
    super::write_ply(&dir.join(&manifest.points), &scene.points)?;
    let entries: Vec<InstanceEntry> = scene
        .instances
        .iter()
        .map(|i| InstanceEntry {
            instance_id: i.instance_id,
            category: i.category.clone(),
            point_indices: i.point_indices.clone(),
        })
        .collect();
    write_json(&dir.join(&manifest.instances), &entries)?;
    if let (Some(rel), Some(ids)) = (&manifest.superpoints, &scene.superpoint_ids) {
        write_json(&dir.join(rel), ids)?;
    }
    let path = dir.join("manifest.json");
    write_json(&path, manifest)?;
    Ok(path)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest types serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CorpusError::io(path, e))
}
