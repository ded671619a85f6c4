use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::space::{CompositionSpace, Pair};
use super::world::{Split, SplitTag, World};
use crate::encoders::SyntheticWorldConfig;
use crate::error::{Error, Result};
use crate::tensor::vptf;

pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    format_version: u32,
    attributes: Vec<String>,
    objects: Vec<String>,
    seen_pairs: Vec<Pair>,
    unseen_pairs: Vec<Pair>,
    config: SyntheticWorldConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelFile {
    attr_idx: Vec<usize>,
    obj_idx: Vec<usize>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn save_world(dir: &Path, world: &World) -> Result<()> {
    world.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let space = SpaceFile {
        format_version: WORLD_FORMAT_VERSION,
        attributes: world.space.attributes().to_vec(),
        objects: world.space.objects().to_vec(),
        seen_pairs: world.space.seen().to_vec(),
        unseen_pairs: world.space.unseen().to_vec(),
        config: world.config,
    };
    let mut text = serde_json::to_string_pretty(&space)?;
    text.push('\n');
    write_bytes(&dir.join("space.json"), text.as_bytes())?;
    for tag in SplitTag::ALL {
        let split = world.split(tag);
        vptf::write_file(&dir.join(format!("{tag}.vptf")), &split.features)?;
        let labels = LabelFile {
            attr_idx: split.labels.iter().map(|p| p.0).collect(),
            obj_idx: split.labels.iter().map(|p| p.1).collect(),
        };
        let mut text = serde_json::to_string(&labels)?;
        text.push('\n');
        write_bytes(&dir.join(format!("{tag}.labels.json")), text.as_bytes())?;
    }
    Ok(())
}

pub fn load_world(dir: &Path) -> Result<World> {
    let path = dir.join("space.json");
    let space: SpaceFile = serde_json::from_str(&read_string(&path)?).map_err(|e| json_error(&path, e))?;
    if space.format_version != WORLD_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {}",
            path.display(),
            space.format_version
        )));
    }
    let comp = CompositionSpace::new(space.attributes, space.objects, space.seen_pairs, space.unseen_pairs)?;
    let mut splits = Vec::with_capacity(3);
    for tag in SplitTag::ALL {
        let features = vptf::read_file::<f32>(&dir.join(format!("{tag}.vptf")))?;
        let lpath = dir.join(format!("{tag}.labels.json"));
        let labels: LabelFile = serde_json::from_str(&read_string(&lpath)?).map_err(|e| json_error(&lpath, e))?;
        if labels.attr_idx.len() != labels.obj_idx.len() {
            return Err(Error::Format(format!(
                "{}: {} attribute labels but {} object labels",
                lpath.display(),
                labels.attr_idx.len(),
                labels.obj_idx.len()
            )));
        }
        let labels = labels.attr_idx.into_iter().zip(labels.obj_idx).map(|(a, o)| Pair(a, o)).collect();
        splits.push(Split { tag, features, labels });
    }
    let mut it = splits.into_iter();
    let world = World {
        space: comp,
        config: space.config,
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    };
    world.validate()?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::generate_world;

    fn tiny_world() -> World {
        let cfg = SyntheticWorldConfig {
            n_attrs: 2,
            n_objs: 3,
            raw_dim: 8,
            latent_dim: 2,
            samples_per_pair: 5,
            unseen_frac: 0.3,
            ..Default::default()
        };
        generate_world(&cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let w = tiny_world();
        save_world(dir.path(), &w).unwrap();
        let back = load_world(dir.path()).unwrap();
        assert_eq!(back, w);
        assert!(back.train.features.bit_eq(&w.train.features));
    }

    #[test]
    fn out_of_range_object_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_world(dir.path(), &tiny_world()).unwrap();
        let p = dir.path().join("val.labels.json");
        let mut labels: LabelFile = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        labels.obj_idx[0] = 7;
        fs::write(&p, serde_json::to_string(&labels).unwrap()).unwrap();
        let err = load_world(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn unseen_training_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let w = tiny_world();
        save_world(dir.path(), &w).unwrap();
        let u = w.space.unseen()[0];
        let p = dir.path().join("train.labels.json");
        let mut labels: LabelFile = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        labels.attr_idx[0] = u.0;
        labels.obj_idx[0] = u.1;
        fs::write(&p, serde_json::to_string(&labels).unwrap()).unwrap();
        assert!(load_world(dir.path()).unwrap_err().to_string().contains("unseen"));
    }

    #[test]
    fn truncated_features_and_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_world(dir.path(), &tiny_world()).unwrap();
        let p = dir.path().join("test.vptf");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_world(dir.path()).unwrap_err().to_string().contains("truncated"));

        fs::write(&p, &bytes).unwrap();
        let lp = dir.path().join("test.labels.json");
        let mut labels: LabelFile = serde_json::from_str(&fs::read_to_string(&lp).unwrap()).unwrap();
        labels.attr_idx.pop();
        labels.obj_idx.pop();
        fs::write(&lp, serde_json::to_string(&labels).unwrap()).unwrap();
        assert!(load_world(dir.path()).unwrap_err().to_string().contains("labels"));
    }
}
