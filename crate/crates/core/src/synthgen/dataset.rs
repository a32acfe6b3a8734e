//! Labelled example pools, their on-disk layout and manifest-driven
//! regeneration.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ViewAngles;
use crate::objective::SoftLabel;
use crate::tensor::{read_tnt, write_tnt};

use super::mesh::ObjectKind;
use super::{derive_seed, make_background, make_example, sample_view, GenConfig, LabeledExample};

const HEADER: &str = "templatenet-dataset v1";

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub object: ObjectKind,
    pub n_fg: usize,
    pub n_bg: usize,
    pub seed: u64,
    pub gen: GenConfig,
}

impl DatasetSpec {
    pub fn new(object: ObjectKind, n_fg: usize, n_bg: usize, seed: u64) -> Self {
        Self {
            object,
            n_fg,
            n_bg,
            seed,
            gen: GenConfig::default(),
        }
    }

    /// Every setting as `(key, value)` text, in manifest order.
    pub fn settings(&self) -> Vec<(String, String)> {
        let g = &self.gen;
        let c = &g.clutter;
        let lib: Vec<&str> = c.library.iter().map(|k| k.name()).collect();
        vec![
            ("object".into(), self.object.name().into()),
            ("n_fg".into(), self.n_fg.to_string()),
            ("n_bg".into(), self.n_bg.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("patch_size".into(), g.patch_size.to_string()),
            ("scale".into(), format!("{:?}", g.scale)),
            ("distance_min".into(), format!("{:?}", g.distance.0)),
            ("distance_max".into(), format!("{:?}", g.distance.1)),
            ("max_shift".into(), g.max_shift.to_string()),
            ("clutter".into(), c.enabled.to_string()),
            ("floor".into(), c.floor.to_string()),
            ("clutter_min".into(), c.count.0.to_string()),
            ("clutter_max".into(), c.count.1.to_string()),
            ("library".into(), lib.join(",")),
            ("bg_on_object".into(), format!("{:?}", c.bg_on_object)),
        ]
    }

    pub fn apply_setting(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::format("dataset manifest", format!("{} = {}", key, value));
        macro_rules! parse {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        let g = &mut self.gen;
        match key {
            "object" => self.object = value.parse()?,
            "n_fg" => self.n_fg = parse!(),
            "n_bg" => self.n_bg = parse!(),
            "seed" => self.seed = parse!(),
            "patch_size" => g.patch_size = parse!(),
            "scale" => g.scale = parse!(),
            "distance_min" => g.distance.0 = parse!(),
            "distance_max" => g.distance.1 = parse!(),
            "max_shift" => g.max_shift = parse!(),
            "clutter" => g.clutter.enabled = parse!(),
            "floor" => g.clutter.floor = parse!(),
            "clutter_min" => g.clutter.count.0 = parse!(),
            "clutter_max" => g.clutter.count.1 = parse!(),
            "library" => {
                g.clutter.library = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(str::parse).collect::<Result<_>>()?
                }
            }
            "bg_on_object" => g.clutter.bg_on_object = parse!(),
            _ => return Err(bad()),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Shuffled pool.
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.examples.iter().filter(|e| e.is_foreground()).count()
    }

    /// Writes `manifest.txt` plus one TNT1 file per example.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let data_dir = dir.join("examples");
        fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        let mut m = String::from(HEADER);
        m.push('\n');
        for (k, v) in self.spec.settings() {
            m.push_str(&format!("{} = {}\n", k, v));
        }
        for (id, ex) in self.examples.iter().enumerate() {
            let file = format!("examples/{:06}.tnt", id);
            write_tnt(&dir.join(&file), &ex.input)?;
            let view = match ex.view {
                Some(v) => format!("fg {:?} {:?} {:?}", v.yaw, v.pitch, v.roll),
                None => "bg - - -".into(),
            };
            let label: Vec<String> = ex.label.to_vec().iter().map(|x| format!("{:?}", x)).collect();
            m.push_str(&format!("example {} {} {} {} {}\n", id, ex.seed, view, file, label.join(" ")));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, m).map_err(|e| Error::io(&path, e))
    }

    /// Reads the manifest and every example file.
    pub fn load(dir: &Path) -> Result<Self> {
        let (spec, rows) = read_manifest(dir)?;
        let mut examples = Vec::with_capacity(rows.len());
        for row in rows {
            examples.push(LabeledExample {
                input: read_tnt(&dir.join(&row.file))?,
                label: row.label,
                view: row.view,
                seed: row.seed,
            });
        }
        Ok(Self { spec, examples })
    }

    /// Rebuilds the dataset from its manifest alone.
    pub fn regenerate(dir: &Path) -> Result<Self> {
        let (spec, _) = read_manifest(dir)?;
        make_dataset(&spec)
    }
}

struct Row {
    seed: u64,
    view: Option<ViewAngles>,
    file: String,
    label: SoftLabel,
}

fn read_manifest(dir: &Path) -> Result<(DatasetSpec, Vec<Row>)> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format("dataset manifest", "missing header"));
    }
    let mut spec = DatasetSpec::new(ObjectKind::Box, 0, 0, 0);
    let mut rows = Vec::new();
    for line in lines {
        let bad = || Error::format("dataset manifest", line.to_string());
        if let Some(rest) = line.strip_prefix("example ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 7 + 19 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let view = match f[2] {
                "fg" => Some(ViewAngles::new(num(f[3])?, num(f[4])?, num(f[5])?)),
                "bg" => None,
                _ => return Err(bad()),
            };
            let label: Vec<f64> = f[7..].iter().map(|s| num(s)).collect::<Result<_>>()?;
            rows.push(Row {
                seed: f[1].parse().map_err(|_| bad())?,
                view,
                file: f[6].to_string(),
                label: SoftLabel::from_slice(&label)?,
            });
        } else if let Some((k, v)) = line.split_once(" = ") {
            spec.apply_setting(k.trim(), v.trim())?;
        } else if !line.trim().is_empty() {
            return Err(bad());
        }
    }
    Ok((spec, rows))
}

/// Generates `n_fg` foreground and `n_bg` background examples in parallel
/// and shuffles them. The target never appears among the distractors.
/// Output depends only on the spec.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n_fg == 0 || spec.n_bg == 0 {
        return Err(Error::Config("datasets need at least one foreground and one background example".into()));
    }
    let mut gen = spec.gen.clone();
    gen.clutter = gen.clutter.excluding(spec.object);
    gen.validate()?;
    let object = Arc::new(spec.object.mesh());
    let grid = gen.pose_grid();
    let total = spec.n_fg + spec.n_bg;
    let mut examples = (0..total)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(spec.seed, i as u64);
            if i < spec.n_fg {
                let view = sample_view(&gen.view_range, &mut ChaCha8Rng::seed_from_u64(seed));
                make_example(&object, view, &gen, &grid, seed)
            } else {
                make_background(&gen, seed)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok(Dataset {
        spec: spec.clone(),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{BACKGROUND_CLASS, BG_INDEX};

    fn small() -> DatasetSpec {
        let mut s = DatasetSpec::new(ObjectKind::Box, 3, 2, 11);
        s.gen.patch_size = 32;
        s
    }

    #[test]
    fn counts_and_labels() {
        let d = make_dataset(&small()).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.foreground_count(), 3);
        for ex in &d.examples {
            ex.label.validate().unwrap();
            if !ex.is_foreground() {
                assert_eq!(ex.label.fg[BG_INDEX], 1.0);
                assert_eq!(ex.label.pose[BACKGROUND_CLASS], 1.0);
            }
        }
    }

    #[test]
    fn save_load_and_regenerate_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_dataset(&small()).unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
        assert_eq!(Dataset::regenerate(dir.path()).unwrap(), d);
    }

    #[test]
    fn empty_classes_are_rejected() {
        assert!(make_dataset(&DatasetSpec::new(ObjectKind::Box, 0, 2, 1)).is_err());
    }
}
