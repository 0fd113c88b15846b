//! Synthetic phantom dataset: generation, on-disk layout, manifest.
//!
//! ```text
//! data/manifest.csv
//! data/<split>/<slice>_image.rsf
//! data/<split>/<slice>_full.rsf
//! data/<split>/<slice>_low_drf<d>.rsf
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::rsf::{read_image, read_sinogram, write_image, write_sinogram};
use crate::dose::{simulate_low_dose, DoseConfig};
use crate::error::{RedError, Result};
use crate::tomo::{forward_project, make_phantom, Image, PhantomSpec, ProjectionGeometry, Sinogram};

pub const MANIFEST_HEADER: &str = "split,slice,drf,phantom_seed,dose_seed,image,full,low";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Self::Train => 1,
            Self::Test => 2,
        }
    }
}

/// splitmix64 finalizer folded over `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

pub fn drf_label(drf: f64) -> String {
    format!("drf{drf}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowDose {
    pub drf: f64,
    pub dose_seed: u64,
    pub sino: Sinogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceData {
    pub split: Split,
    pub index: usize,
    pub phantom_seed: u64,
    pub image: Image,
    pub full: Sinogram,
    pub low: Vec<LowDose>,
}

impl SliceData {
    pub fn name(&self) -> String {
        format!("{}_{:04}", self.split.as_str(), self.index)
    }

    pub fn low_at(&self, drf: f64) -> Option<&Sinogram> {
        self.low.iter().find(|l| l.drf == drf).map(|l| &l.sino)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<SliceData>,
    pub test: Vec<SliceData>,
}

pub fn geometry(cfg: &ExperimentConfig) -> Result<ProjectionGeometry> {
    ProjectionGeometry::parallel(cfg.data.image_size, cfg.data.n_angles, cfg.data.n_bins)
}

/// One slice; every random quantity is a function of `(seed, split, index, drf)`.
pub fn make_slice(
    cfg: &ExperimentConfig,
    geom: &ProjectionGeometry,
    split: Split,
    index: usize,
    drfs: &[f64],
) -> Result<SliceData> {
    let phantom_seed = derive_seed(cfg.seed, &[split.tag(), index as u64]);
    let spec = PhantomSpec::random(&mut ChaCha8Rng::seed_from_u64(phantom_seed));
    let n = cfg.data.image_size;
    let image = make_phantom(&spec, n, n)?;
    let full = forward_project(&image, geom)?;
    let low = drfs
        .iter()
        .map(|&drf| {
            let dose_seed = derive_seed(phantom_seed, &[drf.to_bits()]);
            let dose = DoseConfig::new(drf, cfg.data.count_scale, dose_seed)?;
            Ok(LowDose {
                drf,
                dose_seed,
                sino: simulate_low_dose(&full, &dose)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SliceData {
        split,
        index,
        phantom_seed,
        image,
        full,
        low,
    })
}

/// Generates both splits in memory at the listed dose levels.
pub fn generate(cfg: &ExperimentConfig, drfs: &[f64]) -> Result<Dataset> {
    let geom = geometry(cfg)?;
    let split = |s: Split, n: usize| {
        (0..n)
            .into_par_iter()
            .map(|i| make_slice(cfg, &geom, s, i, drfs))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Dataset {
        train: split(Split::Train, cfg.data.n_train)?,
        test: split(Split::Test, cfg.data.n_test)?,
    })
}

fn rel_paths(s: &SliceData, drf: f64) -> [String; 3] {
    let dir = s.split.as_str();
    let name = format!("{:04}", s.index);
    [
        format!("{dir}/{name}_image.rsf"),
        format!("{dir}/{name}_full.rsf"),
        format!("{dir}/{name}_low_{}.rsf", drf_label(drf)),
    ]
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| RedError::io(path, e))
}

/// Writes the dataset under `data_dir` and returns the manifest text.
pub fn write_dataset(data_dir: &Path, ds: &Dataset) -> Result<String> {
    for s in [Split::Train, Split::Test] {
        create_dir(&data_dir.join(s.as_str()))?;
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for s in ds.train.iter().chain(&ds.test) {
        let [image, full, _] = rel_paths(s, 0.0);
        write_image(&data_dir.join(&image), &s.image)?;
        write_sinogram(&data_dir.join(&full), &s.full)?;
        for l in &s.low {
            let [_, _, low] = rel_paths(s, l.drf);
            write_sinogram(&data_dir.join(&low), &l.sino)?;
            writeln!(
                manifest,
                "{},{},{},{},{},{image},{full},{low}",
                s.split.as_str(),
                s.index,
                l.drf,
                s.phantom_seed,
                l.dose_seed
            )
            .unwrap();
        }
    }
    let path = data_dir.join("manifest.csv");
    std::fs::write(&path, &manifest).map_err(|e| RedError::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub split: Split,
    pub slice: usize,
    pub drf: f64,
    pub phantom_seed: u64,
    pub dose_seed: u64,
    pub image: PathBuf,
    pub full: PathBuf,
    pub low: PathBuf,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(RedError::Format("manifest header mismatch".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(no, line)| {
            let bad = || RedError::Format(format!("manifest line {}: '{line}'", no + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let split = match f[0] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad()),
            };
            Ok(ManifestRow {
                split,
                slice: f[1].parse().map_err(|_| bad())?,
                drf: f[2].parse().map_err(|_| bad())?,
                phantom_seed: f[3].parse().map_err(|_| bad())?,
                dose_seed: f[4].parse().map_err(|_| bad())?,
                image: f[5].into(),
                full: f[6].into(),
                low: f[7].into(),
            })
        })
        .collect()
}

/// Reads the manifest under `data_dir`; a missing file is a missing prerequisite.
pub fn read_manifest(data_dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = data_dir.join("manifest.csv");
    if !path.is_file() {
        return Err(RedError::MissingPrerequisite(format!(
            "no dataset manifest at {} (run generate first)",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| RedError::io(&path, e))?;
    parse_manifest(&text)
}

/// Loads the slices of `split` at the listed dose levels (all levels when
/// `drfs` is `None`), in slice order.
pub fn load_split(data_dir: &Path, split: Split, drfs: Option<&[f64]>) -> Result<Vec<SliceData>> {
    let rows = read_manifest(data_dir)?;
    let mut slices: Vec<usize> = rows.iter().filter(|r| r.split == split).map(|r| r.slice).collect();
    slices.sort_unstable();
    slices.dedup();
    slices
        .into_par_iter()
        .map(|index| {
            let mine: Vec<&ManifestRow> = rows
                .iter()
                .filter(|r| r.split == split && r.slice == index)
                .filter(|r| drfs.is_none_or(|d| d.contains(&r.drf)))
                .collect();
            if let Some(want) = drfs {
                if let Some(d) = want.iter().find(|d| !mine.iter().any(|r| r.drf == **d)) {
                    return Err(RedError::MissingPrerequisite(format!(
                        "{} slice {index} has no low-dose sinogram at DRF {d}",
                        split.as_str()
                    )));
                }
            }
            let first = rows
                .iter()
                .find(|r| r.split == split && r.slice == index)
                .expect("slice listed");
            let low = mine
                .iter()
                .map(|r| {
                    Ok(LowDose {
                        drf: r.drf,
                        dose_seed: r.dose_seed,
                        sino: read_sinogram(&data_dir.join(&r.low))?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(SliceData {
                split,
                index,
                phantom_seed: first.phantom_seed,
                image: read_image(&data_dir.join(&first.image))?,
                full: read_sinogram(&data_dir.join(&first.full))?,
                low,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.image_size = 16;
        c.data.n_angles = 12;
        c.data.n_bins = 24;
        c.data.n_train = 3;
        c.data.n_test = 2;
        c.data.drfs = vec![4.0, 20.0];
        c
    }

    #[test]
    fn manifest_counts_and_round_trip() {
        let cfg = small();
        let ds = generate(&cfg, &cfg.data.drfs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let text = write_dataset(dir.path(), &ds).unwrap();
        let rows = parse_manifest(&text).unwrap();
        assert_eq!(rows.len(), (3 + 2) * 2);
        let back = load_split(dir.path(), Split::Test, None).unwrap();
        assert_eq!(back, ds.test);
        let only = load_split(dir.path(), Split::Train, Some(&[20.0])).unwrap();
        assert_eq!(only[1].low, vec![ds.train[1].low[1].clone()]);
        assert!(matches!(
            load_split(dir.path(), Split::Train, Some(&[100.0])),
            Err(RedError::MissingPrerequisite(_))
        ));
    }

    #[test]
    fn empty_dataset_has_header_only_manifest() {
        let mut cfg = small();
        cfg.data.n_train = 0;
        cfg.data.n_test = 0;
        let dir = tempfile::tempdir().unwrap();
        let text = write_dataset(dir.path(), &generate(&cfg, &cfg.data.drfs).unwrap()).unwrap();
        assert_eq!(text, format!("{MANIFEST_HEADER}\n"));
        assert!(parse_manifest(&text).unwrap().is_empty());
    }

    #[test]
    fn slices_depend_only_on_their_seeds() {
        let cfg = small();
        let geom = geometry(&cfg).unwrap();
        let a = make_slice(&cfg, &geom, Split::Train, 2, &[20.0]).unwrap();
        let b = make_slice(&cfg, &geom, Split::Train, 2, &[4.0, 20.0]).unwrap();
        assert_eq!(a.low[0], b.low[1]);
        let c = make_slice(&cfg, &geom, Split::Test, 2, &[20.0]).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn missing_manifest_is_a_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(RedError::MissingPrerequisite(_))));
    }

    #[test]
    fn seed_derivation_separates_parts() {
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_ne!(derive_seed(0, &[1]), derive_seed(1, &[1]));
        assert_eq!(derive_seed(5, &[7]), derive_seed(5, &[7]));
    }
}
