//! Dataset directory layout: `images/<id>.nii.gz` with matching
//! `labels/<id>.nii.gz` (plain `.nii` also accepted).

use std::path::{Path, PathBuf};

use super::io::{write_image, write_labels};
use super::preprocess::{normalize_intensity, resample_image, resample_labels};
use super::volume::{ImageVolume, LabelVolume};
use crate::config::DataConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseFiles {
    pub id: String,
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
}

fn case_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .map(str::to_string)
}

fn find_volume(dir: &Path, id: &str) -> Option<PathBuf> {
    [format!("{id}.nii.gz"), format!("{id}.nii")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// Cases under `root`, sorted by id.
pub fn list_cases(root: impl AsRef<Path>) -> Result<Vec<CaseFiles>> {
    let root = root.as_ref();
    let images = root.join("images");
    let entries = std::fs::read_dir(&images).map_err(|e| Error::Dataset {
        path: images.clone(),
        msg: e.to_string(),
    })?;
    let mut cases = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if let Some(id) = case_id(&path) {
            let labels = find_volume(&root.join("labels"), &id);
            cases.push(CaseFiles {
                id,
                image: path,
                labels,
            });
        }
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(cases)
}

/// Writes one case in the dataset layout, creating directories as needed.
pub fn write_case(
    root: impl AsRef<Path>,
    id: &str,
    image: &ImageVolume,
    labels: &LabelVolume,
) -> Result<CaseFiles> {
    let root = root.as_ref();
    let (idir, ldir) = (root.join("images"), root.join("labels"));
    for d in [&idir, &ldir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let image_path = idir.join(format!("{id}.nii.gz"));
    let label_path = ldir.join(format!("{id}.nii.gz"));
    write_image(&image_path, image)?;
    write_labels(&label_path, labels)?;
    Ok(CaseFiles {
        id: id.to_string(),
        image: image_path,
        labels: Some(label_path),
    })
}

/// Resamples to the target spacing and applies the intensity window.
pub fn preprocess_image(image: &ImageVolume, cfg: &DataConfig) -> Result<ImageVolume> {
    normalize_intensity(
        &resample_image(image, cfg.target_spacing)?,
        cfg.intensity_window,
    )
}

pub fn preprocess_labels(labels: &LabelVolume, cfg: &DataConfig) -> Result<LabelVolume> {
    resample_labels(labels, cfg.target_spacing)
}
