//! Procedural datasets and on-disk formats.

pub mod container;
pub mod dataset;
pub mod pgm;

use std::path::Path;

pub use container::{NamedTensor, TensorFile};
pub use dataset::{generate, generate_abundant, DatasetSpec, ProceduralDataset, Split};

use crate::error::{Error, Result};

fn split_tensors(file: &mut TensorFile, prefix: &str, split: &Split, pixels: usize) {
    file.push(NamedTensor::from_f64(
        format!("{prefix}/images"),
        vec![split.len(), pixels],
        split.images.iter().flatten().copied(),
    ));
    file.push(NamedTensor::from_f64(
        format!("{prefix}/labels"),
        vec![split.len()],
        split.labels.iter().map(|&l| l as f64),
    ));
    file.push(NamedTensor::from_f64(
        format!("{prefix}/contexts"),
        vec![split.len()],
        split.contexts.iter().map(|&c| c as f64),
    ));
}

fn read_split(file: &TensorFile, prefix: &str) -> Result<Split> {
    let images = file.get(&format!("{prefix}/images"))?;
    let labels = file.get(&format!("{prefix}/labels"))?;
    let contexts = file.get(&format!("{prefix}/contexts"))?;
    let [n, d] = images.shape[..] else {
        return Err(Error::Container(format!("{prefix}/images must be 2-D")));
    };
    if labels.data.len() != n || contexts.data.len() != n {
        return Err(Error::Container(format!("{prefix}: inconsistent lengths")));
    }
    Ok(Split {
        images: images.to_f64().chunks(d.max(1)).take(n).map(<[f64]>::to_vec).collect(),
        labels: labels.data.iter().map(|&v| v as usize).collect(),
        contexts: contexts.data.iter().map(|&v| v as usize).collect(),
    })
}

/// Human-readable spec text written next to the dataset container.
pub fn spec_text(spec: &DatasetSpec) -> String {
    let overrides: Vec<String> = spec
        .shot_overrides
        .iter()
        .map(|(c, s)| format!("{c}:{s}"))
        .collect();
    format!(
        "classes = {}\nshots = {}\ncontexts = {}\nresolution = {}\ntest_per_class = {}\nseed = {}\nshot_overrides = {}\n",
        spec.classes,
        spec.shots,
        spec.contexts,
        spec.resolution,
        spec.test_per_class,
        spec.seed,
        overrides.join(",")
    )
}

/// Stores the dataset in `path`; images are stored as float32.
pub fn save_dataset(ds: &ProceduralDataset, path: &Path) -> Result<()> {
    let mut file = TensorFile::default();
    let s = &ds.spec;
    file.set_meta("classes", s.classes);
    file.set_meta("shots", s.shots);
    file.set_meta("contexts", s.contexts);
    file.set_meta("resolution", s.resolution);
    file.set_meta("test_per_class", s.test_per_class);
    file.set_meta("seed", s.seed);
    let overrides: Vec<String> = s.shot_overrides.iter().map(|(c, n)| format!("{c}:{n}")).collect();
    file.set_meta("shot_overrides", overrides.join(","));
    split_tensors(&mut file, "train", &ds.train, s.pixels());
    split_tensors(&mut file, "test", &ds.test, s.pixels());
    file.write(path)?;
    std::fs::write(path.with_extension("spec.txt"), spec_text(s))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ProceduralDataset> {
    let file = TensorFile::read(path)?;
    let mut shot_overrides = std::collections::BTreeMap::new();
    for pair in file.meta("shot_overrides")?.split(',').filter(|p| !p.is_empty()) {
        let (c, n) = pair
            .split_once(':')
            .and_then(|(c, n)| Some((c.parse().ok()?, n.parse().ok()?)))
            .ok_or_else(|| Error::Container(format!("bad shot override `{pair}`")))?;
        shot_overrides.insert(c, n);
    }
    let spec = DatasetSpec {
        classes: file.meta_parse("classes")?,
        shots: file.meta_parse("shots")?,
        contexts: file.meta_parse("contexts")?,
        resolution: file.meta_parse("resolution")?,
        test_per_class: file.meta_parse("test_per_class")?,
        seed: file.meta_parse("seed")?,
        shot_overrides,
    };
    Ok(ProceduralDataset {
        train: read_split(&file, "train")?,
        test: read_split(&file, "test")?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_within_float32() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = DatasetSpec::default();
        spec.shot_overrides.insert(2, 1);
        let ds = generate(&spec).unwrap();
        let path = dir.path().join("dataset.tensors");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.spec, ds.spec);
        assert_eq!(back.train.labels, ds.train.labels);
        assert_eq!(back.test.contexts, ds.test.contexts);
        for (a, b) in back.train.images.iter().flatten().zip(ds.train.images.iter().flatten()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(path.with_extension("spec.txt").exists());
    }
}
