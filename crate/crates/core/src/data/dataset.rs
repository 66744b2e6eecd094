use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{resize_bilinear, Image};
use super::ppm::decode_ppm;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum SampleSource {
    Path(PathBuf),
    Memory(Arc<Image>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub source: SampleSource,
    pub label: usize,
}

impl Sample {
    pub fn load(&self) -> Result<Image> {
        match &self.source {
            SampleSource::Path(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                decode_ppm(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))
            }
            SampleSource::Memory(img) => Ok((**img).clone()),
        }
    }

    pub fn load_resized(&self, size: (usize, usize)) -> Result<Image> {
        resize_bilinear(&self.load()?, size)
    }

    pub fn describe(&self) -> String {
        match &self.source {
            SampleSource::Path(p) => p.display().to_string(),
            SampleSource::Memory(_) => "<memory>".to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Files skipped while scanning in lenient mode.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleaningReport {
    pub skipped: Vec<(PathBuf, String)>,
}

impl CleaningReport {
    pub fn render(&self) -> String {
        let mut s = format!("skipped {}\n", self.skipped.len());
        for (p, why) in &self.skipped {
            let _ = writeln!(s, "{}\t{why}", p.display());
        }
        s
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let ds = Dataset { classes, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.samples.iter().find(|s| s.label >= self.classes.len()) {
            return Err(Error::Dataset(format!(
                "label {} out of range for {} classes",
                s.label,
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Scans `root/<class>/*.ppm`. Classes are sorted directory names,
    /// samples follow class order then file name order. Every file is
    /// decoded once; in lenient mode undecodable files are skipped and
    /// reported instead of failing the scan.
    pub fn scan_directory(root: &Path, lenient: bool) -> Result<(Dataset, CleaningReport)> {
        let mut classes = Vec::new();
        let mut samples = Vec::new();
        let mut report = CleaningReport::default();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Dataset(format!("non-UTF-8 class directory {}", dir.display())))?
                .to_string();
            let label = classes.len();
            let mut count = 0;
            for file in sorted_entries(&dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("ppm") {
                    continue;
                }
                let check = std::fs::read(&file)
                    .map_err(|e| e.to_string())
                    .and_then(|b| decode_ppm(&b).map(|_| ()).map_err(|e| e.to_string()));
                match check {
                    Ok(()) => {
                        samples.push(Sample {
                            source: SampleSource::Path(file),
                            label,
                        });
                        count += 1;
                    }
                    Err(why) if lenient => report.skipped.push((file, why)),
                    Err(why) => return Err(Error::Dataset(format!("{}: {why}", file.display()))),
                }
            }
            if count == 0 {
                return Err(Error::Dataset(format!("class directory {} has no usable images", dir.display())));
            }
            classes.push(name);
        }
        if classes.is_empty() {
            return Err(Error::Dataset(format!("no class directories under {}", root.display())));
        }
        Ok((Dataset { classes, samples }, report))
    }

    /// Stratified split: within each class (in label order) members are
    /// shuffled by one seeded stream and the first `floor(ratio n)` go to
    /// the first part. Both parts keep the dataset's sample order.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(invalid!("split ratio must be in (0, 1), got {ratio}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut first = vec![false; self.samples.len()];
        for c in 0..self.classes.len() {
            let mut members: Vec<usize> = (0..self.samples.len()).filter(|&i| self.samples[i].label == c).collect();
            if members.len() < 2 {
                return Err(Error::Dataset(format!(
                    "class {} has {} members; a split needs at least 2",
                    self.classes[c],
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            for &i in &members[..split_point(members.len(), ratio)] {
                first[i] = true;
            }
        }
        let (a, b): (Vec<usize>, Vec<usize>) = (0..self.samples.len()).partition(|&i| first[i]);
        Ok((self.subset(&a), self.subset(&b)))
    }

    /// Carves a stratified validation part of `fraction` out of this set.
    pub fn validation_split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(invalid!("validation fraction must be in (0, 1), got {fraction}"));
        }
        self.split(1.0 - fraction, seed)
    }

    /// Drops every class whose prospective test share `n - floor(ratio n)`
    /// is at most `threshold`; survivors keep their relative order and are
    /// re-indexed densely. Returns the excluded class names too.
    pub fn exclude_small_classes(&self, ratio: f64, threshold: usize) -> Result<(Dataset, Vec<String>)> {
        let counts = self.class_counts();
        let keep: Vec<bool> = counts.iter().map(|&n| n - split_point(n, ratio) > threshold).collect();
        if !keep.iter().any(|&k| k) {
            return Err(Error::Dataset(format!(
                "every class has a test share of at most {threshold} images"
            )));
        }
        let mut remap = vec![usize::MAX; counts.len()];
        let mut classes = Vec::new();
        let mut excluded = Vec::new();
        for (c, name) in self.classes.iter().enumerate() {
            if keep[c] {
                remap[c] = classes.len();
                classes.push(name.clone());
            } else {
                excluded.push(name.clone());
            }
        }
        let samples = self
            .samples
            .iter()
            .filter(|s| keep[s.label])
            .map(|s| Sample {
                source: s.source.clone(),
                label: remap[s.label],
            })
            .collect();
        Ok((Dataset { classes, samples }, excluded))
    }
}

/// `floor(ratio n)`, guarded against representation error just below an integer.
pub fn split_point(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}
