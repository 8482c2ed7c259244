//! Paired corpus generation and the manifest that indexes it.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::degradations::{apply, Degradation, DegradationSpec};
use crate::error::{arg_err, io_err, Error, Result};
use crate::image_io::{read_image, write_image};
use crate::procedural::{clean_image, Pattern};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "clean,degraded,kind,params,seed";
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub clean: PathBuf,
    pub degraded: PathBuf,
    pub kind: String,
    pub params: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.clean.display(),
                r.degraded.display(),
                r.kind,
                r.params,
                r.seed
            ));
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(Error::Config(format!("manifest must start with header {MANIFEST_HEADER:?}"))),
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::Config(format!("manifest line {}: expected 5 fields, got {}", n + 1, f.len())));
            }
            let seed = f[4]
                .parse()
                .map_err(|_| Error::Config(format!("manifest line {}: bad seed {:?}", n + 1, f[4])))?;
            rows.push(ManifestRow {
                clean: f[0].into(),
                degraded: f[1].into(),
                kind: f[2].to_string(),
                params: f[3].to_string(),
                seed,
            });
        }
        Ok(Manifest { rows, root: root.into() })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Loads the (degraded, clean) pair of one row.
    pub fn load_pair(&self, i: usize) -> Result<(Tensor, Tensor)> {
        let r = &self.rows[i];
        Ok((
            to_rgb(read_image(self.resolve(&r.degraded))?)?,
            to_rgb(read_image(self.resolve(&r.clean))?)?,
        ))
    }
}

/// Replicates a single-channel image to three channels.
pub fn to_rgb(t: Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    match c {
        3 => Ok(t),
        1 => Tensor::new([3, h, w], t.data().repeat(3)),
        _ => Err(arg_err("to_rgb", format!("expected 1 or 3 channels, got {c}"))),
    }
}

#[derive(Clone, Debug)]
pub enum CleanSource {
    /// Every `.ppm`/`.pgm` in the directory, in name order, cycled.
    Dir(PathBuf),
    Procedural { height: usize, width: usize },
}

#[derive(Debug, Default)]
pub struct CorpusReport {
    pub manifest: Manifest,
    pub skipped: Vec<(PathBuf, String)>,
}

fn load_sources(dir: &Path) -> Result<(Vec<Tensor>, Vec<(PathBuf, String)>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        match read_image(&p).and_then(to_rgb) {
            Ok(t) => images.push(t),
            Err(e) => skipped.push((p, e.to_string())),
        }
    }
    Ok((images, skipped))
}

/// Writes `count` pairs cycling through `specs`. Pair `i` uses the derived
/// seed `seed ^ i` for both its degradation and (if procedural) its clean image.
pub fn generate_corpus(
    specs: &[Degradation],
    source: &CleanSource,
    out_dir: impl AsRef<Path>,
    count: usize,
    seed: u64,
) -> Result<CorpusReport> {
    let out_dir = out_dir.as_ref();
    if count == 0 || specs.is_empty() {
        return Err(arg_err("generate_corpus", "count and spec list must be nonempty"));
    }
    for s in specs {
        s.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (images, skipped) = match source {
        CleanSource::Dir(d) => load_sources(d)?,
        CleanSource::Procedural { .. } => (Vec::new(), Vec::new()),
    };
    if let CleanSource::Dir(d) = source {
        if images.is_empty() {
            return Err(Error::Runtime(format!("no readable clean images in {}", d.display())));
        }
    }
    let rows = (0..count)
        .into_par_iter()
        .map(|i| {
            let derived = seed ^ i as u64;
            let kind = specs[i % specs.len()];
            let clean = match source {
                CleanSource::Dir(_) => images[i % images.len()].clone(),
                CleanSource::Procedural { height, width } => {
                    let pattern = Pattern::ALL[i % Pattern::ALL.len()];
                    clean_image(pattern, *height, *width, derived.wrapping_mul(0x9E37_79B9_7F4A_7C15))
                }
            };
            let degraded = apply(&DegradationSpec { kind, seed: derived }, &clean)?;
            let clean_name = PathBuf::from(format!("clean_{i:05}.ppm"));
            let degraded_name = PathBuf::from(format!("degraded_{i:05}.ppm"));
            write_image(out_dir.join(&clean_name), &clean)?;
            write_image(out_dir.join(&degraded_name), &degraded)?;
            Ok(ManifestRow {
                clean: clean_name,
                degraded: degraded_name,
                kind: kind.kind_name().to_string(),
                params: kind.params_string(),
                seed: derived,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { rows, root: out_dir.to_path_buf() };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(CorpusReport { manifest, skipped })
}
