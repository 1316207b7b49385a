use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdsprites::{
    decode_caption_logits, encode_rgb_png, image_modality, AttributeSet, Level, RgbImage, IMAGE_PIXELS, IMAGE_SIDE,
};
use crate::error::{Error, Result};
use crate::model::{ModalityBatch, MultimodalVae, TraversalPlan};

use super::evaluate::load_test_set;
use super::train::load_model;

const PCA_ITERATIONS: usize = 500;
const ENCODE_CHUNK: usize = 256;

/// Principal directions of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit vectors, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    /// Top `k` directions of `n × d` row-major `data` by power iteration
    /// with deflation. Signs are fixed so each component's largest entry is
    /// positive.
    pub fn fit(data: &[f64], n: usize, d: usize, k: usize) -> Result<Self> {
        if n < 2 || d == 0 || data.len() != n * d || k == 0 || k > d {
            return Err(Error::Contract(format!("pca needs n >= 2 rows of width d >= k (n={n}, d={d}, k={k})")));
        }
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        let cov_times = |v: &[f64]| {
            let mut out = vec![0.0; d];
            for row in data.chunks(d) {
                let s: f64 = row.iter().zip(&mean).zip(v).map(|((x, m), v)| (x - m) * v).sum();
                out.iter_mut().zip(row).zip(&mean).for_each(|((o, x), m)| *o += s * (x - m) / n as f64);
            }
            out
        };
        for c in 0..k {
            let mut v: Vec<f64> = (0..d).map(|j| 1.0 + ((j * 7 + c * 3) % 11) as f64 / 11.0).collect();
            let mut lambda = 0.0;
            for _ in 0..PCA_ITERATIONS {
                for p in &components {
                    let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    break;
                }
                v.iter_mut().for_each(|x| *x /= norm);
                let w = cov_times(&v);
                let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
                let converged = (next - lambda).abs() <= 1e-12 * next.abs().max(1e-300);
                lambda = next;
                v = w;
                if converged {
                    break;
                }
            }
            for p in &components {
                let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            v.iter_mut().for_each(|x| *x /= norm);
            let big = v.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            variances.push(lambda.max(0.0));
        }
        Ok(Self { mean, components, variances })
    }

    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components.iter().map(|p| row.iter().zip(&self.mean).zip(p).map(|((x, m), p)| (x - m) * p).sum()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    /// Traversal values per latent dimension.
    pub columns: usize,
    pub lo: f64,
    pub hi: f64,
    /// Test samples in the PCA projection.
    pub pca_limit: Option<usize>,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { columns: 8, lo: -6.0, hi: 6.0, pca_limit: Some(2000) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedFiles {
    pub traversal_png: PathBuf,
    pub traversal_captions: PathBuf,
    pub pca_csv: PathBuf,
    pub loss_csv: Option<PathBuf>,
}

/// Images laid out as a `rows × cols` grid.
pub fn tile_images(images: &[RgbImage], rows: usize, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    if images.len() != rows * cols {
        return Err(Error::dimension("image grid", [rows, cols], [images.len()]));
    }
    let (w, h) = (cols * IMAGE_SIDE, rows * IMAGE_SIDE);
    let mut data = vec![0u8; w * h * 3];
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y in 0..IMAGE_SIDE {
            let src = &img.data[y * IMAGE_SIDE * 3..(y + 1) * IMAGE_SIDE * 3];
            let start = ((r * IMAGE_SIDE + y) * w + c * IMAGE_SIDE) * 3;
            data[start..start + IMAGE_SIDE * 3].copy_from_slice(src);
        }
    }
    Ok((w, h, data))
}

/// Decode a traversal grid: one row per latent dimension, one column per
/// value. Returns the images and the captions in the same order.
pub fn traversal_grid(model: &MultimodalVae, columns: usize, lo: f64, hi: f64) -> Result<(Vec<RgbImage>, Vec<String>)> {
    let plan = TraversalPlan::new(model.spec().total_latent_dim(), columns, lo, hi)?;
    let outs = model.decode_latents(&plan.latents(0, plan.len()))?;
    let images = outs[0].data().chunks(IMAGE_PIXELS).map(RgbImage::from_unit_floats).collect::<Result<Vec<_>>>()?;
    let width: usize = outs[1].shape()[1..].iter().product();
    let captions = outs[1].data().chunks(width).map(decode_caption_logits).collect();
    Ok((images, captions))
}

fn attribute_cells(a: &AttributeSet) -> String {
    let color = a.color.map_or("none", |c| c.word());
    let quadrant = a.quadrant.map_or("none".to_string(), |q| {
        let (v, h) = q.words();
        format!("{v}_{h}")
    });
    format!("{},{},{color},{quadrant},{}", a.shape.word(), a.size.word(), a.background.word())
}

/// Write the traversal sheet, the PCA projection of test-set posterior
/// means (given the image) and a copy of the run's loss curve into `out_dir`.
pub fn export_visualizations(
    checkpoint: &Path,
    dataset: &Path,
    out_dir: &Path,
    opts: &ExportOptions,
) -> Result<ExportedFiles> {
    let (model, meta) = load_model(checkpoint)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (images, captions) = traversal_grid(&model, opts.columns, opts.lo, opts.hi)?;
    let rows = model.spec().total_latent_dim();
    let (w, h, raster) = tile_images(&images, rows, opts.columns)?;
    let traversal_png = out_dir.join("traversal.png");
    fs::write(&traversal_png, encode_rgb_png(w, h, &raster)?).map_err(|e| Error::io(&traversal_png, e))?;
    let traversal_captions = out_dir.join("traversal_captions.txt");
    let mut text = String::new();
    for (i, c) in captions.iter().enumerate() {
        let _ = writeln!(text, "{}\t{}\t{c}", i / opts.columns, i % opts.columns);
    }
    fs::write(&traversal_captions, text).map_err(|e| Error::io(&traversal_captions, e))?;

    let test = load_test_set(dataset, meta.level, opts.pca_limit)?;
    let pca_csv = out_dir.join("latent_pca.csv");
    fs::write(&pca_csv, latent_pca_csv(&model, &test.images, &test.attributes, test.level)?)
        .map_err(|e| Error::io(&pca_csv, e))?;

    let run_dir = checkpoint.parent().map(|p| if p.ends_with("checkpoints") { p.parent().unwrap_or(p) } else { p });
    let loss_csv = match run_dir.map(|d| d.join("loss.csv")).filter(|p| p.exists()) {
        Some(src) => {
            let dst = out_dir.join("loss_curves.csv");
            fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
            Some(dst)
        }
        None => None,
    };
    Ok(ExportedFiles { traversal_png, traversal_captions, pca_csv, loss_csv })
}

/// `index,pc1,pc2,shape,size,color,quadrant,background`, one row per image.
pub fn latent_pca_csv(
    model: &MultimodalVae,
    images: &[RgbImage],
    attributes: &[AttributeSet],
    _level: Level,
) -> Result<String> {
    let mut means = Vec::new();
    let mut d = 0;
    for chunk in images.chunks(ENCODE_CHUNK) {
        let refs: Vec<&RgbImage> = chunk.iter().collect();
        let batch = ModalityBatch::new(vec![Some(image_modality(&refs)?), None])?;
        let m = model.posterior_mean(&batch, 0)?;
        d = m.shape()[1];
        means.extend_from_slice(m.data());
    }
    let n = images.len();
    let pca = Pca::fit(&means, n, d, 2.min(d))?;
    let mut out = String::from("index,pc1,pc2,shape,size,color,quadrant,background\n");
    for (i, row) in means.chunks(d).enumerate() {
        let p = pca.project(row);
        let _ = writeln!(out, "{i},{},{},{}", p[0], p.get(1).copied().unwrap_or(0.0), attribute_cells(&attributes[i]));
    }
    Ok(out)
}
