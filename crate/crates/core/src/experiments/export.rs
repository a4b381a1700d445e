use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use fan_tensor::Tensor;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_indices, DomainDataset, DomainTag, IMAGE_SIDE};
use crate::error::{FanError, Result};
use crate::losses::value;
use crate::model::{FanModel, Mode, Variant};

/// Which representation to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Logits,
    Dss,
}

impl FromStr for FeatureKind {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(FeatureKind::Logits),
            "dss" => Ok(FeatureKind::Dss),
            _ => Err(FanError::Argument(format!("unknown feature kind `{s}` (logits|dss)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub domain: DomainTag,
    pub label: usize,
    pub values: Vec<f32>,
}

/// Per-sample features with their domain and true label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub kind: FeatureKind,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, |r| r.values.len())
    }

    pub fn header(&self) -> String {
        let prefix = match self.kind {
            FeatureKind::Logits => "logit",
            FeatureKind::Dss => "dss",
        };
        let mut h = String::from("domain,label");
        for i in 0..self.width() {
            write!(h, ",{prefix}{i}").expect("write to string");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{}", r.domain, r.label).expect("write to string");
            for v in &r.values {
                write!(s, ",{v}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| FanError::io(path, e))
    }
}

fn sample(ds: &DomainDataset, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let labels = ds
        .evaluation_labels()
        .ok_or_else(|| FanError::Argument(format!("{} has no labels to export", ds.provenance)))?;
    let mut idx = shuffled_indices(ds.len(), seed);
    idx.truncate(n.min(ds.len()));
    let y = idx.iter().map(|&i| labels[i]).collect();
    Ok((ds.images().select_rows(&idx)?, y))
}

/// Features of `n` random source-test images under `model_s` and `n` random
/// target-test images under `model_t`.
pub fn export_embeddings(
    model_s: &FanModel,
    model_t: &FanModel,
    source_test: &DomainDataset,
    target_test: &DomainDataset,
    n: usize,
    kind: FeatureKind,
    seed: u64,
) -> Result<FeatureTable> {
    if n == 0 {
        return Err(FanError::Argument("export needs n > 0".into()));
    }
    let mut rows = Vec::with_capacity(2 * n);
    for (model, ds, tag, s) in [
        (model_s, source_test, DomainTag::Source, seed),
        (model_t, target_test, DomainTag::Target, seed.wrapping_add(1)),
    ] {
        let (x, y) = sample(ds, n, s)?;
        let enc = model.encode(&x, Mode::Eval)?;
        let f = match kind {
            FeatureKind::Logits => enc.logits,
            FeatureKind::Dss => enc.h_d,
        };
        rows.extend(y.iter().enumerate().map(|(i, &label)| FeatureRow {
            domain: tag,
            label,
            values: f.row(i).to_vec(),
        }));
    }
    Ok(FeatureTable { kind, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMode {
    /// Decode the target's own domain code and logits.
    #[serde(rename = "self")]
    SelfMode,
    /// Decode the target's domain code with logits of a source image of the
    /// same predicted class.
    LogitSwap,
}

impl FromStr for ReconMode {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(ReconMode::SelfMode),
            "logit-swap" => Ok(ReconMode::LogitSwap),
            _ => Err(FanError::Argument(format!("unknown reconstruction mode `{s}` (self|logit-swap)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructions {
    pub mode: ReconMode,
    pub inputs: Tensor,
    pub outputs: Tensor,
    /// Class each reconstruction is meant to show: the target model's
    /// prediction for its input.
    pub intended: Vec<usize>,
    /// Source-pool index whose logits were used, in logit-swap mode.
    pub donors: Option<Vec<usize>>,
}

impl Reconstructions {
    /// Mean squared pixel error between inputs and reconstructions.
    pub fn pixel_error(&self) -> Result<f64> {
        Ok(value::reconstruction(&self.outputs, &self.inputs)? as f64)
    }

    /// Fraction of reconstructions that `classifier` assigns to the intended
    /// class.
    pub fn class_retention(&self, classifier: &FanModel) -> Result<f64> {
        let pred = classifier.logits(&self.outputs)?.argmax_rows();
        let hits = pred.iter().zip(&self.intended).filter(|(p, c)| p == c).count();
        Ok(hits as f64 / self.intended.len() as f64)
    }

    /// Writes `<stem>.png` (input rows above reconstruction rows) and the raw
    /// `<stem>-inputs.npy`, `<stem>-outputs.npy`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FanError::io(dir, e))?;
        write_npy(&dir.join(format!("{stem}-inputs.npy")), &self.inputs)?;
        write_npy(&dir.join(format!("{stem}-outputs.npy")), &self.outputs)?;
        write_png_grid(&dir.join(format!("{stem}.png")), &self.inputs, &self.outputs, 10)
    }
}

/// Reconstructs `target_samples` with `model_t`. In logit-swap mode the
/// logits come from `model_s` applied to a random image of `source_pool`
/// that `model_s` assigns to the same class.
pub fn export_reconstructions(
    model_t: &FanModel,
    model_s: &FanModel,
    target_samples: &Tensor,
    source_pool: &DomainDataset,
    mode: ReconMode,
    seed: u64,
) -> Result<Reconstructions> {
    let enc = model_t.encode(target_samples, Mode::Eval)?;
    let intended = enc.logits.argmax_rows();
    let (logits, donors) = match mode {
        ReconMode::SelfMode => (enc.logits, None),
        ReconMode::LogitSwap => {
            if matches!(model_t.variant(), Variant::Joint | Variant::Separation) {
                return Err(FanError::Argument(format!(
                    "logit swap needs a decoder that reads logits; {} does not",
                    model_t.variant()
                )));
            }
            let pool_logits = model_s.logits(source_pool.images())?;
            let pool_pred = pool_logits.argmax_rows();
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); crate::data::NUM_CLASSES];
            for (i, &c) in pool_pred.iter().enumerate() {
                by_class[c].push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let donors = intended
                .iter()
                .map(|&c| {
                    by_class[c].choose(&mut rng).copied().ok_or_else(|| {
                        FanError::Data(format!("no source image is predicted as class {c}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (pool_logits.select_rows(&donors)?, Some(donors))
        }
    };
    let outputs = model_t.decode(&enc.h_d, &logits, Mode::Eval)?;
    Ok(Reconstructions {
        mode,
        inputs: target_samples.clone(),
        outputs,
        intended,
        donors,
    })
}

/// Writes a tensor as a NumPy `.npy` file (`<f4`, C order).
pub fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // Magic (6) + version (2) + length (2) + header + newline, padded to 64.
    let pad = (64 - (10 + header.len() + 1) % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let file = fs::File::create(path).map_err(|e| FanError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| FanError::io(path, e);
    w.write_all(b"\x93NUMPY\x01\x00").map_err(io)?;
    w.write_all(&(header.len() as u16).to_le_bytes()).map_err(io)?;
    w.write_all(header.as_bytes()).map_err(io)?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Grayscale grid: for each group of `cols` samples, a row of inputs
/// followed by a row of reconstructions. Pixels are clamped to `[0, 1]`.
pub fn write_png_grid(path: &Path, inputs: &Tensor, outputs: &Tensor, cols: usize) -> Result<()> {
    let n = inputs.dim(0);
    if outputs.dim(0) != n || n == 0 {
        return Err(FanError::Argument("grid needs equal, non-empty input and output sets".into()));
    }
    let side = IMAGE_SIDE;
    let gap = 2;
    let cols = cols.min(n).max(1);
    let groups = n.div_ceil(cols);
    let width = cols * (side + gap) + gap;
    let height = 2 * groups * (side + gap) + gap;
    let mut pixels = vec![0u8; width * height];
    let plane = side * side;
    for i in 0..n {
        let (gr, c) = (i / cols, i % cols);
        for (k, t) in [inputs, outputs].into_iter().enumerate() {
            let top = (2 * gr + k) * (side + gap) + gap;
            let left = c * (side + gap) + gap;
            let img = &t.data()[i * plane..(i + 1) * plane];
            for y in 0..side {
                for x in 0..side {
                    let v = img[y * side + x].clamp(0.0, 1.0);
                    pixels[(top + y) * width + left + x] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| FanError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| FanError::Format(format!("{}: {e}", path.display())))?;
    w.write_image_data(&pixels)
        .map_err(|e| FanError::Format(format!("{}: {e}", path.display())))
}
