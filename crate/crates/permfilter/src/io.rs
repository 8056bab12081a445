//! Boundary layer: MNIST IDX ingestion, experiment configuration, ensemble
//! checkpointing, and results emission.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{Dataset, HeadConfig, Method, MetricsTable};
use crate::error::{Error, Result};
use crate::filter::{Ensemble, Particle};
use crate::losses::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable overriding the dataset cache location.
pub const DATA_DIR_ENV: &str = "PERMFILTER_DATA_DIR";

/// Raw IDX contents: dimension sizes and the unsigned-byte payload.
#[derive(Debug, Clone)]
pub struct IdxData {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

/// Parses an IDX file: big-endian u32 magic, big-endian u32 dimension
/// sizes, then the raw unsigned-byte payload.
pub fn read_idx(path: &Path) -> Result<IdxData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let magic = read_u32_be(&mut reader, path)?;
    let n_dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(Error::format(path, format!("bad IDX magic 0x{other:08x}")));
        }
    };
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(read_u32_be(&mut reader, path)? as usize);
    }
    let expected: usize = dims.iter().product();
    let mut payload = vec![0u8; expected];
    reader
        .read_exact(&mut payload)
        .map_err(|_| Error::format(path, format!("truncated payload, expected {expected} bytes")))?;
    Ok(IdxData { magic, dims, payload })
}

fn read_u32_be<R: Read>(reader: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated header"))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an image/label IDX pair into a dataset, rescaling pixels to [0, 1].
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx(images_path)?;
    if images.magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(images_path, "not an IDX image file"));
    }
    let labels = read_idx(labels_path)?;
    if labels.magic != IDX_LABELS_MAGIC {
        return Err(Error::format(labels_path, "not an IDX label file"));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images", labels.dims[0], n),
        ));
    }
    let features = images.dims[1] * images.dims[2];
    let data: Vec<f64> = images.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels.payload.iter().map(|&b| b as usize).collect();
    if labels.iter().any(|&l| l > 9) {
        return Err(Error::format(labels_path, "label byte outside 0..=9"));
    }
    Ok(Dataset { inputs: Matrix { rows: n, cols: features, data }, labels })
}

/// Resolves the dataset cache directory: `PERMFILTER_DATA_DIR` if set,
/// otherwise `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Loads the MNIST train and test datasets from a directory holding the
/// four canonical IDX files.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_dataset(&dir.join(MNIST_FILES[0]), &dir.join(MNIST_FILES[1]))?;
    let test = load_idx_dataset(&dir.join(MNIST_FILES[2]), &dir.join(MNIST_FILES[3]))?;
    Ok((train, test))
}

pub fn mnist_available(dir: &Path) -> bool {
    MNIST_FILES.iter().all(|f| dir.join(f).is_file())
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"WPF1";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes an ensemble. Layout, all little-endian: magic "WPF1", format
/// version u32, N u32, d u32, sigma_sq f64, step u64, then N records of
/// [log_weight f64, d x position f64]. Refuses non-finite values so a
/// checkpoint is always NaN-free.
pub fn write_checkpoint(ensemble: &Ensemble, path: &Path) -> Result<()> {
    for p in ensemble.particles() {
        if !p.log_weight.is_finite() || p.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("refusing to checkpoint non-finite values".into()));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(&CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(ensemble.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(ensemble.dim() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&ensemble.sigma_sq.to_le_bytes()).map_err(io_err)?;
    w.write_all(&ensemble.step.to_le_bytes()).map_err(io_err)?;
    for p in ensemble.particles() {
        w.write_all(&p.log_weight.to_le_bytes()).map_err(io_err)?;
        for v in &p.position {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint written by [`write_checkpoint`], bit-exactly.
pub fn read_checkpoint(path: &Path) -> Result<Ensemble> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::format(path, "truncated header"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = read_u32_le(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32_le(&mut r, path)? as usize;
    let d = read_u32_le(&mut r, path)? as usize;
    let sigma_sq = read_f64_le(&mut r, path)?;
    let step = read_u64_le(&mut r, path)?;
    if n == 0 {
        return Err(Error::format(path, "checkpoint holds no particles"));
    }
    let mut particles = Vec::with_capacity(n);
    for _ in 0..n {
        let log_weight = read_f64_le(&mut r, path)?;
        let mut position = Vec::with_capacity(d);
        for _ in 0..d {
            position.push(read_f64_le(&mut r, path)?);
        }
        particles.push(Particle { position, log_weight });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after particle records"));
    }
    Ensemble::from_particles(particles, sigma_sq, step)
}

fn read_u32_le<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated checkpoint"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64_le<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated checkpoint"))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64_le<R: Read>(r: &mut R, path: &Path) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated checkpoint"))?;
    Ok(f64::from_le_bytes(buf))
}

/// Benchmark selector for the experiment runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    Splitmnist,
    Synthetic,
    LinearOracle,
}

/// Synthetic-benchmark shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub k_tasks: usize,
    pub dim: usize,
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { k_tasks: 5, dim: 16, separation: 3.0 }
    }
}

/// Full experiment configuration; round-trips losslessly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub benchmark: Benchmark,
    pub n_particles: usize,
    pub sigma_sq: f64,
    pub init_noise_std: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub n_permutations: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_hidden_units")]
    pub hidden_units: usize,
    #[serde(default = "default_head")]
    pub head: HeadConfig,
    #[serde(default = "default_perturb_std")]
    pub resample_perturb_std: f64,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

fn default_hidden_units() -> usize {
    64
}

fn default_head() -> HeadConfig {
    HeadConfig::Domain
}

fn default_perturb_std() -> f64 {
    1e-2
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Wpf,
            benchmark: Benchmark::Synthetic,
            n_particles: 20,
            sigma_sq: 1e-2,
            init_noise_std: 0.1,
            epochs_per_task: 1,
            batch_size: 64,
            n_permutations: 5,
            seed: 0,
            output_dir: PathBuf::from("results"),
            hidden_units: default_hidden_units(),
            head: default_head(),
            resample_perturb_std: default_perturb_std(),
            synthetic: SyntheticSpec::default(),
            data_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidConfig("n_particles must be >= 1".into()));
        }
        if !(self.sigma_sq > 0.0) {
            return Err(Error::InvalidConfig("sigma_sq must be > 0".into()));
        }
        if !(self.init_noise_std >= 0.0) {
            return Err(Error::InvalidConfig("init_noise_std must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.n_permutations == 0 {
            return Err(Error::InvalidConfig("n_permutations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Aggregated summary written next to the raw scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub average_accuracy: f64,
    pub normalized_variance: Option<f64>,
    pub forgetting: Vec<f64>,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
}

/// Writes `scores.csv` (task,run,accuracy rows at 6 decimal places),
/// `summary.json`, and `curves.csv` (per-checkpoint accuracy history).
pub fn emit_results(
    metrics: &MetricsTable,
    histories: &[Matrix],
    config: &ExperimentConfig,
    seeds: &[u64],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let scores_path = dir.join("scores.csv");
    let mut scores = String::from("task,run,accuracy\n");
    for task in 0..metrics.scores.rows {
        for run in 0..metrics.scores.cols {
            let v = metrics.scores.row(task)[run];
            scores.push_str(&format!("{},{},{:.6}\n", metrics.task_names[task], run, v));
        }
    }
    fs::write(&scores_path, scores).map_err(|e| Error::io(&scores_path, e))?;

    let forgetting_means = if histories.is_empty() {
        vec![]
    } else {
        // mean forgetting per task over runs
        let k = histories[0].rows;
        (0..k)
            .map(|task| {
                histories
                    .iter()
                    .map(|h| crate::bench::forgetting(h)[task])
                    .sum::<f64>()
                    / histories.len() as f64
            })
            .collect()
    };
    let summary = Summary {
        method: metrics.method.clone(),
        average_accuracy: metrics.average_accuracy()?,
        normalized_variance: if metrics.n_runs() >= 2 {
            Some(metrics.normalized_variance()?)
        } else {
            None
        },
        forgetting: forgetting_means,
        config: config.clone(),
        seeds: seeds.to_vec(),
    };
    let summary_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;

    let curves_path = dir.join("curves.csv");
    let mut curves = String::from("run,task,checkpoint,accuracy\n");
    for (run, h) in histories.iter().enumerate() {
        for task in 0..h.rows {
            for cp in 0..h.cols {
                curves.push_str(&format!("{},{},{},{:.6}\n", run, task, cp, h.row(task)[cp]));
            }
        }
    }
    fs::write(&curves_path, curves).map_err(|e| Error::io(&curves_path, e))?;
    Ok(())
}

/// Re-aggregates an emitted `scores.csv` into (task names, score matrix).
pub fn read_scores_csv(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("task,run,accuracy") => {}
        _ => return Err(Error::format(path, "missing scores.csv header")),
    }
    let mut task_names: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    let mut max_run = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (task, run, acc) = (
            parts.next().ok_or_else(|| Error::format(path, "short row"))?,
            parts.next().ok_or_else(|| Error::format(path, "short row"))?,
            parts.next().ok_or_else(|| Error::format(path, "short row"))?,
        );
        let task_idx = match task_names.iter().position(|t| t == task) {
            Some(i) => i,
            None => {
                task_names.push(task.to_string());
                task_names.len() - 1
            }
        };
        let run: usize =
            run.parse().map_err(|_| Error::format(path, format!("bad run index {run}")))?;
        let acc: f64 =
            acc.parse().map_err(|_| Error::format(path, format!("bad accuracy {acc}")))?;
        max_run = max_run.max(run);
        cells.push((task_idx, run, acc));
    }
    if cells.is_empty() {
        return Err(Error::format(path, "no score rows"));
    }
    let mut scores = Matrix::zeros(task_names.len(), max_run + 1);
    for (task, run, acc) in cells {
        scores.data[task * (max_run + 1) + run] = acc;
    }
    Ok((task_names, scores))
}
