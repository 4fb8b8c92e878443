//! Experiment orchestration: configuration, the per-iteration training loop,
//! metric records and CSV output.
//!
//! A run is fully determined by its configuration (including the master
//! seed): data partitioning, channel gains, receiver noise, codec dithering
//! and the projection matrix all draw from independently labelled streams.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::channel::ChannelSampler;
use crate::data::{self, Dataset, Partition};
use crate::learner::{self, AdamHyper, AdamState, Batch, ModelParams};
use crate::power::PowerLedger;
use crate::project::{make_projection, AmpConfig};
use crate::schemes::{
    AnalogParams, CaDsgd, CaTransport, DigitalCodec, DigitalDsgd, EcesaDsgd, Engine,
    ErrorFreeScheme, EsaDsgd, OdDsgd, SchemeKind,
};
use crate::{derive_seed, Error, Result};

/// Raw feature count of the image task; the bias is folded in by the model.
pub const FEATURES: usize = 784;
pub const CLASSES: usize = 10;

/// Environment variable that overrides the IDX data directory.
pub const DATA_DIR_ENV: &str = "FEDAIR_DATA";

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Deterministic synthetic corpus (default; no files needed).
    Synthetic,
    /// IDX pairs (`train-images-idx3-ubyte`, ...) under a directory.
    Idx { dir: PathBuf },
}

/// Full description of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scheme: SchemeKind,
    pub seed: u64,
    /// Number of devices (M).
    pub devices: usize,
    /// Local dataset size per device (B).
    pub samples_per_device: usize,
    /// DSGD iterations (T) when no slot budget is set.
    pub iterations: u32,
    /// Channel-slot budget shared by all schemes; 0 disables it. When set,
    /// a run executes `ceil(slot_budget / N)` iterations so every scheme
    /// consumes the same normalized time.
    pub slot_budget: u64,
    /// Average transmit power constraint (P̄).
    pub p_bar: f64,
    /// Channel gain variance (σ²).
    pub sigma_sq: f64,
    /// Analog gain threshold (λ).
    pub lambda: f64,
    /// Variance of the device-side CSI error; 0 means perfect CSI.
    pub csi_noise_var: f64,
    /// Parallel subchannels (s); 0 derives ⌈d/20⌉.
    pub subchannels: usize,
    /// Slots per iteration (N) for the compressed analog scheme.
    pub ca_slots: usize,
    /// Sparsity k for the compressed analog scheme; 0 derives ⌊s̃/2.5⌋.
    pub sparsity: usize,
    /// QSGD quantization bits (levels = 2^bits).
    pub qsgd_levels: u32,
    /// Error feedback for the QSGD/SignSGD baselines.
    pub baseline_error_feedback: bool,
    pub adam: AdamHyper,
    pub amp: AmpConfig,
    pub iid: bool,
    pub data: DataSource,
    /// Cap on training samples; 0 keeps everything.
    pub train_subset: usize,
    /// Cap on test samples; 0 keeps everything.
    pub test_subset: usize,
    /// Evaluation cadence in slots.
    pub eval_every: u64,
    /// CSV destination for the CLI; `None` prints to stdout.
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// Desk-scale profile: a 10k/2k corpus subset, 25 devices with 400
    /// samples each, and a 300-slot budget.
    fn default() -> Self {
        Self {
            scheme: SchemeKind::CaDsgd,
            seed: 1,
            devices: 25,
            samples_per_device: 400,
            iterations: 300,
            slot_budget: 300,
            p_bar: 20.0,
            sigma_sq: 1.0,
            lambda: 1e-3,
            csi_noise_var: 0.0,
            subchannels: 0,
            ca_slots: 1,
            sparsity: 0,
            qsgd_levels: 2,
            baseline_error_feedback: false,
            adam: AdamHyper::default(),
            amp: AmpConfig::default(),
            iid: true,
            data: DataSource::Synthetic,
            train_subset: 10_000,
            test_subset: 2_000,
            eval_every: 10,
            output: None,
        }
    }
}

/// Sizes derived from a validated configuration.
#[derive(Debug, Clone, Copy)]
pub struct DerivedSizes {
    /// Model dimension d = C · (F + 1).
    pub dim: usize,
    /// Parallel subchannels s.
    pub subchannels: usize,
    /// Slots per iteration for the configured scheme.
    pub slots_per_iter: usize,
    /// Projected dimension s̃ = 2sN (compressed analog only).
    pub s_tilde: usize,
    /// Compressed-analog sparsity k.
    pub sparsity: usize,
    /// Iterations this run will execute.
    pub iterations: u32,
}

impl ExperimentConfig {
    pub fn derived(&self) -> Result<DerivedSizes> {
        self.validate_basics()?;
        let dim = CLASSES * (FEATURES + 1);
        let subchannels = if self.subchannels == 0 {
            dim.div_ceil(20)
        } else {
            self.subchannels
        };
        let max_slots = dim.div_ceil(2 * subchannels);
        if self.ca_slots == 0 || self.ca_slots > max_slots {
            return Err(Error::Config(format!(
                "ca_slots must lie in [1, {max_slots}], got {}",
                self.ca_slots
            )));
        }
        let slots_per_iter = self
            .scheme
            .slots_per_iteration(dim, subchannels, self.ca_slots);
        let s_tilde = 2 * subchannels * self.ca_slots;
        let sparsity = if self.sparsity == 0 {
            (s_tilde as f64 / 2.5).floor() as usize
        } else {
            self.sparsity
        };
        if self.scheme == SchemeKind::CaDsgd && sparsity > s_tilde {
            return Err(Error::Config(format!(
                "sparsity {sparsity} exceeds projected dimension {s_tilde}"
            )));
        }
        let iterations = if self.slot_budget > 0 {
            self.slot_budget.div_ceil(slots_per_iter as u64) as u32
        } else {
            self.iterations
        };
        if iterations == 0 {
            return Err(Error::Config("run needs at least one iteration".into()));
        }
        Ok(DerivedSizes {
            dim,
            subchannels,
            slots_per_iter,
            s_tilde,
            sparsity,
            iterations,
        })
    }

    fn validate_basics(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::Config("devices must be positive".into()));
        }
        if self.samples_per_device == 0 {
            return Err(Error::Config("samples_per_device must be positive".into()));
        }
        if !self.iid && self.samples_per_device % 2 != 0 {
            return Err(Error::Config(
                "non-IID partitioning needs an even samples_per_device".into(),
            ));
        }
        if !(self.p_bar > 0.0) || !(self.sigma_sq > 0.0) || !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "p_bar, sigma_sq and lambda must be positive, got {}, {}, {}",
                self.p_bar, self.sigma_sq, self.lambda
            )));
        }
        if self.csi_noise_var < 0.0 {
            return Err(Error::Config("csi_noise_var cannot be negative".into()));
        }
        if self.qsgd_levels == 0 || self.qsgd_levels > 30 {
            return Err(Error::Config(format!(
                "qsgd_levels must lie in [1, 30], got {}",
                self.qsgd_levels
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.adam.validate()?;
        self.amp.validate()?;
        Ok(())
    }

    /// Applies one `key = value` override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "scheme" => self.scheme = SchemeKind::parse(value)?,
            "seed" => self.seed = parse(key, value)?,
            "devices" => self.devices = parse(key, value)?,
            "samples_per_device" => self.samples_per_device = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "slot_budget" => self.slot_budget = parse(key, value)?,
            "p_bar" => self.p_bar = parse(key, value)?,
            "sigma_sq" => self.sigma_sq = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "csi_noise_var" => self.csi_noise_var = parse(key, value)?,
            "subchannels" => self.subchannels = parse(key, value)?,
            "ca_slots" => self.ca_slots = parse(key, value)?,
            "sparsity" => self.sparsity = parse(key, value)?,
            "qsgd_levels" => self.qsgd_levels = parse(key, value)?,
            "baseline_error_feedback" => self.baseline_error_feedback = parse(key, value)?,
            "learning_rate" => self.adam.learning_rate = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "epsilon" => self.adam.epsilon = parse(key, value)?,
            "amp_max_iters" => self.amp.max_iters = parse(key, value)?,
            "amp_threshold_scale" => self.amp.threshold_scale = parse(key, value)?,
            "amp_tolerance" => self.amp.tolerance = parse(key, value)?,
            "iid" => self.iid = parse(key, value)?,
            "data" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic,
                    "idx" => DataSource::Idx {
                        dir: match &self.data {
                            DataSource::Idx { dir } => dir.clone(),
                            DataSource::Synthetic => PathBuf::from("."),
                        },
                    },
                    other => {
                        return Err(Error::Config(format!(
                            "data must be 'synthetic' or 'idx', got '{other}'"
                        )))
                    }
                }
            }
            "data_dir" => {
                self.data = DataSource::Idx {
                    dir: PathBuf::from(value),
                }
            }
            "train_subset" => self.train_subset = parse(key, value)?,
            "test_subset" => self.test_subset = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "output" => self.output = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` config file body. Lines starting with `#`
    /// and blank lines are skipped; unknown keys fail fast.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", line_no + 1))
            })?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub scheme: SchemeKind,
    pub seed: u64,
    pub iteration: u32,
    pub slot: u64,
    pub test_accuracy: f64,
    pub train_loss: f64,
    /// Bits delivered by the iteration that closed at this slot.
    pub bits_sent: f64,
    /// Transmit energy realized by that iteration, summed over devices.
    pub energy: f64,
    /// Scheduled device of that iteration, -1 when not applicable.
    pub selected_device: i64,
}

/// Everything a finished run reports.
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub ledger: PowerLedger,
    pub ledger_ok: bool,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.test_accuracy)
    }
}

/// Loads (or synthesizes) the train/test datasets for a configuration.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic => {
            // The corpus is fixed across run seeds, like a real dataset;
            // only partitioning depends on the experiment seed.
            let train_n = if cfg.train_subset == 0 { 60_000 } else { cfg.train_subset };
            let test_n = if cfg.test_subset == 0 { 10_000 } else { cfg.test_subset };
            let train = data::synthetic_dataset(train_n, 0xDA7A);
            let test = data::synthetic_dataset(test_n, 0x7E57);
            Ok((train, test))
        }
        DataSource::Idx { dir } => {
            let dir = std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| dir.clone());
            let train = data::load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = data::load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((train.truncated(cfg.train_subset), test.truncated(cfg.test_subset)))
        }
    }
}

/// Builds the per-device partition from the run's partition stream.
pub fn build_partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<Partition> {
    let mut rng = crate::seeded_stream(cfg.seed, "partition");
    if cfg.iid {
        data::partition_iid(train, cfg.devices, cfg.samples_per_device, &mut rng)
    } else {
        data::partition_noniid(
            train,
            cfg.devices,
            cfg.samples_per_device,
            CLASSES,
            &mut rng,
        )
    }
}

fn build_engine(cfg: &ExperimentConfig, sizes: &DerivedSizes) -> Result<Engine> {
    let analog = AnalogParams {
        lambda: cfg.lambda,
        p_bar_slot: cfg.p_bar,
        sigma: cfg.sigma_sq.sqrt(),
    };
    let engine = match cfg.scheme {
        SchemeKind::ErrorFree => Engine::ErrorFree(ErrorFreeScheme),
        SchemeKind::DDsgd => Engine::Digital(DigitalDsgd::new(
            DigitalCodec::SparseBinary,
            true,
            cfg.devices,
            sizes.dim,
            cfg.p_bar,
            cfg.seed,
        )),
        SchemeKind::DQsgd => Engine::Digital(DigitalDsgd::new(
            DigitalCodec::Qsgd {
                level_bits: cfg.qsgd_levels,
            },
            cfg.baseline_error_feedback,
            cfg.devices,
            sizes.dim,
            cfg.p_bar,
            cfg.seed,
        )),
        SchemeKind::DSignSgd => Engine::Digital(DigitalDsgd::new(
            DigitalCodec::SignSgd,
            cfg.baseline_error_feedback,
            cfg.devices,
            sizes.dim,
            cfg.p_bar,
            cfg.seed,
        )),
        SchemeKind::OdDsgd => Engine::Orthogonal(OdDsgd::new(
            cfg.devices,
            sizes.subchannels,
            sizes.dim,
            cfg.p_bar,
        )?),
        SchemeKind::EsaDsgd => Engine::Esa(EsaDsgd::new(analog, sizes.dim, sizes.subchannels)),
        SchemeKind::EcesaDsgd => Engine::Ecesa(EcesaDsgd::new(
            analog,
            cfg.devices,
            sizes.dim,
            sizes.subchannels,
        )),
        SchemeKind::CaDsgd => {
            let matrix = make_projection(
                derive_seed(cfg.seed, "projection"),
                sizes.s_tilde,
                sizes.dim,
            )?;
            Engine::Ca(CaDsgd::new(
                CaTransport::Projected {
                    matrix,
                    amp: cfg.amp,
                },
                analog,
                cfg.devices,
                sizes.dim,
                sizes.subchannels,
                cfg.ca_slots,
                sizes.sparsity,
            )?)
        }
    };
    Ok(engine)
}

/// Mean training loss over the union of the device datasets (equal shares,
/// so it is the mean of per-device losses), evaluated in parallel but summed
/// in ascending device order.
fn train_loss(model: &ModelParams, batches: &[Batch]) -> Result<f64> {
    let losses = batches
        .par_iter()
        .map(|b| learner::loss(model, b))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Runs one experiment to completion.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let sizes = cfg.derived()?;
    let (train, test) = load_datasets(cfg)?;
    let partition = build_partition(cfg, &train)?;
    let device_batches: Vec<Batch> = partition
        .device_indices
        .iter()
        .map(|idx| train.batch(idx))
        .collect::<Result<Vec<_>>>()?;
    let test_batch = test.full_batch()?;

    let mut model = ModelParams::zeros(CLASSES, FEATURES);
    let mut adam = AdamState::new(model.dim(), cfg.adam);
    let mut engine = build_engine(cfg, &sizes)?;
    let mut sampler = ChannelSampler::new(
        cfg.seed,
        cfg.devices,
        sizes.subchannels,
        cfg.sigma_sq,
        cfg.csi_noise_var,
    );
    let mut ledger = PowerLedger::new(cfg.devices, cfg.p_bar);

    let mut records = Vec::new();
    let eval = |model: &ModelParams,
                iteration: u32,
                slot: u64,
                bits: f64,
                energy: f64,
                selected: i64|
     -> Result<MetricRecord> {
        Ok(MetricRecord {
            scheme: cfg.scheme,
            seed: cfg.seed,
            iteration,
            slot,
            test_accuracy: learner::evaluate(model, &test_batch)?,
            train_loss: train_loss(model, &device_batches)?,
            bits_sent: bits,
            energy,
            selected_device: selected,
        })
    };
    records.push(eval(&model, 0, 0, 0.0, 0.0, -1)?);

    let mut slot: u64 = 0;
    for t in 1..=sizes.iterations {
        let grads = device_batches
            .par_iter()
            .map(|batch| learner::gradient(&model, batch))
            .collect::<Result<Vec<_>>>()?;
        let report = engine.step(&mut model, &mut adam, &grads, &mut sampler, &mut ledger)?;
        let prev_slot = slot;
        slot += u64::from(report.slots);
        let crossed = slot / cfg.eval_every > prev_slot / cfg.eval_every;
        if crossed || t == sizes.iterations {
            records.push(eval(
                &model,
                t,
                slot,
                report.bits_sent,
                report.energy,
                report.selected_device.map_or(-1, |d| d as i64),
            )?);
        }
    }

    let ledger_ok = ledger.check();
    Ok(RunOutput {
        records,
        ledger,
        ledger_ok,
    })
}

/// Result of a scheme × seed sweep.
pub struct SweepOutput {
    pub records: Vec<MetricRecord>,
    pub all_ledgers_ok: bool,
}

/// Runs every (scheme, seed) combination of the grid on top of the base
/// configuration. Runs sharing a seed share the data partition, and records
/// carry the slot index so curves align on normalized time.
pub fn run_sweep(
    base: &ExperimentConfig,
    schemes: &[SchemeKind],
    seeds: &[u64],
) -> Result<SweepOutput> {
    let mut records = Vec::new();
    let mut all_ok = true;
    for &scheme in schemes {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.scheme = scheme;
            cfg.seed = seed;
            let out = run_experiment(&cfg)?;
            all_ok &= out.ledger_ok;
            records.extend(out.records);
        }
    }
    Ok(SweepOutput {
        records,
        all_ledgers_ok: all_ok,
    })
}

/// Formats a float with six significant digits, shortest representation.
fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("rounded float");
    format!("{rounded}")
}

pub const CSV_HEADER: &str = "scheme,seed,iter,slot,test_acc,train_loss,bits_sent,energy,selected_device";

/// Renders records as CSV with a fixed column order.
pub fn render_csv(records: &[MetricRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.scheme,
            r.seed,
            r.iteration,
            r.slot,
            fmt_sig6(r.test_accuracy),
            fmt_sig6(r.train_loss),
            fmt_sig6(r.bits_sent),
            fmt_sig6(r.energy),
            r.selected_device
        );
    }
    out
}

/// Writes records to a CSV file.
pub fn emit_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    std::fs::write(path, render_csv(records))?;
    Ok(())
}
