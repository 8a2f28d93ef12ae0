//! End-to-end runs and their reports.
//!
//! A run writes three files into its output directory:
//!
//! * `report.json` — `{"format", "version", "generated_unix", "digest", "body"}`.
//!   `digest` is the FNV-1a hash (hex) of the compact JSON encoding of `body`;
//!   `body` is a pure function of the inputs and the configuration. Wall-clock
//!   data (timestamp, timings) lives outside it.
//! * `basis.fncb` — the Fourier basis, so the run can be re-scored later.
//! * `modes.fncv` — the mode eigenvectors; magic `FNCV`, u32 version, u64 t,
//!   u64 dim, then `t * dim` little-endian f64, one mode after another.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use serde::Serialize;

use crate::covariance::{check_rho, finalize, CovarianceAccumulator, DEFAULT_CHUNK};
use crate::error::{invalid, FincError, Result};
use crate::oracle::{self, ErrorRecord, MAX_ORACLE_SIZE};
use crate::rff::{sample_basis, FourierBasis};
use crate::spectral::{
    eigendecompose, extract_modes, finc_spectrum, orient_modes, rank_scores, score_matrix, Mode,
    ModeThreshold, SpectrumRoute,
};
use crate::synth::{sample_mixture, MixtureComponent, MixtureSpec};
use crate::tensor_io::{fnv1a64, DataFormat, EmbeddingSet};
use crate::tuning::{self, BandwidthSelection, TuningResult};

pub const REPORT_FORMAT: &str = "finc-report";
pub const REPORT_VERSION: u32 = 1;
pub const MODES_MAGIC: &[u8; 4] = b"FNCV";
pub const MODES_VERSION: u32 = 1;
pub const DEFAULT_FEATURES: usize = 2000;
pub const DEFAULT_TOP_MODES: usize = 10;
pub const DEFAULT_TOP_K: usize = 20;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FINC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum Bandwidth {
    Fixed(f64),
    /// Chosen by [`tuning::select_bandwidth`] on the pooled test and reference sets.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub test_path: PathBuf,
    pub ref_path: PathBuf,
    pub rho: f64,
    pub sigma2: Bandwidth,
    pub r: usize,
    pub seed: u64,
    pub top_modes: usize,
    pub top_k: usize,
    pub score_unseen: Option<PathBuf>,
    pub output: PathBuf,
    /// Input format; inferred from each file's extension when `None`.
    pub format: Option<DataFormat>,
    pub chunk: usize,
    pub route: SpectrumRoute,
    pub threshold: ModeThreshold,
}

impl RunConfig {
    pub fn new(test_path: impl Into<PathBuf>, ref_path: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        RunConfig {
            test_path: test_path.into(),
            ref_path: ref_path.into(),
            rho: 1.0,
            sigma2: Bandwidth::Auto,
            r: DEFAULT_FEATURES,
            seed: 0,
            top_modes: DEFAULT_TOP_MODES,
            top_k: DEFAULT_TOP_K,
            score_unseen: None,
            output: output.into(),
            format: None,
            chunk: DEFAULT_CHUNK,
            route: SpectrumRoute::Covariance,
            threshold: ModeThreshold::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rho(self.rho)?;
        if self.r == 0 {
            return Err(invalid("feature count must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(invalid("top-k must be at least 1"));
        }
        if self.chunk == 0 {
            return Err(invalid("chunk size must be at least 1"));
        }
        if let Bandwidth::Fixed(s) = self.sigma2 {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("sigma2 must be positive and finite, got {s}")));
            }
        }
        Ok(())
    }

    fn format_for(&self, path: &Path) -> DataFormat {
        self.format.unwrap_or_else(|| DataFormat::from_path(path))
    }
}

/// A loaded input and the FNV-1a digest of its raw file bytes.
#[derive(Debug, Clone)]
pub struct LoadedInput {
    pub set: EmbeddingSet,
    pub digest: u64,
}

pub fn load_input(path: &Path, format: DataFormat) -> Result<LoadedInput> {
    let bytes = fs::read(path).map_err(|e| FincError::io(path, e))?;
    let set = match format {
        DataFormat::Binary => EmbeddingSet::from_bytes(&bytes)?,
        DataFormat::Csv { skip_header } => EmbeddingSet::from_csv_reader(&bytes[..], skip_header)?,
    };
    Ok(LoadedInput {
        set,
        digest: fnv1a64(&bytes),
    })
}

fn check_dims(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.d() != b.d() {
        return Err(FincError::DimensionMismatch {
            expected: a.d(),
            found: b.d(),
        });
    }
    Ok(())
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub rho: f64,
    pub sigma2: f64,
    pub sigma2_source: &'static str,
    pub r: usize,
    pub seed: u64,
    pub top_modes: usize,
    pub top_k: usize,
    pub chunk: usize,
    pub route: SpectrumRoute,
    pub threshold: ModeThreshold,
    /// How modes are oriented before scoring.
    pub orientation: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputEcho {
    pub digest: String,
    pub n: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputsEcho {
    pub test: InputEcho,
    pub reference: InputEcho,
    pub unseen: Option<InputEcho>,
    pub basis_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumEcho {
    pub dim: usize,
    pub computed: usize,
    pub trace: f64,
    pub cutoff: f64,
    pub positive_count: usize,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenvectorHandle {
    pub file: String,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeEntry {
    pub rank: usize,
    pub eigenvalue: f64,
    pub eigenvector: EigenvectorHandle,
    /// Whether the eigenvector was negated by orientation.
    pub flipped: bool,
    /// `[index, score]` pairs, descending score.
    pub top_k: Vec<(usize, f64)>,
}

/// Argmax-score cluster assignment of the test samples; derived
/// functionality, not part of the core method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentSummary {
    pub derived: bool,
    /// Test samples assigned to each mode, by mode rank order.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnseenScores {
    pub digest: String,
    /// Row `i` holds the scores of unseen sample `i` against every mode.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportBody {
    pub config: ConfigEcho,
    pub inputs: InputsEcho,
    pub spectrum: SpectrumEcho,
    pub modes: Vec<ModeEntry>,
    pub assignment: Option<AssignmentSummary>,
    pub unseen: Option<UnseenScores>,
    pub tuning: Option<BandwidthSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report<B: Serialize> {
    pub format: &'static str,
    pub version: u32,
    pub generated_unix: u64,
    pub digest: String,
    pub body: B,
}

/// Hex FNV-1a over the compact JSON encoding of `body`.
pub fn body_digest<B: Serialize>(body: &B) -> Result<String> {
    let bytes = serde_json::to_vec(body).map_err(|e| FincError::Format(format!("report encoding: {e}")))?;
    Ok(hex(fnv1a64(&bytes)))
}

pub fn wrap_report<B: Serialize>(body: B) -> Result<Report<B>> {
    let generated_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(Report {
        format: REPORT_FORMAT,
        version: REPORT_VERSION,
        generated_unix,
        digest: body_digest(&body)?,
        body,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| FincError::Format(format!("report encoding: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| FincError::io(path, e))
}

pub fn mode_vectors_to_bytes(modes: &[Mode], dim: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * modes.len() * dim);
    out.extend_from_slice(MODES_MAGIC);
    out.extend_from_slice(&MODES_VERSION.to_le_bytes());
    out.extend_from_slice(&(modes.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for m in modes {
        for v in m.eigenvector.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads back the vectors written by a run, one per mode.
pub fn mode_vectors_from_bytes(bytes: &[u8]) -> Result<Vec<DVector<f64>>> {
    if bytes.len() < 24 || &bytes[..4] != MODES_MAGIC {
        return Err(FincError::Format("not a mode-vector file (bad magic or short header)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODES_VERSION {
        return Err(FincError::Format(format!("unsupported mode-vector version {version}")));
    }
    let t = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let payload = &bytes[24..];
    if t.checked_mul(dim).and_then(|c| c.checked_mul(8)) != Some(payload.len()) {
        return Err(FincError::Format(format!(
            "mode-vector payload is {} bytes, header declares {t} x {dim}",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8 * dim.max(1))
        .take(t)
        .map(|row| DVector::from_iterator(dim, row.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))))
        .collect())
}

/// In-memory result of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Report<ReportBody>,
    pub basis: FourierBasis,
    pub modes: Vec<Mode>,
    pub report_path: PathBuf,
}

/// Everything in a run that does not touch the filesystem.
pub fn analyze(
    cfg: &RunConfig,
    test: &LoadedInput,
    reference: &LoadedInput,
    unseen: Option<&LoadedInput>,
) -> Result<(ReportBody, FourierBasis, Vec<Mode>)> {
    cfg.validate()?;
    check_dims(&test.set, &reference.set)?;
    if let Some(u) = unseen {
        check_dims(&test.set, &u.set)?;
    }
    let (sigma2, tuning) = match cfg.sigma2 {
        Bandwidth::Fixed(s) => (s, None),
        Bandwidth::Auto => {
            let pool = tuning::pooled(&test.set, &reference.set)?;
            let grid = tuning::default_sigma_grid(&pool, cfg.seed);
            let sel = tuning::select_bandwidth(&pool, &grid, tuning::DEFAULT_VARIANCE_TARGET, cfg.seed)?;
            (sel.sigma2, Some(sel))
        }
    };
    let basis = sample_basis(test.set.d(), cfg.r, sigma2, cfg.seed)?;
    let spectrum = finc_spectrum(&basis, &test.set, &reference.set, cfg.rho, cfg.route, cfg.chunk)?;
    let mut modes = extract_modes(&spectrum, cfg.top_modes, cfg.threshold);
    let flipped = orient_modes(&mut modes, &basis, &test.set)?;

    let eigenvalues = spectrum.eigenvalues().to_vec();
    let cutoff = eigenvalues.first().map(|&l| cfg.threshold.cutoff(l)).unwrap_or(cfg.threshold.absolute);
    let spectrum_echo = SpectrumEcho {
        dim: basis.feature_dim(),
        computed: eigenvalues.len(),
        trace: eigenvalues.iter().sum(),
        cutoff,
        positive_count: eigenvalues.iter().filter(|&&l| l > cutoff).count(),
        eigenvalues,
    };

    let (entries, assignment) = if modes.is_empty() {
        (Vec::new(), None)
    } else {
        let scores = score_matrix(&modes, &basis, &test.set)?;
        let entries = modes
            .iter()
            .zip(&flipped)
            .enumerate()
            .map(|(k, (mode, &flipped))| {
                let column: Vec<f64> = scores.column(k).iter().copied().collect();
                ModeEntry {
                    rank: mode.rank,
                    eigenvalue: mode.eigenvalue,
                    eigenvector: EigenvectorHandle {
                        file: "modes.fncv".into(),
                        row: k,
                    },
                    flipped,
                    top_k: rank_scores(&column, cfg.top_k),
                }
            })
            .collect();
        let mut counts = vec![0; modes.len()];
        for a in crate::spectral::argmax_rows(&scores) {
            counts[a] += 1;
        }
        (entries, Some(AssignmentSummary { derived: true, counts }))
    };

    let unseen_scores = match unseen {
        Some(u) if !modes.is_empty() => {
            let s = score_matrix(&modes, &basis, &u.set)?;
            Some(UnseenScores {
                digest: hex(u.digest),
                scores: s.row_iter().map(|row| row.iter().copied().collect()).collect(),
            })
        }
        Some(u) => Some(UnseenScores {
            digest: hex(u.digest),
            scores: vec![Vec::new(); u.set.n()],
        }),
        None => None,
    };

    let echo = |l: &LoadedInput| InputEcho {
        digest: hex(l.digest),
        n: l.set.n(),
        d: l.set.d(),
    };
    let body = ReportBody {
        config: ConfigEcho {
            rho: cfg.rho,
            sigma2,
            sigma2_source: match cfg.sigma2 {
                Bandwidth::Fixed(_) => "fixed",
                Bandwidth::Auto => "auto: off-diagonal kernel variance",
            },
            r: cfg.r,
            seed: cfg.seed,
            top_modes: cfg.top_modes,
            top_k: cfg.top_k,
            chunk: cfg.chunk,
            route: cfg.route,
            threshold: cfg.threshold,
            orientation: "non-negative mean test score",
        },
        inputs: InputsEcho {
            test: echo(test),
            reference: echo(reference),
            unseen: unseen.map(echo),
            basis_digest: hex(fnv1a64(&basis.to_bytes())),
        },
        spectrum: spectrum_echo,
        modes: entries,
        assignment,
        unseen: unseen_scores,
        tuning,
    };
    Ok((body, basis, modes))
}

/// Loads the inputs, runs the pipeline, and writes `report.json`,
/// `basis.fncb`, and `modes.fncv` into `cfg.output`.
pub fn run_differential_clustering(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let test = load_input(&cfg.test_path, cfg.format_for(&cfg.test_path))?;
    let reference = load_input(&cfg.ref_path, cfg.format_for(&cfg.ref_path))?;
    let unseen = match &cfg.score_unseen {
        Some(p) => Some(load_input(p, cfg.format_for(p))?),
        None => None,
    };
    let (body, basis, modes) = analyze(cfg, &test, &reference, unseen.as_ref())?;
    fs::create_dir_all(&cfg.output).map_err(|e| FincError::io(&cfg.output, e))?;
    basis.save(&cfg.output.join("basis.fncb"))?;
    let modes_path = cfg.output.join("modes.fncv");
    fs::write(&modes_path, mode_vectors_to_bytes(&modes, basis.feature_dim()))
        .map_err(|e| FincError::io(&modes_path, e))?;
    let report = wrap_report(body)?;
    let report_path = cfg.output.join("report.json");
    write_json(&report, &report_path)?;
    Ok(RunOutcome {
        report,
        basis,
        modes,
        report_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneBody {
    pub test: InputEcho,
    pub reference: InputEcho,
    pub rho: f64,
    pub seed: u64,
    pub candidates: Vec<usize>,
    pub statistic: &'static str,
    pub error_estimate: &'static str,
    pub result: TuningResult,
}

/// Bandwidth and feature-count selection; writes `tuning.json`.
pub fn run_tune(cfg: &RunConfig, candidates: &[usize]) -> Result<Report<TuneBody>> {
    check_rho(cfg.rho)?;
    let test = load_input(&cfg.test_path, cfg.format_for(&cfg.test_path))?;
    let reference = load_input(&cfg.ref_path, cfg.format_for(&cfg.ref_path))?;
    check_dims(&test.set, &reference.set)?;
    let result = tuning::tune(&test.set, &reference.set, cfg.rho, candidates, cfg.seed)?;
    let echo = |l: &LoadedInput| InputEcho {
        digest: hex(l.digest),
        n: l.set.n(),
        d: l.set.d(),
    };
    let report = wrap_report(TuneBody {
        test: echo(&test),
        reference: echo(&reference),
        rho: cfg.rho,
        seed: cfg.seed,
        candidates: candidates.to_vec(),
        statistic: "variance of off-diagonal Gaussian kernel values on a fixed pair subsample",
        error_estimate: "split-seed relative top-eigenvalue discrepancy",
        result,
    })?;
    fs::create_dir_all(&cfg.output).map_err(|e| FincError::io(&cfg.output, e))?;
    write_json(&report, &cfg.output.join("tuning.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleBody {
    pub test: InputEcho,
    pub reference: InputEcho,
    pub rho: f64,
    pub sigma2: f64,
    pub r: usize,
    pub seed: u64,
    pub top: usize,
    pub exact_top: Vec<f64>,
    pub finc_top: Vec<f64>,
    /// l2 gap over the top eigenvalues.
    pub top_l2_gap: f64,
    pub top_max_gap: f64,
    /// l2 gap over the full zero-padded spectra.
    pub full_l2_gap: f64,
    /// Max gap between the factor and square-root oracle routes.
    pub oracle_route_gap: f64,
    pub profile: Vec<ErrorRecord>,
}

/// FINC against the exact-kernel oracle at `cfg`'s settings, plus an error
/// profile over `profile_r` for each of `profile_seeds`; writes `oracle.json`.
/// A `Bandwidth::Auto` config is tuned as in a run.
pub fn run_oracle_check(
    cfg: &RunConfig,
    max_size: usize,
    profile_r: &[usize],
    profile_seeds: &[u64],
) -> Result<Report<OracleBody>> {
    cfg.validate()?;
    if max_size > MAX_ORACLE_SIZE {
        return Err(invalid(format!("max size {max_size} exceeds the oracle limit {MAX_ORACLE_SIZE}")));
    }
    let test = load_input(&cfg.test_path, cfg.format_for(&cfg.test_path))?;
    let reference = load_input(&cfg.ref_path, cfg.format_for(&cfg.ref_path))?;
    check_dims(&test.set, &reference.set)?;
    let size = test.set.n() + reference.set.n();
    if size > max_size {
        return Err(FincError::SizeGuard { size, limit: max_size });
    }
    let sigma2 = match cfg.sigma2 {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Auto => {
            let pool = tuning::pooled(&test.set, &reference.set)?;
            let grid = tuning::default_sigma_grid(&pool, cfg.seed);
            tuning::select_bandwidth(&pool, &grid, tuning::DEFAULT_VARIANCE_TARGET, cfg.seed)?.sigma2
        }
    };
    let (x, y) = (&test.set, &reference.set);
    let joint = oracle::joint_kernel_matrix(x, y, cfg.rho, sigma2)?;
    let exact = oracle::sqrt_similarity_eigenvalues(&joint)?;
    let factor = joint.conditional().eigenvalues()?;
    let (_, oracle_route_gap) = oracle::spectrum_gap(&exact, &factor);
    let basis = sample_basis(x.d(), cfg.r, sigma2, cfg.seed)?;
    let finc = finc_spectrum(&basis, x, y, cfg.rho, SpectrumRoute::pick(&basis, x.n(), y.n()), cfg.chunk)?;
    let top = cfg.top_modes.max(1);
    let pad = |v: &[f64]| (0..top).map(|i| v.get(i).copied().unwrap_or(0.0)).collect::<Vec<_>>();
    let (exact_top, finc_top) = (pad(&exact), pad(finc.eigenvalues()));
    let (top_l2_gap, top_max_gap) = oracle::spectrum_gap(&exact_top, &finc_top);
    let (full_l2_gap, _) = oracle::spectrum_gap(&exact, finc.eigenvalues());
    let mut profile = Vec::new();
    for &seed in profile_seeds {
        profile.extend(oracle::error_profile_against(&exact, x, y, cfg.rho, sigma2, profile_r, seed, top)?);
    }
    let echo = |l: &LoadedInput| InputEcho {
        digest: hex(l.digest),
        n: l.set.n(),
        d: l.set.d(),
    };
    let report = wrap_report(OracleBody {
        test: echo(&test),
        reference: echo(&reference),
        rho: cfg.rho,
        sigma2,
        r: cfg.r,
        seed: cfg.seed,
        top,
        exact_top,
        finc_top,
        top_l2_gap,
        top_max_gap,
        full_l2_gap,
        oracle_route_gap,
        profile,
    })?;
    fs::create_dir_all(&cfg.output).map_err(|e| FincError::io(&cfg.output, e))?;
    write_json(&report, &cfg.output.join("oracle.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub n: usize,
    pub accumulate_secs: f64,
    pub finalize_secs: f64,
    pub eigendecompose_secs: f64,
    pub total_secs: f64,
    /// Total time relative to the previous size; `None` for the first.
    pub ratio: Option<f64>,
    /// Resident bytes of the two accumulators.
    pub accumulator_bytes: usize,
}

/// Two well-separated unit-scale components in `d` dimensions with the given
/// first-component weight.
pub fn bench_mixture(d: usize, weight: f64) -> Result<MixtureSpec> {
    let mut far = vec![0.0; d];
    far[0] = 6.0;
    MixtureSpec::new(
        d,
        vec![
            MixtureComponent {
                mean: vec![0.0; d],
                scale: 1.0,
                weight,
            },
            MixtureComponent {
                mean: far,
                scale: 1.0,
                weight: 1.0 - weight,
            },
        ],
    )
}

/// Default timed repetitions per size in [`run_bench`].
pub const DEFAULT_BENCH_REPEATS: usize = 9;

fn time_pipeline(basis: &FourierBasis, x: &EmbeddingSet, y: &EmbeddingSet, chunk: usize) -> Result<BenchRecord> {
    let start = Instant::now();
    let mut acc_x = CovarianceAccumulator::for_basis(basis);
    acc_x.accumulate_set(basis, x, chunk)?;
    let mut acc_y = CovarianceAccumulator::for_basis(basis);
    acc_y.accumulate_set(basis, y, chunk)?;
    let accumulate_secs = start.elapsed().as_secs_f64();
    let t = Instant::now();
    let cond = finalize(&acc_x, &acc_y, 1.0)?;
    let finalize_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let spectrum = eigendecompose(&cond)?;
    let eigendecompose_secs = t.elapsed().as_secs_f64();
    std::hint::black_box(spectrum.eigenvalues().first());
    Ok(BenchRecord {
        n: x.n(),
        accumulate_secs,
        finalize_secs,
        eigendecompose_secs,
        total_secs: start.elapsed().as_secs_f64(),
        ratio: None,
        accumulator_bytes: acc_x.footprint_bytes() + acc_y.footprint_bytes(),
    })
}

/// Times accumulate + finalize + eigendecompose with both sets of size `n`,
/// for each `n` in `sizes`. Bandwidth is `d` (unit-scale data). One untimed
/// warm-up pass at the first size precedes the measurements. Repetitions are
/// interleaved across sizes (round-robin, `repeats` rounds) so background
/// load spreads over all sizes, and the fastest repetition of each size is
/// reported.
pub fn run_bench(
    sizes: &[usize],
    d: usize,
    r: usize,
    seed: u64,
    chunk: usize,
    repeats: usize,
) -> Result<Vec<BenchRecord>> {
    if d == 0 || r == 0 || chunk == 0 || repeats == 0 {
        return Err(invalid("bench needs d, r, chunk and repeats of at least 1"));
    }
    let basis = sample_basis(d, r, d as f64, seed)?;
    let test_spec = bench_mixture(d, 0.7)?;
    let ref_spec = bench_mixture(d, 0.3)?;
    let sets = sizes
        .iter()
        .map(|&n| {
            Ok((
                sample_mixture(&test_spec, n, seed.wrapping_add(1))?,
                sample_mixture(&ref_spec, n, seed.wrapping_add(2))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some((x, y)) = sets.first() {
        time_pipeline(&basis, x, y, chunk)?;
    }
    let mut best: Vec<Option<BenchRecord>> = vec![None; sizes.len()];
    for _ in 0..repeats {
        for ((x, y), slot) in sets.iter().zip(best.iter_mut()) {
            let record = time_pipeline(&basis, x, y, chunk)?;
            if slot.as_ref().is_none_or(|b| record.total_secs < b.total_secs) {
                *slot = Some(record);
            }
        }
    }
    let mut out: Vec<BenchRecord> = Vec::with_capacity(sizes.len());
    for mut record in best.into_iter().flatten() {
        record.ratio = out.last().map(|prev| record.total_secs / prev.total_secs);
        out.push(record);
    }
    Ok(out)
}

/// Builds a pool with `threads` workers (all cores when `None`) and runs `f` in it.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| invalid(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Worker cap from [`THREADS_ENV`]; unset means no cap.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t >= 1)
            .map(Some)
            .ok_or_else(|| invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}
