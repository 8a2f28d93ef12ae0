//! Labeled Gaussian mixtures with planted novel components.
//!
//! Component means sit on an axis-aligned lattice `{0, 1, 2}^d` scaled by the
//! separation, so any two means are at least `separation` apart. Sample `i`
//! of a set draws from its own random stream, so generation order (and
//! parallelism) does not affect the output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{invalid, FincError, Result};
use crate::rng::Stream;
use crate::tensor_io::{save_embeddings, save_embeddings_csv, save_labels, DataFormat, EmbeddingSet};

/// Sample streams start here, leaving low stream ids (used for bases) alone.
const SAMPLE_STREAM_BASE: u64 = 1 << 32;
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const TEST_SALT: u64 = 0x7465_7374;
const REFERENCE_SALT: u64 = 0x7265_6665;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub scale: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub d: usize,
    pub components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn new(d: usize, components: Vec<MixtureComponent>) -> Result<Self> {
        let spec = MixtureSpec { d, components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.components.is_empty() {
            return Err(invalid("mixture needs d >= 1 and at least one component"));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != self.d {
                return Err(FincError::DimensionMismatch {
                    expected: self.d,
                    found: c.mean.len(),
                });
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(invalid(format!("component {k} has non-positive scale {}", c.scale)));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) || c.mean.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("component {k} has an invalid weight or mean")));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

fn draw_point(spec: &MixtureSpec, component: usize, s: &mut Stream) -> Vec<f32> {
    let c = &spec.components[component];
    c.mean.iter().map(|&mu| (mu + c.scale * s.normal()) as f32).collect()
}

fn choose_component(spec: &MixtureSpec, u: f64) -> usize {
    let mut acc = 0.0;
    for (k, c) in spec.components.iter().enumerate() {
        acc += c.weight;
        if u <= acc {
            return k;
        }
    }
    // Rounding in the cumulative sum: fall back to the last weighted component.
    spec.components.iter().rposition(|c| c.weight > 0.0).unwrap_or(0)
}

fn assemble(spec: &MixtureSpec, labels: Vec<i64>, points: Vec<Vec<f32>>) -> Result<EmbeddingSet> {
    let n = points.len();
    let data = points.into_iter().flatten().collect();
    EmbeddingSet::new(n, spec.d, data)?.with_labels(labels)
}

/// `n` i.i.d. draws; sample `i` uses stream `2^32 + i` of `seed`, drawing one
/// uniform for the component and then `d` normals.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<EmbeddingSet> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let drawn: Vec<(i64, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = Stream::new(seed, SAMPLE_STREAM_BASE + i as u64);
            let k = choose_component(spec, s.uniform());
            (k as i64, draw_point(spec, k, &mut s))
        })
        .collect();
    let (labels, points) = drawn.into_iter().unzip();
    assemble(spec, labels, points)
}

/// Largest-remainder apportionment of `n` samples to `weights`.
pub fn exact_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

/// Draws exactly `exact_counts(weights, n)` samples per component in a
/// seeded random order; sample `i` uses stream `2^32 + i`.
pub fn sample_stratified(spec: &MixtureSpec, n: usize, seed: u64) -> Result<EmbeddingSet> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let weights: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
    let mut labels: Vec<i64> = exact_counts(&weights, n)
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k as i64, c))
        .collect();
    let mut s = Stream::new(seed, SHUFFLE_STREAM);
    for i in (1..labels.len()).rev() {
        let j = s.below(i as u64 + 1) as usize;
        labels.swap(i, j);
    }
    let points: Vec<Vec<f32>> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut s = Stream::new(seed, SAMPLE_STREAM_BASE + i as u64);
            draw_point(spec, k as usize, &mut s)
        })
        .collect();
    assemble(spec, labels, points)
}

/// Number of distinct lattice points in dimension `d`, saturating.
pub fn lattice_capacity(d: usize) -> usize {
    3usize.checked_pow(d as u32).unwrap_or(usize::MAX)
}

/// Lattice point `k`: base-3 digits of `k`, least significant first, times `separation`.
pub fn lattice_means(count: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if count > lattice_capacity(d) {
        return Err(invalid(format!(
            "{count} components exceed the lattice capacity 3^{d} = {}",
            lattice_capacity(d)
        )));
    }
    Ok((0..count)
        .map(|k| {
            let mut rest = k;
            (0..d)
                .map(|_| {
                    let digit = rest % 3;
                    rest /= 3;
                    digit as f64 * separation
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedScenario {
    pub test: EmbeddingSet,
    pub reference: EmbeddingSet,
    /// Component ids `k_common .. k_common + k_novel`.
    pub novel_labels: Vec<i64>,
    pub rho_star: f64,
    pub test_weights: Vec<f64>,
    pub reference_weights: Vec<f64>,
    pub params: ScenarioParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub k_common: usize,
    pub k_novel: usize,
    pub rho_star: f64,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub separation: f64,
    pub seed: u64,
}

impl ScenarioParams {
    /// Unit-scale defaults for everything but the component counts.
    pub fn new(k_common: usize, k_novel: usize) -> Self {
        ScenarioParams {
            k_common,
            k_novel,
            rho_star: f64::INFINITY,
            n: 3000,
            m: 3000,
            d: 16,
            separation: 20.0,
            seed: 0,
        }
    }
}

/// Empirical label frequencies of a labeled set.
pub fn label_frequencies(set: &EmbeddingSet) -> BTreeMap<i64, f64> {
    let mut out = BTreeMap::new();
    if let Some(labels) = set.labels() {
        for &l in labels {
            *out.entry(l).or_insert(0.0) += 1.0;
        }
        for v in out.values_mut() {
            *v /= labels.len() as f64;
        }
    }
    out
}

impl PlantedScenario {
    /// Empirical test/reference frequency ratio of each novel label
    /// (infinite when the label is absent from the reference).
    pub fn empirical_ratios(&self) -> Vec<(i64, f64)> {
        let ft = label_frequencies(&self.test);
        let fr = label_frequencies(&self.reference);
        self.novel_labels
            .iter()
            .map(|l| {
                let t = ft.get(l).copied().unwrap_or(0.0);
                let r = fr.get(l).copied().unwrap_or(0.0);
                (*l, if r == 0.0 { f64::INFINITY } else { t / r })
            })
            .collect()
    }

    /// Swaps test and reference.
    pub fn reversed(&self) -> PlantedScenario {
        PlantedScenario {
            test: self.reference.clone(),
            reference: self.test.clone(),
            test_weights: self.reference_weights.clone(),
            reference_weights: self.test_weights.clone(),
            ..self.clone()
        }
    }
}

/// Test weights: each common component gets `1 / (k_common + k_novel)`; the
/// novel components share the remaining `k_novel / (k_common + k_novel)` in
/// proportion `k_novel, k_novel + 1, ..., 2 k_novel - 1`. Graded novel
/// weights keep the novel eigenvalues apart: with equal weights the novel
/// eigenspace is degenerate and its eigenvectors are arbitrary rotations
/// mixing several clusters. With
/// `rho_star = inf` the reference is uniform over the common components only;
/// with finite `rho_star >= 1` each novel component gets reference weight
/// `w_test / rho_star` and the common components share the remainder equally.
/// Unit component scale throughout. Counts per component are apportioned
/// exactly (largest remainder) rather than drawn.
pub fn make_planted_scenario(p: ScenarioParams) -> Result<PlantedScenario> {
    let total = p.k_common + p.k_novel;
    if p.k_common == 0 {
        return Err(invalid("planted scenario needs at least one common component"));
    }
    if p.rho_star.is_nan() || p.rho_star < 1.0 {
        return Err(invalid(format!("rho_star must be at least 1, got {}", p.rho_star)));
    }
    if !(p.separation > 0.0 && p.separation.is_finite()) {
        return Err(invalid("separation must be positive and finite"));
    }
    let means = lattice_means(total, p.d, p.separation)?;
    let test_weights = planted_test_weights(p.k_common, p.k_novel);
    let novel_ref: Vec<f64> = test_weights[p.k_common..]
        .iter()
        .map(|w| if p.rho_star.is_infinite() { 0.0 } else { w / p.rho_star })
        .collect();
    let common_ref = (1.0 - novel_ref.iter().sum::<f64>()) / p.k_common as f64;
    let reference_weights: Vec<f64> = std::iter::repeat_n(common_ref, p.k_common).chain(novel_ref).collect();
    let spec_with = |weights: &[f64]| -> Result<MixtureSpec> {
        let components = means
            .iter()
            .zip(weights)
            .map(|(mean, &weight)| MixtureComponent {
                mean: mean.clone(),
                scale: 1.0,
                weight,
            })
            .collect();
        // Normalize away rounding so validation's 1e-12 check always holds.
        let mut spec = MixtureSpec { d: p.d, components };
        let sum: f64 = spec.components.iter().map(|c| c.weight).sum();
        spec.components.iter_mut().for_each(|c| c.weight /= sum);
        spec.validate()?;
        Ok(spec)
    };
    let test = sample_stratified(&spec_with(&test_weights)?, p.n, p.seed ^ TEST_SALT)?;
    let reference = sample_stratified(&spec_with(&reference_weights)?, p.m, p.seed ^ REFERENCE_SALT)?;
    Ok(PlantedScenario {
        test,
        reference,
        novel_labels: (p.k_common..total).map(|k| k as i64).collect(),
        rho_star: p.rho_star,
        test_weights,
        reference_weights,
        params: p,
    })
}

/// Test-side component weights of a planted scenario; see [`make_planted_scenario`].
pub fn planted_test_weights(k_common: usize, k_novel: usize) -> Vec<f64> {
    let total = (k_common + k_novel) as f64;
    let ramp = (k_novel * (3 * k_novel).saturating_sub(1)) as f64 / 2.0;
    (0..k_common)
        .map(|_| 1.0 / total)
        .chain((0..k_novel).map(|j| (k_novel as f64 / total) * (k_novel + j) as f64 / ramp))
        .collect()
}

/// Paths written by [`write_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFiles {
    pub test: PathBuf,
    pub reference: PathBuf,
    pub test_labels: PathBuf,
    pub reference_labels: PathBuf,
    pub manifest: PathBuf,
}

pub fn manifest_text(s: &PlantedScenario, files: &ScenarioFiles) -> String {
    let p = &s.params;
    let join = |v: &[f64]| v.iter().map(|w| format!("{w}")).collect::<Vec<_>>().join(",");
    let name = |path: &Path| path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = String::new();
    let _ = writeln!(out, "k_common={}", p.k_common);
    let _ = writeln!(out, "k_novel={}", p.k_novel);
    let _ = writeln!(out, "rho_star={}", p.rho_star);
    let _ = writeln!(out, "n={}", p.n);
    let _ = writeln!(out, "m={}", p.m);
    let _ = writeln!(out, "d={}", p.d);
    let _ = writeln!(out, "separation={}", p.separation);
    let _ = writeln!(out, "scale=1");
    let _ = writeln!(out, "seed={}", p.seed);
    let _ = writeln!(
        out,
        "novel_labels={}",
        s.novel_labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(out, "test_weights={}", join(&s.test_weights));
    let _ = writeln!(out, "reference_weights={}", join(&s.reference_weights));
    let _ = writeln!(out, "test={}", name(&files.test));
    let _ = writeln!(out, "reference={}", name(&files.reference));
    let _ = writeln!(out, "test_labels={}", name(&files.test_labels));
    let _ = writeln!(out, "reference_labels={}", name(&files.reference_labels));
    let _ = writeln!(out, "test_digest={:016x}", s.test.digest());
    let _ = writeln!(out, "reference_digest={:016x}", s.reference.digest());
    out
}

/// Writes both sets, their label sidecars, and `manifest.txt` into `dir`.
pub fn write_scenario(s: &PlantedScenario, dir: &Path, format: DataFormat) -> Result<ScenarioFiles> {
    std::fs::create_dir_all(dir).map_err(|e| FincError::io(dir, e))?;
    let ext = match format {
        DataFormat::Binary => "fnc1",
        DataFormat::Csv { .. } => "csv",
    };
    let files = ScenarioFiles {
        test: dir.join(format!("test.{ext}")),
        reference: dir.join(format!("reference.{ext}")),
        test_labels: dir.join("test.labels"),
        reference_labels: dir.join("reference.labels"),
        manifest: dir.join("manifest.txt"),
    };
    for (set, path, labels) in [
        (&s.test, &files.test, &files.test_labels),
        (&s.reference, &files.reference, &files.reference_labels),
    ] {
        match format {
            DataFormat::Binary => save_embeddings(set, path)?,
            DataFormat::Csv { .. } => save_embeddings_csv(set, path)?,
        }
        save_labels(set.labels().unwrap_or(&[]), labels)?;
    }
    std::fs::write(&files.manifest, manifest_text(s, &files)).map_err(|e| FincError::io(&files.manifest, e))?;
    Ok(files)
}
