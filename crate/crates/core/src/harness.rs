//! Instance generators, the exact small-instance oracle, baselines, and
//! benchmark reporting.
//!
//! All randomness flows from a single 64-bit seed through named ChaCha8
//! streams, so every artifact is reproducible byte for byte. Instances are
//! meant to be persisted before runs; cross-implementation comparisons go
//! through the serialized file, not the generator.

use crate::error::{Error, Result};
use crate::instance::{build_instance, HFunction, Instance};
use crate::presets::sub_gaussian_envelope;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Stream ids carving independent RNGs out of one seed.
pub mod streams {
    pub const INSTANCE: u64 = 0;
    pub const BASELINE: u64 = 2;
    pub const VERIFY: u64 = 3;
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenKind {
    /// Dense 0/1 matrix with the given fill probability.
    SpencerRandom { m: usize, n: usize, density: f64 },
    /// Gaussian columns normalized to unit Euclidean norm.
    KomlosRandomColumns { m: usize, n: usize },
    /// Each column has exactly k ones in random rows.
    KRegularHypergraph { n: usize, m: usize, k: usize },
    Gaussian { m: usize, n: usize, sigma: f64 },
    /// Columns uniform in the unit ball of R^m.
    UniformBall { m: usize, n: usize },
    /// Unit columns plus Gaussian noise; parts retrievable separately.
    SemiRandomKomlos { m: usize, n: usize, sigma: f64 },
    /// k-regular hypergraph with up to t random 0/1 toggles per column.
    CorruptedHypergraph { n: usize, m: usize, k: usize, t: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GenKind,
    pub seed: u64,
}

/// Box-Muller standard normal; one sampler is not worth a dependency.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen::<f64>();
        let v: f64 = rng.gen::<f64>();
        if u > f64::MIN_POSITIVE {
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}

fn gaussian_matrix<R: Rng>(m: usize, n: usize, sigma: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..n).map(|_| sigma * standard_normal(rng)).collect())
        .collect()
}

/// Normalize a column (stored across rows) to Euclidean norm exactly <= 1.
fn normalize_column(rows: &mut [Vec<f64>], j: usize) {
    for _ in 0..4 {
        let norm: f64 = rows.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return;
        }
        for r in rows.iter_mut() {
            r[j] /= norm;
        }
        let check: f64 = rows.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
        if check <= 1.0 {
            return;
        }
    }
}

fn komlos_columns<R: Rng>(m: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows = gaussian_matrix(m, n, 1.0, rng);
    for j in 0..n {
        normalize_column(&mut rows, j);
    }
    rows
}

fn k_regular<R: Rng>(n: usize, m: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if k > m {
        return Err(Error::InfeasibleSpec(format!("k={k} ones per column need k <= m={m}")));
    }
    let mut rows = vec![vec![0.0f64; n]; m];
    let mut idx: Vec<usize> = (0..m).collect();
    for j in 0..n {
        for i in 0..k {
            let pick = rng.gen_range(i..m);
            idx.swap(i, pick);
        }
        for &i in &idx[..k] {
            rows[i][j] = 1.0;
        }
    }
    Ok(rows)
}

/// Generate the instance for a spec. Deterministic per (kind, seed).
pub fn generate(spec: &GeneratorSpec) -> Result<Instance> {
    check_spec(&spec.kind)?;
    let mut rng = seeded_rng(spec.seed, streams::INSTANCE);
    match spec.kind {
        GenKind::SpencerRandom { m, n, density } => {
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    (0..n)
                        .map(|_| if rng.gen::<f64>() < density { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect();
            build_instance(rows, HFunction::constant(1.0))
        }
        GenKind::KomlosRandomColumns { m, n } => {
            build_instance(komlos_columns(m, n, &mut rng), HFunction::constant(1.0))
        }
        GenKind::KRegularHypergraph { n, m, k } => {
            build_instance(k_regular(n, m, k, &mut rng)?, HFunction::constant(1.0))
        }
        GenKind::Gaussian { m, n, sigma } => {
            let rows = gaussian_matrix(m, n, sigma, &mut rng);
            let h = if sigma > 0.0 {
                sub_gaussian_envelope(n, m, sigma)
            } else {
                HFunction::constant(0.0)
            };
            build_instance(rows, h)
        }
        GenKind::UniformBall { m, n } => {
            let mut rows = gaussian_matrix(m, n, 1.0, &mut rng);
            for j in 0..n {
                normalize_column(&mut rows, j);
                let radius = rng.gen::<f64>().powf(1.0 / m as f64);
                for r in rows.iter_mut() {
                    r[j] *= radius;
                }
            }
            build_instance(rows, sub_gaussian_envelope(n, m, (1.0 / (m as f64).sqrt()).sqrt()))
        }
        GenKind::SemiRandomKomlos { .. } => Ok(semi_random_parts(spec)?.sum),
        GenKind::CorruptedHypergraph { .. } => Ok(corrupted_parts(spec)?.sum),
    }
}

fn check_spec(kind: &GenKind) -> Result<()> {
    let (m, n) = match *kind {
        GenKind::SpencerRandom { m, n, density } => {
            if !(0.0..=1.0).contains(&density) {
                return Err(Error::InfeasibleSpec(format!("density {density} outside [0,1]")));
            }
            (m, n)
        }
        GenKind::KomlosRandomColumns { m, n } => (m, n),
        GenKind::KRegularHypergraph { n, m, k } => {
            if k == 0 || k > m {
                return Err(Error::InfeasibleSpec(format!("need 1 <= k <= m, got k={k} m={m}")));
            }
            (m, n)
        }
        GenKind::Gaussian { m, n, sigma } => {
            if sigma < 0.0 {
                return Err(Error::InfeasibleSpec("sigma must be >= 0".into()));
            }
            (m, n)
        }
        GenKind::UniformBall { m, n } => (m, n),
        GenKind::SemiRandomKomlos { m, n, sigma } => {
            if sigma < 0.0 {
                return Err(Error::InfeasibleSpec("sigma must be >= 0".into()));
            }
            (m, n)
        }
        GenKind::CorruptedHypergraph { n, m, k, t } => {
            if k == 0 || k > m {
                return Err(Error::InfeasibleSpec(format!("need 1 <= k <= m, got k={k} m={m}")));
            }
            if t > m {
                return Err(Error::InfeasibleSpec(format!("t={t} toggles exceed m={m}")));
            }
            (m, n)
        }
    };
    if m == 0 || n < 3 {
        return Err(Error::InfeasibleSpec(format!("need m >= 1 and n >= 3, got m={m} n={n}")));
    }
    Ok(())
}

/// Structured generators expose their parts for the two-matrix walk.
#[derive(Debug, Clone)]
pub struct TwoPartInstance {
    pub part_a: Instance,
    pub part_b: Instance,
    pub sum: Instance,
}

/// Unit-column matrix C, noise matrix R, and C + R.
pub fn semi_random_parts(spec: &GeneratorSpec) -> Result<TwoPartInstance> {
    let GenKind::SemiRandomKomlos { m, n, sigma } = spec.kind else {
        return Err(Error::InfeasibleSpec("spec is not semi_random_komlos".into()));
    };
    check_spec(&spec.kind)?;
    let mut rng = seeded_rng(spec.seed, streams::INSTANCE);
    let c_rows = komlos_columns(m, n, &mut rng);
    let r_rows = gaussian_matrix(m, n, sigma, &mut rng);
    let sum_rows: Vec<Vec<f64>> = c_rows
        .iter()
        .zip(&r_rows)
        .map(|(c, r)| c.iter().zip(r).map(|(a, b)| a + b).collect())
        .collect();
    let h_noise = if sigma > 0.0 {
        sub_gaussian_envelope(n, m, sigma)
    } else {
        HFunction::constant(0.0)
    };
    // Valid envelope for the sum: (c+r)^2 <= 2c^2 + 2r^2.
    let h_sum = match &h_noise {
        HFunction::Constant { value } => HFunction::constant(2.0 + 2.0 * value),
        HFunction::Tabulated { values } => HFunction::Tabulated {
            values: values.iter().map(|&(s, v)| (s, 2.0 + 2.0 * v)).collect(),
        },
        other => other.clone(),
    };
    let part_a = build_instance(c_rows, HFunction::constant(1.0))?;
    let part_b = build_instance(r_rows, h_noise)?;
    let sum = build_instance(sum_rows, h_sum)?;
    Ok(TwoPartInstance { part_a, part_b, sum })
}

/// k-regular hypergraph A, sparse 0/+-1 corruption C, and A + C (still 0/1).
pub fn corrupted_parts(spec: &GeneratorSpec) -> Result<TwoPartInstance> {
    let GenKind::CorruptedHypergraph { n, m, k, t } = spec.kind else {
        return Err(Error::InfeasibleSpec("spec is not corrupted_hypergraph".into()));
    };
    check_spec(&spec.kind)?;
    let mut rng = seeded_rng(spec.seed, streams::INSTANCE);
    let a_rows = k_regular(n, m, k, &mut rng)?;
    let mut c_rows = vec![vec![0.0f64; n]; m];
    let mut sum_rows = a_rows.clone();
    for j in 0..n {
        let toggles = rng.gen_range(0..=t);
        for _ in 0..toggles {
            let i = rng.gen_range(0..m);
            // Toggle membership: adds where absent, deletes where present.
            let delta = if sum_rows[i][j] == 0.0 { 1.0 } else { -1.0 };
            sum_rows[i][j] += delta;
            c_rows[i][j] += delta;
        }
    }
    let part_a = build_instance(a_rows, HFunction::constant(1.0))?;
    let part_b = build_instance(c_rows, HFunction::constant(1.0))?;
    let sum = build_instance(sum_rows, HFunction::constant(1.0))?;
    Ok(TwoPartInstance { part_a, part_b, sum })
}

pub const BRUTE_FORCE_MAX_N: usize = 20;

/// Exact discrepancy by Gray-code enumeration over half the cube (the
/// objective is symmetric under global sign flip). Returns the optimum and
/// a witness coloring.
pub fn brute_force_disc(inst: &Instance) -> Result<(f64, Vec<i8>)> {
    let n = inst.n;
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::TooLarge { n, max: BRUTE_FORCE_MAX_N });
    }
    let m = inst.m;
    // Row sums for the all-ones coloring.
    let mut sums: Vec<f64> = inst.rows.iter().map(|r| r.iter().sum()).collect();
    let mut x = vec![1i8; n];
    let eval = |sums: &[f64]| sums.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    let mut best = eval(&sums);
    let mut witness = x.clone();
    // Fix x[n-1] = +1 and Gray-walk the remaining n-1 coordinates.
    let steps = 1u64 << (n - 1);
    for g in 1..steps {
        let bit = g.trailing_zeros() as usize;
        let flip = -2.0 * x[bit] as f64;
        x[bit] = -x[bit];
        for i in 0..m {
            sums[i] += flip * inst.rows[i][bit];
        }
        let v = eval(&sums);
        if v < best {
            best = v;
            witness = x.clone();
        }
    }
    Ok((best, witness))
}

/// Best max-imbalance over uniformly random colorings.
pub fn baseline_random(inst: &Instance, seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed, streams::BASELINE);
    let mut best = f64::INFINITY;
    for _ in 0..trials.max(1) {
        let x: Vec<f64> = (0..inst.n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let disc = inst
            .rows
            .iter()
            .map(|r| crate::linalg::dot(r, &x).abs())
            .fold(0.0f64, f64::max);
        best = best.min(disc);
    }
    best
}

/// Deterministic greedy baseline: color coordinates left to right, each time
/// choosing the sign minimizing the current worst partial imbalance.
pub fn baseline_greedy(inst: &Instance) -> f64 {
    let mut sums = vec![0.0f64; inst.m];
    for j in 0..inst.n {
        let score = |sign: f64, sums: &[f64]| {
            inst.rows
                .iter()
                .zip(sums)
                .map(|(r, &s)| (s + sign * r[j]).abs())
                .fold(0.0f64, f64::max)
        };
        let sign = if score(1.0, &sums) <= score(-1.0, &sums) { 1.0 } else { -1.0 };
        for (i, row) in inst.rows.iter().enumerate() {
            sums[i] += sign * row[j];
        }
    }
    sums.iter().fold(0.0f64, |a, &s| a.max(s.abs()))
}

/// Per-row |<a_i, x>| and the maximum, for a sign vector.
pub fn evaluate_discrepancy(inst: &Instance, x: &[i8]) -> Result<(Vec<f64>, f64)> {
    if x.len() != inst.n {
        return Err(Error::Malformed(format!(
            "coloring length {} != n={}",
            x.len(),
            inst.n
        )));
    }
    if let Some(j) = x.iter().position(|&v| v != 1 && v != -1) {
        return Err(Error::NotSignVector { coord: j });
    }
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let per: Vec<f64> = inst
        .rows
        .iter()
        .map(|r| crate::linalg::dot(r, &xf).abs())
        .collect();
    let max = per.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok((per, max))
}

pub const BENCH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub schema: u32,
    pub generator: String,
    pub preset: String,
    pub n: usize,
    pub m: usize,
    pub disc: f64,
    pub certified_bound: f64,
    pub baseline_random_disc: f64,
    pub baseline_greedy_disc: f64,
    pub phi_max: f64,
    pub warnings: usize,
    pub wall_ms: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "schema,generator,preset,n,m,disc,certified_bound,baseline_random_disc,baseline_greedy_disc,phi_max,warnings,wall_ms,seed\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.schema,
                r.generator,
                r.preset,
                r.n,
                r.m,
                r.disc,
                r.certified_bound,
                r.baseline_random_disc,
                r.baseline_greedy_disc,
                r.phi_max,
                r.warnings,
                r.wall_ms,
                r.seed
            ));
        }
        out
    }
}

/// One bench cell: generate, run with a preset, compare against baselines.
#[derive(Debug, Clone)]
pub struct BenchCell {
    pub spec: GeneratorSpec,
    pub preset: crate::presets::Preset,
    pub baseline_trials: usize,
}

pub fn run_bench(cells: &[BenchCell]) -> Result<BenchReport> {
    let results: Vec<Result<BenchRow>> = cells
        .par_iter()
        .map(|cell| {
            let inst = generate(&cell.spec)?;
            let preset = crate::presets::apply_preset(&inst, cell.preset)?;
            let mut cfg = preset.config.clone();
            cfg.seed = cell.spec.seed;
            let out = crate::walk::run_pipeline(&inst, &cfg)?;
            Ok(BenchRow {
                schema: BENCH_SCHEMA_VERSION,
                generator: format!("{:?}", cell.spec.kind),
                preset: format!("{:?}", cell.preset),
                n: inst.n,
                m: inst.m,
                disc: out.summary.disc,
                certified_bound: out.summary.bound,
                baseline_random_disc: baseline_random(&inst, cell.spec.seed, cell.baseline_trials),
                baseline_greedy_disc: baseline_greedy(&inst),
                phi_max: out.summary.phi_max,
                warnings: out.summary.warnings,
                wall_ms: out.summary.wall_ms,
                seed: cell.spec.seed,
            })
        })
        .collect();
    let mut report = BenchReport::default();
    for r in results {
        report.rows.push(r?);
    }
    Ok(report)
}
