//! Problem instances and the row preprocessing used by the walk engine:
//! sign duplication (`a_i` and `-a_i`) and the split of every row into a
//! small-entry part and a large-entry part at threshold `1/(2*lambda)`.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row-norm envelope `h`: a non-increasing function of subset size `s`
/// promising `sum_{j in S} a_i(j)^2 <= |S| * h(|S|)` for every row and subset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HFunction {
    Constant { value: f64 },
    /// Sorted (size, value) pairs, non-increasing in value. Sizes between
    /// entries take the value of the largest tabulated size not above them.
    Tabulated { values: Vec<(usize, f64)> },
    /// Per-class envelope `2^(q+2) * k / n` for the hypergraph walk.
    HypergraphClass { q: u32, k: f64, n: usize },
}

impl HFunction {
    pub fn constant(value: f64) -> Self {
        HFunction::Constant { value }
    }

    pub fn tabulated(mut values: Vec<(usize, f64)>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Malformed("empty h table".into()));
        }
        values.sort_by_key(|&(s, _)| s);
        for w in values.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Malformed(format!("duplicate h table size {}", w[0].0)));
            }
            if w[1].1 > w[0].1 + 1e-12 * w[0].1.abs().max(1.0) {
                return Err(Error::NotNonIncreasing { s: w[1].0 });
            }
        }
        if values.iter().any(|&(_, v)| !v.is_finite() || v < 0.0) {
            return Err(Error::Malformed("h table values must be finite and >= 0".into()));
        }
        Ok(HFunction::Tabulated { values })
    }

    /// Raw evaluation without the 1..=n domain check.
    pub fn value_at(&self, s: usize) -> f64 {
        match self {
            HFunction::Constant { value } => *value,
            HFunction::Tabulated { values } => {
                let mut out = values[0].1;
                for &(size, v) in values {
                    if size <= s {
                        out = v;
                    } else {
                        break;
                    }
                }
                out
            }
            HFunction::HypergraphClass { q, k, n } => {
                2f64.powi(*q as i32 + 2) * k / *n as f64
            }
        }
    }

    /// `h` divided by `scale^2`, for running on a rescaled matrix.
    pub fn rescaled(&self, scale: f64) -> HFunction {
        let f = 1.0 / (scale * scale);
        match self {
            HFunction::Constant { value } => HFunction::Constant { value: value * f },
            HFunction::Tabulated { values } => HFunction::Tabulated {
                values: values.iter().map(|&(s, v)| (s, v * f)).collect(),
            },
            HFunction::HypergraphClass { q, k, n } => HFunction::HypergraphClass {
                q: *q,
                k: k * f,
                n: *n,
            },
        }
    }
}

/// Evaluate `h(s)` with the domain check `1 <= s <= n`.
pub fn evaluate_h(h: &HFunction, s: usize, n: usize) -> Result<f64> {
    if s < 1 || s > n {
        return Err(Error::SizeOutOfRange { s, n });
    }
    Ok(h.value_at(s))
}

/// A dense m x n real matrix plus the statistics the walk needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub m: usize,
    pub n: usize,
    pub rows: Vec<Vec<f64>>,
    /// Max Euclidean column norm.
    pub column_norm_bound: f64,
    /// Max |entry|.
    pub entry_bound: f64,
    pub h: HFunction,
}

/// Construct an instance, computing the exact column-norm and entry bounds.
pub fn build_instance(rows: Vec<Vec<f64>>, h: HFunction) -> Result<Instance> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::Malformed("instance needs at least one row".into()));
    }
    let n = rows[0].len();
    if n < 3 {
        return Err(Error::TooFewColumns { n });
    }
    let mut col_sq = vec![0.0f64; n];
    let mut entry_bound = 0.0f64;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Malformed(format!("row {} has length {} != {}", i, row.len(), n)));
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteEntry { row: i, col: j });
            }
            col_sq[j] += v * v;
            entry_bound = entry_bound.max(v.abs());
        }
    }
    let column_norm_bound = col_sq.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();
    Ok(Instance { m, n, rows, column_norm_bound, entry_bound, h })
}

impl Instance {
    /// Entries multiplied by `factor`; bounds scale with |factor|.
    pub fn scaled(&self, factor: f64) -> Instance {
        Instance {
            m: self.m,
            n: self.n,
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&v| v * factor).collect())
                .collect(),
            column_norm_bound: self.column_norm_bound * factor.abs(),
            entry_bound: self.entry_bound * factor.abs(),
            h: self.h.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("instance serializes")
    }

    pub fn from_json(s: &str) -> Result<Instance> {
        let inst: Instance = serde_json::from_str(s)?;
        // Re-derive the bounds so hand-edited files cannot understate them.
        build_instance(inst.rows, inst.h)
    }

    /// One matrix row per line, comma separated.
    pub fn from_csv(text: &str, h: HFunction) -> Result<Instance> {
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| Error::Malformed(format!("bad csv field: {e}")))?);
        }
        build_instance(rows, h)
    }

    /// Sampled soundness check of the stored `h`: draws `samples` random
    /// subsets and counts (row, subset) pairs violating the envelope.
    pub fn check_h_soundness<R: Rng>(&self, samples: usize, rng: &mut R) -> usize {
        let mut violations = 0;
        for _ in 0..samples {
            let s = rng.gen_range(1..=self.n);
            let mut idx: Vec<usize> = (0..self.n).collect();
            for i in 0..s {
                let j = rng.gen_range(i..self.n);
                idx.swap(i, j);
            }
            let cap = s as f64 * self.h.value_at(s);
            for row in &self.rows {
                let mass: f64 = idx[..s].iter().map(|&j| row[j] * row[j]).sum();
                if mass > cap + 1e-9 * cap.abs().max(1.0) {
                    violations += 1;
                }
            }
        }
        violations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSign {
    Plus,
    Minus,
}

impl RowSign {
    #[inline]
    pub fn factor(self) -> f64 {
        match self {
            RowSign::Plus => 1.0,
            RowSign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowPart {
    Small,
    Large,
}

/// One preprocessed row: a signed copy of an origin row restricted to its
/// small or large entries.
#[derive(Debug, Clone)]
pub struct ExtendedRow {
    pub origin: usize,
    pub sign: RowSign,
    pub part: RowPart,
    pub coeffs: Vec<f64>,
    pub norm_sq: f64,
    pub is_zero: bool,
}

/// The sign-duplicated, small/large-split row system.
///
/// Rows are ordered (origin, sign + then -, part S then L), so row index
/// `4*origin + 2*sign + part`. All-zero parts are retained to keep that
/// arithmetic stable; `small_ids`/`large_ids` list only nonzero parts.
#[derive(Debug, Clone)]
pub struct ExtendedInstance {
    pub base: Instance,
    pub lambda: f64,
    pub rows: Vec<ExtendedRow>,
    /// Nonzero small-part row ids (the potential's candidate set I^S).
    pub small_ids: Vec<usize>,
    /// Nonzero large-part row ids.
    pub large_ids: Vec<usize>,
}

impl ExtendedInstance {
    #[inline]
    pub fn row_id(origin: usize, sign: RowSign, part: RowPart) -> usize {
        4 * origin
            + 2 * match sign {
                RowSign::Plus => 0,
                RowSign::Minus => 1,
            }
            + match part {
                RowPart::Small => 0,
                RowPart::Large => 1,
            }
    }

    /// Key shared by the +/- copies of one (origin, part) pair.
    #[inline]
    pub fn pair_key(row_id: usize) -> usize {
        2 * (row_id / 4) + (row_id & 1)
    }
}

/// Split every row at `1/(2*lambda)` and duplicate with both signs.
pub fn preprocess(inst: &Instance, lambda: f64) -> ExtendedInstance {
    assert!(lambda > 0.0, "lambda must be positive");
    let threshold = 1.0 / (2.0 * lambda);
    let mut rows = Vec::with_capacity(4 * inst.m);
    let mut small_ids = Vec::new();
    let mut large_ids = Vec::new();
    for (origin, base_row) in inst.rows.iter().enumerate() {
        for sign in [RowSign::Plus, RowSign::Minus] {
            for part in [RowPart::Small, RowPart::Large] {
                let coeffs: Vec<f64> = base_row
                    .iter()
                    .map(|&v| {
                        let keep = match part {
                            RowPart::Small => v.abs() <= threshold,
                            RowPart::Large => v.abs() > threshold,
                        };
                        if keep {
                            sign.factor() * v
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let norm_sq = coeffs.iter().map(|v| v * v).sum();
                let is_zero = coeffs.iter().all(|&v| v == 0.0);
                let id = rows.len();
                if !is_zero {
                    match part {
                        RowPart::Small => small_ids.push(id),
                        RowPart::Large => large_ids.push(id),
                    }
                }
                rows.push(ExtendedRow { origin, sign, part, coeffs, norm_sq, is_zero });
            }
        }
    }
    ExtendedInstance { base: inst.clone(), lambda, rows, small_ids, large_ids }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_matrix_bounds() {
        let inst = build_instance(vec![vec![0.0; 3], vec![0.0; 3]], HFunction::constant(1.0)).unwrap();
        assert_eq!(inst.column_norm_bound, 0.0);
        assert_eq!(inst.entry_bound, 0.0);
    }

    #[test]
    fn identity_bounds() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let inst = build_instance(rows, HFunction::constant(1.0)).unwrap();
        assert_eq!(inst.column_norm_bound, 1.0);
        assert_eq!(inst.entry_bound, 1.0);
    }

    #[test]
    fn random_pm_one_bounds() {
        // Column norms of an 8x8 +/-1 matrix are exactly sqrt(8).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..8).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect();
        // Independent column-norm computation.
        let mut expect = 0.0f64;
        for j in 0..8 {
            let s: f64 = rows.iter().map(|r| r[j] * r[j]).sum();
            expect = expect.max(s.sqrt());
        }
        let inst = build_instance(rows, HFunction::constant(1.0)).unwrap();
        assert!((inst.column_norm_bound - expect).abs() < 1e-12);
        assert!((inst.column_norm_bound - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(inst.entry_bound, 1.0);
    }

    #[test]
    fn rejects_nonfinite_and_narrow() {
        assert!(matches!(
            build_instance(vec![vec![f64::NAN, 0.0, 0.0]], HFunction::constant(1.0)),
            Err(Error::NonFiniteEntry { .. })
        ));
        assert!(matches!(
            build_instance(vec![vec![1.0, 2.0]], HFunction::constant(1.0)),
            Err(Error::TooFewColumns { n: 2 })
        ));
    }

    #[test]
    fn split_rule_hand_example() {
        // Row (1, 0.1, 0) with threshold 0.5: small part keeps 0.1, large keeps 1.
        let inst = build_instance(vec![vec![1.0, 0.1, 0.0]], HFunction::constant(1.0)).unwrap();
        let ext = preprocess(&inst, 1.0); // 1/(2*lambda) = 0.5
        let ps = &ext.rows[ExtendedInstance::row_id(0, RowSign::Plus, RowPart::Small)];
        let pl = &ext.rows[ExtendedInstance::row_id(0, RowSign::Plus, RowPart::Large)];
        let ms = &ext.rows[ExtendedInstance::row_id(0, RowSign::Minus, RowPart::Small)];
        assert_eq!(ps.coeffs, vec![0.0, 0.1, 0.0]);
        assert_eq!(pl.coeffs, vec![1.0, 0.0, 0.0]);
        assert_eq!(ms.coeffs, vec![0.0, -0.1, 0.0]);
    }

    #[test]
    fn all_small_row_gives_zero_large_part() {
        let inst = build_instance(vec![vec![0.2, 0.3, 0.1]], HFunction::constant(1.0)).unwrap();
        let ext = preprocess(&inst, 1.0);
        let pl = &ext.rows[ExtendedInstance::row_id(0, RowSign::Plus, RowPart::Large)];
        assert!(pl.is_zero);
        assert_eq!(ext.large_ids.len(), 0);
        assert_eq!(ext.small_ids.len(), 2);
    }

    #[test]
    fn negative_entry_row_four_rows() {
        // Row (-1, 0, 0) with threshold 0.5: the -1 entry is large.
        let inst = build_instance(vec![vec![-1.0, 0.0, 0.0]], HFunction::constant(1.0)).unwrap();
        let ext = preprocess(&inst, 1.0);
        assert_eq!(ext.rows.len(), 4);
        assert!(ext.rows[0].is_zero); // (+, S)
        assert_eq!(ext.rows[1].coeffs[0], -1.0); // (+, L)
        assert!(ext.rows[2].is_zero); // (-, S)
        assert_eq!(ext.rows[3].coeffs[0], 1.0); // (-, L)
    }

    #[test]
    fn reconstruction_and_sign_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let inst = build_instance(rows.clone(), HFunction::constant(4.0)).unwrap();
        let ext = preprocess(&inst, 0.9);
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (i, row) in rows.iter().enumerate() {
            let full: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
            let ps = &ext.rows[ExtendedInstance::row_id(i, RowSign::Plus, RowPart::Small)];
            let pl = &ext.rows[ExtendedInstance::row_id(i, RowSign::Plus, RowPart::Large)];
            let split: f64 = ps.coeffs.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                + pl.coeffs.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            assert!((full - split).abs() <= 1e-12 * full.abs().max(1.0));
            let ms = &ext.rows[ExtendedInstance::row_id(i, RowSign::Minus, RowPart::Small)];
            let m_dot: f64 = ms.coeffs.iter().zip(&x).map(|(a, b)| a * b).sum();
            let p_dot: f64 = ps.coeffs.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((m_dot + p_dot).abs() < 1e-12);
        }
    }

    #[test]
    fn extended_column_mass_at_most_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let inst = build_instance(rows.clone(), HFunction::constant(1.0)).unwrap();
        let ext = preprocess(&inst, 2.0);
        for j in 0..7 {
            let base: f64 = rows.iter().map(|r| r[j] * r[j]).sum();
            let extended: f64 = ext.rows.iter().map(|r| r.coeffs[j] * r.coeffs[j]).sum();
            assert!(extended <= 2.0 * base + 1e-12);
        }
    }

    #[test]
    fn evaluate_h_cases() {
        let n = 16;
        let c = HFunction::constant(1.0);
        assert_eq!(evaluate_h(&c, 5, n).unwrap(), 1.0);
        assert!(matches!(evaluate_h(&c, 0, n), Err(Error::SizeOutOfRange { .. })));
        assert!(matches!(evaluate_h(&c, 17, n), Err(Error::SizeOutOfRange { .. })));

        let single = HFunction::tabulated(vec![(4, 0.7)]).unwrap();
        assert_eq!(evaluate_h(&single, 1, n).unwrap(), 0.7);
        assert_eq!(evaluate_h(&single, 16, n).unwrap(), 0.7);

        // Sub-Gaussian envelope at s = n equals 100*sigma^2*(1 + ln(m)/n).
        let sigma = 0.8f64;
        let m = 32usize;
        let table: Vec<(usize, f64)> = (1..=n)
            .map(|s| {
                let sf = s as f64;
                (s, 100.0 * sigma * sigma * ((n as f64 * std::f64::consts::E / sf).ln() + (m as f64).ln() / sf))
            })
            .collect();
        let h = HFunction::tabulated(table).unwrap();
        let expect = 100.0 * sigma * sigma * (1.0 + (m as f64).ln() / n as f64);
        assert!((evaluate_h(&h, n, n).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn tabulated_must_be_non_increasing() {
        assert!(matches!(
            HFunction::tabulated(vec![(1, 0.5), (2, 0.9)]),
            Err(Error::NotNonIncreasing { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let inst = build_instance(
            vec![vec![1.0, 0.5, -0.25], vec![0.0, 2.0, 1.0]],
            HFunction::tabulated(vec![(1, 4.0), (3, 2.0)]).unwrap(),
        )
        .unwrap();
        let back = Instance::from_json(&inst.to_json()).unwrap();
        assert_eq!(back.rows, inst.rows);
        assert_eq!(back.h, inst.h);
    }

    #[test]
    fn csv_parse() {
        let inst = Instance::from_csv("1, 0, 0\n0, 1, 0\n", HFunction::constant(1.0)).unwrap();
        assert_eq!(inst.m, 2);
        assert_eq!(inst.n, 3);
        assert_eq!(inst.rows[1][1], 1.0);
    }

    #[test]
    fn h_soundness_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..8).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect())
            .collect();
        let sound = build_instance(rows.clone(), HFunction::constant(1.0)).unwrap();
        assert_eq!(sound.check_h_soundness(1000, &mut rng), 0);
        let unsound = build_instance(rows, HFunction::constant(0.01)).unwrap();
        assert!(unsound.check_h_soundness(1000, &mut rng) > 0);
    }
}
