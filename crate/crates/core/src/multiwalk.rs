//! Two walk extensions sharing one coloring.
//!
//! `run_combined` drives a single fractional coloring against two matrices
//! at once: each keeps its own barrier, slacks, and feasible subspace, the
//! update direction is chosen in the intersection, and the committed sign
//! minimizes a weighted sum of the two potentials. Budgets widen from 8h to
//! 25h per side (inverse weights 8/25 + 8/25 < 1 keep a feasible vector),
//! and barrier rates quadruple to cover the widened budgets.
//!
//! `run_hypergraph` colors sparse 0/1 systems whose rows shrink nearly
//! proportionally when coordinates freeze. Rows are banded by their l1 norm
//! into dyadic classes, each with its own barrier and potential; rows that
//! shrink to nearly nothing are dropped with a bounded residual; rows whose
//! shrinkage deviates too far from proportional are frozen out of the
//! update; and the direction must satisfy every class budget at once.

use crate::error::{Error, Result};
use crate::instance::{HFunction, Instance};
use crate::linalg::{dot, sym_eigen};
use crate::subspace::{householder_nullspace, threshold_violating_directions};
use crate::walk::{
    barrier_rate, round_coloring, BarrierRule, RoundedColoring, WalkConfig,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Combined two-matrix walk.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CombinedConfig {
    pub cfg_a: WalkConfig,
    pub cfg_b: WalkConfig,
    /// Barrier rates are multiplied by this in the combined walk.
    pub d_rate_multiplier: f64,
    /// Per-side direction budget factor (replaces the single-walk 8).
    pub budget_factor: f64,
    pub delta: f64,
    pub max_halvings: usize,
}

impl CombinedConfig {
    pub fn new(cfg_a: WalkConfig, cfg_b: WalkConfig) -> Self {
        let delta = cfg_a.delta.min(cfg_b.delta);
        CombinedConfig {
            cfg_a,
            cfg_b,
            d_rate_multiplier: 4.0,
            budget_factor: 25.0,
            delta,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CombinedAudit {
    pub norm_identity_violations: usize,
    pub phi_cap_violations: usize,
    pub slack_bound_violations: usize,
    pub budget_retries: usize,
    pub overshoot_retries: usize,
    pub intersection_min_dim: usize,
    pub no_feasible_direction: usize,
    pub large_row_bound_violations: usize,
    pub early_stop: bool,
    pub steps: usize,
}

impl CombinedAudit {
    pub fn warnings(&self) -> usize {
        self.norm_identity_violations
            + self.phi_cap_violations
            + self.slack_bound_violations
            + self.no_feasible_direction
            + self.large_row_bound_violations
            + usize::from(self.early_stop)
    }
}

#[derive(Debug, Clone)]
pub struct CombinedOutcome {
    pub x: Vec<f64>,
    pub rounded_a: RoundedColoring,
    pub rounded_b: RoundedColoring,
    pub phi_weighted_max: f64,
    pub b_final_a: f64,
    pub b_final_b: f64,
    pub audit: CombinedAudit,
}

/// One matrix's bookkeeping inside the combined walk.
struct Side<'a> {
    ext: crate::instance::ExtendedInstance,
    original: &'a Instance,
    p: f64,
    b0: f64,
    b: f64,
    lambda: f64,
    h_eff: HFunction,
    moving: bool,
    /// p * ln(b0/2): the log of this side's potential weight.
    weight_ln: f64,
    in_potential: Vec<bool>,
    potential_rows: Vec<usize>,
}

impl<'a> Side<'a> {
    fn new(inst: &'a Instance, cfg: &WalkConfig) -> Side<'a> {
        let ext = crate::walk::prepare_extended(inst, cfg);
        let b0 = cfg.effective_b0();
        let n_rows = ext.rows.len();
        Side {
            p: cfg.p,
            b0,
            b: b0,
            lambda: cfg.lambda(),
            h_eff: cfg.effective_h(&ext.base.h),
            moving: matches!(cfg.barrier_rule, BarrierRule::Moving { .. }),
            weight_ln: cfg.p * (b0 / 2.0).ln(),
            in_potential: vec![false; n_rows],
            potential_rows: Vec::new(),
            ext,
            original: inst,
        }
    }

    fn admit_rows(&mut self, alive: &[bool], threshold: f64) {
        for &id in &self.ext.small_ids {
            if self.in_potential[id] {
                continue;
            }
            let mass: f64 = self.ext.rows[id]
                .coeffs
                .iter()
                .zip(alive)
                .filter(|&(_, &al)| al)
                .map(|(a, _)| a * a)
                .sum();
            if mass <= threshold {
                self.in_potential[id] = true;
                self.potential_rows.push(id);
            }
        }
        self.potential_rows.sort_unstable();
    }

    fn slack(&self, id: usize, x: &[f64], b: f64) -> f64 {
        crate::walk::compute_slack(&self.ext.rows[id].coeffs, x, b, self.lambda)
    }

    /// Weighted potential over given rows: sum exp(p ln(b0/2) - p ln s).
    fn weighted_phi(&self, x: &[f64], b: f64, rows: &[usize]) -> f64 {
        let mut phi = 0.0;
        for &id in rows {
            let s = self.slack(id, x, b);
            if s <= 0.0 {
                return f64::INFINITY;
            }
            phi += (self.weight_ln - self.p * s.ln()).exp();
        }
        phi
    }
}

/// Walk one coloring against two matrices on the same column set.
pub fn run_combined(
    inst_a: &Instance,
    inst_b: &Instance,
    cc: &CombinedConfig,
) -> Result<CombinedOutcome> {
    if inst_a.n != inst_b.n {
        return Err(Error::Malformed(format!(
            "matrices must share n: {} vs {}",
            inst_a.n, inst_b.n
        )));
    }
    let n = inst_a.n;
    let margin = 1.0 - 1.0 / (2.0 * n as f64);
    let delta = cc.delta;
    let target = n as f64 - 2.0;
    let nominal_steps = ((n as f64 - 2.0) / (delta * delta)).ceil().max(1.0);
    let phi_cap = 5.0 * (inst_a.m.max(inst_b.m) as f64);

    let mut sides = [Side::new(inst_a, &cc.cfg_a), Side::new(inst_b, &cc.cfg_b)];
    let mut x = vec![0.0f64; n];
    let mut alive = vec![true; n];
    let mut mass = 0.0f64;
    let mut audit = CombinedAudit { intersection_min_dim: usize::MAX, ..Default::default() };
    let mut phi_weighted_max = 0.0f64;
    let mut t = 0usize;
    let mut basis = Vec::<f64>::new();
    let s_alive_threshold = cc.cfg_a.s_alive_threshold;

    while mass < target - 1e-9 {
        for j in 0..n {
            alive[j] = x[j].abs() < margin;
        }
        let alive_list: Vec<usize> = (0..n).filter(|&j| alive[j]).collect();
        let nt = alive_list.len();
        if nt == 0 {
            audit.early_stop = true;
            break;
        }
        for side in sides.iter_mut() {
            side.admit_rows(&alive, s_alive_threshold);
        }

        // Per-side slacks, blocked sets, unblocked weights.
        struct StepSide {
            slacks: Vec<f64>,
            blocked: Vec<usize>,
            unblocked: Vec<usize>,
            sum_weights: f64,
            max_inv_slack: Option<f64>,
        }
        let mut step_sides = Vec::with_capacity(2);
        for side in sides.iter() {
            let mut slacks = vec![f64::NAN; side.ext.rows.len()];
            for &id in &side.potential_rows {
                let s = side.slack(id, &x, side.b);
                if s <= 0.0 {
                    return Err(Error::NonpositiveSlack { row: id, slack: s, step: t });
                }
                slacks[id] = s;
            }
            let n_blocked = (nt as f64 / 12.0).floor() as usize;
            let mut order = side.potential_rows.clone();
            order.sort_by(|&a, &b2| slacks[a].partial_cmp(&slacks[b2]).unwrap().then(a.cmp(&b2)));
            let blocked: Vec<usize> = order.iter().take(n_blocked).copied().collect();
            let unblocked: Vec<usize> = side
                .potential_rows
                .iter()
                .copied()
                .filter(|id| !blocked.contains(id))
                .collect();
            let mut sum_weights = 0.0;
            let mut max_inv: Option<f64> = None;
            for &id in &unblocked {
                sum_weights += slacks[id].powf(-(side.p + 1.0));
                let inv = 1.0 / slacks[id];
                max_inv = Some(max_inv.map_or(inv, |m: f64| m.max(inv)));
            }
            step_sides.push(StepSide { slacks, blocked, unblocked, sum_weights, max_inv_slack: max_inv });
        }

        // Constraints: alive restriction handled by packing; then x, blocked
        // drifts of both sides, untracked heavy rows, spectral constraints.
        let pack = |v: &[f64]| -> Vec<f64> { alive_list.iter().map(|&j| v[j]).collect() };
        let mut constraints: Vec<f64> = Vec::new();
        let push_c = |c: Vec<f64>, constraints: &mut Vec<f64>| {
            constraints.extend_from_slice(&c);
        };
        push_c(pack(&x), &mut constraints);
        for (side, ss) in sides.iter().zip(&step_sides) {
            for &id in &ss.blocked {
                let d = crate::walk::drift_vector(&side.ext.rows[id].coeffs, &x, side.lambda);
                push_c(pack(&d), &mut constraints);
            }
            for &id in side.ext.small_ids.iter().chain(&side.ext.large_ids) {
                let row = &side.ext.rows[id];
                if row.sign == crate::instance::RowSign::Minus {
                    continue;
                }
                let m_alive: f64 = row
                    .coeffs
                    .iter()
                    .zip(&alive)
                    .filter(|&(_, &al)| al)
                    .map(|(a, _)| a * a)
                    .sum();
                if m_alive > s_alive_threshold {
                    push_c(pack(&row.coeffs), &mut constraints);
                }
            }
            // Spectral restriction per side, in packed coordinates.
            let mut g_rows = Vec::with_capacity(ss.unblocked.len());
            let mut k_diag = vec![0.0f64; nt];
            for &id in &ss.unblocked {
                let w = ss.slacks[id].powf(-(side.p + 1.0));
                let sw = w.sqrt();
                let drift = crate::walk::drift_vector(&side.ext.rows[id].coeffs, &x, side.lambda);
                let mut g = pack(&drift);
                for (tt, &j) in alive_list.iter().enumerate() {
                    g[tt] *= sw;
                    let a = side.ext.rows[id].coeffs[j];
                    k_diag[tt] += w * a * a;
                }
                g_rows.push(g);
            }
            for c in threshold_violating_directions(&g_rows, &k_diag, 40.0) {
                push_c(c, &mut constraints);
            }
        }
        let c_rows = constraints.len() / nt;
        let dim = householder_nullspace(&constraints, c_rows, nt, &mut basis);
        audit.intersection_min_dim = audit.intersection_min_dim.min(dim);
        let required = (nt as f64 / 3.0).ceil() as usize;
        if dim < required {
            if nt >= 3 {
                return Err(Error::IntersectionTooSmall { step: t, dim, required });
            }
            if dim == 0 {
                audit.early_stop = true;
                break;
            }
        }

        // First basis vector meeting both class budgets.
        let mut packed_drifts: [Vec<(Vec<f64>, f64)>; 2] = [Vec::new(), Vec::new()];
        for (s_idx, (side, ss)) in sides.iter().zip(&step_sides).enumerate() {
            packed_drifts[s_idx] = ss
                .unblocked
                .iter()
                .map(|&id| {
                    let d = crate::walk::drift_vector(&side.ext.rows[id].coeffs, &x, side.lambda);
                    (pack(&d), ss.slacks[id].powf(-(side.p + 1.0)))
                })
                .collect();
        }
        let budgets: Vec<f64> = sides
            .iter()
            .zip(&step_sides)
            .map(|(side, ss)| cc.budget_factor * side.h_eff.value_at(nt) * ss.sum_weights)
            .collect();
        let mut v_idx = None;
        'scan: for w_idx in 0..dim {
            let w = &basis[w_idx * nt..(w_idx + 1) * nt];
            for s_idx in 0..2 {
                let obj: f64 = packed_drifts[s_idx]
                    .iter()
                    .map(|(r, wt)| wt * dot(r, w).powi(2))
                    .sum();
                if obj > budgets[s_idx] + 1e-12 * budgets[s_idx].max(1.0) {
                    continue 'scan;
                }
            }
            v_idx = Some(w_idx);
            break;
        }
        let Some(v_idx) = v_idx else {
            return Err(Error::NoFeasibleDirection { step: t });
        };
        let v_packed = basis[v_idx * nt..(v_idx + 1) * nt].to_vec();
        let mut v = vec![0.0f64; n];
        for (tt, &j) in alive_list.iter().enumerate() {
            v[j] = v_packed[tt];
        }

        // Barrier rates, quadrupled.
        let rates: Vec<f64> = sides
            .iter()
            .zip(&step_sides)
            .map(|(side, ss)| {
                if side.moving {
                    cc.d_rate_multiplier
                        * barrier_rate(side.p, Some(side.h_eff.value_at(nt)), ss.max_inv_slack)
                } else {
                    0.0
                }
            })
            .collect();

        // Weighted potential before the move.
        let phi_old: f64 = sides
            .iter()
            .map(|side| side.weighted_phi(&x, side.b, &side.potential_rows))
            .sum();
        phi_weighted_max = phi_weighted_max.max(phi_old);
        if phi_old > phi_cap * (1.0 + 1e-9) {
            audit.phi_cap_violations += 1;
        }
        // Per-side slack floor implied by the weighted cap.
        for (side, ss) in sides.iter().zip(&step_sides) {
            if let Some(mi) = ss.max_inv_slack {
                if phi_old <= phi_cap {
                    let cap = (2.0 / side.b0)
                        * (60.0 * side.original.m as f64 / nt as f64).powf(1.0 / side.p);
                    if mi > cap * (1.0 + 1e-9) {
                        audit.slack_bound_violations += 1;
                    }
                }
            }
        }

        let mut delta_s = delta;
        let mut halvings = 0usize;
        let (x_next, b_next) = loop {
            let fits = alive_list
                .iter()
                .enumerate()
                .all(|(tt, &j)| x[j].abs() + delta_s * v_packed[tt].abs() <= 1.0 + 1e-12);
            if !fits {
                if halvings < cc.max_halvings {
                    halvings += 1;
                    audit.overshoot_retries += 1;
                    delta_s *= 0.5;
                    continue;
                }
                return Err(Error::OvershootBound { coord: 0, value: f64::NAN, step: t });
            }
            let b_next: Vec<f64> = sides
                .iter()
                .zip(&rates)
                .map(|(side, &d)| side.b + delta_s * delta_s * d)
                .collect();
            let mut x_plus = x.clone();
            let mut x_minus = x.clone();
            for j in 0..n {
                x_plus[j] += delta_s * v[j];
                x_minus[j] -= delta_s * v[j];
            }
            let phi_of = |xc: &[f64]| -> f64 {
                sides
                    .iter()
                    .zip(&b_next)
                    .map(|(side, &b)| side.weighted_phi(xc, b, &side.potential_rows))
                    .sum()
            };
            let (pp, pm) = (phi_of(&x_plus), phi_of(&x_minus));
            let (xc, phi_new) = if pp <= pm { (x_plus, pp) } else { (x_minus, pm) };
            let ratio = delta_s / delta;
            let allowed = phi_old + ratio * ratio * 2.0 / (nominal_steps * n as f64)
                + 1e-12 * phi_old.abs();
            if !phi_new.is_finite() || phi_new > allowed {
                if halvings < cc.max_halvings {
                    halvings += 1;
                    audit.budget_retries += 1;
                    delta_s *= 0.5;
                    continue;
                }
                if !phi_new.is_finite() {
                    return Err(Error::NonpositiveSlack { row: usize::MAX, slack: -1.0, step: t });
                }
                return Err(Error::StepBudgetExhausted { step: t, retries: halvings });
            }
            break (xc, b_next);
        };

        x = x_next;
        for xv in x.iter_mut() {
            *xv = xv.clamp(-1.0, 1.0);
        }
        for (side, b) in sides.iter_mut().zip(&b_next) {
            side.b = *b;
        }
        mass += delta_s * delta_s;
        t += 1;
        let xsq: f64 = x.iter().map(|v| v * v).sum();
        if (xsq - mass).abs() > 1e-6 * n as f64 {
            audit.norm_identity_violations += 1;
        }
        if t > 64 * nominal_steps as usize + 64 {
            return Err(Error::StepBudgetExhausted { step: t, retries: 0 });
        }
    }

    // Large-part rows must have gained at most 3 b0 each (engine units).
    for side in sides.iter() {
        for &id in &side.ext.large_ids {
            let row = &side.ext.rows[id];
            if row.sign == crate::instance::RowSign::Minus {
                continue;
            }
            let inner: f64 = dot(&row.coeffs, &x);
            if inner.abs() > 3.0 * side.b0 * (1.0 + 1e-9) + 1e-9 {
                audit.large_row_bound_violations += 1;
            }
        }
    }
    audit.steps = t;
    let rounded_a = round_coloring(&x, inst_a, None);
    let rounded_b = round_coloring(&x, inst_b, None);
    Ok(CombinedOutcome {
        x,
        rounded_a,
        rounded_b,
        phi_weighted_max,
        b_final_a: sides[0].b * cc.cfg_a.scale,
        b_final_b: sides[1].b * cc.cfg_b.scale,
        audit,
    })
}

// ---------------------------------------------------------------------------
// Multi-class hypergraph walk.
// ---------------------------------------------------------------------------

/// Dyadic l1-norm classes over the sign-duplicated rows of a 0/1 matrix.
#[derive(Debug, Clone)]
pub struct RowClasses {
    pub k: usize,
    pub beta: f64,
    /// classes[q] lists origin indices (each contributes both signs).
    pub classes: Vec<Vec<usize>>,
    /// Origins with l1 norm under sqrt(k); excluded from the walk, each
    /// bounded by sqrt(k) for any coloring.
    pub dropped: Vec<usize>,
    /// Class of each origin (None = dropped).
    pub class_of: Vec<Option<usize>>,
    pub l1: Vec<f64>,
}

/// Partition rows by l1 norm: class 0 holds [sqrt(k), 2k), class q >= 1
/// holds [2^q k, 2^(q+1) k).
pub fn build_classes(inst: &Instance, k: usize, beta: f64) -> Result<RowClasses> {
    let kf = k as f64;
    if beta > kf + 1e-9 {
        return Err(Error::InfeasibleSpec(format!("beta={beta} exceeds k={k}")));
    }
    for (i, row) in inst.rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NotZeroOne { row: i, col: j });
            }
        }
    }
    for j in 0..inst.n {
        let deg: f64 = inst.rows.iter().map(|r| r[j]).sum();
        if deg > kf + 1e-9 {
            return Err(Error::ColumnDegreeExceeded { col: j, degree: deg as usize, k });
        }
    }
    let n_classes = ((inst.n as f64 / kf).log2().ceil() as i64).max(0) as usize + 1;
    let mut classes = vec![Vec::new(); n_classes];
    let mut dropped = Vec::new();
    let mut class_of = vec![None; inst.m];
    let mut l1 = Vec::with_capacity(inst.m);
    for (i, row) in inst.rows.iter().enumerate() {
        let norm1: f64 = row.iter().sum();
        l1.push(norm1);
        if norm1 < kf.sqrt() {
            dropped.push(i);
            continue;
        }
        let q = if norm1 < 2.0 * kf {
            0
        } else {
            ((norm1 / kf).log2().floor() as usize).min(n_classes - 1)
        };
        class_of[i] = Some(q);
        classes[q].push(i);
    }
    // Dyadic mass bound: 2^q k |A_q| <= 2 n k over sign-duplicated rows.
    for (q, members) in classes.iter().enumerate().skip(1) {
        let bound = 2.0f64.powi(1 - q as i32) * inst.n as f64;
        if 2.0 * members.len() as f64 > bound + 1e-9 {
            return Err(Error::NumericalFailure(format!(
                "class {q} holds {} rows, above the dyadic mass bound {bound}",
                2 * members.len()
            )));
        }
    }
    Ok(RowClasses { k, beta, classes, dropped, class_of, l1 })
}

/// Deviation cap: largest `||A v||` over unit `v` orthogonal to all-ones,
/// by eigendecomposition of the projected Gram matrix.
pub fn deviation_bound(inst: &Instance) -> f64 {
    let n = inst.n;
    let mut gram = vec![0.0f64; n * n];
    for row in &inst.rows {
        for a in 0..n {
            if row[a] == 0.0 {
                continue;
            }
            for b in 0..n {
                gram[a * n + b] += row[a] * row[b];
            }
        }
    }
    // Project out the all-ones direction: P G P with P = I - J/n.
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n)
        .map(|a| (0..n).map(|b| gram[a * n + b]).sum::<f64>() / nf)
        .collect();
    let total_mean: f64 = row_means.iter().sum::<f64>() / nf;
    for a in 0..n {
        for b in 0..n {
            gram[a * n + b] += total_mean - row_means[a] - row_means[b];
        }
    }
    let eig = sym_eigen(gram, n);
    eig.values.first().copied().unwrap_or(0.0).max(0.0).sqrt()
}

#[derive(Debug, Clone)]
pub struct HypergraphConfig {
    pub p: f64,
    pub b0: f64,
    pub lambda: f64,
    pub delta: f64,
    pub seed: u64,
    pub trace_every: usize,
    pub max_halvings: usize,
}

impl HypergraphConfig {
    pub fn for_k(k: usize) -> Self {
        HypergraphConfig {
            p: 2.0,
            b0: 1024.0 * (k as f64).sqrt(),
            // Entrywise domination of the drift by the row needs
            // 2 * lambda * |entry| * |x| <= |entry|, so lambda <= 1/2.
            lambda: 0.5,
            delta: DEFAULT_HYPER_DELTA,
            seed: 0,
            trace_every: 0,
            max_halvings: 20,
        }
    }
}

pub const DEFAULT_HYPER_DELTA: f64 = 0.2;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HyperAudit {
    pub norm_identity_violations: usize,
    pub phi_cap_violations: usize,
    pub class_slack_bound_violations: usize,
    pub markov_violations: usize,
    pub markov_max: f64,
    pub dead_residual_violations: usize,
    pub budget_retries: usize,
    pub overshoot_retries: usize,
    pub min_dim: usize,
    pub early_stop: bool,
    pub steps: usize,
}

impl HyperAudit {
    pub fn warnings(&self) -> usize {
        self.norm_identity_violations
            + self.phi_cap_violations
            + self.class_slack_bound_violations
            + self.markov_violations
            + self.dead_residual_violations
            + usize::from(self.early_stop)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperStepTrace {
    pub t: usize,
    pub n_t: usize,
    pub phi: f64,
    pub b_q: Vec<f64>,
    pub markov_sum: f64,
    pub dim_z: usize,
}

#[derive(Debug, Clone)]
pub struct HyperOutcome {
    pub rounded: RoundedColoring,
    pub beta: f64,
    pub k: usize,
    pub b_final: Vec<f64>,
    pub phi_max: f64,
    /// max_q b_q(T) + 16 beta + 2.
    pub bound: f64,
    pub dropped_rows: usize,
    pub audit: HyperAudit,
    pub traces: Vec<HyperStepTrace>,
}

/// Multi-class walk on a 0/1 instance with column degrees at most k.
pub fn run_hypergraph(
    inst: &Instance,
    k: usize,
    beta: Option<f64>,
    cfg: &HypergraphConfig,
) -> Result<HyperOutcome> {
    let beta = beta.unwrap_or_else(|| deviation_bound(inst));
    let classes = build_classes(inst, k, beta)?;
    let n = inst.n;
    let m = inst.m;
    let kf = k as f64;
    let nf = n as f64;
    let margin = 1.0 - 1.0 / (2.0 * nf);
    let p = cfg.p;
    let b0 = cfg.b0;
    let lambda = cfg.lambda;
    let delta = cfg.delta;
    let target = nf - 2.0;
    let nominal_steps = ((nf - 2.0) / (delta * delta)).ceil().max(1.0);
    let n_classes = classes.classes.len();
    let class_weight: Vec<f64> =
        (0..n_classes).map(|q| if q == 0 { 1.0 / kf } else { 4.0f64.powi(q as i32) }).collect();
    let phi_budget = 1.0 / (nominal_steps * b0.powf(p));
    let active_threshold = 12.0 * kf;

    // Per-origin state.
    let mut alive_l1 = classes.l1.clone();
    let mut inner = vec![0.0f64; m];
    let mut xx = vec![0.0f64; m];
    let mut dead = vec![false; m];
    let mut death_inner = vec![0.0f64; m];
    let mut death_l1 = vec![0.0f64; m];
    let walkers: Vec<usize> = (0..m).filter(|&i| classes.class_of[i].is_some()).collect();

    let mut b_q = vec![b0; n_classes];
    let mut x = vec![0.0f64; n];
    let mut alive = vec![true; n];
    let mut alive_list: Vec<usize> = (0..n).collect();
    let mut mass = 0.0f64;
    let mut t = 0usize;
    let mut phi_max = 0.0f64;
    let mut audit = HyperAudit { min_dim: usize::MAX, ..Default::default() };
    let mut traces = Vec::new();
    let mut basis: Vec<f64> = Vec::new();

    while mass < target - 1e-9 {
        // Refresh alive coordinates and per-origin alive l1 mass.
        let mut changed = false;
        for &j in alive_list.iter() {
            if x[j].abs() >= margin {
                alive[j] = false;
                changed = true;
                for &i in &walkers {
                    let a = inst.rows[i][j];
                    if a != 0.0 {
                        alive_l1[i] = (alive_l1[i] - a).max(0.0);
                    }
                }
            }
        }
        if changed {
            alive_list = (0..n).filter(|&j| alive[j]).collect();
        }
        let nt = alive_list.len();
        if nt == 0 {
            audit.early_stop = true;
            break;
        }
        let nt_f = nt as f64;

        // Death and deviation bookkeeping.
        for &i in &walkers {
            if !dead[i] && alive_l1[i] <= 8.0 * beta {
                dead[i] = true;
                death_inner[i] = inner[i];
                death_l1[i] = alive_l1[i];
            }
        }
        let is_deviating = |i: usize| -> bool {
            (alive_l1[i] - classes.l1[i] * nt_f / nf).abs() >= 4.0 * beta
        };

        // Slacks of active, non-dead rows; class-level blocking.
        // Row ids: 2*origin for the + sign, 2*origin + 1 for the - sign.
        let slack_of = |i: usize, sign: f64, b: f64| -> f64 {
            b - sign * inner[i] - lambda * (classes.l1[i] - xx[i])
        };
        let mut class_members: Vec<Vec<usize>> = vec![Vec::new(); n_classes]; // active row ids
        for &i in &walkers {
            if dead[i] || alive_l1[i] > active_threshold {
                continue;
            }
            let q = classes.class_of[i].unwrap();
            class_members[q].push(2 * i);
            class_members[q].push(2 * i + 1);
        }
        let mut slacks = vec![f64::NAN; 2 * m];
        let mut phi = 0.0f64;
        for (q, members) in class_members.iter().enumerate() {
            for &rid in members {
                let i = rid / 2;
                let sign = if rid % 2 == 0 { 1.0 } else { -1.0 };
                let s = slack_of(i, sign, b_q[q]);
                if s <= 0.0 {
                    return Err(Error::NonpositiveSlack { row: rid, slack: s, step: t });
                }
                slacks[rid] = s;
                phi += class_weight[q] * s.powf(-p);
            }
        }
        phi_max = phi_max.max(phi);
        let phi_cap = 128.0 * nf * nf / nt_f * (2.0 / b0).powf(p);
        if phi > phi_cap * (1.0 + 1e-9) {
            audit.phi_cap_violations += 1;
        }

        // Blocked per class: floor(2^(q-8) n_t^2 / n) smallest slacks.
        let mut blocked: Vec<usize> = Vec::new();
        let mut unblocked: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (q, members) in class_members.iter().enumerate() {
            let quota =
                (2.0f64.powi(q as i32 - 8) * nt_f * nt_f / nf).floor() as usize;
            let mut order = members.clone();
            order.sort_by(|&a, &b2| slacks[a].partial_cmp(&slacks[b2]).unwrap().then(a.cmp(&b2)));
            for (rank, rid) in order.into_iter().enumerate() {
                if rank < quota {
                    blocked.push(rid);
                } else {
                    unblocked[q].push(rid);
                }
            }
        }
        for u in unblocked.iter_mut() {
            u.sort_unstable();
        }

        // Per-class slack floors implied by the weighted cap.
        for (q, u) in unblocked.iter().enumerate() {
            if u.is_empty() || phi > phi_cap {
                continue;
            }
            let worst = u.iter().map(|&rid| 1.0 / slacks[rid]).fold(0.0f64, f64::max);
            let cap = if q == 0 {
                kf.powf(1.0 / p) * 2.0f64.powf(1.0 + 15.0 / p) / b0 * (nf / nt_f).powf(3.0 / p)
            } else {
                2.0f64.powf(1.0 + (15.0 - 3.0 * q as f64) / p) / b0 * (nf / nt_f).powf(3.0 / p)
            };
            if worst > cap * (1.0 + 1e-9) {
                audit.class_slack_bound_violations += 1;
            }
        }

        // Pack step data.
        let pack_row = |i: usize, out: &mut Vec<f64>| {
            out.clear();
            out.extend(alive_list.iter().map(|&j| inst.rows[i][j]));
        };
        let xp: Vec<f64> = alive_list.iter().map(|&j| x[j]).collect();

        // Constraints: x, drifts of blocked rows, inactive heavy rows, and
        // rows deviating from proportional shrinkage.
        let mut constraints: Vec<f64> = Vec::new();
        constraints.extend_from_slice(&xp);
        let mut a_buf = Vec::new();
        for &rid in &blocked {
            let i = rid / 2;
            let sign = if rid % 2 == 0 { 1.0 } else { -1.0 };
            pack_row(i, &mut a_buf);
            let start = constraints.len();
            constraints.resize(start + nt, 0.0);
            let dst = &mut constraints[start..];
            for tt in 0..nt {
                dst[tt] = 2.0 * lambda * a_buf[tt] * xp[tt] - sign * a_buf[tt];
            }
        }
        for &i in &walkers {
            if dead[i] {
                continue;
            }
            let inactive = alive_l1[i] > active_threshold;
            if inactive || is_deviating(i) {
                pack_row(i, &mut a_buf);
                constraints.extend_from_slice(&a_buf);
            }
        }
        let c_rows = constraints.len() / nt;
        let dim = householder_nullspace(&constraints, c_rows, nt, &mut basis);
        audit.min_dim = audit.min_dim.min(dim);
        let required = (nt_f / 2.0).ceil() as usize;
        if dim < required {
            if nt >= 3 {
                return Err(Error::DimensionLemmaViolated { step: t, dim, required, n_alive: nt });
            }
            if dim == 0 {
                audit.early_stop = true;
                break;
            }
        }

        // Class budgets and Markov feasibility.
        let w_q = |q: usize| -> f64 { 2.0f64.powf(5.0 - q as f64 / 4.0) * (nf / nt_f).powf(0.25) };
        let h_q = |q: usize| -> f64 { 2.0f64.powi(q as i32 + 2) * kf / nf };
        let mut markov_sum = 0.0;
        let mut budgets = vec![f64::INFINITY; n_classes];
        for (q, u) in unblocked.iter().enumerate() {
            if u.is_empty() {
                continue;
            }
            markov_sum += 1.0 / w_q(q);
            let sum_w: f64 = u.iter().map(|&rid| slacks[rid].powf(-(p + 1.0))).sum();
            budgets[q] = 8.0 * w_q(q) * h_q(q) * sum_w;
        }
        audit.markov_max = audit.markov_max.max(markov_sum);
        if markov_sum >= 1.0 {
            audit.markov_violations += 1;
        }

        // First basis vector satisfying every class budget.
        let mut v_idx = None;
        'vscan: for w_idx in 0..dim {
            let w = &basis[w_idx * nt..(w_idx + 1) * nt];
            for (q, u) in unblocked.iter().enumerate() {
                if u.is_empty() {
                    continue;
                }
                let mut obj = 0.0;
                for &rid in u {
                    let i = rid / 2;
                    let sign = if rid % 2 == 0 { 1.0 } else { -1.0 };
                    let row = &inst.rows[i];
                    let mut d = 0.0;
                    for (tt, &j) in alive_list.iter().enumerate() {
                        let a = row[j];
                        if a != 0.0 {
                            d += (2.0 * lambda * a * xp[tt] - sign * a) * w[tt];
                        }
                    }
                    obj += slacks[rid].powf(-(p + 1.0)) * d * d;
                }
                if obj > budgets[q] + 1e-12 * budgets[q].max(1.0) {
                    continue 'vscan;
                }
            }
            v_idx = Some(w_idx);
            break;
        }
        let Some(v_idx) = v_idx else {
            return Err(Error::NoFeasibleDirection { step: t });
        };
        let v = basis[v_idx * nt..(v_idx + 1) * nt].to_vec();

        // Per-class barrier rates (zero until the class activates).
        let mut rates = vec![0.0f64; n_classes];
        for (q, u) in unblocked.iter().enumerate() {
            let activated = class_members[q].iter().any(|&rid| !is_deviating(rid / 2));
            if !activated || u.is_empty() {
                continue;
            }
            let max_inv = u.iter().map(|&rid| 1.0 / slacks[rid]).fold(0.0f64, f64::max);
            rates[q] = 4.0 * (p + 1.0) * w_q(q) * h_q(q) * max_inv;
        }

        // Candidate dots per origin.
        let mut av = vec![0.0f64; m];
        let mut u1 = vec![0.0f64; m];
        let mut u2 = vec![0.0f64; m];
        for &i in &walkers {
            let row = &inst.rows[i];
            let (mut s_av, mut s_u1, mut s_u2) = (0.0, 0.0, 0.0);
            for (tt, &j) in alive_list.iter().enumerate() {
                let a = row[j];
                if a != 0.0 {
                    let q = a * v[tt];
                    s_av += q;
                    s_u1 += q * a * xp[tt];
                    s_u2 += q * v[tt];
                }
            }
            av[i] = s_av;
            u1[i] = s_u1;
            u2[i] = s_u2;
        }

        let mut delta_s = delta;
        let mut halvings = 0usize;
        let (eps, b_next, delta_used) = loop {
            let fits = (0..nt).all(|tt| xp[tt].abs() + delta_s * v[tt].abs() <= 1.0 + 1e-12);
            if !fits {
                if halvings < cfg.max_halvings {
                    halvings += 1;
                    audit.overshoot_retries += 1;
                    delta_s *= 0.5;
                    continue;
                }
                return Err(Error::OvershootBound { coord: 0, value: f64::NAN, step: t });
            }
            let b_next: Vec<f64> =
                (0..n_classes).map(|q| b_q[q] + delta_s * delta_s * rates[q]).collect();
            let phi_cand = |eps: f64| -> f64 {
                let mut acc = 0.0f64;
                for (q, members) in class_members.iter().enumerate() {
                    for &rid in members {
                        let i = rid / 2;
                        let sign = if rid % 2 == 0 { 1.0 } else { -1.0 };
                        let inner_c = inner[i] + eps * delta_s * av[i];
                        let xx_c = xx[i]
                            + 2.0 * eps * delta_s * u1[i]
                            + delta_s * delta_s * u2[i];
                        let s = b_next[q] - sign * inner_c - lambda * (classes.l1[i] - xx_c);
                        if s <= 0.0 {
                            return f64::INFINITY;
                        }
                        acc += class_weight[q] * s.powf(-p);
                    }
                }
                acc
            };
            let (pp, pm) = (phi_cand(1.0), phi_cand(-1.0));
            let (eps, phi_new) = if pp <= pm { (1.0, pp) } else { (-1.0, pm) };
            let ratio = delta_s / delta;
            let allowed = phi + ratio * ratio * phi_budget + 1e-12 * phi.abs();
            if !phi_new.is_finite() || phi_new > allowed {
                if halvings < cfg.max_halvings {
                    halvings += 1;
                    audit.budget_retries += 1;
                    delta_s *= 0.5;
                    continue;
                }
                if !phi_new.is_finite() {
                    return Err(Error::NonpositiveSlack { row: usize::MAX, slack: -1.0, step: t });
                }
                return Err(Error::StepBudgetExhausted { step: t, retries: halvings });
            }
            break (eps, b_next, delta_s);
        };

        for (tt, &j) in alive_list.iter().enumerate() {
            x[j] = (x[j] + eps * delta_used * v[tt]).clamp(-1.0, 1.0);
        }
        for &i in &walkers {
            inner[i] += eps * delta_used * av[i];
            xx[i] += 2.0 * eps * delta_used * u1[i] + delta_used * delta_used * u2[i];
        }
        b_q = b_next;
        mass += delta_used * delta_used;
        t += 1;
        let xsq: f64 = x.iter().map(|v| v * v).sum();
        if (xsq - mass).abs() > 1e-6 * nf {
            audit.norm_identity_violations += 1;
        }
        if cfg.trace_every > 0 && t % cfg.trace_every == 0 {
            traces.push(HyperStepTrace {
                t,
                n_t: nt,
                phi,
                b_q: b_q.clone(),
                markov_sum,
                dim_z: dim,
            });
        }
        if t > 64 * nominal_steps as usize + 64 {
            return Err(Error::StepBudgetExhausted { step: t, retries: 0 });
        }
    }

    // Dead-row residuals: discrepancy gained after death is at most twice
    // the alive l1 mass at death (which is at most 8 beta).
    for &i in &walkers {
        if dead[i] {
            let residual = (inner[i] - death_inner[i]).abs();
            if residual > 2.0 * death_l1[i] * (1.0 + 1e-9) + 1e-9 {
                audit.dead_residual_violations += 1;
            }
        }
    }
    audit.steps = t;
    let b_worst = b_q.iter().fold(0.0f64, |a, &b| a.max(b));
    let bound = b_worst + 16.0 * beta + 2.0;
    let rounded = round_coloring(&x, inst, None);
    Ok(HyperOutcome {
        rounded,
        beta,
        k,
        b_final: b_q,
        phi_max,
        bound,
        dropped_rows: classes.dropped.len(),
        audit,
        traces,
    })
}

/// Sampled check of the proportional-shrinkage hypothesis: for random
/// column subsets S and c in {1,2,4,10}, at most c^{-2} |S| rows may deviate
/// from their proportional mass by c*beta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoRandomnessReport {
    pub samples: usize,
    pub beta: f64,
    /// (c, subsets violating the cap, worst count/cap ratio).
    pub per_c: Vec<(f64, usize, f64)>,
}

impl PseudoRandomnessReport {
    pub fn passed(&self) -> bool {
        self.per_c.iter().all(|&(_, v, _)| v == 0)
    }
}

pub fn verify_pseudo_randomness<R: Rng>(
    inst: &Instance,
    beta: f64,
    samples: usize,
    rng: &mut R,
) -> PseudoRandomnessReport {
    let n = inst.n;
    let l1: Vec<f64> = inst.rows.iter().map(|r| r.iter().sum()).collect();
    let cs = [1.0f64, 2.0, 4.0, 10.0];
    let mut violations = vec![0usize; cs.len()];
    let mut worst = vec![0.0f64; cs.len()];
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..samples {
        let size = rng.gen_range(1..=n);
        for i in 0..size {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        let frac = size as f64 / n as f64;
        let devs: Vec<f64> = inst
            .rows
            .iter()
            .zip(&l1)
            .map(|(row, &norm1)| {
                let got: f64 = idx[..size].iter().map(|&j| row[j]).sum();
                (got - norm1 * frac).abs()
            })
            .collect();
        for (ci, &c) in cs.iter().enumerate() {
            let count = devs.iter().filter(|&&d| d >= c * beta).count() as f64;
            let cap = size as f64 / (c * c);
            if count > cap {
                violations[ci] += 1;
            }
            if cap > 0.0 {
                worst[ci] = worst[ci].max(count / cap);
            }
        }
    }
    PseudoRandomnessReport {
        samples,
        beta,
        per_c: cs
            .iter()
            .zip(violations)
            .zip(worst)
            .map(|((&c, v), w)| (c, v, w))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate, GenKind, GeneratorSpec};
    use crate::instance::build_instance;
    use crate::presets::{preset_komlos, preset_sub_gaussian};

    fn k_regular_instance(n: usize, m: usize, k: usize, seed: u64) -> Instance {
        generate(&GeneratorSpec { kind: GenKind::KRegularHypergraph { n, m, k }, seed }).unwrap()
    }

    #[test]
    fn classes_regular_rows_land_in_class_zero() {
        // Rows of weight exactly k with k >= 1 satisfy sqrt(k) <= k < 2k.
        let k = 4;
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..12).map(|j| if (j + i) % 3 == 0 { 1.0 } else { 0.0 }).collect())
            .collect();
        let inst = build_instance(rows, HFunction::constant(1.0)).unwrap();
        let cls = build_classes(&inst, k, 1.0).unwrap();
        for i in 0..6 {
            assert_eq!(cls.class_of[i], Some(0));
        }
    }

    #[test]
    fn classes_dyadic_membership() {
        let k = 2;
        let n = 32;
        let mut rows = Vec::new();
        // weight 8 = 4k: class 2 since 2^2 k = 8 <= 8 < 16 = 2^3 k.
        rows.push((0..n).map(|j| if j < 8 { 1.0 } else { 0.0 }).collect::<Vec<f64>>());
        // weight below sqrt(2): dropped.
        rows.push(vec![0.0; n]);
        let inst = build_instance(rows, HFunction::constant(1.0)).unwrap();
        let cls = build_classes(&inst, k, 1.0).unwrap();
        assert_eq!(cls.class_of[0], Some(2));
        assert_eq!(cls.dropped, vec![1]);
    }

    #[test]
    fn classes_reject_bad_input() {
        let inst = build_instance(vec![vec![0.5, 0.0, 0.0]], HFunction::constant(1.0)).unwrap();
        assert!(matches!(build_classes(&inst, 2, 1.0), Err(Error::NotZeroOne { .. })));
        let inst2 = build_instance(vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]], HFunction::constant(1.0)).unwrap();
        assert!(matches!(
            build_classes(&inst2, 1, 0.5),
            Err(Error::ColumnDegreeExceeded { col: 0, .. })
        ));
    }

    #[test]
    fn deviation_bound_of_all_ones() {
        // Every row all-ones: row sums vanish for v orthogonal to all-ones.
        let inst = build_instance(vec![vec![1.0; 8]; 3], HFunction::constant(1.0)).unwrap();
        assert!(deviation_bound(&inst) < 1e-6);
    }

    #[test]
    fn pseudo_randomness_complete_hypergraph_passes() {
        let inst = build_instance(vec![vec![1.0; 10]; 4], HFunction::constant(1.0)).unwrap();
        let mut rng = crate::harness::seeded_rng(7, crate::harness::streams::VERIFY);
        let rep = verify_pseudo_randomness(&inst, 0.5, 200, &mut rng);
        assert!(rep.passed(), "all-ones rows shrink exactly proportionally");
    }

    #[test]
    fn pseudo_randomness_block_matrix_fails() {
        // One dense block: rows concentrated on half the columns deviate
        // badly when S is inside that half.
        let n = 16;
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..n).map(|j| if j < 8 { 1.0 } else { 0.0 }).collect())
            .collect();
        let inst = build_instance(rows, HFunction::constant(1.0)).unwrap();
        let mut rng = crate::harness::seeded_rng(3, crate::harness::streams::VERIFY);
        let rep = verify_pseudo_randomness(&inst, 0.25, 300, &mut rng);
        assert!(!rep.passed(), "block structure must be flagged");
    }

    #[test]
    fn pseudo_randomness_random_regular_passes() {
        let inst = k_regular_instance(32, 32, 4, 11);
        let beta = deviation_bound(&inst);
        let mut rng = crate::harness::seeded_rng(11, crate::harness::streams::VERIFY);
        let rep = verify_pseudo_randomness(&inst, beta, 300, &mut rng);
        assert!(rep.passed(), "spectral beta certifies sampled subsets: {:?}", rep.per_c);
    }

    #[test]
    fn hypergraph_walk_completes_and_bounds_hold() {
        let k = 4;
        let inst = k_regular_instance(32, 32, k, 5);
        let cfg = HypergraphConfig::for_k(k);
        let out = run_hypergraph(&inst, k, None, &cfg).unwrap();
        assert_eq!(out.audit.markov_violations, 0);
        assert_eq!(out.audit.dead_residual_violations, 0);
        assert_eq!(out.audit.norm_identity_violations, 0);
        assert!(out.rounded.max_disc <= out.bound);
        assert!(out.audit.markov_max < 1.0);
    }

    #[test]
    fn hypergraph_walk_with_live_rows() {
        // Complete hypergraph: rows shrink exactly proportionally, so the
        // true deviation cap is 0; with a tiny beta nothing dies or
        // deviates, and the class machinery runs with live rows.
        let k = 4;
        let n = 24;
        let rows = vec![vec![1.0; n]; k];
        let inst = build_instance(rows, HFunction::constant(1.0)).unwrap();
        let cfg = HypergraphConfig::for_k(k);
        let out = run_hypergraph(&inst, k, Some(0.01), &cfg).unwrap();
        assert!(out.phi_max > 0.0, "rows must enter the potential");
        assert_eq!(out.audit.markov_violations, 0);
        assert_eq!(out.audit.dead_residual_violations, 0);
        assert!(out.rounded.max_disc <= out.bound);
        // All four identical rows share one class above class 0.
        let classes = build_classes(&inst, k, 0.01).unwrap();
        assert!(classes.class_of.iter().all(|c| *c == Some(2)), "{:?}", classes.class_of);
    }

    #[test]
    fn hypergraph_empty_instance_trivial() {
        let inst = build_instance(vec![vec![0.0; 8]; 2], HFunction::constant(1.0)).unwrap();
        let cfg = HypergraphConfig::for_k(2);
        let out = run_hypergraph(&inst, 2, Some(0.5), &cfg).unwrap();
        assert_eq!(out.rounded.max_disc, 0.0);
        assert_eq!(out.dropped_rows, 2);
    }

    #[test]
    fn combined_walk_zero_second_matrix() {
        let spec = GeneratorSpec { kind: GenKind::KomlosRandomColumns { m: 16, n: 16 }, seed: 2 };
        let inst_a = generate(&spec).unwrap();
        let inst_b = build_instance(vec![vec![0.0; 16]; 16], HFunction::constant(0.0)).unwrap();
        let ka = preset_komlos(&inst_a).unwrap();
        let mut cfg_a = ka.preset.config.clone();
        cfg_a.delta = 0.2;
        let mut cfg_b = WalkConfig::new(2.0, 1.0, BarrierRule::Fixed);
        cfg_b.delta = 0.2;
        let cc = CombinedConfig::new(cfg_a, cfg_b);
        let out = run_combined(&inst_a, &inst_b, &cc).unwrap();
        assert_eq!(out.audit.no_feasible_direction, 0);
        assert_eq!(out.audit.norm_identity_violations, 0);
        // Zero matrix gains zero discrepancy; matrix A stays within its
        // certified single-walk bound.
        assert_eq!(out.rounded_b.max_disc, 0.0);
        assert!(out.rounded_a.max_disc <= ka.preset.predicted_bound);
        // Fixed barriers: the 4x multiplier leaves them at b0.
        assert!((out.b_final_a - ka.preset.config.b0).abs() < 1e-9);
        assert!(out.phi_weighted_max <= 5.0 * 16.0);
    }

    #[test]
    fn combined_walk_two_real_matrices() {
        let n = 16;
        let spec = GeneratorSpec { kind: GenKind::KomlosRandomColumns { m: n, n }, seed: 3 };
        let inst_a = generate(&spec).unwrap();
        let gspec = GeneratorSpec {
            kind: GenKind::Gaussian { m: n, n, sigma: 1.0 / (n as f64).sqrt() },
            seed: 4,
        };
        let inst_b = generate(&gspec).unwrap();
        let cfg_a = preset_komlos(&inst_a).unwrap().preset.config;
        let cfg_b = preset_sub_gaussian(&inst_b, 1.0 / (n as f64).sqrt()).unwrap().config;
        let cc = CombinedConfig::new(cfg_a, cfg_b);
        let out = run_combined(&inst_a, &inst_b, &cc).unwrap();
        assert_eq!(out.audit.norm_identity_violations, 0);
        assert!(out.phi_weighted_max <= 5.0 * n as f64 * (1.0 + 1e-9));
        assert!(out.audit.intersection_min_dim >= 1);
    }
}
