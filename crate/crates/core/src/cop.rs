//! Content placement over pseudo-variables.
//!
//! Users make pseudo-selections that ignore what is actually stored; link
//! prices `λ'` and per-(user, cache, version) consistency prices `μ'` are
//! moved by subgradient steps, and each cache re-solves a fractional knapsack
//! over `Σ_s μ'` every round. The real placement keeps only versions with
//! `p' = 1`.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::cave::{
    argmax_choice, average_iter, max_overload, price_capacity, route_price, AveragedSelection, Choice, Selection,
    StepSchedule,
};
use crate::model::{CacheId, Catalog, Scenario, Topology, UserId, UserProfile, VersionId};
use crate::sim::link_loads;

/// `p'` at or above `1 - ROUNDING_TOLERANCE` counts as stored.
pub const ROUNDING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CopError {
    #[error("at least one iteration is required")]
    NoIterations,
}

/// Binary placement, `stored[cache][version]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementState {
    stored: Vec<Vec<bool>>,
}

impl PlacementState {
    pub fn empty(topology: &Topology, catalog: &Catalog) -> Self {
        PlacementState {
            stored: vec![vec![false; catalog.versions.len()]; topology.caches.len()],
        }
    }

    /// Everything at the root (including the null version), nothing elsewhere.
    pub fn root_only(topology: &Topology, catalog: &Catalog) -> Self {
        let mut p = Self::empty(topology, catalog);
        if let Some(root) = topology.root() {
            p.stored[root.0].iter_mut().for_each(|x| *x = true);
        }
        p
    }

    #[inline]
    pub fn stores(&self, cache: CacheId, version: VersionId) -> bool {
        self.stored[cache.0][version.0]
    }

    pub fn set(&mut self, cache: CacheId, version: VersionId, stored: bool) {
        self.stored[cache.0][version.0] = stored;
    }

    pub fn stored_versions(&self, cache: CacheId) -> impl Iterator<Item = VersionId> + '_ {
        self.stored[cache.0]
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(v, _)| VersionId(v))
    }

    pub fn storage_used(&self, cache: CacheId, catalog: &Catalog) -> f64 {
        self.stored_versions(cache).map(|v| catalog.size(v)).sum()
    }

    pub fn caches(&self) -> usize {
        self.stored.len()
    }
}

/// Relaxed placement `p'[cache][version]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPlacement {
    pub p_prime: Vec<Vec<f64>>,
}

impl PseudoPlacement {
    #[inline]
    pub fn get(&self, cache: CacheId, version: VersionId) -> f64 {
        self.p_prime[cache.0][version.0]
    }

    /// `Σ_v Y_v p'_{c,v}`, summed in version order.
    pub fn storage_used(&self, cache: CacheId, catalog: &Catalog) -> f64 {
        weighted_sum(&self.p_prime[cache.0][1..], catalog)
    }

    pub fn fractional_count(&self, cache: CacheId) -> usize {
        self.p_prime[cache.0]
            .iter()
            .filter(|&&p| p > 0.0 && p < 1.0)
            .count()
    }
}

fn weighted_sum(fractions: &[f64], catalog: &Catalog) -> f64 {
    fractions
        .iter()
        .zip(catalog.real_versions())
        .map(|(p, v)| p * v.file_size_mb)
        .sum()
}

fn items_weight(fractions: &[f64], weights: &[f64]) -> f64 {
    fractions.iter().zip(weights).map(|(x, w)| x * w).sum()
}

/// Greedy fractional knapsack: items in decreasing `value / weight` (ties by
/// index), each taken as fully as the remaining budget allows. Returns the
/// fraction taken of each item. At most one fraction lies strictly between
/// 0 and 1, and `Σ weight · fraction <= budget` holds exactly when summed in
/// index order.
pub fn greedy_fractional_knapsack(values: &[f64], weights: &[f64], budget: f64) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    let n = values.len();
    let ratio = |i: usize| {
        if weights[i] <= 0.0 {
            f64::INFINITY
        } else {
            values[i] / weights[i]
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ratio(b).total_cmp(&ratio(a)).then(a.cmp(&b)));

    let mut x = vec![0.0; n];
    let mut remaining = budget.max(0.0);
    let mut last = None;
    for &i in &order {
        if weights[i] <= 0.0 {
            x[i] = 1.0;
            continue;
        }
        if remaining <= 0.0 {
            break;
        }
        if weights[i] <= remaining {
            x[i] = 1.0;
            remaining -= weights[i];
            last = Some(i);
        } else {
            x[i] = remaining / weights[i];
            last = Some(i);
            break;
        }
    }

    // Float accumulation in a different order can overshoot by a few ulps;
    // trim the last item taken until the canonical sum fits.
    if budget.is_finite() {
        if let Some(i) = last {
            loop {
                let used = items_weight(&x, weights);
                if used <= budget {
                    break;
                }
                let trimmed = (x[i] - (used - budget) / weights[i]).max(0.0);
                x[i] = if trimmed < x[i] { trimmed } else { x[i].next_down().max(0.0) };
                if x[i] == 0.0 {
                    break;
                }
            }
        }
    }
    x
}

pub fn knapsack_value(values: &[f64], fractions: &[f64]) -> f64 {
    values.iter().zip(fractions).map(|(v, x)| v * x).sum()
}

/// Link prices `λ'` and consistency prices `μ'` for the placement problem.
///
/// `μ'` is materialized only for the versions of each user's video at
/// non-root caches; every other entry is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CopDualState {
    pub lambda_p: Vec<f64>,
    /// `mu_p[user][cache][level]` for the user's video.
    pub mu_p: Vec<Vec<Vec<f64>>>,
    interest_base: Vec<usize>,
    pub iteration: usize,
    pub step_schedule: StepSchedule,
}

impl CopDualState {
    pub fn for_scenario(scenario: &Scenario) -> Self {
        let caches = scenario.topology.caches.len();
        let per_video = scenario.catalog.versions_per_video;
        CopDualState {
            lambda_p: vec![0.0; scenario.topology.links.len()],
            mu_p: vec![vec![vec![0.0; per_video]; caches]; scenario.users.len()],
            interest_base: scenario
                .users
                .iter()
                .map(|u| u.interest(&scenario.catalog)[0].id.0)
                .collect(),
            iteration: 0,
            step_schedule: scenario.schedule.cop_step,
        }
    }

    /// `μ'_{s,c,v}`, zero outside the user's interest set.
    pub fn mu(&self, user: UserId, cache: CacheId, version: VersionId) -> f64 {
        let base = self.interest_base[user.0];
        match version.0.checked_sub(base) {
            Some(level) if level < self.mu_p[user.0][cache.0].len() => self.mu_p[user.0][cache.0][level],
            _ => 0.0,
        }
    }

    pub fn current_step(&self) -> f64 {
        self.step_schedule.step(self.iteration)
    }

    /// Ends a round; both price families share one step index per round.
    pub fn advance(&mut self) {
        self.iteration += 1;
    }
}

fn cop_candidates(
    profile: &UserProfile,
    dual: &CopDualState,
    topology: &Topology,
    catalog: &Catalog,
    only: Option<VersionId>,
    out: &mut Vec<(Choice, f64)>,
) {
    out.clear();
    let root = topology.root();
    let user = profile.user;
    for cache in topology.cache_ids() {
        if only.is_none() && Some(cache) == root {
            out.push((
                Choice {
                    cache,
                    version: catalog.null_version,
                },
                profile.stall_utility,
            ));
        }
        let price = route_price(topology, &dual.lambda_p, user, cache);
        for (level, v) in profile.interest(catalog).iter().enumerate() {
            if only.is_some_and(|o| o != v.id) {
                continue;
            }
            let mu = dual.mu_p[user.0][cache.0][level];
            out.push((
                Choice { cache, version: v.id },
                profile.utility(v.bitrate_mbps) - v.bitrate_mbps * price - mu,
            ));
        }
    }
}

/// Pseudo-selection: best `U(x) - x Σ λ' - μ'` over every cache and every
/// version of the user's video, stored or not. The null version is offered
/// at the root only.
pub fn cop_user_select(profile: &UserProfile, dual: &CopDualState, topology: &Topology, catalog: &Catalog) -> Choice {
    let mut buf = Vec::new();
    cop_candidates(profile, dual, topology, catalog, None, &mut buf);
    argmax_choice(&buf).0
}

/// Pseudo-selection with the version pinned; only the cache is chosen.
pub fn cop_user_select_version(
    profile: &UserProfile,
    version: VersionId,
    dual: &CopDualState,
    topology: &Topology,
    catalog: &Catalog,
) -> Choice {
    let mut buf = Vec::new();
    cop_candidates(profile, dual, topology, catalog, Some(version), &mut buf);
    argmax_choice(&buf).0
}

/// `λ'_l ← max(0, λ'_l + h_t (load'_l - R_l))` from the pseudo-selection.
pub fn cop_link_update(dual: &mut CopDualState, pseudo_selection: &Selection, topology: &Topology, catalog: &Catalog) {
    let loads = link_loads(pseudo_selection, topology, catalog);
    let h = dual.current_step();
    for (lambda, (load, link)) in dual.lambda_p.iter_mut().zip(loads.iter().zip(&topology.links)) {
        *lambda = (*lambda + h * (load - link.capacity_mbps)).max(0.0);
    }
}

/// Cache-side step for a non-root cache: move `μ'_{s,c,·}` along
/// `z' - p'`, then recompute `p'_c` by the greedy knapsack over `Σ_s μ'`.
pub fn cop_cache_update(
    cache: CacheId,
    dual: &mut CopDualState,
    pseudo_selection: &Selection,
    pseudo: &mut PseudoPlacement,
    scenario: &Scenario,
) {
    debug_assert_ne!(Some(cache), scenario.topology.root(), "root placement is fixed");
    let catalog = &scenario.catalog;
    let h = dual.current_step();
    let row = &pseudo.p_prime[cache.0];
    let mut values = vec![0.0; catalog.versions.len() - 1];
    for profile in &scenario.users {
        let s = profile.user;
        let chosen = pseudo_selection.get(s);
        let base = dual.interest_base[s.0];
        for (level, mu) in dual.mu_p[s.0][cache.0].iter_mut().enumerate() {
            let v = base + level;
            let z = if chosen.cache == cache && chosen.version.0 == v { 1.0 } else { 0.0 };
            *mu = (*mu + h * (z - row[v])).max(0.0);
            values[v - 1] += *mu;
        }
    }
    let weights: Vec<f64> = catalog.real_versions().iter().map(|v| v.file_size_mb).collect();
    let budget = scenario.topology.caches[cache.0].storage_budget_mb;
    let fractions = greedy_fractional_knapsack(&values, &weights, budget);
    let row = &mut pseudo.p_prime[cache.0];
    row[0] = 0.0;
    row[1..].copy_from_slice(&fractions);
}

/// Keeps versions with `p' = 1` (within [`ROUNDING_TOLERANCE`]); the root
/// stores everything.
pub fn round_placement(pseudo: &PseudoPlacement, topology: &Topology, catalog: &Catalog) -> PlacementState {
    let root = topology.root();
    let mut placement = PlacementState::empty(topology, catalog);
    for cache in topology.cache_ids() {
        if Some(cache) == root {
            placement.stored[cache.0].iter_mut().for_each(|x| *x = true);
            continue;
        }
        let row = &pseudo.p_prime[cache.0];
        let mut near_one = None;
        for v in catalog.real_versions() {
            let p = row[v.id.0];
            if p >= 1.0 - ROUNDING_TOLERANCE {
                placement.stored[cache.0][v.id.0] = true;
                if p < 1.0 {
                    near_one = Some(v.id);
                }
            }
        }
        // Rounding a near-one fraction up must not break the storage budget.
        if let Some(v) = near_one {
            if placement.storage_used(cache, catalog) > topology.caches[cache.0].storage_budget_mb {
                placement.stored[cache.0][v.0] = false;
            }
        }
    }
    placement
}

/// Pseudo-state for the placement problem, advanced one round at a time.
#[derive(Clone, Debug)]
pub struct CopSolver {
    pub dual: CopDualState,
    pub pseudo: PseudoPlacement,
}

impl CopSolver {
    /// Zero prices and the knapsack solution at zero prices.
    pub fn new(scenario: &Scenario) -> Self {
        let topology = &scenario.topology;
        let catalog = &scenario.catalog;
        let root = topology.root();
        let weights: Vec<f64> = catalog.real_versions().iter().map(|v| v.file_size_mb).collect();
        let zeros = vec![0.0; weights.len()];
        let p_prime = topology
            .caches
            .iter()
            .map(|c| {
                if Some(c.id) == root {
                    vec![1.0; catalog.versions.len()]
                } else {
                    let mut row = vec![0.0];
                    row.extend(greedy_fractional_knapsack(&zeros, &weights, c.storage_budget_mb));
                    row
                }
            })
            .collect();
        CopSolver {
            dual: CopDualState::for_scenario(scenario),
            pseudo: PseudoPlacement { p_prime },
        }
    }

    /// Dual objective at the current prices: best pseudo-score per user,
    /// knapsack value per non-root cache and `Σ λ' R`.
    pub fn dual_value(&self, scenario: &Scenario) -> f64 {
        let topology = &scenario.topology;
        let catalog = &scenario.catalog;
        let mut buf = Vec::new();
        let users: f64 = scenario
            .users
            .iter()
            .map(|p| {
                cop_candidates(p, &self.dual, topology, catalog, None, &mut buf);
                argmax_choice(&buf).1
            })
            .sum();
        let root = topology.root();
        let mut caches = 0.0;
        for cache in topology.cache_ids().filter(|&c| Some(c) != root) {
            for profile in &scenario.users {
                for (level, mu) in self.dual.mu_p[profile.user.0][cache.0].iter().enumerate() {
                    let v = self.dual.interest_base[profile.user.0] + level;
                    caches += mu * self.pseudo.p_prime[cache.0][v];
                }
            }
        }
        users + caches + price_capacity(&self.dual.lambda_p, topology)
    }

    /// One synchronous round: pseudo-selection by `select`, then every link
    /// and every non-root cache update from that same selection.
    pub fn round<F>(&mut self, scenario: &Scenario, mut select: F) -> Selection
    where
        F: FnMut(&UserProfile, &CopDualState) -> Choice,
    {
        let selection = Selection(scenario.users.iter().map(|p| select(p, &self.dual)).collect());
        cop_link_update(&mut self.dual, &selection, &scenario.topology, &scenario.catalog);
        let root = scenario.topology.root();
        for cache in scenario.topology.cache_ids().filter(|&c| Some(c) != root) {
            cop_cache_update(cache, &mut self.dual, &selection, &mut self.pseudo, scenario);
        }
        self.dual.advance();
        selection
    }

    pub fn placement(&self, scenario: &Scenario) -> PlacementState {
        round_placement(&self.pseudo, &scenario.topology, &scenario.catalog)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CopTraceRow {
    pub iteration: usize,
    #[serde(rename = "D_prime")]
    pub dual_value: f64,
    #[serde(rename = "pseudo_utility")]
    pub utility: f64,
    pub max_link_overload: f64,
}

#[derive(Clone, Debug)]
pub struct CopRun {
    pub solver: CopSolver,
    pub placement: PlacementState,
    /// Windowed step-weighted average of the pseudo-selections.
    pub average: AveragedSelection,
    pub trace: Vec<CopTraceRow>,
    pub final_dual_value: f64,
}

/// Runs `iterations` placement rounds with the unrestricted pseudo-selection.
pub fn cop_run(scenario: &Scenario, iterations: usize) -> Result<CopRun, CopError> {
    if iterations == 0 {
        return Err(CopError::NoIterations);
    }
    let window = scenario.schedule.averaging_window.clamp(1, iterations);
    let mut solver = CopSolver::new(scenario);
    let mut history: VecDeque<(Selection, f64)> = VecDeque::with_capacity(window + 1);
    let mut trace = Vec::with_capacity(iterations);
    let (topology, catalog) = (&scenario.topology, &scenario.catalog);
    for _ in 0..iterations {
        let iteration = solver.dual.iteration;
        let dual_value = solver.dual_value(scenario);
        let h = solver.dual.current_step();
        let selection = solver.round(scenario, |p, d| cop_user_select(p, d, topology, catalog));
        let loads = link_loads(&selection, topology, catalog);
        trace.push(CopTraceRow {
            iteration,
            dual_value,
            utility: selection.utility(&scenario.users, catalog),
            max_link_overload: max_overload(&loads, topology),
        });
        if history.len() == window {
            history.pop_front();
        }
        history.push_back((selection, h));
    }
    Ok(CopRun {
        placement: solver.placement(scenario),
        final_dual_value: solver.dual_value(scenario),
        average: average_iter(history.iter()),
        solver,
        trace,
    })
}

/// Writes `cache_id,video_id,version_id,p_prime,p_rounded` for every
/// non-root entry with positive `p'` or a stored copy.
pub fn write_placement_csv<W: Write>(
    out: W,
    pseudo: &PseudoPlacement,
    placement: &PlacementState,
    scenario: &Scenario,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cache_id", "video_id", "version_id", "p_prime", "p_rounded"])?;
    let root = scenario.topology.root();
    for cache in scenario.topology.cache_ids().filter(|&c| Some(c) != root) {
        for v in scenario.catalog.real_versions() {
            let p = pseudo.get(cache, v.id);
            let stored = placement.stores(cache, v.id);
            if p > 0.0 || stored {
                let video = v.video.map(|x| x.0).unwrap_or_default();
                w.write_record(&[
                    cache.to_string(),
                    video.to_string(),
                    v.id.to_string(),
                    p.to_string(),
                    u8::from(stored).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
