//! Cache-version selection by dual decomposition.
//!
//! Users pick the (cache, version) pair with the best price-adjusted utility
//! against the current link prices; links then move their price along the
//! subgradient `load - capacity`, projected onto the non-negative orthant.
//! Primal recovery uses a step-weighted average over a sliding window of
//! recent selections.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cop::PlacementState;
use crate::model::{CacheId, Catalog, Scenario, Topology, UserId, UserProfile, VersionId};
use crate::sim::link_loads;

/// Scores within this distance of the best are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CaveError {
    #[error("averaging window must be at least 1")]
    EmptyWindow,
    #[error("averaging window {window} exceeds history length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("at least one iteration is required")]
    NoIterations,
}

/// Diminishing step sizes `h_t = h0 / (1 + t)^gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub h0: f64,
    pub gamma: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { h0: 0.01, gamma: 0.5 }
    }
}

impl StepSchedule {
    pub fn new(h0: f64, gamma: f64) -> Self {
        StepSchedule { h0, gamma }
    }

    #[inline]
    pub fn step(&self, t: usize) -> f64 {
        self.h0 / (1.0 + t as f64).powf(self.gamma)
    }

    /// The sum of steps diverges and the steps vanish only for `h0 > 0` and
    /// `0 < gamma <= 1`.
    pub fn check(&self) -> Result<(), String> {
        if !(self.h0 > 0.0 && self.h0.is_finite()) {
            return Err(format!("h0 must be positive, got {}", self.h0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        Ok(())
    }
}

/// A user's (cache, version) pick; the one-hot row of the selection matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Choice {
    pub cache: CacheId,
    pub version: VersionId,
}

/// One choice per user, indexed by user id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection(pub Vec<Choice>);

impl Selection {
    #[inline]
    pub fn get(&self, user: UserId) -> Choice {
        self.0[user.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, Choice)> + '_ {
        self.0.iter().enumerate().map(|(s, &c)| (UserId(s), c))
    }

    pub fn utility(&self, users: &[UserProfile], catalog: &Catalog) -> f64 {
        self.iter()
            .map(|(s, c)| users[s.0].utility(catalog.bitrate(c.version)))
            .sum()
    }

    /// The same selection as a sparse 0/1 matrix.
    pub fn to_fractional(&self) -> BTreeMap<(UserId, CacheId, VersionId), f64> {
        self.iter().map(|(s, c)| ((s, c.cache, c.version), 1.0)).collect()
    }
}

/// Picks the best-scoring candidate; among candidates within
/// [`TIE_TOLERANCE`] of the best, the lowest `(cache, version)` wins.
pub(crate) fn argmax_choice(candidates: &[(Choice, f64)]) -> (Choice, f64) {
    let best = candidates
        .iter()
        .map(|&(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .filter(|&&(_, s)| s >= best - TIE_TOLERANCE)
        .min_by_key(|&&(c, _)| c)
        .map(|&(c, _)| (c, best))
        .expect("candidate list is never empty")
}

/// Sum of `prices` over the route from `cache` to `user`.
#[inline]
pub(crate) fn route_price(topology: &Topology, prices: &[f64], user: UserId, cache: CacheId) -> f64 {
    topology.route(user, cache).iter().map(|l| prices[l.0]).sum()
}

/// Link prices for the selection problem.
#[derive(Clone, Debug, PartialEq)]
pub struct CaveDualState {
    /// Indexed by link id.
    pub lambda: Vec<f64>,
    pub iteration: usize,
    pub step_schedule: StepSchedule,
}

impl CaveDualState {
    pub fn new(links: usize, step_schedule: StepSchedule) -> Self {
        CaveDualState {
            lambda: vec![0.0; links],
            iteration: 0,
            step_schedule,
        }
    }

    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self::new(scenario.topology.links.len(), scenario.schedule.cave_step)
    }

    pub fn current_step(&self) -> f64 {
        self.step_schedule.step(self.iteration)
    }
}

/// Every stored `(cache, version)` pair this user may pick, with its score.
fn cave_candidates(
    profile: &UserProfile,
    placement: &PlacementState,
    lambda: &[f64],
    topology: &Topology,
    catalog: &Catalog,
    out: &mut Vec<(Choice, f64)>,
) {
    out.clear();
    let user = profile.user;
    let interest = profile.interest(catalog);
    for cache in topology.cache_ids() {
        if placement.stores(cache, catalog.null_version) {
            out.push((
                Choice {
                    cache,
                    version: catalog.null_version,
                },
                profile.stall_utility,
            ));
        }
        let mut price = None;
        for v in interest {
            if !placement.stores(cache, v.id) {
                continue;
            }
            let p = *price.get_or_insert_with(|| route_price(topology, lambda, user, cache));
            out.push((
                Choice { cache, version: v.id },
                profile.utility(v.bitrate_mbps) - v.bitrate_mbps * p,
            ));
        }
    }
}

/// The user-side step: best `(cache, version)` among stored versions of the
/// user's video, scored as `U(x) - x · Σ λ` over the route.
pub fn cave_user_select(
    profile: &UserProfile,
    placement: &PlacementState,
    dual: &CaveDualState,
    topology: &Topology,
    catalog: &Catalog,
) -> Choice {
    let mut buf = Vec::new();
    cave_candidates(profile, placement, &dual.lambda, topology, catalog, &mut buf);
    argmax_choice(&buf).0
}

/// Runs the user step for every user against one price snapshot. Returns the
/// selection and the summed best scores.
pub fn cave_select_all(
    scenario: &Scenario,
    placement: &PlacementState,
    dual: &CaveDualState,
) -> (Selection, f64) {
    let mut buf = Vec::new();
    let mut total = 0.0;
    let choices = scenario
        .users
        .iter()
        .map(|p| {
            cave_candidates(p, placement, &dual.lambda, &scenario.topology, &scenario.catalog, &mut buf);
            let (choice, score) = argmax_choice(&buf);
            total += score;
            choice
        })
        .collect();
    (Selection(choices), total)
}

/// The link-side step: `λ ← max(0, λ + h_t (load - R))` for every link from
/// the same selection, then advance the iteration counter.
pub fn cave_link_update(
    dual: &mut CaveDualState,
    selection: &Selection,
    topology: &Topology,
    catalog: &Catalog,
) {
    let loads = link_loads(selection, topology, catalog);
    let h = dual.current_step();
    for (lambda, (load, link)) in dual.lambda.iter_mut().zip(loads.iter().zip(&topology.links)) {
        *lambda = (*lambda + h * (load - link.capacity_mbps)).max(0.0);
    }
    dual.iteration += 1;
}

/// Dual objective: best Lagrangian score per user plus `Σ λ R`.
pub fn cave_dual_value(dual: &CaveDualState, placement: &PlacementState, scenario: &Scenario) -> f64 {
    let (_, scores) = cave_select_all(scenario, placement, dual);
    scores + price_capacity(&dual.lambda, &scenario.topology)
}

pub(crate) fn price_capacity(lambda: &[f64], topology: &Topology) -> f64 {
    lambda
        .iter()
        .zip(&topology.links)
        .map(|(l, link)| l * link.capacity_mbps)
        .sum()
}

/// Step-weighted average of recent selections.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragedSelection {
    pub zbar: BTreeMap<(UserId, CacheId, VersionId), f64>,
    pub window_weight: f64,
}

impl AveragedSelection {
    pub fn utility(&self, users: &[UserProfile], catalog: &Catalog) -> f64 {
        self.zbar
            .iter()
            .map(|(&(s, _, v), &w)| w * users[s.0].utility(catalog.bitrate(v)))
            .sum()
    }

    /// Per-user total weight; 1 for a valid average.
    pub fn user_mass(&self, user: UserId) -> f64 {
        self.zbar
            .range((user, CacheId(0), VersionId(0))..=(user, CacheId(usize::MAX), VersionId(usize::MAX)))
            .map(|(_, w)| w)
            .sum()
    }
}

/// Averages the last `window` entries of `history`, weighting each selection
/// by its step size.
pub fn cave_average(history: &[(Selection, f64)], window: usize) -> Result<AveragedSelection, CaveError> {
    if window == 0 {
        return Err(CaveError::EmptyWindow);
    }
    if window > history.len() {
        return Err(CaveError::WindowTooLong {
            window,
            len: history.len(),
        });
    }
    Ok(average_iter(history[history.len() - window..].iter()))
}

pub(crate) fn average_iter<'a>(entries: impl Iterator<Item = &'a (Selection, f64)>) -> AveragedSelection {
    let mut zbar = BTreeMap::new();
    let mut weight = 0.0;
    for (selection, h) in entries {
        weight += h;
        for (s, c) in selection.iter() {
            *zbar.entry((s, c.cache, c.version)).or_insert(0.0) += h;
        }
    }
    for w in zbar.values_mut() {
        *w /= weight;
    }
    AveragedSelection {
        zbar,
        window_weight: weight,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaveTraceRow {
    pub iteration: usize,
    #[serde(rename = "D_lambda")]
    pub dual_value: f64,
    #[serde(rename = "total_utility_selected")]
    pub utility: f64,
    pub max_link_overload: f64,
}

#[derive(Clone, Debug)]
pub struct CaveRun {
    pub dual: CaveDualState,
    pub average: AveragedSelection,
    pub last_selection: Selection,
    pub trace: Vec<CaveTraceRow>,
    /// Dual value at the final prices.
    pub final_dual_value: f64,
}

/// Largest positive excess of load over capacity, 0 when no link is overloaded.
pub(crate) fn max_overload(loads: &[f64], topology: &Topology) -> f64 {
    loads
        .iter()
        .zip(&topology.links)
        .map(|(l, link)| l - link.capacity_mbps)
        .fold(0.0, f64::max)
}

/// Alternates user selection and price updates for `iterations` rounds.
pub fn cave_run(scenario: &Scenario, placement: &PlacementState, iterations: usize) -> Result<CaveRun, CaveError> {
    if iterations == 0 {
        return Err(CaveError::NoIterations);
    }
    let window = scenario.schedule.averaging_window.clamp(1, iterations);
    let mut dual = CaveDualState::for_scenario(scenario);
    let mut history: VecDeque<(Selection, f64)> = VecDeque::with_capacity(window + 1);
    let mut trace = Vec::with_capacity(iterations);
    let topology = &scenario.topology;
    for _ in 0..iterations {
        let (selection, scores) = cave_select_all(scenario, placement, &dual);
        let loads = link_loads(&selection, topology, &scenario.catalog);
        trace.push(CaveTraceRow {
            iteration: dual.iteration,
            dual_value: scores + price_capacity(&dual.lambda, topology),
            utility: selection.utility(&scenario.users, &scenario.catalog),
            max_link_overload: max_overload(&loads, topology),
        });
        let h = dual.current_step();
        cave_link_update(&mut dual, &selection, topology, &scenario.catalog);
        if history.len() == window {
            history.pop_front();
        }
        history.push_back((selection, h));
    }
    let final_dual_value = cave_dual_value(&dual, placement, scenario);
    Ok(CaveRun {
        average: average_iter(history.iter()),
        last_selection: history.back().expect("iterations >= 1").0.clone(),
        dual,
        trace,
        final_dual_value,
    })
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::model::{
        generate_scenario, Cache, DeviceClass, Endpoint, Link, LinkId, Schedule, ScenarioParams, VideoId,
        SCENARIO_FORMAT,
    };

    /// One root, one extra cache A, one smartphone user. Catalog: 360p/1080p.
    fn two_cache_phone() -> Scenario {
        let catalog = Catalog::new(1, &[1.0, 4.5], 1.0);
        let user = UserId(0);
        let links = vec![
            Link {
                id: LinkId(0),
                from: Endpoint::Cache(CacheId(0)),
                to: Endpoint::Cache(CacheId(1)),
                capacity_mbps: 100.0,
            },
            Link {
                id: LinkId(1),
                from: Endpoint::Cache(CacheId(1)),
                to: Endpoint::User(user),
                capacity_mbps: 25.0,
            },
        ];
        Scenario {
            format: SCENARIO_FORMAT,
            topology: Topology {
                caches: vec![
                    Cache {
                        id: CacheId(0),
                        tier: 0,
                        parent: None,
                        storage_budget_mb: f64::INFINITY,
                    },
                    Cache {
                        id: CacheId(1),
                        tier: 1,
                        parent: Some(CacheId(0)),
                        storage_budget_mb: 10.0,
                    },
                ],
                users: vec![user],
                links,
                routes: vec![vec![vec![LinkId(0), LinkId(1)], vec![LinkId(1)]]],
            },
            catalog,
            users: vec![UserProfile {
                user,
                device: DeviceClass::Smartphone,
                alpha: 20.0,
                cutoff_mbps: 4.5,
                stall_utility: -100.0,
                interest_video: VideoId(0),
            }],
            schedule: Schedule::default(),
            rng_seed: 0,
        }
    }

    fn edge_only_placement(s: &Scenario) -> PlacementState {
        // Root holds only the null version here so cache A is the only source.
        let mut p = PlacementState::empty(&s.topology, &s.catalog);
        p.set(CacheId(0), VersionId(0), true);
        p.set(CacheId(1), VersionId(1), true);
        p.set(CacheId(1), VersionId(2), true);
        p
    }

    #[test]
    fn singleton_option_is_selected() {
        let s = two_cache_phone();
        let mut p = PlacementState::empty(&s.topology, &s.catalog);
        p.set(CacheId(0), VersionId(0), true);
        p.set(CacheId(1), VersionId(2), true);
        let dual = CaveDualState::for_scenario(&s);
        let c = cave_user_select(&s.users[0], &p, &dual, &s.topology, &s.catalog);
        assert_eq!(c, Choice { cache: CacheId(1), version: VersionId(2) });
    }

    #[test]
    fn priced_selection_examples() {
        let s = two_cache_phone();
        let p = edge_only_placement(&s);
        let mut dual = CaveDualState::for_scenario(&s);
        dual.lambda[1] = 2.0;
        // 360p: 0 - 2 = -2; 1080p: 20 ln 4.5 - 9 = 21.08.
        let c = cave_user_select(&s.users[0], &p, &dual, &s.topology, &s.catalog);
        assert_eq!(c.version, VersionId(2));
        dual.lambda[1] = 8.0;
        // 360p: -8; 1080p: 30.08 - 36 = -5.92; null: -100.
        let c = cave_user_select(&s.users[0], &p, &dual, &s.topology, &s.catalog);
        assert_eq!(c, Choice { cache: CacheId(1), version: VersionId(2) });
        let (_, score) = cave_select_all(&s, &p, &dual);
        assert!((score - (20.0 * 4.5f64.ln() - 36.0)).abs() < 1e-12);
    }

    #[test]
    fn tie_prefers_lowest_cache_then_version() {
        let s = two_cache_phone();
        let p = PlacementState::root_only(&s.topology, &s.catalog);
        let mut p2 = p.clone();
        p2.set(CacheId(1), VersionId(2), true);
        let dual = CaveDualState::for_scenario(&s);
        let c = cave_user_select(&s.users[0], &p2, &dual, &s.topology, &s.catalog);
        assert_eq!(c, Choice { cache: CacheId(0), version: VersionId(2) });
    }

    #[test]
    fn link_update_examples() {
        let mut s = two_cache_phone();
        s.topology.links[1].capacity_mbps = 25.0;
        let mut dual = CaveDualState::new(2, StepSchedule::new(0.1, 1.0));
        // h_0 = 0.1 at t = 0.
        dual.lambda = vec![0.0, 0.5];
        let mut cat = s.catalog.clone();
        cat.versions[2].bitrate_mbps = 30.0;
        let sel = Selection(vec![Choice { cache: CacheId(1), version: VersionId(2) }]);
        cave_link_update(&mut dual, &sel, &s.topology, &cat);
        assert!((dual.lambda[1] - 1.0).abs() < 1e-12);
        assert_eq!(dual.lambda[0], 0.0);
        assert_eq!(dual.iteration, 1);

        // Load below capacity at zero price stays at zero.
        cat.versions[2].bitrate_mbps = 20.0;
        let mut dual = CaveDualState::new(2, StepSchedule { h0: 0.1, gamma: 1.0 });
        cave_link_update(&mut dual, &sel, &s.topology, &cat);
        assert_eq!(dual.lambda[1], 0.0);

        // Load equal to capacity leaves the price unchanged.
        cat.versions[2].bitrate_mbps = 25.0;
        let mut dual = CaveDualState::new(2, StepSchedule { h0: 0.1, gamma: 1.0 });
        dual.lambda[1] = 0.7;
        cave_link_update(&mut dual, &sel, &s.topology, &cat);
        assert_eq!(dual.lambda[1], 0.7);
    }

    #[test]
    fn dual_value_at_zero_prices() {
        let s = two_cache_phone();
        let p = edge_only_placement(&s);
        let dual = CaveDualState::for_scenario(&s);
        let d = cave_dual_value(&dual, &p, &s);
        assert!((d - 20.0 * 4.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn average_examples() {
        let a = Selection(vec![Choice { cache: CacheId(0), version: VersionId(1) }]);
        let b = Selection(vec![Choice { cache: CacheId(1), version: VersionId(2) }]);
        let constant = vec![(a.clone(), 0.3), (a.clone(), 0.2), (a.clone(), 0.1)];
        let avg = cave_average(&constant, 3).unwrap();
        assert_eq!(avg.zbar.len(), 1);
        assert!((avg.zbar[&(UserId(0), CacheId(0), VersionId(1))] - 1.0).abs() < 1e-12);

        let alt = vec![(a.clone(), 0.5), (b.clone(), 0.5), (a.clone(), 0.5), (b.clone(), 0.5)];
        let avg = cave_average(&alt, 4).unwrap();
        assert!((avg.zbar[&(UserId(0), CacheId(0), VersionId(1))] - 0.5).abs() < 1e-12);
        assert!((avg.zbar[&(UserId(0), CacheId(1), VersionId(2))] - 0.5).abs() < 1e-12);
        assert!((avg.user_mass(UserId(0)) - 1.0).abs() < 1e-12);

        assert_eq!(cave_average(&alt, 0), Err(CaveError::EmptyWindow));
        assert!(cave_average(&alt, 5).is_err());
    }

    #[test]
    fn run_lengths_and_uncongested_behaviour() {
        let mut params = ScenarioParams::default();
        params.videos = 5;
        params.fanouts = vec![2];
        params.tier_storage_videos = vec![1.0];
        params.users_per_edge = 2;
        params.backbone_capacity_mbps = 1000.0;
        let s = generate_scenario(&params, 3).unwrap();
        let p = PlacementState::root_only(&s.topology, &s.catalog);
        let run = cave_run(&s, &p, 1).unwrap();
        assert_eq!(run.trace.len(), 1);

        let run = cave_run(&s, &p, 50).unwrap();
        assert!(run.dual.lambda.iter().all(|&l| l == 0.0));
        let first = cave_select_all(&s, &p, &CaveDualState::for_scenario(&s)).0;
        assert_eq!(run.last_selection, first);
        assert!(run.trace.iter().all(|r| r.max_link_overload == 0.0));
        assert_eq!(cave_run(&s, &p, 0).unwrap_err(), CaveError::NoIterations);
    }
}
