//! Exhaustive ground truth for small instances.
//!
//! Integer optima come from enumeration; LP relaxations are solved with a
//! dense simplex. Nothing here reuses the dual-decomposition code paths, so
//! the two can be checked against each other.

use std::collections::BTreeMap;
use std::fmt;

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cave::{Choice, Selection, StepSchedule};
use crate::cop::PlacementState;
use crate::model::{generate_scenario, validate, CacheId, LinkId, Scenario, ScenarioParams, UserId, VersionId};

pub const MAX_USERS: usize = 4;
pub const MAX_CACHES: usize = 3;
pub const MAX_VERSIONS_PER_USER: usize = 4;
pub const MAX_LINKS: usize = 8;
/// Upper bound on the joint integer assignment space.
pub const MAX_ASSIGNMENTS: f64 = 1e7;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("scenario is invalid: {0}")]
    Invalid(String),
    #[error("linear relaxation failed: {0}")]
    Lp(String),
}

/// A scenario small enough to enumerate.
#[derive(Clone, Debug)]
pub struct SmallInstance {
    pub scenario: Scenario,
}

impl SmallInstance {
    pub fn new(scenario: Scenario) -> Result<Self, OracleError> {
        if let Some(v) = validate(&scenario).first() {
            return Err(OracleError::Invalid(v.to_string()));
        }
        let too_large = |m: String| Err(OracleError::TooLarge(m));
        let users = scenario.users.len();
        let caches = scenario.topology.caches.len();
        let links = scenario.topology.links.len();
        if users > MAX_USERS {
            return too_large(format!("{users} users > {MAX_USERS}"));
        }
        if caches > MAX_CACHES {
            return too_large(format!("{caches} caches > {MAX_CACHES}"));
        }
        if links > MAX_LINKS {
            return too_large(format!("{links} links > {MAX_LINKS}"));
        }
        for p in &scenario.users {
            let n = p.interest(&scenario.catalog).len() + 1;
            if n > MAX_VERSIONS_PER_USER {
                return too_large(format!("user {} has {n} versions > {MAX_VERSIONS_PER_USER}", p.user));
            }
        }
        let space = assignment_space(&scenario);
        if space > MAX_ASSIGNMENTS {
            return too_large(format!("assignment space {space:.3e} > {MAX_ASSIGNMENTS:.0e}"));
        }
        Ok(SmallInstance { scenario })
    }
}

/// `Π_s |options_s| × Π_c 2^|V|` over non-root caches.
pub fn assignment_space(scenario: &Scenario) -> f64 {
    let caches = scenario.topology.caches.len() as f64;
    let versions = scenario.catalog.real_versions().len() as i32;
    let per_user: f64 = scenario
        .users
        .iter()
        .map(|p| 1.0 + caches * p.interest(&scenario.catalog).len() as f64)
        .product();
    per_user * 2f64.powi(versions).powf(caches - 1.0)
}

/// A random tiny instance with a random placement that respects storage.
pub fn random_small_instance(seed: u64) -> (SmallInstance, PlacementState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_0a11);
    loop {
        let two_edges = rng.random_bool(0.5);
        let mut params = ScenarioParams {
            videos: rng.random_range(1..=2),
            bitrates_mbps: vec![2.5, 4.5, 9.0],
            video_duration_s: 1.0,
            fanouts: vec![if two_edges { 2 } else { 1 }],
            tier_storage_videos: vec![0.0],
            users_per_edge: if two_edges { rng.random_range(1..=2) } else { rng.random_range(1..=4) },
            ..ScenarioParams::default()
        };
        // Prices here are tens of utility units per Mbps; consistency prices
        // move only by ±h per round, so placement needs a much larger h0.
        params.schedule.cave_step = StepSchedule::new(0.5, 0.5);
        params.schedule.cop_step = StepSchedule::new(40.0, 0.5);
        let mut scenario = generate_scenario(&params, rng.random()).expect("valid params");
        // Half the links get a capacity that some mix of versions fills
        // exactly, so binding constraints with integral optima are common.
        for link in &mut scenario.topology.links {
            link.capacity_mbps = if rng.random_bool(0.5) {
                (0..rng.random_range(1..=3))
                    .map(|_| params.bitrates_mbps[rng.random_range(0..params.bitrates_mbps.len())])
                    .sum()
            } else {
                (rng.random_range(2.0..24.0f64) * 2.0).round() / 2.0
            };
        }
        let root = scenario.root();
        for cache in &mut scenario.topology.caches {
            if cache.id != root {
                cache.storage_budget_mb = rng.random_range(0..=16) as f64;
            }
        }
        let Ok(instance) = SmallInstance::new(scenario) else {
            continue;
        };
        let placement = random_placement(&instance.scenario, &mut rng);
        return (instance, placement);
    }
}

fn random_placement(scenario: &Scenario, rng: &mut ChaCha8Rng) -> PlacementState {
    let topology = &scenario.topology;
    let catalog = &scenario.catalog;
    let mut placement = PlacementState::root_only(topology, catalog);
    let root = scenario.root();
    for cache in topology.caches.iter().filter(|c| c.id != root) {
        let mut versions: Vec<VersionId> = catalog.real_versions().iter().map(|v| v.id).collect();
        versions.shuffle(rng);
        let mut used = 0.0;
        for v in versions {
            let size = catalog.size(v);
            if rng.random_bool(0.5) && used + size <= cache.storage_budget_mb {
                used += size;
                placement.set(cache.id, v, true);
            }
        }
    }
    placement
}

#[derive(Clone, Debug)]
struct UserOption {
    choice: Choice,
    utility: f64,
    rate: f64,
    links: Vec<LinkId>,
}

/// Every (cache, version) the user may pick under `placement`.
fn user_options(scenario: &Scenario, placement: &PlacementState, user: usize) -> Vec<UserOption> {
    let topology = &scenario.topology;
    let catalog = &scenario.catalog;
    let profile = &scenario.users[user];
    let mut versions = vec![catalog.null_version];
    versions.extend(profile.interest(catalog).iter().map(|v| v.id));
    let mut out = Vec::new();
    for cache in topology.cache_ids() {
        for &v in &versions {
            if !placement.stores(cache, v) {
                continue;
            }
            let rate = catalog.bitrate(v);
            out.push(UserOption {
                choice: Choice { cache, version: v },
                utility: profile.utility(rate),
                rate,
                links: if rate > 0.0 {
                    topology.route_links(profile.user, cache).expect("route").to_vec()
                } else {
                    Vec::new()
                },
            });
        }
    }
    out
}

struct Search<'a> {
    options: &'a [Vec<UserOption>],
    capacity: Vec<f64>,
    load: Vec<f64>,
    /// Best achievable utility of users `i..` ignoring capacity.
    bound: Vec<f64>,
    current: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
}

impl Search<'_> {
    fn run(&mut self, i: usize, acc: f64) {
        if let Some((best, _)) = &self.best {
            if acc + self.bound[i] <= *best {
                return;
            }
        }
        if i == self.options.len() {
            self.best = Some((acc, self.current.clone()));
            return;
        }
        for k in 0..self.options[i].len() {
            let opt = &self.options[i][k];
            if opt.links.iter().any(|l| self.load[l.0] + opt.rate > self.capacity[l.0] + 1e-9) {
                continue;
            }
            for l in &opt.links {
                self.load[l.0] += opt.rate;
            }
            self.current.push(k);
            self.run(i + 1, acc + opt.utility);
            self.current.pop();
            for l in &opt.links {
                self.load[l.0] -= opt.rate;
            }
        }
    }
}

fn enumerate_cave(scenario: &Scenario, placement: &PlacementState) -> (Selection, f64) {
    let options: Vec<Vec<UserOption>> = (0..scenario.users.len())
        .map(|s| user_options(scenario, placement, s))
        .collect();
    let mut bound = vec![0.0; options.len() + 1];
    for i in (0..options.len()).rev() {
        let top = options[i].iter().map(|o| o.utility).fold(f64::NEG_INFINITY, f64::max);
        bound[i] = bound[i + 1] + top;
    }
    let mut search = Search {
        options: &options,
        capacity: scenario.topology.links.iter().map(|l| l.capacity_mbps).collect(),
        load: vec![0.0; scenario.topology.links.len()],
        bound,
        current: Vec::new(),
        best: None,
    };
    search.run(0, 0.0);
    let (utility, picks) = search.best.expect("the null version is always feasible");
    let selection = Selection(picks.iter().enumerate().map(|(s, &k)| options[s][k].choice).collect());
    (selection, utility)
}

#[derive(Clone, Debug)]
pub struct CaveOptimum {
    pub selection: Selection,
    pub utility: f64,
    /// Optimum of the relaxation `z ∈ [0, 1]`.
    pub lp_value: f64,
}

/// Integer and LP optima of selection under a fixed placement.
pub fn brute_force_cave(instance: &SmallInstance, placement: &PlacementState) -> Result<CaveOptimum, OracleError> {
    let scenario = &instance.scenario;
    let (selection, utility) = enumerate_cave(scenario, placement);
    let lp_value = cave_lp(scenario, placement)?;
    Ok(CaveOptimum {
        selection,
        utility,
        lp_value,
    })
}

fn cave_lp(scenario: &Scenario, placement: &PlacementState) -> Result<f64, OracleError> {
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let mut link_terms = vec![Vec::new(); scenario.topology.links.len()];
    for s in 0..scenario.users.len() {
        let mut one_hot = Vec::new();
        for opt in user_options(scenario, placement, s) {
            let z = lp.add_var(opt.utility, (0.0, 1.0));
            one_hot.push((z, 1.0));
            for l in &opt.links {
                link_terms[l.0].push((z, opt.rate));
            }
        }
        lp.add_constraint(&one_hot, ComparisonOp::Eq, 1.0);
    }
    for (terms, link) in link_terms.iter().zip(&scenario.topology.links) {
        if !terms.is_empty() {
            lp.add_constraint(terms, ComparisonOp::Le, link.capacity_mbps);
        }
    }
    lp.solve()
        .map(|sol| sol.objective())
        .map_err(|e| OracleError::Lp(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct CaveCopOptimum {
    pub placement: PlacementState,
    pub selection: Selection,
    pub utility: f64,
    /// Optimum of the joint relaxation `z, p ∈ [0, 1]`.
    pub lp_bound: f64,
}

/// Joint integer optimum over placements and selections, plus the LP bound.
pub fn brute_force_cavecop(instance: &SmallInstance) -> Result<CaveCopOptimum, OracleError> {
    let scenario = &instance.scenario;
    let topology = &scenario.topology;
    let catalog = &scenario.catalog;
    let root = scenario.root();

    // Only versions someone wants can matter; subsets that do not fit are skipped.
    let mut wanted: Vec<VersionId> = scenario
        .users
        .iter()
        .flat_map(|p| p.interest(catalog).iter().map(|v| v.id))
        .collect();
    wanted.sort();
    wanted.dedup();
    let non_root: Vec<CacheId> = topology.cache_ids().filter(|&c| c != root).collect();
    let subsets: Vec<Vec<u64>> = non_root
        .iter()
        .map(|&c| {
            let budget = topology.caches[c.0].storage_budget_mb;
            (0..1u64 << wanted.len())
                .filter(|mask| {
                    let used: f64 = (0..wanted.len())
                        .filter(|i| mask >> i & 1 == 1)
                        .map(|i| catalog.size(wanted[i]))
                        .sum();
                    used <= budget + 1e-9
                })
                .collect()
        })
        .collect();

    let mut best: Option<(f64, PlacementState, Selection)> = None;
    let mut idx = vec![0usize; non_root.len()];
    loop {
        let mut placement = PlacementState::root_only(topology, catalog);
        for (j, &c) in non_root.iter().enumerate() {
            let mask = subsets[j][idx[j]];
            for (i, &v) in wanted.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    placement.set(c, v, true);
                }
            }
        }
        let (selection, utility) = enumerate_cave(scenario, &placement);
        if best.as_ref().is_none_or(|(b, _, _)| utility > *b) {
            best = Some((utility, placement, selection));
        }
        // Mixed-radix increment over the per-cache subset lists.
        let mut j = 0;
        while j < idx.len() {
            idx[j] += 1;
            if idx[j] < subsets[j].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == idx.len() {
            break;
        }
    }
    let (utility, placement, selection) = best.expect("at least the empty placement");
    let lp_bound = cavecop_lp(scenario)?;
    Ok(CaveCopOptimum {
        placement,
        selection,
        utility,
        lp_bound,
    })
}

fn cavecop_lp(scenario: &Scenario) -> Result<f64, OracleError> {
    let topology = &scenario.topology;
    let catalog = &scenario.catalog;
    let root = scenario.root();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let mut p_vars = BTreeMap::new();
    for cache in topology.caches.iter().filter(|c| c.id != root) {
        let mut storage = Vec::new();
        for v in catalog.real_versions() {
            let p = lp.add_var(0.0, (0.0, 1.0));
            p_vars.insert((cache.id, v.id), p);
            storage.push((p, v.file_size_mb));
        }
        if cache.storage_budget_mb.is_finite() {
            lp.add_constraint(&storage, ComparisonOp::Le, cache.storage_budget_mb);
        }
    }
    let mut link_terms = vec![Vec::new(); topology.links.len()];
    for profile in &scenario.users {
        let mut one_hot = Vec::new();
        let stall = lp.add_var(profile.stall_utility, (0.0, 1.0));
        one_hot.push((stall, 1.0));
        for cache in topology.cache_ids() {
            let route = topology.route_links(profile.user, cache).expect("route");
            for v in profile.interest(catalog) {
                let z = lp.add_var(profile.utility(v.bitrate_mbps), (0.0, 1.0));
                one_hot.push((z, 1.0));
                for l in route {
                    link_terms[l.0].push((z, v.bitrate_mbps));
                }
                if let Some(&p) = p_vars.get(&(cache, v.id)) {
                    lp.add_constraint([(z, 1.0), (p, -1.0)], ComparisonOp::Le, 0.0);
                }
            }
        }
        lp.add_constraint(&one_hot, ComparisonOp::Eq, 1.0);
    }
    for (terms, link) in link_terms.iter().zip(&topology.links) {
        if !terms.is_empty() {
            lp.add_constraint(terms, ComparisonOp::Le, link.capacity_mbps);
        }
    }
    lp.solve()
        .map(|sol| sol.objective())
        .map_err(|e| OracleError::Lp(e.to_string()))
}

/// Best 0/1 subset plus at most one fractional completion, by enumeration.
pub fn fractional_knapsack_oracle(items: &[(f64, f64)], budget: f64) -> f64 {
    assert!(items.len() <= 20, "enumeration is exponential in the item count");
    let n = items.len();
    let mut best = 0.0f64;
    for mask in 0..1u32 << n {
        let (mut value, mut weight) = (0.0, 0.0);
        for (i, &(v, w)) in items.iter().enumerate() {
            if mask >> i & 1 == 1 {
                value += v;
                weight += w;
            }
        }
        if weight > budget {
            continue;
        }
        let room = budget - weight;
        let completion = items
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 0)
            .map(|(_, &(v, w))| v * (room / w).min(1.0))
            .fold(0.0, f64::max);
        best = best.max(value + completion);
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub absolute: f64,
    /// Extra allowance on link constraints as a fraction of capacity.
    pub link_relative: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            absolute: 1e-6,
            link_relative: 0.0,
        }
    }
}

impl Tolerance {
    /// Allowance for windowed-average selections.
    pub fn averaged() -> Self {
        Tolerance {
            link_relative: 0.01,
            ..Tolerance::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    /// `Σ z = 1` for a user.
    OneHot(UserId),
    /// `z ≥ 0`.
    NonNegative(UserId, CacheId, VersionId),
    /// `z > 0` only on versions the user wants.
    Interest(UserId, VersionId),
    /// `z ≤ p`.
    Stored(UserId, CacheId, VersionId),
    Capacity(LinkId),
    Storage(CacheId),
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::OneHot(s) => write!(f, "one-hot(user {s})"),
            Constraint::NonNegative(s, c, v) => write!(f, "z>=0(user {s}, cache {c}, version {v})"),
            Constraint::Interest(s, v) => write!(f, "interest(user {s}, version {v})"),
            Constraint::Stored(s, c, v) => write!(f, "stored(user {s}, cache {c}, version {v})"),
            Constraint::Capacity(l) => write!(f, "capacity(link {l})"),
            Constraint::Storage(c) => write!(f, "storage(cache {c})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSlack {
    pub constraint: Constraint,
    /// Negative when violated.
    pub slack: f64,
}

/// Constraints whose slack falls below the tolerance.
pub fn feasibility_check(
    scenario: &Scenario,
    z: &BTreeMap<(UserId, CacheId, VersionId), f64>,
    placement: &PlacementState,
    tolerance: Tolerance,
) -> Vec<ConstraintSlack> {
    let topology = &scenario.topology;
    let catalog = &scenario.catalog;
    let tol = tolerance.absolute;
    let mut out = Vec::new();
    let mut push = |constraint, slack: f64, allowed: f64| {
        if slack < -allowed {
            out.push(ConstraintSlack { constraint, slack });
        }
    };

    let mut mass = vec![0.0; scenario.users.len()];
    let mut load = vec![0.0; topology.links.len()];
    for (&(s, c, v), &x) in z {
        push(Constraint::NonNegative(s, c, v), x, tol);
        if x == 0.0 {
            continue;
        }
        mass[s.0] += x;
        let profile = &scenario.users[s.0];
        if v != catalog.null_version && !profile.interest(catalog).iter().any(|iv| iv.id == v) {
            push(Constraint::Interest(s, v), -x.abs(), tol);
        }
        let stored = if placement.stores(c, v) { 1.0 } else { 0.0 };
        push(Constraint::Stored(s, c, v), stored - x, tol);
        if let Ok(route) = topology.route_links(s, c) {
            for l in route {
                load[l.0] += catalog.bitrate(v) * x;
            }
        }
    }
    for (s, m) in mass.iter().enumerate() {
        push(Constraint::OneHot(UserId(s)), -(m - 1.0).abs(), tol);
    }
    for (link, l) in topology.links.iter().zip(&load) {
        push(
            Constraint::Capacity(link.id),
            link.capacity_mbps - l,
            tol + tolerance.link_relative * link.capacity_mbps,
        );
    }
    for cache in &topology.caches {
        push(
            Constraint::Storage(cache.id),
            cache.storage_budget_mb - placement.storage_used(cache.id, catalog),
            tol,
        );
    }
    out
}
