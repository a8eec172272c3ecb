//! Two-timescale policy simulator.
//!
//! Each tick every user selects a (cache, version), links share capacity
//! proportionally among the flows crossing them, and playback consumes what
//! arrived. Placement rounds run on pseudo-state every few ticks and the
//! resulting placement is applied once.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cave::{cave_link_update, cave_select_all, CaveDualState, Choice, Selection};
use crate::cop::{cop_user_select, cop_user_select_version, CopSolver, PlacementState};
use crate::model::{validate, Catalog, Scenario, Topology, UserProfile, VideoId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown policy `{0}` (expected cavecop, cavecav or greedycop)")]
    UnknownPolicy(String),
    #[error("scenario is invalid: {0}")]
    InvalidScenario(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    CaVeCoP,
    CaVeCAV,
    GreedyCoP,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::CaVeCoP, PolicyKind::CaVeCAV, PolicyKind::GreedyCoP];

    pub fn slug(self) -> &'static str {
        match self {
            PolicyKind::CaVeCoP => "cavecop",
            PolicyKind::CaVeCAV => "cavecav",
            PolicyKind::GreedyCoP => "greedycop",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::CaVeCoP => "CaVe-CoP",
            PolicyKind::CaVeCAV => "CaVe-CAV",
            PolicyKind::GreedyCoP => "Greedy-CoP",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.slug() == key.to_ascii_lowercase())
            .ok_or_else(|| SimError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    /// Received but not yet played content.
    pub buffer_mb: f64,
    pub current_selection: Choice,
    pub cumulative_stall_s: f64,
    pub cumulative_utility: f64,
    pub delivered_mb: f64,
    pub consumed_mb: f64,
    pub last_stall_fraction: f64,
    pub last_utility: f64,
}

impl FlowState {
    pub fn new(selection: Choice) -> Self {
        FlowState {
            buffer_mb: 0.0,
            current_selection: selection,
            cumulative_stall_s: 0.0,
            cumulative_utility: 0.0,
            delivered_mb: 0.0,
            consumed_mb: 0.0,
            last_stall_fraction: 0.0,
            last_utility: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub tick: usize,
    pub time_s: f64,
    pub policy: PolicyKind,
    pub total_utility: f64,
    pub pct_stall: f64,
}

/// `load_l = Σ X_v` over users whose route to their chosen cache uses `l`.
pub fn link_loads(selection: &Selection, topology: &Topology, catalog: &Catalog) -> Vec<f64> {
    let mut loads = vec![0.0; topology.links.len()];
    for (s, choice) in selection.iter() {
        let rate = catalog.bitrate(choice.version);
        if rate == 0.0 {
            continue;
        }
        for l in topology.route(s, choice.cache) {
            loads[l.0] += rate;
        }
    }
    loads
}

/// Proportional rationing: each flow gets its rate times the smallest
/// `min(1, R / load)` along its route.
pub fn delivered_rates(loads: &[f64], selection: &Selection, topology: &Topology, catalog: &Catalog) -> Vec<f64> {
    let scale: Vec<f64> = loads
        .iter()
        .zip(&topology.links)
        .map(|(&load, link)| {
            if load > link.capacity_mbps {
                link.capacity_mbps / load
            } else {
                1.0
            }
        })
        .collect();
    selection
        .iter()
        .map(|(s, c)| {
            let bottleneck = topology
                .route(s, c.cache)
                .iter()
                .map(|l| scale[l.0])
                .fold(1.0, f64::min);
            catalog.bitrate(c.version) * bottleneck
        })
        .collect()
}

/// Advances one user's playback by `tick_seconds`. A tick's utility blends
/// `U(x)` and `U(0)` by the fraction of the tick spent stalled; watching the
/// null version counts as stalled throughout.
pub fn step_playback(
    flow: &FlowState,
    bitrate_mbps: f64,
    goodput_mbps: f64,
    tick_seconds: f64,
    profile: &UserProfile,
) -> FlowState {
    let delivered = goodput_mbps.max(0.0) * tick_seconds;
    let available = flow.buffer_mb + delivered;
    let demand = bitrate_mbps * tick_seconds;
    let consumed = demand.min(available);
    let stall = if demand > 0.0 { 1.0 - consumed / demand } else { 1.0 };
    let utility = (1.0 - stall) * profile.utility(bitrate_mbps) + stall * profile.stall_utility;
    FlowState {
        buffer_mb: (available - consumed).max(0.0),
        current_selection: flow.current_selection,
        cumulative_stall_s: flow.cumulative_stall_s + stall * tick_seconds,
        cumulative_utility: flow.cumulative_utility + utility,
        delivered_mb: flow.delivered_mb + delivered,
        consumed_mb: flow.consumed_mb + consumed,
        last_stall_fraction: stall,
        last_utility: utility,
    }
}

/// The storage-constrained "all versions of the most popular videos" layout:
/// every non-root cache takes whole videos in popularity order while they fit.
pub fn cav_placement(scenario: &Scenario) -> PlacementState {
    let topology = &scenario.topology;
    let catalog = &scenario.catalog;
    let mut placement = PlacementState::root_only(topology, catalog);
    let root = topology.root();
    for cache in topology.caches.iter().filter(|c| Some(c.id) != root) {
        let mut used = 0.0;
        for video in (0..catalog.videos).map(VideoId) {
            let size = catalog.video_size_mb(video);
            if used + size > cache.storage_budget_mb {
                break;
            }
            used += size;
            for v in catalog.versions_of(video) {
                placement.set(cache.id, v.id, true);
            }
        }
    }
    placement
}

/// Cutoff-rate version from the fewest-hop cache that stores it.
fn greedy_select(scenario: &Scenario, placement: &PlacementState) -> Selection {
    let topology = &scenario.topology;
    let catalog = &scenario.catalog;
    let root = scenario.root();
    Selection(
        scenario
            .users
            .iter()
            .map(|p| {
                let version = p.cutoff_version(catalog).expect("validated cutoff");
                let cache = topology
                    .cache_ids()
                    .filter(|&c| placement.stores(c, version))
                    .min_by_key(|&c| (topology.route(p.user, c).len(), c))
                    .unwrap_or(root);
                Choice { cache, version }
            })
            .collect(),
    )
}

#[derive(Clone, Debug)]
pub struct SimRun {
    pub policy: PolicyKind,
    pub rows: Vec<MetricsRow>,
    /// Link prices in effect at each tick.
    pub lambda: Vec<Vec<f64>>,
    pub final_placement: PlacementState,
    pub flows: Vec<FlowState>,
}

/// Simulates one policy for the scenario's full duration.
pub fn run_policy(scenario: &Scenario, policy: PolicyKind) -> Result<SimRun, SimError> {
    let violations = validate(scenario);
    if let Some(v) = violations.first() {
        return Err(SimError::InvalidScenario(v.to_string()));
    }
    let topology = &scenario.topology;
    let catalog = &scenario.catalog;
    let schedule = &scenario.schedule;
    let dt = schedule.tick_seconds;

    let mut placement = match policy {
        PolicyKind::CaVeCAV => cav_placement(scenario),
        _ => PlacementState::root_only(topology, catalog),
    };
    let runs_cop = policy != PolicyKind::CaVeCAV;
    let mut cop = runs_cop.then(|| CopSolver::new(scenario));
    let mut dual = CaveDualState::for_scenario(scenario);
    let root_null = Choice {
        cache: scenario.root(),
        version: catalog.null_version,
    };
    let mut flows = vec![FlowState::new(root_null); scenario.users.len()];
    let mut rows = Vec::with_capacity(schedule.duration_ticks);
    let mut lambda = Vec::with_capacity(schedule.duration_ticks);

    for tick in 0..schedule.duration_ticks {
        if tick == schedule.placement_apply_tick {
            if let Some(cop) = &cop {
                placement = cop.placement(scenario);
            }
        }

        let selection = match policy {
            PolicyKind::GreedyCoP => greedy_select(scenario, &placement),
            _ => cave_select_all(scenario, &placement, &dual).0,
        };
        let loads = link_loads(&selection, topology, catalog);
        let goodput = delivered_rates(&loads, &selection, topology, catalog);
        let mut total_utility = 0.0;
        let mut stall_share = 0.0;
        let elapsed = (tick + 1) as f64 * dt;
        for ((flow, profile), (choice, rate)) in flows
            .iter_mut()
            .zip(&scenario.users)
            .zip(selection.0.iter().zip(&goodput))
        {
            flow.current_selection = *choice;
            *flow = step_playback(flow, catalog.bitrate(choice.version), *rate, dt, profile);
            total_utility += flow.last_utility;
            stall_share += flow.cumulative_stall_s / elapsed;
        }
        rows.push(MetricsRow {
            tick,
            time_s: tick as f64 * dt,
            policy,
            total_utility,
            pct_stall: 100.0 * stall_share / scenario.users.len().max(1) as f64,
        });
        lambda.push(dual.lambda.clone());

        if policy != PolicyKind::GreedyCoP {
            cave_link_update(&mut dual, &selection, topology, catalog);
        }
        if let Some(cop) = cop.as_mut() {
            if tick < schedule.placement_apply_tick && tick % schedule.cop_period_ticks == 0 {
                match policy {
                    PolicyKind::GreedyCoP => {
                        cop.round(scenario, |p, d| {
                            let v = p.cutoff_version(catalog).expect("validated cutoff");
                            cop_user_select_version(p, v, d, topology, catalog)
                        });
                    }
                    _ => {
                        cop.round(scenario, |p, d| cop_user_select(p, d, topology, catalog));
                    }
                }
            }
        }
    }

    Ok(SimRun {
        policy,
        rows,
        lambda,
        final_placement: placement,
        flows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: PolicyKind,
    pub mean_total_utility: f64,
    pub mean_pct_stall: f64,
}

/// Mean metrics over the last `ticks` rows.
pub fn summarize_tail(run: &SimRun, ticks: usize) -> PolicySummary {
    let tail = &run.rows[run.rows.len().saturating_sub(ticks)..];
    let n = tail.len().max(1) as f64;
    PolicySummary {
        policy: run.policy,
        mean_total_utility: tail.iter().map(|r| r.total_utility).sum::<f64>() / n,
        mean_pct_stall: tail.iter().map(|r| r.pct_stall).sum::<f64>() / n,
    }
}

/// Runs every policy on the same scenario; summaries cover the final quarter.
pub fn compare_policies(scenario: &Scenario) -> Result<Vec<(SimRun, PolicySummary)>, SimError> {
    let quarter = (scenario.schedule.duration_ticks / 4).max(1);
    PolicyKind::ALL
        .into_iter()
        .map(|p| {
            let run = run_policy(scenario, p)?;
            let summary = summarize_tail(&run, quarter);
            Ok((run, summary))
        })
        .collect()
}

/// `tick,time_s,policy,total_utility,pct_stall`, plus `lambda_<link>`
/// columns when `dump_lambda` is set.
pub fn write_metrics_csv<W: Write>(out: W, run: &SimRun, dump_lambda: bool) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["tick", "time_s", "policy", "total_utility", "pct_stall"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let links = run.lambda.first().map_or(0, Vec::len);
    if dump_lambda {
        header.extend((0..links).map(|l| format!("lambda_{l}")));
    }
    w.write_record(&header)?;
    for (row, prices) in run.rows.iter().zip(&run.lambda) {
        let mut rec = vec![
            row.tick.to_string(),
            row.time_s.to_string(),
            row.policy.slug().to_string(),
            row.total_utility.to_string(),
            row.pct_stall.to_string(),
        ];
        if dump_lambda {
            rec.extend(prices.iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::model::{generate_scenario, CacheId, DeviceClass, ScenarioParams, UserId, VersionId};

    fn tiny() -> Scenario {
        let mut params = ScenarioParams::default();
        params.videos = 10;
        params.fanouts = vec![2];
        params.tier_storage_videos = vec![1.0];
        params.users_per_edge = 5;
        params.schedule.duration_ticks = 60;
        params.schedule.placement_apply_tick = 30;
        generate_scenario(&params, 4).unwrap()
    }

    fn phone() -> UserProfile {
        UserProfile {
            user: UserId(0),
            device: DeviceClass::Smartphone,
            alpha: 20.0,
            cutoff_mbps: 4.5,
            stall_utility: -100.0,
            interest_video: VideoId(0),
        }
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("cavecop".parse::<PolicyKind>().unwrap(), PolicyKind::CaVeCoP);
        assert_eq!("CaVe-CAV".parse::<PolicyKind>().unwrap(), PolicyKind::CaVeCAV);
        assert_eq!("greedy-cop".parse::<PolicyKind>().unwrap(), PolicyKind::GreedyCoP);
        assert!("nosuch".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn loads_examples() {
        let s = tiny();
        let null = Selection(vec![
            Choice { cache: CacheId(0), version: VersionId(0) };
            s.users.len()
        ]);
        assert!(link_loads(&null, &s.topology, &s.catalog).iter().all(|&l| l == 0.0));

        // Users under edge 1 streaming 360p from their own edge.
        let users: Vec<_> = (0..5).map(UserId).collect();
        let sel = Selection(
            (0..s.users.len())
                .map(|i| {
                    if i < 5 {
                        Choice { cache: CacheId(1), version: VersionId(1) }
                    } else {
                        Choice { cache: CacheId(0), version: VersionId(0) }
                    }
                })
                .collect(),
        );
        let loads = link_loads(&sel, &s.topology, &s.catalog);
        for &u in &users {
            let access = s.topology.route(u, CacheId(1));
            assert_eq!(access.len(), 1);
            assert_eq!(loads[access[0].0], 1.0);
        }
        assert_eq!(loads.iter().sum::<f64>(), 5.0);

        // Five 4K streams from the root through one backbone link.
        let sel = Selection(
            (0..s.users.len())
                .map(|i| {
                    if i < 5 {
                        Choice { cache: CacheId(0), version: VersionId(5) }
                    } else {
                        Choice { cache: CacheId(0), version: VersionId(0) }
                    }
                })
                .collect(),
        );
        let loads = link_loads(&sel, &s.topology, &s.catalog);
        let backbone = s.topology.route(UserId(0), CacheId(0))[0];
        assert_eq!(loads[backbone.0], 90.0);
    }

    #[test]
    fn rationing_examples() {
        let s = tiny();
        let sel = Selection(
            (0..s.users.len())
                .map(|i| {
                    if i < 5 {
                        Choice { cache: CacheId(0), version: VersionId(5) }
                    } else {
                        Choice { cache: CacheId(0), version: VersionId(0) }
                    }
                })
                .collect(),
        );
        let loads = link_loads(&sel, &s.topology, &s.catalog);
        let rates = delivered_rates(&loads, &sel, &s.topology, &s.catalog);
        assert!(rates[..5].iter().all(|&r| r == 18.0));

        let mut topo = s.topology.clone();
        let backbone = topo.route(UserId(0), CacheId(0))[0];
        topo.links[backbone.0].capacity_mbps = 45.0;
        let rates = delivered_rates(&loads, &sel, &topo, &s.catalog);
        assert!(rates[..5].iter().all(|&r| (r - 9.0).abs() < 1e-12));

        // Two links on the route at factors 0.8 and 0.5: the worse wins.
        let access = topo.route(UserId(0), CacheId(0))[1];
        topo.links[backbone.0].capacity_mbps = 72.0;
        let mut loads2 = loads.clone();
        loads2[access.0] = 36.0;
        topo.links[access.0].capacity_mbps = 18.0;
        let rates = delivered_rates(&loads2, &sel, &topo, &s.catalog);
        assert!((rates[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn playback_examples() {
        let p = phone();
        let start = FlowState::new(Choice { cache: CacheId(0), version: VersionId(3) });
        let full = step_playback(&start, 4.5, 4.5, 0.1, &p);
        assert_eq!(full.last_stall_fraction, 0.0);
        assert!((full.last_utility - p.utility(4.5)).abs() < 1e-12);

        let none = step_playback(&start, 4.5, 0.0, 0.1, &p);
        assert_eq!(none.last_stall_fraction, 1.0);
        assert_eq!(none.last_utility, -100.0);

        let half = step_playback(&start, 4.5, 2.25, 0.1, &p);
        assert!((half.last_stall_fraction - 0.5).abs() < 1e-12);
        assert!((half.last_utility - 0.5 * (p.utility(4.5) - 100.0)).abs() < 1e-12);
        assert!((half.cumulative_stall_s - 0.05).abs() < 1e-12);

        let null = step_playback(&start, 0.0, 0.0, 0.1, &p);
        assert_eq!(null.last_stall_fraction, 1.0);
    }

    #[test]
    fn buffered_content_plays_before_stalling() {
        let p = phone();
        let mut f = FlowState::new(Choice { cache: CacheId(0), version: VersionId(3) });
        f.buffer_mb = 0.45;
        let next = step_playback(&f, 4.5, 0.0, 0.1, &p);
        assert_eq!(next.last_stall_fraction, 0.0);
        assert_eq!(next.buffer_mb, 0.0);
    }

    #[test]
    fn cav_layout_stores_most_popular_videos() {
        let s = generate_scenario(&ScenarioParams::default(), 1).unwrap();
        let p = cav_placement(&s);
        let edge = s.topology.caches.iter().find(|c| c.tier == 3).unwrap().id;
        let stored: Vec<_> = p.stored_versions(edge).collect();
        let expected: Vec<_> = s.catalog.versions_of(VideoId(0)).iter().map(|v| v.id).collect();
        assert_eq!(stored, expected);
        let tertiary = s.topology.caches.iter().find(|c| c.tier == 1).unwrap().id;
        assert_eq!(p.stored_versions(tertiary).count(), 20);
    }

    #[test]
    fn greedy_requests_cutoff_version() {
        let s = tiny();
        let run = run_policy(&s, PolicyKind::GreedyCoP).unwrap();
        for (flow, profile) in run.flows.iter().zip(&s.users) {
            assert_eq!(Some(flow.current_selection.version), profile.cutoff_version(&s.catalog));
        }
    }

    #[test]
    fn metrics_are_deterministic_and_well_formed() {
        let s = tiny();
        for policy in PolicyKind::ALL {
            let a = run_policy(&s, policy).unwrap();
            let b = run_policy(&s, policy).unwrap();
            assert_eq!(a.rows, b.rows);
            assert_eq!(a.rows.len(), 60);
            assert!(a.rows.iter().all(|r| (0.0..=100.0).contains(&r.pct_stall)));
            for f in &a.flows {
                assert!(f.buffer_mb >= 0.0);
                assert!(f.consumed_mb <= f.delivered_mb + 1e-6);
            }
            let mut x = Vec::new();
            let mut y = Vec::new();
            write_metrics_csv(&mut x, &a, true).unwrap();
            write_metrics_csv(&mut y, &b, true).unwrap();
            assert_eq!(x, y);
            let text = String::from_utf8(x).unwrap();
            assert!(text.starts_with("tick,time_s,policy,total_utility,pct_stall,lambda_0"));
        }
    }

    #[test]
    fn overprovisioned_network_never_stalls() {
        let mut params = ScenarioParams::default();
        params.videos = 10;
        params.fanouts = vec![2];
        params.tier_storage_videos = vec![1.0];
        params.users_per_edge = 4;
        params.backbone_capacity_mbps = 10_000.0;
        params.schedule.duration_ticks = 40;
        params.schedule.placement_apply_tick = 20;
        let s = generate_scenario(&params, 8).unwrap();
        let (runs, summaries): (Vec<_>, Vec<_>) = compare_policies(&s).unwrap().into_iter().unzip();
        assert_eq!(runs.len(), 3);
        for sum in summaries {
            assert_eq!(sum.mean_pct_stall, 0.0, "{sum:?}");
        }
    }
}
