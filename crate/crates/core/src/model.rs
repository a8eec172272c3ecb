//! Network, catalog and user model for hierarchical edge-cache video delivery.
//!
//! Units are fixed across the crate: rates in Mbps, sizes in megabits, time in
//! seconds. A catalog always carries a null version (id 0, zero rate and size)
//! that models "not watching"; it is stored only at the root cache.

// Negated comparisons below reject NaN as well as out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cave::StepSchedule;

/// Current on-disk scenario format.
pub const SCENARIO_FORMAT: u32 = 1;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Index of a cache node; the root is conventionally cache 0.
    CacheId
);
id_type!(
    /// Index of a directed link.
    LinkId
);
id_type!(UserId);
id_type!(
    /// Global index of a video version in the catalog (0 is the null version).
    VersionId
);
id_type!(VideoId);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no route stored for user {user} and cache {cache}")]
    UnknownRoute { user: UserId, cache: CacheId },
    #[error("invalid scenario parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoVersion {
    pub id: VersionId,
    /// `None` for the null version.
    pub video: Option<VideoId>,
    /// Position within its video, 0 = lowest bitrate.
    pub level: usize,
    pub bitrate_mbps: f64,
    pub file_size_mb: f64,
}

/// Videos × versions, laid out contiguously: the null version at id 0, then
/// video `k` occupies ids `1 + k * versions_per_video ..`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub videos: usize,
    pub versions_per_video: usize,
    pub duration_seconds: f64,
    pub null_version: VersionId,
    pub versions: Vec<VideoVersion>,
}

impl Catalog {
    pub fn new(videos: usize, bitrates_mbps: &[f64], duration_seconds: f64) -> Self {
        let mut versions = Vec::with_capacity(1 + videos * bitrates_mbps.len());
        versions.push(VideoVersion {
            id: VersionId(0),
            video: None,
            level: 0,
            bitrate_mbps: 0.0,
            file_size_mb: 0.0,
        });
        for video in 0..videos {
            for (level, &rate) in bitrates_mbps.iter().enumerate() {
                versions.push(VideoVersion {
                    id: VersionId(versions.len()),
                    video: Some(VideoId(video)),
                    level,
                    bitrate_mbps: rate,
                    file_size_mb: rate * duration_seconds,
                });
            }
        }
        Catalog {
            videos,
            versions_per_video: bitrates_mbps.len(),
            duration_seconds,
            null_version: VersionId(0),
            versions,
        }
    }

    #[inline]
    pub fn version(&self, id: VersionId) -> &VideoVersion {
        &self.versions[id.0]
    }

    #[inline]
    pub fn bitrate(&self, id: VersionId) -> f64 {
        self.versions[id.0].bitrate_mbps
    }

    #[inline]
    pub fn size(&self, id: VersionId) -> f64 {
        self.versions[id.0].file_size_mb
    }

    pub fn versions_of(&self, video: VideoId) -> &[VideoVersion] {
        let start = 1 + video.0 * self.versions_per_video;
        &self.versions[start..start + self.versions_per_video]
    }

    /// Non-null versions, in id order.
    pub fn real_versions(&self) -> &[VideoVersion] {
        &self.versions[1..]
    }

    /// Storage needed to hold every version of `video`.
    pub fn video_size_mb(&self, video: VideoId) -> f64 {
        self.versions_of(video).iter().map(|v| v.file_size_mb).sum()
    }

    pub fn version_at_rate(&self, video: VideoId, bitrate_mbps: f64) -> Option<VersionId> {
        self.versions_of(video)
            .iter()
            .find(|v| (v.bitrate_mbps - bitrate_mbps).abs() <= 1e-9)
            .map(|v| v.id)
    }

    pub fn min_positive_bitrate(&self) -> Option<f64> {
        self.real_versions()
            .iter()
            .map(|v| v.bitrate_mbps)
            .filter(|&x| x > 0.0)
            .min_by(f64::total_cmp)
    }
}

/// Serializes infinite storage as JSON `null`.
mod budget_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(value)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cache {
    pub id: CacheId,
    /// Depth in the tree, 0 for the root.
    pub tier: u32,
    pub parent: Option<CacheId>,
    #[serde(with = "budget_serde")]
    pub storage_budget_mb: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Cache(CacheId),
    User(UserId),
}

/// A directed link; content flows `from` → `to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub from: Endpoint,
    pub to: Endpoint,
    pub capacity_mbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub caches: Vec<Cache>,
    pub users: Vec<UserId>,
    pub links: Vec<Link>,
    /// `routes[user][cache]` lists the links from the cache to the user, in
    /// the direction content travels.
    pub routes: Vec<Vec<Vec<LinkId>>>,
}

impl Topology {
    pub fn root(&self) -> Option<CacheId> {
        self.caches
            .iter()
            .find(|c| c.storage_budget_mb.is_infinite())
            .map(|c| c.id)
    }

    pub fn route_links(&self, user: UserId, cache: CacheId) -> Result<&[LinkId], ModelError> {
        self.routes
            .get(user.0)
            .and_then(|r| r.get(cache.0))
            .map(Vec::as_slice)
            .ok_or(ModelError::UnknownRoute { user, cache })
    }

    /// Unchecked route lookup for validated scenarios.
    #[inline]
    pub(crate) fn route(&self, user: UserId, cache: CacheId) -> &[LinkId] {
        &self.routes[user.0][cache.0]
    }

    pub fn cache_ids(&self) -> impl Iterator<Item = CacheId> + '_ {
        self.caches.iter().map(|c| c.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceClass {
    Smartphone,
    Laptop,
    Tv,
}

impl DeviceClass {
    pub const ALL: [DeviceClass; 3] = [DeviceClass::Smartphone, DeviceClass::Laptop, DeviceClass::Tv];

    pub fn alpha(self) -> f64 {
        match self {
            DeviceClass::Smartphone => 20.0,
            DeviceClass::Laptop => 40.0,
            DeviceClass::Tv => 60.0,
        }
    }

    /// Cutoff level counted down from the top version: TV gets the best
    /// version, laptop one below, smartphone two below (2160p / 1440p / 1080p
    /// with the default five-level table).
    fn levels_below_top(self) -> usize {
        match self {
            DeviceClass::Smartphone => 2,
            DeviceClass::Laptop => 1,
            DeviceClass::Tv => 0,
        }
    }

    pub fn cutoff_mbps(self, bitrates_mbps: &[f64]) -> f64 {
        let top = bitrates_mbps.len() - 1;
        bitrates_mbps[top.saturating_sub(self.levels_below_top())]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user: UserId,
    pub device: DeviceClass,
    pub alpha: f64,
    pub cutoff_mbps: f64,
    pub stall_utility: f64,
    pub interest_video: VideoId,
}

impl UserProfile {
    /// `alpha · ln min(x, cutoff)`, or `stall_utility` at zero rate.
    #[inline]
    pub fn utility(&self, bitrate_mbps: f64) -> f64 {
        if bitrate_mbps <= 0.0 {
            self.stall_utility
        } else {
            self.alpha * bitrate_mbps.min(self.cutoff_mbps).ln()
        }
    }

    /// The real (non-null) versions this user may watch.
    pub fn interest<'a>(&self, catalog: &'a Catalog) -> &'a [VideoVersion] {
        catalog.versions_of(self.interest_video)
    }

    pub fn cutoff_version(&self, catalog: &Catalog) -> Option<VersionId> {
        catalog.version_at_rate(self.interest_video, self.cutoff_mbps)
    }
}

pub fn utility(profile: &UserProfile, bitrate_mbps: f64) -> f64 {
    profile.utility(bitrate_mbps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub duration_ticks: usize,
    pub tick_seconds: f64,
    pub cop_period_ticks: usize,
    pub placement_apply_tick: usize,
    /// Sliding window used for primal averaging.
    pub averaging_window: usize,
    pub cave_step: StepSchedule,
    pub cop_step: StepSchedule,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            duration_ticks: 400,
            tick_seconds: 0.1,
            cop_period_ticks: 2,
            placement_apply_tick: 200,
            averaging_window: 200,
            // Link prices move on the per-tick selection; a larger initial
            // step shortens overload episodes at full scale.
            cave_step: StepSchedule::new(0.1, 0.5),
            cop_step: StepSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub format: u32,
    pub topology: Topology,
    pub catalog: Catalog,
    pub users: Vec<UserProfile>,
    pub schedule: Schedule,
    #[serde(rename = "seed")]
    pub rng_seed: u64,
}

impl Scenario {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn root(&self) -> CacheId {
        self.topology.root().expect("validated scenario has a root")
    }
}

/// Inputs to [`generate_scenario`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub videos: usize,
    /// Per-level bitrates shared by every video.
    pub bitrates_mbps: Vec<f64>,
    pub video_duration_s: f64,
    pub zipf_shape: f64,
    /// Children per node at each tier below the root.
    pub fanouts: Vec<usize>,
    /// Storage per tier below the root, in multiples of one full video.
    pub tier_storage_videos: Vec<f64>,
    pub users_per_edge: usize,
    pub access_capacity_mbps: f64,
    pub backbone_capacity_mbps: f64,
    /// Relative weights for smartphone, laptop, tv.
    pub device_weights: [f64; 3],
    pub stall_utility: f64,
    pub schedule: Schedule,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            videos: 200,
            bitrates_mbps: vec![1.0, 2.5, 4.5, 9.0, 18.0],
            video_duration_s: 3600.0,
            zipf_shape: 1.0,
            fanouts: vec![2, 2, 2],
            tier_storage_videos: vec![4.0, 2.0, 1.0],
            users_per_edge: 20,
            access_capacity_mbps: 25.0,
            backbone_capacity_mbps: 100.0,
            device_weights: [1.0, 1.0, 1.0],
            stall_utility: -100.0,
            schedule: Schedule::default(),
        }
    }
}

impl ScenarioParams {
    fn check(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidParams(m.to_string()));
        if self.videos == 0 {
            return bad("video count must be positive");
        }
        if self.bitrates_mbps.is_empty() {
            return bad("at least one version per video is required");
        }
        if self.bitrates_mbps.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return bad("bitrates must be positive and finite");
        }
        if self.bitrates_mbps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("bitrates must be strictly increasing");
        }
        if self.fanouts.is_empty() || self.fanouts.contains(&0) {
            return bad("fan-outs must be non-empty and positive");
        }
        if self.tier_storage_videos.len() != self.fanouts.len() {
            return bad("one storage multiple per tier below the root is required");
        }
        if self.tier_storage_videos.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return bad("storage multiples must be finite and non-negative");
        }
        if self.users_per_edge == 0 {
            return bad("users per edge must be positive");
        }
        if !(self.video_duration_s > 0.0) {
            return bad("video duration must be positive");
        }
        if !(self.zipf_shape >= 0.0) {
            return bad("zipf shape must be non-negative");
        }
        if !(self.access_capacity_mbps >= 0.0 && self.backbone_capacity_mbps >= 0.0) {
            return bad("capacities must be non-negative");
        }
        if self.device_weights.iter().any(|&w| !(w >= 0.0)) || self.device_weights.iter().sum::<f64>() <= 0.0 {
            return bad("device weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

/// Builds a tiered cache tree with users under the edge caches. Pure in
/// `(params, seed)`.
pub fn generate_scenario(params: &ScenarioParams, seed: u64) -> Result<Scenario, ModelError> {
    params.check()?;
    let catalog = Catalog::new(params.videos, &params.bitrates_mbps, params.video_duration_s);
    let video_size = catalog.video_size_mb(VideoId(0));

    let mut caches = vec![Cache {
        id: CacheId(0),
        tier: 0,
        parent: None,
        storage_budget_mb: f64::INFINITY,
    }];
    let mut level = vec![CacheId(0)];
    for (depth, &fanout) in params.fanouts.iter().enumerate() {
        let mut next = Vec::with_capacity(level.len() * fanout);
        for &parent in &level {
            for _ in 0..fanout {
                let id = CacheId(caches.len());
                caches.push(Cache {
                    id,
                    tier: depth as u32 + 1,
                    parent: Some(parent),
                    storage_budget_mb: params.tier_storage_videos[depth] * video_size,
                });
                next.push(id);
            }
        }
        level = next;
    }
    let edges = level;

    let mut links = Vec::new();
    let mut down = vec![None; caches.len()];
    let mut up = vec![None; caches.len()];
    for cache in &caches[1..] {
        let parent = cache.parent.expect("non-root cache has a parent");
        let id = LinkId(links.len());
        links.push(Link {
            id,
            from: Endpoint::Cache(parent),
            to: Endpoint::Cache(cache.id),
            capacity_mbps: params.backbone_capacity_mbps,
        });
        down[cache.id.0] = Some(id);
        let id = LinkId(links.len());
        links.push(Link {
            id,
            from: Endpoint::Cache(cache.id),
            to: Endpoint::Cache(parent),
            capacity_mbps: params.backbone_capacity_mbps,
        });
        up[cache.id.0] = Some(id);
    }

    let ancestors = |mut c: CacheId| {
        let mut path = vec![c];
        while let Some(p) = caches[c.0].parent {
            path.push(p);
            c = p;
        }
        path
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(params.videos as f64, params.zipf_shape)
        .map_err(|e| ModelError::InvalidParams(format!("zipf: {e}")))?;
    let devices = WeightedIndex::new(params.device_weights)
        .map_err(|e| ModelError::InvalidParams(format!("device weights: {e}")))?;

    let mut users = Vec::new();
    let mut profiles = Vec::new();
    let mut routes = Vec::new();
    for &edge in &edges {
        let edge_path = ancestors(edge);
        for _ in 0..params.users_per_edge {
            let user = UserId(users.len());
            let access = LinkId(links.len());
            links.push(Link {
                id: access,
                from: Endpoint::Cache(edge),
                to: Endpoint::User(user),
                capacity_mbps: params.access_capacity_mbps,
            });
            let mut per_cache = Vec::with_capacity(caches.len());
            for cache in &caches {
                let cache_path = ancestors(cache.id);
                let lca = *cache_path
                    .iter()
                    .find(|c| edge_path.contains(c))
                    .expect("tree caches share the root");
                let mut route = Vec::new();
                for c in cache_path.iter().take_while(|&&c| c != lca) {
                    route.push(up[c.0].expect("non-root"));
                }
                let below: Vec<_> = edge_path.iter().take_while(|&&c| c != lca).collect();
                for c in below.into_iter().rev() {
                    route.push(down[c.0].expect("non-root"));
                }
                route.push(access);
                per_cache.push(route);
            }
            routes.push(per_cache);

            let device = DeviceClass::ALL[devices.sample(&mut rng)];
            let rank = zipf.sample(&mut rng) as usize;
            profiles.push(UserProfile {
                user,
                device,
                alpha: device.alpha(),
                cutoff_mbps: device.cutoff_mbps(&params.bitrates_mbps),
                stall_utility: params.stall_utility,
                interest_video: VideoId(rank.clamp(1, params.videos) - 1),
            });
            users.push(user);
        }
    }

    Ok(Scenario {
        format: SCENARIO_FORMAT,
        topology: Topology {
            caches,
            users,
            links,
            routes,
        },
        catalog,
        users: profiles,
        schedule: params.schedule.clone(),
        rng_seed: seed,
    })
}

pub fn route_links(topology: &Topology, user: UserId, cache: CacheId) -> Result<&[LinkId], ModelError> {
    topology.route_links(user, cache)
}

/// A broken scenario invariant; `code` is a stable short tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

/// Checks every model invariant; an empty result means the scenario is usable.
pub fn validate(scenario: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |code: &'static str, message: String| out.push(Violation { code, message });

    if scenario.format != SCENARIO_FORMAT {
        flag("format", format!("unsupported format {}", scenario.format));
    }

    let cat = &scenario.catalog;
    let expected_len = 1 + cat.videos * cat.versions_per_video;
    if cat.versions.len() != expected_len || cat.versions_per_video == 0 {
        flag(
            "catalog layout",
            format!("expected {expected_len} versions, found {}", cat.versions.len()),
        );
        // Layout-dependent checks below would index out of range.
        return out;
    }
    for (i, v) in cat.versions.iter().enumerate() {
        if v.id.0 != i {
            flag("catalog layout", format!("version at index {i} has id {}", v.id));
        }
        if i > 0 {
            let video = (i - 1) / cat.versions_per_video;
            if v.video != Some(VideoId(video)) {
                flag("catalog layout", format!("version {i} should belong to video {video}"));
            }
            if !(v.bitrate_mbps > 0.0) {
                flag("bitrate", format!("version {i} has non-positive bitrate"));
            }
        }
        let tol = 1e-6 * v.file_size_mb.abs().max(1.0);
        if (v.file_size_mb - v.bitrate_mbps * cat.duration_seconds).abs() > tol {
            flag("file size", format!("version {i}: size != bitrate × duration"));
        }
    }
    if cat.null_version != VersionId(0) || cat.versions[0].video.is_some() {
        flag("null version", "null version must be id 0 with no video".into());
    }
    let null = &cat.versions[0];
    if null.bitrate_mbps != 0.0 || null.file_size_mb != 0.0 {
        flag("null version", "null version must have zero bitrate and size".into());
    }
    for video in 0..cat.videos {
        let vs = cat.versions_of(VideoId(video));
        if vs.windows(2).any(|w| w[0].bitrate_mbps >= w[1].bitrate_mbps) {
            flag("bitrate order", format!("video {video} bitrates not strictly increasing"));
        }
    }

    let topo = &scenario.topology;
    let roots = topo
        .caches
        .iter()
        .filter(|c| c.storage_budget_mb.is_infinite())
        .count();
    match roots {
        0 => flag("missing root", "no cache has infinite storage".into()),
        1 => {}
        n => flag("multiple roots", format!("{n} caches have infinite storage")),
    }
    for (i, c) in topo.caches.iter().enumerate() {
        if c.id.0 != i {
            flag("cache ids", format!("cache at index {i} has id {}", c.id));
        }
        if !(c.storage_budget_mb >= 0.0) {
            flag("storage", format!("cache {i} has negative storage"));
        }
    }
    for (i, l) in topo.links.iter().enumerate() {
        if l.id.0 != i {
            flag("link ids", format!("link at index {i} has id {}", l.id));
        }
        if !(l.capacity_mbps >= 0.0) {
            flag("capacity", format!("link {i} has negative capacity"));
        }
    }
    if topo.users.len() != scenario.users.len() {
        flag("users", "topology and profile user counts differ".into());
    }
    if topo.routes.len() != topo.users.len() {
        flag("route", format!("{} route rows for {} users", topo.routes.len(), topo.users.len()));
    }
    for (s, per_cache) in topo.routes.iter().enumerate() {
        if per_cache.len() != topo.caches.len() {
            flag("route", format!("user {s} has {} routes for {} caches", per_cache.len(), topo.caches.len()));
        }
        for (c, route) in per_cache.iter().enumerate() {
            if let Some(bad) = route.iter().find(|l| l.0 >= topo.links.len()) {
                flag("route", format!("route ({s}, {c}) references unknown link {bad}"));
            }
        }
    }

    let min_rate = cat.min_positive_bitrate();
    for (i, p) in scenario.users.iter().enumerate() {
        if p.user.0 != i || topo.users.get(i) != Some(&p.user) {
            flag("users", format!("profile {i} has user id {}", p.user));
        }
        if p.interest_video.0 >= cat.videos {
            flag("interest", format!("user {i} wants unknown video {}", p.interest_video));
            continue;
        }
        if !(p.alpha > 0.0) {
            flag("alpha", format!("user {i} has non-positive alpha"));
        }
        if p.cutoff_version(cat).is_none() {
            flag("cutoff", format!("user {i} cutoff {} matches no version", p.cutoff_mbps));
        }
        if let Some(x) = min_rate {
            if !(p.stall_utility < p.alpha * x.ln()) {
                flag("stall utility", format!("user {i} stall utility is not the worst outcome"));
            }
        }
    }

    let sch = &scenario.schedule;
    if sch.placement_apply_tick > sch.duration_ticks {
        flag("schedule", "placement_apply_tick exceeds duration_ticks".into());
    }
    if sch.cop_period_ticks == 0 {
        flag("schedule", "cop_period_ticks must be at least 1".into());
    }
    if !(sch.tick_seconds > 0.0) {
        flag("schedule", "tick_seconds must be positive".into());
    }
    if sch.averaging_window == 0 {
        flag("schedule", "averaging_window must be at least 1".into());
    }
    for (name, step) in [("cave_step", &sch.cave_step), ("cop_step", &sch.cop_step)] {
        if let Err(e) = step.check() {
            flag("step schedule", format!("{name}: {e}"));
        }
    }
    out
}
