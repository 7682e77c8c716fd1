//! Kinematic agents moving along lane routes with car-following control.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::maps::{map_polylines, map_routes, MapKind, LANE_WIDTH};
use super::{ForgeError, LabelConfig, Result, Scenario, DT, T_FUT, T_HST};
use crate::scene::{
    build_lane_graph, wrap_angle, AgentClass, AgentTrack, HistoryStep, LanePolyline, Point,
    RigidTransform,
};

const V_MAX: f64 = 20.0;
const ACCEL_MAX: f64 = 2.0;
const BRAKE_MAX: f64 = 3.0;
/// Lateral acceleration budget used for curve speed limits.
const A_LAT: f64 = 2.0;
const IDM_B: f64 = 2.0;
const IDM_T: f64 = 1.2;
const IDM_S0: f64 = 2.0;
const VEHICLE_LEN: f64 = 5.0;
const LANE_CHANGE_SECS: f64 = 3.0;

/// A lane sequence flattened into one centerline.
#[derive(Debug, Clone)]
pub struct Route {
    pub lanes: Vec<u32>,
    points: Vec<Point>,
    cum: Vec<f64>,
    /// Speed cap sampled every meter, already including braking distance.
    v_lim: Vec<f64>,
}

impl Route {
    pub fn new(lanes: Vec<u32>, polys: &[LanePolyline]) -> Self {
        let mut points: Vec<Point> = Vec::new();
        for id in &lanes {
            let p = polys.iter().find(|p| p.id == *id).expect("route lane exists");
            for &q in &p.points {
                if points.last().is_none_or(|l| l.dist(q) > 1e-9) {
                    points.push(q);
                }
            }
        }
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            cum.push(cum.last().unwrap() + w[0].dist(w[1]));
        }
        let mut r = Route {
            lanes,
            points,
            cum,
            v_lim: Vec::new(),
        };
        r.v_lim = r.speed_envelope();
        r
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Position at arc length `s`; extrapolates straight past either end.
    pub fn point_at(&self, s: f64) -> Point {
        let i = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        a.lerp(b, (s - self.cum[i]) / len)
    }

    pub fn tangent_at(&self, s: f64) -> Point {
        let i = self.segment(s);
        let d = self.points[i + 1].sub(self.points[i]);
        d.scale(1.0 / d.norm())
    }

    fn vertex_tangent(&self, i: usize) -> Point {
        let seg = |k: usize| {
            let d = self.points[k + 1].sub(self.points[k]);
            d.scale(1.0 / d.norm())
        };
        let n = self.points.len() - 1;
        let t = if i == 0 {
            seg(0)
        } else if i >= n {
            seg(n - 1)
        } else {
            seg(i - 1).add(seg(i))
        };
        t.scale(1.0 / t.norm())
    }

    /// Left normal blended between vertices so offset paths stay continuous.
    pub fn normal_at(&self, s: f64) -> Point {
        let i = self.segment(s);
        let f = ((s - self.cum[i]) / (self.cum[i + 1] - self.cum[i])).clamp(0.0, 1.0);
        let t = self.vertex_tangent(i).lerp(self.vertex_tangent(i + 1), f);
        let t = t.scale(1.0 / t.norm());
        Point::new(-t.y, t.x)
    }

    fn heading_at(&self, s: f64) -> f64 {
        let t = self.tangent_at(s);
        t.y.atan2(t.x)
    }

    fn speed_envelope(&self) -> Vec<f64> {
        let n = self.length().ceil() as usize + 1;
        let mut v: Vec<f64> = (0..n)
            .map(|i| {
                let s = i as f64;
                let k = wrap_angle(self.heading_at(s + 1.0) - self.heading_at(s - 1.0)).abs() / 2.0;
                if k < 1e-6 {
                    V_MAX
                } else {
                    (A_LAT / k).sqrt().min(V_MAX)
                }
            })
            .collect();
        for i in (0..n - 1).rev() {
            v[i] = v[i].min((v[i + 1] * v[i + 1] + 2.0 * IDM_B).sqrt());
        }
        v
    }

    fn limit_at(&self, s: f64) -> f64 {
        if s < 0.0 {
            return self.v_lim[0];
        }
        self.v_lim.get(s as usize).copied().unwrap_or(V_MAX)
    }
}

/// Explicit description of one agent for [`generate_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPlan {
    pub class: AgentClass,
    /// Lane ids the agent drives along.
    pub route: Vec<u32>,
    /// Arc length along the route at the first history step.
    pub s_start: f64,
    pub v_start: f64,
    /// Desired speed; zero parks the agent.
    pub v_desired: f64,
    /// Lane change start time in seconds relative to t = 0, and side
    /// (+1 left, -1 right).
    pub lane_change: Option<(f64, f64)>,
    /// History index of the first perceived step.
    pub first_perceived: usize,
}

impl AgentPlan {
    pub fn cruising(route: Vec<u32>, s_start: f64, speed: f64) -> Self {
        AgentPlan {
            class: AgentClass::Car,
            route,
            s_start,
            v_start: speed,
            v_desired: speed,
            lane_change: None,
            first_perceived: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_agents: usize,
    pub p_follower: f64,
    pub p_lane_change: f64,
    pub p_parked: f64,
    /// Probability an agent is perceived for fewer than five steps.
    pub p_brief: f64,
    /// Probability of a partially missing early history.
    pub p_late: f64,
    pub random_pose: bool,
    pub labels: LabelConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_agents: 4,
            p_follower: 0.5,
            p_lane_change: 0.6,
            p_parked: 0.12,
            p_brief: 0.12,
            p_late: 0.1,
            random_pose: true,
            labels: LabelConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn with_agents(n_agents: usize) -> Self {
        GenConfig {
            n_agents,
            ..Default::default()
        }
    }
}

/// Generates a random scenario with the default settings.
pub fn generate_scenario(kind: MapKind, n_agents: usize, seed: u64) -> Result<Scenario> {
    generate(kind, &GenConfig::with_agents(n_agents), seed)
}

pub fn generate(kind: MapKind, cfg: &GenConfig, seed: u64) -> Result<Scenario> {
    if cfg.n_agents == 0 {
        return Err(ForgeError::Invalid("a scenario needs at least the ego".into()));
    }
    if cfg.n_agents > kind.capacity() {
        return Err(ForgeError::MapTooSmall {
            map: kind.name().into(),
            requested: cfg.n_agents,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let polys = map_polylines(kind);
    let plans = plan_agents(kind, &polys, cfg, &mut rng)?;
    let pose = if cfg.random_pose {
        RigidTransform::new(
            rng.random_range(-PI..PI),
            Point::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)),
        )
    } else {
        RigidTransform::identity()
    };
    simulate(kind, &polys, &plans, pose, seed, &cfg.labels)
}

/// Simulates explicit agent plans on a built-in map in its canonical pose.
pub fn generate_with(kind: MapKind, plans: &[AgentPlan], seed: u64) -> Result<Scenario> {
    if plans.is_empty() {
        return Err(ForgeError::Invalid("a scenario needs at least the ego".into()));
    }
    let polys = map_polylines(kind);
    for p in plans {
        check_plan(p, &polys)?;
    }
    simulate(kind, &polys, plans, RigidTransform::identity(), seed, &LabelConfig::default())
}

fn check_plan(p: &AgentPlan, polys: &[LanePolyline]) -> Result<()> {
    if p.route.is_empty() {
        return Err(ForgeError::Invalid("empty route".into()));
    }
    for w in p.route.windows(2) {
        let ok = polys
            .iter()
            .find(|l| l.id == w[0])
            .is_some_and(|l| l.successors.contains(&w[1]));
        if !ok {
            return Err(ForgeError::Invalid(format!("lane {} does not lead to {}", w[0], w[1])));
        }
    }
    if let Some(id) = p.route.iter().find(|id| !polys.iter().any(|l| l.id == **id)) {
        return Err(ForgeError::Invalid(format!("unknown lane {id}")));
    }
    if !(0.0..=V_MAX).contains(&p.v_start) || !(0.0..=V_MAX).contains(&p.v_desired) {
        return Err(ForgeError::Invalid("speeds must lie in [0, 20] m/s".into()));
    }
    if p.first_perceived >= T_HST {
        return Err(ForgeError::Invalid("agent must be perceived at t = 0".into()));
    }
    Ok(())
}

fn sample_class(rng: &mut ChaCha8Rng) -> AgentClass {
    let u: f64 = rng.random();
    if u < 0.8 {
        AgentClass::Car
    } else if u < 0.95 {
        AgentClass::Bicycle
    } else {
        AgentClass::Pedestrian
    }
}

fn desired_speed(class: AgentClass, rng: &mut ChaCha8Rng) -> f64 {
    match class {
        AgentClass::Car => rng.random_range(6.0..15.0),
        AgentClass::Bicycle => rng.random_range(3.0..6.0),
        AgentClass::Pedestrian => rng.random_range(0.8..1.6),
    }
}

fn plan_agents(
    kind: MapKind,
    polys: &[LanePolyline],
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AgentPlan>> {
    let routes: Vec<Route> = map_routes(polys)
        .into_iter()
        .map(|r| Route::new(r, polys))
        .collect();
    let junction = !kind.allows_lane_change();
    // Lane changes are the point of the lane_change map and rarer elsewhere.
    let p_change = if kind == MapKind::LaneChange {
        cfg.p_lane_change
    } else {
        cfg.p_lane_change / 4.0
    };
    let mut plans: Vec<AgentPlan> = Vec::new();
    let mut starts: Vec<Point> = Vec::new();
    for i in 0..cfg.n_agents {
        let mut placed = false;
        for _ in 0..200 {
            let class = if i == 0 { AgentClass::Car } else { sample_class(rng) };
            let follow = i > 0 && rng.random_bool(cfg.p_follower);
            let (ri, s_start) = if follow {
                let lead = &plans[rng.random_range(0..plans.len())];
                let ri = routes.iter().position(|r| r.lanes == lead.route).unwrap();
                (ri, lead.s_start - rng.random_range(10.0..25.0))
            } else {
                let ri = rng.random_range(0..routes.len());
                let hi = if junction { 30.0 } else { routes[ri].length() * 0.45 };
                (ri, rng.random_range(0.0..hi))
            };
            if s_start < 0.0 {
                continue;
            }
            let route = &routes[ri];
            let p0 = route.point_at(s_start);
            let crowded = starts.iter().zip(&plans).any(|(q, other)| {
                let gap = if other.route[0] == route.lanes[0] { 8.0 } else { 3.0 };
                q.dist(p0) < gap
            });
            if crowded {
                continue;
            }
            let parked = i > 0 && !follow && rng.random_bool(cfg.p_parked);
            let mut v_des = if parked { 0.0 } else { desired_speed(class, rng) };
            if follow {
                v_des = (v_des * 1.3).min(V_MAX);
            }
            let v_start = if parked {
                0.0
            } else {
                (v_des * rng.random_range(0.6..1.2)).min(route.limit_at(s_start)).min(V_MAX)
            };
            let lane_change = if !junction && class == AgentClass::Car && !parked && rng.random_bool(p_change) {
                let side = if route.lanes[0] == 1 { 1.0 } else { -1.0 };
                Some((rng.random_range(-1.5..1.5), side))
            } else {
                None
            };
            let first_perceived = if i == 0 {
                0
            } else if rng.random_bool(cfg.p_brief) {
                rng.random_range(T_HST - 4..T_HST)
            } else if rng.random_bool(cfg.p_late) {
                rng.random_range(3..T_HST - 5)
            } else {
                0
            };
            plans.push(AgentPlan {
                class,
                route: route.lanes.clone(),
                s_start,
                v_start,
                v_desired: v_des,
                lane_change,
                first_perceived,
            });
            starts.push(p0);
            placed = true;
            break;
        }
        if !placed {
            return Err(ForgeError::MapTooSmall {
                map: kind.name().into(),
                requested: cfg.n_agents,
            });
        }
    }
    Ok(plans)
}

/// Below this speed a lane change stretches out in time so the heading
/// swing stays bounded.
const LANE_CHANGE_REF_SPEED: f64 = 8.0;

fn lateral_offset(plan: &AgentPlan, progress: f64) -> f64 {
    match plan.lane_change {
        None => 0.0,
        Some((_, side)) => {
            let f = progress.clamp(0.0, 1.0);
            side * LANE_WIDTH * (1.0 - (PI * f).cos()) / 2.0
        }
    }
}

fn lane_change_step(plan: &AgentPlan, t: f64, v: f64) -> f64 {
    match plan.lane_change {
        Some((t0, _)) if t >= t0 => DT * (v / LANE_CHANGE_REF_SPEED).min(1.0) / LANE_CHANGE_SECS,
        _ => 0.0,
    }
}

fn idm(v: f64, v_des: f64, leader: Option<(f64, f64)>) -> f64 {
    if v_des < 0.1 {
        return if v > 0.0 { -BRAKE_MAX } else { 0.0 };
    }
    let free = 1.0 - (v / v_des).powi(4);
    let interact = leader.map_or(0.0, |(gap, vl)| {
        let s_star = IDM_S0 + v * IDM_T + v * (v - vl) / (2.0 * (ACCEL_MAX * IDM_B).sqrt());
        (s_star.max(0.0) / gap.max(0.1)).powi(2)
    });
    (ACCEL_MAX * (free - interact)).clamp(-BRAKE_MAX, ACCEL_MAX)
}

fn simulate(
    kind: MapKind,
    polys: &[LanePolyline],
    plans: &[AgentPlan],
    pose: RigidTransform,
    seed: u64,
    labels: &LabelConfig,
) -> Result<Scenario> {
    let routes: Vec<Route> = plans.iter().map(|p| Route::new(p.route.clone(), polys)).collect();
    let n = plans.len();
    let steps = T_HST + T_FUT;
    let mut s: Vec<f64> = plans.iter().map(|p| p.s_start).collect();
    let mut v: Vec<f64> = plans.iter().map(|p| p.v_start).collect();
    let mut lc = vec![0.0; n];
    let mut traj = vec![Vec::with_capacity(steps + 1); n];
    for k in 0..=steps {
        let t = (k as f64 - T_HST as f64) * DT;
        let pos: Vec<Point> = (0..n)
            .map(|i| {
                let off = lateral_offset(&plans[i], lc[i]);
                let p = routes[i].point_at(s[i]);
                if off == 0.0 {
                    p
                } else {
                    p.add(routes[i].normal_at(s[i]).scale(off))
                }
            })
            .collect();
        for i in 0..n {
            traj[i].push(pos[i]);
        }
        if k == steps {
            break;
        }
        let acc: Vec<f64> = (0..n)
            .map(|i| {
                let tan = routes[i].tangent_at(s[i]);
                let mut leader: Option<(f64, f64)> = None;
                for j in (0..n).filter(|&j| j != i) {
                    let rel = pos[j].sub(pos[i]);
                    let lon = rel.x * tan.x + rel.y * tan.y;
                    let lat = -rel.x * tan.y + rel.y * tan.x;
                    if lon > 0.0 && lon < 60.0 && lat.abs() < 1.8 {
                        let gap = lon - VEHICLE_LEN;
                        if leader.is_none_or(|(g, _)| gap < g) {
                            leader = Some((gap, v[j]));
                        }
                    }
                }
                let v_des = plans[i].v_desired.min(routes[i].limit_at(s[i]));
                let v_des = if plans[i].v_desired < 0.1 { 0.0 } else { v_des.max(0.5) };
                idm(v[i], v_des, leader)
            })
            .collect();
        for i in 0..n {
            let nv = (v[i] + acc[i] * DT).clamp(0.0, V_MAX);
            s[i] += (v[i] + nv) / 2.0 * DT;
            lc[i] += lane_change_step(&plans[i], t, (v[i] + nv) / 2.0);
            v[i] = nv;
        }
    }

    let agents: Vec<AgentTrack> = plans
        .iter()
        .zip(&traj)
        .enumerate()
        .map(|(i, (plan, tr))| {
            let history = (0..T_HST)
                .map(|k| {
                    if k < plan.first_perceived {
                        HistoryStep::missing()
                    } else {
                        let d = tr[k + 1].sub(tr[k]);
                        HistoryStep::perceived(d.x, d.y)
                    }
                })
                .collect();
            let track = AgentTrack {
                agent_id: i as u32,
                class: plan.class,
                history,
                anchor: tr[T_HST],
                future: Some(tr[T_HST + 1..].to_vec()),
            };
            pose.apply_track(&track)
        })
        .collect();
    let graph = pose.apply_graph(&build_lane_graph(polys, 10.0, 2.5)?);
    let mut sc = Scenario {
        map_kind: kind,
        seed,
        graph,
        agents,
        maneuver_labels: Vec::new(),
        lane_labels: Vec::new(),
    };
    sc.relabel(labels);
    Ok(sc)
}
