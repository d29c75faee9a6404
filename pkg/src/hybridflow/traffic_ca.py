"""Microscopic traffic dynamics: brake-light cellular automaton.

Synchronous 1 s update on a cell-discretized road network with heterogeneous
vehicle classes, velocity anticipation, brake-light-sensitive randomization,
lane policies, loop detectors and dwell-time accounting.

Update stages per step, applied to every vehicle against the previous state:
  0. pick randomization p: p_b if the leader's brake light is on and the time
     headway is below min(v, h); p_0 at standstill; p_d otherwise
  1. accelerate v <- min(v+1, v_max) unless own or leader's brake light is on
     with short headway
  2. brake v <- min(v, d_eff), d_eff = gap + max(min(leader_gap, leader_v) -
     security_gap, 0); brake light set when this drops v below its start value
  3. with probability p, v <- max(v-1, 0); the p_b branch also sets the light
  4. move v cells along the route

Exactly one uniform is drawn per vehicle per step, in ascending vehicle id,
so a scenario flag can degrade the rule set to the classic single-p CA and be
checked draw-for-draw against a brute-force reference.
"""

from __future__ import annotations

import hashlib
import json
import math
from bisect import bisect_right, insort
from collections import deque
from dataclasses import dataclass, field

from .rng import substream
from .road_net import RoadNetwork, Route, ring_network, route_candidates

_INF = math.inf


class ScenarioError(ValueError):
    """Bad demand, class, or policy configuration."""


class CollisionError(RuntimeError):
    """Two vehicles claimed the same cell; indicates a rule-set bug."""


@dataclass(frozen=True)
class VehicleClass:
    name: str
    v_max_cells: int = 20
    length_cells: int = 5
    dawdle_p_d: float = 0.1
    brake_p_b: float = 0.94
    standstill_p_0: float = 0.5
    anticipation_horizon_h: int = 6
    security_gap_cells: int = 7
    connected: bool = False

    def __post_init__(self):
        for p in (self.dawdle_p_d, self.brake_p_b, self.standstill_p_0):
            if not 0.0 <= p <= 1.0:
                raise ScenarioError(f"class {self.name}: probability {p} outside [0,1]")
        if self.v_max_cells < 1 or self.length_cells < 1:
            raise ScenarioError(f"class {self.name}: v_max and length must be >= 1")


def default_classes() -> dict:
    """Car / truck / automated_car defaults; every value is scenario-configurable."""
    return {
        "car": VehicleClass("car"),
        "truck": VehicleClass("truck", v_max_cells=12, length_cells=8),
        # automation modeled as fully deterministic, shorter-gap driving
        "automated_car": VehicleClass("automated_car", dawdle_p_d=0.0, brake_p_b=0.0,
                                      standstill_p_0=0.0, security_gap_cells=5,
                                      connected=True),
    }


def _degenerate(cls: VehicleClass) -> VehicleClass:
    """Classic-CA parameters: single dawdle p, no headway interaction."""
    return VehicleClass(cls.name, cls.v_max_cells, cls.length_cells,
                        dawdle_p_d=cls.dawdle_p_d, brake_p_b=cls.dawdle_p_d,
                        standstill_p_0=cls.dawdle_p_d, anticipation_horizon_h=0,
                        security_gap_cells=cls.security_gap_cells, connected=cls.connected)


class Vehicle:
    __slots__ = ("vid", "cls", "edge", "lane", "cell", "v", "brake_light", "route",
                 "route_pos", "circular", "spawn_s", "exit_s", "front_out",
                 "prev_lanes", "_gap", "_leader", "_new_v", "_new_bl", "_wall")

    def __init__(self, vid, cls, edge, lane, cell, route, route_pos, circular, spawn_s):
        self.vid = vid
        self.cls = cls
        self.edge = edge
        self.lane = lane
        self.cell = cell
        self.v = 0
        self.brake_light = False
        self.route = route
        self.route_pos = route_pos
        self.circular = circular
        self.spawn_s = spawn_s
        self.exit_s = None
        self.front_out = False
        self.prev_lanes = {}
        self._gap = 0
        self._leader = None
        self._new_v = 0
        self._new_bl = False
        self._wall = None


@dataclass
class FlowObservation:
    detector: str
    t0: int
    t1: int
    count: int
    mean_speed_mps: float | None
    per_class: dict
    occupancy: float

    def to_dict(self):
        return {"detector": self.detector, "t0": self.t0, "t1": self.t1,
                "count": self.count, "mean_speed_mps": self.mean_speed_mps,
                "per_class": dict(sorted(self.per_class.items())),
                "occupancy": self.occupancy}


@dataclass
class TrafficMetrics:
    mean_dwell_s: float | None
    trips: int
    per_class_trips: dict
    observations: dict
    injected: int
    exited: int
    queued_end: int

    def to_dict(self):
        return {
            "mean_dwell_s": self.mean_dwell_s,
            "trips": self.trips,
            "per_class_trips": dict(sorted(self.per_class_trips.items())),
            "observations": {d: [o.to_dict() for o in obs]
                             for d, obs in sorted(self.observations.items())},
            "injected": self.injected,
            "exited": self.exited,
            "queued_end": self.queued_end,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class _DemandEntry:
    origin: str
    dest: str
    rate_veh_h: float
    routes: list
    splits: list
    class_mix: list          # [(name, cumulative_share)]
    schedule: dict | None    # time -> arrival count, alternative to rate
    p_step: float


@dataclass
class SimState:
    net: RoadNetwork
    classes: dict
    clock_s: int = 0
    vehicles: dict = field(default_factory=dict)
    trips: list = field(default_factory=list)
    injected: int = 0
    exited: int = 0
    anticipation: bool = True
    lane_policies: dict = field(default_factory=dict)
    demand: list = field(default_factory=list)
    queues: list = field(default_factory=list)
    arrival_log: list = field(default_factory=list)
    rng_traffic: object = None
    rng_injection: object = None
    _segs: dict = field(default_factory=dict, repr=False)
    _dets_by_edge: dict = field(default_factory=dict, repr=False)
    _det_events: dict = field(default_factory=dict, repr=False)
    _det_occ: dict = field(default_factory=dict, repr=False)
    _next_vid: int = 0
    _vehicle_steps: int = 0

    def vehicle_count(self) -> int:
        return len(self.vehicles)


# ---------------------------------------------------------------------------
# scenario construction

def _normalize_mix(mix: dict, classes: dict) -> list:
    total = sum(mix.values())
    if total <= 0:
        raise ScenarioError("class mix has no positive share")
    cum, acc = [], 0.0
    for name in sorted(mix):
        if name not in classes:
            raise ScenarioError(f"unknown class {name!r} in class mix")
        acc += mix[name] / total
        cum.append((name, acc))
    cum[-1] = (cum[-1][0], 1.0)
    return cum


def init_scenario(net: RoadNetwork, demand: list, classes: dict, seed: int,
                  class_mix: dict | None = None, nasch_degenerate: bool = False,
                  step_s: float = 1.0) -> SimState:
    """Empty network plus queued stochastic arrival processes.

    Each demand entry is {origin, dest, rate_veh_h, splits} with optional
    per-entry class_mix and an optional deterministic schedule (list of
    injection times) replacing the Bernoulli process. Splits must sum to 1
    and refer to the fastest routes of the OD pair in order.
    """
    if nasch_degenerate:
        classes = {k: _degenerate(c) for k, c in classes.items()}
    mix_default = class_mix or {name: 1.0 for name in classes}
    state = SimState(net=net, classes=classes, anticipation=not nasch_degenerate,
                     rng_traffic=substream(seed, "traffic"),
                     rng_injection=substream(seed, "injection"))
    for spec in demand:
        rate = float(spec.get("rate_veh_h", 0.0))
        if rate < 0:
            raise ScenarioError(f"negative inflow rate {rate}")
        splits = list(spec.get("splits", [1.0]))
        if abs(sum(splits) - 1.0) > 1e-9:
            raise ScenarioError(f"route splits {splits} do not sum to 1")
        if any(s < -1e-12 for s in splits):
            raise ScenarioError(f"negative route split in {splits}")
        routes = route_candidates(net, spec["origin"], spec["dest"], len(splits))
        if len(routes) < len(splits):
            raise ScenarioError(
                f"only {len(routes)} route(s) between {spec['origin']} and {spec['dest']}"
                f" but {len(splits)} splits given")
        mix = _normalize_mix(spec.get("class_mix") or mix_default, classes)
        schedule = None
        if spec.get("schedule") is not None:
            schedule = {}
            for t in spec["schedule"]:
                schedule[int(t)] = schedule.get(int(t), 0) + 1
        state.demand.append(_DemandEntry(spec["origin"], spec["dest"], rate, routes,
                                         splits, mix, schedule, rate * step_s / 3600.0))
        state.queues.append(deque())
    for det_id, det in net.detectors.items():
        state._dets_by_edge.setdefault(det.edge, []).append(det)
        state._det_events[det_id] = []
        state._det_occ[det_id] = []
    for eid, e in net.edges.items():
        if e.lane_policy is not None:
            state.lane_policies[eid] = e.lane_policy
    return state


def init_ring(n_cells: int, n_vehicles: int, cls: VehicleClass, seed: int,
              lanes: int = 1, positions=None, nasch_degenerate: bool = False,
              v_max_cells: int | None = None) -> SimState:
    """Closed ring with evenly spaced vehicles; the conservation/oracle substrate."""
    if n_vehicles * cls.length_cells > n_cells:
        raise ScenarioError("ring cannot hold the requested vehicles")
    net = ring_network(n_cells, lanes=lanes,
                       v_max_cells=v_max_cells if v_max_cells is not None else cls.v_max_cells)
    if nasch_degenerate:
        cls = _degenerate(cls)
    state = SimState(net=net, classes={cls.name: cls}, anticipation=not nasch_degenerate,
                     rng_traffic=substream(seed, "traffic"),
                     rng_injection=substream(seed, "injection"))
    route = Route(edges=("ring",), free_flow_time_s=0.0, circular=True)
    if positions is None:
        positions = [int(i * n_cells / n_vehicles) for i in range(n_vehicles)]
    for i, pos in enumerate(positions):
        front = (pos + cls.length_cells - 1) % n_cells
        veh = Vehicle(i, cls, "ring", i % lanes, front, ("ring",), 0, True, 0)
        state.vehicles[i] = veh
        state.injected += 1
    state._next_vid = n_vehicles
    _rebuild_segments(state)
    return state


# ---------------------------------------------------------------------------
# geometry on the route chain

def _next_route_index(veh):
    if veh.route_pos + 1 < len(veh.route):
        return veh.route_pos + 1
    return 0 if veh.circular else None


def _prev_route_index(veh, idx):
    if idx > 0:
        return idx - 1
    return len(veh.route) - 1 if veh.circular else None


def _allowed_lanes(state, edge_id, cls):
    policy = state.lane_policies.get(edge_id)
    e = state.net.edges[edge_id]
    if policy is None:
        return range(e.lanes)
    return [l for l in range(e.lanes) if policy[l] is None or cls.name in policy[l]]


def _lane_allowed(state, edge_id, lane, cls):
    policy = state.lane_policies.get(edge_id)
    return policy is None or policy[lane] is None or cls.name in policy[lane]


def _mapped_lane(state, edge_id, lane, cls):
    """Lane taken when entering edge_id from index ``lane``; None = impassable."""
    e = state.net.edges[edge_id]
    base = min(lane, e.lanes - 1)
    if _lane_allowed(state, edge_id, base, cls):
        return base
    allowed = _allowed_lanes(state, edge_id, cls)
    if not allowed:
        return None
    return min(allowed, key=lambda l: (abs(l - base), l))


def _body_segments(veh, net):
    """Occupied (edge, lane, lo, hi) spans; the tail may reach previous edges."""
    segs = []
    idx = veh.route_pos
    e = veh.edge
    lane = veh.lane
    hi = veh.cell
    need = veh.cls.length_cells
    while True:
        cc = net.edges[e].cell_count
        lo = hi - need + 1
        draw_hi = min(hi, cc - 1)
        draw_lo = max(lo, 0)
        if draw_hi >= draw_lo:
            segs.append((e, lane, draw_lo, draw_hi))
        if lo >= 0:
            break
        need = -lo
        idx = _prev_route_index(veh, idx)
        if idx is None:
            break
        e = veh.route[idx]
        lane = veh.prev_lanes.get(e, min(lane, net.edges[e].lanes - 1))
        hi = net.edges[e].cell_count - 1
    return segs


def _rebuild_segments(state):
    """Recompute per-(edge,lane) occupancy spans; overlap here is a collision."""
    segs = {}
    dead = []
    for vid in sorted(state.vehicles):
        veh = state.vehicles[vid]
        body = _body_segments(veh, state.net)
        if not body:
            dead.append(vid)
            continue
        live_edges = {b[0] for b in body}
        veh.prev_lanes = {e: l for e, l in veh.prev_lanes.items() if e in live_edges}
        for e, lane, lo, hi in body:
            segs.setdefault((e, lane), []).append((lo, hi, vid))
    for key, lst in segs.items():
        lst.sort()
        for i in range(1, len(lst)):
            if lst[i - 1][1] >= lst[i][0]:
                raise CollisionError(
                    f"overlap on {key}: {lst[i - 1]} vs {lst[i]} at t={state.clock_s}")
    state._segs = segs
    for vid in dead:
        veh = state.vehicles.pop(vid)
        state.exited += 1
        state.trips.append((vid, veh.cls.name, veh.spawn_s, veh.exit_s,
                            veh.exit_s - veh.spawn_s))


def _occupied(state, edge, lane, cell):
    segs = state._segs.get((edge, lane))
    if not segs:
        return False
    i = bisect_right(segs, (cell, _INF, _INF))
    return i >= 1 and segs[i - 1][1] >= cell


def _chain_scan(state, veh, edge, lane, cell, route_pos, need_far, wall_gap):
    """Distance to the next occupied cell ahead along the route chain.

    Returns (gap, leader_vid). gap is capped at need_far when the road is
    free that far, and at wall_gap where edge-entry arbitration or a lane
    policy blocks the chain.
    """
    net = state.net
    segs_map = state._segs
    base = 0
    e, ln, c, rp = edge, lane, cell, route_pos
    hops = 0
    while True:
        segs = segs_map.get((e, ln))
        if segs:
            i = bisect_right(segs, (c, _INF, _INF))
            if i < len(segs):
                gap = base + segs[i][0] - c - 1
                if wall_gap is not None and wall_gap < gap:
                    return wall_gap, None
                return min(gap, need_far), segs[i][2] if gap <= need_far else None
        cc = net.edges[e].cell_count
        end_gap = base + (cc - 1 - c)
        if wall_gap is not None and wall_gap <= end_gap:
            return wall_gap, None
        if end_gap >= need_far:
            return need_far, None
        nrp = rp + 1 if rp + 1 < len(veh.route) else (0 if veh.circular else None)
        if nrp is None:
            return need_far, None
        ne = veh.route[nrp]
        nlane = _mapped_lane(state, ne, ln, veh.cls)
        if nlane is None:
            return end_gap, None
        base = end_gap
        e, ln, c, rp = ne, nlane, -1, nrp
        hops += 1
        if hops > 64:  # every scan ends at a body, a wall, the horizon or the route end
            raise RuntimeError("chain scan failed to terminate")


# ---------------------------------------------------------------------------
# step phases

def _sample_arrivals(state):
    t = state.clock_s
    for entry, queue in zip(state.demand, state.queues):
        n_arrivals = 0
        if entry.schedule is not None:
            n_arrivals = entry.schedule.get(t, 0)
        elif entry.p_step > 0:
            if state.rng_injection.random() < entry.p_step:
                n_arrivals = 1
        for _ in range(n_arrivals):
            u = state.rng_injection.random()
            ridx, acc = 0, 0.0
            for i, s in enumerate(entry.splits):
                acc += s
                if u <= acc + 1e-12:
                    ridx = i
                    break
            u2 = state.rng_injection.random()
            cname = entry.class_mix[-1][0]
            for name, cum in entry.class_mix:
                if u2 <= cum:
                    cname = name
                    break
            queue.append((t, entry.routes[ridx], cname))
            state.arrival_log.append((t, entry.origin, entry.dest, ridx, cname))


def _try_inject(state):
    net = state.net
    for queue in state.queues:
        while queue:
            spawn_s, route, cname = queue[0]
            cls = state.classes[cname]
            eid = route.edges[0]
            edge = net.edges[eid]
            length = cls.length_cells
            if edge.cell_count < length:
                raise ScenarioError(
                    f"entry edge {eid!r} shorter than vehicle class {cname!r}")
            placed = False
            for lane in _allowed_lanes(state, eid, cls):
                segs = state._segs.get((eid, lane))
                if segs and bisect_right(segs, (length - 1, _INF, _INF)) >= 1:
                    continue
                queue.popleft()
                vid = state._next_vid
                state._next_vid += 1
                veh = Vehicle(vid, cls, eid, lane, length - 1, route.edges, 0,
                              route.circular, spawn_s)
                state.vehicles[vid] = veh
                state.injected += 1
                seg = (0, length - 1, vid)
                lst = state._segs.setdefault((eid, lane), [])
                insort(lst, seg)
                placed = True
                break
            if not placed:
                break


def _lane_change_phase(state):
    net = state.net
    for vid in sorted(state.vehicles):
        veh = state.vehicles[vid]
        edge = net.edges[veh.edge]
        if edge.lanes < 2 or veh.front_out:
            continue
        lo_me = veh.cell - veh.cls.length_cells + 1
        if lo_me < 0:
            continue  # straddling an edge boundary: hold the lane
        mandatory = not _lane_allowed(state, veh.edge, veh.lane, veh.cls)
        need = veh.v + 2
        gap_cur, _ = _chain_scan(state, veh, veh.edge, veh.lane, veh.cell,
                                 veh.route_pos, need, None)
        if not mandatory and gap_cur > veh.v:
            continue  # not blocked ahead
        if mandatory:
            candidates = sorted((l for l in _allowed_lanes(state, veh.edge, veh.cls)
                                 if l != veh.lane),
                                key=lambda l: (abs(l - veh.lane), l))
        else:
            candidates = [l for l in (veh.lane - 1, veh.lane + 1)
                          if 0 <= l < edge.lanes
                          and _lane_allowed(state, veh.edge, l, veh.cls)]
        for target in candidates:
            segs = state._segs.get((veh.edge, target), [])
            i = bisect_right(segs, (veh.cell, _INF, _INF))
            if i >= 1 and segs[i - 1][1] >= lo_me:
                continue  # target cells occupied
            if i >= 1:
                follower = state.vehicles[segs[i - 1][2]]
                if lo_me - segs[i - 1][1] - 1 < follower.cls.v_max_cells:
                    continue  # would force the follower to brake hard
            if not mandatory:
                gap_t, _ = _chain_scan(state, veh, veh.edge, target, veh.cell,
                                       veh.route_pos, need, None)
                if gap_t <= gap_cur:
                    continue
            old = state._segs.get((veh.edge, veh.lane), [])
            old.remove((lo_me, veh.cell, vid))
            insort(state._segs.setdefault((veh.edge, target), []),
                   (lo_me, veh.cell, vid))
            veh.lane = target
            break


def _entry_arbitration(state):
    """Per step, each (edge, lane) accepts entrants from one upstream chain only.

    Same-chain entrants (leader plus followers on one source lane) are already
    collision-safe under the synchronous update; entrants arriving from
    distinct source lanes or edges are not, so all but the chain of the
    closest claimant see a wall one cell before the contested boundary. Walls
    carry no anticipation bonus, so a walled vehicle always stops in time.
    """
    net = state.net
    claims = {}
    for vid in sorted(state.vehicles):
        veh = state.vehicles[vid]
        veh._wall = None
        if veh.front_out:
            continue
        edge = net.edges[veh.edge]
        v_possible = min(veh.v + 1, min(veh.cls.v_max_cells, edge.v_max_cells))
        dist = edge.cell_count - veh.cell  # advance needed to enter the next edge
        ln, rp = veh.lane, veh.route_pos
        source = (veh.edge, veh.lane)
        while v_possible >= dist:
            nrp = rp + 1 if rp + 1 < len(veh.route) else (0 if veh.circular else None)
            if nrp is None:
                break
            ne = veh.route[nrp]
            nlane = _mapped_lane(state, ne, ln, veh.cls)
            if nlane is None:
                break
            claims.setdefault((ne, nlane), []).append((dist, vid, source))
            ln, rp = nlane, nrp
            source = (ne, nlane)
            dist += net.edges[ne].cell_count
    for lst in claims.values():
        if len(lst) < 2:
            continue
        lst.sort()
        winner_source = lst[0][2]
        for dist, vid, source in lst[1:]:
            if source == winner_source:
                continue
            veh = state.vehicles[vid]
            wall = dist - 1
            if veh._wall is None or wall < veh._wall:
                veh._wall = wall


def _velocity_phase(state):
    net = state.net
    rng = state.rng_traffic
    anticipation = state.anticipation
    order = sorted(state.vehicles)
    # pass 1: leader and gap for everyone (synchronous view)
    for vid in order:
        veh = state.vehicles[vid]
        if veh.front_out:
            veh._gap, veh._leader = 10 ** 9, None
            continue
        cls = veh.cls
        v0 = veh.v
        vmax_eff = min(cls.v_max_cells, net.edges[veh.edge].v_max_cells)
        need = max(min(v0 + 1, vmax_eff), v0 * min(v0, cls.anticipation_horizon_h)) + 1
        veh._gap, veh._leader = _chain_scan(state, veh, veh.edge, veh.lane, veh.cell,
                                            veh.route_pos, need, veh._wall)
    # pass 2: the four update stages; one draw per vehicle, ascending id
    for vid in order:
        veh = state.vehicles[vid]
        cls = veh.cls
        v0 = veh.v
        gap = veh._gap
        leader = state.vehicles.get(veh._leader) if veh._leader is not None else None
        vmax_eff = min(cls.v_max_cells, net.edges[veh.edge].v_max_cells)
        ts_product = v0 * min(v0, cls.anticipation_horizon_h)
        headway_large = v0 == 0 or gap >= ts_product
        # stage 0
        pb_branch = (leader is not None and leader.brake_light and not headway_large)
        if pb_branch:
            p = cls.brake_p_b
        elif v0 == 0:
            p = cls.standstill_p_0
        else:
            p = cls.dawdle_p_d
        # stage 1
        lights_off = not veh.brake_light and (leader is None or not leader.brake_light)
        if lights_off or headway_large:
            v1 = min(v0 + 1, vmax_eff)
        else:
            v1 = min(v0, vmax_eff)
        # stage 2. The anticipation bonus assumes the leader's visible rear
        # advances by its velocity; that fails while the leader straddles an
        # edge boundary (hidden tail cells pour onto this edge) and when the
        # leader is capped by a slower edge, so both cases clamp the bonus.
        if (anticipation and leader is not None
                and leader.cell - leader.cls.length_cells + 1 >= 0):
            leader_vmax = min(leader.cls.v_max_cells,
                              net.edges[leader.edge].v_max_cells)
            v_anti = min(leader._gap, leader.v, leader_vmax)
            d_eff = gap + max(v_anti - cls.security_gap_cells, 0)
        else:
            d_eff = gap
        if veh._wall is not None and d_eff > veh._wall:
            d_eff = veh._wall  # an entry wall is absolute, no anticipation past it
        v2 = min(v1, d_eff)
        new_bl = v2 < v0
        # stage 3
        u = rng.random()
        v3 = v2
        if u < p:
            v3 = max(v2 - 1, 0)
            if pb_branch and v3 < v2:
                new_bl = True
        veh._new_v = v3
        veh._new_bl = new_bl


def _move_phase(state):
    net = state.net
    t_new = state.clock_s + 1
    for vid in sorted(state.vehicles):
        veh = state.vehicles[vid]
        adv = veh._new_v
        veh.v = adv
        veh.brake_light = veh._new_bl
        state._vehicle_steps += 1
        if adv == 0:
            continue
        c = veh.cell
        target = c + adv
        while True:
            edge = net.edges[veh.edge]
            cc = edge.cell_count
            dets = state._dets_by_edge.get(veh.edge)
            if dets is not None and not veh.front_out:
                hi_here = min(target, cc - 1)
                for det in dets:
                    if c < det.cell <= hi_here and veh.lane in det.lanes:
                        state._det_events[det.id].append(
                            (t_new, veh.cls.name, veh._new_v * net.cell_length_m, vid))
            if target < cc or veh.front_out:
                veh.cell = target
                break
            nrp = _next_route_index(veh)
            if nrp is None:
                veh.cell = target
                if not veh.front_out:
                    veh.front_out = True
                    veh.exit_s = t_new
                break
            nlane = _mapped_lane(state, veh.route[nrp], veh.lane, veh.cls)
            if nlane is None:
                raise CollisionError(
                    f"vehicle {vid} crossed into impassable edge at t={t_new}")
            veh.prev_lanes[veh.edge] = veh.lane
            veh.route_pos = nrp
            veh.edge = veh.route[nrp]
            veh.lane = nlane
            target -= cc
            c = -1


def _sample_detector_occupancy(state):
    for det_id, det in state.net.detectors.items():
        occ = sum(1 for l in det.lanes if _occupied(state, det.edge, l, det.cell))
        state._det_occ[det_id].append(occ / len(det.lanes))


def step(state: SimState) -> SimState:
    """Advance the simulation by one second (total function on valid states)."""
    _sample_arrivals(state)
    _try_inject(state)
    _lane_change_phase(state)
    _entry_arbitration(state)
    _velocity_phase(state)
    _move_phase(state)
    state.clock_s += 1
    _rebuild_segments(state)
    if state.net.detectors:
        _sample_detector_occupancy(state)
    return state


# ---------------------------------------------------------------------------
# policies, readout, runs

def apply_lane_policy(state: SimState, edge_id: str, mask) -> SimState:
    """Restrict lanes of an edge to class subsets; None entries stay open.

    Vehicles already in a newly forbidden lane change out as soon as the
    symmetric safety rule allows.
    """
    e = state.net.edges[edge_id]
    if len(mask) != e.lanes:
        raise ScenarioError(f"mask length {len(mask)} != lane count {e.lanes}")
    norm = tuple(None if m is None else frozenset(m) for m in mask)
    if all(m is not None and not (set(state.classes) & m) for m in norm):
        raise ScenarioError("mask excludes every class from every lane")
    state.lane_policies[edge_id] = norm
    return state


def clear_lane_policy(state: SimState, edge_id: str) -> SimState:
    state.lane_policies.pop(edge_id, None)
    return state


def detector_readout(state: SimState, detector_id: str, window_s: int) -> FlowObservation:
    """Flow observation over the trailing ``window_s`` seconds."""
    if detector_id not in state.net.detectors:
        raise ScenarioError(f"unknown detector {detector_id!r}")
    if state.clock_s < window_s:
        raise ScenarioError(f"window of {window_s}s has not elapsed yet")
    return _observation(state, detector_id, state.clock_s - window_s, state.clock_s)


def _observation(state, detector_id, t0, t1):
    events = [ev for ev in state._det_events[detector_id] if t0 < ev[0] <= t1]
    speeds = [ev[2] for ev in events]
    per_class = {}
    for _, cname, _, _ in events:
        per_class[cname] = per_class.get(cname, 0) + 1
    occ_samples = state._det_occ[detector_id][t0:t1]
    occupancy = sum(occ_samples) / len(occ_samples) if occ_samples else 0.0
    return FlowObservation(detector=detector_id, t0=t0, t1=t1, count=len(events),
                           mean_speed_mps=sum(speeds) / len(speeds) if speeds else None,
                           per_class=per_class, occupancy=occupancy)


def run(state: SimState, duration_s: int, window_s: int = 60,
        trace_connected: bool = False) -> TrafficMetrics:
    """Repeated step(); aggregates logged trips and windowed detector readings.

    With ``trace_connected`` the planar positions of connected-class vehicles
    are recorded each second in ``state.connected_traces`` for the radio
    co-simulation.
    """
    t_start = state.clock_s
    traces = getattr(state, "connected_traces", None)
    if trace_connected and traces is None:
        traces = {}
        state.connected_traces = traces
    observations = {d: [] for d in state.net.detectors}
    next_window = t_start + window_s
    for _ in range(duration_s):
        step(state)
        if traces is not None:
            for vid, veh in state.vehicles.items():
                if veh.cls.connected and not veh.front_out:
                    cell = min(veh.cell, state.net.edges[veh.edge].cell_count - 1)
                    traces.setdefault(vid, []).append(
                        (state.clock_s,) + state.net.point_at(veh.edge, cell))
        if state.clock_s == next_window:
            for det_id in state.net.detectors:
                observations[det_id].append(
                    _observation(state, det_id, next_window - window_s, next_window))
            next_window += window_s
    dwells = [trip[4] for trip in state.trips]
    per_class = {}
    for _, cname, _, _, _ in state.trips:
        per_class[cname] = per_class.get(cname, 0) + 1
    return TrafficMetrics(
        mean_dwell_s=sum(dwells) / len(dwells) if dwells else None,
        trips=len(state.trips), per_class_trips=per_class, observations=observations,
        injected=state.injected, exited=state.exited,
        queued_end=sum(len(q) for q in state.queues))


def state_hash(state: SimState) -> str:
    """Digest of the microscopic state; equal hashes mean equal trajectories."""
    items = [(vid, v.edge, v.lane, v.cell, v.v, v.brake_light, v.route_pos, v.front_out)
             for vid, v in sorted(state.vehicles.items())]
    queues = [tuple((s, r.edges, c) for s, r, c in q) for q in state.queues]
    blob = repr((state.clock_s, items, queues, state.injected, state.exited)).encode()
    return hashlib.sha256(blob).hexdigest()


def collision_check(state: SimState) -> None:
    """Explicit disjointness check over all occupied cells (test hook)."""
    seen = {}
    for vid, veh in state.vehicles.items():
        for e, lane, lo, hi in _body_segments(veh, state.net):
            for c in range(lo, hi + 1):
                key = (e, lane, c)
                if key in seen and seen[key] != vid:
                    raise CollisionError(f"{vid} and {seen[key]} share {key}")
                seen[key] = vid
