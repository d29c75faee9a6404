"""Route-flow optimization against critical flows and travel times.

Three assignment methods over per-OD candidate routes:
  * user equilibrium via the method of successive averages,
  * max-min capacity-margin assignment (waterfilling against each route's
    critical flow),
  * a combined objective, margin minus a weighted flow-integral of the route
    latencies, which interpolates between the two as the weight grows.

Plus sustained-occupancy bottleneck detection on detector series and a
closed evaluation loop that calibrates critical flows from a probe run of
the CA simulator and measures mean dwell time under the resulting splits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from . import traffic_ca
from .road_net import route_candidates


class AssignmentError(ValueError):
    """Malformed assignment problem."""


def bpr_latency(t0: float, q_crit: float, a: float = 0.15, b: float = 4.0):
    """Standard polynomial congestion curve anchored at the critical flow."""
    def latency(q):
        return t0 * (1.0 + a * (q / q_crit) ** b)
    latency.t0 = t0
    return latency


def affine_latency(t0: float, slope: float):
    def latency(q):
        return t0 + slope * q
    latency.t0 = t0
    return latency


@dataclass
class RouteOption:
    route_id: str
    latency: object            # callable flow_veh_h -> seconds, non-decreasing
    q_crit_veh_h: float
    edges: tuple = ()

    def __post_init__(self):
        if self.q_crit_veh_h <= 0:
            raise AssignmentError(f"route {self.route_id}: q_crit must be positive")


@dataclass
class ODProblem:
    od_id: str
    demand_veh_h: float
    routes: list

    def __post_init__(self):
        if self.demand_veh_h < 0:
            raise AssignmentError(f"{self.od_id}: negative demand")
        if not self.routes:
            raise AssignmentError(f"{self.od_id}: no candidate routes")


@dataclass
class AssignmentProblem:
    ods: list


@dataclass
class FlowSplit:
    flows: dict                 # od_id -> [flow per route]
    converged: bool = True
    iterations: int = 0
    objective: float = 0.0
    infeasible: bool = False

    def proportions(self, od_id: str):
        total = sum(self.flows[od_id])
        if total <= 0:
            n = len(self.flows[od_id])
            return [1.0 / n] * n
        return [q / total for q in self.flows[od_id]]

    def to_dict(self, problem: AssignmentProblem | None = None):
        out = {"converged": self.converged, "iterations": self.iterations,
               "objective": self.objective, "infeasible": self.infeasible, "ods": []}
        for od_id in sorted(self.flows):
            entry = {"od": od_id, "flows_veh_h": list(self.flows[od_id])}
            if problem is not None:
                od = next(o for o in problem.ods if o.od_id == od_id)
                entry["routes"] = [
                    {"route": r.route_id, "edges": list(r.edges),
                     "flow_veh_h": q, "latency_s": r.latency(q),
                     "margin_veh_h": r.q_crit_veh_h - q}
                    for r, q in zip(od.routes, self.flows[od_id])]
            out["ods"].append(entry)
        return out


def _aon(od: ODProblem, latencies):
    """All-or-nothing: everything on the lowest-latency route (ties: first)."""
    best = min(range(len(od.routes)), key=lambda i: (latencies[i], i))
    flows = [0.0] * len(od.routes)
    flows[best] = od.demand_veh_h
    return flows


def _equilibrium_gap(od: ODProblem, flows):
    lat = [r.latency(q) for r, q in zip(od.routes, flows)]
    used = [l for l, q in zip(lat, flows) if q > 1e-9]
    if not used:
        return 0.0
    return max(used) - min(lat)


def assign_wardrop(problem: AssignmentProblem, iters: int = 500,
                   tol: float = 0.01) -> FlowSplit:
    """User equilibrium by the method of successive averages.

    Convergence certificate per OD: max latency over used routes minus min
    latency over all routes below tol. Non-convergence returns the best
    iterate with the flag cleared.
    """
    flows = {}
    for od in problem.ods:
        lat0 = [r.latency(0.0) for r in od.routes]
        flows[od.od_id] = _aon(od, lat0)
    converged = False
    n_done = 0
    for n in range(1, iters + 1):
        n_done = n
        worst = max(_equilibrium_gap(od, flows[od.od_id]) for od in problem.ods)
        if worst < tol:
            converged = True
            break
        step = 1.0 / (n + 1)
        for od in problem.ods:
            cur = flows[od.od_id]
            lat = [r.latency(q) for r, q in zip(od.routes, cur)]
            target = _aon(od, lat)
            flows[od.od_id] = [(1 - step) * c + step * t for c, t in zip(cur, target)]
    gap = max(_equilibrium_gap(od, flows[od.od_id]) for od in problem.ods)
    return FlowSplit(flows=flows, converged=converged, iterations=n_done, objective=gap)


def _waterfill(q_crits, demand):
    """Flows maximizing the minimum margin: q_r = max(q_crit_r - m, 0), sum = demand."""
    if demand <= 0:
        return [0.0] * len(q_crits)
    # f(m) = sum(max(q_crit - m, 0)) is piecewise linear, decreasing; walk its knots
    order = sorted(range(len(q_crits)), key=lambda i: q_crits[i])
    total = sum(q_crits)
    active = len(q_crits)
    prev_knot = None
    for idx in order:
        m_all_active = (total - demand) / active
        knot = q_crits[idx]
        if m_all_active <= knot:
            m = m_all_active
            break
        total -= knot
        active -= 1
        prev_knot = knot
    else:
        m = (total - demand) / max(active, 1)
    flows = [max(qc - m, 0.0) for qc in q_crits]
    # numerical cleanup: exact conservation
    scale = demand / sum(flows) if sum(flows) > 0 else 0.0
    return [q * scale for q in flows]


def assign_bmp(problem: AssignmentProblem) -> FlowSplit:
    """Max-min capacity margin per OD (each bottleneck kept below breakdown).

    Infeasible ODs (demand >= total critical flow) are flagged and loaded
    uniformly beyond capacity; the reported margin is then negative.
    """
    flows = {}
    infeasible = False
    margins = []
    for od in problem.ods:
        q_crits = [r.q_crit_veh_h for r in od.routes]
        if od.demand_veh_h >= sum(q_crits):
            infeasible = True
            over = (od.demand_veh_h - sum(q_crits)) / len(q_crits)
            flows[od.od_id] = [qc + over for qc in q_crits]
        else:
            flows[od.od_id] = _waterfill(q_crits, od.demand_veh_h)
        margins.append(min(r.q_crit_veh_h - q
                           for r, q in zip(od.routes, flows[od.od_id])))
    return FlowSplit(flows=flows, converged=True, iterations=0,
                     objective=min(margins), infeasible=infeasible)


def _beckmann(od: ODProblem, flows, n_grid: int = 64):
    """Flow integral of the route latencies (trapezoid; exact for affine)."""
    total = 0.0
    for r, q in zip(od.routes, flows):
        if q <= 0:
            continue
        xs = [q * k / n_grid for k in range(n_grid + 1)]
        ys = [r.latency(x) for x in xs]
        total += sum((ys[k] + ys[k + 1]) * 0.5 for k in range(n_grid)) * (q / n_grid)
    return total


def _combined_objective(od: ODProblem, flows, lam: float):
    margin = min(r.q_crit_veh_h - q for r, q in zip(od.routes, flows))
    if lam == 0.0:
        return margin
    demand = max(od.demand_veh_h, 1e-12)
    return margin - lam * _beckmann(od, flows) / demand


def assign_combined(problem: AssignmentProblem, lam: float = 0.01) -> FlowSplit:
    """Margin objective tempered by travel times.

    Maximizes min-margin minus lam times the per-vehicle flow integral of the
    latencies, by projected pairwise coordinate search from the max-margin
    solution (strict-improvement moves, halving steps). lam = 0 returns the
    max-margin split unchanged; large lam approaches user equilibrium.
    """
    base = assign_bmp(problem)
    if lam == 0.0 or base.infeasible:
        return FlowSplit(flows=base.flows, converged=True, iterations=0,
                         objective=base.objective, infeasible=base.infeasible)
    flows = {}
    objectives = []
    total_sweeps = 0
    for od in problem.ods:
        q = list(base.flows[od.od_id])
        n = len(q)
        if n == 1 or od.demand_veh_h <= 0:
            flows[od.od_id] = q
            objectives.append(_combined_objective(od, q, lam))
            continue
        obj = _combined_objective(od, q, lam)
        step = max(od.demand_veh_h / 4.0, 1e-9)
        while step > 1e-4 * max(od.demand_veh_h, 1.0):
            improved = True
            while improved:
                improved = False
                total_sweeps += 1
                for i in range(n):
                    for j in range(n):
                        if i == j or q[j] < step:
                            continue
                        q[j] -= step
                        q[i] += step
                        cand = _combined_objective(od, q, lam)
                        if cand > obj + 1e-12:
                            obj = cand
                            improved = True
                        else:
                            q[i] -= step
                            q[j] += step
            step /= 2.0
        flows[od.od_id] = q
        objectives.append(obj)
    return FlowSplit(flows=flows, converged=True, iterations=total_sweeps,
                     objective=min(objectives), infeasible=False)


@dataclass
class BottleneckReport:
    entries: list  # (edge, onset_t, measured_flow_veh_h, estimated_q_crit_veh_h)

    def to_dict(self):
        return {"bottlenecks": [
            {"edge": e, "onset_s": t, "flow_veh_h": f, "q_crit_veh_h": qc}
            for e, t, f, qc in self.entries]}


def detect_bottlenecks(observations, density_crit: float, sustain_s: float,
                       detectors=None) -> BottleneckReport:
    """Edges whose occupancy stays above density_crit for at least sustain_s.

    The critical flow of a flagged edge is estimated as the highest flow seen
    before the onset. ``observations`` is a flat iterable of FlowObservation;
    ``detectors`` maps detector id to edge id (defaults to the detector id).
    """
    by_det = {}
    for obs in observations:
        by_det.setdefault(obs.detector, []).append(obs)
    entries = []
    for det_id in sorted(by_det):
        series = sorted(by_det[det_id], key=lambda o: o.t0)
        run_start = None
        onset = None
        for obs in series:
            if obs.occupancy > density_crit:
                if run_start is None:
                    run_start = obs.t0
                if obs.t1 - run_start >= sustain_s:
                    onset = run_start
                    break
            else:
                run_start = None
        if onset is None:
            continue
        pre = [o for o in series if o.t1 <= onset]
        flows = [o.count / (o.t1 - o.t0) * 3600.0 for o in pre]
        at = next(o for o in series if o.t0 == onset)
        measured = at.count / (at.t1 - at.t0) * 3600.0
        q_crit = max(flows) if flows else measured
        edge = detectors.get(det_id, det_id) if detectors else det_id
        entries.append((edge, onset, measured, q_crit))
    return BottleneckReport(entries=entries)


# ---------------------------------------------------------------------------
# evaluation loop against the CA simulator

DEFAULT_LANE_CAPACITY_VEH_H = 1800.0


@dataclass
class EvaluationResult:
    mean_dwell_s: float | None
    split: FlowSplit | None
    problem: AssignmentProblem | None
    metrics: object

    def to_dict(self):
        return {"mean_dwell_s": self.mean_dwell_s,
                "split": self.split.to_dict(self.problem) if self.split else None,
                "traffic": self.metrics.to_dict() if self.metrics else None}


def _probe_and_calibrate(net, demand, classes, seed, k_routes, duration_s,
                         probe_factor, density_crit, sustain_s, window_s, class_mix):
    """High-demand probe run; per-route q_crit from detected bottlenecks."""
    probe_demand = []
    for entry in demand:
        boosted = dict(entry)
        boosted["rate_veh_h"] = entry["rate_veh_h"] * probe_factor
        boosted["splits"] = [1.0 / k_routes] * k_routes
        probe_demand.append(boosted)
    state = traffic_ca.init_scenario(net, probe_demand, classes, seed,
                                     class_mix=class_mix)
    metrics = traffic_ca.run(state, duration_s, window_s=window_s)
    flat = [o for series in metrics.observations.values() for o in series]
    det_edges = {d: det.edge for d, det in net.detectors.items()}
    report = detect_bottlenecks(flat, density_crit, sustain_s, detectors=det_edges)
    q_crit_by_edge = {e: qc for e, _, _, qc in report.entries}
    max_flow_by_edge = {}
    for series in metrics.observations.values():
        for o in series:
            edge = det_edges[o.detector]
            flow = o.count / (o.t1 - o.t0) * 3600.0
            max_flow_by_edge[edge] = max(max_flow_by_edge.get(edge, 0.0), flow)
    return q_crit_by_edge, max_flow_by_edge, report


def build_problem(net, demand, k_routes, q_crit_by_edge, max_flow_by_edge):
    """Per-route BPR latencies from free-flow times and calibrated q_crit."""
    ods = []
    for entry in demand:
        routes = route_candidates(net, entry["origin"], entry["dest"], k_routes)
        options = []
        for r in routes:
            q_crit = None
            for eid in r.edges:
                cand = q_crit_by_edge.get(eid)
                if cand is not None:
                    q_crit = cand if q_crit is None else min(q_crit, cand)
            if q_crit is None:
                observed = [max_flow_by_edge[eid] for eid in r.edges
                            if eid in max_flow_by_edge]
                lanes = min(net.edges[eid].lanes for eid in r.edges)
                q_crit = max(max(observed, default=0.0),
                             lanes * DEFAULT_LANE_CAPACITY_VEH_H)
            options.append(RouteOption(route_id="-".join(r.edges),
                                       latency=bpr_latency(r.free_flow_time_s, q_crit),
                                       q_crit_veh_h=q_crit, edges=r.edges))
        ods.append(ODProblem(od_id=f"{entry['origin']}->{entry['dest']}",
                             demand_veh_h=entry["rate_veh_h"], routes=options))
    return AssignmentProblem(ods=ods)


def evaluate_policy(net, demand, split_source: str, seed: int, classes=None,
                    class_mix=None, k_routes: int = 2, duration_s: int = 900,
                    probe_factor: float = 1.5, density_crit: float = 0.35,
                    sustain_s: float = 120.0, window_s: int = 60,
                    lam: float = 0.01, fixed_splits=None,
                    lane_policies=None) -> EvaluationResult:
    """Dwell time of the CA under splits from the chosen assignment method.

    split_source: fixed | wardrop | bmp | combined. Latencies and critical
    flows are calibrated from a boosted-demand probe run with the same seed
    family, mirroring a sensor-data calibration pipeline.
    """
    classes = classes or traffic_ca.default_classes()
    if split_source not in ("fixed", "wardrop", "bmp", "combined"):
        raise AssignmentError(f"unknown split source {split_source!r}")
    split = None
    problem = None
    if split_source == "fixed":
        splits_by_entry = [fixed_splits[i] if fixed_splits else [1.0] + [0.0] * (k_routes - 1)
                           for i in range(len(demand))]
    else:
        q_crit_by_edge, max_flow_by_edge, _ = _probe_and_calibrate(
            net, demand, classes, seed, k_routes, duration_s, probe_factor,
            density_crit, sustain_s, window_s, class_mix)
        problem = build_problem(net, demand, k_routes, q_crit_by_edge, max_flow_by_edge)
        if split_source == "wardrop":
            split = assign_wardrop(problem)
        elif split_source == "bmp":
            split = assign_bmp(problem)
        else:
            split = assign_combined(problem, lam=lam)
        splits_by_entry = [split.proportions(od.od_id) for od in problem.ods]
    eval_demand = []
    for entry, props in zip(demand, splits_by_entry):
        e = dict(entry)
        e["splits"] = props
        eval_demand.append(e)
    state = traffic_ca.init_scenario(net, eval_demand, classes, seed,
                                     class_mix=class_mix)
    for eid, mask in (lane_policies or {}).items():
        traffic_ca.apply_lane_policy(state, eid, mask)
    metrics = traffic_ca.run(state, duration_s, window_s=window_s)
    return EvaluationResult(mean_dwell_s=metrics.mean_dwell_s, split=split,
                            problem=problem, metrics=metrics)


def split_to_json(split: FlowSplit, problem: AssignmentProblem) -> str:
    return json.dumps(split.to_dict(problem), sort_keys=True, indent=2)
