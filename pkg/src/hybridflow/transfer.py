"""Opportunistic car-to-cloud transfer of buffered sensor data.

Sensor bytes accrue in a local buffer; a policy decides each probe whether to
flush. The probabilistic gate maps the decision metric (measured SINR or a
predicted data rate) through

    p = ((phi - phi_min) / (phi_max - phi_min)) ** alpha

so transmissions concentrate where the metric is high; a maximum buffer age
forces a flush regardless. Predictive variants additionally defer while the
forecast along the vehicle's trajectory beats the current metric by a
hysteresis factor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

from .radio_env import RadioScene, forecast_along
from .rng import substream

POLICY_KINDS = ("periodic", "cat", "pcat", "ml_cat", "ml_pcat")


class PolicyError(ValueError):
    """Bad policy configuration or missing inputs."""


@dataclass(frozen=True)
class TransferPolicy:
    kind: str = "ml_cat"
    alpha: float = 4.0
    phi_min: float = 0.0
    phi_max: float = 30.0
    t_min_s: float = 1.0
    t_max_s: float = 120.0
    periodic_interval_s: float = 30.0
    lookahead_s: float = 30.0
    gamma: float = 1.2

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if not self.phi_min < self.phi_max:
            raise PolicyError(f"degenerate metric bounds [{self.phi_min}, {self.phi_max}]")
        if not 0 < self.t_min_s <= self.t_max_s:
            raise PolicyError("need 0 < t_min <= t_max")
        if self.alpha <= 0:
            raise PolicyError("alpha must be positive")
        if self.gamma < 1.0:
            raise PolicyError("hysteresis gamma must be >= 1")

    @property
    def predictive(self) -> bool:
        return self.kind in ("pcat", "ml_pcat")

    @property
    def metric_is_rate(self) -> bool:
        return self.kind in ("ml_cat", "ml_pcat")


def sinr_policy(kind: str, **kwargs) -> TransferPolicy:
    """SINR-metric policy with the dB default bounds."""
    kwargs.setdefault("phi_min", -5.0)
    kwargs.setdefault("phi_max", 30.0)
    return TransferPolicy(kind=kind, **kwargs)


def transmission_probability(phi: float, phi_min: float, phi_max: float,
                             alpha: float) -> float:
    """Probability gate; phi is clamped into [phi_min, phi_max]."""
    if not phi_min < phi_max:
        raise PolicyError(f"degenerate metric bounds [{phi_min}, {phi_max}]")
    phi = min(max(phi, phi_min), phi_max)
    return ((phi - phi_min) / (phi_max - phi_min)) ** alpha


@dataclass
class RatePredictor:
    """Achievable-rate model: spectral-efficiency formula or learned bin table.

    The learned table maps (2 dB SINR bins x power-of-two payload bins x
    5 m/s speed bins) to the mean observed rate and falls back to the formula
    for empty bins.
    """

    kind: str = "sinr_formula"
    efficiency: float = 0.3
    bandwidth_hz: float = 20e6
    rate_cap_mbps: float = 100.0
    payload_ramp_bytes: float = 100_000.0
    table: dict = field(default_factory=dict)

    def formula_rate(self, sinr_db: float, payload_bytes: float, speed_mps: float) -> float:
        lin = 10.0 ** (sinr_db / 10.0)
        rate = self.efficiency * (self.bandwidth_hz / 1e6) * math.log2(1.0 + lin)
        rate = min(self.rate_cap_mbps, rate)
        s = min(1.0, payload_bytes / self.payload_ramp_bytes)  # small payloads underutilize
        return rate * s

    @staticmethod
    def bin_of(sinr_db: float, payload_bytes: float, speed_mps: float) -> tuple:
        return (math.floor(sinr_db / 2.0),
                math.floor(math.log2(max(payload_bytes, 1.0))),
                math.floor(speed_mps / 5.0))

    def predict(self, sinr_db: float, payload_bytes: float, speed_mps: float) -> float:
        for v in (sinr_db, payload_bytes, speed_mps):
            if not math.isfinite(v):
                raise PolicyError(f"non-finite feature {v}")
        if self.kind == "learned_table":
            entry = self.table.get(self.bin_of(sinr_db, payload_bytes, speed_mps))
            if entry is not None:
                return entry[1]
        return self.formula_rate(sinr_db, payload_bytes, speed_mps)


def predict_rate(predictor: RatePredictor, features: dict) -> float:
    return predictor.predict(features["sinr_db"], features["payload_bytes"],
                             features["speed_mps"])


def train_predictor(log_rows, base: RatePredictor | None = None) -> RatePredictor:
    """Binned-mean table from observed transmissions.

    Rows need sinr_db, payload_bytes (the flushed amount), speed_mps and the
    achieved rate_mbps; each bin predicts exactly the mean of its samples.
    """
    rows = list(log_rows)
    if not rows:
        raise PolicyError("cannot train a rate predictor from an empty log")
    base = base or RatePredictor()
    table = {}
    for row in rows:
        key = RatePredictor.bin_of(row["sinr_db"], row["payload_bytes"], row["speed_mps"])
        count, mean = table.get(key, (0, 0.0))
        count += 1
        mean += (row["rate_mbps"] - mean) / count
        table[key] = (count, mean)
    return replace(base, kind="learned_table", table=table)


@dataclass
class BufferState:
    queued_bytes: float = 0.0
    oldest_ts: float | None = None
    accumulation_bytes_s: float = 0.0

    def age(self, now_s: float) -> float:
        return 0.0 if self.oldest_ts is None else now_s - self.oldest_ts


@dataclass
class PolicyRuntime:
    """Per-vehicle mutable policy state: its stream, probe and flush clocks."""

    policy: TransferPolicy
    rng: object
    predictor: RatePredictor = field(default_factory=RatePredictor)
    last_tx_s: float = 0.0
    last_probe_s: float | None = None

    @classmethod
    def create(cls, policy, seed, predictor=None, start_s: float = 0.0):
        return cls(policy=policy, rng=substream(seed, f"transfer-{policy.kind}"),
                   predictor=predictor or RatePredictor(), last_tx_s=start_s)


def decide(runtime: PolicyRuntime, now_s: float, buffer: BufferState,
           phi_now: float, forecast=None) -> bool:
    """True = transmit, False = defer.

    cat-family calls consume exactly one uniform regardless of the outcome so
    that runs with different alphas stay draw-aligned.
    """
    pol = runtime.policy
    if pol.kind == "periodic":
        return now_s - runtime.last_tx_s >= pol.periodic_interval_s
    age = buffer.age(now_s)
    u = runtime.rng.random()
    if age >= pol.t_max_s:
        return True
    if pol.predictive:
        if forecast is None:
            raise PolicyError(f"{pol.kind} requires a forecast")
        future = [v for t, v in forecast if t > now_s]
        if future and max(future) > pol.gamma * phi_now:
            return False
    p = transmission_probability(phi_now, pol.phi_min, pol.phi_max, pol.alpha)
    return u < p


@dataclass
class EnergyModel:
    """Affine open-loop power map: higher path loss, higher transmit power."""

    p_tx_min_w: float = 0.1
    p_tx_max_w: float = 2.0
    pathloss_lo_db: float = 90.0
    pathloss_hi_db: float = 150.0
    p_idle_w: float = 0.05
    sinr_loss_floor_db: float = 0.0
    loss_ramp_db: float = 10.0
    loss_p_max: float = 0.9

    def p_tx(self, pathloss_db: float) -> float:
        frac = (pathloss_db - self.pathloss_lo_db) / (self.pathloss_hi_db - self.pathloss_lo_db)
        return self.p_tx_min_w + (self.p_tx_max_w - self.p_tx_min_w) * min(max(frac, 0.0), 1.0)

    def loss_probability(self, sinr_db: float) -> float:
        if sinr_db >= self.sinr_loss_floor_db:
            return 0.0
        frac = min((self.sinr_loss_floor_db - sinr_db) / self.loss_ramp_db, 1.0)
        return frac * self.loss_p_max


@dataclass
class TransferMetrics:
    mean_goodput_mbps: float
    total_energy_j: float
    transmissions: int
    mean_buffer_age_s: float
    retransmissions: int
    bytes_generated: float
    bytes_transferred: float
    bytes_buffered_end: float

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "mean_goodput_mbps", "total_energy_j", "transmissions",
            "mean_buffer_age_s", "retransmissions", "bytes_generated",
            "bytes_transferred", "bytes_buffered_end")}


def _speed_series(trace):
    speeds = []
    for i in range(len(trace)):
        j = max(i, 1)
        (t0, x0, y0), (t1, x1, y1) = trace[j - 1], trace[j]
        dt = max(t1 - t0, 1e-9)
        speeds.append(math.hypot(x1 - x0, y1 - y0) / dt)
    return speeds


def simulate_drive(trace, scene: RadioScene, policy: TransferPolicy,
                   sensor_rate_bytes_s: float, seed: int,
                   predictor: RatePredictor | None = None,
                   energy: EnergyModel | None = None,
                   rate_noise_sigma: float = 0.15):
    """Walk a timed trace at 1 s resolution under one transfer policy.

    Returns (TransferMetrics, decision log). Flushes drain the whole buffer
    at the rate the formula yields on the true SINR, with multiplicative
    lognormal noise; deep-fade transmissions may need one retransmission,
    doubling that payload's airtime and energy.
    """
    if len(trace) < 2:
        raise PolicyError("trace must span more than one second")
    energy = energy or EnergyModel()
    predictor = predictor or RatePredictor()
    runtime = PolicyRuntime.create(policy, seed, predictor=predictor,
                                   start_s=trace[0][0])
    noise_rng = substream(seed, "transfer-noise")
    buf = BufferState(accumulation_bytes_s=sensor_rate_bytes_s)
    speeds = _speed_series(trace)
    log = []
    generated = transferred = 0.0
    tx_time = tx_energy = 0.0
    ages = []
    n_tx = n_retx = 0
    probe_every = max(1.0, policy.t_min_s)
    for i in range(1, len(trace)):
        t, x, y = trace[i]
        pos = (x, y)
        speed = speeds[i]
        buf.queued_bytes += sensor_rate_bytes_s
        generated += sensor_rate_bytes_s
        if buf.oldest_ts is None:
            buf.oldest_ts = t
        if runtime.last_probe_s is not None and t - runtime.last_probe_s < probe_every:
            continue
        runtime.last_probe_s = t
        sinr = scene.sinr(pos)
        if policy.metric_is_rate:
            phi = predictor.predict(sinr, buf.queued_bytes, speed)
        else:
            phi = sinr
        forecast = None
        if policy.predictive:
            if scene.map is None:
                raise PolicyError(f"{policy.kind} needs a connectivity map on the scene")
            future = [p for p in trace[i:] if p[0] - t <= policy.lookahead_s]
            forecast = forecast_along(scene.map, future, policy.lookahead_s)
            if policy.metric_is_rate:
                forecast = [(ft, predictor.predict(fv, buf.queued_bytes, speed))
                            for ft, fv in forecast]
        if decide(runtime, t, buf, phi, forecast) and buf.queued_bytes > 0:
            payload = buf.queued_bytes
            noise = math.exp(noise_rng.normal(0.0, rate_noise_sigma) -
                             rate_noise_sigma ** 2 / 2.0)
            actual_rate = max(predictor.formula_rate(sinr, payload, speed) * noise, 1e-6)
            attempts = 2 if noise_rng.random() < energy.loss_probability(sinr) else 1
            duration = payload * 8.0 / (actual_rate * 1e6) * attempts
            pathloss = max(s.tx_power_dbm for s in scene.stations) - scene.rsrp(pos)
            e_tx = duration * energy.p_tx(pathloss)
            ages.append(buf.age(t))
            n_tx += 1
            n_retx += attempts - 1
            transferred += payload
            tx_time += duration
            tx_energy += e_tx
            buf.queued_bytes = 0.0
            buf.oldest_ts = None
            runtime.last_tx_s = t
            log.append({"t": t, "phi_metric": phi, "decision": "transmit",
                        "bytes": payload, "duration_s": duration, "energy_j": e_tx,
                        "sinr_db": sinr, "rate_mbps": actual_rate,
                        "payload_bytes": payload, "speed_mps": speed,
                        "attempts": attempts})
        else:
            log.append({"t": t, "phi_metric": phi, "decision": "defer", "bytes": 0.0,
                        "duration_s": 0.0, "energy_j": 0.0, "sinr_db": sinr,
                        "rate_mbps": 0.0, "payload_bytes": buf.queued_bytes,
                        "speed_mps": speed, "attempts": 0})
    wall = trace[-1][0] - trace[0][0]
    idle_time = max(wall - tx_time, 0.0)
    metrics = TransferMetrics(
        mean_goodput_mbps=(transferred * 8.0 / tx_time / 1e6) if tx_time > 0 else 0.0,
        total_energy_j=tx_energy + idle_time * energy.p_idle_w,
        transmissions=n_tx,
        mean_buffer_age_s=sum(ages) / len(ages) if ages else 0.0,
        retransmissions=n_retx,
        bytes_generated=generated,
        bytes_transferred=transferred,
        bytes_buffered_end=buf.queued_bytes,
    )
    return metrics, log


LOG_FIELDS = ("t", "phi_metric", "decision", "bytes", "duration_s", "energy_j", "sinr_db")


def write_log_csv(path, log) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for row in log:
            writer.writerow([row[k] for k in LOG_FIELDS])


def line_trace(start, velocity_mps, duration_s, t0: float = 0.0):
    """Straight constant-velocity trace sampled at 1 Hz."""
    sx, sy = start
    vx, vy = velocity_mps
    return [(t0 + k, sx + vx * k, sy + vy * k) for k in range(int(duration_s) + 1)]
