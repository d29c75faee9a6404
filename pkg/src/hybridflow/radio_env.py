"""Radio environment: received power, SINR, crowdsensed connectivity map.

A log-distance path-loss model with lattice-hashed lognormal shadowing stands
in for a measured network. The connectivity map keeps exact running
statistics (Welford) per geographic grid cell and backs the trajectory
forecasts used by the predictive transfer policies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BaseStation:
    id: str
    position: tuple
    tx_power_dbm: float = 43.0
    bandwidth_hz: float = 20e6

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError(f"station {self.id}: bandwidth must be positive")


@dataclass(frozen=True)
class RadioSample:
    position: tuple
    rsrp_dbm: float
    sinr_db: float
    timestamp_s: float


@dataclass
class PropagationModel:
    """Log-distance path loss with optional lattice-hashed shadowing."""

    pl0_db: float = 70.0
    exponent: float = 3.0
    d0_m: float = 10.0
    shadowing_sigma_db: float = 6.0
    shadowing_lattice_m: float = 25.0
    shadowing_enabled: bool = True
    seed: int = 0
    _shadow_cache: dict = field(default_factory=dict, repr=False)

    def shadowing_db(self, pos) -> float:
        if not self.shadowing_enabled or self.shadowing_sigma_db <= 0:
            return 0.0
        key = (math.floor(pos[0] / self.shadowing_lattice_m),
               math.floor(pos[1] / self.shadowing_lattice_m))
        val = self._shadow_cache.get(key)
        if val is None:
            gen = np.random.default_rng(
                np.random.SeedSequence([self.seed & 0xFFFFFFFF,
                                        (key[0] + 2 ** 31) & 0xFFFFFFFF,
                                        (key[1] + 2 ** 31) & 0xFFFFFFFF]))
            val = float(gen.normal(0.0, self.shadowing_sigma_db))
            self._shadow_cache[key] = val
        return val


def rsrp_at(pos, station: BaseStation, model: PropagationModel) -> float:
    """Received power in dBm; distance clamps at the reference d0."""
    d = math.hypot(pos[0] - station.position[0], pos[1] - station.position[1])
    d = max(d, model.d0_m)
    pl = model.pl0_db + 10.0 * model.exponent * math.log10(d / model.d0_m)
    return station.tx_power_dbm - pl - model.shadowing_db(pos)


def sinr_at(pos, stations, noise_dbm: float, model: PropagationModel) -> float:
    """SINR in dB: strongest station serves, the rest interfere (linear domain)."""
    if not stations:
        raise ValueError("sinr_at needs at least one station")
    powers = [10.0 ** (rsrp_at(pos, s, model) / 10.0) for s in stations]
    serving = max(powers)
    interference = sum(powers) - serving
    noise = 10.0 ** (noise_dbm / 10.0)
    return 10.0 * math.log10(serving / (interference + noise))


@dataclass
class RadioScene:
    """Stations + propagation + noise floor, with an optional prior map."""

    stations: list
    noise_dbm: float = -100.0
    model: PropagationModel = field(default_factory=PropagationModel)
    map: "ConnectivityMap | None" = None

    def rsrp(self, pos) -> float:
        return max(rsrp_at(pos, s, self.model) for s in self.stations)

    def sinr(self, pos) -> float:
        return sinr_at(pos, self.stations, self.noise_dbm, self.model)


class ConnectivityMap:
    """Geographic grid of exact running statistics of one radio metric.

    Cells hold (count, mean, M2); variance is the sample variance. The grid
    auto-extends: any position maps to a cell. Queries on thin cells fall
    back to the nearest populated neighbor, then to the global mean, then to
    the prior, so lookups are total.
    """

    def __init__(self, cell_size_m: float = 25.0, metric: str = "sinr_db",
                 k_min: int = 3, fallback_radius_cells: int = 2, prior: float = 0.0):
        if cell_size_m <= 0:
            raise ValueError("cell size must be positive")
        self.cell_size_m = cell_size_m
        self.metric = metric
        self.k_min = k_min
        self.fallback_radius_cells = fallback_radius_cells
        self.prior = prior
        self.cells = {}
        self._global_count = 0
        self._global_mean = 0.0

    def cell_of(self, pos):
        return (math.floor(pos[0] / self.cell_size_m),
                math.floor(pos[1] / self.cell_size_m))

    def record(self, pos, value: float) -> None:
        if not math.isfinite(value):
            raise ValueError(f"non-finite metric value {value}")
        key = self.cell_of(pos)
        count, mean, m2 = self.cells.get(key, (0, 0.0, 0.0))
        count += 1
        delta = value - mean
        mean += delta / count
        m2 += delta * (value - mean)
        self.cells[key] = (count, mean, m2)
        self._global_count += 1
        self._global_mean += (value - self._global_mean) / self._global_count

    def record_sample(self, sample: RadioSample) -> None:
        self.record(sample.position, getattr(sample, self.metric))

    def query(self, pos):
        """(mean, variance, count) of the cell at pos; empty cell -> (None, 0.0, 0)."""
        count, mean, m2 = self.cells.get(self.cell_of(pos), (0, 0.0, 0.0))
        if count == 0:
            return None, 0.0, 0
        var = m2 / (count - 1) if count > 1 else 0.0
        return mean, var, count

    def global_mean(self):
        return self._global_mean if self._global_count else None

    def lookup(self, pos) -> float:
        """Total lookup with the fallback chain; never returns None."""
        key = self.cell_of(pos)
        entry = self.cells.get(key)
        if entry is not None and entry[0] >= self.k_min:
            return entry[1]
        best = None
        r = self.fallback_radius_cells
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                if dx == 0 and dy == 0:
                    continue
                neigh = self.cells.get((key[0] + dx, key[1] + dy))
                if neigh is not None and neigh[0] >= self.k_min:
                    d2 = dx * dx + dy * dy
                    cand = (d2, key[0] + dx, key[1] + dy, neigh[1])
                    if best is None or cand < best:
                        best = cand
        if best is not None:
            return best[3]
        if entry is not None and entry[0] > 0:
            return entry[1]
        g = self.global_mean()
        return g if g is not None else self.prior

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cell_x", "cell_y", "count", "mean", "m2"])
            for (cx, cy) in sorted(self.cells):
                count, mean, m2 = self.cells[(cx, cy)]
                writer.writerow([cx, cy, count, repr(mean), repr(m2)])

    @classmethod
    def from_csv(cls, path, cell_size_m: float = 25.0, **kwargs) -> "ConnectivityMap":
        cmap = cls(cell_size_m=cell_size_m, **kwargs)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["cell_x"]), int(row["cell_y"]))
                count = int(row["count"])
                mean = float(row["mean"])
                cmap.cells[key] = (count, mean, float(row["m2"]))
                cmap._global_count += count
                cmap._global_mean += (mean - cmap._global_mean) * count / cmap._global_count
        return cmap


def record_measurement(cmap: ConnectivityMap, sample: RadioSample) -> None:
    cmap.record_sample(sample)


def query_map(cmap: ConnectivityMap, pos):
    return cmap.query(pos)


def forecast_along(cmap: ConnectivityMap, trajectory, horizon_s: float):
    """Map lookups along timed positions within the horizon.

    ``trajectory`` is a sequence of (t, x, y); entries later than the first
    timestamp plus horizon are ignored. The fallback chain keeps the output
    total even on an empty map.
    """
    if not trajectory:
        return []
    t0 = trajectory[0][0]
    return [(t, cmap.lookup((x, y))) for t, x, y in trajectory if t - t0 <= horizon_s]
