"""Flow-level 802.11be multi-link environment.

A snapshot model: given one channel per AP per band, compute every station's
downlink SINR from serving-AP power versus co-channel AP power plus thermal
noise, map it to an MCS index and report the worst station per AP and the
per-band team minimum. Nothing evolves between steps except the assignment.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BAND_IDS = ("2.4", "5", "6")
VALID_BANDWIDTHS = (20, 40, 80, 160)
NUM_MCS = 14
MIN_DISTANCE_M = 0.1

# Minimum SNR (dB) per MCS 0..13 at 20 MHz. Derived from the 11ax/11be
# receiver sensitivity ladder; shifted +3 dB per bandwidth doubling.
DEFAULT_MCS_THRESHOLDS_20MHZ = (
    4.0, 7.0, 9.0, 12.0, 16.0, 20.0, 21.0, 22.0, 27.0, 29.0, 32.0, 34.0, 37.0, 40.0,
)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class BandSpec:
    band_id: str
    carrier_freq_ghz: float
    bandwidth_mhz: float
    num_channels: int = 3
    tx_power_ap_dbm: float = 20.0
    tx_power_sta_dbm: float = 15.0
    noise_figure_db: float = 7.0
    # retained for completeness; the min-MCS reward does not use it
    cca_threshold_dbm: float = -82.0

    def __post_init__(self):
        if self.band_id not in BAND_IDS:
            raise ScenarioError(f"unknown band {self.band_id!r}, expected one of {BAND_IDS}")
        if self.num_channels < 1:
            raise ScenarioError(f"band {self.band_id}: num_channels must be >= 1")
        if self.bandwidth_mhz not in VALID_BANDWIDTHS:
            raise ScenarioError(f"band {self.band_id}: bandwidth must be one of {VALID_BANDWIDTHS}")
        if not self.carrier_freq_ghz > 0:
            raise ScenarioError(f"band {self.band_id}: carrier frequency must be positive")


def default_bands() -> list[BandSpec]:
    return [
        BandSpec("2.4", 2.437, 20),
        BandSpec("5", 5.230, 80),
        BandSpec("6", 6.295, 160),
    ]


@dataclass(frozen=True)
class McsTable:
    """Minimum-SINR thresholds per bandwidth, 14 entries each."""

    thresholds: dict[int, tuple[float, ...]]

    def __post_init__(self):
        for bw, th in self.thresholds.items():
            if len(th) != NUM_MCS:
                raise ScenarioError(f"MCS table for {bw} MHz needs {NUM_MCS} entries, got {len(th)}")
            if any(b <= a for a, b in zip(th, th[1:])):
                raise ScenarioError(f"MCS table for {bw} MHz must be strictly increasing")

    @classmethod
    def from_20mhz(cls, base=DEFAULT_MCS_THRESHOLDS_20MHZ, shift_per_doubling_db=3.0):
        th = {}
        for bw in VALID_BANDWIDTHS:
            shift = shift_per_doubling_db * math.log2(bw / 20)
            th[bw] = tuple(float(t) + shift for t in base)
        return cls(th)

    def for_bandwidth(self, bandwidth_mhz) -> np.ndarray:
        try:
            return np.asarray(self.thresholds[int(bandwidth_mhz)], dtype=float)
        except KeyError:
            raise KeyError(f"MCS table has no entry for {bandwidth_mhz} MHz") from None


@dataclass
class Scenario:
    """Everything needed to build a topology and an environment."""

    n_aps: int = 5
    sta_min: int = 25
    sta_max: int = 40
    area_side_m: float = 40.0
    bands: list[BandSpec] = field(default_factory=default_bands)
    default_walls: int = 0
    walls: list[tuple[int, int, int]] = field(default_factory=list)  # (ap_id, sta_id, W)
    mcs_thresholds_20mhz: tuple[float, ...] | None = None
    seed: int | None = None  # topology seed; None -> use the run seed

    def validate(self):
        if self.n_aps < 1:
            raise ScenarioError("n_aps must be >= 1")
        if not (1 <= self.sta_min <= self.sta_max):
            raise ScenarioError(f"invalid station range [{self.sta_min}, {self.sta_max}]")
        if not self.area_side_m > 0:
            raise ScenarioError("area_side_m must be > 0")
        if not self.bands:
            raise ScenarioError("at least one band is required")
        ids = [b.band_id for b in self.bands]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate band ids {ids}")
        if self.default_walls < 0 or any(w < 0 for *_, w in self.walls):
            raise ScenarioError("wall counts must be >= 0")
        self.mcs_table()

    def mcs_table(self) -> McsTable:
        if self.mcs_thresholds_20mhz is None:
            return McsTable.from_20mhz()
        return McsTable.from_20mhz(tuple(self.mcs_thresholds_20mhz))

    def band(self, band_id) -> BandSpec:
        for b in self.bands:
            if b.band_id == band_id:
                return b
        raise KeyError(band_id)

    @property
    def band_ids(self) -> list[str]:
        return [b.band_id for b in self.bands]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["walls"] = [list(w) for w in self.walls]
        if self.mcs_thresholds_20mhz is not None:
            d["mcs_thresholds_20mhz"] = list(self.mcs_thresholds_20mhz)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        if "bands" in d:
            d["bands"] = [BandSpec(**{**b, "band_id": str(b["band_id"])}) for b in d["bands"]]
        if "walls" in d:
            d["walls"] = [tuple(int(v) for v in w) for w in d["walls"]]
        if d.get("mcs_thresholds_20mhz") is not None:
            d["mcs_thresholds_20mhz"] = tuple(float(v) for v in d["mcs_thresholds_20mhz"])
        sc = cls(**d)
        sc.validate()
        return sc


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return Scenario.from_dict(json.load(f))


def save_scenario(scenario: Scenario, path):
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n")


def desk_scenario() -> Scenario:
    """Small scenario used for quick experiments and the learning-progress checks."""
    return Scenario(n_aps=2, sta_min=5, sta_max=5, area_side_m=15.0)


@dataclass
class Topology:
    ap_pos: np.ndarray  # (N, 2) meters
    sta_pos: np.ndarray  # (S, 2) meters
    sta_ap: np.ndarray  # (S,) serving AP id
    walls_between: dict[tuple[int, int], int]  # (ap_id, sta_id) -> W
    area_side_m: float
    seed: int
    default_walls: int = 0

    @property
    def n_aps(self) -> int:
        return len(self.ap_pos)

    @property
    def n_stations(self) -> int:
        return len(self.sta_pos)

    def wall_matrix(self) -> np.ndarray:
        w = np.full((self.n_aps, self.n_stations), self.default_walls, dtype=int)
        for (a, s), n in self.walls_between.items():
            w[a, s] = n
        return w

    def to_bytes(self) -> bytes:
        parts = [self.ap_pos.tobytes(), self.sta_pos.tobytes(), self.sta_ap.tobytes(),
                 repr(sorted(self.walls_between.items())).encode(),
                 repr((self.area_side_m, self.seed, self.default_walls)).encode()]
        return b"|".join(parts)


def generate_topology(scenario: Scenario, seed: int) -> Topology:
    """Drop APs uniformly in the square and stations in rings around them.

    Per AP, round(0.8 n) stations get a uniform radius in [1, 8] m and the
    rest a uniform radius in [1, 3] m, each at a uniform angle.
    """
    scenario.validate()
    rng = np.random.default_rng(seed)
    n = scenario.n_aps
    ap_pos = rng.uniform(0.0, scenario.area_side_m, size=(n, 2))
    sta_pos, sta_ap = [], []
    for ap in range(n):
        count = int(rng.integers(scenario.sta_min, scenario.sta_max + 1))
        n_wide = int(round(0.8 * count))
        radii = np.concatenate([
            rng.uniform(1.0, 8.0, size=n_wide),
            rng.uniform(1.0, 3.0, size=count - n_wide),
        ])
        angles = rng.uniform(0.0, 2 * np.pi, size=count)
        offs = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        sta_pos.append(ap_pos[ap] + offs)
        sta_ap.extend([ap] * count)
    sta_pos = np.concatenate(sta_pos, axis=0)
    sta_ap = np.asarray(sta_ap, dtype=np.int64)
    walls = {}
    for a, s, w in scenario.walls:
        if not (0 <= a < n and 0 <= s < len(sta_ap)):
            raise ScenarioError(f"wall entry ({a}, {s}) references a missing node")
        walls[(a, s)] = w
    return Topology(ap_pos, sta_pos, sta_ap, walls, float(scenario.area_side_m), int(seed),
                    scenario.default_walls)


def path_loss_db(d_m, f_c_ghz, walls=0):
    """Enterprise-style indoor loss: free-space to 10 m, slope 3.5 beyond, 7 dB per wall."""
    d = np.asarray(d_m, dtype=float)
    f = np.asarray(f_c_ghz, dtype=float)
    w = np.asarray(walls, dtype=float)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(f)) and np.all(np.isfinite(w))):
        raise ValueError("path_loss_db: non-finite input")
    d = np.maximum(d, MIN_DISTANCE_M)
    loss = (40.05 + 20 * np.log10(f / 2.4) + 20 * np.log10(np.minimum(d, 10.0))
            + np.where(d > 10.0, 35 * np.log10(np.maximum(d, 10.0) / 10.0), 0.0) + 7 * w)
    return float(loss) if loss.ndim == 0 else loss


def noise_floor_dbm(bandwidth_mhz, noise_figure_db):
    if not bandwidth_mhz > 0:
        raise ValueError("bandwidth must be positive")
    return -174.0 + 10 * math.log10(bandwidth_mhz * 1e6) + noise_figure_db


def dbm_to_mw(p):
    return np.power(10.0, np.asarray(p, dtype=float) / 10.0)


def rx_power_dbm(topology: Topology, band: BandSpec) -> np.ndarray:
    """(N_ap, N_sta) received power of every AP's downlink at every station."""
    diff = topology.ap_pos[:, None, :] - topology.sta_pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return band.tx_power_ap_dbm - path_loss_db(dist, band.carrier_freq_ghz, topology.wall_matrix())


def _sinr_all(rx_mw, sta_ap, channels, noise_mw):
    serving = rx_mw[sta_ap, np.arange(rx_mw.shape[1])]
    co_channel = channels[:, None] == channels[sta_ap][None, :]
    co_channel[sta_ap, np.arange(rx_mw.shape[1])] = False
    interference = (rx_mw * co_channel).sum(axis=0)
    return 10 * np.log10(serving / (noise_mw + interference))


def sinr_db(sta_id, band: BandSpec, channels, topology: Topology) -> float:
    """SINR of one station given the band's per-AP channel vector."""
    channels = np.asarray(channels)
    rx_mw = dbm_to_mw(rx_power_dbm(topology, band))
    noise_mw = dbm_to_mw(noise_floor_dbm(band.bandwidth_mhz, band.noise_figure_db))
    return float(_sinr_all(rx_mw, topology.sta_ap, channels, noise_mw)[sta_id])


def map_sinr_to_mcs(sinr, table: McsTable, bandwidth_mhz):
    """Largest MCS whose threshold is <= sinr; anything below MCS0 maps to 0."""
    th = table.for_bandwidth(bandwidth_mhz)
    idx = np.searchsorted(th, np.asarray(sinr, dtype=float), side="right") - 1
    idx = np.maximum(idx, 0)
    return int(idx) if np.ndim(idx) == 0 else idx.astype(np.int64)


@dataclass
class BandResult:
    ap_mcs: np.ndarray  # (N,) worst-station MCS per AP
    team_mcs: int

    def to_json(self):
        return {"ap_mcs": [int(v) for v in self.ap_mcs], "team_mcs": int(self.team_mcs)}

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["ap_mcs"], dtype=np.int64), int(d["team_mcs"]))


class WlanEnv:
    """Stateless flow-level environment over a fixed topology.

    Assignments are dicts ``{band_id: sequence of N channel indices in 1..c}``.
    """

    def __init__(self, scenario: Scenario, topology: Topology | None = None):
        scenario.validate()
        self.scenario = scenario
        self.table = scenario.mcs_table()
        self.topology = None
        if topology is not None:
            self._set_topology(topology)

    def _set_topology(self, topology: Topology):
        self.topology = topology
        self._rx_mw = {}
        self._noise_mw = {}
        for b in self.scenario.bands:
            self._rx_mw[b.band_id] = dbm_to_mw(rx_power_dbm(topology, b))
            self._noise_mw[b.band_id] = float(dbm_to_mw(noise_floor_dbm(b.bandwidth_mhz, b.noise_figure_db)))

    @property
    def n_aps(self):
        return self.scenario.n_aps

    @property
    def band_ids(self):
        return self.scenario.band_ids

    def num_channels(self) -> dict[str, int]:
        return {b.band_id: b.num_channels for b in self.scenario.bands}

    def initial_assignment(self) -> dict[str, list[int]]:
        return {b: [1] * self.n_aps for b in self.band_ids}

    def reset(self, seed: int) -> dict[str, BandResult]:
        """Build the topology and evaluate the all-channel-1 starting assignment."""
        topo_seed = self.scenario.seed if self.scenario.seed is not None else seed
        self._set_topology(generate_topology(self.scenario, topo_seed))
        return self.step(self.initial_assignment())

    def validate_assignment(self, assignment):
        if set(assignment) != set(self.band_ids):
            raise ValueError(f"assignment bands {sorted(assignment)} != {sorted(self.band_ids)}")
        for b in self.scenario.bands:
            ch = np.asarray(assignment[b.band_id])
            if ch.shape != (self.n_aps,):
                raise ValueError(f"band {b.band_id}: expected {self.n_aps} channels, got shape {ch.shape}")
            if not np.issubdtype(ch.dtype, np.integer):
                raise ValueError(f"band {b.band_id}: channel indices must be integers")
            if ch.min() < 1 or ch.max() > b.num_channels:
                raise ValueError(f"band {b.band_id}: channels must lie in [1, {b.num_channels}]")

    def band_sinr(self, band_id, channels) -> np.ndarray:
        return _sinr_all(self._rx_mw[band_id], self.topology.sta_ap, np.asarray(channels),
                         self._noise_mw[band_id])

    def step(self, assignment) -> dict[str, BandResult]:
        if self.topology is None:
            raise RuntimeError("environment not reset")
        self.validate_assignment(assignment)
        out = {}
        sta_ap = self.topology.sta_ap
        for b in self.scenario.bands:
            sinr = self.band_sinr(b.band_id, assignment[b.band_id])
            mcs = map_sinr_to_mcs(sinr, self.table, b.bandwidth_mhz)
            ap_mcs = np.full(self.n_aps, NUM_MCS - 1, dtype=np.int64)
            np.minimum.at(ap_mcs, sta_ap, mcs)
            out[b.band_id] = BandResult(ap_mcs, int(ap_mcs.min()))
        return out
