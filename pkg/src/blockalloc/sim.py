"""Monte-Carlo round-latency campaigns.

Each round draws fresh device states and runs every requested scheduling
scheme on that same draw. Sweeps reuse the per-round random streams, so
neighbouring sweep points differ only in the swept quantity.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .crunch import crunch_solve
from .jbba import JbbaOptions, jbba_solve
from .model import (
    GB, Assignment, BlockCostModel, ChannelEnv, CostMatrix, DeviceProfile,
    InfeasibleInstanceError, Instance, InstanceError, build_cost_matrix, round_latency,
)

SCHEMES = ("comm-aware", "comp-aware", "ba-crunch", "jbba")
BASELINE = "comm-aware"
DEFAULT_SEED = 20240607
SWEEPS = {
    "snr": ("snr_db", (0.0, 5.0, 10.0, 15.0, 20.0)),
    "bandwidth": ("bandwidth_hz", (20e6, 50e6, 100e6, 150e6, 200e6)),
    "devices": ("num_devices", (12, 20, 30, 40, 50)),
}
REPORT_COLUMNS = ("sweep_var", "scheme", "mean_latency_s", "p95_latency_s",
                  "infeasible_rounds", "reduction_vs_baseline")

# Independent substreams per sampled quantity keep draws aligned across
# device-count sweeps: device k gets the same state whatever K is.
_STREAM_F, _STREAM_MEM, _STREAM_CH = 0, 1, 2

RoundInstance = Instance


@dataclass(frozen=True)
class CampaignConfig:
    """Simulation settings; ``snr_db`` is the mean received SNR ``p*E[H]/N0``."""

    num_devices: int = 20
    num_blocks: int = 12
    rounds: int = 1000
    snr_db: float = 10.0
    path_loss: float = 1e-3
    noise_power: float = 1.0
    bandwidth_hz: float = 100e6
    compute_factor_range: tuple = (0.5, 1.0)
    memory_range_bytes: tuple = (1 * GB, 6 * GB)
    rng_seed: int = DEFAULT_SEED
    schemes: tuple = SCHEMES
    repair: bool = True
    jbba_max_iters: int = 50
    jbba_tol: float = 1e-4
    cost: BlockCostModel = field(default_factory=BlockCostModel)

    def __post_init__(self):
        if self.num_blocks < 1 or self.num_devices < self.num_blocks:
            raise InstanceError("need num_devices >= num_blocks >= 1")
        if self.rounds < 1:
            raise InstanceError("rounds must be >= 1")
        for name in ("compute_factor_range", "memory_range_bytes"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InstanceError(f"{name}: low must be < high")
        if self.compute_factor_range[0] <= 0 or self.memory_range_bytes[0] <= 0:
            raise InstanceError("sampling ranges must be positive")
        if self.path_loss <= 0 or self.noise_power <= 0 or self.bandwidth_hz <= 0:
            raise InstanceError("path_loss, noise_power and bandwidth_hz must be > 0")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown or not self.schemes:
            raise InstanceError(f"unknown scheme(s): {sorted(unknown)}")
        if self.cost.num_blocks != self.num_blocks:
            object.__setattr__(self, "cost", replace(self.cost, num_blocks=self.num_blocks))

    @property
    def tx_power(self) -> float:
        """Transmit power giving the configured mean received SNR."""
        return 10 ** (self.snr_db / 10) * self.noise_power / self.path_loss

    def to_dict(self) -> dict:
        d = asdict(self)
        d["compute_factor_range"] = list(self.compute_factor_range)
        d["memory_range_bytes"] = list(self.memory_range_bytes)
        d["schemes"] = list(self.schemes)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "CampaignConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise InstanceError(f"unknown config field(s): {sorted(extra)}")
        kw = dict(data)
        try:
            if "cost" in kw:
                kw["cost"] = BlockCostModel(**kw["cost"])
            for name in ("compute_factor_range", "memory_range_bytes", "schemes"):
                if name in kw:
                    kw[name] = tuple(kw[name])
            return cls(**kw)
        except TypeError as exc:
            raise InstanceError(f"bad config: {exc}") from None

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class RoundResult:
    scheme: str
    latency: float
    assignment: Assignment | None
    bandwidth: np.ndarray | None
    feasible: bool  # False when the scheme's own pairing hit a memory wall
    converged: bool = True


def _substream(config: CampaignConfig, round_index: int, which: int):
    return np.random.default_rng([config.rng_seed, round_index, which])


def sample_round(config: CampaignConfig, round_index: int, rng=None) -> RoundInstance:
    """Draw one round's device states; deterministic in (seed, round_index).

    Passing ``rng`` overrides the per-round substreams with a single generator.
    """
    K = config.num_devices
    if rng is None:
        g_f, g_m, g_c = (_substream(config, round_index, s) for s in (_STREAM_F, _STREAM_MEM, _STREAM_CH))
    else:
        g_f = g_m = g_c = rng
    f = g_f.uniform(*config.compute_factor_range, size=K)
    mem = g_m.uniform(*config.memory_range_bytes, size=K)
    # |h|^2 of a unit-power circularly symmetric complex Gaussian
    h = g_c.standard_normal((K, 2))
    gain = config.path_loss * 0.5 * (h ** 2).sum(axis=1)
    p = config.tx_power
    devices = tuple(
        DeviceProfile(k, float(f[k]), float(mem[k]), p, float(gain[k])) for k in range(K)
    )
    env = ChannelEnv(noise_power=config.noise_power, total_bandwidth=config.bandwidth_hz)
    return Instance(devices, config.cost, env)


def random_instance(rng, num_devices: int, num_blocks: int, **overrides) -> RoundInstance:
    """One instance drawn from the campaign laws using a caller-owned generator."""
    overrides.setdefault("cost", BlockCostModel.stretched(num_blocks))
    cfg = CampaignConfig(num_devices=num_devices, num_blocks=num_blocks, rounds=1, **overrides)
    return sample_round(cfg, 0, rng=rng)


def _greedy(cm: CostMatrix, score: np.ndarray, repair: bool):
    """Deepest block to the best-scoring device, then fix memory walls.

    Returns (Assignment or None, hit_wall).
    """
    K, L = cm.shape
    usable = cm.spectral_eff > 0
    rank = np.lexsort((np.arange(K), -score))  # best first, ties by index
    rank = rank[usable[rank]]
    if len(rank) < L:
        return None, True
    chosen = rank[:L]
    devs = [int(chosen[L - 1 - l]) for l in range(L)]  # block L-1 gets chosen[0]
    fits = cm.admissible
    hit = not all(fits[devs[l], l] for l in range(L))
    if not hit:
        return Assignment(tuple(devs)), False
    if not repair:
        return None, True
    pos = {int(k): i for i, k in enumerate(rank)}
    for l in range(L - 1, -1, -1):
        k = devs[l]
        if fits[k, l]:
            continue
        owner = {d: b for b, d in enumerate(devs)}
        # nearest device in the scheme's own ranking that can take the block,
        # either free or by a swap the other block tolerates
        for c in sorted(rank, key=lambda d: (abs(pos[int(d)] - pos[k]), pos[int(d)])):
            c = int(c)
            if c == k or not fits[c, l]:
                continue
            other = owner.get(c)
            if other is None:
                devs[l] = c
                break
            if fits[k, other]:
                devs[l], devs[other] = c, k
                break
        else:
            return None, True
    if not all(fits[devs[l], l] for l in range(L)):
        return None, True
    return Assignment(tuple(devs)), True


def _equal_share(cm: CostMatrix, a: Assignment) -> np.ndarray:
    bw = np.zeros(cm.shape[0])
    bw[list(a.devices)] = cm.total_bandwidth / cm.shape[1]
    return bw


def run_scheme(instance: RoundInstance, scheme: str, cm: CostMatrix | None = None,
               repair: bool = True, jbba_options: JbbaOptions | None = None) -> RoundResult:
    if cm is None:
        cm = build_cost_matrix(instance)
    if scheme in ("comm-aware", "comp-aware"):
        if scheme == "comm-aware":
            score = cm.spectral_eff
        else:
            score = np.array([d.compute_factor for d in instance.devices])
        a, hit = _greedy(cm, score, repair)
        if a is None:
            return RoundResult(scheme, math.inf, None, None, False)
        bw = _equal_share(cm, a)
        return RoundResult(scheme, round_latency(cm, a, bw), a, bw, not hit)
    if scheme == "ba-crunch":
        try:
            sol = crunch_solve(cm)
        except InfeasibleInstanceError:
            return RoundResult(scheme, math.inf, None, None, False)
        bw = _equal_share(cm, sol.assignment)
        return RoundResult(scheme, round_latency(cm, sol.assignment, bw), sol.assignment, bw, True)
    if scheme == "jbba":
        try:
            sol = jbba_solve(cm, jbba_options or JbbaOptions())
        except InfeasibleInstanceError:
            return RoundResult(scheme, math.inf, None, None, False)
        lat = round_latency(cm, sol.assignment, sol.bandwidth)
        return RoundResult(scheme, lat, sol.assignment, sol.bandwidth, True, sol.converged)
    raise ValueError(f"unknown scheme {scheme!r}")


def _run_round(args):
    config, index = args
    inst = sample_round(config, index)
    try:
        cm = build_cost_matrix(inst)
    except InfeasibleInstanceError:
        return [RoundResult(s, math.inf, None, None, False) for s in config.schemes]
    opts = JbbaOptions(max_iters=config.jbba_max_iters, tol=config.jbba_tol)
    return [run_scheme(inst, s, cm, config.repair, opts) for s in config.schemes]


def run_rounds(config: CampaignConfig, jobs: int = 1) -> list[list[RoundResult]]:
    """Per-round results in round order, whatever the worker count."""
    work = [(config, i) for i in range(config.rounds)]
    if jobs <= 1:
        return [_run_round(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_round, work, chunksize=max(1, len(work) // (4 * jobs))))


@dataclass
class CampaignReport:
    rows: list[dict]
    baseline: str = BASELINE

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def mean(self, scheme: str, sweep_var: str | None = None) -> float:
        for row in self.rows:
            if row["scheme"] == scheme and (sweep_var is None or row["sweep_var"] == sweep_var):
                return row["mean_latency_s"]
        raise KeyError((scheme, sweep_var))


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def summarize(results: list[list[RoundResult]], schemes, sweep_var: str,
              baseline: str = BASELINE) -> list[dict]:
    """Aggregate per-round results into one row per scheme."""
    rows = []
    by_scheme = {s: [r[i] for r in results] for i, s in enumerate(schemes)}
    means = {}
    for s in schemes:
        lat = np.array([r.latency for r in by_scheme[s]])
        ok = np.isfinite(lat)
        means[s] = float(lat[ok].mean()) if ok.any() else math.nan
        rows.append({
            "sweep_var": sweep_var,
            "scheme": s,
            "mean_latency_s": means[s],
            "p95_latency_s": float(np.percentile(lat[ok], 95)) if ok.any() else math.nan,
            "infeasible_rounds": int(sum(not r.feasible for r in by_scheme[s])),
        })
    base = means.get(baseline, math.nan)
    for row in rows:
        row["reduction_vs_baseline"] = 1.0 - row["mean_latency_s"] / base if base > 0 else math.nan
    return rows


def _sweep_label(name: str, value) -> str:
    if name == "num_devices":
        return f"{name}={int(value)}"
    return f"{name}={value:g}"


def run_campaign(config: CampaignConfig, sweep: str | None = None, values=None,
                 jobs: int = 1, baseline: str = BASELINE) -> CampaignReport:
    """Run all schemes over the configured rounds, optionally along a sweep.

    ``sweep`` is one of ``snr``, ``bandwidth`` or ``devices``; ``values``
    overrides its default grid.
    """
    if sweep is None:
        points = [("fixed", config)]
    else:
        if sweep not in SWEEPS:
            raise ValueError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
        attr, grid = SWEEPS[sweep]
        points = []
        for v in (values if values is not None else grid):
            v = int(v) if attr == "num_devices" else float(v)
            points.append((_sweep_label(attr, v), replace(config, **{attr: v})))
    rows = []
    for label, cfg in points:
        rows.extend(summarize(run_rounds(cfg, jobs), cfg.schemes, label, baseline))
    return CampaignReport(rows, baseline)
