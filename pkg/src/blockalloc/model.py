"""Physical cost model: devices, depth-dependent block costs, uplink channel.

Units are SI throughout: seconds, hertz, bits, watts, and bytes for memory.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

GB = 1e9

# Default block model: d(l) = a + c1*l with d(12) = 2*d(1), and memory
# growing linearly from ~1.3 GB at depth 1 to ~4 GB at depth 12.
DEFAULT_NUM_BLOCKS = 12
DEFAULT_BACKPROP_SLOPE = 0.05
DEFAULT_FORWARD_LATENCY = 10 * DEFAULT_BACKPROP_SLOPE
DEFAULT_MEMORY_SLOPE = 2.7 * GB / 11
DEFAULT_MEMORY_BASE = 1.3 * GB - DEFAULT_MEMORY_SLOPE
DEFAULT_PARAMS_PER_BLOCK = 24576
DEFAULT_BITS_PER_PARAM = 32
DEFAULT_LOCAL_ITERS = 4


class InstanceError(ValueError):
    """Malformed instance description."""


class InfeasibleInstanceError(Exception):
    """No assignment satisfies the one-block-per-device and memory constraints."""

    def __init__(self, message: str, blocks: Sequence[int] = ()):
        super().__init__(message)
        self.blocks = tuple(blocks)


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    compute_factor: float
    memory_budget: float
    tx_power: float = 1.0
    channel_gain: float = 1.0

    def __post_init__(self):
        if not self.compute_factor > 0:
            raise InstanceError(f"device {self.id}: compute_factor must be > 0")
        if not self.memory_budget > 0:
            raise InstanceError(f"device {self.id}: memory_budget must be > 0")
        if not self.channel_gain >= 0:
            raise InstanceError(f"device {self.id}: channel_gain must be >= 0")
        if not self.tx_power >= 0:
            raise InstanceError(f"device {self.id}: tx_power must be >= 0")


@dataclass(frozen=True)
class BlockCostModel:
    """Depth-indexed costs shared by every block of the model.

    Gradient computation for the block at depth ``l`` takes
    ``local_iters * (forward_latency + backprop_slope * l)`` seconds on a
    unit-speed device and needs ``memory_base + memory_slope * l`` bytes.
    """

    num_blocks: int = DEFAULT_NUM_BLOCKS
    forward_latency: float = DEFAULT_FORWARD_LATENCY
    backprop_slope: float = DEFAULT_BACKPROP_SLOPE
    memory_base: float = DEFAULT_MEMORY_BASE
    memory_slope: float = DEFAULT_MEMORY_SLOPE
    payload_bits: float = DEFAULT_PARAMS_PER_BLOCK * DEFAULT_BITS_PER_PARAM
    local_iters: int = DEFAULT_LOCAL_ITERS

    def __post_init__(self):
        if self.num_blocks < 1:
            raise InstanceError("num_blocks must be >= 1")
        if self.forward_latency < 0 or self.memory_base < 0 or self.payload_bits < 0:
            raise InstanceError("block cost coefficients must be >= 0")
        if not (self.backprop_slope > 0 and self.memory_slope > 0):
            raise InstanceError("backprop_slope and memory_slope must be > 0")
        if self.local_iters < 1:
            raise InstanceError("local_iters must be >= 1")

    @classmethod
    def stretched(cls, num_blocks: int, **kw) -> "BlockCostModel":
        """Default curves for models deeper than the default one.

        Keeps d(L) = 2 d(1) and memory running from ~1.3 GB to ~4 GB; shallower
        models just use the first ``num_blocks`` depths of the default.
        """
        if num_blocks <= DEFAULT_NUM_BLOCKS:
            return cls(num_blocks=num_blocks, **kw)
        c1 = kw.pop("backprop_slope", DEFAULT_BACKPROP_SLOPE)
        b1 = 2.7 * GB / (num_blocks - 1)
        return cls(num_blocks=num_blocks, forward_latency=(num_blocks - 2) * c1,
                   backprop_slope=c1, memory_base=1.3 * GB - b1, memory_slope=b1, **kw)

    @property
    def depths(self) -> np.ndarray:
        return np.arange(1, self.num_blocks + 1)

    def unit_latency(self, depth=None):
        """d(l) on a unit-speed device; all depths when ``depth`` is None."""
        l = self.depths if depth is None else depth
        return self.forward_latency + self.backprop_slope * l

    def memory(self, depth=None):
        """b(l) in bytes; all depths when ``depth`` is None."""
        l = self.depths if depth is None else depth
        return self.memory_base + self.memory_slope * l


@dataclass(frozen=True)
class ChannelEnv:
    noise_power: float = 1.0
    total_bandwidth: float = 100e6

    def __post_init__(self):
        if not self.noise_power > 0:
            raise InstanceError("noise_power must be > 0")
        if not self.total_bandwidth > 0:
            raise InstanceError("total_bandwidth must be > 0")


@dataclass(frozen=True)
class CostMatrix:
    """Per-pair latency tables for one round.

    ``total`` is the equal-share latency ``J + S*L/(B*r)``; rows of devices
    that cannot upload (``r == 0``) are ``inf``.
    """

    comp_latency: np.ndarray
    spectral_eff: np.ndarray
    total: np.ndarray
    block_memory: np.ndarray
    memory_budget: np.ndarray
    payload_bits: float
    total_bandwidth: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.comp_latency.shape

    @property
    def admissible(self) -> np.ndarray:
        """Pairs allowed by memory whose device can upload at all."""
        mem_ok = self.block_memory[None, :] <= self.memory_budget[:, None]
        return mem_ok & (self.spectral_eff > 0)[:, None]


@dataclass(frozen=True)
class Assignment:
    """Block-to-device map: ``devices[l]`` computes block ``l`` (0-based)."""

    devices: tuple[int, ...]

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(k, l) for l, k in enumerate(self.devices)]

    @property
    def num_blocks(self) -> int:
        return len(self.devices)

    def indicator(self, num_devices: int) -> np.ndarray:
        alpha = np.zeros((num_devices, len(self.devices)), dtype=int)
        alpha[list(self.devices), np.arange(len(self.devices))] = 1
        return alpha

    def involvement(self, num_devices: int) -> np.ndarray:
        beta = np.zeros(num_devices, dtype=bool)
        beta[list(self.devices)] = True
        return beta


def comp_latency(device: DeviceProfile, cost: BlockCostModel, depth: int) -> float:
    if not 1 <= depth <= cost.num_blocks:
        raise ValueError(f"depth {depth} outside 1..{cost.num_blocks}")
    return cost.local_iters * cost.unit_latency(depth) / device.compute_factor


def spectral_efficiency(device: DeviceProfile, env: ChannelEnv) -> float:
    return math.log2(1.0 + device.tx_power * device.channel_gain / env.noise_power)


def comm_latency(payload_bits: float, bandwidth: float, r: float) -> float:
    """Upload time of one block; ``inf`` when the device cannot upload."""
    if bandwidth <= 0 or r <= 0:
        return math.inf
    return payload_bits / (bandwidth * r)


@dataclass(frozen=True)
class Instance:
    devices: tuple[DeviceProfile, ...]
    cost: BlockCostModel = field(default_factory=BlockCostModel)
    env: ChannelEnv = field(default_factory=ChannelEnv)

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    @property
    def num_blocks(self) -> int:
        return self.cost.num_blocks

    def arrays(self):
        """(compute_factor, memory_budget, tx_power, channel_gain) as arrays."""
        a = np.array(
            [(d.compute_factor, d.memory_budget, d.tx_power, d.channel_gain) for d in self.devices],
            dtype=float,
        ).reshape(-1, 4)
        return a[:, 0], a[:, 1], a[:, 2], a[:, 3]

    def to_dict(self) -> dict:
        c, e = self.cost, self.env
        return {
            "devices": [
                {"f": d.compute_factor, "memory_bytes": d.memory_budget,
                 "tx_power": d.tx_power, "channel_gain": d.channel_gain}
                for d in self.devices
            ],
            "block_model": {
                "L": c.num_blocks, "a": c.forward_latency, "c1": c.backprop_slope,
                "b0": c.memory_base, "b1": c.memory_slope, "S_bits": c.payload_bits,
                "M": c.local_iters,
            },
            "environment": {"N0": e.noise_power, "B_hz": e.total_bandwidth},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Instance":
        try:
            devs = tuple(
                DeviceProfile(
                    id=i,
                    compute_factor=float(d["f"]),
                    memory_budget=float(d["memory_bytes"]),
                    tx_power=float(d["tx_power"]),
                    channel_gain=float(d["channel_gain"]),
                )
                for i, d in enumerate(data["devices"])
            )
            bm = data["block_model"]
            cost = BlockCostModel(
                num_blocks=int(bm["L"]),
                forward_latency=float(bm["a"]),
                backprop_slope=float(bm["c1"]),
                memory_base=float(bm["b0"]),
                memory_slope=float(bm["b1"]),
                payload_bits=float(bm["S_bits"]),
                local_iters=int(bm["M"]),
            )
            ev = data["environment"]
            env = ChannelEnv(noise_power=float(ev["N0"]), total_bandwidth=float(ev["B_hz"]))
        except KeyError as exc:
            raise InstanceError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InstanceError):
                raise
            raise InstanceError(f"bad field value: {exc}") from None
        return cls(devs, cost, env)

    @classmethod
    def load(cls, path: str | Path) -> "Instance":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def build_cost_matrix(instance: Instance) -> CostMatrix:
    """Latency tables under equal-share bandwidth ``B/L``."""
    K, L = instance.num_devices, instance.num_blocks
    if K < L:
        raise InfeasibleInstanceError(f"{K} devices cannot host {L} blocks")
    cost, env = instance.cost, instance.env
    f, mem, p, h = instance.arrays()
    J = cost.local_iters * cost.unit_latency()[None, :] / f[:, None]
    r = np.log2(1.0 + p * h / env.noise_power)
    with np.errstate(divide="ignore"):
        comm = np.where(r > 0, cost.payload_bits * L / (env.total_bandwidth * r), np.inf)
    return CostMatrix(
        comp_latency=J,
        spectral_eff=r,
        total=J + comm[:, None],
        block_memory=cost.memory(),
        memory_budget=mem,
        payload_bits=cost.payload_bits,
        total_bandwidth=env.total_bandwidth,
    )


def round_latency(cm: CostMatrix, assignment: Assignment, bandwidth: np.ndarray) -> float:
    """Max over involved devices of computation plus upload time."""
    worst = 0.0
    for l, k in enumerate(assignment.devices):
        t = cm.comp_latency[k, l] + comm_latency(cm.payload_bits, bandwidth[k], cm.spectral_eff[k])
        worst = max(worst, t)
    return worst
