"""Registry of seeded golden instances with stored oracle digests and bounds.

Each instance is described by a small generator spec (sizes, seed, scales),
so its potential table is rebuilt on demand rather than stored. The
registry file keeps, per instance, the oracle values (log-partition,
entropy, a SHA-256 digest of the enumerated posterior) and any
pilot-calibrated regression bounds together with the pilot seed and date.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .crf_core import PotentialTable, entropy, enumerate_posterior, forward

REGISTRY_FILE = "golden.json"
DIGEST_DECIMALS = 12


@dataclass(frozen=True)
class GoldenInstance:
    name: str
    kind: str
    spec: dict
    oracle: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    pilot: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return int(self.spec["K"])

    @property
    def T(self) -> int:
        return int(self.spec["T"])

    def table(self) -> PotentialTable:
        return build_table(self.spec)

    def objective_seed(self) -> int:
        return int(self.spec.get("objective_seed", self.spec["seed"]))


def build_table(spec: dict) -> PotentialTable:
    """Rebuild a table from its generator spec.

    Entries are standard normals from ``default_rng(seed)`` drawn in the
    order transition, emission, initial, each times its scale. Optional
    ``self_transition`` is added to the transition diagonal and
    ``forbidden`` lists ``[i, j]`` transitions set to ``-inf``.
    """
    K, T, seed = int(spec["K"]), int(spec["T"]), int(spec["seed"])
    rng = np.random.default_rng(seed)
    scale = float(spec.get("scale", 1.0))
    trans = float(spec.get("transition_scale", scale)) * rng.standard_normal((K, K))
    emit = float(spec.get("emission_scale", scale)) * rng.standard_normal((T, K))
    init = float(spec.get("initial_scale", scale)) * rng.standard_normal(K)
    trans = trans + float(spec.get("self_transition", 0.0)) * np.eye(K)
    for i, j in spec.get("forbidden", []):
        trans[i, j] = -np.inf
    return PotentialTable(trans, emit, init)


def posterior_digest(pot: PotentialTable) -> str:
    """SHA-256 of the enumerated log-probabilities rounded to 12 decimals."""
    post = enumerate_posterior(pot)
    rounded = np.round(post.log_probs, DIGEST_DECIMALS) + 0.0  # folds -0.0 into 0.0
    return hashlib.sha256(rounded.astype("<f8").tobytes()).hexdigest()


def compute_oracle(pot: PotentialTable) -> dict:
    return {
        "log_Z": float(forward(pot).log_Z),
        "entropy": float(entropy(pot)),
        "posterior_digest": posterior_digest(pot),
    }


def _registry_text(path: str | Path | None) -> str:
    if path is not None:
        return Path(path).read_text()
    return resources.files(__package__).joinpath(REGISTRY_FILE).read_text()


def load_registry(path: str | Path | None = None) -> dict[str, GoldenInstance]:
    doc = json.loads(_registry_text(path))
    out = {}
    for item in doc["instances"]:
        inst = GoldenInstance(
            name=item["name"],
            kind=item["kind"],
            spec=item["spec"],
            oracle=item.get("oracle", {}),
            bounds=item.get("bounds", {}),
            pilot=item.get("pilot", {}),
        )
        out[inst.name] = inst
    return out


def instances(kind: str | None = None, path=None) -> list[GoldenInstance]:
    return [g for g in load_registry(path).values() if kind is None or g.kind == kind]


def get(name: str, path=None) -> GoldenInstance:
    reg = load_registry(path)
    if name not in reg:
        raise KeyError(f"no golden instance named {name!r}")
    return reg[name]


def verify_instance(inst: GoldenInstance, log_tol: float = 1e-10) -> list[str]:
    """Problems found when regenerating ``inst``'s oracle; empty when it matches."""
    fresh = compute_oracle(inst.table())
    problems = []
    if fresh["posterior_digest"] != inst.oracle.get("posterior_digest"):
        problems.append(f"{inst.name}: posterior digest changed")
    for key in ("log_Z", "entropy"):
        stored = inst.oracle.get(key)
        if stored is None or abs(fresh[key] - stored) > log_tol:
            problems.append(f"{inst.name}: {key} {fresh[key]!r} != stored {stored!r}")
    return problems


def write_registry(items: list[dict], path: str | Path) -> None:
    """Fill in oracle fields for raw instance dicts and write the registry."""
    out = []
    for item in items:
        item = dict(item)
        item["oracle"] = compute_oracle(build_table(item["spec"]))
        out.append(item)
    Path(path).write_text(json.dumps({"version": 1, "instances": out}, indent=1) + "\n")
