"""Regenerate src/gumbel_crf/golden.json from the instance specs below.

Oracle fields are recomputed; bounds and pilot metadata are copied as
written here, so recalibrating a bound means editing this file.
"""

from pathlib import Path

from gumbel_crf.golden import write_registry

DP_SHAPES = [
    (1, 3), (2, 1), (2, 2), (2, 3), (2, 5), (2, 6), (3, 1), (3, 2), (3, 3), (3, 4),
    (3, 5), (3, 6), (4, 1), (4, 2), (4, 3), (4, 4), (4, 5), (4, 6), (3, 4), (4, 3),
]
DP_SCALES = [0.5, 1.0, 2.0, 4.0]

PILOT = {"seed": 20261016, "date": "2026-10-16"}


def items():
    out = []
    for i, (K, T) in enumerate(DP_SHAPES):
        spec = {"K": K, "T": T, "seed": 100 + i, "scale": DP_SCALES[i % 4]}
        if i == 18:
            spec["forbidden"] = [[0, 1], [2, 2]]
        if i == 19:
            spec["forbidden"] = [[1, 0]]
        out.append({"name": f"dp-{i:02d}", "kind": "dp", "spec": spec})
    for K, T in [(2, 1), (2, 2), (3, 2), (3, 3)]:
        out.append({
            "name": f"est-k{K}t{T}",
            "kind": "estimator",
            "spec": {"K": K, "T": T, "seed": 300 + 10 * K + T, "scale": 1.0},
        })
    out.append({
        "name": "pm-adversarial",
        "kind": "adversarial",
        "spec": {"K": 3, "T": 4, "seed": 2024, "transition_scale": 0.5, "self_transition": 2.0,
                 "emission_scale": 0.1, "initial_scale": 0.1},
        "bounds": {"pm_mrf_tv_floor": 0.12, "ffbs_tv_ceiling": 0.02, "n_samples": 100000,
                   "pilot_pm_mrf_tv": 0.1568, "pilot_gumbel_crf_st_bias": 3.91, "pilot_pm_mrf_st_bias": 4.27},
        "pilot": PILOT,
    })
    out.append({
        "name": "bench-k3t3",
        "kind": "benchmark",
        "spec": {"K": 3, "T": 3, "seed": 11, "scale": 1.0, "objective_seed": 11},
        "bounds": {"st_tau": 1.0, "st_replications": 20000, "gumbel_crf_st_bias_floor": 0.3,
                   "gumbel_crf_st_bias_ceiling": 0.9, "pilot_gumbel_crf_st_bias": 0.611},
        "pilot": PILOT,
    })
    return out


if __name__ == "__main__":
    target = Path(__file__).resolve().parents[1] / "src" / "gumbel_crf" / "golden.json"
    write_registry(items(), target)
    print(f"wrote {target}")
