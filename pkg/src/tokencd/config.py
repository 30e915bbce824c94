"""JSON experiment configuration: schema, defaults, presets and object builders.

A config is a JSON object with the sections ``dataset``, ``model``, ``graph``,
``algorithm``, ``cost``, ``reference``, plus ``seeds``, ``output`` and an
optional ``sweep``.  Every key has an explicit default; unknown keys are
rejected with the offending key path.  :func:`resolve` returns the fully
populated config, which is what the CLI echoes next to its output.
"""

from __future__ import annotations

import copy
import json
from typing import Any

from .data import FeatureDataset, generate_synthetic_ridge, load_svmlight, partition_even, scale_features
from .engine import RunConfig
from .graph import ClusterPartition, CommGraph, build_topology
from .metrics import CostModel
from .objective import GlmSpec

__all__ = ["ConfigError", "resolve", "load_config", "PRESETS", "preset", "build_dataset", "build_graph",
           "build_partition", "build_spec", "build_run_config", "build_cost_model"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


_INT = (int,)
_NUM = (int, float)
_STR = (str,)
_BOOL = (bool,)
_OPT_INT = (int, type(None))
_OPT_STR = (str, type(None))

# key -> (default, accepted types)
DATASET_SYNTHETIC = {
    "kind": ("synthetic", _STR),
    "N": (200, _INT),
    "d": (80, _INT),
    "seed": (None, _OPT_INT),
    "scale": (False, _BOOL),
}
DATASET_SVMLIGHT = {
    "kind": ("svmlight", _STR),
    "path": (None, _STR),
    "labels": ("auto", _STR),
    "expected_features": (None, _OPT_INT),
    "scale": (False, _BOOL),
}
MODEL_RIDGE = {"loss": ("ridge", _STR), "alpha": (10.0, _NUM)}
MODEL_LOGISTIC = {"loss": ("logistic_l1", _STR), "beta": (1.0, _NUM)}
GRAPH = {
    "topology": ("erdos_renyi", _STR),
    "K": (8, _INT),
    "p": (0.4, _NUM),
    "rows": (None, _OPT_INT),
    "cols": (None, _OPT_INT),
    "seed": (None, _OPT_INT),
    "clusters": (None, (int, list, type(None))),
}
ALGORITHM = {
    "name": ("mtcd", _STR),
    "eta": (1e-4, _NUM),
    "hops_per_sync": (1, _INT),
    "local_updates": (1, _INT),
    "num_tokens": (1, _INT),
    "rounds": (100, _INT),
    "batch_size": (None, _OPT_INT),
    "sync_mode": ("overlapping", _STR),
    "start": (None, _OPT_STR),
    "fixed_clients": (None, (list, type(None))),
    "eval_every": (1, _INT),
    "sync_token": ("auto", _STR),
    "trace_level": ("compact", _STR),
    "check_consistency": ("sync", _STR),
    "workers": (1, _INT),
}
COST = {"ratio": (100.0, _NUM), "unit": ("token", _STR), "charge_self_hops": (True, _BOOL)}
REFERENCE = {"tol": (1e-10, _NUM), "cache_dir": (None, _OPT_STR)}
SWEEP = {"threshold": (1e-4, _NUM), "stop_at_threshold": (True, _BOOL), "grid": ({}, (dict,)),
         "variants": ([], (list,))}
VARIANT = {"label": (None, _STR), "algorithm": ({}, (dict,)), "grid": ({}, (dict,))}
TOP = {"seeds": ([0, 1, 2, 3, 4], (list,)), "output": ("results.csv", _STR)}

ALGORITHMS = ("stcd", "mtcd", "svfl")
SWEEP_EXTRA_KEYS = ("cost_ratio",)


def _fill(section: Any, schema: dict, path: str, required: tuple[str, ...] = ()) -> dict:
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(section) - set(schema))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    out = {}
    for key, (default, types) in schema.items():
        val = section.get(key, copy.deepcopy(default))
        if key in required and val is None:
            raise ConfigError(f"{path}.{key}: required")
        if val is not None or type(None) not in types:
            # bool is an int subclass; refuse it where a number is expected
            if not isinstance(val, types) or (isinstance(val, bool) and bool not in types):
                names = "/".join(t.__name__ for t in types)
                raise ConfigError(f"{path}.{key}: expected {names}, got {type(val).__name__}")
        out[key] = float(val) if types == _NUM else val
    return out


def _check_choice(val, choices, path):
    if val not in choices:
        raise ConfigError(f"{path}: must be one of {list(choices)}, got {val!r}")


def _resolve_algorithm(section: Any, path: str) -> dict:
    alg = _fill(section, ALGORITHM, path)
    _check_choice(alg["name"], ALGORITHMS, f"{path}.name")
    try:
        _run_config(alg, 0)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return alg


def resolve(raw: dict) -> dict:
    """Validate ``raw`` and return a copy with every default filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    known = {"dataset", "model", "graph", "algorithm", "cost", "reference", "sweep"} | set(TOP)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")

    ds_raw = raw.get("dataset") or {}
    kind = ds_raw.get("kind", "synthetic") if isinstance(ds_raw, dict) else None
    if kind == "synthetic":
        ds = _fill(ds_raw, DATASET_SYNTHETIC, "dataset")
    elif kind == "svmlight":
        ds = _fill(ds_raw, DATASET_SVMLIGHT, "dataset", required=("path",))
        _check_choice(ds["labels"], ("auto", "binary", "raw"), "dataset.labels")
    else:
        raise ConfigError(f"dataset.kind: must be 'synthetic' or 'svmlight', got {kind!r}")

    m_raw = raw.get("model") or {}
    loss = m_raw.get("loss", "ridge") if isinstance(m_raw, dict) else None
    if loss == "ridge":
        model = _fill(m_raw, MODEL_RIDGE, "model")
    elif loss == "logistic_l1":
        model = _fill(m_raw, MODEL_LOGISTIC, "model")
    else:
        raise ConfigError(f"model.loss: must be 'ridge' or 'logistic_l1', got {loss!r}")

    graph = _fill(raw.get("graph"), GRAPH, "graph")
    _check_choice(graph["topology"], ("complete", "path", "cycle", "star", "empty", "grid", "erdos_renyi"),
                  "graph.topology")
    alg = _resolve_algorithm(raw.get("algorithm"), "algorithm")
    cost = _fill(raw.get("cost"), COST, "cost")
    _check_choice(cost["unit"], ("token",), "cost.unit")
    if cost["ratio"] <= 0:
        raise ConfigError("cost.ratio: must be positive")
    ref = _fill(raw.get("reference"), REFERENCE, "reference")
    top = _fill({k: raw[k] for k in TOP if k in raw}, TOP, "config")
    seeds = top["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a nonempty list of nonnegative integers")

    out = {"dataset": ds, "model": model, "graph": graph, "algorithm": alg, "cost": cost,
           "reference": ref, "seeds": seeds, "output": top["output"]}
    if raw.get("sweep") is not None:
        out["sweep"] = _resolve_sweep(raw["sweep"], alg)
    return out


def _check_grid(grid: dict, path: str) -> None:
    for key, values in grid.items():
        if key not in ALGORITHM and key not in SWEEP_EXTRA_KEYS or key == "name":
            raise ConfigError(f"{path}.{key}: not a sweepable key")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"{path}.{key}: expected a nonempty list")


def _resolve_sweep(raw: Any, base_alg: dict) -> dict:
    sw = _fill(raw, SWEEP, "sweep")
    _check_grid(sw["grid"], "sweep.grid")
    variants = []
    for i, v in enumerate(sw["variants"] or [{"label": base_alg["name"]}]):
        path = f"sweep.variants[{i}]"
        var = _fill(v, VARIANT, path, required=("label",))
        _check_grid(var["grid"], f"{path}.grid")
        var["algorithm"] = _resolve_algorithm({**base_alg, **var["algorithm"]}, f"{path}.algorithm")
        variants.append(var)
    labels = [v["label"] for v in variants]
    if len(set(labels)) != len(labels):
        raise ConfigError("sweep.variants: labels must be distinct")
    sw["variants"] = variants
    return sw


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return resolve(raw)


# ---------------------------------------------------------------------------
# presets

PRESETS: dict[str, dict] = {
    # ridge on the synthetic {0,1} data, ER graph, single token
    "ridge-er40": {
        "dataset": {"kind": "synthetic", "N": 1000, "d": 2000},
        "model": {"loss": "ridge", "alpha": 10.0},
        "graph": {"topology": "erdos_renyi", "K": 40, "p": 0.4},
        "algorithm": {"name": "stcd", "eta": 1e-5, "local_updates": 20, "hops_per_sync": 100, "rounds": 200},
        "cost": {"ratio": 100.0},
        "seeds": [0, 1, 2, 3, 4],
        "output": "ridge-er40.csv",
    },
    # the synchronous baseline for the same problem
    "ridge-er40-svfl": {
        "dataset": {"kind": "synthetic", "N": 1000, "d": 2000},
        "model": {"loss": "ridge", "alpha": 10.0},
        "graph": {"topology": "erdos_renyi", "K": 40, "p": 0.4},
        "algorithm": {"name": "svfl", "eta": 5e-7, "local_updates": 20, "rounds": 500},
        "cost": {"ratio": 100.0},
        "seeds": [0, 1, 2, 3, 4],
        "output": "ridge-er40-svfl.csv",
    },
    # sparse logistic regression; point dataset.path at a local copy of gisette
    "logistic-gisette": {
        "dataset": {"kind": "svmlight", "path": "gisette_scale", "labels": "binary"},
        "model": {"loss": "logistic_l1", "beta": 1.0},
        "graph": {"topology": "erdos_renyi", "K": 40, "p": 0.4},
        "algorithm": {"name": "stcd", "eta": 1e-4, "local_updates": 30, "hops_per_sync": 100, "rounds": 200},
        "cost": {"ratio": 100.0},
        "seeds": [0, 1, 2, 3, 4],
        "output": "logistic-gisette.csv",
    },
    # two path-graph clusters with eight hops per sync against the synchronous baseline
    "comm-efficiency": {
        "dataset": {"kind": "synthetic", "N": 200, "d": 80},
        "model": {"loss": "ridge", "alpha": 10.0},
        "graph": {"topology": "path", "K": 16, "clusters": 2},
        "algorithm": {"name": "mtcd", "local_updates": 20, "rounds": 400, "eval_every": 1},
        "cost": {"ratio": 100.0},
        "seeds": [0, 1, 2, 3, 4],
        "output": "comm-efficiency.csv",
        "sweep": {
            "threshold": 1e-3,
            "variants": [
                {
                    "label": "mtcd",
                    "algorithm": {"name": "mtcd", "sync_mode": "token_per_cluster", "num_tokens": 2,
                                  "hops_per_sync": 8},
                    "grid": {"eta": [2.5e-4, 5e-4, 1e-3]},
                },
                {
                    # all blocks move at once against a stale token, so the stable range is smaller
                    "label": "svfl",
                    "algorithm": {"name": "svfl", "rounds": 2000},
                    "grid": {"eta": [1e-5, 2e-5, 3e-5]},
                },
            ],
        },
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return resolve(copy.deepcopy(PRESETS[name]))


# ---------------------------------------------------------------------------
# builders


def build_dataset(cfg: dict, seed: int) -> FeatureDataset:
    """Dataset split over the graph's clients; a null data seed follows the run seed."""
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        data = generate_synthetic_ridge(ds["N"], ds["d"], seed if ds["seed"] is None else ds["seed"])
    else:
        data = load_svmlight(ds["path"], ds["expected_features"], ds["labels"])
    if ds["scale"]:
        data = scale_features(data)
    return partition_even(data, cfg["graph"]["K"])


def data_seed(cfg: dict, seed: int):
    ds = cfg["dataset"]
    if ds["kind"] != "synthetic":
        return None
    return seed if ds["seed"] is None else ds["seed"]


def build_graph(cfg: dict, seed: int) -> CommGraph:
    g = cfg["graph"]
    kw = {}
    if g["topology"] == "grid":
        kw = {"rows": g["rows"], "cols": g["cols"]}
    elif g["topology"] == "erdos_renyi":
        kw = {"p": g["p"], "seed": seed if g["seed"] is None else g["seed"]}
    return build_topology(g["topology"], g["K"], **kw)


def build_partition(cfg: dict) -> ClusterPartition | None:
    c = cfg["graph"]["clusters"]
    K = cfg["graph"]["K"]
    if c is None:
        return None
    if isinstance(c, int):
        return ClusterPartition.contiguous(K, c)
    return ClusterPartition.from_lists(c)


def build_spec(cfg: dict) -> GlmSpec:
    m = cfg["model"]
    return GlmSpec.ridge(m["alpha"]) if m["loss"] == "ridge" else GlmSpec.logistic_l1(m["beta"])


def _run_config(alg: dict, seed: int) -> RunConfig:
    fields = {k: v for k, v in alg.items() if k != "name"}
    if fields["fixed_clients"] is not None:
        fields["fixed_clients"] = tuple(fields["fixed_clients"])
    return RunConfig(master_seed=seed, **fields)


def build_run_config(alg: dict, seed: int) -> RunConfig:
    return _run_config(alg, seed)


def build_cost_model(cost: dict) -> CostModel:
    return CostModel.from_ratio(cost["ratio"], charge_self_hops=cost["charge_self_hops"])
