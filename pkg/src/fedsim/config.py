"""Config-driven experiment plans.

A config is a small TOML document with sections [plan], [dataset],
[partition], [model], [strategy], [aggregator], [poison], [posthoc], and
[output]. Any numeric scalar may be given as a list to sweep it; sweeps
expand to the cartesian product. Unknown keys, type mismatches, and
constraint violations are rejected with the offending key path.

Parsing resolves every default, so the canonical section dict round-trips:
``parse_config(dump_config(bundle.sections))`` rebuilds the identical plan.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aggregation import AddNoise, AggregatorSpec, NormClip
from .attacks import (BadNetTrigger, BlendedTrigger, EdgeCaseTrigger, PoisonSpec,
                      SigTrigger)
from .data import PartitionSpec, SyntheticSpec, load_idx_dataset, read_idx
from .defense import TuningSpec
from .errors import ConfigError, FedsimError
from .orchestrator import (ExperimentPlan, FineTunePosthoc, IdxSource, ModelSpec,
                           PerClientDirsSource)
from .params import ShareFilter
from .strategies import (DittoSpec, FedAvgSpec, FedBnSpec, FedEmSpec, FedRepSpec,
                         FineTuneSpec, PFedMeSpec)

_SECTION_ORDER = ("plan", "dataset", "partition", "model", "strategy",
                  "aggregator", "poison", "posthoc", "output")

# keys whose natural value is a list (never a sweep axis)
_LIST_KEYS = {("model", "channels"), ("aggregator", "pre_ops")}

_MISSING = object()


class _Section:
    """One config table with typed key extraction and leftover detection."""

    def __init__(self, name: str, table: dict):
        self.name = name
        self.table = dict(table)

    def _convert(self, key, value, typ):
        path = f"{self.name}.{key}"
        if typ == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(path, f"expected an integer, got {value!r}")
            return value
        if typ == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(path, f"expected a number, got {value!r}")
            return float(value)
        if typ == "str":
            if not isinstance(value, str):
                raise ConfigError(path, f"expected a string, got {value!r}")
            return value
        if typ == "bool":
            if not isinstance(value, bool):
                raise ConfigError(path, f"expected a boolean, got {value!r}")
            return value
        if typ == "int_list":
            if (not isinstance(value, list)
                    or any(isinstance(v, bool) or not isinstance(v, int) for v in value)):
                raise ConfigError(path, f"expected a list of integers, got {value!r}")
            return list(value)
        raise AssertionError(typ)

    def take(self, key, typ, default=_MISSING, choices=None):
        if key not in self.table:
            if default is _MISSING:
                raise ConfigError(f"{self.name}.{key}", "required key is missing")
            return default
        value = self._convert(key, self.table.pop(key), typ)
        if choices is not None and value not in choices:
            raise ConfigError(f"{self.name}.{key}",
                              f"must be one of {sorted(choices)}, got {value!r}")
        return value

    def take_raw(self, key, default=_MISSING):
        if key not in self.table:
            if default is _MISSING:
                raise ConfigError(f"{self.name}.{key}", "required key is missing")
            return default
        return self.table.pop(key)

    def finish(self):
        if self.table:
            key = sorted(self.table)[0]
            raise ConfigError(f"{self.name}.{key}", "unknown key")


def _wrap(path: str, fn):
    """Run a dataclass constructor, rewriting its error with the key path."""
    try:
        return fn()
    except FedsimError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from exc


# ---------------------------------------------------------------------------
# Section builders: raw table -> (canonical dict, spec object)
# ---------------------------------------------------------------------------

def _build_plan_section(table):
    s = _Section("plan", table)
    canon = {
        "rounds": s.take("rounds", "int", 10),
        "sample_fraction": s.take("sample_fraction", "float", 0.1),
        "adversary_id": s.take("adversary_id", "int", 1),
        "adversary_period": s.take("adversary_period", "int", 10),
        "eval_every": s.take("eval_every", "int", 10),
        "master_seed": s.take("master_seed", "int", 0),
        "batch_size": s.take("batch_size", "int", 32),
    }
    s.finish()
    constraints = {
        "rounds": canon["rounds"] >= 0,
        "sample_fraction": 0.0 < canon["sample_fraction"] <= 1.0,
        "adversary_id": canon["adversary_id"] >= 0,
        "adversary_period": canon["adversary_period"] >= 1,
        "eval_every": canon["eval_every"] >= 1,
        "batch_size": canon["batch_size"] >= 1,
    }
    for key, ok in constraints.items():
        if not ok:
            raise ConfigError(f"plan.{key}", f"invalid value {canon[key]!r}")
    return canon


def _build_dataset(table):
    s = _Section("dataset", table)
    kind = s.take("kind", "str", "synthetic",
                  choices={"synthetic", "idx", "per_client_dirs"})
    if kind == "synthetic":
        canon = {
            "kind": kind,
            "num_classes": s.take("num_classes", "int", 10),
            "height": s.take("height", "int", 8),
            "width": s.take("width", "int", 8),
            "per_class": s.take("per_class", "int", 200),
            "noise": s.take("noise", "float", 0.1),
            "channels": s.take("channels", "int", 1),
            "seed": s.take("seed", "int", 0),
        }
        spec = _wrap("dataset", lambda: SyntheticSpec(
            canon["num_classes"], canon["height"], canon["width"],
            canon["per_class"], canon["noise"], canon["channels"], canon["seed"]))
    elif kind == "idx":
        canon = {
            "kind": kind,
            "images": s.take("images", "str"),
            "labels": s.take("labels", "str"),
            "num_classes": s.take("num_classes", "int"),
        }
        spec = IdxSource(canon["images"], canon["labels"], canon["num_classes"])
    else:
        canon = {
            "kind": kind,
            "root": s.take("root", "str"),
            "num_classes": s.take("num_classes", "int"),
        }
        spec = PerClientDirsSource(canon["root"], canon["num_classes"])
    s.finish()
    return canon, spec


def _build_partition(table):
    s = _Section("partition", table)
    kind = s.take("kind", "str", "iid", choices={"iid", "dirichlet", "natural"})
    canon = {
        "kind": kind,
        "num_clients": s.take("num_clients", "int", 10),
        "seed": s.take("seed", "int", 0),
    }
    if kind == "dirichlet":
        canon["alpha"] = s.take("alpha", "float", 0.5)
    s.finish()
    spec = _wrap("partition", lambda: PartitionSpec(
        kind, canon["num_clients"], canon["seed"], canon.get("alpha", 0.5)))
    return canon, spec


def _build_model(table):
    s = _Section("model", table)
    canon = {
        "hidden": s.take("hidden", "int", 64),
        "channels": s.take("channels", "int_list", [16, 32]),
    }
    s.finish()
    spec = _wrap("model", lambda: ModelSpec(canon["hidden"], tuple(canon["channels"])))
    return canon, spec


_STRATEGY_KEYS = {
    "fedavg": ("lr", "epochs"),
    "ditto": ("lr", "epochs", "lambda"),
    "pfedme": ("lr", "epochs", "k_steps", "beta", "lambda"),
    "fedem": ("lr", "epochs", "num_components"),
    "finetune": ("lr", "epochs", "ft_lr", "ft_epochs"),
    "fedbn": ("lr", "epochs", "filter"),
    "fedrep": ("body_lr", "body_epochs", "head_lr", "head_epochs"),
}


def _build_strategy(table):
    s = _Section("strategy", table)
    kind = s.take("kind", "str", choices=set(_STRATEGY_KEYS))
    canon = {"kind": kind}
    if kind == "fedavg":
        canon["lr"] = s.take("lr", "float", 0.1)
        canon["epochs"] = s.take("epochs", "int", 2)
        spec = _wrap("strategy", lambda: FedAvgSpec(canon["lr"], canon["epochs"]))
    elif kind == "ditto":
        canon["lr"] = s.take("lr", "float", 0.1)
        canon["epochs"] = s.take("epochs", "int", 2)
        canon["lambda"] = s.take("lambda", "float", 0.1)
        spec = _wrap("strategy", lambda: DittoSpec(
            canon["lr"], canon["epochs"], canon["lambda"]))
    elif kind == "pfedme":
        canon["lr"] = s.take("lr", "float", 0.1)
        canon["epochs"] = s.take("epochs", "int", 3)
        canon["k_steps"] = s.take("k_steps", "int", 2)
        canon["beta"] = s.take("beta", "float", 1.0)
        canon["lambda"] = s.take("lambda", "float", 0.5)
        spec = _wrap("strategy", lambda: PFedMeSpec(
            canon["lr"], canon["epochs"], canon["k_steps"], canon["beta"],
            canon["lambda"]))
    elif kind == "fedem":
        canon["lr"] = s.take("lr", "float", 0.05)
        canon["epochs"] = s.take("epochs", "int", 2)
        canon["num_components"] = s.take("num_components", "int", 3)
        spec = _wrap("strategy", lambda: FedEmSpec(
            canon["lr"], canon["epochs"], canon["num_components"]))
    elif kind == "finetune":
        canon["lr"] = s.take("lr", "float", 0.1)
        canon["epochs"] = s.take("epochs", "int", 2)
        canon["ft_lr"] = s.take("ft_lr", "float", 0.01)
        canon["ft_epochs"] = s.take("ft_epochs", "int", 2)
        spec = _wrap("strategy", lambda: FineTuneSpec(
            canon["lr"], canon["epochs"], canon["ft_lr"], canon["ft_epochs"]))
    elif kind == "fedbn":
        canon["lr"] = s.take("lr", "float", 0.1)
        canon["epochs"] = s.take("epochs", "int", 2)
        canon["filter"] = s.take(
            "filter", "str", "exclude_bn",
            choices={"exclude_bn", "exclude_bn_stat", "exclude_bn_learnable"})
        spec = _wrap("strategy", lambda: FedBnSpec(
            canon["lr"], canon["epochs"], ShareFilter(canon["filter"])))
    else:
        canon["body_lr"] = s.take("body_lr", "float", 0.1)
        canon["body_epochs"] = s.take("body_epochs", "int", 1)
        canon["head_lr"] = s.take("head_lr", "float", 0.005)
        canon["head_epochs"] = s.take("head_epochs", "int", 1)
        spec = _wrap("strategy", lambda: FedRepSpec(
            canon["body_lr"], canon["body_epochs"], canon["head_lr"],
            canon["head_epochs"]))
    s.finish()
    return canon, spec


def _build_aggregator(table):
    s = _Section("aggregator", table)
    rule = s.take("rule", "str", "fedavg", choices={"fedavg", "krum", "multikrum"})
    canon = {"rule": rule}
    if rule in ("krum", "multikrum"):
        canon["f"] = s.take("f", "int", 1)
    if rule == "multikrum":
        canon["k"] = s.take("k", "int", 1)
        canon["weighted"] = s.take("weighted", "bool", False)
    raw_ops = s.take_raw("pre_ops", [])
    if not isinstance(raw_ops, list):
        raise ConfigError("aggregator.pre_ops", "expected a list of tables")
    ops = []
    canon_ops = []
    for i, op in enumerate(raw_ops):
        path = f"aggregator.pre_ops[{i}]"
        if not isinstance(op, dict) or "kind" not in op:
            raise ConfigError(path, "expected a table with a 'kind' key")
        op_s = _Section(path, op)
        kind = op_s.take("kind", "str", choices={"norm_clip", "add_noise"})
        if kind == "norm_clip":
            c = op_s.take("c", "float")
            ops.append(_wrap(path, lambda c=c: NormClip(c)))
            canon_ops.append({"kind": kind, "c": c})
        else:
            sigma = op_s.take("sigma", "float")
            seed = op_s.take("seed", "int", 0)
            ops.append(_wrap(path, lambda sigma=sigma, seed=seed: AddNoise(sigma, seed)))
            canon_ops.append({"kind": kind, "sigma": sigma, "seed": seed})
        op_s.finish()
    if canon_ops:
        canon["pre_ops"] = canon_ops
    s.finish()
    spec = _wrap("aggregator", lambda: AggregatorSpec(
        rule, canon.get("f", 1), canon.get("k", 1), tuple(ops),
        canon.get("weighted", False)))
    return canon, spec


def _build_poison(table):
    s = _Section("poison", table)
    trigger_kind = s.take("trigger", "str",
                          choices={"badnet", "blended", "sig", "edge_case"})
    canon = {
        "trigger": trigger_kind,
        "target_label": s.take("target_label", "int", 1),
        "ratio": s.take("ratio", "float", 0.5),
        "seed": s.take("seed", "int", 0),
    }
    if trigger_kind == "badnet":
        canon["offset"] = s.take("offset", "int", 0)
        trig = _wrap("poison", lambda: BadNetTrigger(canon["offset"]))
    elif trigger_kind == "blended":
        canon["trigger_image"] = s.take("trigger_image", "str")
        canon["alpha"] = s.take("alpha", "float", 0.2)
        image = read_idx(canon["trigger_image"]).astype(np.float64) / 255.0
        trig = _wrap("poison", lambda: BlendedTrigger(image, canon["alpha"]))
    elif trigger_kind == "sig":
        canon["delta"] = s.take("delta", "float", 20.0 / 255.0)
        canon["freq"] = s.take("freq", "int", 6)
        trig = _wrap("poison", lambda: SigTrigger(canon["delta"], canon["freq"]))
    else:
        canon["edge_images"] = s.take("edge_images", "str")
        canon["edge_labels"] = s.take("edge_labels", "str")
        canon["train_fraction"] = s.take("train_fraction", "float", 0.7)
        pool = load_idx_dataset(canon["edge_images"], canon["edge_labels"])
        trig = _wrap("poison", lambda: EdgeCaseTrigger(
            tuple(pool), canon["train_fraction"]))
    s.finish()
    spec = _wrap("poison", lambda: PoisonSpec(
        trig, canon["target_label"], canon["ratio"], canon["seed"]))
    return canon, spec


def _build_posthoc(table):
    s = _Section("posthoc", table)
    mode = s.take("mode", "str",
                  choices={"simple_tuning", "ft_linear", "finetune"})
    canon = {"mode": mode}
    if mode == "finetune":
        canon["lr"] = s.take("lr", "float", 0.01)
        canon["epochs"] = s.take("epochs", "int", 2)
        spec = _wrap("posthoc", lambda: FineTunePosthoc(canon["lr"], canon["epochs"]))
    else:
        canon["lr"] = s.take("lr", "float", 0.005)
        canon["epochs"] = s.take("epochs", "int", 10)
        canon["batch_size"] = s.take("batch_size", "int", 32)
        spec = _wrap("posthoc", lambda: TuningSpec(
            mode, canon["lr"], canon["epochs"], canon["batch_size"]))
    s.finish()
    return canon, spec


# ---------------------------------------------------------------------------
# Parsing, sweep expansion, echo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanBundle:
    """One resolved plan: the canonical section dict, the plan, and the
    content-hash run id used to name its output directory."""

    sections: dict
    plan: ExperimentPlan
    run_id: str

    def echo(self) -> str:
        return dump_config(self.sections)


@dataclass(frozen=True)
class ExperimentConfig:
    bundles: tuple[PlanBundle, ...]
    outdir: str


def _build_bundle(sections: dict) -> PlanBundle:
    known = set(_SECTION_ORDER)
    for name in sections:
        if name not in known:
            raise ConfigError(name, "unknown section")
        if not isinstance(sections[name], dict):
            raise ConfigError(name, "expected a table")

    plan_canon = _build_plan_section(sections.get("plan", {}))
    ds_canon, dataset = _build_dataset(sections.get("dataset", {}))
    part_canon, part = _build_partition(sections.get("partition", {}))
    model_canon, model = _build_model(sections.get("model", {}))
    if "strategy" not in sections:
        raise ConfigError("strategy.kind", "required key is missing")
    strat_canon, strat = _build_strategy(sections["strategy"])
    agg_canon, agg = _build_aggregator(sections.get("aggregator", {}))
    poison_canon = poison = None
    if "poison" in sections:
        poison_canon, poison = _build_poison(sections["poison"])
    posthoc_canon = posthoc = None
    if "posthoc" in sections:
        posthoc_canon, posthoc = _build_posthoc(sections["posthoc"])
    out = _Section("output", sections.get("output", {}))
    outdir = out.take("dir", "str", "runs")
    out.finish()

    canonical = {
        "plan": plan_canon,
        "dataset": ds_canon,
        "partition": part_canon,
        "model": model_canon,
        "strategy": strat_canon,
        "aggregator": agg_canon,
    }
    if poison_canon is not None:
        canonical["poison"] = poison_canon
    if posthoc_canon is not None:
        canonical["posthoc"] = posthoc_canon
    canonical["output"] = {"dir": outdir}

    plan = _wrap("plan", lambda: ExperimentPlan(
        dataset=dataset, partition=part, model=model, strategy=strat,
        aggregator=agg, poison=poison, posthoc=posthoc,
        rounds=plan_canon["rounds"],
        sample_fraction=plan_canon["sample_fraction"],
        adversary_id=plan_canon["adversary_id"],
        adversary_period=plan_canon["adversary_period"],
        eval_every=plan_canon["eval_every"],
        master_seed=plan_canon["master_seed"],
        batch_size=plan_canon["batch_size"]))
    echo = dump_config(canonical)
    run_id = hashlib.sha256(echo.encode()).hexdigest()[:12]
    return PlanBundle(canonical, plan, run_id)


def _sweep_axes(raw: dict):
    axes = []
    for name in _SECTION_ORDER:
        table = raw.get(name)
        if not isinstance(table, dict):
            continue
        for key in sorted(table):
            value = table[key]
            if (name, key) in _LIST_KEYS or not isinstance(value, list):
                continue
            if not value:
                raise ConfigError(f"{name}.{key}", "empty sweep list")
            if any(isinstance(v, bool) or not isinstance(v, (int, float))
                   for v in value):
                raise ConfigError(f"{name}.{key}",
                                  "sweep lists must contain numbers only")
            axes.append((name, key, list(value)))
    return axes


def parse_config(text: str) -> ExperimentConfig:
    """Parse a TOML config into one plan per sweep combination."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<toml>", str(exc)) from exc
    axes = _sweep_axes(raw)
    bundles = []
    for combo in itertools.product(*(values for _, _, values in axes)) if axes else [()]:
        concrete = {name: dict(table) for name, table in raw.items()
                    if isinstance(table, dict)}
        for (name, key, _), value in zip(axes, combo):
            concrete[name][key] = value
        bundles.append(_build_bundle(concrete))
    outdir = bundles[0].sections["output"]["dir"] if bundles else "runs"
    return ExperimentConfig(tuple(bundles), outdir)


def with_master_seed(bundle: PlanBundle, seed: int) -> PlanBundle:
    sections = {name: dict(table) for name, table in bundle.sections.items()}
    sections["plan"]["master_seed"] = seed
    return _build_bundle(sections)


def group_key(bundle: PlanBundle) -> str:
    """Content hash of the config with the master seed removed; plans in the
    same sweep group differ only by seed."""
    sections = {name: dict(table) for name, table in bundle.sections.items()}
    sections["plan"] = {k: v for k, v in sections["plan"].items()
                        if k != "master_seed"}
    return hashlib.sha256(dump_config(sections).encode()).hexdigest()[:12]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        inner = ", ".join(f"{k} = {_fmt(v)}" for k, v in value.items())
        return "{ " + inner + " }"
    raise FedsimError(f"cannot serialize {value!r}")


def dump_config(sections: dict) -> str:
    """Serialize canonical sections as TOML (parseable by parse_config)."""
    lines = []
    for name in _SECTION_ORDER:
        if name not in sections:
            continue
        lines.append(f"[{name}]")
        for key, value in sections[name].items():
            lines.append(f"{key} = {_fmt(value)}")
        lines.append("")
    return "\n".join(lines)
