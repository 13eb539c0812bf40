"""Batch command line: train, certify, sweep, attack, validate.

Settings resolve in layers: built-in defaults, then ``--profile``, then
``--config`` (flat ``key = value`` file), then explicit flags. The resolved
settings are written to ``<out>.config`` before any result, and together
with the package version they determine every output byte.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 certificate violated.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .attack import AttackConfig, ifia_l2_attack
from .attribution import (AttributionConfig, SmoothingConfig, attribution_upper_bound,
                          parse_m_strategy, smooth_uniform)
from .certify import bound_T, max_epsilon, min_radius, probabilistic_interval
from .metrics import cosine_similarity, kendall_correlation, topk_indices, topk_intersection
from .model import Dataset, StructureError, TrainingError, accuracy, train
from .store import (ModelLoadError, IdxParseError, ResultRow, emit_results, format_float,
                    load_idx, load_model, model_digest, save_model, synth_dataset, write_table)

log = logging.getLogger("attrcert")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    text = str(text).strip()
    return [float(t) for t in text.split(",") if t.strip()] if text else []


def _ints(text: str) -> list[int]:
    text = str(text).strip()
    return [int(t) for t in text.split(",") if t.strip()] if text else []


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _opt_int(text) -> int | None:
    t = str(text).strip().lower()
    return None if t in ("", "none", "predicted") else int(t)


# key: (type, default, help)
_DATA = {
    "data": (str, "synth:bars", "synth:blobs | synth:bars | idx:IMAGES,LABELS"),
    "d": (int, 64, "synthetic dimension"),
    "classes": (int, 2, "number of classes"),
    "per_class": (int, 100, "synthetic samples per class"),
    "noise": (float, 0.1, "synthetic noise level"),
    "data_seed": (int, 0, "synthetic data seed"),
    "limit": (_opt_int, None, "IDX: read only the first LIMIT items"),
}
_OUT = {
    "out": (str, None, "output path (required)"),
    "format": (str, "csv", "csv | jsonl"),
    "workers": (int, 1, "worker processes for per-sample work"),
}
_ATTR = {
    "method": (str, "ig", "sm | ig"),
    "ig_steps": (int, 32, "IG midpoint steps"),
    "wrt": (str, "logit", "logit | prob"),
    "target": (_opt_int, None, "fixed class index (default: predicted class)"),
    "m_strategy": (str, "lipschitz", "lipschitz | empirical:SCALE,PROBES,SEED | user:VALUE"),
}
_SMOOTH = {
    "n": (int, 10_000, "Monte Carlo samples for the smoothed attribution"),
    "seed": (int, 0, "smoothing seed"),
    "samples": (int, 10, "certify the first SAMPLES inputs"),
    "model": (str, None, "model file (required)"),
}
_ATTACK = {
    "eps": (float, 0.5, "l2 attack budget"),
    "repeats": (int, 20, "attacks per sample"),
    "attack_seed": (int, 0, "base seed for attack randomness"),
    "target_kind": (str, "plain", "plain | smoothed"),
    "nstar": (int, 300, "samples in the attacked smoothed attribution"),
    "attack_smooth_seed": (int, 1, "seed of the attacked smoothed attribution"),
    "iterations": (int, 200, "attack iterations"),
    "step": (float, 0.1, "attack step size"),
    "k": (_opt_int, None, "top-k size (default d // 8)"),
    "grad_mode": (str, "numeric", "numeric | random_search"),
    "fd_step": (float, 1e-3, "finite-difference step"),
    "directions": (int, 8, "random_search directions per iteration"),
    "softplus": (_bool, True, "replace ReLU by Softplus inside the attack loss"),
    "softplus_beta": (float, 1.0, "Softplus sharpness used by the attack"),
}

COMMANDS: dict[str, dict] = {
    "train": {
        **_DATA,
        "arch": (_ints, [64, 32, 2], "layer sizes, e.g. 8,16,2"),
        "activation": (str, "relu", "relu | softplus"),
        "model_softplus_beta": (float, 1.0, "Softplus sharpness stored in the model"),
        "lr": (float, 0.1, "learning rate"),
        "epochs": (int, 50, "epochs"),
        "batch_size": (int, 32, "mini-batch size"),
        "seed": (int, 0, "training seed"),
        "out": (str, None, "model output path (required)"),
    },
    "certify": {
        **_DATA, **_SMOOTH, **_ATTR, **_OUT,
        "kind": (str, "T", "T | max_eps | min_radius"),
        "r": (float, 0.5, "smoothing radius"),
        "eps": (float, 0.25, "perturbation budget (T, min_radius)"),
        "threshold": (float, 0.9, "cosine threshold (max_eps, min_radius)"),
        "prob_interval": (float, None, "alpha: also report the Monte Carlo interval"),
        "mc_samples": (int, 1_000_000, "draws for the probabilistic interval"),
    },
    "sweep": {
        **_DATA, **_SMOOTH, **_ATTR, **_OUT,
        "mode": (str, "r_eps", "r_eps (T) | r_T (max_eps) | eps_T (min_radius)"),
        "r": (float, 0.5, "smoothing radius for eps_T mode"),
        "r_grid": (_floats, [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5], "radii"),
        "eps_grid": (_floats, [0.5, 1.0], "perturbation budgets"),
        "t_grid": (_floats, [0.8, 0.9], "thresholds"),
        "pivot": (str, None, "also write the pivoted table here"),
    },
    "attack": {
        **_DATA, **_SMOOTH, **_ATTR, **_OUT, **_ATTACK,
        "r": (float, 0.5, "smoothing radius of a smoothed target"),
    },
    "validate": {
        **_DATA, **_SMOOTH, **_ATTR, **_OUT, **_ATTACK,
        "r": (_floats, [0.5], "smoothing radii"),
        "eps": (_floats, [], "budgets paired with r (default: eps_ratio * r)"),
        "eps_ratio": (float, 0.5, "budget as a fraction of r when eps is not given"),
        "target_kind": (str, "smoothed", "attack target (validation attacks the smoothed attribution)"),
        "threshold": (float, None, "validate against this threshold instead of per-sample T"),
        "gap_report": (str, None, "write per-sample (min cosine - bound) sorted ascending"),
    },
}

# Desk-scale profile: 8x8 bars, 64-32-2 Softplus net, 50 held-out samples.
PROFILES: dict[str, dict] = {
    "desk": {
        "common": {
            "data": "synth:bars", "d": 64, "classes": 2, "noise": 0.1,
            "per_class": 25, "data_seed": 1, "samples": 50,
            "method": "sm", "n": 10_000, "nstar": 300, "repeats": 20,
            "grad_mode": "random_search", "directions": 4, "iterations": 200, "step": 0.1,
            "m_strategy": "lipschitz",
        },
        "train": {"per_class": 200, "data_seed": 0, "arch": [64, 32, 2], "activation": "softplus",
                  "epochs": 30, "lr": 0.1, "batch_size": 32, "seed": 0},
        "certify": {"r": 0.5, "eps": 0.25},
        "attack": {"r": 0.5, "eps": 0.25},
        "sweep": {"r": 0.5},
        "validate": {"r": [0.5, 1.0], "eps_ratio": 0.5},
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrcert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"attrcert {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, table in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--profile", choices=sorted(PROFILES), help="named settings profile")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, (typ, _default, helptext) in table.items():
            if name == "validate" and key == "gap_report":
                p.add_argument("--gap-report", dest=key, nargs="?", const="", default=None,
                               type=str, help=helptext)
                continue
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                           help=helptext)
    return parser


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_value(x) for x in v)
    return str(v)


def resolve(command: str, ns: argparse.Namespace) -> dict:
    table = COMMANDS[command]
    cfg = {key: spec[1] for key, spec in table.items()}
    if ns.profile:
        prof = {**PROFILES[ns.profile]["common"], **PROFILES[ns.profile].get(command, {})}
        cfg.update({k: v for k, v in prof.items() if k in table})
    if ns.config:
        for key, text in read_config_file(ns.config).items():
            if key not in table:
                raise UsageError(f"unknown setting {key!r} for {command}")
            try:
                cfg[key] = table[key][0](text) if text != "" else None
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
    for key in table:
        v = getattr(ns, key, None)
        if v is not None:
            cfg[key] = v
    if command == "validate" and cfg.get("gap_report") == "":
        cfg["gap_report"] = str(cfg["out"]) + ".gaps.csv" if cfg.get("out") else None
    return cfg


def config_text(command: str, cfg: dict) -> str:
    lines = [f"command = {command}", f"code_version = {__version__}"]
    lines += [f"{k} = {_fmt_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def _run_id(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_sidecar(command: str, cfg: dict) -> str:
    text = config_text(command, cfg)
    Path(str(cfg["out"]) + ".config").write_text(text, encoding="utf-8")
    return _run_id(text)


def load_data(cfg: dict) -> Dataset:
    spec = cfg["data"]
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        return synth_dataset(rest, cfg["d"], cfg["classes"], cfg["per_class"], cfg["noise"],
                             cfg["data_seed"])
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise UsageError("idx data needs idx:IMAGES,LABELS")
        return load_idx(parts[0], parts[1], cfg["limit"], cfg["classes"])
    raise UsageError(f"unknown data source {spec!r}")


def _attr_cfg(cfg: dict) -> AttributionConfig:
    try:
        return AttributionConfig(method=cfg["method"], target=cfg["target"], ig_steps=cfg["ig_steps"],
                                 wrt=cfg["wrt"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _m_bound(w, acfg: AttributionConfig, cfg: dict, pad: float):
    try:
        kwargs = parse_m_strategy(cfg["m_strategy"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return attribution_upper_bound(w, acfg, pad=pad, **kwargs)


def _pool_map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _samples(cfg: dict, data: Dataset) -> Dataset:
    n = cfg["samples"]
    if n is None or n < 0:
        raise UsageError("--samples must be >= 0")
    return data.head(n)


# train ---------------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    _require(cfg, "out")
    data = load_data(cfg)
    _write_sidecar("train", cfg)
    try:
        w = train(data, cfg["arch"], cfg["activation"], cfg["lr"], cfg["epochs"], cfg["batch_size"],
                  cfg["seed"], cfg["model_softplus_beta"])
    except StructureError as exc:
        raise UsageError(str(exc)) from None
    save_model(w, cfg["out"])
    print(f"train accuracy {accuracy(w, data):.4f} on {len(data)} samples; "
          f"model {cfg['out']} {model_digest(w)}")
    return EXIT_OK


# certify / sweep -------------------------------------------------------------

def _smooth_job(args):
    w, x, acfg, r, n, seed = args
    sa = smooth_uniform(w, x, acfg, SmoothingConfig(r, n, seed))
    return sa


def _certify_rows(cfg: dict, run_id: str, w, data: Dataset) -> list[ResultRow]:
    acfg = _attr_cfg(cfg)
    kind = cfg["kind"]
    if kind not in ("T", "max_eps", "min_radius"):
        raise UsageError(f"--kind must be T, max_eps or min_radius, got {kind!r}")
    r = cfg["r"]
    mb = _m_bound(w, acfg, cfg, pad=r)
    d = w.input_dim
    jobs = [(w, x, acfg, r, cfg["n"], cfg["seed"]) for x in data.X]
    smoothed = _pool_map(_smooth_job, jobs, cfg["workers"])
    rows = []
    for i, sa in enumerate(smoothed):
        norm_h = sa.norm2
        base = dict(run_id=run_id, sample_index=i, norm_h=norm_h, M=mb.value,
                    m_strategy=mb.provenance, n_samples=sa.sample_count, smooth_seed=cfg["seed"])
        if kind == "T":
            c = bound_T(d, r, cfg["eps"], norm_h, mb.value, mb.provenance)
            row = ResultRow(kind="bound_T", r=r, epsilon=cfg["eps"], value=c.value,
                            vU_over_vS=c.vU_over_vS, feasible=c.feasible, reason=c.reason, **base)
            if cfg["prob_interval"] is not None and c.feasible and cfg["eps"] > 0 and sa.sample_count >= 2:
                pb = probabilistic_interval(sa, d, r, cfg["eps"], mb.value, cfg["prob_interval"],
                                            cfg["mc_samples"], seed=cfg["seed"] + 1)
                row.t1, row.t2 = pb.t1, pb.t2
        elif kind == "max_eps":
            c = max_epsilon(d, r, norm_h, mb.value, cfg["threshold"], mb.provenance)
            row = ResultRow(kind="max_epsilon", r=r, epsilon=c.epsilon, threshold_T=cfg["threshold"],
                            value=c.value, vU_over_vS=c.vU_over_vS, feasible=c.feasible,
                            reason=c.reason, **base)
        else:
            c = min_radius(d, cfg["eps"], norm_h, mb.value, cfg["threshold"], mb.provenance)
            row = ResultRow(kind="min_radius", r=c.value, epsilon=cfg["eps"],
                            threshold_T=cfg["threshold"], value=c.value, vU_over_vS=c.vU_over_vS,
                            feasible=c.feasible, reason=c.reason, **base)
        rows.append(row)
    return rows


def _load_inputs(cfg: dict):
    _require(cfg, "model", "out")
    if cfg["format"] not in ("csv", "jsonl", "json_lines"):
        raise UsageError(f"--format must be csv or jsonl, got {cfg['format']!r}")
    data = load_data(cfg)
    w = load_model(cfg["model"])
    if w.input_dim != data.d:
        raise UsageError(f"model input dim {w.input_dim} does not match data dim {data.d}")
    return w, _samples(cfg, data)


def cmd_certify(cfg: dict) -> int:
    w, data = _load_inputs(cfg)
    run_id = _write_sidecar("certify", cfg)
    rows = _certify_rows(cfg, run_id, w, data)
    emit_results(rows, cfg["format"], cfg["out"])
    feasible = sum(r.feasible for r in rows)
    print(f"certify: {len(rows)} rows ({feasible} feasible) -> {cfg['out']}")
    return EXIT_OK


def _mean_or_none(values: list) -> float | None:
    if not values or any(v is None for v in values):
        return None
    return float(np.mean(values))


def cmd_sweep(cfg: dict) -> int:
    w, data = _load_inputs(cfg)
    mode = cfg["mode"]
    if mode not in ("r_eps", "r_T", "eps_T"):
        raise UsageError(f"--mode must be r_eps, r_T or eps_T, got {mode!r}")
    run_id = _write_sidecar("sweep", cfg)
    acfg = _attr_cfg(cfg)
    d = w.input_dim
    n_samples = len(data)
    cells: dict = {}
    rows: list[ResultRow] = []

    def smoothed_norms(r):
        jobs = [(w, x, acfg, r, cfg["n"], cfg["seed"]) for x in data.X]
        return [sa.norm2 for sa in _pool_map(_smooth_job, jobs, cfg["workers"])]

    def add(row_key, col_key, kind, r, eps, thr, certs, mb, norms):
        vals = [c.value if c.feasible else None for c in certs]
        mean = _mean_or_none(vals)
        cells[(row_key, col_key)] = mean
        rows.append(ResultRow(run_id=run_id, kind=kind, r=r, epsilon=eps, threshold_T=thr,
                              value=mean, norm_h=_mean_or_none(norms), M=mb.value,
                              m_strategy=mb.provenance, feasible=mean is not None,
                              n_samples=n_samples, smooth_seed=cfg["seed"],
                              reason="" if mean is not None else "infeasible for at least one sample"))

    if mode == "r_eps":
        row_keys, col_keys, label = cfg["eps_grid"], cfg["r_grid"], "epsilon\\r"
        for r in (cfg["r_grid"] if cfg["eps_grid"] else []):
            mb = _m_bound(w, acfg, cfg, pad=r)
            norms = smoothed_norms(r)
            for eps in cfg["eps_grid"]:
                certs = [bound_T(d, r, eps, nh, mb.value, mb.provenance) for nh in norms]
                add(eps, r, "bound_T", r, eps, None, certs, mb, norms)
    elif mode == "r_T":
        row_keys, col_keys, label = cfg["t_grid"], cfg["r_grid"], "T\\r"
        for r in (cfg["r_grid"] if cfg["t_grid"] else []):
            mb = _m_bound(w, acfg, cfg, pad=r)
            norms = smoothed_norms(r)
            for t in cfg["t_grid"]:
                certs = [max_epsilon(d, r, nh, mb.value, t, mb.provenance) for nh in norms]
                add(t, r, "max_epsilon", r, None, t, certs, mb, norms)
    else:
        row_keys, col_keys, label = cfg["t_grid"], cfg["eps_grid"], "T\\epsilon"
        if cfg["t_grid"] and cfg["eps_grid"]:
            mb = _m_bound(w, acfg, cfg, pad=cfg["r"])
            norms = smoothed_norms(cfg["r"])
            for eps in cfg["eps_grid"]:
                for t in cfg["t_grid"]:
                    certs = [min_radius(d, eps, nh, mb.value, t, mb.provenance) for nh in norms]
                    add(t, eps, "min_radius", None, eps, t, certs, mb, norms)
    if not n_samples:
        rows, cells = [], {}
    emit_results(rows, cfg["format"], cfg["out"])
    if cfg["pivot"]:
        write_table(cfg["pivot"], label, row_keys if rows else [], col_keys if rows else [], cells)
    print(f"sweep {mode}: {len(rows)} cells -> {cfg['out']}")
    return EXIT_OK


# attack / validate -----------------------------------------------------------

def _attack_seed(base: int, sample: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base, sample, repeat]).generate_state(1)[0])


def _attack_cfg(cfg: dict, eps: float, r: float | None, target: str) -> AttackConfig:
    try:
        return AttackConfig(
            epsilon=eps, iterations=cfg["iterations"], step_size=cfg["step"], k=cfg["k"],
            target=target, nstar=cfg["nstar"], r=r, smooth_seed=cfg["attack_smooth_seed"],
            grad_mode=cfg["grad_mode"], fd_step=cfg["fd_step"],
            directions_per_iter=cfg["directions"], softplus=cfg["softplus"],
            softplus_beta=cfg["softplus_beta"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _attack_job(args):
    w, x, acfg, atk, seeds = args
    return [ifia_l2_attack(w, x, acfg, atk, seed=s) for s in seeds]


def cmd_attack(cfg: dict) -> int:
    w, data = _load_inputs(cfg)
    run_id = _write_sidecar("attack", cfg)
    acfg = _attr_cfg(cfg)
    target = cfg["target_kind"]
    atk = _attack_cfg(cfg, cfg["eps"], cfg["r"] if target == "smoothed" else None, target)
    jobs = [(w, x, acfg, atk, [_attack_seed(cfg["attack_seed"], i, j) for j in range(cfg["repeats"])])
            for i, x in enumerate(data.X)]
    results = _pool_map(_attack_job, jobs, cfg["workers"])
    rows = []
    for i, per_sample in enumerate(results):
        for j, res in enumerate(per_sample):
            rows.append(ResultRow(
                run_id=run_id, sample_index=i, repeat=j, kind="attack",
                r=atk.r, epsilon=atk.epsilon, topk=res.topk_intersection, kendall=res.kendall,
                cosine=res.cosine, delta_norm=res.delta_norm,
                prediction_preserved=res.prediction_preserved,
                n_samples=atk.nstar if target == "smoothed" else None,
                smooth_seed=atk.smooth_seed if target == "smoothed" else None,
                attack_seed=_attack_seed(cfg["attack_seed"], i, j),
            ))
    emit_results(rows, cfg["format"], cfg["out"])
    print(f"attack: {len(rows)} rows -> {cfg['out']}")
    return EXIT_OK


def _validate_job(args):
    w, x, acfg, atk, r, n, seed, seeds = args
    sa = smooth_uniform(w, x, acfg, SmoothingConfig(r, n, seed))
    out = []
    for s in seeds:
        res = ifia_l2_attack(w, x, acfg, atk, seed=s)
        sa_adv = smooth_uniform(w, res.x_adv, acfg, SmoothingConfig(r, n, seed), target=sa.target)
        h0, h1 = sa.estimate, sa_adv.estimate
        k = atk.k if atk.k is not None else max(1, h0.size // 8)
        out.append((res, cosine_similarity(h0, h1), topk_intersection(h0, h1, k),
                    kendall_correlation(h0, h1)))
    return out


def cmd_validate(cfg: dict) -> int:
    w, data = _load_inputs(cfg)
    radii = cfg["r"]
    eps_list = cfg["eps"] or [cfg["eps_ratio"] * r for r in radii]
    if len(eps_list) != len(radii):
        raise UsageError("--eps must list one budget per radius")
    acfg = _attr_cfg(cfg)
    d = w.input_dim
    threshold = cfg["threshold"]
    pairs = []
    for r, eps in zip(radii, eps_list):
        mb = _m_bound(w, acfg, cfg, pad=r)
        jobs = [(w, x, acfg, r, cfg["n"], cfg["seed"]) for x in data.X]
        smoothed = _pool_map(_smooth_job, jobs, cfg["workers"])
        certs = [bound_T(d, r, eps, sa.norm2, mb.value, mb.provenance) for sa in smoothed]
        if any(not c.feasible for c in certs):
            raise UsageError(f"epsilon={eps} exceeds 2r={2 * r}; nothing to validate")
        if threshold is not None:
            for i, sa in enumerate(smoothed):
                me = max_epsilon(d, r, sa.norm2, mb.value, threshold)
                if me.feasible and eps > me.value:
                    raise UsageError(
                        f"sample {i}: epsilon={eps} exceeds the certified max epsilon {me.value:.6g} "
                        f"for threshold {threshold}; validation against it is not claimed"
                    )
        pairs.append((r, eps, mb, certs))

    run_id = _write_sidecar("validate", cfg)
    rows, gaps, violations = [], [], []
    for r, eps, mb, certs in pairs:
        atk = _attack_cfg(cfg, eps, r, "smoothed")
        jobs = [(w, x, acfg, atk, r, cfg["n"], cfg["seed"],
                 [_attack_seed(cfg["attack_seed"], i, j) for j in range(cfg["repeats"])])
                for i, x in enumerate(data.X)]
        results = _pool_map(_validate_job, jobs, cfg["workers"])
        for i, (cert, per_sample) in enumerate(zip(certs, results)):
            bound = cert.value if threshold is None else threshold
            cosines = []
            for j, (res, cos, topk, kend) in enumerate(per_sample):
                cosines.append(cos)
                seed_j = _attack_seed(cfg["attack_seed"], i, j)
                rows.append(ResultRow(
                    run_id=run_id, sample_index=i, repeat=j, kind="validate", r=r, epsilon=eps,
                    threshold_T=threshold, value=cert.value, norm_h=cert.norm_h, M=mb.value,
                    m_strategy=mb.provenance, feasible=cert.feasible, vU_over_vS=cert.vU_over_vS,
                    topk=topk, kendall=kend, cosine=cos, delta_norm=res.delta_norm,
                    prediction_preserved=res.prediction_preserved, n_samples=cfg["n"],
                    smooth_seed=cfg["seed"], attack_seed=seed_j,
                ))
                if not cos >= bound:
                    violations.append((r, eps, i, j, seed_j, cos, bound))
            if cosines:
                gaps.append((min(cosines) - bound, r, eps, i, bound, min(cosines)))
    emit_results(rows, cfg["format"], cfg["out"])
    if cfg["gap_report"]:
        gaps.sort(key=lambda g: (g[0], g[1], g[3]))
        lines = ["r,epsilon,sample_index,bound,min_cosine,gap"]
        lines += [",".join([format_float(r), format_float(e), str(i), format_float(b), format_float(c),
                            format_float(g)]) for g, r, e, i, b, c in gaps]
        Path(cfg["gap_report"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
    n_attacks = len(rows)
    if violations:
        print(f"validate: {len(violations)} certificate violation(s) in {n_attacks} attacks", file=sys.stderr)
        for r, eps, i, j, s, cos, bound in violations:
            print(f"  r={r!r} eps={eps!r} sample={i} repeat={j} attack_seed={s} "
                  f"cosine={cos!r} < bound={bound!r}", file=sys.stderr)
        print("reproduce with:\n" + config_text("validate", cfg), file=sys.stderr)
        return EXIT_VIOLATION
    min_gap = min((g[0] for g in gaps), default=math.nan)
    print(f"validate: {n_attacks} attacks, 0 violations, smallest gap {min_gap:.6g} -> {cfg['out']}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "certify": cmd_certify,
    "sweep": cmd_sweep,
    "attack": cmd_attack,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except UsageError as exc:
        print(f"attrcert {ns.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"attrcert {ns.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ModelLoadError, IdxParseError, OSError, ValueError, ArithmeticError) as exc:
        print(f"attrcert {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
