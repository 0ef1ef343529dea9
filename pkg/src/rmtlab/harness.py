"""Experiment orchestration: manifests, seeded execution, persistence.

A manifest is a JSON object naming an experiment kind plus its
configuration; :func:`run` validates it, executes the experiment, appends
line-delimited result rows to ``results.jsonl`` (one JSON object per row,
bound to the manifest by a content hash), and writes ``summary.csv`` and
two-to-three-column plot files.  Identical (manifest, seed) pairs produce
identical rows apart from wall times; reductions are order-independent so
the worker count never changes statistics.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dbm as dbm_mod
from . import eigenvectors as ev
from . import ensembles as ens
from . import locallaw as ll
from . import matching as mt
from . import observables as obs_mod
from . import resolvents as rv
from . import semicircle as sc
from .errors import ConfigError

__all__ = ["EXPERIMENT_KINDS", "validate_manifest", "manifest_hash", "run", "summarize"]

EXPERIMENT_KINDS = (
    "sample",
    "locallaw",
    "eth",
    "que",
    "gft",
    "dbm",
    "matching",
    "identities",
)


def _expect(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _ensemble_spec(block, path="ensemble"):
    _expect(isinstance(block, dict), path, "must be an object")
    known = {"n", "beta", "offdiag", "diag", "seed"}
    for key in block:
        _expect(key in known, f"{path}.{key}", "unknown field")
    _expect("n" in block, f"{path}.n", "required")
    try:
        return ens.EnsembleSpec(
            n=int(block["n"]),
            beta=int(block.get("beta", 1)),
            offdiag=block.get("offdiag", "gaussian"),
            diag=block.get("diag", "gaussian"),
            seed=int(block.get("seed", 0)),
        )
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _observable(block, n, path="observable"):
    block = dict(block or {"family": "alpha", "alpha": 1.0})
    family = block.get("family", "alpha")
    if family == "alpha":
        return obs_mod.alpha_mesoscopic(n, float(block.get("alpha", 1.0)),
                                        seed=int(block.get("seed", 1234)))
    if family == "projector":
        size = int(block.get("set_size", max(1, n // 10)))
        return obs_mod.coordinate_projector(n, range(size))
    if family == "rank2_diff":
        diag = np.zeros(n)
        diag[0], diag[1] = 1.0, -1.0
        return obs_mod.traceless(np.diag(diag))
    raise ConfigError(f"{path}.family: unknown family {family!r}")


_DEFAULTS = {
    "sample": {"moments": 4},
    "locallaw": {"etas": None, "energies": [0.0], "ks": [1], "alphas": [1.0],
                 "samples_per_cell": 10, "regime": "bulk", "epsilon": 0.1,
                 "mode": "averaged"},
    "eth": {"delta": 0.1, "seeds": 10, "alphas": [1.0]},
    "que": {"delta": 0.1, "samples": 1000, "per_matrix": 8, "rank_exponent": 0.99},
    "gft": {"moments": [2, 4], "samples": 1000, "per_matrix": 8, "delta": 0.1},
    "dbm": {"t_final": 0.1, "steps": 10, "method": "matrix-diagonalize",
            "runs": 10, "xi": 0.3, "save_trajectories": False},
    "matching": {"variant": "calculus", "n_particles": 1, "ell": 3, "delta": 0.1,
                 "replicas": 1000, "slices": 24, "t_final": 0.05,
                 "n_paths": 5, "sites_per_path": 8},
    "identities": {"sizes": [50, 100], "samples": 10,
                   "zs": [[0.0, 1.0], [1.5, 0.1], [-0.7, 0.03]]},
}


def validate_manifest(manifest, kind=None) -> dict:
    """Normalize a manifest: check kind, apply defaults, validate fields.

    Raises :class:`ConfigError` naming the offending field path.
    """
    _expect(isinstance(manifest, dict), "manifest", "must be a JSON object")
    m = dict(manifest)
    m_kind = m.get("kind", kind)
    _expect(m_kind is not None, "kind", "required")
    _expect(m_kind in EXPERIMENT_KINDS, "kind",
            f"unknown experiment kind {m_kind!r}; expected one of {EXPERIMENT_KINDS}")
    if kind is not None and m_kind != kind:
        raise ConfigError(f"kind: manifest says {m_kind!r} but the command is {kind!r}")
    m["kind"] = m_kind
    m.setdefault("seed", 0)
    _expect(isinstance(m["seed"], int), "seed", "must be an integer")
    m.setdefault("workers", 1)
    if m_kind != "matching" or m.get("config", {}).get("variant") != "calculus":
        _expect("ensemble" in m, "ensemble", "required")
    if "ensemble" in m:
        _ensemble_spec(m["ensemble"])  # validation only; built per use
    cfg = dict(_DEFAULTS[m_kind])
    user_cfg = m.get("config", {})
    _expect(isinstance(user_cfg, dict), "config", "must be an object")
    for key, val in user_cfg.items():
        _expect(key in cfg, f"config.{key}", f"unknown field for kind {m_kind!r}")
        cfg[key] = val
    m["config"] = cfg
    return m


def manifest_hash(manifest) -> str:
    core = {k: v for k, v in manifest.items() if k not in ("workers", "out")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _row(mhash, cell, stat, value, mc_err=None, seed=0, t0=None):
    return {
        "manifest": mhash,
        "cell": cell,
        "stat": stat,
        "value": None if value is None else float(value),
        "mc_err": None if mc_err is None else float(mc_err),
        "seed": int(seed),
        "wall_time": round(time.perf_counter() - t0, 6) if t0 else 0.0,
    }


# --- experiment implementations ----------------------------------------------


def _exp_sample(m, mhash):
    t0 = time.perf_counter()
    spec = _ensemble_spec(m["ensemble"])
    sample = ens.sample_wigner(spec, rng=ens.stream_rng(m["seed"]))
    iu = np.triu_indices(spec.n, k=1)
    offdiag = sample.matrix[iu]
    rows = []
    for order in range(1, m["config"]["moments"] + 1):
        val = float(np.mean((offdiag * math.sqrt(spec.n)) ** order).real)
        rows.append(_row(mhash, f"moment_{order}", "entry_moment", val, seed=m["seed"], t0=t0))
    lam = np.linalg.eigvalsh(sample.matrix)
    ks = float(np.max(np.abs(np.arange(1, spec.n + 1) / spec.n - sc.semicircle_cdf(np.sort(lam)))))
    rows.append(_row(mhash, "spectrum", "semicircle_ks", ks, seed=m["seed"], t0=t0))
    summary = {"kind": "sample", "semicircle_ks": ks}
    plots = {"spectrum": (np.sort(lam), sc.semicircle_cdf(np.sort(lam)), None)}
    return rows, summary, plots


def _exp_identities(m, mhash):
    t0 = time.perf_counter()
    cfg = m["config"]
    spec0 = _ensemble_spec(m["ensemble"])
    rows = []
    worst_ward = worst_under = 0.0
    for n in cfg["sizes"]:
        spec = ens.EnsembleSpec(n=int(n), beta=spec0.beta, offdiag=spec0.offdiag,
                                diag=spec0.diag, seed=spec0.seed)
        for s in range(cfg["samples"]):
            sample = ens.sample_wigner(spec, rng=ens.stream_rng(m["seed"], n, s))
            eig = rv.eigendecompose(sample)
            for re_z, im_z in cfg["zs"]:
                z = complex(re_z, im_z)
                g2 = float(np.max(np.abs(1.0 / (eig.lambdas - z)))) ** 2
                wres = rv.ward_residual(eig, z) / g2
                ures = rv.underline_identity_residual(sample, z) / g2
                worst_ward = max(worst_ward, wres)
                worst_under = max(worst_under, ures)
                cell = f"n={n},z={re_z}+{im_z}j"
                rows.append(_row(mhash, cell, "ward_residual_rel", wres, seed=s, t0=t0))
                rows.append(_row(mhash, cell, "underline_residual_rel", ures, seed=s, t0=t0))
    summary = {"kind": "identities", "worst_ward": worst_ward,
               "worst_underline": worst_under, "bound": 1e-12}
    return rows, summary, {}


def _locallaw_chunk(args):
    cfg_kw, seed, chunk = args
    cfg = ll.SweepConfig(**cfg_kw)
    recs = ll.run_error_sweep(cfg, seed, seed_subset=chunk)
    return [asdict(r) for r in recs]


def _exp_locallaw(m, mhash, workers=1):
    t0 = time.perf_counter()
    cfg_block = m["config"]
    spec = _ensemble_spec(m["ensemble"])
    n = spec.n
    etas = cfg_block["etas"] or [n**-0.9, n**-0.6, n**-0.3]
    cfg_kw = dict(
        ns=(n,),
        etas=tuple(float(e) for e in etas),
        energies=tuple(float(e) for e in cfg_block["energies"]),
        ks=tuple(int(k) for k in cfg_block["ks"]),
        alphas=tuple(cfg_block["alphas"]),
        samples_per_cell=int(cfg_block["samples_per_cell"]),
        regime=cfg_block["regime"],
        epsilon=float(cfg_block["epsilon"]),
        mode=cfg_block["mode"],
        ensemble="gaussian" if spec.is_gaussian else spec.offdiag,
    )
    cfg = ll.SweepConfig(**cfg_kw)
    seeds = list(range(cfg.samples_per_cell))
    if workers > 1:
        chunks = [seeds[i::workers] for i in range(workers) if seeds[i::workers]]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_locallaw_chunk, [(cfg_kw, m["seed"], c) for c in chunks]))
        recs = [ll.ErrorRecord(**d) for part in parts for d in part]
        recs.sort(key=lambda r: (r.cell, r.seed))
    else:
        recs = ll.run_error_sweep(cfg, seed=m["seed"])
    rows = []
    for r in recs:
        cell = f"k={r.k},alpha={r.alpha},E={r.energy},eta={r.eta:.6g}"
        if r.skipped:
            rows.append(_row(mhash, cell, "skipped", None, seed=r.seed, t0=t0))
            continue
        rows.append(_row(mhash, cell, "error", r.statistic, seed=r.seed, t0=t0))
        rows.append(_row(mhash, cell, "ratio", r.ratio, seed=r.seed, t0=t0))
        rows.append(_row(mhash, cell, "psi", r.psi, seed=r.seed, t0=t0))
    summary = {"kind": "locallaw", "cells": len(set(r.cell for r in recs))}
    plots = {}
    live = [r for r in recs if not r.skipped]
    if len(set(r.eta for r in live)) >= 4:
        for (k, alpha) in sorted(set((r.k, str(r.alpha)) for r in live)):
            sub = [r for r in live if r.k == k and str(r.alpha) == alpha]
            try:
                slope, err = ll.fit_scaling_exponent(sub, "eta")
                summary[f"eta_slope,k={k},alpha={alpha}"] = (slope, err)
            except ValueError:
                pass
    if len(set(str(r.alpha) for r in live if r.alpha != "identity")) >= 3:
        rep = ll.rank_uniformity_report(live)
        summary["rank_uniformity_score"] = rep["score"]
    by_eta = {}
    for r in live:
        by_eta.setdefault(r.eta, []).append(r.statistic)
    if by_eta:
        xs = np.array(sorted(by_eta))
        med = np.array([np.median(by_eta[x]) for x in xs])
        spread = np.array([np.std(by_eta[x]) for x in xs])
        plots["error_vs_eta"] = (xs, med, spread)
    return rows, summary, plots


def _exp_eth(m, mhash):
    t0 = time.perf_counter()
    cfg = m["config"]
    spec = _ensemble_spec(m["ensemble"])
    rows = []
    stats = {}
    for alpha in cfg["alphas"]:
        observable = _observable({"family": "alpha", "alpha": alpha}, spec.n)
        vals = []
        for s in range(cfg["seeds"]):
            sample = ens.sample_wigner(spec, rng=ens.stream_rng(m["seed"], s))
            eig = rv.eigendecompose(sample)
            ov = ev.overlap_matrix(eig, observable, delta=cfg["delta"])
            stat = ev.eth_statistic(ov)
            vals.append(stat)
            rows.append(_row(mhash, f"alpha={alpha}", "eth_statistic", stat, seed=s, t0=t0))
        stats[alpha] = vals
    threshold = spec.n**0.2
    summary = {"kind": "eth", "threshold_N^0.2": threshold}
    for alpha, vals in stats.items():
        summary[f"median,alpha={alpha}"] = float(np.median(vals))
        summary[f"pass_rate,alpha={alpha}"] = float(np.mean(np.array(vals) <= threshold))
    return rows, summary, {}


def _exp_que(m, mhash):
    t0 = time.perf_counter()
    cfg = m["config"]
    spec = _ensemble_spec(m["ensemble"])
    observable = _observable(m.get("observable"), spec.n)
    q = ev.que_samples(spec, observable, cfg["samples"], delta=cfg["delta"],
                       per_matrix=cfg["per_matrix"], seed=m["seed"],
                       rank_exponent=cfg["rank_exponent"])
    target = spec.n / (spec.n + 2) if spec.beta == 1 else 1.0
    rep = ev.normality_tests(q.values, variance_target=target)
    rows = [
        _row(mhash, "pooled", "ks_distance", rep.ks, seed=m["seed"], t0=t0),
        _row(mhash, "pooled", "variance_ratio", rep.variance_ratio, seed=m["seed"], t0=t0),
    ]
    for entry in rep.moment_table():
        rows.append(_row(mhash, f"moment_{entry['order']}", "moment",
                         entry["value"], entry["mc_err"], seed=m["seed"], t0=t0))
    summary = {"kind": "que", "count": rep.count, "ks": rep.ks,
               "variance_ratio": rep.variance_ratio,
               "effective_rank_ok": q.effective_rank_ok,
               "moment_table": rep.moment_table()}
    hist, edges = np.histogram(q.values, bins=40, density=True)
    centers = (edges[1:] + edges[:-1]) / 2
    plots = {"que_histogram": (centers, hist, None)}
    return rows, summary, plots


def _exp_gft(m, mhash):
    t0 = time.perf_counter()
    cfg = m["config"]
    spec_a = _ensemble_spec(m["ensemble"])
    _expect("ensemble_b" in m, "ensemble_b", "gft needs a second ensemble")
    spec_b = _ensemble_spec(m["ensemble_b"], path="ensemble_b")
    observable = _observable(m.get("observable"), spec_a.n)
    rows_out = []
    table = ev.two_ensemble_comparison(
        spec_a, spec_b, observable, tuple(cfg["moments"]),
        delta=cfg["delta"], n_samples=cfg["samples"],
        per_matrix=cfg["per_matrix"], seed=m["seed"],
    )
    for entry in table:
        cell = f"moment_{entry['moment']}"
        rows_out.append(_row(mhash, cell, "diff", entry["diff"], entry["mc_err"],
                             seed=m["seed"], t0=t0))
        rows_out.append(_row(mhash, cell, "value_a", entry["value_a"], seed=m["seed"], t0=t0))
        rows_out.append(_row(mhash, cell, "value_b", entry["value_b"], seed=m["seed"], t0=t0))
    summary = {"kind": "gft", "table": table}
    return rows_out, summary, {}


def _exp_dbm(m, mhash):
    t0 = time.perf_counter()
    cfg = m["config"]
    spec = _ensemble_spec(m["ensemble"])
    rows = []
    passes = 0
    worsts = []
    out_dir = m.get("out")
    for s in range(cfg["runs"]):
        w0 = ens.sample_wigner(spec, rng=ens.stream_rng(m["seed"], s))
        traj = dbm_mod.simulate_trajectory(
            w0, float(cfg["t_final"]), int(cfg["steps"]), method=cfg["method"],
            seed=m["seed"] * 65_537 + s, keep_vectors=False, check_weyl=False,
        )
        ok, worst = dbm_mod.rigidity_check(traj, float(cfg["xi"]))
        passes += bool(ok)
        worsts.append(worst)
        rows.append(_row(mhash, f"run_{s}", "rigidity_worst", worst, seed=s, t0=t0))
        rows.append(_row(mhash, f"run_{s}", "rigidity_pass", float(ok), seed=s, t0=t0))
        if cfg["save_trajectories"] and out_dir:
            dbm_mod.save_trajectory(traj, Path(out_dir) / f"trajectory_{s}.bin")
    summary = {"kind": "dbm", "pass_rate": passes / cfg["runs"],
               "threshold": spec.n ** float(cfg["xi"]),
               "worst_median": float(np.median(worsts))}
    return rows, summary, {}


def _exp_matching(m, mhash):
    t0 = time.perf_counter()
    cfg = m["config"]
    variant = cfg["variant"]
    rows = []
    if variant == "calculus":
        n_sites = int(m.get("ensemble", {}).get("n", 20))
        lam = sc.quantiles(n_sites)
        checks = {}
        for kind, n, params in (("B", 1, None), ("L", 2, None),
                                ("S", 2, {"ell": cfg["ell"], "delta": cfg["delta"]})):
            op = mt.build_generator(lam, kind, n, params)
            checks[f"rowsum_{kind}"] = float(np.abs(op.matrix.sum(axis=1)).max())
        l_op = mt.build_generator(lam, "L", 2)
        pi = l_op.measure()
        sym = pi[:, None] * l_op.matrix.toarray()
        checks["pi_reversibility"] = float(np.max(np.abs(sym - sym.T)))
        for name, val in checks.items():
            rows.append(_row(mhash, "calculus", name, val, seed=m["seed"], t0=t0))
        summary = {"kind": "matching", "variant": variant, **checks}
        return rows, summary, {}
    spec = _ensemble_spec(m["ensemble"])
    observable = _observable(m.get("observable"), spec.n)
    if variant == "pde":
        w0 = ens.sample_wigner(spec, rng=ens.stream_rng(m["seed"]))
        traj = dbm_mod.simulate_trajectory(w0, float(cfg["t_final"]), int(cfg["slices"]),
                                           seed=m["seed"] + 1, keep_vectors=True)
        out = mt.pde_residual_check(traj, observable, int(cfg["replicas"]), seed=m["seed"] + 2)
        rows.append(_row(mhash, "pde", "fraction_within_2se",
                         out["fraction_within"], seed=m["seed"], t0=t0))
        summary = {"kind": "matching", "variant": variant,
                   "fraction_within": out["fraction_within"]}
        return rows, summary, {}
    if variant == "flucque":
        out = mt.flucque_experiment(
            spec, observable, int(cfg["n_particles"]), float(cfg["t_final"]),
            n_paths=int(cfg["n_paths"]), replicas=int(cfg["replicas"]),
            sites_per_path=int(cfg["sites_per_path"]), slices=int(cfg["slices"]),
            delta=cfg["delta"], seed=m["seed"],
        )
        rows.append(_row(mhash, "flucque", "f_pooled", out["f_pooled"],
                         out["stderr"], seed=m["seed"], t0=t0))
        rows.append(_row(mhash, "flucque", "deviation", out["deviation"], seed=m["seed"], t0=t0))
        summary = {"kind": "matching", "variant": variant,
                   "f_pooled": out["f_pooled"], "deviation": out["deviation"],
                   "stderr": out["stderr"], "paths": out["paths_used"]}
        return rows, summary, {}
    raise ConfigError(f"config.variant: unknown matching variant {variant!r}")


_REGISTRY = {
    "sample": _exp_sample,
    "identities": _exp_identities,
    "eth": _exp_eth,
    "que": _exp_que,
    "gft": _exp_gft,
    "dbm": _exp_dbm,
    "matching": _exp_matching,
}


def run(manifest, out_dir=None, workers=None, kind=None):
    """Validate and execute a manifest; persist rows, summary and plot data.

    Returns ``(rows, summary)``.  ``results.jsonl`` is append-only; a rerun
    adds rows carrying the same manifest hash rather than rewriting history.
    """
    m = validate_manifest(manifest, kind=kind)
    if workers is not None:
        m["workers"] = int(workers)
    env_workers = os.environ.get("RMTLAB_WORKERS")
    if env_workers:
        m["workers"] = int(env_workers)
    if out_dir is not None:
        m["out"] = str(out_dir)
    mhash = manifest_hash(m)
    if m["kind"] == "locallaw":
        rows, summary, plots = _exp_locallaw(m, mhash, workers=m["workers"])
    else:
        rows, summary, plots = _REGISTRY[m["kind"]](m, mhash)
    summary["manifest_hash"] = mhash
    out = m.get("out")
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.jsonl", "a") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        _write_summary_csv(out / "summary.csv", summary)
        with open(out / "manifest.json", "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True, default=str)
        for name, (xs, ys, yerr) in plots.items():
            _write_plot(out / f"plot_{name}.csv", xs, ys, yerr)
    return rows, summary


def _write_summary_csv(path, summary):
    with open(path, "w") as fh:
        fh.write("key,value\n")
        for key, val in sorted(summary.items()):
            fh.write(f"{key},{json.dumps(val, default=str)}\n".replace("\n\n", "\n"))


def _write_plot(path, xs, ys, yerr):
    with open(path, "w") as fh:
        fh.write("x,y,yerr\n")
        for i in range(len(xs)):
            e = "" if yerr is None else f"{yerr[i]:.10g}"
            fh.write(f"{xs[i]:.10g},{ys[i]:.10g},{e}\n")


def summarize(rows, kind=None):
    """Fixed-schema summaries from persisted rows (list of row dicts)."""
    if not rows:
        return {"warning": "no rows"}
    by_stat = {}
    for row in rows:
        by_stat.setdefault(row["stat"], []).append(row)
    out = {"rows": len(rows), "stats": {}}
    for stat, group in sorted(by_stat.items()):
        vals = [r["value"] for r in group if r["value"] is not None]
        if not vals:
            continue
        out["stats"][stat] = {
            "count": len(vals),
            "median": float(np.median(vals)),
            "mean": float(np.mean(vals)),
            "max": float(np.max(vals)),
        }
    return out
