"""Experiment orchestration: single adaptation runs and ablation sweeps.

`run_adaptation` is the one entry point that turns a flat JSON-able config
into an adaptation run with metrics; the CLI and the sweep driver both call
it so a sweep cell is exactly one CLI `adapt` invocation.
"""

from __future__ import annotations

import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adapt as adapt_mod
from . import vit
from .metrics import MetricsRecord, append_records, completed_hashes, config_hash
from .ot import SinkhornConfig
from .synth import load_dataset

SWEEP_AXES = ("lambda", "prompt_len", "lr", "epsilon_rel")

# flat config keys with defaults; everything an adapt run needs besides paths
RUN_DEFAULTS = {
    "method": "otvp",
    "lambda": 1e4,
    "prompt_len": 4,
    "lr": 0.1,
    "steps": 50,
    "batch_size": 64,
    "online": False,
    "warmup_fraction": 0.01,
    "warmup_steps": 50,
    "online_steps": 1,
    "seed": 0,
    "epsilon_rel": 0.05,
    "max_iters": 1000,
    "source_cap": 2048,
}


def resolve_config(config: dict) -> dict:
    """Fill defaults and reject unknown keys; paths stay as given."""
    out = dict(RUN_DEFAULTS)
    known = set(RUN_DEFAULTS) | {"ckpt", "bank", "data", "target"}
    unknown = set(config) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    out.update(config)
    for key in ("ckpt", "bank", "data", "target"):
        if key not in out:
            raise ValueError(f"config lacks required key {key!r}")
    return out


def domain_arrays(data_dir, domain: str) -> tuple[np.ndarray, np.ndarray]:
    """All images and labels of one stored domain, splits concatenated in
    manifest order."""
    splits = load_dataset(Path(data_dir) / domain)
    images = np.concatenate([ds.images for ds in splits.values()])
    labels = np.concatenate([ds.labels for ds in splits.values()])
    return images, labels


def set_entropy(params, gamma, images, batch_size=256) -> float:
    """Mean prediction entropy over a whole image set, batched."""
    ent = 0.0
    for lo in range(0, images.shape[0], batch_size):
        chunk = images[lo:lo + batch_size]
        _, _, e = adapt_mod.pseudo_label(params, gamma, chunk)
        ent += e * chunk.shape[0]
    return ent / images.shape[0]


def run_adaptation(config: dict, metrics_path=None) -> dict:
    """Run one adaptation described by a flat config dict.

    Returns a summary dict; per-step metrics go to metrics_path as JSONL
    when given. Accuracy is transductive: the adapted model is scored on
    the same target pool it adapted to.
    """
    cfg = resolve_config(config)
    chash = config_hash(cfg)
    params = vit.load_checkpoint(cfg["ckpt"])
    bank = adapt_mod.load_bank(cfg["bank"])
    images, labels = domain_arrays(cfg["data"], cfg["target"])
    domains = f"{bank.source_id}->{cfg['target']}"
    run_id = f"{cfg['method']}:{domains}:seed{cfg['seed']}:{chash[:8]}"

    acfg = adapt_mod.AdaptationConfig(
        method=cfg["method"], lam=float(cfg["lambda"]),
        prompt_len=int(cfg["prompt_len"]), lr=float(cfg["lr"]),
        steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]),
        online=bool(cfg["online"]), warmup_fraction=float(cfg["warmup_fraction"]),
        warmup_steps=int(cfg["warmup_steps"]), online_steps=int(cfg["online_steps"]),
        seed=int(cfg["seed"]),
        sinkhorn=SinkhornConfig(epsilon_rel=float(cfg["epsilon_rel"]),
                                max_iters=int(cfg["max_iters"])),
        source_cap=int(cfg["source_cap"]))

    before_acc = float(np.mean(vit.predict(params, images) == labels))
    before_ent = set_entropy(params, None, images)

    t0 = time.perf_counter()
    gamma = None
    adapted_params = params
    stream_preds = None
    step_records = []
    method = cfg["method"]
    if method == "none" or acfg.steps == 0:
        if method in ("otvp", "otvp-b", "entropy-prompt", "supervised-oracle"):
            gamma = vit.PromptSet.init(acfg.prompt_len, params.cfg.embed_dim, seed=acfg.seed)
    elif method in ("otvp", "otvp-b"):
        if acfg.online:
            gamma, stream_preds, step_records = adapt_mod.adapt_online(params, bank, images, acfg)
        else:
            gamma, step_records = adapt_mod.adapt_offline(params, bank, images, acfg)
    elif method == "entropy-prompt":
        gamma, step_records = adapt_mod.baseline_entropy_prompt(params, bank, images, acfg)
    elif method == "tent-ln":
        adapted_params, step_records = adapt_mod.baseline_tent_ln(params, images, acfg)
    elif method == "supervised-oracle":
        gamma0 = vit.PromptSet.init(acfg.prompt_len, params.cfg.embed_dim, seed=acfg.seed)
        gamma = vit.fit_prompts_supervised(params, gamma0, images, labels,
                                           steps=acfg.steps, lr=acfg.lr,
                                           batch_size=acfg.batch_size, seed=acfg.seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    wall_ms = (time.perf_counter() - t0) * 1e3

    if stream_preds is not None:
        # online protocol: each batch is scored by the prediction made right
        # after its own update, not re-predicted with the final prompts
        after_acc = float(np.mean(stream_preds == labels))
    else:
        after_acc = float(np.mean(vit.predict(adapted_params, images, gamma) == labels))
    after_ent = set_entropy(adapted_params, gamma, images)

    records = []
    for rec in step_records:
        rec = dict(rec)
        records.append(MetricsRecord(
            run_id=run_id, method=method, domains=domains,
            step=int(rec.pop("step", rec.pop("batch_index", 0))),
            seed=acfg.seed, config_hash=chash,
            ot_value=rec.pop("ot_value", None),
            mean_entropy=rec.pop("entropy", None), extra=rec))
    summary = {
        "run_id": run_id, "method": method, "domains": domains,
        "config_hash": chash, "seed": acfg.seed,
        "accuracy_before": before_acc, "accuracy_after": after_acc,
        "entropy_before": before_ent, "entropy_after": after_ent,
        "steps": len(step_records), "wallclock_ms": wall_ms,
    }
    # the final record echoes the resolved config so a report can be built
    # from the JSONL alone, without the original command line
    records.append(MetricsRecord(
        run_id=run_id, method=method, domains=domains,
        step=len(step_records), seed=acfg.seed, config_hash=chash,
        wallclock_ms=wall_ms, mean_entropy=after_ent, accuracy=after_acc,
        extra={"final": True, "accuracy_before": before_acc,
               "entropy_before": before_ent, "config": cfg}))
    if metrics_path is not None:
        append_records(metrics_path, records)
        if gamma is not None:
            ppath = Path(metrics_path).with_suffix(".prompts")
            vit.save_prompts(ppath, gamma)
            summary["prompts_file"] = str(ppath)
    return summary


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    seeds: tuple
    base: dict

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


def sweep_from_dict(d: dict) -> SweepSpec:
    for key in ("axis", "values", "seeds", "base"):
        if key not in d:
            raise ValueError(f"sweep spec lacks {key!r}")
    return SweepSpec(d["axis"], d["values"], d["seeds"], dict(d["base"]))


def cell_config(spec: SweepSpec, value, seed: int) -> dict:
    cfg = dict(spec.base)
    cfg[spec.axis] = value
    cfg["seed"] = seed
    return resolve_config(cfg)


def _run_cell(cfg: dict, metrics_path: str) -> dict:
    try:
        summary = run_adaptation(cfg, metrics_path)
        return {"status": "ok", **summary}
    except Exception as e:  # cell isolation: a bad cell must not stop the sweep
        return {"status": "failed", "config_hash": config_hash(cfg),
                "error": f"{type(e).__name__}: {e}",
                "traceback": traceback.format_exc()}


def run_sweep(spec: SweepSpec, out_dir, jobs: int = 1, force: bool = False) -> list[dict]:
    """Run the cartesian product values x seeds; one metrics file per cell.

    Completed cells (same config hash, final record present) are skipped
    unless force is set. Returns one result dict per cell in grid order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for value in spec.values:
        for seed in spec.seeds:
            cfg = cell_config(spec, value, seed)
            chash = config_hash(cfg)
            path = out / f"cell-{chash}.jsonl"
            cells.append((cfg, chash, path, value, seed))

    results = [None] * len(cells)
    todo = []
    for i, (cfg, chash, path, value, seed) in enumerate(cells):
        if not force and chash in completed_hashes(path):
            results[i] = {"status": "skipped", "config_hash": chash,
                          "axis_value": value, "seed": seed,
                          "metrics_file": str(path)}
        else:
            if force and path.exists():
                path.unlink()
            todo.append(i)

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {i: pool.submit(_run_cell, cells[i][0], str(cells[i][2]))
                       for i in todo}
            for i, fut in futures.items():
                results[i] = fut.result()
    else:
        for i in todo:
            results[i] = _run_cell(cells[i][0], str(cells[i][2]))

    for i in todo:
        _, chash, path, value, seed = cells[i]
        results[i].update(axis_value=value, seed=seed, metrics_file=str(path))
    return results
