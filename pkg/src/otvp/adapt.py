"""Prompt adaptation by transport alignment, plus baselines.

The loop (offline or online) holds the encoder frozen and moves only the
prompt tokens: each step embeds a target batch, pseudo-labels it with the
current prompts, builds the label-penalized cost against precomputed
source representations, solves entropic OT, and backpropagates the
envelope gradient of the transport value into the prompts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import Tensor
from .optim import AdamW
from .ot import SinkhornConfig, cost_labeled, ot_grad_targets, sinkhorn
from .serialize import (
    META_KEY,
    FormatError,
    decode_json_tensor,
    encode_json_tensor,
    load_tensors,
    save_tensors,
)

METHODS = ("none", "otvp", "otvp-b", "entropy-prompt", "tent-ln", "supervised-oracle")


@dataclass
class RepresentationBank:
    """Prompt-free source representations, fixed before adaptation starts."""

    z_s: np.ndarray
    y_s: np.ndarray
    source_id: str
    checkpoint_hash: str

    def __post_init__(self):
        self.z_s = np.asarray(self.z_s, dtype=np.float64)
        self.y_s = np.asarray(self.y_s, dtype=np.int64)
        if self.z_s.ndim != 2 or self.y_s.shape != (self.z_s.shape[0],):
            raise ValueError("bank needs (N, d) representations and N labels")

    @property
    def n(self) -> int:
        return self.z_s.shape[0]


@dataclass(frozen=True)
class AdaptationConfig:
    method: str = "otvp"
    lam: float = 1e4
    prompt_len: int = 4
    lr: float = 0.1
    steps: int = 50
    batch_size: int = 64
    online: bool = False
    warmup_fraction: float = 0.01
    warmup_steps: int = 50
    online_steps: int = 1
    seed: int = 0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    source_cap: int = 2048

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in (0, 1]")
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be at least 1")
        if self.method == "otvp-b" and self.lam != 0.0:
            # the unlabeled variant IS lambda = 0; normalize rather than error
            object.__setattr__(self, "lam", 0.0)


@dataclass
class AdaptationState:
    gamma: vit.PromptSet
    optimizer: AdamW
    step: int = 0
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# source bank
# ---------------------------------------------------------------------------

def precompute_source_reps(params: vit.ViTParams, images: np.ndarray, labels: np.ndarray,
                           source_id: str = "source", batch_size: int = 128) -> RepresentationBank:
    xs = np.asarray(images)
    ys = np.asarray(labels)
    if xs.shape[0] == 0:
        raise ValueError("empty source data")
    reps = np.empty((xs.shape[0], params.cfg.embed_dim))
    for lo in range(0, xs.shape[0], batch_size):
        reps[lo:lo + batch_size] = vit.encode(params, xs[lo:lo + batch_size]).data
    return RepresentationBank(reps, ys, source_id, params.hash())


def save_bank(path, bank: RepresentationBank) -> None:
    meta = {"source_id": bank.source_id, "checkpoint_hash": bank.checkpoint_hash}
    save_tensors(path, {"z_s": bank.z_s, "y_s": bank.y_s.astype(np.float64),
                        META_KEY: encode_json_tensor(meta)})


def load_bank(path) -> RepresentationBank:
    tensors = load_tensors(path)
    for key in ("z_s", "y_s", META_KEY):
        if key not in tensors:
            raise FormatError(f"bank lacks tensor {key!r}")
    meta = decode_json_tensor(tensors[META_KEY])
    if not isinstance(meta, dict) or "source_id" not in meta or "checkpoint_hash" not in meta:
        raise FormatError("bank metadata lacks source_id/checkpoint_hash")
    return RepresentationBank(tensors["z_s"], tensors["y_s"].astype(np.int64),
                              meta["source_id"], meta["checkpoint_hash"])


def _stratified_cap(y: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-stratified subsample of size <= cap."""
    n = y.shape[0]
    if n <= cap:
        return np.arange(n)
    classes, counts = np.unique(y, return_counts=True)
    quota = np.floor(counts * (cap / n)).astype(np.int64)
    quota = np.maximum(quota, 1)
    # hand out the remainder to the largest classes
    for i in np.argsort(-counts):
        if quota.sum() >= cap:
            break
        quota[i] += min(cap - quota.sum(), counts[i] - quota[i])
    picked = []
    for cls, q in zip(classes, quota):
        idx = np.flatnonzero(y == cls)
        picked.append(rng.permutation(idx)[:q])
    return np.sort(np.concatenate(picked))


# ---------------------------------------------------------------------------
# pseudo-labels and prediction
# ---------------------------------------------------------------------------

def pseudo_label(params: vit.ViTParams, gamma: vit.PromptSet | None,
                 batch: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Argmax labels (ties go to the lowest class index), softmax probs and
    mean prediction entropy for one batch."""
    logits, _ = vit.forward(params, batch, gamma)
    z = logits.data
    if z.ndim == 1:
        z = z[None]
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    labels = np.argmax(z, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    entropy = float(-plogp.sum(axis=1).mean())
    return labels, probs, entropy


def predict(params: vit.ViTParams, gamma: vit.PromptSet | None,
            batch: np.ndarray) -> np.ndarray:
    return vit.predict(params, batch, gamma)


# ---------------------------------------------------------------------------
# the adaptation loops
# ---------------------------------------------------------------------------

def _check_bank(params: vit.ViTParams, bank: RepresentationBank) -> None:
    if bank.checkpoint_hash != params.hash():
        raise ValueError("representation bank was computed with a different checkpoint")


def _batch_cycler(n: int, batch_size: int, rng: np.random.Generator):
    """Yields index batches, reshuffling after each pass over the data."""
    while True:
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo:lo + batch_size]


def _ot_step(params: vit.ViTParams, state: AdaptationState, bank: RepresentationBank,
             batch: np.ndarray, cfg: AdaptationConfig, rng: np.random.Generator) -> dict:
    """One prompt update driven by the transport value; returns the record."""
    gamma = state.gamma
    state.optimizer.zero_grad()
    with ad.Tape() as tape:
        logits, z_t = vit.forward(params, batch, gamma)

    # pseudo-labels from the same forward pass, no gradient through them
    zl = logits.data
    y_hat = np.argmax(zl, axis=1)
    shifted = zl - zl.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    entropy = float(-plogp.sum(axis=1).mean())

    sub = _stratified_cap(bank.y_s, cfg.source_cap, rng)
    z_s, y_s = bank.z_s[sub], bank.y_s[sub]
    cost = cost_labeled(z_s, y_s, z_t.data, y_hat, cfg.lam)
    a = np.full(z_s.shape[0], 1.0 / z_s.shape[0])
    b = np.full(z_t.shape[0], 1.0 / z_t.shape[0])
    plan = sinkhorn(a, b, cost, cfg.sinkhorn)

    grad_zt = ot_grad_targets(plan, z_s, z_t.data)
    # envelope gradient enters the tape through a surrogate inner product
    with tape:
        surrogate = ad.sum_reduce(ad.mul(z_t, Tensor(grad_zt)))
    ad.backward(tape, surrogate)
    state.optimizer.step()
    if not np.all(np.isfinite(gamma.gamma.data)):
        raise FloatingPointError("prompts became non-finite during adaptation")

    state.step += 1
    record = {
        "step": state.step,
        "ot_value": plan.value,
        "entropy": entropy,
        "sinkhorn_iterations": plan.iterations,
        "sinkhorn_converged": plan.converged,
        "marginal_violation": plan.marginal_violation,
    }
    state.history.append((state.step, plan.value, entropy))
    return record


def adapt_offline(params: vit.ViTParams, bank: RepresentationBank, target: np.ndarray,
                  cfg: AdaptationConfig) -> tuple[vit.PromptSet, list[dict]]:
    """Optimize one prompt set against a fixed unlabeled target set."""
    if cfg.method not in ("otvp", "otvp-b"):
        raise ValueError(f"adapt_offline handles otvp/otvp-b, not {cfg.method!r}")
    target = np.asarray(target)
    if target.shape[0] == 0:
        raise ValueError("empty target data")
    _check_bank(params, bank)
    before = params.hash()

    rng = np.random.default_rng(cfg.seed)
    gamma = vit.PromptSet.init(cfg.prompt_len, params.cfg.embed_dim, seed=cfg.seed)
    state = AdaptationState(gamma, AdamW([gamma.gamma], lr=cfg.lr, weight_decay=0.0))
    batches = _batch_cycler(target.shape[0], cfg.batch_size, rng)
    records = []
    for _ in range(cfg.steps):
        idx = next(batches)
        records.append(_ot_step(params, state, bank, target[idx], cfg, rng))
    assert params.hash() == before, "encoder weights moved during prompt adaptation"
    return gamma, records


def adapt_online(params: vit.ViTParams, bank: RepresentationBank, stream,
                 cfg: AdaptationConfig) -> tuple[vit.PromptSet, np.ndarray, list[dict]]:
    """Streaming variant: one universal prompt set, heavy warmup on the
    first batches, then online_steps per batch, each batch trained once and
    predicted after its own update."""
    _check_bank(params, bank)
    before = params.hash()

    if hasattr(stream, "shape"):  # array input: cut into contiguous batches
        arr = np.asarray(stream)
        batches = [arr[lo:lo + cfg.batch_size] for lo in range(0, arr.shape[0], cfg.batch_size)]
    else:
        batches = stream
    try:
        total = len(batches)
        warmup_batches = max(1, math.ceil(cfg.warmup_fraction * total))
    except TypeError:
        warmup_batches = 8  # unknown stream length

    rng = np.random.default_rng(cfg.seed)
    gamma = vit.PromptSet.init(cfg.prompt_len, params.cfg.embed_dim, seed=cfg.seed)
    state = AdaptationState(gamma, AdamW([gamma.gamma], lr=cfg.lr, weight_decay=0.0))
    records = []
    preds = []
    for bi, batch in enumerate(batches):
        batch = np.asarray(batch)
        in_warmup = bi < warmup_batches
        for _ in range(cfg.warmup_steps if in_warmup else cfg.online_steps):
            rec = _ot_step(params, state, bank, batch, cfg, rng)
        rec = dict(rec, batch_index=bi, warmup=in_warmup)
        labels = vit.predict(params, batch, gamma)
        rec["batch_predictions"] = int(labels.shape[0])
        records.append(rec)
        preds.append(labels)
    assert params.hash() == before, "encoder weights moved during prompt adaptation"
    return gamma, np.concatenate(preds) if preds else np.empty(0, dtype=np.int64), records


def baseline_entropy_prompt(params: vit.ViTParams, bank: RepresentationBank | None,
                            target: np.ndarray,
                            cfg: AdaptationConfig) -> tuple[vit.PromptSet, list[dict]]:
    """Same loop shape as adapt_offline but the loss is the batch's mean
    prediction entropy; kept as the paper-motivated negative control."""
    target = np.asarray(target)
    if target.shape[0] == 0:
        raise ValueError("empty target data")
    before = params.hash()
    rng = np.random.default_rng(cfg.seed)
    gamma = vit.PromptSet.init(cfg.prompt_len, params.cfg.embed_dim, seed=cfg.seed)
    opt = AdamW([gamma.gamma], lr=cfg.lr, weight_decay=0.0)
    batches = _batch_cycler(target.shape[0], cfg.batch_size, rng)
    records = []
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        opt.zero_grad()
        with ad.Tape() as tape:
            logits, _ = vit.forward(params, target[idx], gamma)
            loss = ad.mean_reduce(ad.entropy(ad.softmax(logits)))
        ad.backward(tape, loss)
        opt.step()
        if not np.all(np.isfinite(gamma.gamma.data)):
            raise FloatingPointError("prompts became non-finite during adaptation")
        records.append({"step": step, "entropy": loss.item()})
    assert params.hash() == before, "encoder weights moved during prompt adaptation"
    return gamma, records


def baseline_tent_ln(params: vit.ViTParams, target: np.ndarray,
                     cfg: AdaptationConfig) -> tuple[vit.ViTParams, list[dict]]:
    """Entropy minimization over the layer-norm gains/biases only. Returns
    an adapted copy; the input params are untouched."""
    target = np.asarray(target)
    if target.shape[0] == 0:
        raise ValueError("empty target data")
    adapted = params.copy()
    ln = adapted.layer_norm_tensors()
    for name, t in adapted.tensors.items():
        t.requires_grad = name in ln
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(list(ln.values()), lr=cfg.lr, weight_decay=0.0)
    batches = _batch_cycler(target.shape[0], cfg.batch_size, rng)
    records = []
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        opt.zero_grad()
        with ad.Tape() as tape:
            logits, _ = vit.forward(adapted, target[idx])
            loss = ad.mean_reduce(ad.entropy(ad.softmax(logits)))
        ad.backward(tape, loss)
        opt.step()
        records.append({"step": step, "entropy": loss.item()})
    for t in adapted.tensors.values():
        t.requires_grad = True
    return adapted, records
