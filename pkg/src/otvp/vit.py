"""Micro vision transformer with optional prompt tokens.

The encoder is a standard pre-LN ViT shrunk to run on one CPU core: 32px
images, 4px patches, embed dim 64, 3 layers. Prompt tokens are appended
after the patch tokens at the input of the first layer only and receive no
positional embedding; the token order is [CLS, patches, prompts]. The
representation z is the final-layer-norm CLS embedding, before the
classifier head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamW, cosine_lr
from .serialize import (
    CONFIG_KEY,
    META_KEY,
    FormatError,
    decode_json_tensor,
    encode_json_tensor,
    load_tensors,
    save_tensors,
    tensors_hash,
)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 3
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


def _param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    m = cfg.mlp_ratio * d
    shapes: dict[str, tuple[int, ...]] = {
        "patch_w": (cfg.patch_dim, d),
        "patch_b": (d,),
        "cls": (1, 1, d),
        "pos": (1, cfg.num_patches + 1, d),
    }
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[p + b] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "w1"] = (d, m)
        shapes[p + "b1"] = (m,)
        shapes[p + "w2"] = (m, d)
        shapes[p + "b2"] = (d,)
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    shapes["head_w"] = (d, cfg.num_classes)
    shapes["head_b"] = (cfg.num_classes,)
    return shapes


class ViTParams:
    """All encoder and head weights as named tensors.

    Frozen during prompt adaptation: methods that adapt prompts must leave
    the serialized hash unchanged. Only the tent_ln baseline may touch the
    layer-norm tensors.
    """

    def __init__(self, cfg: ViTConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: ViTConfig) -> "ViTParams":
        rng = np.random.default_rng(cfg.seed)
        tensors: dict[str, Tensor] = {}
        for name, shape in _param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):  # layer norm gains start at identity
                data = np.ones(shape)
            elif leaf.startswith("b") or leaf.endswith("_b"):
                data = np.zeros(shape)
            elif name in ("cls", "pos"):
                data = rng.normal(0.0, 0.02, size=shape)
            elif name == "head_w":
                data = rng.normal(0.0, 0.01, size=shape)
            else:
                # fan-balanced init; residual-branch outputs damped by depth
                std = math.sqrt(2.0 / (shape[0] + shape[-1]))
                if leaf in ("wo", "w2"):
                    std /= math.sqrt(2.0 * cfg.num_layers)
                data = rng.normal(0.0, std, size=shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(cfg, tensors)

    @classmethod
    def from_arrays(cls, cfg: ViTConfig, arrays: dict[str, np.ndarray]) -> "ViTParams":
        shapes = _param_shapes(cfg)
        if set(arrays) != set(shapes):
            missing = sorted(set(shapes) - set(arrays))
            extra = sorted(set(arrays) - set(shapes))
            raise FormatError(f"tensor names do not match config: missing={missing} extra={extra}")
        tensors = {}
        for name, shape in shapes.items():
            a = arrays[name]
            if a.shape != shape:
                raise FormatError(f"tensor {name!r} has shape {a.shape}, expected {shape}")
            tensors[name] = Tensor(a, requires_grad=True)
        return cls(cfg, tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "ViTParams":
        return ViTParams(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True)
                                    for k, v in self.tensors.items()})

    def hash(self) -> str:
        return tensors_hash(self.arrays())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def layer_norm_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items()
                if k.rsplit(".", 1)[-1] in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "lnf_g", "lnf_b")}


class PromptSet:
    """The l x d matrix of learned prompt tokens."""

    def __init__(self, gamma: Tensor):
        if gamma.ndim != 2 or gamma.shape[0] < 1:
            raise ValueError("gamma must be a (l, d) matrix with l >= 1")
        self.gamma = gamma

    @classmethod
    def init(cls, length: int, dim: int, seed: int = 0, std: float = 0.02) -> "PromptSet":
        rng = np.random.default_rng(seed)
        return cls(Tensor(rng.normal(0.0, std, size=(length, dim)), requires_grad=True))

    @property
    def length(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "PromptSet":
        return PromptSet(Tensor(self.gamma.data.copy(), requires_grad=True))


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """(B,C,H,W) or (C,H,W) -> (B,k,patch_dim); patches in raster order,
    each flattened channel-first."""
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    b, c, h, w = x.shape
    p = cfg.patch_size
    if c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
        raise ValueError(f"expected ({cfg.channels},{cfg.image_size},{cfg.image_size}) images, got {x.shape[1:]}")
    gh = h // p
    x = x.reshape(b, c, gh, p, gh, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gh, gw, C, p, p)
    out = x.reshape(b, gh * gh, c * p * p)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    b = x.shape[0]
    p = cfg.patch_size
    gh = cfg.image_size // p
    x = x.reshape(b, gh, gh, cfg.channels, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    out = x.reshape(b, cfg.channels, cfg.image_size, cfg.image_size)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _attention(params: ViTParams, prefix: str, x: Tensor) -> Tensor:
    cfg = params.cfg
    b, t, d = x.shape
    nh = cfg.num_heads
    dh = d // nh

    def proj(w, bias):
        return ad.add(ad.matmul(x, params[prefix + w]), params[prefix + bias])

    def heads(v):
        return ad.transpose(ad.reshape(v, (b, t, nh, dh)), (0, 2, 1, 3))

    q = heads(proj("wq", "bq"))
    k = heads(proj("wk", "bk"))
    v = heads(proj("wv", "bv"))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return ad.add(ad.matmul(out, params[prefix + "wo"]), params[prefix + "bo"])


def _mlp(params: ViTParams, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, params[prefix + "w1"]), params[prefix + "b1"]))
    return ad.add(ad.matmul(h, params[prefix + "w2"]), params[prefix + "b2"])


def encode(params: ViTParams, images: np.ndarray, prompts: PromptSet | None = None) -> Tensor:
    """Batched encoder; returns the final CLS representation z of shape (B, d).

    Pixel values are mapped from [0, 1] to [-1, 1] before embedding; every
    entry point (training, prediction, adaptation) shares this convention.
    """
    cfg = params.cfg
    images = (np.asarray(images, dtype=np.float64) - 0.5) * 2.0
    patches = patchify(images, cfg)
    if patches.ndim == 2:
        patches = patches[None]
    b = patches.shape[0]
    tok = ad.add(ad.matmul(Tensor(patches), params["patch_w"]), params["patch_b"])
    cls = ad.broadcast_to(params["cls"], (b, 1, cfg.embed_dim))
    seq = ad.concat_tokens([cls, tok])
    seq = ad.add(seq, params["pos"])  # positions cover CLS + patches only
    if prompts is not None:
        g = ad.broadcast_to(ad.reshape(prompts.gamma, (1, prompts.length, cfg.embed_dim)),
                            (b, prompts.length, cfg.embed_dim))
        seq = ad.concat_tokens([seq, g])
    x = seq
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        x = ad.add(x, _attention(params, p, ad.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])))
        x = ad.add(x, _mlp(params, p, ad.layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])))
    x = ad.layer_norm(x, params["lnf_g"], params["lnf_b"])
    return ad.slice_token(x, 0)


def forward(params: ViTParams, images: np.ndarray,
            prompts: PromptSet | None = None) -> tuple[Tensor, Tensor]:
    """Returns (logits, z). Accepts one (C,H,W) image or a (B,C,H,W) batch."""
    single = np.asarray(images).ndim == 3
    z = encode(params, images, prompts)
    logits = ad.add(ad.matmul(z, params["head_w"]), params["head_b"])
    if single:
        logits = ad.reshape(logits, (params.cfg.num_classes,))
        z = ad.reshape(z, (params.cfg.embed_dim,))
    return logits, z


def forward_with_prompts(params: ViTParams, prompts: PromptSet,
                         images: np.ndarray) -> tuple[Tensor, Tensor]:
    return forward(params, images, prompts)


def predict(params: ViTParams, images: np.ndarray, prompts: PromptSet | None = None,
            batch_size: int = 128) -> np.ndarray:
    """Argmax labels, computed without recording a tape."""
    x = np.asarray(images)
    out = np.empty(x.shape[0], dtype=np.int64)
    for lo in range(0, x.shape[0], batch_size):
        logits, _ = forward(params, x[lo:lo + batch_size], prompts)
        out[lo:lo + batch_size] = np.argmax(logits.data, axis=1)
    return out


def accuracy(params: ViTParams, images: np.ndarray, labels: np.ndarray,
             prompts: PromptSet | None = None, batch_size: int = 128) -> float:
    return float(np.mean(predict(params, images, prompts, batch_size) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _jitter(xb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard photometric/low-pass jitter, applied in place per image:
    pixel noise, contrast/brightness, and occasional mild smoothing."""
    from scipy.ndimage import gaussian_filter

    n = xb.shape[0]
    noisy = rng.random(n) < 0.7
    stds = rng.uniform(0.0, 0.12, size=n)
    adjust = rng.random(n) < 0.7
    contrast = rng.uniform(0.55, 1.45, size=n)
    brightness = rng.uniform(-0.15, 0.15, size=n)
    smooth = rng.random(n) < 0.5
    sigmas = rng.uniform(0.3, 1.4, size=n)
    for i in range(n):
        if noisy[i]:
            xb[i] += rng.normal(0.0, stds[i], size=xb[i].shape)
        if adjust[i]:
            mean = xb[i].mean()
            xb[i] = (xb[i] - mean) * contrast[i] + mean + brightness[i]
        if smooth[i]:
            xb[i] = gaussian_filter(xb[i], (0.0, sigmas[i], sigmas[i]), mode="reflect")
    np.clip(xb, 0.0, 1.0, out=xb)
    return xb


def train_source(params: ViTParams, train_set: tuple[np.ndarray, np.ndarray],
                 val_set: tuple[np.ndarray, np.ndarray], epochs: int = 20,
                 lr: float = 1.5e-3, batch_size: int = 16, weight_decay: float = 1e-2,
                 warmup_steps: int = 100, flip_augment: bool = True,
                 jitter_augment: bool = True, prompt_slot_augment: bool = True,
                 seed: int | None = None) -> tuple[ViTParams, dict]:
    """Cross-entropy training of all weights; returns the best-val snapshot.

    Small batches matter more than large ones here: the budget is measured in
    optimizer steps, and the plateau at the start ends only after a few
    hundred updates.  Horizontal flips are label-preserving for every class
    and roughly double the effective training set; the jitter augmentation is
    ordinary photometric noise, not tuned to any particular target domain.

    Fully deterministic for a fixed seed: shuffling and augmentation come
    from one generator and the optimizer has no stochastic state.
    """
    xs, ys = np.asarray(train_set[0]), np.asarray(train_set[1])
    xv, yv = np.asarray(val_set[0]), np.asarray(val_set[1])
    if xs.shape[0] == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(params.cfg.seed if seed is None else seed)
    opt = AdamW(params.trainable(), lr=lr, weight_decay=weight_decay)
    steps_per_epoch = max(1, math.ceil(xs.shape[0] / batch_size))
    total_steps = epochs * steps_per_epoch
    warmup = min(warmup_steps, max(1, total_steps // 2))
    best = params.copy()
    best_acc = accuracy(params, xv, yv)
    history = {"val_acc": [best_acc], "train_loss": []}
    step = 0
    for _ in range(epochs):
        order = rng.permutation(xs.shape[0])
        epoch_loss = 0.0
        for lo in range(0, xs.shape[0], batch_size):
            idx = order[lo:lo + batch_size]
            xb = xs[idx]
            if flip_augment or jitter_augment:
                xb = xb.copy()
            if flip_augment:
                mirror = rng.random(len(idx)) < 0.5
                xb[mirror] = xb[mirror, :, :, ::-1]
            if jitter_augment:
                xb = _jitter(xb, rng)
            if step < warmup:
                opt.lr = lr * (step + 1) / warmup
            else:
                opt.lr = cosine_lr(lr, step - warmup, total_steps - warmup)
            # half the batches train with throwaway random tokens appended in
            # the prompt slots, so a freshly initialized prompt set does not
            # shift predictions before it has been optimized; gradients flow
            # into the weights only
            decoys = None
            if prompt_slot_augment and rng.random() < 0.5:
                decoys = PromptSet(Tensor(rng.normal(
                    0.0, rng.uniform(0.005, 0.05), size=(4, params.cfg.embed_dim))))
            opt.zero_grad()
            with ad.Tape() as tape:
                logits, _ = forward(params, xb, decoys)
                loss = ad.cross_entropy(logits, ys[idx])
            ad.backward(tape, loss)
            opt.step()
            epoch_loss += loss.item() * len(idx)
            step += 1
        history["train_loss"].append(epoch_loss / xs.shape[0])
        val_acc = accuracy(params, xv, yv)
        history["val_acc"].append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best = params.copy()
    history["best_val_acc"] = best_acc
    return best, history


def fit_prompts_supervised(params: ViTParams, gamma0: PromptSet,
                           images: np.ndarray, labels: np.ndarray,
                           steps: int, lr: float = 0.1,
                           batch_size: int = 64, seed: int = 0) -> PromptSet:
    """Label-supervised prompt tuning with frozen weights; the diagnostic
    upper bound for unsupervised adaptation. Returns the iterate with the
    best full-set accuracy (ties keep the earlier one)."""
    xs, ys = np.asarray(images), np.asarray(labels)
    prompts = gamma0.copy()
    if steps == 0:
        return prompts
    best = prompts.copy()
    best_acc = accuracy(params, xs, ys, prompts)
    rng = np.random.default_rng(seed)
    opt = AdamW([prompts.gamma], lr=lr)
    for _ in range(steps):
        idx = rng.choice(xs.shape[0], size=min(batch_size, xs.shape[0]), replace=False)
        opt.zero_grad()
        with ad.Tape() as tape:
            logits, _ = forward(params, xs[idx], prompts)
            loss = ad.cross_entropy(logits, ys[idx])
        ad.backward(tape, loss)
        opt.step()
        acc = accuracy(params, xs, ys, prompts)
        if acc > best_acc:
            best_acc = acc
            best = prompts.copy()
    return best


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ViTParams, meta: dict | None = None) -> None:
    tensors = dict(params.arrays())
    tensors[CONFIG_KEY] = encode_json_tensor(asdict(params.cfg))
    if meta is not None:
        tensors[META_KEY] = encode_json_tensor(meta)
    save_tensors(path, tensors)


def checkpoint_meta(path) -> dict | None:
    """Training-time metadata stored alongside the weights, if any."""
    tensors = load_tensors(path)
    if META_KEY not in tensors:
        return None
    return decode_json_tensor(tensors[META_KEY])


def load_checkpoint(path) -> ViTParams:
    tensors = load_tensors(path)
    if CONFIG_KEY not in tensors:
        raise FormatError(f"checkpoint lacks a {CONFIG_KEY} tensor")
    cfg_dict = decode_json_tensor(tensors.pop(CONFIG_KEY))
    tensors.pop(META_KEY, None)
    try:
        cfg = ViTConfig(**cfg_dict)
    except (TypeError, ValueError) as e:
        raise FormatError(f"invalid checkpoint config: {e}") from e
    return ViTParams.from_arrays(cfg, tensors)


def save_prompts(path, prompts: PromptSet) -> None:
    save_tensors(path, {"gamma": prompts.gamma.data})


def load_prompts(path) -> PromptSet:
    tensors = load_tensors(path)
    if "gamma" not in tensors:
        raise FormatError("prompt file lacks a gamma tensor")
    return PromptSet(Tensor(tensors["gamma"], requires_grad=True))
