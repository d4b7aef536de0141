"""Desk-scale residual training with an L1 loss around a fixed preprocessor."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .imagecore import ImageF32, NoiseSpec, add_awgn, cpsnr
from .nn import functional as F
from .nn.params import load_weights, save_weights
from .pipeline import Preprocessor, make_noise_map, noise_seed, run_network

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    patch_size: int = 128
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_fraction: float = 0.4
    sigma: float = 25.0
    sigma_range: tuple | None = None  # (low, high): flexible models only
    seed: int = 0
    augment: bool = True
    realizations: int = 1
    val_every: int = 0
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.patch_size % 16:
            raise ValueError("patch_size must be divisible by 16")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.sigma_range is not None:
            lo, hi = self.sigma_range
            if not 0 <= lo <= hi:
                raise ValueError("sigma_range must satisfy 0 <= low <= high")
            self.sigma_range = (float(lo), float(hi))

    def lr_at(self, step: int) -> float:
        interval = max(1, int(round(self.decay_fraction * self.steps)))
        return self.lr * self.lr_decay ** (step // interval)


# ----------------------------------------------------------------------------
# patches


def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 rotations/reflections of a (C, H, W) array."""
    out = np.rot90(arr, k % 4, axes=(1, 2))
    if k >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def sample_windows(shapes, n: int, size: int, rng: np.random.Generator, augment: bool = False):
    """(image index, row, col, dihedral code) for ``n`` random square windows."""
    usable = [i for i, (h, w) in enumerate(shapes) if h >= size and w >= size]
    if len(usable) < len(shapes):
        warnings.warn(f"{len(shapes) - len(usable)} image(s) smaller than {size}px skipped")
    if n == 0:
        return []
    if not usable:
        raise ValueError(f"no image is at least {size}x{size}")
    out = []
    for _ in range(n):
        i = usable[int(rng.integers(len(usable)))]
        h, w = shapes[i]
        r = int(rng.integers(h - size + 1))
        c = int(rng.integers(w - size + 1))
        k = int(rng.integers(8)) if augment else 0
        out.append((i, r, c, k))
    return out


def extract_patches(images, n: int, size: int, seed: int, augment: bool = False) -> list:
    rng = np.random.Generator(np.random.PCG64(seed))
    wins = sample_windows([(im.height, im.width) for im in images], n, size, rng, augment)
    return [ImageF32(dihedral(images[i].data[:, r:r + size, c:c + size], k)) for i, r, c, k in wins]


# ----------------------------------------------------------------------------
# training examples


class PreprocessCache:
    """On-disk cache of preprocessor outputs keyed by (noisy image, sigma, profile)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(y: ImageF32, noise: NoiseSpec, pre: Preprocessor) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(y.shape, dtype="<i8").tobytes())
        h.update(y.data.astype("<f4").tobytes())
        h.update(f"{noise.sigma255:.10g}".encode())
        h.update(json.dumps(pre.describe(noise.sigma255), sort_keys=True).encode())
        return h.hexdigest()

    def get(self, y: ImageF32, noise: NoiseSpec, pre: Preprocessor) -> ImageF32:
        path = self.root / f"{self.key(y, noise, pre)}.npy"
        if path.exists():
            return ImageF32(np.load(path))
        out = pre(y, noise)
        tmp = path.with_suffix(".tmp.npy")
        np.save(tmp, out.data)
        tmp.replace(path)
        return out


@dataclass
class Example:
    clean: np.ndarray
    noisy: np.ndarray
    pre: np.ndarray
    sigma255: float


def prepare_examples(images, cfg: TrainConfig, preprocessor: Preprocessor,
                     cache: PreprocessCache | None = None, tag: str = "train") -> list:
    """Noisy realisations of each image together with their preprocessed versions."""
    examples = []
    for i, img in enumerate(images):
        for rep in range(cfg.realizations):
            seed = noise_seed(tag, i * 1000 + rep, cfg.sigma, cfg.seed)
            if cfg.sigma_range is not None:
                lo, hi = cfg.sigma_range
                sigma = float(np.random.Generator(np.random.PCG64(seed)).uniform(lo, hi))
            else:
                sigma = cfg.sigma
            noise = NoiseSpec(sigma, seed)
            y = add_awgn(img, noise)
            pre = cache.get(y, noise, preprocessor) if cache else preprocessor(y, noise)
            examples.append(Example(img.data, y.data, pre.data, sigma))
    return examples


@dataclass
class Batch:
    clean: np.ndarray  # (N, 3, P, P)
    pre: np.ndarray
    z: np.ndarray      # network input


def assemble_batch(examples, windows, size: int, flexible: bool) -> Batch:
    clean, pre, z = [], [], []
    for i, r, c, k in windows:
        ex = examples[i]
        sl = (slice(None), slice(r, r + size), slice(c, c + size))
        cx, nx, px = (dihedral(a[sl], k) for a in (ex.clean, ex.noisy, ex.pre))
        parts = [px, nx]
        if flexible:
            parts.append(make_noise_map(NoiseSpec(ex.sigma255), size, size).data)
        clean.append(cx)
        pre.append(px)
        z.append(np.concatenate(parts, axis=0))
    return Batch(np.stack(clean).astype(np.float32), np.stack(pre).astype(np.float32),
                 np.stack(z).astype(np.float32))


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, spec: models.ModelSpec, params: dict) -> "AdamState":
        names = spec.trainable_names()
        return cls(0, {n: np.zeros_like(params[n]) for n in names},
                   {n: np.zeros_like(params[n]) for n in names})


def residual_loss(spec, params, batch: Batch, training: bool = True):
    """Mean |x - (F(z) + p)| over pixels, channels and batch, with its gradient."""
    out, tape = models.forward_train(spec, params, batch.z, training=training)
    loss, dpred = F.l1_loss(batch.pre + out, batch.clean)
    return loss, dpred, tape


def train_step(batch: Batch, cfg: TrainConfig, spec: models.ModelSpec, params: dict,
               opt_state: AdamState, lr: float | None = None):
    """One Adam step on the residual L1 loss. Returns (params', opt_state', loss)."""
    lr = cfg.lr if lr is None else lr
    loss, dpred, tape = residual_loss(spec, params, batch)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} at optimizer step {opt_state.t + 1}")
    grads, _ = models.backward(spec, params, tape, dpred)
    t = opt_state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params = dict(params)
    m, v = {}, {}
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in spec.trainable_names():
        g = grads[name].astype(np.float32)
        m[name] = (b1 * opt_state.m[name] + (1 - b1) * g).astype(np.float32)
        v[name] = (b2 * opt_state.v[name] + (1 - b2) * g * g).astype(np.float32)
        step = lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.eps)
        new_params[name] = (params[name] - step).astype(np.float32)
    for lname, (mean, var) in tape.bn_updates.items():
        new_params[f"{lname}.bn.running_mean"] = mean.astype(np.float32)
        new_params[f"{lname}.bn.running_var"] = var.astype(np.float32)
    return new_params, AdamState(t, m, v), loss


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    step: int
    params: dict
    opt_state: AdamState
    rng_state: dict
    losses: list
    spec: models.ModelSpec

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_weights(self.params, d / "weights.nlwt")
        self.spec.save(d / "model.toml")
        opt = {f"m/{k}": a for k, a in self.opt_state.m.items()}
        opt.update({f"v/{k}": a for k, a in self.opt_state.v.items()})
        save_weights(opt, d / "optimizer.nlwt")
        state = {"step": self.step, "adam_t": self.opt_state.t,
                 "rng": self.rng_state, "losses": self.losses}
        (d / "state.json").write_text(json.dumps(state))
        return d

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        params = load_weights(d / "weights.nlwt")
        spec = models.ModelSpec.load(d / "model.toml")
        opt = load_weights(d / "optimizer.nlwt")
        state = json.loads((d / "state.json").read_text())
        m = {k[2:]: a for k, a in opt.items() if k.startswith("m/")}
        v = {k[2:]: a for k, a in opt.items() if k.startswith("v/")}
        return cls(state["step"], params, AdamState(state["adam_t"], m, v),
                   state["rng"], state["losses"], spec)


# ----------------------------------------------------------------------------
# driver


@dataclass
class TrainResult:
    params: dict
    losses: list
    baseline_losses: list
    curve: list  # (step, loss, val_cpsnr or None)
    val_baseline_cpsnr: float | None
    checkpoint: Path | None


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i-window+1) : i+1]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def validation_cpsnr(spec, params, examples, flexible: bool) -> float:
    scores = []
    for ex in examples:
        clean = ImageF32(ex.clean)
        if spec is None:
            out = np.clip(ex.pre, 0, 1)
        else:
            parts = [ex.pre, ex.noisy]
            if flexible:
                parts.append(make_noise_map(NoiseSpec(ex.sigma255), *ex.clean.shape[1:]).data)
            res = run_network(spec, params, np.concatenate(parts, axis=0))
            out = np.clip(ex.pre + res, 0, 1)
        scores.append(cpsnr(clean, ImageF32(out)))
    return float(np.mean(scores))


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "val_cpsnr"])
        for step, loss, val in curve:
            w.writerow([step, f"{loss:.6f}", "" if val is None else f"{val:.4f}"])


def train(images, cfg: TrainConfig, spec: models.ModelSpec, preprocessor: Preprocessor,
          out_dir=None, val_images=None, params: dict | None = None,
          resume=None, cache_dir=None, stop_at: int | None = None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps (or stop early at ``stop_at``).

    ``resume`` is a checkpoint directory; training continues from its step and
    reproduces the loss sequence of an uninterrupted run.
    """
    flexible = spec.in_channels == 7
    if cfg.sigma_range is not None and not flexible:
        raise ValueError("a sigma range requires a flexible (noise-map) model")
    cache = PreprocessCache(cache_dir) if cache_dir else None
    examples = prepare_examples(images, cfg, preprocessor, cache, tag="train")
    val_examples = prepare_examples(val_images, cfg, preprocessor, cache, tag="val") if val_images else []
    shapes = [ex.clean.shape[1:] for ex in examples]

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    start, losses = 0, []
    if resume is not None:
        ck = Checkpoint.load(resume)
        params, opt_state, start, losses = ck.params, ck.opt_state, ck.step, list(ck.losses)
        rng.bit_generator.state = ck.rng_state
    else:
        if params is None:
            params = models.init_params(spec, seed=cfg.seed, zero_head=True)
        opt_state = AdamState.zeros(spec, params)

    val_base = validation_cpsnr(None, None, val_examples, flexible) if val_examples else None
    curve, baseline = [], []
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    out = Path(out_dir) if out_dir else None
    for step in range(start, end):
        wins = sample_windows(shapes, cfg.batch_size, cfg.patch_size, rng, cfg.augment)
        batch = assemble_batch(examples, wins, cfg.patch_size, flexible)
        baseline.append(float(np.abs(batch.pre - batch.clean).astype(np.float64).mean()))
        params, opt_state, loss = train_step(batch, cfg, spec, params, opt_state, cfg.lr_at(step))
        losses.append(loss)
        val = None
        if val_examples and cfg.val_every and (step + 1) % cfg.val_every == 0:
            val = validation_cpsnr(spec, params, val_examples, flexible)
            log.info("step %d loss %.5f val %.3f dB (baseline %.3f)", step + 1, loss, val, val_base)
        curve.append((step + 1, loss, val))
        if out and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            Checkpoint(step + 1, params, opt_state, rng.bit_generator.state, losses, spec).save(
                out / f"step{step + 1:06d}")
    ck_path = None
    if out is not None:
        ck_path = Checkpoint(end, params, opt_state, rng.bit_generator.state, losses, spec).save(
            out / "final")
        write_curve(curve, out / "loss_curve.csv")
    return TrainResult(params, losses, baseline, curve, val_base, ck_path)
