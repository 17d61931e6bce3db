"""Slice-wise denoisers that map P-CBCT volumes to P-MDCT estimates.

Three kinds share one interface: ``identity`` (the baseline arm), ``tv``
(Chambolle total variation) and ``learned`` (the residual encoder-decoder in
:mod:`cbctcad.denoise.network`, trained with MSE and Adam).  Slices are the
coronal planes ``volume.data[:, j, :]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import metrics
from ..errors import InvalidArgumentError, TrainingFailureError
from ..geometry import Volume
from ..io import load_weights, save_weights
from . import network
from .tv import total_variation, tv_denoise

log = logging.getLogger(__name__)

KINDS = ("identity", "tv", "learned")
FORMAT_VERSION = 1
_BATCH = 16


@dataclass(frozen=True)
class TrainConfig:
    """Defaults follow the reference protocol (batch 18, lr 1e-4, 20 epochs)."""

    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 18
    seed: int = 0
    channels: int = 8


@dataclass
class Denoiser:
    kind: str = "identity"
    dims: tuple[int, int] | None = None
    params: dict = field(default_factory=dict)
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown denoiser kind {self.kind!r}")
        if self.dims is not None:
            self.dims = tuple(int(d) for d in self.dims)
        if self.kind == "learned":
            for k, v in self.params.items():
                if not np.all(np.isfinite(v)):
                    raise InvalidArgumentError(f"non-finite learned parameter {k}")

    @classmethod
    def identity(cls) -> "Denoiser":
        return cls("identity")

    @classmethod
    def tv(cls, weight: float = 0.05, n_iter: int = 100) -> "Denoiser":
        return cls("tv", params={"weight": float(weight), "n_iter": int(n_iter)})

    def _check(self, shape):
        if self.dims is not None and tuple(shape) != self.dims:
            raise InvalidArgumentError(f"slice shape {tuple(shape)} does not match denoiser dims {self.dims}")

    def apply_batch(self, slices: np.ndarray) -> np.ndarray:
        """Denoise a stack ``(N, H, W)`` of slices."""
        slices = np.asarray(slices)
        self._check(slices.shape[1:])
        if self.kind == "identity":
            return slices.copy()
        if self.kind == "tv":
            return np.stack([tv_denoise(s, self.params["weight"], self.params["n_iter"]) for s in slices]).astype(slices.dtype)
        out = np.empty(slices.shape, dtype=np.float32)
        for start in range(0, len(slices), _BATCH):
            x = slices[start : start + _BATCH, None].astype(np.float32)
            out[start : start + _BATCH] = network.forward(self.params, x)[:, 0]
        return out

    def save(self, path) -> None:
        header = {
            "format": "cbctcad-denoiser",
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "dims": list(self.dims) if self.dims else None,
            "architecture": "residual-encoder-decoder-2scale-4conv" if self.kind == "learned" else None,
            "scalars": {k: v for k, v in self.params.items() if np.isscalar(v)},
            "training": self.training_meta,
        }
        arrays = {k: v for k, v in self.params.items() if not np.isscalar(v)}
        save_weights(path, header, arrays)

    @classmethod
    def load(cls, path) -> "Denoiser":
        header, arrays = load_weights(path)
        if header.get("format") != "cbctcad-denoiser":
            raise InvalidArgumentError(f"{path} is not a denoiser file")
        params = dict(header.get("scalars") or {})
        params.update({k: v.astype(np.float32) for k, v in arrays.items()})
        return cls(header["kind"], header["dims"], params, header.get("training") or {})


def denoise_slice(d: Denoiser, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise InvalidArgumentError("expected a 2-D slice")
    if d.kind == "identity":
        d._check(image.shape)
        return image.copy()
    return d.apply_batch(image[None])[0]


def coronal_slices(vol: Volume) -> np.ndarray:
    """``(ny, nx, nz)`` stack of coronal planes."""
    return np.ascontiguousarray(np.moveaxis(vol.data, 1, 0))


def denoise_volume(d: Denoiser, vol: Volume) -> Volume:
    if d.kind == "identity":
        d._check(vol.data[:, 0, :].shape)
        return vol.with_data(vol.data.copy())
    out = d.apply_batch(coronal_slices(vol))
    return vol.with_data(np.moveaxis(out, 0, 1).astype(vol.data.dtype))


def _stack_pairs(pairs):
    if len(pairs) == 0:
        raise InvalidArgumentError("training needs at least one (noisy, clean) pair")
    if len({np.shape(a) for p in pairs for a in p}) != 1:
        raise InvalidArgumentError("all slices must share one 2-D shape")
    noisy = np.stack([np.asarray(p[0], dtype=np.float32) for p in pairs])
    clean = np.stack([np.asarray(p[1], dtype=np.float32) for p in pairs])
    if noisy.shape != clean.shape or noisy.ndim != 3:
        raise InvalidArgumentError("all slices must share one 2-D shape")
    if noisy.shape[1] % 2 or noisy.shape[2] % 2:
        raise InvalidArgumentError(f"slice dims {noisy.shape[1:]} must be even")
    return noisy[:, None], clean[:, None]


def _full_loss(params, noisy, clean) -> float:
    total = 0.0
    for s in range(0, len(noisy), _BATCH):
        y = network.forward(params, noisy[s : s + _BATCH])
        total += float(np.sum((y.astype(np.float64) - clean[s : s + _BATCH]) ** 2))
    return total / noisy.size


def train_denoiser(pairs, config: TrainConfig = TrainConfig()) -> Denoiser:
    """Fit the learned denoiser to ``(noisy, clean)`` slice pairs by MSE.

    The per-epoch log is the mean minibatch loss.  Full-data losses before and
    after training are stored in ``training_meta``.
    """
    noisy, clean = _stack_pairs(pairs)
    params = network.init_params(config.channels, config.seed)
    opt = network.Adam(params, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5EED]))
    initial = _full_loss(params, noisy, clean)
    history = []
    n = len(noisy)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = np.sort(order[s : s + config.batch_size])
            loss, grads = network.mse_loss_and_grad(params, noisy[idx], clean[idx])
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingFailureError(f"denoiser training diverged at epoch {epoch}")
            opt.step(params, grads)
            losses.append(loss * len(idx))
        history.append(float(np.sum(losses) / n))
        log.info("denoiser epoch %d/%d loss %.6g", epoch, config.epochs, history[-1])
    final = _full_loss(params, noisy, clean)
    if not math.isfinite(final):
        raise TrainingFailureError(f"denoiser training diverged at epoch {config.epochs}")
    meta = {
        **asdict(config),
        "n_pairs": int(n),
        "initial_loss": initial,
        "final_loss": final,
        "loss_history": history,
    }
    return Denoiser("learned", tuple(noisy.shape[2:]), params, meta)


@dataclass(frozen=True)
class DenoiseScores:
    psnr_mean: float
    psnr_sd: float
    ssim_mean: float
    ssim_sd: float

    def as_dict(self) -> dict:
        return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}


def evaluate_denoiser(d: Denoiser, pairs, data_range: float = 1.0) -> DenoiseScores:
    """PSNR and SSIM of denoised noisy slices against their clean partners."""
    if len(pairs) == 0:
        raise InvalidArgumentError("no pairs to evaluate")
    noisy = np.stack([np.asarray(p[0]) for p in pairs])
    clean = [np.asarray(p[1]) for p in pairs]
    out = d.apply_batch(noisy)
    ps = [metrics.psnr(c, o, data_range) for c, o in zip(clean, out)]
    ss = [metrics.ssim(c, o, data_range) for c, o in zip(clean, out)]
    pm, psd = metrics.mean_sd(ps)
    sm, ssd = metrics.mean_sd(ss)
    return DenoiseScores(pm, psd, sm, ssd)


__all__ = [
    "Denoiser",
    "TrainConfig",
    "DenoiseScores",
    "denoise_slice",
    "denoise_volume",
    "train_denoiser",
    "evaluate_denoiser",
    "total_variation",
    "tv_denoise",
]
