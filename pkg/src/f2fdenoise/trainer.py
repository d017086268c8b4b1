"""Pretraining on synthetic AWGN and frame-to-frame fine-tuning on a noisy video.

Fine-tuning uses noise-to-noise supervision between a frame and its
motion-compensated neighbor, masked by the occlusion map. Two variants:

* online: frame by frame, N Adam steps per frame, warm-started from the
  previous frame's parameters;
* offline: one Adam step per frame pair, ``epochs`` shuffled passes over
  the whole video, then a single parameter set denoises every frame.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import LOSSES, AdamState, Tape, adam_step, zero_grads
from .errors import DataError, NumericalError
from .flow import FlowConfig
from .metrics import MetricsRow, psnr
from .model import ModelConfig, ModelParams, denoise, init_params, predict
from .noise import NoiseSpec, SeededRng, apply_noise, schedule_eval
from .warp import FramePair, OcclusionConfig, build_pair

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["frame_index", "psnr_finetuned", "psnr_pretrained", "loss_before", "loss_after",
               "masked_fraction", "active_noise_spec", "weights_checksum"]


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 5e-5
    n_iters: int = 20
    mode: str = "online"
    epochs: int = 20
    loss: str = "l1"
    symmetric: bool = False
    carry_adam: bool = True
    freeze_after: Optional[int] = None
    freeze_norm_stats: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("online", "offline"):
            raise ValueError(f"mode must be 'online' or 'offline', got {self.mode!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if self.lr < 0 or self.n_iters < 0 or self.epochs < 0:
            raise ValueError("lr, n_iters and epochs must be non-negative")


@dataclass(frozen=True)
class PretrainConfig:
    sigma: float = 25 / 255
    crop_size: int = 48
    batch: int = 16
    steps: int = 1000
    lr: float = 1e-3
    loss: str = "l2"


@dataclass
class FinetuneResult:
    denoised: list
    rows: list
    params: ModelParams
    params_history: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.aux[name] if name in r.aux else getattr(r, name) for r in self.rows],
                        dtype=float)

    def psnr(self) -> np.ndarray:
        return np.array([r.psnr_db for r in self.rows])

    def csv_rows(self) -> list[dict]:
        return [{"frame_index": r.t, "psnr_finetuned": r.psnr_db, **r.aux} for r in self.rows]


def train_step(params: ModelParams, state: AdamState, frame: np.ndarray, target: np.ndarray,
               mask: Optional[np.ndarray], loss: str = "l1", update_running: bool = True) -> float:
    """Forward in train mode, backward, one Adam update. Returns the pre-update loss."""
    zero_grads(params.parameters())
    tape = Tape()
    pred = predict(params, frame, mode="train", update_running=update_running, tape=tape)
    value = LOSSES[loss](pred, target, mask, tape=tape)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    tape.backward(1.0)
    adam_step(params.parameters(), state)
    return value


def pair_loss(params: ModelParams, pair: FramePair, loss: str = "l1") -> float:
    """Masked loss of the train-mode prediction, running statistics untouched."""
    pred = predict(params, pair.frame, mode="train", update_running=False)
    return LOSSES[loss](pred, pair.target, pair.mask)


# -- pretraining ---------------------------------------------------------------

def _augment(crop: np.ndarray, k: int) -> np.ndarray:
    crop = np.rot90(crop, k % 4)
    return crop[:, ::-1] if k >= 4 else crop


def pretrain(corpus: Sequence[np.ndarray], config: PretrainConfig = PretrainConfig(), seed: int = 0,
             model_config: ModelConfig = ModelConfig(), params: Optional[ModelParams] = None,
             history: Optional[list] = None,
             progress: Optional[Callable[[int, float], None]] = None) -> ModelParams:
    """Supervised training on random crops of clean images with fresh AWGN each step.

    The learning rate halves at every quarter of ``config.steps``.
    """
    if len(corpus) == 0:
        raise DataError("empty pretraining corpus")
    c = config.crop_size
    for i, img in enumerate(corpus):
        if min(img.shape) < c:
            raise DataError(f"corpus image {i} {img.shape} smaller than crop size {c}")
    params = init_params(model_config, seed) if params is None else params.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    state = AdamState(lr=config.lr)
    quarter = max(1, config.steps // 4)
    for step in range(config.steps):
        state.lr = config.lr * 0.5 ** min(3, step // quarter)
        clean = np.empty((config.batch, 1, c, c), dtype=np.float32)
        for b in range(config.batch):
            img = corpus[rng.integers(len(corpus))]
            r0 = rng.integers(img.shape[0] - c + 1)
            c0 = rng.integers(img.shape[1] - c + 1)
            clean[b, 0] = _augment(img[r0:r0 + c, c0:c0 + c], int(rng.integers(8)))
        noisy = clean + (config.sigma * rng.standard_normal(clean.shape)).astype(np.float32)
        value = train_step(params, state, noisy, clean, None, config.loss)
        if history is not None:
            history.append(value)
        if progress is not None:
            progress(step, value)
    return params


def denoising_gain(params: ModelParams, images: Sequence[np.ndarray], sigma: float = 25 / 255,
                   seed: int = 0) -> float:
    """Mean PSNR improvement (dB) of the denoiser over its AWGN-corrupted input."""
    gains = []
    for i, u in enumerate(images):
        f = apply_noise(u, NoiseSpec("awgn", sigma=sigma), SeededRng(seed), i + 1)
        gains.append(psnr(denoise(params, f), u) - psnr(f, u))
    return float(np.mean(gains))


# -- pair construction -------------------------------------------------------

def compute_pairs(video: Sequence[np.ndarray], flow_cfg: FlowConfig = FlowConfig(),
                  occ_cfg: OcclusionConfig = OcclusionConfig(), symmetric: bool = False,
                  workers: int = 1) -> dict:
    """All training pairs of a video keyed by ``(t, t_ref)`` with 1-based indices.

    Backward pairs ``(t, t-1)`` for t >= 2; with ``symmetric`` also forward
    pairs ``(t, t+1)`` for t < T.
    """
    T = len(video)
    keys = [(t, t - 1) for t in range(2, T + 1)]
    if symmetric:
        keys += [(t, t + 1) for t in range(1, T)]

    def make(key):
        t, r = key
        return build_pair(video[t - 1], video[r - 1], flow_cfg, occ_cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            built = list(pool.map(make, keys))
    else:
        built = [make(k) for k in keys]
    return dict(zip(keys, built))


def _ensure_pairs(video, pairs, flow_cfg, occ_cfg, symmetric, workers):
    needed = [(t, t - 1) for t in range(2, len(video) + 1)]
    if symmetric:
        needed += [(t, t + 1) for t in range(1, len(video))]
    pairs = {} if pairs is None else pairs
    missing = [k for k in needed if k not in pairs]
    if missing:
        fresh = compute_pairs(video, flow_cfg, occ_cfg, symmetric, workers)
        for k in missing:
            pairs[k] = fresh[k]
    return pairs


def _row(t, params, params0, frame, out, clean, label, **aux) -> MetricsRow:
    row = MetricsRow(t)
    if clean is not None:
        row.psnr_db = psnr(out, clean[t - 1])
        aux["psnr_pretrained"] = psnr(denoise(params0, frame), clean[t - 1])
    else:
        aux["psnr_pretrained"] = float("nan")
    aux["active_noise_spec"] = label(t) if label else ""
    aux["weights_checksum"] = params.checksum()
    row.aux = aux
    return row


# -- fine-tuning ---------------------------------------------------------------

def finetune_online(video: Sequence[np.ndarray], params0: ModelParams,
                    flow_cfg: FlowConfig = FlowConfig(), occ_cfg: OcclusionConfig = OcclusionConfig(),
                    cfg: FinetuneConfig = FinetuneConfig(), clean: Optional[Sequence[np.ndarray]] = None,
                    pairs: Optional[dict] = None, label: Optional[Callable[[int], str]] = None,
                    workers: int = 1, keep_history: bool = False) -> FinetuneResult:
    """Frame-by-frame fine-tuning; frame 1 is denoised with ``params0``.

    With ``cfg.symmetric`` the N steps of frame t alternate between the
    backward pair (t, t-1) and the forward pair (t, t+1). After
    ``cfg.freeze_after`` no more updates are made. Pairs whose mask is
    empty are skipped.
    """
    if len(video) < 2:
        raise DataError("fine-tuning needs at least 2 frames")
    pairs = _ensure_pairs(video, pairs, flow_cfg, occ_cfg, cfg.symmetric, workers)
    params = params0.copy()
    state = AdamState(lr=cfg.lr)
    update_running = not cfg.freeze_norm_stats and cfg.lr > 0
    T = len(video)

    out = denoise(params, video[0])
    denoised = [out]
    rows = [_row(1, params, params0, video[0], out, clean, label, loss_before=float("nan"),
                 loss_after=float("nan"), masked_fraction=float("nan"))]
    history = [params.copy()] if keep_history else []

    for t in range(2, T + 1):
        back = pairs[(t, t - 1)]
        candidates = [back]
        if cfg.symmetric and t < T:
            candidates.append(pairs[(t, t + 1)])
        candidates = [p for p in candidates if not p.skipped]
        frozen = cfg.freeze_after is not None and t > cfg.freeze_after
        loss_before = loss_after = float("nan")
        if candidates and not frozen and cfg.n_iters > 0:
            if not cfg.carry_adam:
                state = AdamState(lr=cfg.lr)
            try:
                for i in range(cfg.n_iters):
                    pair = candidates[i % len(candidates)]
                    value = train_step(params, state, pair.frame, pair.target, pair.mask,
                                       cfg.loss, update_running)
                    if i == 0:
                        loss_before = value
            except NumericalError as exc:
                raise NumericalError(f"frame {t}: {exc}") from exc
            loss_after = pair_loss(params, candidates[0], cfg.loss)
        elif not candidates:
            logger.info("frame %d: empty occlusion mask, no update", t)
        out = denoise(params, video[t - 1])
        denoised.append(out)
        rows.append(_row(t, params, params0, video[t - 1], out, clean, label,
                         loss_before=loss_before, loss_after=loss_after,
                         masked_fraction=back.masked_fraction))
        if keep_history:
            history.append(params.copy())
    return FinetuneResult(denoised, rows, params, history)


def finetune_offline(video: Sequence[np.ndarray], params0: ModelParams,
                     flow_cfg: FlowConfig = FlowConfig(), occ_cfg: OcclusionConfig = OcclusionConfig(),
                     cfg: FinetuneConfig = FinetuneConfig(mode="offline"),
                     clean: Optional[Sequence[np.ndarray]] = None, pairs: Optional[dict] = None,
                     label: Optional[Callable[[int], str]] = None, workers: int = 1,
                     epoch_losses: Optional[list] = None) -> FinetuneResult:
    """Whole-video fine-tuning: ``cfg.epochs`` shuffled passes, one Adam step per pair."""
    if len(video) < 2:
        raise DataError("fine-tuning needs at least 2 frames")
    pairs = _ensure_pairs(video, pairs, flow_cfg, occ_cfg, cfg.symmetric, workers)
    keys = [(t, t - 1) for t in range(2, len(video) + 1)]
    if cfg.symmetric:
        keys += [(t, t + 1) for t in range(1, len(video))]
    keys = [k for k in keys if not pairs[k].skipped]
    params = params0.copy()
    state = AdamState(lr=cfg.lr)
    update_running = not cfg.freeze_norm_stats and cfg.lr > 0
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    first_loss = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(keys))
        losses = []
        for j in order:
            pair = pairs[keys[j]]
            try:
                value = train_step(params, state, pair.frame, pair.target, pair.mask,
                                   cfg.loss, update_running)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch + 1}, pair {keys[j]}: {exc}") from exc
            first_loss.setdefault(keys[j], value)
            losses.append(value)
        if epoch_losses is not None:
            epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))

    denoised, rows = [], []
    for t in range(1, len(video) + 1):
        out = denoise(params, video[t - 1])
        denoised.append(out)
        if t >= 2:
            back = pairs[(t, t - 1)]
            aux = dict(loss_before=first_loss.get((t, t - 1), float("nan")),
                       loss_after=pair_loss(params, back, cfg.loss) if not back.skipped else float("nan"),
                       masked_fraction=back.masked_fraction)
        else:
            aux = dict(loss_before=float("nan"), loss_after=float("nan"), masked_fraction=float("nan"))
        rows.append(_row(t, params, params0, video[t - 1], out, clean, label, **aux))
    return FinetuneResult(denoised, rows, params)


def finetune(video, params0, flow_cfg=FlowConfig(), occ_cfg=OcclusionConfig(),
             cfg: FinetuneConfig = FinetuneConfig(), **kwargs) -> FinetuneResult:
    if cfg.mode == "online":
        return finetune_online(video, params0, flow_cfg, occ_cfg, cfg, **kwargs)
    return finetune_offline(video, params0, flow_cfg, occ_cfg, cfg, **kwargs)


def corrupt_video(clean: Sequence[np.ndarray], schedule, seed: int = 0) -> list[np.ndarray]:
    rng = SeededRng(seed)
    return [apply_noise(u, schedule_eval(schedule, t), rng, t) for t, u in enumerate(clean, start=1)]


def run_lifelong(clean: Sequence[np.ndarray], schedule, params0: ModelParams,
                 flow_cfg: FlowConfig = FlowConfig(), occ_cfg: OcclusionConfig = OcclusionConfig(),
                 cfg: FinetuneConfig = FinetuneConfig(), seed: int = 0, **kwargs) -> FinetuneResult:
    """Corrupt ``clean`` frame by frame following ``schedule`` and fine-tune online.

    Rows carry the active noise description and the PSNR of the frozen
    ``params0`` for comparison.
    """
    noisy = corrupt_video(clean, schedule, seed)
    label = kwargs.pop("label", lambda t: schedule_eval(schedule, t).describe())
    return finetune_online(noisy, params0, flow_cfg, occ_cfg, cfg, clean=clean, label=label, **kwargs)
