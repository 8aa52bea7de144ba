"""Alternate two-phase training: each batch first updates the contrastive
network on detached denoiser output, then updates the denoiser with the
contrastive network frozen.

All stochastic choices (batch order, query draws, negative pools) are pure
functions of (seed, step), so runs are reproducible and resuming from a
checkpoint is bit-identical to never having stopped.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import container
from .esau import EsauNet
from .imaging import Slice, foreground_mask, hu_window_normalize
from .losses import (
    global_loss,
    local_contrastive_loss,
    pixel_loss,
    sample_patch_queries,
    sample_pixel_queries,
)
from .mac import MacNet
from .params import module_to_arrays, arrays_to_module_, set_requires_grad_

# spawn_key namespaces for per-step randomness
_EPOCH_STREAM = 0
_SAMPLE_STREAM = 1
_DATA_STREAM = 2


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite; the step is aborted."""


@dataclass
class TrainConfig:
    """Every knob of the training run; mirrored one-to-one by the JSON config
    file.  Defaults are desk-scale (64x64 synthetic slices); the sampling
    counts are overridable up to the full-scale values."""

    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 4
    base_width: int = 8
    heads: int = 4
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-9
    beta1: float = 0.9
    beta2: float = 0.99
    lambda_pixel: float = 10.0
    weight_global: float = 1.0
    weight_local: float = 1.0
    tau: float = 0.07
    ema_momentum: float = 0.99
    n_pos_local: int = 16
    n_pos_global: int = 64
    n_neg: int = 24
    negative_radius: int = 7
    negative_pool: int = 64
    hu_window: tuple[float, float] = (-1000.0, 2000.0)
    foreground_threshold_hu: float = -500.0
    seed: int = 0
    grad_clip: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        for name in ("epochs", "batch_size", "base_width", "heads", "n_pos_local",
                     "n_pos_global", "n_neg", "negative_radius", "negative_pool"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr_max", "lr_min", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("weight_decay", "lambda_pixel", "weight_global", "weight_local"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must be in [0, 1]")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ConfigError("beta1 and beta2 must be in (0, 1)")
        lo, hi = self.hu_window
        if not lo < hi:
            raise ConfigError(f"hu_window lower bound must be below upper, got {self.hu_window}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when set")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["hu_window"] = list(self.hu_window)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "hu_window" in raw:
            raw["hu_window"] = tuple(raw["hu_window"])
        return cls(**raw)


def lr_schedule(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from lr_max at step 0 down to lr_min at total_steps."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    exp_avg: torch.Tensor,
    exp_avg_sq: torch.Tensor,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One decoupled-weight-decay adaptive-moment update (pure; ``step`` is
    the 1-based count including this update).  Returns the new parameter and
    moment tensors."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(param.shape)}")
    m = beta1 * exp_avg + (1.0 - beta1) * grad
    v = beta2 * exp_avg_sq + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new_param = param - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * param)
    return new_param, m, v


class AdamW:
    """Minimal AdamW over an explicit parameter list, with checkpointable
    state (first/second moments and the shared step count)."""

    def __init__(
        self,
        params: Sequence[torch.nn.Parameter],
        beta1: float = 0.9,
        beta2: float = 0.99,
        weight_decay: float = 1e-9,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.exp_avg = [torch.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        # in-place version of adamw_step, avoiding temporaries
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            g = p.grad
            if g is None:
                continue
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            if self.weight_decay:
                p.mul_(1.0 - lr * self.weight_decay)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.exp_avg, self.exp_avg_sq)):
            out[f"{prefix}m.{i:04d}"] = m.numpy()
            out[f"{prefix}v.{i:04d}"] = v.numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"{prefix}t"][0])
        for i in range(len(self.params)):
            m = torch.from_numpy(arrays[f"{prefix}m.{i:04d}"].copy())
            v = torch.from_numpy(arrays[f"{prefix}v.{i:04d}"].copy())
            if m.shape != self.params[i].shape:
                raise ValueError(f"optimizer moment {i} shape mismatch")
            self.exp_avg[i] = m
            self.exp_avg_sq[i] = v


@dataclass
class StepReport:
    step: int
    lr: float
    l_pixel: float
    l_global: float
    l_local: float
    l_total: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class TrainState:
    esau: EsauNet
    mac: MacNet
    opt_esau: AdamW
    opt_mac: AdamW
    step: int = 0


def _derived_seed(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, index)))


def new_train_state(config: TrainConfig) -> TrainState:
    esau = EsauNet(base_width=config.base_width, heads=config.heads)
    esau.reset_parameters(int(_derived_seed(config.seed, _DATA_STREAM, 0).integers(2 ** 62)))
    mac = MacNet(ema_momentum=config.ema_momentum)
    mac.reset_parameters(int(_derived_seed(config.seed, _DATA_STREAM, 1).integers(2 ** 62)))
    opt_esau = AdamW(esau.parameters(), config.beta1, config.beta2, config.weight_decay)
    opt_mac = AdamW(mac.trainable_parameters(), config.beta1, config.beta2, config.weight_decay)
    return TrainState(esau=esau, mac=mac, opt_esau=opt_esau, opt_mac=opt_mac, step=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, state: TrainState) -> None:
    arrays = {}
    arrays.update(module_to_arrays(state.esau, "esau."))
    arrays.update(module_to_arrays(state.mac, "mac."))
    arrays.update(state.opt_esau.state_arrays("opt_esau."))
    arrays.update(state.opt_mac.state_arrays("opt_mac."))
    arrays["meta.step"] = np.array([state.step], dtype=np.float32)
    arrays["meta.base_width"] = np.array([state.esau.base_width], dtype=np.float32)
    arrays["meta.heads"] = np.array([state.esau.heads], dtype=np.float32)
    arrays["meta.ema_momentum"] = np.array([state.mac.ema_momentum], dtype=np.float32)
    container.save_arrays(path, arrays)


def load_checkpoint(path: str | Path, config: TrainConfig) -> TrainState:
    arrays = container.load_arrays(path)
    if int(arrays["meta.base_width"][0]) != config.base_width:
        raise ValueError(
            f"checkpoint base_width {int(arrays['meta.base_width'][0])} "
            f"does not match config base_width {config.base_width}"
        )
    if int(arrays["meta.heads"][0]) != config.heads:
        raise ValueError("checkpoint head count does not match config")
    state = new_train_state(config)
    arrays_to_module_(state.esau, arrays, "esau.")
    arrays_to_module_(state.mac, arrays, "mac.")
    state.opt_esau.load_state_arrays(arrays, "opt_esau.")
    state.opt_mac.load_state_arrays(arrays, "opt_mac.")
    state.step = int(arrays["meta.step"][0])
    return state


def load_denoiser(path: str | Path) -> EsauNet:
    """Rebuild just the denoiser from a checkpoint, for inference."""
    arrays = container.load_arrays(path)
    net = EsauNet(base_width=int(arrays["meta.base_width"][0]), heads=int(arrays["meta.heads"][0]))
    arrays_to_module_(net, arrays, "esau.")
    net.eval()
    return net


# ---------------------------------------------------------------------------
# The two-phase step
# ---------------------------------------------------------------------------

def _check_finite(value: torch.Tensor, component: str, step: int, batch_index: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(
            f"non-finite {component} at step {step} (batch index {batch_index})"
        )


def _contrastive_terms(state, online_g, online_l, target_g, target_l, queries_g, queries_l,
                       config, rng=None, sets_g=None, sets_l=None):
    """Per-image global/local losses averaged over queries and over the
    batch.  When sets are given they are reused instead of re-selected, so
    both phases of one step see the same index sets.

    The loss operations sum over queries as written; the trainer normalizes
    by query count so the contrastive terms stay on a comparable scale to
    the weighted pixel loss regardless of the configured sampling counts.
    """
    mac = state.mac
    batch = online_l.shape[0]
    zero = online_l.new_zeros(())
    l_global, l_local = zero, zero
    out_g, out_l = [], []
    for b in range(batch):
        if config.weight_global > 0:
            lg, sg = global_loss(
                online_g[b], target_g[b],
                mac.online_projector, mac.target_projector, mac.predictor,
                queries_g[b], positive_sets=None if sets_g is None else sets_g[b],
            )
            _check_finite(lg, "l_global", state.step, b)
            l_global = l_global + lg / len(sg)
            out_g.append(sg)
        if config.weight_local > 0:
            ll, sl = local_contrastive_loss(
                online_l[b], target_l[b], mac.local_embedder, queries_l[b],
                rng=rng, tau=config.tau, radius=config.negative_radius,
                count=config.n_neg, pool_size=config.negative_pool,
                negative_sets=None if sets_l is None else sets_l[b],
            )
            _check_finite(ll, "l_local", state.step, b)
            l_local = l_local + ll / len(sl)
            out_l.append(sl)
    return l_global / batch, l_local / batch, out_g, out_l


def train_step(
    state: TrainState,
    batch_x: torch.Tensor,
    batch_y: torch.Tensor,
    batch_masks: np.ndarray,
    config: TrainConfig,
    total_steps: int,
    on_phase_end: Callable[[str, TrainState], None] | None = None,
) -> StepReport:
    """One alternate-optimization step on a (noisy, clean) batch.

    Phase 1 updates only the contrastive network, on detached denoiser
    output, then applies the EMA target update.  Phase 2 freezes the
    contrastive network and updates only the denoiser on the total loss.
    ``on_phase_end`` is invoked with ("mac"|"esau", state) after each phase.
    """
    lr = lr_schedule(state.step, total_steps, config.lr_max, config.lr_min)
    contrastive = config.weight_global > 0 or config.weight_local > 0

    y_pred = state.esau(batch_x)
    _check_finite(y_pred, "denoiser output", state.step, -1)

    sets_g = sets_l = None
    queries_g: list = []
    queries_l: list = []
    if contrastive:
        rng = _derived_seed(config.seed, _SAMPLE_STREAM, state.step)
        for b in range(batch_x.shape[0]):
            mask = batch_masks[b]
            queries_g.append(
                sample_patch_queries(mask, config.n_pos_global, rng)
                if config.weight_global > 0 else []
            )
            queries_l.append(
                sample_pixel_queries(mask, config.n_pos_local, rng)
                if config.weight_local > 0 else []
            )

        # Phase 1: contrastive network on detached denoiser output.
        target_g, target_l = state.mac.forward_target(batch_y)
        online_g, online_l = state.mac.forward_online(y_pred.detach())
        l_g1, l_l1, sets_g, sets_l = _contrastive_terms(
            state, online_g, online_l, target_g, target_l, queries_g, queries_l, config, rng=rng
        )
        mac_loss = config.weight_global * l_g1 + config.weight_local * l_l1
        state.opt_mac.zero_grad()
        mac_loss.backward()
        if config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(state.opt_mac.params, config.grad_clip)
        state.opt_mac.step(lr)
        state.mac.ema_update()
    if on_phase_end is not None:
        on_phase_end("mac", state)

    # Phase 2: denoiser update with the contrastive network frozen; the
    # index sets sampled in phase 1 are reused.
    for m in state.mac.online_modules():
        set_requires_grad_(m, False)
    try:
        if contrastive:
            target_g2, target_l2 = state.mac.forward_target(batch_y)
            online_g2, online_l2 = state.mac.forward_online(y_pred)
            l_g2, l_l2, _, _ = _contrastive_terms(
                state, online_g2, online_l2, target_g2, target_l2,
                queries_g, queries_l, config, sets_g=sets_g, sets_l=sets_l,
            )
        else:
            l_g2 = y_pred.new_zeros(())
            l_l2 = y_pred.new_zeros(())

        l_pix = y_pred.new_zeros(())
        for b in range(batch_x.shape[0]):
            lp = pixel_loss(y_pred[b:b + 1], batch_y[b:b + 1])
            _check_finite(lp, "l_pixel", state.step, b)
            l_pix = l_pix + lp
        l_pix = l_pix / batch_x.shape[0]

        esau_loss = (
            config.weight_global * l_g2
            + config.weight_local * l_l2
            + config.lambda_pixel * l_pix
        )
        state.opt_esau.zero_grad()
        esau_loss.backward()
        if config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(state.opt_esau.params, config.grad_clip)
        state.opt_esau.step(lr)
    finally:
        for m in state.mac.online_modules():
            set_requires_grad_(m, True)
    if on_phase_end is not None:
        on_phase_end("esau", state)

    report = StepReport(
        step=state.step,
        lr=lr,
        l_pixel=float(l_pix.item()),
        l_global=float(l_g2.item()),
        l_local=float(l_l2.item()),
        l_total=float(esau_loss.item()),
    )
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# The full loop
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    x: torch.Tensor          # (N, 1, H, W) windowed noisy
    y: torch.Tensor          # (N, 1, H, W) windowed clean
    masks: np.ndarray        # (N, H, W) foreground masks from the clean HU slices


def prepare_dataset(dataset: Sequence[tuple[Slice, Slice]], config: TrainConfig) -> PreparedData:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    shape = dataset[0][0].values.shape
    xs, ys, masks = [], [], []
    for i, (noisy, clean) in enumerate(dataset):
        if noisy.values.shape != shape or clean.values.shape != shape:
            raise ValueError(f"inconsistent slice shapes in the dataset (pair {i})")
        xs.append(hu_window_normalize(noisy, *config.hu_window).values)
        ys.append(hu_window_normalize(clean, *config.hu_window).values)
        masks.append(foreground_mask(clean, config.foreground_threshold_hu).values)
    x = torch.from_numpy(np.stack(xs).astype(np.float32)).unsqueeze(1)
    y = torch.from_numpy(np.stack(ys).astype(np.float32)).unsqueeze(1)
    return PreparedData(x=x, y=y, masks=np.stack(masks))


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    state: TrainState
    reports: list[StepReport]


def train(
    config: TrainConfig,
    dataset: Sequence[tuple[Slice, Slice]],
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the alternate-optimization loop over seeded shuffled batches.

    Writes ``config.json`` (the effective config), ``train_log.ndjson`` (one
    record per step: step, lr, l_pixel, l_global, l_local, l_total), periodic
    checkpoints when configured, and ``ckpt_final.ckpt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_dataset(dataset, config)
    n = data.x.shape[0]
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    if resume_from is not None:
        state = load_checkpoint(resume_from, config)
    else:
        state = new_train_state(config)
    if state.step > total_steps:
        raise ValueError(f"checkpoint step {state.step} is beyond total_steps {total_steps}")

    (out_dir / "config.json").write_text(config.to_json() + "\n", encoding="utf-8")
    log_path = out_dir / "train_log.ndjson"
    reports: list[StepReport] = []
    mode = "a" if resume_from is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        while state.step < total_steps:
            epoch = state.step // batches_per_epoch
            pos = state.step % batches_per_epoch
            perm = _derived_seed(config.seed, _EPOCH_STREAM, epoch).permutation(n)
            idx = perm[pos * config.batch_size:(pos + 1) * config.batch_size]
            report = train_step(
                state,
                data.x[idx], data.y[idx], data.masks[idx],
                config, total_steps,
            )
            reports.append(report)
            log.write(report.to_json() + "\n")
            log.flush()
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_step_{state.step:06d}.ckpt", state)

    ckpt_path = out_dir / "ckpt_final.ckpt"
    save_checkpoint(ckpt_path, state)
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path, state=state, reports=reports)
