"""Adam, the plateau learning-rate schedule and the estimator training loop."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dsp import MelConfig, mel_spectrogram, power_contour, read_wav, resample
from .estimator import EstimatorModel, save
from .manifest import Manifest, ManifestError
from .recording import learned_factor_loss, scalar_product_loss

log = logging.getLogger(__name__)

MIN_CONTOUR_FRAMES = 5
# crops quieter than -80 dB mean power are redrawn
SILENT_CROP_POWER = 1e-8
VAL_FRACTION_MOD = 10


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    def __init__(self, name: str, update: int):
        super().__init__(f"non-finite gradient in {name!r} at update {update}")
        self.name = name
        self.update = update


@dataclass
class TrainConfig:
    batch_size: int = 256
    crop_frames: int = 80
    max_updates: int = 500_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_init: float = 1e-4
    lr_decay_factor: float = 0.1 ** 0.25
    plateau_patience_updates: int = 16_000
    lr_min: float = 1e-6
    seed: int = 0
    validation_interval: int = 1000
    val_crops: int = 64
    # learning-rate multiplier for the per-group log factors; a single scalar per
    # group sees far smaller steps than it needs at the network's rate
    factor_lr_scale: float = 30.0

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=32, max_updates=20_000, validation_interval=500)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        for name in ("batch_size", "crop_frames", "lr_init", "lr_min", "validation_interval", "val_crops",
                     "eps", "plateau_patience_updates", "factor_lr_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_updates < 0:
            raise ValueError("max_updates must be >= 0")
        if not self.lr_min < self.lr_init:
            raise ValueError(f"lr_min {self.lr_min} must be below lr_init {self.lr_init}")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.crop_frames < MIN_CONTOUR_FRAMES:
            raise ValueError(f"crop_frames must be at least {MIN_CONTOUR_FRAMES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in names:
                raise ValueError(f"unknown training option {k!r}")
            out[k] = float(v) if names[k] == "float" else int(v)
        return cls(**out)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, update: int = 0) -> None:
    """In-place Adam update with bias correction.

    Each parameter keeps its own step count, so a parameter that sits out a
    step (a factor whose group is absent from the batch) is left bit-unchanged
    and its moments do not decay.
    """
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} does not match parameter {p.name} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(p.name, update)
    b1, b2 = state.beta1, state.beta2
    for p, g in zip(params, grads):
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
            state.t[key] = 0
        t = state.t[key] = state.t[key] + 1
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainState:
    lr: float
    update: int = 0
    best_val: float = math.inf
    best_update: int = 0
    adam: AdamState = field(default_factory=AdamState)


def plateau_schedule(state: TrainState, validation_loss: float, config: TrainConfig) -> float:
    """Decay the learning rate when validation has not improved for the patience window."""
    if validation_loss < state.best_val:
        state.best_val = validation_loss
        state.best_update = state.update
    elif state.update - state.best_update > config.plateau_patience_updates:
        state.lr = max(state.lr * config.lr_decay_factor, config.lr_min)
        state.best_update = state.update
    return state.lr


# ---------------------------------------------------------------- data


@dataclass
class FileFeatures:
    path: str
    mel: np.ndarray
    power: np.ndarray
    group: str | None = None

    @property
    def frames(self) -> int:
        return self.power.size


def load_clip(path, config: MelConfig):
    clip = read_wav(path)
    if clip.sample_rate != config.sample_rate:
        clip = resample(clip, config.sample_rate)
    return clip


def compute_features(manifest: Manifest, config: MelConfig, threads: int = 1) -> list[FileFeatures]:
    def one(row):
        clip = load_clip(manifest.resolve(row.path), config)
        mel = mel_spectrogram(clip, config).values
        p = power_contour(clip, config, config.power_mode)
        return FileFeatures(row.path, mel, p, row.group)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, manifest.rows))
    return [one(r) for r in manifest.rows]


def is_validation(path: str) -> bool:
    """Fixed 10% split: sha1 of the manifest path, modulo 10, equal to 0."""
    return int(hashlib.sha1(path.encode()).hexdigest(), 16) % VAL_FRACTION_MOD == 0


def split_files(feats: list[FileFeatures]):
    val = [f for f in feats if is_validation(f.path)]
    train = [f for f in feats if not is_validation(f.path)]
    if not val or not train:
        log.warning("corpus too small for a held-out split; validating on training files")
        return list(feats), list(feats)
    return train, val


class CropSampler:
    """Random fixed-length crops; selection depends only on the seeded RNG."""

    def __init__(self, feats: list[FileFeatures], crop_frames: int, rng: np.random.Generator):
        self.feats = feats
        self.crop = crop_frames
        self.rng = rng

    def draw(self, n: int, pool=None):
        pool = self.feats if pool is None else pool
        mels, ps, idx = [], [], []
        for _ in range(n):
            for _attempt in range(1000):
                i = int(self.rng.integers(len(pool)))
                f = pool[i]
                s = int(self.rng.integers(f.frames - self.crop + 1))
                p = f.power[s:s + self.crop]
                if p.mean() >= SILENT_CROP_POWER:
                    break
            else:
                raise TrainingError("could not find a non-silent crop in 1000 draws")
            mels.append(f.mel[s:s + self.crop])
            ps.append(p)
            idx.append(f)
        return np.stack(mels), np.stack(ps), idx


def check_corpus(feats: list[FileFeatures], config: TrainConfig) -> None:
    if not feats:
        raise ManifestError("manifest is empty")
    short = [f for f in feats if f.frames < config.crop_frames]
    if len(short) == len(feats):
        raise TrainingError(f"crop of {config.crop_frames} frames is longer than every file "
                            f"(longest has {max(f.frames for f in feats)} frames)")
    if short:
        log.warning("%d files shorter than one crop are skipped", len(short))


# ---------------------------------------------------------------- training


def batch_objective(model: EstimatorModel, mel, p, groups=None):
    """Mean batch loss for the model's variant and the factor parameters it touches.

    Only the factors of groups present in the batch enter the graph, so the
    others get no gradient and are skipped by the optimiser.
    """
    q = model(mel)
    pn = np.asarray(p) / model.power_ref
    if model.variant != "le":
        return ad.mean(scalar_product_loss(pn, q)), []
    present = sorted(set(groups))
    gparams = [model.factors.param(g) for g in present]
    logs = ad.concat([ad.reshape(gp, (1,)) for gp in gparams], axis=0)
    idx = np.array([present.index(g) for g in groups])
    return ad.mean(learned_factor_loss(pn, q, ad.take(logs, idx))), gparams


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    train_losses: np.ndarray
    state: TrainState


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "train_loss", "val_loss", "lr"])
        for row in history:
            w.writerow([row["update"], repr(float(row["train_loss"])), repr(float(row["val_loss"])), repr(float(row["lr"]))])


def run_loop(params, batch_loss, val_loss, config: TrainConfig, state: TrainState,
             checkpoint=None) -> tuple[list[dict], np.ndarray]:
    """Generic update loop.

    ``batch_loss()`` builds one batch under an active tape and returns
    ``(loss_tensor, extra_params)``; the extra parameters (e.g. the factors
    of the groups present) are stepped alongside ``params``.
    """
    history: list[dict] = []
    losses = np.zeros(config.max_updates)
    v0 = val_loss()
    plateau_schedule(state, v0, config)
    history.append({"update": 0, "train_loss": float("nan"), "val_loss": v0, "lr": state.lr})
    last = 0
    for k in range(1, config.max_updates + 1):
        state.update = k
        with ad.Tape():
            loss, extra = batch_loss()
            active = list(params) + list(extra)
            for p in active:
                p.zero_grad()
            ad.backward(loss)
        losses[k - 1] = loss.item()
        adam_step(params, [p.grad for p in params], state.adam, state.lr, k)
        if extra:
            adam_step(extra, [p.grad for p in extra], state.adam, state.lr * config.factor_lr_scale, k)
        if k % config.validation_interval == 0 or k == config.max_updates:
            v = val_loss()
            plateau_schedule(state, v, config)
            history.append({"update": k, "train_loss": float(losses[last:k].mean()), "val_loss": v, "lr": state.lr})
            last = k
            log.info("update %d train %.5f val %.5f lr %.3g", k, history[-1]["train_loss"], v, state.lr)
            if checkpoint is not None:
                checkpoint()
    return history, losses


def train_estimator(manifest: Manifest, variant: str, config: TrainConfig | None = None,
                    mel_config: MelConfig | None = None, out_dir=None, threads: int = 1,
                    features: list[FileFeatures] | None = None) -> TrainResult:
    """Train an estimator with the learned-factor (``le``) or adaptive (``ad``) loss."""
    config = config or TrainConfig.desk()
    config.validate()
    variant = variant.lower()
    if variant not in ("le", "ad"):
        raise ValueError(f"unknown variant {variant!r}; expected 'le' or 'ad'")
    mel_config = mel_config or MelConfig()
    if not len(manifest):
        raise ManifestError("manifest is empty")
    if variant == "le":
        manifest.require("group")
    feats = features if features is not None else compute_features(manifest, mel_config, threads)
    check_corpus(feats, config)
    feats = [f for f in feats if f.frames >= config.crop_frames]
    train, val = split_files(feats)

    model = EstimatorModel(mel_config, seed=config.seed, variant=variant)
    model.power_ref = float(np.mean(np.concatenate([f.power for f in train])))
    state = TrainState(lr=config.lr_init, adam=AdamState(config.beta1, config.beta2, config.eps))
    sampler = CropSampler(train, config.crop_frames, np.random.default_rng([config.seed, 0]))
    val_mel, val_p, val_src = CropSampler(val, config.crop_frames, np.random.default_rng([config.seed, 1])).draw(config.val_crops)

    if variant == "le":
        init_rng = CropSampler(feats, config.crop_frames, np.random.default_rng([config.seed, 2]))
        for g in sorted({f.group for f in feats}):
            mel, p, _ = init_rng.draw(config.batch_size, [f for f in feats if f.group == g])
            q0 = model.predict(mel)
            model.factors.add(g, math.log(p.mean() / model.power_ref / q0.mean()))

    def loss_on(mel, p, src):
        return batch_objective(model, mel, p, [f.group for f in src])

    def batch_loss():
        return loss_on(*sampler.draw(config.batch_size))

    def val_loss():
        total = 0.0
        for s in range(0, len(val_src), config.batch_size):
            sl = slice(s, s + config.batch_size)
            total += loss_on(val_mel[sl], val_p[sl], val_src[sl])[0].item() * len(val_src[sl])
        return total / len(val_src)

    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = partial(save, model, out_dir / "checkpoint.vxl")

    if config.max_updates == 0:
        return TrainResult(model, [], np.zeros(0), state)
    history, losses = run_loop(model.parameters(), batch_loss, val_loss, config, state, checkpoint)
    if out_dir is not None:
        write_history(out_dir / "history.csv", history)
    return TrainResult(model, history, losses, state)
