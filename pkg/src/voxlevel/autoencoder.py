"""Toy conditional bottleneck auto-encoder for voice-level transformation.

The encoder squeezes each standardised log-mel frame into ``B`` code
channels; the decoder rebuilds the frame from the code plus three
conditioning channels: estimated voice level (dB), log-f0 and the voiced
flag.  Shifting the level channel at decode time changes the level of the
reconstruction.  There is no temporal downsampling, so code, conditioning
and mel stay frame-aligned.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dsp import MelConfig, MelSpectrogram
from .estimator import EstimatorModel
from .modelio import FingerprintMismatch, ModelFormatError, read_container, write_container
from .trainer import AdamState, TrainConfig, TrainResult, TrainState, run_loop, write_history

ENCODER_WIDTHS = (64, 64, 32)
DECODER_WIDTHS = (32, 64, 64)
N_COND = 3
MAX_DELTA_DB = 20.0
LEVEL_CLIP = 5.0


class ConditioningError(ValueError):
    pass


def model_id(model) -> str:
    """Short hash of a model's weights, used to tie an AE to its level model."""
    h = hashlib.sha256()
    for name, arr in model.tensors():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class CondStats:
    level_mean: float = 0.0
    level_std: float = 1.0
    f0_mean: float = 0.0
    f0_std: float = 1.0
    mel_mean: float = 0.0
    mel_std: float = 1.0


class AEModel:
    kind = "autoencoder"

    def __init__(self, mel_config: MelConfig | None = None, bottleneck: int = 8, n_cond: int = N_COND,
                 kernel: int = 3, seed: int = 0):
        if n_cond not in (0, N_COND):
            raise ValueError(f"n_cond must be 0 (unconditioned) or {N_COND}")
        if bottleneck < 1:
            raise ValueError("bottleneck width must be >= 1")
        self.mel_config = mel_config or MelConfig()
        self.bottleneck = int(bottleneck)
        self.n_cond = int(n_cond)
        self.kernel = int(kernel)
        self.stats = CondStats()
        self.level_model_id: str | None = None
        rng = np.random.default_rng(seed)
        n = self.mel_config.n_mels
        self.encoder = self._stack(rng, n, ENCODER_WIDTHS + (self.bottleneck,), "enc")
        self.decoder = self._stack(rng, self.bottleneck + self.n_cond, DECODER_WIDTHS + (n,), "dec")

    def _stack(self, rng, cin, widths, prefix):
        layers = []
        for i, cout in enumerate(widths):
            limit = math.sqrt(6.0 / (self.kernel * cin))
            w = ad.Parameter(rng.uniform(-limit, limit, (self.kernel, cin, cout)), f"{prefix}{i}/w")
            b = ad.Parameter(np.zeros(cout), f"{prefix}{i}/b")
            layers.append((w, b))
            cin = cout
        return layers

    def parameters(self) -> list[ad.Parameter]:
        return [p for w, b in self.encoder + self.decoder for p in (w, b)]

    @staticmethod
    def _run(layers, h):
        last = len(layers) - 1
        for i, (w, b) in enumerate(layers):
            h = ad.conv1d(h, w, b, activation="relu" if i < last else None)
        return h

    def encode(self, z) -> ad.Tensor:
        return self._run(self.encoder, ad.as_tensor(z))

    def decode(self, code, cond) -> ad.Tensor:
        code = ad.as_tensor(code)
        if self.n_cond:
            cond = np.asarray(cond, dtype=np.float64)
            if cond.shape[:-1] != code.shape[:-1] or cond.shape[-1] != self.n_cond:
                raise ConditioningError(f"conditioning {cond.shape} does not match code {code.shape}")
            code = ad.concat([code, cond], axis=-1)
        return self._run(self.decoder, code)

    def standardize(self, mel: np.ndarray) -> np.ndarray:
        return (mel - self.stats.mel_mean) / self.stats.mel_std

    def __call__(self, mel, cond) -> ad.Tensor:
        """Standardised reconstruction of ``mel`` (differentiable)."""
        return self.decode(self.encode(self.standardize(np.asarray(mel))), cond)

    # ------------------------------------------------------- conditioning

    def conditioning(self, level_model: EstimatorModel, item) -> np.ndarray:
        """``[frames, 3]`` conditioning for an item with ``mel``, ``f0``, ``voiced``."""
        return build_conditioning(level_model, item.mel, item.f0, item.voiced, self.stats, item.path)

    def transform(self, mel, cond, delta_db: float) -> np.ndarray:
        """Log-mel reconstructed with the level channel shifted by ``delta_db``."""
        return transform(self, mel, cond, delta_db)

    # ------------------------------------------------------------------ io

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "architecture": {"bottleneck": self.bottleneck, "n_cond": self.n_cond, "kernel": self.kernel,
                             "encoder": list(ENCODER_WIDTHS), "decoder": list(DECODER_WIDTHS)},
            "mel_config": self.mel_config.to_dict(),
            "mel_fingerprint": self.mel_config.fingerprint(),
            "stats": vars(self.stats),
            "level_model_id": self.level_model_id,
        }

    def tensors(self):
        return [(p.name, p.data) for p in self.parameters()]


def raw_level_db(level_model: EstimatorModel, mel) -> np.ndarray:
    return 10.0 * np.log10(level_model.predict(mel))


def build_conditioning(level_model, mel, f0, voiced, stats: CondStats, path="<mel>") -> np.ndarray:
    mel = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    T = mel.shape[0]
    if f0 is None:
        raise ConditioningError(f"{path}: conditioning needs an f0 contour")
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    if f0.shape != (T,) or voiced.shape != (T,):
        raise ConditioningError(f"{path}: mel has {T} frames but f0/voicing have {f0.shape[0]}/{voiced.shape[0]}")
    level = np.clip((raw_level_db(level_model, mel) - stats.level_mean) / stats.level_std, -LEVEL_CLIP, LEVEL_CLIP)
    lf0 = np.zeros(T)
    ok = voiced & (f0 > 0)
    lf0[ok] = (np.log(f0[ok]) - stats.f0_mean) / stats.f0_std
    return np.stack([level, lf0, voiced.astype(np.float64)], axis=-1)


def fit_stats(level_model, items) -> CondStats:
    levels, lf0s, mels = [], [], []
    for it in items:
        v = np.asarray(it.voiced, dtype=bool)
        if it.f0 is None:
            raise ConditioningError(f"{it.path}: conditioning needs an f0 contour")
        levels.append(raw_level_db(level_model, it.mel)[v])
        lf0s.append(np.log(it.f0[v & (it.f0 > 0)]))
        mels.append(it.mel.ravel())
    lv, lf, ml = np.concatenate(levels), np.concatenate(lf0s), np.concatenate(mels)
    if lv.size < 2 or lf.size < 2:
        raise ConditioningError("not enough voiced frames to fit conditioning statistics")
    return CondStats(float(lv.mean()), float(lv.std()) or 1.0, float(lf.mean()), float(lf.std()) or 1.0,
                     float(ml.mean()), float(ml.std()) or 1.0)


def transform(ae: AEModel, mel, cond, delta_db: float) -> np.ndarray:
    if not np.isfinite(delta_db) or abs(delta_db) > MAX_DELTA_DB:
        raise ValueError(f"delta_db {delta_db} outside [-{MAX_DELTA_DB}, {MAX_DELTA_DB}]")
    mel = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    code = ae.encode(ae.standardize(mel))
    cond = np.array(cond, dtype=np.float64)
    if ae.n_cond:
        # level channel is standardised dB: a shift of delta dB is delta / std
        cond[:, 0] += delta_db / ae.stats.level_std
    out = ae.decode(code, cond).data
    return out * ae.stats.mel_std + ae.stats.mel_mean


def ae_train_config(**overrides) -> TrainConfig:
    """Desk preset for the toy AE: 2k updates at a 10x higher learning rate."""
    base = dict(max_updates=2000, lr_init=1e-3, lr_min=1e-5)
    base.update(overrides)
    return TrainConfig.desk(**base)


def train_ae(items, level_model: EstimatorModel, config: TrainConfig | None = None, bottleneck: int = 8,
             conditioned: bool = True, out_dir=None) -> TrainResult:
    """Fit the AE on labelled items (mel, f0, voicing) with the level model frozen."""
    from .trainer import is_validation

    config = config or ae_train_config()
    config.validate()
    items = [it for it in items if it.mel.shape[0] >= config.crop_frames]
    if not items:
        raise ValueError(f"no file has at least {config.crop_frames} frames")
    for it in items:
        if it.mel.shape[1] != level_model.n_mels:
            raise ConditioningError(f"{it.path}: mel has {it.mel.shape[1]} bins, level model expects "
                                    f"{level_model.n_mels}")
    ae = AEModel(level_model.mel_config, bottleneck, N_COND if conditioned else 0, seed=config.seed)
    ae.stats = fit_stats(level_model, items)
    ae.level_model_id = model_id(level_model)
    conds = [ae.conditioning(level_model, it) for it in items]
    zs = [ae.standardize(it.mel) for it in items]
    val_idx = [i for i, it in enumerate(items) if is_validation(it.path)]
    train_idx = [i for i in range(len(items)) if i not in set(val_idx)]
    if not val_idx or not train_idx:
        val_idx = train_idx = list(range(len(items)))

    def draw(rng, pool, n):
        z, c = [], []
        for _ in range(n):
            i = pool[int(rng.integers(len(pool)))]
            s = int(rng.integers(zs[i].shape[0] - config.crop_frames + 1))
            z.append(zs[i][s:s + config.crop_frames])
            c.append(conds[i][s:s + config.crop_frames])
        return np.stack(z), np.stack(c)

    rng = np.random.default_rng([config.seed, 10])
    val_z, val_c = draw(np.random.default_rng([config.seed, 11]), val_idx, config.val_crops)

    def loss_on(z, c):
        rec = ae.decode(ae.encode(z), c)
        return ad.mean(ad.square(ad.sub(rec, z)))

    def batch_loss():
        return loss_on(*draw(rng, train_idx, config.batch_size)), []

    def val_loss():
        return loss_on(val_z, val_c).item()

    state = TrainState(lr=config.lr_init, adam=AdamState(config.beta1, config.beta2, config.eps))
    if config.max_updates == 0:
        return TrainResult(ae, [], np.zeros(0), state)
    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = partial(save, ae, out_dir / "ae_checkpoint.vxl")

    history, losses = run_loop(ae.parameters(), batch_loss, val_loss, config, state, checkpoint)
    if out_dir is not None:
        write_history(out_dir / "ae_history.csv", history)
    return TrainResult(ae, history, losses, state)


def reconstruction_error(ae: AEModel, level_model, items) -> float:
    """Mean squared error of standardised mels over whole files."""
    total, count = 0.0, 0
    for it in items:
        z = ae.standardize(it.mel)
        rec = ae.decode(ae.encode(z), ae.conditioning(level_model, it) if ae.n_cond else None).data
        total += float(np.sum((rec - z) ** 2))
        count += z.size
    return total / count


def save(ae: AEModel, path) -> None:
    write_container(path, ae.header(), ae.tensors())


def load(path, expected_config: MelConfig | None = None) -> AEModel:
    header, tensors = read_container(path)
    if header.get("kind") != AEModel.kind:
        raise ModelFormatError(f"{path}: holds a {header.get('kind')!r} model, not an auto-encoder")
    try:
        config = MelConfig.from_dict(header["mel_config"])
        arch = header["architecture"]
        ae = AEModel(config, arch["bottleneck"], arch["n_cond"], arch["kernel"])
        ae.stats = CondStats(**header["stats"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed header ({exc})") from exc
    if header.get("mel_fingerprint") != config.fingerprint():
        raise ModelFormatError(f"{path}: header fingerprint does not match its own mel config")
    if expected_config is not None and expected_config.fingerprint() != config.fingerprint():
        raise FingerprintMismatch(expected_config.fingerprint(), config.fingerprint())
    for p in ae.parameters():
        if p.name not in tensors or tensors[p.name].shape != p.shape:
            raise ModelFormatError(f"{path}: missing or misshaped tensor {p.name!r}")
        p.data = tensors[p.name].copy()
    ae.level_model_id = header.get("level_model_id")
    return ae
