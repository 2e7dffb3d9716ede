"""Voice-level estimator: frame-normalised log-mel in, positive level contour out."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dsp import MelConfig, MelSpectrogram, frame_normalize
from .modelio import FingerprintMismatch, ModelFormatError, read_container, write_container
from .recording import FactorTable

WIDTHS = (80, 100, 100, 100, 100, 100, 100, 100, 50, 1)
KERNELS = (3, 3, 1, 1, 1, 1, 1, 1, 1, 1)
VARIANTS = ("le", "ad")

# added to the softplus head so outputs stay > 0 even where softplus underflows
_POSITIVE_FLOOR = 1e-30


def _mel_values(mel) -> np.ndarray:
    return mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class EstimatorModel:
    """Stack of 1-d convolutions over frames with mel bins as channels.

    relu between layers, softplus on the single output channel.  Weights use
    seeded He-uniform initialisation; the head bias is set so that an
    all-zero last layer outputs ``init_output`` everywhere.
    """

    kind = "estimator"

    def __init__(
        self,
        mel_config: MelConfig | None = None,
        widths=WIDTHS,
        kernels=KERNELS,
        seed: int = 0,
        variant: str | None = None,
        init_output: float = 1.0,
    ):
        self.mel_config = mel_config or MelConfig()
        if len(widths) != len(kernels):
            raise ValueError(f"{len(widths)} widths but {len(kernels)} kernel sizes")
        if widths[-1] != 1:
            raise ValueError("the last layer must have a single output channel")
        if variant is not None and variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.widths = tuple(int(w) for w in widths)
        self.kernels = tuple(int(k) for k in kernels)
        self.variant = variant
        self.factors: FactorTable | None = FactorTable() if variant == "le" else None
        # power contours are divided by this before entering a loss
        self.power_ref = 1.0
        rng = np.random.default_rng(seed)
        self.weights: list[ad.Parameter] = []
        self.biases: list[ad.Parameter] = []
        cin = self.n_mels
        for i, (cout, k) in enumerate(zip(self.widths, self.kernels)):
            limit = math.sqrt(6.0 / (k * cin))
            self.weights.append(ad.Parameter(rng.uniform(-limit, limit, (k, cin, cout)), f"conv{i}/w"))
            self.biases.append(ad.Parameter(np.zeros(cout), f"conv{i}/b"))
            cin = cout
        self.biases[-1].data[:] = inverse_softplus(init_output)

    @property
    def n_mels(self) -> int:
        return self.mel_config.n_mels

    @property
    def receptive_field(self) -> int:
        return 1 + sum(k - 1 for k in self.kernels)

    def parameters(self) -> list[ad.Parameter]:
        params = [p for pair in zip(self.weights, self.biases) for p in pair]
        return params

    def __call__(self, mel) -> ad.Tensor:
        """Differentiable forward pass on ``[..., frames, n_mels]`` log-mels."""
        x = _mel_values(mel)
        if x.ndim not in (2, 3) or x.shape[-1] != self.n_mels:
            raise ad.ShapeError(f"mel has shape {x.shape}; model expects {self.n_mels} mel bins")
        h = ad.Tensor(frame_normalize(x))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.conv1d(h, w, b, activation="relu" if i < last else None)
        q = ad.add(ad.softplus(h), _POSITIVE_FLOOR)
        return ad.reshape(q, q.shape[:-1])

    def predict(self, mel) -> np.ndarray:
        return self(mel).data

    # ------------------------------------------------------------------ io

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "architecture": {"widths": list(self.widths), "kernels": list(self.kernels)},
            "mel_config": self.mel_config.to_dict(),
            "mel_fingerprint": self.mel_config.fingerprint(),
            "variant": self.variant,
            "power_ref": self.power_ref,
            "groups": self.factors.groups if self.factors is not None else [],
        }

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(p.name, p.data) for p in self.parameters()]
        if self.factors is not None and len(self.factors):
            out.append(("factors/log", np.array([float(p.data) for p in self.factors.parameters()])))
        return out


def forward(model: EstimatorModel, mel) -> np.ndarray:
    """Level contour (linear, one positive value per frame)."""
    return model.predict(mel)


def parameter_count(model) -> int:
    return int(sum(p.size for p in model.parameters()))


def save(model: EstimatorModel, path: str | Path) -> None:
    write_container(path, model.header(), model.tensors())


def load(path: str | Path, expected_config: MelConfig | None = None) -> EstimatorModel:
    header, tensors = read_container(path)
    if header.get("kind") != EstimatorModel.kind:
        raise ModelFormatError(f"{path}: holds a {header.get('kind')!r} model, not an estimator")
    try:
        config = MelConfig.from_dict(header["mel_config"])
        arch = header["architecture"]
        model = EstimatorModel(config, arch["widths"], arch["kernels"], variant=header.get("variant"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed header ({exc})") from exc
    if header.get("mel_fingerprint") != config.fingerprint():
        raise ModelFormatError(f"{path}: header fingerprint does not match its own mel config")
    if expected_config is not None and expected_config.fingerprint() != config.fingerprint():
        raise FingerprintMismatch(expected_config.fingerprint(), config.fingerprint())
    for p in model.parameters():
        if p.name not in tensors or tensors[p.name].shape != p.shape:
            raise ModelFormatError(f"{path}: missing or misshaped tensor {p.name!r}")
        p.data = tensors[p.name].copy()
    model.power_ref = float(header.get("power_ref", 1.0))
    groups = header.get("groups", [])
    if groups:
        logs = tensors.get("factors/log")
        if logs is None or logs.shape != (len(groups),):
            raise ModelFormatError(f"{path}: factor table does not match its group list")
        model.factors = FactorTable()
        for g, v in zip(groups, logs):
            model.factors.add(g, v)
    return model
