"""Desk-scale trainer for the demo denoisers.

Runs plain SGD on an MSE loss over phantom pairs, starting from a
:class:`ModelSpec` (the random-weight demo model by default), and exports
the trained weights back into the same layer layout. Needs the optional
``train`` extra (torch).
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from cipherdenoise.ciphertensor import PlainTensor
from cipherdenoise.encoding import DEFAULT_FRAC_BITS
from cipherdenoise.errors import TrainingError
from cipherdenoise.model import INPUT_SOURCE, LayerKind, ModelSpec, demo_model, infer_plain_float
from cipherdenoise.phantom import PhantomPair, psnr

try:
    import torch
    import torch.nn.functional as F
    from torch import nn
except ImportError:  # pragma: no cover - optional extra
    torch = None  # type: ignore[assignment]

logger = logging.getLogger(__name__)

MAX_PAIRS = 500
MAX_SIDE = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    channels: int = 8
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must not be negative")


@dataclass
class TrainingRun:
    model: ModelSpec
    losses: list[float] = field(default_factory=list)


def _require_torch() -> None:
    if torch is None:
        raise TrainingError("training needs torch: install cipherdenoise[train]")


def _stack(pairs: Sequence[PhantomPair]) -> tuple[np.ndarray, np.ndarray]:
    if not pairs:
        raise TrainingError("no training pairs")
    if len(pairs) > MAX_PAIRS:
        raise TrainingError(f"{len(pairs)} pairs exceeds the desk-scale limit of {MAX_PAIRS}")
    shape = pairs[0].noisy.shape
    if len(shape) != 2 or max(shape) > MAX_SIDE:
        raise TrainingError(f"pairs must be 2-D slices no wider than {MAX_SIDE}, got {shape}")
    for pair in pairs:
        if pair.noisy.shape != shape or pair.clean.shape != shape:
            raise TrainingError("all pairs must share one image shape")
    noisy = np.stack([p.noisy for p in pairs])[:, None].astype(np.float64)
    clean = np.stack([p.clean for p in pairs])[:, None].astype(np.float64)
    return noisy, clean


if torch is not None:

    class _Network(nn.Module):
        """Differentiable twin of a ModelSpec's layer stack."""

        def __init__(self, spec: ModelSpec) -> None:
            super().__init__()
            self.spec = spec
            self.weights = nn.ParameterList()
            self.biases = nn.ParameterList()
            self.slots: dict[int, int] = {}
            for index, layer in enumerate(spec.layers):
                if layer.kind.has_weights:
                    assert layer.weight is not None and layer.bias is not None
                    self.slots[index] = len(self.weights)
                    self.weights.append(nn.Parameter(torch.from_numpy(layer.weight.copy())))
                    self.biases.append(nn.Parameter(torch.from_numpy(layer.bias.copy())))

        def forward(self, image: "torch.Tensor") -> "torch.Tensor":
            outputs: list[torch.Tensor] = []
            x = image
            for index, layer in enumerate(self.spec.layers):
                if layer.kind.has_weights:
                    weight = self.weights[self.slots[index]]
                    bias = self.biases[self.slots[index]]
                    if layer.kind is LayerKind.CONV:
                        x = F.conv2d(x, weight, bias, stride=layer.stride, padding=layer.padding)
                    elif layer.kind is LayerKind.CONV_TRANSPOSE:
                        x = F.conv_transpose2d(
                            x, weight, bias, stride=layer.stride, padding=layer.padding
                        )
                    else:
                        x = F.linear(x.flatten(1), weight, bias)[:, :, None, None]
                elif layer.kind is LayerKind.RELU:
                    x = x * (x >= layer.threshold)
                elif layer.kind is LayerKind.LEAKY_RELU:
                    x = F.leaky_relu(x, layer.alpha)
                else:
                    x = x + (image if layer.source == INPUT_SOURCE else outputs[layer.source])
                outputs.append(x)
            return x

        def export(self) -> ModelSpec:
            layers = []
            for index, layer in enumerate(self.spec.layers):
                if index in self.slots:
                    slot = self.slots[index]
                    layer = replace(
                        layer,
                        weight=self.weights[slot].detach().numpy().copy(),
                        bias=self.biases[slot].detach().numpy().copy(),
                    )
                layers.append(layer)
            return replace(self.spec, layers=tuple(layers))


def fit(
    pairs: Sequence[PhantomPair],
    config: TrainConfig | None = None,
    initial: ModelSpec | None = None,
) -> TrainingRun:
    """Train and keep the per-epoch mean loss history."""
    _require_torch()
    config = config or TrainConfig()
    noisy, clean = _stack(pairs)
    input_shape = (1, *noisy.shape[2:])
    if initial is None:
        initial = demo_model(config.seed, config.channels, input_shape, config.frac_bits)
    elif initial.input_shape != input_shape:
        initial = replace(initial, input_shape=input_shape)

    network = _Network(initial)
    optimizer = torch.optim.SGD(
        network.parameters(), lr=config.learning_rate, momentum=config.momentum
    )
    inputs = torch.from_numpy(noisy)
    targets = torch.from_numpy(clean)
    order_rng = np.random.default_rng(config.seed)
    losses: list[float] = []

    for epoch in range(config.epochs):
        order = order_rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = torch.from_numpy(order[start : start + config.batch_size])
            optimizer.zero_grad()
            loss = F.mse_loss(network(inputs[batch]), targets[batch])
            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged to {value} in epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += value * len(batch)
        losses.append(total / len(order))
        logger.debug("[cipherdenoise] epoch %d loss %.6g", epoch, losses[-1])

    logger.info(
        "[cipherdenoise] Trained %s for %d epochs, final loss %.6g",
        initial.name,
        config.epochs,
        losses[-1],
    )
    return TrainingRun(network.export(), losses)


def train_demo(
    pairs: Sequence[PhantomPair],
    config: TrainConfig | None = None,
    initial: ModelSpec | None = None,
) -> ModelSpec:
    return fit(pairs, config, initial).model


def evaluate_psnr(model: ModelSpec, pairs: Sequence[PhantomPair]) -> tuple[float, float]:
    """Mean (noisy, denoised) PSNR against the clean images, float engine."""
    before: list[float] = []
    after: list[float] = []
    for pair in pairs:
        output = infer_plain_float(model, PlainTensor.reals(pair.noisy[None]))
        before.append(psnr(pair.clean, pair.noisy))
        after.append(psnr(pair.clean, np.clip(output.data[0], 0.0, 1.0)))
    return float(np.mean(before)), float(np.mean(after))
