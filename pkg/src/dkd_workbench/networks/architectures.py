"""Network layouts and the ModelGraph that runs them

Convolutions are stride 1 with "same" padding, so only poolings change the
spatial size. The tapped layer output is flattened before it is returned.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
from typing import Iterator, Optional, Sequence

import numpy as np

from dkd_workbench.core import tensor as T
from dkd_workbench.core.tensor import Tensor
from dkd_workbench.errors import ShapeMismatchError
from dkd_workbench.models.models import (
    NUM_CLASSES,
    Architecture,
    LayerKind,
    LayerSpec,
)

logger = logging.getLogger(__name__)


def _conv(filters: int, size: int = 3) -> LayerSpec:
    return LayerSpec(kind=LayerKind.conv_relu, width=filters, kernel=[size, size])


def _dense(units: int) -> LayerSpec:
    return LayerSpec(kind=LayerKind.dense_relu, width=units)


POOL = LayerSpec(kind=LayerKind.max_pool)
GAP = LayerSpec(kind=LayerKind.global_avg_pool)
HEAD = LayerSpec(kind=LayerKind.softmax_head, width=NUM_CLASSES)

# (layers, input shape, default tap index)
ARCHITECTURES: dict[str, tuple[list[LayerSpec], tuple[int, int, int], int]] = {
    Architecture.mnist.value: (
        [_conv(32), _conv(32), POOL, _conv(64), _conv(64), POOL, _dense(200), _dense(200), HEAD],
        (1, 28, 28),
        7,
    ),
    Architecture.cifar10.value: (
        [
            _conv(96),
            _conv(96),
            _conv(96),
            POOL,
            _conv(192),
            _conv(192),
            _conv(192),
            POOL,
            _conv(192),
            _conv(192, 1),
            _conv(192, 1),
            GAP,
            HEAD,
        ],
        (3, 32, 32),
        11,
    ),
    Architecture.toy.value: ([_dense(32), HEAD], (1, 8, 8), 0),
    Architecture.lenet_small.value: (
        [_conv(6, 5), POOL, _conv(16, 5), POOL, _dense(120), _dense(84), HEAD],
        (1, 28, 28),
        5,
    ),
}


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ModelGraph:
    """An ordered layer stack with parameters and a latent tap

    Attributes:
        arch (str): Architecture name, or "custom"
        layers (list[LayerSpec]): The layer stack, ending in a softmax head
        input_shape (tuple[int, int, int]): Channels, height and width of one image
        tap_id (int): Index of the layer whose output is the latent vector
        params (list[Tensor]): Weights and biases, two per parametric layer
    """

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        input_shape: tuple[int, int, int],
        tap_id: int,
        params: Sequence[Tensor],
        arch: str = "custom",
    ):
        if not layers or layers[-1].kind != LayerKind.softmax_head:
            raise ValueError("a layer stack has to end in a softmax head")
        if layers[-1].width != NUM_CLASSES:
            raise ValueError(f"the softmax head needs {NUM_CLASSES} units")
        if not 0 <= tap_id < len(layers) - 1:
            raise ValueError(
                f"tap {tap_id} is not a hidden layer of a {len(layers)} layer stack"
            )
        self.arch = arch
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.tap_id = tap_id
        self.params = list(params)
        self._param_slots = self._assign_slots()

    def _assign_slots(self) -> list[Optional[int]]:
        slots: list[Optional[int]] = []
        cursor = 0
        for layer in self.layers:
            if layer.kind in (LayerKind.conv_relu, LayerKind.dense_relu, LayerKind.softmax_head):
                slots.append(cursor)
                cursor += 2
            else:
                slots.append(None)
        if cursor != len(self.params):
            raise ValueError(f"layer stack needs {cursor} parameter tensors, got {len(self.params)}")
        return slots

    @property
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params))

    @property
    def dtype(self) -> np.dtype:
        return self.params[0].dtype

    def freeze(self) -> None:
        for p in self.params:
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.params:
            p.requires_grad = True

    @contextlib.contextmanager
    def frozen(self) -> Iterator[ModelGraph]:
        """Temporarily stop recording parameter gradients"""
        previous = [p.requires_grad for p in self.params]
        self.freeze()
        try:
            yield self
        finally:
            for p, flag in zip(self.params, previous):
                p.requires_grad = flag

    def checksum(self) -> str:
        """SHA-256 over every parameter's shape and bytes"""
        digest = hashlib.sha256()
        for p in self.params:
            digest.update(str(p.shape).encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def copy(self) -> ModelGraph:
        params = [Tensor(p.data.copy(), requires_grad=p.requires_grad) for p in self.params]
        return ModelGraph(self.layers, self.input_shape, self.tap_id, params, self.arch)

    def forward(self, x: Tensor | np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        return forward_with_latent(self, x)

    def logits(self, x: Tensor | np.ndarray) -> Tensor:
        return forward_with_latent(self, x)[0]

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits without recording anything on the tape"""
        return self._batched(x, batch_size, 0)

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Softmax outputs without recording anything on the tape"""
        return self._batched(x, batch_size, 1)

    def latent(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Flattened tap activations without recording anything on the tape"""
        return self._batched(x, batch_size, 2)

    def _batched(self, x: np.ndarray, batch_size: int, which: int) -> np.ndarray:
        if len(x) == 0:
            width = latent_dim(self) if which == 2 else NUM_CLASSES
            return np.zeros((0, width), dtype=self.dtype)
        chunks = []
        with self.frozen():
            for start in range(0, len(x), batch_size):
                chunks.append(forward_with_latent(self, x[start : start + batch_size])[which].data)
        return np.concatenate(chunks, axis=0)

    def __repr__(self) -> str:
        return f"ModelGraph(arch={self.arch}, tap_id={self.tap_id}, parameters={self.parameter_count})"


def build_model(
    arch: Architecture | str,
    seed: int,
    tap_id: Optional[int] = None,
    dtype: str | type = np.float32,
) -> ModelGraph:
    """Build a network with He-uniform weights and zero biases

    Args:
        arch (Architecture | str): One of the known layouts
        seed (int): Seed of the weight initialization
        tap_id (Optional[int]): Latent layer index, None for the layout default
        dtype (str | type): Parameter precision

    Returns:
        ModelGraph: The initialized network

    Raises:
        ValueError: If the architecture is unknown
    """
    name = arch.value if isinstance(arch, Architecture) else str(arch)
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}, expected one of {sorted(ARCHITECTURES)}")
    layers, input_shape, default_tap = ARCHITECTURES[name]
    rng = np.random.default_rng(seed)
    params: list[Tensor] = []
    channels, height, width = input_shape
    flat: Optional[int] = None
    for layer in layers:
        if layer.kind == LayerKind.conv_relu:
            kh, kw = layer.kernel
            fan_in = channels * kh * kw
            w = _he_uniform(rng, (layer.width, channels, kh, kw), fan_in, dtype)
            params += [Tensor(w, requires_grad=True), Tensor(np.zeros(layer.width, dtype), requires_grad=True)]
            channels = layer.width
        elif layer.kind == LayerKind.max_pool:
            height, width = height // 2, width // 2
        elif layer.kind == LayerKind.global_avg_pool:
            height, width = 1, 1
            flat = channels
        else:
            fan_in = flat if flat is not None else channels * height * width
            w = _he_uniform(rng, (fan_in, layer.width), fan_in, dtype)
            params += [Tensor(w, requires_grad=True), Tensor(np.zeros(layer.width, dtype), requires_grad=True)]
            flat = layer.width
    tap = default_tap if tap_id is None else tap_id
    return ModelGraph(layers, input_shape, tap, params, arch=name)


def forward_with_latent(m: ModelGraph, x: Tensor | np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Run the stack and return logits, probabilities and the tapped latent

    Args:
        m (ModelGraph): The network
        x (Tensor | np.ndarray): A batch of images (N, C, H, W)

    Returns:
        tuple[Tensor, Tensor, Tensor]: Logits (N, 10), softmax probabilities
            (N, 10) and the flattened tap activation (N, latent_dim)

    Raises:
        ShapeMismatchError: If the images do not have the model's input shape
    """
    h = T.as_tensor(x)
    if h.ndim != 4 or tuple(h.shape[1:]) != m.input_shape:
        raise ShapeMismatchError(
            "forward", f"expected images of shape (N, {', '.join(map(str, m.input_shape))}), got {h.shape}"
        )
    latent: Optional[Tensor] = None
    logits: Optional[Tensor] = None
    for index, layer in enumerate(m.layers):
        slot = m._param_slots[index]
        if layer.kind == LayerKind.conv_relu:
            w, b = m.params[slot], m.params[slot + 1]
            h = T.relu(T.bias_add(T.conv2d(h, w, padding=layer.kernel[0] // 2), b))
        elif layer.kind == LayerKind.max_pool:
            h = T.max_pool2d(h, 2)
        elif layer.kind == LayerKind.global_avg_pool:
            h = T.global_avg_pool(h)
        else:
            if h.ndim != 2:
                h = T.flatten(h)
            w, b = m.params[slot], m.params[slot + 1]
            h = T.bias_add(T.matmul(h, w), b)
            if layer.kind == LayerKind.dense_relu:
                h = T.relu(h)
            else:
                logits = h
        if index == m.tap_id:
            latent = h if h.ndim == 2 else T.flatten(h)
    assert logits is not None and latent is not None
    return logits, T.softmax(logits), latent


def latent_dim(m: ModelGraph) -> int:
    """Size of the flattened tap activation"""
    blank = np.zeros((1,) + m.input_shape, dtype=m.dtype)
    return int(m.latent(blank).shape[1])
