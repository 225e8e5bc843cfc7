"""Tiny convolutional backbone with a projection head and an EMA shadow.

Three stride-2 conv layers (relu after each) map a 32x32x3 image to a 4x4
feature map; global mean pooling gives the pooled feature v, and a 2-layer
perceptron followed by l2 normalization gives the contrastive embedding z.
Patch-level embeddings come from the same projection head, either by
box-weighted ROI pooling of the feature map or by re-encoding a bilinear
crop of the image. Forward passes build an autodiff graph when bound with
requires_grad; binding without gradients runs the identical numerics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataFormatError, DegenerateInputError, ShapeError
from .synth import PatchBox, crop_resize

ParamTensors = dict[str, ad.Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 32
    channels: tuple[int, int, int] = (16, 32, 64)
    kernel: int = 3
    d_proj: int = 32

    @property
    def feat_dim(self) -> int:
        return self.channels[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c0, c1, c2 = self.channels
        k = self.kernel
        d = self.feat_dim
        return {
            "conv1_w": (k, k, 3, c0),
            "conv1_b": (c0,),
            "conv2_w": (k, k, c0, c1),
            "conv2_b": (c1,),
            "conv3_w": (k, k, c1, c2),
            "conv3_b": (c2,),
            "fc1_w": (d, d),
            "fc1_b": (d,),
            "fc2_w": (d, self.d_proj),
            "fc2_b": (self.d_proj,),
        }


PARAM_ORDER = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b",
)


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvEncoder:
    """Parameter container; forward passes go through module-level functions."""

    def __init__(self, config: EncoderConfig, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        if params is not None:
            expected = config.param_shapes()
            for name in PARAM_ORDER:
                if params[name].shape != expected[name]:
                    raise ShapeError(
                        f"param {name}: expected {expected[name]}, got {params[name].shape}"
                    )
            self.params = {name: np.array(params[name], dtype=np.float64)
                           for name in PARAM_ORDER}
            return
        rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
        self.params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith("_b"):
                self.params[name] = np.zeros(shape)
            else:
                self.params[name] = _kaiming_uniform(rng, shape)

    def bind(self, requires_grad: bool = True) -> ParamTensors:
        return {name: ad.Tensor(arr, requires_grad=requires_grad)
                for name, arr in self.params.items()}

    def apply_gradients(self, bound: ParamTensors, update) -> None:
        """Call update(name, param_array, grad_array) for every parameter."""
        for name in PARAM_ORDER:
            grad = bound[name].grad
            if grad is None:
                grad = np.zeros_like(self.params[name])
            update(name, self.params[name], grad)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.params.items()}


# ---------------------------------------------------------------------------
# forward passes


def _as_batch(images) -> ad.Tensor:
    if isinstance(images, ad.Tensor):
        return images
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C) images, got shape {arr.shape}")
    return ad.Tensor(arr)


def conv_stack(pt: ParamTensors, images) -> ad.Tensor:
    """Feature map u: last conv activation, shape (N, H/8, W/8, C_feat)."""
    x = _as_batch(images)
    x = ad.relu(ad.conv2d(x, pt["conv1_w"], pt["conv1_b"], stride=2, padding=1))
    x = ad.relu(ad.conv2d(x, pt["conv2_w"], pt["conv2_b"], stride=2, padding=1))
    x = ad.relu(ad.conv2d(x, pt["conv3_w"], pt["conv3_b"], stride=2, padding=1))
    return x


def encode(pt: ParamTensors, images) -> tuple[ad.Tensor, ad.Tensor]:
    """Feature map u and its spatial mean v."""
    u = conv_stack(pt, images)
    return u, ad.spatial_mean(u)


def project(pt: ParamTensors, v: ad.Tensor) -> ad.Tensor:
    """Unit-norm embedding z = l2_normalize(perceptron(v))."""
    h = ad.relu(ad.add(ad.matmul(v, pt["fc1_w"]), pt["fc1_b"]))
    out = ad.add(ad.matmul(h, pt["fc2_w"]), pt["fc2_b"])
    return ad.l2_normalize(out)


def encode_project(pt: ParamTensors, images) -> ad.Tensor:
    _, v = encode(pt, images)
    return project(pt, v)


def roi_cell_weights(boxes: list[list[PatchBox]], grid_h: int, grid_w: int) -> np.ndarray:
    """Exact overlap-area weights of each box against the feature-map cells.

    Rows are normalized to sum to 1. A box with zero total overlap (possible
    only for degenerate boxes) raises DegenerateInputError.
    """
    n = len(boxes)
    l = len(boxes[0])
    edges_y = np.arange(grid_h + 1) / grid_h
    edges_x = np.arange(grid_w + 1) / grid_w
    weights = np.zeros((n, l, grid_h * grid_w))
    for i, row in enumerate(boxes):
        if len(row) != l:
            raise ShapeError(f"ragged box lists: {len(row)} vs {l}")
        for j, box in enumerate(row):
            oy = np.minimum(edges_y[1:], box.y1) - np.maximum(edges_y[:-1], box.y0)
            ox = np.minimum(edges_x[1:], box.x1) - np.maximum(edges_x[:-1], box.x0)
            cell = np.clip(oy, 0, None)[:, None] * np.clip(ox, 0, None)[None, :]
            total = cell.sum()
            if total <= 0:
                raise DegenerateInputError(f"box {box} overlaps no feature cells")
            weights[i, j] = (cell / total).reshape(-1)
    return weights


def roi_pool_project(pt: ParamTensors, u: ad.Tensor, boxes: list[list[PatchBox]]) -> ad.Tensor:
    """ROI-averaged patch embeddings, flattened to (N*L, d_proj) row-major."""
    n, h, w, c = u.shape
    wts = roi_cell_weights(boxes, h, w)
    pooled = ad.roi_avg_pool(u, wts)  # (N, L, C)
    return project(pt, ad.reshape(pooled, (n * len(boxes[0]), c)))


def embed_patch(pt: ParamTensors, images: np.ndarray, boxes: list[list[PatchBox]],
                out_size: int) -> ad.Tensor:
    """Crop boxes from images, re-encode, project: (N*L, d_proj) row-major."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    crops = np.stack([
        crop_resize(arr[i], box, out_size)
        for i in range(arr.shape[0])
        for box in boxes[i]
    ])
    return encode_project(pt, crops)


# ---------------------------------------------------------------------------
# EMA shadow


class EmaEncoder:
    """Shadow copy updated as shadow <- m*shadow + (1-m)*online."""

    def __init__(self, online: ConvEncoder, momentum: float = 0.999):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
        self.momentum = momentum
        self.config = online.config
        self.shadow = online.copy_params()

    def update(self, online_params: dict[str, np.ndarray]) -> None:
        m = self.momentum
        for name in PARAM_ORDER:
            if self.shadow[name].shape != online_params[name].shape:
                raise ShapeError(
                    f"ema {name}: shadow {self.shadow[name].shape} vs online "
                    f"{online_params[name].shape}"
                )
            self.shadow[name] *= m
            self.shadow[name] += (1.0 - m) * online_params[name]

    def bind(self) -> ParamTensors:
        # never requires_grad: no backward path may reach the shadow copy
        return {name: ad.Tensor(arr) for name, arr in self.shadow.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, encoder: ConvEncoder, seed: int, step_count: int) -> None:
    header = {
        "layer_shapes": {name: list(encoder.params[name].shape) for name in PARAM_ORDER},
        "d_proj": encoder.config.d_proj,
        "input_size": encoder.config.input_size,
        "channels": list(encoder.config.channels),
        "kernel": encoder.config.kernel,
        "seed": seed,
        "step_count": step_count,
    }
    blob = b"".join(
        np.ascontiguousarray(encoder.params[name], dtype="<f8").tobytes()
        for name in PARAM_ORDER
    )
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ConvEncoder, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line)
    config = EncoderConfig(
        input_size=header["input_size"],
        channels=tuple(header["channels"]),
        kernel=header["kernel"],
        d_proj=header["d_proj"],
    )
    expected = config.param_shapes()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name in PARAM_ORDER:
        shape = tuple(header["layer_shapes"][name])
        if shape != expected[name]:
            raise DataFormatError(
                f"checkpoint {name}: shape {shape} does not match config {expected[name]}"
            )
        size = int(np.prod(shape)) * 8
        chunk = blob[offset:offset + size]
        if len(chunk) != size:
            raise DataFormatError("checkpoint blob truncated")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise DataFormatError("checkpoint blob has trailing bytes")
    return ConvEncoder(config, params=params), header
