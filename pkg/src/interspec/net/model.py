"""Two-branch convolutional regressor: a shared convolutional trunk feeding
one fully connected head for reflectance and one for the illuminant SPD."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from . import layers as L


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 10
    in_channels: int = 3
    c1: int = 32
    c2: int = 32
    c3: int = 128
    hidden: int = 200
    outputs: int = 61
    pool: str = "max"
    spd_branch: bool = True

    def __post_init__(self):
        if self.pool not in ("max", "avg"):
            raise ConfigError(f"unknown pooling '{self.pool}'")
        if min(self.c1, self.c2, self.c3, self.hidden, self.outputs, self.in_channels) < 1:
            raise ConfigError("layer widths must be positive")
        if self.trunk_size < 1:
            raise ConfigError(f"input size {self.input_size} collapses before the third convolution")

    @property
    def trunk_size(self) -> int:
        pooled = self.input_size // 2
        return L.conv_output_size(pooled, 3, 3, 0)

    @property
    def trunk_features(self) -> int:
        return self.trunk_size * self.trunk_size * self.c3

    def shapes(self) -> dict:
        """Parameter name -> shape, in canonical order."""
        sh = {
            "conv1.W": (5, 5, self.in_channels, self.c1), "conv1.b": (self.c1,),
            "conv2.W": (5, 5, self.c1, self.c2), "conv2.b": (self.c2,),
            "conv3.W": (3, 3, self.c2, self.c3), "conv3.b": (self.c3,),
        }
        heads = ("refl", "spd") if self.spd_branch else ("refl",)
        for h in heads:
            sh[f"{h}.fc1.W"] = (self.trunk_features, self.hidden)
            sh[f"{h}.fc1.b"] = (self.hidden,)
            sh[f"{h}.fc2.W"] = (self.hidden, self.outputs)
            sh[f"{h}.fc2.b"] = (self.outputs,)
        return sh

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


class NetworkParams(dict):
    """Ordered mapping of parameter name -> array, tagged with its config."""

    def __init__(self, config: NetworkConfig, arrays=None):
        super().__init__()
        self.config = config
        if arrays is not None:
            for name, shape in config.shapes().items():
                a = np.asarray(arrays[name])
                if a.shape != shape:
                    raise ShapeError(f"{name}: expected {shape}, got {a.shape}")
                self[name] = a

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.astype(dtype) for k, v in self.items()})

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.items()})

    def digest(self) -> str:
        h = hashlib.sha256(self.config.to_json().encode())
        for k in self.config.shapes():
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k]).tobytes())
        return h.hexdigest()


def _fans(shape):
    if len(shape) == 4:
        field = shape[0] * shape[1]
        return field * shape[2], field * shape[3]
    return shape[0], shape[1]


def init_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(shape)
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return NetworkParams(config, arrays)


def _check_input(params, x):
    cfg = params.config
    want = (cfg.input_size, cfg.input_size, cfg.in_channels)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"expected a batch of {want} images, got {x.shape}")


def forward_train(params: NetworkParams, x):
    """Forward pass keeping the caches backward needs."""
    x = np.asarray(x, dtype=params["conv1.W"].dtype)
    _check_input(params, x)
    cfg = params.config
    caches = {}
    h, caches["conv1"] = L.conv_forward(x, params["conv1.W"], params["conv1.b"], 1, 2)
    h, caches["relu1"] = L.relu_forward(h)
    h, caches["conv2"] = L.conv_forward(h, params["conv2.W"], params["conv2.b"], 1, 2)
    h, caches["relu2"] = L.relu_forward(h)
    h, caches["pool"] = L.pool_forward(h, 2, cfg.pool)
    h, caches["conv3"] = L.conv_forward(h, params["conv3.W"], params["conv3.b"], 3, 0)
    h, caches["relu3"] = L.relu_forward(h)
    feat = h.reshape(len(x), -1)
    caches["feat_shape"] = h.shape
    outs = {}
    for head in ("refl", "spd") if cfg.spd_branch else ("refl",):
        z, caches[f"{head}.fc1"] = L.dense_forward(feat, params[f"{head}.fc1.W"], params[f"{head}.fc1.b"])
        z, caches[f"{head}.relu"] = L.relu_forward(z)
        outs[head], caches[f"{head}.fc2"] = L.dense_forward(z, params[f"{head}.fc2.W"], params[f"{head}.fc2.b"])
    return outs.get("refl"), outs.get("spd"), caches


def forward(params: NetworkParams, x):
    """(reflectance, spd) raw outputs, each (B, outputs); spd is None when the
    illuminant branch is disabled."""
    r, e, _ = forward_train(params, x)
    return r, e


def backward_from_outputs(params: NetworkParams, caches, d_refl, d_spd=None) -> dict:
    """Backpropagate output gradients to every parameter."""
    cfg = params.config
    grads = {}
    dfeat = 0.0
    for head, dout in (("refl", d_refl), ("spd", d_spd)):
        if head == "spd" and not cfg.spd_branch:
            continue
        if dout is None:
            dout = np.zeros((caches["feat_shape"][0], cfg.outputs), dtype=params["conv1.W"].dtype)
        dz, grads[f"{head}.fc2.W"], grads[f"{head}.fc2.b"] = L.dense_backward(dout, caches[f"{head}.fc2"])
        dz = L.relu_backward(dz, caches[f"{head}.relu"])
        df, grads[f"{head}.fc1.W"], grads[f"{head}.fc1.b"] = L.dense_backward(dz, caches[f"{head}.fc1"])
        dfeat = dfeat + df
    dh = dfeat.reshape(caches["feat_shape"])
    dh = L.relu_backward(dh, caches["relu3"])
    dh, grads["conv3.W"], grads["conv3.b"] = L.conv_backward(dh, caches["conv3"])
    dh = L.pool_backward(dh, caches["pool"])
    dh = L.relu_backward(dh, caches["relu2"])
    dh, grads["conv2.W"], grads["conv2.b"] = L.conv_backward(dh, caches["conv2"])
    dh = L.relu_backward(dh, caches["relu1"])
    _, grads["conv1.W"], grads["conv1.b"] = L.conv_backward(dh, caches["conv1"], need_dx=False)
    return {k: grads[k] for k in cfg.shapes()}
