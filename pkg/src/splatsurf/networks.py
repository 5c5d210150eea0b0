"""Appearance-transform CNN and transient-mask UNet.

Both are tiny fixed-architecture convolutional models running on the
autodiff engine.  The appearance model turns a heavily downsampled render
plus a per-image embedding into a positive multiplicative transform map;
the mask model scores each ground-truth pixel as static (1) or transient
(0).  Both start as exact no-ops: transform 1, mask 0.99.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from splatsurf import autodiff as ad
from splatsurf.autodiff import Tensor
from splatsurf.scene import logit

EMBEDDING_DIM = 32
CHANNELS = 16


def softplus_inv_exact(target: float) -> float:
    """Bias b with float64 softplus(b) == target exactly (searched in ulps)."""
    b = float(np.log(np.expm1(target)))
    for _ in range(64):
        got = float(np.logaddexp(0.0, b))
        if got == target:
            return b
        b = float(np.nextafter(b, np.inf if got < target else -np.inf))
    return b


def conv_init(rng, cout, cin):
    scale = np.sqrt(2.0 / (9 * cin))
    weight = ad.parameter(rng.normal(0.0, scale, size=(cout, cin, 3, 3)))
    bias = ad.parameter(np.zeros(cout))
    return weight, bias


def _pad_to_multiple(x: Tensor, multiple: int) -> Tensor:
    """Edge-replicate rows/columns so both spatial dims divide `multiple`."""
    h, w = x.shape[0], x.shape[1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph:
        x = ad.concatenate([x, x[np.full(ph, h - 1)]], axis=0)
    if pw:
        x = ad.concatenate([x, x[:, np.full(pw, w - 1)]], axis=1)
    return x


class _ParamModel:
    """Shared parameter bookkeeping: ordered dict, byte (de)serialization."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, tensor: Tensor) -> Tensor:
        self.params[name] = tensor
        return tensor

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_bytes(self) -> bytes:
        manifest = [(name, list(p.value.shape)) for name, p in self.params.items()]
        head = json.dumps(manifest).encode()
        payload = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes()
                           for p in self.params.values())
        return struct.pack("<I", len(head)) + head + payload

    def load_state_bytes(self, data: bytes):
        (head_len,) = struct.unpack_from("<I", data, 0)
        manifest = json.loads(data[4:4 + head_len].decode())
        offset = 4 + head_len
        for name, shape in manifest:
            if name not in self.params:
                raise ValueError(f"unknown network parameter {name!r}")
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=count,
                                offset=offset).reshape(shape)
            if tuple(shape) != self.params[name].value.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            self.params[name].value = arr.astype(np.float64).copy()
            offset += count * 8
        if offset != len(data):
            raise ValueError("trailing bytes in network checkpoint section")

    def clone(self):
        copy = type(self).__new__(type(self))
        copy.__dict__.update({k: v for k, v in self.__dict__.items()
                              if k != "params"})
        copy.params = {name: ad.parameter(p.value.copy())
                       for name, p in self.params.items()}
        return copy


class AppearanceModel(_ParamModel):
    """Per-image multiplicative transform from render + learned embedding.

    Pipeline: 16× average pooling of the render, embedding broadcast as
    extra channels, then 4 conv blocks interleaved with 2× bilinear
    upsampling back to full size, a 3-channel head, and softplus.  The head
    starts at softplus(bias) == 1 so training begins as an exact identity.
    """

    def __init__(self, num_images: int, seed: int = 0,
                 downsample: int = 16):
        super().__init__()
        if downsample & (downsample - 1):
            raise ValueError("downsample factor must be a power of two")
        self.downsample = downsample
        rng = np.random.default_rng(seed)
        self._add("embeddings",
                  ad.parameter(np.zeros((num_images, EMBEDDING_DIM))))
        cin = 3 + EMBEDDING_DIM
        for i in range(4):
            w, b = conv_init(rng, CHANNELS, cin)
            self._add(f"conv{i}.weight", w)
            self._add(f"conv{i}.bias", b)
            cin = CHANNELS
        head_w = ad.parameter(np.zeros((3, CHANNELS, 3, 3)))
        head_b = ad.parameter(np.full(3, softplus_inv_exact(1.0)))
        self._add("head.weight", head_w)
        self._add("head.bias", head_b)

    def _factor_for(self, h: int, w: int) -> int:
        factor = self.downsample
        if min(h, w) < 16:
            factor = 1
            while factor * 2 <= min(h, w) // 2:
                factor *= 2
        return max(factor, 1)

    def transform_map(self, rendered: Tensor, embedding_id: int) -> Tensor:
        h, w = rendered.shape[0], rendered.shape[1]
        factor = self._factor_for(h, w)
        x = _pad_to_multiple(rendered, factor)
        if factor > 1:
            x = ad.avg_pool2d(x, factor)
        emb = self.params["embeddings"][embedding_id].reshape(1, 1, EMBEDDING_DIM)
        emb_plane = emb + Tensor(np.zeros((x.shape[0], x.shape[1],
                                           EMBEDDING_DIM)))
        x = ad.concatenate([x, emb_plane], axis=2)
        stages = int(np.log2(factor))
        for i in range(4):
            x = ad.conv2d(x, self.params[f"conv{i}.weight"],
                          self.params[f"conv{i}.bias"]).silu()
            if i < stages:
                x = ad.upsample_bilinear(x, 2)
        for _ in range(4, stages):
            x = ad.upsample_bilinear(x, 2)
        x = ad.conv2d(x, self.params["head.weight"], self.params["head.bias"])
        return x[:h, :w].softplus()

    def __call__(self, rendered: Tensor, embedding_id: int):
        t_map = self.transform_map(rendered, embedding_id)
        return t_map, t_map * rendered


class TransientMaskModel(_ParamModel):
    """3-level UNet scoring ground-truth pixels as static (1)/transient (0)."""

    def __init__(self, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed ^ 0x5EED)
        specs = [("enc0", CHANNELS, 3), ("enc1", CHANNELS, CHANNELS),
                 ("bottleneck", CHANNELS, CHANNELS),
                 ("dec1", CHANNELS, 2 * CHANNELS),
                 ("dec0", CHANNELS, 2 * CHANNELS)]
        for name, cout, cin in specs:
            w, b = conv_init(rng, cout, cin)
            self._add(f"{name}.weight", w)
            self._add(f"{name}.bias", b)
        self._add("head.weight", ad.parameter(np.zeros((1, CHANNELS, 3, 3))))
        self._add("head.bias", ad.parameter(np.array([logit(0.99)])))

    def _block(self, name: str, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.params[f"{name}.weight"],
                         self.params[f"{name}.bias"]).silu()

    def __call__(self, gt_image) -> Tensor:
        x = ad.as_tensor(gt_image)
        h, w = x.shape[0], x.shape[1]
        if min(h, w) < 32:
            raise ValueError(f"mask model needs images >= 32px, got {h}x{w}")
        x = _pad_to_multiple(x, 4)
        e0 = self._block("enc0", x)
        e1 = self._block("enc1", ad.avg_pool2d(e0, 2))
        mid = self._block("bottleneck", ad.avg_pool2d(e1, 2))
        d1 = self._block("dec1", ad.concatenate(
            [ad.upsample_bilinear(mid, 2), e1], axis=2))
        d0 = self._block("dec0", ad.concatenate(
            [ad.upsample_bilinear(d1, 2), e0], axis=2))
        logits = ad.conv2d(d0, self.params["head.weight"],
                           self.params["head.bias"])
        mask = logits.sigmoid()
        return mask[:h, :w].reshape(h, w)
