"""Per-field residual CNNs with the fine-grid flow map built in.

Time levels are stacked into the channel dimension: a trajectory of shape
(B, N, D) is split into its u, v and p blocks, each of shape (B, N, M_f),
and each block goes through its own network.  The interpolant is

    NN(x_c) = U1(x_c) + LearnFlow(U1(x_c)),
    LearnFlow(z) = U2(rows z_0, A z_0, A^2 z_0, ...).

Model file (little-endian)::

    b"SWEM"  u32 version  u32 N, L, D, s1, s2
    for each of the six UNets (u1, v1, p1, u2, v2, p2), for each of its 5 layers:
        f64 weight[out*in*k]   f64 bias[out]
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dynamics import FlowMap

MODEL_MAGIC = b"SWEM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4s6I")

FIELDS = ("u", "v", "p")
KERNELS = (3, 5, 7, 5, 3)


class ShapeError(ValueError):
    pass


def conv1d_circular(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """y[o, i] = bias[o] + sum_{c, j} w[o, c, j] x[c, (i + j - (k-1)/2) mod L].

    Accepts (C, L) or (B, C, L) input.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    out_ch, in_ch, k = weight.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {in_ch}")
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {k}")
    pad = (k - 1) // 2
    if pad > x.shape[-1]:
        raise ShapeError(f"signal length {x.shape[-1]} shorter than kernel half-width {pad}")
    if pad:
        x = torch.cat([x[..., -pad:], x, x[..., :pad]], dim=-1)
    y = F.conv1d(x, weight, bias)
    return y.squeeze(0) if squeeze else y


class ConvLayer(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ShapeError(f"kernel size must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.zeros(out_channels, in_channels, kernel_size, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=torch.float64))

    def forward(self, x):
        return conv1d_circular(x, self.weight, self.bias)

    def reset_parameters(self, rng: np.random.Generator):
        """Uniform fan-in weights on +-sqrt(1/(in*k)), zero bias."""
        bound = math.sqrt(1.0 / (self.in_channels * self.kernel_size))
        with torch.no_grad():
            self.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, tuple(self.weight.shape))))
            self.bias.zero_()


class UNet(nn.Module):
    """N -> s1 -> s2 -> s2 -> s1 -> N, kernels 3,5,7,5,3, ReLU on all but the last, plus skip."""

    def __init__(self, n_levels: int, s1: int, s2: int):
        super().__init__()
        path = (n_levels, s1, s2, s2, s1, n_levels)
        self.layers = nn.ModuleList(
            ConvLayer(path[i], path[i + 1], KERNELS[i]) for i in range(len(KERNELS)))

    def forward(self, x):
        skip = x
        for layer in self.layers[:-1]:
            x = torch.relu(layer(x))
        return self.layers[-1](x) + skip


def _split(x, m):
    return x[..., :m], x[..., m:2 * m], x[..., 2 * m:3 * m]


class FieldwiseUNet(nn.Module):
    """Three independent UNets acting on the u, v and p blocks of (B, N, D)."""

    def __init__(self, n_levels: int, s1: int, s2: int, num_elements: int):
        super().__init__()
        self.num_elements = num_elements
        self.nets = nn.ModuleDict({name: UNet(n_levels, s1, s2) for name in FIELDS})

    def forward(self, x):
        parts = _split(x, self.num_elements)
        return torch.cat([self.nets[name](part) for name, part in zip(FIELDS, parts)], dim=-1)


def flow_rows(x0: torch.Tensor, a: torch.Tensor, n_levels: int) -> torch.Tensor:
    """Stack x0, A x0, ..., A^{N-1} x0 along dim -2."""
    rows = [x0]
    for _ in range(n_levels - 1):
        rows.append(rows[-1] @ a.T)
    return torch.stack(rows, dim=-2)


class LearnFlow(nn.Module):
    def __init__(self, n_levels: int, s1: int, s2: int, flow: FlowMap):
        super().__init__()
        self.n_levels = n_levels
        self.unet2 = FieldwiseUNet(n_levels, s1, s2, flow.mesh.num_elements)
        # frozen: a buffer, never seen by the optimizer
        self.register_buffer("A", torch.as_tensor(flow.matrix, dtype=torch.float64))

    def forward(self, x):
        if x.shape[-1] != self.A.shape[0] or x.shape[-2] != self.n_levels:
            raise ShapeError(f"LearnFlow expects (..., {self.n_levels}, {self.A.shape[0]}), got {tuple(x.shape)}")
        return self.unet2(flow_rows(x[..., 0, :], self.A, self.n_levels))


class NeuralInterpolant(nn.Module):
    def __init__(self, n_levels: int, s1: int, s2: int, flow: FlowMap):
        super().__init__()
        self.n_levels, self.s1, self.s2 = n_levels, s1, s2
        self.num_elements = flow.mesh.num_elements
        self.stage1 = FieldwiseUNet(n_levels, s1, s2, self.num_elements)
        self.learnflow = LearnFlow(n_levels, s1, s2, flow)
        self._last_input = None
        self._last_output = None

    @property
    def dimension(self) -> int:
        return 3 * self.num_elements

    def forward(self, x_c):
        x_c = torch.as_tensor(x_c, dtype=torch.float64)
        if x_c.shape[-2:] != (self.n_levels, self.dimension):
            raise ShapeError(f"expected (..., {self.n_levels}, {self.dimension}), got {tuple(x_c.shape)}")
        z = self.stage1(x_c)
        out = z + self.learnflow(z)
        self._last_input, self._last_output = x_c, out
        return out

    def backward(self, grad_output) -> dict:
        """Accumulate d<grad_output, NN(x)>/dparams from the recorded forward pass.

        Gradients flow through A (by its transpose) but A itself gets none.
        """
        if self._last_output is None or not self._last_output.requires_grad:
            raise RuntimeError("backward() called before a forward pass was recorded")
        out, self._last_output = self._last_output, None
        out.backward(torch.as_tensor(grad_output, dtype=torch.float64))
        return {name: p.grad for name, p in self.named_parameters()}

    def conv_layers(self):
        """All ConvLayers in file/declaration order: u1, v1, p1, u2, v2, p2."""
        for block in (self.stage1, self.learnflow.unet2):
            for name in FIELDS:
                yield from block.nets[name].layers

    def reset_parameters(self, rng: np.random.Generator):
        for layer in self.conv_layers():
            layer.reset_parameters(rng)
        return self

    def zero_parameters(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def build_model(n_levels: int, s1: int, s2: int, flow: FlowMap,
                rng: np.random.Generator | None = None) -> NeuralInterpolant:
    """Fan-in initialised model, or all-zero weights when ``rng`` is None."""
    model = NeuralInterpolant(n_levels, s1, s2, flow)
    return model.reset_parameters(rng) if rng is not None else model


def save_model(model: NeuralInterpolant, path) -> Path:
    path = Path(path)
    header = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.n_levels, model.num_elements,
                                model.dimension, model.s1, model.s2)
    chunks = [header]
    for layer in model.conv_layers():
        chunks.append(layer.weight.detach().numpy().astype("<f8").tobytes())
        chunks.append(layer.bias.detach().numpy().astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def read_model_header(path) -> dict:
    raw = Path(path).read_bytes()[:_MODEL_HEADER.size]
    if len(raw) < _MODEL_HEADER.size:
        raise ShapeError(f"{path}: truncated model header")
    magic, version, n, length, dim, s1, s2 = _MODEL_HEADER.unpack(raw)
    if magic != MODEL_MAGIC:
        raise ShapeError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ShapeError(f"{path}: unsupported model version {version}")
    return {"n_levels": n, "length": length, "dimension": dim, "s1": s1, "s2": s2}


def load_model(path, flow: FlowMap) -> NeuralInterpolant:
    hdr = read_model_header(path)
    if hdr["dimension"] != flow.dimension or hdr["length"] * 3 != flow.dimension:
        raise ShapeError(f"{path}: model dimension {hdr['dimension']} (L={hdr['length']}) "
                         f"does not match flow map dimension {flow.dimension}")
    model = NeuralInterpolant(hdr["n_levels"], hdr["s1"], hdr["s2"], flow)
    raw = Path(path).read_bytes()
    off = _MODEL_HEADER.size
    with torch.no_grad():
        for layer in model.conv_layers():
            for p in (layer.weight, layer.bias):
                n = p.numel()
                chunk = np.frombuffer(raw, "<f8", n, off) if off + 8 * n <= len(raw) else None
                if chunk is None:
                    raise ShapeError(f"{path}: file too short for declared architecture")
                p.copy_(torch.from_numpy(chunk.reshape(tuple(p.shape)).copy()))
                off += 8 * n
    if off != len(raw):
        raise ShapeError(f"{path}: {len(raw) - off} trailing bytes after weights")
    return model
