"""Edge-conditioned MPNN (encoder, kernel network, decoder) and a GCN baseline."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"DSMP"
CHECKPOINT_VERSION = 1
_PRECISION_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _PRECISION_TAGS.items()}


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    d_in: int = 3
    d_e: int = 3
    d_out: int = 1
    d_latent: int = 32
    w_hidden: int = 128
    w_kernel: int = 64


class ModelParams(dict):
    """Ordered name -> Tensor mapping; all entries require gradients."""

    def __init__(self, spec, tensors: dict[str, Tensor]):
        super().__init__(tensors)
        self.spec = spec

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1) for t in self.values()
        ])

    def set_flat_grad(self, flat: np.ndarray) -> None:
        k = 0
        for t in self.values():
            n = t.data.size
            t.grad = flat[k:k + n].reshape(t.shape).astype(t.dtype, copy=True)
            k += n

    def flat_data(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.values()])

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {
            k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.items()
        })

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.spec, {
            k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.items()
        })


def _linear_init(rng, fan_in: int, fan_out: int, dtype, gain: float = 1.0):
    bound = gain / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype)
    return w, b


def _mlp_params(prefix: str, widths: list[int], rng, dtype, last_gain: float = 1.0) -> dict[str, Tensor]:
    out = {}
    n_layers = len(widths) - 1
    for k in range(n_layers):
        gain = last_gain if k == n_layers - 1 else 1.0
        w, b = _linear_init(rng, widths[k], widths[k + 1], dtype, gain)
        out[f"{prefix}.{k}.w"] = Tensor(w, requires_grad=True, name=f"{prefix}.{k}.w")
        out[f"{prefix}.{k}.b"] = Tensor(b, requires_grad=True, name=f"{prefix}.{k}.b")
    return out


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    d_l = spec.d_latent
    tensors: dict[str, Tensor] = {}
    tensors.update(_mlp_params("enc", [spec.d_in, spec.w_hidden, spec.w_hidden, d_l], rng, dtype))
    # kernel rows are summed over d_L latent entries; shrink so messages start O(|v|)
    tensors.update(_mlp_params("kernel", [spec.d_e, spec.w_kernel, spec.w_kernel, d_l * d_l], rng, dtype,
                               last_gain=1 / np.sqrt(d_l)))
    tensors["conv.b"] = Tensor(np.zeros(d_l, dtype=dtype), requires_grad=True, name="conv.b")
    tensors.update(_mlp_params("dec", [d_l, spec.w_hidden, spec.w_hidden, spec.d_out], rng, dtype))
    return ModelParams(spec, tensors)


def mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Linear/ReLU stack; the last layer is linear."""
    k = 0
    while f"{prefix}.{k}.w" in params:
        w = params[f"{prefix}.{k}.w"]
        if x.shape[1] != w.shape[0]:
            raise ad.DimensionError(f"{prefix}.{k}: input width {x.shape[1]} != {w.shape[0]}")
        x = ad.linear(x, w, params[f"{prefix}.{k}.b"])
        k += 1
        if f"{prefix}.{k}.w" in params:
            x = ad.relu(x)
    return x


def encode(inputs: Tensor, params: ModelParams) -> Tensor:
    return mlp(inputs, params, "enc")


def decode(latent: Tensor, params: ModelParams) -> Tensor:
    return mlp(latent, params, "dec")


def ecc_conv(latent: Tensor, edge_feats: Tensor, src, dst, params: ModelParams) -> Tensor:
    """Edge-conditioned convolution with residual.

    out_i = mean_{(i,j)} K(e_ij) · v_j + b + v_i; centers without edges get b + v_i.
    """
    if edge_feats.shape[0] != len(src):
        raise ContractError(f"{edge_feats.shape[0]} edge rows for {len(src)} edges")
    n = latent.shape[0]
    weights = mlp(edge_feats, params, "kernel")
    messages = ad.edge_matvec(weights, ad.gather(latent, src))
    agg = ad.segment_mean(messages, dst, n)
    return ad.add(ad.add(agg, params["conv.b"]), latent)


@dataclass
class HopState:
    latent: Tensor
    decoded: Tensor | None
    edge_feats: Tensor | None
    hop_index: int


ExchangeFn = Callable[[HopState], HopState]


def _check_state(before: HopState, after: HopState) -> None:
    for name in ("latent", "decoded"):
        a, b = getattr(before, name), getattr(after, name)
        if (a is None) != (b is None) or (a is not None and a.shape != b.shape):
            raise ContractError(f"exchange callback changed {name} shape")


def forward_hops(
    graph,
    inputs: Tensor,
    params: ModelParams,
    h: int,
    exchange: ExchangeFn | None = None,
    d_out: int | None = None,
) -> Tensor:
    """Run encode once, then ``h`` rounds of conv, decode, exchange, edge refresh.

    ``graph`` needs ``src``, ``dst`` and ``edge_feats`` (position-indexed).
    The last ``d_out`` columns of ``edge_feats`` are the dynamic block.
    """
    if h < 1:
        raise ValueError("h must be ≥ 1")
    d_out = params.spec.d_out if d_out is None else d_out
    src, dst = graph.src, graph.dst
    feats = np.asarray(graph.edge_feats, dtype=inputs.dtype)
    n_static = feats.shape[1] - d_out
    static_block = Tensor(feats[:, :n_static])
    edge = Tensor(feats)
    latent = encode(inputs, params)
    decoded = None
    for k in range(h):
        latent = ecc_conv(latent, edge, src, dst, params)
        decoded = decode(latent, params)
        if exchange is not None:
            state = HopState(latent, decoded, edge, k)
            new = exchange(state)
            _check_state(state, new)
            latent, decoded = new.latent, new.decoded
        if k + 1 < h:
            dyn = ad.sub(ad.gather(decoded, dst), ad.gather(decoded, src))
            edge = ad.hstack([static_block, dyn]) if n_static else dyn
    return decoded


# GCN baseline ---------------------------------------------------------------

@dataclass(frozen=True)
class GCNSpec:
    d_in: int = 3
    d_out: int = 1
    width: int = 378
    hidden_layers: int = 6


def init_gcn_params(spec: GCNSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    widths = [spec.d_in] + [spec.width] * spec.hidden_layers + [spec.d_out]
    return ModelParams(spec, _mlp_params("gcn", widths, rng, dtype))


def gcn_forward(graph, inputs: Tensor, params: ModelParams, exchange: ExchangeFn | None = None) -> Tensor:
    """Mean aggregation over the neighbourhood plus self, then an affine map.

    No edge features are used. ``exchange`` (if given) refreshes halo rows of
    each hidden layer's output.
    """
    n = inputs.shape[0]
    self_ids = np.arange(n, dtype=np.int64)
    src = np.concatenate([graph.src, self_ids])
    dst = np.concatenate([graph.dst, self_ids])
    x = inputs
    k = 0
    while f"gcn.{k}.w" in params:
        pooled = ad.segment_mean(ad.gather(x, src), dst, n)
        x = ad.linear(pooled, params[f"gcn.{k}.w"], params[f"gcn.{k}.b"])
        k += 1
        if f"gcn.{k}.w" in params:
            x = ad.relu(x)
            if exchange is not None:
                state = HopState(x, None, None, k - 1)
                new = exchange(state)
                _check_state(state, new)
                x = new.latent
    return x


def param_count(params) -> int:
    return int(sum(t.data.size for t in params.values()))


def mpnn_param_count(spec: ModelSpec) -> int:
    """Closed-form count, used to size configs without allocating."""
    def mlp_count(widths):
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    d_l = spec.d_latent
    return (mlp_count([spec.d_in, spec.w_hidden, spec.w_hidden, d_l])
            + mlp_count([spec.d_e, spec.w_kernel, spec.w_kernel, d_l * d_l])
            + d_l
            + mlp_count([d_l, spec.w_hidden, spec.w_hidden, spec.d_out]))


# checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t)
        raw_name = name.encode()
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<B", _PRECISION_TAGS[arr.dtype]))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dtype = _TAG_DTYPES[buf[off]].newbyteorder("<")
        off += 1
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                                  offset=off).reshape(shape).astype(dtype.newbyteorder("="))
        off += nbytes
    return out


def params_from_arrays(spec, arrays: dict[str, np.ndarray]) -> ModelParams:
    return ModelParams(spec, {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()})
