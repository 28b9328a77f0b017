"""The multi-stream embedding network.

Identical-architecture, unshared-parameter streams (whole image, part_m,
part_i crops) each produce an FC vector; the vectors are concatenated and a
fusion FC layer projects them to the final embedding. Forward and backward
passes are written against the im2col/col2im kernels so gradients are exact
and finite-difference checkable in double precision.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .loss import triplet_loss_grad

STREAM_ORDER = ("whole", "part_m", "part_i")
STREAM_PX = 64

_CKPT_MAGIC = b"PSCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class StreamArch:
    """Shared per-stream architecture: strided 3x3 conv stages with ReLU,
    optional residual blocks, global average pooling, and an FC head."""

    input_px: int = STREAM_PX
    in_channels: int = 3
    conv_channels: tuple = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    residual: bool = False
    fc_dim: int = 64

    def layer_plan(self):
        """Ordered layer specs: (kind, *shape info)."""
        plan = []
        c_in = self.in_channels
        px = self.input_px
        for c_out in self.conv_channels:
            plan.append(("conv", c_in, c_out, self.kernel, self.stride, 0))
            px = (px - self.kernel) // self.stride + 1
            if px < 1:
                raise ValueError("architecture shrinks the input below 1 px")
            plan.append(("relu",))
            if self.residual:
                plan.append(("resblock", c_out, self.kernel, self.kernel // 2))
            c_in = c_out
        plan.append(("gap",))
        plan.append(("fc", c_in, self.fc_dim))
        return plan


@dataclass
class StreamParams:
    arch: StreamArch
    layers: list  # per layer: list of parameter arrays (possibly empty)


@dataclass
class ModelParams:
    arch: StreamArch
    streams: dict  # stream name -> StreamParams, in STREAM_ORDER order
    fusion_w: np.ndarray
    fusion_b: np.ndarray
    embed_dim: int


def _layer_param_shapes(spec):
    kind = spec[0]
    if kind == "conv":
        _, c_in, c_out, k, _, _ = spec
        return [((c_out, c_in, k, k), "weight"), ((c_out,), "bias")]
    if kind == "resblock":
        _, c, k, _ = spec
        return [
            ((c, c, k, k), "weight"),
            ((c,), "bias"),
            ((c, c, k, k), "weight"),
            ((c,), "bias"),
        ]
    if kind == "fc":
        _, d_in, d_out = spec
        return [((d_out, d_in), "weight"), ((d_out,), "bias")]
    return []


def _he_init(shape, role, rng):
    if role == "bias":
        return np.zeros(shape, dtype=np.float64)
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_stream(arch, rng):
    layers = []
    for spec in arch.layer_plan():
        layers.append([_he_init(shape, role, rng) for shape, role in _layer_param_shapes(spec)])
    return StreamParams(arch=arch, layers=layers)


def init_model(arch=StreamArch(), streams=STREAM_ORDER, embed_dim=128, rng_seed=0):
    """He-initialized model with unshared streams; deterministic given rng_seed."""
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 7]))
    streams = tuple(streams)
    if not streams or any(s not in STREAM_ORDER for s in streams):
        raise ValueError(f"streams must be a nonempty subset of {STREAM_ORDER}")
    stream_params = {name: init_stream(arch, rng) for name in streams}
    fusion_in = len(streams) * arch.fc_dim
    fusion_w = rng.normal(0.0, np.sqrt(2.0 / fusion_in), size=(embed_dim, fusion_in))
    fusion_b = np.zeros(embed_dim, dtype=np.float64)
    return ModelParams(arch=arch, streams=stream_params, fusion_w=fusion_w,
                       fusion_b=fusion_b, embed_dim=embed_dim)


def iter_tensors(model, grads=None):
    """Yield (path, param, is_bias[, grad]) over every tensor in declaration order."""
    for name, sp in model.streams.items():
        plan = sp.arch.layer_plan()
        for li, layer in enumerate(sp.layers):
            roles = [role for _, role in _layer_param_shapes(plan[li])]
            for pi, arr in enumerate(layer):
                path = f"{name}.layer{li}.{roles[pi]}{pi}"
                if grads is None:
                    yield path, arr, roles[pi] == "bias"
                else:
                    yield path, arr, roles[pi] == "bias", grads.streams[name][li][pi]
    if grads is None:
        yield "fusion.weight", model.fusion_w, False
        yield "fusion.bias", model.fusion_b, True
    else:
        yield "fusion.weight", model.fusion_w, False, grads.fusion_w
        yield "fusion.bias", model.fusion_b, True, grads.fusion_b


@dataclass
class ModelGrads:
    streams: dict  # name -> list of lists of arrays, congruent with the params
    fusion_w: np.ndarray
    fusion_b: np.ndarray


def zeros_like_grads(model):
    return ModelGrads(
        streams={
            name: [[np.zeros_like(a) for a in layer] for layer in sp.layers]
            for name, sp in model.streams.items()
        },
        fusion_w=np.zeros_like(model.fusion_w),
        fusion_b=np.zeros_like(model.fusion_b),
    )


def _conv_forward(x, w, b, stride, pad):
    n, _, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    cols = _kernels.im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(c_out, -1), cols) + b[None, :, None]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    return out.reshape(n, c_out, oh, ow), cols


def _conv_backward(dy, cols, w, x_shape, stride, pad):
    n, c_out, oh, ow = dy.shape
    dym = dy.reshape(n, c_out, oh * ow)
    dw = np.matmul(dym, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dym.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(c_out, -1).T[None], dym)
    dx = _kernels.col2im(dcols, x_shape[2], x_shape[3], w.shape[2], w.shape[3], stride, pad)
    return dx, dw, db


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite activation at {where}")


def forward_stream(params, x, need_cache=False):
    """Run one stream on a batch (n, C, px, px); returns (n, fc_dim).

    With need_cache=True also returns the per-layer caches for backward and
    verifies every intermediate stays finite.
    """
    arch = params.arch
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[1:] != (arch.in_channels, arch.input_px, arch.input_px):
        raise ValueError(
            f"stream expects (n, {arch.in_channels}, {arch.input_px}, {arch.input_px}), got {x.shape}"
        )
    caches = []
    for li, spec in enumerate(arch.layer_plan()):
        kind = spec[0]
        layer = params.layers[li]
        if kind == "conv":
            _, _, _, k, stride, pad = spec
            y, cols = _conv_forward(x, layer[0], layer[1], stride, pad)
            caches.append(("conv", x.shape, cols))
        elif kind == "relu":
            y = np.maximum(x, 0.0)
            caches.append(("relu", x > 0.0))
        elif kind == "resblock":
            _, _, k, pad = spec
            h1, cols1 = _conv_forward(x, layer[0], layer[1], 1, pad)
            a1 = np.maximum(h1, 0.0)
            h2, cols2 = _conv_forward(a1, layer[2], layer[3], 1, pad)
            y = x + h2
            caches.append(("resblock", x.shape, cols1, h1 > 0.0, a1.shape, cols2))
        elif kind == "gap":
            y = x.mean(axis=(2, 3))
            caches.append(("gap", x.shape))
        elif kind == "fc":
            y = x @ layer[0].T + layer[1]
            caches.append(("fc", x))
        if need_cache:
            _check_finite(y, f"layer {li} ({kind})")
        x = y
    if squeeze:
        x = x[0]
    return (x, caches) if need_cache else x


def backward_stream(params, caches, dout):
    """Backpropagate dout (n, fc_dim) through one stream; returns per-layer grads."""
    arch = params.arch
    plan = arch.layer_plan()
    grads = [None] * len(plan)
    dx = dout
    for li in range(len(plan) - 1, -1, -1):
        spec = plan[li]
        kind = spec[0]
        layer = params.layers[li]
        cache = caches[li]
        if kind == "conv":
            _, _, _, k, stride, pad = spec
            dx, dw, db = _conv_backward(dx, cache[2], layer[0], cache[1], stride, pad)
            grads[li] = [dw, db]
        elif kind == "relu":
            dx = dx * cache[1]
            grads[li] = []
        elif kind == "resblock":
            _, _, k, pad = spec
            _, x_shape, cols1, mask1, a1_shape, cols2 = cache
            da1, dw2, db2 = _conv_backward(dx, cols2, layer[2], a1_shape, 1, pad)
            dh1 = da1 * mask1
            dxb, dw1, db1 = _conv_backward(dh1, cols1, layer[0], x_shape, 1, pad)
            dx = dx + dxb
            grads[li] = [dw1, db1, dw2, db2]
        elif kind == "gap":
            n, c, h, w = cache[1]
            dx = np.broadcast_to(dx[:, :, None, None], (n, c, h, w)) / (h * w)
        elif kind == "fc":
            xin = cache[1]
            grads[li] = [dx.T @ xin, dx.sum(axis=0)]
            dx = dx @ layer[0]
        if grads[li] is None:
            grads[li] = []
    return grads


def forward_batch(model, crops, need_cache=False):
    """Embed a batch of prepared crops.

    crops: dict stream name -> (n, C, px, px). Returns (n, embed_dim)
    embeddings, plus (stream caches, concat) when need_cache=True.
    """
    names = list(model.streams)
    missing = [n for n in names if n not in crops]
    if missing:
        raise ValueError(f"missing crops for streams {missing}")
    outs, caches = [], {}
    for name in names:
        if need_cache:
            y, cache = forward_stream(model.streams[name], crops[name], need_cache=True)
            caches[name] = cache
        else:
            y = forward_stream(model.streams[name], crops[name])
        outs.append(y)
    concat = np.concatenate(outs, axis=1)
    emb = concat @ model.fusion_w.T + model.fusion_b
    if need_cache:
        _check_finite(emb, "fusion")
        return emb, (caches, concat)
    return emb


def forward_model(model, whole, part_m=None, part_i=None):
    """Embedding of a single image triple (or of whatever streams the model has)."""
    provided = {"whole": whole, "part_m": part_m, "part_i": part_i}
    crops = {}
    for name in model.streams:
        if provided.get(name) is None:
            raise ValueError(f"missing input for stream {name!r}")
        crops[name] = np.asarray(provided[name], dtype=np.float64)[None]
    return forward_batch(model, crops)[0]


def loss_and_gradients(model, crops, triplets, margin):
    """Triplet loss over prepared crops plus exact parameter gradients.

    triplets: (a, p, n) index triples into the batch. Returns
    (loss, ModelGrads, embeddings).
    """
    emb, (caches, concat) = forward_batch(model, crops, need_cache=True)
    loss, demb = triplet_loss_grad(emb, triplets, margin)
    dconcat = demb @ model.fusion_w
    grads = ModelGrads(
        streams={},
        fusion_w=demb.T @ concat,
        fusion_b=demb.sum(axis=0),
    )
    offset = 0
    for name in model.streams:
        width = model.arch.fc_dim
        dstream = dconcat[:, offset : offset + width]
        grads.streams[name] = backward_stream(model.streams[name], caches[name], dstream)
        offset += width
    return loss, grads, emb


def arch_hash(model):
    """Short hash of everything that determines parameter shapes."""
    payload = {
        "arch": _arch_dict(model.arch),
        "streams": list(model.streams),
        "embed_dim": model.embed_dim,
    }
    return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def _arch_dict(arch):
    d = asdict(arch)
    d["conv_channels"] = list(d["conv_channels"])
    return d


def save_checkpoint(model, path, meta=None):
    """Versioned binary: JSON descriptor header + float32 LE tensors in
    declaration order."""
    tensors = list(iter_tensors(model))
    descriptor = {
        "arch": _arch_dict(model.arch),
        "streams": list(model.streams),
        "embed_dim": model.embed_dim,
        "arch_hash": arch_hash(model),
        "tensors": [{"path": p, "shape": list(a.shape)} for p, a, _ in tensors],
        "meta": meta or {},
    }
    header = json.dumps(descriptor, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        for _, arr, _ in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Rebuild (ModelParams, meta) from a checkpoint file."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        descriptor = json.loads(fh.read(hlen).decode())
        arch_d = dict(descriptor["arch"])
        arch_d["conv_channels"] = tuple(arch_d["conv_channels"])
        arch = StreamArch(**arch_d)
        model = init_model(arch=arch, streams=descriptor["streams"],
                           embed_dim=descriptor["embed_dim"], rng_seed=0)
        for (path_name, arr, _), spec in zip(iter_tensors(model), descriptor["tensors"]):
            if path_name != spec["path"] or list(arr.shape) != spec["shape"]:
                raise ValueError(f"checkpoint tensor mismatch at {spec['path']}")
            raw = fh.read(4 * int(np.prod(spec["shape"])))
            arr[...] = np.frombuffer(raw, dtype="<f4").reshape(spec["shape"])
    return model, descriptor["meta"]
