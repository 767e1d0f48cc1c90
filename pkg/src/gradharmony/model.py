"""Shared-backbone tri-modal encoder with analytic gradients for both pairwise losses.

Every modality goes through its own linear tokenizer, then one shared MLP
backbone (tanh between layers), then a linear head into one of two comparison
spaces; outputs are L2-normalized. The video-audio space is trained with NCE
and the video-text space with MIL-NCE over a bag of ``k`` candidate
narrations per clip. All gradients are computed by hand in float64.

The positive text bag for sample ``i`` is ``text_bag[i]`` (shape ``(k, dim_text)``);
``text_bag[i, 0]`` is the clip's own narration and doubles as the in-batch
negative text offered to every other video.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    FormatError,
    InsufficientNegativesError,
)
from .linalg import ShapeManifest

DEFAULT_TEMPERATURE = 0.07

MODALITIES = ("v", "a", "t")
HEADS = ("head_v_va", "head_a", "head_v_vt", "head_t")


@dataclass(frozen=True)
class ModelDims:
    dim_video: int = 24
    dim_audio: int = 20
    dim_text: int = 28
    hidden_dim: int = 32
    backbone_layers: int = 2
    emb_dim_va: int = 16
    emb_dim_vt: int = 16

    def __post_init__(self):
        for name, value in vars(self).items():
            if int(value) <= 0:
                raise ConfigError(f"model dimension {name} must be positive, got {value}")

    def input_dim(self, modality: str) -> int:
        return {"v": self.dim_video, "a": self.dim_audio, "t": self.dim_text}[modality]

    def manifest(self) -> ShapeManifest:
        h = self.hidden_dim
        pairs = []
        for m in MODALITIES:
            pairs += [(f"tok_{m}.w", (self.input_dim(m), h)), (f"tok_{m}.b", (h,))]
        for i in range(self.backbone_layers):
            pairs += [(f"backbone.{i}.w", (h, h)), (f"backbone.{i}.b", (h,))]
        for head in HEADS:
            e = self.emb_dim_va if head in ("head_v_va", "head_a") else self.emb_dim_vt
            pairs += [(f"{head}.w", (h, e)), (f"{head}.b", (e,))]
        return ShapeManifest.from_pairs(pairs)

    @classmethod
    def from_manifest(cls, manifest: ShapeManifest) -> "ModelDims":
        try:
            layers = sum(1 for n in manifest.names if n.startswith("backbone.") and n.endswith(".w"))
            dims = cls(
                dim_video=manifest.dims_of("tok_v.w")[0],
                dim_audio=manifest.dims_of("tok_a.w")[0],
                dim_text=manifest.dims_of("tok_t.w")[0],
                hidden_dim=manifest.dims_of("tok_v.w")[1],
                backbone_layers=layers,
                emb_dim_va=manifest.dims_of("head_a.w")[1],
                emb_dim_vt=manifest.dims_of("head_t.w")[1],
            )
        except (KeyError, IndexError, ConfigError) as exc:
            raise CheckpointError(f"manifest does not describe this model: {exc}") from exc
        if dims.manifest() != manifest:
            raise CheckpointError("manifest entries are not in the expected layout")
        return dims


class ModelParams:
    """Immutable parameter vector plus the dims that give it structure."""

    def __init__(self, dims: ModelDims, vector):
        vector = np.array(vector, dtype=np.float64)
        self.dims = dims
        self.manifest = dims.manifest()
        if vector.shape != (self.manifest.size,):
            raise DimensionError(
                f"parameter vector has shape {vector.shape}, expected ({self.manifest.size},)"
            )
        vector.setflags(write=False)
        self.vector = vector
        self._offsets = self.manifest.offsets()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vector[self._offsets[name]].reshape(self.manifest.dims_of(name))

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: self[name] for name in self.manifest.names}

    def with_vector(self, vector) -> "ModelParams":
        return ModelParams(self.dims, vector)

    @property
    def size(self) -> int:
        return self.manifest.size

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.vector, other.vector)


def init_params(seed: int, dims: ModelDims) -> ModelParams:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    manifest = dims.manifest()
    parts = []
    for name, shape in manifest.entries:
        if name.endswith(".b"):
            parts.append(np.zeros(shape))
        else:
            parts.append(rng.standard_normal(shape) / np.sqrt(shape[0]))
    return ModelParams(dims, np.concatenate([p.ravel() for p in parts]))


class RawBatch(NamedTuple):
    video: np.ndarray     # (B, dim_video)
    audio: np.ndarray     # (B, dim_audio)
    text_bag: np.ndarray  # (B, k, dim_text); [:, 0] is the clip's own narration

    @property
    def size(self) -> int:
        return self.video.shape[0]

    @property
    def k(self) -> int:
        return self.text_bag.shape[1]

    def take(self, idx) -> "RawBatch":
        return RawBatch(self.video[idx], self.audio[idx], self.text_bag[idx])


class EmbeddingBatch(NamedTuple):
    z_v_va: np.ndarray         # (B, emb_dim_va)
    z_a: np.ndarray            # (B, emb_dim_va)
    z_v_vt: np.ndarray         # (B, emb_dim_vt)
    z_t_neighbors: np.ndarray  # (B, k, emb_dim_vt)

    @property
    def batch_size(self) -> int:
        return self.z_v_va.shape[0]

    @property
    def z_t(self) -> np.ndarray:
        return self.z_t_neighbors[:, 0]


class PerSampleGrads(NamedTuple):
    g_va: np.ndarray     # (B, P)
    g_vt: np.ndarray     # (B, P)
    loss_va: np.ndarray  # (B,)
    loss_vt: np.ndarray  # (B,)


# --------------------------------------------------------------------------
# encoder


def _check_batch(dims: ModelDims, batch: RawBatch) -> None:
    if batch.video.ndim != 2 or batch.audio.ndim != 2 or batch.text_bag.ndim != 3:
        raise DimensionError("batch arrays must be (B, d), (B, d), (B, k, d)")
    b = batch.video.shape[0]
    if batch.audio.shape[0] != b or batch.text_bag.shape[0] != b:
        raise DimensionError("modalities disagree on batch size")
    for arr, m in ((batch.video, "v"), (batch.audio, "a"), (batch.text_bag, "t")):
        if arr.shape[-1] != dims.input_dim(m):
            raise DimensionError(
                f"modality {m!r} has feature dim {arr.shape[-1]}, tokenizer expects {dims.input_dim(m)}"
            )
    if batch.text_bag.shape[1] < 1:
        raise ConfigError("every sample needs k >= 1 neighbor texts")


def _encode(params: ModelParams, modality: str, head: str, x: np.ndarray):
    """Forward one modality through tokenizer, backbone and head; returns (z, cache)."""
    layers = params.dims.backbone_layers
    h = x @ params[f"tok_{modality}.w"] + params[f"tok_{modality}.b"]
    inputs, acts = [x], []
    for i in range(layers):
        inputs.append(h)
        a = h @ params[f"backbone.{i}.w"] + params[f"backbone.{i}.b"]
        h = np.tanh(a) if i < layers - 1 else a
        acts.append(h)
    u = h @ params[f"{head}.w"] + params[f"{head}.b"]
    n = np.linalg.norm(u, axis=1, keepdims=True)
    z = u / n
    return z, (modality, head, inputs, acts, h, z, n)


def _outer(x, d, group):
    if group is None:
        return x.T @ d
    xs = x.reshape(-1, group, x.shape[1])
    ds = d.reshape(-1, group, d.shape[1])
    return np.matmul(xs.transpose(0, 2, 1), ds)


def _bias(d, group):
    if group is None:
        return d.sum(axis=0)
    return d.reshape(-1, group, d.shape[1]).sum(axis=1)


def _encode_backward(params: ModelParams, cache, dz, group=None) -> dict[str, np.ndarray]:
    """Backprop ``dz`` through one encoder path.

    With ``group=None`` gradients are summed over rows. With an integer
    ``group`` consecutive blocks of ``group`` rows belong to one sample and
    per-sample gradients are returned with a leading sample axis.
    """
    modality, head, inputs, acts, h_last, z, n = cache
    layers = params.dims.backbone_layers
    du = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / n
    grads = {
        f"{head}.w": _outer(h_last, du, group),
        f"{head}.b": _bias(du, group),
    }
    dh = du @ params[f"{head}.w"].T
    for i in reversed(range(layers)):
        da = dh * (1.0 - acts[i] ** 2) if i < layers - 1 else dh
        grads[f"backbone.{i}.w"] = _outer(inputs[i + 1], da, group)
        grads[f"backbone.{i}.b"] = _bias(da, group)
        dh = da @ params[f"backbone.{i}.w"].T
    grads[f"tok_{modality}.w"] = _outer(inputs[0], dh, group)
    grads[f"tok_{modality}.b"] = _bias(dh, group)
    return grads


def forward(params: ModelParams, batch: RawBatch) -> EmbeddingBatch:
    _check_batch(params.dims, batch)
    b, k = batch.size, batch.k
    z_v_va, _ = _encode(params, "v", "head_v_va", batch.video)
    z_a, _ = _encode(params, "a", "head_a", batch.audio)
    z_v_vt, _ = _encode(params, "v", "head_v_vt", batch.video)
    flat_text = batch.text_bag.reshape(b * k, -1)
    z_t, _ = _encode(params, "t", "head_t", flat_text)
    return EmbeddingBatch(z_v_va, z_a, z_v_vt, z_t.reshape(b, k, -1))


# --------------------------------------------------------------------------
# contrastive losses


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _anchor_terms(pos, neg, tau):
    """Per-anchor MIL-NCE loss and its gradients w.r.t. the raw scores.

    ``pos[i, m]`` are the positive scores of anchor ``i``; ``neg[i, j]`` scores
    anchor ``i`` against negative ``j`` (the diagonal is ignored). Row ``i`` of
    each gradient belongs to anchor ``i``'s loss only.
    """
    b = pos.shape[0]
    neg = np.where(np.eye(b, dtype=bool), -np.inf, neg)
    logits = np.concatenate([pos, neg], axis=1) / tau
    lse_all = _logsumexp(logits, axis=1)
    lse_pos = _logsumexp(pos / tau, axis=1)
    loss = lse_all - lse_pos
    p_all = np.exp(logits - lse_all[:, None])
    p_pos = np.exp(pos / tau - lse_pos[:, None])
    k = pos.shape[1]
    dpos = (p_all[:, :k] - p_pos) / tau
    dneg = p_all[:, k:] / tau
    return loss, dpos, dneg


def _bag_contrastive(anchor, bag, tau, symmetric):
    """MIL-NCE between anchors (B, E) and positive bags (B, k, E).

    Returns per-sample losses, the gradients each sample's loss sends into its
    OWN embeddings (``own_*``), and the extra gradients that reach other
    samples' embeddings through their role as negatives (``cross_*``).
    """
    neg_side = bag[:, 0]
    pos = np.einsum("be,bke->bk", anchor, bag)
    scores = anchor @ neg_side.T  # scores[i, j] = anchor_i . neg_side_j

    loss, dpos, dneg = _anchor_terms(pos, scores, tau)
    own_anchor = np.einsum("bk,bke->be", dpos, bag) + dneg @ neg_side
    own_bag = dpos[:, :, None] * anchor[:, None, :]
    cross_anchor = np.zeros_like(anchor)
    cross_bag = np.zeros_like(bag)
    cross_bag[:, 0] = dneg.T @ anchor

    if symmetric:
        rloss, rdpos, rdneg = _anchor_terms(pos, scores.T, tau)
        own_anchor = 0.5 * (own_anchor + np.einsum("bk,bke->be", rdpos, bag))
        own_bag = 0.5 * (own_bag + rdpos[:, :, None] * anchor[:, None, :])
        own_bag[:, 0] += 0.5 * (rdneg @ anchor)
        cross_bag *= 0.5
        cross_anchor = 0.5 * (rdneg.T @ neg_side)
        loss = 0.5 * (loss + rloss)
    return loss, own_anchor, own_bag, cross_anchor, cross_bag


def contrastive_loss(anchor, bag, temperature=DEFAULT_TEMPERATURE, symmetric=False) -> np.ndarray:
    """Per-sample MIL-NCE on precomputed embeddings; ``bag`` of shape (B, E)
    is treated as a bag of one, which is plain NCE."""
    anchor = np.asarray(anchor, dtype=np.float64)
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim == 2:
        bag = bag[:, None, :]
    if anchor.shape[0] < 2:
        raise InsufficientNegativesError("need batch_size >= 2 for in-batch negatives")
    return _bag_contrastive(anchor, bag, temperature, symmetric)[0]


def _pair_pass(params, batch, pair, tau, symmetric, mode):
    """Shared driver for both pairwise losses.

    mode: ``"full"`` (exact gradient of the batch-mean loss), ``"detached"``
    (negatives treated as constants), or ``"per_sample"``.
    """
    _check_batch(params.dims, batch)
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    b = batch.size
    if b < 2:
        raise InsufficientNegativesError("need batch_size >= 2 for in-batch negatives")
    if pair == "va":
        z_v, c_v = _encode(params, "v", "head_v_va", batch.video)
        z_o, c_o = _encode(params, "a", "head_a", batch.audio)
        k = 1
        bag = z_o[:, None, :]
    else:
        k = batch.k
        z_v, c_v = _encode(params, "v", "head_v_vt", batch.video)
        z_o, c_o = _encode(params, "t", "head_t", batch.text_bag.reshape(b * k, -1))
        bag = z_o.reshape(b, k, -1)

    loss, own_v, own_bag, cross_v, cross_bag = _bag_contrastive(z_v, bag, tau, symmetric)
    if mode == "full":
        d_v, d_bag = (own_v + cross_v) / b, (own_bag + cross_bag) / b
    else:
        d_v, d_bag = own_v, own_bag
        if mode == "detached":
            d_v, d_bag = d_v / b, d_bag / b
    d_o = d_bag.reshape(b * k, -1)

    manifest = params.manifest
    offsets = manifest.offsets()
    if mode == "per_sample":
        g = np.zeros((b, manifest.size))
        for part in (_encode_backward(params, c_v, d_v, group=1),
                     _encode_backward(params, c_o, d_o, group=k)):
            for name, arr in part.items():
                g[:, offsets[name]] += arr.reshape(b, -1)
        return loss, g
    g = np.zeros(manifest.size)
    for part in (_encode_backward(params, c_v, d_v), _encode_backward(params, c_o, d_o)):
        for name, arr in part.items():
            g[offsets[name]] += arr.ravel()
    return float(loss.mean()), g


def loss_and_grad_va(params: ModelParams, batch: RawBatch, temperature=DEFAULT_TEMPERATURE,
                     symmetric=False, detach_negatives=False):
    """Video-audio NCE averaged over the batch, with in-batch negatives.

    Returns ``(loss, g_va)`` where ``g_va`` is the flat gradient over the
    whole manifest (text tokenizer and vt heads receive zeros).
    """
    mode = "detached" if detach_negatives else "full"
    return _pair_pass(params, batch, "va", temperature, symmetric, mode)


def loss_and_grad_vt(params: ModelParams, batch: RawBatch, temperature=DEFAULT_TEMPERATURE,
                     symmetric=False, detach_negatives=False):
    """Video-text MIL-NCE: the numerator sums over the ``k`` narrations in each bag."""
    mode = "detached" if detach_negatives else "full"
    return _pair_pass(params, batch, "vt", temperature, symmetric, mode)


def per_sample_grads(params: ModelParams, batch: RawBatch, temperature=DEFAULT_TEMPERATURE,
                     symmetric=False) -> PerSampleGrads:
    """One (g_va, g_vt) pair per triplet, other batch members fixed as negatives.

    The mean over samples equals the batch gradient computed with
    ``detach_negatives=True``.
    """
    loss_va, g_va = _pair_pass(params, batch, "va", temperature, symmetric, "per_sample")
    loss_vt, g_vt = _pair_pass(params, batch, "vt", temperature, symmetric, "per_sample")
    return PerSampleGrads(g_va, g_vt, loss_va, loss_vt)


# --------------------------------------------------------------------------
# checkpoint format
#
#   magic  b"GHARMCKP"           8 bytes
#   version                      u32
#   n_entries                    u32
#   per entry: name_len u32, name utf-8, ndim u32, dims u32 * ndim
#   parameters                   f64 * manifest.size, manifest order
# all little-endian

CHECKPOINT_MAGIC = b"GHARMCKP"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: ModelParams) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.manifest.entries))]
    for name, dims in params.manifest.entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
    out.append(params.vector.astype("<f8").tobytes())
    return b"".join(out)


def params_from_bytes(data: bytes) -> ModelParams:
    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError("checkpoint truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    pos = 8
    version, n_entries = take("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pairs = []
    for _ in range(n_entries):
        (name_len,) = take("<I")
        if pos + name_len > len(data):
            raise FormatError("checkpoint truncated")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        pairs.append((name, take(f"<{ndim}I")))
    dims = ModelDims.from_manifest(ShapeManifest.from_pairs(pairs))
    n = dims.manifest().size
    body = data[pos:]
    if len(body) != 8 * n:
        raise FormatError(f"checkpoint body has {len(body)} bytes, expected {8 * n}")
    return ModelParams(dims, np.frombuffer(body, dtype="<f8").astype(np.float64))


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path, expected_dims: ModelDims | None = None) -> ModelParams:
    params = params_from_bytes(Path(path).read_bytes())
    if expected_dims is not None and params.dims != expected_dims:
        raise CheckpointError(
            f"checkpoint dims {params.dims} do not match configured dims {expected_dims}"
        )
    return params
