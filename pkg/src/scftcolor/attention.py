"""Spatially corresponding feature transfer (SCFT) and ablation aggregators.

Value maps are (B, d_v, hw) tensors (a leading batch axis is optional for
the functional API).  Projection matrices act on the feature axis.
"""

import math

import torch
import torch.nn as nn

AGGREGATION_MODES = ("scft", "add", "adain")
ADAIN_EPS = 1e-5


def project(weight, v):
    """Apply a (d, d) matrix to every column of a (..., d, hw) value map."""
    return torch.matmul(weight, v)


def attention_logits(queries, keys):
    """Scaled dot products between (..., d, hw) query and key columns."""
    d = queries.shape[-2]
    return torch.matmul(queries.transpose(-1, -2), keys) / math.sqrt(d)


def row_softmax(logits):
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def attention_matrix(vs, vr, w_q, w_k):
    """A[i, j] = softmax_j((W_q v_i^s) . (W_k v_j^r) / sqrt(d_v))."""
    if vs.shape != vr.shape:
        raise ValueError(f"value maps differ in shape: {tuple(vs.shape)} vs {tuple(vr.shape)}")
    d = vs.shape[-2]
    if w_q.shape != (d, d) or w_k.shape != (d, d):
        raise ValueError(f"projections must be {d}x{d}")
    return row_softmax(attention_logits(project(w_q, vs), project(w_k, vr)))


def context_transfer(attn, vr, w_v):
    """v*_i = sum_j A[i, j] W_v v_j^r, returned as (..., d, hw)."""
    values = project(w_v, vr)
    return torch.matmul(values, attn.transpose(-1, -2))


def fuse(vs, context):
    if vs.shape != context.shape:
        raise ValueError(f"shape mismatch: {tuple(vs.shape)} vs {tuple(context.shape)}")
    return vs + context


def adain(vs, vr, eps=ADAIN_EPS):
    """Re-normalize each channel of ``vs`` to the mean/std of ``vr`` over positions."""
    mu_s = vs.mean(dim=-1, keepdim=True)
    mu_r = vr.mean(dim=-1, keepdim=True)
    std_s = vs.std(dim=-1, unbiased=False, keepdim=True) + eps
    std_r = vr.std(dim=-1, unbiased=False, keepdim=True) + eps
    return (vs - mu_s) / std_s * std_r + mu_r


class SCFT(nn.Module):
    """Single-head attention from sketch positions onto reference positions."""

    def __init__(self, dim, mode="scft"):
        super().__init__()
        if mode not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {mode!r}; choose from {AGGREGATION_MODES}")
        self.dim = dim
        self.mode = mode
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)

    def queries(self, vs):
        return project(self.w_q.weight, vs)

    def keys(self, vr):
        return project(self.w_k.weight, vr)

    def forward(self, vs, vr):
        """Return (context map, attention or None)."""
        if self.mode == "add":
            return fuse(vs, vr), None
        if self.mode == "adain":
            return adain(vs, vr), None
        attn = attention_matrix(vs, vr, self.w_q.weight, self.w_k.weight)
        return fuse(vs, context_transfer(attn, vr, self.w_v.weight)), attn


def aggregate(vs, vr, mode="scft", weights=None):
    """Functional form of the three aggregation variants.

    ``weights`` is the (W_q, W_k, W_v) triple and is only needed for scft.
    """
    if mode == "add":
        return fuse(vs, vr)
    if mode == "adain":
        return adain(vs, vr)
    if mode == "scft":
        if weights is None:
            raise ValueError("scft aggregation needs (W_q, W_k, W_v)")
        w_q, w_k, w_v = weights
        attn = attention_matrix(vs, vr, w_q, w_k)
        return fuse(vs, context_transfer(attn, vr, w_v))
    raise ValueError(f"unknown aggregation mode {mode!r}; choose from {AGGREGATION_MODES}")
