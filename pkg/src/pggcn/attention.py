"""Pose-guided attention: affinity between skeleton and pose features and fusion.

For skeleton features ``F_s`` and pose features ``F_p`` (``[T, N, C]`` each,
viewed as ``[N, T*C]``)::

    A_vanilla = softmax_rows(F_s F_p^T)                 # [N, N]
    A_dynamic = A_vanilla * (M + M')                    # M = 1, M' = 0 at init
    F_s'      = A F_p + F_s

All functions accept a single feature map ``[T, N, C]`` or a batch
``[B, T, N, C]``; with a batch every sample (and every body, since bodies are
folded into the batch) gets its own affinity matrix.
"""
from __future__ import annotations

import numpy as np

from .blocks import Layer
from .exceptions import ConfigurationError, DimensionError
from .tensor import Param, as_tensor, softmax_rows, softmax_rows_backward

MODES = ("none", "vanilla", "dynamic")


def flatten_joints(x):
    """``[..., T, N, C]`` -> ``[..., N, T*C]``."""
    x = as_tensor(x)
    t, n, c = x.shape[-3:]
    return np.ascontiguousarray(np.swapaxes(x, -3, -2)).reshape(*x.shape[:-3], n, t * c)


def unflatten_joints(x, frames):
    """Inverse of :func:`flatten_joints`."""
    n, tc = x.shape[-2:]
    c = tc // frames
    y = x.reshape(*x.shape[:-2], n, frames, c)
    return np.ascontiguousarray(np.swapaxes(y, -3, -2))


def _check_pair(fs, fp):
    if fs.shape != fp.shape:
        raise DimensionError(f"skeleton features {fs.shape} and pose features {fp.shape} differ")
    if fs.ndim not in (3, 4):
        raise DimensionError(f"feature maps must be [T, N, C] or [B, T, N, C], got {fs.shape}")


def vanilla_affinity(fs, fp):
    fs, fp = as_tensor(fs), as_tensor(fp)
    _check_pair(fs, fp)
    logits = flatten_joints(fs) @ np.swapaxes(flatten_joints(fp), -1, -2)
    return softmax_rows(logits)


def dynamic_affinity(a_vanilla, m, m_prime):
    m = m.value if isinstance(m, Param) else m
    m_prime = m_prime.value if isinstance(m_prime, Param) else m_prime
    return a_vanilla * (m + m_prime)


def fuse(a, fp, fs):
    fs, fp = as_tensor(fs), as_tensor(fp)
    _check_pair(fs, fp)
    n = fs.shape[-2]
    if a.shape[-2:] != (n, n):
        raise DimensionError(f"affinity {a.shape} does not match {n} joints")
    mixed = a @ flatten_joints(fp)
    return unflatten_joints(mixed, fs.shape[-3]) + fs


class PoseGuidedAttention(Layer):
    """Trainable fusion of pose features into one skeleton sub-stream.

    In ``"none"`` mode the layer passes ``F_s`` through unchanged; the caller
    is responsible for any alternative fusion.
    """

    def __init__(self, num_joints, mode="dynamic"):
        if mode not in MODES:
            raise ConfigurationError(f"attention mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.num_joints = num_joints
        if mode == "dynamic":
            self.M = Param(np.ones((num_joints, num_joints)), "M")
            self.M_prime = Param(np.zeros((num_joints, num_joints)), "M_prime")
        self._cache = None

    @property
    def passthrough(self):
        return self.mode == "none"

    def forward(self, fs, fp):
        fs, fp = as_tensor(fs), as_tensor(fp)
        _check_pair(fs, fp)
        if self.mode == "none":
            self._cache = None
            return fs
        fs_flat = flatten_joints(fs)
        fp_flat = flatten_joints(fp)
        a_van = softmax_rows(fs_flat @ np.swapaxes(fp_flat, -1, -2))
        a = dynamic_affinity(a_van, self.M, self.M_prime) if self.mode == "dynamic" else a_van
        self._cache = (fs_flat, fp_flat, a_van, a, fs.shape[-3])
        return unflatten_joints(a @ fp_flat, fs.shape[-3]) + fs

    def affinity(self, fs, fp):
        a = vanilla_affinity(fs, fp)
        if self.mode == "dynamic":
            a = dynamic_affinity(a, self.M, self.M_prime)
        return a

    def backward(self, grad):
        """Return ``(grad_fs, grad_fp)``."""
        if self._cache is None:
            return grad, np.zeros_like(grad)
        fs_flat, fp_flat, a_van, a, frames = self._cache
        g = flatten_joints(grad)
        d_fp = np.swapaxes(a, -1, -2) @ g
        d_a = g @ np.swapaxes(fp_flat, -1, -2)
        if self.mode == "dynamic":
            gm = d_a * a_van
            if gm.ndim == 3:
                gm = gm.sum(axis=0)
            self.M.accumulate(gm)
            self.M_prime.accumulate(gm)
            d_a = d_a * (self.M.value + self.M_prime.value)
        d_logits = softmax_rows_backward(a_van, d_a)
        d_fs = d_logits @ fp_flat
        d_fp += np.swapaxes(d_logits, -1, -2) @ fs_flat
        return grad + unflatten_joints(d_fs, frames), unflatten_joints(d_fp, frames)
