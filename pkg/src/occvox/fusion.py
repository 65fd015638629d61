"""
Voxel fusion: channel projections, 3-D deformable attention and heads.

Tensors are float64 numpy arrays laid out ``(C, H, W, Z)``.  Sampling
positions are expressed in cell units, with cell ``(i, j, k)`` sitting at the
integer point ``(i, j, k)``.

Deformable attention at reference cell ``p`` with query vector ``q``::

    A   = softmax_s(Wa q + ba)                 (N_s weights in [0, 1])
    dp_s = Wo_s q + bo_s                        (offsets in cells)
    out = sum_s A_s * Ws_s @ value(p + dp_s)   (trilinear, zero padding)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .errors import ShapeError, StateError
from .grid import GridSpec, VoxelGrid

DEFAULT_POINTS = 8
DEFAULT_CHANNELS = 16

# corner offsets of a unit cube, fixed order for deterministic accumulation
_CORNERS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])


def as_tensor4(x, name="tensor") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (C, H, W, Z), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite entries")
    return x


def grid_to_tensor(grid: VoxelGrid) -> np.ndarray:
    """``(H, W, Z[, C])`` voxel payload to a ``(C, H, W, Z)`` tensor."""
    cells = np.asarray(grid.cells, dtype=np.float64)
    if cells.ndim == 3:
        cells = cells[..., None]
    return np.ascontiguousarray(np.moveaxis(cells, -1, 0))


def tensor_to_grid(t: np.ndarray, spec: GridSpec, kind: str = "f64") -> VoxelGrid:
    return VoxelGrid(spec, np.moveaxis(as_tensor4(t), 0, -1), kind)


# ---------------------------------------------------------------- projections

@dataclass(frozen=True, eq=False)
class ChannelProjection:
    """Affine channel map with a 1x1x1 or 3x3x3 spatial kernel.

    ``weight`` is ``(C_out, C_in)`` for 1x1x1 or ``(C_out, C_in, 3, 3, 3)``.
    """

    weight: np.ndarray
    bias: np.ndarray = None

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if not (w.ndim == 2 or (w.ndim == 5 and w.shape[2:] == (3, 3, 3))):
            raise ShapeError(f"weight must be (out, in) or (out, in, 3, 3, 3), got {w.shape}")
        b = np.zeros(w.shape[0]) if self.bias is None else np.array(self.bias, dtype=np.float64)
        if b.shape != (w.shape[0],):
            raise ShapeError("bias length must equal C_out")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("projection parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return 1 if self.weight.ndim == 2 else 3

    @classmethod
    def identity(cls, channels: int) -> "ChannelProjection":
        return cls(np.eye(channels))

    @classmethod
    def random(cls, c_in: int, c_out: int, rng, kernel: int = 1) -> "ChannelProjection":
        fan_in = c_in * kernel ** 3
        shape = (c_out, c_in) if kernel == 1 else (c_out, c_in, 3, 3, 3)
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        return cls(w, rng.normal(0.0, 0.1, size=c_out))


def channel_project(x, proj: ChannelProjection) -> np.ndarray:
    x = as_tensor4(x, "input")
    if x.shape[0] != proj.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, projection expects {proj.c_in}")
    b = proj.bias[:, None, None, None]
    if proj.kernel == 1:
        return np.einsum("oc,chwz->ohwz", proj.weight, x) + b
    _, H, W, Z = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((proj.c_out, H, W, Z))
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                out += np.einsum("oc,chwz->ohwz", proj.weight[:, :, a, bb, c],
                                 xp[:, a:a + H, bb:bb + W, c:c + Z])
    return out + b


# ----------------------------------------------------------------- sampling

def _corners(shape, pos):
    """Corner indices, weights and in-grid mask for trilinear sampling.

    ``pos`` is ``(N, 3)``.  Returns ``base (N, 3)``, ``frac (N, 3)``,
    ``idx (N, 8, 3)``, ``w (N, 8)``, ``inside (N, 8)``.
    """
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    idx = base[:, None, :] + _CORNERS[None]
    per_axis = np.where(_CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    w = per_axis.prod(axis=2)
    dims = np.asarray(shape)
    inside = np.all((idx >= 0) & (idx < dims), axis=2)
    return base, frac, idx, w, inside


def _gather(t, idx, inside):
    """Values of ``t`` (C, H, W, Z) at corner ``idx`` (N, 8, 3) -> (N, 8, C)."""
    safe = np.where(inside[..., None], idx, 0)
    vals = t[:, safe[..., 0], safe[..., 1], safe[..., 2]]       # (C, N, 8)
    return np.moveaxis(vals, 0, -1) * inside[..., None]


def trilinear_sample_many(t, pos) -> np.ndarray:
    """Trilinear samples of ``t`` at ``(N, 3)`` positions, zero outside -> (N, C)."""
    t = np.asarray(t, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    _, _, idx, w, inside = _corners(t.shape[1:], pos)
    return np.einsum("nk,nkc->nc", w, _gather(t, idx, inside))


def trilinear_sample(t, pos) -> np.ndarray:
    """Channel vector of ``t`` interpolated at one continuous cell position."""
    return trilinear_sample_many(as_tensor4(t), np.asarray(pos, dtype=np.float64).reshape(1, 3))[0]


# ------------------------------------------------------- deformable attention

@dataclass(eq=False)
class DeformableAttentionParams:
    """Single-head deformable attention with per-sample value projections.

    Shapes: ``attn_weight (Ns, Cq)``, ``attn_bias (Ns,)``,
    ``offset_weight (Ns, 3, Cq)``, ``offset_bias (Ns, 3)``,
    ``value_proj (Ns, Cout, Cv)``.
    """

    attn_weight: np.ndarray
    attn_bias: np.ndarray
    offset_weight: np.ndarray
    offset_bias: np.ndarray
    value_proj: np.ndarray

    FIELDS = ("attn_weight", "attn_bias", "offset_weight", "offset_bias", "value_proj")

    def __post_init__(self):
        for name in self.FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        ns, cq = self.attn_weight.shape
        if ns < 1:
            raise ShapeError("need at least one sampling point")
        _, c_out, c_v = self.value_proj.shape
        expected = {"attn_bias": (ns,), "offset_weight": (ns, 3, cq),
                    "offset_bias": (ns, 3), "value_proj": (ns, c_out, c_v)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_points(self) -> int:
        return self.attn_weight.shape[0]

    @property
    def c_query(self) -> int:
        return self.attn_weight.shape[1]

    @property
    def c_value(self) -> int:
        return self.value_proj.shape[2]

    @property
    def c_out(self) -> int:
        return self.value_proj.shape[1]

    @classmethod
    def init(cls, c_query: int, c_value: int, c_out: int = None,
             n_points: int = DEFAULT_POINTS) -> "DeformableAttentionParams":
        """Averaging initialization: zero offsets, uniform weights, ``Ws = I / Ns``."""
        c_out = c_value if c_out is None else c_out
        eye = np.eye(c_out, c_value) / n_points
        return cls(attn_weight=np.zeros((n_points, c_query)),
                   attn_bias=np.zeros(n_points),
                   offset_weight=np.zeros((n_points, 3, c_query)),
                   offset_bias=np.zeros((n_points, 3)),
                   value_proj=np.repeat(eye[None], n_points, axis=0))

    @classmethod
    def random(cls, c_query: int, c_value: int, c_out: int = None,
               n_points: int = DEFAULT_POINTS, rng=None,
               offset_scale: float = 1.0) -> "DeformableAttentionParams":
        rng = np.random.default_rng(rng)
        c_out = c_value if c_out is None else c_out
        return cls(attn_weight=rng.normal(size=(n_points, c_query)),
                   attn_bias=rng.normal(size=n_points),
                   offset_weight=rng.normal(scale=offset_scale / np.sqrt(c_query),
                                            size=(n_points, 3, c_query)),
                   offset_bias=rng.normal(scale=offset_scale, size=(n_points, 3)),
                   value_proj=rng.normal(scale=1.0 / np.sqrt(c_value),
                                         size=(n_points, c_out, c_value)))

    def as_dict(self, prefix: str = "") -> dict:
        return {prefix + name: getattr(self, name) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "") -> "DeformableAttentionParams":
        return cls(**{name: d[prefix + name] for name in cls.FIELDS})


@dataclass(eq=False)
class AttentionCache:
    """Forward intermediates consumed by :func:`deformable_attention_backward`."""

    query: np.ndarray
    value: np.ndarray
    params: DeformableAttentionParams
    weights: np.ndarray       # (Ns, N) softmax weights
    positions: np.ndarray     # (N, Ns, 3)
    samples: np.ndarray       # (N, Ns, Cv)
    projected: np.ndarray     # (N, Ns, Cout)
    out_shape: tuple = field(default=())


def _reference_points(spatial):
    H, W, Z = spatial
    grid = np.stack(np.meshgrid(np.arange(H), np.arange(W), np.arange(Z), indexing="ij"), -1)
    return grid.reshape(-1, 3).astype(np.float64)


def deformable_attention(query, value, params: DeformableAttentionParams,
                         return_cache: bool = False):
    """Deformable attention of ``value`` around every cell, driven by ``query``."""
    query = as_tensor4(query, "query")
    value = as_tensor4(value, "value")
    if query.shape[1:] != value.shape[1:]:
        raise ShapeError(f"query spatial dims {query.shape[1:]} != value {value.shape[1:]}")
    if query.shape[0] != params.c_query or value.shape[0] != params.c_value:
        raise ShapeError("channel counts do not match attention parameters")
    spatial = query.shape[1:]
    n = int(np.prod(spatial))
    ns = params.n_points
    q = query.reshape(params.c_query, n)

    logits = params.attn_weight @ q + params.attn_bias[:, None]
    weights = softmax(logits, axis=0)
    offsets = np.einsum("sdc,cn->nsd", params.offset_weight, q) + params.offset_bias[None]
    positions = _reference_points(spatial)[:, None, :] + offsets
    samples = trilinear_sample_many(value, positions.reshape(-1, 3)).reshape(n, ns, -1)
    projected = np.einsum("soc,nsc->nso", params.value_proj, samples)
    out = np.einsum("sn,nso->on", weights, projected).reshape((params.c_out,) + spatial)
    if not return_cache:
        return out
    cache = AttentionCache(query, value, params, weights, positions, samples, projected,
                           out.shape)
    return out, cache


def deformable_attention_backward(grad_out, cache: AttentionCache) -> dict:
    """Gradients of a scalar loss given ``dL/d out``.

    Returns a dict with ``query``, ``value`` and one entry per parameter
    field (same names as :class:`DeformableAttentionParams`).
    """
    if not isinstance(cache, AttentionCache):
        raise StateError("backward needs the cache returned by the forward pass")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.out_shape:
        raise StateError(f"upstream gradient shape {grad_out.shape} != forward output "
                         f"{cache.out_shape}")
    p = cache.params
    spatial = cache.query.shape[1:]
    n = int(np.prod(spatial))
    q = cache.query.reshape(p.c_query, n)
    g = grad_out.reshape(p.c_out, n).T                               # (N, Cout)
    A = cache.weights

    dA = np.einsum("no,nso->sn", g, cache.projected)                 # (Ns, N)
    dlogits = A * (dA - np.sum(A * dA, axis=0, keepdims=True))
    d_attn_weight = dlogits @ q.T
    d_attn_bias = dlogits.sum(axis=1)
    dq = p.attn_weight.T @ dlogits

    d_value_proj = np.einsum("sn,no,nsc->soc", A, g, cache.samples)
    dS = np.einsum("sn,soc,no->nsc", A, p.value_proj, g)              # (N, Ns, Cv)

    pos = cache.positions.reshape(-1, 3)
    dS_flat = dS.reshape(-1, p.c_value)
    _, frac, idx, w, inside = _corners(spatial, pos)
    corner_vals = _gather(cache.value, idx, inside)                  # (M, 8, Cv)

    # scatter into value; np.add.at keeps a fixed accumulation order
    safe = np.where(inside[..., None], idx, 0)
    flat_idx = np.ravel_multi_index((safe[..., 0], safe[..., 1], safe[..., 2]), spatial)
    contrib = (w * inside)[..., None] * dS_flat[:, None, :]
    dv = np.zeros((n, p.c_value))
    np.add.at(dv, flat_idx.reshape(-1), contrib.reshape(-1, p.c_value))
    d_value = dv.T.reshape(cache.value.shape)

    # d weight / d pos for each corner: +/- product of the other two axis factors
    per_axis = np.where(_CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    sign = np.where(_CORNERS == 1, 1.0, -1.0)[None]
    dw_dpos = np.empty_like(per_axis)
    for a in range(3):
        others = [b for b in range(3) if b != a]
        dw_dpos[..., a] = sign[..., a] * per_axis[..., others[0]] * per_axis[..., others[1]]
    upstream = np.einsum("mkc,mc->mk", corner_vals, dS_flat)          # (M, 8)
    dpos = np.einsum("mk,mka->ma", upstream, dw_dpos).reshape(n, p.n_points, 3)

    d_offset_weight = np.einsum("nsd,cn->sdc", dpos, q)
    d_offset_bias = dpos.sum(axis=0)
    dq = dq + np.einsum("sdc,nsd->cn", p.offset_weight, dpos)

    return {
        "query": dq.reshape(cache.query.shape),
        "value": d_value,
        "attn_weight": d_attn_weight,
        "attn_bias": d_attn_bias,
        "offset_weight": d_offset_weight,
        "offset_bias": d_offset_bias,
        "value_proj": d_value_proj,
    }


def dual_interaction(v_img, v_sem, params_pair) -> tuple:
    """Image voxel queries the semantic voxel and vice versa.

    ``params_pair`` is ``(img_queries_sem, sem_queries_img)``.
    """
    p_img, p_sem = params_pair
    f1 = deformable_attention(v_img, v_sem, p_img)
    f2 = deformable_attention(v_sem, v_img, p_sem)
    return f1, f2


def fuse_concat(v_img, v_f1, v_f2, v_sem) -> np.ndarray:
    parts = [as_tensor4(t) for t in (v_img, v_f1, v_f2, v_sem)]
    spatial = parts[0].shape[1:]
    if any(t.shape[1:] != spatial for t in parts):
        raise ShapeError("all fused tensors must share spatial dims")
    return np.concatenate(parts, axis=0)


def prediction_head(v, stack, num_classes: int) -> np.ndarray:
    """Apply a sequence of channel projections; the last must emit ``num_classes``."""
    out = as_tensor4(v)
    if not stack:
        raise ShapeError("prediction head needs at least one projection")
    for proj in stack:
        out = channel_project(out, proj)
    if out.shape[0] != num_classes:
        raise ShapeError(f"head emits {out.shape[0]} channels, expected {num_classes}")
    return out


def labels_from_logits(logits) -> np.ndarray:
    """Per-voxel argmax over channels; ties go to the lowest class index."""
    return np.argmax(as_tensor4(logits), axis=0)


# ------------------------------------------------------------------ module

class VoxelFusion:
    """Full fusion stack with deterministic initialization.

    Per-frame image voxels (``C_img`` channels each) are concatenated and
    projected to ``channels``; the semantic voxel (``num_classes``) is
    projected to ``channels``; the two attend to each other; the result is
    concatenated with both projected inputs and fed to the main head.  A
    second head predicts from the projected image voxel alone.
    """

    def __init__(self, n_frames: int, c_img: int, num_classes: int,
                 channels: int = DEFAULT_CHANNELS, n_points: int = DEFAULT_POINTS,
                 seed: int = 0, kernel: int = 1):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.channels = channels
        self.img_proj = ChannelProjection.random(n_frames * c_img, channels, rng, kernel)
        self.sem_proj = ChannelProjection.random(num_classes, channels, rng, kernel)
        self.attn_img = DeformableAttentionParams.init(channels, channels, n_points=n_points)
        self.attn_sem = DeformableAttentionParams.init(channels, channels, n_points=n_points)
        self.head = [ChannelProjection.random(4 * channels, num_classes, rng, kernel)]
        self.head_img = [ChannelProjection.random(channels, num_classes, rng, kernel)]

    def forward(self, image_voxels, semantic) -> dict:
        """``image_voxels``: sequence of ``(C_img, H, W, Z)``; ``semantic``: ``(M, H, W, Z)``."""
        v_img = channel_project(np.concatenate([as_tensor4(v) for v in image_voxels], 0),
                                self.img_proj)
        v_sem = channel_project(semantic, self.sem_proj)
        f1, f2 = dual_interaction(v_img, v_sem, (self.attn_img, self.attn_sem))
        fused = fuse_concat(v_img, f1, f2, v_sem)
        return {
            "img": v_img, "sem": v_sem, "f1": f1, "f2": f2, "fused": fused,
            "logits": prediction_head(fused, self.head, self.num_classes),
            "logits_img": prediction_head(v_img, self.head_img, self.num_classes),
        }

    def parameters(self) -> dict:
        out = {}
        for name, proj in (("img_proj", self.img_proj), ("sem_proj", self.sem_proj),
                           ("head.0", self.head[0]), ("head_img.0", self.head_img[0])):
            out[name + ".weight"] = proj.weight
            out[name + ".bias"] = proj.bias
        out.update(self.attn_img.as_dict("attn_img."))
        out.update(self.attn_sem.as_dict("attn_sem."))
        return out

    def load_parameters(self, params: dict) -> None:
        def proj(name):
            return ChannelProjection(params[name + ".weight"], params[name + ".bias"])

        self.img_proj = proj("img_proj")
        self.sem_proj = proj("sem_proj")
        self.head = [proj("head.0")]
        self.head_img = [proj("head_img.0")]
        self.attn_img = DeformableAttentionParams.from_dict(params, "attn_img.")
        self.attn_sem = DeformableAttentionParams.from_dict(params, "attn_sem.")
        self.num_classes = self.head[0].c_out
        self.channels = self.img_proj.c_out
