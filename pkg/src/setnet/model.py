"""Multi-attention feature head with a diversity regularizer and a
visual-semantic projector ensemble.

A feature map (H, W, C) goes through a two-layer 1x1 convolutional stack
producing K spatial attention maps (softmax over positions, one map per
head). Each head pools the feature map with its attention weights, projects
the pooled vector into semantic space through its own affine projector, and
class scores are dot products against the rows of a semantic table. The
diversity regularizer is the sum of pairwise squared Hellinger distances
between the attention maps, pushing the heads to attend to different
regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import GradientSet


@dataclass
class AttentionStack:
    """Two-layer 1x1 conv stack: C -> C_h -> K head logits."""

    w1: np.ndarray  # (C, C_h)
    b1: np.ndarray  # (C_h,)
    w2: np.ndarray  # (C_h, K)
    b2: np.ndarray  # (K,)

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ValueError("attention weights must be matrices")
        if self.w1.shape[1] != self.b1.shape[0] or self.w2.shape[1] != self.b2.shape[0]:
            raise ValueError("bias shapes do not match weight shapes")
        if self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError("hidden channel mismatch between the two layers")
        if self.head_count < 1 or self.hidden_channels < 1:
            raise ValueError("head and hidden channel counts must be >= 1")

    @property
    def in_channels(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def head_count(self) -> int:
        return self.w2.shape[1]


@dataclass
class ProjectorEnsemble:
    """K independent affine maps from visual (V) to semantic (S) space."""

    weights: np.ndarray  # (K, V, S)
    biases: np.ndarray   # (K, S)

    def __post_init__(self):
        if self.weights.ndim != 3 or self.biases.ndim != 2:
            raise ValueError("projector arrays must be (K, V, S) and (K, S)")
        if self.weights.shape[0] != self.biases.shape[0] or self.weights.shape[2] != self.biases.shape[1]:
            raise ValueError("projector weight/bias shapes disagree")

    @property
    def head_count(self) -> int:
        return self.weights.shape[0]

    @property
    def visual_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def semantic_dim(self) -> int:
        return self.weights.shape[2]


@dataclass
class SemanticTable:
    """Per-class semantic attribute vectors; rows live on the unit sphere."""

    class_ids: np.ndarray  # (D,) int64
    vectors: np.ndarray    # (D, S) float64

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.class_ids.ndim != 1 or self.vectors.ndim != 2:
            raise ValueError("expected (D,) ids and (D, S) vectors")
        if self.class_ids.shape[0] != self.vectors.shape[0]:
            raise ValueError("id count does not match vector count")
        if len(set(self.class_ids.tolist())) != self.class_ids.shape[0]:
            raise ValueError("class ids must be unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.class_ids.shape[0] and np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("semantic rows must have unit Euclidean norm (within 1e-6)")

    def __len__(self) -> int:
        return self.class_ids.shape[0]

    @property
    def semantic_dim(self) -> int:
        return self.vectors.shape[1]

    def index_of(self, class_id: int) -> int:
        hits = np.nonzero(self.class_ids == class_id)[0]
        if hits.shape[0] == 0:
            raise IndexError(f"class id {class_id} not in table")
        return int(hits[0])

    def subset(self, class_ids) -> "SemanticTable":
        """Rows for the given ids, ordered by ascending class id."""
        wanted = np.sort(np.asarray(list(class_ids), dtype=np.int64))
        rows = [self.index_of(int(c)) for c in wanted]
        return SemanticTable(class_ids=wanted, vectors=self.vectors[rows].copy())


@dataclass
class SetNetModel:
    """Attention stack + projector ensemble + diversity weight."""

    attention: AttentionStack
    projectors: ProjectorEnsemble
    diversity_weight: float = 0.2

    def __post_init__(self):
        if self.attention.head_count != self.projectors.head_count:
            raise ValueError("attention and projector head counts must match")
        if self.diversity_weight < 0:
            raise ValueError("diversity weight must be >= 0")

    @property
    def head_count(self) -> int:
        return self.attention.head_count

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (mutating them mutates the model)."""
        out = {
            "attn.w1": self.attention.w1,
            "attn.b1": self.attention.b1,
            "attn.w2": self.attention.w2,
            "attn.b2": self.attention.b2,
        }
        for k in range(self.projectors.head_count):
            out[f"proj.{k}.w"] = self.projectors.weights[k]
            out[f"proj.{k}.b"] = self.projectors.biases[k]
        return out


def init_setnet(channels: int, hidden_channels: int, head_count: int,
                semantic_dim: int, diversity_weight: float,
                rng: np.random.Generator) -> SetNetModel:
    """Fresh model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights."""
    def u(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    attention = AttentionStack(
        w1=u(channels, channels, hidden_channels),
        b1=u(channels, hidden_channels),
        w2=u(hidden_channels, hidden_channels, head_count),
        b2=u(hidden_channels, head_count),
    )
    projectors = ProjectorEnsemble(
        weights=u(channels, head_count, channels, semantic_dim),
        biases=u(channels, head_count, semantic_dim),
    )
    return SetNetModel(attention=attention, projectors=projectors,
                       diversity_weight=diversity_weight)


# ---------------------------------------------------------------------------
# forward operations

def _check_feature_map(fmap: np.ndarray, channels: int) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got shape {fmap.shape}")
    if fmap.shape[2] != channels:
        raise ValueError(f"feature map has {fmap.shape[2]} channels, model expects {channels}")
    return fmap


def attention_logits(model: SetNetModel, fmap: np.ndarray) -> np.ndarray:
    """Pre-softmax head responses, shape (K, H, W)."""
    fmap = _check_feature_map(fmap, model.attention.in_channels)
    z1 = dm.conv1x1(fmap, model.attention.w1, model.attention.b1)
    z2 = dm.conv1x1(dm.relu(z1), model.attention.w2, model.attention.b2)
    return np.moveaxis(z2, 2, 0)


def attention_maps(model: SetNetModel, fmap: np.ndarray) -> np.ndarray:
    """K spatial attention maps; each (H, W) slice sums to 1.

    The per-head bias shifts every cell of its map equally, so it cancels
    exactly under the spatial softmax; dropping it here makes that
    invariance bitwise (and its gradient exactly zero) instead of leaving
    ULP-level noise in the maps.
    """
    fmap = _check_feature_map(fmap, model.attention.in_channels)
    att = model.attention
    z1 = dm.conv1x1(fmap, att.w1, att.b1)
    z2 = dm.relu(z1) @ att.w2
    return dm.spatial_softmax(np.moveaxis(z2, 2, 0))


def attentive_features(fmap: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Attention-weighted pooling: out[k, c] = sum_{h,w} maps[k,h,w] * fmap[h,w,c]."""
    fmap = np.asarray(fmap, dtype=np.float64)
    maps = np.asarray(maps, dtype=np.float64)
    if fmap.ndim != 3 or maps.ndim != 3 or fmap.shape[:2] != maps.shape[1:]:
        raise ValueError(f"spatial shapes disagree: map {fmap.shape} vs attention {maps.shape}")
    k = maps.shape[0]
    return maps.reshape(k, -1) @ fmap.reshape(-1, fmap.shape[2])


def diversity_loss(maps: np.ndarray) -> float:
    """Sum of squared Hellinger distances over ordered head pairs.

    Each unordered pair counts twice; range [0, K*(K-1)].
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] == 0:
        raise ValueError("expected a nonempty (K, H, W) attention stack")
    k = maps.shape[0]
    flat = maps.reshape(k, -1)
    # Bhattacharyya coefficients for all pairs at once.
    roots = np.sqrt(np.maximum(flat, 0.0))
    bc = roots @ roots.T
    off_diag = bc.sum() - np.trace(bc)
    return float(k * (k - 1) - off_diag)


def _diversity_grad(flat: np.ndarray) -> np.ndarray:
    """dL_div/da for vectorized maps (K, T), with clamped sqrt arguments."""
    k = flat.shape[0]
    a = np.maximum(flat, dm.HELLINGER_CLAMP)
    roots = np.sqrt(a)
    # d/d a_i sum_{j != i} 2 * (1 - sum sqrt(a_i a_j)) = -sum_{j != i} sqrt(a_j / a_i)
    other = roots.sum(axis=0, keepdims=True) - roots
    return -other / roots


def ensemble_logits(model: SetNetModel, feats: np.ndarray, table: SemanticTable) -> np.ndarray:
    """Mean projector score per class: logits[d] = (1/K) sum_k Q_k(m_k) . e_d."""
    feats = np.asarray(feats, dtype=np.float64)
    k = model.head_count
    if feats.shape != (k, model.projectors.visual_dim):
        raise ValueError(f"expected features of shape {(k, model.projectors.visual_dim)}, got {feats.shape}")
    if table.semantic_dim != model.projectors.semantic_dim:
        raise ValueError(f"semantic dim mismatch: table {table.semantic_dim} vs projectors {model.projectors.semantic_dim}")
    projected = np.einsum("kv,kvs->ks", feats, model.projectors.weights) + model.projectors.biases
    return table.vectors @ projected.mean(axis=0)


def class_scores(model: SetNetModel, fmap: np.ndarray, table: SemanticTable) -> np.ndarray:
    """Summed (not averaged) projector scores per table class, used for prediction."""
    maps = attention_maps(model, fmap)
    feats = attentive_features(fmap, maps)
    return ensemble_logits(model, feats, table) * model.head_count


def predict(model: SetNetModel, fmap: np.ndarray, table: SemanticTable) -> int:
    """Class id with the highest summed projector score; ties go to the
    smallest class id."""
    if len(table) == 0:
        raise ValueError("semantic table is empty")
    scores = class_scores(model, fmap, table)
    best = scores.max()
    winners = table.class_ids[scores == best]
    return int(winners.min())


# ---------------------------------------------------------------------------
# training loss

def total_loss(model: SetNetModel, fmap: np.ndarray, label: int,
               table: SemanticTable, diversity_sign: int = -1) -> tuple[float, GradientSet]:
    """Classification loss plus signed diversity term, with gradients.

    Returns ``L_cls + diversity_sign * weight * L_div`` and the gradient of
    that total w.r.t. every model parameter. The default sign -1 means
    minimizing the total *increases* attention-map diversity.
    """
    if diversity_sign not in (1, -1):
        raise ValueError("diversity_sign must be +1 or -1")
    att = model.attention
    fmap = _check_feature_map(fmap, att.in_channels)
    label_idx = table.index_of(label)
    h, w, c = fmap.shape
    k = model.head_count
    cells = h * w

    # forward; the head bias cancels under the per-map softmax (see
    # attention_maps), so it is omitted and its gradient is exactly zero
    x = fmap.reshape(cells, c)
    z1 = x @ att.w1 + att.b1                      # (cells, C_h)
    r = np.maximum(z1, 0.0)
    z2 = r @ att.w2                               # (cells, K)
    maps_flat = dm.softmax(z2.T)                  # (K, cells)
    feats = maps_flat @ x                         # (K, C)
    projected = np.einsum("kv,kvs->ks", feats, model.projectors.weights) + model.projectors.biases
    mean_proj = projected.mean(axis=0)            # (S,)
    scores = table.vectors @ mean_proj            # (D,)
    l_cls = dm.cross_entropy_from_logits(scores, label_idx)
    l_div = diversity_loss(maps_flat.reshape(k, h, w))
    lam = model.diversity_weight
    total = l_cls + diversity_sign * lam * l_div

    # backward: classification path
    d_scores = dm.cross_entropy_grad(scores, label_idx)
    d_mean_proj = table.vectors.T @ d_scores      # (S,)
    d_projected = np.broadcast_to(d_mean_proj / k, (k, mean_proj.shape[0]))
    d_proj_w = np.einsum("kv,ks->kvs", feats, d_projected)
    d_proj_b = d_projected.copy()
    d_feats = np.einsum("kvs,ks->kv", model.projectors.weights, d_projected)
    d_maps_flat = d_feats @ x.T                   # (K, cells)

    # backward: diversity path
    d_maps_flat = d_maps_flat + diversity_sign * lam * _diversity_grad(maps_flat)

    # through the per-head softmax and the conv stack
    inner = (maps_flat * d_maps_flat).sum(axis=1, keepdims=True)
    d_z2 = (maps_flat * (d_maps_flat - inner)).T  # (cells, K)
    d_w2 = r.T @ d_z2
    d_r = d_z2 @ att.w2.T
    d_z1 = d_r * (z1 > 0)
    d_w1 = x.T @ d_z1
    d_b1 = d_z1.sum(axis=0)

    grads: GradientSet = {
        "attn.w1": d_w1, "attn.b1": d_b1,
        "attn.w2": d_w2, "attn.b2": np.zeros_like(att.b2),
    }
    for i in range(k):
        grads[f"proj.{i}.w"] = d_proj_w[i]
        grads[f"proj.{i}.b"] = d_proj_b[i]
    return float(total), grads


# ---------------------------------------------------------------------------
# attention export

def export_attention(maps: np.ndarray, path) -> None:
    """Write attention maps as CSV, one H-row by W-column block per head.

    Blocks are separated by a single blank line; values use shortest
    round-trip decimal formatting, '.' decimal separator, LF line endings.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3:
        raise ValueError(f"expected (K, H, W) attention maps, got shape {maps.shape}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for k in range(maps.shape[0]):
            if k:
                fh.write("\n")
            for row in maps[k]:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_attention(path) -> np.ndarray:
    """Parse a CSV written by export_attention back into a (K, H, W) array."""
    blocks: list[list[list[float]]] = [[]]
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                blocks.append([])
                continue
            blocks[-1].append([float(v) for v in line.split(",")])
    blocks = [b for b in blocks if b]
    if not blocks:
        raise ValueError(f"no attention blocks found in {path}")
    return np.asarray(blocks, dtype=np.float64)
