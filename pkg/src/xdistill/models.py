"""Student encoder, projection heads, occupancy decoder and probe head.

Parameters live in flat ``{name: Tensor}`` dicts so that optimizers and the
checkpoint format never need to know about module structure.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import autograd as ag
from .autograd import Tensor

INPUT_SCALE = np.array([0.1, 0.1, 0.5, 4.0])  # x, y, z, intensity


def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    return ag.param(rng.uniform(-bound, bound, (fan_in, fan_out))), ag.param(np.zeros(fan_out))


class Module:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _affine(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        W, b = init_affine(rng, fan_in, fan_out)
        self.params[f"{name}.W"] = W
        self.params[f"{name}.b"] = b

    def _apply(self, name: str, x) -> Tensor:
        return ag.affine(x, self.params[f"{name}.W"], self.params[f"{name}.b"])

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)
            p.grad = np.zeros_like(p.data)


def knn_indices(xyz: np.ndarray, k: int, segments=None) -> np.ndarray:
    """(N, k) nearest neighbours (self included), computed within each segment.

    ``segments`` is a list of (start, stop) ranges; neighbourhoods never cross
    them, which keeps samples of a batch independent.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    segments = segments or [(0, len(xyz))]
    out = np.empty((len(xyz), k), dtype=np.int64)
    for start, stop in segments:
        if stop - start < k:
            raise ValueError(f"encoder needs at least k={k} points per sample, got {stop - start}")
        _, nb = cKDTree(xyz[start:stop]).query(xyz[start:stop], k=k)
        out[start:stop] = nb.reshape(stop - start, k) + start
    return out


class PointEncoder(Module):
    """Two blocks of shared per-point layers, k-NN mean pooling and fusion.

    Each block: x -> relu(affine) -> relu(affine) = h ; pooled = mean of h over
    the k neighbours ; out = relu(affine([h, pooled])). With two blocks a point
    sees its 2-hop neighbourhood.
    """

    def __init__(self, rng: np.random.Generator, in_dim: int = 4, width: int = 64, out_dim: int = 32, k: int = 8):
        super().__init__()
        self.k, self.in_dim, self.out_dim = k, in_dim, out_dim
        dims = [(in_dim, width), (width, out_dim)]
        for bi, (din, dout) in enumerate(dims, start=1):
            self._affine(rng, f"b{bi}.l1", din, width)
            self._affine(rng, f"b{bi}.l2", width, width)
            self._affine(rng, f"b{bi}.fuse", 2 * width, dout)

    def __call__(self, points: np.ndarray, neighbors: np.ndarray | None = None) -> Tensor:
        points = np.asarray(points, dtype=np.float64)
        if points.shape[0] < self.k:
            raise ValueError(f"encoder needs N >= k={self.k}, got N={points.shape[0]}")
        if neighbors is None:
            neighbors = knn_indices(points[:, :3], self.k)
        x = Tensor(points * INPUT_SCALE)
        for bi in (1, 2):
            h = ag.relu(self._apply(f"b{bi}.l1", x))
            h = ag.relu(self._apply(f"b{bi}.l2", h))
            pooled = ag.neighbor_mean(h, neighbors)
            x = ag.relu(self._apply(f"b{bi}.fuse", ag.concat_lastdim([h, pooled])))
        return x


class ProjectionHead(Module):
    """Maps backbone features to teacher width. ``layers=1`` is the linear head."""

    def __init__(self, rng: np.random.Generator, in_dim: int = 32, out_dim: int = 16,
                 layers: int = 3, hidden: int = 2048):
        super().__init__()
        if layers < 1:
            raise ValueError("layers must be >= 1")
        self.layers, self.hidden, self.in_dim, self.out_dim = layers, hidden, in_dim, out_dim
        widths = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        for i in range(layers):
            self._affine(rng, f"l{i}", widths[i], widths[i + 1])

    @property
    def variant(self) -> str:
        return "linear" if self.layers == 1 else "mlp"

    def __call__(self, feats) -> Tensor:
        feats = ag.as_tensor(feats)
        if feats.shape[-1] != self.in_dim:
            raise ag.ShapeError(f"head expects width {self.in_dim}, got {feats.shape[-1]}")
        x = feats
        for i in range(self.layers):
            x = self._apply(f"l{i}", x)
            if i < self.layers - 1:
                x = ag.relu(x)
        return x


def head_parameter_count(in_dim: int, out_dim: int, layers: int, hidden: int) -> int:
    widths = [in_dim] + [hidden] * (layers - 1) + [out_dim]
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(layers))


class OccupancyDecoder(Module):
    """[parent feature, query offset] -> (occupancy logit, intensity)."""

    def __init__(self, rng: np.random.Generator, feat_dim: int = 32, hidden: tuple[int, ...] = (128, 128)):
        super().__init__()
        widths = [feat_dim + 3, *hidden, 2]
        self.n = len(widths) - 1
        for i in range(self.n):
            self._affine(rng, f"l{i}", widths[i], widths[i + 1])

    def __call__(self, parent_feats, query_coords: np.ndarray):
        x = ag.concat_lastdim([parent_feats, Tensor(query_coords)])
        for i in range(self.n):
            x = self._apply(f"l{i}", x)
            if i < self.n - 1:
                x = ag.relu(x)
        return x  # (Q, 2)


def decode_occupancy(decoder: OccupancyDecoder, backbone, parent_index: np.ndarray, query_coords: np.ndarray):
    """Gather parent features per query and run the decoder. Returns the (Q, 2) output tensor."""
    parents = ag.gather_rows(backbone, parent_index)
    return decoder(parents, query_coords)


class ProbeHead(Module):
    def __init__(self, rng: np.random.Generator, feat_dim: int = 32, num_classes: int = 5):
        super().__init__()
        self._affine(rng, "fc", feat_dim, num_classes)

    def __call__(self, feats) -> Tensor:
        return self._apply("fc", feats)


def prefixed(prefix: str, module: Module) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.params.items()}
