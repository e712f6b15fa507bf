"""Task and data augmentations applied coherently to whole episodes.

A task augmentation rewrites input, target, and every context pair so the
episode still demonstrates one consistent transformation: mask
augmentations hit the targets of mask tasks, intensity augmentations hit
the inputs (with parameters shared across the episode so all pairs show
the same remapping), channel augmentations hit all inputs, and spatial
augmentations warp each (input, target) pair with its own transform.

Augmentation trees compose these: `compose` nodes apply children left to
right, `oneof` nodes pick a single child uniformly, and every node fires
with its own probability p. Interpretation is deterministic given
(episode, tree, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .episode import Episode, TaskKind

MASK_AUGS = ("mask_contour", "mask_dilate", "mask_invert")
INTENSITY_AUGS = ("sobel", "intensity_mapping", "synthetic_modality")
CHANNEL_AUGS = ("permute_channels", "duplicate_channels")
ALL_AUGS = MASK_AUGS + INTENSITY_AUGS + CHANNEL_AUGS + ("spatial",)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _require_binary(mask: np.ndarray, op: str) -> None:
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError(f"{op} requires a binary mask")


# ---------------------------------------------------------------------------
# mask augmentations


def mask_invert(mask: np.ndarray) -> np.ndarray:
    _require_binary(mask, "mask_invert")
    return (1.0 - mask).astype(np.float32)


def mask_dilate(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Morphological dilation with a 3x3 structuring element, `radius` times."""
    _require_binary(mask, "mask_dilate")
    out = mask.astype(np.float32)
    h, w = mask.shape[-2:]
    flat = out.reshape(-1, h, w)
    for _ in range(radius):
        p = np.pad(flat, ((0, 0), (1, 1), (1, 1)))
        flat = np.maximum.reduce([p[:, i:i + h, j:j + w]
                                  for i in (0, 1, 2) for j in (0, 1, 2)])
    return flat.reshape(mask.shape)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Width-3 boundary band: pixels 4-adjacent to background, dilated once.

    Neighbors are edge-replicated, so a mask reaching the image border has
    no contour there (the contour is the interface with background, and a
    full mask has none).
    """
    _require_binary(mask, "mask_contour")
    h, w = mask.shape[-2:]
    flat = mask.reshape(-1, h, w)
    p = np.pad(flat, ((0, 0), (1, 1), (1, 1)), mode="edge")
    nb_min = np.minimum.reduce([p[:, :-2, 1:-1], p[:, 2:, 1:-1],
                                p[:, 1:-1, :-2], p[:, 1:-1, 2:]])
    boundary = ((flat == 1.0) & (nb_min == 0.0)).astype(np.float32)
    return mask_dilate(boundary, 1).reshape(mask.shape)


# ---------------------------------------------------------------------------
# intensity augmentations


def sobel_filter(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude with 3x3 Sobel kernels, reflect padding, max-rescaled."""
    if img.ndim != 2:
        raise ValueError("sobel_filter expects a 2-d intensity image")
    p = np.pad(img.astype(np.float64), 1, mode="reflect")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:])
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    return mag.astype(np.float32)


def _intensity_targets(n_bins: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=n_bins)


def intensity_mapping(img: np.ndarray, n_bins: int = 8, seed=0,
                      targets: np.ndarray | None = None) -> np.ndarray:
    """Histogram-bin remapping with linear interpolation between bin centers.

    Each of the n_bins centers over [0,1] is assigned a random target
    intensity; pixels map by linear interpolation between the two
    neighboring centers (linearly extrapolated past the outermost ones).
    Equal input intensities always map to equal outputs.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    rng = _as_rng(seed)
    if targets is None:
        targets = _intensity_targets(n_bins, rng)
    centers = (np.arange(n_bins) + 0.5) / n_bins
    v = img.astype(np.float64)
    idx = np.clip(np.searchsorted(centers, v) - 1, 0, n_bins - 2)
    c0, c1 = centers[idx], centers[idx + 1]
    t0, t1 = targets[idx], targets[idx + 1]
    out = t0 + (v - c0) * (t1 - t0) / (c1 - c0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _class_intensity_table(max_label: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mu = rng.uniform(0.05, 0.95, size=max_label + 1)
    sd = rng.uniform(0.01, 0.10, size=max_label + 1)
    return mu, sd


def synthetic_modality(seg_map: np.ndarray, orig_img: np.ndarray,
                       brain_mask: np.ndarray, seed=0,
                       table: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Synthetic contrast from the label map: class k pixels ~ N(mu_k, s_k).

    If the original image has content outside the brain mask (a skull),
    the synthetic brain is composited onto it; otherwise everything
    outside the brain stays empty.
    """
    if seg_map is None:
        raise ValueError("synthetic_modality requires a segmentation map")
    rng = _as_rng(seed)
    if table is None:
        table = _class_intensity_table(int(seg_map.max()), rng)
    mu, sd = table
    synth = rng.normal(mu[seg_map], sd[seg_map])
    synth = np.clip(synth, 0.0, 1.0)
    inside = brain_mask > 0
    has_skull = bool(np.any((orig_img > 0.02) & ~inside))
    out = np.where(inside, synth, orig_img if has_skull else 0.0)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# channel augmentations


def permute_channels(x: np.ndarray, perm) -> np.ndarray:
    perm = list(perm)
    if sorted(perm) != list(range(x.shape[0])):
        raise ValueError(f"invalid channel permutation {perm}")
    return x[perm].copy()


def duplicate_channels(x: np.ndarray, p: float, seed=0) -> np.ndarray:
    """Fill each all-zero channel, with probability p, by a random non-zero one."""
    rng = _as_rng(seed)
    nonzero = [c for c in range(x.shape[0]) if np.any(x[c] != 0)]
    out = x.copy()
    if not nonzero:
        return out
    for c in range(x.shape[0]):
        if not np.any(x[c] != 0) and rng.random() < p:
            out[c] = x[int(rng.choice(nonzero))]
    return out


# ---------------------------------------------------------------------------
# spatial augmentation


@dataclass
class SpatialParams:
    rotate_deg: float = 10.0
    translate_px: float = 3.0
    scale: tuple[float, float] = (0.9, 1.1)
    elastic_prob: float = 0.5
    elastic_amp: float = 2.0
    elastic_cells: int = 4
    flip_prob: float = 0.5

    def is_identity(self) -> bool:
        return (self.rotate_deg == 0 and self.translate_px == 0
                and self.scale == (1.0, 1.0) and self.elastic_prob == 0
                and self.flip_prob == 0)


def _upsample_coarse(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    cells = coarse.shape[0] - 1
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + coarse[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
            + coarse[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
            + coarse[np.ix_(y0 + 1, x0 + 1)] * fy * fx)


def _sample_transform(params: SpatialParams, h: int, w: int, allow_flip: bool,
                      rng: np.random.Generator) -> dict:
    t = {
        "angle": np.deg2rad(rng.uniform(-params.rotate_deg, params.rotate_deg)),
        "ty": rng.uniform(-params.translate_px, params.translate_px),
        "tx": rng.uniform(-params.translate_px, params.translate_px),
        "scale": rng.uniform(*params.scale),
        "flip": allow_flip and params.flip_prob > 0 and rng.random() < params.flip_prob,
        "disp": None,
    }
    if params.elastic_prob > 0 and rng.random() < params.elastic_prob:
        g = params.elastic_cells
        coarse_y = rng.uniform(-params.elastic_amp, params.elastic_amp, size=(g + 1, g + 1))
        coarse_x = rng.uniform(-params.elastic_amp, params.elastic_amp, size=(g + 1, g + 1))
        t["disp"] = (_upsample_coarse(coarse_y, h, w), _upsample_coarse(coarse_x, h, w))
    return t


def _source_coords(t: dict, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse map of output pixels to input coordinates."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if t["flip"]:
        xx = (w - 1) - xx
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = yy - cy - t["ty"]
    dx = xx - cx - t["tx"]
    ca, sa = np.cos(t["angle"]), np.sin(t["angle"])
    inv_s = 1.0 / t["scale"]
    sy = cy + inv_s * (-sa * dx + ca * dy)
    sx = cx + inv_s * (ca * dx + sa * dy)
    if t["disp"] is not None:
        sy = sy + t["disp"][0]
        sx = sx + t["disp"][1]
    return sy, sx


def _warp(img: np.ndarray, sy: np.ndarray, sx: np.ndarray, nearest: bool) -> np.ndarray:
    """Sample img at (sy, sx); zero outside. Bilinear or nearest."""
    h, w = img.shape
    if nearest:
        yi = np.rint(sy).astype(int)
        xi = np.rint(sx).astype(int)
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        out = np.zeros_like(img, dtype=np.float64)
        out[valid] = img[yi[valid], xi[valid]]
        return out.astype(np.float32)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros(img.shape, dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        contrib = np.zeros_like(out)
        contrib[valid] = img[yi[valid], xi[valid]] * wgt[valid]
        out += contrib
    return out.astype(np.float32)


def _warp_pair(inp: np.ndarray, tgt: np.ndarray, mask_target: bool,
               params: SpatialParams, allow_flip: bool,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = inp.shape[-2:]
    t = _sample_transform(params, h, w, allow_flip, rng)
    sy, sx = _source_coords(t, h, w)
    new_in = np.stack([_warp(inp[c], sy, sx, nearest=False) for c in range(inp.shape[0])])
    new_tg = np.stack([_warp(tgt[c], sy, sx, nearest=mask_target) for c in range(tgt.shape[0])])
    return new_in, new_tg


def spatial_augment_pair(inp: np.ndarray, tgt: np.ndarray, mask_target: bool,
                         params: SpatialParams, rng, allow_flip: bool = True
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Warp a single (input, target) pair with one random transform."""
    rng = _as_rng(rng)
    if params.is_identity():
        return inp, tgt
    return _warp_pair(inp, tgt, mask_target, params, allow_flip, rng)


def spatial_augment(ep: Episode, params: SpatialParams, seed=0) -> Episode:
    """Random affine + optional elastic warp; one transform per image pair.

    The same transform hits the input and target of a pair; different
    pairs draw independent transforms. Mask targets are resampled with
    nearest interpolation so they stay binary, and flips are disabled for
    segmentation tasks.
    """
    rng = _as_rng(seed)
    if params.is_identity():
        return ep
    allow_flip = ep.task_kind is not TaskKind.SEGMENTATION
    mask_target = ep.loss_kind == "dice"
    new_in, new_tg = _warp_pair(ep.input, ep.target, mask_target, params, allow_flip, rng)
    ctx_in = np.empty_like(ep.ctx_inputs)
    ctx_tg = np.empty_like(ep.ctx_targets)
    for i in range(ep.context_size):
        ctx_in[i], ctx_tg[i] = _warp_pair(ep.ctx_inputs[i], ep.ctx_targets[i],
                                          mask_target, params, allow_flip, rng)
    return replace(ep, input=new_in, target=new_tg, ctx_inputs=ctx_in, ctx_targets=ctx_tg)


# ---------------------------------------------------------------------------
# augmentation tree


@dataclass
class AugTree:
    kind: str                       # "compose" | "oneof" | "leaf"
    p: float = 1.0
    children: list["AugTree"] = field(default_factory=list)
    aug: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("compose", "oneof", "leaf"):
            raise ValueError(f"unknown node kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"node probability {self.p} outside [0, 1]")
        if self.kind == "leaf":
            if self.aug not in ALL_AUGS:
                raise ValueError(f"unknown augmentation {self.aug!r}")
            if self.children:
                raise ValueError("leaf nodes cannot have children")
        elif not self.children:
            raise ValueError(f"{self.kind} node needs children")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "p": self.p}
        if self.kind == "leaf":
            d["aug"] = self.aug
            if self.params:
                d["params"] = self.params
        else:
            d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugTree":
        known = {"kind", "p", "aug", "params", "children"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augment tree keys {sorted(unknown)}")
        return cls(kind=d["kind"], p=float(d.get("p", 1.0)),
                   children=[cls.from_dict(c) for c in d.get("children", [])],
                   aug=d.get("aug"), params=dict(d.get("params", {})))


def leaf(aug: str, p: float = 1.0, **params) -> AugTree:
    return AugTree("leaf", p=p, aug=aug, params=params)


def default_tree() -> AugTree:
    """Mask, intensity, channel, then spatial groups, each optional at p=0.5."""
    return AugTree("compose", p=1.0, children=[
        AugTree("compose", p=0.5, children=[
            leaf("mask_contour", p=0.5),
            leaf("mask_dilate", p=0.5, radius=1),
            leaf("mask_invert", p=0.5),
        ]),
        AugTree("oneof", p=0.5, children=[
            leaf("sobel"),
            leaf("intensity_mapping", n_bins=8),
            leaf("synthetic_modality"),
        ]),
        AugTree("compose", p=0.5, children=[
            leaf("permute_channels", p=0.5),
            leaf("duplicate_channels", p=0.5, p_fill=0.5),
        ]),
        leaf("spatial", p=1.0),
    ])


def baseline_tree() -> AugTree:
    """Data augmentations only, for task-specific baseline training."""
    return AugTree("compose", p=1.0, children=[leaf("spatial", p=1.0)])


_TASK_FORBIDDEN = {
    TaskKind.INPAINTING: {"mask_contour", "mask_dilate"},
    TaskKind.MODALITY_TRANSFER: {"sobel", "synthetic_modality"},
}


def prune_tree(tree: AugTree, task_kind: TaskKind, has_seg_maps: bool) -> AugTree | None:
    """Drop leaves that are invalid for this task; collapse empty groups."""
    if tree.kind == "leaf":
        if tree.aug in MASK_AUGS and task_kind not in (TaskKind.SEGMENTATION,
                                                       TaskKind.SKULL_STRIPPING):
            return None
        if tree.aug in _TASK_FORBIDDEN.get(task_kind, ()):
            return None
        if tree.aug == "synthetic_modality" and not has_seg_maps:
            return None
        return tree
    children = [c for c in (prune_tree(c, task_kind, has_seg_maps) for c in tree.children)
                if c is not None]
    if not children:
        return None
    return replace(tree, children=children)


def _nonzero_channels(x: np.ndarray) -> list[int]:
    return [c for c in range(x.shape[0]) if np.any(x[c] != 0)]


def _apply_to_targets(ep: Episode, fn) -> Episode:
    if ep.loss_kind != "dice":
        raise ValueError("mask augmentation applied to a non-mask target")
    tgt = fn(ep.target)
    ctx = np.stack([fn(ep.ctx_targets[i]) for i in range(ep.context_size)])
    return replace(ep, target=tgt, ctx_targets=ctx)


def _apply_leaf(ep: Episode, node: AugTree, rng: np.random.Generator) -> Episode:
    aug = node.aug
    if aug == "mask_invert":
        return _apply_to_targets(ep, mask_invert)
    if aug == "mask_dilate":
        radius = int(node.params.get("radius", 1))
        return _apply_to_targets(ep, lambda m: mask_dilate(m, radius))
    if aug == "mask_contour":
        return _apply_to_targets(ep, mask_contour)

    if aug == "sobel":
        def per_image(x):
            out = x.copy()
            for c in _nonzero_channels(x):
                out[c] = sobel_filter(x[c])
            return out
        return replace(ep, input=per_image(ep.input),
                       ctx_inputs=np.stack([per_image(ci) for ci in ep.ctx_inputs]))

    if aug == "intensity_mapping":
        n_bins = int(node.params.get("n_bins", 8))
        targets = _intensity_targets(n_bins, rng)  # one mapping for the whole episode

        def per_image(x):
            out = x.copy()
            for c in _nonzero_channels(x):
                out[c] = intensity_mapping(x[c], n_bins, rng, targets=targets)
            return out
        return replace(ep, input=per_image(ep.input),
                       ctx_inputs=np.stack([per_image(ci) for ci in ep.ctx_inputs]))

    if aug == "synthetic_modality":
        if ep.seg_map is None or ep.ctx_seg_maps is None:
            raise ValueError("synthetic_modality needs segmentation maps on the episode")
        max_label = max(int(ep.seg_map.max()), max(int(s.max()) for s in ep.ctx_seg_maps))
        table = _class_intensity_table(max_label, rng)  # shared episode contrast
        nz = _nonzero_channels(ep.input)
        chan = int(nz[int(rng.integers(len(nz)))]) if nz else 0

        def per_image(x, seg, brain):
            out = x.copy()
            if np.any(x[chan] != 0):
                out[chan] = synthetic_modality(seg, x[chan], brain, rng, table=table)
            return out

        new_in = per_image(ep.input, ep.seg_map, ep.brain_mask)
        ctx = np.stack([per_image(ep.ctx_inputs[i], ep.ctx_seg_maps[i], ep.ctx_brain_masks[i])
                        for i in range(ep.context_size)])
        return replace(ep, input=new_in, ctx_inputs=ctx)

    if aug == "permute_channels":
        perm = rng.permutation(ep.input.shape[0]).tolist()
        return replace(ep, input=permute_channels(ep.input, perm),
                       ctx_inputs=np.stack([permute_channels(ci, perm) for ci in ep.ctx_inputs]))

    if aug == "duplicate_channels":
        p_fill = float(node.params.get("p_fill", 0.5))
        nz = _nonzero_channels(ep.input)
        if not nz:
            return ep
        plan = []  # same fill decisions for every episode member
        for c in range(ep.input.shape[0]):
            if c not in nz and rng.random() < p_fill:
                plan.append((c, int(rng.choice(nz))))

        def per_image(x):
            out = x.copy()
            for dst, src in plan:
                out[dst] = x[src]
            return out
        return replace(ep, input=per_image(ep.input),
                       ctx_inputs=np.stack([per_image(ci) for ci in ep.ctx_inputs]))

    if aug == "spatial":
        params = SpatialParams(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in node.params.items() if k != "p_fill"})
        return spatial_augment(ep, params, rng)

    raise ValueError(f"unknown augmentation {aug!r}")


def _visit(ep: Episode, node: AugTree, rng: np.random.Generator) -> Episode:
    if rng.random() >= node.p:
        return ep
    if node.kind == "leaf":
        return _apply_leaf(ep, node, rng)
    if node.kind == "compose":
        for child in node.children:
            ep = _visit(ep, child, rng)
        return ep
    # oneof: uniform choice of exactly one child
    child = node.children[int(rng.integers(len(node.children)))]
    return _visit(ep, child, rng)


def apply_tree(ep: Episode, tree: AugTree, seed) -> Episode:
    """Interpret an augmentation tree on one episode; pure given (ep, tree, seed)."""
    rng = _as_rng(seed)
    pruned = prune_tree(tree, ep.task_kind, ep.seg_map is not None)
    if pruned is None:
        return ep
    return _visit(ep, pruned, rng)
