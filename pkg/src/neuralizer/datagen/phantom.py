"""Procedural 2D head phantoms standing in for neuroimaging subjects.

Each subject is an elliptical head with a bright skull ring, a brain mask,
and a fixed family of anatomical blob classes whose positions and sizes
are jittered per subject. Labels keep the same meaning across subjects so
"segment class k" is a consistent task. Modalities are derived from one
shared anatomy by per-modality class-to-intensity tables (fixed across
subjects, so a modality behaves like a consistent acquisition contrast)
plus smooth per-subject noise and a per-dataset intensity bias that plays
the role of an acquisition site.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..ntf import read_ntf, write_ntf

SKULL_LABEL = 1
# label: (cy, cx, ry, rx, shape), in brain-relative units. Sizes keep every
# structure at least ~3 px thick at the 32 px desk resolution so masks stay
# resolvable (and wider than the 3 px contour augmentation band).
_ANATOMY_TEMPLATE = {
    2: (-0.05, -0.42, 0.44, 0.27, "crescent"),
    3: (-0.05, 0.42, 0.44, 0.27, "crescent"),
    4: (0.08, 0.00, 0.26, 0.30, "ellipse"),
    5: (-0.58, 0.00, 0.22, 0.55, "ellipse"),
    6: (0.52, -0.34, 0.24, 0.26, "ellipse"),
    7: (0.56, 0.28, 0.22, 0.28, "ellipse"),
}
ANATOMY_LABELS = tuple(sorted(_ANATOMY_TEMPLATE))

_MAX_MODALITIES = 8
_MAX_LABEL = max(ANATOMY_LABELS)
# Fixed master table: modality m assigns each label a stable intensity, so
# the same modality index means the same contrast for every subject.
_MODALITY_TABLE = np.random.default_rng(716253).uniform(
    0.05, 0.95, size=(_MAX_MODALITIES, _MAX_LABEL + 1)
)


@dataclass
class PhantomConfig:
    image_size: int = 32
    n_modalities: int = 4
    n_datasets: int = 3

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16 to fit the anatomy")
        if not 1 <= self.n_modalities <= _MAX_MODALITIES:
            raise ValueError(f"n_modalities must be in [1, {_MAX_MODALITIES}]")
        if self.n_datasets < 1:
            raise ValueError("n_datasets must be >= 1")


@dataclass
class PhantomSubject:
    seg_map: np.ndarray      # (H,W) int32; 0 background, 1 skull, 2.. anatomy
    modalities: np.ndarray   # (M,H,W) float32 in [0,1]
    brain_mask: np.ndarray   # (H,W) float32 binary
    dataset_id: int
    subject_id: int = -1

    @property
    def image_size(self) -> int:
        return self.seg_map.shape[0]


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float,
             angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / max(rx, 1e-6)) ** 2 + (v / max(ry, 1e-6)) ** 2 <= 1.0


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    """Bilinearly upsampled coarse uniform noise in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def generate_phantom(seed: int, cfg: PhantomConfig) -> PhantomSubject:
    """Deterministic subject for a given seed."""
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    dataset_id = int(rng.integers(cfg.n_datasets))

    cy = s / 2 + rng.uniform(-0.02, 0.02) * s
    cx = s / 2 + rng.uniform(-0.02, 0.02) * s
    head_ry = 0.44 * s * rng.uniform(0.94, 1.04)
    head_rx = 0.38 * s * rng.uniform(0.94, 1.04)
    head_angle = rng.uniform(-0.12, 0.12)

    head = _ellipse(s, s, cy, cx, head_ry, head_rx, head_angle)
    inner = _ellipse(s, s, cy, cx, 0.88 * head_ry, 0.88 * head_rx, head_angle)
    brain = _ellipse(s, s, cy, cx, 0.80 * head_ry, 0.80 * head_rx, head_angle)

    seg = np.zeros((s, s), dtype=np.int32)
    seg[head & ~inner] = SKULL_LABEL

    # Large structures first so smaller ones may overwrite their overlap.
    for label in (5, 2, 3, 4, 6, 7):
        t_cy, t_cx, t_ry, t_rx, shape = _ANATOMY_TEMPLATE[label]
        jy = t_cy + rng.uniform(-0.06, 0.06)
        jx = t_cx + rng.uniform(-0.06, 0.06)
        sy = t_ry * rng.uniform(0.85, 1.15)
        sx = t_rx * rng.uniform(0.85, 1.15)
        angle = rng.uniform(-0.35, 0.35)
        blob = _ellipse(s, s, cy + jy * head_ry, cx + jx * head_rx,
                        sy * head_ry, sx * head_rx, angle)
        if shape == "crescent":
            bite = _ellipse(s, s, cy + jy * head_ry, cx + jx * head_rx * 0.45,
                            0.75 * sy * head_ry, 0.75 * sx * head_rx, angle)
            blob = blob & ~bite
        blob &= brain
        seg[blob] = label

    gain = 1.0 - 0.06 * dataset_id
    offset = 0.04 * dataset_id
    modalities = np.zeros((cfg.n_modalities, s, s), dtype=np.float32)
    for m in range(cfg.n_modalities):
        table = _MODALITY_TABLE[m].copy()
        table += rng.uniform(-0.04, 0.04, size=table.shape)
        values = table[seg]
        values[seg == 0] = 0.30  # CSF-like fill inside the head where unlabeled
        img = gain * values + offset + 0.035 * _smooth_field(rng, s, s)
        modalities[m] = np.where(head, np.clip(img, 0.0, 1.0), 0.0).astype(np.float32)

    return PhantomSubject(
        seg_map=seg,
        modalities=modalities,
        brain_mask=brain.astype(np.float32),
        dataset_id=dataset_id,
        subject_id=seed,
    )


def make_pool(n_subjects: int, cfg: PhantomConfig, base_seed: int) -> list[PhantomSubject]:
    return [generate_phantom(base_seed + i, cfg) for i in range(n_subjects)]


def save_pool(pool: list[PhantomSubject], directory: str | Path) -> None:
    """Cache a pool as NTF1 tensors plus a JSON index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, subj in enumerate(pool):
        names = {
            "seg": f"s{i:04d}_seg.ntf",
            "modalities": f"s{i:04d}_mod.ntf",
            "brain": f"s{i:04d}_brain.ntf",
        }
        write_ntf(directory / names["seg"], subj.seg_map.astype(np.float32))
        write_ntf(directory / names["modalities"], subj.modalities)
        write_ntf(directory / names["brain"], subj.brain_mask)
        index.append({"subject_id": subj.subject_id, "dataset_id": subj.dataset_id,
                      "files": names})
    (directory / "index.json").write_text(json.dumps({"subjects": index}, indent=1))


def load_pool(directory: str | Path) -> list[PhantomSubject]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    pool = []
    for entry in index["subjects"]:
        files = entry["files"]
        pool.append(PhantomSubject(
            seg_map=read_ntf(directory / files["seg"]).astype(np.int32),
            modalities=read_ntf(directory / files["modalities"]),
            brain_mask=read_ntf(directory / files["brain"]),
            dataset_id=int(entry["dataset_id"]),
            subject_id=int(entry["subject_id"]),
        ))
    return pool
