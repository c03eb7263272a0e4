"""Class localization maps derived from recorded attention.

All functions are pure numpy on single-image data.  Conventions:

* token order is C class tokens followed by M = N*N patch tokens;
* maps are (C, N, N) with the grid in row-major order;
* an affinity is (N, N, N, N) where ``aff[i, j, k, l]`` weighs how much
  patch (k, l) contributes to patch (i, j).
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError
from .model import AttentionStack, ShapeError, UnsupportedVariantError

STAGES = ("attn", "attn+affinity", "attn+cam", "full")


@dataclass
class ClassLocalizationMaps:
    """(C, N, N) maps in [0, 1] plus a log of the steps that produced them."""

    maps: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.maps.shape[0]

    @property
    def grid_side(self):
        return self.maps.shape[1]


def _stack(stack):
    return stack.maps if isinstance(stack, AttentionStack) else np.asarray(stack)


def head_average(stack, layer):
    """Mean over heads of one layer's attention, (T, T)."""
    maps = _stack(stack)
    if not -maps.shape[0] <= layer < maps.shape[0]:
        raise IndexError(f"layer {layer} out of range for {maps.shape[0]} layers")
    return maps[layer].mean(axis=0)


def _check_square(a, c, m):
    if a.ndim != 2 or a.shape != (c + m, c + m):
        raise ShapeError(f"attention matrix {a.shape} does not match C+M = {c}+{m}")


def slice_class_to_patch(a_t2t, c, m):
    a_t2t = np.asarray(a_t2t)
    _check_square(a_t2t, c, m)
    return a_t2t[:c, c:]


def slice_patch_to_patch(a_t2t, c, m):
    a_t2t = np.asarray(a_t2t)
    _check_square(a_t2t, c, m)
    return a_t2t[c:, c:]


def fuse_class_attention(stack, k, num_classes):
    """Mean of the head-averaged class-to-patch attention of the last ``k`` layers, (C, M)."""
    maps = _stack(stack)
    n_layers, t = maps.shape[0], maps.shape[-1]
    if not 1 <= k <= n_layers:
        raise ConfigError(f"K must be in [1, {n_layers}], got {k}")
    m = t - num_classes
    acc = np.zeros((num_classes, m))
    for layer in range(n_layers - k, n_layers):
        acc += slice_class_to_patch(head_average(maps, layer), num_classes, m)
    return acc / k


def min_max_normalize(maps):
    """Rescale each class map to [0, 1]; a constant map becomes all zeros."""
    maps = np.asarray(maps, dtype=np.float64)
    flat = maps.reshape(maps.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    hi = flat.max(axis=1, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (flat - lo) / safe, 0.0)
    return out.reshape(maps.shape)


def build_affinity(stack, num_classes, layer_set=None):
    """Patch-to-patch affinity (N, N, N, N) averaged over heads and ``layer_set``.

    ``layer_set`` defaults to every layer.  Rows are not renormalized: a
    mean of row-stochastic blocks is used as is.
    """
    maps = _stack(stack)
    if layer_set is None:
        layer_set = range(maps.shape[0])
    layer_set = list(layer_set)
    if not layer_set:
        raise ConfigError("build_affinity needs at least one layer")
    m = maps.shape[-1] - num_classes
    n = int(round(np.sqrt(m)))
    if n * n != m:
        raise ShapeError(f"{m} patch tokens do not form a square grid")
    acc = np.zeros((m, m))
    for layer in layer_set:
        acc += slice_patch_to_patch(head_average(maps, layer), num_classes, m)
    return (acc / len(layer_set)).reshape(n, n, n, n)


def refine(maps, affinity):
    """out[c, i, j] = sum_{k,l} affinity[i, j, k, l] * maps[c, k, l]."""
    maps = maps.maps if isinstance(maps, ClassLocalizationMaps) else np.asarray(maps, dtype=np.float64)
    c, n, _ = maps.shape
    if affinity.shape != (n, n, n, n):
        raise ShapeError(f"affinity {affinity.shape} does not match map grid {n}x{n}")
    flat = maps.reshape(c, n * n) @ affinity.reshape(n * n, n * n).T
    return flat.reshape(c, n, n)


def extract_patch_cam(features):
    """PatchCAM maps (C, N, N) from (N, N, C) conv features: ReLU, then min-max."""
    features = np.asarray(features, dtype=np.float64)
    return min_max_normalize(np.maximum(features, 0.0).transpose(2, 0, 1))


def fuse_with_patch_cam(attn_maps, cam_maps):
    a = attn_maps.maps if isinstance(attn_maps, ClassLocalizationMaps) else np.asarray(attn_maps)
    b = np.asarray(cam_maps)
    if a.shape != b.shape:
        raise ShapeError(f"cannot fuse maps of shapes {a.shape} and {b.shape}")
    return a * b


def _as_grid(fused, n):
    return fused.reshape(fused.shape[0], n, n)


def localization_pipeline(record, config, index=0, stage="full", labels=None, fuse_layers=None, affinity_layers=None):
    """Localization maps of one image of a :class:`ForwardRecord`.

    ``stage`` selects the composition: ``attn`` (normalized fused class
    attention), ``attn+affinity`` (refined by patch affinity),
    ``attn+cam`` (Hadamard product with PatchCAM maps, V2 only) or
    ``full`` (PatchCAM fusion and affinity refinement for V2; for V1 it is
    the same as ``attn+affinity``).  When ``labels`` is given, maps of
    classes absent from the image are set to zero before normalization
    (absent classes carry no evidence).
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    use_cam = stage in ("attn+cam", "full") and config.variant == "V2"
    if stage == "attn+cam" and config.variant != "V2":
        raise UnsupportedVariantError("stage 'attn+cam' needs a V2 model")
    use_affinity = stage in ("attn+affinity", "full")

    c, n = config.num_classes, config.grid_side
    k = config.fuse_layers if fuse_layers is None else fuse_layers
    stack = record.attention_stack(index)
    steps = []
    mask = None if labels is None else (np.asarray(labels) > 0)[:, None, None]

    x = _as_grid(fuse_class_attention(stack, k, c), n)
    if mask is not None:
        x = x * mask
    x = min_max_normalize(x)
    steps.append(f"fuse_class_attention(K={k})")
    steps.append("min_max_normalize")
    if use_cam:
        cam = extract_patch_cam(record.cam_features(index))
        x = fuse_with_patch_cam(x, cam)
        steps.append("fuse_with_patch_cam")
    if use_affinity:
        layers = list(range(config.num_layers)) if affinity_layers is None else list(affinity_layers)
        x = refine(x, build_affinity(stack, c, layers))
        steps.append(f"refine(affinity_layers={layers})")
    x = min_max_normalize(x)
    steps.append("min_max_normalize")
    meta = {
        "stage": stage,
        "variant": config.variant,
        "steps": steps,
        "extra_normalizations": len([s for s in steps if s == "min_max_normalize"]) - 1,
        "affinity_row_renormalized": False,
        "absent_classes_zeroed": mask is not None,
    }
    return ClassLocalizationMaps(x, meta)


# ----------------------------------------------------------------------
# export


def to_gray8(maps):
    """Per-class 8-bit grayscale values round(255 * map), shape (C, N, N)."""
    return np.rint(255.0 * np.clip(np.asarray(maps), 0.0, 1.0)).astype(np.uint8)


def export_maps(maps, out_dir, stem, scale=1):
    """Write ``{stem}_class{c}.png`` per class and ``{stem}.csv`` of raw values.

    CSV columns: class,row,col,value.  ``scale`` enlarges the PNGs by
    nearest-neighbour repetition (values unchanged).
    """
    from PIL import Image

    out_dir = Path(out_dir)
    arr = maps.maps if isinstance(maps, ClassLocalizationMaps) else np.asarray(maps)
    gray = to_gray8(arr)
    paths = []
    for c in range(arr.shape[0]):
        img = gray[c]
        if scale > 1:
            img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
        p = out_dir / f"{stem}_class{c}.png"
        Image.fromarray(img, mode="L").save(p)
        paths.append(p)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write("class,row,col,value\n")
        for c in range(arr.shape[0]):
            for i in range(arr.shape[1]):
                for j in range(arr.shape[2]):
                    fh.write(f"{c},{i},{j},{float(arr[c, i, j])!r}\n")
    paths.append(csv_path)
    return paths


def read_maps_csv(path):
    rows = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64, ndmin=2)
    c, n = int(rows[:, 0].max()) + 1, int(rows[:, 1].max()) + 1
    out = np.zeros((c, n, n))
    out[rows[:, 0].astype(int), rows[:, 1].astype(int), rows[:, 2].astype(int)] = rows[:, 3]
    return out


def export_affinity(affinity, path):
    """Raw float64 little-endian values after a one-line JSON header."""
    import json

    header = json.dumps({"shape": list(affinity.shape), "dtype": "<f8", "order": "C"})
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        fh.write(np.ascontiguousarray(affinity, dtype="<f8").tobytes())


def read_affinity(path):
    import json

    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        data = np.frombuffer(fh.read(), dtype=header["dtype"])
    return data.reshape(header["shape"])
