"""Transformer encoder with one learnable class token per class.

An image is cut into an N x N grid of P x P patches, each projected to a
D-dim patch token.  C learnable class tokens (one per class) are prepended,
a learned positional embedding is added to all C + M tokens, and the
sequence runs through L pre-norm encoder layers.  Every layer records its
post-softmax attention so localization maps can be read off afterwards.

Class scores come from the output class tokens (average pooling over the
embedding dimension by default).  The V2 variant adds a PatchCAM head: the
output patch tokens are reshaped to N x N x D, convolved to C channels and
globally average pooled into a second score vector.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .archive import write_npz
from .config import ModelConfig

CHECKPOINT_FORMAT = "mctformer-checkpoint/1"


class ShapeError(ValueError):
    pass


class UnsupportedVariantError(RuntimeError):
    pass


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class ModelParameters:
    """Ordered mapping of parameter name to leaf :class:`Tensor`."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def arrays(self):
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self):
        return ModelParameters({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.items()})

    def count(self):
        return sum(v.size for v in self.values())


def init_params(config, rng):
    """Draw a fresh parameter set.  ``rng`` is a numpy Generator or a seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c, d, p = config.num_classes, config.embed_dim, config.patch_size
    hidden = config.mlp_hidden
    t = {}

    def add(name, arr):
        t[name] = Tensor(arr, requires_grad=True)

    add("patch_proj", trunc_normal(rng, (p * p * 3, d)))
    add("class_tokens", trunc_normal(rng, (c, d)))
    add("pos_embed", trunc_normal(rng, (config.num_tokens, d)))
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        add(pre + "ln1.gamma", np.ones(d))
        add(pre + "ln1.beta", np.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            add(pre + "attn." + w, trunc_normal(rng, (d, d)))
            add(pre + "attn.b" + w[1], np.zeros(d))
        add(pre + "ln2.gamma", np.ones(d))
        add(pre + "ln2.beta", np.zeros(d))
        add(pre + "mlp.w1", trunc_normal(rng, (d, hidden)))
        add(pre + "mlp.b1", np.zeros(hidden))
        add(pre + "mlp.w2", trunc_normal(rng, (hidden, d)))
        add(pre + "mlp.b2", np.zeros(d))
    if config.head_mode == "fully_connected":
        add("head.weight", trunc_normal(rng, (c * d, c)))
        add("head.bias", np.zeros(c))
    if config.variant == "V2":
        add("cam.kernels", trunc_normal(rng, (c, 3, 3, d)))
        add("cam.bias", np.zeros(c))
    return ModelParameters(t)


# ----------------------------------------------------------------------
# forward pieces


def patchify(images, patch_size, grid_side):
    """(B, 3, P*N, P*N) -> (B, N*N, P*P*3), row-major over the grid.

    Within a patch the vector is ordered (row, column, channel).
    """
    b, ch, h, w = images.shape
    side = patch_size * grid_side
    if ch != 3 or h != side or w != side:
        raise ShapeError(f"expected images of shape (B, 3, {side}, {side}), got {images.shape}")
    x = images.reshape(b, 3, grid_side, patch_size, grid_side, patch_size)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # b, gi, gj, pi, pj, ch
    return x.reshape(b, grid_side * grid_side, patch_size * patch_size * 3)


def _batched(images):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return images[None], True
    if images.ndim != 4:
        raise ShapeError(f"images must be (3, S, S) or (B, 3, S, S), got {images.shape}")
    return images, False


def embed(images, params, config):
    """Input token sequence (B, C+M, D): class tokens first, then patches."""
    images, single = _batched(images)
    patches = patchify(images, config.patch_size, config.grid_side)
    patch_tokens = ad.matmul(Tensor(patches), params["patch_proj"])
    b = images.shape[0]
    cls = params["class_tokens"].broadcast_to((b, config.num_classes, config.embed_dim))
    tokens = ad.concat([cls, patch_tokens], axis=1) + params["pos_embed"]
    return tokens[0] if single else tokens


def attention_layer(x, params, prefix, num_heads):
    """Multi-head self-attention on normalized tokens.

    Returns the block output and the (B, H, T, T) post-softmax attention.
    """
    b, t, d = x.shape
    dh = d // num_heads

    def heads(w):
        y = ad.linear(x, params[prefix + "w" + w], params[prefix + "b" + w])
        return y.reshape(b, t, num_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    logits = ad.matmul(q, k.swap_last()) * (1.0 / np.sqrt(dh))
    attn = ad.softmax_rows(logits)
    ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = ad.linear(ctx, params[prefix + "wo"], params[prefix + "bo"])
    return out, attn.data


def encode(tokens, params, config):
    """Run the L encoder layers.

    Returns the output tokens and the attention array of shape
    (B, L, H, T, T) (or (L, H, T, T) for an unbatched input).
    """
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    if tokens.shape[1:] != (config.num_tokens, config.embed_dim):
        raise ShapeError(f"expected tokens (B, {config.num_tokens}, {config.embed_dim}), got {tokens.shape}")
    x = tokens
    maps = []
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        h = ad.layer_norm(x, params[pre + "ln1.gamma"], params[pre + "ln1.beta"])
        a, attn = attention_layer(h, params, pre + "attn.", config.num_heads)
        x = x + a
        h = ad.layer_norm(x, params[pre + "ln2.gamma"], params[pre + "ln2.beta"])
        h = ad.gelu(ad.linear(h, params[pre + "mlp.w1"], params[pre + "mlp.b1"]))
        x = x + ad.linear(h, params[pre + "mlp.w2"], params[pre + "mlp.b2"])
        maps.append(attn)
    stack = np.stack(maps, axis=1)
    if single:
        return x.reshape(config.num_tokens, config.embed_dim), stack[0]
    return x, stack


def class_scores_from_tokens(class_tokens, head_mode, params=None):
    """Class scores from output class tokens (..., C, D) -> (..., C)."""
    class_tokens = ad._as_tensor(class_tokens)
    if head_mode == "average_pool":
        return class_tokens.mean(axis=-1)
    if head_mode == "max_pool":
        return class_tokens.max(axis=-1)
    if head_mode == "fully_connected":
        if params is None or "head.weight" not in params:
            raise ValueError("fully_connected head needs head.weight / head.bias parameters")
        if class_tokens.ndim == 2:
            flat = class_tokens.reshape(1, -1)
            return ad.linear(flat, params["head.weight"], params["head.bias"])[0]
        flat = class_tokens.reshape(*class_tokens.shape[:-2], -1)
        return ad.linear(flat, params["head.weight"], params["head.bias"])
    raise ValueError(f"unknown head_mode {head_mode!r}")


def patch_cam_forward(patch_tokens, params, config):
    """PatchCAM head: (B, M, D) tokens -> ((B, N, N, C) features, (B, C) scores)."""
    if config.variant != "V2" or "cam.kernels" not in params:
        raise UnsupportedVariantError("PatchCAM head exists only for the V2 variant")
    patch_tokens = ad._as_tensor(patch_tokens)
    single = patch_tokens.ndim == 2
    n, d = config.grid_side, config.embed_dim
    x = patch_tokens.reshape(-1, n, n, d)
    feats = ad.conv3x3(x, params["cam.kernels"], params["cam.bias"])
    scores = feats.mean(axis=(1, 2))
    if single:
        return feats[0], scores[0]
    return feats, scores


# ----------------------------------------------------------------------
# full forward


class AttentionStack:
    """Per-layer, per-head attention of one image: array (L, H, T, T)."""

    def __init__(self, maps):
        maps = np.asarray(maps, dtype=np.float64)
        if maps.ndim != 4 or maps.shape[-1] != maps.shape[-2]:
            raise ShapeError(f"attention stack must be (L, H, T, T), got {maps.shape}")
        self.maps = maps

    @property
    def num_layers(self):
        return self.maps.shape[0]

    @property
    def num_heads(self):
        return self.maps.shape[1]

    @property
    def num_tokens(self):
        return self.maps.shape[2]

    def layer(self, i):
        return self.maps[i]


@dataclass
class ForwardRecord:
    """Outputs of one batched forward pass.

    Score and token fields are graph Tensors (so losses can backpropagate);
    ``attention`` is a plain array of shape (B, L, H, T, T).
    """

    config: ModelConfig
    class_scores_cls: Tensor
    output_class_tokens: Tensor
    output_patch_tokens: Tensor
    attention: np.ndarray
    class_scores_patch: Tensor | None = None
    patch_cam_features: Tensor | None = None

    @property
    def batch_size(self):
        return self.attention.shape[0]

    def attention_stack(self, i=0):
        return AttentionStack(self.attention[i])

    def cam_features(self, i=0):
        if self.patch_cam_features is None:
            raise UnsupportedVariantError("record carries no PatchCAM features (V1 model)")
        return self.patch_cam_features.data[i]


def forward(images, params, config):
    """Full forward pass on (B, 3, S, S) or (3, S, S) images."""
    images, _ = _batched(images)
    tokens = embed(images, params, config)
    out, attention = encode(tokens, params, config)
    c = config.num_classes
    cls_tokens = out[:, :c, :]
    patch_tokens = out[:, c:, :]
    record = ForwardRecord(
        config=config,
        class_scores_cls=class_scores_from_tokens(cls_tokens, config.head_mode, params),
        output_class_tokens=cls_tokens,
        output_patch_tokens=patch_tokens,
        attention=attention,
    )
    if config.variant == "V2":
        feats, scores = patch_cam_forward(patch_tokens, params, config)
        record.patch_cam_features = feats
        record.class_scores_patch = scores
    return record


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, config, extra=None):
    """Write parameters to a numpy ``.npz`` archive.

    Each parameter is stored under its name as a float64 array (shape and
    row-major values).  Two metadata entries are added: ``__format__`` (the
    format tag) and ``__config__`` (the ModelConfig as JSON), plus
    ``__extra__`` (JSON) when given.
    """
    arrays = {name: t.data for name, t in params.items()}
    arrays["__format__"] = np.array(CHECKPOINT_FORMAT)
    arrays["__config__"] = np.array(json.dumps(config.to_dict(), sort_keys=True))
    if extra is not None:
        arrays["__extra__"] = np.array(json.dumps(extra, sort_keys=True))
    write_npz(path, arrays)


def load_checkpoint(path):
    """Return (params, config, extra) from a checkpoint archive."""
    with np.load(path, allow_pickle=False) as z:
        fmt = str(z["__format__"]) if "__format__" in z.files else None
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive (format={fmt!r})")
        config = ModelConfig.from_dict(json.loads(str(z["__config__"])))
        extra = json.loads(str(z["__extra__"])) if "__extra__" in z.files else None
        tensors = {k: Tensor(z[k].astype(np.float64), requires_grad=True) for k in z.files if not k.startswith("__")}
    expected = init_params(config, 0)
    missing = set(expected) - set(tensors)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    for name in expected:
        if expected[name].shape != tensors[name].shape:
            raise ValueError(f"{path}: parameter {name} has shape {tensors[name].shape}, config implies {expected[name].shape}")
    return ModelParameters({k: tensors[k] for k in expected}), config, extra
