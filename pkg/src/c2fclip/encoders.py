"""Image and text transformer towers sharing a contrastive embedding space."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import MAX_TEXT_LEN, VOCAB_SIZE
from .tensor import Tensor


class ResolutionError(ValueError):
    """Input image size does not match the positional-embedding grid."""


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    n_heads: int
    width: int
    mlp_ratio: float = 4.0
    patch_size: int | None = None
    max_seq_len: int = 16
    embed_dim: int = 32
    vocab_size: int = 0
    channels: int = 3

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ValueError(f"width {self.width} is not divisible by n_heads {self.n_heads}")
        if min(self.n_layers, self.n_heads, self.width, self.embed_dim) < 1:
            raise ValueError("layer, head, width and embed_dim counts must be positive")

    @property
    def mlp_width(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    def replace(self, **changes) -> "EncoderConfig":
        return replace(self, **changes)


# Desk-scale defaults: 32px canvas, patch 4, so 8/16/32px inputs give 4/16/64 tokens.
DESK_IMAGE = EncoderConfig(n_layers=4, n_heads=4, width=64, patch_size=4, max_seq_len=64, embed_dim=128)
DESK_TEXT = EncoderConfig(n_layers=2, n_heads=4, width=64, max_seq_len=MAX_TEXT_LEN, embed_dim=128,
                          vocab_size=VOCAB_SIZE)

# Reference towers used only for compute accounting.  The text tower's head
# count is set to 16 so width divides evenly; heads do not enter FLOP counts.
VIT_L16 = EncoderConfig(n_layers=24, n_heads=16, width=1024, patch_size=16, max_seq_len=784, embed_dim=1024)
TEXT_REFERENCE = EncoderConfig(n_layers=12, n_heads=16, width=1024, max_seq_len=64, embed_dim=1024,
                               vocab_size=32000)


def grid_for(image_size: int, patch_size: int) -> tuple[int, int]:
    if image_size % patch_size:
        raise ResolutionError(f"image size {image_size} is not divisible by patch size {patch_size}")
    g = image_size // patch_size
    return g, g


# -- image-side primitives -------------------------------------------------------

def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """Split ``[B, h, w, C]`` images into ``[B, N, p*p*C]`` raster-ordered patches."""
    images = np.asarray(images)
    B, h, w, C = images.shape
    if h % p or w % p:
        raise ResolutionError(f"image {h}x{w} is not divisible by patch size p={p}")
    gh, gw = h // p, w // p
    x = images.reshape(B, gh, p, gw, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, p * p * C)


def unpatchify(patches: np.ndarray, p: int, h: int, w: int, channels: int = 3) -> np.ndarray:
    B = patches.shape[0]
    gh, gw = h // p, w // p
    x = patches.reshape(B, gh, gw, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h, w, channels)


def _align_corners_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] = frac
    return m


def resample_grid(weights: np.ndarray, grid: tuple[int, int], new_grid: tuple[int, int]) -> np.ndarray:
    """Bilinear, align-corners resampling of ``[gh*gw, C]`` position weights."""
    gh, gw = grid
    nh, nw = new_grid
    if min(gh, gw, nh, nw) < 1:
        raise ValueError(f"grid dims must be >= 1, got {grid} -> {new_grid}")
    if (gh, gw) == (nh, nw):
        return weights.copy()
    table = weights.reshape(gh, gw, -1)
    out = np.einsum("ih,hwc,jw->ijc", _align_corners_matrix(gh, nh), table,
                    _align_corners_matrix(gw, nw))
    return out.reshape(nh * nw, -1)


def mask_indices(batch: int, n_tokens: int, keep_ratio: float, rng_seed) -> np.ndarray:
    """Per-example sorted random subsets of ``round(keep_ratio * n_tokens)`` positions."""
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    k = int(math.floor(keep_ratio * n_tokens + 0.5))
    if k == 0:
        raise ValueError(f"keep_ratio {keep_ratio} keeps no tokens out of {n_tokens}")
    if k == n_tokens:
        return np.broadcast_to(np.arange(n_tokens), (batch, n_tokens)).copy()
    rng = np.random.default_rng(rng_seed)
    keys = rng.random((batch, n_tokens))
    return np.sort(np.argpartition(keys, k - 1, axis=1)[:, :k], axis=1)


def mask_tokens(tokens, keep_ratio: float, rng_seed):
    """Keep a uniform random subset of tokens per example, in original order."""
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    idx = mask_indices(data.shape[0], data.shape[1], keep_ratio, rng_seed)
    if isinstance(tokens, Tensor):
        return T.take_along_axis(tokens, idx, axis=1)
    return np.take_along_axis(data, idx[..., None] if data.ndim == 3 else idx, axis=1)


# -- model -----------------------------------------------------------------------

def _block_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    w, m = cfg.width, cfg.mlp_width
    return {
        "ln1/g": (w,), "ln1/b": (w,),
        "attn/q/w": (w, w), "attn/q/b": (w,),
        "attn/k/w": (w, w), "attn/k/b": (w,),
        "attn/v/w": (w, w), "attn/v/b": (w,),
        "attn/out/w": (w, w), "attn/out/b": (w,),
        "ln2/g": (w,), "ln2/b": (w,),
        "mlp/fc1/w": (w, m), "mlp/fc1/b": (m,),
        "mlp/fc2/w": (m, w), "mlp/fc2/b": (w,),
    }


def tower_param_count(cfg: EncoderConfig, n_positions: int, kind: str) -> int:
    """Closed-form parameter count for one tower."""
    w, m, d = cfg.width, cfg.mlp_width, cfg.embed_dim
    per_layer = 4 * (w * w + w) + 2 * w * m + m + w + 4 * w
    if kind == "image":
        stem = cfg.patch_size ** 2 * cfg.channels * w + w
    else:
        stem = cfg.vocab_size * w
    return stem + n_positions * w + cfg.n_layers * per_layer + 2 * w + w * d


class DualEncoder:
    """Parameters and forward passes of the image and text towers.

    ``params`` maps slash-separated paths to leaf tensors; ``grid`` is the
    image positional-embedding grid currently allocated.
    """

    def __init__(self, image_cfg: EncoderConfig = DESK_IMAGE, text_cfg: EncoderConfig = DESK_TEXT,
                 image_size: int = 32, seed: int = 0, init_temperature: float = 0.07):
        if image_cfg.patch_size is None:
            raise ValueError("image tower needs a patch_size")
        self.image_cfg = image_cfg
        self.text_cfg = text_cfg
        self.grid = grid_for(image_size, image_cfg.patch_size)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._init_tower("image", image_cfg, rng)
        self._init_tower("text", text_cfg, rng)
        self._add("logit_scale", np.array(math.log(1.0 / init_temperature)))

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)

    def _init_tower(self, tower, cfg, rng):
        w = cfg.width
        if tower == "image":
            fan_in = cfg.patch_size ** 2 * cfg.channels
            self._add("image/patch/w", rng.normal(0, fan_in ** -0.5, (fan_in, w)))
            self._add("image/patch/b", np.zeros(w))
            self._add("image/pos", rng.normal(0, 0.02, (self.grid[0] * self.grid[1], w)))
        else:
            self._add("text/tok", rng.normal(0, 0.02, (cfg.vocab_size, w)))
            self._add("text/pos", rng.normal(0, 0.01, (cfg.max_seq_len, w)))
        for i in range(cfg.n_layers):
            for key, shape in _block_param_shapes(cfg).items():
                leaf = key.rsplit("/", 1)[-1]
                if leaf == "g":
                    val = np.ones(shape)
                elif leaf == "b":
                    val = np.zeros(shape)
                else:
                    std = shape[0] ** -0.5
                    if key in ("attn/out/w", "mlp/fc2/w"):
                        std /= math.sqrt(2 * cfg.n_layers)
                    val = rng.normal(0, std, shape)
                self._add(f"{tower}/blocks/{i}/{key}", val)
        self._add(f"{tower}/ln_post/g", np.ones(w))
        self._add(f"{tower}/ln_post/b", np.zeros(w))
        self._add(f"{tower}/proj/w", rng.normal(0, w ** -0.5, (w, cfg.embed_dim)))

    # -- bookkeeping ---------------------------------------------------------

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def image_size(self) -> int:
        return self.grid[0] * self.image_cfg.patch_size

    def clone(self) -> "DualEncoder":
        other = object.__new__(DualEncoder)
        other.image_cfg, other.text_cfg, other.grid = self.image_cfg, self.text_cfg, self.grid
        other.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return other

    def resample_pos_embed(self, new_grid: tuple[int, int]) -> None:
        """Replace the image position table by its bilinear resampling to ``new_grid``."""
        new = resample_grid(self.params["image/pos"].data, self.grid, tuple(new_grid))
        self.params["image/pos"] = Tensor(new, requires_grad=True, name="image/pos")
        self.grid = tuple(new_grid)

    # -- forward -------------------------------------------------------------

    def _block(self, prefix: str, cfg: EncoderConfig, x: Tensor, key_bias=None) -> Tensor:
        P = self.params
        B, N, W = x.shape
        H = cfg.n_heads
        dh = W // H
        h = T.layer_norm(x, P[f"{prefix}/ln1/g"], P[f"{prefix}/ln1/b"])

        def heads(name):
            y = T.linear(h, P[f"{prefix}/attn/{name}/w"], P[f"{prefix}/attn/{name}/b"])
            return y.reshape(B, N, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if key_bias is not None:
            scores = scores + key_bias
        attn = T.matmul(T.softmax(scores, axis=-1), v)
        attn = attn.transpose(0, 2, 1, 3).reshape(B, N, W)
        x = x + T.linear(attn, P[f"{prefix}/attn/out/w"], P[f"{prefix}/attn/out/b"])
        h = T.layer_norm(x, P[f"{prefix}/ln2/g"], P[f"{prefix}/ln2/b"])
        h = T.gelu(T.linear(h, P[f"{prefix}/mlp/fc1/w"], P[f"{prefix}/mlp/fc1/b"]))
        return x + T.linear(h, P[f"{prefix}/mlp/fc2/w"], P[f"{prefix}/mlp/fc2/b"])

    def _head(self, tower: str, x: Tensor, mask=None) -> Tensor:
        P = self.params
        x = T.layer_norm(x, P[f"{tower}/ln_post/g"], P[f"{tower}/ln_post/b"])
        pooled = T.mean_pool(x, mask)
        return T.l2_normalize(T.matmul(pooled, P[f"{tower}/proj/w"]))

    def encode_image(self, images: np.ndarray, keep_ratio: float = 1.0, mask_seed=None) -> Tensor:
        """Unit-norm ``[B, d]`` embeddings of ``[B, h, w, C]`` images.

        With ``keep_ratio < 1`` a random subset of patch tokens (with their
        position rows) is kept before the transformer blocks.
        """
        cfg, p = self.image_cfg, self.image_cfg.patch_size
        h, w = images.shape[1:3]
        if (h % p or w % p) or (h // p, w // p) != tuple(self.grid):
            raise ResolutionError(
                f"image {h}x{w} needs a {h // p}x{w // p} position grid but the model has "
                f"{self.grid[0]}x{self.grid[1]}; call resample_pos_embed / transfer_resolution first")
        P = self.params
        x = T.linear(patchify(images, p), P["image/patch/w"], P["image/patch/b"]) + P["image/pos"]
        if keep_ratio < 1.0:
            x = mask_tokens(x, keep_ratio, mask_seed)
        for i in range(cfg.n_layers):
            x = self._block(f"image/blocks/{i}", cfg, x)
        return self._head("image", x)

    def encode_text(self, tokens: np.ndarray, lengths=None) -> Tensor:
        """Unit-norm ``[B, d]`` embeddings of padded token id batches ``[B, L]``."""
        cfg = self.text_cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        B, L = tokens.shape
        if L > cfg.max_seq_len:
            raise ValueError(f"text length {L} exceeds max_seq_len {cfg.max_seq_len}")
        if lengths is None:
            mask = tokens != 0
        else:
            mask = np.arange(L)[None, :] < np.asarray(lengths)[:, None]
        P = self.params
        x = T.embedding(tokens, P["text/tok"]) + T.take(P["text/pos"], np.arange(L), axis=0)
        key_bias = np.where(mask, 0.0, -1e30)[:, None, None, :]
        for i in range(cfg.n_layers):
            x = self._block(f"text/blocks/{i}", cfg, x, key_bias)
        return self._head("text", x, mask)

    def temperature(self) -> float:
        return float(np.exp(-self.params["logit_scale"].data))


# -- checkpoints -----------------------------------------------------------------
#
#   0   8s   magic b"C2FCKPT\0"
#   8   u32  format version (1)
#   12  u32  header length H in bytes
#   16  H    UTF-8 JSON header: {"image_cfg", "text_cfg", "grid", "extra", "n_params"}
#   then, per parameter in sorted path order:
#       u16 path length, path bytes (UTF-8)
#       u8 dtype code (1 = float64), u8 rank, rank x u32 dims
#       payload: prod(dims) little-endian float64
CKPT_MAGIC = b"C2FCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(model: DualEncoder, path, extra: dict | None = None) -> None:
    header = json.dumps({
        "image_cfg": asdict(model.image_cfg),
        "text_cfg": asdict(model.text_cfg),
        "grid": list(model.grid),
        "extra": extra or {},
        "n_params": len(model.params),
    }, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<BB", 1, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[DualEncoder, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    off = 16 + hlen
    params = {}
    for _ in range(header["n_params"]):
        (klen,) = struct.unpack_from("<H", raw, off)
        name = raw[off + 2: off + 2 + klen].decode("utf-8")
        off += 2 + klen
        code, rank = struct.unpack_from("<BB", raw, off)
        if code != 1:
            raise ValueError(f"{path}: unsupported dtype code {code} for {name}")
        dims = struct.unpack_from(f"<{rank}I", raw, off + 2)
        off += 2 + 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
        off += 8 * n
        params[name] = Tensor(arr, requires_grad=True, name=name)
    model = object.__new__(DualEncoder)
    model.image_cfg = EncoderConfig(**header["image_cfg"])
    model.text_cfg = EncoderConfig(**header["text_cfg"])
    model.grid = tuple(header["grid"])
    model.params = params
    return model, header["extra"]
