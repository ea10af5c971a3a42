"""Model assembly, variants, parameter accounting and checkpoints.

Two architectures share the tokenizer and decoder:

* RDViTModel: prelude block(s) -> one weight-shared block unrolled with the
  stable injection + adaptive halting -> coda block(s) -> decoder.
* StandardViTModel: the ablation with (prelude + loops + coda) independent
  blocks and none of the recurrence machinery.

The decoder mirrors the tokenization: a linear projection to 4x the decoder
width, a 4x transposed-conv stage (kernel = stride), then 2x stages until
the patch factor is covered, each followed by BatchNorm and GELU; a
kernel-(Pz,1,1) depth stage comes first for volumes. Kernel-equals-stride
transposed convolutions are implemented as a channel matmul plus pixel
rearrangement, which is the same linear map. If the cascade misses the
target resolution the logits are resampled bi/trilinearly.

Checkpoints ("RDVT"): magic, u32 version, u64 manifest length, a utf-8
manifest of `name<TAB>shape<TAB>offset` lines (offset counted in float32
elements), then the raw little-endian float32 payload.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .embeddings import PatchGrid, TokenEmbedder
from .errors import ConfigError, FormatError, ShapeError
from .moe import MoELayer
from .nn import BatchNorm, Linear, Module, ModuleList, TransformerBlock
from .recurrent import DepthLoRA, HaltingHead, LTIInjection, LoopStats, ponder_cost, recurrent_loop
from .rng import RngState
from .tensor import Tensor

_FDI_CLASSES = 33  # background + 32 teeth


@dataclass(frozen=True)
class RDViTConfig:
    image_size: tuple = (224, 224)
    patch_size: int = 16
    patch_size_z: int = 2
    in_channels: int = 1
    dim: int = 192
    heads: int = 3
    loops: int = 8
    prelude_layers: int = 1
    coda_layers: int = 1
    lora_rank: int = 4
    act_threshold: float = 0.95
    moe: bool = False
    moe_experts: int = 8
    moe_top_k: int = 2
    moe_expert_dim: int = 128
    dropout: float = 0.1
    drop_path: float = 0.1
    seg_head_channels: int = 64
    num_classes: int = 4
    head: str = "seg"

    def validate(self) -> "RDViTConfig":
        problems = []
        if self.dim % self.heads != 0:
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.loops < 1:
            problems.append(f"loops must be >= 1, got {self.loops}")
        if not self.act_threshold > 0:
            problems.append(f"halting threshold must be positive, got {self.act_threshold}")
        if self.head not in ("seg", "instance"):
            problems.append(f"unknown head kind '{self.head}'")
        if self.head == "instance" and len(self.image_size) != 3:
            problems.append("instance head requires a 3D image_size")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.lora_rank < 0:
            problems.append(f"lora_rank must be >= 0, got {self.lora_rank}")
        if problems:
            raise ConfigError("; ".join(problems))
        self.grid()  # patch divisibility checks live in PatchGrid
        return self

    def grid(self) -> PatchGrid:
        return PatchGrid(
            image_size=tuple(self.image_size),
            patch_size=self.patch_size,
            patch_size_z=self.patch_size_z,
            in_channels=self.in_channels,
        )


VARIANTS = {
    "rdvit_tiny": dict(dim=192, heads=3, loops=8, moe=False),
    "rdvit_tiny_moe": dict(dim=192, heads=3, loops=8, moe=True),
    "rdvit_small": dict(dim=384, heads=6, loops=8, moe=False),
    # architecture switch only: the baseline unrolls unique blocks at
    # whatever width/depth the config asks for (fair-comparison contract)
    "standard_vit": dict(),
    "custom": dict(),
}


def apply_variant(config: RDViTConfig, variant: str) -> RDViTConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}' (have {sorted(VARIANTS)})")
    return replace(config, **VARIANTS[variant])


def build(config: RDViTConfig, variant: str, rng: RngState):
    config = apply_variant(config, variant).validate()
    if variant == "standard_vit":
        return StandardViTModel(config, rng)
    return RDViTModel(config, rng)


# ---------------------------------------------------------------------------
# decoder


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    # half-pixel-center linear interpolation weights, rows sum to 1
    m = np.zeros((dst, src))
    centers = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1.0)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = centers - lo
    m[np.arange(dst), lo] += 1.0 - frac
    m[np.arange(dst), hi] += frac
    return m


def resample_linear(x: Tensor, target: tuple) -> Tensor:
    """Bi/trilinear resize of a channel-first map to `target` spatial size."""
    spatial = x.shape[2:]
    if len(spatial) != len(target):
        raise ShapeError(f"cannot resample {x.shape} to spatial {target}")
    for i, (src, dst) in enumerate(zip(spatial, target)):
        if src == dst:
            continue
        axis = 2 + i
        perm = [a for a in range(x.ndim) if a != axis] + [axis]
        y = x.transpose(*perm)
        y = T.matmul(y, T.constant(_interp_matrix(src, dst).T, like=x))
        x = y.transpose(*np.argsort(perm))
    return x


class _Upsample2D(Module):
    """Transposed conv with kernel == stride == k as matmul + rearrange."""

    def __init__(self, cin: int, cout: int, k: int, rng: RngState):
        self.weight = Tensor(rng.trunc_normal((cin, cout * k * k), std=0.02), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.norm = BatchNorm(cout)
        self._k = k
        self._cout = cout

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        b, cin, h, w = x.shape
        k = self._k
        y = T.matmul(x.transpose(0, 2, 3, 1), self.weight)
        y = y.reshape(b, h, w, self._cout, k, k)
        y = y.transpose(0, 3, 1, 4, 2, 5).reshape(b, self._cout, h * k, w * k)
        y = y + self.bias.reshape(1, -1, 1, 1)
        return T.gelu(self.norm(y, train))


class _UpsampleDepth(Module):
    """Depth-axis transposed conv, kernel (pz, 1, 1), stride the same."""

    def __init__(self, channels: int, pz: int, rng: RngState):
        self.weight = Tensor(
            rng.trunc_normal((channels, channels * pz), std=0.02), requires_grad=True
        )
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.norm = BatchNorm(channels)
        self._pz = pz
        self._c = channels

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        b, c, d, h, w = x.shape
        pz = self._pz
        y = T.matmul(x.transpose(0, 2, 3, 4, 1), self.weight)
        y = y.reshape(b, d, h, w, self._c, pz)
        y = y.transpose(0, 4, 1, 5, 2, 3).reshape(b, self._c, d * pz, h, w)
        y = y + self.bias.reshape(1, -1, 1, 1, 1)
        return T.gelu(self.norm(y, train))


class _PointwiseConv(Module):
    """1x1(x1) convolution: a linear map over the channel axis."""

    def __init__(self, cin: int, cout: int, rng: RngState):
        self.proj = Linear(cin, cout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        perm = (0,) + tuple(range(2, x.ndim)) + (1,)
        y = self.proj(x.transpose(*perm))
        return y.transpose(*np.argsort(perm))


def _upsample_factors(patch: int) -> list:
    factors = [4]
    covered = 4
    while covered < patch:
        factors.append(2)
        covered *= 2
    return factors


class DecoderTrunk(Module):
    """Tokens back to a dense per-voxel feature map at image resolution."""

    def __init__(self, grid: PatchGrid, dim: int, base_channels: int, rng: RngState):
        c4 = 4 * base_channels
        self.proj = Linear(dim, c4, rng.spawn("proj"))
        self.depth = (
            _UpsampleDepth(c4, grid.patch_size_z, rng.spawn("depth"))
            if grid.ndim == 3 and grid.patch_size_z > 1
            else None
        )
        stages = []
        cin = c4
        for i, k in enumerate(_upsample_factors(grid.patch_size)):
            cout = max(base_channels, cin // 2)
            stages.append(_Upsample2D(cin, cout, k, rng.spawn("stage", i)))
            cin = cout
        self.stages = ModuleList(stages)
        self.out_channels = cin
        self.grid = grid

    def __call__(self, tokens: Tensor, train: bool) -> Tensor:
        g = self.grid
        b = tokens.shape[0]
        x = T.gelu(self.proj(tokens))
        c = x.shape[-1]
        if g.ndim == 2:
            gh, gw = g.grid_shape
            x = x.reshape(b, gh, gw, c).transpose(0, 3, 1, 2)
            for stage in self.stages:
                x = stage(x, train)
        else:
            gd, gh, gw = g.grid_shape
            x = x.reshape(b, gd, gh, gw, c).transpose(0, 4, 1, 2, 3)
            if self.depth is not None:
                x = self.depth(x, train)
            d = x.shape[2]
            # spatial stages act per-slice; fold depth into the batch
            x = x.transpose(0, 2, 1, 3, 4).reshape(b * d, x.shape[1], gh, gw)
            for stage in self.stages:
                x = stage(x, train)
            x = x.reshape(b, d, x.shape[1], x.shape[2], x.shape[3]).transpose(0, 2, 1, 3, 4)
        if tuple(x.shape[2:]) != tuple(g.image_size):
            x = resample_linear(x, tuple(g.image_size))
        return x


class SegHead(Module):
    def __init__(self, grid: PatchGrid, dim: int, base_channels: int, num_classes: int, rng: RngState):
        self.trunk = DecoderTrunk(grid, dim, base_channels, rng.spawn("trunk"))
        self.classify = _PointwiseConv(self.trunk.out_channels, num_classes, rng.spawn("classify"))

    def __call__(self, tokens: Tensor, train: bool) -> Tensor:
        return self.classify(self.trunk(tokens, train))


class InstanceHead(Module):
    """Seed / offset / tooth-class maps from a shared decoder trunk.

    All three heads return raw scores; consumers apply sigmoid to the seed
    channel where probabilities are needed.
    """

    def __init__(self, grid: PatchGrid, dim: int, base_channels: int, rng: RngState):
        if grid.ndim != 3:
            raise ConfigError("instance head is defined for volumes only")
        self.trunk = DecoderTrunk(grid, dim, base_channels, rng.spawn("trunk"))
        c = self.trunk.out_channels
        self.seed = _PointwiseConv(c, 1, rng.spawn("seed"))
        self.offset = _PointwiseConv(c, 3, rng.spawn("offset"))
        self.fdi = _PointwiseConv(c, _FDI_CLASSES, rng.spawn("fdi"))

    def __call__(self, tokens: Tensor, train: bool):
        feats = self.trunk(tokens, train)
        return self.seed(feats), self.offset(feats), self.fdi(feats)


# ---------------------------------------------------------------------------
# models


def _make_head(config: RDViTConfig, rng: RngState):
    grid = config.grid()
    if config.head == "instance":
        return InstanceHead(grid, config.dim, config.seg_head_channels, rng)
    return SegHead(grid, config.dim, config.seg_head_channels, config.num_classes, rng)


def _make_ffn(config: RDViTConfig, rng: RngState):
    if config.moe:
        return MoELayer(
            config.dim, config.moe_experts, config.moe_top_k, config.moe_expert_dim, rng
        )
    return None  # TransformerBlock builds its own SwiGLU


class RDViTModel(Module):
    def __init__(self, config: RDViTConfig, rng: RngState):
        config.validate()
        grid = config.grid()
        self.embedder = TokenEmbedder(grid, config.dim, rng.spawn("embed"))
        self.prelude = ModuleList(
            TransformerBlock(
                config.dim,
                config.heads,
                rng.spawn("prelude", i),
                dropout_p=config.dropout,
                drop_path_p=config.drop_path,
            )
            for i in range(config.prelude_layers)
        )
        self.core = TransformerBlock(
            config.dim,
            config.heads,
            rng.spawn("core"),
            ffn=_make_ffn(config, rng.spawn("core-moe")),
            dropout_p=config.dropout,
            drop_path_p=config.drop_path,
        )
        self.injection = LTIInjection(config.dim)
        self.halt = HaltingHead(config.dim, rng.spawn("halt"))
        self.lora = (
            DepthLoRA(config.dim, config.lora_rank, config.loops, rng.spawn("lora"))
            if config.lora_rank > 0
            else None
        )
        self.coda = ModuleList(
            TransformerBlock(
                config.dim,
                config.heads,
                rng.spawn("coda", i),
                dropout_p=config.dropout,
                drop_path_p=config.drop_path,
            )
            for i in range(config.coda_layers)
        )
        self.head = _make_head(config, rng.spawn("head"))
        self._config = config
        self._last_ponder: Tensor | None = None

    @property
    def config(self) -> RDViTConfig:
        return self._config

    def forward(self, x, train: bool = False, loops: int | None = None, rng: RngState | None = None):
        """Returns (head output, LoopStats). `loops` overrides the trained
        depth at inference; the ponder tensor for the loss is available
        through `ponder_loss` until the next forward."""
        cfg = self._config
        if not isinstance(x, Tensor):
            x = Tensor(x)
        tokens = self.embedder(x)
        for blk in self.prelude:
            tokens = blk(tokens, train, rng)
        e = tokens
        h_out, ponder, stats, _ = recurrent_loop(
            self.core,
            self.injection,
            self.halt,
            self.lora,
            e,
            loops if loops is not None else cfg.loops,
            cfg.act_threshold,
            cfg.dim,
            train=train,
            rng=rng,
        )
        self._last_ponder = ponder
        for blk in self.coda:
            h_out = blk(h_out, train, rng)
        return self.head(h_out, train), stats

    def ponder_loss(self, lam: float) -> Tensor:
        if self._last_ponder is None:
            raise ConfigError("ponder loss requested before any forward pass")
        return ponder_cost(self._last_ponder, lam)


class StandardViTModel(Module):
    """Plain depth-10 style ablation: every block has its own weights."""

    def __init__(self, config: RDViTConfig, rng: RngState):
        config.validate()
        grid = config.grid()
        depth = config.prelude_layers + config.loops + config.coda_layers
        self.embedder = TokenEmbedder(grid, config.dim, rng.spawn("embed"))
        self.blocks = ModuleList(
            TransformerBlock(
                config.dim,
                config.heads,
                rng.spawn("block", i),
                dropout_p=config.dropout,
                drop_path_p=config.drop_path,
            )
            for i in range(depth)
        )
        self.head = _make_head(config, rng.spawn("head"))
        self._config = config
        self._depth = depth
        self._last_ponder = None

    @property
    def config(self) -> RDViTConfig:
        return self._config

    def forward(self, x, train: bool = False, loops: int | None = None, rng: RngState | None = None):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        tokens = self.embedder(x)
        for blk in self.blocks:
            tokens = blk(tokens, train, rng)
        b, n, _ = tokens.shape
        return self.head(tokens, train), LoopStats.empty(b, n, self._depth)

    def ponder_loss(self, lam: float) -> Tensor:
        return T.zeros(())


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass
class ParamReport:
    total: int
    by_component: dict = field(default_factory=dict)

    def lines(self) -> list:
        out = [f"{name:24s} {count:>12,d}" for name, count in self.by_component.items()]
        out.append(f"{'total':24s} {self.total:>12,d}")
        return out


def count_parameters(model: Module) -> ParamReport:
    """Learnable scalar count, grouped by top-level component. The routing
    bias counts as learnable (it is trained, just not by gradient)."""
    by = {}
    total = 0
    for name, p in model.named_parameters():
        head = name.split(".", 1)[0]
        by[head] = by.get(head, 0) + p.data.size
        total += p.data.size
    for name, buf, countable in model.named_buffers():
        if not countable:
            continue
        head = name.split(".", 1)[0]
        by[head] = by.get(head, 0) + buf.size
        total += buf.size
    return ParamReport(total=total, by_component=by)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"RDVT"
_CKPT_VERSION = 1


def _shape_token(shape: tuple) -> str:
    return "-" if len(shape) == 0 else ",".join(str(s) for s in shape)


def _parse_shape(token: str) -> tuple:
    return () if token == "-" else tuple(int(s) for s in token.split(","))


def save_checkpoint(path, model_or_state) -> None:
    """Write named arrays as the RDVT container (cast to float32)."""
    if isinstance(model_or_state, Module):
        state = list(model_or_state.named_state())
    else:
        state = list(model_or_state.items())
    manifest_lines = []
    payload = io.BytesIO()
    offset = 0
    for name, arr in state:
        # ascontiguousarray alone would promote 0-d arrays to 1-d
        arr32 = np.ascontiguousarray(arr, dtype="<f4").reshape(np.shape(arr))
        manifest_lines.append(f"{name}\t{_shape_token(arr32.shape)}\t{offset}")
        payload.write(arr32.tobytes())
        offset += arr32.size
    manifest = ("\n".join(manifest_lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(np.uint32(_CKPT_VERSION).tobytes())
        fh.write(np.uint64(len(manifest)).tobytes())
        fh.write(manifest)
        fh.write(payload.getvalue())


def load_checkpoint_arrays(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    if len(blob) < 16:
        raise FormatError("checkpoint header truncated", offset=len(blob))
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    mlen = int(np.frombuffer(blob, dtype="<u8", count=1, offset=8)[0])
    mstart, mend = 16, 16 + mlen
    if mend > len(blob):
        raise FormatError("manifest extends past end of file", offset=len(blob))
    manifest = blob[mstart:mend].decode("utf-8")
    arrays = {}
    for line in manifest.splitlines():
        if not line:
            continue
        try:
            name, shape_tok, off_tok = line.split("\t")
        except ValueError as err:
            raise FormatError(f"malformed manifest line {line!r}", offset=mstart) from err
        shape = _parse_shape(shape_tok)
        count = int(np.prod(shape)) if shape else 1
        start = mend + int(off_tok) * 4
        end = start + count * 4
        if end > len(blob):
            raise FormatError(f"data for '{name}' extends past end of file", offset=start)
        arrays[name] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
    return arrays


def load_checkpoint(path, model: Module) -> None:
    """Restore parameters and buffers in place; names and shapes must match
    the model exactly."""
    arrays = load_checkpoint_arrays(path)
    expected = dict(model.named_state())
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise FormatError(f"checkpoint/model mismatch: missing={missing}, extra={extra}")
    params = dict(model.named_parameters())
    for name, arr in arrays.items():
        if arr.shape != expected[name].shape:
            raise FormatError(
                f"shape mismatch for '{name}': checkpoint {arr.shape} vs model {expected[name].shape}"
            )
        if name in params:
            params[name].data = arr.astype(params[name].data.dtype)
        else:
            _assign_buffer(model, name, arr)


def _assign_buffer(model: Module, name: str, arr: np.ndarray) -> None:
    parts = name.split(".")
    obj = model
    for part in parts[:-1]:
        obj = getattr(obj, part)
    old = obj.get_buffer(parts[-1])
    obj.set_buffer(parts[-1], arr.astype(old.dtype))
