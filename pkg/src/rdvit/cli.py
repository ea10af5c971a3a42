"""The `rdvit` command: data synthesis, training, and analysis exports.

Commands: synth-gen, train, gradcheck, extrapolate, act-maps, moe-stats,
data-efficiency. Every command is deterministic given its config, so all
outputs are checksummable. Image export is binary PGM (P5, maxval 255);
tables are CSV/TSV with fixed headers; the run summary is JSON.

Exit codes: 0 success, 1 config/usage error, 2 numeric failure, 3 I/O or
file-format failure.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np
from scipy import ndimage

from . import tensor as T
from .config import RunConfig, parse_run_config, read_run_config, write_run_config
from .data import generate, write_dataset
from .errors import ConfigError, FormatError, NumericError
from .model import RDViTConfig, RDViTModel, build, load_checkpoint
from .moe import MoELayer, expert_utilization
from .rng import RngState
from .tensor import Tensor
from .training import cross_entropy, evaluate, split_train_val, stack_batch, train_run


# ---------------------------------------------------------------------------
# PGM export


def write_pgm(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ConfigError(f"PGM export needs a 2D uint8 array, got {arr.dtype} {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise FormatError("not a binary PGM (P5) file", offset=0)
    cursor = 2
    fields = []
    while len(fields) < 3:
        while cursor < len(blob) and blob[cursor : cursor + 1].isspace():
            cursor += 1
        if cursor < len(blob) and blob[cursor : cursor + 1] == b"#":
            while cursor < len(blob) and blob[cursor : cursor + 1] != b"\n":
                cursor += 1
            continue
        start = cursor
        while cursor < len(blob) and not blob[cursor : cursor + 1].isspace():
            cursor += 1
        if cursor == start:
            raise FormatError("truncated PGM header", offset=cursor)
        try:
            fields.append(int(blob[start:cursor]))
        except ValueError:
            raise FormatError(f"bad PGM header token {blob[start:cursor]!r}", offset=start)
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", offset=cursor)
    cursor += 1  # single whitespace byte after maxval
    expected = width * height
    if len(blob) - cursor != expected:
        raise FormatError(
            f"PGM payload is {len(blob) - cursor} bytes, expected {expected}", offset=cursor
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=cursor).reshape(height, width).copy()


def to_u8(arr: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Affine rescale to 0..255 (min/max of the array unless pinned)."""
    a = np.asarray(arr, dtype=np.float64)
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint(np.clip((a - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# label/patch analysis helpers


def boundary_band(label: np.ndarray, width: int = 2) -> np.ndarray:
    """Voxels within `width` dilation steps of a class transition."""
    edges = np.zeros(label.shape, dtype=bool)
    for ax in range(label.ndim):
        diff = np.diff(label, axis=ax) != 0
        lo = [slice(None)] * label.ndim
        hi = [slice(None)] * label.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        edges[tuple(lo)] |= diff
        edges[tuple(hi)] |= diff
    if width > 0 and edges.any():
        edges = ndimage.binary_dilation(edges, iterations=width)
    return edges


def patch_blocks(arr: np.ndarray, grid) -> np.ndarray:
    """Rows of per-patch voxels in token order (depth-major, rows, cols)."""
    p = grid.patch_size
    if grid.ndim == 2:
        h, w = arr.shape
        gh, gw = h // p, w // p
        return arr.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)
    pz = grid.patch_size_z
    d, h, w = arr.shape
    gd, gh, gw = d // pz, h // p, w // p
    return (
        arr.reshape(gd, pz, gh, p, gw, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(gd * gh * gw, pz * p * p)
    )


def token_majority_class(label: np.ndarray, grid) -> np.ndarray:
    blocks = patch_blocks(label, grid)
    out = np.empty(blocks.shape[0], dtype=np.int64)
    for i, row in enumerate(blocks):
        out[i] = np.bincount(row).argmax()  # ties go to the smaller class id
    return out


def boundary_token_mask(label: np.ndarray, grid, width: int = 2) -> np.ndarray:
    """True for tokens whose patch touches the label-boundary band."""
    return patch_blocks(boundary_band(label, width), grid).any(axis=1)


def iteration_image(iters: np.ndarray, grid, loops: int) -> np.ndarray:
    """Per-token iteration counts as a patch-resolution grayscale image
    upsampled (nearest) to input size; pixel value = T_n / T * 255."""
    shape = grid.grid_shape
    tn = iters.reshape(shape)
    if grid.ndim == 3:
        tn = tn[shape[0] // 2]
    block = np.ones((grid.patch_size, grid.patch_size))
    up = np.kron(tn.astype(np.float64), block)
    return np.rint(up / loops * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# micro-model gradient check


def _gradcheck_config() -> RDViTConfig:
    return RDViTConfig(
        image_size=(16, 16),
        patch_size=4,
        in_channels=1,
        dim=12,
        heads=2,
        loops=3,
        prelude_layers=1,
        coda_layers=1,
        lora_rank=2,
        act_threshold=0.95,
        moe=True,
        moe_experts=4,
        moe_top_k=2,
        moe_expert_dim=8,
        dropout=0.0,
        drop_path=0.0,
        seg_head_channels=4,
        num_classes=3,
        head="seg",
    )


def run_model_gradcheck(eps: float = 1e-5, seed: int = 11):
    """Central-difference check of every parameter group on a micro model
    (64-bit, deterministic forward). Returns [(name, shape, max_rel_err)].

    Parameters are re-drawn at O(1) scale before checking: at init scale
    (std 0.02, adapter up-projection exactly zero) many gradient coordinates
    sit at the 1e-8 denominator floor where central differences measure
    nothing but float64 roundoff, and whole adapter paths carry no signal.
    A generic parameter point checks the same backward rules with every
    path live. The halting head stays small-weighted so no token's
    cumulative halting probability sits near the threshold, where the
    freeze masks would flip under the +-eps perturbation.
    """
    report = []
    with T.using_dtype(np.float64):
        rng = RngState(seed)
        model = RDViTModel(_gradcheck_config(), rng.spawn("init"))
        shake = rng.spawn("shake")
        for name, p in model.named_parameters():
            if name.endswith("halt.proj.weight"):
                p.data[...] = shake.normal(p.shape, std=0.05)
            elif name.endswith("halt.proj.bias"):
                p.data[...] = -1.0
            else:
                p.data[...] = shake.normal(p.shape, std=0.3)
        x = rng.spawn("input").normal((1, 1, 16, 16))
        labels = rng.spawn("labels").integers(0, 3, (1, 16, 16))

        def objective():
            # The 0.01 scale keeps |loss| ~ 1e-2 so the central-difference
            # quantum ulp(loss)/(2 eps) stays well under the 1e-8 error
            # floor; rule bugs produce relative errors, which scale with
            # the loss and are not masked by this.
            out, _ = model.forward(Tensor(x), train=True)
            return (cross_entropy(out, labels) + model.ponder_loss(0.01)) * 0.01

        named = list(model.named_parameters())
        everything = [p for _, p in named]
        for name, p in named:
            T.zero_grad(everything)  # backward touches every leaf in the graph
            err = T.gradcheck(objective, [p], eps=eps)
            report.append((name, tuple(p.shape), err))
    return report


# ---------------------------------------------------------------------------
# shared command plumbing


def _load_config(args) -> RunConfig:
    cfg = read_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = parse_run_config("\n".join(args.set), base=cfg)
    return cfg.validate()


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.precision == "f32" else np.float64


def _restore(cfg: RunConfig, checkpoint) -> object:
    model = build(cfg.model_config(), cfg.variant, RngState(cfg.seed).spawn("init"))
    load_checkpoint(checkpoint, model)
    return model


def _val_samples(cfg: RunConfig):
    samples = generate(cfg.synth_spec())
    return split_train_val(samples, cfg.val_fraction)[1]


def _fmt(value: float) -> str:
    return f"{value:.8g}"


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(args) -> int:
    cfg = _load_config(args)
    samples = generate(cfg.synth_spec())
    write_dataset(args.out, samples, cfg.data_kind)
    print(f"wrote {len(samples)} {cfg.data_kind} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train_run(cfg, args.out, quiet=args.quiet)
    write_run_config(os.path.join(args.out, "config.txt"), cfg)
    print(
        f"best dice {result.best_dice:.4f} at epoch {result.best_epoch}; "
        f"artifacts in {result.out_dir}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.monotonic()
    report = run_model_gradcheck(eps=args.eps)
    worst = 0.0
    for name, shape, err in report:
        print(f"{name:40s} {str(shape):14s} {err:.3e}")
        worst = max(worst, err)
    print(f"worst {worst:.3e} over {len(report)} parameter groups "
          f"({time.monotonic() - t0:.1f}s)")
    if worst >= args.tol:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")
    return 0


def cmd_extrapolate(args) -> int:
    cfg = _load_config(args)
    t_list = [int(v) for v in args.t_list.split(",") if v.strip()]
    if not t_list or min(t_list) < 1:
        raise ConfigError(f"loop counts must be >= 1, got {args.t_list!r}")
    with T.using_dtype(_dtype(cfg)):
        model = _restore(cfg, args.checkpoint)
        val = _val_samples(cfg)
        injection = getattr(model, "injection", None)
        rho = injection.spectral_radius() if injection is not None else 0.0
        rows = []
        for t_eval in t_list:
            ev = evaluate(model, val, cfg.num_classes, cfg.batch_size, loops=t_eval)
            rows.append((t_eval, ev.mean_dice, ev.mean_ponder, rho))
    lines = ["T,mean_dice,mean_ponder,rho_A"]
    for t_eval, dice, ponder, rho in rows:
        lines.append(f"{t_eval},{_fmt(dice)},{_fmt(ponder)},{_fmt(rho)}")
        print(f"T={t_eval:3d}  dice {dice:.4f}  ponder {ponder:.3f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "extrapolate.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_act_maps(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    with T.using_dtype(_dtype(cfg)):
        model = _restore(cfg, args.checkpoint)
        val = _val_samples(cfg)[: args.count]
        grid = cfg.model_config().grid()
        images, labels, _, _ = stack_batch(val)
        outputs, stats = model.forward(Tensor(images), train=False)
        logits = outputs[2] if isinstance(outputs, tuple) else outputs
        preds = np.argmax(logits.data, axis=1)
    mid = (slice(None),) if grid.ndim == 2 else (labels.shape[1] // 2,)
    for i, sample in enumerate(val):
        stem = os.path.join(args.out, f"sample_{i:03d}")
        write_pgm(stem + "_input.pgm", to_u8(sample.image[mid]))
        write_pgm(stem + "_label.pgm", to_u8(labels[i][mid], 0, cfg.num_classes - 1))
        write_pgm(stem + "_pred.pgm", to_u8(preds[i][mid], 0, cfg.num_classes - 1))
        write_pgm(stem + "_tn.pgm", iteration_image(stats.iters_per_token[i], grid, cfg.loops))
    print(f"wrote {4 * len(val)} PGM files to {args.out}")
    return 0


def cmd_moe_stats(args) -> int:
    cfg = _load_config(args)
    with T.using_dtype(_dtype(cfg)):
        model = _restore(cfg, args.checkpoint)
        layer = getattr(getattr(model, "core", None), "ffn", None)
        if not isinstance(layer, MoELayer):
            raise ConfigError("checkpoint has no mixture-of-experts layer")
        val = _val_samples(cfg)
        grid = cfg.model_config().grid()
        indices_list, labels_list = [], []
        for lo in range(0, len(val), cfg.batch_size):
            chunk = val[lo : lo + cfg.batch_size]
            images, _, _, _ = stack_batch(chunk)
            model.forward(Tensor(images), train=False)
            indices_list.append(layer.last_indices.copy())
            labels_list.append(
                np.stack([token_majority_class(s.label, grid) for s in chunk])
            )
    stats = expert_utilization(indices_list, labels_list, layer.num_experts, cfg.num_classes)
    chi2, dof, p = stats.chi_squared_independence()
    header = "class\t" + "\t".join(f"e{e}" for e in range(layer.num_experts))
    lines = [header]
    for c in range(cfg.num_classes):
        lines.append(str(c) + "\t" + "\t".join(str(v) for v in stats.counts[c]))
    lines.append(f"# chi2={_fmt(chi2)} dof={dof} p={_fmt(p)}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "utilization.tsv"), "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_data_efficiency(args) -> int:
    from dataclasses import replace

    cfg = _load_config(args)
    fractions = [float(v) for v in args.fractions.split(",") if v.strip()]
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise ConfigError(f"fractions must lie in (0, 1], got {args.fractions!r}")
    os.makedirs(args.out, exist_ok=True)
    rows = ["fraction,model,best_dice"]
    for fraction in fractions:
        for variant in (cfg.variant, "standard_vit"):
            run_cfg = replace(cfg, data_fraction=fraction, variant=variant)
            tag = f"frac{int(round(fraction * 100)):03d}_{variant}"
            result = train_run(run_cfg, os.path.join(args.out, tag))
            rows.append(f"{_fmt(fraction)},{variant},{_fmt(result.best_dice)}")
            print(f"fraction {fraction:.2f}  {variant:14s}  best dice {result.best_dice:.4f}")
    with open(os.path.join(args.out, "efficiency.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out_required=False):
        if config:
            p.add_argument("--config", help="run config file (key = value lines)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (repeatable)")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth-gen", help="generate a phantom dataset")
    common(p, out_required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train a model from a config")
    common(p, out_required=True)
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check on a micro model")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("extrapolate", help="evaluate at alternate loop depths")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t-list", default="2,4,8,16", dest="t_list")
    p.set_defaults(func=cmd_extrapolate)

    p = sub.add_parser("act-maps", help="export halting maps as PGM images")
    common(p, out_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=4, help="samples to export")
    p.set_defaults(func=cmd_act_maps)

    p = sub.add_parser("moe-stats", help="class-by-expert routing table")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_moe_stats)

    p = sub.add_parser("data-efficiency", help="train at several data fractions")
    common(p, out_required=True)
    p.add_argument("--fractions", default="0.1,0.25,0.5,0.75,1.0")
    p.set_defaults(func=cmd_data_efficiency)

    return parser


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
