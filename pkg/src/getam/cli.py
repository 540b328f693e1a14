"""Command-line surface: dataset generation, training, attribution, label
completion, evaluation, visualization, and gradient checking.

Every subcommand is deterministic under a fixed ``--seed``, prints its
resolved configuration before running, and exits 0 on success, 1 on
validation errors (bad flags, missing inputs), 2 on internal errors.
Defaults can come from a ``--config`` file of ``key = value`` lines (flag
names with dashes or underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import shutil
import sys
import traceback
from pathlib import Path

import numpy as np

from . import attribution, gtt, viz
from .data import generate_dataset, load_dataset, miou, save_dataset
from .labels import (
    MiningConfig,
    complete_labels,
    high_activation_mining,
    read_label_png,
    saliency_constrained_masking,
    write_label_png,
)
from .labels import ActivationStack, pamr_refine, upsample_map
from .training import LossConfig, run_training
from .vit import ModelConfig, VisionTransformer


class UsageError(Exception):
    """Validation problem: wrong flags or missing inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # reject unknown flags with exit code 1
        raise UsageError(message)


def _require_dir(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing required --{what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"--{what} path does not exist: {p}")
    return p


def _print_config(args: argparse.Namespace) -> None:
    items = {k: v for k, v in sorted(vars(args).items())
             if k not in ("func", "config")}
    print("resolved config: " + " ".join(f"{k}={v}" for k, v in items.items()))


@contextlib.contextmanager
def _cleanup_on_failure(out_dir: Path):
    """Remove files created under ``out_dir`` if the command fails midway."""
    existed = out_dir.exists()
    before = {p for p in out_dir.rglob("*")} if existed else set()
    try:
        yield
    except BaseException:
        if out_dir.exists():
            if not existed:
                shutil.rmtree(out_dir, ignore_errors=True)
            else:
                for p in sorted(out_dir.rglob("*"), reverse=True):
                    if p not in before:
                        if p.is_dir():
                            with contextlib.suppress(OSError):
                                p.rmdir()
                        else:
                            p.unlink(missing_ok=True)
        raise


def _load_config_defaults(argv: list[str]) -> dict:
    if "--config" not in argv:
        return {}
    path = Path(argv[argv.index("--config") + 1])
    if not path.exists():
        raise UsageError(f"config file does not exist: {path}")
    entries = gtt.read_manifest(path)
    return {k.replace("-", "_"): v for k, v in entries.items()}


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if not args.out:
        raise UsageError("missing required --out")
    samples = generate_dataset(args.n_images, args.classes, seed=args.seed,
                               nonsalient_fraction=args.nonsalient_fraction,
                               image_size=args.image_size)
    with _cleanup_on_failure(Path(args.out)):
        save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _model_from_args(args, image_size: int) -> VisionTransformer:
    cfg = ModelConfig(image_size=image_size, patch_size=args.patch_size,
                      d=args.embed_dim, L=args.depth, heads=args.heads,
                      C=args.classes)
    return VisionTransformer(cfg, seed=args.seed)


def cmd_train(args) -> int:
    dataset_dir = _require_dir(args.dataset, "dataset")
    samples = load_dataset(dataset_dir)
    if not samples:
        raise UsageError(f"dataset at {dataset_dir} is empty")
    image_size = samples[0].image.shape[1]
    model = _model_from_args(args, image_size)
    loss_cfg = LossConfig(sal_weight=args.sal_weight,
                          phase1_epochs=args.phase1_epochs,
                          total_epochs=args.epochs, lr=args.lr,
                          optimizer=args.optimizer, seed=args.seed)
    mining = MiningConfig(alpha=args.alpha, gamma=args.gamma)
    out = Path(args.out or ".")
    ckpt = out / "checkpoint"
    try:
        run_training(samples, model, loss_cfg, mining=mining,
                     fusion=args.fusion, pamr_iters=args.pamr_iters,
                     use_pamr=not args.no_pamr,
                     metrics_path=out / "metrics.csv", checkpoint_dir=ckpt)
    except BaseException:
        if ckpt.exists():
            shutil.rmtree(ckpt, ignore_errors=True)
        raise
    print(f"checkpoint at {ckpt}, metrics at {out / 'metrics.csv'}")
    return 0


def _load_model(args) -> VisionTransformer:
    ckpt = _require_dir(args.checkpoint, "checkpoint")
    return VisionTransformer.load_checkpoint(ckpt)


def _check_labels(samples, model) -> None:
    for s in samples:
        bad = [c for c in s.labels if not 1 <= c <= model.cfg.C]
        if bad:
            raise UsageError(f"{s.image_id}: labels {bad} outside the "
                             f"checkpoint's 1..{model.cfg.C} classes")


def cmd_attribute(args) -> int:
    model = _load_model(args)
    samples = load_dataset(_require_dir(args.dataset, "dataset"))
    _check_labels(samples, model)
    out = Path(args.out or ".")
    written = 0
    with _cleanup_on_failure(out):
        out.mkdir(parents=True, exist_ok=True)
        for sample in samples[:args.limit] if args.limit else samples:
            if not sample.labels:
                continue
            maps = attribution.attribute_image(model, sample.image,
                                               sorted(sample.labels),
                                               method=args.method,
                                               fusion=args.fusion)
            for cls, cam in maps.items():
                stem = f"{sample.image_id}_{cls}_{args.method}"
                gtt.write_tensor(out / f"{stem}.gtt", cam.map)
                viz.save_gray_png(out / f"{stem}.png", cam.map)
                written += 1
    print(f"wrote {written} maps to {out}")
    return 0


def _dump_mining_stages(model, sample, maps, mining, args, out: Path) -> None:
    h = sample.saliency.shape[0]
    m_fg = np.zeros((model.cfg.C, h, h))
    for cls, cam in maps.items():
        arr = cam.map if cam.map.shape == (h, h) else upsample_map(cam.map, h)
        m_fg[cls - 1] = arr
    if not args.no_pamr and args.pamr_iters > 0:
        m_fg = pamr_refine(m_fg, sample.image, args.pamr_iters)
    stack = ActivationStack.build(m_fg, mining.gamma)
    pre = saliency_constrained_masking(stack, sample.saliency)
    write_label_png(out / f"{sample.image_id}_premining.png", pre)
    post = high_activation_mining(pre, stack.M_fg, sample.saliency, mining)
    write_label_png(out / f"{sample.image_id}_postmining.png", post)


def cmd_pseudo_label(args) -> int:
    model = _load_model(args)
    samples = load_dataset(_require_dir(args.dataset, "dataset"))
    _check_labels(samples, model)
    mining = MiningConfig(alpha=args.alpha, gamma=args.gamma)
    out = Path(args.out or ".")
    with _cleanup_on_failure(out):
        out.mkdir(parents=True, exist_ok=True)
        for sample in samples[:args.limit] if args.limit else samples:
            maps = attribution.attribute_image(model, sample.image,
                                               sorted(sample.labels),
                                               method="getam",
                                               fusion=args.fusion)
            if args.dump_intermediate:
                _dump_mining_stages(model, sample, maps, mining, args, out)
            pseudo = complete_labels(maps, sample.saliency, sample.image,
                                     mining, n_classes=model.cfg.C,
                                     pamr_iters=args.pamr_iters,
                                     use_pamr=not args.no_pamr)
            write_label_png(out / f"{sample.image_id}.png", pseudo)
    print(f"wrote {len(samples)} pseudo labels to {out}")
    return 0


def cmd_eval(args) -> int:
    samples = load_dataset(_require_dir(args.dataset, "dataset"))
    pred_dir = _require_dir(args.pred, "pred")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    means = []
    n_classes = max((max(s.labels, default=0) for s in samples), default=0) + 1
    for sample in samples:
        path = pred_dir / f"{sample.image_id}.png"
        if not path.exists():
            raise UsageError(f"missing prediction: {path}")
        pred = read_label_png(path)
        report = miou(pred, sample.gt_mask, n_classes,
                      count_unknown_as_error=args.count_unknown_as_error)
        rows.append([sample.image_id, repr(report.mean),
                     str(int(report.defined))])
        means.append(report.mean)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "miou", "defined"])
    writer.writerows(rows)
    writer.writerow(["mean", repr(float(np.mean(means))), ""])
    gtt.atomic_write_bytes(out / "miou.csv", buf.getvalue().encode())
    print(f"mean mIoU {float(np.mean(means)):.4f} over {len(rows)} images "
          f"-> {out / 'miou.csv'}")
    return 0


def cmd_viz(args) -> int:
    samples = {s.image_id: s for s in load_dataset(_require_dir(args.dataset,
                                                                "dataset"))}
    maps_dir = _require_dir(args.maps, "maps")
    out = Path(args.out or ".")
    pooled = []
    count = 0
    with _cleanup_on_failure(out):
        out.mkdir(parents=True, exist_ok=True)
        for path in sorted(maps_dir.glob("*.gtt")):
            arr = gtt.read_tensor(path)
            image_id = path.stem.split("_")[0]
            if image_id not in samples:
                continue
            sample = samples[image_id]
            map01 = arr if arr.shape == sample.saliency.shape \
                else upsample_map(arr, sample.saliency.shape[0])
            viz.save_overlay_png(out / f"{path.stem}_overlay.png",
                                 sample.image, map01)
            pooled.append(map01.ravel())
            count += 1
        if not pooled:
            raise UsageError(f"no usable .gtt maps under {maps_dir}")
        hist, _ = np.histogram(np.concatenate(pooled), bins=20,
                               range=(0.0, 1.0))
        viz.histogram_png(out / "distribution.png", hist)
    print(f"wrote {count} overlays and distribution.png to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    results = run_gradcheck(seed=args.seed)
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, err, tol in results:
        ok = err < tol
        failures += not ok
        print(f"{name:<{width}}  err={err:.3e}  tol={tol:.0e}  "
              f"{'pass' if ok else 'FAIL'}")
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


# -- wiring ----------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="getam", description=__doc__)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value defaults file")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--dataset", help="dataset directory")
    shared.add_argument("--checkpoint", help="checkpoint directory")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[shared],
                       help="generate a synthetic shapes dataset")
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--nonsalient-fraction", type=float, default=0.25)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[shared],
                       help="two-phase training run")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--phase1-epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--sal-weight", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--no-pamr", action="store_true")
    p.add_argument("--pamr-iters", type=int, default=10)
    p.add_argument("--fusion", choices=["sum", "ewmul", "matmul"], default="sum")
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", parents=[shared],
                       help="write per-class attention maps")
    p.add_argument("--method", default="getam",
                   choices=["getam", "gradcam", "cam-add", "cam-ignore"])
    p.add_argument("--fusion", choices=["sum", "ewmul", "matmul"], default="sum")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("pseudo-label", parents=[shared],
                       help="complete attention maps into pseudo labels")
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--no-pamr", action="store_true")
    p.add_argument("--pamr-iters", type=int, default=10)
    p.add_argument("--fusion", choices=["sum", "ewmul", "matmul"], default="sum")
    p.add_argument("--dump-intermediate", action="store_true")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("eval", parents=[shared],
                       help="score pseudo labels against ground truth")
    p.add_argument("--pred", help="directory of predicted label PNGs")
    p.add_argument("--count-unknown-as-error", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", parents=[shared],
                       help="overlays and value-distribution histogram")
    p.add_argument("--maps", help="directory of .gtt maps")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="finite-difference checks on the toy model")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        defaults = _load_config_defaults(argv)
        args, _ = parser.parse_known_args(argv)
        if defaults:
            sub_actions = [a for a in parser._subparsers._group_actions][0]
            subparser = sub_actions.choices[args.command]
            known = {a.dest for a in subparser._actions}
            unknown = set(defaults) - known
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            typed = {}
            for action in subparser._actions:
                if action.dest in defaults:
                    raw = defaults[action.dest]
                    if action.const is not None:  # store_true flags
                        typed[action.dest] = raw.lower() in ("1", "true", "yes")
                    elif action.type is not None:
                        typed[action.dest] = action.type(raw)
                    else:
                        typed[action.dest] = raw
            subparser.set_defaults(**typed)
        args = parser.parse_args(argv)
        _print_config(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 0
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
