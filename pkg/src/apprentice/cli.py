"""``apprentice`` command line: train, eval, cache-logits, export, footprint, sparsity-equiv.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``APPRENTICE_DATA_DIR`` overrides every configured data directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import deploy, schemes
from .config import ConfigError, parse_config
from .data import ChannelNormalizer, DataFormatError, load_dataset
from .io_formats import FormatError, emit_metrics, load_checkpoint, save_checkpoint
from .models import FAMILIES, ModelSpec, build_model
from .quant import QuantSpec, apply_policy

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
METRICS_NAME = "metrics.ndjson"
STUDENT_NAME = "student.appr"
TEACHER_NAME = "teacher.appr"

log = logging.getLogger("apprentice")


class UsageError(Exception):
    """Bad flags, config or incompatible inputs; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_csv(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("batch sizes must be positive")
    return values


def normalizer_metadata(normalizer: ChannelNormalizer | None) -> dict | None:
    if normalizer is None:
        return None
    return {"mean": [float(v) for v in normalizer.mean_], "std": [float(v) for v in normalizer.std_],
            "eps": normalizer.eps}


def normalizer_from_metadata(meta: dict) -> ChannelNormalizer | None:
    stored = meta.get("normalizer")
    if not stored:
        return None
    norm = ChannelNormalizer(stored.get("eps", 1e-8))
    norm.mean_ = np.asarray(stored["mean"], dtype=np.float32)
    norm.std_ = np.asarray(stored["std"], dtype=np.float32)
    return norm


def _run_metadata(cfg, result, epochs_done: int) -> dict:
    return {
        "scheme": cfg.scheme,
        "seed": cfg.seed,
        "epoch": epochs_done,
        "quant": str(cfg.student_quant),
        "exempt_first_last": cfg.student_quant.exempt_first_last,
        "distill": {"alpha": cfg.distill.alpha, "beta": cfg.distill.beta,
                    "gamma": cfg.distill.gamma, "tau": cfg.distill.tau},
        "lr_schedule": [list(s) for s in cfg.lr_schedule],
        "dataset": cfg.data.dataset,
        "normalizer": normalizer_metadata(result.normalizer),
    }


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    try:
        cfg = parse_config(path.read_text(), args.set or ()).validate(check_files=True)
    except ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from None
    run_dir = Path(args.run_dir or cfg.run_dir)
    result = schemes.run(cfg)
    meta = _run_metadata(cfg, result, cfg.epochs)
    save_checkpoint(result.student, run_dir / STUDENT_NAME, meta)
    if cfg.scheme == "A":
        t_meta = dict(meta, quant=str(cfg.teacher_quant), exempt_first_last=True, role="teacher")
        save_checkpoint(result.teacher, run_dir / TEACHER_NAME, t_meta)
    with open(run_dir / METRICS_NAME, "w") as out:
        emit_metrics(result.records, out)
    final = [r for r in result.records if r.split == "test"]
    print(f"scheme {cfg.scheme}: {cfg.epochs} epochs, final test top-1 error "
          f"{final[-1].top1_error:.2f}%" if final else f"scheme {cfg.scheme}: no epochs run")
    print(f"wrote {run_dir / STUDENT_NAME}")
    return EXIT_OK


def _load_model(path: str, quant_text: str | None):
    try:
        model, meta = load_checkpoint(path)
    except FormatError as exc:
        raise UsageError(str(exc)) from None
    if quant_text:
        try:
            apply_policy(model, QuantSpec.parse(quant_text, meta.get("exempt_first_last", True)))
        except ValueError as exc:
            raise UsageError(f"--quant-spec {quant_text}: {exc}") from None
    return model, meta


def _eval_split(args, meta):
    dataset = args.dataset or meta.get("dataset", "mnist5k")
    train, test = load_dataset(dataset, args.data)
    return train if args.split == "train" else test


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint, args.quant_spec)
    ds = _eval_split(args, meta)
    if tuple(ds.image_shape) != model.spec.input_shape:
        raise UsageError(f"data samples are {ds.image_shape}, checkpoint expects {model.spec.input_shape}")
    norm = normalizer_from_metadata(meta)
    x = norm.transform(ds.images) if norm is not None else ds.images
    if args.packed:
        try:
            export = deploy.export_quantized(model)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        runner = deploy.load_packed_model(export, model.spec, model.quant_spec)
    else:
        runner = deploy.reference_model(model)
    logits = deploy.predict_logits(runner, x)
    error = 100.0 * float((logits.argmax(axis=1) != ds.labels).mean())
    print(f"top1_error {error!r}")
    return EXIT_OK


def cmd_cache_logits(args) -> int:
    teacher, meta = _load_model(args.checkpoint, None)
    if not teacher.quant_spec.is_full_precision:
        raise UsageError("logit caches come from a full-precision teacher")
    if args.augment:
        raise UsageError("cannot cache logits with augmentation enabled; cached logits are tied to a fixed view")
    ds = _eval_split(args, meta)
    try:
        cache = schemes.cache_teacher_logits(teacher, ds, normalizer_from_metadata(meta), path=args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {len(cache.ids)} records to {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    model, _ = _load_model(args.checkpoint, args.quant_spec)
    try:
        export = deploy.export_quantized(model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    deploy.write_export(args.out, export)
    print(f"wrote {len(export.records)} tensors ({len(export.packed_names)} packed) to {args.out}")
    return EXIT_OK


def _footprint_table(args):
    tables = deploy.named_layer_tables()
    if args.model in tables:
        return tables[args.model]
    if args.model in FAMILIES:
        try:
            spec = ModelSpec(args.model, args.n, args.widths or (), args.num_classes)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return deploy.trace_layer_table(build_model(spec))
    raise UsageError(f"unknown network {args.model!r}; named tables: {', '.join(sorted(tables))}; "
                     f"buildable families: {', '.join(FAMILIES)}")


def cmd_footprint(args) -> int:
    try:
        spec = QuantSpec.parse(args.quant_spec, not args.quantize_all)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    table = _footprint_table(args)
    bits = deploy.policy_weight_bits(len(table), spec)
    report = deploy.footprint(table, bits, args.batch_sizes, spec.act_bits)
    if args.json:
        print(json.dumps({"batch_sizes": report.batch_sizes, "totals": report.totals}, sort_keys=True))
    else:
        print(f"{args.model} at {spec}")
        print(report.render())
    return EXIT_OK


def cmd_sparsity_equiv(args) -> int:
    try:
        raw, adjusted = deploy.sparse_equivalence(args.bits, args.index_bits)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"raw_sparsity {raw!r}")
    print(f"index_adjusted_sparsity {adjusted!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apprentice", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the configured training scheme")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--run-dir", help="output directory (default: run.dir from the config)")
    t.set_defaults(func=cmd_train)

    def data_flags(q):
        q.add_argument("--data", help="data directory (APPRENTICE_DATA_DIR wins if set)")
        q.add_argument("--dataset", help="dataset name (default: the one recorded in the checkpoint)")
        q.add_argument("--split", choices=("train", "test"), default="test")

    e = sub.add_parser("eval", help="top-1 error of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    data_flags(e)
    e.add_argument("--quant-spec", help="override the stored precision, e.g. 8A,2W")
    e.add_argument("--packed", action="store_true", help="route through the bit-packed kernels")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cache-logits", help="store a teacher's logits keyed by sample id")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out", required=True)
    data_flags(c)
    c.set_defaults(split="train")
    c.add_argument("--augment", action="store_true", help="rejected: caches need a fixed view")
    c.set_defaults(func=cmd_cache_logits)

    x = sub.add_parser("export", help="write a bit-packed model")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--quant-spec")
    x.set_defaults(func=cmd_export)

    f = sub.add_parser("footprint", help="inference memory per layer and in total")
    f.add_argument("--model", required=True, help="a named layer table or a model family")
    f.add_argument("--quant-spec", default="32A,32W")
    f.add_argument("--batch-sizes", type=_int_csv, default=(1, 8))
    f.add_argument("--n", type=int, default=3)
    f.add_argument("--widths", type=lambda s: tuple(int(v) for v in s.split(",")))
    f.add_argument("--num-classes", type=int, default=10)
    f.add_argument("--quantize-all", action="store_true", help="do not exempt the first and last layers")
    f.add_argument("--json", action="store_true")
    f.set_defaults(func=cmd_footprint)

    s = sub.add_parser("sparsity-equiv", help="sparsity with the same footprint as a k-bit dense model")
    s.add_argument("--bits", type=int, default=2)
    s.add_argument("--index-bits", type=int, default=deploy.DEFAULT_INDEX_BITS)
    s.set_defaults(func=cmd_sparsity_equiv)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"apprentice: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"apprentice {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataFormatError, FormatError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"apprentice {args.verb}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
