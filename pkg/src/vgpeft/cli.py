"""``vgpeft`` command line: synth, train, eval, sweep and merge.

Exit codes: 0 on success, 1 when training diverges, 2 on invalid
configuration, unreadable inputs or impossible requests.

A run config is a YAML tree with four sections::

    model:  ModelConfig fields (d_model, n_heads, ..., seed)
    peft:   method (lora|adapter|bitfit|fft), placement, rank, alpha, bottleneck
    train:  TrainConfig fields (steps, batch_size, lr, ...)
    data:   train, eval and base paths

Command-line flags override values from the file. ``train`` writes the
effective config to ``<out-dir>/config.yaml``; passing that file back with
``--config`` reproduces the run.
"""

import argparse
import copy
import json
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .checkpoint import (
    apply_delta,
    delta_spec,
    load_checkpoint,
    save_checkpoint,
    save_delta,
)
from .data import (
    SyntheticSpec,
    generate_synthetic,
    join_predictions,
    load_annotations,
    load_predictions,
    write_annotations,
    write_predictions,
)
from .errors import ConfigError, DivergedError, InputError, StateError, VGError
from .metrics import report
from .model import ModelConfig, ModuleTag, build_model
from .peft import Method, PeftSpec, inject, merge_lora, placement_sweep, render_sweep
from .train import TrainConfig, predict_records, train

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2

METHODS = ("lora", "adapter", "bitfit", "fft")
TABLE_PLACEMENTS = ("image", "decoder", "image,decoder", "text,image,decoder")

RUN_FILES = {
    "config": "config.yaml",
    "log": "train_log.json",
    "summary": "train_summary.txt",
    "params_json": "params.json",
    "params_txt": "params.txt",
    "base": "base.ckpt",
    "final": "final.ckpt",
    "delta": "delta.ckpt",
    "report_json": "eval_report.json",
    "report_txt": "eval_report.txt",
}


def parse_placement(text):
    """``"text,image,decoder"`` -> list of tag values in canonical order."""
    names = [t for t in (s.strip() for s in str(text).split(",")) if t]
    if not names:
        raise ConfigError(f"empty placement {text!r}")
    tags = set()
    for name in names:
        try:
            tags.add(ModuleTag.parse(name))
        except ValueError:
            choices = ", ".join(t.value for t in ModuleTag)
            raise ConfigError(f"invalid placement name {name!r}; choose from {choices}") from None
    return [t.value for t in ModuleTag if t in tags]


# ---------------------------------------------------------------------------
# run config


def default_run_config():
    return {
        "model": ModelConfig().to_dict(),
        "peft": {"method": "lora", "placement": ["text", "image", "decoder"],
                 "rank": 16, "alpha": 1.0, "bottleneck": None},
        "train": TrainConfig().to_dict(),
        "data": {"train": None, "eval": None, "base": None},
    }


def load_run_config(path):
    """Defaults overlaid with the YAML file at ``path`` (if given)."""
    cfg = default_run_config()
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    if loaded is None:
        return cfg
    if not isinstance(loaded, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    unknown = set(loaded) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {sorted(cfg)}")
    for section, values in loaded.items():
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        extra = set(values) - set(cfg[section])
        if extra:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(extra)}")
        cfg[section].update(values)
    return cfg


# flag dest -> (section, key)
_OVERRIDES = {
    "data": ("data", "train"),
    "eval_data": ("data", "eval"),
    "base": ("data", "base"),
    "method": ("peft", "method"),
    "place": ("peft", "placement"),
    "rank": ("peft", "rank"),
    "alpha": ("peft", "alpha"),
    "bottleneck": ("peft", "bottleneck"),
    "model_seed": ("model", "seed"),
}
_OVERRIDES.update({f.name: ("train", f.name) for f in fields(TrainConfig)})


def apply_overrides(cfg, args):
    cfg = copy.deepcopy(cfg)
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def resolve(cfg):
    """Validate a run config; returns (ModelConfig, PeftSpec or None, TrainConfig)."""
    try:
        model_cfg = ModelConfig.from_dict(cfg["model"])
        train_cfg = TrainConfig.from_dict(cfg["train"])
    except TypeError as e:
        raise ConfigError(str(e)) from None
    p = cfg["peft"]
    if p["method"] not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {p['method']!r}")
    placement = p["placement"]
    if isinstance(placement, str):
        placement = parse_placement(placement)
    elif isinstance(placement, (list, tuple)):
        placement = parse_placement(",".join(str(t) for t in placement))
    else:
        raise ConfigError(f"placement must be a list or comma-separated string, got {placement!r}")
    p["placement"] = placement
    if p["method"] == "fft":
        return model_cfg, None, train_cfg
    spec = PeftSpec(Method(p["method"]), frozenset(placement), rank=p["rank"],
                    alpha=p["alpha"], bottleneck=p["bottleneck"])
    return model_cfg, spec, train_cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    lo, hi = args.distractors
    spec = SyntheticSpec(n_samples=args.n, seed=args.seed, grid=args.grid,
                         distractors=(lo, hi), patch_dim=args.patch_dim,
                         cell_px=args.cell_px, noise=args.noise)
    records = generate_synthetic(spec)
    write_annotations(records, args.out)
    print(f"wrote {len(records)} samples (seed {args.seed}) to {args.out}")
    return EXIT_OK


def _load_records(path, what):
    if path is None:
        raise ConfigError(f"no {what} file given")
    try:
        return load_annotations(path)
    except OSError as e:
        raise InputError(f"cannot read {what} file {path}: {e.strerror}") from None


def cmd_train(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    if cfg["data"]["base"] is not None:
        base = _load_plain(cfg["data"]["base"])
        cfg["model"] = base.config.to_dict()
    model_cfg, spec, train_cfg = resolve(cfg)
    train_data = _load_records(cfg["data"]["train"], "training data")
    eval_data = _load_records(cfg["data"]["eval"], "eval data") if cfg["data"]["eval"] else None

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_FILES["config"]).write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")

    model = base if cfg["data"]["base"] is not None else build_model(model_cfg)
    save_checkpoint(model, out / RUN_FILES["base"])
    if spec is not None:
        inject(model, spec)

    every = args.log_every
    progress = (lambda s, v: print(f"step {s:>6}  loss {v:.6f}", flush=True)) if every else None
    if progress is not None:
        progress = _every(every, progress)
    log = train(model, train_data, train_cfg, eval_data=eval_data,
                full_finetune=spec is None, progress=progress)

    (out / RUN_FILES["log"]).write_text(log.to_json(), encoding="utf-8")
    (out / RUN_FILES["summary"]).write_text(log.summary(), encoding="utf-8")
    rep = log.param_report
    (out / RUN_FILES["params_json"]).write_text(json.dumps(rep.to_dict(), indent=2) + "\n",
                                                encoding="utf-8")
    (out / RUN_FILES["params_txt"]).write_text(rep.render(), encoding="utf-8")
    save_checkpoint(model, out / RUN_FILES["final"])
    if spec is not None:
        save_delta(model, out / RUN_FILES["delta"])
    if log.evals:
        final = log.evals[-1][1]
        (out / RUN_FILES["report_json"]).write_text(final.to_json(), encoding="utf-8")
        (out / RUN_FILES["report_txt"]).write_text(final.render(_run_name(cfg)), encoding="utf-8")
    print(log.summary(), end="")
    print(f"run directory: {out}")
    return EXIT_OK


def _every(n, fn):
    def call(step, value):
        if step % n == 0:
            fn(step, value)
    return call


def _run_name(cfg):
    p = cfg["peft"]
    return "FFT" if p["method"] == "fft" else f"{p['method']} [{','.join(p['placement'])}]"


def _load_plain(path):
    try:
        model = load_checkpoint(path)
    except OSError as e:
        raise InputError(f"cannot read checkpoint {path}: {e.strerror}") from None
    if model.peft is not None:
        raise StateError(f"{path} holds an adapted model; a plain base checkpoint is needed")
    return model


def _model_for_eval(args):
    if args.delta is not None:
        return apply_delta(_load_plain(args.checkpoint), args.delta)
    return load_checkpoint(args.checkpoint)


def cmd_eval(args):
    annotations = _load_records(args.data, "annotation")
    if not annotations:
        raise InputError(f"{args.data} holds no records")
    if args.oracle:
        predictions = [(a.pair_id, a.bbox) for a in annotations]
    elif args.predictions is not None:
        try:
            predictions = load_predictions(args.predictions)
        except OSError as e:
            raise InputError(f"cannot read predictions {args.predictions}: {e.strerror}") from None
    elif args.checkpoint is not None:
        predictions = predict_records(_model_for_eval(args), annotations)
    else:
        raise ConfigError("eval needs --checkpoint, --predictions or --oracle")

    rep = report(join_predictions(annotations, predictions))
    table = rep.render(args.name)
    if args.pred_out is not None:
        write_predictions(predictions, args.pred_out)
    if args.report_out is not None:
        base = Path(args.report_out)
        base.with_suffix(".json").write_text(rep.to_json(), encoding="utf-8")
        base.with_suffix(".txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_run_config(args.config)
    model_cfg = ModelConfig.from_dict(cfg["model"])
    placements = [parse_placement(p) for p in args.placements]
    method = Method(args.method)
    spec = PeftSpec(method, frozenset(placements[0]), rank=args.rank)
    reports = placement_sweep(build_model(model_cfg), spec, placements)
    table = render_sweep(reports)
    if args.out is not None:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_merge(args):
    if args.delta is not None:
        if delta_spec(args.delta).method is not Method.LORA:
            raise StateError(f"{args.delta} is not a LoRA delta; there is nothing to merge")
        model = apply_delta(_load_plain(args.checkpoint), args.delta)
    else:
        model = load_checkpoint(args.checkpoint)
        if model.peft is None or model.peft["spec"].method is not Method.LORA:
            raise StateError(f"{args.checkpoint} is not LoRA-adapted; there is nothing to merge")
    merge_lora(model)
    save_checkpoint(model, args.out)
    print(f"merged LoRA updates into {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the configuration error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="vgpeft", description="PEFT experiments on a numpy grounding model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic annotation file")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=8, help="patch grid side G")
    p.add_argument("--patch-dim", type=int, default=16)
    p.add_argument("--cell-px", type=int, default=16, help="pixel size of one grid cell")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--distractors", type=int, nargs=2, default=(2, 4), metavar=("LO", "HI"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fine-tune and write a run directory")
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--data", help="training annotation file")
    p.add_argument("--eval-data", help="evaluated after the last step")
    p.add_argument("--base", help="plain checkpoint to start from instead of a fresh model")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--place", type=parse_placement, help="e.g. text,image,decoder")
    p.add_argument("--rank", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--lambda-reg", type=float)
    p.add_argument("--lambda-iou", type=float)
    p.add_argument("--seed", type=int, help="shuffling seed")
    p.add_argument("--model-seed", type=int, help="initialisation seed of a fresh model")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--log-every", type=int, default=0, help="print the loss every N steps")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions and write reports")
    p.add_argument("--checkpoint", help="full checkpoint, or the base when --delta is given")
    p.add_argument("--delta", help="delta checkpoint applied on top of --checkpoint")
    p.add_argument("--predictions", help="score an existing prediction file")
    p.add_argument("--oracle", action="store_true", help="use the annotations as predictions")
    p.add_argument("--data", required=True, help="annotation file")
    p.add_argument("--pred-out", help="prediction file to write")
    p.add_argument("--report-out", help="report path; .json and .txt versions are written")
    p.add_argument("--name", default="Model", help="row label in the text report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="efficiency of one method across placements")
    p.add_argument("--config", help="YAML run config (its model section is used)")
    p.add_argument("--placements", nargs="+", default=list(TABLE_PLACEMENTS),
                   help="comma-separated module sets, e.g. image image,decoder")
    p.add_argument("--method", choices=METHODS[:3], default="lora")
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("merge", help="fold LoRA updates into a plain checkpoint")
    p.add_argument("--checkpoint", required=True, help="adapted checkpoint, or the base with --delta")
    p.add_argument("--delta")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (VGError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
