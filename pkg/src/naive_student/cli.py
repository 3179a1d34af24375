"""Command-line interface.

Exit status: 0 success, 1 usage error, 2 data or configuration error,
3 internal invariant violation.

Every command that takes ``--config`` also accepts trailing ``key=value``
overrides; values are parsed as JSON when possible and kept as strings
otherwise. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

from .dataset.manifest import DatasetManifest
from .dataset.splits import propagate_ego_car, sample_fraction
from .dataset.synth import SynthConfig, synth_generate
from .metrics.evaluate import evaluate_directories, evaluate_split
from .model.learner import ConfigError, enlarge, finetune, load_checkpoint, save_checkpoint, train
from .model.targets import default_sigma
from .orchestrator import (ExperimentConfig, InvariantError, generate_pseudo_labels, load_training_pairs,
                           read_history, run_experiment)

logger = logging.getLogger("naive_student")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
METRICS = ("pq", "ap", "miou")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration ------------------------------------------------------------

def parse_overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def build_dataclass(cls, data: dict):
    """Instantiate a frozen config dataclass, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**values)


def bundled_config(name: str):
    """Path-like handle of a config shipped with the package, or None."""
    ref = resources.files("naive_student") / "configs" / f"{name}.json"
    return ref if ref.is_file() else None


def load_config(path: Optional[str], overrides: Sequence[str], extra: Optional[dict] = None) -> dict:
    """Merge a JSON config file, ``key=value`` overrides and flag values.

    ``path`` may also name a bundled config (``desk``, ``desk_synth``).
    """
    data = {}
    if path is not None:
        source = Path(path)
        if not source.exists() and bundled_config(path) is not None:
            source = bundled_config(path)
        try:
            data = json.loads(source.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data.update(parse_overrides(overrides))
    data.update(extra or {})
    return data


def write_snapshot(out_dir: Path, name: str, config) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else config
    (out_dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def experiment_config(args, extra: Optional[dict] = None) -> ExperimentConfig:
    flags = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "no_tta", False):
        flags["use_tta"] = False
    if getattr(args, "no_ego_void", False):
        flags["use_ego_void"] = False
    if getattr(args, "jobs", None) is not None:
        flags["jobs"] = args.jobs
    data = load_config(args.config, args.overrides, flags)
    if "seed" not in data:
        data["seed"] = 0
    return build_dataclass(ExperimentConfig, data)


def require_seed(args) -> None:
    if args.seed is None:
        raise UsageError(f"{args.command}: --seed is required")


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    extra = {"rng_seed": args.seed} if args.seed is not None else {}
    cfg = build_dataclass(SynthConfig, load_config(args.config, args.overrides, extra))
    out = Path(args.out)
    manifest, _ = synth_generate(cfg, out)
    write_snapshot(out, "synth_config.json", cfg)
    print(f"wrote {len(manifest.frames)} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    """Step 1 (teacher), Step 3 (``--labels``) or Step 4 (``--finetune``)."""
    require_seed(args)
    extra = {}
    if args.fraction is not None:
        extra["labeled_fraction"] = args.fraction
    cfg = experiment_config(args, extra)
    manifest = DatasetManifest.load(args.manifest)
    sigma = cfg.sigma if cfg.sigma is not None else default_sigma(manifest.image_size[0])
    split = args.split or (cfg.unlabeled_split if args.labels else cfg.labeled_split)
    if args.labels:
        frames = [f for f in manifest.split(split) if not f.labeled]
        label_dir = Path(args.labels)
        paths = {f.key: str(label_dir / f.sequence_id / f"{f.frame_index:03d}.lmap") for f in frames}
        pairs = load_training_pairs(manifest, frames, sigma, label_paths=paths)
        data_tag = f"{label_dir.name}[n={len(pairs)}]"
    else:
        frames = sample_fraction(manifest, split, "labeled", cfg.labeled_fraction, cfg.stage_seed(0, 10)).frames
        pairs = load_training_pairs(manifest, frames, sigma)
        data_tag = f"{split}[fraction={cfg.labeled_fraction}, n={len(pairs)}]"
    eval_keys = {f.key for f in manifest.split(cfg.eval_split)}
    if eval_keys & {f.key for f in frames}:
        raise InvariantError(f"training split {split!r} overlaps evaluation split {cfg.eval_split!r}")

    init = load_checkpoint(args.init_from) if args.init_from else None
    if args.finetune:
        if init is None:
            raise UsageError("--finetune needs --init-from")
        overrides = {"rng_seed": cfg.stage_seed(1, 4)}
        if cfg.finetune_steps is not None:
            overrides["steps"] = cfg.finetune_steps
        if cfg.finetune_lr is not None:
            overrides["base_lr"] = cfg.finetune_lr
        ckpt = finetune(init, pairs, provenance=f"finetune(data={data_tag})", **overrides)
    else:
        learner_cfg = cfg.teacher_config(manifest.class_table.num_logits)
        if args.labels:
            learner_cfg = learner_cfg.replace(steps=cfg.student_steps, rng_seed=cfg.stage_seed(1, 3))
        if args.enlarge is not None:
            learner_cfg = enlarge(learner_cfg, args.enlarge)
        init_tag = Path(args.init_from).name if init else "scratch"
        ckpt = train(pairs, learner_cfg, init=init,
                     provenance=f"train(init={init_tag}; data={data_tag}; capacity={learner_cfg.capacity})")
    out = Path(args.out)
    write_snapshot(out, "config.json", cfg)
    save_checkpoint(ckpt, out / "model.nsck")
    print(f"wrote {out / 'model.nsck'} ({ckpt.config.parameter_count} parameters, step {ckpt.step})")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    if not args.init_from:
        raise UsageError("pseudo-label needs --init-from CHECKPOINT")
    extra = {"pseudo_fraction": args.fraction} if args.fraction is not None else {}
    cfg = experiment_config(args, extra)
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out)
    write_snapshot(out, "config.json", cfg)
    if cfg.use_ego_void:
        manifest = propagate_ego_car(manifest, mode=cfg.ego_mode,
                                     out_subdir=os.path.relpath(out / "ego", manifest.root))
    split = args.split or cfg.unlabeled_split
    scoped = sample_fraction(manifest, split, "pseudo", cfg.pseudo_fraction, cfg.stage_seed(0, 11))
    frames = [f for f in scoped.frames if not f.labeled]
    checkpoint = load_checkpoint(args.init_from)
    paths = generate_pseudo_labels(manifest, frames, checkpoint, cfg.aug_spec(), cfg.postproc(),
                                   out, cfg.use_ego_void, cfg.jobs)
    print(f"wrote {len(paths)} pseudo-labels to {out}")
    return EXIT_OK


def cmd_iterate(args) -> int:
    require_seed(args)
    extra = {}
    if args.fraction is not None:
        extra["labeled_fraction"] = args.fraction
    if args.enlarge is not None:
        extra["enlarge_factors"] = [args.enlarge]
    cfg = experiment_config(args, extra)
    manifest = DatasetManifest.load(args.manifest)
    state = run_experiment(cfg, manifest, args.out)
    for it, pq, ap, miou in state.history:
        print(f"iteration {it}: pq={pq:.4f} ap={ap:.4f} miou={miou:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    data = load_config(args.config, args.overrides, {"use_tta": args.tta})
    cfg = build_dataclass(ExperimentConfig, {"seed": 0, **data})
    split = args.split or cfg.eval_split
    if args.pred:
        report = evaluate_directories(manifest, split, args.pred, args.gt)
    elif args.init_from:
        report = evaluate_split(manifest, split, load_checkpoint(args.init_from), cfg.postproc(), cfg.aug_spec())
    else:
        raise UsageError("eval needs --pred DIR or --init-from CHECKPOINT")
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        write_snapshot(out, "config.json", cfg)
        (out / "report.txt").write_text(text)
    return EXIT_OK


def cmd_report(args) -> int:
    rows = read_history(args.history)
    if not rows:
        raise ConfigError(f"{args.history}: history has no rows")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for metric in METRICS:
        lines = [f"iteration,{metric}"] + [f"{r['iteration']},{r[metric]:.10f}" for r in rows]
        (out / f"{metric}.csv").write_text("\n".join(lines) + "\n")
    summary = [f"{'iteration':>9} {'split':<10} {'pq':>8} {'ap':>8} {'miou':>8}"]
    for r in rows:
        summary.append(f"{r['iteration']:>9} {r['split']:<10} {r['pq']:8.4f} {r['ap']:8.4f} {r['miou']:8.4f}")
    text = "\n".join(summary) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="naive-student", description="Iterative pseudo-label training for panoptic segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("overrides", nargs="*", metavar="key=value")
        return p

    p = common(sub.add_parser("synth", help="generate the synthetic benchmark"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a teacher, a student (--labels) or fine-tune (--finetune)"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--split")
    p.add_argument("--fraction", type=float, help="labeled fraction")
    p.add_argument("--labels", help="pseudo-label directory (student training)")
    p.add_argument("--init-from", help="initial checkpoint")
    p.add_argument("--finetune", action="store_true")
    p.add_argument("--enlarge", type=float)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("pseudo-label", help="write hard pseudo-labels for unlabeled frames"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", help="teacher checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--split")
    p.add_argument("--fraction", type=float, help="fraction of sequences to label")
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--no-ego-void", action="store_true")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_pseudo_label)

    p = common(sub.add_parser("iterate", help="run the full teacher/student loop"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--fraction", type=float, help="labeled fraction")
    p.add_argument("--enlarge", type=float, help="student enlargement factor for every iteration")
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--no-ego-void", action="store_true")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_iterate)

    p = common(sub.add_parser("eval", help="score a checkpoint or a prediction directory"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--split")
    p.add_argument("--init-from", help="checkpoint to evaluate")
    p.add_argument("--pred", help="directory of LMAP predictions laid out like the labels")
    p.add_argument("--gt", help="ground-truth root (defaults to the manifest root)")
    p.add_argument("--tta", action="store_true", help="evaluate with test-time augmentation")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="turn history.csv into plot data and a summary")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args, extra = build_parser().parse_known_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        # key=value overrides may follow options; argparse only collects the leading run
        unknown = [tok for tok in extra if tok.startswith("-") or "=" not in tok
                   or not hasattr(args, "overrides")]
        if unknown:
            raise UsageError(f"unrecognized arguments: {' '.join(unknown)}")
        if extra:
            args.overrides = list(args.overrides or []) + extra
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - last-resort contract
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
