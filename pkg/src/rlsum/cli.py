"""Command-line entry point: ``rlsum <command> [flags]``.

Every command accepts ``--config file.json`` (a flat JSON object whose keys
mirror the long flag names with dashes as underscores). Explicit flags win
over the file, the file wins over built-in defaults, and the merged
configuration is written as ``config.json`` into each output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import dataset as ds
from . import summarize as sm
from .checkpoint import PARAMS_FILE, read_meta, save_checkpoint
from .env import EnvConfig
from .nn import DimensionError, load_parameters
from .qnet import load_qnet
from .rewards import RewardConfig
from .trainer import DQSNTrainer, TrainerConfig

log = logging.getLogger("rlsum")

CONFIG_FILE = "config.json"


class UsageError(Exception):
    """Bad flags, bad config or invalid input data (exit code 2)."""


# name, type, default, help; one table per command so the config file
# can be checked against exactly the keys a command understands
_COMMON = [("seed", int, 0, "master seed")]

_GEN = [
    ("classes", int, 5, "number of categories"),
    ("per_class", int, 20, "videos per category"),
    ("frames", int, 60, "frames per video"),
    ("dim", int, 16, "feature dimension"),
    ("signal_fraction", float, 0.4, "fraction of shots carrying the category prototype"),
    ("noise_level", float, 0.2, "frame noise scale (expected noise norm)"),
    ("shot_length", int, 12, "frames per shot"),
    ("distractor_overlap", float, 0.7, "cosine between distractor pool entries and prototypes"),
    ("out", str, None, "output directory"),
]

_SPLIT = [
    ("manifest", str, None, "dataset manifest (JSON)"),
    ("folds", int, 0, "cross-validation folds; 0 trains on every video"),
    ("fold", int, 0, "fold whose test split is held out"),
]

_CLF = _SPLIT + [
    ("omega", float, 0.1, "label smoothing weight"),
    ("lr", float, 1e-3, "Adam learning rate"),
    ("epochs", int, 30, "passes over the training split"),
    ("embed_size", int, 256, "embedding width"),
    ("hidden_size", int, 256, "GRU hidden width per direction"),
    ("clip_norm", float, 5.0, "gradient norm clip"),
    ("out", str, None, "checkpoint directory"),
]

_DQSN = _SPLIT + [
    ("classifier", str, None, "frozen classifier checkpoint directory"),
    ("rewards", str, "g,l,u", "enabled rewards: g global, l local, u diversity-representativeness"),
    ("episodes", int, 300, "training episodes"),
    ("minibatch", int, 200, "replay minibatch size"),
    ("capacity", int, 6000, "replay memory capacity"),
    ("gamma", float, 0.99, "discount"),
    ("sync_period", int, 500, "updates between target network syncs"),
    ("lr", float, 1e-4, "Adam learning rate"),
    ("clip_norm", float, 5.0, "gradient norm clip"),
    ("update_every", int, 1, "decision steps per gradient update"),
    ("eps_floor", float, 0.1, "final exploration rate"),
    ("eps_floor_fraction", float, 0.6, "share of planned decisions after which epsilon sits at its floor"),
    ("min_keep_fraction", float, 0.15, "keep floor as a fraction of the video length"),
    ("embed_size", int, 256, "embedding width"),
    ("hidden_size", int, 256, "GRU hidden width per direction"),
    ("head_size", int, 256, "value/advantage hidden width"),
    ("checkpoint_every", int, 0, "also write a checkpoint every N episodes (0: only at the end)"),
    ("out", str, None, "checkpoint and log directory"),
]

_SUM = [
    ("manifest", str, None, "dataset manifest (JSON)"),
    ("qnet", str, None, "Q-network checkpoint directory"),
    ("budget", float, sm.DEFAULT_BUDGET, "summary length as a fraction of the video"),
    ("greedy_selection", bool, False, "pick shots by score instead of the exact knapsack"),
    ("min_keep_fraction", float, 0.15, "keep floor used during scoring"),
    ("parallel", int, 1, "worker processes"),
    ("out", str, None, "directory for per-video summary files"),
]

_EVAL = [
    ("manifest", str, None, "dataset manifest (JSON)"),
    ("qnet", list, None, "Q-network checkpoint, once per fold in fold order"),
    ("folds", int, 5, "cross-validation folds"),
    ("no_cv", bool, False, "score every video with a single checkpoint"),
    ("summaries", str, None, "score existing summary files instead of running a model"),
    ("oracle", bool, False, "score the first human summary of each video (upper bound)"),
    ("budget", float, sm.DEFAULT_BUDGET, "summary length as a fraction of the video"),
    ("greedy_selection", bool, False, "pick shots by score instead of the exact knapsack"),
    ("min_keep_fraction", float, 0.15, "keep floor used during scoring"),
    ("parallel", int, 1, "worker processes"),
    ("out", str, None, "report directory"),
]

COMMANDS = {
    "gen-synthetic": ("write a synthetic category-structured dataset", _GEN),
    "train-classifier": ("train and freeze the category classifier", _CLF),
    "train-dqsn": ("train the summarisation agent", _DQSN),
    "summarize": ("write summaries for every video in a manifest", _SUM),
    "evaluate": ("F-score summaries against human summaries", _EVAL),
    "inspect": ("print metadata of a checkpoint, manifest or feature file", []),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlsum", description="Weakly supervised video summarisation by deep Q-learning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (help_text, table) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if name == "inspect":
            p.add_argument("path", help="checkpoint directory, manifest or .rlsf file")
            continue
        p.add_argument("--config", help="flat JSON config file")
        for key, kind, default, text in _COMMON + table:
            flag = "--" + key.replace("_", "-")
            shown = "" if default is None else f" (default {default})"
            if kind is bool:
                p.add_argument(flag, action="store_const", const=True, default=None, help=text)
            elif kind is list:
                p.add_argument(flag, action="append", default=None, help=text)
            else:
                p.add_argument(flag, type=kind, default=None, help=text + shown)
    return parser


def _coerce(key, kind, value):
    if value is None:
        return None
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise UsageError(f"config key {key!r} must be a list of strings")
        return list(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be true or false")
        return value
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise UsageError(f"config key {key!r} must be of type {kind.__name__}")
    return value


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    table = _COMMON + COMMANDS[args.command][1]
    known = {key: kind for key, kind, _, _ in table}
    config = {key: default for key, _, default, _ in table}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})")
        if not isinstance(doc, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        for key, value in doc.items():
            config[key] = _coerce(key, known[key], value)
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    return config


def _require(config: dict, *keys):
    missing = [k for k in keys if config.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_config(config: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / CONFIG_FILE).write_text(json.dumps(config, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_dataset(path, labels: bool = True) -> ds.DatasetManifest:
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        manifest, report = ds.load_manifest(path)
    except ds.ValidationError as exc:
        raise UsageError(f"{path}: invalid manifest\n{exc.report.describe()}")
    for issue in report.warnings:
        log.warning("%s", issue)
    return manifest if labels else manifest.without_labels()


def _split(manifest: ds.DatasetManifest, config: dict):
    """``(train videos, held-out videos)`` for the configured fold."""
    k = config["folds"]
    if k == 0:
        return list(manifest.videos), []
    if k < 2:
        raise UsageError("--folds must be 0 or at least 2")
    if not 0 <= config["fold"] < k:
        raise UsageError(f"--fold must lie in [0, {k})")
    try:
        fold = ds.make_folds(manifest, k, config["seed"])[config["fold"]]
    except ValueError as exc:
        raise UsageError(str(exc))
    return manifest.subset(fold.train).videos, manifest.subset(fold.test).videos


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synthetic(config: dict) -> int:
    _require(config, "out")
    try:
        manifest = ds.generate_synthetic(
            config["classes"], config["per_class"], config["frames"], config["dim"],
            config["signal_fraction"], config["noise_level"], config["seed"],
            shot_length=config["shot_length"], distractor_overlap=config["distractor_overlap"])
    except ValueError as exc:
        raise UsageError(str(exc))
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    ds.save_manifest(manifest, path)
    _write_config(config, out)
    print(path)
    return 0


def cmd_train_classifier(config: dict) -> int:
    _require(config, "manifest", "out")
    manifest = _load_dataset(config["manifest"])
    train, held_out = _split(manifest, config)
    try:
        cfg = clf.ClassifierConfig(omega=config["omega"], lr=config["lr"], epochs=config["epochs"],
                                   embed_size=config["embed_size"], hidden_size=config["hidden_size"],
                                   clip_norm=config["clip_norm"], seed=config["seed"])
    except ValueError as exc:
        raise UsageError(str(exc))
    model, history = clf.train_classifier(train, manifest.n_classes, cfg, category_names=manifest.categories)
    out = Path(config["out"])
    save_checkpoint(model, out)
    _write_config(config, out)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"train accuracy {clf.accuracy(model, train):.4f}")
    if held_out:
        print(f"held-out accuracy {clf.accuracy(model, held_out):.4f}")
    return 0


def _trainer_config(config: dict) -> TrainerConfig:
    try:
        rewards = RewardConfig.from_flags(config["rewards"])
        cfg = TrainerConfig(
            episodes=config["episodes"], minibatch=config["minibatch"], capacity=config["capacity"],
            gamma=config["gamma"], sync_period=config["sync_period"], lr=config["lr"],
            clip_norm=config["clip_norm"], update_every=config["update_every"], eps_floor=config["eps_floor"],
            eps_floor_fraction=config["eps_floor_fraction"], min_keep_fraction=config["min_keep_fraction"],
            embed_size=config["embed_size"], hidden_size=config["hidden_size"], head_size=config["head_size"],
            seed=config["seed"], rewards=rewards)
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    return cfg


def cmd_train_dqsn(config: dict) -> int:
    _require(config, "manifest", "out")
    cfg = _trainer_config(config)
    model = None
    if cfg.rewards.needs_classifier:
        if not config["classifier"]:
            raise UsageError(f"rewards {cfg.rewards.flags!r} need --classifier")
        model = _load_classifier(config["classifier"])
    manifest = _load_dataset(config["manifest"], labels=cfg.rewards.needs_classifier)
    train, _ = _split(manifest, config)
    if model is not None and model.feature_dim != train[0].dim:
        raise UsageError(f"classifier expects dim {model.feature_dim}, manifest has {train[0].dim}")
    out = Path(config["out"])
    _write_config(config, out)
    every = config["checkpoint_every"]
    log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8")

    def on_episode(record, trainer):
        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        if every and (record["episode"] + 1) % every == 0:
            save_checkpoint(trainer.online, out / "latest", {"episode": record["episode"]})

    try:
        trainer = DQSNTrainer(train, model, cfg)
        qnet = trainer.train(on_episode)
    except ValueError as exc:
        raise UsageError(str(exc))
    finally:
        log_fh.close()
    save_checkpoint(qnet, out, {"rewards": cfg.rewards.flags, "episodes": cfg.episodes})
    print(out)
    return 0


def _load_classifier(path):
    try:
        model = clf.load_classifier(path)
    except FileNotFoundError:
        raise UsageError(f"classifier checkpoint not found: {path}")
    except ValueError as exc:
        raise UsageError(str(exc))
    return model


def _load_qnet(path):
    try:
        return load_qnet(path)
    except FileNotFoundError:
        raise UsageError(f"Q-network checkpoint not found: {path}")
    except ValueError as exc:
        raise UsageError(str(exc))


def _summarize_one(job):
    qnet, video, budget, greedy, keep = job
    return sm.summarize(qnet, video, budget, greedy, EnvConfig(min_keep_fraction=keep))


def _summarize_all(jobs, parallel: int) -> list:
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_summarize_one, jobs))
    return [_summarize_one(job) for job in jobs]


def _check_dims(qnet, videos):
    bad = [v.id for v in videos if v.dim != qnet.feature_dim]
    if bad:
        raise UsageError(f"Q-network expects dim {qnet.feature_dim}; mismatched videos: {', '.join(bad)}")


def _write_summary(summary: sm.Summary, directory: Path) -> None:
    with open(directory / f"{summary.video_id}.json", "w", encoding="utf-8") as fh:
        json.dump(summary.to_json(), fh, sort_keys=True)
        fh.write("\n")


def cmd_summarize(config: dict) -> int:
    _require(config, "manifest", "qnet", "out")
    if not 0 < config["budget"] <= 1:
        _bad_budget()
    qnet = _load_qnet(config["qnet"])
    # summaries never see category labels
    manifest = _load_dataset(config["manifest"], labels=False)
    _check_dims(qnet, manifest.videos)
    jobs = [(qnet, v, config["budget"], config["greedy_selection"], config["min_keep_fraction"])
            for v in manifest.videos]
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    for summary in _summarize_all(jobs, config["parallel"]):
        _write_summary(summary, out)
    _write_config(config, out)
    print(f"{len(jobs)} summaries written to {out}")
    return 0


def _bad_budget():
    raise UsageError("--budget must lie in (0, 1]")


def _read_summaries(directory, videos) -> dict:
    directory = Path(directory)
    machine, missing = {}, []
    for v in videos:
        path = directory / f"{v.id}.json"
        if not path.is_file():
            missing.append(v.id)
            continue
        machine[v.id] = sm.Summary.from_json(json.loads(path.read_text(encoding="utf-8"))).selected_frames
    if missing:
        raise UsageError(f"no summary file for: {', '.join(missing)}")
    return machine


def cmd_evaluate(config: dict) -> int:
    _require(config, "manifest", "out")
    if not 0 < config["budget"] <= 1:
        _bad_budget()
    # labels only decide the (stratified) fold split, matching training
    manifest = _load_dataset(config["manifest"], labels=True)
    videos = manifest.without_labels().videos
    lacking = [v.id for v in videos if not v.human_summaries]
    if lacking:
        raise UsageError(f"videos without human summaries: {', '.join(lacking)}")
    folds = None
    if not config["no_cv"]:
        try:
            folds = ds.make_folds(manifest, config["folds"], config["seed"])
        except ValueError as exc:
            raise UsageError(str(exc))
    out = Path(config["out"])
    if config["oracle"]:
        machine = {v.id: v.human_summaries[0] for v in videos}
    elif config["summaries"]:
        machine = _read_summaries(config["summaries"], videos)
    else:
        paths = config["qnet"] or []
        want = 1 if folds is None else len(folds)
        if len(paths) != want:
            raise UsageError(f"need {want} --qnet checkpoint(s), got {len(paths)}")
        nets = [_load_qnet(p) for p in paths]
        for net in nets:
            _check_dims(net, videos)
        if folds is None:
            model_of = {v.id: nets[0] for v in videos}
        else:
            model_of = {vid: nets[i] for i, f in enumerate(folds) for vid in f.test}
        jobs = [(model_of[v.id], v, config["budget"], config["greedy_selection"], config["min_keep_fraction"])
                for v in videos]
        summaries = _summarize_all(jobs, config["parallel"])
        (out / "summaries").mkdir(parents=True, exist_ok=True)
        for s in summaries:
            _write_summary(s, out / "summaries")
        machine = {s.video_id: s.selected_frames for s in summaries}
    report = sm.evaluate_summaries(videos, machine, folds, config["budget"])
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    table = report.table()
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    _write_config(config, out)
    print(table)
    return 0


def cmd_inspect(path: str) -> int:
    p = Path(path)
    if p.is_dir():
        try:
            meta = read_meta(p)
        except FileNotFoundError:
            raise UsageError(f"{p} is not a checkpoint directory")
        print(json.dumps(meta, indent=1, sort_keys=True))
        params = load_parameters(p / PARAMS_FILE)
        for name in params:
            print(f"{name:<24} {params[name].shape[0]:>6} x {params[name].shape[1]:<6}")
        print(f"total scalars {params.n_scalars()}")
        return 0
    if not p.is_file():
        raise UsageError(f"no such file or directory: {p}")
    if p.suffix == ".rlsf":
        feats = ds.read_features(p)
        print(f"frames {feats.shape[0]}  dim {feats.shape[1]}")
        return 0
    manifest = _load_dataset(p, labels=True)
    dims = sorted({v.dim for v in manifest.videos})
    print(f"categories {manifest.n_classes}  videos {len(manifest.videos)}  dims {dims}")
    counts = np.bincount([v.label for v in manifest.videos if v.label is not None], minlength=manifest.n_classes)
    for name, n in zip(manifest.categories, counts):
        print(f"  {name:<20} {n}")
    return 0


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-classifier": cmd_train_classifier,
    "train-dqsn": cmd_train_dqsn,
    "summarize": cmd_summarize,
    "evaluate": cmd_evaluate,
}


def _setup_logging():
    level = os.environ.get("RLSUM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command == "inspect":
            return cmd_inspect(args.path)
        config = resolve_config(args)
        return HANDLERS[args.command](config)
    except UsageError as exc:
        print(f"rlsum: error: {exc}", file=sys.stderr)
        return 2
    except (ds.ValidationError, DimensionError) as exc:
        print(f"rlsum: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"rlsum: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
