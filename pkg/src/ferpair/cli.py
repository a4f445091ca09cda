"""Command-line entry point: ``ferpair {synth,train,pair-train,eval,report}``.

Exit codes: 0 success, 2 configuration or path problems, 3 bad data,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .datamodel import (
    CLASS_NAMES,
    PROFILES,
    SynthesisConfig,
    all_pairs,
    load_feature_file,
    pair_view,
    profile_config,
    split,
    synthesize_dataset,
    write_feature_file,
    PairKey,
)
from .exceptions import ConfigError, DataError, NumericError
from .heads import (
    DETACHED,
    PAIR_MODES,
    STACKED,
    MultiOutputHead,
    PairwiseHeadDict,
    load_checkpoint,
    pair_eval_general,
    predict_expression,
    predict_pair,
    save_checkpoint,
)
from .losses import AamParams
from .metrics import (
    FORMATS,
    MetricsReport,
    class_metrics,
    confusion,
    pair_accuracy,
    pair_report,
    render_classification,
    render_pair_report,
    render_pair_stats,
    render_report,
    report_from_dict,
    report_to_dict,
)
from .sampling import PairBalanced, SamplerSpec, draw_epoch
from .training import (
    TrainConfig,
    environment_info,
    history_to_json,
    train_general,
    train_pairwise,
    write_manifest,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
EXT = {"tsv": "tsv", "markdown": "md"}

log = logging.getLogger("ferpair")


def _common(p):
    p.add_argument("--config", help="JSON file of option values; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0, help="random seed")


def _out(p, required=True):
    p.add_argument("--out", required=required, help="output directory (created if missing)")


def _train_flags(p, *, lr, epochs):
    p.add_argument("--epochs", type=int, default=epochs, help="training epochs")
    p.add_argument("--lr", type=float, default=lr, help="initial learning rate")
    p.add_argument("--batch-size", type=int, default=256, help="mini-batch size (last partial batch kept)")
    p.add_argument("--weight-decay", type=float, default=5e-4, help="L2 penalty added to the gradient")
    p.add_argument("--rop-patience", type=int, default=5, help="epochs without improvement before the lr drops")
    p.add_argument("--rop-factor", type=float, default=0.25, help="lr multiplier applied on a plateau")
    p.add_argument("--rop-monitor", choices=("train", "val"), default="train", help="loss watched by the scheduler")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="ferpair", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"ferpair {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic feature file", formatter_class=fmt)
    p.add_argument("--profile", choices=sorted(PROFILES), default="affectnet-skew",
                   help="class-count preset (ignored when the config file gives explicit counts and means)")
    p.add_argument("--scale", type=float, default=1.0, help="multiply preset counts, rounding half up")
    p.add_argument("--dim", type=int, default=32, help="feature dimension D")
    p.add_argument("--separation", type=float, default=2.0, help="distance of each class mean from the origin")
    p.add_argument("--stddev", type=float, default=1.0, help="isotropic per-class standard deviation")
    p.add_argument("--landmarks", type=int, default=0, help="landmark points L per record (0 = none)")
    p.add_argument("--geometry-seed", type=int, default=0, help="seed fixing the class means")
    _common(p)
    _out(p)

    p = sub.add_parser("train", help="train the general multi-output head", formatter_class=fmt)
    p.add_argument("--features", required=True, help="training feature file")
    p.add_argument("--val-features", help="validation feature file (default: stratified split of --features)")
    p.add_argument("--train-fraction", type=float, default=0.8, help="train share when splitting")
    _train_flags(p, lr=0.01, epochs=40)
    p.add_argument("--sampler", choices=("natural", "inverse-frequency"), default="natural", help="epoch sampler")
    p.add_argument("--cap-multiplier", type=float, default=2.0,
                   help="inverse-frequency epoch = multiplier x smallest class x classes")
    p.add_argument("--expression-loss", choices=("softmax", "aam"), default="softmax", help="expression head loss")
    p.add_argument("--aam-s", type=float, default=64.0, help="angular-margin hypersphere scale s")
    p.add_argument("--aam-m", type=float, default=0.5, help="additive angular margin m (radians)")
    p.add_argument("--regression", choices=("signed_mse", "pearson"), default="signed_mse",
                   help="loss for valence, arousal and landmarks")
    p.add_argument("--kappa", type=float, default=1.0, help="signed-MSE sign-mismatch penalty")
    p.add_argument("--loss-weights", default="1,1,1,1", help="expression,valence,arousal,landmark weights")
    _common(p)
    _out(p)

    p = sub.add_parser("pair-train", help="train the pairwise head dictionary", formatter_class=fmt)
    p.add_argument("--features", required=True, help="training feature file")
    p.add_argument("--val-features", help="optional validation feature file")
    p.add_argument("--mode", choices=PAIR_MODES, default=DETACHED,
                   help="stacked: heads read the general logits; detached: heads read raw features")
    p.add_argument("--general", help="general head checkpoint (required for stacked mode)")
    p.add_argument("--pairs", default="all", help="comma-separated pairs such as fear-contempt, or 'all'")
    _train_flags(p, lr=1e-4, epochs=30)
    p.add_argument("--jobs", type=int, default=1, help="pairs trained in parallel")
    _common(p)
    _out(p)

    p = sub.add_parser("eval", help="evaluate checkpoints and write reports", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="general head checkpoint")
    p.add_argument("--features", required=True, help="test feature file")
    p.add_argument("--pairwise", action="store_true", help="also write the pair tables")
    p.add_argument("--dict", dest="pair_dict", help="pair dictionary checkpoint to compare against")
    p.add_argument("--balance-pairs", action=argparse.BooleanOptionalAction, default=True,
                   help="evaluate each pair on 2 x min(class sizes) samples, equal per class")
    p.add_argument("--format", choices=FORMATS, default="tsv", help="report format")
    _common(p)
    _out(p)

    p = sub.add_parser("report", help="re-render a metrics.json written by eval", formatter_class=fmt)
    p.add_argument("--metrics", required=True, help="metrics.json from eval")
    p.add_argument("--section", choices=("all", "general", "pairs", "pair-stats"), default="all",
                   help="which table to print")
    p.add_argument("--format", choices=FORMATS, default="tsv", help="report format")
    p.add_argument("--out", help="file to write; stdout when omitted")
    return parser


# --------------------------------------------------------------------------
# option merging

def _explicit_dests(parser: argparse.ArgumentParser, argv) -> set:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    cmd = next((t for t in argv if t in sub.choices), None)
    if cmd is None:
        return set()
    actions = sub.choices[cmd]._option_string_actions
    dests = set()
    for tok in argv:
        if tok.startswith("--"):
            opt = tok.split("=", 1)[0]
            if opt in actions:
                dests.add(actions[opt].dest)
            elif opt.startswith("--no-") and "--" + opt[5:] in actions:
                dests.add(actions["--" + opt[5:]].dest)
    return dests


def merge_config(ns: argparse.Namespace, explicit: set) -> tuple[dict, dict]:
    """Flags > config file > defaults. Returns (options, extra config keys)."""
    opts = vars(ns).copy()
    extra = {}
    path = opts.get("config")
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        with open(path, encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from None
        for k, v in file_cfg.items():
            dest = k.replace("-", "_")
            if dest in opts:
                if dest not in explicit:
                    opts[dest] = v
            else:
                extra[k] = v
    return opts, extra


def _require_file(path, what):
    if path is None or not os.path.isfile(path):
        raise ConfigError(f"{what} {path} does not exist")


def _outdir(path) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None
    return path


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None


def _jsonable(opts: dict) -> dict:
    return {k: v for k, v in sorted(opts.items()) if k not in ("func",)}


# --------------------------------------------------------------------------
# commands

def cmd_synth(opts: dict, extra: dict) -> int:
    out = _outdir(opts["out"])
    if "counts" in extra or "means" in extra:
        if not ("counts" in extra and "means" in extra):
            raise ConfigError("a custom synthesis config needs both 'counts' and 'means'")
        cfg = SynthesisConfig(
            counts=extra["counts"],
            means=np.asarray(extra["means"], dtype=np.float64),
            stddevs=extra.get("stddevs", [opts["stddev"]] * len(extra["counts"])),
            seed=opts["seed"],
            **{k: extra[k] for k in ("va_anchors", "va_noise", "landmark_noise") if k in extra},
            n_landmarks=opts["landmarks"],
        )
        profile = "custom"
    else:
        if opts["profile"] not in PROFILES:
            raise ConfigError(f"unknown profile {opts['profile']!r}")
        cfg = profile_config(
            opts["profile"], scale=opts["scale"], dim=opts["dim"], separation=opts["separation"],
            stddev=opts["stddev"], seed=opts["seed"], geometry_seed=opts["geometry_seed"],
            n_landmarks=opts["landmarks"],
        )
        profile = opts["profile"]
    data = synthesize_dataset(cfg)
    features_path = os.path.join(out, "features.tsv")
    try:
        write_feature_file(data, features_path)
    except OSError as exc:
        raise ConfigError(f"cannot write {features_path}: {exc}") from None
    manifest = {
        "command": "synth",
        "profile": profile,
        "options": _jsonable(opts),
        "synthesis": cfg.to_dict(),
        "class_names": list(CLASS_NAMES),
        "class_counts": data.class_counts.tolist(),
        "records": len(data),
        "features_file": "features.tsv",
        "environment": environment_info(),
    }
    write_manifest(os.path.join(out, "synth_manifest.json"), manifest)
    log.info("wrote %d records to %s", len(data), features_path)
    return EXIT_OK


def _train_config(opts: dict) -> TrainConfig:
    weights = opts["loss_weights"]
    if isinstance(weights, str):
        try:
            weights = [float(w) for w in weights.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse loss weights {weights!r}") from None
    return TrainConfig(
        initial_lr=opts["lr"], epochs=opts["epochs"], batch_size=opts["batch_size"],
        weight_decay=opts["weight_decay"], seed=opts["seed"], sampler=opts["sampler"].replace("-", "_"),
        cap_multiplier=opts["cap_multiplier"], expression_loss=opts["expression_loss"],
        aam=AamParams(opts["aam_s"], opts["aam_m"]), regression=opts["regression"], kappa=opts["kappa"],
        loss_weights=tuple(weights), rop_patience=opts["rop_patience"], rop_factor=opts["rop_factor"],
        rop_monitor=opts["rop_monitor"],
    )


def cmd_train(opts: dict, extra: dict) -> int:
    _require_file(opts["features"], "feature file")
    if opts.get("val_features"):
        _require_file(opts["val_features"], "validation feature file")
    config = _train_config(opts)
    out = _outdir(opts["out"])
    data = load_feature_file(opts["features"])
    if opts.get("val_features"):
        train, val = data, load_feature_file(opts["val_features"], dim_hint=data.feature_dim)
    else:
        train, val = split(data, opts["train_fraction"], opts["seed"])
    head, history = train_general(train, val, config)
    save_checkpoint(head, os.path.join(out, "general.json"))
    final = history[-1] if history else None
    manifest = {
        "command": "train",
        "options": _jsonable(opts),
        "train_config": config.to_dict(),
        "data": {
            "train_records": len(train),
            "val_records": len(val),
            "train_class_counts": train.class_counts.tolist(),
            "val_class_counts": val.class_counts.tolist(),
            "feature_dim": train.feature_dim,
        },
        "history": history_to_json(history),
        "summary": history_to_json([final])[0] if final else None,
        "checkpoint": "general.json",
        "environment": environment_info(),
    }
    write_manifest(os.path.join(out, "train_manifest.json"), manifest)
    return EXIT_OK


def _parse_pairs(spec) -> list:
    if spec is None or spec == "all":
        return all_pairs()
    items = spec if isinstance(spec, list) else [s for s in spec.split(",") if s.strip()]
    return [PairKey.parse(s.strip()) for s in items]


def cmd_pair_train(opts: dict, extra: dict) -> int:
    _require_file(opts["features"], "feature file")
    general = None
    if opts["mode"] == STACKED:
        if not opts.get("general"):
            raise ConfigError("--mode stacked requires --general <checkpoint>")
    if opts.get("general"):
        _require_file(opts["general"], "general checkpoint")
        general = load_checkpoint(opts["general"])
        if not isinstance(general, MultiOutputHead):
            raise ConfigError(f"{opts['general']} is not a general head checkpoint")
    keys = _parse_pairs(opts["pairs"])
    config = TrainConfig.pairwise_defaults(
        initial_lr=opts["lr"], epochs=opts["epochs"], batch_size=opts["batch_size"],
        weight_decay=opts["weight_decay"], rop_patience=opts["rop_patience"], rop_factor=opts["rop_factor"],
        rop_monitor=opts["rop_monitor"], seed=opts["seed"],
    )
    out = _outdir(opts["out"])
    train = load_feature_file(opts["features"])
    val = load_feature_file(opts["val_features"], dim_hint=train.feature_dim) if opts.get("val_features") else None
    result = train_pairwise(train, keys, general if opts["mode"] == STACKED else None, config, opts["mode"],
                            val=val, jobs=max(1, int(opts["jobs"])))
    save_checkpoint(result.pairs, os.path.join(out, "pair_dict.json"))
    manifest = {
        "command": "pair-train",
        "options": _jsonable(opts),
        "train_config": config.to_dict(),
        "mode": opts["mode"],
        "pairs": [k.slug for k in result.pairs.keys()],
        "skipped_pairs": [k.slug for k in result.skipped],
        "history": {k.slug: history_to_json(h) for k, h in sorted(result.history.items())},
        "checkpoint": "pair_dict.json",
        "environment": environment_info(),
    }
    write_manifest(os.path.join(out, "pair_manifest.json"), manifest)
    for k in result.skipped:
        log.warning("skipped %s: a class has no training records", k.name)
    return EXIT_OK


def _pair_test_set(test, key, balance, seed):
    pv = pair_view(test, key)
    if pv.class_counts[key.lo] == 0 or pv.class_counts[key.hi] == 0:
        return None
    if balance:
        pv = pv.subset(np.sort(draw_epoch(pv, SamplerSpec(PairBalanced(key), seed))))
    return pv


def evaluate(general: MultiOutputHead, test, *, pairwise=False, pairs: PairwiseHeadDict | None = None,
             balance_pairs=True, seed=0) -> MetricsReport:
    """Build the full metrics report for a general head (and optional dictionary)."""
    if general.feature_dim != test.feature_dim:
        raise DataError(f"checkpoint expects {general.feature_dim} features, test data has {test.feature_dim}")
    if pairs is not None and pairs.mode == DETACHED and pairs.feature_dim != test.feature_dim:
        raise DataError(f"pair dictionary expects {pairs.feature_dim} features, test data has {test.feature_dim}")
    cm = confusion(predict_expression(general, test.features), test.expression, general.n_classes)
    report = MetricsReport(class_metrics(cm))
    if not pairwise:
        return report
    keys = pairs.keys() if pairs is not None else all_pairs(general.n_classes)
    one_fc, dict_acc = {}, {}
    for key in keys:
        pv = _pair_test_set(test, key, balance_pairs, seed)
        if pv is None:
            log.warning("no test records for one class of %s; pair omitted", key.name)
            continue
        st = pair_accuracy(pair_eval_general(general, pv.features, key), pv.expression, key)
        report.pair_stats.append(st)
        one_fc[key] = st
        if pairs is not None:
            dict_acc[key] = pair_accuracy(predict_pair(pairs, general, pv.features, key), pv.expression, key)
    if pairs is not None:
        report.pair_rows = pair_report(one_fc, dict_acc)
    return report


def cmd_eval(opts: dict, extra: dict) -> int:
    _require_file(opts["checkpoint"], "checkpoint")
    _require_file(opts["features"], "feature file")
    if opts.get("pair_dict"):
        _require_file(opts["pair_dict"], "pair dictionary checkpoint")
    fmt = opts["format"]
    if fmt not in FORMATS:
        raise ConfigError(f"unknown format {fmt!r}")
    general = load_checkpoint(opts["checkpoint"])
    if not isinstance(general, MultiOutputHead):
        raise ConfigError(f"{opts['checkpoint']} is not a general head checkpoint")
    pairs = None
    if opts.get("pair_dict"):
        pairs = load_checkpoint(opts["pair_dict"])
        if not isinstance(pairs, PairwiseHeadDict):
            raise ConfigError(f"{opts['pair_dict']} is not a pair dictionary checkpoint")
    out = _outdir(opts["out"])
    test = load_feature_file(opts["features"])
    report = evaluate(general, test, pairwise=bool(opts["pairwise"] or pairs is not None), pairs=pairs,
                      balance_pairs=opts["balance_pairs"], seed=opts["seed"])
    ext = EXT[fmt]
    _write_text(os.path.join(out, f"general_report.{ext}"), render_classification(report.classification, fmt))
    if report.pair_stats:
        _write_text(os.path.join(out, f"pair_stats.{ext}"), render_pair_stats(report.pair_stats, fmt))
    if pairs is not None:
        _write_text(os.path.join(out, f"pair_report.{ext}"), render_pair_report(report.pair_rows, fmt))
    metrics = report_to_dict(report)
    metrics["options"] = _jsonable(opts)
    write_manifest(os.path.join(out, "metrics.json"), metrics)
    return EXIT_OK


def cmd_report(opts: dict, extra: dict) -> int:
    _require_file(opts["metrics"], "metrics file")
    with open(opts["metrics"], encoding="utf-8") as fh:
        try:
            report = report_from_dict(json.load(fh))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{opts['metrics']} is not a metrics file: {exc}") from None
    fmt, section = opts["format"], opts["section"]
    if section == "general":
        if report.classification is None:
            raise DataError("metrics file has no general section")
        text = render_classification(report.classification, fmt)
    elif section == "pairs":
        text = render_pair_report(report.pair_rows, fmt)
    elif section == "pair-stats":
        text = render_pair_stats(report.pair_stats, fmt)
    else:
        text = render_report(report, fmt)
    if opts.get("out"):
        _write_text(opts["out"], text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "pair-train": cmd_pair_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts, extra = merge_config(ns, _explicit_dests(parser, argv))
        return COMMANDS[ns.command](opts, extra)
    except ConfigError as exc:
        print(f"ferpair {ns.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"ferpair {ns.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"ferpair {ns.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
