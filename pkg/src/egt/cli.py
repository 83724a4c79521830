"""Command-line interface.

Subcommands: gen-data, train, eval, explain, stats.  Every command
echoes its fully resolved parameters to ``<out>/<command>.config.json``;
re-running with ``--config <that file>`` (and no other flags) repeats
the run bit-exactly.

Exit codes: 0 success, 1 usage or configuration problem, 2 missing or
malformed data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import GeneratorSpec, gen_synthetic_domains, load_dataset, sample_episode, save_dataset
from .errors import ConfigError, ContractError, DataFormatError, NumericError
from .evaluation import TransductiveConfig, dataset_feature_stats, evaluate
from .heatmap import render_heatmap
from .lrp import LrpConfig
from .model import build_model, explain_input, load_model, save_model
from .training import TrainConfig, default_loss_weights, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _CliParser(argparse.ArgumentParser):
    """Argparse that raises instead of calling sys.exit(2)."""

    def error(self, message):
        raise ConfigError(message)


def _require_dir(path: str, what: str) -> None:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} directory {path!r} does not exist")


def _resolve_params(args, defaults: dict, optional: tuple = ()) -> dict:
    """Merge flag values over defaults, or load them from --config.

    Keys listed in ``optional`` may resolve to None; every other key
    must end up with a concrete value.
    """
    provided = {k: getattr(args, k) for k in defaults}
    if args.config is not None:
        given = [k for k, v in provided.items() if v is not None]
        if given:
            raise ConfigError(
                f"--config replaces all other flags; drop {sorted(given)}")
        with open(args.config) as fh:
            loaded = json.load(fh)
        loaded.pop("command", None)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"config file has unknown keys {sorted(unknown)}")
        params = dict(defaults)
        params.update(loaded)
    else:
        params = dict(defaults)
        params.update({k: v for k, v in provided.items() if v is not None})
    missing = [k for k, v in params.items()
               if v is None and k not in optional]
    if missing:
        raise ConfigError(f"missing required settings: {sorted(missing)}")
    return params


def _echo_config(out_dir: str, command: str, params: dict) -> None:
    payload = {"command": command}
    payload.update(params)
    with open(os.path.join(out_dir, f"{command}.config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"bad {what} list {text!r}: {exc}") from exc


def _cmd_gen_data(args) -> int:
    defaults = {"out": None, "classes": 20, "per_class": 60, "height": 32,
                "width": 32, "domains": "bright,dark", "seed": 0,
                "min_gap": 0.05, "max_primitives": 3}
    params = _resolve_params(args, defaults)
    _require_dir(params["out"], "output")
    spec = GeneratorSpec(
        classes=int(params["classes"]),
        images_per_class=int(params["per_class"]),
        height=int(params["height"]), width=int(params["width"]),
        domains=tuple(str(params["domains"]).split(",")),
        max_primitives=int(params["max_primitives"]),
        min_channel_gap=float(params["min_gap"]))
    sets = gen_synthetic_domains(spec, seed=int(params["seed"]))
    for data in sets:
        path = os.path.join(params["out"], f"{data.domain_tag}.egtd")
        save_dataset(data, path)
        print(f"wrote {path}: {data.images.shape[0]} images, "
              f"{data.n_classes} classes, domain={data.domain_tag}")
    _echo_config(params["out"], "gen-data", params)
    return EXIT_OK


def _train_config(params: dict, head_kind: str) -> TrainConfig:
    baseline = params["mode"] == "baseline"
    xi, lam = default_loss_weights(head_kind, int(params["shot"]), baseline)
    if params["xi"] is not None:
        xi = float(params["xi"])
    if params["lam"] is not None:
        lam = float(params["lam"])
    if baseline and lam != 0.0:
        raise ConfigError("baseline mode requires lam=0")
    lrp_cfg = LrpConfig(epsilon=float(params["epsilon"]),
                        alpha=float(params["alpha"]))
    return TrainConfig(
        way=int(params["way"]), shot=int(params["shot"]),
        n_query=int(params["queries"]), xi=xi, lam=lam,
        lr=float(params["lr"]), momentum=float(params["momentum"]),
        epochs=int(params["epochs"]),
        episodes_per_epoch=int(params["episodes_per_epoch"]),
        lr_decay=float(params["lr_decay"]),
        lr_decay_every=int(params["lr_decay_every"]),
        seed=int(params["seed"]),
        stop_gradient_through_weights=not bool(params["exact_weight_grad"]),
        lrp=lrp_cfg)


def _cmd_train(args) -> int:
    defaults = {"data": None, "out": None, "mode": "egt", "head": "cosine",
                "way": 5, "shot": 5, "queries": 16, "epochs": 100,
                "episodes_per_epoch": 100, "lr": 1e-3, "momentum": 0.9,
                "xi": None, "lam": None, "beta": None, "epsilon": 0.001,
                "alpha": 1.0, "lr_decay": 0.5, "lr_decay_every": 40,
                "seed": 0, "widths": "8,16,32", "hidden": 64,
                "explain_variant": "query", "exact_weight_grad": False}
    params = _resolve_params(args, defaults, optional=("xi", "lam", "beta"))
    if params["mode"] not in ("egt", "baseline"):
        raise ConfigError(f"unknown mode {params['mode']!r}")
    if params["head"] not in ("cosine", "relation"):
        raise ConfigError(f"unknown head {params['head']!r}")
    _require_dir(params["out"], "output")

    data = load_dataset(params["data"])
    cfg = _train_config(params, params["head"])
    params["xi"], params["lam"] = cfg.xi, cfg.lam

    rng_model = np.random.default_rng([int(params["seed"]), 0])
    rng_episodes = np.random.default_rng([int(params["seed"]), 1])
    model = build_model(
        params["head"], data.image_shape, rng_model,
        widths=_parse_ints(params["widths"], "widths"),
        beta=None if params["beta"] is None else float(params["beta"]),
        explain_variant=str(params["explain_variant"]),
        hidden=int(params["hidden"]))
    params["beta"] = model.head.beta

    def stream():
        while True:
            yield sample_episode(data, cfg.way, cfg.shot, cfg.n_query,
                                 rng_episodes)

    log_path = os.path.join(params["out"], "train_log.csv")
    ckpt_path = os.path.join(params["out"], "model.egt1")
    rows = train(model, stream(), cfg, log_path=log_path,
                 checkpoint_path=ckpt_path)
    _echo_config(params["out"], "train", params)
    if rows:
        tail = rows[-min(len(rows), cfg.episodes_per_epoch):]
        acc = float(np.mean([r["acc"] for r in tail]))
        loss = float(np.mean([r["loss_total"] for r in tail]))
        print(f"trained {len(rows)} episodes; last epoch mean "
              f"acc={acc:.4f} loss={loss:.4f}")
    print(f"wrote {ckpt_path} and {log_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    defaults = {"checkpoint": None, "data": None, "out": None, "way": 5,
                "shot": 5, "queries": 16, "episodes": 2000, "seed": 0,
                "transductive": False, "iterations": 2, "candidates": "4,8",
                "workers": 1}
    params = _resolve_params(args, defaults)
    _require_dir(params["out"], "output")
    model = load_model(params["checkpoint"])
    trans = None
    if params["transductive"]:
        trans = TransductiveConfig(
            iterations=int(params["iterations"]),
            candidates_per_iter=_parse_ints(params["candidates"], "candidates"))
    paths = (params["data"] if isinstance(params["data"], list)
             else str(params["data"]).split(","))
    for path in paths:
        data = load_dataset(path)
        rng = np.random.default_rng([int(params["seed"]), 2])
        report = evaluate(model, data, int(params["way"]), int(params["shot"]),
                          int(params["queries"]), int(params["episodes"]), rng,
                          transductive=trans, workers=int(params["workers"]))
        stem = os.path.splitext(os.path.basename(path))[0]
        csv_path = os.path.join(params["out"], f"eval_{stem}.csv")
        with open(csv_path, "w") as fh:
            fh.write("episode,acc\n")
            for i, acc in enumerate(report.accuracies, start=1):
                fh.write(f"{i},{float(acc)!r}\n")
        flag = " (degenerate: single episode)" if report.degenerate else ""
        print(f"{stem}: acc={report.mean:.4f} +-{report.ci95:.4f} "
              f"over {report.episodes} episodes{flag}; wrote {csv_path}")
    params["data"] = ",".join(paths)
    _echo_config(params["out"], "eval", params)
    return EXIT_OK


def _cmd_explain(args) -> int:
    defaults = {"checkpoint": None, "data": None, "out": None, "way": 5,
                "shot": 5, "queries": 16, "seed": 0, "query": 0,
                "targets": "all", "epsilon": 0.001, "alpha": 1.0,
                "blend": 0.6}
    params = _resolve_params(args, defaults)
    _require_dir(params["out"], "output")
    model = load_model(params["checkpoint"])
    data = load_dataset(params["data"])
    rng = np.random.default_rng([int(params["seed"]), 3])
    episode = sample_episode(data, int(params["way"]), int(params["shot"]),
                             int(params["queries"]), rng)
    q = int(params["query"])
    if not 0 <= q < episode.n_query:
        raise ConfigError(f"query index {q} outside 0..{episode.n_query - 1}")
    lrp_cfg = LrpConfig(epsilon=float(params["epsilon"]),
                        alpha=float(params["alpha"]))
    query_image = episode.query_images[q]
    result = explain_input(model, episode.support_images, episode.support_local,
                           episode.way, query_image, lrp_cfg=lrp_cfg)
    predicted = int(np.argmax(result.probabilities))
    if params["targets"] == "predicted":
        targets = [predicted]
    elif params["targets"] == "all":
        targets = list(range(episode.way))
    else:
        raise ConfigError(f"targets must be 'all' or 'predicted', "
                          f"got {params['targets']!r}")
    for target in targets:
        rel = result.input_relevance[target]
        base = os.path.join(params["out"], f"query{q}_class{target}")
        render_heatmap(rel, base + ".ppm", underlay=query_image,
                       alpha=float(params["blend"]))
        np.save(base + ".npy", rel)
    probs = ", ".join(f"{p:.4f}" for p in result.probabilities)
    print(f"query {q}: true class {int(episode.query_local[q])}, "
          f"predicted {predicted}, probs [{probs}]")
    print(f"wrote {len(targets)} heatmap(s) to {params['out']}")
    _echo_config(params["out"], "explain", params)
    return EXIT_OK


def _cmd_stats(args) -> int:
    defaults = {"checkpoint": None, "data": None, "out": None, "limit": 0}
    params = _resolve_params(args, defaults)
    _require_dir(params["out"], "output")
    model = load_model(params["checkpoint"])
    data = load_dataset(params["data"])
    limit = int(params["limit"]) or None
    stats = dataset_feature_stats(model, data, limit=limit)
    stem = os.path.splitext(os.path.basename(params["data"]))[0]
    csv_path = os.path.join(params["out"], f"stats_{stem}.csv")
    with open(csv_path, "w") as fh:
        fh.write("image,label,s2,qdiff\n")
        for i, st in enumerate(stats):
            fh.write(f"{i},{int(data.labels[i])},{st.s2!r},{st.qdiff!r}\n")
    s2 = np.array([st.s2 for st in stats])
    qd = np.array([st.qdiff for st in stats])
    summary_path = os.path.join(params["out"], f"stats_{stem}_summary.csv")
    with open(summary_path, "w") as fh:
        fh.write("n,mean_s2,std_s2,mean_qdiff,std_qdiff\n")
        fh.write(f"{len(stats)},{float(s2.mean())!r},{float(s2.std(ddof=1))!r},"
                 f"{float(qd.mean())!r},{float(qd.std(ddof=1))!r}\n")
    print(f"{stem}: n={len(stats)} mean_s2={s2.mean():.6f} "
          f"mean_qdiff={qd.mean():.6f}")
    print(f"wrote {csv_path} and {summary_path}")
    _echo_config(params["out"], "stats", params)
    return EXIT_OK


def _add_config_flag(sub) -> None:
    sub.add_argument("--config", help="JSON file with all settings "
                     "(mutually exclusive with other flags)")


def build_parser() -> argparse.ArgumentParser:
    parser = _CliParser(prog="egt",
                        description="Explanation-guided few-shot training")
    commands = parser.add_subparsers(dest="command")

    gen = commands.add_parser("gen-data",
                              help="render the synthetic multi-domain corpus")
    _add_config_flag(gen)
    gen.add_argument("--out")
    gen.add_argument("--classes", type=int)
    gen.add_argument("--per-class", dest="per_class", type=int)
    gen.add_argument("--height", type=int)
    gen.add_argument("--width", type=int)
    gen.add_argument("--domains")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--min-gap", dest="min_gap", type=float)
    gen.add_argument("--max-primitives", dest="max_primitives", type=int)
    gen.set_defaults(func=_cmd_gen_data)

    tr = commands.add_parser("train", help="train a few-shot model")
    _add_config_flag(tr)
    tr.add_argument("--data")
    tr.add_argument("--out")
    tr.add_argument("--mode", choices=["egt", "baseline"])
    tr.add_argument("--head", choices=["cosine", "relation"])
    tr.add_argument("--way", type=int)
    tr.add_argument("--shot", type=int)
    tr.add_argument("--queries", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--episodes-per-epoch", dest="episodes_per_epoch", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--momentum", type=float)
    tr.add_argument("--xi", type=float)
    tr.add_argument("--lam", type=float)
    tr.add_argument("--beta", type=float)
    tr.add_argument("--epsilon", type=float)
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--lr-decay", dest="lr_decay", type=float)
    tr.add_argument("--lr-decay-every", dest="lr_decay_every", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--widths")
    tr.add_argument("--hidden", type=int)
    tr.add_argument("--explain-variant", dest="explain_variant",
                    choices=["query", "both-normalized"])
    tr.add_argument("--exact-weight-grad", dest="exact_weight_grad",
                    action="store_const", const=True)
    tr.set_defaults(func=_cmd_train)

    ev = commands.add_parser("eval",
                             help="episodic accuracy with confidence interval")
    _add_config_flag(ev)
    ev.add_argument("--checkpoint")
    ev.add_argument("--data", nargs="+")
    ev.add_argument("--out")
    ev.add_argument("--way", type=int)
    ev.add_argument("--shot", type=int)
    ev.add_argument("--queries", type=int)
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--transductive", action="store_const", const=True)
    ev.add_argument("--iterations", type=int)
    ev.add_argument("--candidates")
    ev.add_argument("--workers", type=int)
    ev.set_defaults(func=_cmd_eval)

    ex = commands.add_parser("explain", help="render query heatmaps")
    _add_config_flag(ex)
    ex.add_argument("--checkpoint")
    ex.add_argument("--data")
    ex.add_argument("--out")
    ex.add_argument("--way", type=int)
    ex.add_argument("--shot", type=int)
    ex.add_argument("--queries", type=int)
    ex.add_argument("--seed", type=int)
    ex.add_argument("--query", type=int)
    ex.add_argument("--targets", choices=["all", "predicted"])
    ex.add_argument("--epsilon", type=float)
    ex.add_argument("--alpha", type=float)
    ex.add_argument("--blend", type=float)
    ex.set_defaults(func=_cmd_explain)

    st = commands.add_parser("stats", help="per-image feature spread statistics")
    _add_config_flag(st)
    st.add_argument("--checkpoint")
    st.add_argument("--data")
    st.add_argument("--out")
    st.add_argument("--limit", type=int)
    st.set_defaults(func=_cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ContractError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, OverflowError,
            ZeroDivisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
