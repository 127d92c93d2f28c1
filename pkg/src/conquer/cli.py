"""Command line entry point: train, eval, search, gradcheck and synth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("conquer")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable, wins over --config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conquer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus with oracle stage-1 rank lists")
    _common(p)
    p.add_argument("--out", help="corpus directory (default: corpus_dir)")

    p = sub.add_parser("train", help="train on a corpus directory")
    _common(p)
    p.add_argument("--corpus", help="corpus directory (default: corpus_dir)")
    p.add_argument("--out", help="run directory for metrics.tsv and best.ckpt (default: out_dir)")
    p.add_argument("--qdf", choices=("learned", "average"), help="fusion ablation switch")
    p.add_argument("--qal", choices=("on", "off"), help="query-aware learning ablation switch")
    p.add_argument("--vs-head", choices=("on", "off"), help="video scoring head (needed for exclusive)")
    p.add_argument("--scoring", choices=("general", "exclusive", "disjoint"))

    p = sub.add_parser("eval", help="report R@K for VCMR, SVMR and VR")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--scoring", choices=("general", "exclusive", "disjoint"))
    p.add_argument("--top-k", type=int)
    p.add_argument("--out", help="write report.txt and report.kv here")

    p = sub.add_parser("search", help="rank moments for queries of a query file")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--query-file", required=True, help="queries.tsv (its queries.bin is read alongside)")
    p.add_argument("--top-k", type=int)
    p.add_argument("--scoring", choices=("general", "exclusive", "disjoint"))
    p.add_argument("--nms-iou", type=float)
    p.add_argument("--bounds", help="L_min,L_max in clips")
    p.add_argument("--max-results", type=int, default=10)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _flag_overrides(args) -> list[str]:
    """CLI flags are sugar for config keys and take precedence over --set."""
    out = list(args.overrides)
    if getattr(args, "scoring", None):
        out.append(f"scoring={args.scoring}")
    if getattr(args, "top_k", None):
        out.append(f"top_k={args.top_k}")
    if getattr(args, "nms_iou", None) is not None:
        out.append(f"nms_iou={args.nms_iou}")
    if getattr(args, "bounds", None):
        try:
            lo, hi = (int(x) for x in args.bounds.split(","))
        except ValueError:
            raise ConfigError(f"--bounds expects L_min,L_max, got {args.bounds!r}", "bounds") from None
        out += [f"l_min={lo}", f"l_max={hi}"]
    for flag in ("qdf", "qal", "vs_head"):
        if getattr(args, flag, None):
            out.append(f"{flag}={getattr(args, flag)}")
    if getattr(args, "checkpoint", None):
        out.append(f"checkpoint={args.checkpoint}")
    if getattr(args, "corpus", None):
        out.append(f"corpus_dir={args.corpus}")
    return out


def _log_config(cfg: RunConfig, command: str) -> None:
    log.info("command=%s resolved config:\n%s", command, cfg.dumps().rstrip())


def _load_model(cfg: RunConfig):
    from .model import load_checkpoint
    path = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else Path(cfg.paths.out_dir) / "best.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, ckpt_cfg = load_checkpoint(path)
    # the checkpoint fixes the architecture; retrieval and path keys still come from the command line
    cfg.model = ckpt_cfg.model
    return model, ckpt_cfg


def cmd_synth(cfg: RunConfig, args) -> int:
    from .data import generate_synthetic, write_corpus
    if not (args.out or cfg.paths.corpus_dir):
        raise ConfigError("no output directory: pass --out or set corpus_dir", "corpus_dir")
    out = Path(args.out or cfg.paths.corpus_dir)
    corpus, queries, ranks = generate_synthetic(cfg.synth)
    write_corpus(out, corpus, queries, ranks)
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    n_split = {s: sum(q.split == s for q in queries) for s in ("train", "val", "test")}
    print(f"wrote {len(corpus)} videos, {len(queries)} queries {n_split} to {out}")
    return EXIT_OK


def _dataset(cfg: RunConfig):
    from .data import load_dataset
    if not cfg.paths.corpus_dir:
        raise ConfigError("no corpus: pass --corpus or set corpus_dir", "corpus_dir")
    corpus, queries, ranks = load_dataset(cfg.paths.corpus_dir, cfg.model.max_clips)
    if corpus.visual_dim != cfg.model.visual_dim or corpus.text_dim != cfg.model.text_dim:
        raise ConfigError(f"corpus feature dims ({corpus.visual_dim}, {corpus.text_dim}) differ from "
                          f"visual_dim={cfg.model.visual_dim}, text_dim={cfg.model.text_dim}", "visual_dim")
    return corpus, queries, ranks


def cmd_train(cfg: RunConfig, args) -> int:
    from .data import split_queries
    from .model import Conquer
    from .training import train
    corpus, queries, ranks = _dataset(cfg)
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    model = Conquer(cfg.model)
    res = train(model, corpus, split_queries(queries, "train"), split_queries(queries, "val"), ranks, cfg, out)
    best = res.history[res.best_epoch - 1]
    print(f"best epoch {res.best_epoch}: R1@0.5={best.r1_05:.2f} R1@0.7={best.r1_07:.2f} "
          f"({len(res.history)} epochs, {res.seconds:.1f}s) -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from .data import split_queries
    from .evaluation import evaluate
    model, _ = _load_model(cfg)
    corpus, queries, ranks = _dataset(cfg)
    qs = split_queries(queries, args.split) if args.split != "all" else queries
    if not qs:
        raise ValueError(f"no queries in split {args.split!r}")
    rep = evaluate(model, corpus, qs, ranks, cfg.retrieval, cfg.train.scoring, cfg.retrieval.top_k)
    print(rep.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(rep.to_text(), encoding="utf-8")
        (out / "report.kv").write_text(rep.to_kv(), encoding="utf-8")
    return EXIT_OK


def cmd_search(cfg: RunConfig, args) -> int:
    from .data import load_queries
    from .retrieval import vcmr_search
    model, _ = _load_model(cfg)
    corpus, _, ranks = _dataset(cfg)
    qpath = Path(args.query_file)
    queries = load_queries(qpath, qpath.with_suffix(".bin"), cfg.model.text_dim)
    print("query_id\trank\tvideo_id\tt_begin\tt_end\tscore")
    for q in queries:
        if q.query_id not in ranks:
            raise KeyError(f"no stage-1 rank list for query {q.query_id}")
        moments = vcmr_search(model, q, corpus, ranks[q.query_id], cfg.retrieval, cfg.train.scoring,
                              cfg.retrieval.top_k, max_results=args.max_results)
        for m in moments:
            print(f"{q.query_id}\t{m.rank}\t{m.video_id}\t{m.t_begin:.2f}\t{m.t_end:.2f}\t{m.score:.6g}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import format_table, run_all
    results = run_all(seeds=args.seeds, tol=args.tol)
    print(format_table(results), end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "search": cmd_search,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _flag_overrides(args))
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, cfg.paths.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _log_config(cfg, args.command)
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - map every runtime failure onto exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
