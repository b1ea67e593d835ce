"""Command-line entry point.

    abnblip <command> [--config FILE] [--set key=value ...] [--threads N]
                      [--run-dir DIR] [command options]

Exit codes: 0 success, 2 config error, 3 data error (corpus, checkpoint),
4 numeric failure, 5 verification failure.  Errors print one line to stderr:
``abnblip: error code=<n> kind=<kind> msg=<text>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .checkpoint import CheckpointError
from .config import Config, ConfigError
from .corpus_io import CorpusError, read_corpus
from .encoder import EncoderConfigError
from .optim import NonFiniteGradient
from .qformer import MaskError
from .report import ReportError
from .synth import DataConfigError
from .trainer import DivergenceError

COMMANDS = ("gen-data", "train-stage1", "train-stage2", "generate", "eval", "grad-check", "ablate")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5


class VerificationFailed(RuntimeError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap (1 = bitwise reproducible)")
    common.add_argument("--run-dir", help="output directory (default runs/<timestamp>-s<seed>/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="abnblip", description="Abnormality-grounded CT report generation toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    s1 = sub.add_parser("train-stage1", parents=[common], help="fit encoder + classifier (BCE)")
    s1.add_argument("--corpus", required=True)
    s1.add_argument("--resume")
    s2 = sub.add_parser("train-stage2", parents=[common], help="fit tokenizer + querying transformer (ACL + ATG)")
    s2.add_argument("--corpus", required=True)
    s2.add_argument("--encoder", required=True)
    s2.add_argument("--resume")
    g = sub.add_parser("generate", parents=[common], help="write reports for one split")
    g.add_argument("--corpus", required=True)
    g.add_argument("--encoder", required=True)
    g.add_argument("--qformer", required=True)
    e = sub.add_parser("eval", parents=[common], help="score generated reports")
    e.add_argument("--corpus", required=True)
    e.add_argument("--reports", required=True)
    sub.add_parser("grad-check", parents=[common], help="finite-difference check of the composite loss")
    a = sub.add_parser("ablate", parents=[common], help="multi-scale x F_CLS ablation grid")
    a.add_argument("--corpus", required=True)
    a.add_argument("--encoder", required=True)
    return p


def _run_dir(args, cfg: Config) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{stamp}-s{cfg['seed']}" / args.command


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"{what} not found: {p}") if what != "corpus" else CorpusError(f"corpus not found: {p}")
    return p


def _dispatch(args, cfg: Config, out: Path) -> int:
    cmd = args.command
    if cmd == "gen-data":
        corpus = pipeline.gen_data(cfg, out)
        print(f"corpus\t{out}\t{len(corpus.cases)} cases")
        return EXIT_OK
    if cmd == "grad-check":
        reports = pipeline.run_grad_check(cfg)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"{r.name}\t{r.max_abs_err:.3e}\t{r.max_rel_err:.3e}\t{'PASS' if r.passed else 'FAIL'}" for r in reports]
        (out / "grad_check.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print("\n".join(lines))
        bad = [r.name for r in reports if not r.passed]
        print(f"grad-check\t{len(reports) - len(bad)}/{len(reports)} parameter groups pass")
        if bad:
            raise VerificationFailed(f"{len(bad)} parameter groups failed: {', '.join(bad[:5])}")
        return EXIT_OK

    corpus = read_corpus(_require(args.corpus, "corpus"))
    if cmd == "train-stage1":
        res = pipeline.run_stage1(cfg, corpus, out, resume=args.resume and _require(args.resume, "checkpoint"))
        print(f"encoder\t{res.checkpoint}\t{res.checkpoint_id}\tbest_val_macro_auc={res.summary['best_val_macro_auc']}")
    elif cmd == "train-stage2":
        enc = _require(args.encoder, "encoder checkpoint")
        res = pipeline.run_stage2(cfg, corpus, enc, out, resume=args.resume and _require(args.resume, "checkpoint"))
        print(f"qformer\t{res.checkpoint}\t{res.checkpoint_id}\ttrain_retrieval={res.summary['train_retrieval']:.4f}")
    elif cmd == "generate":
        rdir = pipeline.run_generate(
            cfg, corpus, _require(args.encoder, "encoder checkpoint"), _require(args.qformer, "qformer checkpoint"), out
        )
        print(f"reports\t{rdir}")
    elif cmd == "eval":
        values = pipeline.run_eval(cfg, corpus, _require(args.reports, "reports"), out)
        for key in ("cls.macro.auc", "nlg.abn.bleu4", "nlg.abn.exact_match", "ce.f1"):
            print(f"{key}\t{values[key]:.6f}")
    elif cmd == "ablate":
        rows = pipeline.run_ablate(cfg, corpus, _require(args.encoder, "encoder checkpoint"), out)
        print(pipeline.format_ablation(rows), end="")
    return EXIT_OK


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"abnblip: error code={code} kind={kind} msg={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = Config.load(args.config, args.set)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    if args.threads < 1:
        return _fail(EXIT_CONFIG, "config", ValueError("--threads must be >= 1"))
    out = _run_dir(args, cfg)
    try:
        with threadpool_limits(limits=args.threads):
            return _dispatch(args, cfg, out)
    except (ConfigError, EncoderConfigError, DataConfigError, MaskError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (CorpusError, CheckpointError, ReportError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (DivergenceError, NonFiniteGradient, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except VerificationFailed as exc:
        return _fail(EXIT_VERIFY, "verification", exc)
    except (KeyError, ValueError) as exc:
        # parameter-name or shape mismatches when a checkpoint meets a config
        return _fail(EXIT_CONFIG, "config", exc)


if __name__ == "__main__":
    sys.exit(main())
