"""Command line entry point: ``diffattack <subcommand>``.

Exit codes: 0 success, 2 partial failure, 3 usage/config error, 4 attack
did not succeed within budget (outputs are still written).
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import BackboneError, load_image, preprocess, save_image
from .config import ConfigError, RunConfig, load_config, parse_override
from .evaluation import EvaluationError, emit_report, load_score_file
from .pipeline import Manifest, attack, attack_spec, build_style_source, evaluate_dirs, prepare_inputs, run_all, seed_everything, stylize
from .plotting import plot_report
from .style_source import EndpointNotConfigured, GenerationError, StyleRequest, StyleSourceError
from .transfer import OptimizationError

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_ATTACK_FAILED = 0, 2, 3, 4

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

log = logging.getLogger("diffattack")


class UsageError(Exception):
    pass


def _config(args, need_content=True, need_style=True) -> RunConfig:
    overrides = dict(parse_override(s) for s in (args.set or []))
    flag_map = {
        "seed": "seed",
        "content": "content_path",
        "mask": "mask_path",
        "out": "output_dir",
        "backbone": "backbone.model_id",
        "weights": "backbone.weights_path",
        "cache_dir": "cache_dir",
        "style_file": "style.file",
        "style_prompt": "style.prompt",
        "style_seed": "style.seed",
        "target": "attack.target",
        "iters": "attack.max_iters",
        "stylize_iters": "transfer.max_iters",
        "scorer": "evaluate.scorer",
    }
    for attr, key in flag_map.items():
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    if getattr(args, "metrics", None):
        overrides["evaluate.metrics"] = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if getattr(args, "offline", False):
        overrides["generation.backend"] = "offline"
    if getattr(args, "joint", False):
        overrides["attack.joint"] = True
    if isinstance(overrides.get("attack.target"), str) and overrides["attack.target"].isdigit():
        overrides["attack.target"] = int(overrides["attack.target"])
    cfg = load_config(args.config, overrides)
    problems = cfg.path_problems(need_content=need_content, need_style=need_style)
    if problems:
        raise ConfigError(problems)
    return cfg


def _manifest(cfg: RunConfig, command: str) -> Manifest:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    return Manifest(command, cfg.hash(), cfg.seed, out)


# ---------------------------------------------------------------- subcommands

def cmd_generate_style(args) -> int:
    prompts = list(args.prompt or [])
    if args.prompts_file:
        prompts += [l.strip() for l in Path(args.prompts_file).read_text(encoding="utf-8").splitlines() if l.strip()]
    if not prompts and not args.style_file:
        raise UsageError("give --prompt, --prompts-file or --style-file")
    style_args = argparse.Namespace(**{**vars(args), "style_file": None, "style_prompt": None})
    cfg = _config(style_args, need_content=False, need_style=False)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = build_style_source(cfg)
    if args.style_file:
        asset = source.resolve(StyleRequest("file", file_path=args.style_file))
        dest = out / f"style_{Path(args.style_file).stem}.png"
        save_image(asset.image, dest)
        print(dest)
        return EXIT_OK
    if source.client is None:
        raise EndpointNotConfigured(
            "no generation endpoint configured; set generation.endpoint in the config or pass --offline"
        )
    seeds = [args.seed + i for i in range(len(prompts))] if args.seed is not None else []
    assets, errors = source.batch_generate(prompts, seeds)
    for a in assets:
        dest = out / f"style_{a.cache_key[:16]}.png"
        shutil.copyfile(a.path, dest)
        print(dest)
    for i, err in sorted(errors.items()):
        print(f"prompt {i} ({prompts[i]!r}) failed: {err}", file=sys.stderr)
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_stylize(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg, "stylize")
    inp = prepare_inputs(cfg, manifest)
    stylize(cfg, inp, manifest)
    print(manifest.write())
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    if cfg.attack.target is None:
        raise UsageError("attack needs --target (class name or index)")
    if not args.from_content and not args.stylized:
        raise UsageError("give --stylized PATH or --from-content")
    manifest = _manifest(cfg, "attack")
    inp = prepare_inputs(cfg, manifest)
    attack_spec(cfg, inp.backbone)  # resolve the target before spending time on stage 1
    if args.from_content:
        start = stylize(cfg, inp, manifest).image
    else:
        if not Path(args.stylized).is_file():
            raise ConfigError([f"--stylized: path does not exist: {args.stylized}"])
        start = preprocess(load_image(args.stylized), inp.backbone.input_size).to(inp.backbone.dtype)
    result = attack(cfg, inp, start, manifest)
    print(manifest.write())
    return EXIT_OK if result.success else EXIT_ATTACK_FAILED


def _read_corpus(directory: Path) -> list[np.ndarray]:
    if not directory.is_dir():
        raise ConfigError([f"{directory}: not a directory"])
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError([f"{directory}: no images found"])
    return [load_image(p) for p in files]


def cmd_evaluate(args) -> int:
    cfg = _config(args, need_content=False, need_style=False)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.scores:
        report = load_score_file(args.scores)
        (out / "report.md").write_text(emit_report(report, "markdown"), encoding="utf-8")
        (out / "report.csv").write_text(emit_report(report, "csv"), encoding="utf-8")
        plot_report(report, out / "report.png")
        print(out / "report.md")
        return EXIT_OK
    if not args.dirs:
        raise UsageError("give one or more image directories or --scores")
    dirs = [Path(d) for d in args.dirs]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        loaded = list(pool.map(_read_corpus, dirs))
    manifest = Manifest("evaluate", cfg.hash(), cfg.seed, out)
    md = evaluate_dirs({d.name: imgs for d, imgs in zip(dirs, loaded)}, cfg, manifest)
    sys.stdout.write(md)
    manifest.write()
    return EXIT_OK


def cmd_run_all(args) -> int:
    cfg = _config(args)
    manifest, result = run_all(cfg)
    print(manifest.write())
    return EXIT_OK if result.success else EXIT_ATTACK_FAILED


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, pipeline: bool = True) -> None:
    p.add_argument("--config", help="YAML/JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--cache-dir")
    p.add_argument("--offline", action="store_true", help="use the procedural generation double")
    if pipeline:
        p.add_argument("--content", help="content image")
        p.add_argument("--mask", help="mask image, or 'none' for the whole image")
        p.add_argument("--style-file")
        p.add_argument("--style-prompt")
        p.add_argument("--style-seed", type=int)
        p.add_argument("--backbone", choices=["toy", "inception_v3"])
        p.add_argument("--weights", help="Inception-v3 weight file")
        p.add_argument("--stylize-iters", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffattack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-style", help="resolve style images from prompts or a local file")
    _common(p, pipeline=False)
    p.add_argument("--prompt", action="append", help="text prompt, repeatable")
    p.add_argument("--prompts-file", help="one prompt per line")
    p.add_argument("--style-file", help="validate and copy a local style image")
    p.set_defaults(func=cmd_generate_style)

    p = sub.add_parser("stylize", help="stage 1: masked style transfer")
    _common(p)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("attack", help="stage 2: targeted adversarial refinement")
    _common(p)
    p.add_argument("--stylized", help="stage-1 output to start from")
    p.add_argument("--from-content", action="store_true", help="run stage 1 first")
    p.add_argument("--target", help="target class name or index")
    p.add_argument("--iters", type=int, help="stage-2 iteration budget")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="score image directories and write markdown/CSV reports")
    _common(p, pipeline=False)
    p.add_argument("dirs", nargs="*", help="one directory per method; the directory name is the row label")
    p.add_argument("--metrics", help="comma-separated subset of nima,topiq_iaa,topiq_nr,tres")
    p.add_argument("--scorer", choices=["stub", "real"])
    p.add_argument("--scores", help="render a canned score CSV instead of scoring images")
    p.add_argument("--jobs", type=int, default=1, help="parallel image loading")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-all", help="style, stage 1, stage 2 and evaluation in one go")
    _common(p)
    p.add_argument("--target", help="target class name or index")
    p.add_argument("--iters", type=int, help="stage-2 iteration budget")
    p.add_argument("--joint", action="store_true", help="skip stage 1 and optimise all terms from the content image")
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, UsageError, EndpointNotConfigured, BackboneError, EvaluationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StyleSourceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OptimizationError as exc:
        print(f"error: optimisation aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
