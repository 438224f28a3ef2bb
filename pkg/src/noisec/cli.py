"""Command-line front end: ``noisec {gen-data,train,attack,detect,eval,report}``.

Exit codes: 0 success, 1 configuration error, 2 missing prerequisite,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import experiment as ex
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import load_dataset, save_dataset, generate_synthetic
from .formats import FormatError
from .numcore import NumericError
from .pipeline import DETECTOR_KINDS, DegenerateFitError, NoiSecBundle, bundle_bytes, detect

log = logging.getLogger("noisec")

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 1, 2, 3


class MissingPrerequisite(FileNotFoundError):
    pass


def _load(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(f"# config_hash: {cfg.hash()}\n" + dump_config(cfg))
    return cfg, out


def _data(cfg: ExperimentConfig, out: Path):
    """Prefer datasets written by gen-data, otherwise build them from the config."""
    train_p, test_p = out / "data" / "train.nsds", out / "data" / "test.nsds"
    if train_p.exists() and test_p.exists():
        return load_dataset(train_p, "train"), load_dataset(test_p, "test")
    return ex.load_data(cfg)


def _models(cfg: ExperimentConfig, out: Path):
    train, test = _data(cfg, out)
    try:
        return ex.load_models(cfg, out, train, test)
    except FileNotFoundError as exc:
        raise MissingPrerequisite(str(exc)) from exc


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> int:
    train, test = generate_synthetic(replace(cfg.data.synthetic, seed=cfg.data.synthetic.seed + cfg.seed))
    (out / "data").mkdir(exist_ok=True)
    for part in (train, test):
        path = out / "data" / f"{part.split}.nsds"
        save_dataset(part, path, cfg.hash())
        print(f"wrote {path} ({len(part)} samples)")
    return 0


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    train, test = _data(cfg, out)
    ms = ex.train_models(cfg, train, test)
    for name, path in ex.save_models(ms, out, cfg.hash()).items():
        print(f"{name}: {path} sha256={ms.checksums()[name]}")
    return 0


def cmd_attack(cfg: ExperimentConfig, out: Path) -> int:
    ms = _models(cfg, out)
    src = ex.select_sources([ms.target, ms.surrogate], ms.test, cfg.attack_samples, cfg.seed)
    x, y = ms.test.images[src], ms.test.labels[src]
    root = out / "attacks"
    root.mkdir(exist_ok=True)
    for setting, kinds, gen in (("whitebox", cfg.whitebox, ms.target), ("blackbox", cfg.blackbox, ms.surrogate)):
        for kind in kinds:
            acfg = ex._attack_config(cfg, kind)
            with ex.stage(f"{setting}:attack:{kind}"):
                if kind == "BADNET":
                    bsrc = ex.select_sources([ms.poisoned], ms.test, cfg.attack_samples, cfg.seed, ms.backdoor_target)
                    mal = atk.run_attack(acfg, ms.poisoned, ms.test.images[bsrc], ms.test.labels[bsrc], trigger=ms.trigger)
                    mal.source_index = bsrc
                else:
                    mal = atk.run_attack(acfg, gen, x, y, scorer=ms.target, fit_images=ms.train.images)
                    mal.source_index = src
            path = root / f"{setting}_{kind.lower()}.nsab"
            path.write_bytes(atk.attack_batch_bytes(mal, acfg, cfg.hash()))
            print(f"{path}: {len(mal)} samples, success rate {np.mean(mal.success):.3f}")
    return 0


def cmd_detect(cfg: ExperimentConfig, out: Path) -> int:
    ms = _models(cfg, out)
    batches = sorted((out / "attacks").glob("*.nsab")) if (out / "attacks").exists() else []
    if not batches:
        raise MissingPrerequisite(f"no attack batches under {out / 'attacks'}; run `attack` first")
    stacks = {"target": ex.fit_stack(cfg, ms.ae, ms.target, ms.train.images[: cfg.detector_train_samples])}
    if ms.poisoned is not None:
        stacks["poisoned"] = ex.fit_stack(cfg, ms.ae, ms.poisoned, ms.train.images[: cfg.detector_train_samples])
    (out / "bundles").mkdir(exist_ok=True)
    bundles: dict[tuple[str, str], NoiSecBundle] = {}
    for stack_name, stack in stacks.items():
        for kind in DETECTOR_KINDS:
            if kind not in stack.detectors:
                continue
            b = NoiSecBundle(stack.ae, stack.clf, stack.detectors[kind], stack.thresholds[kind])
            bundles[stack_name, kind] = b
            (out / "bundles" / f"{stack_name}_{kind.lower()}.nsbd").write_bytes(bundle_bytes(b, cfg.hash()))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "index", "detector", "score", "verdict", "config_hash"])
    inputs = [("test", np.arange(len(ms.test)), ms.test.images)]
    for path in batches:
        batch = atk.parse_attack_batch(path.read_bytes())
        inputs.append((path.stem, batch.index, batch.rebuild(ms.test.images).x_mal))
    for source, index, images in inputs:
        stack_name = "poisoned" if source.endswith("badnet") else "target"
        for (name, kind), b in bundles.items():
            if name != stack_name:
                continue
            verdicts = detect(b, images)
            for i, v in zip(index, verdicts):
                w.writerow([source, int(i), kind, repr(v.score), v.label, cfg.hash()])
            flagged = np.mean([v.malicious for v in verdicts])
            print(f"{source:>20s} {kind}: flagged {flagged:.3f}")
    (out / "verdicts.csv").write_text(buf.getvalue())
    return 0


def cmd_eval(cfg: ExperimentConfig, out: Path) -> int:
    train, test = _data(cfg, out)
    try:
        ms = ex.load_models(cfg, out, train, test)
    except FileNotFoundError:
        ms = ex.train_models(cfg, train, test)
        ex.save_models(ms, out, cfg.hash())
    report = ex.run_experiment(cfg, ms)
    for path in report.write(out).values():
        print(f"wrote {path}")
    return 0


def render_table(doc: dict) -> str:
    detectors = sorted({c["detector"] for c in doc["cells"]}, key=lambda d: (d.startswith("MAGNET"), d))
    lines = [f"config_hash: {doc['config_hash']}", ""]
    for setting in ("whitebox", "blackbox"):
        rows = [c for c in doc["cells"] if c["setting"] == setting]
        if not rows:
            continue
        lines.append(f"## {setting} AUROC")
        lines.append("| attack | " + " | ".join(detectors) + " |")
        lines.append("|---" * (len(detectors) + 1) + "|")
        for attack in dict.fromkeys(c["attack"] for c in rows):
            vals = {c["detector"]: c["auroc"] for c in rows if c["attack"] == attack}
            lines.append(f"| {attack} | " + " | ".join(f"{vals[d]:.3f}" for d in detectors) + " |")
        lines.append("")
    return "\n".join(lines)


def cmd_report(cfg: ExperimentConfig, out: Path) -> int:
    path = out / "report.json"
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; run `eval` first")
    text = render_table(ex.load_report(path))
    (out / "report.md").write_text(text + "\n")
    print(text)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisec", description="Noise-feature detection of adversarial and backdoor inputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config (defaults to the built-in desk config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")
    return parser


def _root_cause(exc: BaseException) -> BaseException:
    return exc.cause if isinstance(exc, ex.ExperimentError) else exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, out = _load(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, out)
    except Exception as exc:
        cause = _root_cause(exc)
        if isinstance(cause, (FileNotFoundError, FormatError)):
            print(f"missing prerequisite: {exc}", file=sys.stderr)
            return EXIT_MISSING
        if isinstance(cause, (FloatingPointError, NumericError, atk.AttackError, DegenerateFitError)):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
