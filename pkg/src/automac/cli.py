"""``automac`` command line: simulate, train, score, evaluate, reproduce.

Exit codes: 0 success, 2 config error, 3 data error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from automac import evaluation as ev
from automac.config import RunConfig, dump_config, load_config, stage_seed
from automac.encoder import load_checkpoint
from automac.experiment import ARM_LABELS, ARMS, echo, run_seed, train_arm
from automac.ingestion import load_manifest, stratified_split
from automac.mogras import load_templates, score_and_grade_batch
from automac.motion_sim import generate_dataset, make_sources
from automac.training import load_head, load_network
from automac.types import GRADES, AutomacError, ConfigError, ContractError, DataError, MotionGrade

log = logging.getLogger("automac")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_CONTRACT = 0, 1, 2, 3, 4
SCORE_HEADER = ("id", "grade", "mogras_nomo", "mogras_sumo", "mogras_semo")


def _config(args) -> RunConfig:
    overrides = {"seed": args.seed}
    if getattr(args, "out", None):
        overrides["output.root"] = str(Path(args.out).resolve())
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_phantoms(args) -> int:
    """Write clean phantom source slices plus their manifest."""
    from automac.ingestion import ManifestEntry, write_image, write_manifest

    out = Path(args.out)
    entries = []
    for rec in make_sources(args.n, args.size, seed=args.seed or 0):
        rel = f"{rec.id}.amac"
        write_image(out / rel, rec.pixels)
        entries.append(ManifestEntry(rel, rec.contrast, rec.orientation, rec.grade, rec.provenance))
    write_manifest(entries, out / "manifest.csv")
    print(out / "manifest.csv")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if not cfg.data.sources:
        raise ConfigError("data.sources (manifest of clean source slices) is not set")
    src = Path(cfg.data.sources)
    if not src.exists():
        raise DataError(f"source path not found: {src}")
    sources = load_manifest(src / "manifest.csv" if src.is_dir() else src).records()
    out = cfg.out_root / "data"
    manifest, _ = generate_dataset(
        sources,
        cfg.simulator.counts,
        cfg.thresholds(),
        seed=stage_seed(cfg.seed, "simulate"),
        out_dir=out,
        motion=cfg.motion(),
        severe_max=cfg.simulator.severe_max,
        noise_std=cfg.simulator.noise_std,
        image_format=cfg.simulator.image_format,
    )
    dump_config(cfg, out / "config.yaml")
    print(f"{len(manifest)} slices -> {out / 'manifest.csv'}")
    return EXIT_OK


def _splits(cfg: RunConfig):
    d = cfg.data
    if d.train and d.val:
        train, val = load_manifest(d.train).records(), load_manifest(d.val).records()
        test = load_manifest(d.test).records() if d.test else []
        return train, val, test
    manifest = d.manifest or str(cfg.out_root / "data" / "manifest.csv")
    return stratified_split(load_manifest(manifest).records(), cfg.split_spec())


def cmd_train(args) -> int:
    cfg = _config(args)
    arm_dir = cfg.out_root / args.arm
    stamp = arm_dir / "run_config.json"
    if stamp.is_file() and json.loads(stamp.read_text())["digest"] != cfg.digest():
        raise ConfigError(f"{arm_dir} holds a run with a different config; choose another --out")
    train, val, test = _splits(cfg)
    arm_dir.mkdir(parents=True, exist_ok=True)
    stamp.write_text(json.dumps({"digest": cfg.digest(), "config": cfg.to_dict()}, indent=2, sort_keys=True))
    (arm_dir / "split.json").write_text(
        json.dumps({k: [r.id for r in v] for k, v in zip(("train", "val", "test"), (train, val, test))}, indent=1)
    )
    train_arm(cfg, args.arm, train, val, arm_dir)
    print(f"arm {args.arm}: artifacts in {arm_dir}")
    return EXIT_OK


def load_arm(arm_dir: Path):
    if (arm_dir / "network.pt").is_file():
        encoder, head = load_network(arm_dir / "network.pt")
    else:
        encoder, _ = load_checkpoint(arm_dir / "encoder.pt")
        head = load_head(arm_dir / "head.pt")
    templates = load_templates(arm_dir / "templates.npz", encoder)
    return encoder, head, templates


def write_scores(path: Path, ids, preds, triples) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for i, p, t in zip(ids, preds, triples):
            w.writerow([i, p.grade.label, *(f"{t[g]:.4f}" for g in GRADES)])
    return path


def read_scores(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["grade"] = MotionGrade.parse(r["grade"])
        r["scores"] = [float(r[c]) for c in SCORE_HEADER[2:]]
    return rows


def cmd_score(args) -> int:
    cfg = _config(args)
    arm_dir = cfg.out_root / args.arm
    encoder, head, templates = load_arm(arm_dir)
    records = [r for m in args.inputs for r in load_manifest(m).records()]
    out = Path(args.output) if args.output else arm_dir / "scores.csv"
    if not records:
        log.warning("no input slices given; writing an empty score file")
    preds, triples, emb = score_and_grade_batch(records, encoder, templates, head)
    write_scores(out, [r.id for r in records], preds, triples)
    np.save(out.with_name(out.stem + "_embeddings.npy"), emb)
    print(f"{len(records)} records -> {out}")
    return EXIT_OK


def _truths(manifests: Sequence[str]) -> dict[str, MotionGrade]:
    truths = {}
    for m in manifests:
        for e in load_manifest(m, check_files=False).entries:
            if e.grade is None:
                raise DataError(f"{m}: row {e.image_path} has no ground-truth grade")
            truths[e.image_path] = e.grade
    return truths


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    truths = _truths(args.truths)
    out = Path(args.report_dir) if args.report_dir else cfg.out_root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    for spec in args.predictions:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).parent.name
        rows = read_scores(path)
        missing = [r["id"] for r in rows if r["id"] not in truths]
        if missing or not rows:
            raise DataError(f"{path}: {len(missing)} predictions have no truth (first: {missing[:1]})"
                            if missing else f"{path}: no predictions")
        t = [truths[r["id"]] for r in rows]
        p = [r["grade"] for r in rows]
        scores = np.array([r["scores"] for r in rows])
        emb_path = Path(path).with_name(Path(path).stem + "_embeddings.npy")
        emb = np.load(emb_path) if emb_path.is_file() else None
        have_all = len(set(t)) == 3
        report = ev.evaluate(p, t, scores if have_all else None, emb if have_all else None,
                             config=echo(cfg, cfg.seed, name), name=name)
        report.write(out / f"report_{name}.json")
        table[ARM_LABELS.get(name, name)] = report.metrics
        if cfg.evaluation.figures:
            ev.plot_confusion(report.confusion, out / f"confusion_{name}.png", ARM_LABELS.get(name, name))
            if have_all:
                ev.plot_distributions(scores, t, out / f"mogras_{name}.png")
            if emb is not None and cfg.evaluation.tsne and len(emb) >= 5:
                coords = ev.project_2d(emb, seed=stage_seed(cfg.seed, "tsne"))
                ev.plot_projection(coords, t, out / f"tsne_{name}.png", ARM_LABELS.get(name, name))
    text = ev.format_table(table)
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    """Synthetic three-arm comparison over several seeds, with a summary table."""
    cfg = _config(args)
    summary = {}
    for seed in args.seeds:
        outcomes = run_seed(cfg, seed, cfg.out_root / f"seed_{seed}", arms=args.arms)
        summary[seed] = {arm: o.report.to_dict() for arm, o in outcomes.items()}
        print(f"seed {seed}")
        print(ev.format_table({ARM_LABELS[a]: o.report.metrics for a, o in outcomes.items()}), end="")
    (cfg.out_root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="automac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, arm=False):
        sp.add_argument("--config", type=Path, help="YAML/JSON run config")
        sp.add_argument("--seed", type=int, help="top-level seed (overrides config)")
        sp.add_argument("--out", type=Path, help="output root (overrides output.root)")
        if arm:
            sp.add_argument("--arm", choices=ARMS, default="proposed")
        return sp

    ph = sub.add_parser("phantoms", help="write clean phantom source slices")
    ph.add_argument("--out", type=Path, required=True)
    ph.add_argument("--n", type=int, default=24)
    ph.add_argument("--size", type=int, default=96)
    ph.add_argument("--seed", type=int, default=0)
    ph.set_defaults(func=cmd_phantoms)

    common(sub.add_parser("simulate", help="generate a labelled synthetic dataset")).set_defaults(func=cmd_simulate)
    common(sub.add_parser("train", help="train one comparison arm"), arm=True).set_defaults(func=cmd_train)

    sc = common(sub.add_parser("score", help="grade slices and emit affinity scores"), arm=True)
    sc.add_argument("inputs", nargs="*", help="manifest file(s) listing slices to score")
    sc.add_argument("--output", type=Path, help="score file (default <out>/<arm>/scores.csv)")
    sc.set_defaults(func=cmd_score)

    evp = common(sub.add_parser("evaluate", help="metrics, score distributions and figures"))
    evp.add_argument("--predictions", nargs="+", required=True, metavar="[NAME=]PATH")
    evp.add_argument("--truths", nargs="+", required=True, metavar="MANIFEST")
    evp.add_argument("--report-dir", type=Path)
    evp.set_defaults(func=cmd_evaluate)

    rp = common(sub.add_parser("reproduce", help="full synthetic three-arm comparison"))
    rp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    rp.add_argument("--arms", nargs="+", choices=ARMS, default=list(ARMS))
    rp.set_defaults(func=cmd_reproduce)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except AutomacError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
