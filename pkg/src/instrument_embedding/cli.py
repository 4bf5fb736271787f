"""Command line entry point: ``instrument-embedding <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import Manifest, ToyCorpusSpec, synth_toy_corpus
from .frontend import filter_table, init_filterbank
from .probing import default_tasks, pca_projection, run_probes
from .training import (ModelCheckpoint, TrainConfig, extract_embeddings, parse_config_text,
                       seed_for_run, train)
from .verification import (ScoreSet, TrialSet, build_trials, compute_eer,
                           pairwise_significance, score_trials)

logger = logging.getLogger("instrument_embedding")


def _write_csv(path, header, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _embed_split(ckpt_path, manifest_path, split):
    ckpt = ModelCheckpoint.load(ckpt_path)
    manifest = Manifest.load(manifest_path)
    if split != "all":
        manifest = manifest.split(split)
    samples = manifest.load_samples()
    emb = extract_embeddings(ckpt.build_model(), [s.wave for s in samples])
    return ckpt, samples, emb


def cmd_synth_data(args):
    spec = ToyCorpusSpec(n_train_instruments=args.train_instruments,
                         n_unseen_instruments=args.unseen, n_families=args.families,
                         notes_per_train_instrument=args.notes,
                         notes_per_unseen_instrument=args.unseen_notes, seed=args.seed)
    manifest = synth_toy_corpus(args.out, spec)
    print(f"{len(manifest)} notes -> {Path(args.out) / 'manifest.jsonl'}")
    print(f"manifest sha256 {manifest.content_hash()}")


def cmd_train(args):
    cfg = parse_config_text(Path(args.config).read_text()) if args.config else TrainConfig()
    if args.name:
        cfg.name = args.name
    seed = args.seed if args.seed is not None else seed_for_run(args.seed_run)
    manifest = Manifest.load(args.manifest)
    ckpt = train(cfg, manifest, seed=seed)
    out = Path(args.runs_dir) / cfg.name / f"seed{args.seed_run}"
    path = ckpt.save(out / "model.ckpt")
    (out / "train_log.json").write_text(json.dumps(ckpt.log, indent=1, default=float))
    print(f"checkpoint {path} sha256 {ckpt.content_hash()}")
    for row in cfg.ablation_rows():
        print(f"config reproduces {row}")


def cmd_embed(args):
    _, samples, emb = _embed_split(args.checkpoint, args.manifest, args.split)
    _write_csv(args.out, ["sample_id"] + [f"e{i}" for i in range(emb.shape[1])],
               [[s.sample_id] + [f"{v:.8g}" for v in e] for s, e in zip(samples, emb)])


def cmd_trials(args):
    manifest = Manifest.load(args.manifest, check_files=False).split(args.split)
    trials = build_trials([r.sample_id for r in manifest.records],
                          [r.instrument for r in manifest.records], args.seed)
    rows = trials.to_rows()
    _write_csv(args.out, ["kind", "trial_id", "model", "sample_id", "is_target"],
               [[r[k] for k in ("kind", "trial_id", "model", "sample_id", "is_target")]
                for r in rows])
    logger.info("%d target / %d non-target trials", trials.n_target, trials.n_nontarget)


def cmd_score(args):
    _, samples, emb = _embed_split(args.checkpoint, args.manifest, args.split)
    trials = TrialSet.from_rows(_read_csv(args.trials))
    _, rows = score_trials(trials, {s.sample_id: e for s, e in zip(samples, emb)})
    _write_csv(args.out, ["trial_id", "is_target", "score"],
               [[r.trial_id, int(r.is_target), f"{r.score:.10f}"] for r in rows])


def _load_scores(path) -> ScoreSet:
    rows = _read_csv(path)
    return ScoreSet.from_labels([float(r["score"]) for r in rows],
                                [bool(int(r["is_target"])) for r in rows])


def cmd_eer(args):
    res = compute_eer(_load_scores(args.scores))
    print(f"eer_rocch {res.eer:.6f}")
    print(f"eer_interpolated {res.eer_interpolated:.6f}")
    print(f"threshold {res.threshold:.6f}")
    print(f"n_target {res.n_target} n_nontarget {res.n_nontarget}")


def cmd_sigtest(args):
    systems = {}
    for i, path in enumerate(args.systems.split(",")):
        res = compute_eer(_load_scores(path))
        name = path if path not in systems else f"{path}#{i + 1}"
        systems[name] = (res.eer, res.n_target, res.n_nontarget)
    pairs = pairwise_significance(systems, args.alpha)
    _write_csv(args.out, ["pair", "z", "p", "reject"],
               [[f"{p.system_a}|{p.system_b}", f"{p.z:.6f}", f"{p.p:.6g}", int(p.reject)]
                for p in pairs])


def cmd_probe(args):
    _, samples, emb = _embed_split(args.checkpoint, args.manifest, args.split)
    table = {k: [getattr(s, k) for s in samples]
             for k in ("family", "source", "pitch", "velocity", "style")}
    tasks = default_tasks(table, tuple(args.tasks.split(",")))
    report = run_probes(emb, table, tasks, seed=args.seed)
    report.to_csv(args.out)
    for r in report.results:
        print(f"{r.task:24s} {r.classifier:4s} micro {r.micro_f1:.3f} macro {r.macro_f1:.3f} "
              f"I_micro {r.improvement_micro:+.3f}")


def cmd_project(args):
    if args.filters:
        if args.checkpoint:
            ckpt = ModelCheckpoint.load(args.checkpoint)
            params = ckpt.build_model().frontend.to_params()
        else:
            params = init_filterbank(args.init)
        _write_csv(args.out, ["channel", "f1_Hz", "f2_Hz"],
                   [[c, f"{a:.4f}", f"{b:.4f}"] for c, a, b in filter_table(params)])
        return
    if not (args.checkpoint and args.manifest):
        raise SystemExit("project --dims needs --checkpoint and --manifest")
    _, samples, emb = _embed_split(args.checkpoint, args.manifest, args.split)
    xy = pca_projection(emb, args.dims)
    _write_csv(args.out, ["sample_id"] + ["x", "y", "z"][:args.dims] + ["family"],
               [[s.sample_id] + [f"{v:.6f}" for v in p] + [s.family]
                for s, p in zip(samples, xy)])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="instrument-embedding", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write the seeded toy instrument corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-instruments", type=int, default=16)
    s.add_argument("--unseen", type=int, default=6)
    s.add_argument("--families", type=int, default=4)
    s.add_argument("--notes", type=int, default=100, help="notes per training instrument")
    s.add_argument("--unseen-notes", type=int, default=60)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train one seeded run")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed-run", type=int, default=1, help="k; the seed is 10**(k+1)")
    s.add_argument("--seed", type=int, help="explicit seed overriding --seed-run")
    s.add_argument("--name")
    s.add_argument("--runs-dir", default="runs")
    s.set_defaults(func=cmd_train)

    def with_model(s, split="test"):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--manifest", required=True)
        s.add_argument("--split", default=split)
        s.add_argument("--out")

    s = sub.add_parser("embed", help="export embeddings as CSV")
    with_model(s)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("trials", help="build enrollment/trial lists for the test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_trials)

    s = sub.add_parser("score", help="cosine-score a trial list")
    with_model(s)
    s.add_argument("--trials", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eer", help="EER of a score file")
    s.add_argument("--scores", required=True)
    s.set_defaults(func=cmd_eer)

    s = sub.add_parser("sigtest", help="pairwise z-tests with Holm correction")
    s.add_argument("--systems", required=True, help="comma-separated score files")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sigtest)

    s = sub.add_parser("probe", help="shallow-classifier probing report")
    with_model(s)
    s.add_argument("--tasks", default="family,source,pitch,velocity,style")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("project", help="filter cutoffs or PCA projection as CSV")
    s.add_argument("--filters", action="store_true")
    s.add_argument("--init", default="cqt122")
    s.add_argument("--dims", type=int, default=2, choices=(2, 3))
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--split", default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_project)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)


if __name__ == "__main__":
    main()
