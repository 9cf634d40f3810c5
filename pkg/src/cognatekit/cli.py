"""Command-line entry points.

Subcommands: build-dataset, train-morph, train-detector, ablate, selfcheck.
Every run writes a plain-text config snapshot plus a content hash into the
output directory so it can be replayed exactly.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from . import data as dat
from . import detector as det
from . import evaluation as ev
from . import morphology as morph
from . import numerics as nm
from . import pipeline as pipe
from .encoder import CharVocab, EncoderConfig, init_encoder_params
from .numerics import CheckpointError, NumericError, Rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config io

def parse_config_file(path) -> dict[str, str]:
    """Plain UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return values


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(type(like[0])(p) if like else p for p in parts) if like \
            else tuple(parts)
    if isinstance(like, dict):
        out = {}
        for item in raw.split(","):
            item = item.strip()
            if not item:
                continue
            src, dst = item.split(":")
            out[src.strip()] = dst.strip()
        return out
    return raw


def apply_overrides(cfg, values: dict[str, str], prefix: str):
    """Fill dataclass ``cfg`` from config-file keys like ``prefix.field``."""
    out = cfg
    for f in fields(cfg):
        key = f"{prefix}.{f.name}"
        if key in values:
            current = getattr(cfg, f.name)
            try:
                out = replace(out, **{f.name: _coerce(values[key], current)})
            except (ValueError, TypeError) as e:
                raise ConfigError(f"bad value for {key}: {e}") from e
    return out


def snapshot_config(out_dir, sections: dict[str, dict]) -> str:
    """Write run_config.txt + its sha256; returns the hash."""
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"# cognatekit {__version__} run configuration"]
    for prefix, kv in sections.items():
        for key in sorted(kv):
            lines.append(f"{prefix}.{key} = {kv[key]}")
    text = "\n".join(lines) + "\n"
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    with open(os.path.join(out_dir, "run_config.txt"), "w", encoding="utf-8") as f:
        f.write(text)
        f.write(f"# config_hash = {digest}\n")
    return digest


def _flat(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in asdict(cfg).items()}


# ---------------------------------------------------------------- commands

def _build_spec(values: dict[str, str]) -> dat.SyntheticSpec:
    return apply_overrides(dat.SyntheticSpec(), values, "synthetic")


def cmd_build_dataset(args) -> int:
    if not args.cognates and not args.synthetic:
        raise ConfigError("one of --cognates or --synthetic is required")
    os.makedirs(args.out, exist_ok=True)
    if args.synthetic:
        values = parse_config_file(args.synthetic)
        spec = _build_spec(values)
        if args.neg_ratio is not None:
            # cognate_ratio follows from negatives-per-positive
            spec = replace(spec, cognate_ratio=1.0 / (1.0 + args.neg_ratio))
        dataset, morph_pairs = dat.gen_synthetic(spec, Rng(args.seed))
        with open(os.path.join(args.out, "morph.tsv"), "w", encoding="utf-8") as f:
            for mp in morph_pairs:
                f.write(f"{mp.word1}\t{mp.word2}\n")
        section = {"synthetic": _flat(spec)}
    else:
        dataset = dat.load_cognates(args.cognates)
        if args.neg_ratio is not None:
            positives = [p for p in dataset.pairs if p.label == 1]
            negatives = dat.build_negatives(positives, args.neg_ratio, Rng(args.seed))
            dataset = dat.CognateDataset(pairs=positives + negatives,
                                         language_pair=dataset.language_pair,
                                         source=dataset.source)
        section = {"cognates": {"path": args.cognates}}
    pairs_path = os.path.join(args.out, "pairs.tsv")
    dat.save_cognates(dataset, pairs_path)
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(dataset.manifest(), f, indent=2)
    digest = snapshot_config(args.out, {**section, "run": {"seed": args.seed}})
    print(f"wrote {pairs_path} ({len(dataset.pairs)} pairs), config {digest[:12]}")
    return EXIT_OK


def _encoder_config(values: dict[str, str]) -> EncoderConfig:
    return apply_overrides(EncoderConfig(), values, "encoder")


def cmd_train_morph(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    enc_cfg = _encoder_config(values)
    mcfg = apply_overrides(morph.MorphTrainConfig(), values, "morph")
    if args.lr is not None:
        mcfg = replace(mcfg, lr=args.lr)
    if args.epochs is not None:
        mcfg = replace(mcfg, epochs=args.epochs)
    mcfg = replace(mcfg, seed=args.seed)

    pairs, parse_report = dat.load_unimorph(args.unimorph)
    if not pairs:
        raise dat.DataError(f"no usable morphology pairs in {args.unimorph}")
    print(f"loaded {parse_report.kept} pairs"
          f" ({parse_report.skipped} skipped, {parse_report.deduplicated} deduplicated)")
    if args.resample:
        pairs = dat.morph_resample(pairs, args.resample / 100.0, Rng(args.seed))
    vocab = pipe.build_vocab(None, pairs)

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    digest = snapshot_config(out_dir, {"encoder": _flat(enc_cfg),
                                       "morph": _flat(mcfg),
                                       "run": {"seed": args.seed,
                                               "unimorph": args.unimorph,
                                               "resample": args.resample}})
    log_path = args.out + ".log.jsonl"
    enc_params = init_encoder_params(len(vocab), enc_cfg, Rng(args.seed))
    with open(log_path, "w", encoding="utf-8") as log:
        result = morph.train_morphology(pairs, enc_params, vocab, enc_cfg, mcfg,
                                        log_stream=log)
    morph.export_encoder(result.params, args.out)
    vocab.save(args.out + ".vocab")
    print(f"wrote {args.out} (best epoch {result.best_epoch}), config {digest[:12]}")
    return EXIT_OK


def _load_dataset(path) -> dat.CognateDataset:
    manifest = os.path.join(os.path.dirname(os.path.abspath(path)), "manifest.json")
    return dat.load_cognates(path, manifest_path=manifest if os.path.exists(manifest) else None)


def cmd_train_detector(args) -> int:
    if args.mode == "weakly" and not args.init:
        raise ConfigError("mode=weakly requires --init (morphological knowledge)")
    values = parse_config_file(args.config) if args.config else {}
    enc_cfg = _encoder_config(values)
    dcfg = apply_overrides(det.DetectorConfig(), values, "detector")
    mcfg = apply_overrides(morph.MorphTrainConfig(), values, "morph")
    cfg = pipe.ExperimentConfig(encoder=enc_cfg, detector=dcfg,
                                morphology=mcfg, folds=args.folds)

    dataset = _load_dataset(args.data)
    init_encoder = None
    vocab = None
    if args.init:
        init_encoder = morph.import_encoder(args.init, enc_cfg)
        vocab_path = args.init + ".vocab"
        if os.path.exists(vocab_path):
            vocab = CharVocab.load(vocab_path)

    os.makedirs(args.out, exist_ok=True)
    digest = snapshot_config(args.out, {"encoder": _flat(enc_cfg),
                                        "detector": _flat(dcfg),
                                        "run": {"mode": args.mode,
                                                "data": args.data,
                                                "init": args.init or "",
                                                "folds": args.folds,
                                                "seed": args.seed}})
    report = pipe.run_experiment(dataset, args.mode, cfg, args.seed,
                                 vocab=vocab, init_encoder=init_encoder)
    report.config_hash = digest
    report_path = os.path.join(args.out, f"report_{args.mode}_seed{args.seed}.json")
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    print(ev.format_table({args.mode: {"mean F": report.mean_f}}, ["mean F"]))
    print(f"wrote {report_path}, config {digest[:12]}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    enc_cfg = _encoder_config(values)
    dcfg = apply_overrides(det.DetectorConfig(), values, "detector")
    mcfg = apply_overrides(morph.MorphTrainConfig(), values, "morph")
    cfg = pipe.ExperimentConfig(encoder=enc_cfg, detector=dcfg,
                                morphology=mcfg, folds=args.folds)

    dataset = _load_dataset(args.data)
    base_pairs, _report = dat.load_unimorph(args.unimorph)
    if not base_pairs:
        raise dat.DataError(f"no usable morphology pairs in {args.unimorph}")

    grid = list(range(args.grid_lo, args.grid_hi + 1, args.grid_step))
    os.makedirs(args.out, exist_ok=True)
    digest = snapshot_config(args.out, {"encoder": _flat(enc_cfg),
                                        "detector": _flat(dcfg),
                                        "morph": _flat(mcfg),
                                        "run": {"grid": grid, "seed": args.seed,
                                                "data": args.data,
                                                "unimorph": args.unimorph}})
    rows: dict[str, dict[str, float]] = {}
    for pct in grid:
        # same seed at every grid point: only the data size varies
        pairs = dat.morph_resample(base_pairs, pct / 100.0, Rng(args.seed))
        report = pipe.run_experiment(dataset, "weakly", cfg, args.seed,
                                     morph_pairs=pairs,
                                     eval_folds=list(range(args.folds))[:args.eval_folds])
        rows[f"{pct:+d}%"] = {"pairs": float(len(pairs)), "mean F": report.mean_f}
    table = ev.format_table(rows, ["pairs", "mean F"])
    table_path = os.path.join(args.out, "ablation.txt")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(table + "\n")
    print(table)
    print(f"wrote {table_path}, config {digest[:12]}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    print(f"cognatekit {__version__}; checkpoint format "
          f"{nm.CHECKPOINT_MAGIC.decode()} v{nm.CHECKPOINT_VERSION}")
    rng = Rng(0)
    broken = os.environ.get("COGNATEKIT_SELFCHECK_BREAK", "") == "1"

    # gradient check on a tiny composed graph
    w = nm.tensor(rng.normal(0, 1, (4, 3)), requires_grad=True, dtype=np.float64)
    x = nm.tensor(rng.normal(0, 1, (5, 4)), dtype=np.float64)

    def loss_fn():
        h = nm.tanh(nm.matmul(x, w))
        loss = det.loss_unsupervised(nm.softmax_rows(h))
        if broken:
            # test hook: scale depends on w through untracked numpy, so the
            # analytic gradient misses it while finite differences see it
            loss = nm.mul(loss, nm.tensor(1.0 + float(np.abs(w.data).mean()),
                                          dtype=np.float64))
        return loss

    err = nm.grad_check(loss_fn, [w])
    ok = err < 1e-3
    print(f"gradient check: max rel err {err:.2e} -> {'ok' if ok else 'FAIL'}")

    # distribution invariants
    dist_ok = True
    for _ in range(100):
        z = rng.normal(0, 1, (8, 3))
        c = rng.normal(0, 1, (2, 3))
        q = det.soft_assign_np(z, c)
        t = det.target_distribution(q)
        if not (np.allclose(q.sum(1), 1, atol=1e-6) and np.allclose(t.sum(1), 1, atol=1e-6)):
            dist_ok = False
    p = nm.tensor(np.array([[0.3, 0.7]], dtype=np.float32))
    kl_zero = abs(float(nm.kl_div(p, p).data)) < 1e-9
    print(f"distribution invariants: {'ok' if dist_ok else 'FAIL'};"
          f" KL(P,P)=0: {'ok' if kl_zero else 'FAIL'}")

    # checkpoint round trip
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ck.wscd")
        arrays = {"encoder/x": rng.normal(0, 1, (3, 2))}
        nm.save_checkpoint(path, arrays)
        back = nm.load_checkpoint(path)
        ck_ok = np.array_equal(arrays["encoder/x"], back["encoder/x"])
    print(f"checkpoint round-trip: {'ok' if ck_ok else 'FAIL'}")

    return EXIT_OK if (ok and dist_ok and kl_zero and ck_ok) else EXIT_NUMERIC


# ---------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cognatekit",
                                 description="trainable cognate detection toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", help="assemble a cognate dataset")
    b.add_argument("--cognates", help="word1<TAB>word2<TAB>label TSV")
    b.add_argument("--synthetic", help="synthetic corpus spec (key = value file)")
    b.add_argument("--neg-ratio", type=float, default=None,
                   help="negatives per positive")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(run=cmd_build_dataset)

    m = sub.add_parser("train-morph", help="morphology pretraining")
    m.add_argument("--unimorph", required=True, help="lemma<TAB>inflected TSV")
    m.add_argument("--config", help="key = value hyperparameter file")
    m.add_argument("--lr", type=float, default=None)
    m.add_argument("--epochs", type=int, default=None)
    m.add_argument("--resample", type=int, default=0,
                   help="percent data resize, e.g. +30 or -30")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, help="encoder checkpoint path")
    m.set_defaults(run=cmd_train_morph)

    t = sub.add_parser("train-detector", help="train + cross-validate a detector")
    t.add_argument("--mode", required=True,
                   choices=["supervised", "weakly", "unsupervised", "baseline"])
    t.add_argument("--data", required=True, help="pairs TSV")
    t.add_argument("--init", help="encoder checkpoint (required for weakly)")
    t.add_argument("--config", help="key = value hyperparameter file")
    t.add_argument("--folds", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(run=cmd_train_detector)

    a = sub.add_parser("ablate", help="morphology data-size ablation sweep")
    a.add_argument("--data", required=True)
    a.add_argument("--unimorph", required=True)
    a.add_argument("--config", help="key = value hyperparameter file")
    a.add_argument("--grid-lo", type=int, default=-30)
    a.add_argument("--grid-hi", type=int, default=30)
    a.add_argument("--grid-step", type=int, default=15)
    a.add_argument("--folds", type=int, default=5)
    a.add_argument("--eval-folds", type=int, default=1,
                   help="number of CV folds to score per grid point")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(run=cmd_ablate)

    s = sub.add_parser("selfcheck", help="gradient + invariant self-test")
    s.set_defaults(run=cmd_selfcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad flags, which matches our config-error code
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.run(args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (dat.DataError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
