"""Command-line front end: ``gharm gen-data | train | eval | diagnose | audit``.

Every command is a pure function of its config and input files, and every
output location receives a verbatim copy of the config that produced it.
Log verbosity is read from ``GHARM_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate as E
from . import model as M
from . import synth
from . import trainer as T
from .config import ExperimentConfig, load_config
from .errors import (CheckpointError, ConfigError, DimensionError, DivergenceError, EvalError,
                     FormatError, ManifestError, SplitError)
from .seeding import derive_rng, derive_seed

log = logging.getLogger("gradharmony")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIMENSION = 4
EXIT_DIVERGENCE = 5
EXIT_CHECKPOINT = 6
EXIT_EVAL = 7

# checked in order, so subclasses go first
_EXIT_CODES = [
    (DivergenceError, EXIT_DIVERGENCE),
    (CheckpointError, EXIT_CHECKPOINT),
    ((DimensionError, ManifestError), EXIT_DIMENSION),
    ((EvalError, SplitError), EXIT_EVAL),
    (ConfigError, EXIT_CONFIG),
    ((FormatError, OSError), EXIT_IO),
]

CONFIG_COPY = "config.txt"


def blob_sha1(data: bytes) -> str:
    """Content hash in the same form git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_config_copy(cfg: ExperimentConfig, directory: Path) -> None:
    (directory / CONFIG_COPY).write_text(cfg.text)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _splits(cfg: ExperimentConfig, data):
    frac = cfg["eval_fraction"]
    return synth.split(data, (1 - frac, frac), seed=derive_seed(cfg["seed"], "split"))


def _load_data(cfg: ExperimentConfig, path):
    data = synth.load_dataset(path)
    d = cfg.dims
    got = data[0].video_raw.size, data[0].audio_raw.size, data[0].text_raw.size
    if got != (d.dim_video, d.dim_audio, d.dim_text):
        raise DimensionError(f"dataset raw dims {got} do not match configured "
                             f"{(d.dim_video, d.dim_audio, d.dim_text)}")
    return data


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    data = synth.generate(cfg.synth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synth.save_dataset(data, out)
    out.with_name(out.name + "." + CONFIG_COPY).write_text(cfg.text)
    if args.csv:
        synth.export_csv(data, args.csv)
    text_mis = sum(not t.text_aligned for t in data) / len(data)
    audio_mis = sum(not t.audio_aligned for t in data) / len(data)
    print(f"samples={len(data)} text_misaligned={text_mis:.4f} audio_misaligned={audio_mis:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_bytes = Path(args.data).read_bytes()
    data = _load_data(cfg, args.data)
    train_set, _ = _splits(cfg, data)
    out = _out_dir(args.out)
    _write_config_copy(cfg, out)
    tcfg = cfg.train
    every = cfg["checkpoint_every"]

    def hook(info):
        step = info["step"]
        # params in the hook are pre-update; snapshot them at the start of step `every * n`
        if every and step and step % every == 0:
            M.save_checkpoint(info["params"], out / f"checkpoint_{step:06d}.bin")

    params = M.init_params(derive_seed(cfg["seed"], "init"), cfg.dims)
    params, records = T.train(params, train_set, tcfg, on_step=hook if every else None)
    M.save_checkpoint(params, out / "checkpoint.bin")
    T.write_step_log(records, out / "steps.jsonl")
    manifest = {
        "config": cfg.text,
        "inputs": {"config": blob_sha1(cfg.text.encode()), "data": blob_sha1(data_bytes)},
        "outputs": {"checkpoint": blob_sha1((out / "checkpoint.bin").read_bytes()),
                    "steps": blob_sha1((out / "steps.jsonl").read_bytes())},
        "n_train": len(train_set),
        "steps": len(records),
        "dropped_steps": sum(r.action == "drop" for r in records),
    }
    E.write_json(manifest, out / "manifest.json")
    print(f"trained {len(records)} steps on {len(train_set)} triplets -> {out}")
    return EXIT_OK


def _load_model(cfg: ExperimentConfig, path) -> M.ModelParams:
    return M.load_checkpoint(path, expected_dims=cfg.dims)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params = _load_model(cfg, args.checkpoint)
    _, clean = _splits(cfg, _load_data(cfg, args.data))
    report = E.retrieval_eval(params, clean, ks=cfg["retrieval_ks"], reverse=args.reverse)
    out = _out_dir(args.out)
    _write_config_copy(cfg, out)
    E.write_json(report.to_dict(), out / "metrics.json")
    E.write_embeddings_csv(params, clean, out / "embeddings.csv")
    recalls = " ".join(f"R@{k}={v:.4f}" for k, v in sorted(report.recall_at_k.items()))
    print(f"{report.direction} candidates={report.n_candidates} "
          f"median_rank={report.median_rank:g} {recalls}")
    return EXIT_OK


def probe_split(cfg: ExperimentConfig, train_set):
    """Hold a seeded subset of the training split out as the probe set."""
    n_probe = cfg["probe_size"]
    if not 2 <= n_probe <= len(train_set):
        raise ConfigError(f"probe_size={n_probe} must lie in [2, {len(train_set)}]")
    order = derive_rng(cfg["seed"], "probe").permutation(len(train_set))
    probe = [train_set[i] for i in np.sort(order[:n_probe])]
    rest = [train_set[i] for i in np.sort(order[n_probe:])]
    return rest, probe


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    params = _load_model(cfg, args.checkpoint)
    train_set, _ = _splits(cfg, _load_data(cfg, args.data))
    rest, probe = probe_split(cfg, train_set)
    samples, _, records = T.conflict_trace(params, rest, probe, cfg.train, cfg["probe_steps"])
    out = _out_dir(args.out)
    _write_config_copy(cfg, out)
    E.write_trace_csv(samples, out / "conflict.csv")
    report = E.separation(samples)
    top, bottom = E.extreme_ids(samples, 0.05)
    cos = np.array([s.cos for s in samples])
    doc = dict(report.to_dict(), negative_fraction=float(np.mean(cos < 0)),
               n_probe=len(samples), probe_steps=len(records), top_5pct_ids=top,
               bottom_5pct_ids=bottom)
    E.write_json(doc, out / "separation.json")
    if records:
        T.write_step_log(records, out / "steps.jsonl")
        E.histogram(records, cfg["n_step_bins"], cfg["n_cos_bins"]).to_csv(out / "histogram.csv")
    else:
        log.warning("probe_steps=0: no step records, histogram skipped")
    print(f"auc={report.auc:.4f} mean_cos_aligned={report.mean_cos_aligned:.4f} "
          f"mean_cos_misaligned={report.mean_cos_misaligned:.4f}")
    return EXIT_OK


def cmd_audit(args) -> int:
    """Recheck every logged action against its logged cos and gamma."""
    cfg = load_config(args.config)
    if cfg["granularity"] != "microbatch":
        # per-sample records hold aggregated actions, not one decision per logged cos
        raise ConfigError("audit only applies to microbatch-granularity logs")
    records = T.read_step_log(args.log)
    bad = T.audit_records(records, cfg["mode"])
    for step in bad:
        print(f"step {step}: action inconsistent with cos and gamma")
    print(f"audited {len(records)} records, {len(bad)} inconsistent")
    return EXIT_OK if not bad else 1


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gharm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic triplet dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--csv", help="optional CSV export of the dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model under the configured mode")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot retrieval on the clean eval split")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--reverse", action="store_true", help="text-to-video instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="per-sample gradient agreement on a probe set")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("audit", help="check a step log against the harmonizer rules")
    p.add_argument("--config", required=True)
    p.add_argument("--log", required=True, help="steps.jsonl from a train run")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GHARM_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        for kinds, code in _EXIT_CODES:
            if isinstance(exc, kinds):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
