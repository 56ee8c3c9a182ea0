"""Command-line interface: synth, train, extract, probe, ablate, report.

Config values resolve in three layers: built-in defaults, then a JSON config
file (--config), then individual flags. The effective config is echoed and
written next to each run's outputs.

Exit codes: 0 success, 2 configuration problems, 3 missing or corrupt data,
4 numeric failure during training, 1 anything else.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import downstream, synthdata, training
from .errors import ConfigurationError, DataError, SsvganError
from .models import extract_features, load_checkpoint
from .synthdata import DataConfig, DatasetManifest
from .training import TrainConfig

FAMILY_ORDER = ("rotation", "translation", "shear", "temporal")
_TOKENS = {
    "rotation": ("Rotate", "Rotation"),
    "translation": ("Translate", "Translation"),
    "shear": ("Shear", "Shearing"),
    "temporal": ("Temporal",),
}
CANONICAL_VARIANTS = ("GAN", "GAN+Rotation", "GAN+Spatial", "GAN+Temporal", "GAN+SpatioTemporal")


def canonical_variant_name(families) -> str:
    """The preferred display name for a set of transform families."""
    fams = frozenset(families)
    unknown = fams - set(FAMILY_ORDER)
    if unknown:
        raise ConfigurationError(f"unknown transform families: {sorted(unknown)}")
    if not fams:
        return "GAN"
    if fams == set(FAMILY_ORDER):
        return "GAN+SpatioTemporal"
    if fams == {"rotation", "translation", "shear"}:
        return "GAN+Spatial"
    if fams == {"rotation"}:
        return "GAN+Rotation"
    if fams == {"temporal"}:
        return "GAN+Temporal"
    return "GAN+" + "+".join(_TOKENS[f][0] for f in FAMILY_ORDER if f in fams)


def _alias_table() -> dict[str, frozenset]:
    table: dict[str, frozenset] = {"gan": frozenset()}
    for r in range(1, len(FAMILY_ORDER) + 1):
        for combo in itertools.combinations(FAMILY_ORDER, r):
            fams = frozenset(combo)
            table[canonical_variant_name(fams).casefold()] = fams
            for parts in itertools.product(*(_TOKENS[f] for f in combo)):
                table["gan+" + "+".join(parts).casefold()] = fams
    table["gan+spatial"] = frozenset({"rotation", "translation", "shear"})
    table["gan+spatiotemporal"] = frozenset(FAMILY_ORDER)
    return table


_ALIASES = _alias_table()


def parse_variant(name: str) -> frozenset:
    """Map a variant name (canonical or alias, case-insensitive) to its families."""
    key = name.strip().casefold()
    if key not in _ALIASES:
        raise ConfigurationError(
            f"unknown variant {name!r}; canonical names are {', '.join(CANONICAL_VARIANTS)} "
            f"and GAN+<Family>[+<Family>...] combinations"
        )
    return _ALIASES[key]


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return payload


def _section(payload: dict, name: str) -> dict:
    section = payload.get(name, {})
    if not isinstance(section, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    return section


def _build(cls, section: dict, overrides: dict, label: str):
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    valid = set(cls.__dataclass_fields__)
    unknown = set(merged) - valid
    if unknown:
        raise ConfigurationError(f"unknown {label} config keys: {sorted(unknown)}")
    return cls(**merged)


def _load_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    return DatasetManifest.load(path)


def ensure_dataset(config: DataConfig, data_dir) -> DatasetManifest:
    """Build the dataset unless a manifest with the same config already exists."""
    path = Path(data_dir) / "manifest.json"
    if path.exists():
        manifest = DatasetManifest.load(path)
        if asdict(manifest.config) == asdict(config):
            return manifest
    return synthdata.build_dataset(config, data_dir)


def _echo(label: str, payload: dict) -> None:
    print(f"{label}: {json.dumps(payload, sort_keys=True)}")


def _resolve_families(args, payload: dict) -> tuple[str, frozenset]:
    """Work out (display name, family set) from --variant / --families / config."""
    if getattr(args, "families", None):
        raw = [f.strip() for f in args.families.split(",") if f.strip()]
        fams = frozenset(raw)
        return canonical_variant_name(fams), fams
    name = getattr(args, "variant", None) or payload.get("variant") or "GAN+SpatioTemporal"
    return name, parse_variant(name)


def _train_config(args, payload: dict, families: frozenset) -> TrainConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
    }
    cfg = _build(TrainConfig, _section(payload, "train"), overrides, "train")
    cfg.families = tuple(f for f in FAMILY_ORDER if f in families)
    if not families:
        cfg.alpha = 0.0
        cfg.beta = 0.0
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    payload = _load_config_file(args.config)
    overrides = {"n_clips": args.clips, "seed": args.seed}
    cfg = _build(DataConfig, _section(payload, "data"), overrides, "data")
    cfg.validate()
    out = Path(args.out)
    _echo("data config", asdict(cfg))
    manifest = synthdata.build_dataset(cfg, out)
    counts = {s: len(manifest.split_entries(s)) for s in synthdata.SPLITS}
    print(f"wrote {cfg.n_clips} clips under {out} splits {json.dumps(counts, sort_keys=True)}")
    print(f"manifest: {out / 'manifest.json'}")
    return 0


def _run_dir(base, variant_name: str, seed: int) -> Path:
    return Path(base) / variant_name.replace("+", "_") / f"seed{seed}"


def cmd_train(args) -> int:
    payload = _load_config_file(args.config)
    name, families = _resolve_families(args, payload)
    cfg = _train_config(args, payload, families)
    manifest = _load_manifest(args.data)
    out_dir = Path(args.out) if args.out else _run_dir(payload.get("out", "out"), name, cfg.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = {"variant": name, **asdict(cfg), "families": list(cfg.families)}
    _echo("train config", effective)
    (out_dir / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True))
    result = training.train(manifest, cfg, out_dir, resume=args.resume)
    if result.metrics:
        last = result.metrics[-1]
        brief = {k: last[k] for k in ("epoch", "total_g", "total_d", "aux_accuracy")}
        _echo("final epoch", brief)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {out_dir / 'metrics.jsonl'}")
    return 0


def cmd_extract(args) -> int:
    manifest = _load_manifest(args.data)
    payload = load_checkpoint(args.checkpoint)
    splits = [s.strip() for s in args.split.split(",") if s.strip()]
    xs, ys = [], []
    for split in splits:
        clips, labels = synthdata.load_split(manifest, split)
        if len(clips):
            xs.append(extract_features(payload, clips))
            ys.append(labels)
    if not xs:
        raise ConfigurationError(f"splits {splits} contain no clips")
    features = np.concatenate(xs)
    labels = np.concatenate(ys)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent.parent / "features" / "labeled.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, features=features, labels=labels,
             checkpoint=str(args.checkpoint), splits=",".join(splits))
    print(f"features: {out} shape {features.shape}")
    return 0


def cmd_probe(args) -> int:
    payload = _load_config_file(args.config)
    probe_cfg = _build(downstream.ProbeConfig, _section(payload, "probe"), {}, "probe")
    seed = args.seed if args.seed is not None else 0
    if args.features:
        data = np.load(args.features)
        report = downstream.evaluate_features(data["features"], data["labels"],
                                              seed=seed, probe_config=probe_cfg)
        report.checkpoint = str(data["checkpoint"]) if "checkpoint" in data else None
        default_out = Path(args.features).parent.parent / "eval.json"
    elif args.checkpoint and args.data:
        manifest = _load_manifest(args.data)
        report = downstream.evaluate(args.checkpoint, manifest, seed=seed, probe_config=probe_cfg)
        default_out = Path(args.checkpoint).parent.parent / "eval.json"
    else:
        raise ConfigurationError("probe needs either --features or both --checkpoint and --data")
    out = Path(args.out) if args.out else default_out
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(f"top-1 {report.mean:.4f} +/- {report.std:.4f} over {report.k} folds")
    print(f"eval: {out}")
    return 0


def _aggregate_rows(rows: list[dict]) -> list[dict]:
    by_variant: dict[str, list[dict]] = {}
    for row in rows:
        if row.get("status") == "ok":
            by_variant.setdefault(row["variant"], []).append(row)
    summary = []
    for variant, group in by_variant.items():
        means = [r["mean"] for r in group]
        summary.append({
            "variant": variant,
            "seeds": sorted(r["seed"] for r in group),
            "mean": float(np.mean(means)),
            "std": float(np.std(means)),
        })
    summary.sort(key=lambda r: r["mean"], reverse=True)
    return summary


def _print_table(summary: list[dict]) -> None:
    width = max([len(s["variant"]) for s in summary] + [12])
    print(f"{'variant'.ljust(width)}  mean    std     seeds")
    for s in summary:
        seeds = ",".join(str(x) for x in s["seeds"])
        print(f"{s['variant'].ljust(width)}  {s['mean']:.4f}  {s['std']:.4f}  {seeds}")


def cmd_ablate(args) -> int:
    payload = _load_config_file(args.config)
    data_cfg = _build(DataConfig, _section(payload, "data"), {}, "data")
    variants = ([v.strip() for v in args.variants.split(",") if v.strip()]
                if args.variants else payload.get("variants", list(CANONICAL_VARIANTS)))
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else payload.get("seeds", [0]))
    base_out = Path(args.out or payload.get("out", "out"))
    base_out.mkdir(parents=True, exist_ok=True)
    probe_cfg = _build(downstream.ProbeConfig, _section(payload, "probe"), {}, "probe")

    data_dir = Path(args.data) if args.data else base_out / "data"
    manifest = ensure_dataset(data_cfg, data_dir)
    print(f"dataset: {data_dir} ({data_cfg.n_clips} clips)")

    rows = []
    failures = 0
    for name in variants:
        for seed in seeds:
            run_dir = _run_dir(base_out, name, seed)
            try:
                families = parse_variant(name)
                cfg = _train_config(argparse.Namespace(seed=seed, epochs=args.epochs,
                                                       batch_size=args.batch_size),
                                    payload, families)
                run_dir.mkdir(parents=True, exist_ok=True)
                effective = {"variant": name, **asdict(cfg), "families": list(cfg.families)}
                (run_dir / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True))
                final = run_dir / "checkpoints" / f"epoch_{cfg.epochs:04d}.pt"
                if not final.exists():
                    result = training.train(manifest, cfg, run_dir)
                    final = result.checkpoint_path
                report = downstream.evaluate(final, manifest, seed=seed, probe_config=probe_cfg)
                report.save(run_dir / "eval.json")
                row = {"variant": name, "families": sorted(families), "seed": seed,
                       "epochs": cfg.epochs, "mean": report.mean, "std": report.std,
                       "fold_accuracies": report.fold_accuracies, "status": "ok"}
                print(f"{name} seed {seed}: top-1 {report.mean:.4f} +/- {report.std:.4f}")
            except SsvganError as exc:
                failures += 1
                row = {"variant": name, "seed": seed, "status": "failed",
                       "error": f"{type(exc).__name__}: {exc}"}
                print(f"{name} seed {seed}: FAILED ({exc})", file=sys.stderr)
            rows.append(row)

    results_path = base_out / "results.jsonl"
    results_path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    print(f"results: {results_path}")
    _print_table(_aggregate_rows(rows))
    return 1 if failures else 0


def cmd_report(args) -> int:
    base_out = Path(args.out or "out")
    results_path = base_out / "results.jsonl"
    if not results_path.exists():
        raise DataError(f"no results file at {results_path}; run ablate first")
    rows = [json.loads(line) for line in results_path.read_text().splitlines() if line.strip()]
    summary = _aggregate_rows(rows)
    if not summary:
        raise DataError(f"{results_path} holds no successful runs")

    lines = [f"{'variant':<24}  {'mean':>7}  {'std':>7}  seeds"]
    for s in summary:
        seeds = ",".join(str(x) for x in s["seeds"])
        lines.append(f"{s['variant']:<24}  {s['mean']:7.4f}  {s['std']:7.4f}  {seeds}")
    failed = [r for r in rows if r.get("status") != "ok"]
    for r in failed:
        lines.append(f"{r['variant']:<24}  FAILED seed {r['seed']}: {r.get('error', '?')}")
    summary_path = base_out / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    names = [s["variant"] for s in summary]
    ax.bar(range(len(summary)), [s["mean"] for s in summary],
           yerr=[s["std"] for s in summary], capsize=4, color="#4878cf")
    ax.set_xticks(range(len(summary)), names, rotation=20, ha="right")
    ax.set_ylabel("probe top-1 (mean over seeds)")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(base_out / "accuracy.png", dpi=120)
    plt.close(fig)

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for row in rows:
        if row.get("status") != "ok":
            continue
        metrics_path = _run_dir(base_out, row["variant"], row["seed"]) / "metrics.jsonl"
        if not metrics_path.exists():
            continue
        history = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
        label = f"{row['variant']} s{row['seed']}"
        axes[0].plot([h["epoch"] for h in history], [h["total_d"] for h in history], label=label)
        axes[1].plot([h["epoch"] for h in history], [h["total_g"] for h in history], label=label)
    axes[0].set_title("discriminator loss")
    axes[1].set_title("generator loss")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(base_out / "losses.png", dpi=120)
    plt.close(fig)
    print(f"report: {summary_path}, {base_out / 'accuracy.png'}, {base_out / 'losses.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssvgan",
                                     description="Self-supervised video GAN experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic clip dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="out/data")
    p.add_argument("--clips", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain one variant on a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default="out/data")
    p.add_argument("--variant", default=None)
    p.add_argument("--families", default=None,
                   help="comma-separated family list, overrides --variant")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="dump frozen trunk features for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="out/data")
    p.add_argument("--split", default="probe_train,probe_test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="cross-validate the activity probe")
    p.add_argument("--config", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="train and evaluate a variant/seed matrix")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--variants", default=None)
    p.add_argument("--seeds", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarize an ablation output directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SsvganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
