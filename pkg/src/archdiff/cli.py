"""Command-line driver: data generation, pretraining, training, sampling,
evaluation, the iterative experiment, and the distance-distribution plot.

Exit codes: 0 success, 1 usage/config, 2 I/O, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ConfigError, LOSS_COMPONENTS, RunConfig, load_config, paper_scale, to_json
from .diffusion import (
    NumericalError,
    TrainedModel,
    TrainingCorpus,
    _record_seed,
    load_checkpoint,
    predict_params,
    save_checkpoint,
    train_model,
)
from .geometry import GeometryError, JawModel, TransformParams, align_jaw
from .meshio import MeshIOError, save_jaw
from .metrics import aggregate_reports, distance_histogram, evaluate_record
from .synth import (
    DatasetRecord,
    build_dataset,
    load_manifest,
    load_record,
    manifest_up_to_date,
)

DEFAULT_BINS = [round(0.25 * i, 2) for i in range(1, 13)]  # 0.25 .. 3.0 mm


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are exit code 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _load_or_default_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "paper_scale", False):
        config = paper_scale(config)
    overrides = {}
    for flag in ("no_mae", "no_global", "no_fp", "no_dpm"):
        if getattr(args, flag, False):
            overrides[flag] = True
    if getattr(args, "loss_mask", None):
        overrides["loss_mask"] = args.loss_mask
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["sample_steps"] = args.steps
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        import dataclasses

        config = dataclasses.replace(config, **overrides)
    return config


def _default_data_dir(args) -> Path:
    if args.data:
        return Path(args.data)
    cache = os.environ.get("ARCHDIFF_CACHE")
    if cache:
        return Path(cache) / "dataset"
    raise ConfigError("pass --data or set ARCHDIFF_CACHE")


def _manifest_hash(root: Path) -> str:
    return hashlib.sha256((root / "manifest.json").read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    config = _load_or_default_config(args)
    out_dir = _default_data_dir(args)
    if (out_dir / "manifest.json").exists():
        existing = load_manifest(out_dir)
        candidate = type(existing)(
            root=out_dir,
            arch=config.arch,
            perturb=config.perturb,
            n_patients=config.n_patients,
            test_fraction=config.test_fraction,
            records=existing.records,
        )
        if (
            existing.arch == config.arch
            and existing.perturb == config.perturb
            and existing.n_patients == config.n_patients
            and existing.test_fraction == config.test_fraction
            and manifest_up_to_date(candidate)
        ):
            print(f"up-to-date, no changes (manifest {_manifest_hash(out_dir)})")
            return 0
    manifest = build_dataset(
        config.n_patients, config.arch, config.perturb, out_dir, config.test_fraction
    )
    n_train = len(manifest.ids("train"))
    n_test = len(manifest.ids("test"))
    print(
        f"wrote {len(manifest.records)} records ({n_train} train / {n_test} test) "
        f"to {out_dir} (manifest {_manifest_hash(out_dir)})"
    )
    return 0


def _load_corpus(config: RunConfig, data_dir: Path) -> TrainingCorpus:
    manifest = load_manifest(data_dir)
    enc_config = config.encoder_config()

    def records():
        for entry in manifest.records:
            yield load_record(manifest, entry["id"]), entry["split"]

    return TrainingCorpus.from_records(records(), enc_config)


def _train_teeth(corpus: TrainingCorpus):
    """Tooth meshes of the training inputs (pretraining corpus).

    Record tensors hold vertices only; rebuild lightweight meshes on the
    shared topology.
    """
    from .geometry import ToothMesh

    faces = corpus.faces.numpy()
    hierarchy = corpus.hierarchy.numpy()
    teeth = []
    for rec in corpus.train:
        for i, label in enumerate(rec.labels):
            teeth.append(
                ToothMesh(label, rec.input_verts[i].double().numpy(), faces, hierarchy)
            )
    return teeth


def cmd_pretrain(args) -> int:
    import torch

    from .encoders import pretrain_mae

    config = _load_or_default_config(args)
    if config.no_mae:
        raise ConfigError("--no-mae replaces the mesh encoder; nothing to pretrain")
    corpus = _load_corpus(config, _default_data_dir(args))
    weights, history = pretrain_mae(
        _train_teeth(corpus),
        config.encoder_config(),
        epochs=args.mae_epochs or max(config.mae_epochs, 1),
        seed=config.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"weights": weights, "history": history, "config_echo": to_json(config)}, out)
    print(f"pretrained {len(history)} epochs; final loss {history[-1]:.6f}; wrote {out}")
    return 0


def cmd_train(args) -> int:
    import torch

    config = _load_or_default_config(args)
    data_dir = _default_data_dir(args)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(config, data_dir)

    print(
        f"training: epochs {config.epochs}, batch {config.batch_size}, lr {config.lr}, "
        f"lambdas ({config.lambda_cd}, {config.lambda_diff}, {config.lambda_pos}), "
        f"losses {sorted(config.active_losses())}, seed {config.seed}"
    )
    pretrained = None
    if args.pretrained:
        pretrained = torch.load(args.pretrained, weights_only=False)["weights"]
        print(f"initializing local encoder from {args.pretrained}")
    elif config.mae_epochs > 0 and not config.no_mae:
        from .encoders import pretrain_mae

        print(f"pretraining local encoder for {config.mae_epochs} epochs")
        pretrained, _ = pretrain_mae(
            _train_teeth(corpus),
            config.encoder_config(),
            epochs=config.mae_epochs,
            seed=config.seed,
        )

    trained = train_model(
        corpus,
        config.train_settings(),
        pretrained_local=pretrained,
        log=print,
        checkpoint_path=run_dir / "train_state.pt",
        resume=args.resume,
    )
    settings = config.train_settings()
    checkpoint = run_dir / "checkpoint.pt"
    save_checkpoint(
        trained,
        checkpoint,
        config_echo=to_json(config),
        denoiser_kwargs=dict(
            d_model=settings.denoiser_dim,
            blocks=settings.denoiser_blocks,
            heads=settings.heads,
            mlp_ratio=settings.mlp_ratio,
        ),
    )
    curve = run_dir / "loss_curve.tsv"
    with curve.open("w") as fh:
        fh.write("epoch\tcd\tdiff\tpos\ttotal\n")
        for row in trained.loss_history:
            fh.write(
                "%d\t%.8f\t%.8f\t%.8f\t%.8f\n"
                % (row["epoch"], row["cd"], row["diff"], row["pos"], row["total"])
            )
    print(f"checkpoint [{trained.tag}] -> {checkpoint}")
    print(f"loss curve -> {curve}")
    return 0


def _evaluate_records(
    trained: TrainedModel,
    records: List[DatasetRecord],
    sample_steps: int,
    seed: int,
):
    per_record, baseline = [], []
    for rec in records:
        params = predict_params(
            trained, rec, n_steps=sample_steps, seed=seed ^ _record_seed(rec.record_id)
        )
        pred = align_jaw(rec.input, params)
        row = evaluate_record(pred, rec.gt, params, rec.z0)
        row["id"] = rec.record_id
        per_record.append(row)
        base = evaluate_record(
            rec.input, rec.gt, TransformParams.zeros(rec.gt.labels), rec.z0
        )
        base["id"] = rec.record_id
        baseline.append(base)
    return per_record, baseline


METRIC_KEYS = ("add", "pa_add", "csa", "me_rot", "fd_cur")


def _write_reports(out_dir: Path, per_record, baseline) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "per_record.tsv").open("w") as fh:
        cols = ["id"] + list(METRIC_KEYS) + [f"baseline_{k}" for k in METRIC_KEYS]
        fh.write("\t".join(cols) + "\n")
        for row, base in zip(per_record, baseline):
            vals = [row["id"]]
            vals += ["%.8f" % row[k] for k in METRIC_KEYS]
            vals += ["%.8f" % base[k] for k in METRIC_KEYS]
            fh.write("\t".join(vals) + "\n")

    summary = {}
    for name, rows in (("model", per_record), ("identity_baseline", baseline)):
        agg = aggregate_reports(rows)
        summary[name] = {
            k: {
                "mean": float(np.mean([r[k] for r in rows])),
                "std": float(np.std([r[k] for r in rows])),
            }
            for k in METRIC_KEYS
        }
        summary[name]["degenerate_registration"] = agg.degenerate_registration
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")

    lines = ["%-18s" % "model" + "".join("%-16s" % k for k in METRIC_KEYS)]
    for name in ("identity_baseline", "model"):
        cells = [
            "%.3f +/- %.3f" % (summary[name][k]["mean"], summary[name][k]["std"])
            for k in METRIC_KEYS
        ]
        lines.append("%-18s" % name + "".join("%-16s" % c for c in cells))
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")


def _config_for_inference(args, echo: str) -> RunConfig:
    """CLI config if given, else the checkpoint's config echo."""
    if args.config or not echo:
        return _load_or_default_config(args)
    from .config import from_json

    config = from_json(echo)
    overrides = {}
    if getattr(args, "steps", None):
        overrides["sample_steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        import dataclasses

        config = dataclasses.replace(config, **overrides)
    return config


def cmd_eval(args) -> int:
    trained, echo = load_checkpoint(args.checkpoint)
    config = _config_for_inference(args, echo)
    manifest = load_manifest(_default_data_dir(args))
    records = [load_record(manifest, rid) for rid in manifest.ids("test")]
    if args.limit:
        records = records[: args.limit]
    if not records:
        raise ConfigError("dataset has no test records")
    first = records[0].gt.teeth[records[0].gt.labels[0]]
    if first.n_patches * trained.enc_config.patch_faces != len(first.faces):
        raise ConfigError(
            "checkpoint patch size does not match the dataset topology"
        )
    per_record, baseline = _evaluate_records(
        trained, records, config.sample_steps, config.seed
    )
    out_dir = Path(args.out)
    _write_reports(out_dir, per_record, baseline)
    summary = json.loads((out_dir / "summary.json").read_text())
    print(
        "eval on %d records: ADD %.3f (baseline %.3f), PA-ADD %.3f, FD_cur %.3f "
        "(baseline %.3f)"
        % (
            len(records),
            summary["model"]["add"]["mean"],
            summary["identity_baseline"]["add"]["mean"],
            summary["model"]["pa_add"]["mean"],
            summary["model"]["fd_cur"]["mean"],
            summary["identity_baseline"]["fd_cur"]["mean"],
        )
    )
    print(f"reports -> {out_dir}")
    return 0


def cmd_sample(args) -> int:
    trained, echo = load_checkpoint(args.checkpoint)
    config = _config_for_inference(args, echo)
    manifest = load_manifest(_default_data_dir(args))
    rec = load_record(manifest, args.record)
    params = predict_params(
        trained, rec, n_steps=config.sample_steps,
        seed=config.seed ^ _record_seed(rec.record_id),
    )
    pred = align_jaw(rec.input, params)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_jaw(JawModel(pred.teeth, metadata=f"{rec.record_id}_pred"), out_dir)
    z = params.stacked()
    lines = [" ".join("%.17g" % x for x in row) for row in z]
    (out_dir / "params.txt").write_text("\n".join(lines) + "\n")
    print(f"sampled {rec.record_id} -> {out_dir}")
    return 0


def cmd_iterate(args) -> int:
    if args.rounds < 1:
        raise ConfigError("--rounds must be at least 1")
    trained, echo = load_checkpoint(args.checkpoint)
    config = _config_for_inference(args, echo)
    manifest = load_manifest(_default_data_dir(args))
    rec = load_record(manifest, args.record)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    current = rec.input
    rows = []
    for round_idx in range(1, args.rounds + 1):
        stage = DatasetRecord(
            record_id=rec.record_id,
            patient_id=rec.patient_id,
            gt=rec.gt,
            input=current,
            z0=TransformParams.zeros(rec.gt.labels),
        )
        params = predict_params(
            trained, stage, n_steps=config.sample_steps,
            seed=config.seed ^ _record_seed(rec.record_id),
        )
        current = align_jaw(current, params)
        report = evaluate_record(current, rec.gt)
        report["round"] = round_idx
        rows.append(report)
        save_jaw(
            JawModel(current.teeth, metadata=f"{rec.record_id}_round{round_idx}"),
            out_dir / f"round_{round_idx}",
        )
    with (out_dir / "trajectory.tsv").open("w") as fh:
        fh.write("round\tadd\tpa_add\tfd_cur\n")
        for row in rows:
            fh.write(
                "%d\t%.8f\t%.8f\t%.8f\n"
                % (row["round"], row["add"], row["pa_add"], row["fd_cur"])
            )
    print(f"{args.rounds} rounds -> {out_dir} (final ADD {rows[-1]['add']:.4f})")
    return 0


def _read_add_column(path: Path) -> List[float]:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split("\t")
    col = header.index("add")
    return [float(line.split("\t")[col]) for line in lines[1:]]


def cmd_plot_dist(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not args.reports:
        raise ConfigError("pass at least one per_record.tsv report")
    bins = (
        [float(x) for x in args.bins.split(",")] if args.bins else list(DEFAULT_BINS)
    )
    out_image = Path(args.out)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    table_lines = ["series\t" + "\t".join("%.3f" % b for b in bins)]
    for report in args.reports:
        path = Path(report)
        dists = _read_add_column(path)
        acc = distance_histogram(dists, bins)
        label = path.parent.name or path.stem
        ax.plot(bins, acc, marker="o", label=label)
        table_lines.append(label + "\t" + "\t".join("%.6f" % a for a in acc))
    ax.set_xlabel("mean pointwise distance (mm)")
    ax.set_ylabel("accuracy within range")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_image, dpi=120)
    plt.close(fig)
    table_path = out_image.with_suffix(".tsv")
    table_path.write_text("\n".join(table_lines) + "\n")
    print(f"plot -> {out_image}; table -> {table_path}")
    return 0


def cmd_dump_default_config(args) -> int:
    text = to_json(paper_scale() if args.paper_scale else RunConfig())
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="archdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="run config JSON (defaults used if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--data", help="dataset directory (or $ARCHDIFF_CACHE/dataset)")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked pretraining of the local encoder")
    common(p)
    p.add_argument("--out", required=True, help="output weights file")
    p.add_argument("--mae-epochs", type=int, dest="mae_epochs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the arrangement model")
    common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--pretrained", help="pretrained local-encoder weights")
    p.add_argument("--resume", action="store_true", help="resume from train_state.pt")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--no-mae", action="store_true", dest="no_mae",
                   help="point-based local encoder")
    p.add_argument("--no-global", action="store_true", dest="no_global")
    p.add_argument("--no-fp", action="store_true", dest="no_fp")
    p.add_argument("--no-dpm", action="store_true", dest="no_dpm",
                   help="direct regression head")
    p.add_argument("--loss-mask", dest="loss_mask",
                   help=f"active loss components, comma list of {LOSS_COMPONENTS}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample transforms for one record")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="sampling steps")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--limit", type=int, help="evaluate at most N records")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("iterate", help="feed the output back as input for N rounds")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("plot-dist", help="cumulative pointwise-distance plot")
    p.add_argument("reports", nargs="*", help="per_record.tsv files")
    p.add_argument("--bins", help="comma-separated thresholds in mm")
    p.add_argument("--out", required=True, help="output image path")
    p.set_defaults(func=cmd_plot_dist)

    p = sub.add_parser("dump-default-config", help="print the default config")
    p.add_argument("--out")
    p.add_argument("--paper-scale", action="store_true", dest="paper_scale")
    p.set_defaults(func=cmd_dump_default_config)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args) or 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except GeometryError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 1
    except (MeshIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
