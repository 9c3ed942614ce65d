"""Operator CLI: train, eval, sample, chart, export-embeddings.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric abort.
Output directories are never overwritten unless --force is given; the
default output root comes from $SEQJEPA_OUT_ROOT.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _out_path(arg: str | None, default_name: str) -> Path:
    root = Path(os.environ.get("SEQJEPA_OUT_ROOT", "."))
    return Path(arg) if arg else root / default_name


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(
            f"output directory {path} is not empty (use --force to overwrite)"
        )
    path.mkdir(parents=True, exist_ok=True)


def cmd_train(args) -> int:
    from . import configfile, training

    cfg = configfile.load_config(args.config, args.set)
    out_dir = _out_path(args.out, "run")
    _prepare_out(out_dir, args.force)
    world = configfile.build_world(cfg)
    model_cfg = configfile.build_model_config(cfg, world)
    train_cfg = configfile.build_train_config(cfg)
    chash = training.config_hash(model_cfg, train_cfg, world.describe())
    configfile.write_manifest(out_dir, cfg, {"train_config_hash": chash})
    result = training.train(
        world, model_cfg, train_cfg, out_dir=out_dir, resume_from=args.resume
    )
    print(f"trained {train_cfg.total_steps} steps; "
          f"final loss {result.records[-1].loss:.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return EXIT_OK


def _load_eval_context(checkpoint: Path):
    from . import checkpoint as ckpt
    from . import configfile, training

    manifest_path = checkpoint.parent / "manifest.json"
    run_manifest = configfile.read_manifest(manifest_path)
    cfg = configfile.resolve_config(
        {
            k: ",".join(str(x) for x in v) if isinstance(v, list) else str(v)
            for k, v in run_manifest["config"].items()
        }
    )
    world = configfile.build_world(cfg)
    model_cfg = configfile.build_model_config(cfg, world)
    train_cfg = configfile.build_train_config(cfg)
    chash = training.config_hash(model_cfg, train_cfg, world.describe())
    manifest, arrays = ckpt.load_checkpoint(checkpoint)
    if manifest["config_hash"] != chash:
        raise configfile.ConfigError(
            "checkpoint does not match the run config beside it"
        )
    model = training.build_model(world, model_cfg, train_cfg.seed)
    ckpt.restore_model(model, manifest, arrays)
    model.eval()
    return cfg, world, model, train_cfg


def cmd_eval(args) -> int:
    from . import charts, configfile, evaluation

    cfg, world, model, train_cfg = _load_eval_context(Path(args.checkpoint))
    out_dir = _out_path(args.out, "eval")
    _prepare_out(out_dir, args.force)
    rng = np.random.default_rng(args.seed)
    probe_cfg = evaluation.ProbeConfig(seed=args.seed)
    records: list[evaluation.MetricRecord] = []
    prov = {
        "M_tr": train_cfg.M_tr,
        "seed": args.seed,
        "ablation_flags": [
            train_cfg.ablation.no_transformer_cond,
            train_cfg.ablation.no_predictor_cond,
        ],
    }

    if args.matrix:
        spec = _parse_matrix(args.matrix)
        spec.eval_episodes = args.episodes
        records = evaluation.run_matrix(
            spec,
            world_factory=lambda: configfile.build_world(cfg),
            model_cfg_factory=lambda d_a=None: configfile.build_model_config(
                cfg, world, d_a=d_a
            ),
            train_cfg_factory=lambda M_tr, seed: configfile.build_train_config(
                cfg, M_tr=M_tr, seed=seed
            ),
            probe_cfg=probe_cfg,
        )
        for metric in sorted({r.metric for r in records}):
            try:
                csv_text = evaluation.matrix_csv(records, metric)
            except ValueError:
                continue
            (out_dir / f"matrix_{metric}.csv").write_text(csv_text)
            charts.render_matrix_heatmap(
                csv_text, metric, out_dir / f"matrix_{metric}.svg"
            )
    else:
        m_needed = max(args.M_val, args.M + 1, 2)
        episodes = [
            world.sample_episode(rng, m_needed) for _ in range(args.episodes)
        ]
        labels = evaluation.class_labels(episodes)
        if args.probe == "class_on_agg":
            feats = evaluation.aggregate_features(
                model, episodes, args.M_val,
                no_transformer_cond=train_cfg.ablation.no_transformer_cond,
            )
            val = evaluation.linear_probe(feats, labels, probe_cfg)
            records.append(evaluation.MetricRecord(
                "top1", val, {**prov, "M_val": args.M_val}))
        elif args.probe == "class_on_encoder":
            feats = evaluation.encoder_features(model, episodes)
            val = evaluation.linear_probe(feats, labels, probe_cfg)
            records.append(evaluation.MetricRecord("top1", val, dict(prov)))
        elif args.probe == "action_regression":
            feats, targets = evaluation.action_pair_features(model, episodes)
            r2 = evaluation.regression_r2(
                feats, targets,
                evaluation.regression_head_for(world.conditioning_kind),
                probe_cfg,
            )
            records.append(evaluation.MetricRecord("r2", r2.r2, dict(prov)))
        elif args.probe == "path_integration":
            episodes_m = [
                world.sample_episode(rng, args.M) for _ in range(args.episodes)
            ]
            r2 = evaluation.path_integration(
                model, episodes_m, world.conditioning_kind,
                ablate=args.ablate, cfg=probe_cfg,
            )
            records.append(evaluation.MetricRecord(
                "path_r2", r2.r2,
                {**prov, "M": args.M, "ablate": args.ablate}))
        elif args.probe == "retrieval":
            res = evaluation.retrieval_metrics(
                model, world, episodes, rng, n_candidates=args.candidates
            )
            for name, val in (("mrr", res.mrr), ("hit1", res.hit1),
                              ("hit5", res.hit5)):
                records.append(evaluation.MetricRecord(name, val, dict(prov)))
        else:
            raise configfile.ConfigError(f"unknown probe {args.probe!r}")

    with open(out_dir / "metrics.jsonl", "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    for rec in records:
        print(f"{rec.metric}: {rec.value:.4f}")
    return EXIT_OK


def _parse_matrix(items: list[str]):
    from . import evaluation

    from .configfile import ConfigError

    fields = {"mtr": [1], "mval": [1], "seeds": [0]}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"matrix spec {item!r} is not key=values")
        key, vals = item.split("=", 1)
        key = key.strip().lower()
        if key not in fields:
            raise ConfigError(f"unknown matrix axis {key!r}")
        fields[key] = [int(v) for v in vals.split(",") if v.strip()]
    return evaluation.MatrixSpec(
        M_tr=fields["mtr"], M_val=fields["mval"], seeds=fields["seeds"]
    )


def cmd_sample(args) -> int:
    from PIL import Image

    from . import configfile
    from .saccades import SaccadeWorld, save_saliency

    cfg = configfile.load_config(args.config, args.set)
    out_dir = _out_path(args.out, "episode")
    _prepare_out(out_dir, args.force)
    world = configfile.build_world(cfg)
    rng = np.random.default_rng(args.seed)
    scene = saliency = None
    if isinstance(world, SaccadeWorld):
        episode, scene, saliency = world.sample_episode_debug(rng, args.M)
    else:
        episode = world.sample_episode(rng, args.M)

    def to_img(arr: np.ndarray) -> Image.Image:
        return Image.fromarray(
            (np.transpose(arr, (1, 2, 0)) * 255).round().astype(np.uint8)
        )

    for i, view in enumerate(episode.views):
        to_img(view).save(out_dir / f"view_{i:02d}.png")
    lines = [f"source_id {episode.source_id}", f"class_id {episode.class_id}"]
    for i, act in enumerate(episode.actions):
        vals = " ".join(f"{v:.9g}" for v in act.values)
        lines.append(f"action {i} kind {act.kind} values {vals}")
    cum = episode.cumulative_action
    lines.append(
        "cumulative kind %s values %s"
        % (cum.kind, " ".join(f"{v:.9g}" for v in cum.values))
    )
    for i, lat in enumerate(episode.latents):
        lines.append(f"latents {i} {lat}")
    (out_dir / "record.txt").write_text("\n".join(lines) + "\n")
    if scene is not None:
        to_img(scene).save(out_dir / "scene.png")
        save_saliency(out_dir / "saliency.salg", saliency)
        overlay = scene.copy()
        for lat in episode.latents:
            x, y = int(lat.cx), int(lat.cy)
            overlay[0, max(0, y - 1) : y + 2, max(0, x - 1) : x + 2] = 1.0
            overlay[1:, max(0, y - 1) : y + 2, max(0, x - 1) : x + 2] = 0.0
        to_img(overlay).save(out_dir / "fixations.png")
    print(f"episode dumped to {out_dir}")
    return EXIT_OK


def cmd_chart(args) -> int:
    from . import charts

    records = charts.read_jsonl(args.metrics)
    if not records:
        raise charts.ChartError(f"metrics file {args.metrics} is empty")
    out = _out_path(args.out, "chart.svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists (use --force)")
    charts.render_chart(records, out)
    print(f"chart written to {out}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    from . import evaluation
    from .saliency_io import save_grid

    _, world, model, train_cfg = _load_eval_context(Path(args.checkpoint))
    out_dir = _out_path(args.out, "embeddings")
    _prepare_out(out_dir, args.force)
    rng = np.random.default_rng(args.seed)
    episodes = [
        world.sample_episode(rng, max(args.M_val, 1))
        for _ in range(args.episodes)
    ]
    if args.which == "encoder":
        feats = evaluation.encoder_features(model, episodes)
    else:
        feats = evaluation.aggregate_features(
            model, episodes, args.M_val,
            no_transformer_cond=train_cfg.ablation.no_transformer_cond,
        )
    save_grid(out_dir / "embeddings.salg", feats)
    labels = evaluation.class_labels(episodes)
    (out_dir / "labels.txt").write_text(
        "\n".join(str(x) for x in labels) + "\n"
    )
    print(f"exported {feats.shape[0]} embeddings of width {feats.shape[1]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqjepa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out")
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--probe", default="class_on_agg",
                   choices=["class_on_agg", "class_on_encoder",
                            "action_regression", "path_integration",
                            "retrieval"])
    e.add_argument("--M-val", dest="M_val", type=int, default=1)
    e.add_argument("--M", type=int, default=2,
                   help="sequence length for path integration")
    e.add_argument("--ablate", default="none",
                   choices=["none", "actions", "vision"])
    e.add_argument("--episodes", type=int, default=512)
    e.add_argument("--candidates", type=int, default=20)
    e.add_argument("--matrix", nargs="*", default=None,
                   metavar="AXIS=V1,V2", help="e.g. mtr=1,3 mval=1,3,5")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="dump a debug episode")
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--M", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("chart", help="render charts from metrics JSONL")
    c.add_argument("metrics")
    c.add_argument("--out")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_chart)

    x = sub.add_parser("export-embeddings",
                       help="export frozen representations")
    x.add_argument("checkpoint")
    x.add_argument("--which", default="aggregate",
                   choices=["encoder", "aggregate"])
    x.add_argument("--M-val", dest="M_val", type=int, default=1)
    x.add_argument("--episodes", type=int, default=512)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out")
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv: list[str] | None = None) -> int:
    from . import configfile, training
    from .charts import ChartError
    from .checkpoint import CheckpointError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except training.TrainingAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (configfile.ConfigError, CheckpointError, ChartError,
            FileExistsError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
