"""Batch command-line interface: ``orchidkit <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("orchidkit")

COMMANDS = (
    "synth-gen",
    "vae-train",
    "vae-eval",
    "ldm-train",
    "finetune-color",
    "sample",
    "predict",
    "inpaint",
    "eval-depth",
    "eval-normal",
    "eval-consistency",
    "pca-latents",
    "selftest",
)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _prepare_run(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").unlink(missing_ok=True)
    cfg.dump(out / "config.yaml")
    (out / "run.json").write_text(json.dumps({"command": command, "version": __version__, "seed": cfg.seed}, indent=2) + "\n")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_vae(cfg: RunConfig):
    from .jointvae import JointVAE

    return JointVAE.load(cfg.paths.vae)


def _new_vae(cfg: RunConfig, modalities=None):
    from .jointvae import JointVAE

    return JointVAE(
        widths=tuple(cfg.vae.widths),
        blocks=cfg.vae.blocks,
        modalities=tuple(modalities or cfg.vae.modalities),
        weights=cfg.vae.loss.build(),
        ema_decay=cfg.vae.ema_decay,
        learning_rate=cfg.optimizer.vae_lr,
        n_steps=cfg.optimizer.vae_steps,
        batch_size=cfg.optimizer.batch_size,
        random_state=cfg.seed,
    )


def _text_model(cfg: RunConfig, vae, steps=None):
    from .ldm import LatentDiffusion

    return LatentDiffusion(
        vae,
        widths=tuple(cfg.ldm.widths),
        emb_dim=cfg.ldm.emb_dim,
        T=cfg.schedule.T,
        beta_start=cfg.schedule.beta_start,
        beta_end=cfg.schedule.beta_end,
        zero_terminal_snr=cfg.schedule.zero_terminal_snr,
        p_drop=cfg.ldm.p_drop,
        guidance=cfg.ldm.guidance,
        sample_steps=cfg.sampler.text_steps,
        learning_rate=cfg.optimizer.ldm_lr,
        n_steps=cfg.optimizer.ldm_steps if steps is None else steps,
        batch_size=cfg.optimizer.batch_size,
        random_state=cfg.seed,
    )


def _color_model(cfg: RunConfig, vae):
    from .ldm import GeometryPredictor

    return GeometryPredictor(
        vae,
        widths=tuple(cfg.ldm.widths),
        emb_dim=cfg.ldm.emb_dim,
        T=cfg.schedule.T,
        beta_start=cfg.schedule.beta_start,
        beta_end=cfg.schedule.beta_end,
        zero_terminal_snr=cfg.schedule.zero_terminal_snr,
        sample_steps=cfg.sampler.color_steps,
        learning_rate=cfg.optimizer.ldm_lr,
        n_steps=cfg.optimizer.finetune_steps,
        batch_size=cfg.optimizer.batch_size,
        random_state=cfg.seed,
    )


def _emit_samples(out: Path, samples, extra: list[dict]) -> list[dict]:
    from .synthdata import write_sample

    manifest = []
    for i, (sample, meta) in enumerate(zip(samples, extra)):
        name = f"sample_{i:05d}.osmp"
        digest = write_sample(out / name, sample)
        manifest.append({"index": i, "file": name, "tags": sample.tags, "sha256": digest, **meta})
    with open(out / "manifest.jsonl", "w") as fh:
        for entry in manifest:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return manifest


def _pairs(pred_dir: Path, data_dir: Path):
    from .synthdata import load_dataset

    preds, gts = load_dataset(pred_dir), load_dataset(data_dir)
    if len(preds) > len(gts):
        raise ValueError(f"{len(preds)} predictions but only {len(gts)} ground-truth samples")
    return list(zip(preds, gts))


def _map(fn, items, jobs: int):
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _depth_item(pair):
    from .metrics import depth_metrics

    pred, gt = pair
    return depth_metrics(np.nan_to_num(pred.depth.values), gt.depth, pred_valid=pred.depth.valid)


def _normal_item(pair):
    from .metrics import normal_metrics

    pred, gt = pair
    return normal_metrics(pred.normal, gt.normal)


def _consistency_item(pair):
    pred, gt = pair
    return (np.nan_to_num(pred.depth.values), pred.normal, gt.depth, gt.intrinsics, pred.depth.valid)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(cfg, args, out):
    from .synthdata import generate_dataset

    d = cfg.dataset
    manifest = generate_dataset(d.count, d.seed, d.height, d.width, out, jobs=args.jobs)
    print(f"wrote {len(manifest)} samples to {out}")


def cmd_vae_train(cfg, args, out):
    from .synthdata import load_dataset

    samples = load_dataset(cfg.paths.data)
    vae = _new_vae(cfg).set_params(log_path=str(out / "vae_log.jsonl"))
    vae.fit(samples)
    vae.save(out / "vae.ckpt")
    report = vae.reconstruction_report(samples)
    _write_json(out / "vae_report.json", report)
    print(json.dumps(report))


def cmd_vae_eval(cfg, args, out):
    from .synthdata import load_dataset

    report = _load_vae(cfg).reconstruction_report(load_dataset(cfg.paths.data))
    _write_json(out / "vae_report.json", report)
    print(json.dumps(report))


def cmd_ldm_train(cfg, args, out):
    from .synthdata import load_dataset

    model = _text_model(cfg, _load_vae(cfg)).fit(load_dataset(cfg.paths.data))
    model.save(out / "ldm.ckpt")
    print(f"final loss {model.history_[-1]['loss']:.5f}")


def cmd_finetune_color(cfg, args, out):
    from .ldm import GeometryPredictor
    from .synthdata import load_dataset

    vae = _load_vae(cfg)
    base = _text_model(cfg, vae).load_weights(cfg.paths.ldm)
    params = _color_model(cfg, vae).get_params(deep=False)
    params.pop("vae")
    model = GeometryPredictor.from_text_model(base, **params).fit(load_dataset(cfg.paths.data))
    model.save(out / "predictor.ckpt")
    print(f"final loss {model.history_[-1]['loss']:.5f}")


def cmd_sample(cfg, args, out):
    model = _text_model(cfg, _load_vae(cfg)).load_weights(cfg.paths.ldm)
    tags = args.tags.split(",") if args.tags else []
    samples = model.sample(tags, n=args.n, seed=cfg.seed)
    meta = {"seed": cfg.seed, "steps": cfg.sampler.text_steps, "guidance": cfg.ldm.guidance, "condition": tags}
    for entry in _emit_samples(out, samples, [meta] * len(samples)):
        print(entry["file"], entry["sha256"])


def cmd_predict(cfg, args, out):
    from .metrics import mean_depth_report, mean_normal_report, write_json
    from .synthdata import load_dataset

    data = load_dataset(cfg.paths.data)[: args.limit]
    model = _color_model(cfg, _load_vae(cfg)).load_weights(cfg.paths.predictor)
    preds = model.predict_samples(data, seed=cfg.seed)
    meta = {"seed": cfg.seed, "steps": cfg.sampler.color_steps, "condition": "color_latent"}
    _emit_samples(out, preds, [meta] * len(preds))
    pairs = list(zip(preds, data))
    depth = mean_depth_report([_depth_item(p) for p in pairs])
    normal = mean_normal_report([_normal_item(p) for p in pairs])
    write_json(out / "depth_report.json", depth)
    write_json(out / "normal_report.json", normal)
    print(json.dumps({"abs_rel": depth.abs_rel, "delta1": depth.delta1, "normal_mean_deg": normal.mean_deg}))


def cmd_inpaint(cfg, args, out):
    from .inpaint import InpaintTask, inpaint, load_mask, save_mask
    from .synthdata import load_dataset

    known = load_dataset(cfg.paths.data)[args.index]
    if args.mask:
        mask = load_mask(args.mask)
    else:
        mask = np.zeros(known.shape, bool)
        mask[:, known.shape[1] // 2 :] = True
    model = _text_model(cfg, _load_vae(cfg)).load_weights(cfg.paths.ldm)
    ic = cfg.inpaint
    task = InpaintTask(
        known, mask, ic.resample_count, ic.jump_length, ic.dilation, tuple(args.tags.split(",")) if args.tags else ()
    )
    result = inpaint(task, model, steps=ic.steps, seed=cfg.seed)
    save_mask(out / "latent_mask.png", result.latent_mask)
    meta = {"seed": cfg.seed, "steps": ic.steps, "source_index": args.index, "r": ic.resample_count, "j": ic.jump_length}
    for entry in _emit_samples(out, [result.sample], [meta]):
        print(entry["file"], entry["sha256"])


def cmd_eval_depth(cfg, args, out):
    from .metrics import mean_depth_report, write_csv, write_json

    reports = _map(_depth_item, _pairs(Path(cfg.paths.predictions), Path(cfg.paths.data)), args.jobs)
    summary = mean_depth_report(reports)
    write_json(out / "depth_report.json", summary)
    write_csv(out / "depth_per_sample.csv", [{"index": i, "abs_rel": r.abs_rel, "delta1": r.delta1} for i, r in enumerate(reports)])
    print(json.dumps({"abs_rel": summary.abs_rel, "delta1": summary.delta1}))


def cmd_eval_normal(cfg, args, out):
    from .metrics import mean_normal_report, write_csv, write_json

    reports = _map(_normal_item, _pairs(Path(cfg.paths.predictions), Path(cfg.paths.data)), args.jobs)
    summary = mean_normal_report(reports)
    write_json(out / "normal_report.json", summary)
    write_csv(
        out / "normal_per_sample.csv",
        [{"index": i, "mean_deg": r.mean_deg, "pct_below_11_25": r.pct_below_11_25} for i, r in enumerate(reports)],
    )
    print(json.dumps({"mean_deg": summary.mean_deg, "pct_below_11_25": summary.pct_below_11_25}))


def cmd_eval_consistency(cfg, args, out):
    from .metrics import consistency_table, write_csv, write_json

    items = [_consistency_item(p) for p in _pairs(Path(cfg.paths.predictions), Path(cfg.paths.data))]
    report = consistency_table(items)
    write_json(out / "consistency_report.json", report)
    write_csv(out / "consistency_per_sample.csv", [{"index": i, "e": e} for i, e in enumerate(report.per_sample)])
    print(json.dumps({"mean_e": report.mean_e, "skipped": report.skipped}))


def cmd_pca_latents(cfg, args, out):
    from .metrics import latent_pca_redundancy, write_csv
    from .synthdata import load_dataset

    latents = _load_vae(cfg).transform(load_dataset(cfg.paths.data))
    rows = [{"target": t, "k": latent_pca_redundancy(latents, t)} for t in (0.5, 0.8, 0.9, 0.95, 0.99)]
    k = latent_pca_redundancy(latents, args.target)
    _write_json(out / "pca_report.json", {"channels": int(latents.shape[1]), "target": args.target, "k": k, "curve": rows})
    write_csv(out / "pca_curve.csv", rows)
    print(json.dumps({"target": args.target, "k": k, "channels": int(latents.shape[1])}))


def cmd_selftest(cfg, args, out):
    from .selftest import format_table, run_selftest

    rows = run_selftest()
    _write_json(out / "selftest.json", rows)
    print(format_table(rows))
    if not all(r["passed"] for r in rows):
        raise RuntimeError("selftest failed")


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orchidkit", description="joint color-depth-normal latent diffusion toolkit")
    parser.add_argument("--version", action="version", version=f"orchidkit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for generation and evaluation")
    common.add_argument("--out", type=Path, help="run directory (default: paths.out)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("sample", "inpaint"):
            p.add_argument("--tags", default="", help="comma-separated tag tokens")
        if name == "sample":
            p.add_argument("--n", type=int, default=1)
        if name == "predict":
            p.add_argument("--limit", type=int, default=None, help="predict only the first N samples")
        if name == "inpaint":
            p.add_argument("--index", type=int, default=0, help="dataset sample to inpaint")
            p.add_argument("--mask", type=Path, help="grayscale PNG, >= 128 is masked (default: right half)")
        if name == "pca-latents":
            p.add_argument("--target", type=float, default=0.95)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=os.environ.get("ORCHIDKIT_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except (ConfigError, OSError) as err:
        print(json.dumps({"error": "config", "command": args.command, "message": str(err)}), file=sys.stderr)
        return 2
    out = args.out or Path(cfg.paths.out)
    try:
        _prepare_run(out, cfg, args.command)
        HANDLERS[args.command](cfg, args, out)
    except Exception as err:
        log.debug("command failed", exc_info=True)
        record = {"error": type(err).__name__, "command": args.command, "message": str(err)}
        print(json.dumps(record), file=sys.stderr)
        if out.is_dir():
            _write_json(out / "error.json", record)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
