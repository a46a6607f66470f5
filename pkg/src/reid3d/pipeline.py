"""Stage orchestration over a run directory.

Every stage reads its inputs from, and writes its outputs to, the run
directory and leaves a manifest under `manifests/<stage>.json` listing
inputs, outputs, the config hash, seed and library versions.  A stage
whose manifest matches the current config hash and whose outputs all
exist is skipped unless forced.
"""

from __future__ import annotations

import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .chips import VARIANTS, chip3d, crop2d_chip, whole_image_chip
from .config import PipelineConfig
from .errors import ReidError, StageError
from .fit import FitResult, Observation, fit_model, pck, reproject_keypoints
from .geometry import make_template
from .identity import (IdentityDb, db_from_rows, knn_classify, load_db, project2d, read_embeddings_csv,
                       top1_accuracy, write_embeddings_csv, write_space_csv)
from .metric import EmbeddingNet, embed_batch, train
from .render import read_rgb
from .roi import (HttpSpeciesClient, StubSpeciesClient, eval_detections, filter_detections,
                  gate_many, read_detections, write_detections)
from .synth import build_dataset
from .texture import backproject, crop_region, load_chip, prepare_chip, save_chip, save_texture

log = logging.getLogger(__name__)

STAGES = ("synth", "filter-rois", "fit", "extract", "train", "enroll", "identify", "eval", "export-space")


@dataclass
class RunContext:
    run_dir: Path
    config: PipelineConfig
    force: bool = False
    jobs: int = 1

    def path(self, *parts) -> Path:
        return self.run_dir.joinpath(*parts)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _load(path: Path):
    return json.loads(path.read_text())


def _versions() -> dict:
    import scipy

    return {"reid3d": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _rel(ctx: RunContext, p: Path) -> str:
    return p.relative_to(ctx.run_dir).as_posix()


# --------------------------------------------------------------------------
# stage bodies; each returns the list of files it wrote


def _synth(ctx: RunContext) -> list[Path]:
    cfg = ctx.config.synth.build(ctx.config.seed)
    data = ctx.path("data")
    manifest = build_dataset(cfg, data, jobs=ctx.jobs)
    outs = [data / "manifest.json", data / "detections.jsonl", data / "detections_gt.json"]
    for s in manifest["samples"]:
        outs += [data / s["image"], data / s["annotations"], data / s["mask"]]
        if not s["augmented"]:
            outs.append(data / "images" / f"{s['id']}.species.json")
    return outs


def _species_client(ctx: RunContext):
    roi = ctx.config.roi
    if roi.species_url:
        return HttpSpeciesClient(roi.species_url, roi.species_timeout)
    return StubSpeciesClient(roi.species_stub_dir)


def _filter_rois(ctx: RunContext) -> list[Path]:
    roi = ctx.config.roi
    data = ctx.path("data")
    dets = read_detections(data / "detections.jsonl")
    kept = filter_detections(dets, roi.conf_thresh, roi.nest_iou, roi.containment)
    gt = _load(data / "detections_gt.json")
    before = eval_detections(dets, gt, roi.match_iou)
    after = eval_detections(kept, gt, roi.match_iou)
    images = sorted({d.image_id for d in kept})
    passed = gate_many([data / "images" / f"{i}.png" for i in images], _species_client(ctx),
                       roi.target_species, roi.fail_open, roi.max_concurrency)
    gate = {i: bool(p) for i, p in zip(images, passed)}
    accepted = [i for i in images if gate[i]]
    out = ctx.path("rois")
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "kept.jsonl", kept)
    _dump(out / "gate.json", gate)
    _dump(out / "accepted.json", accepted)
    _dump(out / "detection_eval.json", {"all": before.to_json(), "kept": after.to_json(),
                                        "n_detections": len(dets), "n_kept": len(kept)})
    return [out / "kept.jsonl", out / "gate.json", out / "accepted.json", out / "detection_eval.json"]


def _samples(ctx: RunContext) -> list[dict]:
    """Manifest samples whose source sighting passed the RoI filter and gate."""
    manifest = _load(ctx.path("data", "manifest.json"))
    accepted = set(_load(ctx.path("rois", "accepted.json")))
    return [s for s in manifest["samples"] if s["source"] in accepted]


def _fit_one(args):
    data, sample, template_cfg, fit_cfg = args
    model = make_template(template_cfg)
    ann = _load(data / sample["annotations"])
    obs = Observation.from_json(ann["observation"])
    fit = fit_model(model, obs, config=fit_cfg)
    pred = reproject_keypoints(model, fit)
    score = pck(pred, obs.keypoints, obs.bbox, visible=obs.visible)
    err = float(np.linalg.norm(pred - obs.keypoints, axis=1)[obs.visible].mean())
    return fit.to_json(), score, err


def _pool_map(ctx: RunContext, fn, tasks):
    if ctx.jobs > 1:
        with ProcessPoolExecutor(max_workers=ctx.jobs) as pool:
            return list(pool.map(fn, tasks, chunksize=8))
    return [fn(t) for t in tasks]


def _fit(ctx: RunContext) -> list[Path]:
    samples = _samples(ctx)
    data = ctx.path("data")
    tcfg, fcfg = ctx.config.template.build(), ctx.config.fit.build()
    results = _pool_map(ctx, _fit_one, [(data, s, tcfg, fcfg) for s in samples])
    outs, rows = [], []
    for s, (fit, score, err) in zip(samples, results):
        p = ctx.path("fits", f"{s['id']}.json")
        _dump(p, fit)
        outs.append(p)
        rows.append({"id": s["id"], "pck": score, "error_px": err, "converged": fit["converged"],
                     "augmented": s["augmented"]})
    scores = np.array([r["pck"] for r in rows])
    errs = np.array([r["error_px"] for r in rows])
    summary = {"samples": rows, "pck_mean": float(scores.mean()), "pck_min": float(scores.min()),
               "pck_all_correct": float(np.mean(scores == 1.0)), "error_px_mean": float(errs.mean()),
               "converged": int(sum(r["converged"] for r in rows))}
    _dump(ctx.path("fits", "summary.json"), summary)
    return outs + [ctx.path("fits", "summary.json")]


def _extract_one(args):
    run_dir, sample, template_cfg, region = args
    data = run_dir / "data"
    model = make_template(template_cfg)
    image = read_rgb(data / sample["image"])
    obs = Observation.from_json(_load(data / sample["annotations"])["observation"])
    fit = FitResult.from_json(_load(run_dir / "fits" / f"{sample['id']}.json"))
    tex = backproject(image, fit, model)
    save_texture(tex, run_dir / "textures" / sample["id"], region)
    chips = {"whole": whole_image_chip(image), "crop2d": crop2d_chip(image, obs.keypoints),
             "chip3d": crop_region(tex, region)}
    outs = [run_dir / "textures" / f"{sample['id']}{ext}" for ext in (".color.png", ".visibility.png", ".json")]
    for v, chip in chips.items():
        stem = run_dir / "chips" / v / sample["id"]
        save_chip(chip, stem)
        outs += [stem.with_name(stem.name + ".png"), stem.with_name(stem.name + ".mask.png")]
    return [str(p) for p in outs], bool(chips["chip3d"].mask.any())


def _extract(ctx: RunContext) -> list[Path]:
    samples = _samples(ctx)
    for sub in ["textures"] + [f"chips/{v}" for v in VARIANTS]:
        ctx.path(sub).mkdir(parents=True, exist_ok=True)
    tcfg = ctx.config.template.build()
    region = tuple(ctx.config.texture.region)
    results = _pool_map(ctx, _extract_one, [(ctx.run_dir, s, tcfg, region) for s in samples])
    outs, index = [], []
    for s, (paths, ok) in zip(samples, results):
        outs += [Path(p) for p in paths]
        index.append({"id": s["id"], "individual_id": s["individual_id"], "split": s["split"],
                      "source": s["source"], "augmented": s["augmented"], "chip3d_valid": ok})
    _dump(ctx.path("chips", "index.json"), index)
    return outs + [ctx.path("chips", "index.json")]


def _chip_tensors(ctx: RunContext, variant: str, rows: list[dict]) -> np.ndarray:
    dtype = np.dtype(ctx.config.train.precision)
    out = np.zeros((len(rows), 64, 64, 4), dtype)
    for i, r in enumerate(rows):
        chip = load_chip(ctx.path("chips", variant, r["id"]))
        if chip.mask.any():
            out[i] = prepare_chip(chip)
    return out


def _train(ctx: RunContext) -> list[Path]:
    index = _load(ctx.path("chips", "index.json"))
    ids = sorted({r["individual_id"] for r in index})
    rows = [r for r in index if r["split"] == "train"]
    labels = np.array([ids.index(r["individual_id"]) for r in rows])
    cfg = ctx.config.train.build(ctx.config.seed)
    outs = []
    for v in VARIANTS:
        x = _chip_tensors(ctx, v, rows)
        log.info("training %s on %d chips", v, len(x))
        net, losses = train(x, labels, cfg, n_classes=len(ids))
        w = ctx.path("models", f"{v}.weights.json")
        w.parent.mkdir(parents=True, exist_ok=True)
        net.save(w, {"variant": v, "identities": ids, "epochs": cfg.epochs, "seed": cfg.seed})
        losses.write_csv(ctx.path("models", f"{v}.loss.csv"))
        outs += [w, ctx.path("models", f"{v}.loss.csv")]
    return outs


def _originals(ctx: RunContext) -> list[dict]:
    return [r for r in _load(ctx.path("chips", "index.json")) if not r["augmented"]]


def _enroll(ctx: RunContext) -> list[Path]:
    rows = _originals(ctx)
    outs = []
    for v in VARIANTS:
        net = EmbeddingNet.load(ctx.path("models", f"{v}.weights.json"))
        emb = embed_batch(net, _chip_tensors(ctx, v, rows).astype(net.params["conv1.w"].dtype))
        p = ctx.path("embeddings", f"{v}.csv")
        p.parent.mkdir(parents=True, exist_ok=True)
        write_embeddings_csv(p, [r["individual_id"] for r in rows], [r["split"] for r in rows],
                             [r["id"] for r in rows], emb)
        outs.append(p)
    return outs


def _split_db(path) -> tuple[IdentityDb, list]:
    ids, splits, sources, emb = read_embeddings_csv(path)
    train_rows = [i for i, s in enumerate(splits) if s == "train"]
    db = db_from_rows([ids[i] for i in train_rows], [splits[i] for i in train_rows],
                      [sources[i] for i in train_rows], emb[train_rows])
    queries = [(sources[i], ids[i], emb[i]) for i, s in enumerate(splits) if s == "test"]
    return db, queries


def _identify(ctx: RunContext) -> list[Path]:
    k = ctx.config.identify.k
    outs = []
    for v in VARIANTS:
        db, queries = _split_db(ctx.path("embeddings", f"{v}.csv"))
        preds = []
        for source, true, q in queries:
            m = knn_classify(db, q, min(k, len(db)))
            preds.append({"source": source, "true": true, "predicted": m.predicted,
                          "neighbours": list(m.neighbours), "distances": list(m.distances)})
        p = ctx.path("predictions", f"{v}.json")
        _dump(p, {"k": k, "predictions": preds})
        outs.append(p)
    return outs


def _eval(ctx: RunContext) -> list[Path]:
    k = ctx.config.identify.k
    acc = {}
    for v in VARIANTS:
        db, queries = _split_db(ctx.path("embeddings", f"{v}.csv"))
        acc[v] = top1_accuracy(db, [q for _, _, q in queries], [t for _, t, _ in queries], min(k, len(db)))
    fits = _load(ctx.path("fits", "summary.json"))
    dets = _load(ctx.path("rois", "detection_eval.json"))
    n_ids = len({e.individual_id for e in load_db(ctx.path("embeddings", "chip3d.csv")).entries})
    result = {
        "top1": acc,
        "chance": 1.0 / n_ids,
        "n_identities": n_ids,
        "pck": {"mean": fits["pck_mean"], "min": fits["pck_min"], "all_correct": fits["pck_all_correct"],
                "error_px_mean": fits["error_px_mean"]},
        "detection_ap": {"all": dets["all"]["ap"], "kept": dets["kept"]["ap"]},
    }
    _dump(ctx.path("eval.json"), result)
    return [ctx.path("eval.json")]


def _export_space(ctx: RunContext) -> list[Path]:
    outs = []
    for v in VARIANTS:
        ids, splits, _, emb = read_embeddings_csv(ctx.path("embeddings", f"{v}.csv"))
        p = ctx.path("space", f"{v}.csv")
        p.parent.mkdir(parents=True, exist_ok=True)
        write_space_csv(p, ids, splits, project2d(emb))
        outs.append(p)
    return outs


_BODIES = {"synth": _synth, "filter-rois": _filter_rois, "fit": _fit, "extract": _extract, "train": _train,
           "enroll": _enroll, "identify": _identify, "eval": _eval, "export-space": _export_space}


def stage_inputs(ctx: RunContext, stage: str) -> list[Path]:
    p = ctx.path
    return {
        "synth": [],
        "filter-rois": [p("data", "detections.jsonl"), p("data", "detections_gt.json"), p("data", "manifest.json")],
        "fit": [p("data", "manifest.json"), p("rois", "accepted.json")],
        "extract": [p("data", "manifest.json"), p("rois", "accepted.json"), p("fits", "summary.json")],
        "train": [p("chips", "index.json")],
        "enroll": [p("chips", "index.json")] + [p("models", f"{v}.weights.json") for v in VARIANTS],
        "identify": [p("embeddings", f"{v}.csv") for v in VARIANTS],
        "eval": [p("embeddings", f"{v}.csv") for v in VARIANTS]
        + [p("fits", "summary.json"), p("rois", "detection_eval.json")],
        "export-space": [p("embeddings", f"{v}.csv") for v in VARIANTS],
    }[stage]


def _is_current(ctx: RunContext, stage: str) -> bool:
    m = ctx.path("manifests", f"{stage}.json")
    if not m.exists():
        return False
    try:
        man = _load(m)
    except json.JSONDecodeError:
        return False
    if man.get("config_hash") != ctx.config.digest():
        return False
    return all(ctx.path(o).exists() for o in man.get("outputs", []))


def run_stage(stage: str, ctx: RunContext) -> bool:
    """Run one stage; returns False when it was skipped as already current."""
    if stage not in _BODIES:
        raise StageError(stage, f"unknown stage; expected one of {', '.join(STAGES)}", exit_code=2)
    for path in stage_inputs(ctx, stage):
        if not path.exists():
            raise StageError(stage, f"missing input: {path}", exit_code=2)
    if not ctx.force and _is_current(ctx, stage):
        log.info("%s is up to date, skipping", stage)
        return False
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    try:
        outputs = _BODIES[stage](ctx)
    except StageError:
        raise
    except (ReidError, OSError, KeyError, ValueError) as exc:
        raise StageError(stage, str(exc)) from exc
    manifest = {
        "stage": stage,
        "config_hash": ctx.config.digest(),
        "seed": ctx.config.seed,
        "inputs": sorted(_rel(ctx, p) for p in stage_inputs(ctx, stage)),
        "outputs": sorted(_rel(ctx, Path(p)) for p in outputs),
        "versions": _versions(),
    }
    _dump(ctx.path("manifests", f"{stage}.json"), manifest)
    _dump(ctx.path("config.json"), ctx.config.dump())
    return True


def run_all(ctx: RunContext) -> dict:
    for stage in STAGES:
        run_stage(stage, ctx)
    return report(ctx.run_dir)


def report(run_dir) -> dict:
    """Write report.json and report.txt from a completed run."""
    run_dir = Path(run_dir)
    missing = [s for s in STAGES if not (run_dir / "manifests" / f"{s}.json").exists()]
    if missing or not (run_dir / "eval.json").exists():
        raise StageError("report", f"incomplete run, missing stages: {', '.join(missing) or 'eval'}", exit_code=2)
    ev = _load(run_dir / "eval.json")
    labels = {"whole": "whole image", "crop2d": "2D hindquarter crop", "chip3d": "3D back-projected chip"}
    rows = [{"variant": v, "input": labels[v], "top1": ev["top1"][v]} for v in VARIANTS]
    out = {"accuracy": rows, "chance": ev["chance"], "n_identities": ev["n_identities"],
           "pck_at_0_1": ev["pck"], "detection_ap": ev["detection_ap"]}
    _dump(run_dir / "report.json", out)
    lines = [f"{'input':<26}{'top-1':>8}", "-" * 34]
    lines += [f"{r['input']:<26}{r['top1']:>8.3f}" for r in rows]
    lines += ["", f"chance level             {ev['chance']:.3f}",
              f"PCK@0.1 mean             {ev['pck']['mean']:.3f}",
              f"detection AP (all/kept)  {ev['detection_ap']['all']:.3f} / {ev['detection_ap']['kept']:.3f}"]
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n")
    return out
