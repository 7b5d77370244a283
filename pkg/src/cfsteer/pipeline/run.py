"""End-to-end counterfactual runs: generate, refine, evaluate and persist."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..errors import CfsteerError, InputError
from ..metrics import (
    METRIC_VERSION,
    MetricsReport,
    attribute_changes,
    cosine_similarities,
    cout,
    embed,
    fid,
    lpips_proxy,
    sfid,
)
from ..models import JointClassifier, save_checkpoint
from ..refine import build_mask, dilate, inpaint, save_mask_png
from ..steering import generate_counterfactual, generate_l1_counterfactual
from .artifacts import load_artifacts, save_encoder
from .config import RunConfig, stage_key

log = logging.getLogger(__name__)


@dataclass
class CEResult:
    """One counterfactual and everything derived on the way to it."""

    sample_id: int
    x: np.ndarray
    y: int
    y_target: int
    x_l1: np.ndarray
    mask: np.ndarray
    x_initial: np.ndarray
    x_final: np.ndarray
    trace: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


def _selection(config, artifacts):
    n = config.metrics.n_samples
    test = artifacts.test
    x = test.images[:n]
    y = np.asarray(test.labels[:n])
    ids = np.asarray(test.ids[:n])
    y_target = np.asarray(config.target_for(y), dtype=np.int64)
    return x, y, y_target, ids


def joint_model(config, artifacts):
    t_star = config.steering.resolved_noise_level(artifacts.schedule.T)
    return JointClassifier(artifacts.classifier, artifacts.denoiser, artifacts.schedule, t_star)


def _chunks(n, size):
    return [slice(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _fan_out(config, n, work):
    """Apply ``work(slice)`` to every chunk; returns results in chunk order."""
    slices = _chunks(n, config.steering.chunk_size)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            return list(zip(slices, pool.map(work, slices)))
    return [(sl, work(sl)) for sl in slices]


def _stage(config, name, key, compute):
    """Cache a dict of arrays under ``cache_dir/stages`` when stage caching is on.

    The result carries ``seconds``, the time the stage took when it was computed.
    """
    path = Path(config.cache_dir) / "stages" / f"{name}-{key}.npz"
    if config.stage_cache and path.exists():
        with np.load(path, allow_pickle=False) as data:
            out = {k: data[k] for k in data.files}
        out["failed"] = json.loads(str(out.pop("failed_json")))
        out["seconds"] = float(out["seconds"])
        return out
    t0 = time.perf_counter()
    out = compute()
    out["seconds"] = time.perf_counter() - t0
    if config.stage_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {k: v for k, v in out.items() if k != "failed"}
        np.savez_compressed(path, failed_json=np.asarray(json.dumps(out["failed"])), **payload)
    return out


def _steer(config, x, y_target, ids, fn):
    """Run ``fn(x, y', ids)`` chunk-wise; chunks that raise are recorded and left unchanged."""
    n = len(x)
    out = np.array(x, dtype=np.float32, copy=True)
    prob = np.full(n, np.nan)
    failed = []

    def work(sl):
        try:
            res, trace = fn(x[sl], y_target[sl], ids[sl])
            return res.numpy(), trace.as_arrays()["target_prob"][-1] if len(trace) else None, None
        except CfsteerError as e:
            return None, None, f"{type(e).__name__}: {e}"

    for sl, (res, p, err) in _fan_out(config, n, work):
        if err is not None:
            failed += [{"sample_id": int(i), "error": err} for i in ids[sl]]
            log.warning("chunk %s failed: %s", sl, err)
            continue
        out[sl] = res
        if p is not None:
            prob[sl] = p
    return {"x": out, "target_prob": prob, "failed": failed}


def generate(config, artifacts):
    """Produce x'', masks, x' initial and x' final for the selected test images."""
    x, y, y_target, ids = _selection(config, artifacts)
    F_joint = joint_model(config, artifacts)
    steer = config.steering
    timings = {}
    base = {
        "artifacts": artifacts.keys,
        "dataset": config.dataset,
        "n": config.metrics.n_samples,
        "targets": config.target_map,
        "steering": replace(steer, spurious_weight=0.0, chunk_size=0),
    }

    t0 = time.perf_counter()
    l1 = _stage(
        config, "l1", stage_key(base),
        lambda: _steer(config, x, y_target, ids,
                       lambda xb, yb, ib: generate_l1_counterfactual(xb, yb, F_joint, steer, sample_ids=ib)),
    )
    timings["l1"] = time.perf_counter() - t0
    timings["l1_compute"] = l1["seconds"]

    r = config.refine
    masks = np.stack([
        dilate(build_mask(a, b, r.threshold, r.window), r.dilation).m for a, b in zip(x, l1["x"])
    ])

    t0 = time.perf_counter()
    channel = artifacts.channel
    sw_key = stage_key(base, {"spurious_weight": steer.spurious_weight, "l1_weight": 0.0})
    initial = _stage(
        config, "initial", sw_key,
        lambda: _steer(config, x, y_target, ids,
                       lambda xb, yb, ib: generate_counterfactual(
                           xb, yb, F_joint, channel, replace(steer, l1_weight=0.0), sample_ids=ib)),
    )
    timings["initial"] = time.perf_counter() - t0
    timings["initial_compute"] = initial["seconds"]

    t0 = time.perf_counter()
    t_refine = r.resolved_t_refine(artifacts.schedule.T)
    final = np.array(initial["x"], copy=True)
    refine_failed = []
    # an empty mask means nothing was modified, so there is nothing to refine
    todo = np.flatnonzero(masks.reshape(len(x), -1).any(axis=1))
    for lo in range(0, len(todo), steer.chunk_size):
        sl = todo[lo : lo + steer.chunk_size]
        try:
            with torch.no_grad():
                final[sl] = inpaint(
                    x[sl], initial["x"][sl], masks[sl], artifacts.denoiser, artifacts.schedule,
                    t_refine, seed=config.seed * 100003 + 3 * int(lo), literal=r.literal, paste=r.paste,
                ).numpy()
        except CfsteerError as e:
            refine_failed += [{"sample_id": int(i), "error": f"{type(e).__name__}: {e}"} for i in ids[sl]]
    timings["refine"] = time.perf_counter() - t0

    failed = {}
    for stage, items in (("l1", l1["failed"]), ("initial", initial["failed"]), ("refine", refine_failed)):
        for item in items:
            failed.setdefault(item["sample_id"], f"{stage}: {item['error']}")
    results = []
    for i in range(len(x)):
        results.append(CEResult(
            int(ids[i]), x[i], int(y[i]), int(y_target[i]), l1["x"][i], masks[i],
            initial["x"][i], final[i],
            trace={"target_prob_initial": float(initial["target_prob"][i]),
                   "target_prob_l1": float(l1["target_prob"][i])},
        ))
    return results, failed, timings


def _predict(f, images, batch_size=500):
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(f(torch.as_tensor(np.asarray(images[i : i + batch_size]), dtype=torch.float32)))
    return torch.cat(out).argmax(1).numpy()


def _r(v):
    return float(round(float(v), 10))


def evaluate(config, artifacts, results, failed=None):
    """MetricsReport over the successful results; failures are listed, not scored."""
    failed = failed or {}
    ok = [r for r in results if r.sample_id not in failed]
    if not ok:
        raise InputError("no successful counterfactuals to evaluate")
    f, enc = artifacts.classifier, artifacts.encoder
    x = np.stack([r.x for r in ok])
    xi = np.stack([r.x_initial for r in ok])
    xf = np.stack([r.x_final for r in ok])
    x2 = np.stack([r.x_l1 for r in ok])
    yt = np.asarray([r.y_target for r in ok])
    pred_f, pred_i, pred_2 = _predict(f, xf), _predict(f, xi), _predict(f, x2)

    test = artifacts.test
    pos = {int(sid): k for k, sid in enumerate(test.ids)}
    rows = [pos[r.sample_id] for r in ok]
    attrs_x = {"shape": np.asarray(test.causal)[rows], "hue": np.asarray(test.spurious)[rows]}
    shape_f, hue_f = artifacts.probe.predict(xf)
    shape_i, hue_i = artifacts.probe.predict(xi)
    cd_f = attribute_changes(attrs_x, {"shape": shape_f, "hue": hue_f}, "shape")
    cd_i = attribute_changes(attrs_x, {"shape": shape_i, "hue": hue_i}, "shape")

    e_x, e_f = embed(enc, x), embed(enc, xf)
    s3 = cosine_similarities(e_x, e_f)
    lp = np.atleast_1d(lpips_proxy(x, xf, enc))
    couts = np.asarray([cout(a, b, r.y, r.y_target, f, config.metrics.cout_steps) for a, b, r in zip(x, xf, ok)])
    l1 = np.abs(xf - x).mean(axis=(1, 2, 3))
    linf = np.abs(xf - x).max(axis=(1, 2, 3))

    per_sample = []
    for k, r in enumerate(ok):
        per_sample.append({
            "sample_id": r.sample_id,
            "y": r.y,
            "y_target": r.y_target,
            "prediction": int(pred_f[k]),
            "flipped": bool(pred_f[k] == yt[k]),
            "flipped_initial": bool(pred_i[k] == yt[k]),
            "flipped_l1": bool(pred_2[k] == yt[k]),
            "cout": _r(couts[k]),
            "cd": int(cd_f[k]),
            "cd_initial": int(cd_i[k]),
            "hue": int(attrs_x["hue"][k]),
            "hue_final": int(hue_f[k]),
            "shape_final": int(shape_f[k]),
            "s3": _r(s3[k]),
            "lpips_proxy": _r(lp[k]),
            "l1": _r(l1[k]),
            "linf": _r(linf[k]),
            "mask_fraction": _r(r.mask.mean()),
        })
    report = MetricsReport(
        fr=_r(np.mean(pred_f == yt)),
        cout=_r(couts.mean()),
        cd=_r(cd_f.mean()),
        s3=_r(s3.mean()),
        fid=_r(fid(e_x, e_f)),
        sfid=_r(sfid(e_x, e_f, config.metrics.sfid_repeats, config.seed)),
        lpips_proxy=_r(lp.mean()),
        per_sample=per_sample,
        meta={
            "config_checksum": config.checksum(),
            "metric_version": METRIC_VERSION,
            "n_requested": len(results),
            "n_evaluated": len(ok),
            "failures": [{"sample_id": int(k), "error": v} for k, v in sorted(failed.items())],
            "fr_initial": _r(np.mean(pred_i == yt)),
            "fr_l1": _r(np.mean(pred_2 == yt)),
            "cd_initial": _r(cd_i.mean()),
            "mask_fraction": _r(np.mean([r.mask.mean() for r in ok])),
            "l1": _r(l1.mean()),
            "spurious_weight": config.steering.spurious_weight,
            "checksums": artifacts.checksums(),
        },
    )
    bad = report.check_ranges(len(("shape", "hue")))
    if bad:
        raise InputError(f"metric range invariants violated: {bad}")
    return report


def new_run_dir(config, prefix=""):
    root = Path(config.output_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{prefix}{stamp}-{config.checksum()[:10]}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def persist(run_dir, config, artifacts, results, report, timings):
    run_dir = Path(run_dir)
    (run_dir / "config.json").write_text(config.to_json())
    models = run_dir / "models"
    models.mkdir(exist_ok=True)
    save_checkpoint(models / "classifier.pt", "classifier", artifacts.classifier)
    save_checkpoint(models / "denoiser.pt", "denoiser", artifacts.denoiser)
    save_encoder(artifacts.encoder, models / "encoder.pt")
    np.save(models / "projection.npy", artifacts.projection.causal_basis)
    torch.save(artifacts.head.state_dict(), models / "head.pt")
    samples, masks = run_dir / "samples", run_dir / "masks"
    samples.mkdir(exist_ok=True)
    masks.mkdir(exist_ok=True)
    index = []
    for r in results:
        name = f"{r.sample_id:06d}"
        np.savez_compressed(
            samples / f"{name}.npz", x=r.x, x_l1=r.x_l1, x_initial=r.x_initial, x_final=r.x_final,
            y=r.y, y_target=r.y_target,
        )
        save_mask_png(r.mask, masks / f"{name}.png")
        index.append({"sample_id": r.sample_id, "sample": f"samples/{name}.npz", "mask": f"masks/{name}.png",
                      **r.trace})
    (samples / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    (run_dir / "metrics.json").write_text(report.to_json())
    (run_dir / "metrics.csv").write_text(report.to_csv())
    (run_dir / "timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True))
    return run_dir


def run_experiment(config: RunConfig, artifacts=None, run_dir=None):
    """Full run; returns (run directory, MetricsReport)."""
    config.validate()
    t0 = time.perf_counter()
    artifacts = artifacts or load_artifacts(config)
    timings = {"artifacts": time.perf_counter() - t0}
    results, failed, t = generate(config, artifacts)
    timings.update(t)
    t0 = time.perf_counter()
    report = evaluate(config, artifacts, results, failed)
    timings["evaluate"] = time.perf_counter() - t0
    run_dir = Path(run_dir) if run_dir is not None else new_run_dir(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    persist(run_dir, config, artifacts, results, report, timings)
    log.info("run written to %s: %s", run_dir, report.summary())
    return run_dir, report


def load_results(run_dir):
    """Read CEResults back from a run directory."""
    from ..refine import load_mask_png

    run_dir = Path(run_dir)
    index = json.loads((run_dir / "samples" / "index.json").read_text())
    out = []
    for row in index:
        with np.load(run_dir / row["sample"]) as d:
            out.append(CEResult(
                row["sample_id"], d["x"], int(d["y"]), int(d["y_target"]), d["x_l1"],
                load_mask_png(run_dir / row["mask"]), d["x_initial"], d["x_final"],
            ))
    return out
