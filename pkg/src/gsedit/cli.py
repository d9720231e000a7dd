"""Command-line entry points.

Subcommands: gen-data, train-denoiser, reconstruct, render, edit, ablate,
eval. Every command takes a single --seed; any internal randomness flows
through named sub-streams of it, so identical invocations produce
byte-identical artifacts. Exit codes: 0 success, 2 validation error,
3 IO error, 4 numeric failure (NaN in a produced tensor).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import torch

from .attention import AlignmentConfig
from .denoiser import MixtureComponent, MixtureOracle, ToyDenoiser, TrainingSet, \
    train_toy_denoiser
from .diffusion import Condition, GuidanceConfig, NoiseSchedule, build_schedule, \
    load_schedule
from .gten import read_gten, read_png, write_gten, write_png
from .pipeline import (ConsistencyReport, EditJob, PatchCodec, StyleClassifier,
                       depth_to_latent_grid, evaluate, generate_synthetic_dataset,
                       normalize_depth, quantize_image, random_scene, render_record,
                       ring_cameras, run_edit, subseed)
from .render import optimize_scene, psnr, render
from .scene import Camera, Scene

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class NumericError(RuntimeError):
    pass


def _check_finite(name: str, tensor: torch.Tensor) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise NumericError(f"non-finite values in {name}")


def _apply_threads(args) -> None:
    threads = args.threads
    if threads is None:
        env = os.environ.get("GSEDIT_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        if threads < 1:
            raise ValueError("--threads must be >= 1")
        torch.set_num_threads(threads)


# ---------------------------------------------------------------------------
# dataset on disk


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_synthetic_dataset(args.seed, args.scenes, args.views,
                                         width=args.size, height=args.size)
    manifest = {"seed": args.seed, "width": args.size, "height": args.size,
                "scenes": []}
    for i, rec in enumerate(records):
        _check_finite(f"scene {i} renders", rec.images)
        scene_file = f"scene_{i:03d}.json"
        rec.scene.save(out / scene_file)
        entry = {"label": rec.label, "scene": scene_file, "views": []}
        for v, cam in enumerate(rec.cameras):
            stem = f"s{i:03d}_v{v:02d}"
            cam.save(out / f"{stem}_camera.json")
            write_gten(out / f"{stem}_image.gten", rec.images[v].numpy())
            write_gten(out / f"{stem}_depth.gten", rec.depths[v].numpy())
            write_gten(out / f"{stem}_alpha.gten", rec.alphas[v].numpy())
            write_png(out / f"{stem}_image.png", rec.images[v].numpy())
            write_png(out / f"{stem}_depth.png",
                      normalize_depth(rec.depths[v], rec.alphas[v]).numpy())
            entry["views"].append({
                "camera": f"{stem}_camera.json",
                "image": f"{stem}_image.gten",
                "depth": f"{stem}_depth.gten",
                "alpha": f"{stem}_alpha.gten",
                "image_png": f"{stem}_image.png",
                "depth_png": f"{stem}_depth.png",
            })
        manifest["scenes"].append(entry)

    clf = StyleClassifier()
    clf.fit([img for r in records for img in r.images],
            [r.label for r in records for _ in range(r.images.shape[0])])
    (out / "classifier.json").write_text(json.dumps(clf.to_dict(), indent=1))
    manifest["classifier"] = "classifier.json"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {args.scenes} scenes x {args.views} views to {out}")
    return EXIT_OK


def _load_dataset_dir(path: Path):
    manifest = json.loads((path / "manifest.json").read_text())
    scenes = []
    for entry in manifest["scenes"]:
        views = []
        for v in entry["views"]:
            views.append({
                "camera": Camera.load(path / v["camera"]),
                "image": torch.from_numpy(read_gten(path / v["image"])),
                "depth": torch.from_numpy(read_gten(path / v["depth"])),
                "alpha": torch.from_numpy(read_gten(path / v["alpha"])),
            })
        scenes.append({"label": entry["label"], "scene_file": entry["scene"],
                       "views": views})
    return manifest, scenes


# ---------------------------------------------------------------------------
# denoiser training


def save_codec(codec: PatchCodec, path: Path) -> None:
    doc = {"patch_size": codec.patch_size, "mean": codec.mean.tolist(),
           "std": codec.std.tolist()}
    path.write_text(json.dumps(doc, indent=1))


def load_codec(path: Path) -> PatchCodec:
    doc = json.loads(path.read_text())
    return PatchCodec(patch_size=doc["patch_size"],
                      mean=torch.tensor(doc["mean"], dtype=torch.float64),
                      std=torch.tensor(doc["std"], dtype=torch.float64))


def build_training_set(scenes, codec: PatchCodec) -> TrainingSet:
    latents, labels, depths = [], [], []
    probe = codec.encode(scenes[0]["views"][0]["image"])
    grid_hw = probe.shape[-2:]
    for entry in scenes:
        for v in entry["views"]:
            latents.append(codec.encode(v["image"]))
            labels.append(entry["label"])
            depths.append(depth_to_latent_grid(v["depth"], v["alpha"], grid_hw))
    return TrainingSet(latents=torch.stack(latents),
                       labels=torch.tensor(labels, dtype=torch.long),
                       depths=torch.stack(depths))


def cmd_train_denoiser(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, scenes = _load_dataset_dir(data_dir)

    codec = PatchCodec(patch_size=args.patch_size)
    codec.fit_whitening([v["image"] for e in scenes for v in e["views"]])
    dataset = build_training_set(scenes, codec)

    sched = build_schedule(args.train_steps_schedule, args.ddim_steps)
    model, report = train_toy_denoiser(dataset, sched, num_steps=args.steps,
                                       batch_size=args.batch, lr=args.lr,
                                       seed=args.seed, log_every=args.log_every)
    for p in model.parameters():
        _check_finite("trained weights", p)

    model.save_checkpoint(out)
    save_codec(codec, out / "codec.json")
    sched.save(out / "schedule.txt")
    (out / "training_report.json").write_text(json.dumps(
        {"val_eps_mse": report["val_eps_mse"],
         "baseline_eps_mse": report["baseline_eps_mse"],
         "num_steps": report["num_steps"],
         "final_train_mse": sum(report["loss_curve"][-50:]) / min(50, len(report["loss_curve"]))},
        indent=1))
    print(f"val eps-mse {report['val_eps_mse']:.4f} "
          f"(baseline {report['baseline_eps_mse']:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruction and rendering


def cmd_reconstruct(args) -> int:
    data_dir = Path(args.data)
    _, scenes = _load_dataset_dir(data_dir)
    if not 0 <= args.scene_index < len(scenes):
        raise ValueError(f"scene index {args.scene_index} out of range")
    entry = scenes[args.scene_index]
    views = [(v["camera"], v["image"], None) for v in entry["views"]]

    gen = torch.Generator().manual_seed(subseed(args.seed, "reconstruct-init"))
    init = random_scene(gen, label=entry["label"],
                        num_gaussians=args.gaussians)
    fitted = optimize_scene(init, views, num_steps=args.steps)
    _check_finite("fitted scene means", fitted.means)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fitted.save(out / "scene.json")
    scores = [psnr(render(fitted, cam).color, tgt) for cam, tgt, _ in views]
    mean_psnr = sum(scores) / len(scores)
    (out / "report.txt").write_text(f"mean_psnr = {mean_psnr:.4f}\n")
    print(f"mean train-view psnr {mean_psnr:.2f} dB")
    return EXIT_OK


def cmd_render(args) -> int:
    scene = Scene.load(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.camera:
        cams = [Camera.load(p) for p in args.camera]
    else:
        cams = ring_cameras(args.views, width=args.size, image_height=args.size)
    for i, cam in enumerate(cams):
        view = render(scene, cam)
        _check_finite(f"render {i}", view.color)
        write_png(out / f"view_{i:02d}.png", view.color.numpy())
        write_gten(out / f"view_{i:02d}_color.gten", view.color.numpy())
        write_gten(out / f"view_{i:02d}_depth.gten", view.depth.numpy())
        write_png(out / f"view_{i:02d}_depth.png",
                  normalize_depth(view.depth, view.alpha).numpy())
    print(f"rendered {len(cams)} views to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# editing


def load_job(path: Path) -> dict:
    doc = json.loads(path.read_text())
    required = ["scene", "cameras", "source_label", "target_label"]
    missing = [k for k in required if k not in doc]
    if missing:
        raise ValueError(f"job file missing keys: {missing}")
    return doc


def build_job(doc: dict, base: Path) -> EditJob:
    scene = Scene.load(base / doc["scene"])
    cameras = [Camera.load(base / p) for p in doc["cameras"]]
    masks = None
    if doc.get("masks"):
        if len(doc["masks"]) != len(cameras):
            raise ValueError("mask count must match camera count")
        masks = [torch.from_numpy(read_png(base / p)) >= 0.5 for p in doc["masks"]]
    align = AlignmentConfig(lam=float(doc.get("lambda", 0.6)),
                            reference_ids=list(doc.get("reference_ids", [])),
                            enabled=bool(doc.get("align", True)))
    return EditJob(scene=scene, cameras=cameras,
                   source_condition=Condition(int(doc["source_label"])),
                   target_condition=Condition(int(doc["target_label"])),
                   guidance=GuidanceConfig(omega=float(doc.get("omega", 1.0))),
                   alignment=align,
                   num_references=int(doc.get("num_references", 4)),
                   masks=masks, seed=int(doc.get("seed", 0)))


def _unit_oracle(sched: NoiseSchedule) -> MixtureOracle:
    comp = MixtureComponent(mean=torch.zeros(1, 1, 1), variance=1.0, weight=1.0)
    return MixtureOracle([comp], {lab: [0] for lab in range(16)}, sched)


def load_denoiser(spec: str):
    """Returns (denoiser, codec, schedule) from 'oracle' or a checkpoint dir."""
    if spec == "oracle":
        sched = build_schedule(1000, 50)
        codec = PatchCodec()
        codec.mean = torch.zeros(codec.channels(), dtype=torch.float64)
        codec.std = torch.ones(codec.channels(), dtype=torch.float64)
        return _unit_oracle(sched), codec, sched
    ckpt = Path(spec)
    model = ToyDenoiser.load_checkpoint(ckpt)
    codec = load_codec(ckpt / "codec.json")
    sched = load_schedule(ckpt / "schedule.txt")
    return model, codec, sched


def _write_edit_result(out: Path, res, job: EditJob) -> None:
    for v in range(res.edited_images.shape[0]):
        write_png(out / f"original_{v:02d}.png", res.original_images[v].numpy())
        write_png(out / f"edited_{v:02d}.png", res.edited_images[v].numpy())
        write_png(out / f"depth_{v:02d}.png",
                  normalize_depth(res.depths[v], res.alphas[v]).numpy())
        write_gten(out / f"original_{v:02d}.gten", res.original_images[v].numpy())
        write_gten(out / f"edited_{v:02d}.gten", res.edited_images[v].numpy())
        write_gten(out / f"depth_{v:02d}.gten", res.depths[v].numpy())
        write_gten(out / f"alpha_{v:02d}.gten", res.alphas[v].numpy())
    for v, cam in enumerate(job.cameras):
        cam.save(out / f"camera_{v:02d}.json")
    res.edited_scene.save(out / "edited_scene.json")


def cmd_edit(args) -> int:
    job_path = Path(args.job)
    doc = load_job(job_path)
    job = build_job(doc, job_path.parent)
    denoiser, codec, sched = load_denoiser(args.denoiser)

    res = run_edit(job, denoiser, sched, codec, opt_steps=args.opt_steps)
    _check_finite("edited images", res.edited_images)
    _check_finite("edited scene", res.edited_scene.means)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_edit_result(out, res, job)

    clf, target = _load_classifier(args)
    report = evaluate(res.original_images, res.edited_images, res.depths,
                      res.alphas, job.cameras, clf, target)
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def _load_classifier(args):
    if getattr(args, "classifier", None):
        clf = StyleClassifier.from_dict(json.loads(Path(args.classifier).read_text()))
        return clf, None if args.target_label is None else args.target_label
    return None, None


def cmd_eval(args) -> int:
    run = Path(args.run)
    originals, edited, depths, alphas, cams = [], [], [], [], []
    v = 0
    while (run / f"edited_{v:02d}.gten").exists():
        originals.append(torch.from_numpy(read_gten(run / f"original_{v:02d}.gten")))
        edited.append(torch.from_numpy(read_gten(run / f"edited_{v:02d}.gten")))
        depths.append(torch.from_numpy(read_gten(run / f"depth_{v:02d}.gten")))
        alphas.append(torch.from_numpy(read_gten(run / f"alpha_{v:02d}.gten")))
        cams.append(Camera.load(run / f"camera_{v:02d}.json"))
        v += 1
    if v == 0:
        raise ValueError(f"no edit artifacts found under {run}")
    clf, target = _load_classifier(args)
    report = evaluate(torch.stack(originals), torch.stack(edited),
                      torch.stack(depths), torch.stack(alphas), cams, clf, target)
    Path(args.out).write_text(report.to_text()) if args.out else None
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation grid


def _input_hash(res) -> str:
    h = hashlib.sha256()
    h.update(res.original_images.numpy().tobytes())
    h.update(res.depths.numpy().tobytes())
    return h.hexdigest()[:16]


def cmd_ablate(args) -> int:
    """Four arms sharing one job/seed: identity control, random-noise start,
    inverted start without alignment, inverted start with alignment."""
    job_path = Path(args.job)
    doc = load_job(job_path)
    denoiser, codec, sched = load_denoiser(args.denoiser)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def arm_job(**overrides) -> EditJob:
        d = dict(doc)
        d.update(overrides)
        return build_job(d, job_path.parent)

    align_off = {"align": False}
    arms = [
        ("identity", arm_job(target_label=doc["source_label"], omega=1.0, **align_off), False),
        ("noise", arm_job(**align_off), True),
        ("inverted", arm_job(**align_off), False),
        ("aligned", arm_job(align=True), False),
    ]

    clf, target = _load_classifier(args)
    if target is None and clf is not None:
        target = int(doc["target_label"])

    rows, lines, reports = [], [], {}
    for name, job, from_noise in arms:
        res = run_edit(job, denoiser, sched, codec, opt_steps=args.opt_steps,
                       start_from_noise=from_noise)
        _check_finite(f"arm {name}", res.edited_images)
        arm_dir = out / name
        arm_dir.mkdir(exist_ok=True)
        _write_edit_result(arm_dir, res, job)
        rep = evaluate(res.original_images, res.edited_images, res.depths,
                       res.alphas, job.cameras, clf, target)
        (arm_dir / "report.txt").write_text(rep.to_text())
        reports[name] = rep
        lines.append(f"{name}.input_hash = {_input_hash(res)}")
        for ln in rep.to_text().splitlines():
            lines.append(f"{name}.{ln}")
        rows.append(torch.cat(list(res.edited_images), dim=1))

    write_png(out / "grid.png", torch.cat(rows, dim=0).numpy())
    lines.append("dispersion_align_on_lt_off = "
                 + str(reports["aligned"].color_dispersion
                       < reports["inverted"].color_dispersion).lower())
    lines.append("magnitude_inverted_lt_noise = "
                 + str(reports["inverted"].edit_magnitude
                       < reports["noise"].edit_magnitude).lower())
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[-2:]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsedit",
                                description="Depth-conditioned multi-view scene editing")
    p.add_argument("--threads", type=int, default=None,
                   help="cap torch worker threads (env GSEDIT_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a labeled synthetic multi-view dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=3)
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-denoiser", help="train the toy denoiser on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=6000)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--patch-size", type=int, default=4)
    t.add_argument("--train-steps-schedule", type=int, default=1000)
    t.add_argument("--ddim-steps", type=int, default=50)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train_denoiser)

    r = sub.add_parser("reconstruct", help="fit a fresh scene to dataset images")
    r.add_argument("--data", required=True)
    r.add_argument("--scene-index", type=int, default=0)
    r.add_argument("--gaussians", type=int, default=50)
    r.add_argument("--steps", type=int, default=1000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("render", help="render a scene from saved or ring cameras")
    v.add_argument("--scene", required=True)
    v.add_argument("--camera", action="append", default=None)
    v.add_argument("--views", type=int, default=8)
    v.add_argument("--size", type=int, default=64)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_render)

    e = sub.add_parser("edit", help="run a full edit job")
    e.add_argument("--job", required=True)
    e.add_argument("--denoiser", required=True,
                   help="'oracle' or a checkpoint directory")
    e.add_argument("--opt-steps", type=int, default=1000)
    e.add_argument("--classifier", default=None)
    e.add_argument("--target-label", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_edit)

    a = sub.add_parser("ablate", help="run the four-arm ablation grid")
    a.add_argument("--job", required=True)
    a.add_argument("--denoiser", required=True)
    a.add_argument("--opt-steps", type=int, default=1000)
    a.add_argument("--classifier", default=None)
    a.add_argument("--target-label", type=int, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("eval", help="recompute the consistency report for an edit run")
    ev.add_argument("--run", required=True)
    ev.add_argument("--classifier", default=None)
    ev.add_argument("--target-label", type=int, default=None)
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else 0
    try:
        _apply_threads(args)
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
